"""Attention-guiding objective.

Three task losses are combined with learned homoscedastic-uncertainty
weights ``exp(-s_k) * L_k + s_k``:

* ``cls``: cross entropy on the slide label;
* ``mse``: squared deviation between heuristic-guidance weights and model
  attention, averaged over patches;
* ``inout``: attention mass outside the tissue minus mass inside, over p.

All functions accept torch tensors (gradients flow) or array-likes, and
broadcast over leading batch axes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from sag.grid import ShapeError
from sag.models import DTYPE, TASKS, AttentionRecord, HeadPartition


def _t(x):
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(x, dtype=DTYPE)


def _check_aligned(w, ma, what):
    if w.shape[-1] != ma.shape[-1]:
        raise ShapeError(f"{what} has {w.shape[-1]} patches, attention has {ma.shape[-1]}")


def loss_mse(hg, ma):
    hg, ma = _t(hg), _t(ma)
    _check_aligned(hg, ma, "HG guidance")
    return ((hg - ma) ** 2).mean(dim=-1)


def loss_inout(tg, ma):
    tg, ma = _t(tg), _t(ma)
    _check_aligned(tg, ma, "TG guidance")
    sign = torch.where(tg > 0, -1.0, 1.0).to(ma.dtype)
    return (sign * ma).sum(dim=-1) / ma.shape[-1]


def loss_cls(logits, label):
    logits = _t(logits)
    label = torch.as_tensor(label, dtype=torch.long)
    c = logits.shape[-1]
    if (label < 0).any() or (label >= c).any():
        raise ValueError(f"label out of range for {c} classes")
    if not torch.isfinite(logits).all():
        raise ValueError("logits must be finite")
    if logits.ndim == 1:
        return -torch.log_softmax(logits, dim=-1)[label]
    return -torch.log_softmax(logits, dim=-1).gather(-1, label.unsqueeze(-1)).squeeze(-1)


def uncertainty_weighted_total(parts: dict, log_vars) -> torch.Tensor:
    """``sum_k exp(-s_k) * L_k + s_k`` over the tasks present in ``parts``.

    ``log_vars`` is indexed by task name (a dict) or by position in
    ``TASKS`` (a length-3 tensor).
    """
    total = None
    for name in TASKS:
        if name not in parts:
            continue
        value = _t(parts[name])
        s = log_vars[name] if isinstance(log_vars, dict) else log_vars[TASKS.index(name)]
        s = _t(s)
        if not (torch.isfinite(value).all() and torch.isfinite(s).all()):
            raise ValueError(f"non-finite {name} loss or log-variance")
        term = torch.exp(-s) * value + s
        total = term if total is None else total + term
    if total is None:
        raise ValueError("no loss terms to combine")
    return total


@dataclass
class Guidance:
    """Per-scale guidance tensors for a batch of bags.

    ``hg[s]`` / ``tg[s]`` are (n, p_s) weight tensors; ``*_valid[s]`` are
    (n,) booleans, False where the bag's signal is degenerate or absent.
    """

    hg: dict = field(default_factory=dict)
    hg_valid: dict = field(default_factory=dict)
    tg: dict = field(default_factory=dict)
    tg_valid: dict = field(default_factory=dict)


@dataclass
class LossBreakdown:
    l_cls: torch.Tensor
    l_mse: torch.Tensor | None
    l_inout: torch.Tensor | None
    weighted_total: torch.Tensor
    log_variances: dict
    skipped: dict = field(default_factory=dict)
    terms: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        def f(x):
            return None if x is None else float(x.detach())

        return {
            "l_cls": f(self.l_cls),
            "l_mse": f(self.l_mse),
            "l_inout": f(self.l_inout),
            "weighted_total": f(self.weighted_total),
            "log_variances": {k: float(v) for k, v in self.log_variances.items()},
            "skipped": dict(self.skipped),
            "terms": {k: len(v) for k, v in self.terms.items()},
        }


def _masked_mean(values, valid):
    """Mean of ``values`` (n,) over ``valid`` rows, or None when none are valid."""
    if valid is None:
        return values.mean()
    n = int(valid.sum())
    if n == 0:
        return None
    return (values * valid.to(values.dtype)).sum() / n


def sag_loss(logits, labels, record: AttentionRecord, guidance: Guidance | None,
             partition: HeadPartition, log_vars, *, use_hg: bool = True,
             use_tg: bool = True, hg_target: str = "head") -> LossBreakdown:
    """Assemble the guided objective for a batch.

    ``l_mse`` is averaged over HG-supervised heads, ``l_inout`` over all
    TG-supervised heads; each is averaged over valid bags within a scale and
    then equally over scales. A term with no valid bag anywhere is skipped
    and left out of the weighted total. ``hg_target="mean"`` supervises the
    head-averaged attention of each layer instead of each head.
    """
    l_cls = loss_cls(logits, labels).mean()
    parts = {"cls": l_cls}
    skipped, terms = {}, {"hg": [], "tg": []}
    guidance = guidance or Guidance()

    l_mse = None
    if use_hg and guidance.hg and partition.hg:
        per_scale = []
        for s in record.scales:
            if s not in guidance.hg:
                continue
            target = guidance.hg[s]
            keys = sorted((s, layer, head) for layer, head in partition.hg)
            if hg_target == "mean":
                layers = sorted({k[1] for k in keys})
                vecs = [torch.stack([record[k] for k in keys if k[1] == la]).mean(0)
                        for la in layers]
            else:
                vecs = [record[k] for k in keys]
            for v in vecs:
                _check_aligned(target, v, f"HG guidance for scale {s}")
            per_bag = torch.stack([loss_mse(target, v) for v in vecs]).mean(0)
            m = _masked_mean(per_bag, guidance.hg_valid.get(s))
            if m is not None:
                per_scale.append(m)
                terms["hg"].extend(keys)
        if per_scale:
            l_mse = torch.stack(per_scale).mean()
            parts["mse"] = l_mse
        else:
            skipped["mse"] = "degenerate"

    l_inout = None
    if use_tg and guidance.tg and partition.tg:
        per_scale = []
        for s in record.scales:
            if s not in guidance.tg:
                continue
            target = guidance.tg[s]
            keys = sorted((s, layer, head) for layer, head in partition.tg)
            for k in keys:
                _check_aligned(target, record[k], f"TG guidance for scale {s}")
            per_bag = torch.stack([loss_inout(target, record[k]) for k in keys]).mean(0)
            m = _masked_mean(per_bag, guidance.tg_valid.get(s))
            if m is not None:
                per_scale.append(m)
                terms["tg"].extend(keys)
        if per_scale:
            l_inout = torch.stack(per_scale).mean()
            parts["inout"] = l_inout
        else:
            skipped["inout"] = "degenerate"

    total = uncertainty_weighted_total(parts, log_vars)
    lv = log_vars if isinstance(log_vars, dict) else dict(zip(TASKS, log_vars))
    return LossBreakdown(
        l_cls, l_mse, l_inout, total,
        {k: float(_t(v).detach()) for k, v in lv.items()},
        skipped, terms,
    )


def plain_objective(logits, labels, log_vars) -> torch.Tensor:
    """Uncertainty-weighted cross entropy with no guidance machinery at all."""
    nll = F.nll_loss(torch.log_softmax(logits, dim=-1),
                     torch.as_tensor(labels, dtype=torch.long), reduction="none")
    l_cls = nll.mean()
    s = log_vars[0]
    return torch.exp(-s) * l_cls + s
