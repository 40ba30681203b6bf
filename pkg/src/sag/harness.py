"""Training, evaluation and multi-seed orchestration."""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch

from sag.config import ExperimentConfig
from sag.grid import patchify
from sag.guidance import HG, TG, guidance_weights, hg_mask, tissue_mask
from sag.losses import Guidance, plain_objective, sag_loss
from sag.models import DTYPE, TASKS, build_model, grid_positions

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


# ---------------------------------------------------------------------------
# Guidance for slides


def slide_guidance(slide, cfg: ExperimentConfig) -> dict:
    """TG and HG weights for every scale of a slide, computed once and cached."""
    key = (cfg.dbscan_eps, cfg.dbscan_min_samples, cfg.tissue_darker)
    cache = slide.meta.setdefault("_guidance", {})
    if key in cache:
        return cache[key]
    grids = [b.grid for b in slide.bags]
    tmask, tdeg = tissue_mask(slide.raster, grids[0], tissue_darker=cfg.tissue_darker)
    hmask = hg_mask(slide.points, grids[0], cfg.dbscan_eps, cfg.dbscan_min_samples)
    out = {}
    for s, g in enumerate(grids):
        tg = guidance_weights(patchify(tmask, g), TG, g)
        tg.degenerate = tg.degenerate or tdeg
        out[s] = {TG: tg, HG: guidance_weights(patchify(hmask, g), HG, g)}
    cache[key] = out
    return out


# ---------------------------------------------------------------------------
# Batched tensors


@dataclass
class Tensors:
    features: list
    positions: list
    labels: torch.Tensor
    guidance: Guidance
    lesion: list = field(default_factory=list)
    ids: list = field(default_factory=list)

    def __len__(self):
        return self.labels.shape[0]

    def subset(self, idx) -> "Tensors":
        idx = torch.as_tensor(idx, dtype=torch.long)
        g = self.guidance
        return Tensors(
            [f[idx] for f in self.features],
            self.positions,
            self.labels[idx],
            Guidance(
                {s: v[idx] for s, v in g.hg.items()},
                {s: v[idx] for s, v in g.hg_valid.items()},
                {s: v[idx] for s, v in g.tg.items()},
                {s: v[idx] for s, v in g.tg_valid.items()},
            ),
            [m[idx] for m in self.lesion],
            [self.ids[i] for i in idx.tolist()],
        )


def to_tensors(slides, cfg: ExperimentConfig, *, with_guidance: bool = True) -> Tensors:
    n_scales = len(slides[0].bags)
    feats = [torch.as_tensor(np.stack([sl.bags[s].features for sl in slides]), dtype=DTYPE)
             for s in range(n_scales)]
    positions = [grid_positions(slides[0].bags[s].grid) for s in range(n_scales)]
    labels = torch.as_tensor([sl.label for sl in slides], dtype=torch.long)
    guidance = Guidance()
    if with_guidance:
        gs = [slide_guidance(sl, cfg) for sl in slides]
        for s in range(n_scales):
            guidance.hg[s] = torch.as_tensor(np.stack([g[s][HG].weights for g in gs]), dtype=DTYPE)
            guidance.hg_valid[s] = torch.as_tensor([not g[s][HG].degenerate for g in gs])
            guidance.tg[s] = torch.as_tensor(np.stack([g[s][TG].weights for g in gs]), dtype=DTYPE)
            guidance.tg_valid[s] = torch.as_tensor([not g[s][TG].degenerate for g in gs])
    lesion = [torch.as_tensor(np.stack([patchify(sl.lesion, sl.bags[s].grid) > 0 for sl in slides]))
              for s in range(n_scales)]
    return Tensors(feats, positions, labels, guidance, lesion, [sl.slide_id for sl in slides])


# ---------------------------------------------------------------------------
# Metrics


def _roc_auc(y, score) -> float:
    """Trapezoidal area under the ROC curve, ties handled by threshold grouping."""
    order = np.argsort(-score, kind="mergesort")
    y, score = y[order], score[order]
    distinct = np.flatnonzero(np.diff(score)) if score.size > 1 else np.array([], int)
    cut = np.r_[distinct, y.size - 1]
    tps = np.cumsum(y)[cut]
    fps = (cut + 1) - tps
    tpr = np.r_[0.0, tps / tps[-1]]
    fpr = np.r_[0.0, fps / fps[-1]]
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))


def classification_metrics(y_true, scores, num_classes: int) -> dict:
    """Accuracy plus macro precision, recall and one-vs-rest AUC.

    Classes absent from ``y_true`` are left out of the macro averages.
    """
    y_true = np.asarray(y_true)
    scores = np.asarray(scores, dtype=np.float64)
    y_pred = scores.argmax(axis=1)
    present = [c for c in range(num_classes) if np.any(y_true == c)]
    absent = sorted(set(range(num_classes)) - set(present))
    if absent:
        warnings.warn(f"classes {absent} absent from evaluation set; excluded from macro averages",
                      stacklevel=2)
    prec, rec, aucs = [], [], []
    for c in present:
        tp = np.sum((y_pred == c) & (y_true == c))
        npred = np.sum(y_pred == c)
        prec.append(tp / npred if npred else 0.0)
        rec.append(tp / np.sum(y_true == c))
        if len(present) > 1:
            aucs.append(_roc_auc((y_true == c).astype(np.int64), scores[:, c]))
    return {
        "acc": float(np.mean(y_pred == y_true)),
        "precision": float(np.mean(prec)),
        "recall": float(np.mean(rec)),
        "auc": float(np.mean(aucs)) if aucs else float("nan"),
    }


def attention_quality(record, lesion, keys) -> torch.Tensor:
    """Attention mass on true-lesion patches, averaged over ``keys``.

    ``lesion`` maps scale -> boolean (n, p) tensor; returns an (n,) tensor.
    """
    vals = [(record[k] * lesion[k[0]].to(DTYPE)).sum(-1) for k in keys]
    return torch.stack(vals).mean(0)


def quality_keys(record, partition):
    heads = partition.hg or partition.tg
    return sorted((s, la, hd) for s in record.scales for la, hd in heads)


# ---------------------------------------------------------------------------
# Training


def _flags(cfg: ExperimentConfig):
    return cfg.use_hg, cfg.use_tg


@torch.no_grad()
def evaluate(model, data: Tensors, cfg: ExperimentConfig | None = None) -> dict:
    model.eval()
    logits, record = model(data.features, data.positions)
    probs = torch.softmax(logits, -1).numpy()
    metrics = classification_metrics(data.labels.numpy(), probs, model.cfg.num_classes)
    keys = quality_keys(record, model.cfg.partition())
    metrics["attention_quality"] = float(attention_quality(record, data.lesion, keys).mean())
    return metrics


def train_one(cfg: ExperimentConfig, seed: int, train: Tensors, val: Tensors | None = None,
              *, objective: str = "sag", stream=None):
    """Train one model; returns ``(model, step_trace, epoch_log)``.

    ``objective="plain"`` bypasses the guided objective entirely and is used
    to check that switching guidance off reproduces plain training.
    """
    torch.set_num_threads(1)
    mcfg = type(cfg.model)(**{**cfg.model.__dict__, "seed": int(seed)})
    model = build_model(mcfg)
    partition = mcfg.partition()
    body = [p for n, p in model.named_parameters() if n != "log_vars"]
    groups = [{"params": body},
              {"params": [model.log_vars], "lr": cfg.log_var_lr or cfg.lr}]
    if cfg.optimizer == "adam":
        opt = torch.optim.Adam(groups, lr=cfg.lr)
    else:
        opt = torch.optim.SGD(groups, lr=cfg.lr, momentum=cfg.momentum)
    gen = torch.Generator().manual_seed(int(seed))
    floors = {TASKS.index(k): v for k, v in (cfg.log_var_floor or {}).items() if v is not None}
    use_hg, use_tg = _flags(cfg)

    trace, epochs = [], []
    n = len(train)
    for epoch in range(cfg.epochs):
        model.train()
        order = torch.randperm(n, generator=gen)
        sums, steps = {}, 0
        for start in range(0, n, cfg.batch_size):
            batch = train.subset(order[start : start + cfg.batch_size])
            logits, record = model(batch.features, batch.positions)
            if not torch.isfinite(logits).all():
                raise DivergenceError(f"non-finite logits at seed {seed}, epoch {epoch}, step {len(trace)}")
            if objective == "plain":
                total = plain_objective(logits, batch.labels, model.log_vars)
                row = {"weighted_total": float(total.detach())}
            else:
                bd = sag_loss(logits, batch.labels, record, batch.guidance, partition,
                              model.log_vars, use_hg=use_hg, use_tg=use_tg,
                              hg_target=cfg.hg_target)
                total = bd.weighted_total
                row = bd.as_dict()
            if not torch.isfinite(total):
                raise DivergenceError(f"non-finite loss at seed {seed}, epoch {epoch}, step {len(trace)}")
            opt.zero_grad()
            total.backward()
            opt.step()
            if floors:
                with torch.no_grad():
                    for i, lo in floors.items():
                        model.log_vars[i].clamp_(min=lo)
            trace.append(row)
            for k in ("weighted_total", "l_cls", "l_mse", "l_inout"):
                if row.get(k) is not None:
                    sums[k] = sums.get(k, 0.0) + row[k]
            steps += 1
        entry = {"seed": int(seed), "epoch": epoch,
                 **{k: v / steps for k, v in sums.items()},
                 "log_variances": dict(zip(TASKS, model.log_vars.detach().tolist()))}
        if val is not None:
            entry["val"] = evaluate(model, val)
        epochs.append(entry)
        if stream is not None:
            stream.write(json.dumps(entry, sort_keys=True) + "\n")
    return model, trace, epochs


@dataclass
class MetricsReport:
    config: dict
    per_seed: dict
    mean: dict
    loss_traces: dict
    header: dict = field(default_factory=lambda: {
        "precision_recall_averaging": "macro",
        "auc": "macro one-vs-rest, trapezoidal",
        "model_selection": "final step",
    })

    def to_json(self) -> dict:
        return {
            "header": self.header,
            "config": self.config,
            "seeds": self.per_seed["seed"],
            "per_seed": self.per_seed,
            "mean": self.mean,
        }


METRIC_KEYS = ("acc", "precision", "recall", "auc", "attention_quality")


def run_seed(cfg: ExperimentConfig, seed: int, data: dict, stream=None, objective="sag"):
    model, trace, epochs = train_one(cfg, seed, data["train"], data.get("val"),
                                     objective=objective, stream=stream)
    return model, evaluate(model, data["test"]), trace, epochs


def train(cfg: ExperimentConfig, data: dict, *, stream=None, workers: int = 1,
          objective: str = "sag", keep_models: bool = False):
    """Run every configured seed and aggregate test metrics.

    ``data`` maps split name to :class:`Tensors`. Returns the report and
    the list of trained models (empty unless ``keep_models``).
    """
    results = []
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(workers) as pool:
            futs = [pool.submit(run_seed, cfg, s, data, None, objective) for s in cfg.seeds]
            results = [f.result() for f in futs]
        if stream is not None:
            for _, _, _, epochs in results:
                for entry in epochs:
                    stream.write(json.dumps(entry, sort_keys=True) + "\n")
    else:
        results = [run_seed(cfg, s, data, stream, objective) for s in cfg.seeds]

    per_seed = {"seed": list(cfg.seeds)}
    for k in METRIC_KEYS:
        per_seed[k] = [r[1][k] for r in results]
    mean = {k: float(np.mean(per_seed[k])) for k in METRIC_KEYS}
    traces = {s: [row["weighted_total"] for row in r[2]] for s, r in zip(cfg.seeds, results)}
    report = MetricsReport(cfg.to_dict(), per_seed, mean, traces)
    models = [r[0] for r in results] if keep_models else []
    return report, models


def prepare(cfg: ExperimentConfig, datasets: dict) -> dict:
    return {split: to_tensors(slides, cfg) for split, slides in datasets.items()}


def paired_difference(a: MetricsReport, b: MetricsReport, key: str) -> float:
    """Mean over seeds of ``a - b`` for one metric (seeds matched by position)."""
    return float(np.mean(np.subtract(a.per_seed[key], b.per_seed[key])))


def ablation_configs(cfg: ExperimentConfig) -> dict:
    """Baseline, +HG and +HG+TG variants of a config."""
    from dataclasses import replace

    return {
        "baseline": replace(cfg, use_hg=False, use_tg=False),
        "hg": replace(cfg, use_hg=True, use_tg=False),
        "hg_tg": replace(cfg, use_hg=True, use_tg=True),
    }


def is_finite_report(report: MetricsReport) -> bool:
    return all(math.isfinite(v) for v in report.mean.values())
