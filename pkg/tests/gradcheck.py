"""Finite-difference gradient checks over every model parameter.

The models contain ReLUs, whose kinks make a central difference
meaningless for any coordinate whose +-h step flips a unit on or off. The
activation pattern is recorded at theta, theta+h and theta-h; coordinates
where it changes are excluded (and counted), everywhere else the loss is
smooth on the whole stencil.
"""

import numpy as np
import torch

from sag.losses import Guidance, sag_loss
from sag.models import DTYPE, ModelConfig, build_model, get_flat, set_flat

LOSS_NAMES = ("l_cls", "l_mse", "l_inout", "weighted_total")
GRIDS = [(1, 2), (2, 2), (1, 3), (2, 3), (1, 4), (1, 5), (3, 2), (1, 6)]


def random_case(seed: int, kind: str):
    """A small random model and bag: p <= 6, e <= 8, d_k <= 4, params ~1e-3.

    Draws are repeated while every ReLU unit is off, since the attention is
    then exactly uniform and there is nothing to check.
    """
    rng = np.random.default_rng(seed)
    while True:
        case = _draw(rng, kind)
        relu = ReluPattern(case[0])
        with torch.no_grad():
            losses_at(*case)
        if relu.take().any():
            relu.remove()
            return case
        relu.remove()


def _draw(rng, kind):
    rows, cols = GRIDS[rng.integers(len(GRIDS))]
    p = rows * cols
    e = int(rng.integers(2, 9))
    cfg = ModelConfig(kind=kind, e=e, num_classes=int(rng.integers(2, 5)), layers=int(rng.integers(1, 3)),
                      heads=int(rng.integers(2, 4)), d_k=int(rng.integers(1, 5)), ffn_mult=1,
                      attn_dim=int(rng.integers(2, 6)), embed_dim=int(rng.integers(2, 6)),
                      seed=int(rng.integers(2**31)))
    model = build_model(cfg)
    flat = get_flat(model).numpy()
    flat = 1e-3 * flat / np.abs(flat).max() + 1e-3 * rng.standard_normal(flat.size)
    start = 0
    for name, prm in model.named_parameters():
        if name == "log_vars":  # log-variances are not rescaled
            flat[start : start + prm.numel()] = rng.normal(0, 0.5, prm.numel())
        start += prm.numel()
    feats = torch.as_tensor(rng.standard_normal((1, p, e)), dtype=DTYPE)
    positions = [np.stack([np.arange(p) // cols, np.arange(p) % cols], axis=1)]
    hg = rng.dirichlet(np.ones(p))
    tissue = rng.random(p) < 0.6
    tissue[rng.integers(p)] = True
    tissue[rng.integers(p)] = False  # a constant L_inout would have no gradient to check
    if not tissue.any():
        tissue[0] = True
    tg = np.where(tissue, 1.0, 0.0) / tissue.sum()
    guidance = Guidance({0: torch.as_tensor(hg[None], dtype=DTYPE)}, {0: torch.tensor([True])},
                        {0: torch.as_tensor(tg[None], dtype=DTYPE)}, {0: torch.tensor([True])})
    label = [int(rng.integers(cfg.num_classes))]
    return model, flat, feats, positions, guidance, label


class ReluPattern:
    """Records which ReLU inputs are positive during a forward pass."""

    def __init__(self, model):
        self.signs, self.handles = [], []
        for name, mod in model.named_modules():
            if name.split(".")[-1] == "ff1" or name.startswith("project."):
                self.handles.append(mod.register_forward_hook(
                    lambda _m, _i, out: self.signs.append(out.detach() > 0)))

    def remove(self):
        for h in self.handles:
            h.remove()

    def take(self):
        pattern, self.signs = torch.cat([s.reshape(-1) for s in self.signs]), []
        return pattern


def losses_at(model, flat, feats, positions, guidance, label) -> torch.Tensor:
    set_flat(model, torch.as_tensor(flat, dtype=DTYPE))
    logits, record = model([feats], positions)
    bd = sag_loss(logits, label, record, guidance, model.cfg.partition(), model.log_vars)
    return torch.stack([bd.l_cls, bd.l_mse, bd.l_inout, bd.weighted_total])


def check_case(seed: int, kind: str, h: float = 1e-5):
    """Returns ``(errors, n_checked, n_params)``.

    ``errors`` maps each loss to the norm-wise relative error between the
    autograd gradient and central differences over all smooth coordinates.
    """
    model, flat, feats, positions, guidance, label = random_case(seed, kind)
    relu = ReluPattern(model)
    analytic = []
    for i in range(len(LOSS_NAMES)):
        vals = losses_at(model, flat, feats, positions, guidance, label)
        model.zero_grad()
        vals[i].backward()
        analytic.append(torch.cat([p.grad.reshape(-1) if p.grad is not None
                                   else torch.zeros(p.numel(), dtype=DTYPE)
                                   for p in model.parameters()]).numpy())
    relu.take()
    numeric = np.zeros((len(LOSS_NAMES), flat.size))
    smooth = np.ones(flat.size, dtype=bool)
    with torch.no_grad():
        losses_at(model, flat, feats, positions, guidance, label)
        base = relu.take()
        for j in range(flat.size):
            up, down = flat.copy(), flat.copy()
            up[j] += h
            down[j] -= h
            f_up = losses_at(model, up, feats, positions, guidance, label)
            s_up = relu.take()
            f_down = losses_at(model, down, feats, positions, guidance, label)
            s_down = relu.take()
            smooth[j] = torch.equal(s_up, base) and torch.equal(s_down, base)
            numeric[:, j] = (f_up - f_down).numpy() / (2 * h)
    errors = {}
    for i, name in enumerate(LOSS_NAMES):
        a, n = analytic[i][smooth], numeric[i][smooth]
        scale = max(np.linalg.norm(a), np.linalg.norm(n))
        errors[name] = 0.0 if scale == 0 else float(np.linalg.norm(a - n) / scale)
    assert np.linalg.norm(analytic[0]) > 0
    return errors, int(smooth.sum()), flat.size
