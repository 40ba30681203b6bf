"""Diagnosis backbones with supervisable attention.

Two toy models share one interface: ``model(features, positions)`` returns
class logits and an :class:`AttentionRecord`. The transformer exposes one
attention vector per (scale, layer, head), each the column mean of that
head's softmax similarity matrix, i.e. the mean attention each patch
receives. The attention-MIL pooler exposes one softmax-normalized scorer
vector per scale.

Everything runs in float64 so the analytic gradients can be checked against
finite differences.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np
import torch
from torch import nn

from sag.grid import PatchGrid, ShapeError, block_mean, check_raster
from sag.io import atomic_write_bytes

DTYPE = torch.float64
TASKS = ("cls", "mse", "inout")


# ---------------------------------------------------------------------------
# Bags and features


@dataclass
class Bag:
    """One slide at one scale: a p x e feature matrix and its label."""

    features: np.ndarray
    label: int
    grid: PatchGrid
    guidance: dict | None = None
    scale_id: int = 0

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] != self.grid.p:
            raise ShapeError(
                f"bag has {self.features.shape[0]} feature rows, grid has {self.grid.p} patches"
            )
        if self.label < 0:
            raise ValueError("label must be a nonnegative class index")


DESCRIPTOR_CHANNELS = 3  # mean intensity, intensity spread, dark fraction
QUADRANT_CHANNELS = 4


def feature_source(raster, grid: PatchGrid, e: int = 16, *, signal=None,
                   noise: float = 0.0, descriptor_noise: float | None = None,
                   seed: int = 0) -> np.ndarray:
    """Deterministic patch descriptors standing in for a pretrained extractor.

    Row ``i`` describes patch ``i``. Columns are: mean intensity, intensity
    spread and dark-pixel fraction; then one channel per plane of the
    optional ``signal`` field (H x W x k, averaged per patch); then
    quadrant contrast; any remaining columns carry only noise. Gaussian
    noise drawn from ``seed`` is added to every entry, with scale ``noise``
    on the signal and padding columns and ``descriptor_noise`` (default:
    ``noise``) on the appearance columns.
    """
    raster = np.asarray(raster, dtype=np.float64)
    check_raster(raster, grid, "raster")
    rows = [
        block_mean(raster, grid) / 255.0,
        np.sqrt(np.maximum(block_mean(raster**2, grid) - block_mean(raster, grid) ** 2, 0)) / 64.0,
        block_mean((raster < 128).astype(np.float64), grid),
    ]
    cols = [r[:, None] for r in rows]
    if signal is not None:
        signal = np.asarray(signal, dtype=np.float64)
        if signal.ndim == 2:
            signal = signal[..., None]
        if signal.shape[:2] != grid.shape:
            raise ShapeError(f"signal field shape {signal.shape[:2]} != raster {grid.shape}")
        cols.append(block_mean(signal, grid))
    cols.append(_quadrant_contrast(raster, grid))
    feats = np.concatenate(cols, axis=1)
    if feats.shape[1] > e:
        raise ValueError(f"e={e} is too small for {feats.shape[1]} descriptor channels")
    n_signal = feats.shape[1] - DESCRIPTOR_CHANNELS - QUADRANT_CHANNELS
    feats = np.pad(feats, ((0, 0), (0, e - feats.shape[1])))
    d_noise = noise if descriptor_noise is None else descriptor_noise
    scale = np.full(e, float(noise))
    scale[:DESCRIPTOR_CHANNELS] = d_noise
    scale[DESCRIPTOR_CHANNELS + n_signal : DESCRIPTOR_CHANNELS + n_signal + QUADRANT_CHANNELS] = d_noise
    if np.any(scale):
        feats = feats + scale * np.random.default_rng(seed).standard_normal(feats.shape)
    return feats


def _quadrant_contrast(raster, grid: PatchGrid) -> np.ndarray:
    if grid.patch_edge < 2:
        return np.zeros((grid.p, QUADRANT_CHANNELS))
    half = grid.patch_edge // 2
    e = grid.patch_edge
    blocks = raster.reshape(grid.rows, e, grid.cols, e).transpose(0, 2, 1, 3).reshape(grid.p, e, e)
    mean = blocks.mean(axis=(1, 2))
    quads = [blocks[:, :half, :half], blocks[:, :half, half:],
             blocks[:, half:, :half], blocks[:, half:, half:]]
    return np.stack([q.mean(axis=(1, 2)) - mean for q in quads], axis=1) / 64.0


def grid_positions(grid: PatchGrid) -> np.ndarray:
    """(row, col) of every patch in row-major order."""
    idx = np.arange(grid.p)
    return np.stack([idx // grid.cols, idx % grid.cols], axis=1)


def sinusoidal_encoding(positions, d_model: int) -> torch.Tensor:
    """Fixed 2-D sinusoidal code: half the width encodes rows, half columns."""
    pos = torch.as_tensor(np.asarray(positions), dtype=DTYPE)
    half = d_model // 2
    out = torch.zeros(pos.shape[:-1] + (d_model,), dtype=DTYPE)
    for axis, (lo, width) in enumerate([(0, half), (half, d_model - half)]):
        k = torch.arange(width, dtype=DTYPE)
        freq = 1.0 / (100.0 ** (2 * (k // 2) / max(width, 1)))
        angle = pos[..., axis : axis + 1] * freq
        out[..., lo : lo + width] = torch.where(k % 2 == 0, torch.sin(angle), torch.cos(angle))
    return out


# ---------------------------------------------------------------------------
# Attention


class AttentionRecord:
    """Attention vectors keyed by ``(scale, layer, head)``.

    MIL models use layer 0, head 0. Vectors may carry leading batch axes.
    """

    def __init__(self, kind: str):
        self.kind = kind
        self.entries: dict[tuple[int, int, int], torch.Tensor] = {}

    def __getitem__(self, key):
        if isinstance(key, int):
            key = (key, 0, 0)
        return self.entries[key]

    def __setitem__(self, key, value):
        self.entries[key] = value

    def keys(self):
        return sorted(self.entries)

    @property
    def scales(self) -> list[int]:
        return sorted({k[0] for k in self.entries})

    def numpy(self, index: int | None = None) -> dict:
        out = {}
        for key, v in self.entries.items():
            v = v.detach()
            out[key] = (v if index is None else v[index]).numpy()
        return out


def transformer_attention(q, k):
    """Softmax similarity ``A`` (p x p) and its column mean.

    The column mean is the average attention each patch receives over all
    queries; it lies on the simplex because every row of ``A`` does.
    """
    q = torch.as_tensor(q, dtype=DTYPE)
    k = torch.as_tensor(k, dtype=DTYPE)
    if q.shape != k.shape or q.ndim < 2 or q.shape[-1] < 1:
        raise ShapeError(f"q and k must share shape (..., p, d_k); got {tuple(q.shape)}, {tuple(k.shape)}")
    if not (torch.isfinite(q).all() and torch.isfinite(k).all()):
        raise ValueError("attention inputs must be finite")
    logits = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    a = torch.softmax(logits, dim=-1)
    return a, a.mean(dim=-2)


class HeadPartition(NamedTuple):
    hg: frozenset
    tg: frozenset


def select_supervised_heads(l: int, h: int, hg_head_fraction: float = 0.5,
                            last_layer_only: bool = False) -> HeadPartition:
    """Heads ``[0, floor(h * fraction))`` of each layer get HG; every head gets TG."""
    if not 0.0 <= hg_head_fraction <= 1.0:
        raise ValueError("hg_head_fraction must lie in [0, 1]")
    layers = [l - 1] if last_layer_only else range(l)
    n_hg = math.floor(h * hg_head_fraction)
    hg = frozenset((layer, head) for layer in layers for head in range(n_hg))
    tg = frozenset((layer, head) for layer in layers for head in range(h))
    return HeadPartition(hg, tg)


# ---------------------------------------------------------------------------
# Models


@dataclass
class ModelConfig:
    kind: str = "transformer"  # or "mil"
    e: int = 16
    num_classes: int = 4
    num_scales: int = 1
    layers: int = 2
    heads: int = 4
    d_k: int = 4
    ffn_mult: int = 2
    attn_dim: int = 16  # MIL scorer width
    embed_dim: int = 16  # MIL projection width
    qk_init_scale: float = 0.3  # q/k projections start small so attention is near uniform
    pos_scale: float = 1.0  # amplitude of the sinusoidal position code
    readout: str = "mean"  # or "attention": pool tokens by last-layer attention received
    hg_head_fraction: float = 0.5
    supervise_last_layer_only: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("transformer", "mil"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.readout not in ("mean", "attention"):
            raise ValueError(f"readout must be 'mean' or 'attention', got {self.readout!r}")

    @property
    def d_model(self) -> int:
        return self.heads * self.d_k

    def partition(self) -> HeadPartition:
        if self.kind == "mil":
            return HeadPartition(frozenset({(0, 0)}), frozenset({(0, 0)}))
        return select_supervised_heads(
            self.layers, self.heads, self.hg_head_fraction, self.supervise_last_layer_only
        )


def _init_uniform(module: nn.Module, gen: torch.Generator, scale: float = 1.0):
    for p in module.parameters():
        fan_in = p.shape[-1] if p.ndim > 1 else p.shape[0]
        bound = scale / math.sqrt(fan_in)
        with torch.no_grad():
            p.copy_(torch.rand(p.shape, generator=gen, dtype=DTYPE) * 2 * bound - bound)


class _Linear(nn.Linear):
    def __init__(self, n_in, n_out, bias=True):
        super().__init__(n_in, n_out, bias=bias, dtype=DTYPE)


class EncoderLayer(nn.Module):
    def __init__(self, d_model: int, heads: int, d_k: int, ffn_mult: int):
        super().__init__()
        self.heads, self.d_k = heads, d_k
        self.q = _Linear(d_model, heads * d_k, bias=False)
        self.k = _Linear(d_model, heads * d_k, bias=False)
        self.v = _Linear(d_model, heads * d_k, bias=False)
        self.o = _Linear(heads * d_k, d_model)
        self.ff1 = _Linear(d_model, ffn_mult * d_model)
        self.ff2 = _Linear(ffn_mult * d_model, d_model)

    def _split(self, x):
        n, p, _ = x.shape
        return x.view(n, p, self.heads, self.d_k).transpose(1, 2)

    def forward(self, x):
        q, k, v = self._split(self.q(x)), self._split(self.k(x)), self._split(self.v(x))
        a, ma = transformer_attention(q, k)  # (n, h, p, p), (n, h, p)
        ctx = (a @ v).transpose(1, 2).reshape(x.shape[0], x.shape[1], -1)
        x = x + self.o(ctx)
        x = x + self.ff2(torch.relu(self.ff1(x)))
        return x, ma


class TransformerNet(nn.Module):
    """Per-scale encoders; mean-pooled token states are concatenated for the classifier."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.embed = nn.ModuleList(_Linear(cfg.e, d) for _ in range(cfg.num_scales))
        self.encoders = nn.ModuleList(
            nn.ModuleList(EncoderLayer(d, cfg.heads, cfg.d_k, cfg.ffn_mult) for _ in range(cfg.layers))
            for _ in range(cfg.num_scales)
        )
        self.classifier = _Linear(d * cfg.num_scales, cfg.num_classes)
        self.log_vars = nn.Parameter(torch.zeros(len(TASKS), dtype=DTYPE))
        gen = torch.Generator().manual_seed(cfg.seed)
        for name, mod in self.named_modules():
            if isinstance(mod, nn.Linear):
                scale = cfg.qk_init_scale if name.endswith((".q", ".k")) else 1.0
                _init_uniform(mod, gen, scale)

    def forward(self, features, positions=None):
        features = _as_scale_list(features, self.cfg.num_scales)
        record = AttentionRecord("transformer")
        pooled = []
        for s, x in enumerate(features):
            pos = positions[s] if positions is not None else None
            if pos is None:
                side = math.isqrt(x.shape[-2])
                if side * side != x.shape[-2]:
                    raise ShapeError("positions are required for non-square bags")
                pos = grid_positions(PatchGrid(side, side, 1))
            pos_t = self.cfg.pos_scale * sinusoidal_encoding(pos, self.cfg.d_model)
            h = self.embed[s](x) + pos_t
            for layer, enc in enumerate(self.encoders[s]):
                h, ma = enc(h)
                for head in range(self.cfg.heads):
                    record[(s, layer, head)] = ma[:, head]
            if self.cfg.readout == "attention":
                weights = ma.mean(dim=1)  # last layer, averaged over heads
                pooled.append((weights.unsqueeze(-1) * h).sum(dim=-2))
            else:
                pooled.append(h.mean(dim=-2))
        return self.classifier(torch.cat(pooled, dim=-1)), record


class MILNet(nn.Module):
    """Attention MIL: two-layer tanh scorer, softmax over patches, weighted sum."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.project = nn.ModuleList(_Linear(cfg.e, cfg.embed_dim) for _ in range(cfg.num_scales))
        self.score_hidden = nn.ModuleList(
            _Linear(cfg.embed_dim, cfg.attn_dim) for _ in range(cfg.num_scales)
        )
        self.score_out = nn.ModuleList(_Linear(cfg.attn_dim, 1) for _ in range(cfg.num_scales))
        self.classifier = _Linear(cfg.embed_dim * cfg.num_scales, cfg.num_classes)
        self.log_vars = nn.Parameter(torch.zeros(len(TASKS), dtype=DTYPE))
        gen = torch.Generator().manual_seed(cfg.seed)
        for mod in self.modules():
            if isinstance(mod, nn.Linear):
                _init_uniform(mod, gen)

    def attention(self, s: int, x):
        h = torch.relu(self.project[s](x))
        scores = self.score_out[s](torch.tanh(self.score_hidden[s](h))).squeeze(-1)
        return h, torch.softmax(scores, dim=-1)

    def forward(self, features, positions=None):
        features = _as_scale_list(features, self.cfg.num_scales)
        record = AttentionRecord("mil")
        pooled = []
        for s, x in enumerate(features):
            h, ma = self.attention(s, x)
            record[(s, 0, 0)] = ma
            pooled.append((ma.unsqueeze(-1) * h).sum(dim=-2))
        return self.classifier(torch.cat(pooled, dim=-1)), record


def _as_scale_list(features, num_scales):
    if isinstance(features, (np.ndarray, torch.Tensor)):
        features = [features]
    out = []
    for x in features:
        x = torch.as_tensor(x, dtype=DTYPE)
        if x.ndim == 2:
            x = x.unsqueeze(0)
        out.append(x)
    if len(out) != num_scales:
        raise ShapeError(f"model expects {num_scales} scales, got {len(out)}")
    return out


def build_model(cfg: ModelConfig) -> nn.Module:
    if cfg.kind == "transformer":
        return TransformerNet(cfg)
    if cfg.kind == "mil":
        return MILNet(cfg)
    raise ValueError(f"unknown model kind {cfg.kind!r}")


def transformer_forward(bag: Bag | list, model: TransformerNet):
    """Single-slide forward: logits (C,) and per-head attention vectors."""
    return _single_forward(bag, model)


def mil_forward(bag: Bag | list, model: MILNet):
    return _single_forward(bag, model)


def _single_forward(bag, model):
    bags = bag if isinstance(bag, (list, tuple)) else [bag]
    feats = [b.features for b in bags]
    pos = [grid_positions(b.grid) for b in bags]
    for b in bags:
        if b.features.shape[1] != model.cfg.e:
            raise ShapeError(f"bag has e={b.features.shape[1]}, model expects {model.cfg.e}")
    logits, record = model(feats, pos)
    single = AttentionRecord(record.kind)
    for key, v in record.entries.items():
        single[key] = v[0]
    return logits[0], single


# ---------------------------------------------------------------------------
# Flat parameter view and checkpoints


def get_flat(model: nn.Module) -> torch.Tensor:
    return nn.utils.parameters_to_vector(model.parameters()).detach().clone()


def set_flat(model: nn.Module, flat) -> None:
    flat = torch.as_tensor(flat, dtype=DTYPE)
    n = sum(p.numel() for p in model.parameters())
    if flat.numel() != n:
        raise ShapeError(f"flat vector has {flat.numel()} entries, model has {n}")
    nn.utils.vector_to_parameters(flat, model.parameters())


def param_count(cfg: ModelConfig) -> int:
    return sum(p.numel() for p in build_model(cfg).parameters())


MAGIC = b"SAGCKPT1"


def save_checkpoint(path, model: nn.Module, extra: dict | None = None) -> None:
    """Header-length-prefixed JSON header followed by little-endian float64 params."""
    data = get_flat(model).numpy().astype("<f8").tobytes()
    header = {
        "model": asdict(model.cfg),
        "n_params": len(data) // 8,
        "names": [n for n, _ in model.named_parameters()],
        "shapes": [list(p.shape) for p in model.parameters()],
        "sha256": hashlib.sha256(data).hexdigest(),
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    atomic_write_bytes(path, MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + data)


def load_checkpoint(path):
    """Returns ``(model, header)``; raises on a bad magic or checksum."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(MAGIC):
        raise ValueError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack_from("<Q", blob, len(MAGIC))
    start = len(MAGIC) + 8
    header = json.loads(blob[start : start + hlen].decode("utf-8"))
    data = blob[start + hlen :]
    if hashlib.sha256(data).hexdigest() != header["sha256"]:
        raise ValueError(f"{path}: checksum mismatch")
    if len(data) != 8 * header["n_params"]:
        raise ValueError(f"{path}: truncated parameter block")
    cfg = ModelConfig(**header["model"])
    model = build_model(cfg)
    set_flat(model, np.frombuffer(data, dtype="<f8").copy())
    return model, header
