import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import LOSS_NAMES, check_case
from sag.grid import PatchGrid, ShapeError
from sag.models import (
    DTYPE,
    Bag,
    ModelConfig,
    build_model,
    feature_source,
    get_flat,
    grid_positions,
    load_checkpoint,
    mil_forward,
    param_count,
    save_checkpoint,
    select_supervised_heads,
    set_flat,
    transformer_attention,
    transformer_forward,
)


def t(x):
    return torch.as_tensor(x, dtype=DTYPE)


def dense_attention(q, k):
    logits = q @ k.T / math.sqrt(q.shape[1])
    a = np.exp(logits - logits.max(axis=1, keepdims=True))
    a /= a.sum(axis=1, keepdims=True)
    return a, a.mean(axis=0)


# ---------------------------------------------------------------------------
# transformer_attention


def test_zero_queries_give_uniform_attention():
    a, ma = transformer_attention(torch.zeros(5, 3, dtype=DTYPE), t(np.random.rand(5, 3)))
    np.testing.assert_allclose(a.numpy(), 0.2)
    np.testing.assert_allclose(ma.numpy(), 0.2)


def test_two_patch_example():
    q = t([[1.0], [0.0]])
    k = t([[0.0], [math.log(3)]])
    a, ma = transformer_attention(q, k)
    np.testing.assert_allclose(a.numpy(), [[0.25, 0.75], [0.5, 0.5]], atol=1e-15)
    np.testing.assert_allclose(ma.numpy(), [0.375, 0.625], atol=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 8), st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_attention_matches_dense_oracle(p, d_k, seed):
    rng = np.random.default_rng(seed)
    q, k = rng.normal(0, 2, (p, d_k)), rng.normal(0, 2, (p, d_k))
    a, ma = transformer_attention(t(q), t(k))
    a_ref, ma_ref = dense_attention(q, k)
    np.testing.assert_allclose(a.numpy(), a_ref, rtol=0, atol=1e-12)
    np.testing.assert_allclose(ma.numpy(), ma_ref, rtol=0, atol=1e-12)
    assert abs(ma.sum().item() - 1) < 1e-12
    assert (ma >= 0).all()


def test_attention_rejects_non_finite():
    q = t([[float("nan")], [0.0]])
    with pytest.raises(ValueError):
        transformer_attention(q, t([[0.0], [1.0]]))


# ---------------------------------------------------------------------------
# Head partition


def test_head_partition_examples():
    part = select_supervised_heads(2, 8, 0.5)
    for layer in range(2):
        assert {h for la, h in part.hg if la == layer} == {0, 1, 2, 3}
        assert {h for la, h in part.tg if la == layer} == set(range(8))
    assert select_supervised_heads(2, 8, 0.0).hg == frozenset()
    assert select_supervised_heads(2, 8, 1.0).hg == select_supervised_heads(2, 8, 1.0).tg
    last = select_supervised_heads(3, 4, 0.5, last_layer_only=True)
    assert {la for la, _ in last.hg | last.tg} == {2}
    with pytest.raises(ValueError):
        select_supervised_heads(2, 4, 1.5)


@given(st.integers(1, 4), st.integers(1, 12), st.floats(0, 1))
def test_head_partition_is_a_prefix(layers, heads, fraction):
    part = select_supervised_heads(layers, heads, fraction)
    n = math.floor(heads * fraction)
    assert len(part.hg) == layers * n
    assert part.hg <= part.tg
    assert all(h < n for _, h in part.hg)


# ---------------------------------------------------------------------------
# Transformer and MIL forward


def _random_bag(rng, grid, e):
    return Bag(rng.standard_normal((grid.p, e)), 0, grid)


def test_transformer_records_every_head_on_the_simplex():
    cfg = ModelConfig(kind="transformer", e=6, num_classes=3, layers=2, heads=3, d_k=2)
    model = build_model(cfg)
    logits, rec = transformer_forward(_random_bag(np.random.default_rng(0), PatchGrid(3, 4, 2), 6), model)
    assert logits.shape == (3,) and torch.isfinite(logits).all()
    assert rec.keys() == [(0, la, h) for la in range(2) for h in range(3)]
    for key in rec.keys():
        assert abs(rec[key].sum().item() - 1) < 1e-12 and (rec[key] >= 0).all()


@pytest.mark.parametrize("readout", ["mean", "attention"])
def test_transformer_equivariance(readout):
    rng = np.random.default_rng(1)
    cfg = ModelConfig(kind="transformer", e=5, num_classes=3, heads=2, d_k=3, readout=readout)
    model = build_model(cfg)
    grid = PatchGrid(3, 3, 1)
    x = rng.standard_normal((grid.p, 5))
    pos = grid_positions(grid)
    perm = rng.permutation(grid.p)
    with torch.no_grad():
        l1, r1 = model([t(x[None])], [pos])
        l2, r2 = model([t(x[perm][None])], [pos[perm]])
    np.testing.assert_allclose(l1.numpy(), l2.numpy(), atol=1e-12)
    for key in r1.keys():
        np.testing.assert_allclose(r1[key].numpy()[0][perm], r2[key].numpy()[0], atol=1e-12)


def test_transformer_is_near_uniform_at_init():
    from sag.synth import SlideSpec, generate_slide

    spec = SlideSpec()
    for seed in range(5):
        model = build_model(ModelConfig(seed=seed))
        slide = generate_slide(spec, (99, seed), label=seed % 4)
        _, rec = transformer_forward(slide.bags, model)
        p = spec.grid.p
        for key in rec.keys():
            assert np.abs(rec[key].detach().numpy() - 1 / p).max() <= 0.1 / p


def test_multi_scale_records():
    cfg = ModelConfig(kind="transformer", e=4, num_classes=2, num_scales=2, layers=1, heads=2, d_k=2)
    model = build_model(cfg)
    rng = np.random.default_rng(2)
    fine = PatchGrid(4, 4, 2)
    bags = [_random_bag(rng, fine, 4), Bag(rng.standard_normal((4, 4)), 0, fine.coarsen(2), scale_id=1)]
    _, rec = transformer_forward(bags, model)
    assert rec.scales == [0, 1]
    assert rec[(1, 0, 1)].shape == (4,)
    mil = build_model(ModelConfig(kind="mil", e=4, num_classes=2, num_scales=2))
    _, rec = mil_forward(bags, mil)
    assert rec.keys() == [(0, 0, 0), (1, 0, 0)]


def test_forward_rejects_wrong_width():
    model = build_model(ModelConfig(kind="mil", e=4, num_classes=2))
    with pytest.raises(ShapeError):
        mil_forward(Bag(np.zeros((4, 5)), 0, PatchGrid(2, 2, 1)), model)


def test_mil_identical_rows_uniform():
    model = build_model(ModelConfig(kind="mil", e=6, num_classes=3))
    bag = Bag(np.tile(np.random.default_rng(0).standard_normal(6), (7, 1)), 0, PatchGrid(1, 7, 1))
    _, rec = mil_forward(bag, model)
    np.testing.assert_allclose(rec[0].detach().numpy(), 1 / 7, atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 12), st.integers(0, 2**32 - 1))
def test_mil_permutation_invariance(p, seed):
    rng = np.random.default_rng(seed)
    model = build_model(ModelConfig(kind="mil", e=5, num_classes=3, seed=seed % 1000))
    x = rng.standard_normal((p, 5))
    perm = rng.permutation(p)
    with torch.no_grad():
        l1, r1 = model([t(x[None])])
        l2, r2 = model([t(x[perm][None])])
    assert np.abs(l1.numpy() - l2.numpy()).max() < 1e-6
    np.testing.assert_allclose(r1[0].numpy()[0][perm], r2[0].numpy()[0], atol=1e-12)


def test_mil_monotonicity_probe():
    model = build_model(ModelConfig(kind="mil", e=4, num_classes=2, seed=3))
    base = t(np.random.default_rng(0).standard_normal(4)).requires_grad_()
    h = torch.relu(model.project[0](base))
    score = model.score_out[0](torch.tanh(model.score_hidden[0](h)))
    (direction,) = torch.autograd.grad(score.sum(), base)
    x = base.detach().repeat(3, 1)
    x[1] += 0.05 * direction / direction.norm()
    with torch.no_grad():
        _, rec = model([x[None]])
    ma = rec[0][0]
    assert ma[1] > ma[0] and ma[1] > ma[2]


# ---------------------------------------------------------------------------
# Feature source


def test_blank_slide_rows_identical():
    grid = PatchGrid(3, 3, 4)
    f = feature_source(np.full(grid.shape, 200), grid, 12)
    assert (f == f[0]).all()


def test_planted_signal_marks_its_patch():
    grid = PatchGrid(3, 3, 4)
    signal = np.zeros(grid.shape + (2,))
    signal[4:8, 8:12, 1] = 1.0  # patch (1, 2)
    f = feature_source(np.full(grid.shape, 200), grid, 12, signal=signal)
    j = grid.index(1, 2)
    differs = np.flatnonzero(np.any(f != f[0], axis=0))
    assert differs.tolist() == [4]
    assert f[j, 4] == 1.0 and np.count_nonzero(f[:, 4]) == 1


def test_feature_source_determinism_and_errors():
    grid = PatchGrid(2, 2, 4)
    raster = np.random.default_rng(0).integers(0, 256, grid.shape)
    a = feature_source(raster, grid, 10, noise=0.3, descriptor_noise=0.1, seed=5)
    b = feature_source(raster, grid, 10, noise=0.3, descriptor_noise=0.1, seed=5)
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a, feature_source(raster, grid, 10, noise=0.3, seed=6))
    with pytest.raises(ShapeError):
        feature_source(np.zeros((7, 8)), grid, 10)
    with pytest.raises(ValueError):
        feature_source(raster, grid, 5)


def test_descriptor_noise_only_touches_appearance_channels():
    grid = PatchGrid(2, 2, 4)
    raster = np.full(grid.shape, 100)
    clean = feature_source(raster, grid, 10)
    noisy = feature_source(raster, grid, 10, noise=0.0, descriptor_noise=0.5, seed=1)
    changed = np.flatnonzero(np.any(noisy != clean, axis=0)).tolist()
    assert changed == [0, 1, 2, 3, 4, 5, 6]


# ---------------------------------------------------------------------------
# Parameters and checkpoints


@pytest.mark.parametrize("kind", ["transformer", "mil"])
def test_flat_round_trip_and_count(kind, tmp_path):
    cfg = ModelConfig(kind=kind, seed=4)
    model = build_model(cfg)
    flat = get_flat(model)
    assert flat.numel() == param_count(cfg) == param_count(ModelConfig(kind=kind, seed=9))
    other = build_model(ModelConfig(kind=kind, seed=5))
    set_flat(other, flat)
    assert torch.equal(get_flat(other), flat)
    with pytest.raises(ShapeError):
        set_flat(other, flat[:-1])

    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model, {"note": "x"})
    loaded, header = load_checkpoint(path)
    assert torch.equal(get_flat(loaded), flat)
    assert header["extra"] == {"note": "x"} and header["model"]["kind"] == kind

    blob = bytearray(path.read_bytes())
    blob[-1] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(ValueError, match="checksum"):
        load_checkpoint(path)


# ---------------------------------------------------------------------------
# Gradients against central differences


@pytest.mark.parametrize("seed", range(6))
@pytest.mark.parametrize("kind", ["transformer", "mil"])
def test_parameter_gradients(kind, seed):
    errors, checked, total = check_case(seed, kind)
    assert set(errors) == set(LOSS_NAMES)
    assert checked >= 0.8 * total
    assert max(errors.values()) < 1e-4, errors


def test_model_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(kind="rnn")
    with pytest.raises(ValueError):
        ModelConfig(readout="cls")
