import numpy as np
import pytest

from beltscan import nn
from beltscan.nn import CheckpointError, Model, ModelConfig, init_params, load_params, param_shapes, save_params
from beltscan.train import LossConfig, loss

from oracles import gradient_check, ref_forward

SMALL = ModelConfig(depth=2, heads=8, dim=184, mlp_hidden=368, tokens=16)


def params64(cfg, seed=0, jitter=0.05):
    rng = np.random.default_rng(seed + 100)
    p = init_params(cfg, seed, dtype=np.float64)
    return {k: v + jitter * rng.standard_normal(v.shape) for k, v in p.items()}


def test_config_invariants():
    cfg = ModelConfig()
    assert cfg.head_dim == 23 and cfg.heads * cfg.head_dim == cfg.dim == 184
    assert cfg.tokens == 320 and cfg.classes == 13
    with pytest.raises(ValueError):
        ModelConfig(heads=7)
    assert ModelConfig.from_json(cfg.to_json()) == cfg


def test_zero_params_give_bias():
    cfg = ModelConfig(depth=2, tokens=16)
    p = {k: np.zeros_like(v) for k, v in init_params(cfg).items()}
    p["cls.b"] = np.arange(13, dtype=np.float32)
    out = nn.forward(np.zeros((16, 184), np.float32), p, cfg)
    np.testing.assert_array_equal(out, np.broadcast_to(p["cls.b"], (16, 13)))


def test_permutation_equivariance_without_position(rng):
    cfg = ModelConfig(depth=2, tokens=16, positional=False)
    p = params64(cfg)
    x = rng.random((16, 184))
    perm = rng.permutation(16)
    np.testing.assert_allclose(nn.forward(x[perm], p, cfg), nn.forward(x, p, cfg)[perm], atol=1e-12)


def test_forward_matches_reference(rng):
    p = params64(SMALL, seed=4)
    x = rng.random((16, 184))
    np.testing.assert_allclose(nn.forward(x, p, SMALL), ref_forward(x, p, SMALL), rtol=1e-10, atol=1e-10)


def test_batched_equals_single(rng):
    p = params64(SMALL)
    x = rng.random((3, 16, 184))
    out = nn.forward(x, p, SMALL)
    for i in range(3):
        np.testing.assert_allclose(out[i], nn.forward(x[i], p, SMALL), atol=1e-12)


def test_input_validation(rng):
    p = init_params(SMALL)
    with pytest.raises(ValueError, match="tokens"):
        nn.forward(rng.random((17, 184)), p, SMALL)
    with pytest.raises(ValueError, match="dim"):
        nn.forward(rng.random((16, 183)), p, SMALL)
    x = rng.random((16, 184))
    x[0, 0] = np.inf
    with pytest.raises(ValueError, match="non-finite"):
        nn.forward(x, p, SMALL)


def test_width_constant_across_blocks(rng):
    _, cache = nn.forward(rng.random((2, 16, 184)), init_params(SMALL), SMALL, cache=True)
    for layer in cache["layers"]:
        assert layer[0].shape == (2, 16, 184) and layer[3].shape == (2, 16, 184)
    assert cache["x_final"].shape == (2, 16, 184)


def test_attention_rows_are_distributions(rng):
    for a in nn.attention_maps(rng.random((2, 16, 184)), params64(SMALL), SMALL):
        assert a.shape == (2, 8, 16, 16)
        assert np.all(a >= 0)
        np.testing.assert_allclose(a.sum(axis=-1), 1.0, atol=1e-6)


def test_forward_deterministic(rng):
    m = Model(ModelConfig(depth=1), seed=1)
    x = rng.random((4, 320, 184)).astype(np.float32)
    assert m.forward(x).tobytes() == m.forward(x).tobytes()


# ---------------------------------------------------------------- backward

def test_backward_needs_cache():
    with pytest.raises(ValueError):
        nn.backward(np.zeros((16, 13)), None, init_params(SMALL), SMALL)


def test_zero_upstream_zero_grads(rng):
    p = params64(SMALL)
    _, cache = nn.forward(rng.random((16, 184)), p, SMALL, cache=True)
    grads = nn.backward(np.zeros((16, 13)), cache, p, SMALL)
    assert set(grads) == set(param_shapes(SMALL)) | {"input"}
    assert all(not np.any(g) for g in grads.values())


def test_duplicated_sample_doubles_grads(rng):
    p = params64(SMALL)
    x = rng.random((1, 16, 184))
    up = rng.standard_normal((1, 16, 13))
    _, c1 = nn.forward(x, p, SMALL, cache=True)
    g1 = nn.backward(up, c1, p, SMALL)
    _, c2 = nn.forward(np.concatenate([x, x]), p, SMALL, cache=True)
    g2 = nn.backward(np.concatenate([up, up]), c2, p, SMALL)
    for k in param_shapes(SMALL):
        np.testing.assert_allclose(g2[k], 2 * g1[k], rtol=1e-10, atol=1e-14)


def test_gradients_match_finite_differences():
    cfg = ModelConfig(depth=1, tokens=16)
    p = params64(cfg, seed=9)
    rng = np.random.default_rng(2)
    x = rng.random((2, 16, 184))
    y = rng.integers(0, 13, (2, 16))
    logits, cache = nn.forward(x, p, cfg, cache=True)
    grads = nn.backward(loss(logits, y)[1], cache, p, cfg)
    errors = gradient_check(lambda: loss(nn.forward(x, p, cfg), y)[0], grads, p, rng, coords=2)
    assert max(errors.values()) <= 1e-4, max(errors.items(), key=lambda kv: kv[1])


def test_input_gradient(rng):
    p = params64(SMALL)
    x = rng.random((16, 184))
    w = rng.standard_normal((16, 13))
    _, cache = nn.forward(x, p, SMALL, cache=True)
    gx = nn.backward(w, cache, p, SMALL)["input"]
    d = rng.standard_normal(x.shape)
    h = 1e-5
    num = ((nn.forward(x + h * d, p, SMALL) * w).sum() - (nn.forward(x - h * d, p, SMALL) * w).sum()) / (2 * h)
    assert (gx * d).sum() == pytest.approx(num, rel=1e-6)


# ---------------------------------------------------------------- init and checkpoints

def test_init_deterministic_and_statistics():
    cfg = ModelConfig()
    a, b = init_params(cfg, 5), init_params(cfg, 5)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert not np.array_equal(init_params(cfg, 6)["cls.w"], a["cls.w"])
    for k, v in a.items():
        if k.endswith(".g"):
            assert np.all(v == 1)
        if k.endswith((".b", "bq", "bk", "bv", "bo", "b1", "b2")):
            assert np.all(v == 0)
    weights = np.concatenate([v.ravel() for k, v in a.items() if k.rsplit(".", 1)[-1] in ("wq", "wk", "wv", "wo", "w1", "w2", "w")])
    assert weights.size > 1e5
    assert abs(weights.std() - 0.02) <= 0.2 * 0.02
    assert np.abs(weights).max() <= 0.04


def test_weight_decay_selection():
    assert nn.is_decayed("blocks.0.wq") and nn.is_decayed("cls.w") and nn.is_decayed("pos")
    for name in ("blocks.0.ln1.g", "blocks.0.ln2.b", "blocks.0.bq", "blocks.1.b1", "cls.b"):
        assert not nn.is_decayed(name)


def test_checkpoint_round_trip(tmp_path):
    m = Model(ModelConfig(depth=2), seed=3)
    m.save(tmp_path / "m.ckpt")
    back = Model.load(tmp_path / "m.ckpt")
    assert back.config == m.config
    assert all(back.params[k].tobytes() == m.params[k].tobytes() for k in m.params)
    assert (tmp_path / "m.ckpt").read_bytes()[:8] == b"BELTSCAN"


def test_checkpoint_config_mismatch(tmp_path):
    cfg = ModelConfig(depth=1)
    save_params(init_params(cfg), cfg, tmp_path / "m.ckpt")
    with pytest.raises(CheckpointError, match="does not match"):
        load_params(tmp_path / "m.ckpt", ModelConfig(depth=1, classes=12))


def test_truncated_checkpoint(tmp_path):
    cfg = ModelConfig(depth=1)
    save_params(init_params(cfg), cfg, tmp_path / "m.ckpt")
    blob = (tmp_path / "m.ckpt").read_bytes()
    (tmp_path / "t.ckpt").write_bytes(blob[:-10])
    with pytest.raises(CheckpointError, match="corrupt"):
        load_params(tmp_path / "t.ckpt")
    (tmp_path / "h.ckpt").write_bytes(blob[:5])
    with pytest.raises(CheckpointError):
        load_params(tmp_path / "h.ckpt")
    (tmp_path / "x.ckpt").write_bytes(b"NOTMAGIC" + blob[8:])
    with pytest.raises(CheckpointError, match="not a beltscan"):
        load_params(tmp_path / "x.ckpt")


def test_params_shape_check():
    cfg = ModelConfig(depth=1)
    p = init_params(cfg)
    p["cls.w"] = np.zeros((184, 12), np.float32)
    with pytest.raises(ValueError):
        Model(cfg, p)
