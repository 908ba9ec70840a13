"""Lightweight per-pixel vision transformer in numpy, with an analytic backward pass.

Every pixel of a patch is a token whose embedding is its spectrum, so the
width never changes: ``dim`` equals the band count.  Blocks are pre-norm:

    x = x + MHSA(LN1(x))
    x = x + MLP(LN2(x))          # linear -> GELU -> linear

and a bias-carrying linear classifier maps each final token to class logits.
Arrays are batched as (batch, tokens, dim); 2-D input is treated as a batch
of one.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .hypercube import N_CLASSES


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    depth: int = 4
    heads: int = 8
    dim: int = 184
    mlp_hidden: int = 368
    classes: int = N_CLASSES
    tokens: int = 320
    positional: bool = True
    normalized_input: bool = True       # preprocessing the weights were trained on
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} is not divisible by {self.heads} heads")
        for name in ("depth", "heads", "dim", "mlp_hidden", "classes", "tokens"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        raw = json.loads(text)
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in raw.items() if k in known})


BLOCK_PARAMS = ("ln1.g", "ln1.b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
                "ln2.g", "ln2.b", "w1", "b1", "w2", "b2")


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every parameter tensor in checkpoint order."""
    d, hdn = cfg.dim, cfg.mlp_hidden
    shapes: dict[str, tuple[int, ...]] = {}
    if cfg.positional:
        shapes["pos"] = (cfg.tokens, d)
    per_block = {
        "ln1.g": (d,), "ln1.b": (d,),
        "wq": (d, d), "bq": (d,), "wk": (d, d), "bk": (d,), "wv": (d, d), "bv": (d,),
        "wo": (d, d), "bo": (d,),
        "ln2.g": (d,), "ln2.b": (d,),
        "w1": (d, hdn), "b1": (hdn,), "w2": (hdn, d), "b2": (d,),
    }
    for i in range(cfg.depth):
        for name in BLOCK_PARAMS:
            shapes[f"blocks.{i}.{name}"] = per_block[name]
    shapes["cls.w"] = (d, cfg.classes)
    shapes["cls.b"] = (cfg.classes,)
    return shapes


def is_decayed(name: str) -> bool:
    """Weight decay applies to matrices and the positional table, not to norms or biases."""
    leaf = name.rsplit(".", 1)[-1]
    return not (".ln" in name or name.startswith("ln") or leaf in ("b", "g") or leaf.startswith("b"))


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    z = rng.standard_normal(shape)
    bad = np.abs(z) > 2.0
    while bad.any():
        z[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(z) > 2.0
    return z * std


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name == "pos":
            p = rng.normal(0.0, 0.02, shape)
        elif leaf == "g":
            p = np.ones(shape)
        elif leaf == "b" or leaf.startswith("b"):
            p = np.zeros(shape)
        else:
            p = _trunc_normal(rng, shape, 0.02)
        params[name] = p.astype(dtype)
    return params


# ---------------------------------------------------------------- layers

# tanh form of GELU; erf is an order of magnitude slower in numpy
_C = math.sqrt(2.0 / math.pi)
_A = 0.044715


def _gelu_parts(u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    th = np.tanh(_C * (u + _A * u * u * u))
    return 0.5 * u * (1.0 + th), th


def gelu(u: np.ndarray) -> np.ndarray:
    return _gelu_parts(u)[0]


def _gelu_grad(u: np.ndarray, th: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + th) + 0.5 * u * (1.0 - th * th) * _C * (1.0 + 3.0 * _A * u * u)


def _layernorm(x, g, b, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd)


def _layernorm_back(dy, g, cache):
    xhat, rstd = cache
    dg = (dy * xhat).sum(axis=(0, 1))
    db = dy.sum(axis=(0, 1))
    dxhat = dy * g
    dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                 - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dg, db


def _softmax_lastaxis(s: np.ndarray) -> np.ndarray:
    s -= s.max(axis=-1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=-1, keepdims=True)
    return s


# attention is memory bound; a couple of patches at a time keeps the score
# tensors in cache
ATTN_CHUNK = 2


def _attn_probs(q, k, scale):
    return _softmax_lastaxis(np.matmul(q, k.transpose(0, 1, 3, 2)) * scale)


def _attention(h, p, pre, cfg, keep):
    B, T, D = h.shape
    H, hd = cfg.heads, cfg.head_dim
    w = np.concatenate([p[pre + "wq"], p[pre + "wk"], p[pre + "wv"]], axis=1)
    bias = np.concatenate([p[pre + "bq"], p[pre + "bk"], p[pre + "bv"]])
    qkv = (h.reshape(B * T, D) @ w + bias).reshape(B, T, 3, H, hd).transpose(2, 0, 3, 1, 4)
    q, k, v = (np.ascontiguousarray(a) for a in qkv)      # (B, H, T, hd)
    scale = 1.0 / math.sqrt(hd)
    o = np.empty_like(q)
    for i in range(0, B, ATTN_CHUNK):
        sl = slice(i, i + ATTN_CHUNK)
        o[sl] = np.matmul(_attn_probs(q[sl], k[sl], scale), v[sl])
    o = o.transpose(0, 2, 1, 3).reshape(B * T, D)
    out = (o @ p[pre + "wo"] + p[pre + "bo"]).reshape(B, T, D)
    # probabilities are recomputed in the backward pass instead of stored
    cache = (q, k, v, o) if keep else None
    return out, cache


def _attention_back(dout, h, p, pre, cfg, cache, grads):
    q, k, v, o = cache
    B, T, D = dout.shape
    H, hd = cfg.heads, cfg.head_dim
    scale = 1.0 / math.sqrt(hd)
    d2 = dout.reshape(B * T, D)
    grads[pre + "wo"] = o.T @ d2
    grads[pre + "bo"] = d2.sum(axis=0)
    do = np.ascontiguousarray((d2 @ p[pre + "wo"].T).reshape(B, T, H, hd).transpose(0, 2, 1, 3))
    dqkv = np.empty((B, T, 3, H, hd), dtype=q.dtype)
    for i in range(0, B, ATTN_CHUNK):
        sl = slice(i, i + ATTN_CHUNK)
        att = _attn_probs(q[sl], k[sl], scale)
        datt = np.matmul(do[sl], v[sl].transpose(0, 1, 3, 2))
        dv = np.matmul(att.transpose(0, 1, 3, 2), do[sl])
        # softmax backward: P * (dP - rowsum(dP * P))
        datt -= np.einsum("bhts,bhts->bht", datt, att)[..., None]
        datt *= att
        datt *= scale
        dqkv[sl, :, 0] = np.matmul(datt, k[sl]).transpose(0, 2, 1, 3)
        dqkv[sl, :, 1] = np.matmul(datt.transpose(0, 1, 3, 2), q[sl]).transpose(0, 2, 1, 3)
        dqkv[sl, :, 2] = dv.transpose(0, 2, 1, 3)
    dqkv = dqkv.reshape(B * T, 3 * D)
    h2 = h.reshape(B * T, D)
    dw = h2.T @ dqkv
    db = dqkv.sum(axis=0)
    for j, nm in enumerate("qkv"):
        grads[pre + "w" + nm] = dw[:, j * D:(j + 1) * D]
        grads[pre + "b" + nm] = db[j * D:(j + 1) * D]
    w = np.concatenate([p[pre + "wq"], p[pre + "wk"], p[pre + "wv"]], axis=1)
    return (dqkv @ w.T).reshape(B, T, D)


# ---------------------------------------------------------------- model

def _as_batch(tokens: np.ndarray) -> tuple[np.ndarray, bool]:
    t = np.asarray(tokens)
    if t.ndim == 2:
        return t[None], True
    if t.ndim != 3:
        raise ValueError(f"tokens must be (tokens, dim) or (batch, tokens, dim), got {t.shape}")
    return t, False


def forward(tokens: np.ndarray, params: dict[str, np.ndarray], cfg: ModelConfig,
            cache: bool = False):
    """Per-token logits; with ``cache=True`` also returns what :func:`backward` needs."""
    x, squeeze = _as_batch(tokens)
    B, T, D = x.shape
    if D != cfg.dim:
        raise ValueError(f"token width {D} does not match model dim {cfg.dim}")
    if cfg.positional and T != cfg.tokens:
        raise ValueError(f"{T} tokens per patch but the positional table holds {cfg.tokens}")
    if not np.isfinite(x).all():
        raise ValueError("non-finite model input")
    dtype = params["cls.w"].dtype
    x = x.astype(dtype, copy=True)
    if cfg.positional:
        x += params["pos"]
    layers = []
    for i in range(cfg.depth):
        pre = f"blocks.{i}."
        h1, ln1 = _layernorm(x, params[pre + "ln1.g"], params[pre + "ln1.b"], cfg.ln_eps)
        a, att_cache = _attention(h1, params, pre, cfg, cache)
        x = x + a
        h2, ln2 = _layernorm(x, params[pre + "ln2.g"], params[pre + "ln2.b"], cfg.ln_eps)
        u = h2.reshape(B * T, D) @ params[pre + "w1"] + params[pre + "b1"]
        g, th = _gelu_parts(u)
        x = x + (g @ params[pre + "w2"] + params[pre + "b2"]).reshape(B, T, D)
        if cache:
            layers.append((h1, ln1, att_cache, h2, ln2, u, g, th))
    logits = (x.reshape(B * T, D) @ params["cls.w"] + params["cls.b"]).reshape(B, T, cfg.classes)
    if squeeze:
        logits = logits[0]
    if not cache:
        return logits
    return logits, {"x_final": x, "layers": layers, "squeeze": squeeze}


def backward(dlogits: np.ndarray, cache: dict | None, params: dict[str, np.ndarray],
             cfg: ModelConfig) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss for every parameter, plus ``"input"`` for the tokens."""
    if not cache:
        raise ValueError("backward needs the cache from forward(..., cache=True)")
    dl = dlogits[None] if cache["squeeze"] else dlogits
    x = cache["x_final"]
    B, T, D = x.shape
    dl2 = dl.reshape(B * T, cfg.classes).astype(x.dtype)
    grads: dict[str, np.ndarray] = {}
    grads["cls.w"] = x.reshape(B * T, D).T @ dl2
    grads["cls.b"] = dl2.sum(axis=0)
    dx = (dl2 @ params["cls.w"].T).reshape(B, T, D)
    for i in reversed(range(cfg.depth)):
        pre = f"blocks.{i}."
        h1, ln1, att_cache, h2, ln2, u, g, th = cache["layers"][i]
        # MLP branch
        d2 = dx.reshape(B * T, D)
        grads[pre + "w2"] = g.T @ d2
        grads[pre + "b2"] = d2.sum(axis=0)
        du = (d2 @ params[pre + "w2"].T) * _gelu_grad(u, th)
        grads[pre + "w1"] = h2.reshape(B * T, D).T @ du
        grads[pre + "b1"] = du.sum(axis=0)
        dh2 = (du @ params[pre + "w1"].T).reshape(B, T, D)
        dln, grads[pre + "ln2.g"], grads[pre + "ln2.b"] = _layernorm_back(dh2, params[pre + "ln2.g"], ln2)
        dx = dx + dln
        # attention branch
        dh1 = _attention_back(dx, h1, params, pre, cfg, att_cache, grads)
        dln, grads[pre + "ln1.g"], grads[pre + "ln1.b"] = _layernorm_back(dh1, params[pre + "ln1.g"], ln1)
        dx = dx + dln
    if cfg.positional:
        grads["pos"] = dx.sum(axis=0)
    grads["input"] = dx[0] if cache["squeeze"] else dx
    return grads


def attention_maps(tokens: np.ndarray, params: dict[str, np.ndarray], cfg: ModelConfig) -> list[np.ndarray]:
    """Softmax attention of every block, each (batch, heads, tokens, tokens)."""
    _, c = forward(tokens, params, cfg, cache=True)
    scale = 1.0 / math.sqrt(cfg.head_dim)
    return [_attn_probs(layer[2][0], layer[2][1], scale) for layer in c["layers"]]


class Model:
    """Parameters bundled with their configuration."""

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray] | None = None, seed: int = 0):
        self.config = config
        self.params = params if params is not None else init_params(config, seed)
        check_params(self.params, config)

    def forward(self, tokens: np.ndarray) -> np.ndarray:
        return forward(tokens, self.params, self.config)

    def save(self, path: str | Path) -> None:
        save_params(self.params, self.config, path)

    @classmethod
    def load(cls, path: str | Path, config: ModelConfig | None = None) -> "Model":
        params, cfg = load_params(path, config)
        return cls(cfg, params)


def check_params(params: dict[str, np.ndarray], cfg: ModelConfig) -> None:
    shapes = param_shapes(cfg)
    if set(params) != set(shapes):
        missing = set(shapes) - set(params)
        extra = set(params) - set(shapes)
        raise ValueError(f"parameter set mismatch (missing {sorted(missing)[:3]}, extra {sorted(extra)[:3]})")
    for name, shape in shapes.items():
        if params[name].shape != shape:
            raise ValueError(f"{name}: shape {params[name].shape}, expected {shape}")


# ---------------------------------------------------------------- checkpoints

MAGIC = b"BELTSCAN"
VERSION = 1
_HEAD = struct.Struct("<8sII")


def save_params(params: dict[str, np.ndarray], cfg: ModelConfig, path: str | Path) -> None:
    check_params(params, cfg)
    meta = cfg.to_json().encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_HEAD.pack(MAGIC, VERSION, len(meta)))
        fh.write(meta)
        for name in param_shapes(cfg):
            fh.write(np.ascontiguousarray(params[name], dtype="<f4").tobytes())


def load_params(path: str | Path, config: ModelConfig | None = None
                ) -> tuple[dict[str, np.ndarray], ModelConfig]:
    blob = Path(path).read_bytes()
    if len(blob) < _HEAD.size:
        raise CheckpointError(f"{path}: truncated checkpoint header")
    magic, version, n = _HEAD.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a beltscan checkpoint")
    if version != VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {VERSION}")
    start = _HEAD.size + n
    if len(blob) < start:
        raise CheckpointError(f"{path}: truncated checkpoint metadata")
    try:
        cfg = ModelConfig.from_json(blob[_HEAD.size:start].decode())
    except (ValueError, TypeError) as exc:
        raise CheckpointError(f"{path}: corrupt model configuration ({exc})") from exc
    if config is not None and config != cfg:
        raise CheckpointError(f"{path}: checkpoint config {cfg} does not match requested {config}")
    shapes = param_shapes(cfg)
    total = sum(4 * math.prod(s) for s in shapes.values())
    if len(blob) - start != total:
        raise CheckpointError(f"{path}: corrupt checkpoint, expected {total} tensor bytes, "
                              f"found {len(blob) - start}")
    params = {}
    off = start
    for name, shape in shapes.items():
        count = math.prod(shape)
        params[name] = np.frombuffer(blob, dtype="<f4", count=count, offset=off).reshape(shape).astype(np.float32)
        off += 4 * count
    for name, p in params.items():
        if not np.isfinite(p).all():
            raise CheckpointError(f"{path}: non-finite values in {name}")
    return params, cfg
