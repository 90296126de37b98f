"""Conditional masked-token predictor with hand-written reverse-mode gradients.

Pre-LayerNorm transformer over the flattened grid (single-head attention; the
key projection has no bias since softmax is invariant to it):

    x = tok_emb[t] + pos_emb + cond_emb[c] + step_features(s) @ step_w
    x = x + Attn(LN(x));  x = x + MLP(LN(x))        (num_layers times)
    logits = LN(x) @ head_w + head_b

All arrays are float64. The network is batched: ``tokens`` is (B, L) with
L = grid_h * grid_w, ``cond`` is (B,) with ``NULL_COND`` selecting the
unconditional branch, ``step_frac`` is (B,).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Callable

import numpy as np

from .errors import ConfigError, InputError, NumericalError

NULL_COND = -1
STEP_FEATURES = 8
LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


@dataclass(frozen=True)
class NetConfig:
    grid_h: int = 8
    grid_w: int = 8
    vocab: int = 16
    embed_dim: int = 32
    num_layers: int = 2
    num_conditions: int = 5
    cond_dropout_prob: float = 0.1

    @property
    def num_positions(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def mask_id(self) -> int:
        return self.vocab

    def validate(self) -> "NetConfig":
        if self.grid_h < 1 or self.grid_w < 1:
            raise ConfigError(f"grid must be at least 1x1, got {self.grid_h}x{self.grid_w}")
        if self.vocab < 2:
            raise ConfigError(f"vocab must be >= 2, got {self.vocab}")
        if self.embed_dim < 4:
            raise ConfigError(f"embed_dim must be >= 4, got {self.embed_dim}")
        if self.num_layers < 1:
            raise ConfigError(f"num_layers must be >= 1, got {self.num_layers}")
        if self.num_conditions < 1:
            raise ConfigError(f"num_conditions must be >= 1, got {self.num_conditions}")
        if not 0.0 <= self.cond_dropout_prob < 1.0:
            raise ConfigError(f"cond_dropout_prob must be in [0, 1), got {self.cond_dropout_prob}")
        return self

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def param_shapes(cfg: NetConfig) -> dict[str, tuple[int, ...]]:
    """Ordered tensor names and shapes; a pure function of the config."""
    D, V, L, C = cfg.embed_dim, cfg.vocab, cfg.num_positions, cfg.num_conditions
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (V + 1, D),
        "pos_emb": (L, D),
        "cond_emb": (C + 1, D),
        "step_w": (STEP_FEATURES, D),
    }
    for i in range(cfg.num_layers):
        p = f"layer{i}."
        shapes.update({
            p + "ln1_g": (D,), p + "ln1_b": (D,),
            p + "wq": (D, D), p + "bq": (D,),
            p + "wk": (D, D),
            p + "wv": (D, D), p + "bv": (D,),
            p + "wo": (D, D), p + "bo": (D,),
            p + "ln2_g": (D,), p + "ln2_b": (D,),
            p + "w1": (D, 4 * D), p + "b1": (4 * D,),
            p + "w2": (4 * D, D), p + "b2": (D,),
        })
    shapes.update({"lnf_g": (D,), "lnf_b": (D,), "head_w": (D, V), "head_b": (V,)})
    return shapes


@dataclass
class PolicyParams:
    """Named parameter tensors plus the config that fixes their shapes."""

    cfg: NetConfig
    tensors: dict[str, np.ndarray]
    version: int = 0

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.cfg, {k: v.copy() for k, v in self.tensors.items()}, self.version)

    @property
    def num_params(self) -> int:
        return sum(v.size for v in self.tensors.values())

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.tensors.values()])

    def is_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.tensors.values())

    def apply_update(self, grads: dict[str, np.ndarray], lr: float) -> "PolicyParams":
        """Return ``self - lr * grads`` as a new store with a bumped version."""
        new = {k: v - lr * grads[k] for k, v in self.tensors.items()}
        return PolicyParams(self.cfg, new, self.version + 1)

    def equals(self, other: "PolicyParams") -> bool:
        if self.cfg != other.cfg or self.tensors.keys() != other.tensors.keys():
            return False
        return all(np.array_equal(v, other.tensors[k]) for k, v in self.tensors.items())


ParamGrads = dict[str, np.ndarray]


def zero_grads(params: PolicyParams) -> ParamGrads:
    return {k: np.zeros_like(v) for k, v in params.tensors.items()}


def add_grads(a: ParamGrads, b: ParamGrads, scale: float = 1.0) -> ParamGrads:
    return {k: a[k] + scale * b[k] for k in a}


def init_params(cfg: NetConfig, seed: int) -> PolicyParams:
    """Gaussian weights with std 1/sqrt(fan_in), zero biases, unit LayerNorm gains.

    Embedding tables are looked up with one-hot inputs; they use std
    1/sqrt(embed_dim) so the summed input embedding has O(1) scale.
    """
    cfg.validate()
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.endswith("_g"):
            tensors[name] = np.ones(shape)
        elif len(shape) == 1:
            tensors[name] = np.zeros(shape)
        elif leaf.endswith("_emb"):
            tensors[name] = rng.standard_normal(shape) / math.sqrt(cfg.embed_dim)
        else:
            tensors[name] = rng.standard_normal(shape) / math.sqrt(shape[0])
    sincos = grid_sincos(cfg.grid_h, cfg.grid_w, cfg.embed_dim)
    tensors["pos_emb"][:, : sincos.shape[1]] = sincos
    return PolicyParams(cfg, tensors, 0)


def grid_sincos(h: int, w: int, embed_dim: int) -> np.ndarray:
    """2D sin/cos features at pixel centres, frequencies pi / 2**k for k = 0, 1, ...

    Uses at most half of ``embed_dim`` (4 features per frequency). The highest
    frequency encodes row and column parity. Scaled to unit mean row norm.
    """
    nfreq = max(1, min(embed_dim // 8, max(h, w).bit_length()))
    rows, cols = np.indices((h, w))
    feats = []
    for k in range(nfreq):
        om = math.pi / 2 ** k
        for x in (rows, cols):
            feats += [np.sin(om * (x + 0.5)), np.cos(om * (x + 0.5))]
    out = np.stack([f.reshape(-1) for f in feats], axis=1)
    return out / math.sqrt(2 * nfreq)


def step_features(step_frac: np.ndarray) -> np.ndarray:
    """Sinusoidal features of the schedule position, shape (B, STEP_FEATURES)."""
    s = np.asarray(step_frac, dtype=np.float64)[:, None]
    freqs = math.pi * 2.0 ** np.arange(STEP_FEATURES // 2)
    return np.concatenate([np.sin(freqs * s), np.cos(freqs * s)], axis=1)


def _ln_fwd(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd)


def _ln_bwd(dy, cache, g):
    xhat, rstd = cache
    dg = (dy * xhat).sum(axis=(0, 1))
    db = dy.sum(axis=(0, 1))
    dxhat = dy * g
    dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                 - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dg, db


def _gelu_fwd(x):
    t = np.tanh(_GELU_C * (x + 0.044715 * (x * x * x)))
    return 0.5 * x * (1.0 + t), t


def _gelu_bwd(dy, x, t):
    dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * dt)


@dataclass
class ForwardCache:
    params: PolicyParams
    tokens: np.ndarray
    cidx: np.ndarray
    feat: np.ndarray
    layers: list[dict] = field(default_factory=list)
    xf: np.ndarray | None = None
    lnf: tuple | None = None


def _as_batch(cfg: NetConfig, tokens, cond, step_frac):
    tok = np.asarray(tokens)
    if tok.ndim == 1 or (tok.shape == (cfg.grid_h, cfg.grid_w) and cfg.grid_w != cfg.num_positions):
        tok = tok.reshape(1, -1)
    elif tok.ndim == 3:
        tok = tok.reshape(tok.shape[0], -1)
    if tok.ndim != 2 or tok.shape[1] != cfg.num_positions:
        raise InputError(f"expected grids with {cfg.num_positions} positions, got shape {np.shape(tokens)}")
    if not np.issubdtype(tok.dtype, np.integer):
        raise InputError("token grid must hold integers")
    if tok.size and (tok.min() < 0 or tok.max() > cfg.mask_id):
        raise InputError(f"token id out of range [0, {cfg.mask_id}]")
    B = tok.shape[0]
    if cond is None:
        c = np.full(B, NULL_COND, dtype=np.int64)
    else:
        c = np.broadcast_to(np.asarray(cond, dtype=np.int64), (B,)).copy()
    if c.size and (c.max() >= cfg.num_conditions or c.min() < NULL_COND):
        raise InputError(f"condition index out of range [0, {cfg.num_conditions})")
    sf = np.broadcast_to(np.asarray(step_frac, dtype=np.float64), (B,)).copy()
    return tok, c, sf


def forward(params: PolicyParams, tokens, cond, step_frac) -> tuple[np.ndarray, ForwardCache]:
    """Logits of shape (B, L, vocab) and the cache needed by :func:`backward`.

    ``tokens`` may be a single flattened grid (L,), a batch (B, L) or a batch
    of 2-D grids (B, H, W). ``cond`` is an int, an array of ints, or None for
    the unconditional branch (``NULL_COND`` entries select it per row).
    """
    cfg = params.cfg
    tok, c, sf = _as_batch(cfg, tokens, cond, step_frac)
    t = params.tensors
    D = cfg.embed_dim
    cidx = np.where(c == NULL_COND, cfg.num_conditions, c)
    feat = step_features(sf)
    x = t["tok_emb"][tok] + t["pos_emb"][None] + (t["cond_emb"][cidx] + feat @ t["step_w"])[:, None, :]
    cache = ForwardCache(params, tok, cidx, feat)
    scale = 1.0 / math.sqrt(D)
    for i in range(cfg.num_layers):
        p = f"layer{i}."
        a_in, ln1 = _ln_fwd(x, t[p + "ln1_g"], t[p + "ln1_b"])
        q = a_in @ t[p + "wq"] + t[p + "bq"]
        k = a_in @ t[p + "wk"]
        v = a_in @ t[p + "wv"] + t[p + "bv"]
        s = (q @ k.transpose(0, 2, 1)) * scale
        s -= s.max(axis=-1, keepdims=True)
        P = np.exp(s)
        P /= P.sum(axis=-1, keepdims=True)
        o = P @ v
        x = x + o @ t[p + "wo"] + t[p + "bo"]
        m_in, ln2 = _ln_fwd(x, t[p + "ln2_g"], t[p + "ln2_b"])
        h = m_in @ t[p + "w1"] + t[p + "b1"]
        act, th = _gelu_fwd(h)
        x = x + act @ t[p + "w2"] + t[p + "b2"]
        cache.layers.append(dict(a_in=a_in, ln1=ln1, q=q, k=k, v=v, P=P, o=o,
                                 m_in=m_in, ln2=ln2, h=h, th=th, act=act))
    xf, lnf = _ln_fwd(x, t["lnf_g"], t["lnf_b"])
    cache.xf, cache.lnf = xf, lnf
    logits = xf @ t["head_w"] + t["head_b"]
    return logits, cache


def backward(cache: ForwardCache, upstream: np.ndarray) -> ParamGrads:
    """Gradient of ``sum(upstream * logits)`` with respect to every tensor."""
    params = cache.params
    cfg = params.cfg
    t = params.tensors
    B, L = cache.tokens.shape
    D, V = cfg.embed_dim, cfg.vocab
    dlog = np.asarray(upstream, dtype=np.float64)
    if dlog.shape != (B, L, V):
        raise InputError(f"upstream shape {dlog.shape} does not match logits {(B, L, V)}")
    g: ParamGrads = {}
    xf = cache.xf
    g["head_w"] = xf.reshape(-1, D).T @ dlog.reshape(-1, V)
    g["head_b"] = dlog.sum(axis=(0, 1))
    dx, g["lnf_g"], g["lnf_b"] = _ln_bwd(dlog @ t["head_w"].T, cache.lnf, t["lnf_g"])
    scale = 1.0 / math.sqrt(D)
    for i in reversed(range(cfg.num_layers)):
        p = f"layer{i}."
        c = cache.layers[i]
        # MLP sub-block
        flat_dx = dx.reshape(-1, D)
        g[p + "w2"] = c["act"].reshape(-1, 4 * D).T @ flat_dx
        g[p + "b2"] = flat_dx.sum(axis=0)
        dh = _gelu_bwd(dx @ t[p + "w2"].T, c["h"], c["th"])
        g[p + "w1"] = c["m_in"].reshape(-1, D).T @ dh.reshape(-1, 4 * D)
        g[p + "b1"] = dh.sum(axis=(0, 1))
        dm, g[p + "ln2_g"], g[p + "ln2_b"] = _ln_bwd(dh @ t[p + "w1"].T, c["ln2"], t[p + "ln2_g"])
        dx = dx + dm
        # attention sub-block
        flat_dx = dx.reshape(-1, D)
        g[p + "wo"] = c["o"].reshape(-1, D).T @ flat_dx
        g[p + "bo"] = flat_dx.sum(axis=0)
        do = dx @ t[p + "wo"].T
        P = c["P"]
        dP = do @ c["v"].transpose(0, 2, 1)
        dv = P.transpose(0, 2, 1) @ do
        ds = P * (dP - (dP * P).sum(axis=-1, keepdims=True)) * scale
        dq = ds @ c["k"]
        dk = ds.transpose(0, 2, 1) @ c["q"]
        a_flat = c["a_in"].reshape(-1, D)
        da = np.zeros_like(dx)
        for name, d in (("q", dq), ("k", dk), ("v", dv)):
            g[p + "w" + name] = a_flat.T @ d.reshape(-1, D)
            if name != "k":
                g[p + "b" + name] = d.sum(axis=(0, 1))
            da += d @ t[p + "w" + name].T
        dxa, g[p + "ln1_g"], g[p + "ln1_b"] = _ln_bwd(da, c["ln1"], t[p + "ln1_g"])
        dx = dx + dxa
    flat_dx = dx.reshape(-1, D)
    onehot_tok = np.zeros((B * L, V + 1))
    onehot_tok[np.arange(B * L), cache.tokens.ravel()] = 1.0
    g["tok_emb"] = onehot_tok.T @ flat_dx
    g["pos_emb"] = dx.sum(axis=0)
    dc = dx.sum(axis=1)
    onehot_c = np.zeros((B, cfg.num_conditions + 1))
    onehot_c[np.arange(B), cache.cidx] = 1.0
    g["cond_emb"] = onehot_c.T @ dc
    g["step_w"] = cache.feat.T @ dc
    return {k: g[k] for k in t}


def finite_diff_check(
    params: PolicyParams,
    loss_fn: Callable[[PolicyParams], tuple[float, ParamGrads]],
    h: float = 1e-5,
    num_coords: int = 128,
    seed: int = 0,
    value_fn: Callable[[PolicyParams], float] | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn`` returns ``(loss, grads)``; ``value_fn`` (optional) returns the
    loss alone and is used for the perturbed evaluations. Coordinates are drawn
    uniformly within each tensor, cycling over tensors so every tensor is hit.
    """
    if not h > 0 or not math.isfinite(h):
        raise NumericalError(f"finite-difference step must be positive and finite, got {h}")
    value_fn = value_fn or (lambda p: loss_fn(p)[0])
    loss0, grads = loss_fn(params)
    if not math.isfinite(loss0):
        raise NumericalError("loss is not finite at the evaluation point")
    rng = np.random.default_rng(seed)
    names = list(params.tensors)
    worst = 0.0
    for j in range(num_coords):
        name = names[j % len(names)]
        base = params.tensors[name]
        idx = np.unravel_index(rng.integers(base.size), base.shape)
        vals = []
        for sign in (1.0, -1.0):
            pert = dict(params.tensors)
            arr = base.copy()
            arr[idx] += sign * h
            pert[name] = arr
            val = value_fn(PolicyParams(params.cfg, pert, params.version))
            if not math.isfinite(val):
                raise NumericalError("loss is not finite at a perturbed point")
            vals.append(val)
        numeric = (vals[0] - vals[1]) / (2 * h)
        analytic = float(grads[name][idx])
        worst = max(worst, abs(analytic - numeric) / max(abs(analytic), 1e-8))
    return worst
