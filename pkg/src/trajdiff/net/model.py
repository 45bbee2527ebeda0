"""Track-token transformer with adaptive layer norm and a hand-written backward pass.

Each track is one token.  Blocks are pre-norm: the normalized stream is
modulated with a shift and scale produced from the global conditioning
(diffusion step and optional displacement), and each residual branch is
multiplied by a learned gate.  Modulation layers start at zero, so every
block is the identity at initialization.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .embed import sinusoidal_embed
from .tokens import NetConfig, TokenBatch

LN_EPS = 1e-6
_GELU_C = float(np.sqrt(2.0 / np.pi))


class NumericError(FloatingPointError):
    """Non-finite values appeared in a forward or backward pass."""


class ModelParams:
    """Ordered named tensors, each paired with a gradient slot."""

    def __init__(self, values: dict[str, np.ndarray]):
        self.values = dict(values)
        self.grads = {k: np.zeros_like(v) for k, v in self.values.items()}

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    def __iter__(self):
        return iter(self.values)

    @property
    def names(self) -> list[str]:
        return list(self.values)

    @property
    def dtype(self):
        return next(iter(self.values.values())).dtype

    def count(self) -> int:
        return int(sum(v.size for v in self.values.values()))

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.values.items()})

    def astype(self, dtype) -> "ModelParams":
        return ModelParams({k: v.astype(dtype) for k, v in self.values.items()})

    def all_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.values.values())


def param_shapes(config: NetConfig) -> dict[str, tuple[int, ...]]:
    d = config.width
    hidden = config.mlp_ratio * d
    shapes = {
        "in_proj.w": (config.token_dim, d), "in_proj.b": (d,),
        "time.w": (config.time_embed_dim, d), "time.b": (d,),
        "disp.w": (2, d),
    }
    for i in range(config.depth):
        p = f"blocks.{i}."
        shapes.update({
            p + "mod.w": (d, 6 * d), p + "mod.b": (6 * d,),
            p + "qkv.w": (d, 3 * d), p + "qkv.b": (3 * d,),
            p + "proj.w": (d, d), p + "proj.b": (d,),
            p + "fc1.w": (d, hidden), p + "fc1.b": (hidden,),
            p + "fc2.w": (hidden, d), p + "fc2.b": (d,),
        })
    shapes.update({"out.w": (d, config.target_dim), "out.b": (config.target_dim,)})
    return shapes


def param_count(config: NetConfig) -> int:
    return int(sum(np.prod(s) for s in param_shapes(config).values()))


def _truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return x * std


def init_params(config: NetConfig, seed: int = 0, dtype=np.float32) -> ModelParams:
    rng = np.random.default_rng(seed)
    values = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".b") or ".mod." in name:
            values[name] = np.zeros(shape)
        else:
            values[name] = _truncated_normal(rng, shape, 1.0 / np.sqrt(shape[0]))
    return ModelParams({k: v.astype(dtype) for k, v in values.items()})


# --------------------------------------------------------------------------
# primitives


def _layer_norm(x):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + LN_EPS)
    return xc * inv, inv


def _layer_norm_back(dy, xhat, inv):
    return inv * (dy - dy.mean(-1, keepdims=True) - xhat * (dy * xhat).mean(-1, keepdims=True))


def _gelu(x):
    t = np.tanh(_GELU_C * (x + 0.044715 * (x * x * x)))
    return 0.5 * x * (1.0 + t), t


def _gelu_back(dy, x, t):
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)


def _silu(x):
    s = 1.0 / (1.0 + np.exp(-x))
    return x * s, s


def _dense_grad(x, dy):
    """Weight gradient of ``x @ w`` summed over all leading axes."""
    return x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])


def _sum_lead(dy):
    return dy.reshape(-1, dy.shape[-1]).sum(0)


def time_features(tau, config: NetConfig, dtype) -> np.ndarray:
    return sinusoidal_embed(np.asarray(tau, dtype=np.float64) / config.diffusion_steps,
                            config.time_embed_dim).astype(dtype)


@dataclass
class Cache:
    batch: TokenBatch
    config: NetConfig
    tokens: np.ndarray
    time_feat: np.ndarray
    disp: np.ndarray
    cond: np.ndarray
    silu_sig: np.ndarray
    cond_act: np.ndarray
    blocks: list[dict] = field(default_factory=list)
    final: np.ndarray | None = None


def forward(params: ModelParams, batch: TokenBatch, config: NetConfig, keep_cache: bool = False):
    """Predict the clean target ``[B, N, D_target]`` for every token."""
    dt = params.dtype
    p = params.values
    x_in = batch.tokens.astype(dt, copy=False)
    mask = np.asarray(batch.attention_mask, dtype=bool)
    if not mask.any(axis=1).all():
        raise ValueError("every example needs at least one valid track")
    b, n, _ = x_in.shape
    heads = config.heads
    dh = config.width // heads
    scale = dt.type(1.0 / np.sqrt(dh))
    key_bias = np.where(mask, 0.0, -np.inf).astype(dt)[:, None, None, :]

    tfeat = time_features(batch.tau, config, dt)
    disp = (config.displacement_scale * batch.displacement * batch.displacement_present[:, None]).astype(dt)
    cond = tfeat @ p["time.w"] + p["time.b"] + disp @ p["disp.w"]
    cond_act, sig = _silu(cond)

    h = x_in @ p["in_proj.w"] + p["in_proj.b"] + batch.position_encoding.astype(dt, copy=False)
    cache = Cache(batch, config, x_in, tfeat, disp, cond, sig, cond_act) if keep_cache else None
    d = config.width
    for i in range(config.depth):
        pre = f"blocks.{i}."
        mod = cond_act @ p[pre + "mod.w"] + p[pre + "mod.b"]
        sh1, sc1, g1, sh2, sc2, g2 = (mod[:, k * d:(k + 1) * d][:, None, :] for k in range(6))

        n1, inv1 = _layer_norm(h)
        a_in = n1 * (1 + sc1) + sh1
        qkv = a_in @ p[pre + "qkv.w"] + p[pre + "qkv.b"]
        qkv = qkv.reshape(b, n, 3, heads, dh).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        s = (q @ k.swapaxes(-1, -2)) * scale + key_bias
        s = s - s.max(-1, keepdims=True)
        e = np.exp(s)
        att = e / e.sum(-1, keepdims=True)
        o = (att @ v).transpose(0, 2, 1, 3).reshape(b, n, d)
        attn_out = o @ p[pre + "proj.w"] + p[pre + "proj.b"]
        h_mid = h + g1 * attn_out

        n2, inv2 = _layer_norm(h_mid)
        m_in = n2 * (1 + sc2) + sh2
        f1 = m_in @ p[pre + "fc1.w"] + p[pre + "fc1.b"]
        g, tanh_t = _gelu(f1)
        f2 = g @ p[pre + "fc2.w"] + p[pre + "fc2.b"]
        h_next = h_mid + g2 * f2
        if keep_cache:
            cache.blocks.append(dict(h=h, mod=mod, n1=n1, inv1=inv1, a_in=a_in, q=q, k=k, v=v, att=att, o=o,
                                     attn_out=attn_out, n2=n2, inv2=inv2, m_in=m_in, f1=f1, g=g, tanh=tanh_t,
                                     f2=f2))
        h = h_next
    out = h @ p["out.w"] + p["out.b"]
    if not np.isfinite(out).all():
        raise NumericError(_diagnose(params, batch, config))
    if keep_cache:
        cache.final = h
        return out, cache
    return out


def _diagnose(params: ModelParams, batch: TokenBatch, config: NetConfig) -> str:
    bad_params = [k for k, v in params.values.items() if not np.isfinite(v).all()]
    if bad_params:
        return f"non-finite parameters: {bad_params[:5]}"
    if not np.isfinite(batch.tokens).all():
        return "non-finite input tokens"
    return f"non-finite activations in forward pass (depth {config.depth}, tau {batch.tau[:4]})"


def backward(params: ModelParams, cache: Cache | None, upstream: np.ndarray,
             accumulate: bool = True) -> dict[str, np.ndarray]:
    """Reverse-mode gradients of ``sum(upstream * forward(...))``.

    Parameter gradients are added into ``params.grads`` when ``accumulate``;
    the returned dict also carries the input-token gradient under ``"tokens"``.
    """
    if cache is None or cache.final is None:
        raise ValueError("backward needs the cache from forward(..., keep_cache=True)")
    p = params.values
    config = cache.config
    dt = params.dtype
    dy = np.asarray(upstream, dtype=dt)
    b, n, _ = dy.shape
    d = config.width
    heads = config.heads
    dh = d // heads
    scale = dt.type(1.0 / np.sqrt(dh))
    grads: dict[str, np.ndarray] = {}

    grads["out.w"] = _dense_grad(cache.final, dy)
    grads["out.b"] = _sum_lead(dy)
    dh_ = dy @ p["out.w"].T
    dcond_act = np.zeros_like(cache.cond_act)
    for i in reversed(range(config.depth)):
        pre = f"blocks.{i}."
        c = cache.blocks[i]
        mod = c["mod"]
        sc1, g1 = mod[:, d:2 * d][:, None], mod[:, 2 * d:3 * d][:, None]
        sc2, g2 = mod[:, 4 * d:5 * d][:, None], mod[:, 5 * d:6 * d][:, None]

        # mlp branch
        dg2 = (dh_ * c["f2"]).sum(1)
        df2 = dh_ * g2
        grads[pre + "fc2.w"] = _dense_grad(c["g"], df2)
        grads[pre + "fc2.b"] = _sum_lead(df2)
        df1 = _gelu_back(df2 @ p[pre + "fc2.w"].T, c["f1"], c["tanh"])
        grads[pre + "fc1.w"] = _dense_grad(c["m_in"], df1)
        grads[pre + "fc1.b"] = _sum_lead(df1)
        dm_in = df1 @ p[pre + "fc1.w"].T
        dsh2 = dm_in.sum(1)
        dsc2 = (dm_in * c["n2"]).sum(1)
        dh_mid = dh_ + _layer_norm_back(dm_in * (1 + sc2), c["n2"], c["inv2"])

        # attention branch
        dg1 = (dh_mid * c["attn_out"]).sum(1)
        dattn = dh_mid * g1
        grads[pre + "proj.w"] = _dense_grad(c["o"], dattn)
        grads[pre + "proj.b"] = _sum_lead(dattn)
        do = (dattn @ p[pre + "proj.w"].T).reshape(b, n, heads, dh).transpose(0, 2, 1, 3)
        att = c["att"]
        datt = do @ c["v"].swapaxes(-1, -2)
        dv = att.swapaxes(-1, -2) @ do
        ds = att * (datt - (datt * att).sum(-1, keepdims=True)) * scale
        dq = ds @ c["k"]
        dk = ds.swapaxes(-1, -2) @ c["q"]
        dqkv = np.stack([dq, dk, dv]).transpose(1, 3, 0, 2, 4).reshape(b, n, 3 * d)
        grads[pre + "qkv.w"] = _dense_grad(c["a_in"], dqkv)
        grads[pre + "qkv.b"] = _sum_lead(dqkv)
        da_in = dqkv @ p[pre + "qkv.w"].T
        dsh1 = da_in.sum(1)
        dsc1 = (da_in * c["n1"]).sum(1)
        dh_ = dh_mid + _layer_norm_back(da_in * (1 + sc1), c["n1"], c["inv1"])

        dmod = np.concatenate([dsh1, dsc1, dg1, dsh2, dsc2, dg2], axis=-1)
        grads[pre + "mod.w"] = cache.cond_act.T @ dmod
        grads[pre + "mod.b"] = dmod.sum(0)
        dcond_act += dmod @ p[pre + "mod.w"].T

    grads["in_proj.w"] = _dense_grad(cache.tokens, dh_)
    grads["in_proj.b"] = _sum_lead(dh_)
    sig = cache.silu_sig
    dcond = dcond_act * (sig * (1 + cache.cond * (1 - sig)))
    grads["time.w"] = cache.time_feat.T @ dcond
    grads["time.b"] = dcond.sum(0)
    grads["disp.w"] = cache.disp.T @ dcond
    if accumulate:
        for k in params.values:
            params.grads[k] += grads[k]
    grads["tokens"] = dh_ @ p["in_proj.w"].T
    return grads
