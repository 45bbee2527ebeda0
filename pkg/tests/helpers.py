"""Small shared builders for the test suite."""
import numpy as np

from trajdiff.net import NetConfig, TokenBatch, init_params

TINY = NetConfig(depth=2, width=16, heads=2, feature_dim=4, t_cond=3, horizon=8,
                 history_embed_dim=4, time_embed_dim=8)


def perturbed_params(config, seed=1, scale=0.3, dtype=np.float64):
    """Initialized parameters moved off the identity-at-init point so every path is active."""
    rng = np.random.default_rng(seed + 100)
    p = init_params(config, seed, dtype=dtype)
    for k in p.values:
        p.values[k] = (p.values[k] + scale * rng.standard_normal(p.values[k].shape)).astype(dtype)
    return p


def random_batch(config, rng, b=2, n=6, mask=None, dtype=np.float64):
    if mask is None:
        mask = np.ones((b, n), dtype=bool)
        mask[0, n - 2:] = False
    return TokenBatch(rng.standard_normal((b, n, config.token_dim)).astype(dtype),
                      rng.standard_normal((b, n, config.width)).astype(dtype),
                      np.asarray(mask, dtype=bool),
                      rng.integers(1, config.diffusion_steps + 1, size=b).astype(np.float64),
                      rng.standard_normal((b, 2)).astype(dtype),
                      (np.arange(b) % 2 == 0).astype(dtype))
