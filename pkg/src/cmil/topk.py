"""Patch-attention-guided top-K: hard selection at inference, perturbed-maximum
smoothing during training.

The soft indicator is the Monte-Carlo mean of hard top-K one-hot unions under
Gaussian perturbations of the attention scores; its backward pass uses the
perturbed-maximizer Jacobian estimator J = (1/(M·sigma)) * sum_m ind_m (x) z_m
with the same saved noise samples, so gradients reach the attention network
through the selection itself.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, _accumulate, gather, scale_rows
from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class TopKConfig:
    K: int = 20
    num_noise_samples: int = 100
    noise_sigma: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.K < 1:
            raise ConfigError(f"K must be >= 1, got {self.K}")
        if self.num_noise_samples < 1:
            raise ConfigError(f"num_noise_samples must be >= 1, got {self.num_noise_samples}")
        if self.noise_sigma <= 0:
            raise ConfigError(f"noise_sigma must be > 0, got {self.noise_sigma}")


@dataclass
class Selection:
    """Hard indices always; soft indicator only in training mode."""

    hard_indices: np.ndarray
    soft_indicator: Tensor | None = None


def hard_topk(alpha: np.ndarray, k: int) -> np.ndarray:
    """Indices of the K largest entries, ties to the lower index, returned sorted."""
    alpha = np.asarray(alpha, dtype=np.float64)
    n = alpha.shape[0]
    if k > n:
        raise ShapeError(f"K={k} exceeds bag size N={n}")
    order = np.argsort(-alpha, kind="stable")
    return np.sort(order[:k])


def _topk_indicators(perturbed: np.ndarray, k: int) -> np.ndarray:
    idx = np.argpartition(-perturbed, k - 1, axis=1)[:, :k]
    ind = np.zeros_like(perturbed)
    np.put_along_axis(ind, idx, 1.0, axis=1)
    return ind


def perturbed_topk(
    alpha: Tensor,
    cfg: TopKConfig,
    rng: np.random.Generator | None = None,
    noise: np.ndarray | None = None,
) -> Tensor:
    """Soft top-K indicator as an autodiff node over the attention vector.

    `noise` pins the Gaussian samples explicitly (common-random-number tests);
    otherwise they come from `rng`, falling back to a stream seeded by cfg.seed.
    """
    n = alpha.shape[0]
    if cfg.K > n:
        raise ShapeError(f"K={cfg.K} exceeds bag size N={n}")
    if cfg.K == n:
        # every perturbation selects everything: constant ones, zero gradient
        return Tensor(np.ones(n), (alpha,), None)

    if noise is None:
        if rng is None:
            rng = np.random.default_rng(cfg.seed)
        noise = rng.normal(size=(cfg.num_noise_samples, n))
    else:
        noise = np.asarray(noise, dtype=np.float64)
        if noise.ndim != 2 or noise.shape[1] != n:
            raise ShapeError(f"noise must be M x {n}, got {noise.shape}")

    m = noise.shape[0]
    perturbed = alpha.data[None, :] + cfg.noise_sigma * noise
    ind = _topk_indicators(perturbed, cfg.K)
    out = Tensor(ind.mean(axis=0), (alpha,), None)

    def bwd(g):
        per_sample = ind @ g  # upstream mass landing on each sample's selected set
        _accumulate(alpha, (per_sample @ noise) / (m * cfg.noise_sigma))

    out._backward = bwd
    return out


def select(
    alpha: Tensor,
    cfg: TopKConfig,
    mode: str = "train",
    rng: np.random.Generator | None = None,
    noise: np.ndarray | None = None,
) -> Selection:
    hard = hard_topk(alpha.data, cfg.K)
    if mode == "infer":
        return Selection(hard)
    if mode != "train":
        raise ConfigError(f"mode must be 'train' or 'infer', got {mode!r}")
    return Selection(hard, perturbed_topk(alpha, cfg, rng=rng, noise=noise))


def gather_concepts(f_values: np.ndarray, sel: Selection, mode: str = "train") -> Tensor:
    """K x C concept activations of the selected patches.

    Training mode scales each hard-top-K row by its soft indicator weight, so
    selection gradients reach the attention scores while the concept branch
    sees a fixed K x C shape; inference gathers rows as-is.
    """
    f_values = np.asarray(f_values, dtype=np.float64)
    idx = np.asarray(sel.hard_indices)
    if idx.size and (idx.min() < 0 or idx.max() >= f_values.shape[0]):
        raise ShapeError(f"selection indices out of range for {f_values.shape[0]} patches")
    rows = Tensor(f_values[idx])
    if mode == "infer":
        return rows
    if mode != "train":
        raise ConfigError(f"mode must be 'train' or 'infer', got {mode!r}")
    if sel.soft_indicator is None:
        raise ConfigError("training-mode gather needs a soft indicator; run select(mode='train')")
    weights = gather(sel.soft_indicator, idx)
    return scale_rows(rows, weights)
