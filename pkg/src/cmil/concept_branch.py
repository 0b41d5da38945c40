"""Self-interpretable concept branch.

Gated attention runs over the transposed K x C activation matrix, so every
attention unit sees one concept's K-vector of activations across the selected
patches. Raw scores are sparsified by a percentile/temperature squash
(sigmoid((raw - Pr_gamma)/std * t)) instead of softmax, and the slide logit is
assembled as the sum of per-concept contributions kappa_c, making the
decomposition sigma(sum kappa + b) = Y_concept an identity of the forward
pass itself rather than a post-hoc approximation.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError


@dataclass
class ConceptBranchParams:
    attn_v: Tensor  # K x d_a
    attn_u: Tensor  # K x d_a
    attn_w: Tensor  # d_a
    clf_w: Tensor  # C
    clf_b: Tensor  # scalar
    gamma: float = 0.75
    temperature: float = 3.0

    def __post_init__(self):
        if not 0 < self.gamma < 1:
            raise ConfigError(f"gamma must be in (0,1), got {self.gamma}")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")

    def tensors(self) -> dict[str, Tensor]:
        return {
            "concept.attn_v": self.attn_v,
            "concept.attn_u": self.attn_u,
            "concept.attn_w": self.attn_w,
            "concept.clf_w": self.clf_w,
            "concept.clf_b": self.clf_b,
        }


def init_concept_params(
    rng: np.random.Generator,
    K: int,
    C: int,
    d_a: int = 128,
    gamma: float = 0.75,
    temperature: float = 3.0,
) -> ConceptBranchParams:
    def uniform(fan_in, shape):
        bound = 1.0 / np.sqrt(fan_in)
        return Tensor(rng.uniform(-bound, bound, size=shape))

    return ConceptBranchParams(
        attn_v=uniform(K, (K, d_a)),
        attn_u=uniform(K, (K, d_a)),
        attn_w=uniform(d_a, (d_a,)),
        clf_w=uniform(C, (C,)),
        clf_b=uniform(C, ()),
        gamma=gamma,
        temperature=temperature,
    )


@dataclass
class ConceptAttention:
    raw: Tensor
    scaled: Tensor
    gated: Tensor
    degenerate: bool = False


def concept_attention(f_topk: Tensor, params: ConceptBranchParams) -> Tensor:
    if f_topk.shape[0] != params.attn_v.shape[0]:
        raise ShapeError(
            f"selected activations have K={f_topk.shape[0]}, attention expects K={params.attn_v.shape[0]}"
        )
    ft = ad.transpose(f_topk)  # C x K, one row per concept
    gate = ad.mul(ad.tanh(ft @ params.attn_v), ad.sigmoid(ft @ params.attn_u))
    return gate @ params.attn_w


def scale_attention(raw: Tensor, gamma: float, temperature: float) -> ConceptAttention:
    mean = ad.reduce_mean(raw)
    centered = raw - mean
    std = ad.sqrt(ad.reduce_mean(centered * centered))
    if std.item() <= 1e-12:
        warnings.warn(
            "concept attention has zero variance; falling back to uniform gating at 0.5",
            RuntimeWarning,
        )
        c = raw.shape[0]
        scaled = Tensor(np.zeros(c))
        return ConceptAttention(raw, scaled, Tensor(np.full(c, 0.5)), degenerate=True)
    scaled = (raw - ad.percentile(raw, gamma)) / std
    gated = ad.sigmoid(scaled * temperature)
    return ConceptAttention(raw, scaled, gated)


def _contributions(f_topk: Tensor, beta: Tensor, params: ConceptBranchParams) -> Tensor:
    if f_topk.shape[1] != params.clf_w.shape[0]:
        raise ShapeError(
            f"activations have C={f_topk.shape[1]}, classifier expects C={params.clf_w.shape[0]}"
        )
    ones = Tensor(np.ones(f_topk.shape[0]))
    col_sums = ad.transpose(f_topk) @ ones  # per-concept sum over the K patches
    return params.clf_w * beta * col_sums


def concept_contributions(
    f_topk: Tensor, beta: Tensor, params: ConceptBranchParams
) -> tuple[Tensor, Tensor]:
    return _contributions(f_topk, beta, params), params.clf_b


def concept_logit(f_topk: Tensor, beta: Tensor, params: ConceptBranchParams) -> tuple[Tensor, Tensor]:
    # the logit IS the contribution sum, so the decomposition identity is exact
    logit = ad.reduce_sum(_contributions(f_topk, beta, params)) + params.clf_b
    return logit, ad.sigmoid(logit)


@dataclass
class ConceptForward:
    attention: ConceptAttention
    kappa: Tensor
    logit: Tensor
    prob: Tensor


def concept_forward(f_topk: Tensor, params: ConceptBranchParams) -> ConceptForward:
    att = scale_attention(concept_attention(f_topk, params), params.gamma, params.temperature)
    kappa = _contributions(f_topk, att.gated, params)
    logit = ad.reduce_sum(kappa) + params.clf_b
    return ConceptForward(att, kappa, logit, ad.sigmoid(logit))
