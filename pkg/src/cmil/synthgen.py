"""Deterministic synthetic datasets with known tumor patches.

Concept vectors form an exact orthonormal basis subset, positive bags carry a
contiguous grid block of tumor patches built from convex combinations of the
tumor concepts, and every bag derives its own RNG stream from
``(seed, bag_index)`` so parallel and serial generation are identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bagio import Bag, ConceptSet, DatasetSplit, PatchRecord, write_bag, write_concepts, write_split
from .errors import ConfigError

# stream ids far above any bag index
_CONCEPT_STREAM = 2**40
_LAYOUT_STREAM = 2**40 + 1


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    num_bags: int = 200
    N_range: tuple[int, int] = (64, 256)
    D: int = 64
    C: int = 12
    tumor_concept_count: int = 4
    tumor_fraction_range: tuple[float, float] = (0.2, 0.4)
    signal_strength: float = 1.0
    noise_std: float = 0.05
    positive_rate: float = 0.5

    def __post_init__(self):
        lo, hi = self.tumor_fraction_range
        if not (0 < lo < hi < 1):
            raise ConfigError(f"tumor_fraction_range must satisfy 0 < lo < hi < 1, got {self.tumor_fraction_range}")
        if not (1 <= self.tumor_concept_count < self.C):
            raise ConfigError(f"tumor_concept_count must be in [1, C), got {self.tumor_concept_count} with C={self.C}")
        if self.D < self.C:
            raise ConfigError(f"D must be >= C, got D={self.D}, C={self.C}")
        if not (1 <= self.N_range[0] <= self.N_range[1]):
            raise ConfigError(f"invalid N_range {self.N_range}")
        if self.num_bags < 1:
            raise ConfigError("num_bags must be >= 1")
        if self.signal_strength <= 0:
            raise ConfigError("signal_strength must be > 0")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")
        if not (0 < self.positive_rate < 1):
            raise ConfigError(f"positive_rate must be in (0,1), got {self.positive_rate}")

    @classmethod
    def from_dict(cls, doc: dict) -> "SynthConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(doc) - known
        if extra:
            raise ConfigError(f"unknown synth config keys: {sorted(extra)}")
        doc = dict(doc)
        for key in ("N_range", "tumor_fraction_range"):
            if key in doc:
                v = doc[key]
                if not isinstance(v, (list, tuple)) or len(v) != 2:
                    raise ConfigError(f"{key} must be a 2-element list")
                doc[key] = tuple(v)
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def gen_concepts(cfg: SynthConfig) -> ConceptSet:
    """C exactly-orthonormal unit rows; the first tumor_concept_count are tumor concepts."""
    rng = np.random.default_rng((cfg.seed, _CONCEPT_STREAM))
    a = rng.normal(size=(cfg.D, cfg.C))
    q, r = np.linalg.qr(a)
    # canonical sign: positive R diagonal
    s = np.sign(np.diag(r))
    s[s == 0] = 1.0
    rows = (q * s).T
    names = [f"tumor concept {i}" for i in range(cfg.tumor_concept_count)] + [
        f"background concept {i}" for i in range(cfg.C - cfg.tumor_concept_count)
    ]
    return ConceptSet(names, rows, prompt_template="an H & E image of CONCEPT")


def _grid_shape(n: int) -> tuple[int, int]:
    cols = math.isqrt(n)
    if cols * cols < n:
        cols += 1
    rows = (n + cols - 1) // cols
    return rows, cols


def _tumor_block(n: int, frac: float, lo: float, hi: float, rng) -> list[int]:
    """Indices of a 4-connected block of ~frac·n cells in the row-major grid of n cells."""
    _, cols = _grid_shape(n)
    t_lo = max(1, math.ceil(lo * n))
    t_hi = max(1, math.floor(hi * n))
    t = min(max(int(round(frac * n)), t_lo), max(t_lo, t_hi))
    full_rows = n // cols
    if full_rows == 0:
        start = int(rng.integers(0, n - t + 1))
        return list(range(start, start + t))
    t = min(t, full_rows * cols)
    w = min(cols, math.ceil(math.sqrt(t)))
    h = math.ceil(t / w)
    if h > full_rows:
        h = full_rows
        w = math.ceil(t / h)
    r0 = int(rng.integers(0, full_rows - h + 1))
    c0 = int(rng.integers(0, cols - w + 1))
    # first t cells of the rectangle, row-major: stays 4-connected
    return [(r0 + j // w) * cols + (c0 + j % w) for j in range(t)]


def _convex_weights(rng, k: int) -> np.ndarray:
    # bounded away from 0 so every chosen concept genuinely contributes
    w = rng.uniform(0.5, 1.0, size=k)
    return w / w.sum()


def gen_bag(
    cfg: SynthConfig,
    rng: np.random.Generator,
    force_label: int | None = None,
    concepts: ConceptSet | None = None,
    slide_id: str = "synth",
) -> Bag:
    if concepts is None:
        concepts = gen_concepts(cfg)
    tc = cfg.tumor_concept_count
    tumor_basis = concepts.embeddings[:tc]
    bg_basis = concepts.embeddings[tc:]

    n = int(rng.integers(cfg.N_range[0], cfg.N_range[1] + 1))
    label = int(force_label) if force_label is not None else int(rng.random() < cfg.positive_rate)

    tumor_idx: set[int] = set()
    tumor_dir = np.zeros(cfg.D)
    if label == 1:
        frac = float(rng.uniform(*cfg.tumor_fraction_range))
        tumor_idx = set(_tumor_block(n, frac, *cfg.tumor_fraction_range, rng))
        tumor_dir = _convex_weights(rng, tc) @ tumor_basis

    emb = np.empty((n, cfg.D))
    for i in range(n):
        if i in tumor_idx:
            base = tumor_dir
        else:
            if bg_basis.shape[0] >= 2:
                pick = rng.choice(bg_basis.shape[0], size=2, replace=False)
                base = _convex_weights(rng, 2) @ bg_basis[pick]
            else:
                base = bg_basis[0]
        emb[i] = cfg.signal_strength * base
    if cfg.noise_std > 0:
        emb += cfg.noise_std * rng.normal(size=emb.shape)

    _, cols = _grid_shape(n)
    patches = [PatchRecord(i // cols, i % cols, i in tumor_idx) for i in range(n)]
    return Bag(slide_id, label, emb, patches)


def gen_dataset(cfg: SynthConfig, out_dir: Path) -> DatasetSplit:
    """Write bags, concept set and split JSON; returns the resolved split.

    Embeddings are quantized to f32 on disk (the storage format), so reading
    a written bag reproduces the file bytes but not the exact f64 values that
    `gen_bag` returns in memory.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    concepts = gen_concepts(cfg)
    write_concepts(concepts, out_dir / "concepts.ccpt")

    layout_rng = np.random.default_rng((cfg.seed, _LAYOUT_STREAM))
    num_pos = int(round(cfg.num_bags * cfg.positive_rate))
    labels = np.array([1] * num_pos + [0] * (cfg.num_bags - num_pos))
    layout_rng.shuffle(labels)

    names = []
    for i in range(cfg.num_bags):
        bag_rng = np.random.default_rng((cfg.seed, i))
        bag = gen_bag(cfg, bag_rng, force_label=int(labels[i]), concepts=concepts, slide_id=f"synth_{i:04d}")
        name = f"bag_{i:04d}.cmil"
        write_bag(bag, out_dir / name)
        names.append(name)

    n_train = int(round(0.8 * cfg.num_bags))
    n_val = int(round(0.1 * cfg.num_bags))
    rel = {
        "train": names[:n_train],
        "val": names[n_train : n_train + n_val],
        "test": names[n_train + n_val :],
    }
    write_split(rel, out_dir / "split.json")
    return DatasetSplit(
        train=[out_dir / p for p in rel["train"]],
        val=[out_dir / p for p in rel["val"]],
        test=[out_dir / p for p in rel["test"]],
    )
