"""Joint training of both branches, checkpointing, and inference.

The loss is BCE on each branch's slide probability plus an L2 penalty on the
post-softmax patch attention. Training runs at batch size 1 (bags differ in
size); the perturbed top-K noise is resampled every step from a dedicated
stream, and the final-epoch model is the result — no early stopping.

Checkpoint layout: magic "CMCK", u32 version LE, u64 header length, JSON
header (config, dims, epoch, RNG digest, blob directory, concept names),
then the declared f64 LE blobs, ending with the frozen concept embeddings.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, zero_grads
from .bagio import Bag, ConceptSet, DatasetSplit, read_bag
from .concept_branch import ConceptBranchParams, ConceptForward, concept_forward, init_concept_params
from .errors import ConfigError, DataValidationError, FormatError, ShapeError, TrainingDivergedError
from .image_branch import ImageBranchParams, ImageForward, image_forward, init_image_params
from .metrics import auc
from .projection import project
from .topk import Selection, TopKConfig, gather_concepts, select

CKPT_MAGIC = b"CMCK"
CKPT_VERSION = 1

# RNG stream ids hung off the config seed
_INIT_STREAM = 0
_SHUFFLE_STREAM = 1
_NOISE_STREAM = 2


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 1e-3
    epochs: int = 300
    lam: float = 0.05
    batch_size: int = 1  # bags differ in size; only 1 is supported
    seed: int = 0
    d_h: int = 256
    d_a: int = 128
    gamma: float = 0.75
    temperature: float = 3.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    mode: str = "dual"  # "image-only"/"concept-only" train one branch (ablations)
    topk: TopKConfig = TopKConfig()

    def __post_init__(self):
        if self.mode not in ("dual", "image-only", "concept-only"):
            raise ConfigError(f"unknown training mode {self.mode!r}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.weight_decay < 0 or self.lam < 0:
            raise ConfigError("weight_decay and lam must be >= 0")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size != 1:
            raise ConfigError("only batch_size=1 is supported (variable bag sizes)")
        if min(self.d_h, self.d_a) < 1:
            raise ConfigError("d_h and d_a must be >= 1")
        if not 0 < self.gamma < 1:
            raise ConfigError(f"gamma must be in (0,1), got {self.gamma}")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(doc) - known
        if extra:
            raise ConfigError(f"unknown train config keys: {sorted(extra)}")
        doc = dict(doc)
        if "topk" in doc and isinstance(doc["topk"], dict):
            tk = set(doc["topk"]) - set(TopKConfig.__dataclass_fields__)
            if tk:
                raise ConfigError(f"unknown topk config keys: {sorted(tk)}")
            doc["topk"] = TopKConfig(**doc["topk"])
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        return asdict(self)


# -- loss -----------------------------------------------------------------------


@dataclass
class LossBreakdown:
    bce_img: Tensor
    bce_concept: Tensor
    l2_alpha: Tensor
    total: Tensor

    def floats(self) -> dict:
        return {
            "bce_img": self.bce_img.item(),
            "bce_concept": self.bce_concept.item(),
            "l2_alpha": self.l2_alpha.item(),
            "total": self.total.item(),
        }


def bce_loss(y: int, p: Tensor) -> Tensor:
    """-[y ln p + (1-y) ln(1-p)] with p clamped to [1e-7, 1-1e-7]."""
    if y not in (0, 1):
        raise DataValidationError(f"label must be 0 or 1, got {y!r}")
    clamped = ad.clamp(p, 1e-7, 1.0 - 1e-7)
    if y == 1:
        return ad.neg(ad.log(clamped))
    return ad.neg(ad.log(1.0 - clamped))


def total_loss(y: int, img_prob: Tensor, concept_prob: Tensor, alpha: Tensor,
               lam: float, mode: str = "dual") -> LossBreakdown:
    bi = bce_loss(y, img_prob)
    bc = bce_loss(y, concept_prob)
    l2 = ad.sq_l2(alpha)
    if mode == "image-only":
        total = bi + lam * l2
    elif mode == "concept-only":
        total = bc
    else:
        total = bi + bc + lam * l2
    return LossBreakdown(bi, bc, l2, total)


# -- optimizer -------------------------------------------------------------------


class AdamW:
    """Adaptive moments with decoupled weight decay (beta1/beta2/eps per config)."""

    def __init__(self, params: dict[str, Tensor], lr: float, weight_decay: float = 0.0,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.lr, self.wd = lr, weight_decay
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.t = 0
        self._m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self):
        zero_grads(self.params.values())

    def step(self):
        self.t += 1
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise TrainingDivergedError(f"non-finite gradient in {name}")
            m = self._m[name] = self.b1 * self._m[name] + (1 - self.b1) * g
            v = self._v[name] = self.b2 * self._v[name] + (1 - self.b2) * g * g
            m_hat = m / (1 - self.b1**self.t)
            v_hat = v / (1 - self.b2**self.t)
            p.data -= self.lr * (m_hat / (np.sqrt(v_hat) + self.eps) + self.wd * p.data)


# -- model ------------------------------------------------------------------------


@dataclass
class CmilModel:
    image: ImageBranchParams
    concept: ConceptBranchParams
    concepts: ConceptSet
    topk: TopKConfig

    def parameters(self) -> dict[str, Tensor]:
        out = self.image.tensors()
        out.update(self.concept.tensors())
        return out

    @property
    def dim(self) -> int:
        return self.image.proj_w.shape[0]


def init_model(cfg: TrainConfig, concepts: ConceptSet, dim: int) -> CmilModel:
    rng = np.random.default_rng((cfg.seed, _INIT_STREAM))
    image = init_image_params(rng, dim, cfg.d_h, cfg.d_a)
    concept = init_concept_params(rng, cfg.topk.K, concepts.num_concepts, cfg.d_a,
                                  cfg.gamma, cfg.temperature)
    return CmilModel(image, concept, concepts, cfg.topk)


@dataclass
class JointForward:
    img: ImageForward
    sel: Selection
    f_topk: Tensor
    con: ConceptForward


def joint_forward(
    model: CmilModel,
    embeddings: np.ndarray,
    f_values: np.ndarray,
    mode: str = "train",
    rng: np.random.Generator | None = None,
    noise: np.ndarray | None = None,
    fixed_indices: np.ndarray | None = None,
) -> JointForward:
    img = image_forward(Tensor(np.asarray(embeddings, dtype=np.float64)), model.image)
    if fixed_indices is not None:
        # frozen support: selection treated as a constant, smooth everywhere
        sel = Selection(np.asarray(fixed_indices, dtype=int))
        f_topk = gather_concepts(f_values, sel, mode="infer")
    else:
        sel = select(img.alpha, model.topk, mode=mode, rng=rng, noise=noise)
        f_topk = gather_concepts(f_values, sel, mode=mode)
    con = concept_forward(f_topk, model.concept)
    return JointForward(img, sel, f_topk, con)


# -- training loop ------------------------------------------------------------------


def _load_bags(paths) -> list[Bag]:
    return [read_bag(p) for p in paths]


def train(
    split: DatasetSplit,
    concepts: ConceptSet,
    cfg: TrainConfig,
    bags: dict | None = None,
) -> tuple[CmilModel, list[dict]]:
    """Train on the split's train bags; returns (model, per-epoch metrics records).

    `bags` optionally supplies preloaded {"train": [...], "val": [...]} lists.
    """
    train_bags = bags["train"] if bags else _load_bags(split.train)
    val_bags = bags["val"] if bags else _load_bags(split.val)
    if not train_bags:
        raise DataValidationError("empty training split")

    dim = train_bags[0].dim
    model = init_model(cfg, concepts, dim)
    f_train = [project(b.embeddings, concepts).values for b in train_bags]
    f_val = [project(b.embeddings, concepts).values for b in val_bags]

    # ablations optimize one branch and leave the other at its initialization
    params = model.parameters()
    if cfg.mode != "dual":
        prefix = "image." if cfg.mode == "image-only" else "concept."
        params = {k: v for k, v in params.items() if k.startswith(prefix)}
    opt = AdamW(params, cfg.learning_rate, cfg.weight_decay,
                cfg.beta1, cfg.beta2, cfg.eps)
    rng_shuffle = np.random.default_rng((cfg.seed, _SHUFFLE_STREAM))
    rng_noise = np.random.default_rng((cfg.seed, _NOISE_STREAM))

    log: list[dict] = []
    for epoch in range(cfg.epochs):
        order = rng_shuffle.permutation(len(train_bags))
        sums = {"bce_img": 0.0, "bce_concept": 0.0, "l2_alpha": 0.0, "total": 0.0}
        for step_no, i in enumerate(order):
            bag = train_bags[i]
            if cfg.mode == "concept-only":
                # hard top-K under untrained uniform attention = first K patches
                fwd = joint_forward(model, bag.embeddings, f_train[i],
                                    fixed_indices=np.arange(cfg.topk.K))
            else:
                fwd = joint_forward(model, bag.embeddings, f_train[i],
                                    mode="train", rng=rng_noise)
            lb = total_loss(bag.label, fwd.img.prob, fwd.con.prob, fwd.img.alpha,
                            cfg.lam, mode=cfg.mode)
            if not np.isfinite(lb.total.data):
                raise TrainingDivergedError(
                    f"total loss became non-finite on bag {bag.slide_id}",
                    epoch=epoch, step=step_no,
                )
            opt.zero_grad()
            lb.total.backward()
            try:
                opt.step()
            except TrainingDivergedError as exc:
                raise TrainingDivergedError(str(exc), epoch=epoch, step=step_no) from exc
            for k, v in lb.floats().items():
                sums[k] += v

        record = {"epoch": epoch}
        record.update({k: v / len(train_bags) for k, v in sums.items()})
        record["val_auc"] = _validation_auc(model, val_bags, f_val, cfg.mode)
        log.append(record)
    return model, log


def _validation_auc(model: CmilModel, val_bags: list[Bag], f_val: list[np.ndarray],
                    mode: str = "dual") -> float | None:
    labels = [b.label for b in val_bags]
    if len(set(labels)) < 2:
        return None
    probs = []
    for b, f in zip(val_bags, f_val):
        if mode == "concept-only":
            fwd = joint_forward(model, b.embeddings, f,
                                fixed_indices=np.arange(model.topk.K))
        else:
            fwd = joint_forward(model, b.embeddings, f, mode="infer")
        head = fwd.img.prob if mode == "image-only" else fwd.con.prob
        probs.append(head.item())
    return auc(probs, labels)


# -- inference -----------------------------------------------------------------------


@dataclass
class Prediction:
    slide_id: str
    prob_concept: float
    prob_image: float
    decision: str
    alpha: np.ndarray
    hard_indices: np.ndarray
    f_topk: np.ndarray
    beta: np.ndarray
    kappa: np.ndarray
    bias: float
    logit: float


def predict(bag: Bag, model: CmilModel, head: str = "concept",
            uniform_selection: bool = False) -> Prediction:
    """Deterministic hard top-K inference; the concept branch is the output head.

    `head="image"` bases the decision on the image branch instead (image-only
    ablation); `uniform_selection` replaces attention-guided selection with the
    first K patches, matching concept-only training.
    """
    if head not in ("concept", "image"):
        raise ConfigError(f"unknown prediction head {head!r}")
    if bag.dim != model.dim:
        raise ShapeError(f"bag D={bag.dim} does not match checkpoint D={model.dim}")
    f_values = project(bag.embeddings, model.concepts).values
    if uniform_selection:
        fwd = joint_forward(model, bag.embeddings, f_values,
                            fixed_indices=np.arange(model.topk.K))
    else:
        fwd = joint_forward(model, bag.embeddings, f_values, mode="infer")
    decider = fwd.img.prob if head == "image" else fwd.con.prob
    return Prediction(
        slide_id=bag.slide_id,
        prob_concept=fwd.con.prob.item(),
        prob_image=fwd.img.prob.item(),
        decision="tumor" if decider.item() >= 0.5 else "normal",
        alpha=fwd.img.alpha.data.copy(),
        hard_indices=np.asarray(fwd.sel.hard_indices, dtype=int),
        f_topk=fwd.f_topk.data.copy(),
        beta=fwd.con.attention.gated.data.copy(),
        kappa=fwd.con.kappa.data.copy(),
        bias=model.concept.clf_b.item(),
        logit=fwd.con.logit.item(),
    )


# -- checkpoint format ------------------------------------------------------------------

_CKPT_PREFIX = struct.Struct("<4sIQ")


def rng_digest(rng: np.random.Generator) -> str:
    state = json.dumps(rng.bit_generator.state, sort_keys=True, default=str)
    return hashlib.sha256(state.encode("utf-8")).hexdigest()


def save_checkpoint(path: Path, model: CmilModel, cfg: TrainConfig, epoch: int,
                    digest: str = "", data_hash: str = "") -> None:
    params = model.parameters()
    names = sorted(params)
    blobs = [np.ascontiguousarray(params[n].data, dtype="<f8") for n in names]
    names.append("data.concept_embeddings")
    blobs.append(np.ascontiguousarray(model.concepts.embeddings, dtype="<f8"))

    header = {
        "format_version": CKPT_VERSION,
        "epoch": epoch,
        "rng_digest": digest,
        "data_hash": data_hash,
        "train_config": cfg.to_dict(),
        "dims": {
            "D": model.dim,
            "C": model.concepts.num_concepts,
            "K": model.topk.K,
            "d_h": cfg.d_h,
            "d_a": cfg.d_a,
        },
        "concepts": {
            "names": list(model.concepts.names),
            "prompt_template": model.concepts.prompt_template,
        },
        "params": [{"name": n, "shape": list(b.shape)} for n, b in zip(names, blobs)],
    }
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_CKPT_PREFIX.pack(CKPT_MAGIC, CKPT_VERSION, len(raw)))
        f.write(raw)
        for b in blobs:
            f.write(b.tobytes())


def load_checkpoint(path: Path) -> tuple[CmilModel, TrainConfig, dict]:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    if len(data) < _CKPT_PREFIX.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, hlen = _CKPT_PREFIX.unpack_from(data)
    if magic != CKPT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {CKPT_MAGIC!r}")
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    if len(data) < _CKPT_PREFIX.size + hlen:
        raise FormatError(f"{path}: truncated checkpoint header")
    try:
        header = json.loads(data[_CKPT_PREFIX.size : _CKPT_PREFIX.size + hlen])
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: invalid checkpoint header: {exc}") from exc

    if not isinstance(header, dict):
        raise FormatError(f"{path}: checkpoint header must be a JSON object")
    tc = header.get("train_config")
    if not isinstance(tc, dict):
        raise FormatError(f"{path}: missing or malformed 'train_config' header")
    try:
        cfg = TrainConfig.from_dict(tc)
    except ConfigError as exc:
        # an invalid embedded config means the file is damaged, not the caller's flags
        raise FormatError(f"{path}: invalid embedded train config: {exc}") from exc
    entries = header.get("params")
    if not isinstance(entries, list):
        raise FormatError(f"{path}: missing or malformed 'params' blob directory")
    offset = _CKPT_PREFIX.size + hlen
    tensors: dict[str, np.ndarray] = {}
    for entry in entries:
        if (not isinstance(entry, dict) or not isinstance(entry.get("name"), str)
                or not isinstance(entry.get("shape"), list)
                or not all(isinstance(s, int) and not isinstance(s, bool) and s >= 0
                           for s in entry["shape"])):
            raise FormatError(f"{path}: malformed blob directory entry")
        shape = tuple(entry["shape"])
        count = math.prod(shape)
        end = offset + count * 8
        if end > len(data):
            raise FormatError(f"{path}: truncated blob {entry['name']}")
        arr = np.frombuffer(data[offset:end], dtype="<f8").astype(np.float64).reshape(shape)
        tensors[entry["name"]] = arr
        offset = end
    if offset != len(data):
        raise FormatError(f"{path}: {len(data) - offset} trailing bytes after declared blobs")
    cdoc = header.get("concepts")
    if (not isinstance(cdoc, dict) or not isinstance(cdoc.get("names"), list)
            or not all(isinstance(n, str) for n in cdoc["names"])):
        raise FormatError(f"{path}: malformed 'concepts' header")

    required = {
        "image.proj_w", "image.proj_b", "image.attn_v", "image.attn_u", "image.attn_w",
        "image.clf_w", "image.clf_b",
        "concept.attn_v", "concept.attn_u", "concept.attn_w", "concept.clf_w", "concept.clf_b",
        "data.concept_embeddings",
    }
    missing = required - set(tensors)
    if missing:
        raise FormatError(f"{path}: checkpoint missing parameter blobs {sorted(missing)}")

    image = ImageBranchParams(
        proj_w=Tensor(tensors["image.proj_w"]), proj_b=Tensor(tensors["image.proj_b"]),
        attn_v=Tensor(tensors["image.attn_v"]), attn_u=Tensor(tensors["image.attn_u"]),
        attn_w=Tensor(tensors["image.attn_w"]), clf_w=Tensor(tensors["image.clf_w"]),
        clf_b=Tensor(tensors["image.clf_b"]),
    )
    concept = ConceptBranchParams(
        attn_v=Tensor(tensors["concept.attn_v"]), attn_u=Tensor(tensors["concept.attn_u"]),
        attn_w=Tensor(tensors["concept.attn_w"]), clf_w=Tensor(tensors["concept.clf_w"]),
        clf_b=Tensor(tensors["concept.clf_b"]),
        gamma=cfg.gamma, temperature=cfg.temperature,
    )
    concepts = ConceptSet(
        cdoc["names"],
        tensors["data.concept_embeddings"],
        cdoc.get("prompt_template", "an H & E image of CONCEPT"),
    )
    model = CmilModel(image, concept, concepts, cfg.topk)
    return model, cfg, header
