"""Local and global explanation assembly from trained-model predictions."""

import math
from dataclasses import dataclass

import numpy as np

from .bagio import Bag, ConceptSet
from .embed2d import project_2d
from .errors import DataValidationError
from .projection import project
from .trainer import CmilModel, Prediction, predict

SCHEMA_VERSION = 1

CLASS_NAMES = ("normal", "tumor")


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@dataclass
class LocalExplanation:
    """Four-part slide report: attention map, selected patches with their
    concept vectors, per-concept contributions, and the prediction itself."""

    slide_id: str
    grid_shape: tuple
    attention_grid: list   # {"patch_index", "row", "col", "alpha"} per patch, model order
    topk: list             # {"patch_index", "row", "col", "alpha", "concept_values"}
    contributions: list    # {"concept", "kappa"}, one per concept, model order
    bias: float
    prob_concept: float
    prob_image: float
    decision: str

    def reconstruction_error(self) -> float:
        logit = float(np.sum([c["kappa"] for c in self.contributions])) + self.bias
        return abs(_sigmoid(logit) - self.prob_concept)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "slide_id": self.slide_id,
            "grid_shape": list(self.grid_shape),
            "attention_grid": self.attention_grid,
            "topk": self.topk,
            "contributions": self.contributions,
            "bias": self.bias,
            "prob_concept": self.prob_concept,
            "prob_image": self.prob_image,
            "decision": self.decision,
        }


def explain_slide(bag: Bag, model: CmilModel, head: str = "concept",
                  uniform_selection: bool = False) -> LocalExplanation:
    """Assemble the local report from one deterministic inference pass."""
    pred = predict(bag, model, head=head, uniform_selection=uniform_selection)
    grid_shape = (
        max(p.grid_row for p in bag.patches) + 1,
        max(p.grid_col for p in bag.patches) + 1,
    )
    attention_grid = [
        {"patch_index": i, "row": p.grid_row, "col": p.grid_col, "alpha": float(pred.alpha[i])}
        for i, p in enumerate(bag.patches)
    ]
    topk = []
    for k, j in enumerate(pred.hard_indices):
        p = bag.patches[int(j)]
        topk.append({
            "patch_index": int(j),
            "row": p.grid_row,
            "col": p.grid_col,
            "alpha": float(pred.alpha[int(j)]),
            "concept_values": [float(v) for v in pred.f_topk[k]],
        })
    contributions = [
        {"concept": name, "kappa": float(pred.kappa[c])}
        for c, name in enumerate(model.concepts.names)
    ]
    return LocalExplanation(
        slide_id=bag.slide_id,
        grid_shape=grid_shape,
        attention_grid=attention_grid,
        topk=topk,
        contributions=contributions,
        bias=pred.bias,
        prob_concept=pred.prob_concept,
        prob_image=pred.prob_image,
        decision=pred.decision,
    )


def wsi_concept_values(pred: Prediction) -> np.ndarray:
    """Slide-level aggregate per concept: beta_c * sum_j f_jc over selected patches."""
    return pred.beta * pred.f_topk.sum(axis=0)


@dataclass
class GlobalExplanation:
    """Dataset-level view: mean contributions per class, per-concept slide-level
    value distributions, and 2-D projections at patch and slide level."""

    group_by: str                      # "predicted" or "truth"
    concept_names: list
    classes: dict                      # class name -> [slide_id], partition of the split
    mean_contributions: dict           # class name -> [mean kappa_c]
    wsi_values: dict                   # concept name -> {class name: [per-slide value]}
    wsi_points: np.ndarray             # S x C aggregates, slide order
    wsi_labels: list                   # class name per slide
    wsi_slide_ids: list
    patch_points: np.ndarray           # P x C selected-patch concept vectors
    patch_labels: list
    patch_refs: list                   # (slide_id, patch_index) per point
    projection_method: str
    wsi_points_2d: np.ndarray = None
    patch_points_2d: np.ndarray = None

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "group_by": self.group_by,
            "concept_names": list(self.concept_names),
            "classes": {k: list(v) for k, v in self.classes.items()},
            "mean_contributions": {k: list(v) for k, v in self.mean_contributions.items()},
            "wsi_values": {c: {k: list(v) for k, v in d.items()}
                           for c, d in self.wsi_values.items()},
            "projection_method": self.projection_method,
            "wsi_2d": [
                {"slide_id": s, "class": l, "x": float(x), "y": float(y)}
                for s, l, (x, y) in zip(self.wsi_slide_ids, self.wsi_labels,
                                        self.wsi_points_2d)
            ],
            "patch_2d": [
                {"slide_id": r[0], "patch_index": r[1], "class": l,
                 "x": float(x), "y": float(y)}
                for r, l, (x, y) in zip(self.patch_refs, self.patch_labels,
                                        self.patch_points_2d)
            ],
        }


def global_explanations(bags, model: CmilModel, predictions=None,
                        group_by: str = "predicted", projection: str = "tsne",
                        seed: int = 0, max_patch_points: int = 2000) -> GlobalExplanation:
    """Aggregate per-slide predictions into the dataset-level explanation.

    Slides are grouped by predicted class by default; group_by="truth" switches
    to ground-truth labels for analysis.  Patch-level points are subsampled to
    max_patch_points (seeded) before projection to keep the exact t-SNE O(n^2)
    cost bounded.
    """
    if group_by not in ("predicted", "truth"):
        raise DataValidationError(f"unknown grouping {group_by!r}")
    bags = list(bags)
    if predictions is None:
        predictions = [predict(b, model) for b in bags]

    classes = {name: [] for name in CLASS_NAMES}
    kappas = {name: [] for name in CLASS_NAMES}
    wsi_points, wsi_labels, wsi_slide_ids = [], [], []
    patch_points, patch_labels, patch_refs = [], [], []
    for bag, pred in zip(bags, predictions):
        cls = pred.decision if group_by == "predicted" else CLASS_NAMES[bag.label]
        classes[cls].append(bag.slide_id)
        kappas[cls].append(pred.kappa)
        wsi_points.append(wsi_concept_values(pred))
        wsi_labels.append(cls)
        wsi_slide_ids.append(bag.slide_id)
        for k, j in enumerate(pred.hard_indices):
            patch_points.append(pred.f_topk[k])
            patch_labels.append(cls)
            patch_refs.append((bag.slide_id, int(j)))

    for name in CLASS_NAMES:
        if len(classes[name]) < 2:
            raise DataValidationError(
                f"class {name!r} has {len(classes[name])} slide(s); need at least 2"
            )

    names = model.concepts.names
    mean_contributions = {
        cls: [float(v) for v in np.mean(kappas[cls], axis=0)] for cls in CLASS_NAMES
    }
    wsi_points = np.asarray(wsi_points)
    wsi_values = {
        names[c]: {
            cls: [float(wsi_points[i, c]) for i in range(len(bags))
                  if wsi_labels[i] == cls]
            for cls in CLASS_NAMES
        }
        for c in range(len(names))
    }

    patch_points = np.asarray(patch_points)
    if patch_points.shape[0] > max_patch_points:
        keep = np.sort(np.random.default_rng(seed).choice(
            patch_points.shape[0], size=max_patch_points, replace=False))
        patch_points = patch_points[keep]
        patch_labels = [patch_labels[i] for i in keep]
        patch_refs = [patch_refs[i] for i in keep]

    params = {} if projection == "pca" else {"seed": seed}
    wsi_2d = project_2d(wsi_points, projection, **params)
    patch_2d = project_2d(patch_points, projection, **params)

    return GlobalExplanation(
        group_by=group_by,
        concept_names=list(names),
        classes=classes,
        mean_contributions=mean_contributions,
        wsi_values=wsi_values,
        wsi_points=wsi_points,
        wsi_labels=wsi_labels,
        wsi_slide_ids=wsi_slide_ids,
        patch_points=patch_points,
        patch_labels=patch_labels,
        patch_refs=patch_refs,
        projection_method=projection,
        wsi_points_2d=wsi_2d,
        patch_points_2d=patch_2d,
    )


def top_patches_per_concept(bags, concepts: ConceptSet, m: int) -> dict:
    """For every concept, the m highest-activation patches across all bags.

    Ties break lexicographically by (slide_id, patch index) so the report is
    stable across input order.
    """
    if m < 1:
        raise DataValidationError("m must be positive")
    entries = {name: [] for name in concepts.names}
    for bag in bags:
        acts = project(bag.embeddings, concepts).values
        for c, name in enumerate(concepts.names):
            for i, patch in enumerate(bag.patches):
                entries[name].append({
                    "slide_id": bag.slide_id,
                    "patch_index": i,
                    "row": patch.grid_row,
                    "col": patch.grid_col,
                    "score": float(acts[i, c]),
                })
    for name in entries:
        entries[name].sort(key=lambda e: (-e["score"], e["slide_id"], e["patch_index"]))
        entries[name] = entries[name][:m]
    return entries
