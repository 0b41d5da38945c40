"""Split-level evaluation: classification, localization, separability."""

import warnings

import numpy as np

from .explain import global_explanations
from .metrics import (EvalResult, accuracy, auc, disease_localization,
                      js_divergence, silhouette)
from .trainer import CmilModel, predict


def evaluate_split(bags, model: CmilModel, projection: str = "tsne", seed: int = 0,
                   group_by: str = "predicted", max_patch_points: int = 2000,
                   mode: str = "dual", workers: int = 1):
    """Evaluate a list of bags; returns (EvalResult, GlobalExplanation, predictions).

    Metrics (AUC, JSD, silhouette) compare against ground-truth labels; the
    explanation artifact groups slides by predicted class unless group_by says
    otherwise.  Localization averages over slides with annotated tumor regions;
    when no slide has any the fields are null and a warning is emitted.
    Ablation modes score the matching branch; workers >1 predicts in parallel.
    """
    bags = list(bags)
    head = "image" if mode == "image-only" else "concept"
    uniform = mode == "concept-only"

    def _predict(bag):
        return predict(bag, model, head=head, uniform_selection=uniform)

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            preds = list(pool.map(_predict, bags))
    else:
        preds = [_predict(b) for b in bags]
    labels = [b.label for b in bags]
    probs = [p.prob_image if head == "image" else p.prob_concept for p in preds]

    acc = accuracy(probs, labels)
    auc_val = auc(probs, labels)

    # pointing game needs a target: score only slides with annotated tumor regions
    flagged = [(b, p) for b, p in zip(bags, preds)
               if b.has_tumor_flags() and any(pt.in_tumor for pt in b.patches)]
    if flagged:
        loc_mean = float(np.mean(
            [disease_localization(p.hard_indices, b) for b, p in flagged]))
    else:
        warnings.warn("no slide has annotated tumor regions; localization skipped")
        loc_mean = None

    g = global_explanations(bags, model, predictions=preds, group_by=group_by,
                            projection=projection, seed=seed,
                            max_patch_points=max_patch_points)

    truth = np.asarray(labels)
    tumor_rows = np.flatnonzero(truth == 1)
    normal_rows = np.flatnonzero(truth == 0)
    jsd_per_concept = {}
    for c, name in enumerate(g.concept_names):
        jsd_per_concept[name] = js_divergence(
            g.wsi_points[tumor_rows, c], g.wsi_points[normal_rows, c])
    jsd_mean = float(np.mean(list(jsd_per_concept.values())))

    slide_truth = {b.slide_id: b.label for b in bags}
    patch_truth = np.asarray([slide_truth[sid] for sid, _ in g.patch_refs])
    result = EvalResult(
        accuracy=acc,
        auc=auc_val,
        localization_mean=loc_mean,
        localization_slides=len(flagged),
        jsd_per_concept=jsd_per_concept,
        jsd_mean=jsd_mean,
        silhouette_wsi=silhouette(g.wsi_points, truth),
        silhouette_patch=silhouette(g.patch_points, patch_truth),
        silhouette_wsi_2d=silhouette(g.wsi_points_2d, truth),
        silhouette_patch_2d=silhouette(g.patch_points_2d, patch_truth),
        counts={
            "slides": len(bags),
            "tumor": int(truth.sum()),
            "normal": int((1 - truth).sum()),
            "patch_points": int(g.patch_points.shape[0]),
        },
    )
    return result, g, preds
