"""Command-line pipeline: gen-data, train, predict, explain, eval.

Exit codes are a stable contract: 0 ok, 2 configuration, 3 I/O or malformed
data, 4 numeric divergence, 5 shape mismatch.  Every artifact embeds the
resolved configuration and content hashes of its inputs; nothing depends on
wall-clock time, so identical seeds reproduce identical bytes.
"""

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

from .bagio import (content_hash, dump_json, file_hash, read_bag,
                    read_concepts, read_split)
from .errors import (CmilError, ConfigError, DataValidationError,
                     DegenerateEmbeddingError, FormatError, ShapeError,
                     TrainingDivergedError)
from .evaluation import evaluate_split
from .explain import explain_slide
from .render import write_global_report, write_local_report
from .synthgen import SynthConfig, gen_dataset
from .trainer import TrainConfig, load_checkpoint, predict, save_checkpoint, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DIVERGED = 4
EXIT_SHAPE = 5

SCHEMA_VERSION = 1


def _threads() -> int:
    raw = os.environ.get("CMIL_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"CMIL_THREADS must be an integer, got {raw!r}")


def _parse_set(pairs) -> dict:
    """--set key=value overrides; dotted keys nest (topk.K=10), values parse as JSON."""
    out: dict = {}
    for item in pairs or []:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        cursor = out
        parts = key.split(".")
        for p in parts[:-1]:
            cursor = cursor.setdefault(p, {})
        cursor[parts[-1]] = value
    return out


def _deep_update(base: dict, extra: dict) -> dict:
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _deep_update(base[k], v)
        else:
            base[k] = v
    return base


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}")
    if not isinstance(doc, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return doc


def _config_hash(doc: dict) -> str:
    import hashlib

    raw = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(raw).hexdigest()


def _dataset_files(data_dir: Path, split) -> list:
    return split.all_paths() + [data_dir / "concepts.ccpt", data_dir / "split.json"]


def _head_for(mode: str) -> tuple:
    return ("image" if mode == "image-only" else "concept", mode == "concept-only")


# -- commands ----------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    doc = _deep_update(_load_config_file(args.config), _parse_set(args.set))
    if args.seed is not None:
        doc["seed"] = args.seed
    cfg = SynthConfig.from_dict(doc)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    split = gen_dataset(cfg, out)
    resolved = dataclasses.asdict(cfg)
    dump_json({
        "schema_version": SCHEMA_VERSION,
        "command": "gen-data",
        "config": resolved,
        "config_hash": _config_hash(resolved),
        "dataset_hash": content_hash(_dataset_files(out, split)),
    }, out / "run.json")
    n = cfg.num_bags
    print(f"wrote {n} bags to {out} "
          f"(train/val/test = {len(split.train)}/{len(split.val)}/{len(split.test)}, "
          f"D={cfg.D}, C={cfg.C})")
    return EXIT_OK


def cmd_train(args) -> int:
    doc = _deep_update(_load_config_file(args.config), _parse_set(args.set))
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.epochs is not None:
        doc["epochs"] = args.epochs
    if args.mode is not None:
        doc["mode"] = args.mode
    cfg = TrainConfig.from_dict(doc)

    data = Path(args.data)
    split = read_split(data / "split.json")
    concepts = read_concepts(data / "concepts.ccpt")
    data_hash = content_hash(_dataset_files(data, split))

    try:
        model, log = train(split, concepts, cfg)
    except TrainingDivergedError as exc:
        last_good = "none" if exc.epoch in (None, 0) else str(exc.epoch - 1)
        print(f"error: training diverged at epoch {exc.epoch}: {exc} "
              f"(last good epoch: {last_good})", file=sys.stderr)
        return EXIT_DIVERGED

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out, model, cfg, epoch=cfg.epochs - 1, data_hash=data_hash)

    log_path = out.with_suffix(".log.jsonl")
    with open(log_path, "w", encoding="utf-8") as f:
        header = {"command": "train", "config": cfg.to_dict(), "data_hash": data_hash,
                  "schema_version": SCHEMA_VERSION}
        f.write(json.dumps(header, sort_keys=True) + "\n")
        for record in log:
            f.write(json.dumps(record, sort_keys=True) + "\n")

    final_auc = log[-1]["val_auc"]
    auc_text = "n/a" if final_auc is None else f"{final_auc:.4f}"
    print(f"trained {cfg.epochs} epochs (mode {cfg.mode}); final val AUC {auc_text}; "
          f"wrote {out} and {log_path}")
    return EXIT_OK


def _predict_one(args):
    model, cfg, header = load_checkpoint(args.ckpt)
    bag = read_bag(args.bag)
    head, uniform = _head_for(cfg.mode)
    pred = predict(bag, model, head=head, uniform_selection=uniform)
    prob = pred.prob_image if head == "image" else pred.prob_concept
    print(f"{pred.slide_id}\t{prob:.6f}\t{pred.decision}")
    return model, cfg, bag, pred, prob


def cmd_predict(args) -> int:
    model, cfg, bag, pred, prob = _predict_one(args)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        dump_json({
            "schema_version": SCHEMA_VERSION,
            "command": "predict",
            "config": cfg.to_dict(),
            "inputs": {"checkpoint_sha256": file_hash(args.ckpt),
                       "bag_sha256": file_hash(args.bag)},
            "prediction": {
                "slide_id": pred.slide_id,
                "prob": prob,
                "prob_concept": pred.prob_concept,
                "prob_image": pred.prob_image,
                "decision": pred.decision,
                "topk_indices": [int(i) for i in pred.hard_indices],
            },
        }, out / f"{pred.slide_id}.predict.json")
    return EXIT_OK


def cmd_explain(args) -> int:
    model, cfg, bag, pred, prob = _predict_one(args)
    head, uniform = _head_for(cfg.mode)
    exp = explain_slide(bag, model, head=head, uniform_selection=uniform)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    json_path, svg_path = write_local_report(exp, out)
    print(f"wrote {json_path} and {svg_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, cfg, header = load_checkpoint(args.ckpt)
    data = Path(args.data)
    split = read_split(data / "split.json")
    paths = getattr(split, args.split)
    if not paths:
        raise DataValidationError(f"split {args.split!r} is empty")
    bags = [read_bag(p) for p in paths]

    result, g, _ = evaluate_split(
        bags, model, projection=args.projection, seed=args.seed,
        group_by=args.group_by, max_patch_points=args.max_patch_points,
        mode=cfg.mode, workers=_threads())

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    doc = {
        "schema_version": SCHEMA_VERSION,
        "command": "eval",
        "config": {
            "train": cfg.to_dict(),
            "split": args.split,
            "projection": args.projection,
            "seed": args.seed,
            "group_by": args.group_by,
            "max_patch_points": args.max_patch_points,
        },
        "inputs": {"checkpoint_sha256": file_hash(args.ckpt),
                   "dataset_hash": content_hash(_dataset_files(data, split))},
        "results": result.to_dict(),
    }
    dump_json(doc, out)
    write_global_report(g, out.parent)
    loc = "n/a" if result.localization_mean is None else f"{result.localization_mean:.4f}"
    print(f"eval[{args.split}] accuracy {result.accuracy:.4f}, AUC {result.auc:.4f}, "
          f"localization {loc}; wrote {out}")
    return EXIT_OK


# -- parser / entry ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cmil",
        description="Concept-based MIL pipeline over bags of patch embeddings.")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--config", help="SynthConfig JSON file")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--seed", type=int)
    g.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key (repeatable; dotted keys nest)")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train on a generated dataset")
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--config", help="TrainConfig JSON file")
    t.add_argument("--out", required=True, help="checkpoint path (.cmck)")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--mode", choices=["dual", "image-only", "concept-only"])
    t.add_argument("--set", action="append", metavar="KEY=VALUE")
    t.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="classify one bag")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--bag", required=True)
    p.add_argument("--out", help="directory for the prediction JSON (optional)")
    p.set_defaults(func=cmd_predict)

    e = sub.add_parser("explain", help="classify one bag and write its report")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--bag", required=True)
    e.add_argument("--out", default=".", help="report directory (default: cwd)")
    e.set_defaults(func=cmd_explain)

    v = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    v.add_argument("--ckpt", required=True)
    v.add_argument("--data", required=True)
    v.add_argument("--out", required=True, help="eval JSON path")
    v.add_argument("--split", choices=["train", "val", "test"], default="test")
    v.add_argument("--projection", choices=["pca", "tsne"], default="tsne")
    v.add_argument("--seed", type=int, default=0, help="projection seed")
    v.add_argument("--group-by", choices=["predicted", "truth"], default="predicted")
    v.add_argument("--max-patch-points", type=int, default=2000)
    v.set_defaults(func=cmd_eval)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ShapeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SHAPE
    except (FormatError, DataValidationError, DegenerateEmbeddingError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except CmilError as exc:  # any future package error: treat as data problem
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
