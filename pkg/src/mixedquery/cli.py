"""Command-line interface.

Every subcommand resolves its options in three layers (built-in defaults,
then ``--config`` file, then explicit flags) and echoes the resolved
options to stderr as one JSON object. That object is itself a valid
``--config`` file. Nested keys such as ``train.learning_rate`` can be set
from a config file as nested objects or from flags like ``--lr``.

Exit codes: 0 on success, 1 on a data error (JSON message on stderr),
2 on a usage error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from .datamix import MixSampler, MixSpec, frequency_table
from .errors import MixedQueryError
from .gradcheck import check_loss_gradients, check_model_gradients
from .losses import LossWeights, prepare_targets
from .maskops import Rle, as_binary, rle_encode
from .matching import QueryStrategy, match_with_strategy, selection_stats
from .metrics import (
    ConfusionAccumulator,
    MetricReport,
    Segment,
    cumulative_iou,
    foreground_mse,
    mask_ap,
    panoptic_quality,
    rasterize_labels,
)
from .predfile import PredictedImage, dump_to_json, read_dumps, read_predictions, write_predictions
from .unified_data import (
    TASKS,
    Dataset,
    UnifiedAnnotation,
    apply_exclusion,
    attach_synthetic_captions,
    from_foreground,
    from_instance,
    from_panoptic,
    from_referring,
    from_semantic,
    load_dataset,
    read_jsonl,
    record_from_json,
    write_jsonl,
)

log = logging.getLogger("mixedquery")

STRATEGIES = [s.value for s in QueryStrategy]
BUILTIN_DATA = ("builtin:panoptic", "builtin:instances")


class UsageError(Exception):
    """Bad flags or config keys; exit code 2."""


# --- option layering -----------------------------------------------------------


def _unflatten(flat: dict) -> dict:
    out: dict = {}
    for key, value in flat.items():
        node = out
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    return out


def _merge(base: dict, over: dict, path: str = "") -> dict:
    """Recursive merge; keys absent from ``base`` are rejected."""
    out = copy.deepcopy(base)
    for key, value in over.items():
        where = f"{path}{key}"
        if key not in base:
            raise UsageError(f"unknown config key {where!r}")
        if isinstance(base[key], dict) and base[key] and isinstance(value, dict):
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = copy.deepcopy(value)
    return out


def _train_defaults() -> dict:
    from .toymodel.model import ModelConfig
    from .toymodel.train import TrainConfig

    train = TrainConfig().to_json()
    train.pop("seed")
    return {
        "strategy": "mixed",
        "data": [BUILTIN_DATA[0]],
        "mix": None,
        "model": ModelConfig().to_json(),
        "train": train,
        "loss": asdict(LossWeights()),
        "out": None,
        "trace": None,
        "plot": None,
    }


DEFAULTS = {
    "convert": lambda: {
        "task": None,
        "input": None,
        "out": None,
        "dataset_id": "default",
        "captions": None,
        "exclude": None,
        "keep_external_boxes": False,
    },
    "train-toy": _train_defaults,
    "predict": lambda: {
        "ckpt": None,
        "images": None,
        "task": "auto",
        "threshold": 0.5,
        "out": None,
        "dump_queries": None,
    },
    "eval": lambda: {"task": None, "gt": None, "pred": None, "boxes": False, "table": None, "plot": None},
    "match-stats": lambda: {"gt": None, "pred": None, "strategy": "mixed"},
    "sample": lambda: {"mix": None, "datasets": None, "n": 1000, "dry_run": False, "out": None},
    "gradcheck": lambda: {"instances": 10, "level": "both", "tolerance": 1e-4, "coords": 8},
}

REQUIRED = {
    "convert": ("task", "input", "out"),
    "train-toy": ("out",),
    "predict": ("ckpt", "images", "out"),
    "eval": ("task", "gt", "pred"),
    "match-stats": ("gt", "pred"),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    common = _Parser(add_help=False, argument_default=S)
    common.add_argument("--seed", type=int, help="random seed (default 0)")
    common.add_argument("--config", help="JSON file of options; explicit flags override it")

    p = _Parser(prog="mixedquery", description="Mixed-query segmentation toolkit at toy scale.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_):
        return sub.add_parser(name, help=help_, parents=[common], argument_default=S)

    c = add("convert", "convert task-specific annotations to unified JSON-Lines")
    c.add_argument("--task", choices=TASKS)
    c.add_argument("--input", help="task-specific JSON-Lines input")
    c.add_argument("--out", help="unified JSON-Lines output")
    c.add_argument("--dataset-id", dest="dataset_id")
    c.add_argument("--captions", help="JSON-Lines of {image_id, captions: {record index: [text, ...]}}")
    c.add_argument("--exclude", help="text file of image ids to drop, one per line")
    c.add_argument("--keep-external-boxes", dest="keep_external_boxes", action="store_const", const=True)

    t = add("train-toy", "train the toy model and write a checkpoint")
    t.add_argument("--strategy", choices=STRATEGIES)
    t.add_argument("--data", nargs="+", help=f"unified JSON-Lines files, or {' / '.join(BUILTIN_DATA)}")
    t.add_argument("--mix", help="MixSpec JSON (default: ratio 1 per dataset)")
    t.add_argument("--steps", dest="train.max_steps", type=int, help="optimizer steps (overrides epochs)")
    t.add_argument("--epochs", dest="train.epochs", type=int)
    t.add_argument("--lr", dest="train.learning_rate", type=float)
    t.add_argument("--batch-size", dest="train.batch_size", type=int)
    t.add_argument("--out", help="checkpoint path")
    t.add_argument("--trace", help="loss-trace CSV path")
    t.add_argument("--plot", help="loss-trace PNG path")

    r = add("predict", "run a checkpoint on annotated images")
    r.add_argument("--ckpt")
    r.add_argument("--images", help="unified JSON-Lines; pseudo-images are synthesized from it")
    r.add_argument("--task", choices=("auto",) + TASKS)
    r.add_argument("--threshold", type=float, help="minimum query score (strictly greater)")
    r.add_argument("--out", help="prediction JSON-Lines")
    r.add_argument("--dump-queries", dest="dump_queries", help="also write raw decoder outputs for match-stats")

    e = add("eval", "score predictions against ground truth")
    e.add_argument("--task", choices=TASKS)
    e.add_argument("--gt")
    e.add_argument("--pred")
    e.add_argument("--boxes", action="store_const", const=True, help="instance task: box AP instead of mask AP")
    e.add_argument("--table", help="per-class CSV path")
    e.add_argument("--plot", help="per-class PNG path")

    m = add("match-stats", "which query type serves thing and stuff ground truths")
    m.add_argument("--gt")
    m.add_argument("--pred", help="decoder dump written by predict --dump-queries")
    m.add_argument("--strategy", choices=STRATEGIES)

    s = add("sample", "joint-training mix frequencies")
    s.add_argument("--mix", help="MixSpec JSON (default: full-scale joint-training table)")
    s.add_argument("--datasets", help="directory of unified JSON-Lines files, one per dataset")
    s.add_argument("--n", type=int, help="number of draws to count")
    s.add_argument("--dry-run", dest="dry_run", action="store_const", const=True, help="print the table only")
    s.add_argument("--out", help="CSV of the first n draws (ignored with --dry-run)")

    g = add("gradcheck", "finite-difference gradient checks on random instances")
    g.add_argument("--instances", type=int)
    g.add_argument("--level", choices=("loss", "model", "both"))
    g.add_argument("--tolerance", type=float)
    g.add_argument("--coords", type=int, help="coordinates per parameter group at model level")
    return p


def resolve(argv) -> dict:
    """Parse ``argv`` into the fully resolved option dict."""
    ns = vars(build_parser().parse_args(argv))
    command = ns.pop("command")
    config_path = ns.pop("config", None)
    resolved = {"command": command, "seed": 0, **DEFAULTS[command]()}
    if config_path is not None:
        try:
            with open(config_path, encoding="utf-8") as fh:
                file_opts = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {config_path}: {exc}") from exc
        if not isinstance(file_opts, dict):
            raise UsageError("config file must hold a JSON object")
        if file_opts.get("command", command) != command:
            raise UsageError(f"config is for {file_opts['command']!r}, not {command!r}")
        resolved = _merge(resolved, file_opts)
    resolved = _merge(resolved, _unflatten(ns))
    missing = [k for k in REQUIRED.get(command, ()) if resolved.get(k) is None]
    if missing:
        raise UsageError(f"{command}: missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))
    return resolved


# --- convert ---------------------------------------------------------------------------


def _mask(obj, size) -> Rle:
    """A mask given as an RLE object or a nested 0/1 list."""
    if isinstance(obj, dict):
        return Rle.from_json(obj)
    bits = as_binary(np.asarray(obj))
    if bits.shape != tuple(size):
        raise MixedQueryError(f"mask is {bits.shape}, image is {tuple(size)}")
    return rle_encode(bits)


def convert_line(obj: dict, task: str, dataset_id: str, keep_external_boxes: bool = False) -> UnifiedAnnotation:
    """One task-specific input line to a unified annotation.

    Inputs share ``image_id``, ``h``, ``w``; the payload key depends on the task:
    ``instances`` / ``segments`` (lists of ``{label, mask, thing_stuff?, bbox?}``),
    ``label_map`` (2-D list, plus optional ``ignore_label``), ``mask``
    (foreground) or ``refs`` (list of ``{caption, mask}``).
    """
    size = (int(obj["h"]), int(obj["w"]))
    kw = {"image_id": str(obj["image_id"]), "dataset_id": dataset_id}
    if task == "instance":
        items = obj["instances"]
        ann = from_instance(size, [(i["label"], _mask(i["mask"], size), i.get("thing_stuff", "unknown")) for i in items], **kw)
        if keep_external_boxes:
            records = [
                record_from_json({**item, "mask": rec.mask.to_json(), "thing_stuff": rec.thing_stuff}, True)
                if "bbox" in item
                else rec
                for item, rec in zip(items, ann.records)
            ]
            ann = replace(ann, records=tuple(records))
        return ann
    if task == "panoptic":
        segs = [(s["label"], _mask(s["mask"], size), s.get("thing_stuff", "unknown")) for s in obj["segments"]]
        return from_panoptic(size, segs, **kw)
    if task == "semantic":
        return from_semantic(size, np.asarray(obj["label_map"], dtype=object), obj.get("ignore_label", "ignore"), **kw)
    if task == "foreground":
        return from_foreground(size, _mask(obj["mask"], size), **kw)
    if task == "referring":
        return from_referring(size, [(r["caption"], _mask(r["mask"], size)) for r in obj["refs"]], **kw)
    raise UsageError(f"unknown task {task!r}")



def _read_lines(path):
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if line.strip():
                try:
                    yield n, json.loads(line)
                except json.JSONDecodeError as exc:
                    raise MixedQueryError(f"{path}:{n}: invalid JSON ({exc.msg})") from exc


def cmd_convert(cfg: dict) -> int:
    anns = []
    for n, obj in _read_lines(cfg["input"]):
        try:
            anns.append(convert_line(obj, cfg["task"], cfg["dataset_id"], cfg["keep_external_boxes"]))
        except KeyError as exc:
            raise MixedQueryError(f"{cfg['input']}:{n}: missing field {exc.args[0]!r}") from exc
        except MixedQueryError as exc:
            raise type(exc)(f"{cfg['input']}:{n}: {exc}") from exc
    if cfg["captions"]:
        by_id = {str(o["image_id"]): o["captions"] for _, o in _read_lines(cfg["captions"])}
        anns = [attach_synthetic_captions(a, by_id[a.image_id]) if a.image_id in by_id else a for a in anns]
    ds = Dataset(cfg["dataset_id"], anns)
    if cfg["exclude"]:
        ids = Path(cfg["exclude"]).read_text(encoding="utf-8").split()
        ds = apply_exclusion(ds, ids)
    write_jsonl(cfg["out"], ds.annotations)
    print(json.dumps({"written": len(ds), "dropped": len(anns) - len(ds), "out": cfg["out"]}))
    return 0


# --- train-toy ------------------------------------------------------------------------


def _load_training_data(paths) -> list[Dataset]:
    from .toymodel.synthetic import instance_heavy_dataset, overfit_dataset

    out = []
    for p in paths:
        if p == "builtin:panoptic":
            out.append(overfit_dataset())
        elif p == "builtin:instances":
            out.append(instance_heavy_dataset())
        else:
            out.append(load_dataset(p))
    return out


def write_trace_csv(path, trace, components, lrs) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        keys = list(components[0]) if components else []
        w.writerow(["step", "lr", "loss", *keys])
        for i, loss in enumerate(trace):
            w.writerow([i, repr(float(lrs[i])), repr(float(loss)), *(repr(float(components[i][k])) for k in keys)])


def cmd_train(cfg: dict) -> int:
    from .toymodel.model import ModelConfig
    from .toymodel.train import TrainConfig, learning_rate_at, save_checkpoint, train

    model_cfg = ModelConfig.from_json(cfg["model"])
    train_cfg = TrainConfig.from_json({**cfg["train"], "seed": cfg["seed"]})
    weights = LossWeights(**cfg["loss"])
    datasets = _load_training_data(cfg["data"])
    mix = cfg["mix"]
    if isinstance(mix, str):
        mix = MixSpec.load(mix)
    elif isinstance(mix, dict):
        mix = MixSpec.from_json(mix)
    result = train(datasets, train_cfg, cfg["strategy"], model_cfg, weights, mix)
    save_checkpoint(cfg["out"], result)
    total = len(result.loss_trace)
    lrs = [learning_rate_at(i, total, train_cfg) for i in range(total)]
    if cfg["trace"]:
        write_trace_csv(cfg["trace"], result.loss_trace, result.components, lrs)
    if cfg["plot"]:
        from .plotting import plot_loss_trace

        plot_loss_trace(result.loss_trace, cfg["plot"], result.components, title=f"{cfg['strategy']} queries")
    summary = {
        "steps": total,
        "first_loss": float(result.loss_trace[0]) if total else None,
        "final_loss": float(result.loss_trace[-1]) if total else None,
        "checkpoint": cfg["out"],
    }
    print(json.dumps(summary))
    return 0


# --- predict -----------------------------------------------------------------------------


def predict_annotation(model, params, vocabulary, ann: UnifiedAnnotation, task: str, threshold: float):
    """Predictions for one annotated image; returns ``(PredictedImage, query ids or None, outputs)``."""
    from .toymodel import inference
    from .toymodel.synthetic import synthesize_image

    cfg = model.cfg
    image = synthesize_image(ann.image_id, ann, cfg.grid, cfg.in_channels)
    size = ann.image_size
    soft, queries = None, None
    if task == "instance":
        preds = inference.predict(model, params, image, vocabulary, size, threshold)
        segments = inference.instance_segments(preds)
        queries = [p.query for p in preds]
    elif task == "panoptic":
        preds = inference.predict(model, params, image, vocabulary, size, 0.0)
        segments = inference.panoptic_segments(preds, threshold)
    elif task == "semantic":
        label_map = inference.semantic_map(model, params, image, vocabulary, size)
        segments = [Segment(str(c), label_map == c, 1.0) for c in sorted(set(label_map.ravel().tolist()))]
    elif task == "referring":
        captions = [r.label_text for r in ann.records]
        masks = inference.referring_masks(model, params, image, captions, size) if captions else []
        segments = [Segment(c, m, 1.0) for c, m in zip(captions, masks)]
    elif task == "foreground":
        soft = inference.foreground_soft_mask(model, params, image, size)
        segments = [Segment("foreground", soft > 0.5, 1.0)]
    else:
        raise UsageError(f"unknown task {task!r}")
    outputs = inference.run(model, params, image)
    return PredictedImage(ann.image_id, size, task, ann.dataset_id, segments, soft), queries, outputs


def cmd_predict(cfg: dict) -> int:
    from .toymodel.model import ToyModel
    from .toymodel.train import load_checkpoint

    params, model_cfg, vocabulary, _ = load_checkpoint(cfg["ckpt"])
    model = ToyModel(model_cfg)
    anns = read_jsonl(cfg["images"])
    predictions, queries, dumps = [], [], []
    for ann in anns:
        task = ann.task if cfg["task"] == "auto" else cfg["task"]
        pred, qs, outputs = predict_annotation(model, params, vocabulary, ann, task, cfg["threshold"])
        predictions.append(pred)
        queries.append(qs)
        dumps.append(dump_to_json(ann.image_id, outputs, model.provenance))
    write_predictions(cfg["out"], predictions, queries)
    if cfg["dump_queries"]:
        with open(cfg["dump_queries"], "w", encoding="utf-8") as fh:
            for d in dumps:
                fh.write(json.dumps(d, separators=(",", ":")) + "\n")
    print(json.dumps({"images": len(predictions), "segments": sum(len(p.segments) for p in predictions), "out": cfg["out"]}))
    return 0


# --- eval -------------------------------------------------------------------------------------


def pair_by_image(gts, preds):
    """Align predictions to ground truth by image id; any mismatch is an error naming the first one."""
    by_id = {}
    for p in preds:
        if p.image_id in by_id:
            raise MixedQueryError(f"duplicate prediction for image id {p.image_id!r}")
        by_id[p.image_id] = p
    gt_ids = set()
    for g in gts:
        gt_ids.add(g.image_id)
        if g.image_id not in by_id:
            raise MixedQueryError(f"image id mismatch: {g.image_id!r} is in the ground truth but has no prediction")
    for p in preds:
        if p.image_id not in gt_ids:
            raise MixedQueryError(f"image id mismatch: prediction for {p.image_id!r} has no ground truth")
    out = []
    for g in gts:
        p = by_id[g.image_id]
        if p.image_size != g.image_size:
            raise MixedQueryError(f"image {g.image_id!r}: prediction is {p.image_size}, ground truth is {g.image_size}")
        out.append((g, p))
    return out


def evaluate_files(task: str, gts, preds, use_boxes: bool = False) -> MetricReport:
    pairs = pair_by_image(gts, preds)
    if task == "panoptic":
        pq, sq, rq, per_class = panoptic_quality([p.segments for _, p in pairs], [g for g, _ in pairs])
        return MetricReport(pq=pq, sq=sq, rq=rq, per_class=per_class)
    if task == "instance":
        ap, per_t, per_class = mask_ap([p.segments for _, p in pairs], [g for g, _ in pairs], use_boxes=use_boxes)
        return MetricReport(mask_ap=ap, ap_per_threshold=per_t, per_class={k: {"ap": v} for k, v in per_class.items()})
    if task == "semantic":
        acc = ConfusionAccumulator(ignore_label="")
        for g, p in pairs:
            gt_map = rasterize_labels(g, g.image_size)
            gt_map[g.ignore_mask()] = ""
            ordered = sorted(p.segments, key=lambda s: s.score)  # highest score painted last
            acc.update(rasterize_labels(ordered, p.image_size, fill="\x00unlabeled"), gt_map)
        miou, per_class = acc.result()
        per_class.pop("\x00unlabeled", None)
        return MetricReport(miou=miou, per_class={k: {"iou": v} for k, v in per_class.items()})
    if task == "referring":
        mask_pairs = []
        for g, p in pairs:
            by_caption = {s.label: s.mask for s in p.segments}
            for r in g.records:
                mask_pairs.append((by_caption.get(r.label_text, np.zeros(g.image_size, dtype=bool)), r.binary()))
        return MetricReport(miou=cumulative_iou(mask_pairs))
    if task == "foreground":
        errs = []
        for g, p in pairs:
            gt = np.zeros(g.image_size)
            for r in g.records:
                if r.label_text == "foreground":
                    gt[r.binary()] = 1.0
            if p.soft is not None:
                pred = p.soft
            else:
                pred = np.zeros(g.image_size)
                for s in p.segments:
                    if s.label == "foreground":
                        pred[s.mask] = 1.0
            errs.append(foreground_mse(pred, gt))
        return MetricReport(mse=float(np.mean(errs)) if errs else None)
    raise UsageError(f"unknown task {task!r}")


def write_per_class_csv(path, per_class: dict) -> None:
    keys = sorted({k for row in per_class.values() for k in row})
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", *keys])
        for label in sorted(per_class):
            w.writerow([label, *(per_class[label].get(k, "") for k in keys)])


def cmd_eval(cfg: dict) -> int:
    gts = read_jsonl(cfg["gt"])
    preds = read_predictions(cfg["pred"])
    report = evaluate_files(cfg["task"], gts, preds, bool(cfg["boxes"]))
    print(json.dumps(report.to_json(), indent=2, sort_keys=True))
    if cfg["table"]:
        write_per_class_csv(cfg["table"], report.per_class)
    if cfg["plot"] and report.per_class:
        from .plotting import plot_per_class

        metric = next(iter(next(iter(report.per_class.values()))))
        plot_per_class(report.per_class, cfg["plot"], metric, title=f"{cfg['task']} per class")
    return 0


# --- match-stats --------------------------------------------------------------------------------


def cmd_match_stats(cfg: dict) -> int:
    gts = {a.image_id: a for a in read_jsonl(cfg["gt"])}
    dumps = read_dumps(cfg["pred"])
    vocabulary = tuple(sorted({r.label_text for a in gts.values() for r in a.records}))
    assignments, tags, provenance = [], [], None
    for image_id, outputs, prov in dumps:
        if image_id not in gts:
            raise MixedQueryError(f"image id mismatch: dump for {image_id!r} has no ground truth")
        if provenance is not None and prov != provenance:
            raise MixedQueryError("query provenance differs between images")
        provenance = prov
        ann = gts[image_id]
        targets = prepare_targets(ann, outputs.pixel_features.shape[1:], vocabulary, outputs.class_embeds.shape[1])
        assignments.append(match_with_strategy(targets, outputs, cfg["strategy"], prov))
        tags.append(ann.records)
    if provenance is None:
        raise MixedQueryError("no decoder dumps to score")
    stats = selection_stats(assignments, tags, provenance)
    print(json.dumps({"images": len(assignments), "strategy": cfg["strategy"], **stats.to_json()}, indent=2))
    return 0


# --- sample ------------------------------------------------------------------------------------


def _placeholder_datasets(spec: MixSpec) -> list[Dataset]:
    return [Dataset(d, (UnifiedAnnotation(f"{d}/0", (1, 1), (), "instance", d),)) for d, _ in spec.entries]


def cmd_sample(cfg: dict) -> int:
    spec = MixSpec.load(cfg["mix"]) if cfg["mix"] else MixSpec.default(cfg["seed"])
    if cfg["datasets"]:
        files = sorted(Path(cfg["datasets"]).glob("*.jsonl"))
        datasets = [load_dataset(f) for f in files]
    else:
        datasets = _placeholder_datasets(spec)
    have = {d.dataset_id for d in datasets}
    missing = [d for d, _ in spec.entries if d not in have]
    if missing:
        raise MixedQueryError(f"mix names datasets that were not found: {missing}")
    datasets = [d for d in datasets if d.dataset_id in dict(spec.entries)]
    rows = frequency_table(datasets, spec, cfg["n"])
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(list(rows[0]))
    for row in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in row.values()])
    if cfg["out"] and not cfg["dry_run"]:
        sampler = MixSampler(datasets, spec)
        with open(cfg["out"], "w", encoding="utf-8", newline="") as fh:
            dw = csv.writer(fh, lineterminator="\n")
            dw.writerow(["draw", "dataset", "image_id"])
            for i, ann in enumerate(sampler.next_batch(cfg["n"])):
                dw.writerow([i, ann.dataset_id, ann.image_id])
    return 0


# --- gradcheck ---------------------------------------------------------------------------------


def cmd_gradcheck(cfg: dict) -> int:
    rng = np.random.default_rng(cfg["seed"])
    report = {}
    failed = False
    levels = ("loss", "model") if cfg["level"] == "both" else (cfg["level"],)
    for level in levels:
        worst, checked, skipped, where = 0.0, 0, 0, ""
        for _ in range(cfg["instances"]):
            if level == "loss":
                res = check_loss_gradients(rng, tolerance=cfg["tolerance"])
            else:
                res = check_model_gradients(rng, coords_per_group=cfg["coords"], tolerance=cfg["tolerance"])
            checked += res.checked
            skipped += res.skipped
            if res.max_rel_error >= worst:
                worst, where = res.max_rel_error, res.worst
        ok = bool(worst < cfg["tolerance"])
        failed |= not ok
        report[level] = {"max_rel_error": float(worst), "worst_group": where, "checked": checked, "skipped_kinks": skipped, "pass": ok}
    print(json.dumps(report, indent=2))
    if failed:
        raise MixedQueryError(f"gradient check exceeded tolerance {cfg['tolerance']}")
    return 0


COMMANDS = {
    "convert": cmd_convert,
    "train-toy": cmd_train,
    "predict": cmd_predict,
    "eval": cmd_eval,
    "match-stats": cmd_match_stats,
    "sample": cmd_sample,
    "gradcheck": cmd_gradcheck,
}


def _fail(kind: str, exc: Exception, code: int) -> int:
    print(json.dumps({"error": kind, "type": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
    return code


def run(argv=None) -> int:
    """Run one command; returns the exit code instead of exiting."""
    try:
        cfg = resolve(sys.argv[1:] if argv is None else list(argv))
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    print(json.dumps(cfg, sort_keys=True), file=sys.stderr)
    try:
        return COMMANDS[cfg["command"]](cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except MixedQueryError as exc:
        return _fail("data", exc, 1)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        return _fail("input", exc, 1)


def main() -> None:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    sys.exit(run())


if __name__ == "__main__":
    main()
