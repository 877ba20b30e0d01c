"""Command line entry point: data generation, training, detection, selection and evaluation.

Exit codes: 0 success, 1 unexpected failure, 2 bad arguments, 3 invalid
input data, 4 bad configuration, 5 numerical or training failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .. import gradcheck
from ..errors import NumericError, SemlineError, ValidationError
from ..evaluation import Detection, evaluate, format_summary, write_curve_csv
from ..geometry import ImageSize, generate_candidates, miou_matrix
from ..select import pairwise_scores
from . import io
from .config import SELECTION_MODES, TrainConfig
from .synthetic import SyntheticScene, gen_synthetic
from .train import (
    RawDetections,
    load_model,
    raw_detections,
    save_model,
    selection_order,
    to_detections,
    train_toy,
)

log = logging.getLogger("semline")

GRADCHECK_LIMIT = 1e-4
REPORT_TAU = 0.85


def split_seed(seed: int, split: str) -> int:
    """Independent seed per data split, derived from the run seed."""
    tag = {"train": 0, "test": 1}[split]
    return int(np.random.SeedSequence([seed, tag]).generate_state(1)[0])


def _config(args) -> TrainConfig:
    cfg = TrainConfig.load(args.config) if getattr(args, "config", None) else TrainConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _scenes(records, images) -> list[SyntheticScene]:
    return [SyntheticScene(im, list(r.lines), r.primary, "file") for r, im in zip(records, images)]


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = _out(args)
    for split, count in (("train", cfg.n_train), ("test", cfg.n_test)):
        scenes = gen_synthetic(count, cfg.size, cfg.scene_mode, cfg.contrast, cfg.noise, split_seed(cfg.seed, split))
        io.save_dataset(out / split, scenes, prefix=f"{split}")
        log.info("wrote %d %s scenes to %s", count, split, out / split)
    (out / "config.txt").write_text(cfg.to_text())
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _out(args)
    records, images = io.load_dataset(args.data)
    scenes = _scenes(records, images)
    start = time.perf_counter()
    model, tlog = train_toy(scenes, cfg)
    save_model(out / "model.ckpt", model)
    (out / "train_log.txt").write_text("\n".join(tlog.lines()) + "\n")
    (out / "config.txt").write_text(cfg.to_text())
    log.info("trained on %d scenes in %.1f s", len(scenes), time.perf_counter() - start)
    return 0


def _select_records(raws, pairs, model_or_cfg, mode):
    """Apply ``mode`` to each image's raw detections; returns records and selection traces."""
    recs, traces = [], []
    for image_id, raw in raws:
        pr, pm = pairs.get(image_id, (None, None))
        order, pr, pm = selection_order(raw, model_or_cfg, mode, pr, pm)
        recs.append(io.DetectionRecord(image_id, raw.size, tuple(to_detections(raw, order))))
        traces.append(f"{image_id} " + " ".join(str(k) for k in order))
    return recs, traces


def cmd_detect(args) -> int:
    model = load_model(args.model)
    if args.config:
        model.config = TrainConfig.load(args.config)
    mode = args.mode or model.config.selection
    out = _out(args)
    records, images = io.load_dataset(args.data)
    raw_recs, pair_entries, raws = [], [], []
    for r, im in zip(records, images):
        raw = raw_detections(im, model.dnet, model.config)
        pr = pm = None
        if raw.lines:
            pr, pm = pairwise_scores(raw.features, model.rnet, model.mnet)
        raws.append((r.image_id, raw))
        pair_entries.append((r.image_id, pr, pm))
        raw_recs.append(io.DetectionRecord(r.image_id, raw.size, tuple(
            Detection(ln, float(s)) for ln, s in zip(raw.lines, raw.scores))))
    io.save_detections(out / "raw.txt", raw_recs)
    io.save_pairwise(out / "pairwise.txt", pair_entries)
    pairs = {k: (pr, pm) for k, pr, pm in pair_entries}
    recs, traces = _select_records(raws, pairs, model, mode)
    io.save_detections(out / "detections.txt", recs)
    (out / "selection.txt").write_text("".join(t + "\n" for t in traces))
    log.info("detected lines in %d images (%s selection)", len(records), mode)
    return 0


class _Thresholds:
    """Stand-in for a trained model when only saved pairwise matrices are needed."""

    def __init__(self, cfg: TrainConfig):
        self.config = cfg
        self.rnet = self.mnet = None


def cmd_select(args) -> int:
    cfg = _config(args)
    mode = args.mode or cfg.selection
    out = _out(args)
    raw_recs = io.load_detections(args.raw)
    pairs = io.load_pairwise(args.pairwise) if args.pairwise else {}
    raws = []
    for rec in raw_recs:
        raw = RawDetections([d.line for d in rec.detections], np.array([d.score for d in rec.detections]),
                            np.zeros((len(rec.detections), 0)), rec.size)
        if mode == "rm":
            if rec.image_id not in pairs:
                raise ValidationError(f"no pairwise matrices for image {rec.image_id}")
            n = pairs[rec.image_id][0].shape[0]
            if n != len(rec.detections):
                raise ValidationError(f"image {rec.image_id}: {n}x{n} matrices for {len(rec.detections)} detections")
        raws.append((rec.image_id, raw))
    recs, traces = _select_records(raws, pairs, _Thresholds(cfg), mode)
    io.save_detections(out / "detections.txt", recs)
    (out / "selection.txt").write_text("".join(t + "\n" for t in traces))
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    out = _out(args)
    truth = {r.image_id: r for r in io.load_annotations(args.annotations)}
    dets = io.load_detections(args.detections)
    missing = [d.image_id for d in dets if d.image_id not in truth]
    if missing:
        raise ValidationError(f"detections for unknown images: {', '.join(missing[:5])}")
    seen = {d.image_id: d for d in dets}
    prim_p, prim_g, prim_s, line_p, line_g, sizes = [], [], [], [], [], []
    for image_id, ann in truth.items():
        rec = seen.get(image_id)
        found = [d for d in rec.detections] if rec else []
        if rec is not None and rec.size != ann.size:
            raise ValidationError(f"image {image_id}: detection size differs from annotation")
        line_p.append([d.line for d in found])
        line_g.append(list(ann.lines))
        sizes.append(ann.size)
        if ann.primary is not None:
            primary = next((d.line for d in found if d.primary), None)
            prim_p.append(primary)
            prim_g.append(ann.primary_line)
            prim_s.append(ann.size)
    curves = evaluate(prim_p, prim_g, line_p, line_g, prim_s, cfg.tau_lo, cfg.tau_hi, cfg.tau_step, sizes)
    write_curve_csv(out / "accuracy.csv", {"accuracy": curves["accuracy"]})
    write_curve_csv(out / "pr.csv", {"precision": curves["precision"], "recall": curves["recall"]})
    taus = curves["accuracy"].taus
    at = int(np.argmin(np.abs(taus - REPORT_TAU)))
    summary = {
        "images": len(truth),
        "auc_accuracy": curves["accuracy"].auc,
        "auc_precision": curves["precision"].auc,
        "auc_recall": curves["recall"].auc,
        f"accuracy_at_{taus[at]:.3f}": float(curves["accuracy"].values[at]),
        f"precision_at_{taus[at]:.3f}": float(curves["precision"].values[at]),
        f"recall_at_{taus[at]:.3f}": float(curves["recall"].values[at]),
    }
    text = format_summary(summary)
    (out / "summary.txt").write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_gradcheck(args) -> int:
    res = gradcheck.run_all(range(args.seeds), dnet=not args.skip_dnet)
    seconds = res.pop("seconds")
    worst = max(res.values())
    text = format_summary({**{f"max_rel_error_{k}": v for k, v in res.items()}, "seconds": seconds})
    sys.stdout.write(text)
    if args.out:
        (_out(args) / "gradcheck.txt").write_text(text)
    if worst >= GRADCHECK_LIMIT:
        raise NumericError(f"gradient check failed: worst relative error {worst:.3g}")
    return 0


def cmd_bench(args) -> int:
    size = ImageSize(args.size, args.size)
    rng = np.random.default_rng(args.seed or 0)
    cands = generate_candidates(size, 1.0)
    lines = [cands[k] for k in rng.choice(len(cands), min(args.lines, len(cands)), replace=False)]
    start = time.perf_counter()
    m = miou_matrix(lines, size=size)
    seconds = time.perf_counter() - start
    text = format_summary({"lines": len(lines), "pairs": m.size, "seconds": seconds,
                           "pairs_per_second": m.size / max(seconds, 1e-12)})
    sys.stdout.write(text)
    if args.out:
        (_out(args) / "bench.txt").write_text(text)
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="semline", description="Semantic line detection toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", parents=[common], help="write seeded synthetic train/test datasets")

    s = sub.add_parser("train", parents=[common], help="train detector and pairwise heads")
    s.add_argument("--data", required=True, help="dataset directory")

    s = sub.add_parser("detect", parents=[common], help="detect lines in a dataset")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--mode", choices=SELECTION_MODES)

    s = sub.add_parser("select", parents=[common], help="re-run selection on saved raw detections")
    s.add_argument("--raw", required=True)
    s.add_argument("--pairwise")
    s.add_argument("--mode", choices=SELECTION_MODES)

    s = sub.add_parser("eval", parents=[common], help="accuracy, precision and recall curves")
    s.add_argument("--detections", required=True)
    s.add_argument("--annotations", required=True)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every backward pass")
    s.add_argument("--seeds", type=int, default=20)
    s.add_argument("--skip-dnet", action="store_true")

    s = sub.add_parser("bench", parents=[common], help="pairwise mIoU throughput")
    s.add_argument("--lines", type=int, default=1000)
    s.add_argument("--size", type=int, default=64)
    return p


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "detect": cmd_detect,
    "select": cmd_select,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except SemlineError as exc:
        print(f"semline: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"semline: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
