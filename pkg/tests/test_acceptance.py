"""Acceptance criteria, one PASS/FAIL line each (shown in the terminal summary).

Criterion 6 trains the default configuration end to end and takes most of
the suite's runtime.
"""

import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from semline import gradcheck
from semline.evaluation import curve_and_auc, evaluate, precision_recall, primary_accuracy
from semline.featgrid import mirror_flip
from semline.geometry import ImageSize, Line, canonical, check_line, miou, miou_matrix, point_at_arc
from semline.harness.cli import main
from semline.harness.config import TrainConfig
from semline.harness.synthetic import gen_synthetic
from semline.harness.train import candidate_pool, raw_detections, selection_order, to_detections, train_toy
from semline.model import (
    dnet_forward_batch,
    init_siamese,
    poolable,
    regress_line,
    siamese_forward_batch,
    trunk_forward,
)
from semline.select import pairwise_scores, select_iterate

# tolerances and limits
GRAD_REL_ERROR = 1e-4
GRAD_SECONDS = 60.0
RASTER_ABS = 0.01
ANCHOR = (50 / 60 + 40 / 50) / 2  # 0.81667 to five places
ANCHOR_ABS = 1e-6
MIN_ACCURACY = 0.80
ACCURACY_TAU = 0.85
PIPELINE_SECONDS = 30 * 60.0
MIOU_MATRIX_SECONDS = 2.0
PAIRWISE_SECONDS = 5.0


def report(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")


def random_line(rng, size):
    while True:
        s, e = rng.uniform(0, size.perimeter, 2)
        line = Line.from_points(point_at_arc(s, size), point_at_arc(e, size))
        try:
            check_line(line, size)
        except ValueError:
            continue
        return line


# 1 -------------------------------------------------------------------------


def test_gradient_verification():
    res = gradcheck.run_all(range(20), dnet=True)
    seconds = res.pop("seconds")
    worst = max(res.values())
    ok = worst < GRAD_REL_ERROR and seconds < GRAD_SECONDS
    detail = " ".join(f"{k}={v:.1e}" for k, v in res.items())
    report(1, ok, f"worst={worst:.2e} (<{GRAD_REL_ERROR}) time={seconds:.1f}s (<{GRAD_SECONDS:.0f}s) {detail}")
    assert ok


# 2 -------------------------------------------------------------------------


def raster_miou(a, b, size, res=512):
    xs = (np.arange(res) + 0.5) * size.width / res
    ys = (np.arange(res) + 0.5) * size.height / res
    gx, gy = np.meshgrid(xs, ys)

    def side(line):
        c = canonical(line, size)
        return (gx - c.x_s) * (c.y_e - c.y_s) - (gy - c.y_s) * (c.x_e - c.x_s) <= 0

    ra, rb = side(a), side(b)

    def iou(p, q):
        return (p & q).sum() / (p | q).sum()

    return max((iou(ra, rb) + iou(~ra, ~rb)) / 2, (iou(ra, ~rb) + iou(~ra, rb)) / 2)


def test_geometry_oracle():
    size = ImageSize(100, 100)
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        a, b = random_line(rng, size), random_line(rng, size)
        worst = max(worst, abs(miou(a, b, size) - raster_miou(a, b, size)))
    anchor = miou(Line(50, 0, 50, 100), Line(60, 0, 60, 100), size)
    ok = worst <= RASTER_ABS and abs(anchor - ANCHOR) <= ANCHOR_ABS
    report(2, ok, f"max |exact - raster| = {worst:.4f} (<= {RASTER_ABS}); x=50 vs x=60 -> {anchor:.6f}")
    assert ok


# 3 -------------------------------------------------------------------------


def test_mirror_flip_exactness():
    rng = np.random.default_rng(3)
    ok = True
    for h, w in [(2, 2), (4, 6), (8, 8), (6, 10), (16, 12)]:
        y = rng.normal(size=(h, w, 3))
        cases = [(Line(w / 2, 0, w / 2, h), y[:, ::-1]), (Line(0, h / 2, w, h / 2), y[::-1])]
        for line, expected in cases:
            flipped = mirror_flip(y, line)
            ok &= np.array_equal(flipped, expected)
            ok &= np.array_equal(mirror_flip(flipped, line), y)
            ok &= np.array_equal(mirror_flip(y, line.reversed()), expected)
    report(3, ok, "center-line flips equal row/column reversal bitwise; double flip is the identity")
    assert ok


# 4 -------------------------------------------------------------------------


def reference_selection(pr, pm):
    alive = list(range(len(pr)))
    picked = []
    while alive:
        best, best_r = None, None
        for i in alive:
            r = sum(pr[i][j] for j in alive if j != i)
            if best is None or r > best_r:
                best, best_r = i, r
        picked.append(best)
        alive = [j for j in alive if j != best and not pm[best][j] > 0.5]
    return picked


def test_selection_equivalence():
    rng = np.random.default_rng(4)
    mismatches = 0
    for _ in range(1000):
        n = int(rng.integers(1, 9))
        pr, pm = rng.uniform(size=(n, n)), rng.uniform(size=(n, n))
        if select_iterate(pr, pm).selected != reference_selection(pr.tolist(), pm.tolist()):
            mismatches += 1
    report(4, mismatches == 0, f"{mismatches} mismatches in 1000 draws with n <= 8")
    assert mismatches == 0


# 5 -------------------------------------------------------------------------


def test_metric_arithmetic():
    size = ImageSize(100, 100)
    gts = [Line(50, 0, 50, 100), Line(0, 50, 100, 50), Line(0, 0, 100, 100), Line(20, 0, 80, 100)]
    acc = primary_accuracy(gts[:3] + [Line(0, 10, 100, 10)], gts, size, ACCURACY_TAU)
    a, b, c, d = gts[0], gts[1], gts[2], Line(100, 0, 0, 100)
    p, r = precision_recall([[a, b, c]], [[a, b, d]], size, ACCURACY_TAU)
    rng = np.random.default_rng(5)
    preds = [[random_line(rng, size) for _ in range(3)] for _ in range(10)]
    truth = [[random_line(rng, size) for _ in range(2)] for _ in range(10)]
    curves = evaluate([x[0] for x in preds], [x[0] for x in truth], preds, truth, size)
    monotone = all(np.all(np.diff(cv.values) <= 0) for cv in curves.values())
    const = curve_and_auc(lambda t: 1.0).auc
    ok = acc == 0.75 and (p, r) == (2 / 3, 2 / 3) and monotone and const == 100.0
    report(5, ok, f"accuracy={acc} precision={p:.6f} recall={r:.6f} monotone={monotone} AUC(1)={const!r}")
    assert ok


# 6 -------------------------------------------------------------------------


@pytest.fixture(scope="module")
def end_to_end():
    cfg = TrainConfig()
    start = time.perf_counter()
    train = gen_synthetic(cfg.n_train, cfg.size, cfg.scene_mode, cfg.contrast, cfg.noise, seed=cfg.seed)
    test = gen_synthetic(cfg.n_test, cfg.size, cfg.scene_mode, cfg.contrast, cfg.noise, seed=cfg.seed + 1)
    model, tlog = train_toy(train, cfg)
    results = {}
    raws = [raw_detections(s.image, model.dnet, cfg) for s in test]
    for mode in ("rm", "nms"):
        prim, lines = [], []
        for raw in raws:
            order, _, _ = selection_order(raw, model, mode)
            dets = to_detections(raw, order)
            prim.append(dets[0].line if dets else None)
            lines.append([x.line for x in dets])
        curves = evaluate(prim, [s.primary_line for s in test], lines, [s.lines for s in test], test[0].size)
        results[mode] = (primary_accuracy(prim, [s.primary_line for s in test], test[0].size, ACCURACY_TAU), curves)
    return results, tlog, time.perf_counter() - start, model, test, raws


def test_end_to_end(end_to_end):
    results, tlog, seconds = end_to_end[:3]
    acc = results["rm"][0]
    auc_rm = results["rm"][1]["precision"].auc
    auc_nms = results["nms"][1]["precision"].auc
    ok = acc >= MIN_ACCURACY and auc_rm >= auc_nms and seconds < PIPELINE_SECONDS
    report(6, ok, f"accuracy@{ACCURACY_TAU}={acc:.3f} (>= {MIN_ACCURACY}) AUC_P rm={auc_rm:.2f} "
                  f"nms={auc_nms:.2f} AUC_A={results['rm'][1]['accuracy'].auc:.2f} "
                  f"AUC_R={results['rm'][1]['recall'].auc:.2f} time={seconds / 60:.1f} min (< 30)")
    assert ok


def test_stage_one_loss_decreases(end_to_end):
    tlog = end_to_end[1]
    first, last = tlog.stage1[0], tlog.stage1[-1]
    assert last[1] + last[2] < first[1] + first[2]


def closest_candidates(model, scenes):
    """Per single-line scene: (scene, candidates, index of the candidate closest to the gt)."""
    out = []
    for s in scenes:
        if len(s.lines) != 1:
            continue
        cands = candidate_pool(s.size, model.config.cand_step, model.dnet.config)
        ov = miou_matrix(cands, [s.primary_line], size=s.size)[:, 0]
        out.append((s, cands, int(np.argmax(ov)), ov))
    return out


def test_trained_detector_accepts_gt_aligned_candidate(end_to_end):
    model, test = end_to_end[3], end_to_end[4]
    hits = []
    for s, cands, k, _ in closest_candidates(model, test):
        p, _, _ = dnet_forward_batch(s.image, [cands[k]], model.dnet)
        hits.append(p[0, 0] > 0.5)
    assert len(hits) >= 10
    assert np.mean(hits) >= 0.9


def test_trained_regression_moves_closest_candidate_toward_gt(end_to_end):
    model, test = end_to_end[3], end_to_end[4]
    gains = []
    for s, cands, k, ov in closest_candidates(model, test):
        if ov[k] > 1 - 1e-9:
            continue  # already exact
        _, off, _ = dnet_forward_batch(s.image, [cands[k]], model.dnet)
        moved = regress_line(cands[k], off[0], s.size)
        gains.append(miou(moved, s.primary_line, s.size) - ov[k])
    assert gains
    assert np.mean(gains) > 0, f"mean mIoU change {np.mean(gains):+.4f} over {len(gains)} candidates"


def held_out_pairs(model, test, raws):
    """Siamese scores for (gt, own detection) pairs and for detection pairs sharing a gt."""
    rank, match = [], []
    for s, raw in zip(test, raws):
        gts = [g for g, ok in zip(s.lines, poolable(s.lines, s.size, model.dnet.config)) if ok]
        if not raw.lines or not gts:
            continue
        ov = miou_matrix(raw.lines, gts, size=s.size)
        owner = np.where(ov.max(axis=1) > ACCURACY_TAU, ov.argmax(axis=1), -1)
        gt_feats = trunk_forward(model.dnet, s.image, gts)[0]
        for d in np.flatnonzero(owner >= 0):
            pr = siamese_forward_batch(model.rnet, gt_feats[owner[d]][None], raw.features[d][None])[0]
            rank.append(pr[0, 0])
            for e in np.flatnonzero(owner == owner[d]):
                if e != d:
                    pm = siamese_forward_batch(model.mnet, raw.features[d][None], raw.features[e][None])[0]
                    match.append(pm[0, 0])
    return np.array(rank), np.array(match)


def test_trained_heads_on_held_out_pairs(end_to_end):
    rank, match = held_out_pairs(*end_to_end[3:])
    assert len(rank) >= 20 and len(match) >= 20
    assert np.mean(rank > 0.5) >= 0.9, f"gt outranks its detection on {np.mean(rank > 0.5):.2%}"
    assert np.mean(match > 0.5) >= 0.9, f"shared-gt detections match on {np.mean(match > 0.5):.2%}"


# 7 -------------------------------------------------------------------------


def test_ablation_hooks():
    base = TrainConfig(n_train=100, n_test=20, epochs=5, stage2_scenes=50, head_epochs=10)
    train = gen_synthetic(base.n_train, base.size, seed=70)
    test = gen_synthetic(base.n_test, base.size, seed=71)
    lines = []
    for mode in ("none", "noflip", "mirror"):
        cfg = base.replace(attention=mode)
        model, _ = train_toy(train, cfg)
        prim, found = [], []
        for s in test:
            raw = raw_detections(s.image, model.dnet, cfg)
            dets = to_detections(raw, selection_order(raw, model, "rm")[0])
            prim.append(dets[0].line if dets else None)
            found.append([d.line for d in dets])
        curves = evaluate(prim, [s.primary_line for s in test], found, [s.lines for s in test], test[0].size)
        assert set(curves) == {"accuracy", "precision", "recall"}
        lines.append(f"{mode}: " + " ".join(f"AUC_{k[0].upper()}={v.auc:.2f}" for k, v in curves.items()))
    report(7, True, "; ".join(lines))


# 8 -------------------------------------------------------------------------


def test_performance():
    size = ImageSize(100, 100)
    rng = np.random.default_rng(8)
    lines = [random_line(rng, size) for _ in range(1000)]
    start = time.perf_counter()
    m = miou_matrix(lines, size=size)
    t_miou = time.perf_counter() - start
    cfg = TrainConfig()
    rnet, mnet = init_siamese(rng, cfg.fc_dim, cfg.head_hidden, False), init_siamese(rng, cfg.fc_dim, cfg.head_hidden, False)
    feats = rng.normal(size=(64, cfg.fc_dim))
    start = time.perf_counter()
    pr, pm = pairwise_scores(feats, rnet, mnet)
    t_pair = time.perf_counter() - start
    ok = m.shape == (1000, 1000) and pr.shape == (64, 64) and t_miou < MIOU_MATRIX_SECONDS and t_pair < PAIRWISE_SECONDS
    report(8, ok, f"1000-line mIoU matrix {t_miou:.2f}s (< {MIOU_MATRIX_SECONDS}); "
                  f"64-detection pairwise scores {t_pair:.3f}s (< {PAIRWISE_SECONDS})")
    assert ok


# 9 -------------------------------------------------------------------------


def run_pipeline(root, cfg_path):
    args = ["--config", str(cfg_path)]
    assert main(["gen-data", "--out", str(root / "data")] + args) == 0
    assert main(["train", "--data", str(root / "data" / "train"), "--out", str(root / "model")] + args) == 0
    assert main(["detect", "--model", str(root / "model" / "model.ckpt"), "--data", str(root / "data" / "test"),
                 "--out", str(root / "det")] + args) == 0
    assert main(["select", "--raw", str(root / "det" / "raw.txt"), "--pairwise", str(root / "det" / "pairwise.txt"),
                 "--mode", "nms", "--out", str(root / "nms")] + args) == 0
    for name, det in (("eval", root / "det"), ("eval_nms", root / "nms")):
        assert main(["eval", "--detections", str(det / "detections.txt"),
                     "--annotations", str(root / "data" / "test" / "annotations.txt"),
                     "--out", str(root / name)] + args) == 0
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_cli_determinism(tmp_path, capsys):
    cfg = TrainConfig(seed=9, n_train=50, n_test=6, epochs=4, stage2_scenes=25, head_epochs=3)
    (tmp_path / "run.cfg").write_text(cfg.to_text())
    a = run_pipeline(tmp_path / "a", tmp_path / "run.cfg")
    b = run_pipeline(tmp_path / "b", tmp_path / "run.cfg")
    capsys.readouterr()
    differ = [str(k) for k in a if a[k] != b.get(k)]
    compared = [str(k) for k in a if k.suffix == ".csv" or "detections" in k.name or k.name == "raw.txt"]
    n_det = sum(int(row.split()[3]) for row in a[Path("det/raw.txt")].decode().splitlines() if row.strip())
    ok = not differ and a.keys() == b.keys() and len(compared) >= 6 and n_det > 0
    report(9, ok, f"{len(a)} output files byte-identical across two runs ({len(compared)} CSV/detection files, "
                  f"{n_det} raw detections)"
                  + (f"; differing: {differ}" if differ else ""))
    assert ok
