"""Two-stage training of the detector and the pairwise heads, and inference."""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from ..errors import DegenerateLineError, TrainingError, ValidationError
from ..evaluation import Detection
from ..geometry import ImageSize, Line, canonical, generate_candidates, miou_matrix
from ..model import (
    DNetConfig,
    DNetParams,
    SiameseHeadParams,
    backbone_forward,
    dnet_backward,
    dnet_forward_batch,
    dnet_loss_batch,
    init_dnet,
    init_siamese,
    poolable,
    regress_line,
    siamese_backward,
    siamese_forward_batch,
    trunk_forward,
)
from ..neural import cross_entropy, cross_entropy_logit_grad, load_checkpoint, save_checkpoint
from ..select import RANKING, build_pair_labels, nms, pairwise_scores, select_iterate
from .config import TrainConfig

log = logging.getLogger(__name__)

CHUNK = 128          # candidates per forward chunk at inference
MONITOR_SCENES = 50  # scenes whose fixed candidate sample tracks the stage-1 loss


def dnet_config(cfg: TrainConfig) -> DNetConfig:
    return DNetConfig(sigma=cfg.sigma, pool_threshold=cfg.pool_thr, fc_dim=cfg.fc_dim,
                      attention=cfg.attention, reg_scale=cfg.reg_scale,
                      input_scale=cfg.input_scale, fc1_gain=cfg.fc1_gain)


@lru_cache(maxsize=16)
def _candidate_pool(width: int, height: int, step: float, net_key: tuple) -> tuple:
    size = ImageSize(width, height)
    cands = generate_candidates(size, step)
    ok = poolable(cands, size, DNetConfig(**dict(net_key)))
    return tuple(canonical(c, size) for c, good in zip(cands, ok) if good)


def candidate_pool(size: ImageSize, step: float, net: DNetConfig) -> list[Line]:
    """Boundary candidates the detector can pool, in canonical endpoint order."""
    key = (("pool_threshold", net.pool_threshold), ("channels", net.channels),
           ("downsample", net.downsample), ("attended", net.attended))
    return list(_candidate_pool(size.width, size.height, float(step), key))


# ---------------------------------------------------------------------------
# candidate labels


def oriented_offset(cand: Line, gt: Line) -> np.ndarray:
    """``gt - cand`` endpoint offsets, pairing endpoints to minimize the total shift."""
    c = np.asarray(cand.as_array())
    g = np.asarray(gt.as_array())
    g_rev = np.asarray(gt.reversed().as_array())
    straight = np.hypot(*(g[:2] - c[:2])) + np.hypot(*(g[2:] - c[2:]))
    crossed = np.hypot(*(g_rev[:2] - c[:2])) + np.hypot(*(g_rev[2:] - c[2:]))
    return (g if straight <= crossed else g_rev) - c


@dataclass
class CandidateLabels:
    labels: np.ndarray   # (N, 2) one-hot, column 0 = semantic
    targets: np.ndarray  # (N, 4) offsets, zero for negatives
    owner: np.ndarray    # (N,) gt index or -1
    overlap: np.ndarray  # (N,) best mIoU against any gt

    @property
    def positive(self) -> np.ndarray:
        return self.owner >= 0


def assign_candidate_labels(candidates, gts, size: ImageSize, pos_thr: float = 0.85) -> CandidateLabels:
    cands = [canonical(c, size) for c in candidates]
    n = len(cands)
    labels = np.tile([0.0, 1.0], (n, 1))
    targets = np.zeros((n, 4))
    owner = np.full(n, -1)
    if not gts or not n:
        return CandidateLabels(labels, targets, owner, np.zeros(n))
    ov = miou_matrix(cands, list(gts), size=size)
    best = np.argmax(ov, axis=1)
    overlap = ov[np.arange(n), best]
    for k in np.flatnonzero(overlap > pos_thr):
        labels[k] = (1.0, 0.0)
        owner[k] = best[k]
        targets[k] = oriented_offset(cands[k], gts[best[k]])
    return CandidateLabels(labels, targets, owner, overlap)


def sample_candidates(rng, lab: CandidateLabels, neg_per_pos: float, near_lo: float) -> np.ndarray:
    """All positives plus negatives, half of them near misses."""
    pos = np.flatnonzero(lab.positive)
    neg = np.flatnonzero(~lab.positive)
    n_neg = min(len(neg), int(math.ceil(neg_per_pos * max(len(pos), 1))))
    near = neg[lab.overlap[neg] >= near_lo]
    take_near = rng.choice(near, min(len(near), n_neg // 2), replace=False) if len(near) else np.zeros(0, int)
    rest = np.setdiff1d(neg, take_near)
    take_far = rng.choice(rest, min(len(rest), n_neg - len(take_near)), replace=False)
    return np.sort(np.concatenate([pos, take_near, take_far]).astype(int))


# ---------------------------------------------------------------------------
# stage 1


@dataclass
class TrainedModel:
    dnet: DNetParams
    rnet: SiameseHeadParams
    mnet: SiameseHeadParams
    config: TrainConfig


@dataclass
class TrainLog:
    stage1: list = field(default_factory=list)   # (epoch, cls per candidate, reg per candidate)
    stage2: list = field(default_factory=list)   # (epoch, rnet loss, mnet loss)
    notes: dict = field(default_factory=dict)

    def lines(self) -> list[str]:
        out = [f"stage1 epoch={e} cls={c:.6f} reg={r:.6f}" for e, c, r in self.stage1]
        out += [f"stage2 epoch={e} rnet={a:.6f} mnet={b:.6f}" for e, a, b in self.stage2]
        out += [f"{k}={v}" for k, v in self.notes.items()]
        return out


class Optimizer:
    """In-place update of a tensor dict: momentum gradient descent or Adam."""

    def __init__(self, tensors: dict, kind: str, lr: float, momentum: float = 0.0,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.tensors = tensors
        self.kind = kind
        self.lr = lr
        self.momentum = momentum
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in tensors.items()}
        self.v = {k: np.zeros_like(v) for k, v in tensors.items()} if kind == "adam" else None

    def step(self, grads: dict) -> None:
        self.t += 1
        b1, b2 = self.betas
        for name, arr in self.tensors.items():
            g = grads[name]
            if self.kind == "adam":
                self.m[name] = b1 * self.m[name] + (1 - b1) * g
                self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
                m_hat = self.m[name] / (1 - b1 ** self.t)
                v_hat = self.v[name] / (1 - b2 ** self.t)
                arr -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            else:
                self.m[name] = self.momentum * self.m[name] - self.lr * g
                arr += self.m[name]


def trunk_checksum(params: DNetParams) -> str:
    h = hashlib.sha256()
    for name, arr in sorted(params.trunk_tensors().items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()


def _scene_batch_loss(params, scene, cands, lab, idx, lam):
    lines = [cands[k] for k in idx]
    probs, offsets, cache = dnet_forward_batch(scene.image, lines, params)
    cls_loss, reg_loss, g_logits, g_offsets = dnet_loss_batch(
        probs, offsets, lab.labels[idx], lab.targets[idx], lam)
    return float(cls_loss), float(reg_loss), cache, g_logits, g_offsets


def _monitor(params, scenes, pools, labs, samples, lam):
    cls_tot = reg_tot = 0.0
    count = 0
    for scene, cands, lab, idx in zip(scenes, pools, labs, samples):
        probs, offsets, _ = dnet_forward_batch(scene.image, [cands[k] for k in idx], params)
        c, r, _, _ = dnet_loss_batch(probs, offsets, lab.labels[idx], lab.targets[idx], lam)
        cls_tot += float(c)
        reg_tot += float(r)
        count += len(idx)
    return cls_tot / count, reg_tot / count


def train_detector(scenes, cfg: TrainConfig, rng, log_: TrainLog) -> DNetParams:
    net_cfg = dnet_config(cfg)
    params = init_dnet(rng, net_cfg)
    pools = [candidate_pool(s.size, cfg.cand_step, net_cfg) for s in scenes]
    labs = [assign_candidate_labels(c, s.lines, s.size, cfg.pos_thr) for c, s in zip(pools, scenes)]
    mon = min(MONITOR_SCENES, len(scenes))
    mon_samples = [sample_candidates(rng, labs[k], cfg.neg_per_pos, cfg.near_neg_lo) for k in range(mon)]
    cls0, reg0 = _monitor(params, scenes[:mon], pools, labs[:mon], mon_samples, cfg.lam)
    log_.stage1.append((0, cls0, reg0))
    log.info("stage1 epoch 0 cls %.5f reg %.5f", cls0, reg0)
    opt = Optimizer(params.tensors(), cfg.optimizer, cfg.lr, cfg.momentum)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(scenes))
        for start in range(0, len(order), cfg.batch_size):
            grads_sum = None
            count = 0
            for k in order[start:start + cfg.batch_size]:
                idx = sample_candidates(rng, labs[k], cfg.neg_per_pos, cfg.near_neg_lo)
                c, r, cache, g_logits, g_offsets = _scene_batch_loss(params, scenes[k], pools[k], labs[k], idx, cfg.lam)
                if not (math.isfinite(c) and math.isfinite(r)):
                    raise TrainingError("stage-1 loss is not finite", epoch=epoch)
                g = dnet_backward(params, cache, g_logits, g_offsets)
                g.pop("image", None)
                if grads_sum is None:
                    grads_sum = g
                else:
                    for name in grads_sum:
                        grads_sum[name] += g[name]
                count += len(idx)
            opt.step({name: g / count for name, g in grads_sum.items()})
        cls_e, reg_e = _monitor(params, scenes[:mon], pools, labs[:mon], mon_samples, cfg.lam)
        if not (math.isfinite(cls_e) and math.isfinite(reg_e)):
            raise TrainingError("stage-1 loss diverged", epoch=epoch)
        log_.stage1.append((epoch, cls_e, reg_e))
        log.info("stage1 epoch %d cls %.5f reg %.5f", epoch, cls_e, reg_e)
    return params


# ---------------------------------------------------------------------------
# inference


@dataclass
class RawDetections:
    lines: list            # regressed lines, canonical
    scores: np.ndarray     # semantic probability p
    features: np.ndarray   # (n, fc_dim) trunk features of the regressed lines
    size: ImageSize


def raw_detections(image: np.ndarray, params: DNetParams, cfg: TrainConfig) -> RawDetections:
    """Score every candidate, keep ``p > 0.5`` and regress the survivors."""
    size = ImageSize(image.shape[1], image.shape[0])
    cands = candidate_pool(size, cfg.cand_step, params.config)
    stages, _ = backbone_forward(params, image)
    probs, offsets = [], []
    for start in range(0, len(cands), CHUNK):
        p, o, _ = dnet_forward_batch(image, cands[start:start + CHUNK], params, stages)
        probs.append(p)
        offsets.append(o)
    probs = np.concatenate(probs) if probs else np.zeros((0, 2))
    offsets = np.concatenate(offsets) if offsets else np.zeros((0, 4))
    lines, scores = [], []
    for k in np.flatnonzero(probs[:, 0] > 0.5):
        try:
            line = regress_line(cands[k], offsets[k], size)
        except DegenerateLineError:
            continue
        lines.append(line)
        scores.append(probs[k, 0])
    if lines:
        ok = poolable(lines, size, params.config)
        lines = [ln for ln, good in zip(lines, ok) if good]
        scores = [s for s, good in zip(scores, ok) if good]
    features = np.zeros((0, params.config.fc_dim))
    if lines:
        features = trunk_forward(params, image, lines, stages)[0]
    return RawDetections(lines, np.asarray(scores, dtype=float), features, size)


def selection_order(raw: RawDetections, model: TrainedModel, mode: str, pr=None, pm=None):
    """Indices of ``raw.lines`` in selection order plus the pairwise matrices used."""
    n = len(raw.lines)
    if n == 0:
        return [], None, None
    if mode == "rm":
        if pr is None:
            pr, pm = pairwise_scores(raw.features, model.rnet, model.mnet)
        return select_iterate(pr, pm, model.config.match_prob).selected, pr, pm
    if mode == "nms":
        return nms(raw.lines, raw.scores, raw.size, model.config.nms_thr), pr, pm
    if mode == "none":
        return sorted(range(n), key=lambda k: (-raw.scores[k], k)), pr, pm
    raise ValidationError(f"unknown selection mode {mode!r}")


def to_detections(raw: RawDetections, order) -> list[Detection]:
    return [Detection(raw.lines[k], float(raw.scores[k]), rank == 0) for rank, k in enumerate(order)]


def detect(image: np.ndarray, model: TrainedModel, mode: str | None = None) -> list[Detection]:
    raw = raw_detections(image, model.dnet, model.config)
    order, _, _ = selection_order(raw, model, mode or model.config.selection)
    return to_detections(raw, order)


# ---------------------------------------------------------------------------
# stage 2


def pair_dataset(scenes, params: DNetParams, cfg: TrainConfig):
    """Features and one-hot targets for ranking and matching pairs."""
    rank_x, rank_y, match_x, match_y = [], [], [], []
    for scene in scenes:
        raw = raw_detections(scene.image, params, cfg)
        gts = list(scene.lines)
        if scene.primary is None or not gts:
            continue
        ok = poolable(gts, scene.size, params.config)
        if not ok[scene.primary]:
            continue
        keep = [g for g, good in enumerate(ok) if good]
        gts = [gts[g] for g in keep]
        primary = keep.index(scene.primary)
        dets = []
        if raw.lines:
            ov = miou_matrix(raw.lines, gts, size=scene.size)
            for d in range(len(raw.lines)):
                g = int(np.argmax(ov[d]))
                if ov[d, g] > cfg.pos_thr:
                    dets.append((d, g))
        stages, _ = backbone_forward(params, scene.image)
        feats = trunk_forward(params, scene.image, gts, stages)[0]
        pooled = np.concatenate([feats, raw.features[[d for d, _ in dets]]]) if dets else feats
        labels = build_pair_labels([(raw.lines[d], g) for d, g in dets], gts, primary)
        for lb in labels:
            x = (pooled[lb.first], pooled[lb.second])
            if lb.task == RANKING:
                rank_x.append(x)
                rank_y.append(lb.target)
            else:
                match_x.append(x)
                match_y.append(lb.target)

    def pack(xs, ys):
        if not xs:
            return np.zeros((0, 2, params.config.fc_dim)), np.zeros((0, 2))
        return np.array(xs), np.array(ys)

    return pack(rank_x, rank_y), pack(match_x, match_y)


def _balanced_weights(y: np.ndarray) -> np.ndarray:
    """Per-pair weights giving both classes equal total weight."""
    pos = y[:, 0] == 1.0
    w = np.ones(len(y))
    if pos.any() and (~pos).any():
        w[pos] = 0.5 / pos.mean()
        w[~pos] = 0.5 / (~pos).mean()
    return w


def train_head(rng, x: np.ndarray, y: np.ndarray, cfg: TrainConfig, name: str, log_rows: list) -> SiameseHeadParams:
    head = init_siamese(rng, cfg.fc_dim, cfg.head_hidden)
    opt = Optimizer(head.tensors(), cfg.optimizer, cfg.head_lr, cfg.momentum)
    weights = _balanced_weights(y) if len(y) else y
    for epoch in range(1, cfg.head_epochs + 1):
        order = rng.permutation(len(y))
        total = 0.0
        for start in range(0, len(order), cfg.head_batch):
            idx = order[start:start + cfg.head_batch]
            probs, cache = siamese_forward_batch(head, x[idx, 0], x[idx, 1])
            wt = weights[idx][:, None]
            loss = float((wt[:, 0] * cross_entropy(probs, y[idx])).sum())
            if not math.isfinite(loss):
                raise TrainingError(f"{name} loss is not finite", epoch=epoch)
            total += loss
            grads = siamese_backward(head, cache, wt * cross_entropy_logit_grad(probs, y[idx]))
            opt.step({k: g / len(idx) for k, g in grads.items()})
        log_rows.append(total / max(len(y), 1))
    return head


def train_toy(scenes, cfg: TrainConfig) -> tuple[TrainedModel, TrainLog]:
    """Stage 1 fits the detector; stage 2 fits the ranking and matching heads on frozen features."""
    if not scenes:
        raise ValidationError("training needs at least one scene")
    rng = np.random.default_rng(cfg.seed)
    tlog = TrainLog()
    dnet = train_detector(scenes, cfg, rng, tlog)
    before = trunk_checksum(dnet)
    (rx, ry), (mx, my) = pair_dataset(scenes[:cfg.stage2_scenes], dnet, cfg)
    tlog.notes["rank_pairs"] = len(ry)
    tlog.notes["match_pairs"] = len(my)
    r_rows, m_rows = [], []
    rnet = train_head(rng, rx, ry, cfg, "rnet", r_rows)
    mnet = train_head(rng, mx, my, cfg, "mnet", m_rows)
    tlog.stage2 = [(k + 1, a, b) for k, (a, b) in enumerate(zip(r_rows, m_rows))]
    after = trunk_checksum(dnet)
    if before != after:
        raise TrainingError("stage 2 modified the detector trunk")
    tlog.notes["trunk_sha256"] = after
    return TrainedModel(dnet, rnet, mnet, cfg), tlog


# ---------------------------------------------------------------------------
# checkpoints


def save_model(path, model: TrainedModel) -> None:
    tensors = {}
    tensors.update({f"dnet.{k}": v for k, v in model.dnet.tensors().items()})
    tensors.update({f"rnet.{k}": v for k, v in model.rnet.tensors().items()})
    tensors.update({f"mnet.{k}": v for k, v in model.mnet.tensors().items()})
    meta = {"kind": "semline-model", "dnet": model.dnet.topology(), "rnet": model.rnet.topology(),
            "mnet": model.mnet.topology(), "config": model.config.as_dict()}
    save_checkpoint(path, tensors, meta)


def load_model(path) -> TrainedModel:
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "semline-model":
        raise ValidationError(f"{path} is not a model checkpoint")

    def part(prefix):
        return {k[len(prefix) + 1:]: v for k, v in tensors.items() if k.startswith(prefix + ".")}

    dnet = DNetParams.from_tensors(meta["dnet"], part("dnet"))
    return TrainedModel(dnet, SiameseHeadParams.from_tensors(part("rnet")),
                        SiameseHeadParams.from_tensors(part("mnet")), TrainConfig(**meta["config"]))
