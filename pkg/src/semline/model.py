"""Detection and comparison networks.

The detector scores one candidate line at a time conceptually, but every
function here is batched over candidate lines of a single image: the backbone
runs once per image and each attended stage is expanded to ``(N, H, W, C)``.
Lines handed to the batched functions are in image coordinates unless the
name says ``grid``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import featgrid
from .errors import DegenerateRegionError, DimensionError, ValidationError
from .geometry import ImageSize, Line, canonical, check_line, nearest_boundary_point
from .neural import (
    ConvParams,
    DenseParams,
    as_real,
    avg_pool2,
    avg_pool2_backward,
    conv2d,
    conv2d_backward,
    cross_entropy,
    cross_entropy_logit_grad,
    dense,
    dense_backward,
    init_conv,
    init_dense,
    sigmoid,
    sigmoid_backward,
    smooth_l1,
    smooth_l1_grad,
    softmax2,
    softplus,
    softplus_backward,
    tanh_backward,
)

ATTENTION_MODES = ("mirror", "noflip", "none")


# ---------------------------------------------------------------------------
# mirror attention


@dataclass
class MirrorAttentionParams:
    f0: ConvParams
    f1: ConvParams
    f2: ConvParams
    sigma: float = 4.0
    flip: bool = True

    def __post_init__(self):
        if self.f0.out_depth != 1 or self.f1.weight.shape[2:] != (1, 1) or self.f2.weight.shape[2:] != (1, 1):
            raise DimensionError("attention filters must produce a single-channel mask")
        if not self.sigma > 0:
            raise ValidationError(f"sigma must be positive, got {self.sigma}")

    @property
    def channels(self) -> int:
        return self.f0.in_depth // 2 if self.flip else self.f0.in_depth

    def tensors(self, prefix: str) -> dict[str, np.ndarray]:
        out = {}
        for name in ("f0", "f1", "f2"):
            out.update(getattr(self, name).tensors(f"{prefix}.{name}"))
        return out


def init_mirror_attention(rng, channels: int, n: int = 3, sigma: float = 4.0,
                          flip: bool = True) -> MirrorAttentionParams:
    depth = 2 * channels if flip else channels
    return MirrorAttentionParams(
        f0=init_conv(rng, n, n, depth, 1),
        f1=init_conv(rng, 2 * n + 1, 2 * n + 1, 1, 1),
        f2=init_conv(rng, 2 * n + 1, 2 * n + 1, 1, 1),
        sigma=sigma,
        flip=flip,
    )


def attention_forward(x: np.ndarray, grid_lines: np.ndarray, params: MirrorAttentionParams):
    """Attend one grid ``(H, W, C)`` for each of N grid-space lines.

    Returns ``(y_att, cache)`` with ``y_att`` of shape ``(N, H, W, C)``.
    """
    h, w, c = x.shape
    if c != params.channels:
        raise DimensionError(f"grid has {c} channels, attention expects {params.channels}")
    wts = featgrid.gaussian_weights(grid_lines, h, w, params.sigma)
    y = x[None] * wts[..., None]
    op = None
    if params.flip:
        op = featgrid.reflection_operator(grid_lines, h, w)
        z = featgrid.concat_channels(y, featgrid.apply_operator(op, y))
    else:
        z = y
    a0 = conv2d(params.f0, z)
    a1 = conv2d(params.f1, a0)
    a2 = conv2d(params.f2, a1)
    a = sigmoid(a2)
    y_att = (1.0 + a) * y
    cache = dict(x=x, wts=wts, y=y, op=op, z=z, a0=a0, a1=a1, a=a)
    return y_att, cache


def attention_backward(params: MirrorAttentionParams, cache, g_att: np.ndarray, prefix: str):
    """Returns ``(grad_x, grads)`` where ``grad_x`` sums over the N lines."""
    y, a = cache["y"], cache["a"]
    c = y.shape[-1]
    g_y = g_att * (1.0 + a)
    g_a = (g_att * y).sum(axis=-1, keepdims=True)
    g_a2 = sigmoid_backward(a, g_a)
    grads = {}
    g_a1, gw, gb = conv2d_backward(params.f2, cache["a1"], g_a2)
    grads[f"{prefix}.f2.weight"], grads[f"{prefix}.f2.bias"] = gw, gb
    g_a0, gw, gb = conv2d_backward(params.f1, cache["a0"], g_a1)
    grads[f"{prefix}.f1.weight"], grads[f"{prefix}.f1.bias"] = gw, gb
    g_z, gw, gb = conv2d_backward(params.f0, cache["z"], g_a0)
    grads[f"{prefix}.f0.weight"], grads[f"{prefix}.f0.bias"] = gw, gb
    if params.flip:
        g_y = g_y + g_z[..., :c] + featgrid.apply_adjoint(cache["op"], g_z[..., c:])
    else:
        g_y = g_y + g_z
    g_x = (g_y * cache["wts"][..., None]).sum(axis=0)
    return g_x, grads


def mirror_attention(x, line: Line, params: MirrorAttentionParams) -> np.ndarray:
    """Attended grid for a single grid-space line."""
    x = featgrid.check_grid(x)
    featgrid_line = featgrid.as_line_array(line)
    y_att, _ = attention_forward(x, featgrid_line, params)
    return y_att[0]


# ---------------------------------------------------------------------------
# region pooling


def region_masks(grid_lines: np.ndarray, h: int, w: int, threshold: float):
    """Normalized strip masks ``(N, H, W)`` on the first and second side of each line.

    Lines are canonicalized on the grid before the sides are assigned, so the
    first strip lies on the side of the first region of ``split_regions``.
    """
    if not threshold > 0:
        raise ValidationError(f"pooling threshold must be positive, got {threshold}")
    gsize = ImageSize(w, h)
    canon = np.array([canonical(Line.from_array(r), gsize).as_array() for r in grid_lines]).reshape(-1, 4)
    d = featgrid.line_distances(canon, h, w)
    u = (d < 0) & (d >= -threshold)
    v = (d > 0) & (d <= threshold)
    nu = u.sum(axis=(1, 2))
    nv = v.sum(axis=(1, 2))
    return u, v, nu, nv


def _pool_weights(grid_lines, h, w, threshold):
    u, v, nu, nv = region_masks(grid_lines, h, w, threshold)
    bad = np.flatnonzero((nu == 0) | (nv == 0))
    if bad.size:
        raise DegenerateRegionError(f"empty pooling region for line(s) {bad.tolist()}")
    return u / nu[:, None, None], v / nv[:, None, None]


def region_pool(y_att, line: Line, threshold: float) -> np.ndarray:
    """Per-channel means over the two strips flanking a grid-space line, ``[u; v]``."""
    y_att = featgrid.check_grid(y_att)
    mu, mv = _pool_weights(featgrid.as_line_array(line), y_att.shape[0], y_att.shape[1], threshold)
    return np.concatenate([np.einsum("hw,hwc->c", mu[0], y_att), np.einsum("hw,hwc->c", mv[0], y_att)])


# ---------------------------------------------------------------------------
# D-Net


@dataclass
class DNetConfig:
    in_channels: int = 3
    channels: tuple = (8, 16, 32, 32)
    downsample: tuple = (True, True, False, False)
    attended: tuple = (2, 3)
    n: int = 3
    sigma: float = 4.0
    pool_threshold: float = 3.0
    fc_dim: int = 128
    attention: str = "mirror"
    reg_scale: float = 4.0
    input_offset: float = 0.5
    input_scale: float = 1.0
    fc1_gain: float = 1.0

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.downsample = tuple(bool(d) for d in self.downsample)
        self.attended = tuple(int(a) for a in self.attended)
        if self.attention not in ATTENTION_MODES:
            raise ValidationError(f"attention mode must be one of {ATTENTION_MODES}, got {self.attention!r}")
        if len(self.channels) != len(self.downsample):
            raise ValidationError("channels and downsample schedules differ in length")
        if self.n % 2 == 0:
            raise ValidationError(f"attention kernel size n must be odd, got {self.n}")

    @property
    def stride(self) -> int:
        return 2 ** sum(self.downsample)

    def stage_stride(self, k: int) -> int:
        return 2 ** sum(self.downsample[:k])

    @property
    def pooled_dim(self) -> int:
        return sum(2 * self.channels[k] for k in self.attended)


@dataclass
class DNetParams:
    config: DNetConfig
    backbone: list
    attention: list = field(default_factory=list)
    fc1: DenseParams = None
    cls: DenseParams = None
    reg: DenseParams = None

    def tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for k, conv in enumerate(self.backbone):
            out.update(conv.tensors(f"backbone.{k}"))
        for k, att in enumerate(self.attention):
            out.update(att.tensors(f"attention.{k}"))
        out.update(self.fc1.tensors("fc1"))
        out.update(self.cls.tensors("cls"))
        out.update(self.reg.tensors("reg"))
        return out

    def trunk_tensors(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors().items() if not k.startswith(("cls.", "reg."))}

    def topology(self) -> dict:
        return {"kind": "dnet", "config": asdict(self.config)}

    @classmethod
    def from_tensors(cls, topology: dict, tensors: dict) -> "DNetParams":
        config = DNetConfig(**topology["config"])
        backbone = [ConvParams(tensors[f"backbone.{k}.weight"], tensors[f"backbone.{k}.bias"])
                    for k in range(len(config.channels))]
        attention = []
        if config.attention != "none":
            for k in range(len(config.attended)):
                p = f"attention.{k}"
                attention.append(MirrorAttentionParams(
                    *(ConvParams(tensors[f"{p}.{f}.weight"], tensors[f"{p}.{f}.bias"]) for f in ("f0", "f1", "f2")),
                    sigma=config.sigma, flip=config.attention == "mirror"))
        return cls(config, backbone, attention,
                   DenseParams(tensors["fc1.weight"], tensors["fc1.bias"]),
                   DenseParams(tensors["cls.weight"], tensors["cls.bias"]),
                   DenseParams(tensors["reg.weight"], tensors["reg.bias"]))

    def copy(self) -> "DNetParams":
        return DNetParams.from_tensors(self.topology(), {k: v.copy() for k, v in self.tensors().items()})


def init_dnet(rng: np.random.Generator, config: DNetConfig | None = None, zero_heads: bool = True) -> DNetParams:
    config = config or DNetConfig()
    backbone = []
    cin = config.in_channels
    for cout in config.channels:
        backbone.append(init_conv(rng, 3, 3, cin, cout))
        cin = cout
    attention = []
    if config.attention != "none":
        for k in config.attended:
            attention.append(init_mirror_attention(rng, config.channels[k], config.n, config.sigma,
                                                   flip=config.attention == "mirror"))
    fc1 = init_dense(rng, config.pooled_dim, config.fc_dim)
    # a wide start puts softplus past its linear range, so FC1 can read contrast of either sign
    fc1 = DenseParams(config.fc1_gain * fc1.weight, config.fc1_gain * fc1.bias)
    cls = init_dense(rng, config.fc_dim, 2, zero=zero_heads)
    reg = init_dense(rng, config.fc_dim, 4, zero=zero_heads)
    return DNetParams(config, backbone, attention, fc1, cls, reg)


def backbone_forward(params: DNetParams, image: np.ndarray):
    cfg = params.config
    h = cfg.input_scale * (as_real(image) - cfg.input_offset)
    stages, acts, inputs = [], [], []
    for conv, down in zip(params.backbone, cfg.downsample):
        inputs.append(h)
        a = np.tanh(conv2d(conv, h))
        acts.append(a)
        h = avg_pool2(a) if down else a
        stages.append(h)
    return stages, dict(inputs=inputs, acts=acts)


def backbone_backward(params: DNetParams, cache, g_stages: list):
    """``g_stages[k]`` is the gradient at stage ``k`` output (or None)."""
    cfg = params.config
    grads = {}
    g = None
    for k in reversed(range(len(params.backbone))):
        gs = g_stages[k]
        if gs is not None:
            g = gs if g is None else g + gs
        if g is None:
            grads[f"backbone.{k}.weight"] = np.zeros_like(params.backbone[k].weight)
            grads[f"backbone.{k}.bias"] = np.zeros_like(params.backbone[k].bias)
            continue
        if cfg.downsample[k]:
            g = avg_pool2_backward(g)
        g = tanh_backward(cache["acts"][k], g)
        g, gw, gb = conv2d_backward(params.backbone[k], cache["inputs"][k], g)
        grads[f"backbone.{k}.weight"], grads[f"backbone.{k}.bias"] = gw, gb
    if g is not None:
        g = cfg.input_scale * g
    return g, grads


def stage_lines(lines, image_size: ImageSize, grid_h: int, grid_w: int) -> np.ndarray:
    return np.array([featgrid.to_grid_line(ln, image_size, grid_h, grid_w).as_array()
                     for ln in lines]).reshape(-1, 4)


def _as_lines(lines) -> list[Line]:
    if isinstance(lines, Line):
        return [lines]
    if isinstance(lines, np.ndarray):
        return [Line.from_array(r) for r in lines.reshape(-1, 4)]
    return list(lines)


def trunk_forward(params: DNetParams, image: np.ndarray, lines, stages=None):
    """FC1 features ``(N, fc_dim)`` for each line; reuses ``stages`` when given."""
    image = featgrid.check_grid(image)
    cfg = params.config
    size = ImageSize(image.shape[1], image.shape[0])
    lines = [canonical(ln, size) for ln in _as_lines(lines)]
    bb_cache = None
    if stages is None:
        stages, bb_cache = backbone_forward(params, image)
    pooled, att_caches, pool_w, grid_lines = [], [], [], []
    for idx, k in enumerate(cfg.attended):
        x = stages[k]
        gl = stage_lines(lines, size, x.shape[0], x.shape[1])
        mu, mv = _pool_weights(gl, x.shape[0], x.shape[1], cfg.pool_threshold)
        if cfg.attention == "none":
            y_att, att_cache = np.broadcast_to(x, (len(lines),) + x.shape), None
        else:
            y_att, att_cache = attention_forward(x, gl, params.attention[idx])
        pooled.append(np.einsum("nhw,nhwc->nc", mu, y_att))
        pooled.append(np.einsum("nhw,nhwc->nc", mv, y_att))
        att_caches.append(att_cache)
        pool_w.append((mu, mv))
        grid_lines.append(gl)
    z = np.concatenate(pooled, axis=-1)
    pre = dense(params.fc1, z)
    h1 = softplus(pre)
    cache = dict(image=image, stages=stages, bb=bb_cache, att=att_caches, pool=pool_w, z=z, pre=pre, h1=h1,
                 lines=lines, grid_lines=grid_lines)
    return h1, cache


def trunk_backward(params: DNetParams, cache, g_h1: np.ndarray, through_backbone: bool = True):
    cfg = params.config
    grads = {}
    g_pre = softplus_backward(cache["pre"], g_h1)
    g_z, grads["fc1.weight"], grads["fc1.bias"] = dense_backward(params.fc1, cache["z"], g_pre)
    g_stages = [None] * len(params.backbone)
    col = 0
    for idx, k in enumerate(cfg.attended):
        c = cfg.channels[k]
        g_u, g_v = g_z[:, col:col + c], g_z[:, col + c:col + 2 * c]
        col += 2 * c
        mu, mv = cache["pool"][idx]
        g_att = mu[..., None] * g_u[:, None, None, :] + mv[..., None] * g_v[:, None, None, :]
        if cfg.attention == "none":
            g_x = g_att.sum(axis=0)
        else:
            g_x, g = attention_backward(params.attention[idx], cache["att"][idx], g_att, f"attention.{idx}")
            grads.update(g)
        g_stages[k] = g_x if g_stages[k] is None else g_stages[k] + g_x
    if through_backbone:
        g_img, g = backbone_backward(params, cache["bb"], g_stages)
        grads.update(g)
        grads["image"] = g_img
    else:
        grads["stages"] = g_stages
    return grads


def heads_forward(params: DNetParams, h1: np.ndarray):
    logits = dense(params.cls, h1)
    probs = softmax2(logits)
    offsets = params.config.reg_scale * dense(params.reg, h1)
    return probs, offsets


def dnet_forward_batch(image: np.ndarray, lines, params: DNetParams, stages=None):
    """Returns ``(probs (N, 2), offsets (N, 4), cache)``."""
    h1, cache = trunk_forward(params, image, lines, stages)
    probs, offsets = heads_forward(params, h1)
    cache["probs"] = probs
    return probs, offsets, cache


def dnet_backward(params: DNetParams, cache, g_logits: np.ndarray, g_offsets: np.ndarray,
                  through_backbone: bool = True) -> dict[str, np.ndarray]:
    h1 = cache["h1"]
    grads = {}
    g_h_cls, grads["cls.weight"], grads["cls.bias"] = dense_backward(params.cls, h1, g_logits)
    g_reg = params.config.reg_scale * g_offsets
    g_h_reg, grads["reg.weight"], grads["reg.bias"] = dense_backward(params.reg, h1, g_reg)
    grads.update(trunk_backward(params, cache, g_h_cls + g_h_reg, through_backbone))
    return grads


def dnet_forward(image, line: Line, params: DNetParams):
    """``(p, offset)`` for one candidate line; ``p[0]`` is the semantic probability."""
    image = featgrid.check_grid(image)
    check_line(line, ImageSize(image.shape[1], image.shape[0]))
    probs, offsets, _ = dnet_forward_batch(image, [line], params)
    return probs[0], offsets[0]


def line_feature(image, line: Line, params: DNetParams) -> np.ndarray:
    """FC1 activation: the shared trunk output used by the comparison heads."""
    image = featgrid.check_grid(image)
    check_line(line, ImageSize(image.shape[1], image.shape[0]))
    h1, _ = trunk_forward(params, image, [line])
    return h1[0]


def poolable(lines, image_size: ImageSize, config: DNetConfig) -> np.ndarray:
    """Boolean mask of lines whose pooling strips are nonempty on every attended stage."""
    lines = [canonical(ln, image_size) for ln in _as_lines(lines)]
    ok = np.ones(len(lines), dtype=bool)
    for k in config.attended:
        s = config.stage_stride(k + 1)
        gh, gw = image_size.height // s, image_size.width // s
        gl = stage_lines(lines, image_size, gh, gw)
        _, _, nu, nv = region_masks(gl, gh, gw, config.pool_threshold)
        ok &= (nu > 0) & (nv > 0)
    return ok


# ---------------------------------------------------------------------------
# regression and loss


def regress_line(line: Line, offset, size: ImageSize) -> Line:
    """Shift the canonical endpoints by ``offset`` and snap them back onto the boundary."""
    line = canonical(line, size)
    off = np.asarray(offset, dtype=float).reshape(4)
    p = nearest_boundary_point((line.x_s + off[0], line.y_s + off[1]), size)
    q = nearest_boundary_point((line.x_e + off[2], line.y_e + off[3]), size)
    out = Line.from_points(p, q)
    check_line(out, size)
    return out


def dnet_loss(pred, label, lam: float = 1.0) -> float:
    """Classification cross-entropy plus ``lam`` times smooth L1 on positives only."""
    (p, offset), (p_bar, offset_bar) = pred, label
    p_bar = np.asarray(p_bar, dtype=float)
    loss = float(cross_entropy(p, p_bar))
    if p_bar[0] == 1.0:
        loss += lam * float(smooth_l1(offset, offset_bar))
    return loss


def dnet_loss_batch(probs, offsets, labels, targets, lam: float = 1.0):
    """Summed loss over a batch and its gradients w.r.t. logits and offsets.

    Returns ``(cls_loss, reg_loss, g_logits, g_offsets)`` with ``reg_loss``
    already scaled by ``lam``.
    """
    labels = as_real(labels)
    pos = labels[:, 0] == 1.0
    cls_loss = cross_entropy(probs, labels).sum()
    reg_loss = lam * smooth_l1(offsets, targets)[pos].sum()
    g_logits = cross_entropy_logit_grad(probs, labels)
    g_offsets = lam * smooth_l1_grad(offsets, targets) * pos[:, None]
    return cls_loss, reg_loss, g_logits, g_offsets


# ---------------------------------------------------------------------------
# Siamese comparison heads


@dataclass
class SiameseHeadParams:
    l1: DenseParams
    l2: DenseParams

    def __post_init__(self):
        if self.l1.in_dim % 2 or self.l2.out_dim != 2 or self.l2.in_dim != self.l1.out_dim:
            raise DimensionError("Siamese head must map 2*D features to 2 logits")

    @property
    def feature_dim(self) -> int:
        return self.l1.in_dim // 2

    def tensors(self, prefix: str = "") -> dict[str, np.ndarray]:
        pre = f"{prefix}." if prefix else ""
        return {**self.l1.tensors(f"{pre}l1"), **self.l2.tensors(f"{pre}l2")}

    def topology(self) -> dict:
        return {"kind": "siamese", "feature_dim": self.feature_dim, "hidden": self.l1.out_dim}

    @classmethod
    def from_tensors(cls, tensors: dict, prefix: str = "") -> "SiameseHeadParams":
        pre = f"{prefix}." if prefix else ""
        return cls(DenseParams(tensors[f"{pre}l1.weight"], tensors[f"{pre}l1.bias"]),
                   DenseParams(tensors[f"{pre}l2.weight"], tensors[f"{pre}l2.bias"]))

    def copy(self) -> "SiameseHeadParams":
        return SiameseHeadParams.from_tensors({k: v.copy() for k, v in self.tensors().items()})


def init_siamese(rng, feature_dim: int, hidden: int = 64, zero_last: bool = True) -> SiameseHeadParams:
    return SiameseHeadParams(init_dense(rng, 2 * feature_dim, hidden),
                             init_dense(rng, hidden, 2, zero=zero_last))


def siamese_forward_batch(params: SiameseHeadParams, fi: np.ndarray, fj: np.ndarray):
    fi = as_real(fi)
    fj = as_real(fj)
    if fi.shape != fj.shape or fi.shape[-1] != params.feature_dim:
        raise DimensionError(
            f"feature shapes {fi.shape} and {fj.shape} do not fit a head of dim {params.feature_dim}")
    x = np.concatenate([fi, fj], axis=-1)
    hid = np.tanh(dense(params.l1, x))
    probs = softmax2(dense(params.l2, hid))
    return probs, dict(x=x, hid=hid, probs=probs)


def siamese_backward(params: SiameseHeadParams, cache, g_logits: np.ndarray) -> dict[str, np.ndarray]:
    grads = {}
    g_hid, grads["l2.weight"], grads["l2.bias"] = dense_backward(params.l2, cache["hid"], g_logits)
    g_pre = tanh_backward(cache["hid"], g_hid)
    _, grads["l1.weight"], grads["l1.bias"] = dense_backward(params.l1, cache["x"], g_pre)
    return grads


def rnet_forward(f_i, f_j, params: SiameseHeadParams) -> np.ndarray:
    """``(p, q)``: probability that line i is more / less reliable than line j."""
    return siamese_forward_batch(params, f_i, f_j)[0]


def mnet_forward(f_i, f_j, params: SiameseHeadParams) -> np.ndarray:
    """``(p, q)``: probability that the two lines are / are not semantically identical."""
    return siamese_forward_batch(params, f_i, f_j)[0]
