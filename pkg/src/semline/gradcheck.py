"""Finite-difference verification of every hand-written backward pass.

Each ``check_*`` function builds a small random problem from ``seed`` and
returns the worst relative error reported by :func:`semline.neural.grad_check`.
"""

from __future__ import annotations

import time

import numpy as np

from .geometry import ImageSize, generate_candidates
from .model import (
    DNetConfig,
    DNetParams,
    SiameseHeadParams,
    attention_backward,
    attention_forward,
    dnet_backward,
    dnet_forward_batch,
    dnet_loss_batch,
    init_dnet,
    init_mirror_attention,
    init_siamese,
    poolable,
    siamese_backward,
    siamese_forward_batch,
)
from .neural import (
    ConvParams,
    DenseParams,
    avg_pool2,
    avg_pool2_backward,
    conv2d,
    conv2d_backward,
    cross_entropy,
    cross_entropy_logit_grad,
    dense,
    dense_backward,
    grad_check,
    init_conv,
    init_dense,
    sigmoid,
    sigmoid_backward,
    smooth_l1,
    smooth_l1_grad,
    softmax2,
    tanh_backward,
)


def check_affine(seed: int) -> float:
    rng = np.random.default_rng(seed)
    p = init_dense(rng, 4, 3)
    c = rng.normal(size=3)

    def fn(t):
        q = DenseParams(t["w"], t["b"])
        y = dense(q, t["v"])
        gv, gw, gb = dense_backward(q, t["v"], c)
        return (y * c).sum(), {"w": gw, "b": gb, "v": gv}

    return grad_check(fn, {"w": p.weight, "b": p.bias, "v": rng.normal(size=4)}, eps=1e-5, extended=True)


def check_sigmoid_dense(seed: int) -> float:
    rng = np.random.default_rng(seed)
    p = init_dense(rng, 5, 3)
    c = rng.normal(size=(2, 3))

    def fn(t):
        q = DenseParams(t["w"], t["b"])
        y = sigmoid(dense(q, t["v"]))
        gv, gw, gb = dense_backward(q, t["v"], sigmoid_backward(y, c))
        return (y * c).sum(), {"w": gw, "b": gb, "v": gv}

    return grad_check(fn, {"w": p.weight, "b": p.bias, "v": rng.normal(size=(2, 5))}, eps=1e-5)


def check_conv_tanh_pool(seed: int) -> float:
    rng = np.random.default_rng(seed)
    p = init_conv(rng, 3, 3, 2, 3)
    c = rng.normal(size=(2, 2, 3, 3))

    def fn(t):
        q = ConvParams(t["w"], t["b"])
        a = np.tanh(conv2d(q, t["x"]))
        y = avg_pool2(a)
        gx, gw, gb = conv2d_backward(q, t["x"], tanh_backward(a, avg_pool2_backward(c)))
        return (y * c).sum(), {"w": gw, "b": gb, "x": gx}

    return grad_check(fn, {"w": p.weight, "b": p.bias, "x": rng.normal(size=(2, 4, 6, 2))}, eps=1e-5)


def check_losses(seed: int) -> float:
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(3, 2))
    label = np.eye(2)[rng.integers(0, 2, 3)]
    t = rng.normal(size=(3, 4))
    d = rng.normal(scale=2, size=(3, 4))
    # stay clear of the |x| = 1 kink
    d = np.where(np.abs(np.abs(d - t) - 1) < 1e-2, d + 0.1, d)

    def fn(p):
        prob = softmax2(p["z"])
        loss = cross_entropy(prob, label).sum() + smooth_l1(p["d"], t).sum()
        return loss, {"z": cross_entropy_logit_grad(prob, label), "d": smooth_l1_grad(p["d"], t)}

    return grad_check(fn, {"z": z, "d": d}, eps=1e-5)


def check_siamese(seed: int, feature_dim: int = 6, hidden: int = 5) -> float:
    rng = np.random.default_rng(seed)
    head = init_siamese(rng, feature_dim, hidden, zero_last=False)
    fi, fj = rng.normal(size=(2, 3, feature_dim))
    label = np.eye(2)[rng.integers(0, 2, 3)]

    def fn(t):
        q = SiameseHeadParams.from_tensors(t)
        probs, cache = siamese_forward_batch(q, fi, fj)
        return cross_entropy(probs, label).sum(), siamese_backward(q, cache, cross_entropy_logit_grad(probs, label))

    return grad_check(fn, head.tensors(), eps=1e-5)


def check_attention(seed: int, h: int = 8, w: int = 8, channels: int = 3, n_lines: int = 2,
                    max_coords: int | None = 12) -> float:
    """Mirror attention block w.r.t. its three filters and the input grid."""
    rng = np.random.default_rng(seed)
    params = init_mirror_attention(rng, channels, sigma=2.0)
    cands = generate_candidates(ImageSize(w, h), 2)
    picks = rng.choice(len(cands), n_lines, replace=False)
    lines = np.array([cands[i].as_array() for i in picks])
    c = rng.normal(size=(n_lines, h, w, channels))
    tensors = params.tensors("att")
    tensors["x"] = rng.normal(size=(h, w, channels))

    def build(t):
        return type(params)(*(ConvParams(t[f"att.{f}.weight"], t[f"att.{f}.bias"]) for f in ("f0", "f1", "f2")),
                            sigma=params.sigma, flip=True)

    def fn(t):
        q = build(t)
        y_att, cache = attention_forward(t["x"], lines, q)
        g_x, grads = attention_backward(q, cache, c, "att")
        grads["x"] = g_x
        return (y_att * c).sum(), grads

    def loss(t):
        return (attention_forward(t["x"], lines, build(t))[0] * c).sum()

    return grad_check(fn, tensors, eps=1e-4, max_coords=max_coords, rng=rng, extended=True, loss_fn=loss)


def check_dnet(seed: int, size: int = 16, channels: int = 4, n_lines: int = 2,
               max_coords: int | None = 4, attention: str = "mirror", lam: float = 1.0) -> float:
    """Cls + Reg loss of the full detector w.r.t. every parameter tensor and the image.

    Up to ``max_coords`` coordinates per tensor are probed; the numeric side
    runs in extended precision.
    """
    rng = np.random.default_rng(seed)
    cfg = DNetConfig(in_channels=channels, attention=attention)
    params = init_dnet(rng, cfg, zero_heads=False)
    topo = params.topology()
    isize = ImageSize(size, size)
    cands = generate_candidates(isize, 2)
    cands = [c for c, ok in zip(cands, poolable(cands, isize, cfg)) if ok]
    lines = [cands[i] for i in rng.choice(len(cands), n_lines, replace=False)]
    labels = np.eye(2)[rng.integers(0, 2, n_lines)]
    labels[0] = (1.0, 0.0)
    targets = rng.normal(scale=2.0, size=(n_lines, 4))
    tensors = params.tensors()
    tensors["image"] = rng.uniform(0.0, 1.0, (size, size, channels))

    def fn(t):
        p = DNetParams.from_tensors(topo, t)
        probs, offsets, cache = dnet_forward_batch(t["image"], lines, p)
        cls_loss, reg_loss, g_logits, g_offsets = dnet_loss_batch(probs, offsets, labels, targets, lam)
        return cls_loss + reg_loss, dnet_backward(p, cache, g_logits, g_offsets)

    def loss(t):
        probs, offsets, _ = dnet_forward_batch(t["image"], lines, DNetParams.from_tensors(topo, t))
        cls_loss, reg_loss, _, _ = dnet_loss_batch(probs, offsets, labels, targets, lam)
        return cls_loss + reg_loss

    return grad_check(fn, tensors, eps=1e-4, max_coords=max_coords, rng=rng, extended=True, loss_fn=loss)


PRIMITIVE_CHECKS = {
    "affine": check_affine,
    "sigmoid_dense": check_sigmoid_dense,
    "conv_tanh_pool": check_conv_tanh_pool,
    "losses": check_losses,
    "siamese": check_siamese,
    "attention": check_attention,
}


def run_all(seeds, dnet: bool = True) -> dict:
    """Worst error per check over ``seeds`` plus the elapsed wall time."""
    start = time.perf_counter()
    worst = {}
    for name, check in PRIMITIVE_CHECKS.items():
        worst[name] = max(float(check(s)) for s in seeds)
    if dnet:
        worst["dnet"] = max(float(check_dnet(s)) for s in seeds)
    worst["seconds"] = time.perf_counter() - start
    return worst
