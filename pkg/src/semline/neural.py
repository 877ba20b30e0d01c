"""Differentiable building blocks with explicit backward passes.

Everything runs in float64. Grids are ``(..., H, W, C)`` arrays; dense layers
act on the last axis. Each ``*_backward`` takes the forward inputs and the
upstream gradient and returns gradients for the input and the parameters.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .errors import DimensionError, NumericError, ParseError, ValidationError

LOG_EPS = 1e-12


def as_real(x) -> np.ndarray:
    """Array view of ``x`` that keeps float64/extended dtypes and promotes the rest to float64."""
    x = np.asarray(x)
    if x.dtype not in (np.float64, np.longdouble):
        x = x.astype(float)
    return x


@dataclass
class ConvParams:
    weight: np.ndarray  # (kh, kw, c_in, c_out)
    bias: np.ndarray  # (c_out,)

    def __post_init__(self):
        self.weight = as_real(self.weight)
        self.bias = as_real(self.bias)
        if self.weight.ndim != 4:
            raise DimensionError(f"conv weight must be 4-D, got shape {self.weight.shape}")
        kh, kw, _, cout = self.weight.shape
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValidationError(f"conv kernel must have odd size, got {kh}x{kw}")
        if self.bias.shape != (cout,):
            raise DimensionError(f"conv bias must have shape ({cout},), got {self.bias.shape}")

    @property
    def in_depth(self) -> int:
        return self.weight.shape[2]

    @property
    def out_depth(self) -> int:
        return self.weight.shape[3]

    def tensors(self, prefix: str) -> dict[str, np.ndarray]:
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}


@dataclass
class DenseParams:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)

    def __post_init__(self):
        self.weight = as_real(self.weight)
        self.bias = as_real(self.bias)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise DimensionError(
                f"dense shapes do not agree: weight {self.weight.shape}, bias {self.bias.shape}")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def tensors(self, prefix: str) -> dict[str, np.ndarray]:
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}


def init_conv(rng: np.random.Generator, kh: int, kw: int, cin: int, cout: int) -> ConvParams:
    bound = math.sqrt(3.0 / (kh * kw * cin))
    return ConvParams(rng.uniform(-bound, bound, (kh, kw, cin, cout)),
                      rng.uniform(-bound, bound, cout))


def init_dense(rng: np.random.Generator, n_in: int, n_out: int, zero: bool = False) -> DenseParams:
    if zero:
        return DenseParams(np.zeros((n_out, n_in)), np.zeros(n_out))
    bound = math.sqrt(3.0 / n_in)
    return DenseParams(rng.uniform(-bound, bound, (n_out, n_in)), rng.uniform(-bound, bound, n_out))


# ---------------------------------------------------------------------------
# convolution


def _tap_ranges(d: int, n: int) -> tuple[slice, slice]:
    """Output and source slices along one axis for a tap at offset ``d``."""
    return slice(max(0, -d), n - max(0, d)), slice(max(0, d), n + min(0, d))


def conv2d(params: ConvParams, x: np.ndarray) -> np.ndarray:
    """Same-padded, stride-1 cross-correlation over the last three axes.

    Every tap's channel projection comes from one matmul; the taps are then
    shifted into place, which is cheaper than padding deep inputs.
    """
    x = as_real(x)
    if x.shape[-1] != params.in_depth:
        raise DimensionError(f"input depth {x.shape[-1]} != kernel depth {params.in_depth}")
    kh, kw, cin, cout = params.weight.shape
    h, w = x.shape[-3], x.shape[-2]
    if cin == cout == 1:
        return _conv_single(params, x)
    wmat = params.weight.transpose(2, 0, 1, 3).reshape(cin, kh * kw * cout)
    z = (x @ wmat).reshape(x.shape[:-1] + (kh, kw, cout))
    out = np.zeros(x.shape[:-1] + (cout,), dtype=z.dtype)
    out += params.bias
    for a in range(kh):
        oi, si = _tap_ranges(a - kh // 2, h)
        for b in range(kw):
            oj, sj = _tap_ranges(b - kw // 2, w)
            out[..., oi, oj, :] += z[..., si, sj, a, b, :]
    return out


def _conv_single(params: ConvParams, x: np.ndarray) -> np.ndarray:
    kh, kw = params.weight.shape[:2]
    h, w = x.shape[-3], x.shape[-2]
    out = np.zeros(x.shape, dtype=np.result_type(x, params.weight))
    out += params.bias
    for a in range(kh):
        oi, si = _tap_ranges(a - kh // 2, h)
        for b in range(kw):
            oj, sj = _tap_ranges(b - kw // 2, w)
            out[..., oi, oj, :] += params.weight[a, b, 0, 0] * x[..., si, sj, :]
    return out


def _conv_single_backward(params: ConvParams, x: np.ndarray, grad_y: np.ndarray):
    kh, kw = params.weight.shape[:2]
    h, w = x.shape[-3], x.shape[-2]
    dtype = np.result_type(x, grad_y, params.weight)
    gx = np.zeros(x.shape, dtype=dtype)
    gw = np.zeros(params.weight.shape, dtype=dtype)
    for a in range(kh):
        oi, si = _tap_ranges(a - kh // 2, h)
        for b in range(kw):
            oj, sj = _tap_ranges(b - kw // 2, w)
            g = grad_y[..., oi, oj, :]
            gx[..., si, sj, :] += params.weight[a, b, 0, 0] * g
            gw[a, b, 0, 0] = np.vdot(x[..., si, sj, :], g)
    return gx, gw, grad_y.reshape(-1, 1).sum(axis=0)


def conv2d_backward(params: ConvParams, x: np.ndarray, grad_y: np.ndarray):
    """Returns ``(grad_x, grad_weight, grad_bias)``."""
    kh, kw, cin, cout = params.weight.shape
    h, w = x.shape[-3], x.shape[-2]
    if cin == cout == 1:
        return _conv_single_backward(params, x, grad_y)
    dtype = np.result_type(x, grad_y, params.weight)
    gz = np.zeros(grad_y.shape[:-1] + (kh, kw, cout), dtype=dtype)
    for a in range(kh):
        oi, si = _tap_ranges(a - kh // 2, h)
        for b in range(kw):
            oj, sj = _tap_ranges(b - kw // 2, w)
            gz[..., si, sj, a, b, :] = grad_y[..., oi, oj, :]
    gz = gz.reshape(grad_y.shape[:-1] + (kh * kw * cout,))
    wmat = params.weight.transpose(2, 0, 1, 3).reshape(cin, kh * kw * cout)
    gx = gz @ wmat.T
    gw = (x.reshape(-1, cin).T @ gz.reshape(-1, kh * kw * cout)).reshape(cin, kh, kw, cout).transpose(1, 2, 0, 3)
    gb = grad_y.reshape(-1, cout).sum(axis=0)
    return gx, gw, gb


def avg_pool2(x: np.ndarray) -> np.ndarray:
    """2x2 average pooling with stride 2 (H and W must be even)."""
    h, w = x.shape[-3], x.shape[-2]
    if h % 2 or w % 2:
        raise DimensionError(f"cannot 2x-pool a {h}x{w} grid")
    r = x.reshape(x.shape[:-3] + (h // 2, 2, w // 2, 2, x.shape[-1]))
    return r.mean(axis=(-4, -2))


def avg_pool2_backward(grad_y: np.ndarray) -> np.ndarray:
    g = np.repeat(np.repeat(grad_y, 2, axis=-3), 2, axis=-2)
    return 0.25 * g


# ---------------------------------------------------------------------------
# dense layers and activations


def dense(params: DenseParams, v: np.ndarray) -> np.ndarray:
    v = as_real(v)
    if v.shape[-1] != params.in_dim:
        raise DimensionError(f"input length {v.shape[-1]} != layer input dim {params.in_dim}")
    return v @ params.weight.T + params.bias


def dense_backward(params: DenseParams, v: np.ndarray, grad_y: np.ndarray):
    """Returns ``(grad_v, grad_weight, grad_bias)``."""
    g2 = grad_y.reshape(-1, grad_y.shape[-1])
    v2 = v.reshape(-1, v.shape[-1])
    return grad_y @ params.weight, g2.T @ v2, g2.sum(axis=0)


def sigmoid(x):
    x = as_real(x)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid_backward(y: np.ndarray, grad_y: np.ndarray) -> np.ndarray:
    return grad_y * y * (1.0 - y)


def tanh_backward(y: np.ndarray, grad_y: np.ndarray) -> np.ndarray:
    return grad_y * (1.0 - y * y)


def softplus(x):
    """``log(1 + e^x)``: a smooth rectifier."""
    return np.logaddexp(0.0, x)


def softplus_backward(x: np.ndarray, grad_y: np.ndarray) -> np.ndarray:
    """Gradient through ``softplus`` given its input ``x``."""
    return grad_y * sigmoid(x)


def softmax2(logits) -> np.ndarray:
    """Softmax over a trailing axis of length 2."""
    z = as_real(logits)
    if z.shape[-1] != 2:
        raise DimensionError(f"softmax2 expects 2 logits, got {z.shape[-1]}")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# losses


def cross_entropy(p, label) -> np.ndarray:
    p = as_real(p)
    label = as_real(label)
    return -(label * np.log(p + LOG_EPS)).sum(axis=-1)


def cross_entropy_logit_grad(p: np.ndarray, label: np.ndarray) -> np.ndarray:
    """d cross_entropy(softmax(z), label) / dz, exact including the log epsilon."""
    gp = -label / (p + LOG_EPS)
    return p * (gp - (p * gp).sum(axis=-1, keepdims=True))


def _huber(x):
    ax = np.abs(x)
    return np.where(ax < 1.0, 0.5 * x * x, ax - 0.5)


def smooth_l1(delta, target) -> np.ndarray:
    """Unit-transition smooth L1, summed over the last axis."""
    x = as_real(delta) - as_real(target)
    return _huber(x).sum(axis=-1)


def smooth_l1_grad(delta, target) -> np.ndarray:
    x = as_real(delta) - as_real(target)
    return np.where(np.abs(x) < 1.0, x, np.sign(x))


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(
    fn: Callable[[Mapping[str, np.ndarray]], tuple[float, Mapping[str, np.ndarray]]],
    params: Mapping[str, np.ndarray],
    eps: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
    extended: bool = False,
    loss_fn: Callable[[Mapping[str, np.ndarray]], float] | None = None,
) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``fn(params)`` returns ``(loss, grads)`` with ``grads`` keyed like
    ``params``, and must read its parameters from the mapping it is given.
    The error per coordinate is ``|ga - gn| / max(1e-8, |ga| + |gn|)``.

    With ``max_coords`` set, at most that many coordinates per tensor are
    probed (chosen by ``rng``). With ``extended`` the finite differences are
    evaluated on ``np.longdouble`` copies of ``params``, which keeps rounding
    noise far below gradients of order 1e-8. ``loss_fn``, when given, computes
    the loss alone and is used for the perturbed evaluations.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValidationError(f"eps must lie in [1e-6, 1e-3], got {eps}")
    _, grads = fn(params)
    if loss_fn is None:
        def loss_fn(p):
            return fn(p)[0]
    rng = rng or np.random.default_rng(0)
    probe_dtype = np.longdouble if extended else np.float64
    probe = {k: np.array(v, dtype=probe_dtype) for k, v in params.items()}
    step = probe_dtype(eps)
    worst = 0.0
    for name, arr in probe.items():
        ga = np.asarray(grads[name], dtype=float)
        if ga.shape != arr.shape:
            raise DimensionError(f"gradient for {name} has shape {ga.shape}, expected {arr.shape}")
        if not np.all(np.isfinite(ga)):
            raise NumericError(f"analytic gradient for {name} is not finite")
        flat = arr.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = np.sort(rng.choice(flat.size, max_coords, replace=False))
        for k in idx:
            orig = flat[k]
            flat[k] = orig + step
            lp = loss_fn(probe)
            flat[k] = orig - step
            lm = loss_fn(probe)
            flat[k] = orig
            gn = float((lp - lm) / (2 * step))
            if not math.isfinite(gn):
                raise NumericError(f"numeric gradient for {name}[{k}] is not finite")
            g = ga.reshape(-1)[k]
            worst = max(worst, abs(g - gn) / max(1e-8, abs(g) + abs(gn)))
    return worst


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"SEMLINE-CKPT\n"
CKPT_VERSION = 1


def save_checkpoint(path, tensors: Mapping[str, np.ndarray], meta: Mapping | None = None) -> None:
    """Write ``tensors`` and JSON ``meta`` in the versioned checkpoint format.

    Layout: magic line, 8-byte little-endian header length, UTF-8 JSON header
    ``{"version", "meta", "tensors": [{"name", "shape", "offset"}]}``, then the
    tensors as contiguous little-endian float64 in header order.
    """
    entries = []
    blobs = []
    offset = 0
    for name in tensors:
        arr = np.asarray(tensors[name], dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"version": CKPT_VERSION, "meta": dict(meta or {}), "tensors": entries},
                        sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(CKPT_MAGIC):
        raise ParseError("not a semline checkpoint", path=path)
    pos = len(CKPT_MAGIC)
    (hlen,) = struct.unpack("<Q", data[pos:pos + 8])
    pos += 8
    try:
        header = json.loads(data[pos:pos + hlen])
    except json.JSONDecodeError as exc:
        raise ParseError(f"corrupt checkpoint header: {exc}", path=path) from None
    if header.get("version") != CKPT_VERSION:
        raise ParseError(f"unsupported checkpoint version {header.get('version')}", path=path)
    body = io.BytesIO(data[pos + hlen:]).getbuffer()
    tensors = {}
    for ent in header["tensors"]:
        count = int(np.prod(ent["shape"], dtype=np.int64))
        if ent["offset"] < 0 or ent["offset"] + 8 * count > len(body):
            raise ParseError(f"checkpoint tensor {ent['name']} runs past the end of the file", path=path)
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=ent["offset"])
        tensors[ent["name"]] = arr.reshape(tuple(ent["shape"])).astype(float)
    return tensors, header["meta"]
