"""Feature grids and the line-conditioned transforms that feed mirror attention.

A feature grid is a float64 array of shape ``(H, W, C)``; batched grids carry
one more leading axis. Pixel ``(i, j)`` of a grid sits at ``(j + 0.5, i + 0.5)``
in grid coordinates, so a grid covers the rectangle ``[0, W] x [0, H]``.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .errors import DimensionError, ValidationError
from .geometry import ImageSize, Line, canonical, nearest_boundary_point, signed_distance_grid
from .neural import as_real


def check_grid(x) -> np.ndarray:
    x = as_real(x)
    if x.ndim != 3 or min(x.shape) < 1:
        raise DimensionError(f"feature grid must have shape (H, W, C), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValidationError("feature grid contains non-finite values")
    return x


def pixel_centers(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    ys, xs = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    return xs, ys


def to_grid_line(line: Line, image_size: ImageSize, grid_h: int, grid_w: int) -> Line:
    """Rescale an image-space line onto an ``grid_h x grid_w`` grid.

    The line is canonicalized first and both endpoints are snapped back onto
    the grid boundary after scaling.
    """
    line = canonical(line, image_size)
    sx = grid_w / image_size.width
    sy = grid_h / image_size.height
    gsize = ImageSize(grid_w, grid_h)
    p = nearest_boundary_point((line.x_s * sx, line.y_s * sy), gsize)
    q = nearest_boundary_point((line.x_e * sx, line.y_e * sy), gsize)
    return Line.from_points(p, q)


def as_line_array(lines) -> np.ndarray:
    if isinstance(lines, Line):
        return lines.as_array()[None]
    if isinstance(lines, np.ndarray):
        return lines.reshape(-1, 4).astype(float)
    return np.array([ln.as_array() for ln in lines], dtype=float).reshape(-1, 4)


def line_distances(lines, h: int, w: int) -> np.ndarray:
    """Signed distance of every pixel center to each line: shape (N, H, W)."""
    xs, ys = pixel_centers(h, w)
    return signed_distance_grid(as_line_array(lines), xs, ys)


def gaussian_weights(lines, h: int, w: int, sigma: float) -> np.ndarray:
    """exp(-d^2 / 2 sigma^2) for every pixel and line, shape (N, H, W)."""
    if not sigma > 0:
        raise ValidationError(f"sigma must be positive, got {sigma}")
    d = line_distances(lines, h, w)
    return np.exp(-(d * d) / (2.0 * sigma * sigma))


def gaussian_weight(x, line: Line, sigma: float) -> np.ndarray:
    x = check_grid(x)
    wts = gaussian_weights(line, x.shape[0], x.shape[1], sigma)[0]
    return x * wts[..., None]


def reflection_operator(lines, h: int, w: int) -> sp.csr_matrix:
    """Sparse bilinear sampler that mirrors a batch of grids across their lines.

    For N lines the operator is block diagonal of size ``(N*H*W, N*H*W)`` and
    acts on grids flattened to ``(N*H*W, C)``. A reflected center outside the
    grid rectangle samples zero; inside, neighbours beyond the last pixel
    center contribute zero.
    """
    arr = as_line_array(lines)
    n = len(arr)
    xs, ys = pixel_centers(h, w)
    d = signed_distance_grid(arr, xs, ys)
    dx = arr[:, 2] - arr[:, 0]
    dy = arr[:, 3] - arr[:, 1]
    length = np.hypot(dx, dy)
    nx = (dy / length)[:, None, None]
    ny = (-dx / length)[:, None, None]
    rx = xs - 2.0 * d * nx
    ry = ys - 2.0 * d * ny
    inside = (rx >= 0) & (rx <= w) & (ry >= 0) & (ry <= h)

    u = rx - 0.5
    v = ry - 0.5
    j0 = np.floor(u)
    i0 = np.floor(v)
    fu = u - j0
    fv = v - i0
    j0 = j0.astype(np.int64)
    i0 = i0.astype(np.int64)

    rows_base = np.arange(n * h * w).reshape(n, h, w)
    offset = (np.arange(n) * h * w)[:, None, None]
    rows, cols, vals = [], [], []
    for di, dj, wt in ((0, 0, (1 - fu) * (1 - fv)), (0, 1, fu * (1 - fv)),
                       (1, 0, (1 - fu) * fv), (1, 1, fu * fv)):
        ii = i0 + di
        jj = j0 + dj
        keep = inside & (ii >= 0) & (ii < h) & (jj >= 0) & (jj < w) & (wt != 0)
        rows.append(rows_base[keep])
        cols.append((offset + ii * w + jj)[keep])
        vals.append(wt[keep])
    mat = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n * h * w, n * h * w),
    )
    mat.sum_duplicates()
    return mat


def apply_operator(op: sp.csr_matrix, y: np.ndarray) -> np.ndarray:
    """Apply a reflection operator to grids of shape (N, H, W, C)."""
    shape = y.shape
    return np.asarray(op @ y.reshape(-1, shape[-1])).reshape(shape)


def apply_adjoint(op: sp.csr_matrix, g: np.ndarray) -> np.ndarray:
    shape = g.shape
    return np.asarray(op.T @ g.reshape(-1, shape[-1])).reshape(shape)


def mirror_flip(y, line: Line) -> np.ndarray:
    """Mirror a grid across ``line`` (grid coordinates) with bilinear sampling."""
    y = check_grid(y)
    h, w, _ = y.shape
    op = reflection_operator(line, h, w)
    return apply_operator(op, y[None])[0]


def concat_channels(a, b) -> np.ndarray:
    a = as_real(a)
    b = as_real(b)
    if a.shape[:-1] != b.shape[:-1]:
        raise DimensionError(f"cannot concatenate grids of shapes {a.shape} and {b.shape}")
    return np.concatenate([a, b], axis=-1)
