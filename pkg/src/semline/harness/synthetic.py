"""Seeded synthetic scenes with known semantic lines.

Heterogeneous scenes are piecewise constant: every gt line adds a per-channel
step of size ``a_k`` (random sign) on its positive side. A lone line gets
``a = contrast``; with several lines the primary gets the largest step so it
is the dominant boundary. Symmetric scenes mirror a smooth texture across a
single line.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError
from ..featgrid import pixel_centers
from ..geometry import (
    ImageSize,
    Line,
    canonical,
    is_valid_line,
    miou_matrix,
    point_at_arc,
    polygon_area,
    signed_distance_grid,
    split_regions,
)

MIN_REGION_FRACTION = 0.15
MAX_GT_OVERLAP = 0.7
PRIMARY_GAIN = 1.6
SECONDARY_GAIN = (1.0, 1.2)
MAX_TRIES = 10_000


@dataclass
class SyntheticScene:
    image: np.ndarray  # (H, W, 3) in [0, 1]
    lines: list        # gt lines, primary first
    primary: int
    mode: str

    @property
    def size(self) -> ImageSize:
        return ImageSize(self.image.shape[1], self.image.shape[0])

    @property
    def primary_line(self) -> Line:
        return self.lines[self.primary]


def _random_line(rng, size: ImageSize) -> Line:
    for _ in range(MAX_TRIES):
        s, e = rng.uniform(0.0, size.perimeter, 2)
        line = Line.from_points(point_at_arc(s, size), point_at_arc(e, size))
        if not is_valid_line(line, size):
            continue
        a, b = split_regions(line, size)
        if min(polygon_area(a), polygon_area(b)) >= MIN_REGION_FRACTION * size.area:
            return canonical(line, size)
    raise ConfigError("could not sample a line that splits the image reasonably")


def region_sides(lines, size: ImageSize) -> np.ndarray:
    """``(K, H, W)`` booleans: pixel center on the nonnegative side of each line."""
    xs, ys = pixel_centers(size.height, size.width)
    arr = np.array([canonical(ln, size).as_array() for ln in lines]).reshape(-1, 4)
    return signed_distance_grid(arr, xs, ys) >= 0


def region_mean_gap(image: np.ndarray, line: Line) -> float:
    """Mean over channels of |mean(side 0) - mean(side 1)| by pixel centers."""
    size = ImageSize(image.shape[1], image.shape[0])
    pos = region_sides([line], size)[0]
    return float(np.mean(np.abs(image[pos].mean(axis=0) - image[~pos].mean(axis=0))))


def _heterogeneous(rng, size: ImageSize, n_lines: int, contrast: float, noise: float):
    for _ in range(MAX_TRIES):
        lines = [_random_line(rng, size) for _ in range(n_lines)]
        if n_lines > 1:
            ov = miou_matrix(lines, size=size)
            if np.max(ov - np.eye(n_lines)) > MAX_GT_OVERLAP:
                continue
        if n_lines == 1:
            amps = np.array([contrast])
        else:
            amps = contrast * np.concatenate([[PRIMARY_GAIN], rng.uniform(*SECONDARY_GAIN, n_lines - 1)])
        signs = rng.choice([-1.0, 1.0], size=(n_lines, 3))
        steps = amps[:, None] * signs
        lo = noise + np.where(steps < 0, -steps, 0).sum(axis=0)
        hi = 1.0 - noise - np.where(steps > 0, steps, 0).sum(axis=0)
        if np.any(lo > hi):
            continue
        base = rng.uniform(lo, hi)
        sides = region_sides(lines, size).astype(float)
        clean = base + np.einsum("khw,kc->hwc", sides, steps)
        if all(region_mean_gap(clean, ln) >= contrast - 1e-12 for ln in lines):
            return clean, lines
    raise ConfigError("could not build a scene meeting the contrast constraint")


def _symmetric(rng, size: ImageSize, noise: float):
    line = _random_line(rng, size)
    xs, ys = pixel_centers(size.height, size.width)
    d = signed_distance_grid(line.as_array()[None], xs, ys)[0]
    dx, dy = line.x_e - line.x_s, line.y_e - line.y_s
    length = np.hypot(dx, dy)
    nx, ny = dy / length, -dx / length
    # fold the negative side onto the positive side
    fold = np.where(d < 0, -2.0 * d, 0.0)
    fx, fy = xs + fold * nx, ys + fold * ny
    k = 4
    freq = rng.uniform(0.03, 0.12, size=(3, k, 2)) * rng.choice([-1, 1], size=(3, k, 2))
    phase = rng.uniform(0, 2 * np.pi, size=(3, k))
    amp = (0.5 - noise) / k
    chans = [0.5 + amp * np.sum(np.cos(2 * np.pi * (freq[c, :, 0, None, None] * fx + freq[c, :, 1, None, None] * fy)
                                       + phase[c, :, None, None]), axis=0) for c in range(3)]
    return np.stack(chans, axis=-1), [line]


def gen_synthetic(count: int, size, mode: str = "heterogeneous", contrast: float = 0.2, noise: float = 0.05,
                  seed: int = 0, max_lines: int = 3) -> list[SyntheticScene]:
    """``count`` scenes, reproducible from ``seed``; noise is uniform in [-noise, noise]."""
    if isinstance(size, int):
        size = ImageSize(size, size)
    if count < 0:
        raise ConfigError(f"scene count must be nonnegative, got {count}")
    if mode not in ("heterogeneous", "symmetric"):
        raise ConfigError(f"unknown scene mode {mode!r}")
    if noise < 0 or not contrast > 2 * noise:
        raise ConfigError(f"need contrast > 2 * noise >= 0, got contrast={contrast}, noise={noise}")
    if contrast > 1 - 2 * noise:
        raise ConfigError(f"contrast {contrast} does not fit in [0, 1] with noise {noise}")
    rng = np.random.default_rng(seed)
    scenes = []
    for _ in range(count):
        if mode == "heterogeneous":
            n_lines = int(rng.integers(1, max_lines + 1))
            clean, lines = _heterogeneous(rng, size, n_lines, contrast, noise)
        else:
            clean, lines = _symmetric(rng, size, noise)
        image = clean + rng.uniform(-noise, noise, clean.shape)
        scenes.append(SyntheticScene(np.clip(image, 0.0, 1.0), lines, 0, mode))
    return scenes
