"""Text formats for annotations, detections and pairwise matrices, plus image ingestion.

Annotations, one image per row::

    id W H k  x_s y_s x_e y_e p  ...   (k tuples, p = 1 on the primary line)

Detections, one image per row::

    id W H k  x_s y_s x_e y_e score p  ...

Pairwise matrices, one image per row::

    id n  pr[0,0] ... pr[n-1,n-1]  pm[0,0] ... pm[n-1,n-1]

Floats are written with ``repr`` so a save/load cycle is lossless. Blank
lines and ``#`` comments are ignored. Endpoints up to 0.5 px off the image
boundary are projected back onto it; anything further is rejected.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import ParseError, ValidationError
from ..evaluation import Detection
from ..geometry import ImageSize, Line, boundary_distance, check_line, nearest_boundary_point

SNAP_TOL = 0.5


@dataclass(frozen=True)
class AnnotationRecord:
    image_id: str
    size: ImageSize
    lines: tuple
    primary: int | None  # index into ``lines``; None only when there are no lines

    @property
    def primary_line(self) -> Line | None:
        return None if self.primary is None else self.lines[self.primary]


@dataclass(frozen=True)
class DetectionRecord:
    image_id: str
    size: ImageSize
    detections: tuple


# ---------------------------------------------------------------------------
# shared row parsing


def _rows(path):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ValidationError(f"cannot read {path}: {exc}") from None
    for lineno, raw in enumerate(text.splitlines(), 1):
        body = raw.split("#", 1)[0].split()
        if body:
            yield lineno, body


def _num(tok: str, kind, what: str, lineno, path):
    try:
        v = kind(tok)
    except ValueError:
        raise ParseError(f"bad {what} {tok!r}", lineno, path) from None
    if kind is float and not np.isfinite(v):
        raise ParseError(f"non-finite {what} {tok!r}", lineno, path)
    return v


def _header(body, lineno, path):
    if len(body) < 4:
        raise ParseError("expected at least 'id W H k'", lineno, path)
    w = _num(body[1], int, "width", lineno, path)
    h = _num(body[2], int, "height", lineno, path)
    k = _num(body[3], int, "line count", lineno, path)
    if w <= 0 or h <= 0:
        raise ParseError(f"image size must be positive, got {w}x{h}", lineno, path)
    if k < 0:
        raise ParseError(f"line count must be nonnegative, got {k}", lineno, path)
    return body[0], ImageSize(w, h), k


def snap_line(coords, size: ImageSize, lineno=None, path=None) -> Line:
    """Line from ``(x_s, y_s, x_e, y_e)``, projecting endpoints within ``SNAP_TOL`` onto the boundary."""
    pts = []
    for p in (coords[:2], coords[2:]):
        p = (float(p[0]), float(p[1]))
        d = boundary_distance(p, size)
        if d > SNAP_TOL:
            raise ParseError(f"endpoint {p} is {d:.3g} px off the image boundary", lineno, path)
        pts.append(p if d == 0.0 else nearest_boundary_point(p, size))
    line = Line.from_points(*pts)
    try:
        check_line(line, size)
    except ValidationError as exc:
        raise ParseError(str(exc), lineno, path) from None
    return line


def _flag(tok, lineno, path) -> bool:
    if tok not in ("0", "1"):
        raise ParseError(f"primary flag must be 0 or 1, got {tok!r}", lineno, path)
    return tok == "1"


# ---------------------------------------------------------------------------
# annotations


def load_annotations(path) -> list[AnnotationRecord]:
    out = []
    for lineno, body in _rows(path):
        image_id, size, k = _header(body, lineno, path)
        if len(body) != 4 + 5 * k:
            raise ParseError(f"expected {4 + 5 * k} fields for {k} lines, got {len(body)}", lineno, path)
        lines, flags = [], []
        for j in range(k):
            f = body[4 + 5 * j: 9 + 5 * j]
            coords = [_num(t, float, "coordinate", lineno, path) for t in f[:4]]
            lines.append(snap_line(coords, size, lineno, path))
            flags.append(_flag(f[4], lineno, path))
        if k and sum(flags) != 1:
            raise ParseError(f"expected exactly one primary line, got {sum(flags)}", lineno, path)
        out.append(AnnotationRecord(image_id, size, tuple(lines), flags.index(True) if k else None))
    return out


def _line_fields(line: Line) -> list[str]:
    return [repr(float(v)) for v in (line.x_s, line.y_s, line.x_e, line.y_e)]


def _check_id(image_id: str) -> None:
    if not image_id or any(c.isspace() for c in image_id) or "#" in image_id:
        raise ValidationError(f"image id {image_id!r} must be a nonempty token without whitespace or '#'")


def save_annotations(path, records) -> None:
    rows = []
    for r in records:
        _check_id(r.image_id)
        fields = [r.image_id, str(r.size.width), str(r.size.height), str(len(r.lines))]
        for j, line in enumerate(r.lines):
            check_line(line, r.size)
            fields += _line_fields(line) + ["1" if j == r.primary else "0"]
        rows.append(" ".join(fields))
    Path(path).write_text("".join(row + "\n" for row in rows))


def annotations_from_scenes(scenes, prefix: str = "img") -> list[AnnotationRecord]:
    return [AnnotationRecord(f"{prefix}{k:05d}", s.size, tuple(s.lines), s.primary) for k, s in enumerate(scenes)]


# ---------------------------------------------------------------------------
# detections


def save_detections(path, records) -> None:
    rows = []
    for r in records:
        _check_id(r.image_id)
        fields = [r.image_id, str(r.size.width), str(r.size.height), str(len(r.detections))]
        for d in r.detections:
            check_line(d.line, r.size)
            fields += _line_fields(d.line) + [repr(float(d.score)), "1" if d.primary else "0"]
        rows.append(" ".join(fields))
    Path(path).write_text("".join(row + "\n" for row in rows))


def load_detections(path) -> list[DetectionRecord]:
    out = []
    for lineno, body in _rows(path):
        image_id, size, k = _header(body, lineno, path)
        if len(body) != 4 + 6 * k:
            raise ParseError(f"expected {4 + 6 * k} fields for {k} detections, got {len(body)}", lineno, path)
        dets = []
        for j in range(k):
            f = body[4 + 6 * j: 10 + 6 * j]
            coords = [_num(t, float, "coordinate", lineno, path) for t in f[:4]]
            score = _num(f[4], float, "score", lineno, path)
            dets.append(Detection(snap_line(coords, size, lineno, path), score, _flag(f[5], lineno, path)))
        if sum(d.primary for d in dets) > 1:
            raise ParseError("more than one primary detection", lineno, path)
        out.append(DetectionRecord(image_id, size, tuple(dets)))
    return out


# ---------------------------------------------------------------------------
# pairwise matrices


def save_pairwise(path, entries) -> None:
    """``entries``: ``(image_id, pr, pm)`` with square matrices of equal size (``None`` for empty)."""
    rows = []
    for image_id, pr, pm in entries:
        _check_id(image_id)
        pr = np.zeros((0, 0)) if pr is None else np.asarray(pr, dtype=float)
        pm = np.zeros((0, 0)) if pm is None else np.asarray(pm, dtype=float)
        n = pr.shape[0]
        if pr.shape != (n, n) or pm.shape != (n, n):
            raise ValidationError(f"{image_id}: pairwise matrices must be square and equal, got {pr.shape}, {pm.shape}")
        rows.append(" ".join([image_id, str(n)] + [repr(float(v)) for v in pr.ravel()]
                             + [repr(float(v)) for v in pm.ravel()]))
    Path(path).write_text("".join(row + "\n" for row in rows))


def load_pairwise(path) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    out = {}
    for lineno, body in _rows(path):
        if len(body) < 2:
            raise ParseError("expected 'id n'", lineno, path)
        n = _num(body[1], int, "matrix size", lineno, path)
        if n < 0 or len(body) != 2 + 2 * n * n:
            raise ParseError(f"expected {2 + 2 * max(n, 0) ** 2} fields for n={n}, got {len(body)}", lineno, path)
        vals = np.array([_num(t, float, "probability", lineno, path) for t in body[2:]])
        if np.any((vals < 0) | (vals > 1)):
            raise ParseError("pairwise probabilities must lie in [0, 1]", lineno, path)
        out[body[0]] = (vals[:n * n].reshape(n, n), vals[n * n:].reshape(n, n))
    return out


# ---------------------------------------------------------------------------
# images


def _ppm_tokens(data: bytes, count: int, path):
    """First ``count`` whitespace-separated header tokens, skipping comments; returns tokens and body offset."""
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ParseError("truncated PPM header", path=path)
        tokens.append(data[start:pos].decode("ascii", "replace"))
    return tokens, pos + 1


def read_ppm(path) -> np.ndarray:
    """P6 or P3 image as ``(H, W, 3)`` floats in [0, 1]."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise ValidationError(f"cannot read {path}: {exc}") from None
    (magic, w, h, maxval), body = _ppm_tokens(data, 4, path)
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError:
        raise ParseError("bad PPM header", path=path) from None
    if magic not in ("P6", "P3") or w <= 0 or h <= 0 or not 0 < maxval < 65536:
        raise ParseError(f"unsupported PPM header {magic} {w} {h} {maxval}", path=path)
    n = w * h * 3
    if magic == "P6":
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        raw = np.frombuffer(data, dtype=dtype, count=-1, offset=body)
        if raw.size < n:
            raise ParseError(f"PPM body holds {raw.size} samples, expected {n}", path=path)
        vals = raw[:n].astype(float)
    else:
        toks = data[body - 1:].split()
        if len(toks) < n:
            raise ParseError(f"PPM body holds {len(toks)} samples, expected {n}", path=path)
        try:
            vals = np.array([int(t) for t in toks[:n]], dtype=float)
        except ValueError:
            raise ParseError("non-integer PPM sample", path=path) from None
    if np.any(vals > maxval):
        raise ParseError("PPM sample exceeds maxval", path=path)
    return vals.reshape(h, w, 3) / maxval


def write_ppm(path, image: np.ndarray, binary: bool = True) -> None:
    """8-bit PPM; values are clipped to [0, 1] and rounded."""
    img = np.asarray(image, dtype=float)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValidationError(f"PPM needs an (H, W, 3) image, got {img.shape}")
    q = np.rint(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    h, w = q.shape[:2]
    if binary:
        Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + q.tobytes())
    else:
        body = "\n".join(" ".join(str(v) for v in row) for row in q.reshape(h, -1))
        Path(path).write_text(f"P3\n{w} {h}\n255\n{body}\n")


# ---------------------------------------------------------------------------
# dataset directories

ANNOTATIONS = "annotations.txt"
IMAGES = "images.npy"


def save_dataset(directory, scenes, prefix: str = "img") -> list[AnnotationRecord]:
    """``annotations.txt`` plus every image stacked in ``images.npy``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    records = annotations_from_scenes(scenes, prefix)
    save_annotations(d / ANNOTATIONS, records)
    np.save(d / IMAGES, np.stack([s.image for s in scenes]) if scenes else np.zeros((0, 1, 1, 3)))
    return records


def load_dataset(directory) -> tuple[list[AnnotationRecord], list[np.ndarray]]:
    """Annotations and images; images come from ``images.npy`` or ``<id>.ppm`` files."""
    d = Path(directory)
    records = load_annotations(d / ANNOTATIONS)
    if (d / IMAGES).exists():
        stack = np.load(d / IMAGES, allow_pickle=False)
        if len(records) and len(stack) != len(records):
            raise ValidationError(f"{d / IMAGES} holds {len(stack)} images for {len(records)} annotations")
        images = [np.asarray(im, dtype=float) for im in stack[:len(records)]]
    else:
        images = [read_ppm(d / f"{r.image_id}.ppm") for r in records]
    for r, im in zip(records, images):
        if im.ndim != 3 or (im.shape[1], im.shape[0]) != (r.size.width, r.size.height):
            raise ValidationError(f"image {r.image_id} has shape {im.shape}, annotation says {r.size.width}x{r.size.height}")
    return records, images
