"""Synthetic skeleton samples, binary PGM I/O and the image/label dataset layout."""
from __future__ import annotations

import csv
import io
import logging
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .evalkit import thin

logger = logging.getLogger(__name__)

SIZE_MULTIPLE = 16
MAX_RETRIES = 50


class PgmError(ValueError):
    pass


@dataclass
class Sample:
    image: np.ndarray   # uint8 (H, W)
    gt: np.ndarray      # bool (H, W)
    id: str
    shape_count: int = 0
    mask: np.ndarray | None = None   # foreground union, generated samples only


# ---------------------------------------------------------------------------
# PGM


def write_pgm(raster: np.ndarray) -> bytes:
    raster = np.asarray(raster)
    if raster.ndim != 2:
        raise PgmError(f"PGM rasters are 2-D, got shape {raster.shape}")
    if raster.dtype != np.uint8:
        if raster.min(initial=0) < 0 or raster.max(initial=0) > 255:
            raise PgmError("PGM rasters are 8-bit; values outside 0..255")
        raster = raster.astype(np.uint8)
    h, w = raster.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(raster).tobytes()


_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def read_pgm(data: bytes) -> np.ndarray:
    if len(data) < 2:
        raise PgmError("truncated header at byte offset 0")
    magic = data[:2]
    if magic != b"P5":
        raise PgmError(f"unsupported PGM magic {magic.decode('latin-1')!r} at byte offset 0 (only binary P5)")
    pos, fields = 2, []
    for name in ("width", "height", "maxval"):
        m = _TOKEN.match(data, pos)
        if m is None:
            raise PgmError(f"truncated header: missing {name} at byte offset {pos}")
        tok = m.group(1)
        if not tok.isdigit():
            raise PgmError(f"malformed {name} {tok!r} at byte offset {m.start(1)}")
        fields.append(int(tok))
        pos = m.end(1)
    if pos >= len(data) or data[pos : pos + 1] not in (b" ", b"\n", b"\r", b"\t"):
        raise PgmError(f"malformed header: expected one whitespace byte at byte offset {pos}")
    pos += 1
    w, h, maxval = fields
    if not 0 < maxval < 256:
        raise PgmError(f"only 8-bit PGM is supported, maxval {maxval} at header")
    need = w * h
    if len(data) - pos < need:
        raise PgmError(f"truncated payload: expected {need} bytes from byte offset {pos}, found {len(data) - pos}")
    return np.frombuffer(data, dtype=np.uint8, count=need, offset=pos).reshape(h, w).copy()


# ---------------------------------------------------------------------------
# medial axis


def medial_axis(mask: np.ndarray, tie: float = 0.5, min_angle_deg: float = 90.0,
                min_separation: float = 2.0, min_depth: float = 1.5) -> np.ndarray:
    """Exhaustive-search medial axis of a binary mask.

    For every foreground pixel the Euclidean distance to every boundary
    witness (a background pixel 4-adjacent to the foreground; the frame
    outside the image counts as background) is computed. Witnesses within
    ``tie`` of the nearest distance are equidistant. A pixel is on the
    ridge when two equidistant witnesses are more than ``min_separation``
    apart and seen more than ``min_angle_deg`` apart, and the pixel lies
    deeper than ``min_depth`` inside the shape. The ridge is returned
    unthinned.
    """
    m = np.pad(np.asarray(mask, dtype=bool), 1)
    near = np.zeros_like(m)
    near[1:] |= m[:-1]
    near[:-1] |= m[1:]
    near[:, 1:] |= m[:, :-1]
    near[:, :-1] |= m[:, 1:]
    bd = np.argwhere(near & ~m).astype(np.float64)
    fg = np.argwhere(m)
    ridge = np.zeros(m.shape, dtype=bool)
    if fg.size == 0 or bd.size == 0:
        return ridge[1:-1, 1:-1]
    cos_max = np.cos(np.radians(min_angle_deg))
    for start in range(0, len(fg), 512):
        p = fg[start : start + 512].astype(np.float64)
        diff = bd[None, :, :] - p[:, None, :]
        d = np.sqrt((diff**2).sum(-1))
        rows = np.arange(len(p))
        i0 = d.argmin(axis=1)
        dmin = d[rows, i0]
        witness = d <= dmin[:, None] + tie
        u0 = diff[rows, i0] / dmin[:, None]
        cos = (diff * u0[:, None, :]).sum(-1) / d
        w0 = bd[i0]
        sep = np.sqrt(((bd[None, :, :] - w0[:, None, :]) ** 2).sum(-1))
        ok = (dmin > min_depth) & (witness & (cos < cos_max) & (sep > min_separation)).any(axis=1)
        hits = fg[start : start + 512][ok]
        ridge[hits[:, 0], hits[:, 1]] = True
    return ridge[1:-1, 1:-1]


def skeleton_gt(mask: np.ndarray) -> np.ndarray:
    return thin(medial_axis(mask))


# ---------------------------------------------------------------------------
# synthetic generator


def _value_noise(rng: np.random.Generator, size: int, cells: int) -> np.ndarray:
    from .tensor import bilinear_matrix

    grid = rng.uniform(-1.0, 1.0, size=(cells, cells))
    factor = size // cells
    r = bilinear_matrix(cells, factor)
    return r @ grid @ r.T


def _shape_mask(rng: np.random.Generator, size: int, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    s = size / 96.0
    kind = rng.choice(["ellipse", "rectangle", "capsule"])
    angle = rng.uniform(0.0, np.pi)
    ca, sa = np.cos(angle), np.sin(angle)
    if kind == "ellipse":
        a = rng.uniform(9, 26) * s
        b = rng.uniform(5, 13) * s
        extent = a
    elif kind == "rectangle":
        a = rng.uniform(9, 26) * s
        b = rng.uniform(4, 11) * s
        extent = np.hypot(a, b)
    else:
        a = rng.uniform(6, 20) * s      # half segment length
        b = rng.uniform(4, 9) * s       # radius
        extent = a + b
    margin = min(extent + 2, size / 2 - 1)
    cy, cx = rng.uniform(margin, size - margin, size=2)
    u = (xx - cx) * ca + (yy - cy) * sa
    v = -(xx - cx) * sa + (yy - cy) * ca
    if kind == "ellipse":
        return (u / a) ** 2 + (v / b) ** 2 <= 1.0
    if kind == "rectangle":
        return (np.abs(u) <= a) & (np.abs(v) <= b)
    uc = np.clip(u, -a, a)
    return (u - uc) ** 2 + v**2 <= b**2


def check_size(size: int) -> None:
    if size < 32 or size % SIZE_MULTIPLE:
        raise ValueError(f"sample size must be a multiple of {SIZE_MULTIPLE} and at least 32, got {size}")


def gen_sample(seed: int, size: int = 96, sample_id: str | None = None) -> Sample:
    """1-3 filled shapes over value-noise texture; ground truth is the thinned medial axis of their union."""
    check_size(size)
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    for _ in range(MAX_RETRIES):
        count = int(rng.integers(1, 4))
        union = np.zeros((size, size), dtype=bool)
        for _ in range(count):
            union |= _shape_mask(rng, size, yy, xx)
        if union.sum() < 30:
            continue
        gt = skeleton_gt(union)
        if gt.any():
            break
    else:
        raise RuntimeError(f"seed {seed}: no non-degenerate shape after {MAX_RETRIES} attempts")

    bg = rng.uniform(50, 205)
    delta = rng.uniform(50, 90) * rng.choice([-1.0, 1.0])
    if not 0 <= bg + delta <= 255:
        delta = -delta
    texture = 14.0 * _value_noise(rng, size, size // 16) + 8.0 * _value_noise(rng, size, size // 4)
    img = bg + delta * union + texture + rng.normal(0.0, 5.0, size=(size, size))
    image = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return Sample(image, gt, sample_id if sample_id is not None else str(seed), count, union)


def sample_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def synth_dataset(out: Path | str, count: int, size: int = 96, seed: int = 0) -> list[Sample]:
    """Write ``count`` samples under ``out/images`` and ``out/labels`` plus ``manifest.csv``."""
    check_size(size)
    out = Path(out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    samples = []
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["id", "seed", "shape_count"])
    for i in range(count):
        s = sample_seed(seed, i)
        sample = gen_sample(s, size, f"{i:05d}")
        (out / "images" / f"{sample.id}.pgm").write_bytes(write_pgm(sample.image))
        (out / "labels" / f"{sample.id}.pgm").write_bytes(write_pgm(sample.gt.astype(np.uint8) * 255))
        writer.writerow([sample.id, s, sample.shape_count])
        samples.append(sample)
    (out / "manifest.csv").write_text(buf.getvalue())
    return samples


def load_dataset(directory: Path | str) -> list[Sample]:
    directory = Path(directory)
    images = {p.stem: p for p in (directory / "images").glob("*.pgm")}
    labels = {p.stem: p for p in (directory / "labels").glob("*.pgm")}
    orphans = sorted(set(images) ^ set(labels))
    if orphans:
        raise ValueError(f"unmatched image/label stems in {directory}: {', '.join(orphans)}")
    out = []
    for stem in sorted(images):
        image = read_pgm(images[stem].read_bytes())
        label = read_pgm(labels[stem].read_bytes())
        if image.shape != label.shape:
            raise ValueError(f"pair {stem!r}: image {image.shape[1]}x{image.shape[0]} vs label {label.shape[1]}x{label.shape[0]}")
        out.append(Sample(image, label >= 128, stem))
    return out
