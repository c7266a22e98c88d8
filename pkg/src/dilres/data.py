"""Images, label manifests, splits, and the synthetic fundus-like corpus.

Images are ``uint8`` arrays of shape (H, W, 3) (or (H, W) for grayscale)
read from and written to binary PPM (P6) / PGM (P5) with maxval 255.
"""
from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import stream
from .tensor import bilinear_weights

CLASS_NAMES = (
    "normal",
    "cataract",
    "diabetic retinopathy",
    "glaucoma",
    "AMD",
    "myopia",
    "hypertension",
    "other abnormalities",
)
NUM_CLASSES = len(CLASS_NAMES)


class ImageFormatError(ValueError):
    pass


class ManifestError(ValueError):
    pass


# ---------------------------------------------------------------------------
# PPM / PGM
# ---------------------------------------------------------------------------

_WS = b" \t\n\r\v\f"


def _header_tokens(buf: bytes, count: int):
    """Read ``count`` whitespace-separated header tokens; ``#`` starts a comment to end of line."""
    tokens, pos = [], 0
    n = len(buf)
    while len(tokens) < count:
        while pos < n and (buf[pos] in _WS or buf[pos] == ord("#")):
            if buf[pos] == ord("#"):
                while pos < n and buf[pos] not in b"\r\n":
                    pos += 1
            else:
                pos += 1
        start = pos
        while pos < n and buf[pos] not in _WS and buf[pos] != ord("#"):
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated header")
        tokens.append(buf[start:pos])
    # exactly one whitespace byte separates the header from the raster
    if pos >= n or buf[pos] not in _WS:
        raise ImageFormatError("missing whitespace after header")
    return tokens, pos + 1


def decode_ppm(data: bytes) -> np.ndarray:
    """Decode binary P6 (color) or P5 (gray) with maxval 255."""
    if len(data) < 2 or data[:2] not in (b"P6", b"P5"):
        raise ImageFormatError("not a binary PPM/PGM stream (expected P6 or P5 magic)")
    channels = 3 if data[:2] == b"P6" else 1
    if len(data) < 3 or (data[2] not in _WS and data[2] != ord("#")):
        raise ImageFormatError("malformed header after magic")
    tokens, pos = _header_tokens(data[2:], 3)
    pos += 2
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise ImageFormatError(f"non-numeric header field: {exc}") from None
    if width < 1 or height < 1:
        raise ImageFormatError(f"bad extents {width}x{height}")
    if maxval != 255:
        raise ImageFormatError(f"maxval must be 255, got {maxval}")
    need = width * height * channels
    raster = data[pos:pos + need]
    if len(raster) < need:
        raise ImageFormatError(f"truncated payload: need {need} bytes, have {len(raster)}")
    img = np.frombuffer(raster, dtype=np.uint8).copy()
    return img.reshape(height, width, 3) if channels == 3 else img.reshape(height, width)


def encode_ppm(image: np.ndarray) -> bytes:
    """Canonical encoding: ``P6\\n<w> <h>\\n255\\n`` (P5 for 2-D input) then raw samples."""
    img = np.asarray(image)
    if img.dtype != np.uint8:
        raise ImageFormatError(f"image must be uint8, got {img.dtype}")
    if img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    elif img.ndim == 2:
        magic = b"P5"
    else:
        raise ImageFormatError(f"image must be (H, W, 3) or (H, W), got {img.shape}")
    h, w = img.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(img).tobytes()


def read_image(path) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())


def write_bytes_atomic(path, data: bytes):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def write_image(path, image):
    write_bytes_atomic(path, encode_ppm(image))


# ---------------------------------------------------------------------------
# resampling and tensors
# ---------------------------------------------------------------------------

def round_half_up(values):
    return np.floor(np.asarray(values, dtype=np.float64) + 0.5)


def resize_bilinear(image: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Bilinear resize with half-pixel centers (src = (dst + 0.5) * in/out - 0.5, clamped)."""
    if out_w < 1 or out_h < 1:
        raise ValueError(f"target extents must be positive, got {out_w}x{out_h}")
    img = np.asarray(image)
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.copy()
    Wh = bilinear_weights(h, out_h)
    Ww = bilinear_weights(w, out_w)
    f = img.astype(np.float64)
    if f.ndim == 2:
        out = Wh @ f @ Ww.T
    else:
        out = np.einsum("oh,hwc,pw->opc", Wh, f, Ww)
    return np.clip(round_half_up(out), 0, 255).astype(np.uint8)


def to_tensor(image: np.ndarray, dtype=np.float32) -> np.ndarray:
    """(H, W, 3) uint8 -> (1, 3, H, W) scaled by 1/255."""
    img = np.asarray(image)
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    return (img.astype(np.float64) / 255.0).transpose(2, 0, 1)[None].astype(dtype)


def to_image(tensor: np.ndarray) -> np.ndarray:
    """Inverse of :func:`to_tensor` for one image, rounding half up."""
    t = np.asarray(tensor, dtype=np.float64)
    if t.ndim == 4:
        t = t[0]
    return np.clip(round_half_up(t.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

def reduce_multilabel(labels) -> int:
    """Collapse a set of class indices to one: the first disease label wins over normal."""
    labels = sorted(set(int(l) for l in labels))
    if not labels:
        raise ValueError("empty label set")
    for l in labels:
        if not 0 <= l < NUM_CLASSES:
            raise ValueError(f"label {l} out of range [0, {NUM_CLASSES})")
    diseases = [l for l in labels if l != 0]
    return diseases[0] if diseases else 0


@dataclass
class Manifest:
    rows: list[tuple[str, int]]
    root: Path = field(default_factory=Path)

    def __len__(self):
        return len(self.rows)

    @property
    def labels(self) -> np.ndarray:
        return np.array([l for _, l in self.rows], dtype=np.int64)

    def paths(self) -> list[Path]:
        return [self.root / p for p, _ in self.rows]


def parse_manifest(text: str, root=Path(), classes=NUM_CLASSES) -> Manifest:
    """Parse ``path,label`` CSV. A label may list several classes separated by ``;``."""
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise ManifestError("line 1: empty manifest, expected header 'path,label'") from None
    if [h.strip() for h in header] != ["path", "label"]:
        raise ManifestError(f"line 1: bad header {','.join(header)!r}, expected 'path,label'")
    rows, seen = [], set()
    for lineno, rec in enumerate(reader, 2):
        if not rec:
            continue
        if len(rec) != 2:
            raise ManifestError(f"line {lineno}: expected 2 fields, got {len(rec)}")
        path, raw = rec[0].strip(), rec[1].strip()
        try:
            parts = [int(x) for x in raw.split(";")]
        except ValueError:
            raise ManifestError(f"line {lineno}: non-integer label {raw!r}") from None
        for v in parts:
            if not 0 <= v < classes:
                raise ManifestError(f"line {lineno}: label {v} out of range [0, {classes})")
        label = parts[0] if len(parts) == 1 else reduce_multilabel(parts)
        if path in seen:
            raise ManifestError(f"line {lineno}: duplicate path {path!r}")
        seen.add(path)
        rows.append((path, label))
    return Manifest(rows, Path(root))


def load_manifest(path) -> Manifest:
    path = Path(path)
    return parse_manifest(path.read_text(encoding="utf-8"), root=path.parent)


def manifest_csv(manifest: Manifest) -> str:
    out = io.StringIO()
    out.write("path,label\n")
    for p, l in manifest.rows:
        out.write(f"{p},{l}\n")
    return out.getvalue()


def split(manifest: Manifest, fraction: float, seed: int = 0) -> tuple[Manifest, Manifest]:
    """Stratified split: per class, shuffle with the seed and cut at ``fraction``."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must lie in [0, 1], got {fraction}")
    rng = stream(seed, "split")
    by_class: dict[int, list[int]] = {}
    for i, (_, label) in enumerate(manifest.rows):
        by_class.setdefault(label, []).append(i)
    train_idx, test_idx = [], []
    for label in sorted(by_class):
        idx = np.array(by_class[label])
        idx = idx[rng.permutation(len(idx))]
        cut = int(round(fraction * len(idx)))
        train_idx.extend(idx[:cut].tolist())
        test_idx.extend(idx[cut:].tolist())
    pick = lambda ids: Manifest([manifest.rows[i] for i in sorted(ids)], manifest.root)
    return pick(train_idx), pick(test_idx)


def load_images(manifest: Manifest, size: int | None = None, dtype=np.float32) -> np.ndarray:
    """Decode, optionally resize to ``size`` x ``size``, and stack as (N, 3, H, W)."""
    batch = []
    for path in manifest.paths():
        img = read_image(path)
        if size is not None and img.shape[:2] != (size, size):
            img = resize_bilinear(img, size, size)
        batch.append(to_tensor(img, dtype)[0])
    if not batch:
        return np.zeros((0, 3, size or 1, size or 1), dtype=dtype)
    return np.stack(batch)


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    """Fundus-like images where class k carries a textured bright disc at site k.

    Every image has a dark red retina disc, random vessel-like strokes and
    sensor noise. The class motif is a disc centred on one of
    ``class_count`` sites placed on a ring, filled with stripes whose
    orientation and tint depend on the class.
    """
    class_count: int = NUM_CLASSES
    image_size: int = 64
    samples_per_class: int = 100
    motif_radius: float = 0.11  # fraction of image size
    motif_brightness: float = 0.9
    vessel_count: int = 5
    blur: float = 0.6  # motif edge softness in pixels
    noise: float = 0.04
    jitter: float = 0.03  # motif centre jitter, fraction of image size
    seed: int = 0


def motif_center(spec: SyntheticSpec, label: int) -> tuple[float, float]:
    """(row, col) of the motif site for ``label`` before jitter."""
    s = spec.image_size
    angle = 2 * np.pi * label / spec.class_count
    r = 0.28 * s
    return (s / 2 - 0.5 + r * np.sin(angle), s / 2 - 0.5 + r * np.cos(angle))


def motif_box(spec: SyntheticSpec, label: int) -> tuple[int, int, int, int]:
    """Bounding box (r0, r1, c0, c1), half-open, that contains the motif under any jitter."""
    cy, cx = motif_center(spec, label)
    s = spec.image_size
    reach = (spec.motif_radius + spec.jitter) * s + spec.blur + 1
    r0, r1 = int(np.floor(cy - reach)), int(np.ceil(cy + reach)) + 1
    c0, c1 = int(np.floor(cx - reach)), int(np.ceil(cx + reach)) + 1
    return max(r0, 0), min(r1, s), max(c0, 0), min(c1, s)


_TINTS = np.array([
    [1.00, 1.00, 1.00],
    [1.00, 0.85, 0.35],
    [0.45, 1.00, 0.45],
    [0.40, 0.75, 1.00],
    [1.00, 0.45, 0.95],
    [1.00, 1.00, 0.35],
    [0.35, 1.00, 1.00],
    [1.00, 0.60, 0.45],
])


def render_synthetic(spec: SyntheticSpec, label: int, rng: np.random.Generator) -> np.ndarray:
    s = spec.image_size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    c = (s - 1) / 2
    rr = np.hypot(yy - c, xx - c) / (s / 2)
    retina = np.clip(1.15 - rr, 0, 1) ** 0.7
    img = np.stack([0.55 * retina, 0.22 * retina, 0.10 * retina], axis=-1)

    for _ in range(spec.vessel_count):
        a0 = rng.uniform(0, 2 * np.pi)
        curve = rng.uniform(-1.5, 1.5)
        t = np.linspace(0, 1, max(8, s // 2))
        ang = a0 + curve * t
        py = c + t * 0.48 * s * np.sin(ang)
        px = c + t * 0.48 * s * np.cos(ang)
        width = rng.uniform(0.6, 1.4)
        d = np.hypot(yy[None] - py[:, None, None], xx[None] - px[:, None, None]).min(axis=0)
        vessel = np.exp(-(d / width) ** 2)
        img *= (1 - 0.45 * vessel)[..., None]

    cy, cx = motif_center(spec, label)
    cy += rng.uniform(-1, 1) * spec.jitter * s
    cx += rng.uniform(-1, 1) * spec.jitter * s
    radius = spec.motif_radius * s
    dist = np.hypot(yy - cy, xx - cx)
    disc = 1.0 / (1.0 + np.exp((dist - radius) / max(spec.blur, 1e-3)))
    theta = np.pi * label / spec.class_count
    phase = rng.uniform(0, 2 * np.pi)
    period = 2.5 + 0.25 * (label % 4)
    stripes = 0.5 + 0.5 * np.cos(2 * np.pi * ((yy - cy) * np.sin(theta) + (xx - cx) * np.cos(theta)) / period + phase)
    tint = _TINTS[label % len(_TINTS)]
    motif = spec.motif_brightness * (0.55 + 0.45 * stripes)
    img = img * (1 - disc[..., None]) + (disc * motif)[..., None] * tint
    img += rng.normal(0, spec.noise, img.shape)
    return np.clip(round_half_up(img * 255), 0, 255).astype(np.uint8)


def synthetic_arrays(spec: SyntheticSpec):
    """In-memory corpus: (images uint8 (N, H, W, 3), labels), class-major order."""
    rng = stream(spec.seed, "synth")
    images, labels = [], []
    for label in range(spec.class_count):
        for _ in range(spec.samples_per_class):
            images.append(render_synthetic(spec, label, rng))
            labels.append(label)
    return np.stack(images), np.array(labels, dtype=np.int64)


def generate_synthetic(spec: SyntheticSpec, out_dir) -> Manifest:
    """Write ``<out_dir>/img_<class>_<index>.ppm`` plus ``manifest.csv``; returns the manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    images, labels = synthetic_arrays(spec)
    rows = []
    counters = [0] * spec.class_count
    for img, label in zip(images, labels):
        name = f"img_{int(label)}_{counters[label]:04d}.ppm"
        counters[label] += 1
        write_image(out_dir / name, img)
        rows.append((name, int(label)))
    manifest = Manifest(rows, out_dir)
    write_bytes_atomic(out_dir / "manifest.csv", manifest_csv(manifest).encode("utf-8"))
    return manifest
