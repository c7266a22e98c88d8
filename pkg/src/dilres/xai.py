"""Saliency maps: activation maps, GradCAM, RISE and LIME.

Black-box methods (RISE, LIME) take a ``model`` callable mapping a batch
``(N, 3, H, W)`` to class probabilities ``(N, C)``; :func:`net_scorer` wraps
a :class:`~dilres.resnet.Network` that way. Every method returns a
:class:`SaliencyMap` at input resolution, min-max normalized to [0, 1].
"""
from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .data import round_half_up
from .rng import stream
from .tensor import ShapeError, resize_bilinear_map

Model = Callable[[np.ndarray], np.ndarray]

# 2**20 masks or presence vectors is the most the exhaustive modes will enumerate
MAX_ENUMERATION_BITS = 20


@dataclass
class SaliencyMap:
    grid: np.ndarray
    target_class: int
    method: str
    norm_min: float
    norm_max: float
    degenerate: bool = False
    raw: np.ndarray | None = field(default=None, repr=False)

    @property
    def shape(self):
        return self.grid.shape


def normalize(raw, target_class, method) -> SaliencyMap:
    """Min-max normalize; a constant map comes back as zeros flagged degenerate."""
    raw = np.asarray(raw, dtype=np.float64)
    lo, hi = float(raw.min()), float(raw.max())
    if not hi > lo:
        return SaliencyMap(np.zeros_like(raw), target_class, method, lo, hi, True, raw)
    return SaliencyMap((raw - lo) / (hi - lo), target_class, method, lo, hi, False, raw)


def _as_image(image) -> np.ndarray:
    x = np.asarray(image)
    if x.ndim == 4:
        if x.shape[0] != 1:
            raise ShapeError(f"expected a single image, got batch of {x.shape[0]}")
        x = x[0]
    if x.ndim != 3:
        raise ShapeError(f"image must be (C, H, W) or (1, C, H, W), got {x.shape}")
    return x


def _check_class(target_class, count):
    if not 0 <= target_class < count:
        raise ValueError(f"target class {target_class} out of range [0, {count})")


# -- activation maps ---------------------------------------------------------

def activation_map(trace, layer: str, size: tuple[int, int] | None = None, index: int = 0) -> SaliencyMap:
    """Channel mean of a captured activation, ReLU, upsampled to the input size."""
    if layer not in trace.activations:
        raise KeyError(f"layer {layer!r} not captured; available: {', '.join(trace.activations)}")
    act = np.asarray(trace.activations[layer], dtype=np.float64)
    if act.ndim == 4:
        act = act[index]
    size = size or trace.input_hw or act.shape[-2:]
    grid = np.maximum(act.mean(axis=0), 0.0)
    return normalize(resize_bilinear_map(grid, *size), -1, "activation")


# -- GradCAM -----------------------------------------------------------------

def _tape_forward(net):
    """Adapt a Network (or a ``fn(tape, x) -> (logits, acts)``) to the tape protocol."""
    from .resnet import Network, forward_on_tape

    if isinstance(net, Network):
        def run(tape, x):
            p = {name: tape.constant(v, name) for name, v in net.params.items()}
            return forward_on_tape(net, tape, p, x, mode="infer")
        return run, net.dtype
    return net, np.float64


def gradcam(net, image, target_class: int, layer: str = "last_conv") -> SaliencyMap:
    """Gradient-weighted class activation map at ``layer``.

    ``net`` is a Network or any callable ``(tape, x) -> (logits, activations)``
    built from the tape ops, which is how small hand-made nets plug in.
    """
    run, dtype = _tape_forward(net)
    x = _as_image(image)[None].astype(dtype, copy=False)
    tape = ad.Tape()
    logits, acts = run(tape, tape.constant(x))
    if layer not in acts:
        raise KeyError(f"layer {layer!r} not produced by the network")
    _check_class(target_class, logits.value.shape[1])
    seed = np.zeros_like(logits.value)
    seed[0, target_class] = 1
    a = acts[layer]
    grad = next(iter(ad.backward(tape, seed, output=logits, wrt=[a]).values()))
    A = a.value[0].astype(np.float64)
    G = grad[0].astype(np.float64)
    alpha = G.mean(axis=(1, 2))
    if not np.any(alpha):
        warnings.warn("gradcam: gradient is identically zero; returning an empty map", RuntimeWarning)
    cam = np.maximum(np.tensordot(alpha, A, axes=1), 0.0)
    out = normalize(resize_bilinear_map(cam, *x.shape[2:]), target_class, "gradcam")
    out.degenerate = out.degenerate or not np.any(alpha)
    return out


# -- black-box helpers -------------------------------------------------------

def net_scorer(net, batch_size: int = 64) -> Model:
    """Softmax probabilities of ``net`` in inference mode."""
    from .resnet import forward
    from .training import softmax

    def model(batch):
        out = [softmax(forward(net, batch[i:i + batch_size]).logits)
               for i in range(0, len(batch), batch_size)]
        return np.concatenate(out)
    return model


def _scores(model: Model, batch, target_class):
    probs = np.asarray(model(batch), dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] != len(batch):
        raise ShapeError(f"model must return (N, C) scores, got {probs.shape}")
    _check_class(target_class, probs.shape[1])
    return probs[:, target_class]


# -- RISE --------------------------------------------------------------------

@dataclass(frozen=True)
class RiseConfig:
    mask_count: int = 4000
    cells: int = 7
    p: float = 0.5
    seed: int = 0
    batch_size: int = 100
    # every one of the 2**(cells*cells) block masks, weighted by its probability
    exhaustive: bool = False

    def __post_init__(self):
        if self.mask_count < 1:
            raise ValueError("mask_count must be >= 1")
        if not 0 < self.p < 1:
            raise ValueError("keep probability p must lie in (0, 1)")
        if self.cells < 1:
            raise ValueError("cells must be >= 1")
        if self.exhaustive and self.cells * self.cells > MAX_ENUMERATION_BITS:
            raise ValueError(f"exhaustive RISE supports at most {MAX_ENUMERATION_BITS} cells")


def rise_masks(cfg: RiseConfig, h: int, w: int, rng: np.random.Generator):
    """Yield ``(mask, weight)`` pairs in mask-index order."""
    c = cfg.cells
    if cfg.exhaustive:
        if h % c or w % c:
            raise ValueError(f"exhaustive masks need the image ({h}x{w}) divisible by cells ({c})")
        bits = c * c
        for code in range(1 << bits):
            cell = np.array([(code >> b) & 1 for b in range(bits)], dtype=np.float64).reshape(c, c)
            k = int(cell.sum())
            weight = cfg.p ** k * (1 - cfg.p) ** (bits - k)
            yield np.kron(cell, np.ones((h // c, w // c))), weight
        return
    ch, cw = -(-h // c), -(-w // c)
    up_h, up_w = (c + 1) * ch, (c + 1) * cw
    weight = 1.0 / cfg.mask_count
    for _ in range(cfg.mask_count):
        cell = (rng.random((c, c)) < cfg.p).astype(np.float64)
        dy = int(rng.integers(0, ch))
        dx = int(rng.integers(0, cw))
        up = resize_bilinear_map(cell, up_h, up_w)
        yield up[dy:dy + h, dx:dx + w], weight


def rise(model: Model, image, target_class: int, cfg: RiseConfig = RiseConfig()) -> SaliencyMap:
    """Occlusion saliency: sum of score * mask over random masks, divided by p."""
    x = _as_image(image).astype(np.float64)
    h, w = x.shape[1:]
    rng = stream(cfg.seed, "rise")
    sal = np.zeros((h, w), dtype=np.float64)
    masks = rise_masks(cfg, h, w, rng)
    while True:
        chunk = list(itertools.islice(masks, cfg.batch_size))
        if not chunk:
            break
        m = np.stack([c[0] for c in chunk])
        scores = _scores(model, x[None] * m[:, None], target_class)
        # per-mask partials added in mask-index order
        for (mask, weight), s in zip(chunk, scores):
            sal += (weight * s) * mask
    sal /= cfg.p
    return normalize(sal, target_class, "rise")


# -- LIME --------------------------------------------------------------------

@dataclass(frozen=True)
class LimeConfig:
    rows: int = 4
    cols: int = 4
    samples: int = 1000
    ridge: float = 1.0
    kernel_width: float = 0.25
    top_k: int = 5
    seed: int = 0
    batch_size: int = 100
    # use all 2**segments presence vectors instead of sampling
    enumerate: bool = False

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError("segment grid must be at least 1x1")
        if self.ridge < 0:
            raise ValueError("ridge lambda must be >= 0")
        if not self.kernel_width > 0:
            raise ValueError("kernel width must be positive")
        if self.samples < self.rows * self.cols:
            raise ValueError(f"sample count {self.samples} is below the segment count {self.rows * self.cols}")
        if self.enumerate and self.rows * self.cols > MAX_ENUMERATION_BITS:
            raise ValueError(f"enumeration supports at most {MAX_ENUMERATION_BITS} segments")


@dataclass
class SegmentWeights:
    weights: np.ndarray
    intercept: float
    top: list[int]
    rows: int
    cols: int

    def csv(self) -> str:
        lines = ["segment,row,col,weight"]
        for s, wt in enumerate(self.weights):
            lines.append(f"{s},{s // self.cols},{s % self.cols},{float(wt)!r}")
        return "\n".join(lines) + "\n"


def grid_segments(h: int, w: int, rows: int, cols: int) -> np.ndarray:
    """Label map assigning each pixel to segment ``r * cols + c``."""
    if rows > h or cols > w:
        raise ValueError(f"{rows}x{cols} segments do not fit a {h}x{w} image")
    r = (np.arange(h) * rows) // h
    c = (np.arange(w) * cols) // w
    return r[:, None] * cols + c[None, :]


def presence_samples(cfg: LimeConfig, rng: np.random.Generator) -> np.ndarray:
    n = cfg.rows * cfg.cols
    if cfg.enumerate:
        codes = np.arange(1 << n)
        return ((codes[:, None] >> np.arange(n)[None, :]) & 1).astype(np.float64)
    z = (rng.random((cfg.samples, n)) < 0.5).astype(np.float64)
    z[0] = 1.0  # the unperturbed image
    return z


def weighted_ridge(X, y, sample_weight, lam):
    """Ridge fit with an unpenalized intercept. Returns ``(coef, intercept)``."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    sw = np.asarray(sample_weight, dtype=np.float64)
    total = sw.sum()
    x_mean = sw @ X / total
    y_mean = sw @ y / total
    root = np.sqrt(sw)
    A = (X - x_mean) * root[:, None]
    b = (y - y_mean) * root
    if lam > 0:
        A = np.vstack([A, np.sqrt(lam) * np.eye(X.shape[1])])
        b = np.concatenate([b, np.zeros(X.shape[1])])
    coef = np.linalg.lstsq(A, b, rcond=None)[0]
    return coef, float(y_mean - x_mean @ coef)


def top_segments(weights, k: int) -> list[int]:
    """Indices of the ``k`` largest weights, largest first; ties go to the lower index."""
    order = np.argsort(-np.asarray(weights), kind="stable")
    return [int(i) for i in order[:k]]


def lime(model: Model, image, target_class: int, cfg: LimeConfig = LimeConfig()):
    """Local linear surrogate over grid superpixels. Returns ``(SaliencyMap, SegmentWeights)``."""
    x = _as_image(image).astype(np.float64)
    h, w = x.shape[1:]
    labels = grid_segments(h, w, cfg.rows, cfg.cols)
    fill = x.mean(axis=(1, 2))[:, None, None]
    z = presence_samples(cfg, stream(cfg.seed, "lime"))
    scores = np.empty(len(z), dtype=np.float64)
    for start in range(0, len(z), cfg.batch_size):
        zb = z[start:start + cfg.batch_size]
        keep = zb[:, labels][:, None]  # (B, 1, H, W)
        batch = keep * x[None] + (1 - keep) * fill[None]
        scores[start:start + len(zb)] = _scores(model, batch, target_class)
    d = 1.0 - z.mean(axis=1)
    kernel = np.exp(-(d ** 2) / cfg.kernel_width ** 2)
    coef, intercept = weighted_ridge(z, scores, kernel, cfg.ridge)
    painted = np.maximum(coef, 0.0)[labels]
    smap = normalize(painted, target_class, "lime")
    return smap, SegmentWeights(coef, intercept, top_segments(coef, cfg.top_k), cfg.rows, cfg.cols)


# -- output images -----------------------------------------------------------

def to_gray8(smap: SaliencyMap) -> np.ndarray:
    return round_half_up(np.clip(smap.grid, 0, 1) * 255).astype(np.uint8)


def overlay(image: np.ndarray, smap: SaliencyMap) -> np.ndarray:
    """0.5 * image + 0.5 * red-colorized map, rounded half-up to uint8 (H, W, 3)."""
    img = np.asarray(image, dtype=np.float64)
    if img.shape[:2] != smap.grid.shape:
        raise ShapeError(f"image {img.shape[:2]} and map {smap.grid.shape} differ in size")
    color = np.zeros_like(img)
    color[..., 0] = np.clip(smap.grid, 0, 1) * 255
    return round_half_up(0.5 * img + 0.5 * color).astype(np.uint8)
