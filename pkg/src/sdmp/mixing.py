"""Intra-batch data mixing: pairing, Mixup/CutMix/ResizeMix and mixing coefficients.

Image batches are plain ``float`` arrays of shape ``[n, C, H, W]`` with pixels
in ``[0, 1]``. Sample ``i`` is always mixed with sample ``n - 1 - i`` of the
same batch (the batch mixed with its reversed copy).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MIXUP, CUTMIX, RESIZEMIX = "mixup", "cutmix", "resizemix"
STRATEGIES = (MIXUP, CUTMIX, RESIZEMIX)
DEFAULT_ALPHA = {MIXUP: 0.8, CUTMIX: 1.0, RESIZEMIX: 1.0}
DEFAULT_PATCH_RANGE = (0.1, 0.8)


class MixingError(ValueError):
    pass


@dataclass(frozen=True)
class MixSpec:
    strategy: str = MIXUP
    alpha: float = 0.8
    lambda_mode: str = "per_sample"
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise MixingError(f"unknown mixing strategy {self.strategy!r}")
        if not self.alpha > 0:
            raise MixingError(f"alpha must be positive, got {self.alpha}")
        if self.lambda_mode not in ("per_sample", "per_batch"):
            raise MixingError(f"unknown lambda_mode {self.lambda_mode!r}")


@dataclass
class MixedBatch:
    images: np.ndarray
    lambdas: np.ndarray
    pair_of: np.ndarray
    strategy: str
    # (top, left, height, width) per sample for regional strategies
    patch_boxes: np.ndarray | None = None


def pair_index(i: int, n: int) -> int:
    if not 0 <= i < n:
        raise IndexError(f"index {i} out of range for batch of {n}")
    return n - 1 - i


def pairing(n: int) -> np.ndarray:
    if n % 2:
        raise MixingError(f"intra-batch mixing needs an even batch size, got {n}")
    return np.arange(n - 1, -1, -1)


def _check_batch(images: np.ndarray) -> int:
    if images.ndim != 4:
        raise MixingError(f"expected [n, C, H, W] images, got shape {images.shape}")
    n = images.shape[0]
    if n % 2:
        raise MixingError(f"intra-batch mixing needs an even batch size, got {n}")
    return n


def sample_lambdas(spec: MixSpec, n: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """Draw mixing coefficients from Beta(alpha, alpha), one per sample or one shared."""
    if not spec.alpha > 0:
        raise MixingError(f"alpha must be positive, got {spec.alpha}")
    if n % 2:
        raise MixingError(f"intra-batch mixing needs an even batch size, got {n}")
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    if spec.lambda_mode == "per_batch":
        return np.full(n, rng.beta(spec.alpha, spec.alpha))
    return rng.beta(spec.alpha, spec.alpha, size=n)


def mixup(images: np.ndarray, lambdas: np.ndarray) -> MixedBatch:
    n = _check_batch(images)
    lambdas = np.asarray(lambdas, dtype=np.float64)
    if lambdas.shape != (n,):
        raise MixingError(f"mixup: expected {n} lambdas, got shape {lambdas.shape}")
    pair = pairing(n)
    lam = lambdas.astype(images.dtype).reshape(n, 1, 1, 1)
    mixed = lam * images + (1 - lam) * images[pair]
    return MixedBatch(mixed, lambdas.copy(), pair, MIXUP)


def cutmix_boxes(lambdas: np.ndarray, height: int, width: int, rng: np.random.Generator,
                 shared: bool = False) -> np.ndarray:
    """Sample clipped CutMix boxes with side ratio sqrt(1 - lambda)."""
    n = len(lambdas)
    boxes = np.zeros((n, 4), dtype=np.int64)
    m = 1 if shared else n
    cy = rng.integers(0, height, size=m)
    cx = rng.integers(0, width, size=m)
    for i in range(n):
        k = 0 if shared else i
        ratio = np.sqrt(1.0 - lambdas[k])
        ch, cw = int(height * ratio), int(width * ratio)
        top, left = cy[k] - ch // 2, cx[k] - cw // 2
        t, b = np.clip([top, top + ch], 0, height)
        l, r = np.clip([left, left + cw], 0, width)
        boxes[i] = (t, l, b - t, r - l)
    return boxes


def box_lambdas(boxes: np.ndarray, height: int, width: int) -> np.ndarray:
    return 1.0 - (boxes[:, 2] * boxes[:, 3]) / float(height * width)


def paste_boxes(images: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    """Copy each box region of the paired image into image ``i``."""
    n = _check_batch(images)
    pair = pairing(n)
    out = images.copy()
    for i, (t, l, h, w) in enumerate(boxes):
        if h and w:
            out[i, :, t : t + h, l : l + w] = images[pair[i], :, t : t + h, l : l + w]
    return out


def cutmix(images: np.ndarray, lambdas: np.ndarray, rng: np.random.Generator,
           boxes: np.ndarray | None = None, shared: bool = False) -> MixedBatch:
    """Regional mixing; the returned lambdas are recomputed from the clipped boxes.

    Pass ``boxes`` to reuse the geometry of an earlier call (the second view).
    """
    n, _, h, w = images.shape
    _check_batch(images)
    if boxes is None:
        lambdas = np.asarray(lambdas, dtype=np.float64)
        if lambdas.shape != (n,):
            raise MixingError(f"cutmix: expected {n} lambdas, got shape {lambdas.shape}")
        boxes = cutmix_boxes(lambdas, h, w, rng, shared=shared)
    mixed = paste_boxes(images, boxes)
    return MixedBatch(mixed, box_lambdas(boxes, h, w), pairing(n), CUTMIX, boxes)


def resize_bilinear(images: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of ``[..., H, W]`` arrays using half-pixel centres."""
    h, w = images.shape[-2:]
    if out_h < 1 or out_w < 1:
        raise MixingError(f"resize target {out_h}x{out_w} is smaller than one pixel")

    def coords(n_out, n_in):
        c = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        c = np.clip(c, 0, n_in - 1)
        lo = np.floor(c).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, (c - lo)

    y0, y1, wy = coords(out_h, h)
    x0, x1, wx = coords(out_w, w)
    wy = wy.astype(images.dtype)[:, None]
    wx = wx.astype(images.dtype)[None, :]
    top = images[..., y0, :][..., x0] * (1 - wx) + images[..., y0, :][..., x1] * wx
    bot = images[..., y1, :][..., x0] * (1 - wx) + images[..., y1, :][..., x1] * wx
    return top * (1 - wy) + bot * wy


def resizemix_boxes(n: int, height: int, width: int, rng: np.random.Generator,
                    patch_range=DEFAULT_PATCH_RANGE, shared: bool = False) -> np.ndarray:
    """Boxes for pasting: box ``i`` holds the resized image ``n-1-i``.

    Patch sides are drawn per source image, so target ``i`` gets the size
    drawn for its partner.
    """
    r_min, r_max = patch_range
    if not 0 < r_min <= r_max < 1:
        raise MixingError(f"patch_range must satisfy 0 < r_min <= r_max < 1, got {patch_range}")
    if n % 2:
        raise MixingError(f"intra-batch mixing needs an even batch size, got {n}")
    ratios = rng.uniform(r_min, r_max, size=1 if shared else n)
    if shared:
        ratios = np.repeat(ratios, n)
    # at least one pixel; lambda is taken from the realised box either way
    ph = np.maximum((ratios * height).astype(np.int64), 1)
    pw = np.maximum((ratios * width).astype(np.int64), 1)
    pair = pairing(n)
    ph, pw = ph[pair], pw[pair]
    top = rng.integers(0, height - ph + 1)
    left = rng.integers(0, width - pw + 1)
    if shared:
        top[:], left[:] = top[0], left[0]
    return np.stack([top, left, ph, pw], axis=1)


def resizemix(images: np.ndarray, rng: np.random.Generator, patch_range=DEFAULT_PATCH_RANGE,
              boxes: np.ndarray | None = None, shared: bool = False) -> MixedBatch:
    """Paste the whole paired image, resized, at a random location of each image."""
    n, _, h, w = images.shape
    _check_batch(images)
    if boxes is None:
        boxes = resizemix_boxes(n, h, w, rng, patch_range, shared=shared)
    if (boxes[:, 2] < 1).any() or (boxes[:, 3] < 1).any():
        raise MixingError("resizemix: patch smaller than one pixel")
    pair = pairing(n)
    out = images.copy()
    for i, (t, l, ph, pw) in enumerate(boxes):
        out[i, :, t : t + ph, l : l + pw] = resize_bilinear(images[pair[i]], int(ph), int(pw))
    return MixedBatch(out, box_lambdas(boxes, h, w), pair, RESIZEMIX, boxes)


def scale_boxes(boxes: np.ndarray, factor: int) -> np.ndarray:
    """Map boxes to an image ``factor`` times larger; area ratios are preserved exactly."""
    return boxes * int(factor)


def select_strategy(rng: np.random.Generator, enabled) -> str:
    enabled = set(enabled or ())
    if not enabled:
        raise MixingError("no mixing strategy enabled")
    for s in enabled:
        if s not in STRATEGIES:
            raise MixingError(f"unknown mixing strategy {s!r}")
    enabled = sorted(enabled, key=STRATEGIES.index)
    return enabled[int(rng.integers(len(enabled)))]


def compute_lambda_c(lambdas: np.ndarray, pair_of: np.ndarray | None = None) -> np.ndarray:
    """Shared-source coefficient of each mixed pair:
    ``min(l_i, 1 - l_j) + min(1 - l_i, l_j)`` with ``j`` the partner of ``i``."""
    lam = np.asarray(lambdas, dtype=np.float64)
    if pair_of is None:
        pair_of = pairing(len(lam))
    other = lam[pair_of]
    return np.minimum(lam, 1 - other) + np.minimum(1 - lam, other)


def mix_views(x: np.ndarray, x_prime: np.ndarray, strategy: str, rng: np.random.Generator,
              spec: MixSpec | None = None, patch_range=DEFAULT_PATCH_RANGE,
              prime_scale: int = 1) -> tuple[MixedBatch, MixedBatch]:
    """Mix two views of one batch with one coefficient per index and shared geometry.

    ``prime_scale`` is the size ratio of ``x_prime`` to ``x`` (e.g. 2 when ``x``
    holds half-resolution local crops); regional boxes are scaled to match.
    """
    spec = spec or MixSpec(strategy=strategy, alpha=DEFAULT_ALPHA[strategy])
    n = _check_batch(x)
    shared = spec.lambda_mode == "per_batch"
    if strategy == MIXUP:
        lam = sample_lambdas(spec, n, rng)
        return mixup(x, lam), mixup(x_prime, lam)
    if strategy == CUTMIX:
        lam = sample_lambdas(spec, n, rng)
        a = cutmix(x, lam, rng, shared=shared)
        b = cutmix(x_prime, lam, rng, boxes=scale_boxes(a.patch_boxes, prime_scale))
        return a, b
    if strategy == RESIZEMIX:
        a = resizemix(x, rng, patch_range, shared=shared)
        b = resizemix(x_prime, rng, patch_range, boxes=scale_boxes(a.patch_boxes, prime_scale))
        return a, b
    raise MixingError(f"unknown mixing strategy {strategy!r}")
