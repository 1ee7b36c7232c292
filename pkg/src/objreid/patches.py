"""Contextual square patches around 2D detections, plus the training-time
augmentations (center/scale jitter, rotation, color jitter, random erasing).

Images are numpy uint8 arrays of shape (height, width, 3), RGB, row-major.
Geometric resampling is bilinear with the half-pixel convention
(src = (dst + 0.5) * scale - 0.5, edges clamped); photometric ops run in
float64 on the resized patch and are rounded back to uint8 once.
All randomness comes from the caller-supplied numpy Generator, so
(image, bbox, config, seed) fully determines the output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, GeometryError
from .geometry import BBox2D


@dataclass(frozen=True)
class PatchSpec:
    """Crop geometry of one contextual patch (center in source-image pixels)."""

    center: tuple
    side: int
    source_obs: str = ""

    def __post_init__(self):
        if self.side <= 0:
            raise GeometryError("patch side must be positive")


@dataclass(frozen=True)
class AugmentConfig:
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    hue: float = 0.1
    center_jitter: float = 0.1
    scale_min: float = 0.9
    scale_max: float = 1.1
    max_rotation: float = 10.0
    erase_min: float = 0.02
    erase_max: float = 0.2
    seed: int = 0

    def __post_init__(self):
        for name in ("brightness", "contrast", "saturation", "hue",
                     "center_jitter", "max_rotation", "erase_min", "erase_max"):
            if getattr(self, name) < 0:
                raise ConfigError(f"augment range {name} must be nonnegative")
        if not (self.scale_min <= 1.0 <= self.scale_max):
            raise ConfigError("scale jitter range must contain 1.0")
        if self.erase_min > self.erase_max:
            raise ConfigError("erase_min must be <= erase_max")

    @staticmethod
    def disabled():
        """Identity configuration: augment() == crop_square() + resize_patch()."""
        return AugmentConfig(brightness=0.0, contrast=0.0, saturation=0.0, hue=0.0,
                             center_jitter=0.0, scale_min=1.0, scale_max=1.0,
                             max_rotation=0.0, erase_min=0.0, erase_max=0.0)


def _round_half_up(x):
    return int(math.floor(x + 0.5))


def _check_image(img):
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ValueError(f"expected uint8 RGB image (h, w, 3), got {img.shape} {img.dtype}")
    return img


def _extract(img, x0, y0, w, h):
    """Pixel window [x0, x0+w) x [y0, y0+h); out-of-frame area is black."""
    out = np.zeros((h, w, 3), dtype=np.uint8)
    ih, iw = img.shape[:2]
    sx0, sy0 = max(x0, 0), max(y0, 0)
    sx1, sy1 = min(x0 + w, iw), min(y0 + h, ih)
    if sx0 < sx1 and sy0 < sy1:
        out[sy0 - y0:sy1 - y0, sx0 - x0:sx1 - x0] = img[sy0:sy1, sx0:sx1]
    return out


def _crop_centered(img, cx, cy, side_px):
    x0 = _round_half_up(cx - side_px / 2.0)
    y0 = _round_half_up(cy - side_px / 2.0)
    return _extract(img, x0, y0, side_px, side_px)


def crop_square(img, bbox: BBox2D, margin):
    """Square context crop with side d = margin + max(bbox w, bbox h).

    The patch is centered at the bbox center, side rounded to the nearest
    integer pixel (ties up); pixels outside the frame are black.
    """
    img = _check_image(img)
    if margin < 0:
        raise ValueError("margin must be nonnegative")
    d = max(1, _round_half_up(margin + max(bbox.width, bbox.height)))
    cx, cy = bbox.center
    return _crop_centered(img, cx, cy, d), PatchSpec((cx, cy), d)


def crop_rect(img, bbox: BBox2D):
    """Non-square ablation crop: exactly the bbox region (nearest-pixel)."""
    img = _check_image(img)
    x0, y0 = _round_half_up(bbox.x_min), _round_half_up(bbox.y_min)
    w = max(1, _round_half_up(bbox.width))
    h = max(1, _round_half_up(bbox.height))
    return _extract(img, x0, y0, w, h)


def resize_patch(patch, target):
    """Bilinear resize to target x target (half-pixel convention).

    Written in lerp form so a constant-color input stays constant bit-exactly;
    a same-size input is returned unchanged.
    """
    if target <= 0:
        raise ValueError("target size must be positive")
    patch = np.asarray(patch)
    h, w = patch.shape[:2]
    if h == target and w == target:
        return patch.copy()
    return _resample_bilinear(patch.astype(np.float64), target, target)


def _resample_axis_coords(n_src, n_dst):
    src = (np.arange(n_dst, dtype=np.float64) + 0.5) * (n_src / n_dst) - 0.5
    src = np.clip(src, 0.0, n_src - 1.0)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_src - 1)
    frac = src - i0
    return i0, i1, frac


def _resample_bilinear(fimg, out_h, out_w):
    h, w = fimg.shape[:2]
    y0, y1, fy = _resample_axis_coords(h, out_h)
    x0, x1, fx = _resample_axis_coords(w, out_w)
    fy = fy[:, None, None] if fimg.ndim == 3 else fy[:, None]
    fxv = fx[None, :, None] if fimg.ndim == 3 else fx[None, :]
    top = fimg[np.ix_(y0, x0)]
    top = top + fxv * (fimg[np.ix_(y0, x1)] - top)
    bot = fimg[np.ix_(y1, x0)]
    bot = bot + fxv * (fimg[np.ix_(y1, x1)] - bot)
    out = top + fy * (bot - top)
    return np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)


def _rotate_bilinear(patch, angle_deg):
    """Rotate about the patch center, black fill outside the source."""
    h, w = patch.shape[:2]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    th = math.radians(angle_deg)
    c, s = math.cos(th), math.sin(th)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    # inverse map: output pixel -> source location
    sx = c * (xs - cx) + s * (ys - cy) + cx
    sy = -s * (xs - cx) + c * (ys - cy) + cy
    valid = (sx >= 0) & (sx <= w - 1) & (sy >= 0) & (sy <= h - 1)
    sx = np.clip(sx, 0, w - 1)
    sy = np.clip(sy, 0, h - 1)
    x0 = np.floor(sx).astype(np.intp)
    y0 = np.floor(sy).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (sx - x0)[..., None]
    fy = (sy - y0)[..., None]
    fimg = patch.astype(np.float64)
    top = fimg[y0, x0]
    top = top + fx * (fimg[y0, x1] - top)
    bot = fimg[y1, x0]
    bot = bot + fx * (fimg[y1, x1] - bot)
    out = top + fy * (bot - top)
    out[~valid] = 0.0
    return np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)


def _luma(fimg):
    return 0.299 * fimg[..., 0] + 0.587 * fimg[..., 1] + 0.114 * fimg[..., 2]


def _rgb_to_hsv(fimg):
    r, g, b = fimg[..., 0], fimg[..., 1], fimg[..., 2]
    maxc = np.maximum(np.maximum(r, g), b)
    minc = np.minimum(np.minimum(r, g), b)
    v = maxc
    rng = maxc - minc
    sat = np.where(maxc > 0, rng / np.maximum(maxc, 1e-12), 0.0)
    rngs = np.maximum(rng, 1e-12)
    hr = np.where((maxc == r), ((g - b) / rngs) % 6.0, 0.0)
    hg = np.where((maxc == g) & (maxc != r), (b - r) / rngs + 2.0, 0.0)
    hb = np.where((maxc == b) & (maxc != r) & (maxc != g), (r - g) / rngs + 4.0, 0.0)
    hue = np.where(rng > 0, (hr + hg + hb) / 6.0, 0.0)
    return hue, sat, v


def _hsv_to_rgb(hue, sat, v):
    h6 = (hue % 1.0) * 6.0
    i = np.floor(h6).astype(np.intp) % 6
    f = h6 - np.floor(h6)
    p = v * (1.0 - sat)
    q = v * (1.0 - sat * f)
    t = v * (1.0 - sat * (1.0 - f))
    out = np.empty(v.shape + (3,), dtype=np.float64)
    for idx, (rr, gg, bb) in enumerate(((v, t, p), (q, v, p), (p, v, t),
                                        (p, q, v), (t, p, v), (v, p, q))):
        sel = i == idx
        out[sel, 0] = rr[sel]
        out[sel, 1] = gg[sel]
        out[sel, 2] = bb[sel]
    return out


def _color_jitter(patch, bfac, cfac, sfac, hdelta):
    """Brightness/contrast/saturation multiplicative, hue additive (fraction
    of a full turn). Ops with identity parameters are skipped so an identity
    configuration is bit-exact."""
    if bfac == 1.0 and cfac == 1.0 and sfac == 1.0 and hdelta == 0.0:
        return patch
    f = patch.astype(np.float64)
    if bfac != 1.0:
        f = f * bfac
    if cfac != 1.0:
        mean = float(_luma(np.clip(f, 0, 255)).mean())
        f = mean + (f - mean) * cfac
    if sfac != 1.0:
        l = _luma(np.clip(f, 0, 255))[..., None]
        f = l + (f - l) * sfac
    if hdelta != 0.0:
        hue, sat, v = _rgb_to_hsv(np.clip(f, 0, 255))
        f = _hsv_to_rgb(hue + hdelta, sat, v)
    return np.clip(np.floor(f + 0.5), 0, 255).astype(np.uint8)


def _erase_square(patch, area_frac, rng):
    """Overwrite one random square of ~area_frac of the patch with uniform
    noise; returns the patch and the (x, y, side) actually erased."""
    h, w = patch.shape[:2]
    side = _round_half_up(math.sqrt(area_frac * h * w))
    side = max(1, min(side, min(h, w)))
    x0 = int(rng.integers(0, w - side + 1))
    y0 = int(rng.integers(0, h - side + 1))
    noise = rng.integers(0, 256, size=(side, side, 3), dtype=np.int64).astype(np.uint8)
    out = patch.copy()
    out[y0:y0 + side, x0:x0 + side] = noise
    return out, (x0, y0, side)


def augment(img, bbox: BBox2D, cfg: AugmentConfig, rng, margin=10.0,
            target=224, square=True):
    """Randomized contextual patch: jittered crop, rotation, resize, color
    jitter, random erasing, in that fixed order.

    Returns (patch, params) where params records every applied value so the
    transform can be replayed. With all ranges zero the output is bit
    identical to crop_square + resize_patch.
    """
    img = _check_image(img)
    jx = float(rng.uniform(-cfg.center_jitter, cfg.center_jitter))
    jy = float(rng.uniform(-cfg.center_jitter, cfg.center_jitter))
    scale = float(rng.uniform(cfg.scale_min, cfg.scale_max))
    angle = float(rng.uniform(-cfg.max_rotation, cfg.max_rotation))
    bfac = float(rng.uniform(1.0 - cfg.brightness, 1.0 + cfg.brightness))
    cfac = float(rng.uniform(1.0 - cfg.contrast, 1.0 + cfg.contrast))
    sfac = float(rng.uniform(1.0 - cfg.saturation, 1.0 + cfg.saturation))
    hdelta = float(rng.uniform(-cfg.hue, cfg.hue))

    d_real = margin + max(bbox.width, bbox.height)
    cx, cy = bbox.center
    cx += jx * d_real
    cy += jy * d_real
    d_real *= scale

    if square:
        d = max(1, _round_half_up(d_real))
        patch = _crop_centered(img, cx, cy, d)
        crop_rec = {"center": [cx, cy], "side": d}
    else:
        patch = crop_rect(img, bbox)
        crop_rec = {"rect": [bbox.x_min, bbox.y_min, bbox.x_max, bbox.y_max]}

    if angle != 0.0:
        patch = _rotate_bilinear(patch, angle)
    patch = resize_patch(patch, target)
    patch = _color_jitter(patch, bfac, cfac, sfac, hdelta)

    erase_rec = None
    if cfg.erase_max > 0.0:
        area = float(rng.uniform(cfg.erase_min, cfg.erase_max))
        patch, (ex, ey, eside) = _erase_square(patch, area, rng)
        erase_rec = {"x": ex, "y": ey, "side": eside, "area_frac": area}

    params = {"crop": crop_rec, "angle": angle, "brightness": bfac,
              "contrast": cfac, "saturation": sfac, "hue": hdelta,
              "erase": erase_rec, "target": target}
    return patch, params


def foreground_filter(patch, mask, mode):
    """Zero out background (fg_only) or foreground (bg_only) pixels."""
    patch = _check_image(patch)
    mask = np.asarray(mask).astype(bool)
    if mask.shape != patch.shape[:2]:
        raise ValueError(f"mask shape {mask.shape} != patch shape {patch.shape[:2]}")
    if mode == "fg_only":
        return patch * mask[..., None].astype(np.uint8)
    if mode == "bg_only":
        return patch * (~mask)[..., None].astype(np.uint8)
    raise ValueError(f"unknown mode {mode!r} (expected fg_only or bg_only)")
