"""Synthetic desk-scale dataset, netpbm image IO, augmentation, and
test-time augmentation.

Every sample is a deterministic function of (seed, index): images are RGB
float maps in [0, 1], masks are integer class maps with 0 = background
("gum"-like gradient), 1 = bright overlapping ellipses ("teeth"), and
2 = one irregular dark blob ("tongue"). Speckle noise and bright specks
are applied to the image only, never the mask.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .decoder import Prompt
from .rng import Rng


@dataclass
class SegSample:
    image: np.ndarray          # (3, H, W) float64 in [0, 1]
    mask: np.ndarray           # (H, W) int64 in 0..K-1
    prompt: Prompt | None = None


# ---------------------------------------------------------------------------
# synthetic generation


def _ellipse_mask(yy, xx, cy, cx, ry, rx, theta):
    ct, st = np.cos(theta), np.sin(theta)
    u = (yy - cy) * ct + (xx - cx) * st
    v = -(yy - cy) * st + (xx - cx) * ct
    return (u / ry) ** 2 + (v / rx) ** 2 <= 1.0


def _blob_mask(yy, xx, cy, cx, r0, coeffs, phases):
    ang = np.arctan2(yy - cy, xx - cx)
    radius = r0 * (1.0 + sum(a * np.sin((k + 2) * ang + p)
                             for k, (a, p) in enumerate(zip(coeffs, phases))))
    dist = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    return dist <= radius


def gen_sample(seed, index, size=(64, 64), n_classes=3):
    """One deterministic sample for (seed, index)."""
    h, w = size
    if h < 32 or w < 32:
        raise ValueError(f"size must be >= 32 in both extents, got {h}x{w}")
    rng = Rng(seed).split("sample").split(index)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)

    # background: tilted gradient between two gum tones
    angle = rng.uniform((), 0, 2 * np.pi)
    ramp = ((yy / h) * np.cos(angle) + (xx / w) * np.sin(angle) + 1.0) / 2.0
    tone_a = np.array([0.60, 0.28, 0.32]) + rng.uniform((3,), -0.05, 0.05)
    tone_b = np.array([0.75, 0.45, 0.48]) + rng.uniform((3,), -0.05, 0.05)
    image = tone_a[:, None, None] * (1 - ramp) + tone_b[:, None, None] * ramp
    mask = np.zeros((h, w), dtype=np.int64)

    # tongue: one irregular blob in the lower half
    cy = rng.uniform((), 0.62 * h, 0.85 * h)
    cx = rng.uniform((), 0.30 * w, 0.70 * w)
    r0 = rng.uniform((), 0.16, 0.24) * min(h, w)
    coeffs = rng.uniform((3,), 0.04, 0.16)
    phases = rng.uniform((3,), 0, 2 * np.pi)
    blob = _blob_mask(yy, xx, cy, cx, r0, coeffs, phases)
    tongue_tone = np.array([0.55, 0.15, 0.20]) + rng.uniform((3,), -0.04, 0.04)
    image[:, blob] = tongue_tone[:, None]
    mask[blob] = 2

    # teeth: 4-8 overlapping bright ellipses along an upper arc
    n_teeth = int(rng.integers(4, 9))
    arc_y = rng.uniform((), 0.25 * h, 0.45 * h)
    for i in range(n_teeth):
        frac = (i + 0.5) / n_teeth
        cy_t = arc_y + 0.12 * h * np.sin(np.pi * frac) * rng.uniform((), 0.5, 1.5) \
            - 0.08 * h * rng.uniform()
        cx_t = (0.12 + 0.76 * frac) * w + rng.uniform((), -0.04, 0.04) * w
        ry = rng.uniform((), 0.07, 0.12) * h
        rx = rng.uniform((), 0.05, 0.09) * w
        theta = rng.uniform((), -0.4, 0.4)
        tooth = _ellipse_mask(yy, xx, cy_t, cx_t, ry, rx, theta)
        shade = rng.uniform((), 0.78, 0.93)
        tooth_tone = np.array([shade, shade, shade * 0.96]) + rng.uniform((3,), -0.02, 0.02)
        image[:, tooth] = tooth_tone[:, None]
        mask[tooth] = 1

    # image-only corruption: multiplicative speckle plus bright specks
    speckle = 1.0 + 0.04 * rng.normal((h, w))
    image *= speckle[None]
    n_specks = int(rng.integers(4, 16))
    rows = rng.integers(0, h, (n_specks,))
    cols = rng.integers(0, w, (n_specks,))
    vals = rng.uniform((n_specks,), 0.85, 1.0)
    image[:, rows, cols] = vals[None, :]
    np.clip(image, 0.0, 1.0, out=image)
    return SegSample(image=image, mask=mask)


def gen_synthetic(seed, count, size=(64, 64), n_classes=3):
    """Deterministic list of samples; same arguments give identical bytes."""
    return [gen_sample(seed, i, size, n_classes) for i in range(count)]


def derive_prompt(mask, rng: Rng, box_prob=0.5, n_negative=2) -> Prompt:
    """One positive point per present foreground class, negatives from the
    background, and optionally the bounding box of one foreground class."""
    points = []
    boxes = []
    fg = [c for c in np.unique(mask) if c != 0]
    for c in fg:
        rows, cols = np.nonzero(mask == c)
        i = int(rng.integers(0, len(rows)))
        points.append((int(rows[i]), int(cols[i]), 1))
    rows, cols = np.nonzero(mask == 0)
    for _ in range(min(n_negative, len(rows))):
        i = int(rng.integers(0, len(rows)))
        points.append((int(rows[i]), int(cols[i]), -1))
    if fg and rng.uniform() < box_prob:
        c = fg[int(rng.integers(0, len(fg)))]
        rows, cols = np.nonzero(mask == c)
        boxes.append((int(rows.min()), int(cols.min()), int(rows.max()), int(cols.max())))
    return Prompt(points=points, boxes=boxes)


# ---------------------------------------------------------------------------
# netpbm files


class PnmError(ValueError):
    """Malformed netpbm data; the message carries the byte offset."""


def _write_pnm(magic, pixels):
    h, w = pixels.shape[:2]
    header = f"{magic}\n{w} {h}\n255\n".encode("ascii")
    return header + pixels.astype(np.uint8).tobytes()


def write_ppm(path, image_u8):
    """image_u8: (H, W, 3) uint8, binary P6, maxval 255."""
    with open(path, "wb") as f:
        f.write(_write_pnm("P6", image_u8))


def write_pgm(path, gray_u8):
    """gray_u8: (H, W) uint8, binary P5, maxval 255."""
    with open(path, "wb") as f:
        f.write(_write_pnm("P5", gray_u8[..., None]))


def _parse_pnm(data, expect_magic):
    if data[:2] != expect_magic.encode("ascii"):
        raise PnmError(f"bad magic at byte 0: expected {expect_magic}, got {data[:2]!r}")
    pos = 2
    fields = []
    while len(fields) < 3:
        if pos >= len(data):
            raise PnmError(f"truncated header at byte {pos}")
        if not data[pos:pos + 1].isspace():
            raise PnmError(f"expected whitespace at byte {pos}")
        pos += 1
        start = pos
        while pos < len(data) and data[pos:pos + 1].isdigit():
            pos += 1
        if pos == start:
            raise PnmError(f"expected integer at byte {start}")
        fields.append(int(data[start:pos]))
    w, h, maxval = fields
    if maxval != 255:
        raise PnmError(f"unsupported maxval {maxval} at byte {pos - len(str(maxval))}")
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise PnmError(f"expected single whitespace before payload at byte {pos}")
    pos += 1
    channels = 3 if expect_magic == "P6" else 1
    need = w * h * channels
    payload = data[pos:pos + need]
    if len(payload) < need:
        raise PnmError(f"truncated payload at byte {pos + len(payload)}: "
                       f"need {need} bytes, have {len(payload)}")
    if len(data) > pos + need:
        raise PnmError(f"trailing data at byte {pos + need}")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, channels)
    return arr


def read_ppm(path):
    """Returns (H, W, 3) uint8."""
    with open(path, "rb") as f:
        return _parse_pnm(f.read(), "P6")


def read_pgm(path):
    """Returns (H, W) uint8."""
    with open(path, "rb") as f:
        return _parse_pnm(f.read(), "P5")[..., 0]


def image_to_u8(image):
    """(3, H, W) floats in [0,1] -> (H, W, 3) uint8, round-half-away."""
    return np.clip(np.floor(image * 255.0 + 0.5), 0, 255).astype(np.uint8).transpose(1, 2, 0)


def u8_to_image(arr):
    """(H, W, 3) uint8 -> (3, H, W) float64 in [0,1]."""
    return arr.astype(np.float64).transpose(2, 0, 1) / 255.0


# ---------------------------------------------------------------------------
# dataset directory layout


@dataclass
class DatasetMeta:
    seed: int
    count: int
    size: tuple
    n_classes: int = 3


def save_dataset(samples, out_dir, meta: DatasetMeta):
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "masks"), exist_ok=True)
    for i, s in enumerate(samples):
        write_ppm(os.path.join(out_dir, "images", f"{i:06d}.ppm"), image_to_u8(s.image))
        write_pgm(os.path.join(out_dir, "masks", f"{i:06d}.pgm"), s.mask.astype(np.uint8))
    with open(os.path.join(out_dir, "meta.json"), "w") as f:
        json.dump({"seed": meta.seed, "count": meta.count,
                   "size": list(meta.size), "n_classes": meta.n_classes}, f)


def load_dataset(data_dir):
    """Returns (samples, DatasetMeta)."""
    with open(os.path.join(data_dir, "meta.json")) as f:
        raw = json.load(f)
    meta = DatasetMeta(raw["seed"], raw["count"], tuple(raw["size"]), raw["n_classes"])
    samples = []
    for i in range(meta.count):
        img = u8_to_image(read_ppm(os.path.join(data_dir, "images", f"{i:06d}.ppm")))
        mask = read_pgm(os.path.join(data_dir, "masks", f"{i:06d}.pgm")).astype(np.int64)
        samples.append(SegSample(image=img, mask=mask))
    return samples, meta


# ---------------------------------------------------------------------------
# augmentation


def _resize_bilinear(image, out_h, out_w):
    c, h, w = image.shape
    if (h, w) == (out_h, out_w):
        return image.copy()
    sy = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0, h - 1)
    sx = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0, w - 1)
    y0 = np.floor(sy).astype(int)
    x0 = np.floor(sx).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (sy - y0)[None, :, None]
    wx = (sx - x0)[None, None, :]
    g = lambda ys, xs: image[:, ys[:, None], xs[None, :]]
    return ((1 - wy) * (1 - wx) * g(y0, x0) + (1 - wy) * wx * g(y0, x1)
            + wy * (1 - wx) * g(y1, x0) + wy * wx * g(y1, x1))


def _resize_nearest(mask, out_h, out_w):
    h, w = mask.shape
    if (h, w) == (out_h, out_w):
        return mask.copy()
    ys = np.clip(np.floor((np.arange(out_h) + 0.5) * h / out_h), 0, h - 1).astype(int)
    xs = np.clip(np.floor((np.arange(out_w) + 0.5) * w / out_w), 0, w - 1).astype(int)
    return mask[ys[:, None], xs[None, :]]


def augment(sample: SegSample, seed) -> SegSample:
    """Training augmentation: flips, area crop with resize back, and
    brightness/contrast jitter on the image only.

    Each transform fires when its gate draw is >= 0.5, so a seed whose first
    draws all fall below the gates yields the identity transform exactly.
    Geometric operations hit image and mask identically; the mask is resized
    nearest-neighbor and stays integer-valued.
    """
    rng = Rng(seed)
    image, mask = sample.image, sample.mask
    h, w = mask.shape
    if rng.uniform() >= 0.5:  # horizontal flip
        image = image[:, :, ::-1]
        mask = mask[:, ::-1]
    if rng.uniform() >= 0.5:  # vertical flip
        image = image[:, ::-1, :]
        mask = mask[::-1, :]
    if rng.uniform() >= 0.5:  # crop to 0.8-1.0 of the area, then resize back
        frac = np.sqrt(rng.uniform((), 0.8, 1.0))
        ch = max(1, int(round(h * frac)))
        cw = max(1, int(round(w * frac)))
        r0 = int(rng.integers(0, h - ch + 1))
        c0 = int(rng.integers(0, w - cw + 1))
        image = _resize_bilinear(np.ascontiguousarray(image[:, r0:r0 + ch, c0:c0 + cw]),
                                 h, w)
        mask = _resize_nearest(mask[r0:r0 + ch, c0:c0 + cw], h, w)
    if rng.uniform() >= 0.5:  # brightness/contrast jitter, +-10%
        contrast = 1.0 + rng.uniform((), -0.1, 0.1)
        bright = rng.uniform((), -0.1, 0.1)
        mean = image.mean()
        image = np.clip(mean + (image - mean) * contrast + bright, 0.0, 1.0)
    return SegSample(image=np.ascontiguousarray(image),
                     mask=np.ascontiguousarray(mask), prompt=sample.prompt)


# ---------------------------------------------------------------------------
# evaluation perturbations


def add_gaussian_noise(image, std_255, rng: Rng):
    """Pixel noise with the stated std in 0-255 intensity units, applied
    before renormalization and clipped to the valid range."""
    noisy = image * 255.0 + rng.normal(image.shape, std=std_255)
    return np.clip(noisy, 0.0, 255.0) / 255.0


def rotate_sample(image, mask, degrees, background=0):
    """Rotate about the center: bilinear for the image (zero fill), nearest
    neighbor for the mask (background-class fill)."""
    h, w = mask.shape
    theta = np.deg2rad(degrees)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    # inverse map: rotate output coords by -theta around the center
    ct, st = np.cos(theta), np.sin(theta)
    sy = cy + (yy - cy) * ct + (xx - cx) * st
    sx = cx - (yy - cy) * st + (xx - cx) * ct
    inside = (sy >= 0) & (sy <= h - 1) & (sx >= 0) & (sx <= w - 1)

    ny = np.clip(np.rint(sy).astype(int), 0, h - 1)
    nx = np.clip(np.rint(sx).astype(int), 0, w - 1)
    out_mask = np.where(inside, mask[ny, nx], background)

    y0 = np.clip(np.floor(sy).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(sx).astype(int), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(sy, 0, h - 1) - y0
    wx = np.clip(sx, 0, w - 1) - x0
    vals = ((1 - wy) * (1 - wx) * image[:, y0, x0] + (1 - wy) * wx * image[:, y0, x1]
            + wy * (1 - wx) * image[:, y1, x0] + wy * wx * image[:, y1, x1])
    out_image = np.where(inside[None], vals, 0.0)
    return out_image, out_mask.astype(mask.dtype)


# ---------------------------------------------------------------------------
# test-time augmentation


def _orient(arr, flip_mode, rot):
    """Apply flip then rotation to trailing (H, W) axes."""
    if flip_mode in ("h", "hv"):
        arr = arr[..., :, ::-1]
    if flip_mode in ("v", "hv"):
        arr = arr[..., ::-1, :]
    if rot:
        arr = np.rot90(arr, k=rot // 90, axes=(-2, -1))
    return np.ascontiguousarray(arr)


def _unorient(arr, flip_mode, rot):
    if rot:
        arr = np.rot90(arr, k=-(rot // 90), axes=(-2, -1))
    if flip_mode in ("v", "hv"):
        arr = arr[..., ::-1, :]
    if flip_mode in ("h", "hv"):
        arr = arr[..., :, ::-1]
    return np.ascontiguousarray(arr)


def tta_variants(height, width):
    """Flip x rotation grid: {identity,h,v,hv} x {0,180}, plus 90/270 for
    square inputs."""
    variants = [(f, r) for f in ("none", "h", "v", "hv") for r in (0, 180)]
    if height == width:
        variants += [("none", 90), ("none", 270)]
    return variants


def tta_predict(predict_logits, image):
    """Average class probabilities over inverse-transformed predictions.

    predict_logits: (3, H, W) image -> (K, H, W) logits. Returns (K, H, W)
    probabilities summing to 1 per pixel.
    """
    h, w = image.shape[-2:]
    acc = None
    variants = tta_variants(h, w)
    for flip_mode, rot in variants:
        logits = predict_logits(_orient(image, flip_mode, rot))
        probs = T.softmax(_unorient(logits, flip_mode, rot), axis=0)
        acc = probs if acc is None else acc + probs
    return acc / len(variants)
