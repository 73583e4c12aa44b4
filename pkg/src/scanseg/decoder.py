"""Prompt rasterization and the top-down fusion decoder producing per-class
logits at input resolution.

Prompts are encoded as three dense conditioning channels at the 4x stage
(positive points, negative points, box interiors) and concatenated to the
fused feature map; the decoder itself is attention-free.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import tensor as T
from .autodiff import value_of
from .encoder import BnParams, FeaturePyramid, apply_bn, init_bn, kaiming_conv
from .rng import Rng


class PromptError(ValueError):
    """Raised for prompt coordinates outside the image."""


@dataclass
class Prompt:
    """Point/box guidance in input-image pixel coordinates.

    points: (row, col, polarity) with polarity +1 (foreground) or -1;
    boxes: (r0, c0, r1, c1) inclusive corners, r0 <= r1 and c0 <= c1.
    """

    points: list = None
    boxes: list = None

    def __post_init__(self):
        self.points = list(self.points or [])
        self.boxes = list(self.boxes or [])


def encode_prompts(prompt: Prompt, height, width, pad_multiple=16):
    """Rasterize a prompt into (3, H'/4, W'/4) conditioning channels, where
    H', W' are the extents after padding to the encoder's multiple.

    Channel 0 marks positive points, channel 1 negative points (value 1 at
    the nearest 4x cell), channel 2 fills box interiors. An empty prompt
    gives an all-zero tensor.
    """
    ph = height + ((-height) % pad_multiple)
    pw = width + ((-width) % pad_multiple)
    out = np.zeros((3, ph // 4, pw // 4))
    for (r, c, polarity) in prompt.points:
        if not (0 <= r < height and 0 <= c < width):
            raise PromptError(f"point ({r},{c}) outside image {height}x{width}")
        if polarity not in (1, -1):
            raise PromptError(f"point polarity must be +1 or -1, got {polarity}")
        out[0 if polarity > 0 else 1, int(r) // 4, int(c) // 4] = 1.0
    for (r0, c0, r1, c1) in prompt.boxes:
        if not (0 <= r0 <= r1 < height and 0 <= c0 <= c1 < width):
            raise PromptError(
                f"box ({r0},{c0},{r1},{c1}) invalid for image {height}x{width}")
        out[2, int(r0) // 4:int(r1) // 4 + 1, int(c0) // 4:int(c1) // 4 + 1] = 1.0
    return out


@dataclass
class ConvBn:
    w: object
    b: object
    bn: BnParams


def _conv_bn(cin, cout, rng, param_cls, dtype, k=3):
    return ConvBn(param_cls(kaiming_conv(rng, cout, cin, k, k, dtype)),
                  param_cls(np.zeros(cout, dtype=dtype)),
                  init_bn(cout, param_cls, dtype))


@dataclass
class DecoderParams:
    fuse1_w: object
    fuse1_b: object
    fuse2_w: object
    fuse2_b: object
    refine1: ConvBn
    refine2: ConvBn
    prompt_w: object
    prompt_b: object
    head: ConvBn
    out_w: object
    out_b: object


def init_decoder(cfg, rng: Rng, param_cls, dtype):
    fw = cfg.fusion_width
    return DecoderParams(
        fuse1_w=param_cls(kaiming_conv(rng.split("f1"), fw, cfg.c3 + cfg.c2, 1, 1, dtype)),
        fuse1_b=param_cls(np.zeros(fw, dtype=dtype)),
        fuse2_w=param_cls(kaiming_conv(rng.split("f2"), fw, fw + cfg.c1, 1, 1, dtype)),
        fuse2_b=param_cls(np.zeros(fw, dtype=dtype)),
        refine1=_conv_bn(fw, fw, rng.split("r1"), param_cls, dtype),
        refine2=_conv_bn(fw, fw, rng.split("r2"), param_cls, dtype),
        prompt_w=param_cls(kaiming_conv(rng.split("p"), fw, fw + 3, 1, 1, dtype)),
        prompt_b=param_cls(np.zeros(fw, dtype=dtype)),
        head=_conv_bn(fw, cfg.head_width, rng.split("h"), param_cls, dtype),
        out_w=param_cls(kaiming_conv(rng.split("o"), cfg.n_classes, cfg.head_width,
                                     1, 1, dtype)),
        out_b=param_cls(np.zeros(cfg.n_classes, dtype=dtype)),
    )


def fuse_pyramid(pyr: FeaturePyramid, dec: DecoderParams, training=False,
                 use_ldf=True):
    """Top-down fusion to a single map at 4x resolution with the unified
    channel width. With use_ldf off the low-level maps are replaced by zeros
    of the same shape, keeping the parameter layout identical."""
    f, f_mf, f_lf = pyr.f, pyr.f_mf, pyr.f_lf
    bh, _, h16, w16 = value_of(f).shape
    mh, mw = value_of(f_mf).shape[-2:]
    lh, lw = value_of(f_lf).shape[-2:]
    if (2 * h16, 2 * w16) != (mh, mw) or (2 * mh, 2 * mw) != (lh, lw):
        raise T.ShapeError(
            f"pyramid geometry inconsistent: {h16}x{w16} / {mh}x{mw} / {lh}x{lw}")
    if not use_ldf:
        f_mf = np.zeros_like(value_of(f_mf))
        f_lf = np.zeros_like(value_of(f_lf))
    x = ad.bilinear_upsample2x(f)
    x = ad.conv2d(ad.concat([x, f_mf], axis=1), dec.fuse1_w, dec.fuse1_b)
    x = ad.bilinear_upsample2x(x)
    x = ad.conv2d(ad.concat([x, f_lf], axis=1), dec.fuse2_w, dec.fuse2_b)
    x = ad.silu(apply_bn(ad.conv2d(x, dec.refine1.w, dec.refine1.b, padding=1),
                         dec.refine1.bn, training))
    x = ad.silu(apply_bn(ad.conv2d(x, dec.refine2.w, dec.refine2.b, padding=1),
                         dec.refine2.bn, training))
    return x


def predict(pyr: FeaturePyramid, prompt_map, dec: DecoderParams, out_hw,
            training=False, use_ldf=True, dropout=0.1, rng: Rng | None = None):
    """Fused features + prompt conditioning -> logits at the original
    resolution (encoder padding cropped away).

    prompt_map is (B, 3, H'/4, W'/4) or None for an unconditioned forward.
    Dropout applies to the prompt projection output during training, as a
    pre-sampled mask so the tape stays deterministic per step.
    """
    fused = fuse_pyramid(pyr, dec, training, use_ldf)
    b, _, h4, w4 = value_of(fused).shape
    if prompt_map is None:
        prompt_map = np.zeros((b, 3, h4, w4), dtype=value_of(fused).dtype)
    if value_of(prompt_map).shape != (b, 3, h4, w4):
        raise T.ShapeError(
            f"prompt map shape {value_of(prompt_map).shape} != ({b},3,{h4},{w4})")
    x = ad.conv2d(ad.concat([fused, prompt_map], axis=1), dec.prompt_w, dec.prompt_b)
    if training and dropout > 0 and rng is not None:
        keep = (rng.uniform(value_of(x).shape) >= dropout).astype(
            value_of(x).dtype) / (1.0 - dropout)
        x = ad.mul(x, keep)
    x = ad.bilinear_upsample2x(x)
    x = ad.silu(apply_bn(ad.conv2d(x, dec.head.w, dec.head.b, padding=1),
                         dec.head.bn, training))
    x = ad.bilinear_upsample2x(x)
    logits = ad.conv2d(x, dec.out_w, dec.out_b)
    h, w = out_hw
    if value_of(logits).shape[-2:] != (h, w):
        logits = ad.crop2d(logits, h, w)
    return logits
