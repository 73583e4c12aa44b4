"""Three-stage hierarchical encoder: convolutional 4x and 8x stages producing
low-level features, then a 16x stage whose token mixer is a stack of
bidirectional sequence blocks with a pooled global-context pathway.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import seq2d
from . import tensor as T
from .autodiff import value_of
from .bsb import BsbParams, bsb_forward, droppath_mask, droppath_rates, init_bsb_params
from .rng import Rng


@dataclass
class FeaturePyramid:
    """Encoder outputs at 4x, 8x and 16x downsampling."""

    f_lf: object  # (B, C1, H/4,  W/4)
    f_mf: object  # (B, C2, H/8,  W/8)
    f: object     # (B, C3, H/16, W/16)


@dataclass
class BnParams:
    gamma: object
    beta: object
    mean: np.ndarray
    var: np.ndarray


def init_bn(channels, param_cls, dtype):
    return BnParams(param_cls(np.ones(channels, dtype=dtype)),
                    param_cls(np.zeros(channels, dtype=dtype)),
                    np.zeros(channels, dtype=dtype),
                    np.ones(channels, dtype=dtype))


def apply_bn(x, p: BnParams, training, momentum=0.1):
    """Batch norm folding fresh batch statistics into the running buffers."""
    if training:
        y, mu, var = ad.batch_norm2d_train(x, p.gamma, p.beta)
        p.mean[...] = (1 - momentum) * p.mean + momentum * mu
        p.var[...] = (1 - momentum) * p.var + momentum * var
        return y
    return ad.batch_norm2d_eval(x, p.mean, p.var, p.gamma, p.beta)


def kaiming_conv(rng: Rng, cout, cin_g, kh, kw, dtype):
    std = np.sqrt(2.0 / (cin_g * kh * kw))
    return rng.normal((cout, cin_g, kh, kw), std=std).astype(dtype)


@dataclass
class DownsampleParams:
    """Stride-2 3x3 conv followed by batch norm (+ silu applied by the caller)."""

    w: object
    b: object
    bn: BnParams


def init_downsample(cin, cout, rng, param_cls, dtype):
    return DownsampleParams(
        param_cls(kaiming_conv(rng, cout, cin, 3, 3, dtype)),
        param_cls(np.zeros(cout, dtype=dtype)),
        init_bn(cout, param_cls, dtype))


def downsample(x, p: DownsampleParams, training):
    return ad.silu(apply_bn(ad.conv2d(x, p.w, p.b, stride=2, padding=1), p.bn, training))


@dataclass
class ConvBlockParams:
    """Channel LN, 1x1 expand to 4C, depthwise 3x3, 1x1 back to C, residual."""

    ln_gamma: object
    ln_beta: object
    w_expand: object
    b_expand: object
    dw_kernel: object
    dw_bias: object
    w_project: object
    b_project: object


def init_conv_block(channels, rng: Rng, param_cls, dtype):
    hidden = 4 * channels
    return ConvBlockParams(
        ln_gamma=param_cls(np.ones(channels, dtype=dtype)),
        ln_beta=param_cls(np.zeros(channels, dtype=dtype)),
        w_expand=param_cls(kaiming_conv(rng, hidden, channels, 1, 1, dtype)),
        b_expand=param_cls(np.zeros(hidden, dtype=dtype)),
        dw_kernel=param_cls(kaiming_conv(rng, hidden, 1, 3, 3, dtype)),
        dw_bias=param_cls(np.zeros(hidden, dtype=dtype)),
        w_project=param_cls(kaiming_conv(rng, channels, hidden, 1, 1, dtype)),
        b_project=param_cls(np.zeros(channels, dtype=dtype)),
    )


def conv_block(x, p: ConvBlockParams):
    """Shape-preserving mixing block; with all conv weights and biases zero it
    reduces to the identity (only the residual survives)."""
    t = ad.transpose(x, (0, 2, 3, 1))
    t = ad.layer_norm(t, p.ln_gamma, p.ln_beta, eps=1e-6)
    t = ad.transpose(t, (0, 3, 1, 2))
    t = ad.conv2d(t, p.w_expand, p.b_expand)
    hidden = value_of(p.dw_kernel).shape[0]
    t = ad.conv2d(t, p.dw_kernel, p.dw_bias, padding=1, groups=hidden)
    t = ad.conv2d(t, p.w_project, p.b_project)
    return ad.add(x, t)


@dataclass
class Stage3Layer:
    """One global-context layer: a within-sub-kernel block plus a block over
    the pooled sub-kernel tokens feeding additive context back."""

    inner: BsbParams
    outer: BsbParams


@dataclass
class EncoderParams:
    stem1: DownsampleParams
    stem2: DownsampleParams
    blocks1: list
    down2: DownsampleParams
    blocks2: list
    down3: DownsampleParams
    stage3: list = field(default_factory=list)


def init_encoder(cfg, rng: Rng, param_cls, dtype):
    half = max(cfg.c1 // 2, 1)
    enc = EncoderParams(
        stem1=init_downsample(3, half, rng.split("stem1"), param_cls, dtype),
        stem2=init_downsample(half, cfg.c1, rng.split("stem2"), param_cls, dtype),
        blocks1=[init_conv_block(cfg.c1, rng.split(f"b1.{i}"), param_cls, dtype)
                 for i in range(cfg.k1)],
        down2=init_downsample(cfg.c1, cfg.c2, rng.split("down2"), param_cls, dtype),
        blocks2=[init_conv_block(cfg.c2, rng.split(f"b2.{i}"), param_cls, dtype)
                 for i in range(cfg.k2)],
        down3=init_downsample(cfg.c2, cfg.c3, rng.split("down3"), param_cls, dtype),
    )
    for i in range(cfg.depth):
        enc.stage3.append(Stage3Layer(
            inner=init_bsb_params(cfg.c3, rng.split(f"s3i.{i}"), cfg.expand,
                                  cfg.n_state, cfg.conv_width, dtype, param_cls),
            outer=init_bsb_params(cfg.c3, rng.split(f"s3o.{i}"), cfg.expand,
                                  cfg.n_state, cfg.conv_width, dtype, param_cls)))
    return enc


def pad_to_multiple(image, multiple=16):
    """Zero-pad bottom/right to the next multiple; returns (padded, (ph, pw))."""
    h, w = value_of(image).shape[-2:]
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph or pw:
        image = ad.pad2d(image, 0, ph, 0, pw)
    return image, (ph, pw)


def encode(image, enc: EncoderParams, cfg, variant="dual_gate",
           training=False, rng: Rng | None = None):
    """Run the three stages; returns (FeaturePyramid, (pad_h, pad_w)).

    Inputs whose extents are not divisible by 16 are zero-padded bottom/right
    and the pad amounts are reported so the decoder can crop.
    """
    shape = value_of(image).shape
    if len(shape) != 4 or shape[1] != 3:
        raise T.ShapeError(f"encode expects (B,3,H,W) images, got {shape}")
    x, pad = pad_to_multiple(image, 16)

    x = downsample(x, enc.stem1, training)
    x = downsample(x, enc.stem2, training)
    for blk in enc.blocks1:
        x = conv_block(x, blk)
    f_lf = x

    x = downsample(x, enc.down2, training)
    for blk in enc.blocks2:
        x = conv_block(x, blk)
    f_mf = x

    x = downsample(x, enc.down3, training)
    h3, w3 = value_of(x).shape[-2:]
    m = cfg.subkernel if h3 >= cfg.subkernel else h3
    n = cfg.subkernel if w3 >= cfg.subkernel else w3
    plan = seq2d.make_plan(h3, w3, m, n)
    valid = plan.valid_mask()
    tokens = seq2d.serialize(x, plan)

    batch = shape[0]
    rates = droppath_rates(len(enc.stage3), cfg.droppath_max)
    for layer, rate in zip(enc.stage3, rates):
        def inner_fn(s, _p=layer.inner):
            return bsb_forward(s, _p, variant)

        def outer_fn(s, _p=layer.outer):
            return bsb_forward(s, _p, variant, residual=False)

        out = seq2d.pool_unpool_context(tokens, inner_fn, outer_fn, valid)
        mask = droppath_mask(rate, batch, rng, value_of(x).dtype) \
            if (training and rng is not None) else None
        if mask is not None:
            delta = ad.sub(out, tokens)
            tokens = ad.add(tokens, ad.mul(delta, mask[:, :, :, None]))
        else:
            tokens = out
    f = seq2d.deserialize(tokens, plan)
    return FeaturePyramid(f_lf, f_mf, f), pad
