"""Bidirectional sequence block: pre-norm, dual direction conv+scan branches,
independent multiplicative gates, fused output with a residual connection.

The block maps (B, L, D) token sequences to the same shape. The backward
branch is literally the forward machinery run on the reversed sequence and
re-reversed, with its own parameters; nothing is weight-tied.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import tensor as T
from .autodiff import value_of
from .rng import Rng
from .ssm import SsmParams, init_ssm_params, selective_scan

VARIANTS = ("dual_gate", "shared_gate", "no_gate", "unidirectional", "no_conv")


@dataclass
class DirectionParams:
    """One scan direction: depthwise causal conv kernel plus its SSM record."""

    conv_kernel: object  # (E, conv_width)
    ssm: SsmParams


@dataclass
class BsbParams:
    norm_gamma: object
    norm_beta: object
    w_x: object
    b_x: object
    w_y: object
    b_y: object
    fwd: DirectionParams
    bwd: DirectionParams
    w_gate_fwd: object
    b_gate_fwd: object
    w_gate_bwd: object
    b_gate_bwd: object
    w_out: object
    b_out: object

    @property
    def d_model(self):
        return value_of(self.norm_gamma).shape[0]

    @property
    def d_inner(self):
        return value_of(self.w_x).shape[1]


def init_bsb_params(d_model, rng: Rng, expand=2, n_state=16, conv_width=4,
                    dtype=np.float64, param_cls=ad.Parameter) -> BsbParams:
    d_inner = expand * d_model

    def xavier(nin, nout):
        lim = np.sqrt(6.0 / (nin + nout))
        return param_cls(rng.uniform((nin, nout), -lim, lim).astype(dtype))

    def zeros(*shape):
        return param_cls(np.zeros(shape, dtype=dtype))

    def direction(tag):
        kern = rng.normal((d_inner, conv_width), std=np.sqrt(2.0 / conv_width))
        return DirectionParams(
            conv_kernel=param_cls(kern.astype(dtype)),
            ssm=init_ssm_params(d_inner, n_state, rng.split(tag), dtype, param_cls))

    return BsbParams(
        norm_gamma=param_cls(np.ones(d_model, dtype=dtype)),
        norm_beta=zeros(d_model),
        w_x=xavier(d_model, d_inner), b_x=zeros(d_inner),
        w_y=xavier(d_model, d_inner), b_y=zeros(d_inner),
        fwd=direction("fwd"), bwd=direction("bwd"),
        w_gate_fwd=xavier(d_inner, d_inner), b_gate_fwd=zeros(d_inner),
        w_gate_bwd=xavier(d_inner, d_inner), b_gate_bwd=zeros(d_inner),
        w_out=xavier(d_inner, d_model), b_out=zeros(d_model),
    )


def _branch(xseq, direction: DirectionParams, use_conv):
    """Causal conv + silu + selective scan over a (B, L, E) sequence."""
    s = ad.transpose(xseq, (0, 2, 1))  # (B,E,L)
    if use_conv:
        s = ad.conv1d_depthwise(s, direction.conv_kernel)
    s = ad.silu(s)
    k = selective_scan(s, direction.ssm)
    return ad.transpose(k, (0, 2, 1))


def bsb_forward(tokens, params: BsbParams, variant="dual_gate",
                droppath_mask=None, residual=True, gate_override=None):
    """Apply one bidirectional sequence block to (B, L, D) tokens.

    Variants: dual_gate (independent per-direction gates), shared_gate (one
    gate reused for both directions), no_gate (branches summed directly),
    unidirectional (backward branch dropped), no_conv (depthwise conv
    skipped, otherwise dual_gate).

    gate_override is a diagnostic hook replacing every gate with a constant,
    which makes the three gate variants structurally comparable in tests.
    droppath_mask, when given, multiplies the block's contribution before the
    residual is added (stochastic depth, sampled by the caller).
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}, expected one of {VARIANTS}")
    shape = value_of(tokens).shape
    if len(shape) != 3 or shape[1] == 0:
        raise T.ShapeError(f"bsb_forward needs (B, L>=1, D) tokens, got {shape}")

    z = tokens
    normed = ad.layer_norm(tokens, params.norm_gamma, params.norm_beta, eps=1e-6)
    x = ad.dense(normed, params.w_x, params.b_x)
    y = ad.dense(normed, params.w_y, params.b_y)

    use_conv = variant != "no_conv"
    k_fwd = _branch(x, params.fwd, use_conv)
    if variant == "unidirectional":
        k_bwd = None
    else:
        k_bwd = ad.flip(_branch(ad.flip(x, 1), params.bwd, use_conv), 1)

    def gate(w, b):
        if gate_override is not None:
            return gate_override
        return ad.silu(ad.dense(y, w, b))

    if variant == "no_gate":
        fused = ad.add(k_fwd, k_bwd)
    elif variant == "shared_gate":
        g = gate(params.w_gate_fwd, params.b_gate_fwd)
        fused = ad.add(ad.mul(k_fwd, g), ad.mul(k_bwd, g))
    elif variant == "unidirectional":
        fused = ad.mul(k_fwd, gate(params.w_gate_fwd, params.b_gate_fwd))
    else:  # dual_gate, no_conv
        fused = ad.add(
            ad.mul(k_fwd, gate(params.w_gate_fwd, params.b_gate_fwd)),
            ad.mul(k_bwd, gate(params.w_gate_bwd, params.b_gate_bwd)))

    out = ad.dense(fused, params.w_out, params.b_out)
    if droppath_mask is not None:
        out = ad.mul(out, droppath_mask)
    return ad.add(out, z) if residual else out


def droppath_rates(n_layers, max_rate=0.1):
    """Linearly increasing stochastic-depth rates, 0 for the first layer."""
    if n_layers <= 1:
        return [0.0] * n_layers
    return [max_rate * l / (n_layers - 1) for l in range(n_layers)]


def droppath_mask(rate, batch, rng: Rng, dtype=np.float64):
    """Per-sample keep mask scaled by 1/(1-rate); None when inactive."""
    if rate <= 0.0:
        return None
    keep = (rng.uniform((batch,)) >= rate).astype(dtype) / (1.0 - rate)
    return keep[:, None, None]


def bsb_stack(tokens, params_list, rates=None, variant="dual_gate",
              training=False, rng: Rng | None = None):
    """Sequential blocks with residual drop-path.

    During training each block's contribution is zeroed per sample with its
    layer rate and survivors are scaled by 1/(1-rate); at inference the rates
    are ignored and the stack is deterministic.
    """
    if rates is None:
        rates = droppath_rates(len(params_list))
    out = tokens
    for params, rate in zip(params_list, rates):
        mask = None
        if training and rng is not None:
            mask = droppath_mask(rate, value_of(out).shape[0], rng,
                                 value_of(out).dtype)
        out = bsb_forward(out, params, variant, droppath_mask=mask)
    return out
