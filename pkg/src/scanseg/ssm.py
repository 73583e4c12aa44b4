"""State-space core: exact ZOH discretization, the naive discrete recurrence,
and the linear-time selective scan with input-dependent step, input and
readout coefficients.

The continuous system per channel is h'(t) = a h(t) + b x(t), y = <c, h> with
diagonal, strictly negative a (parameterized as a = -exp(a_log)). The scan
uses the exact transition exp(dt * a) and the first-order input term dt * b,
the standard simplification for selective models; :func:`zoh_discretize`
keeps the exact input integral so tests can quantify the gap.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import tensor as T
from .autodiff import value_of
from .rng import Rng


def zoh_discretize(a, b, dt):
    """Zero-order-hold discretization of a diagonal continuous pair (a, b).

    a_d = exp(a * dt); b_d = ((exp(a * dt) - 1) / a) * b, which is the closed
    form of the integral of exp(a * tau) over one sampling interval. The
    removable singularity at a -> 0 is handled by a cubic series branch when
    |a * dt| < 1e-6, continuous with the closed form to ~1e-9.

    Accepts scalars or broadcastable arrays; dt must be strictly positive.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    dt = np.asarray(dt, dtype=np.float64)
    if np.any(dt <= 0):
        raise ValueError(f"dt must be > 0, got {dt}")
    z = a * dt
    a_d = np.exp(z)
    small = np.abs(z) < 1e-6
    with np.errstate(divide="ignore", invalid="ignore"):
        factor = np.where(small, dt * (1.0 + z / 2.0 + z * z / 6.0 + z * z * z / 24.0),
                          np.expm1(z) / np.where(a == 0, 1.0, a))
    b_d = factor * b
    if a_d.ndim == 0:
        return float(a_d), float(b_d)
    return a_d, b_d


def ssm_recurrence_naive(a_d, b_d, c, x):
    """Reference recurrence: h_t = a_d[t] * h_{t-1} + b_d[t] * x_t, y_t = <c[t], h_t>.

    All coefficient arrays are (L, N), x is (L,), h_0 = 0 and the feedthrough
    term is zero. Sequential and O(L*N); this is the oracle the scan is
    checked against.
    """
    a_d, b_d, c, x = (np.asarray(v, dtype=np.float64) for v in (a_d, b_d, c, x))
    if not (a_d.shape == b_d.shape == c.shape and a_d.shape[0] == x.shape[0]):
        raise T.ShapeError(
            f"length mismatch: a_d {a_d.shape}, b_d {b_d.shape}, c {c.shape}, x {x.shape}")
    length, n = a_d.shape
    h = np.zeros(n)
    y = np.empty(length)
    for t in range(length):
        h = a_d[t] * h + b_d[t] * x[t]
        y[t] = c[t] @ h
    return y


@dataclass
class SsmParams:
    """Per-channel scan parameters for one direction.

    a_log: (C, N), continuous A = -exp(a_log) elementwise (always stable)
    delta_bias: (C,), added before the softplus producing the step size
    w_delta: (C, C), w_b / w_c: (C, N) token-wise projections
    """

    a_log: object
    delta_bias: object
    w_delta: object
    w_b: object
    w_c: object

    @property
    def channels(self):
        return value_of(self.a_log).shape[0]

    @property
    def n_state(self):
        return value_of(self.a_log).shape[1]


def init_ssm_params(channels, n_state, rng: Rng, dtype=np.float64,
                    param_cls=ad.Parameter) -> SsmParams:
    """Standard init: a_log = log(1..N) per state index, step sizes uniform in
    [0.001, 0.1] through the softplus, Xavier-uniform projections."""
    a_log = np.tile(np.log(np.arange(1, n_state + 1, dtype=np.float64)), (channels, 1))
    dt = rng.uniform((channels,), 0.001, 0.1)
    delta_bias = np.log(np.expm1(dt))  # inverse softplus
    def xavier(nin, nout):
        lim = np.sqrt(6.0 / (nin + nout))
        return rng.uniform((nin, nout), -lim, lim)
    return SsmParams(
        a_log=param_cls(a_log.astype(dtype)),
        delta_bias=param_cls(delta_bias.astype(dtype)),
        w_delta=param_cls(xavier(channels, channels).astype(dtype)),
        w_b=param_cls(xavier(channels, n_state).astype(dtype)),
        w_c=param_cls(xavier(channels, n_state).astype(dtype)),
    )


def selective_scan(x, params: SsmParams):
    """Input-dependent scan over (B, C, L) sequences, O(B*C*L*N).

    Per token t: dt_t = softplus(x_t @ w_delta + delta_bias), transition
    exp(dt_t * A) (exact for diagonal A), input term dt_t * (x_t @ w_b),
    readout x_t @ w_c. Equals :func:`ssm_recurrence_naive` applied per
    (batch, channel) with those coefficients.

    Accepts Vars or ndarrays; with Vars the per-step recurrence is recorded
    on the tape, so backward runs the adjoint of the recurrence.
    """
    xd = value_of(x)
    if xd.ndim != 3:
        raise T.ShapeError(f"selective_scan input must be (B,C,L), got {xd.ndim}-d")
    batch, channels, length = xd.shape
    if params.channels != channels:
        raise T.ShapeError(
            f"params expect C={params.channels}, input has C={channels}")
    n = params.n_state

    xt = ad.transpose(x, (0, 2, 1))                                   # (B,L,C)
    delta = ad.softplus(ad.dense(xt, params.w_delta, params.delta_bias))
    bt = ad.dense(xt, params.w_b)                                     # (B,L,N)
    ct = ad.dense(xt, params.w_c)                                     # (B,L,N)
    a = ad.mul(ad.exp(params.a_log), -1.0)                            # (C,N)

    T.count_macs(3 * batch * channels * length * n)
    h = None
    ys = []
    for t in range(length):
        d_t = ad.index_axis1(delta, t)                                # (B,C)
        x_t = ad.index_axis1(xt, t)
        b_t = ad.index_axis1(bt, t)
        c_t = ad.index_axis1(ct, t)
        decay = ad.exp(ad.mul(ad.expand_dims(d_t, -1), a))            # (B,C,N)
        drive = ad.mul(ad.expand_dims(ad.mul(d_t, x_t), -1),
                       ad.expand_dims(b_t, 1))                        # (B,C,N)
        h = drive if h is None else ad.add(ad.mul(decay, h), drive)
        ys.append(ad.sum_(ad.mul(h, ad.expand_dims(c_t, 1)), axis=-1))  # (B,C)
    y = ad.stack_last(ys)                                             # (B,C,L)

    yd = value_of(y)
    if not np.all(np.isfinite(yd)):
        bad = np.argwhere(~np.isfinite(yd))[0]
        raise FloatingPointError(
            f"non-finite scan output at (b,c,t)=({bad[0]},{bad[1]},{bad[2]})")
    return y


def scan_coefficients(x, params: SsmParams):
    """The (a_d, b_d, c) coefficient tensors the scan uses, for oracle checks.

    Returns ndarrays a_d, b_d of shape (B, L, C, N) and c of shape (B, L, N).
    """
    xd = value_of(x)
    xt = xd.transpose(0, 2, 1)
    delta = T.softplus(xt @ value_of(params.w_delta) + value_of(params.delta_bias))
    bt = xt @ value_of(params.w_b)
    ct = xt @ value_of(params.w_c)
    a = -np.exp(value_of(params.a_log))
    a_d = np.exp(delta[..., None] * a)
    b_d = delta[..., None] * bt[:, :, None, :]
    return a_d, b_d, ct
