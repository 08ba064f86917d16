"""Lorenz vector field, an adaptive Dormand-Prince integrator and the flow map.

The integrator advances every row of a batch with its own step size, so a
trajectory integrated alone and the same trajectory integrated inside a batch
produce bit-identical samples.
"""

from dataclasses import dataclass, replace
import math

import numpy as np

from .errors import StepSizeUnderflow


@dataclass(frozen=True)
class LorenzParams:
    sigma: float = 10.0
    rho: float = 28.0
    beta: float = 8.0 / 3.0

    def __post_init__(self):
        if not (self.sigma > 0 and self.rho > 0 and self.beta > 0):
            raise ValueError(f"Lorenz parameters must be positive, got {self}")


@dataclass(frozen=True)
class IntegratorConfig:
    dt_sample: float = 0.01
    rtol: float = 1e-10
    atol: float = 1e-10
    max_internal_step: float = 0.01
    min_internal_step: float = 1e-14
    safety: float = 0.9

    def __post_init__(self):
        if self.dt_sample <= 0:
            raise ValueError("dt_sample must be positive")
        if self.rtol <= 0 or self.atol <= 0:
            raise ValueError("rtol and atol must be positive")


DEFAULT_PARAMS = LorenzParams()

ORIGIN = np.zeros(3)


def equilibria(p=DEFAULT_PARAMS):
    """Return the three fixed points (origin, C+, C-) as arrays."""
    r = math.sqrt(p.beta * (p.rho - 1.0))
    return (
        np.zeros(3),
        np.array([r, r, p.rho - 1.0]),
        np.array([-r, -r, p.rho - 1.0]),
    )


_, C_PLUS, C_MINUS = equilibria()


def lorenz_deriv(s, p=DEFAULT_PARAMS):
    """Lorenz right-hand side; ``s`` has shape (..., 3)."""
    s = np.asarray(s, dtype=np.float64)
    x, y, z = s[..., 0], s[..., 1], s[..., 2]
    out = np.empty_like(s)
    out[..., 0] = p.sigma * (y - x)
    out[..., 1] = x * (p.rho - z) - y
    out[..., 2] = x * y - p.beta * z
    return out


# Dormand-Prince 5(4) tableau
_C = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0)
_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_B = _A[6]
_E = (
    71 / 57600,
    0.0,
    -71 / 16695,
    71 / 1920,
    -17253 / 339200,
    22 / 525,
    -1 / 40,
)
_ORDER = 5
_PI_ALPHA = 0.7 / _ORDER
_PI_BETA = 0.4 / _ORDER
_MAX_FACTOR = 10.0
_MIN_FACTOR = 0.2


def _dp_step(y, h, p):
    """One Dormand-Prince step for a batch; returns (y_new, error_estimate)."""
    hc = h[:, None]
    k = [lorenz_deriv(y, p)]
    for row in _A[1:]:
        acc = y.copy()
        for a, kj in zip(row, k):
            if a != 0.0:
                acc = acc + hc * (a * kj)
        k.append(lorenz_deriv(acc, p))
    # stage 7 evaluates at y_new (FSAL), so the 5th-order solution is the last stage input
    y_new = y.copy()
    for b, kj in zip(_B, k):
        if b != 0.0:
            y_new = y_new + hc * (b * kj)
    err = np.zeros_like(y)
    for e, kj in zip(_E, k):
        if e != 0.0:
            err = err + e * kj
    return y_new, hc * err


def _error_norm(y, y_new, err, cfg):
    scale = cfg.atol + cfg.rtol * np.maximum(np.abs(y), np.abs(y_new))
    ratio = np.abs(err) / scale
    # explicit column max keeps per-row arithmetic independent of batch layout
    return np.maximum(np.maximum(ratio[:, 0], ratio[:, 1]), ratio[:, 2])


def integrate_batch(s0, n_steps, cfg=IntegratorConfig(), p=DEFAULT_PARAMS, seeds=None):
    """Integrate many initial states; returns an array (N, n_steps + 1, 3).

    Internal steps are clipped so that each row lands exactly on every sample
    time ``k * dt_sample``.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    y = np.array(s0, dtype=np.float64, copy=True)
    if y.ndim != 2 or y.shape[1] != 3:
        raise ValueError(f"initial states must have shape (N, 3), got {y.shape}")
    n = y.shape[0]
    out = np.empty((n, n_steps + 1, 3))
    out[:, 0] = y
    dt = cfg.dt_sample
    t = np.zeros(n)
    h = np.full(n, min(cfg.max_internal_step, dt) * 0.1)
    err_prev = np.ones(n)
    k_next = np.ones(n, dtype=np.int64)
    active = np.arange(n)

    while active.size:
        ya, ta, ha, kn = y[active], t[active], h[active], k_next[active]
        target = kn * dt
        remaining = target - ta
        landing = ha >= remaining
        h_try = np.where(landing, remaining, ha)
        y_new, err = _dp_step(ya, h_try, p)
        enorm = _error_norm(ya, y_new, err, cfg)
        ok = enorm <= 1.0

        with np.errstate(divide="ignore"):
            grow = cfg.safety * enorm ** (-_PI_ALPHA) * err_prev[active] ** _PI_BETA
            shrink = cfg.safety * enorm ** (-1.0 / _ORDER)
        grow = np.where(enorm == 0.0, _MAX_FACTOR, np.clip(grow, _MIN_FACTOR, _MAX_FACTOR))
        shrink = np.clip(shrink, _MIN_FACTOR, 1.0)

        acc = active[ok]
        if acc.size:
            land_ok = landing[ok]
            y[acc] = y_new[ok]
            t[acc] = np.where(land_ok, target[ok], ta[ok] + h_try[ok])
            proposed = h_try[ok] * grow[ok]
            # a clipped landing step says nothing about the step the controller wanted
            proposed = np.where(land_ok, np.maximum(proposed, ha[ok]), proposed)
            h[acc] = np.minimum(proposed, cfg.max_internal_step)
            err_prev[acc] = np.maximum(enorm[ok], 1e-4)
            landed = acc[land_ok]
            if landed.size:
                out[landed, k_next[landed]] = y[landed]
                k_next[landed] += 1

        rej = active[~ok]
        if rej.size:
            h_new = h_try[~ok] * shrink[~ok]
            bad = h_new < cfg.min_internal_step
            if np.any(bad):
                i = rej[np.argmax(bad)]
                raise StepSizeUnderflow(
                    float(t[i]), float(h_new[np.argmax(bad)]),
                    None if seeds is None else seeds[i],
                )
            h[rej] = h_new
        if not np.all(np.isfinite(y[active])):
            i = active[~np.all(np.isfinite(y[active]), axis=1)][0]
            raise StepSizeUnderflow(float(t[i]), 0.0, None if seeds is None else seeds[i])
        active = active[k_next[active] <= n_steps]
    return out


def integrate(s0, n_steps, cfg=IntegratorConfig(), p=DEFAULT_PARAMS):
    """Integrate one state; returns n_steps + 1 samples of shape (n_steps + 1, 3)."""
    s0 = np.asarray(s0, dtype=np.float64).reshape(1, 3)
    return integrate_batch(s0, n_steps, cfg, p)[0]


def flow_map_batch(q, tau, cfg=IntegratorConfig(), p=DEFAULT_PARAMS):
    """Deterministic flow for time ``tau`` applied to every row of ``q``."""
    q = np.asarray(q, dtype=np.float64)
    if tau < 0:
        raise ValueError("tau must be non-negative")
    if tau == 0:
        return q.copy()
    step_cfg = replace(cfg, dt_sample=tau)
    return integrate_batch(q, 1, step_cfg, p)[:, 1]


def flow_map(q, tau, noise=(0.0, 0.0, 0.0), cfg=IntegratorConfig(), p=DEFAULT_PARAMS):
    """Noisy flow map: the deterministic flow for time ``tau`` plus additive noise."""
    q = np.asarray(q, dtype=np.float64).reshape(1, 3)
    return flow_map_batch(q, tau, cfg, p)[0] + np.asarray(noise, dtype=np.float64)
