"""Hot elementwise kernels with a numba path and a pure-numpy fallback.

Set ``PIEKD_DISABLE_NUMBA=1`` in the environment (before import) to force the
numpy implementations. Both paths compute the same arithmetic; results agree to
floating-point reassociation error, and each path on its own is deterministic.
"""

import math
import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is an optional speedup
    numba = None

USE_NUMBA = numba is not None and os.environ.get("PIEKD_DISABLE_NUMBA", "").lower() not in (
    "1",
    "true",
    "yes",
)


def _njit(fn):
    return numba.njit(cache=True, fastmath=False)(fn)


# --- Adam ---------------------------------------------------------------------


def _adam_np(p, g, m, v, step_size, bc2, beta1, beta2, eps, active):
    # p, g, m, v: (R, N); step_size, bc2: (R,); active: (R,) bool
    idx = np.flatnonzero(active)
    if idx.size == p.shape[0]:
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= step_size[:, None] * m / (np.sqrt(v / bc2[:, None]) + eps)
        return
    gi = g[idx]
    mi = beta1 * m[idx] + (1.0 - beta1) * gi
    vi = beta2 * v[idx] + (1.0 - beta2) * (gi * gi)
    m[idx] = mi
    v[idx] = vi
    p[idx] -= step_size[idx, None] * mi / (np.sqrt(vi / bc2[idx, None]) + eps)


def _adam_nb(p, g, m, v, step_size, bc2, beta1, beta2, eps, active):
    rows, n = p.shape
    for r in range(rows):
        if not active[r]:
            continue
        s = step_size[r]
        inv_bc2 = 1.0 / bc2[r]
        for i in range(n):
            gi = g[r, i]
            mi = beta1 * m[r, i] + (1.0 - beta1) * gi
            vi = beta2 * v[r, i] + (1.0 - beta2) * (gi * gi)
            m[r, i] = mi
            v[r, i] = vi
            p[r, i] -= s * mi / (math.sqrt(vi * inv_bc2) + eps)


# --- Polyak averaging -----------------------------------------------------------


def _polyak_np(target, online, rho, active):
    if active.all():
        target *= 1.0 - rho
        target += rho * online
        return
    idx = np.flatnonzero(active)
    target[idx] = (1.0 - rho) * target[idx] + rho * online[idx]


def _polyak_nb(target, online, rho, active):
    rows, n = target.shape
    keep = 1.0 - rho
    for r in range(rows):
        if not active[r]:
            continue
        for i in range(n):
            target[r, i] = keep * target[r, i] + rho * online[r, i]


# --- dense layer: bias + ReLU and its backward ------------------------------------
# z, g, y: (S, B, F); b, gb: (S, 1, F)


def _bias_relu_np(z, b):
    z += b
    np.maximum(z, 0.0, out=z)


def _bias_relu_nb(z, b):
    S, B, F = z.shape
    for s in range(S):
        for i in range(B):
            for j in range(F):
                x = z[s, i, j] + b[s, 0, j]
                z[s, i, j] = x if x > 0.0 else 0.0


def _relu_grad_np(g, y, out, gb):
    np.multiply(g, y > 0.0, out=out)
    gb[...] = out.sum(axis=1, keepdims=True)


def _relu_grad_nb(g, y, out, gb):
    S, B, F = g.shape
    for s in range(S):
        for j in range(F):
            gb[s, 0, j] = 0.0
        for i in range(B):
            for j in range(F):
                x = g[s, i, j] if y[s, i, j] > 0.0 else 0.0
                out[s, i, j] = x
                gb[s, 0, j] += x


# --- environment dynamics -------------------------------------------------------


def _pendulum_np(th, thdot, u, dt, g, m, length, max_speed):
    cost = _angle_norm(th) ** 2 + 0.1 * thdot * thdot + 0.001 * u * u
    thdot_new = thdot + (3.0 * g / (2.0 * length) * math.sin(th) + 3.0 / (m * length * length) * u) * dt
    thdot_new = min(max(thdot_new, -max_speed), max_speed)
    th_new = th + thdot_new * dt
    return th_new, thdot_new, -cost


def _angle_norm(x):
    return ((x + math.pi) % (2.0 * math.pi)) - math.pi


def _mountaincar_np(pos, vel, force, power, min_pos, max_pos, max_speed, goal_pos):
    vel = vel + force * power - 0.0025 * math.cos(3.0 * pos)
    vel = min(max(vel, -max_speed), max_speed)
    pos = pos + vel
    pos = min(max(pos, min_pos), max_pos)
    if pos == min_pos and vel < 0.0:
        vel = 0.0
    reached = pos >= goal_pos
    reward = -0.1 * force * force
    if reached:
        reward += 100.0
    return pos, vel, reward, reached


if USE_NUMBA:
    adam_update = _njit(_adam_nb)
    polyak_update = _njit(_polyak_nb)
    bias_relu = _njit(_bias_relu_nb)
    relu_grad = _njit(_relu_grad_nb)
    _angle_norm = _njit(_angle_norm)
    pendulum_step = _njit(_pendulum_np)
    mountaincar_step = _njit(_mountaincar_np)
else:
    adam_update = _adam_np
    polyak_update = _polyak_np
    bias_relu = _bias_relu_np
    relu_grad = _relu_grad_np
    pendulum_step = _pendulum_np
    mountaincar_step = _mountaincar_np

angle_norm = _angle_norm

# Reference implementations stay importable regardless of the flag so the
# benchmark and tests can compare both paths in one process.
numpy_kernels = {
    "adam_update": _adam_np,
    "polyak_update": _polyak_np,
    "bias_relu": _bias_relu_np,
    "relu_grad": _relu_grad_np,
}
if numba is not None:
    numba_kernels = {
        "adam_update": _njit(_adam_nb),
        "polyak_update": _njit(_polyak_nb),
        "bias_relu": _njit(_bias_relu_nb),
        "relu_grad": _njit(_relu_grad_nb),
    }
else:  # pragma: no cover
    numba_kernels = {}
