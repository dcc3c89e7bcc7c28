"""Velocity and behaviour features (turning cosine, acceleration magnitude).

All functions accept a single track (``(T, 2)``) or a batch (``(..., T, 2)``);
time is always the second to last axis.
"""

import numpy as np

EPS = 1e-8


def velocities(positions, dt=1.0):
    p = np.asarray(positions, dtype=np.float64)
    if p.ndim < 2 or p.shape[-2] < 2:
        raise ValueError("need at least 2 positions")
    if dt <= 0:
        raise ValueError("dt must be positive")
    return np.diff(p, axis=-2) / dt


def cos_angles(v):
    """Cosine between consecutive velocity vectors.

    Undefined when either vector is (numerically) zero; such steps are given
    cos = 1, i.e. a standing agent is treated as not turning.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-2] < 2:
        raise ValueError("need at least 2 velocity vectors")
    cur, prev = v[..., 1:, :], v[..., :-1, :]
    n_cur = np.linalg.norm(cur, axis=-1)
    n_prev = np.linalg.norm(prev, axis=-1)
    dot = np.sum(cur * prev, axis=-1)
    degenerate = (n_cur < EPS) | (n_prev < EPS)
    denom = np.where(degenerate, 1.0, n_cur * n_prev)
    return np.where(degenerate, 1.0, np.clip(dot / denom, -1.0, 1.0))


def accel_magnitudes(v, dt=1.0):
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-2] < 2:
        raise ValueError("need at least 2 velocity vectors")
    if dt <= 0:
        raise ValueError("dt must be positive")
    return np.linalg.norm(np.diff(v, axis=-2), axis=-1) / dt


def geometric_features(positions, dt=1.0):
    """``(..., T, 2)`` positions -> ``(..., T - 2, 2)`` features ``(cos theta, |a|)``."""
    v = velocities(positions, dt)
    return np.stack([cos_angles(v), accel_magnitudes(v, dt)], axis=-1)


def goal_relative(observed_velocities, endpoint_velocity):
    """Shift every step by the agent's endpoint velocity.

    ``observed_velocities`` is ``(N, T, 2)``, ``endpoint_velocity`` is ``(N, 2)``.
    Works on numpy arrays and torch tensors alike.
    """
    if observed_velocities.shape[-1] != 2 or endpoint_velocity.shape[-1] != 2:
        raise ValueError("last axis must have size 2")
    if tuple(observed_velocities.shape[:-2]) != tuple(endpoint_velocity.shape[:-1]):
        raise ValueError(
            f"agent axes differ: {tuple(observed_velocities.shape)} vs {tuple(endpoint_velocity.shape)}"
        )
    return observed_velocities - endpoint_velocity[..., None, :]


def from_goal_relative(relative, endpoint_velocity):
    return relative + endpoint_velocity[..., None, :]
