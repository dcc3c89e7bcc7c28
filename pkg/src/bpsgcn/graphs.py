"""Goal-relative spatial and temporal graphs with pseudo-label node features."""

from dataclasses import dataclass

import numpy as np
import torch

from .geometry import goal_relative


@dataclass
class SpatialGraph:
    nodes: torch.Tensor  # (T, N, 2 + k)
    adjacency: torch.Tensor  # (T, N, N)


@dataclass
class TemporalGraph:
    nodes: torch.Tensor  # (N, T, 2 + k)
    adjacency: torch.Tensor  # (N, T, T)


def observed_velocities(observed):
    """``(N, T, 2)`` positions -> ``(N, T, 2)`` per-step displacement, zero at the first step."""
    obs = torch.as_tensor(np.asarray(observed) if not torch.is_tensor(observed) else observed, dtype=torch.float64)
    v = torch.zeros_like(obs)
    v[:, 1:] = obs[:, 1:] - obs[:, :-1]
    return v


def endpoint_velocity(future):
    """Ground-truth goal: the displacement into the final future step. ``(N, t_fut, 2) -> (N, 2)``."""
    fut = torch.as_tensor(np.asarray(future) if not torch.is_tensor(future) else future, dtype=torch.float64)
    return fut[:, -1] - fut[:, -2]


def node_features(observed, labels, endpoint):
    v = observed_velocities(observed)
    labels = torch.as_tensor(labels)
    endpoint = torch.as_tensor(endpoint, dtype=v.dtype)
    if labels.dim() != 2 or labels.shape[0] != v.shape[0]:
        raise ValueError(f"expected one label row per agent ({v.shape[0]}), got {tuple(labels.shape)}")
    if endpoint.shape != (v.shape[0], 2):
        raise ValueError(f"expected endpoint of shape ({v.shape[0]}, 2), got {tuple(endpoint.shape)}")
    rel = goal_relative(v, endpoint)
    tiled = labels.to(v.dtype)[:, None, :].expand(-1, v.shape[1], -1)
    return torch.cat([rel, tiled], dim=-1)  # (N, T, 2 + k)


def build_spatial(observed, labels, endpoint) -> SpatialGraph:
    feats = node_features(observed, labels, endpoint)
    n, t = feats.shape[:2]
    adj = torch.full((t, n, n), 1.0 / n, dtype=feats.dtype)
    return SpatialGraph(feats.transpose(0, 1), adj)


def build_temporal(observed, labels, endpoint) -> TemporalGraph:
    feats = node_features(observed, labels, endpoint)
    n, t = feats.shape[:2]
    adj = torch.full((n, t, t), 1.0 / t, dtype=feats.dtype)
    return TemporalGraph(feats, adj)
