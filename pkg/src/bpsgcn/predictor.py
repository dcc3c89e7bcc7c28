"""Goal-guided sparse spatio-temporal graph predictor.

The network attends over agents at every observed step (spatial graph) and
over observed steps of each agent (temporal graph). Post-softmax attention
weights below a keep threshold are dropped, which sparsifies both graphs. A
convolution over the time axis then maps ``t_obs`` steps to ``t_pred``
bivariate-Gaussian parameter sets per agent.

Predictions live in the goal-relative velocity frame: they are per-step
displacements minus the agent's goal (endpoint) displacement.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .graphs import SpatialGraph, TemporalGraph

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class BivariateGaussianTrack:
    mu: torch.Tensor  # (N, T, 2)
    sigma: torch.Tensor  # (N, T, 2), > 0
    rho: torch.Tensor  # (N, T), in (-1, 1)

    def detach(self):
        return BivariateGaussianTrack(self.mu.detach(), self.sigma.detach(), self.rho.detach())

    def numpy(self):
        return self.mu.detach().numpy(), self.sigma.detach().numpy(), self.rho.detach().numpy()


def sparse_attention(scores, threshold=None):
    """Row softmax, drop weights below ``threshold`` (default ``1/(2n)``), keep the diagonal, renormalise."""
    att = torch.softmax(scores, dim=-1)
    n = att.shape[-1]
    if threshold is None:
        threshold = 1.0 / (2.0 * n)
    with torch.no_grad():
        keep = att >= threshold
        keep = keep | torch.eye(n, dtype=torch.bool)
    att = att * keep.to(att.dtype)
    return att / att.sum(dim=-1, keepdim=True)


class _Attention(nn.Module):
    def __init__(self, in_features, dim):
        super().__init__()
        self.query = nn.Linear(in_features, dim)
        self.key = nn.Linear(in_features, dim)
        self.dim = dim

    def forward(self, x):
        return self.query(x) @ self.key(x).transpose(-1, -2) / math.sqrt(self.dim)


class Predictor(nn.Module):
    def __init__(self, in_features, hidden=16, t_obs=8, t_pred=12, attn_dim=None,
                 spatial_attention=True, temporal_attention=True):
        super().__init__()
        attn_dim = attn_dim or hidden
        self.in_features = in_features
        self.t_obs = t_obs
        self.t_pred = t_pred
        self.spatial_attention = spatial_attention
        self.temporal_attention = temporal_attention
        self.spatial_att = _Attention(in_features, attn_dim)
        self.temporal_att = _Attention(in_features, attn_dim)
        self.spatial_proj = nn.Linear(in_features, hidden)
        self.temporal_proj = nn.Linear(hidden, hidden)
        self.skip = nn.Linear(in_features, hidden)
        self.tcn = nn.Conv1d(t_obs, t_pred, kernel_size=3, padding=1)
        self.head = nn.Linear(hidden, 5)

    def zero_head(self):
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def adjacency(self, spatial: SpatialGraph, temporal: TemporalGraph):
        a_s = sparse_attention(self.spatial_att(spatial.nodes)) if self.spatial_attention else spatial.adjacency
        a_t = sparse_attention(self.temporal_att(temporal.nodes)) if self.temporal_attention else temporal.adjacency
        return a_s, a_t

    def forward(self, spatial: SpatialGraph, temporal: TemporalGraph) -> BivariateGaussianTrack:
        t, n, _ = spatial.nodes.shape
        if temporal.nodes.shape[:2] != (n, t):
            raise ValueError("spatial and temporal graphs disagree on (N, T_obs)")
        a_s, a_t = self.adjacency(spatial, temporal)
        h = F.relu(a_s @ self.spatial_proj(spatial.nodes))  # (T, N, C)
        h = h.transpose(0, 1)  # (N, T, C)
        h = F.relu(a_t @ self.temporal_proj(h)) + self.skip(temporal.nodes)
        h = F.prelu(self.tcn(h), torch.tensor([0.25], dtype=h.dtype))  # (N, t_pred, C)
        raw = self.head(h)
        if not torch.isfinite(raw).all():
            raise FloatingPointError("non-finite predictor output")
        return BivariateGaussianTrack(raw[..., 0:2], torch.exp(raw[..., 2:4]), torch.tanh(raw[..., 4]))


def nll_terms(pred: BivariateGaussianTrack, target):
    """Elementwise ``-log N2(target | mu, sigma, rho)``, shape ``(N, T)``."""
    target = torch.as_tensor(target, dtype=pred.mu.dtype)
    d = (target - pred.mu) / pred.sigma
    rho = pred.rho
    one_m = (1.0 - rho ** 2).clamp_min(1e-12)
    quad = (d[..., 0] ** 2 + d[..., 1] ** 2 - 2.0 * rho * d[..., 0] * d[..., 1]) / one_m
    return LOG_2PI + torch.log(pred.sigma).sum(-1) + 0.5 * torch.log(one_m) + 0.5 * quad


def nll_loss(pred: BivariateGaussianTrack, target):
    """Summed over agents and future steps."""
    return nll_terms(pred, target).sum()


def correlate(pred_np, eps):
    """Map standard-normal ``eps`` ``(..., N, T, 2)`` to draws from the track's Gaussians."""
    mu, sigma, rho = pred_np
    e1, e2 = eps[..., 0], eps[..., 1]
    x = mu[..., 0] + sigma[..., 0] * e1
    y = mu[..., 1] + sigma[..., 1] * (rho * e1 + np.sqrt(1.0 - rho ** 2) * e2)
    return np.stack([x, y], axis=-1)


def integrate(relative, goal, origin):
    """Goal-relative displacements ``(..., N, T, 2)`` -> absolute positions."""
    steps = relative + goal[:, None, :]
    return origin[:, None, :] + np.cumsum(steps, axis=-2)


def sample_trajectories(pred: BivariateGaussianTrack, n_samples, seed=0, goal=None, origin=None):
    """Draw ``(n_samples, N, T, 2)`` tracks.

    Without ``origin`` the draws are returned in the prediction frame. With it,
    ``goal`` is added back and displacements are accumulated from ``origin``
    (the last observed position).
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = np.random.default_rng(seed)
    pred_np = pred.numpy()
    n, t = pred_np[0].shape[:2]
    draws = np.stack([correlate(pred_np, rng.standard_normal((n, t, 2))) for _ in range(n_samples)])
    if origin is None:
        return draws
    goal = np.zeros((n, 2)) if goal is None else np.asarray(goal, dtype=np.float64)
    return integrate(draws, goal, np.asarray(origin, dtype=np.float64))


def _rotation(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)  # (..., 2, 2)


def _canonical(observed):
    """Rotate each agent's observed displacements so the last one points along +x."""
    obs = np.asarray(observed, dtype=np.float64)
    v = np.diff(obs, axis=1)
    last = v[:, -1]
    angle = np.where(np.linalg.norm(last, axis=-1) > 1e-8, np.arctan2(last[:, 1], last[:, 0]), 0.0)
    rot_inv = _rotation(-angle)
    return np.einsum("nij,ntj->nti", rot_inv, v), angle


class EmptyRepositoryError(RuntimeError):
    pass


class GoalRepository:
    """Nearest-neighbour bank of (observed motion, endpoint displacement) pairs.

    Descriptors are observed displacement sequences rotated so that the final
    observed displacement points along +x; endpoints are stored in the same
    frame and rotated back to the query's heading on retrieval.
    """

    def __init__(self, descriptors=None, endpoints=None):
        self.descriptors = np.zeros((0, 0)) if descriptors is None else np.asarray(descriptors, dtype=np.float64)
        self.endpoints = np.zeros((0, 2)) if endpoints is None else np.asarray(endpoints, dtype=np.float64)

    def __len__(self):
        return len(self.endpoints)

    @classmethod
    def from_windows(cls, observed_list, endpoint_list):
        descs, ends = [], []
        for observed, endpoint in zip(observed_list, endpoint_list):
            v, angle = _canonical(observed)
            descs.append(v.reshape(len(v), -1))
            ends.append(np.einsum("nij,nj->ni", _rotation(-angle), np.asarray(endpoint, dtype=np.float64)))
        if not descs:
            return cls()
        return cls(np.concatenate(descs), np.concatenate(ends))

    def retrieve(self, observed, k=1):
        """``(N, T, 2)`` observed positions -> ``(N, k, 2)`` endpoint displacements, nearest first."""
        if len(self) == 0:
            raise EmptyRepositoryError("goal repository is empty")
        v, angle = _canonical(observed)
        desc = v.reshape(len(v), -1)
        if desc.shape[1] != self.descriptors.shape[1]:
            raise ValueError("observation length differs from the repository's")
        dist = np.sum((desc[:, None, :] - self.descriptors[None]) ** 2, axis=-1)
        k = min(k, len(self))
        nearest = np.argsort(dist, axis=1, kind="stable")[:, :k]
        local = self.endpoints[nearest]  # (N, k, 2)
        return np.einsum("nij,nkj->nki", _rotation(angle), local)


def retrieve_goal(observed, repo: GoalRepository, k=1):
    return repo.retrieve(observed, k)
