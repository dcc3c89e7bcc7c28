"""Deep embedded clustering on VRNN latents.

Soft assignments use a Student's t kernel between latents and centres; the
training signal is KL(P || Q) against a sharpened target P that is held fixed
between refreshes.
"""

from __future__ import annotations

import logging

import numpy as np
import torch
import torch.nn as nn

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Training diverged; ``state`` holds the last finite parameters."""

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


class ClusterModel(nn.Module):
    def __init__(self, centers, alpha=1.0, squared=True):
        super().__init__()
        centers = torch.as_tensor(np.asarray(centers), dtype=torch.float64)
        if centers.dim() != 2 or centers.shape[0] < 1:
            raise ValueError("centers must be a (k, Z) matrix with k >= 1")
        if not torch.isfinite(centers).all():
            raise ValueError("centers must be finite")
        self.centers = nn.Parameter(centers.clone())
        self.alpha = float(alpha)
        self.squared = bool(squared)

    @property
    def k(self):
        return self.centers.shape[0]

    def forward(self, z):
        return soft_assign(z, self.centers, self.alpha, self.squared)


def kmeans_init(latents, k, seed=0, max_iter=100, n_init=10, tol=1e-10):
    """Lloyd iterations from k-means++ seeding, best of ``n_init`` restarts.

    Returns ``(centers, labels, inertia)``.
    """
    x = np.asarray(latents, dtype=np.float64)
    n = x.shape[0]
    if k < 1 or n < k:
        raise ValueError(f"need 1 <= k <= N, got k={k}, N={n}")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, n_init)):
        run = _lloyd(x, k, rng, max_iter, tol)
        if best is None or run[2] < best[2]:
            best = run
    return best


def _lloyd(x, k, rng, max_iter, tol):
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    closest = np.sum((x - centers[0]) ** 2, axis=1)
    for j in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=closest / total)
        centers[j] = x[idx]
        closest = np.minimum(closest, np.sum((x - centers[j]) ** 2, axis=1))

    labels = np.zeros(n, dtype=np.int64)
    for _ in range(max_iter):
        dist = _sq_dist(x, centers)
        labels = np.argmin(dist, axis=1)
        new = centers.copy()
        for j in range(k):
            members = x[labels == j]
            if len(members):
                new[j] = members.mean(axis=0)
            else:
                # re-seed an empty cluster at the point farthest from its centre
                far = np.argmax(dist[np.arange(n), labels])
                new[j] = x[far]
                labels[far] = j
                dist[far] = 0.0
        shift = np.sum((new - centers) ** 2)
        centers = new
        if shift <= tol:
            break
    dist = _sq_dist(x, centers)
    labels = np.argmin(dist, axis=1)
    inertia = float(dist[np.arange(n), labels].sum())
    return centers, labels, inertia


def _sq_dist(x, c):
    return np.sum((x[:, None, :] - c[None, :, :]) ** 2, axis=-1)


def soft_assign(z, centers, alpha=1.0, squared=True):
    """Student's t soft assignment ``q_ij``; rows sum to one.

    ``squared`` selects ``d = ||z - c||^2`` inside the kernel (the usual DEC
    form) instead of the plain distance.
    """
    diff = z[:, None, :] - centers[None, :, :]
    d = (diff * diff).sum(-1)
    if not squared:
        d = torch.sqrt(d + 1e-300)
    logits = -(alpha + 1.0) / 2.0 * torch.log1p(d / alpha)
    return torch.softmax(logits, dim=1)


def target_distribution(q):
    """Sharpened target ``p_ij ∝ q_ij^2 / f_j`` with ``f_j = sum_i q_ij``.

    Returns ``(p, f)``.
    """
    f = q.sum(dim=0)
    weight = q ** 2 / f
    return weight / weight.sum(dim=1, keepdim=True), f


def cluster_loss(q, p, reduction="sum"):
    """KL(P || Q) with ``0 log 0 = 0``. ``reduction='mean'`` averages over rows."""
    if q.shape != p.shape:
        raise ValueError(f"shape mismatch {tuple(q.shape)} vs {tuple(p.shape)}")
    # xlogy gives 0 log 0 = 0 and still propagates NaN
    total = (torch.xlogy(p, p) - torch.xlogy(p, q)).sum()
    if reduction == "mean":
        return total / q.shape[0]
    return total


def hard_assign(q):
    return torch.argmax(q, dim=1)


def dec_train(latent_fn, params, data, model: ClusterModel, epochs=50, refresh_interval=1, lr=1e-3, batch_size=256, seed=0, history=None):
    """Jointly fit ``params`` (encoder parameters used by ``latent_fn``) and centres.

    ``latent_fn(batch)`` maps a data batch to latents. ``refresh_interval`` is in
    epochs: P is recomputed from the full-data Q at the start of every
    ``refresh_interval``-th epoch. Per-epoch mean losses are appended to
    ``history`` when given.
    """
    params = list(params)
    if epochs <= 0:
        return model
    optim = torch.optim.Adam(params + [model.centers], lr=lr)
    gen = torch.Generator().manual_seed(seed)
    n = data.shape[0]
    p_full = None
    good = _snapshot(params, model)
    for epoch in range(epochs):
        if p_full is None or epoch % refresh_interval == 0:
            with torch.no_grad():
                p_full, _ = target_distribution(model(latent_fn(data)))
        order = torch.randperm(n, generator=gen)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            q = model(latent_fn(data[idx]))
            loss = cluster_loss(q, p_full[idx], reduction="mean")
            if not torch.isfinite(loss):
                _restore(params, model, good)
                raise TrainingError(f"cluster loss diverged at epoch {epoch}", good)
            optim.zero_grad()
            loss.backward()
            optim.step()
            total += loss.item() * len(idx)
        good = _snapshot(params, model)
        if history is not None:
            history.append(total / n)
        log.debug("dec epoch %d loss %.6f", epoch, total / n)
    return model


def _snapshot(params, model):
    return [p.detach().clone() for p in params] + [model.centers.detach().clone()]


def _restore(params, model, state):
    with torch.no_grad():
        for p, s in zip(list(params) + [model.centers], state):
            p.copy_(s)
