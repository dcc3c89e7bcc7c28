"""Soft dynamic time warping with an explicit backward recursion.

The forward table is the usual DTW accumulation with the hard minimum replaced
by ``softmin_gamma(x) = -gamma * log(sum(exp(-x / gamma)))``. The gradient is
obtained from the expected-alignment matrix ``E`` computed by the backward
recursion, so no autodiff through the table is needed. Batched routines loop
over table cells and vectorise over the batch axis.
"""

from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class SoftDtwConfig:
    gamma: float = 0.1

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")


def _as_batch(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim == 2:
        x = x[None]
    return x


def _cost(a, b):
    # (B, n, d), (B, m, d) -> (B, n, m) squared euclidean
    diff = a[:, :, None, :] - b[:, None, :, :]
    return np.sum(diff * diff, axis=-1)


def _softmin3(x, y, z, gamma):
    stack = np.stack([x, y, z]) / -gamma
    top = np.max(stack, axis=0)
    top = np.where(np.isfinite(top), top, 0.0)
    return -gamma * (np.log(np.sum(np.exp(stack - top), axis=0)) + top)


def _forward(cost, gamma):
    bsz, n, m = cost.shape
    r = np.full((bsz, n + 2, m + 2), np.inf)
    r[:, 0, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            r[:, i, j] = cost[:, i - 1, j - 1] + _softmin3(r[:, i - 1, j], r[:, i, j - 1], r[:, i - 1, j - 1], gamma)
    return r


def _backward(cost, r, gamma):
    bsz, n, m = cost.shape
    d = np.zeros((bsz, n + 2, m + 2))
    d[:, 1:n + 1, 1:m + 1] = cost
    r = r.copy()
    r[:, :, m + 1] = -np.inf
    r[:, n + 1, :] = -np.inf
    r[:, n + 1, m + 1] = r[:, n, m]
    e = np.zeros((bsz, n + 2, m + 2))
    e[:, n + 1, m + 1] = 1.0
    for j in range(m, 0, -1):
        for i in range(n, 0, -1):
            wa = np.exp((r[:, i + 1, j] - r[:, i, j] - d[:, i + 1, j]) / gamma)
            wb = np.exp((r[:, i, j + 1] - r[:, i, j] - d[:, i, j + 1]) / gamma)
            wc = np.exp((r[:, i + 1, j + 1] - r[:, i, j] - d[:, i + 1, j + 1]) / gamma)
            e[:, i, j] = e[:, i + 1, j] * wa + e[:, i, j + 1] * wb + e[:, i + 1, j + 1] * wc
    return e[:, 1:n + 1, 1:m + 1]


def soft_dtw_batch(a, b, gamma=0.1):
    """Values for a batch of pairs; ``a`` is ``(B, n, d)``, ``b`` is ``(B, m, d)``."""
    a, b = _as_batch(a), _as_batch(b)
    if a.shape[1] == 0 or b.shape[1] == 0:
        raise ValueError("sequences must be nonempty")
    cost = _cost(a, b)
    r = _forward(cost, gamma)
    return r[:, a.shape[1], b.shape[1]]


def soft_dtw_value_and_grad(a, b, gamma=0.1):
    """Batched values and gradients w.r.t. both inputs."""
    a, b = _as_batch(a), _as_batch(b)
    if a.shape[1] == 0 or b.shape[1] == 0:
        raise ValueError("sequences must be nonempty")
    cost = _cost(a, b)
    r = _forward(cost, gamma)
    e = _backward(cost, r, gamma)
    # d cost_ij / d a_i = 2 (a_i - b_j)
    grad_a = 2.0 * (np.sum(e, axis=2)[..., None] * a - np.einsum("bij,bjd->bid", e, b))
    grad_b = 2.0 * (np.sum(e, axis=1)[..., None] * b - np.einsum("bij,bid->bjd", e, a))
    return r[:, a.shape[1], b.shape[1]], grad_a, grad_b


def soft_dtw(a, b, cfg=SoftDtwConfig()):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("sequences must be nonempty")
    return float(soft_dtw_batch(a, b, cfg.gamma)[0])


def soft_dtw_grad(a, b, cfg=SoftDtwConfig()):
    """Gradient of ``soft_dtw(a, b)`` with respect to ``a`` (same shape as ``a``)."""
    a = np.asarray(a, dtype=np.float64)
    _, grad_a, _ = soft_dtw_value_and_grad(a, b, cfg.gamma)
    return grad_a[0].reshape(a.shape)


class _SoftDtwFunction(torch.autograd.Function):
    @staticmethod
    def forward(ctx, a, b, gamma):
        value, grad_a, grad_b = soft_dtw_value_and_grad(a.detach().cpu().numpy(), b.detach().cpu().numpy(), gamma)
        ctx.save_for_backward(torch.as_tensor(grad_a, dtype=a.dtype), torch.as_tensor(grad_b, dtype=b.dtype))
        return torch.as_tensor(value, dtype=a.dtype, device=a.device)

    @staticmethod
    def backward(ctx, grad_out):
        grad_a, grad_b = ctx.saved_tensors
        scale = grad_out[:, None, None]
        return grad_a * scale, grad_b * scale, None


def soft_dtw_torch(a, b, gamma=0.1):
    """Differentiable batched soft-DTW on ``(B, n, d)`` and ``(B, m, d)`` tensors."""
    return _SoftDtwFunction.apply(a, b, gamma)


def vrnn_softdtw_loss(decoded_means, observed, cfg=SoftDtwConfig()):
    """Mean over agents of ``soft_dtw(decoded, observed) / T_obs``.

    ``T_obs`` is taken as the length of the observed feature sequence.
    """
    if decoded_means.shape[0] != observed.shape[0]:
        raise ValueError(f"agent counts differ: {decoded_means.shape[0]} vs {observed.shape[0]}")
    if not torch.is_tensor(decoded_means):
        decoded_means = torch.as_tensor(np.asarray(decoded_means, dtype=np.float64))
    if not torch.is_tensor(observed):
        observed = torch.as_tensor(np.asarray(observed, dtype=np.float64))
    observed = observed.to(decoded_means.dtype)
    values = soft_dtw_torch(decoded_means, observed, cfg.gamma)
    return values.mean() / observed.shape[1]
