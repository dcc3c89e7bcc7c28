"""Straight-through Gumbel-Softmax pseudo-labels."""

from dataclasses import dataclass

import torch
import torch.nn.functional as F


@dataclass
class PseudoLabel:
    onehot: torch.Tensor  # forward value is exactly one-hot; gradient is that of ``soft``
    soft: torch.Tensor
    temperature: float


def sample_gumbel(shape, generator=None, dtype=torch.float64):
    u = torch.rand(shape, generator=generator, dtype=dtype)
    tiny = torch.finfo(dtype).tiny
    inner = -torch.log(u.clamp_min(tiny))
    return -torch.log(inner.clamp_min(tiny))


def gumbel_softmax_st(logits, temperature=1.0, noise_seed=None, noise=None):
    """Relaxed sample ``softmax((logits + g) / tau)`` with a hard one-hot forward.

    ``noise`` overrides the Gumbel draw (pass zeros for a plain argmax);
    otherwise it is drawn from a generator seeded with ``noise_seed``.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if noise is None:
        gen = None if noise_seed is None else torch.Generator().manual_seed(int(noise_seed))
        noise = sample_gumbel(logits.shape, gen, logits.dtype)
    soft = torch.softmax((logits + noise) / temperature, dim=-1)
    hard = F.one_hot(soft.argmax(dim=-1), soft.shape[-1]).to(soft.dtype)
    return PseudoLabel(hard - soft.detach() + soft, soft, temperature)


def hard_labels(q):
    """Per-row argmax; ties resolve to the lowest index."""
    return torch.argmax(torch.as_tensor(q), dim=-1)


def onehot(labels, k, dtype=torch.float64):
    return F.one_hot(torch.as_tensor(labels), k).to(dtype)
