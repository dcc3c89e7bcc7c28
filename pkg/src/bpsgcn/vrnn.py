"""Variational recurrent encoder-decoder over behaviour feature sequences."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

LOG_2PI = math.log(2.0 * math.pi)


class GRUCell(nn.Module):
    """Gated recurrent cell with ``h = (1 - u) * h_prev + u * candidate``.

    With the update gate ``u`` saturated at 0 the state is carried unchanged.
    """

    def __init__(self, input_size, hidden_size):
        super().__init__()
        self.hidden_size = hidden_size
        self.x2h = nn.Linear(input_size, 3 * hidden_size)
        self.h2h = nn.Linear(hidden_size, 3 * hidden_size)

    def gates(self, x, h):
        xr, xu, xn = self.x2h(x).chunk(3, dim=-1)
        hr, hu, hn = self.h2h(h).chunk(3, dim=-1)
        reset = torch.sigmoid(xr + hr)
        update = torch.sigmoid(xu + hu)
        candidate = torch.tanh(xn + reset * hn)
        return reset, update, candidate

    def forward(self, x, h):
        _, update, candidate = self.gates(x, h)
        return (1.0 - update) * h + update * candidate


class _GaussianHead(nn.Module):
    """Affine + ReLU trunk followed by a mean head and a softplus scale head."""

    def __init__(self, in_features, hidden, out_features):
        super().__init__()
        self.trunk = nn.Linear(in_features, hidden)
        self.mean = nn.Linear(hidden, out_features)
        self.scale = nn.Linear(hidden, out_features)

    def forward(self, x):
        h = F.relu(self.trunk(x))
        return self.mean(h), F.softplus(self.scale(h))


@dataclass
class StepDistributions:
    """Per-step Gaussian parameters, each ``(B, T, ·)``."""

    mu_z: torch.Tensor
    sigma_z: torch.Tensor
    mu_0: torch.Tensor
    sigma_0: torch.Tensor
    mu_g: torch.Tensor
    sigma_g: torch.Tensor


@dataclass
class LatentSummary:
    z: torch.Tensor  # (B, Z) posterior mean averaged over steps
    latents: torch.Tensor  # (B, T, Z) per-step z actually fed to the recurrence
    hiddens: torch.Tensor  # (B, T, H)


class VRNN(nn.Module):
    def __init__(self, feature_dim=2, hidden_size=64, latent_size=32, embed_size=None):
        super().__init__()
        embed = embed_size or hidden_size
        self.feature_dim = feature_dim
        self.hidden_size = hidden_size
        self.latent_size = latent_size
        self.phi_g = nn.Sequential(nn.Linear(feature_dim, embed), nn.ReLU())
        self.phi_z = nn.Sequential(nn.Linear(latent_size, embed), nn.ReLU())
        self.enc = _GaussianHead(embed + hidden_size, hidden_size, latent_size)
        self.dec = _GaussianHead(embed + hidden_size, hidden_size, feature_dim)
        self.prior = _GaussianHead(hidden_size, hidden_size, latent_size)
        self.rnn = GRUCell(2 * embed, hidden_size)

    def encode_step(self, g_t, h_prev):
        _check_finite(g_t, h_prev)
        return self.enc(torch.cat([self.phi_g(g_t), h_prev], dim=-1))

    def decode_step(self, z_t, h_prev):
        _check_finite(z_t, h_prev)
        return self.dec(torch.cat([self.phi_z(z_t), h_prev], dim=-1))

    def prior_step(self, h_prev):
        _check_finite(h_prev)
        return self.prior(h_prev)

    def recur(self, g_t, z_t, h_prev):
        return self.rnn(torch.cat([self.phi_g(g_t), self.phi_z(z_t)], dim=-1), h_prev)

    def forward(self, g, noise=None, sample=True):
        """Run the recurrence over ``g`` of shape ``(B, T, feature_dim)``.

        ``noise`` (same shape as the latents) overrides the draw; with
        ``sample=False`` the posterior mean is fed forward instead.
        """
        if g.dim() != 3 or g.shape[1] < 1:
            raise ValueError("expected a nonempty (B, T, D) feature tensor")
        bsz, steps, _ = g.shape
        h = g.new_zeros(bsz, self.hidden_size)
        out = {k: [] for k in ("mu_z", "sigma_z", "mu_0", "sigma_0", "mu_g", "sigma_g", "z", "h")}
        for t in range(steps):
            mu_0, sigma_0 = self.prior_step(h)
            mu_z, sigma_z = self.encode_step(g[:, t], h)
            if not sample:
                z = mu_z
            else:
                eps = noise[:, t] if noise is not None else torch.randn_like(mu_z)
                z = reparameterize(mu_z, sigma_z, eps)
            mu_g, sigma_g = self.decode_step(z, h)
            h = self.recur(g[:, t], z, h)
            for key, val in zip(out, (mu_z, sigma_z, mu_0, sigma_0, mu_g, sigma_g, z, h)):
                out[key].append(val)
        stacked = {k: torch.stack(v, dim=1) for k, v in out.items()}
        dists = StepDistributions(*(stacked[k] for k in ("mu_z", "sigma_z", "mu_0", "sigma_0", "mu_g", "sigma_g")))
        summary = LatentSummary(stacked["mu_z"].mean(dim=1), stacked["z"], stacked["h"])
        return summary, dists

    def embed(self, g):
        """Deterministic clustering latent.

        The recurrence is fed posterior means instead of samples, and the
        per-step posterior means are averaged over time. A single step's
        posterior tracks that step's observation too closely to characterise
        the whole track.
        """
        summary, _ = self.forward(g, sample=False)
        return summary.z

    def encoder_parameters(self):
        """Parameters that influence the clustering latent."""
        for module in (self.phi_g, self.phi_z, self.enc, self.rnn):
            yield from module.parameters()


def run_sequence(model: VRNN, g, noise_seed=None):
    """Sampled pass with a private generator; returns ``(LatentSummary, StepDistributions)``."""
    if g.dim() != 3 or g.shape[1] < 1:
        raise ValueError("expected a nonempty (B, T, D) feature tensor")
    gen = torch.Generator().manual_seed(0 if noise_seed is None else int(noise_seed))
    noise = torch.randn(g.shape[0], g.shape[1], model.latent_size, generator=gen, dtype=g.dtype)
    return model(g, noise=noise)


def reparameterize(mu, sigma, noise):
    return mu + sigma * noise


def gaussian_nll(x, mu, sigma):
    """Elementwise ``-log N(x | mu, sigma^2)``."""
    return 0.5 * LOG_2PI + torch.log(sigma) + 0.5 * ((x - mu) / sigma) ** 2


def gaussian_kl(mu_q, sigma_q, mu_p, sigma_p):
    """Elementwise KL(N(mu_q, sigma_q^2) || N(mu_p, sigma_p^2))."""
    return (
        torch.log(sigma_p / sigma_q)
        + (sigma_q ** 2 + (mu_q - mu_p) ** 2) / (2.0 * sigma_p ** 2)
        - 0.5
    )


def elbo_terms(dists: StepDistributions, g):
    """Per-agent reconstruction NLL and KL, each summed over steps and dims."""
    recon = gaussian_nll(g, dists.mu_g, dists.sigma_g).sum(dim=(1, 2))
    kl = gaussian_kl(dists.mu_z, dists.sigma_z, dists.mu_0, dists.sigma_0).sum(dim=(1, 2))
    return recon, kl


def elbo_loss(dists: StepDistributions, g):
    """Negative ELBO averaged over agents."""
    recon, kl = elbo_terms(dists, g)
    return (recon + kl).mean()


def _check_finite(*tensors):
    for t in tensors:
        if not torch.isfinite(t).all():
            raise FloatingPointError("non-finite input to VRNN step")
