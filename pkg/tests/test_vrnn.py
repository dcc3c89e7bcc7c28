import math

import numpy as np
import pytest
import torch

from bpsgcn.vrnn import (
    VRNN,
    GRUCell,
    StepDistributions,
    elbo_loss,
    elbo_terms,
    gaussian_kl,
    gaussian_nll,
    reparameterize,
    run_sequence,
)

from oracles import central_difference, rel_error


def _tiny(seed=0, hidden=3, latent=3):
    torch.manual_seed(seed)
    return VRNN(2, hidden, latent, embed_size=3).double()


def _zero(model):
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()
    return model


class TestSteps:
    def test_zero_weights_encode(self):
        model = _zero(_tiny())
        mu, sigma = model.encode_step(torch.ones(1, 2, dtype=torch.float64), torch.ones(1, 3, dtype=torch.float64))
        np.testing.assert_array_equal(mu.detach(), 0.0)
        np.testing.assert_allclose(sigma.detach(), math.log(2.0), rtol=1e-15)

    def test_zero_weights_decode(self):
        model = _zero(_tiny())
        mu, sigma = model.decode_step(torch.ones(1, 3, dtype=torch.float64), torch.zeros(1, 3, dtype=torch.float64))
        np.testing.assert_array_equal(mu.detach(), 0.0)
        np.testing.assert_allclose(sigma.detach(), math.log(2.0), rtol=1e-15)

    def test_zero_weights_prior(self):
        model = _zero(_tiny())
        mu, sigma = model.prior_step(torch.zeros(2, 3, dtype=torch.float64))
        np.testing.assert_array_equal(mu.detach(), 0.0)
        assert torch.all(sigma > 0)

    def test_deterministic(self):
        model = _tiny()
        g, z, h = (torch.randn(4, d, dtype=torch.float64) for d in (2, 3, 3))
        for fn, x in ((model.encode_step, g), (model.decode_step, z)):
            a1, b1 = fn(x, h)
            a2, b2 = fn(x, h)
            assert torch.equal(a1, a2) and torch.equal(b1, b2)

    def test_sigma_positive(self):
        model = _tiny(hidden=8, latent=4)
        _, dists = model(torch.randn(16, 6, 2, dtype=torch.float64) * 10)
        for s in (dists.sigma_z, dists.sigma_0, dists.sigma_g):
            assert torch.all(s > 0)

    def test_non_finite_rejected(self):
        model = _tiny()
        g = torch.tensor([[float("nan"), 0.0]], dtype=torch.float64)
        with pytest.raises(FloatingPointError):
            model.encode_step(g, torch.zeros(1, 3, dtype=torch.float64))

    @pytest.mark.parametrize("which", ["encode", "decode", "prior"])
    def test_jacobian_in_h(self, which):
        model = _tiny(seed=3)
        x = torch.randn(1, 2 if which == "encode" else 3, dtype=torch.float64)
        h0 = np.random.default_rng(0).normal(size=(1, 3))

        def fn(h):
            h = torch.as_tensor(h, dtype=torch.float64)
            if which == "encode":
                mu, sigma = model.encode_step(x, h)
            elif which == "decode":
                mu, sigma = model.decode_step(x, h)
            else:
                mu, sigma = model.prior_step(h)
            return torch.cat([mu, sigma], dim=-1)

        h = torch.tensor(h0, requires_grad=True)
        analytic = torch.autograd.functional.jacobian(fn, h).squeeze().numpy()
        out_dim = analytic.shape[0]
        for row in range(out_dim):
            numeric = central_difference(lambda v: fn(v)[0, row].item(), h0)
            assert rel_error(analytic[row], numeric[0]) < 1e-4 or np.max(np.abs(analytic[row])) < 1e-10


class TestRecurrence:
    def test_closed_update_gate_keeps_state(self):
        cell = GRUCell(2, 3).double()
        with torch.no_grad():
            cell.x2h.bias[3:6] = -1e4  # update gate slice
        h = torch.randn(5, 3, dtype=torch.float64)
        out = cell(torch.randn(5, 2, dtype=torch.float64), h)
        np.testing.assert_array_equal(out.detach(), h)

    def test_gates_bounded(self):
        cell = GRUCell(2, 4).double()
        r, u, c = cell.gates(torch.randn(50, 2, dtype=torch.float64) * 20, torch.randn(50, 4, dtype=torch.float64))
        assert torch.all((r >= 0) & (r <= 1)) and torch.all((u >= 0) & (u <= 1))
        assert torch.all(torch.abs(c) <= 1)

    def test_recur_gradient(self):
        model = _tiny(seed=5)
        g = torch.randn(1, 2, dtype=torch.float64)
        z = torch.randn(1, 3, dtype=torch.float64)
        h0 = np.random.default_rng(1).normal(size=(1, 3))
        h = torch.tensor(h0, requires_grad=True)
        model.recur(g, z, h).sum().backward()
        numeric = central_difference(lambda v: model.recur(g, z, torch.as_tensor(v)).sum().item(), h0)
        assert rel_error(h.grad.numpy(), numeric) < 1e-4

    def test_length_one(self):
        model = _tiny()
        calls = {"enc": 0, "dec": 0, "prior": 0}
        for name, mod in (("enc", model.enc), ("dec", model.dec), ("prior", model.prior)):
            mod.register_forward_hook(lambda *_, n=name: calls.__setitem__(n, calls[n] + 1))
        run_sequence(model, torch.randn(2, 1, 2, dtype=torch.float64), noise_seed=0)
        assert calls == {"enc": 1, "dec": 1, "prior": 1}

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            run_sequence(_tiny(), torch.zeros(2, 0, 2, dtype=torch.float64))

    def test_seed_reproducible(self):
        model = _tiny()
        g = torch.randn(3, 5, 2, dtype=torch.float64)
        a, _ = run_sequence(model, g, noise_seed=4)
        b, _ = run_sequence(model, g, noise_seed=4)
        assert torch.equal(a.z, b.z) and torch.equal(a.latents, b.latents)

    def test_batch_permutation(self):
        model = _tiny(hidden=6, latent=4)
        g = torch.randn(5, 6, 2, dtype=torch.float64)
        perm = torch.tensor([3, 0, 4, 1, 2])
        a = model.embed(g)
        b = model.embed(g[perm])
        torch.testing.assert_close(a[perm], b, rtol=0, atol=1e-14)

    def test_batch_composition(self):
        model = _tiny(hidden=6, latent=4)
        g = torch.randn(5, 6, 2, dtype=torch.float64)
        torch.testing.assert_close(model.embed(g)[:2], model.embed(g[:2]), rtol=0, atol=1e-14)


class TestReparameterize:
    def test_zero_noise(self):
        mu = torch.tensor([1.0, -2.0])
        assert torch.equal(reparameterize(mu, torch.tensor([3.0, 4.0]), torch.zeros(2)), mu)

    def test_small_sigma(self):
        mu = torch.tensor([1.0, -2.0], dtype=torch.float64)
        z = reparameterize(mu, torch.full((2,), 1e-12, dtype=torch.float64), torch.randn(2, dtype=torch.float64))
        torch.testing.assert_close(z, mu, rtol=0, atol=1e-10)

    def test_gradients_flow(self):
        mu = torch.zeros(3, requires_grad=True)
        sigma = torch.ones(3, requires_grad=True)
        eps = torch.tensor([0.5, -1.0, 2.0])
        reparameterize(mu, sigma, eps).sum().backward()
        assert torch.equal(mu.grad, torch.ones(3))
        assert torch.equal(sigma.grad, eps)


def _dists(mu_z, sigma_z, mu_0, sigma_0, mu_g, sigma_g):
    return StepDistributions(mu_z, sigma_z, mu_0, sigma_0, mu_g, sigma_g)


class TestElbo:
    def test_kl_zero_when_equal(self):
        mu, sigma = torch.randn(2, 4, 3), torch.rand(2, 4, 3) + 0.1
        np.testing.assert_allclose(gaussian_kl(mu, sigma, mu, sigma), 0.0, atol=1e-7)

    def test_kl_nonnegative(self):
        gen = torch.Generator().manual_seed(0)
        a = torch.randn(1000, generator=gen, dtype=torch.float64)
        b = torch.randn(1000, generator=gen, dtype=torch.float64)
        sa = torch.rand(1000, generator=gen, dtype=torch.float64) + 0.05
        sb = torch.rand(1000, generator=gen, dtype=torch.float64) + 0.05
        assert torch.all(gaussian_kl(a, sa, b, sb) >= 0)

    def test_reconstruction_closed_form(self):
        t, d = 5, 2
        g = torch.randn(1, t, d, dtype=torch.float64)
        ones = torch.ones(1, t, 3, dtype=torch.float64)
        dists = _dists(ones * 0, ones, ones * 0, ones, g, torch.ones_like(g))
        recon, kl = elbo_terms(dists, g)
        assert recon.item() == pytest.approx(t * d / 2 * math.log(2 * math.pi), abs=1e-12)
        assert kl.item() == 0.0

    def test_nll_matches_density(self):
        x, mu, s = torch.tensor(0.3), torch.tensor(-0.2), torch.tensor(1.7)
        dens = torch.exp(-0.5 * ((x - mu) / s) ** 2) / (s * math.sqrt(2 * math.pi))
        assert gaussian_nll(x, mu, s).item() == pytest.approx(-math.log(dens.item()), rel=1e-6)

    def test_kl_monte_carlo(self):
        mu_q, s_q, mu_p, s_p = 0.4, 0.7, -0.3, 1.3
        rng = np.random.default_rng(0)
        x = rng.normal(mu_q, s_q, size=100_000)

        def logpdf(v, m, s):
            return -0.5 * math.log(2 * math.pi) - math.log(s) - 0.5 * ((v - m) / s) ** 2

        samples = logpdf(x, mu_q, s_q) - logpdf(x, mu_p, s_p)
        est, se = samples.mean(), samples.std(ddof=1) / math.sqrt(len(samples))
        closed = gaussian_kl(*(torch.tensor(v, dtype=torch.float64) for v in (mu_q, s_q, mu_p, s_p))).item()
        assert abs(est - closed) < 3 * se

    def test_loss_is_agent_mean(self):
        model = _tiny()
        g = torch.randn(4, 5, 2, dtype=torch.float64)
        _, dists = run_sequence(model, g, noise_seed=0)
        recon, kl = elbo_terms(dists, g)
        assert elbo_loss(dists, g).item() == pytest.approx((recon + kl).mean().item(), abs=1e-12)

    def test_parameter_gradients(self):
        # H = Z = 3, T = 4: every parameter group against central differences
        model = _tiny(seed=11)
        g = torch.randn(2, 4, 2, dtype=torch.float64, generator=torch.Generator().manual_seed(2))
        noise = torch.randn(2, 4, 3, dtype=torch.float64, generator=torch.Generator().manual_seed(3))

        def loss():
            _, dists = model(g, noise=noise)
            return elbo_loss(dists, g)

        model.zero_grad()
        loss().backward()
        for name, param in model.named_parameters():
            base = param.detach().numpy().copy()

            def fn(v, param=param):
                with torch.no_grad():
                    param.copy_(torch.as_tensor(v))
                    return loss().item()

            numeric = central_difference(fn, base)
            with torch.no_grad():
                param.copy_(torch.as_tensor(base))
            assert rel_error(param.grad.numpy(), numeric) < 1e-4, name
