import numpy as np
import pytest
import torch

from bpsgcn.softdtw import (
    SoftDtwConfig,
    soft_dtw,
    soft_dtw_batch,
    soft_dtw_grad,
    soft_dtw_torch,
    vrnn_softdtw_loss,
)

from oracles import alignment_paths, central_difference, hard_dtw_enum, rel_error, soft_dtw_enum


def _pairs(n_pairs, seed, max_len=4, dim=1):
    rng = np.random.default_rng(seed)
    for _ in range(n_pairs):
        n, m = rng.integers(1, max_len + 1, size=2)
        yield rng.normal(size=(n, dim)), rng.normal(size=(m, dim))


class TestValue:
    def test_identical_small_gamma(self):
        a = np.array([[0.0], [1.0], [3.0]])
        assert abs(soft_dtw(a, a, SoftDtwConfig(1e-4))) < 1e-3

    def test_worked_example(self):
        # the only zero-cost alignment is the diagonal; others cost >= 1
        assert abs(soft_dtw([1.0, 2.0], [1.0, 2.0], SoftDtwConfig(0.01)) - 0.0) < 1e-3
        assert hard_dtw_enum([1.0, 2.0], [1.0, 2.0]) == 0.0

    def test_matches_path_enumeration(self):
        for a, b in _pairs(50, 0, dim=2):
            for gamma in (0.01, 0.1, 1.0):
                assert soft_dtw(a, b, SoftDtwConfig(gamma)) == pytest.approx(soft_dtw_enum(a, b, gamma), abs=1e-10)

    @pytest.mark.parametrize("gamma", [0.01, 0.1, 1.0])
    def test_below_hard_dtw(self, gamma):
        for a, b in _pairs(100, 1):
            assert soft_dtw(a, b, SoftDtwConfig(gamma)) <= hard_dtw_enum(a, b) + 1e-12

    def test_convergence_to_hard(self):
        # 0 <= hard - soft <= gamma * log(#paths)
        for a, b in _pairs(50, 2):
            hard = hard_dtw_enum(a, b)
            n_paths = len(alignment_paths(len(a), len(b)))
            gaps = [hard - soft_dtw(a, b, SoftDtwConfig(g)) for g in (1.0, 0.1, 0.01)]
            assert gaps[0] >= gaps[1] - 1e-12 and gaps[1] >= gaps[2] - 1e-12 and gaps[2] >= -1e-12
            for gap, g in zip(gaps, (1.0, 0.1, 0.01)):
                assert gap <= g * np.log(n_paths) + 1e-12

    def test_monotone_in_gamma(self):
        gammas = [0.001, 0.01, 0.1, 0.5, 1.0, 5.0]
        for a, b in _pairs(50, 3, dim=2):
            vals = [soft_dtw(a, b, SoftDtwConfig(g)) for g in gammas]
            assert all(x >= y - 1e-12 for x, y in zip(vals, vals[1:]))

    def test_symmetry(self):
        for a, b in _pairs(50, 4, dim=2):
            assert soft_dtw(a, b) == pytest.approx(soft_dtw(b, a), abs=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            soft_dtw(np.zeros((0, 1)), np.zeros((2, 1)))

    def test_gamma_must_be_positive(self):
        with pytest.raises(ValueError):
            SoftDtwConfig(0.0)

    def test_batch_agrees_with_single(self):
        rng = np.random.default_rng(5)
        a, b = rng.normal(size=(6, 4, 2)), rng.normal(size=(6, 5, 2))
        batch = soft_dtw_batch(a, b, 0.3)
        for i in range(6):
            assert batch[i] == pytest.approx(soft_dtw(a[i], b[i], SoftDtwConfig(0.3)), abs=1e-12)


class TestGradient:
    def test_constant_identical_sequences(self):
        a = np.ones((4, 2))
        np.testing.assert_allclose(soft_dtw_grad(a, a, SoftDtwConfig(0.1)), 0.0, atol=1e-12)

    @pytest.mark.parametrize("gamma", [0.05, 0.1, 1.0])
    def test_finite_differences(self, gamma):
        cfg = SoftDtwConfig(gamma)
        for a, b in _pairs(20, 6, max_len=5, dim=2):
            analytic = soft_dtw_grad(a, b, cfg)
            numeric = central_difference(lambda x: soft_dtw(x, b, cfg), a)
            assert rel_error(analytic, numeric) < 1e-4

    def test_stable_across_gamma(self):
        rng = np.random.default_rng(7)
        a, b = rng.normal(size=(6, 2)) * 5, rng.normal(size=(6, 2)) * 5
        for gamma in np.geomspace(1e-3, 10, 15):
            g = soft_dtw_grad(a, b, SoftDtwConfig(gamma))
            assert np.all(np.isfinite(g))

    def test_torch_gradcheck(self):
        rng = np.random.default_rng(8)
        a = torch.tensor(rng.normal(size=(3, 4, 2)), requires_grad=True)
        b = torch.tensor(rng.normal(size=(3, 5, 2)), requires_grad=True)
        assert torch.autograd.gradcheck(lambda x, y: soft_dtw_torch(x, y, 0.2), (a, b), eps=1e-6, atol=1e-6)


class TestVrnnLoss:
    def test_identical_is_near_zero(self):
        g = torch.tensor(np.random.default_rng(0).normal(size=(3, 6, 2)))
        assert abs(float(vrnn_softdtw_loss(g, g, SoftDtwConfig(1e-4)))) < 1e-3

    def test_single_agent(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(1, 6, 2)), rng.normal(size=(1, 6, 2))
        loss = float(vrnn_softdtw_loss(torch.tensor(a), torch.tensor(b)))
        assert loss == pytest.approx(soft_dtw(a[0], b[0]) / 6, abs=1e-12)

    def test_two_agents_mean(self):
        rng = np.random.default_rng(2)
        a, b = rng.normal(size=(2, 6, 2)), rng.normal(size=(2, 6, 2))
        loss = float(vrnn_softdtw_loss(torch.tensor(a), torch.tensor(b)))
        expected = (soft_dtw(a[0], b[0]) + soft_dtw(a[1], b[1])) / 2 / 6
        assert loss == pytest.approx(expected, abs=1e-12)

    def test_agent_mismatch(self):
        with pytest.raises(ValueError):
            vrnn_softdtw_loss(torch.zeros(2, 6, 2), torch.zeros(3, 6, 2))
