import math

import numpy as np
import pytest
import torch

from oracles import mc_kl

from capsosr.variational import (
    CapsuleDistribution,
    ProbabilisticHead,
    VAR_FLOOR,
    capsule_distance,
    class_posterior,
    distances_to_bank,
    kl_diag_gauss,
    reparameterize,
)

pytestmark = pytest.mark.usefixtures("double_precision")


def kl_t(mu1, var1, mu2, var2):
    return kl_diag_gauss(*(torch.as_tensor(np.asarray(a, dtype=float)) for a in (mu1, var1, mu2, var2)))


class TestKL:
    def test_unit_shift(self):
        assert kl_t([0.0], [1.0], [1.0], [1.0]).item() == 0.5

    def test_self_is_zero(self):
        mu, var = torch.randn(5, 4), torch.rand(5, 4) + 0.1
        assert torch.equal(kl_diag_gauss(mu, var, mu, var), torch.zeros(5))

    def test_variance_only(self):
        # KL(N(0,1) || N(0,2)) = 0.5 (log 2 + 1/2 - 1)
        assert kl_t([0.0], [1.0], [0.0], [2.0]).item() == pytest.approx(0.5 * (math.log(2) - 0.5), abs=1e-15)

    def test_sums_over_dimensions(self):
        one = kl_t([0.0], [1.0], [1.0], [1.0]).item()
        assert kl_t([0.0] * 3, [1.0] * 3, [1.0] * 3, [1.0] * 3).item() == pytest.approx(3 * one)

    def test_asymmetric(self):
        a = kl_t([0.0], [1.0], [0.0], [4.0]).item()
        b = kl_t([0.0], [4.0], [0.0], [1.0]).item()
        assert a != pytest.approx(b)

    @pytest.mark.parametrize("bad", [0.0, -1.0])
    def test_rejects_nonpositive_variance(self, bad):
        with pytest.raises(ValueError):
            kl_t([0.0], [bad], [0.0], [1.0])
        with pytest.raises(ValueError):
            kl_t([0.0], [1.0], [0.0], [bad])

    def test_monte_carlo_agreement(self):
        rng = np.random.default_rng(0)
        for _ in range(5):
            d = int(rng.integers(1, 5))
            mu1, mu2 = rng.normal(size=d), rng.normal(size=d)
            var1, var2 = rng.uniform(0.3, 2, size=d), rng.uniform(0.3, 2, size=d)
            ref = mc_kl(mu1, var1, mu2, var2, 200_000, rng)
            assert kl_t(mu1, var1, mu2, var2).item() == pytest.approx(ref, rel=0.03, abs=5e-3)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        args = [torch.tensor(rng.normal(size=3)), torch.tensor(rng.uniform(0.5, 2, 3)),
                torch.tensor(rng.normal(size=3)), torch.tensor(rng.uniform(0.5, 2, 3))]
        args = [a.requires_grad_(True) for a in args]
        assert torch.autograd.gradcheck(kl_diag_gauss, args, eps=1e-6, atol=1e-7)


class TestCapsuleDistance:
    def test_mean_over_slots(self):
        mu = torch.zeros(3, 2)
        var = torch.ones(3, 2)
        T_mu = torch.tensor([[1.0, 0.0], [0.0, 0.0], [0.0, 0.0]])
        # one slot at KL 0.5, two at 0
        assert capsule_distance(CapsuleDistribution(mu, var), T_mu, var).item() == pytest.approx(0.5 / 3)

    def test_bank_matches_loop(self):
        B, Kt, K, d = 4, 3, 3, 2
        C = CapsuleDistribution(torch.randn(B, K, d), torch.rand(B, K, d) + 0.2)
        T_mu, T_var = torch.randn(Kt, K, d), torch.rand(Kt, K, d) + 0.2
        D = distances_to_bank(C, T_mu, T_var)
        for b in range(B):
            for k in range(Kt):
                ref = capsule_distance(CapsuleDistribution(C.mu[b], C.var[b]), T_mu[k], T_var[k])
                assert D[b, k].item() == pytest.approx(ref.item(), abs=1e-14)

    def test_shape_mismatch(self):
        C = CapsuleDistribution(torch.zeros(1, 3, 2), torch.ones(1, 3, 2))
        with pytest.raises(ValueError):
            capsule_distance(C, torch.zeros(3, 4), torch.ones(3, 4))

    def test_distribution_shape_check(self):
        with pytest.raises(ValueError):
            CapsuleDistribution(torch.zeros(2, 3), torch.ones(3, 2))


class TestPosterior:
    def test_sums_to_one_and_order(self):
        d = torch.tensor([[0.1, 2.0, 0.5]])
        p = class_posterior(d, gamma=2.0).probs
        assert p.sum().item() == pytest.approx(1.0)
        assert p.argmax().item() == 0
        assert p[0, 0] > p[0, 2] > p[0, 1]

    def test_large_distances_stable(self):
        p = class_posterior(torch.tensor([1e6, 1e6 + 1.0]), 1.0).probs
        assert torch.isfinite(p).all()
        assert p[0].item() == pytest.approx(1 / (1 + math.exp(-1)))

    def test_invalid(self):
        with pytest.raises(ValueError):
            class_posterior(torch.tensor([1.0]), 0.0)
        with pytest.raises(ValueError):
            class_posterior(torch.zeros(0), 1.0)


class TestHead:
    def test_variance_positive(self):
        head = ProbabilisticHead(4, 3)
        with torch.no_grad():
            head.pre_var.bias.fill_(-1e3)
        dist = head(torch.randn(2, 5, 4))
        assert dist.mu.shape == (2, 5, 3)
        assert (dist.var >= VAR_FLOOR).all()

    def test_wrong_input_dim(self):
        with pytest.raises(ValueError):
            ProbabilisticHead(4, 3)(torch.randn(2, 5, 6))

    def test_reparameterize_moments(self):
        dist = CapsuleDistribution(torch.full((200_000, 1, 1), 2.0), torch.full((200_000, 1, 1), 0.25))
        z = reparameterize(dist, torch.Generator().manual_seed(0)).z
        assert z.mean().item() == pytest.approx(2.0, abs=0.01)
        assert z.var().item() == pytest.approx(0.25, rel=0.02)

    def test_reparameterize_gradient_path(self):
        mu = torch.zeros(1, 2, 3, requires_grad=True)
        var = torch.ones(1, 2, 3, requires_grad=True)
        s = reparameterize(CapsuleDistribution(mu, var), torch.Generator().manual_seed(0))
        s.z.sum().backward()
        assert torch.equal(mu.grad, torch.ones_like(mu))
        assert torch.allclose(var.grad, 0.5 * s.noise)

    def test_reparameterize_seeded(self):
        dist = CapsuleDistribution(torch.zeros(3, 2), torch.ones(3, 2))
        a = reparameterize(dist, torch.Generator().manual_seed(5)).z
        b = reparameterize(dist, torch.Generator().manual_seed(5)).z
        assert torch.equal(a, b)
