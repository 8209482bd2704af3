import math

import pytest
import torch

from capsosr.targets import (
    FIXED,
    LEARNABLE,
    TargetBank,
    contrastive_loss,
    kl_attraction_loss,
    min_pairwise_target_distance,
    pairwise_target_distances,
    stop_gradient,
)
from capsosr.variational import CapsuleDistribution

pytestmark = pytest.mark.usefixtures("double_precision")


def random_caps(B, K, d, requires_grad=False, seed=0):
    g = torch.Generator().manual_seed(seed)
    mu = torch.randn(B, K, d, generator=g).requires_grad_(requires_grad)
    var = (torch.rand(B, K, d, generator=g) + 0.3).requires_grad_(requires_grad)
    return CapsuleDistribution(mu, var)


class TestBankInit:
    @pytest.mark.parametrize("mode", [FIXED, LEARNABLE])
    def test_one_hot_unit_variance(self, mode):
        bank = TargetBank(3, 2, mode)
        for k in range(3):
            for j in range(3):
                assert torch.equal(bank.mu[k, j], torch.full((2,), float(j == k)))
        assert torch.allclose(bank.var, torch.ones(3, 3, 2), atol=1e-15)

    def test_fixed_mode_has_no_parameters(self):
        assert list(TargetBank(3, 2, FIXED).parameters()) == []

    def test_learnable_parameters(self):
        names = {n for n, _ in TargetBank(3, 2, LEARNABLE).named_parameters()}
        assert names == {"mu", "raw_var"}
        names = {n for n, _ in TargetBank(3, 2, LEARNABLE, freeze_variance=True).named_parameters()}
        assert names == {"mu"}

    def test_initial_pairwise_distance(self):
        # targets differ by 1 in d coordinates of two of the K slots
        for K, d in [(2, 1), (3, 4), (6, 8)]:
            D = pairwise_target_distances(TargetBank(K, d))
            assert torch.allclose(D.diagonal(), torch.zeros(K), atol=1e-12)
            off = D[~torch.eye(K, dtype=torch.bool)]
            assert torch.allclose(off, torch.full_like(off, d / K), atol=1e-12)
            assert min_pairwise_target_distance(TargetBank(K, d)) == pytest.approx(d / K, abs=1e-12)

    def test_invalid(self):
        with pytest.raises(ValueError):
            TargetBank(1, 2)
        with pytest.raises(ValueError):
            TargetBank(3, 0)
        with pytest.raises(ValueError):
            TargetBank(3, 2, "other")
        with pytest.raises(ValueError):
            TargetBank(3, 2, margin=[1.0, 2.0])

    def test_per_class_margins(self):
        assert TargetBank(3, 2, margin=[1.0, 2.0, 3.0]).margins.tolist() == [1.0, 2.0, 3.0]


class TestStopGradient:
    def test_identity_forward_zero_backward(self):
        x = torch.randn(4, requires_grad=True)
        y = stop_gradient(x)
        assert torch.equal(x, y)
        (y * 2 + x).sum().backward()
        assert torch.equal(x.grad, torch.ones(4))

    def test_attraction_reaches_capsules_only(self):
        bank = TargetBank(3, 2)
        C = random_caps(5, 3, 2, requires_grad=True)
        kl_attraction_loss(C, torch.tensor([0, 1, 2, 0, 1]), bank).backward()
        assert C.mu.grad.abs().sum() > 0 and C.var.grad.abs().sum() > 0
        assert bank.mu.grad is None and bank.raw_var.grad is None

    def test_contrastive_reaches_targets_only(self):
        bank = TargetBank(3, 2, margin=10.0)
        C = random_caps(5, 3, 2, requires_grad=True)
        contrastive_loss(C, torch.tensor([0, 1, 2, 0, 1]), bank).backward()
        assert C.mu.grad is None and C.var.grad is None
        assert bank.mu.grad.abs().sum() > 0 and bank.raw_var.grad.abs().sum() > 0


class TestLosses:
    def test_attraction_value(self):
        bank = TargetBank(2, 1)
        C = CapsuleDistribution(torch.tensor([[[1.0], [0.0]]]), torch.ones(1, 2, 1))
        assert kl_attraction_loss(C, torch.tensor([0]), bank).item() == 0.0
        # target 1 differs in both slots by 1: mean of two KLs of 0.5
        assert kl_attraction_loss(C, torch.tensor([1]), bank).item() == pytest.approx(0.5)

    def test_contrastive_value(self):
        bank = TargetBank(3, 1, margin=2.0)
        C = CapsuleDistribution(torch.tensor([[[1.0], [0.0], [0.0]]]), torch.ones(1, 3, 1))
        # d to the two other targets is 2 * 0.5 / 3 = 1/3 each
        expect = (2.0 - 1 / 3)
        assert contrastive_loss(C, torch.tensor([0]), bank).item() == pytest.approx(expect)

    def test_contrastive_inactive_beyond_margin(self):
        bank = TargetBank(3, 1, margin=0.1)
        C = CapsuleDistribution(torch.tensor([[[1.0], [0.0], [0.0]]]), torch.ones(1, 3, 1))
        assert contrastive_loss(C, torch.tensor([0]), bank).item() == 0.0

    def test_contrastive_pushes_targets_apart(self):
        bank = TargetBank(3, 2, margin=10.0)
        before = min_pairwise_target_distance(bank)
        opt = torch.optim.SGD(bank.parameters(), lr=0.1)
        y = torch.tensor([0, 1, 2] * 4)
        for _ in range(50):
            C = CapsuleDistribution(bank.mu[y].detach() + 0.01, bank.var[y].detach())
            opt.zero_grad()
            contrastive_loss(C, y, bank).backward()
            opt.step()
        assert min_pairwise_target_distance(bank) > before

    def test_label_range(self):
        bank = TargetBank(3, 2)
        C = random_caps(2, 3, 2)
        with pytest.raises(ValueError):
            kl_attraction_loss(C, torch.tensor([0, 3]), bank)
        with pytest.raises(ValueError):
            contrastive_loss(C, torch.tensor([-1, 0]), bank)

    def test_fixed_var_exact(self):
        assert torch.equal(TargetBank(3, 2, FIXED).var, torch.ones(3, 3, 2))
        assert TargetBank(3, 2).var[0, 0, 0].item() == pytest.approx(1.0, abs=1e-15)
        assert math.isclose(torch.nn.functional.softplus(TargetBank(2, 1).raw_var)[0, 0, 0].item(), 1.0)
