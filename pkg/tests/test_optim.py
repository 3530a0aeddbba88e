import pytest
import torch

from ns3d.errors import NumericError
from ns3d.layers import AttentionConfig, CrossAttention, fourier_posemb
from ns3d.optim import AdamW, OptimState, adamw_step, grad_check
from ns3d.tokenizer import LfqLayer


class TestAdamW:
    def test_zero_grad_zero_decay_is_identity(self):
        p = torch.tensor([1.0, -2.0, 3.0])
        state = OptimState(lr=0.1, weight_decay=0.0)
        adamw_step([p], [torch.zeros(3)], state)
        assert torch.equal(p, torch.tensor([1.0, -2.0, 3.0]))

    def test_single_step_direct_arithmetic(self):
        # bias-corrected moments make the first update lr * g/(|g| + eps)
        p = torch.tensor([1.0])
        state = OptimState(lr=0.1, weight_decay=0.0, eps=1e-8)
        adamw_step([p], [torch.tensor([1.0])], state)
        assert abs(p.item() - 0.9) < 1e-6

    def test_decoupled_decay(self):
        p = torch.tensor([2.0])
        state = OptimState(lr=0.1, weight_decay=0.05)
        adamw_step([p], [torch.zeros(1)], state)
        assert abs(p.item() - 2.0 * (1 - 0.1 * 0.05)) < 1e-7

    def test_nan_gradient_aborts(self):
        p = torch.tensor([1.0])
        with pytest.raises(NumericError):
            adamw_step([p], [torch.tensor([float("nan")])], OptimState())

    def test_step_counter_increases(self):
        p = torch.tensor([1.0])
        state = OptimState()
        for expected in (1, 2, 3):
            adamw_step([p], [torch.tensor([0.5])], state)
            assert state.step == expected

    def test_wrapper_matches_op(self):
        torch.manual_seed(0)
        p1 = torch.randn(4, requires_grad=True)
        p2 = p1.detach().clone()
        opt = AdamW([p1], lr=0.01, weight_decay=0.05)
        state = OptimState(lr=0.01, weight_decay=0.05)
        for _ in range(3):
            g = torch.randn(4)
            p1.grad = g.clone()
            opt.step()
            adamw_step([p2], [g], state)
        assert torch.allclose(p1.detach(), p2)


class TestGradCheck:
    def test_square(self, f64):
        x = torch.tensor([3.0])
        err = grad_check(lambda: (x**2).sum(), [x])
        assert err <= 1e-8
        assert abs(x.grad.item() - 6.0) < 1e-10

    def test_cross_attention_layer(self, f64):
        attn = CrossAttention(AttentionConfig(8, 2))
        q = torch.randn(4, 8)
        kv = torch.randn(4, 8)
        params = [attn.q_proj.weight, attn.v_proj.bias]
        err = grad_check(lambda: attn(q, kv).square().sum(), params)
        assert err <= 1e-4

    def test_posemb_path(self, f64):
        p = torch.randn(3, 3) * 0.3
        err = grad_check(lambda: fourier_posemb(p, 2).square().sum(), [p])
        assert err <= 1e-6

    def test_lfq_straight_through_surrogate(self, f64):
        # gradient through the quantizer equals the identity surrogate's gradient
        lfq = LfqLayer(6, 3)
        e = torch.randn(4, 6, requires_grad=True)
        _, deq, _ = lfq(e)
        deq.square().sum().backward()
        g_st = e.grad.clone()

        e2 = e.detach().clone().requires_grad_(True)
        zeta = lfq.in_proj(e2)
        signs = torch.where(zeta > 0, 1.0, -1.0).to(zeta.dtype)
        surrogate = lfq.out_proj(zeta + (signs - zeta).detach())
        surrogate.square().sum().backward()
        assert torch.allclose(g_st, e2.grad, atol=1e-12)

        # and the identity surrogate itself passes finite differences
        e3 = e.detach().clone()

        def f_identity():
            return lfq.out_proj(lfq.in_proj(e3)).square().sum()

        err = grad_check(f_identity, [e3])
        assert err <= 1e-6
