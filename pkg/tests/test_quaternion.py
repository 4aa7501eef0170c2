import pytest
import torch
import torch.nn.functional as F

from helpers import fd_gradcheck
from uwrestore.engine import EngineError
from uwrestore.quaternion import QuaternionCollapse, QuaternionConv, QuaternionFeature


def rand(*shape, seed=0):
    gen = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, dtype=torch.float64, generator=gen)


def identity_kernel(channels, kernel_size):
    w = torch.zeros(channels, channels, kernel_size, kernel_size, dtype=torch.float64)
    center = kernel_size // 2
    for c in range(channels):
        w[c, c, center, center] = 1.0
    return w


def oracle_components(a, b, c, conv):
    """Reference expansion via independent per-term convolutions."""
    pad = conv.padding

    def cv(x, w):
        if x is None:
            return 0.0
        return F.conv2d(x, w, padding=pad)

    wr, wi, wj, wk = conv.w_r, conv.w_i, conv.w_j, conv.w_k
    out_r = -cv(a, wi) - cv(b, wj) - cv(c, wk)
    out_i = cv(a, wr) - cv(b, wk) + cv(c, wj)
    out_j = cv(a, wk) + cv(b, wr) + cv(c, wi)
    out_k = cv(a, wj) - cv(b, wi) + cv(c, wr)
    return out_r, out_i, out_j, out_k


class TestQuaternionFeature:
    def test_branch_embedding_zeroes_real_and_k(self):
        a, b = rand(1, 3, 4, 4, seed=1), rand(1, 3, 4, 4, seed=2)
        q = QuaternionFeature.from_branches(a, b)
        assert torch.all(q.r == 0) and torch.all(q.k == 0)
        assert torch.equal(q.i, a) and torch.equal(q.j, b)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(EngineError, match="differ"):
            QuaternionFeature.from_branches(torch.zeros(1, 3, 4, 4), torch.zeros(1, 3, 5, 5))


class TestQuaternionConv:
    @pytest.mark.parametrize("ksize", [1, 3])
    def test_identity_kernel_passes_branches_through(self, ksize):
        conv = QuaternionConv(3, ksize).double()
        with torch.no_grad():
            conv.w_r.copy_(identity_kernel(3, ksize))
            conv.w_i.zero_()
            conv.w_j.zero_()
            conv.w_k.zero_()
        a, b = rand(2, 3, 5, 5, seed=3), rand(2, 3, 5, 5, seed=4)
        q = conv(a, b)
        assert torch.allclose(q.r, torch.zeros_like(a), atol=1e-12)
        assert torch.allclose(q.i, a, atol=1e-12)
        assert torch.allclose(q.j, b, atol=1e-12)
        assert torch.allclose(q.k, torch.zeros_like(a), atol=1e-12)

    def test_zero_inputs_give_zero_outputs(self):
        conv = QuaternionConv(4, 3).double()
        z = torch.zeros(1, 4, 6, 6, dtype=torch.float64)
        q = conv(z, z)
        for comp in (q.r, q.i, q.j, q.k):
            assert torch.all(comp == 0)

    @pytest.mark.parametrize("with_c", [False, True])
    def test_matches_per_term_oracle(self, with_c):
        conv = QuaternionConv(3, 3).double()
        a, b = rand(2, 3, 6, 6, seed=5), rand(2, 3, 6, 6, seed=6)
        c = rand(2, 3, 6, 6, seed=7) if with_c else None
        q = conv(a, b, c)
        r, i, j, k = oracle_components(a, b, c, conv)
        assert torch.allclose(q.r, r, atol=1e-8)
        assert torch.allclose(q.i, i, atol=1e-8)
        assert torch.allclose(q.j, j, atol=1e-8)
        assert torch.allclose(q.k, k, atol=1e-8)

    def test_absent_slot_equals_zero_slot(self):
        conv = QuaternionConv(3, 3).double()
        a, b = rand(1, 3, 5, 5, seed=8), rand(1, 3, 5, 5, seed=9)
        sparse = conv(a, b, None)
        dense = conv(a, b, torch.zeros_like(a))
        for lhs, rhs in zip(
            (sparse.r, sparse.i, sparse.j, sparse.k), (dense.r, dense.i, dense.j, dense.k)
        ):
            assert torch.allclose(lhs, rhs, atol=1e-12)

    def test_linear_in_each_input(self):
        conv = QuaternionConv(3, 3).double()
        a1, a2 = rand(1, 3, 5, 5, seed=10), rand(1, 3, 5, 5, seed=11)
        b = rand(1, 3, 5, 5, seed=12)
        lhs = conv(2.0 * a1 - 0.5 * a2, b)
        r1, r2, rb = conv(a1, b), conv(a2, b), conv(torch.zeros_like(b), b)
        # linearity in A with B fixed: f(aA1+bA2, B) = a f(A1,B) + b f(A2,B) - (a+b-1) f(0,B)
        for comp in "rijk":
            expect = (
                2.0 * getattr(r1, comp)
                - 0.5 * getattr(r2, comp)
                - (2.0 - 0.5 - 1.0) * getattr(rb, comp)
            )
            assert torch.allclose(getattr(lhs, comp), expect, atol=1e-8)

    def test_perturbing_wr_moves_i_and_j_together(self):
        conv = QuaternionConv(3, 3).double()
        a, b = rand(1, 3, 5, 5, seed=13), rand(1, 3, 5, 5, seed=14)
        base = conv(a, b)
        with torch.no_grad():
            conv.w_r.add_(0.1)
        bumped = conv(a, b)
        assert not torch.allclose(base.i, bumped.i)
        assert not torch.allclose(base.j, bumped.j)
        # r and k do not read w_r in the two-input case
        assert torch.allclose(base.r, bumped.r)
        assert torch.allclose(base.k, bumped.k)

    def test_needs_an_input(self):
        conv = QuaternionConv(3, 3)
        with pytest.raises(EngineError, match="at least one"):
            conv()

    def test_channel_mismatch(self):
        conv = QuaternionConv(3, 3)
        with pytest.raises(EngineError, match="channels"):
            conv(torch.zeros(1, 4, 5, 5), torch.zeros(1, 4, 5, 5))

    def test_gradients(self):
        conv = QuaternionConv(2, 3).double()
        a = rand(1, 2, 5, 5, seed=15).requires_grad_(True)
        b = rand(1, 2, 5, 5, seed=16).requires_grad_(True)
        proj = rand(1, 8, 5, 5, seed=17)

        def loss():
            return (conv(a, b).cat() * proj).sum()

        fd_gradcheck(loss, [a, b] + list(conv.parameters()), n_coords=3)


class TestCollapse:
    def test_zero_feature_zero_bias_gives_zero(self):
        collapse = QuaternionCollapse(3)
        with torch.no_grad():
            collapse.proj.bias.zero_()
        z = torch.zeros(1, 3, 4, 4)
        q = QuaternionFeature(z, z.clone(), z.clone(), z.clone())
        assert torch.all(collapse(q) == 0)

    def test_output_width_matches_branch_width(self):
        for width in (3, 6, 12):
            collapse = QuaternionCollapse(width)
            z = torch.zeros(2, width, 4, 4)
            q = QuaternionFeature(z, z.clone(), z.clone(), z.clone())
            assert collapse(q).shape == (2, width, 4, 4)

    def test_gradients_through_collapse(self):
        conv = QuaternionConv(2, 1).double()
        collapse = QuaternionCollapse(2).double()
        a = rand(1, 2, 4, 4, seed=18).requires_grad_(True)
        b = rand(1, 2, 4, 4, seed=19).requires_grad_(True)
        proj = rand(1, 2, 4, 4, seed=20)

        def loss():
            return (collapse(conv(a, b)) * proj).sum()

        fd_gradcheck(loss, [a, b] + list(collapse.parameters()), n_coords=3)
