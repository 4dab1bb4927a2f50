"""Numerics: tensor ops against finite differences plus algebraic properties."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import modcomp.autodiff as ad
from modcomp.autodiff import Tape, Tensor
from modcomp.errors import ContractError, DimensionError
from modcomp.gradcheck import grad_check, run_suite


def _t(rng, shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


class TestTapeMechanics:
    def test_backward_seeds_scalar_with_one(self):
        x = Tensor(np.array(3.0), requires_grad=True)
        with Tape() as tape:
            y = ad.scale(x, 2.0)
            tape.backward(y)
        assert x.grad == pytest.approx(2.0)

    def test_gradient_accumulates_for_reused_tensor(self):
        # d(x + x)/dx = 2: the tape must sum contributions, not overwrite
        x = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        with Tape() as tape:
            y = ad.sum_(ad.add(x, x))
            tape.backward(y)
        np.testing.assert_allclose(x.grad, [2.0, 2.0])

    def test_no_grad_outside_tape(self):
        x = Tensor(np.array([1.0]), requires_grad=True)
        y = ad.scale(x, 3.0)  # inference mode: nothing recorded
        assert y.data[0] == pytest.approx(3.0)
        assert x.grad is None

    def test_constants_get_no_grad(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        c = Tensor(np.array([5.0, 5.0]))
        with Tape() as tape:
            y = ad.sum_(ad.mul(x, c))
            tape.backward(y)
        assert c.grad is None
        np.testing.assert_allclose(x.grad, [5.0, 5.0])

    def test_nested_tapes_rejected(self):
        with Tape():
            with pytest.raises(ContractError):
                with Tape():
                    pass

    def test_stop_gradient_blocks_backward(self):
        x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
        with Tape() as tape:
            y = ad.sum_(ad.mul(ad.stop_gradient(x), x))
            tape.backward(y)
        # only the undetached factor contributes
        np.testing.assert_allclose(x.grad, x.data)


class TestOpSuite:
    def test_all_registered_ops_pass_fd(self):
        report = run_suite(seeds=(0, 1, 2))
        failed = [r.line() for r in report.results if not r.passed]
        assert not failed, "\n".join(failed)

    def test_matmul_shape_mismatch_raises(self):
        a = Tensor(np.zeros((2, 3)))
        b = Tensor(np.zeros((4, 2)))
        with pytest.raises(DimensionError):
            ad.matmul(a, b)

    def test_take_backward_scatter_adds_on_repeats(self):
        table = Tensor(np.arange(12.0).reshape(4, 3), requires_grad=True)
        with Tape() as tape:
            rows = ad.take(table, np.array([1, 1, 2]))
            tape.backward(ad.sum_(rows))
        expect = np.zeros((4, 3))
        expect[1] = 2.0
        expect[2] = 1.0
        np.testing.assert_allclose(table.grad, expect)

    def test_concat_then_narrow_roundtrip_grads(self):
        rng = np.random.default_rng(0)
        a, b = _t(rng, (2, 3, 4)), _t(rng, (2, 5, 4))

        def fn(a_, b_):
            joined = ad.concat([a_, b_], axis=1)
            return ad.sum_(ad.mul(ad.narrow(joined, 1, 3, 5), Tensor(np.ones((2, 5, 4)) * 2.0)))

        res = grad_check(fn, [a, b], name="concat_narrow")
        assert res.passed, res.line()

    def test_softmax_cross_entropy_rejects_non_distribution(self):
        logits = Tensor(np.zeros(4))
        target = Tensor(np.array([0.5, 0.2, 0.2, 0.2]))  # sums to 1.1
        with pytest.raises(ContractError):
            ad.softmax_cross_entropy(logits, target)

    def test_causal_mask_hides_future(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.normal(size=(1, 4, 8)))
        wq, wk, wv, wo = (Tensor(rng.normal(size=(8, 8)) * 0.3) for _ in range(4))
        full = ad.self_attention(x, wq, wk, wv, wo, n_heads=2, causal=True).data
        x2 = x.data.copy()
        x2[0, -1, :] = 99.0  # poison the last position
        trunc = ad.self_attention(Tensor(x2), wq, wk, wv, wo, n_heads=2, causal=True).data
        # earlier positions cannot see the poisoned future token
        np.testing.assert_allclose(full[0, :-1], trunc[0, :-1], atol=1e-12)


class TestAlgebraicProperties:
    @settings(max_examples=50, deadline=None)
    @given(st.integers(min_value=0, max_value=2**31 - 1), st.integers(min_value=1, max_value=6),
           st.integers(min_value=2, max_value=8))
    def test_softmax_rows_sum_to_one(self, seed, rows, cols):
        x = np.random.default_rng(seed).normal(scale=4.0, size=(rows, cols))
        y = ad.softmax(Tensor(x)).data
        np.testing.assert_allclose(y.sum(axis=-1), np.ones(rows), atol=1e-9)
        assert (y >= 0).all()

    @settings(max_examples=50, deadline=None)
    @given(st.integers(min_value=0, max_value=2**31 - 1),
           st.floats(min_value=0.01, max_value=100.0, allow_nan=False))
    def test_cosine_similarity_scale_invariant(self, seed, s):
        rng = np.random.default_rng(seed)
        a, b = rng.normal(size=5), rng.normal(size=5)
        base = ad.cosine_similarity(Tensor(a), Tensor(b)).data
        scaled = ad.cosine_similarity(Tensor(s * a), Tensor(b)).data
        np.testing.assert_allclose(scaled, base, atol=1e-9)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(min_value=0, max_value=2**31 - 1), st.integers(min_value=1, max_value=5))
    def test_logsumexp_exceeds_max(self, seed, cols):
        x = np.random.default_rng(seed).normal(scale=10.0, size=(3, cols))
        lse = ad.logsumexp(Tensor(x)).data
        assert (lse >= x.max(axis=-1) - 1e-12).all()
        np.testing.assert_allclose(lse, np.log(np.exp(x - x.max(axis=-1, keepdims=True)).sum(-1)) + x.max(-1))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(min_value=0, max_value=2**31 - 1))
    def test_l2_normalize_gives_unit_rows(self, seed):
        x = np.random.default_rng(seed).normal(size=(4, 7)) * 3.0
        y = ad.l2_normalize(Tensor(x)).data
        np.testing.assert_allclose(np.linalg.norm(y, axis=-1), np.ones(4), atol=1e-12)

    def test_layer_norm_output_standardized(self):
        rng = np.random.default_rng(2)
        x = rng.normal(loc=5.0, scale=3.0, size=(2, 6, 16))
        y = ad.layer_norm(Tensor(x), Tensor(np.ones(16)), Tensor(np.zeros(16))).data
        np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-12)
        np.testing.assert_allclose(y.std(axis=-1), 1.0, atol=1e-4)

    def test_gelu_matches_reference_points(self):
        # spot values of the tanh approximation
        x = Tensor(np.array([0.0, 1.0, -1.0]))
        y = ad.gelu(x).data
        assert y[0] == pytest.approx(0.0, abs=1e-12)
        assert y[1] == pytest.approx(0.841192, abs=1e-5)
        assert y[2] == pytest.approx(-0.158808, abs=1e-5)
