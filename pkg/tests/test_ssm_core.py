"""Discretization, scan evaluators, and the selective scan layer."""
import math

import numpy as np
import pytest

from ssmlift import numerics as nm
from ssmlift.errors import ParameterError
from ssmlift.numerics import Tensor, grad_check
from ssmlift.ssm_core import (
    DiscretizedStep,
    ScanPair,
    SelectiveSSMParams,
    discretize_zoh,
    scan_parallel,
    scan_sequential,
    selective_ssm_forward,
)


def random_steps(length, d=4, n=3, seed=0, dtype=np.float64, a_max=1.0):
    rng = np.random.default_rng(seed)
    a = np.exp(-rng.uniform(0.05, a_max, size=(length, d, n))).astype(dtype)
    b = rng.normal(size=(length, d, n)).astype(dtype)
    return DiscretizedStep(a_bar=Tensor(a, copy=False), b_bar_x=Tensor(b, copy=False))


class TestDiscretize:
    def test_scalar_decay(self):
        steps = discretize_zoh(np.array(-1.0), np.array([math.log(2.0)]),
                               np.array([[0.0]]), np.array([0.0]))
        assert abs(steps.a_bar.item() - 0.5) < 1e-15

    def test_first_order_input_term(self):
        steps = discretize_zoh(np.array(-1.0), np.array([0.5]),
                               np.array([[2.0]]), np.array([3.0]))
        assert abs(steps.b_bar_x.item() - 3.0) < 1e-15

    def test_zero_dynamics_give_identity(self):
        for delta in (0.01, 1.0, 42.0):
            steps = discretize_zoh(np.array(0.0), np.array([delta]),
                                   np.array([[1.0]]), np.array([1.0]))
            assert steps.a_bar.item() == 1.0

    def test_nonpositive_delta_rejected(self):
        with pytest.raises(ParameterError):
            discretize_zoh(np.array(-1.0), np.array([0.0]), np.array([[1.0]]), np.array([1.0]))

    def test_multichannel_shapes(self):
        rng = np.random.default_rng(1)
        L, d, n = 5, 3, 2
        steps = discretize_zoh(
            -np.exp(rng.normal(size=(d, n))),
            rng.uniform(0.1, 1.0, size=(L, d)),
            rng.normal(size=(L, n)),
            rng.normal(size=(L, d)),
        )
        assert steps.a_bar.shape == (L, d, n)
        assert np.all(steps.a_bar.data > 0) and np.all(steps.a_bar.data < 1)


class TestScanSequential:
    def test_single_step_from_rest(self):
        steps = random_steps(1, seed=2)
        states, last = scan_sequential(steps)
        np.testing.assert_array_equal(states.data[0], steps.b_bar_x.data[0])
        np.testing.assert_array_equal(last.data, steps.b_bar_x.data[0])

    def test_pure_accumulation(self):
        L, d, n = 9, 2, 2
        c = 0.37
        steps = DiscretizedStep(a_bar=Tensor(np.ones((L, d, n))),
                                b_bar_x=Tensor(np.full((L, d, n), c)))
        h0 = Tensor(np.full((d, n), 1.5))
        states, last = scan_sequential(steps, h0)
        np.testing.assert_allclose(last.data, 1.5 + L * c, rtol=1e-15)

    def test_constant_input_matches_geometric_closed_form(self):
        # Constant diagonal dynamics admit h_L = A^L h0 + c (1 - A^L) / (1 - A).
        rng = np.random.default_rng(3)
        L, d, n = 64, 3, 4
        a_vals = np.exp(-rng.uniform(0.05, 2.0, size=(d, n)))
        c_vals = rng.normal(size=(d, n))
        h0_vals = rng.normal(size=(d, n))
        steps = DiscretizedStep(
            a_bar=Tensor(np.broadcast_to(a_vals, (L, d, n)).copy()),
            b_bar_x=Tensor(np.broadcast_to(c_vals, (L, d, n)).copy()),
        )
        _, last = scan_sequential(steps, Tensor(h0_vals))
        closed = a_vals ** L * h0_vals + c_vals * (1 - a_vals ** L) / (1 - a_vals)
        rel = np.abs(last.data - closed) / np.maximum(np.abs(closed), 1e-30)
        assert rel.max() < 1e-10


class TestScanParallel:
    def test_length_one_matches_sequential(self):
        steps = random_steps(1, seed=4)
        s_seq, _ = scan_sequential(steps)
        s_par, _ = scan_parallel(steps)
        np.testing.assert_array_equal(s_seq.data, s_par.data)

    @pytest.mark.parametrize("length", [1, 2, 3, 8, 255, 256, 257])
    def test_matches_sequential_f64(self, length):
        steps = random_steps(length, seed=length)
        h0 = Tensor(np.random.default_rng(length + 1).normal(size=(4, 3)))
        s_seq, l_seq = scan_sequential(steps, h0)
        s_par, l_par = scan_parallel(steps, h0)
        assert np.max(np.abs(s_seq.data - s_par.data)) < 1e-10
        assert np.max(np.abs(l_seq.data - l_par.data)) < 1e-10

    def test_memoryless_when_transition_zero(self):
        L = 17
        rng = np.random.default_rng(5)
        b = rng.normal(size=(L, 2, 2))
        steps = DiscretizedStep(a_bar=Tensor(np.zeros((L, 2, 2))), b_bar_x=Tensor(b))
        states, _ = scan_parallel(steps)
        np.testing.assert_allclose(states.data, b, atol=1e-15)

    def test_stability_bound(self):
        for seed in range(5):
            steps = random_steps(333, seed=seed)
            h0 = Tensor(np.random.default_rng(seed).normal(size=(4, 3)))
            states, _ = scan_parallel(steps, h0)
            a_max = steps.a_bar.data.max()
            bound = np.abs(steps.b_bar_x.data).max() / (1 - a_max) + np.abs(h0.data).max()
            assert np.abs(states.data).max() <= bound + 1e-9


class TestScanGradients:
    @pytest.mark.parametrize("parallel", [False, True])
    def test_scan_inputs_gradient(self, parallel):
        scan = scan_parallel if parallel else scan_sequential
        steps = random_steps(11, d=2, n=2, seed=6)
        h0 = Tensor(np.random.default_rng(7).normal(size=(2, 2)), requires_grad=True)

        def loss_a(t):
            s, _ = scan(DiscretizedStep(a_bar=t, b_bar_x=steps.b_bar_x), h0)
            return nm.tensor_sum(nm.mul(s, s))

        def loss_b(t):
            s, _ = scan(DiscretizedStep(a_bar=steps.a_bar, b_bar_x=t), h0)
            return nm.tensor_sum(nm.mul(s, s))

        def loss_h(t):
            s, _ = scan(steps, t)
            return nm.tensor_sum(nm.mul(s, s))

        assert grad_check(loss_a, steps.a_bar, h=1e-6) < 1e-4
        assert grad_check(loss_b, steps.b_bar_x, h=1e-6) < 1e-4
        assert grad_check(loss_h, h0, h=1e-6) < 1e-4

    def test_last_state_gradient_flows(self):
        steps = random_steps(6, d=2, n=2, seed=8)

        def loss(t):
            _, last = scan_sequential(DiscretizedStep(a_bar=t, b_bar_x=steps.b_bar_x))
            return nm.tensor_sum(nm.mul(last, last))

        assert grad_check(loss, steps.a_bar, h=1e-6) < 1e-4


class TestScanPair:
    def test_composition_matches_two_step_scan(self):
        rng = np.random.default_rng(9)
        p = ScanPair(rng.uniform(0.1, 0.9, size=(3,)), rng.normal(size=(3,)))
        q = ScanPair(rng.uniform(0.1, 0.9, size=(3,)), rng.normal(size=(3,)))
        h = rng.normal(size=(3,))
        # q applies first, then p.
        combined = p.compose(q)
        direct = p.p_a * (q.p_a * h + q.p_b) + p.p_b
        np.testing.assert_allclose(combined.p_a * h + combined.p_b, direct, rtol=1e-14)

    def test_associativity(self):
        rng = np.random.default_rng(10)
        for _ in range(200):
            p, q, r = (ScanPair(rng.uniform(0.1, 1.0, size=(4,)), rng.normal(size=(4,)))
                       for _ in range(3))
            left = p.compose(q).compose(r)
            right = p.compose(q.compose(r))
            assert np.max(np.abs(left.p_a - right.p_a)) < 1e-12
            assert np.max(np.abs(left.p_b - right.p_b)) < 1e-12

    def test_identity_element(self):
        rng = np.random.default_rng(11)
        p = ScanPair(rng.uniform(0.1, 1.0, size=(5,)), rng.normal(size=(5,)))
        e = ScanPair.identity((5,))
        for combined in (p.compose(e), e.compose(p)):
            np.testing.assert_allclose(combined.p_a, p.p_a, rtol=1e-15)
            np.testing.assert_allclose(combined.p_b, p.p_b, rtol=1e-15)


class TestSelectiveSSM:
    def params(self, d=4, n=3, seed=0, dtype=np.float64):
        return SelectiveSSMParams.init(d, n, np.random.default_rng(seed), dtype=dtype)

    def test_zero_input_zero_output(self):
        p = self.params()
        y = selective_ssm_forward(Tensor(np.zeros((7, 4))), p)
        np.testing.assert_array_equal(y.data, np.zeros((7, 4)))

    def test_skip_path_only_when_readout_zero(self):
        p = self.params()
        p.w_c.data[:] = 0.0
        rng = np.random.default_rng(12)
        x = rng.normal(size=(9, 4))
        y = selective_ssm_forward(Tensor(x), p)
        np.testing.assert_array_equal(y.data, x * p.d_skip.data)

    def test_modes_agree(self):
        p = self.params(d=16, n=8, seed=13)
        rng = np.random.default_rng(14)
        x = Tensor(rng.normal(size=(1024, 16)))
        y_seq = selective_ssm_forward(x, p, mode="sequential")
        y_par = selective_ssm_forward(x, p, mode="parallel")
        assert np.max(np.abs(y_seq.data - y_par.data)) < 1e-10

    def test_unknown_mode_rejected(self):
        with pytest.raises(ParameterError):
            selective_ssm_forward(Tensor(np.zeros((2, 4))), self.params(), mode="diagonal")

    @pytest.mark.parametrize("mode", ["sequential", "parallel"])
    def test_end_to_end_gradients(self, mode):
        p = self.params(d=3, n=2, seed=15)
        rng = np.random.default_rng(16)
        x = Tensor(rng.normal(size=(8, 3)), requires_grad=True)

        def loss_x(t):
            y = selective_ssm_forward(t, p, mode=mode)
            return nm.tensor_mean(nm.mul(y, y))

        assert grad_check(loss_x, x, h=1e-5) < 1e-4
        for name, tensor in p.tensors().items():
            def loss_p(t, tensor=tensor):
                y = selective_ssm_forward(x, p, mode=mode)
                return nm.tensor_mean(nm.mul(y, y))
            err = grad_check(loss_p, tensor, h=1e-5)
            assert err < 1e-4, f"{name}: {err:.3e}"

    def test_stable_a_parameterization(self):
        p = self.params()
        a = -np.exp(p.a_log.data)
        assert np.all(a < 0)

    def test_delta_positive(self):
        p = self.params()
        rng = np.random.default_rng(17)
        x = rng.normal(size=(6, 4))
        pre = x @ p.w_delta.data + p.b_delta.data
        delta = np.log1p(np.exp(pre))
        assert np.all(delta > 0)
