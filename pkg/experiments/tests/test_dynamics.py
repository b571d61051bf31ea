# experiments/tests/test_dynamics.py

import math

import numpy as np
from django.test import SimpleTestCase
from scipy.linalg import solve_continuous_are

from experiments.dynamics import (EQ9, EQ13, SCALAR_SPURIOUS, SYSTEMS, Box, DynSystem, LinearModel,
                                  Termination, care_residual, g_smooth, get_system,
                                  initial_stabilizing_gain, is_hurwitz, linearize, lqr_gain, rk4_step,
                                  simulate, simulate_many, solve_lyapunov, spurious_roots, system_eq9,
                                  system_eq13)
from experiments.verify import bisection_roots
from networks import diffcore as dc
from networks.exceptions import DimensionError, NumericFault, SolverError
from networks.nets import LinearFeedback, ZeroInput


def linear_system(rate, name='linear'):
    """x' = rate * x, ignoring the input"""
    return DynSystem(name=name, state_dim=2, input_dim=2, domain=Box.symmetric(1.0, 2),
                     field=lambda x, u: rate * x)


class BoxTests(SimpleTestCase):

    def test_open_membership(self):
        box = Box.symmetric(1.0, 2)
        np.testing.assert_array_equal(box.contains([[0.0, 0.0], [1.0, 0.0], [0.5, -0.99]]),
                                      [True, False, True])

    def test_rejects_empty_box(self):
        with self.assertRaises(DimensionError):
            Box((0.0, 1.0), (0.0, 2.0))


class SmoothAbsTests(SimpleTestCase):

    def test_values(self):
        self.assertEqual(g_smooth(0.0), 0.0)
        self.assertAlmostEqual(float(g_smooth(0.01)), 0.0025, places=15)
        self.assertAlmostEqual(float(g_smooth(0.5)), 0.49, places=15)

    def test_branches_meet_with_matching_slope(self):
        k = 0.02
        inside = 0.5 * k * (k / k) ** 2
        outside = k - 0.5 * k
        self.assertAlmostEqual(inside, outside, places=14)
        tape = dc.Tape()
        x = tape.variable([[k - 1e-12], [k + 1e-12], [-k - 1e-12]])
        (slope,) = tape.grad(dc.sum_rows(g_smooth(x, k)), [x])
        np.testing.assert_allclose(slope.value[:, 0], [1.0, 1.0, -1.0], atol=1e-9)

    def test_slope_bounded(self):
        tape = dc.Tape()
        x = tape.variable(np.linspace(-1.0, 1.0, 2001).reshape(-1, 1))
        (slope,) = tape.grad(dc.sum_rows(g_smooth(x)), [x])
        self.assertLessEqual(np.max(np.abs(slope.value)), 1.0)

    def test_width_must_be_positive(self):
        with self.assertRaises(ValueError):
            g_smooth(0.1, k=0.0)


class SystemTests(SimpleTestCase):

    def test_origin_is_equilibrium(self):
        for system in SYSTEMS.values():
            rates = system.rhs(np.zeros(system.state_dim), np.zeros(system.input_dim))
            np.testing.assert_array_equal(rates, np.zeros(system.state_dim))

    def test_eq9_substitutions(self):
        np.testing.assert_allclose(system_eq9(np.array([0.0, 1.0]), np.zeros(2)), [1.0, 0.0])
        np.testing.assert_allclose(system_eq9(np.zeros(2), np.array([1.0, 0.0])), [0.0, 10.0])

    def test_eq13_substitutions(self):
        np.testing.assert_allclose(system_eq13(np.array([0.5, 0.0]), np.zeros(2)), [0.0, 0.5])
        np.testing.assert_allclose(system_eq13(np.zeros(2), np.array([50.0, 0.0])), [0.0, 25.0])

    def test_eq13_inputs_stay_within_limit(self):
        rates = system_eq13(np.zeros(2), np.array([0.0, 1e6]))
        self.assertLessEqual(abs(rates[1]), 2.0 * 5.0)

    def test_traced_field_matches_numpy(self):
        x = np.array([[0.3, -0.4], [-0.7, 0.2]])
        u = np.array([[1.0, -2.0], [0.5, 0.25]])
        tape = dc.Tape()
        node = EQ9.trace_rhs(tape.constant(x), tape.constant(u))
        np.testing.assert_allclose(node.value, EQ9.rhs(x, u), rtol=1e-15)

    def test_batch_size_mismatch(self):
        with self.assertRaises(DimensionError):
            EQ9.rhs(np.zeros((3, 2)), np.zeros((2, 2)))

    def test_unknown_system(self):
        self.assertIs(get_system('eq13'), EQ13)
        with self.assertRaises(DimensionError):
            get_system('cartpole')

    def test_spurious_equilibria(self):
        p, q = spurious_roots()
        derivative = lambda x: 2.0 * x + math.pi * math.sin(2.0 * math.pi * x)
        oracle = bisection_roots(derivative, 0.3, 1.0, n=1000)
        np.testing.assert_allclose([p, q], oracle, atol=1e-12)
        open_loop = SCALAR_SPURIOUS.rhs(np.array([[p], [q]]), np.zeros((2, 1)))
        np.testing.assert_allclose(open_loop, 0.0, atol=1e-12)


class IntegrationTests(SimpleTestCase):

    def test_zero_field_keeps_state(self):
        x = np.array([0.3, -0.1])
        np.testing.assert_array_equal(rk4_step(lambda z: np.zeros_like(z), x, 0.1), x)

    def test_single_step_of_exponential(self):
        x = rk4_step(lambda z: z, np.array([1.0]), 0.1)
        self.assertAlmostEqual(float(x[0]), 1.10517083333, places=10)

    def test_fourth_order_convergence(self):
        def error(dt):
            x = np.array([1.0])
            for _ in range(int(round(1.0 / dt))):
                x = rk4_step(lambda z: z, x, dt)
            return abs(float(x[0]) - math.e)

        ratio = error(0.1) / error(0.05)
        self.assertGreater(ratio, 14.0)
        self.assertLess(ratio, 18.0)

    def test_non_finite_state(self):
        with self.assertRaises(NumericFault):
            rk4_step(lambda z: z * 1e308, np.array([1e10]), 1.0)

    def test_step_must_be_positive(self):
        with self.assertRaises(ValueError):
            rk4_step(lambda z: z, np.array([1.0]), 0.0)


class SimulateTests(SimpleTestCase):

    def test_decay_converges(self):
        trajectory = simulate(linear_system(-1.0), ZeroInput(2, 2), np.array([0.5, 0.5]))
        self.assertEqual(trajectory.termination, Termination.CONVERGED)
        self.assertAlmostEqual(np.linalg.norm(trajectory.states[500]), math.sqrt(0.5) * math.exp(-5.0),
                               delta=1e-9)
        # |x| drops below 1e-3 at t = ln(500 sqrt 2) and must stay there for 1 s
        self.assertAlmostEqual(trajectory.final_time, math.log(500.0 * math.sqrt(2.0)) + 1.0, delta=0.03)
        np.testing.assert_allclose(np.diff(trajectory.times), 0.01)

    def test_growth_escapes(self):
        trajectory = simulate(linear_system(1.0), ZeroInput(2, 2), np.array([0.9, 0.0]))
        self.assertEqual(trajectory.termination, Termination.ESCAPED)
        self.assertTrue(0.10 <= trajectory.final_time <= 0.12)
        box = Box.symmetric(1.0, 2)
        self.assertFalse(box.contains(trajectory.final_state)[0])
        self.assertTrue(np.all(box.contains(trajectory.states[:-1])))

    def test_stalled_state_times_out(self):
        trajectory = simulate(linear_system(0.0), ZeroInput(2, 2), np.array([0.2, 0.0]), t_max=2.0)
        self.assertEqual(trajectory.termination, Termination.TIMED_OUT)
        self.assertAlmostEqual(trajectory.final_time, 2.0)

    def test_inputs_recorded_per_state(self):
        controller = LinearFeedback(np.eye(2))
        trajectory = simulate(linear_system(0.0), controller, np.array([0.2, 0.1]), t_max=0.5)
        self.assertEqual(trajectory.inputs.shape, trajectory.states.shape)
        np.testing.assert_allclose(trajectory.inputs[0], [-0.2, -0.1])

    def test_batch_matches_single_rollouts(self):
        system = linear_system(-0.5)
        x0s = np.array([[0.5, 0.5], [-0.2, 0.7], [0.9, -0.9]])
        batch = simulate_many(system, ZeroInput(2, 2), x0s, t_max=3.0)
        for x0, together in zip(x0s, batch):
            alone = simulate(system, ZeroInput(2, 2), x0, t_max=3.0)
            np.testing.assert_array_equal(together.states, alone.states)
            self.assertEqual(together.termination, alone.termination)

    def test_halving_step_changes_little(self):
        system = linear_system(-1.0)
        coarse = simulate(system, ZeroInput(2, 2), np.array([0.5, -0.3]), dt=0.01)
        fine = simulate(system, ZeroInput(2, 2), np.array([0.5, -0.3]), dt=0.005)
        np.testing.assert_allclose(coarse.states[200], fine.states[400], atol=1e-4)


class LinearizeTests(SimpleTestCase):

    def test_eq9_jacobians(self):
        model = linearize(EQ9)
        np.testing.assert_allclose(model.A, [[0.0, 1.0], [math.pi / 2.0, 0.0]], atol=1e-6)
        # direct differentiation gives -0.1 for the second input, not -1/2
        np.testing.assert_allclose(model.B, [[0.0, 0.0], [10.0, -0.1]], atol=1e-6)

    def test_step_must_be_positive(self):
        with self.assertRaises(ValueError):
            linearize(EQ9, h=0.0)

    def test_model_shapes_checked(self):
        with self.assertRaises(DimensionError):
            LinearModel(np.eye(2), np.ones((3, 1)))


class LqrTests(SimpleTestCase):

    def test_scalar_integrator(self):
        K, P = lqr_gain(LinearModel([[0.0]], [[1.0]]))
        self.assertAlmostEqual(P[0, 0], 1.0, places=9)
        self.assertAlmostEqual(K[0, 0], 1.0, places=9)

    def test_scalar_unstable(self):
        K, P = lqr_gain(LinearModel([[1.0]], [[1.0]]))
        self.assertAlmostEqual(P[0, 0], 1.0 + math.sqrt(2.0), places=9)
        self.assertAlmostEqual(K[0, 0], 1.0 + math.sqrt(2.0), places=9)

    def test_eq9_against_scipy(self):
        model = linearize(EQ9)
        K, P = lqr_gain(model)
        expected = solve_continuous_are(model.A, model.B, np.eye(2), np.eye(2))
        np.testing.assert_allclose(P, expected, rtol=1e-8, atol=1e-10)
        self.assertLess(care_residual(model, P, np.eye(2), np.eye(2)), 1e-8)
        self.assertTrue(is_hurwitz(model.A - model.B @ K))

    def test_weighted_costs_against_scipy(self):
        model = LinearModel([[0.0, 1.0], [2.0, -1.0]], [[0.0], [1.0]])
        Q, R = np.diag([3.0, 0.5]), np.array([[0.2]])
        K, P = lqr_gain(model, Q, R)
        np.testing.assert_allclose(P, solve_continuous_are(model.A, model.B, Q, R), rtol=1e-8)
        np.testing.assert_allclose(K, np.linalg.solve(R, model.B.T @ P))

    def test_initial_gain_for_saddle(self):
        model = linearize(EQ9)
        self.assertTrue(is_hurwitz(model.A - model.B @ initial_stabilizing_gain(model)))

    def test_uncontrollable_unstable_mode(self):
        with self.assertRaises(SolverError):
            lqr_gain(LinearModel([[1.0, 0.0], [0.0, -1.0]], [[0.0], [1.0]]))

    def test_cost_matrices_must_be_positive_definite(self):
        with self.assertRaises(SolverError):
            lqr_gain(LinearModel([[0.0]], [[1.0]]), Q=[[-1.0]])

    def test_lyapunov_solve(self):
        F = np.array([[-1.0, 2.0], [0.0, -3.0]])
        M = np.array([[1.0, 0.5], [0.5, 2.0]])
        X = solve_lyapunov(F, M)
        np.testing.assert_allclose(F @ X + X @ F.T, M, atol=1e-12)
