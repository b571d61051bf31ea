# experiments/tests/test_verify.py

import math

import numpy as np
from django.test import SimpleTestCase, override_settings

from experiments.dynamics import (EQ9, SCALAR_SPURIOUS, Box, DynSystem, Termination, Trajectory, linearize,
                                  lqr_gain, spurious_roots)
from experiments.exceptions import RangeError
from experiments.targets import target_field
from experiments.verify import (bisection_roots, cell_centres, check_positive_definite, check_vdot_negative,
                                circle_initial_states, classify_trajectory, find_critical_points,
                                gradient_norms, grid_initial_states, grid_min_gradnorm, merge_points,
                                roa_estimate, worker_count)
from experiments.train import vdot
from networks import diffcore as dc
from networks.diffcore import ParamLayout, ParamVector
from networks.nets import BaselineSpec, BoundNet, FieldNet, LinearFeedback, PolarNetSpec, ZeroInput, init_params

UNIT_BOX = Box.symmetric(1.0, 2)
OPEN_LOOP = ZeroInput(2, 2)


def planar_linear(rate):
    """x' = rate * x on the unit box"""
    return DynSystem(name='linear', state_dim=2, input_dim=2, domain=UNIT_BOX, field=lambda x, u: rate * x)


def fresh_polarnet(seed=0):
    spec = PolarNetSpec(dim=2)
    return BoundNet(spec, init_params(spec, seed))


class GridTests(SimpleTestCase):

    def test_cell_centres(self):
        np.testing.assert_allclose(cell_centres(UNIT_BOX, 2),
                                   [[-0.5, -0.5], [-0.5, 0.5], [0.5, -0.5], [0.5, 0.5]])

    def test_initial_states_skip_origin(self):
        states = grid_initial_states(UNIT_BOX, 3)
        self.assertEqual(len(states), 8)
        self.assertTrue(np.all(np.linalg.norm(states, axis=1) > 0.0))

    def test_circle(self):
        states = circle_initial_states(0.5, 36)
        self.assertEqual(states.shape, (36, 2))
        np.testing.assert_allclose(np.linalg.norm(states, axis=1), 0.5)
        np.testing.assert_allclose(states[0], [0.5, 0.0])

    def test_merge_keeps_first_of_cluster(self):
        points = np.array([[0.0, 0.0], [0.001, 0.0], [1.0, 0.0]])
        self.assertEqual(merge_points(points), [0, 2])


class CriticalPointTests(SimpleTestCase):

    def test_bowl_has_single_pole(self):
        report = find_critical_points(target_field('bowl'), UNIT_BOX, grid_res=21)
        self.assertEqual(report.count, 1)
        self.assertTrue(report.single_pole())
        self.assertLess(report.points[0].distance, 1e-6)
        self.assertEqual(report.seeds, 441)

    def test_eggcrate_has_spurious_points(self):
        report = find_critical_points(target_field('eggcrate'), UNIT_BOX, grid_res=21)
        self.assertGreaterEqual(report.count, 2)
        self.assertFalse(report.single_pole())
        off_origin = [p for p in report.points if p.distance > 0.1]
        self.assertTrue(off_origin)
        self.assertTrue(all(p.grad_norm < 1e-6 for p in report.points))

    def test_ripple_points_lie_on_spurious_roots(self):
        p, q = spurious_roots()
        report = find_critical_points(target_field('ripple'), UNIT_BOX, grid_res=21)
        self.assertGreaterEqual(report.count, 3)
        x1 = np.array([abs(point.location[0]) for point in report.points])
        self.assertTrue(all(abs(point.location[1]) < 1e-6 for point in report.points))
        self.assertTrue(np.any((x1 > 0.55) & (x1 < 0.60)))
        self.assertTrue(np.any((x1 > 0.90) & (x1 < 0.95)))
        self.assertTrue(np.min(np.abs(x1[x1 > 0.5][:, None] - [p, q]), axis=1).max() < 1e-6)

    def test_twinwell_has_two_minima(self):
        report = find_critical_points(target_field('twinwell'), UNIT_BOX, grid_res=21)
        self.assertGreaterEqual(report.count, 2)
        locations = [p.location for p in report.points]
        for well in ([0.5, 0.0], [-0.5, 0.0]):
            self.assertTrue(any(np.linalg.norm(loc - well) < 1e-4 for loc in locations))

    def test_fresh_polarnet_has_single_pole(self):
        for seed in range(3):
            report = find_critical_points(fresh_polarnet(seed), UNIT_BOX, grid_res=15)
            self.assertTrue(report.single_pole(), msg=f"seed {seed}: {report.to_dict()}")
            self.assertGreater(report.grid_min_gradnorm_outside_ball, 0.0)

    def test_grid_must_be_fine_enough(self):
        with self.assertRaises(ValueError):
            find_critical_points(target_field('bowl'), UNIT_BOX, grid_res=4)

    def test_report_serializes(self):
        report = find_critical_points(target_field('bowl'), UNIT_BOX, grid_res=8).to_dict()
        self.assertEqual(report['count'], 1)
        self.assertEqual(report['grid_res'], 8)
        self.assertEqual(len(report['points'][0]['location']), 2)

    def test_gradient_norms(self):
        np.testing.assert_allclose(gradient_norms(target_field('bowl'), [[0.3, 0.4], [0.0, 0.0]]), [1.0, 0.0])

    def test_grid_min_gradnorm_skips_origin(self):
        self.assertAlmostEqual(grid_min_gradnorm(target_field('bowl'), UNIT_BOX, 11), 0.4)

    def test_worker_count_does_not_change_results(self):
        V = target_field('eggcrate')
        with override_settings(LYAPFORGE_THREADS=1):
            serial = find_critical_points(V, UNIT_BOX, grid_res=21).to_dict()
        with override_settings(LYAPFORGE_THREADS=4):
            parallel = find_critical_points(V, UNIT_BOX, grid_res=21).to_dict()
        self.assertEqual(serial, parallel)

    @override_settings(LYAPFORGE_THREADS=-1)
    def test_negative_thread_count(self):
        with self.assertRaises(RangeError):
            worker_count()


class PositiveDefiniteTests(SimpleTestCase):

    def test_bowl(self):
        report = check_positive_definite(target_field('bowl'), UNIT_BOX, samples=2000)
        self.assertTrue(report.ok)
        self.assertEqual(report.value_at_origin, 0.0)
        self.assertGreater(report.min_value, 0.0)

    def test_fresh_polarnet(self):
        self.assertTrue(check_positive_definite(fresh_polarnet(4), UNIT_BOX, samples=2000).ok)

    def test_nonzero_at_origin(self):
        report = check_positive_definite(target_field('ring'), UNIT_BOX, samples=500)
        self.assertAlmostEqual(report.value_at_origin, 0.0625)
        self.assertFalse(report.ok)

    def test_negative_somewhere(self):
        tilted = FieldNet('tilted', 2, lambda x: x[:, 0:1])
        report = check_positive_definite(tilted, UNIT_BOX, samples=500)
        self.assertLess(report.min_value, 0.0)
        self.assertLess(report.argmin[0], 0.0)
        self.assertFalse(report.to_dict()['ok'])

    def test_negative_output_bias_detected(self):
        spec = BaselineSpec('plain-mlp', 2)
        params = ParamVector.zeros(spec.layout)
        segment = spec.layout['backbone.b3']
        params.values[segment.offset:segment.stop] = -1.0
        report = check_positive_definite(BoundNet(spec, params), UNIT_BOX, samples=100)
        self.assertEqual(report.value_at_origin, -1.0)
        self.assertFalse(report.ok)

    def test_deterministic_in_seed(self):
        a = check_positive_definite(target_field('twinwell'), UNIT_BOX, samples=300, seed=5)
        b = check_positive_definite(target_field('twinwell'), UNIT_BOX, samples=300, seed=5)
        self.assertEqual(a.to_dict(), b.to_dict())


class RegionOfAttractionTests(SimpleTestCase):

    def test_lqr_stabilizes_small_box(self):
        K, _ = lqr_gain(linearize(EQ9))
        estimate = roa_estimate(EQ9, LinearFeedback(K), grid=4, half_width=0.2)
        self.assertEqual(estimate.total, 16)
        self.assertEqual(estimate.fraction, 1.0)
        self.assertEqual(estimate.counts, {'converged': 16, 'escaped': 0, 'timed-out': 0})

    def test_open_loop_is_unstable(self):
        estimate = roa_estimate(EQ9, ZeroInput(2, 2), grid=4, half_width=0.5)
        self.assertGreater(estimate.counts['escaped'], 0)
        self.assertLess(estimate.fraction, 1.0)

    def test_stable_linear_system_converges_everywhere(self):
        estimate = roa_estimate(planar_linear(-1.0), OPEN_LOOP)
        self.assertEqual(estimate.total, 36)
        self.assertEqual(estimate.fraction, 1.0)

    def test_unstable_linear_system_escapes_everywhere(self):
        estimate = roa_estimate(planar_linear(1.0), OPEN_LOOP)
        self.assertEqual(estimate.fraction, 0.0)
        self.assertEqual(estimate.counts['escaped'], 36)

    def test_zero_dynamics_time_out(self):
        estimate = roa_estimate(planar_linear(0.0), OPEN_LOOP, t_max=2.0)
        self.assertEqual(estimate.fraction, 0.0)
        self.assertEqual(estimate.counts, {'converged': 0, 'escaped': 0, 'timed-out': 36})

    def test_identical_inputs_give_identical_estimates(self):
        K, _ = lqr_gain(linearize(EQ9))
        first = roa_estimate(EQ9, LinearFeedback(K), grid=4, half_width=0.5, t_max=5.0)
        second = roa_estimate(EQ9, LinearFeedback(K), grid=4, half_width=0.5, t_max=5.0)
        self.assertEqual(first.to_dict(), second.to_dict())
        for a, b in zip(first.trajectories, second.trajectories):
            np.testing.assert_array_equal(a.states, b.states)

    def test_spurious_equilibria_stall(self):
        estimate = roa_estimate(SCALAR_SPURIOUS, ZeroInput(1, 1), initial_states=[[0.1], [1.2]])
        self.assertEqual(estimate.classifications, [Termination.CONVERGED, Termination.TIMED_OUT])
        _, q = spurious_roots()
        self.assertAlmostEqual(float(estimate.trajectories[1].final_state[0]), q, places=2)

    def test_to_dict(self):
        estimate = roa_estimate(SCALAR_SPURIOUS, ZeroInput(1, 1), initial_states=[[0.1]])
        self.assertEqual(estimate.to_dict(), {
            'initial_states': [[0.1]],
            'classifications': ['converged'],
            'counts': {'converged': 1, 'escaped': 0, 'timed-out': 0},
            'fraction': 1.0,
        })

    def test_empty_trajectory(self):
        empty = Trajectory(np.zeros(0), np.zeros((0, 2)), np.zeros((0, 2)), Termination.TIMED_OUT)
        with self.assertRaises(ValueError):
            classify_trajectory(empty)

    def test_no_initial_states(self):
        with self.assertRaises(ValueError):
            roa_estimate(EQ9, ZeroInput(2, 2), initial_states=np.zeros((0, 2)))


class VdotScanTests(SimpleTestCase):

    def test_decay_has_no_violations(self):
        scan = check_vdot_negative(target_field('bowl'), planar_linear(-1.0), ZeroInput(2, 2), UNIT_BOX,
                                   grid_res=11)
        self.assertEqual(scan.violation_fraction, 0.0)
        self.assertLess(scan.worst_value, 0.0)
        self.assertEqual(scan.checked, 120)

    def test_growth_violates_everywhere(self):
        scan = check_vdot_negative(target_field('bowl'), planar_linear(1.0), ZeroInput(2, 2), UNIT_BOX,
                                   grid_res=10)
        self.assertEqual(scan.violation_fraction, 1.0)
        # outermost cell centres of a 10-cell grid sit at +-0.9
        self.assertAlmostEqual(scan.worst_value, 2.0 * 2 * 0.9 ** 2)

    def test_rotation_violates_at_zero_margin(self):
        rotation = DynSystem(name='rotation', state_dim=2, input_dim=2, domain=UNIT_BOX,
                             field=lambda x, u: dc.concat_cols([-x[:, 1:2], x[:, 0:1]]))
        scan = check_vdot_negative(target_field('bowl'), rotation, OPEN_LOOP, UNIT_BOX, grid_res=10)
        self.assertEqual(scan.violation_fraction, 1.0)
        self.assertEqual(scan.worst_value, 0.0)

    def test_gradient_flow_decreases_except_at_critical_points(self):
        # V = x^2 + sin^2(pi x) under x' = -V'(x): dV/dt = -V'(x)^2
        def slope(x):
            return 2.0 * x + math.pi * dc.sin(2.0 * math.pi * x)

        V = FieldNet('ripple-1d', 1, lambda x: x * x + dc.sin(math.pi * x) * dc.sin(math.pi * x))
        flow = DynSystem(name='gradient-flow', state_dim=1, input_dim=1, domain=Box.symmetric(1.5, 1),
                         field=lambda x, u: -1.0 * slope(x))
        no_params = ParamVector.zeros(ParamLayout())

        roots = bisection_roots(lambda x: float(slope(x)), -1.5, 1.5)
        self.assertEqual(len(roots), 5)
        p, q = spurious_roots()
        np.testing.assert_allclose(roots, [-q, -p, 0.0, p, q], atol=1e-10)

        xs = np.linspace(-1.5, 1.5, 3001).reshape(-1, 1)
        rates = vdot(V, no_params, flow, ZeroInput(1, 1), xs)
        self.assertTrue(np.all(rates <= 0.0))
        near_root = np.min(np.abs(xs - np.array(roots)), axis=1) < 1e-3
        self.assertTrue(np.all(rates[~near_root] < 0.0))
        at_roots = vdot(V, no_params, flow, ZeroInput(1, 1), np.array(roots).reshape(-1, 1))
        np.testing.assert_allclose(at_roots, 0.0, atol=1e-20)

    def test_margin(self):
        scan = check_vdot_negative(target_field('bowl'), planar_linear(-1.0), ZeroInput(2, 2), UNIT_BOX,
                                   grid_res=10, margin=10.0)
        self.assertEqual(scan.violation_fraction, 1.0)
        self.assertEqual(scan.to_dict()['margin'], 10.0)


class BisectionTests(SimpleTestCase):

    def test_sine_root(self):
        (root,) = bisection_roots(math.sin, 3.0, 3.3)
        self.assertAlmostEqual(root, math.pi, places=12)

    def test_all_roots_in_order(self):
        roots = bisection_roots(lambda x: x * x - 0.25, -1.0, 1.0, n=7)
        np.testing.assert_allclose(roots, [-0.5, 0.5], atol=1e-13)

    def test_no_sign_change(self):
        self.assertEqual(bisection_roots(lambda x: x * x + 1.0, -1.0, 1.0), [])
