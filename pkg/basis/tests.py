import json

import numpy as np
from django.test import SimpleTestCase
from scipy import special

from dmlmm.exceptions import ContractViolation
from .services import (
    default_knots, eval_bspline, eval_composite, eval_legendre, eval_seasonal, evaluate,
)
from .specs import BasisFamily, BasisSpec, infer_domain


def cox_de_boor(knots, degree, j, t):
    """Textbook recursive definition of the j-th B-spline."""
    if degree == 0:
        return 1.0 if knots[j] <= t < knots[j + 1] else 0.0
    left = right = 0.0
    if knots[j + degree] > knots[j]:
        left = (t - knots[j]) / (knots[j + degree] - knots[j]) * cox_de_boor(knots, degree - 1, j, t)
    if knots[j + degree + 1] > knots[j + 1]:
        right = ((knots[j + degree + 1] - t) / (knots[j + degree + 1] - knots[j + 1])
                 * cox_de_boor(knots, degree - 1, j + 1, t))
    return left + right


class BasisSpecTests(SimpleTestCase):
    def test_rejects_degenerate_domain(self):
        with self.assertRaises(ContractViolation):
            BasisSpec.legendre(3, (1.0, 1.0))

    def test_rejects_decreasing_knots(self):
        knots = [0, 0, 0, 0, 0.6, 0.4, 1, 1, 1, 1]
        with self.assertRaises(ContractViolation):
            BasisSpec.bspline(6, (0.0, 1.0), knots=knots)

    def test_rejects_wrong_boundary_multiplicity(self):
        knots = [0, 0, 0, 0.2, 0.4, 0.6, 1, 1, 1, 1]
        with self.assertRaises(ContractViolation):
            BasisSpec.bspline(6, (0.0, 1.0), knots=knots)

    def test_rejects_nonpositive_period(self):
        with self.assertRaises(ContractViolation):
            BasisSpec(BasisFamily.SEASONAL_BSPLINE, 6, (0.0, 12.0), period=0.0)

    def test_composite_dimension_must_match_parts(self):
        part = BasisSpec.legendre(3, (0.0, 1.0))
        with self.assertRaises(ContractViolation):
            BasisSpec(BasisFamily.COMPOSITE, 4, (0.0, 1.0), parts=(part,))

    def test_uniform_default_knots(self):
        spec = BasisSpec.bspline(6, (0.0, 3.0))
        self.assertEqual(default_knots(spec), [0.0] * 4 + [1.0, 2.0] + [3.0] * 4)

    def test_infer_domain_adds_relative_margin(self):
        lo, hi = infer_domain([2.0, 0.0, 10.0])
        self.assertAlmostEqual(lo, -1e-5, places=15)
        self.assertAlmostEqual(hi, 10.0 + 1e-5, places=12)

    def test_document_round_trip(self):
        spec = BasisSpec.composite([
            BasisSpec.seasonal(6, 12.0),
            BasisSpec.bspline(14, (0.0, 128.0)),
        ])
        restored = BasisSpec.from_dict(json.loads(json.dumps(spec.to_dict())))
        self.assertEqual(restored.family, BasisFamily.COMPOSITE)
        times = np.linspace(0.0, 128.0, 33)
        np.testing.assert_array_equal(evaluate(restored, times).values, evaluate(spec, times).values)


class LegendreTests(SimpleTestCase):
    def setUp(self):
        self.spec = BasisSpec.legendre(7, (0.0, 6.0))

    def test_first_column_is_constant(self):
        times = np.random.default_rng(0).uniform(0, 6, size=25)
        np.testing.assert_array_equal(eval_legendre(self.spec, times).values[:, 0], 1.0)

    def test_linear_term_vanishes_at_midpoint(self):
        self.assertEqual(eval_legendre(self.spec, [3.0]).values[0, 1], 0.0)

    def test_matches_library_polynomials(self):
        times = np.linspace(0, 6, 41)
        x = times / 3.0 - 1.0
        expected = np.column_stack([special.eval_legendre(j, x) for j in range(7)])
        np.testing.assert_allclose(eval_legendre(self.spec, times).values, expected, atol=1e-12)

    def test_gram_matrix_is_nearly_diagonal(self):
        values = eval_legendre(self.spec, np.linspace(0, 6, 10 ** 5)).values
        gram = values.T @ values / values.shape[0]
        off_diagonal = np.abs(gram - np.diag(np.diag(gram))).sum()
        self.assertLess(off_diagonal / np.abs(np.diag(gram)).sum(), 1e-3)

    def test_edge_tolerance_and_out_of_domain_index(self):
        eval_legendre(self.spec, [6.0 + 1e-12, -1e-12])
        with self.assertRaises(ContractViolation) as ctx:
            eval_legendre(self.spec, [1.0, 2.0, 6.5])
        self.assertEqual(ctx.exception.detail['index'], 2)


class BSplineTests(SimpleTestCase):
    def setUp(self):
        self.spec = BasisSpec.bspline(10, (0.0, 1.0))

    def test_partition_of_unity(self):
        times = np.random.default_rng(1).uniform(0, 1, size=200)
        rows = eval_bspline(self.spec, times).values.sum(axis=1)
        np.testing.assert_allclose(rows, 1.0, atol=1e-12)

    def test_local_support(self):
        values = eval_bspline(self.spec, np.linspace(0, 1, 301)).values
        self.assertTrue(np.all((values != 0).sum(axis=1) <= self.spec.degree + 1))
        # first function vanishes beyond the first interior knot
        knots = self.spec.knots
        beyond = np.linspace(knots[4] + 1e-3, 1.0, 20)
        np.testing.assert_array_equal(eval_bspline(self.spec, beyond).values[:, 0], 0.0)

    def test_matches_recursive_definition(self):
        times = np.random.default_rng(2).uniform(0, 1, size=50)
        values = eval_bspline(self.spec, times).values
        expected = np.array([
            [cox_de_boor(self.spec.knots, 3, j, t) for j in range(10)] for t in times
        ])
        np.testing.assert_allclose(values, expected, atol=1e-12)

    def test_repeated_and_unsorted_times(self):
        times = np.array([0.7, 0.1, 0.7, 0.3, 0.1])
        values = eval_bspline(self.spec, times).values
        np.testing.assert_array_equal(values[0], values[2])
        np.testing.assert_array_equal(values[1], values[4])

    def test_right_boundary_is_defined(self):
        row = eval_bspline(self.spec, [1.0]).values[0]
        self.assertAlmostEqual(row.sum(), 1.0, places=12)
        self.assertAlmostEqual(row[-1], 1.0, places=12)

    def test_deterministic(self):
        times = np.random.default_rng(3).uniform(0, 1, size=30)
        np.testing.assert_array_equal(
            eval_bspline(self.spec, times).values, eval_bspline(self.spec, times).values,
        )


class SeasonalTests(SimpleTestCase):
    def setUp(self):
        self.spec = BasisSpec.seasonal(6, 12.0)

    def test_periodicity(self):
        times = np.random.default_rng(4).uniform(-30, 60, size=100)
        np.testing.assert_allclose(
            eval_seasonal(self.spec, times + 12.0).values,
            eval_seasonal(self.spec, times).values,
            atol=1e-12,
        )

    def test_partition_of_unity_and_sparsity(self):
        values = eval_seasonal(self.spec, np.linspace(-12, 36, 500)).values
        np.testing.assert_allclose(values.sum(axis=1), 1.0, atol=1e-12)
        self.assertTrue(np.all((values != 0).sum(axis=1) <= self.spec.degree + 1))

    def test_projects_smooth_periodic_signal(self):
        times = np.linspace(0, 24, 481)
        target = np.cos(2 * np.pi * times / 12.0) + 0.5
        values = eval_seasonal(self.spec, times).values
        coef, *_ = np.linalg.lstsq(values, target, rcond=None)
        rms = np.sqrt(np.mean((values @ coef - target) ** 2))
        self.assertLess(rms, 0.02)

    def test_wrong_family(self):
        with self.assertRaises(ContractViolation):
            eval_seasonal(BasisSpec.legendre(3, (0.0, 1.0)), [0.5])


class CompositeTests(SimpleTestCase):
    def test_single_block_identity(self):
        part = BasisSpec.bspline(8, (0.0, 10.0))
        times = np.linspace(0, 10, 17)
        np.testing.assert_array_equal(
            eval_composite(BasisSpec.composite([part]), times).values,
            eval_bspline(part, times).values,
        )

    def test_seasonal_plus_trend_has_twenty_columns(self):
        seasonal = BasisSpec.seasonal(6, 12.0)
        trend = BasisSpec.bspline(14, (0.0, 128.0))
        spec = BasisSpec.composite([seasonal, trend])
        times = np.arange(1.0, 129.0)
        values = eval_composite(spec, times).values
        self.assertEqual(values.shape, (128, 20))
        np.testing.assert_array_equal(values[:, :6], eval_seasonal(seasonal, times).values)
        np.testing.assert_array_equal(values[:, 6:], eval_bspline(trend, times).values)
