import unittest
import math
import numpy as np
from scipy.special import erfc
from src.survival_stats import (Cohort, NoComparablePairsError, ZeroVarianceError, c_index, km_curve,
                                log_rank_test, stratify_by_median)
import sys

# ANSI COLORS
GREEN = '\033[92m'
RED = '\033[91m'
YELLOW = '\033[93m'
RESET = '\033[0m'

class CustomTestResult(unittest.TestResult):
    def addFailure(self, test, err):
        super().addFailure(test, err)
        print(f"{RED}[X]{RESET} {test._testMethodName} failed!")

    def addError(self, test, err):
        super().addError(test, err)
        print(f"{RED}[X]{RESET} {test._testMethodName} encountered an error!")

def brute_force_c_index(risks, times, events):
    concordant, comparable = 0.0, 0
    for i in range(len(risks)):
        for j in range(len(risks)):
            if events[i] and times[i] < times[j]:
                comparable += 1
                if risks[i] > risks[j]:
                    concordant += 1.0
                elif risks[i] == risks[j]:
                    concordant += 0.5
    return concordant / comparable

class TestSurvivalStats(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        print(f"{YELLOW}[!]{RESET} Running survival_stats tests...")

    def test_c_index_extremes(self):
        """Test perfect ordering and all-tied risks"""
        times = [1.0, 2.0, 3.0, 4.0]
        events = [True] * 4
        self.assertEqual(c_index(Cohort(risks=[4.0, 3.0, 2.0, 1.0], times=times, events=events)), 1.0)
        self.assertEqual(c_index(Cohort(risks=[1.0, 2.0, 3.0, 4.0], times=times, events=events)), 0.0)
        self.assertEqual(c_index(Cohort(risks=[0.5] * 4, times=times, events=events)), 0.5)
        print(f"{GREEN}[✔]{RESET} test_c_index_extremes passed!")

    def test_c_index_with_censoring(self):
        """Test a four-patient cohort against exhaustive pairs"""
        cohort = Cohort(risks=[0.9, 0.2, 0.5, 0.4], times=[2.0, 1.0, 3.0, 4.0], events=[True, False, True, True])
        # comparable: (0,2) (0,3) (2,3); concordant: (0,2) (0,3) (2,3)
        self.assertEqual(c_index(cohort), 1.0)
        cohort = Cohort(risks=[0.3, 0.2, 0.5, 0.5], times=[2.0, 1.0, 3.0, 4.0], events=[True, False, True, True])
        self.assertAlmostEqual(c_index(cohort), 0.5 / 3, places=15)
        print(f"{GREEN}[✔]{RESET} test_c_index_with_censoring passed!")

    def test_c_index_matches_brute_force(self):
        """Test agreement with pair enumeration on random cohorts"""
        rng = np.random.default_rng(0)
        checked = 0
        for _ in range(200):
            n = int(rng.integers(2, 31))
            risks = rng.integers(0, 6, size=n).astype(float)
            times = rng.integers(1, 10, size=n).astype(float)
            events = rng.uniform(size=n) < 0.6
            cohort = Cohort(risks=risks, times=times, events=events)
            try:
                expected = brute_force_c_index(risks, times, events)
            except ZeroDivisionError:
                with self.assertRaises(NoComparablePairsError):
                    c_index(cohort)
                continue
            self.assertEqual(c_index(cohort), expected)
            checked += 1
        self.assertGreater(checked, 150)
        print(f"{GREEN}[✔]{RESET} test_c_index_matches_brute_force passed!")

    def test_c_index_properties(self):
        """Test monotone-transform invariance and the complement rule"""
        rng = np.random.default_rng(1)
        risks = rng.normal(size=25)
        times = rng.uniform(1.0, 5.0, size=25)
        events = rng.uniform(size=25) < 0.7
        base = c_index(Cohort(risks=risks, times=times, events=events))
        self.assertEqual(c_index(Cohort(risks=np.exp(3 * risks), times=times, events=events)), base)
        self.assertAlmostEqual(base + c_index(Cohort(risks=-risks, times=times, events=events)), 1.0, places=12)
        print(f"{GREEN}[✔]{RESET} test_c_index_properties passed!")

    def test_no_comparable_pairs(self):
        """Test the error for all-censored cohorts and equal times"""
        with self.assertRaises(NoComparablePairsError):
            c_index(Cohort(risks=[1.0, 2.0], times=[1.0, 2.0], events=[False, False]))
        with self.assertRaises(NoComparablePairsError):
            c_index(Cohort(risks=[1.0, 2.0], times=[3.0, 3.0], events=[True, True]))
        print(f"{GREEN}[✔]{RESET} test_no_comparable_pairs passed!")

    def test_cohort_validation(self):
        """Test Cohort invariants"""
        with self.assertRaises(ValueError):
            Cohort(risks=[1.0], times=[1.0, 2.0], events=[True])
        with self.assertRaises(ValueError):
            Cohort(risks=[1.0], times=[0.0], events=[True])
        print(f"{GREEN}[✔]{RESET} test_cohort_validation passed!")

    def test_stratify_by_median(self):
        """Test median splits for even, odd and tied cohorts"""
        cohort = Cohort(risks=[1.0, 2.0, 3.0, 4.0], times=[1.0] * 4, events=[True] * 4, ids=["a", "b", "c", "d"])
        high, low = stratify_by_median(cohort)
        self.assertEqual(high.ids, ("c", "d"))
        self.assertEqual(low.ids, ("a", "b"))
        high, low = stratify_by_median(Cohort(risks=[3.0, 1.0, 2.0], times=[1.0] * 3, events=[True] * 3))
        self.assertEqual(high.ids, ("0",))
        self.assertEqual(low.ids, ("1", "2"))
        with self.assertLogs('src.survival_stats', level='WARNING'):
            high, low = stratify_by_median(Cohort(risks=[1.0] * 4, times=[1.0] * 4, events=[True] * 4))
        self.assertEqual(len(high), 0)
        self.assertEqual(len(low), 4)
        print(f"{GREEN}[✔]{RESET} test_stratify_by_median passed!")

    def test_km_curve(self):
        """Test hand-worked product-limit curves"""
        curve = km_curve([1.0, 2.0], [True, True])
        np.testing.assert_allclose(curve.survival, [0.5, 0.0], atol=1e-10)
        curve = km_curve([1.0, 2.0], [True, False])
        np.testing.assert_allclose(curve.survival, [0.5, 0.5], atol=1e-10)
        np.testing.assert_array_equal(curve.at_risk, [2, 1])
        np.testing.assert_array_equal(curve.observed_events, [1, 0])
        curve = km_curve([3.0, 1.0, 2.0], [False, False, False])
        np.testing.assert_array_equal(curve.survival, [1.0, 1.0, 1.0])
        # censored subject at t=2 stays at risk for the event at t=2
        curve = km_curve([1.0, 2.0, 2.0, 3.0], [True, True, False, True])
        np.testing.assert_allclose(curve.survival, [0.75, 0.75 * 2 / 3, 0.0], atol=1e-10)
        print(f"{GREEN}[✔]{RESET} test_km_curve passed!")

    def test_km_curve_properties(self):
        """Test monotonicity and the uncensored tail value"""
        rng = np.random.default_rng(4)
        times = rng.uniform(0.1, 5.0, size=40)
        curve = km_curve(times, rng.uniform(size=40) < 0.6)
        self.assertTrue(np.all(np.diff(curve.survival) <= 0))
        self.assertTrue(np.all((curve.survival >= 0) & (curve.survival <= 1)))
        self.assertTrue(np.all(np.diff(curve.time_points) > 0))
        uncensored = km_curve(np.arange(1.0, 11.0), [True] * 10)
        self.assertAlmostEqual(uncensored.survival[6], 3 / 10, places=12)
        self.assertEqual(uncensored.survival_at(0.5), 1.0)
        self.assertAlmostEqual(float(uncensored.survival_at(2.5)), 0.8, places=12)
        print(f"{GREEN}[✔]{RESET} test_km_curve_properties passed!")

    def test_log_rank_identical_groups(self):
        """Test that identical groups give chi-square 0 and p = 1"""
        group = Cohort(risks=[0.0] * 4, times=[1.0, 2.0, 3.0, 4.0], events=[True, False, True, True])
        chi_square, p_value = log_rank_test(group, group)
        self.assertAlmostEqual(chi_square, 0.0, places=12)
        self.assertAlmostEqual(p_value, 1.0, places=10)
        print(f"{GREEN}[✔]{RESET} test_log_rank_identical_groups passed!")

    def test_log_rank_hand_example(self):
        """Test the hand-worked two-event example"""
        a = Cohort(risks=[0.0, 0.0], times=[1.0, 1.0], events=[True, True])
        b = Cohort(risks=[0.0, 0.0], times=[3.0, 3.0], events=[False, False])
        # one event time: n=4, n_a=2, d=2 -> E_a=1, Var=1/3, O_a=2
        chi_square, p_value = log_rank_test(a, b)
        self.assertAlmostEqual(chi_square, 3.0, delta=1e-10)
        self.assertAlmostEqual(p_value, erfc(math.sqrt(1.5)), delta=1e-10)
        swapped = log_rank_test(b, a)
        self.assertAlmostEqual(swapped[0], chi_square, delta=1e-12)
        print(f"{GREEN}[✔]{RESET} test_log_rank_hand_example passed!")

    def test_log_rank_zero_variance(self):
        """Test the error when no events occur"""
        a = Cohort(risks=[0.0], times=[1.0], events=[False])
        b = Cohort(risks=[0.0], times=[2.0], events=[False])
        with self.assertRaises(ZeroVarianceError):
            log_rank_test(a, b)
        print(f"{GREEN}[✔]{RESET} test_log_rank_zero_variance passed!")

if __name__ == '__main__':
    suite = unittest.TestLoader().loadTestsFromTestCase(TestSurvivalStats)
    runner = unittest.TextTestRunner(resultclass=CustomTestResult, stream=sys.stderr, verbosity=2)
    result = runner.run(suite)
    sys.exit(not result.wasSuccessful())
