import unittest
import numpy as np
from src.ot_core import OtProblem, build_augmented, entropic_objective, scaling_solve
from src.ot_oracle import OracleConfig, finite_diff_gradient, oracle_solve
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

class TestOtOracle(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        print(f"{YELLOW}[!]{RESET} Running ot_oracle tests...")

    def setUp(self):
        rng = np.random.default_rng(11)
        self.cost = rng.uniform(0.0, 2.0, size=(5, 3))

    def test_oracle_agrees_with_scaling(self):
        """Test that the oracle and the scaling solver reach the same plan and objective"""
        for rho, kl_weight, epsilon in ((0.3, 0.5, 0.1), (0.6, 0.1, 0.05), (1.0, 0.05, 0.02)):
            problem = OtProblem(cost=self.cost, rho=rho, kl_weight=kl_weight, epsilon=epsilon)
            aug = build_augmented(problem)
            plan = scaling_solve(aug, epsilon, tol=1e-10, max_iter=100000)
            reference = oracle_solve(aug, epsilon)
            self.assertAlmostEqual(entropic_objective(plan, aug, epsilon),
                                   entropic_objective(reference, aug, epsilon), delta=1e-4)
            np.testing.assert_allclose(plan.full, reference.full, atol=1e-3)
        print(f"{GREEN}[✔]{RESET} test_oracle_agrees_with_scaling passed!")

    def test_oracle_meets_marginals_exactly(self):
        """Test that every oracle iterate keeps the row and sink constraints"""
        aug = build_augmented(OtProblem(cost=self.cost, rho=0.6))
        plan = oracle_solve(aug, 0.05, OracleConfig(iterations=50))
        np.testing.assert_allclose(plan.full.sum(axis=1), np.full(5, 0.2), atol=1e-12)
        self.assertAlmostEqual(plan.sink_mass.sum(), 0.4, places=10)
        print(f"{GREEN}[✔]{RESET} test_oracle_meets_marginals_exactly passed!")

    def test_oracle_is_deterministic(self):
        """Test that a fixed seed gives the same oracle result"""
        aug = build_augmented(OtProblem(cost=self.cost, rho=0.6))
        first = oracle_solve(aug, 0.05, OracleConfig(iterations=200, seed=3))
        second = oracle_solve(aug, 0.05, OracleConfig(iterations=200, seed=3))
        np.testing.assert_array_equal(first.full, second.full)
        print(f"{GREEN}[✔]{RESET} test_oracle_is_deterministic passed!")

    def test_oracle_rejects_out_of_scope_problems(self):
        """Test the oracle size and weight limits"""
        with self.assertRaises(ValueError):
            oracle_solve(build_augmented(OtProblem(cost=np.ones((17, 2)))), 0.05)
        with self.assertRaises(ValueError):
            oracle_solve(build_augmented(OtProblem(cost=np.ones((3, 9)))), 0.05)
        with self.assertRaises(ValueError):
            oracle_solve(build_augmented(OtProblem.equality_limit(self.cost)), 0.05)
        with self.assertRaises(ValueError):
            OracleConfig(iterations=0)
        with self.assertRaises(ValueError):
            OracleConfig(step=-1.0)
        print(f"{GREEN}[✔]{RESET} test_oracle_rejects_out_of_scope_problems passed!")

    def test_finite_diff_gradient(self):
        """Test central differences on a quadratic"""
        matrix = np.array([[2.0, 0.5], [0.5, 1.0]])
        point = np.array([0.3, -1.2])
        gradient = finite_diff_gradient(lambda x: 0.5 * x @ matrix @ x, point)
        np.testing.assert_allclose(gradient, matrix @ point, atol=1e-8)
        self.assertEqual(finite_diff_gradient(lambda x: x[0] ** 2, 2.0).shape, (1,))
        with self.assertRaises(ValueError):
            finite_diff_gradient(lambda x: x.sum(), point, h=1e-2)
        with self.assertRaises(ValueError):
            finite_diff_gradient(lambda x: x.sum(), point, h=1e-8)
        print(f"{GREEN}[✔]{RESET} test_finite_diff_gradient passed!")

if __name__ == '__main__':
    suite = unittest.TestLoader().loadTestsFromTestCase(TestOtOracle)
    runner = unittest.TextTestRunner(resultclass=CustomTestResult, stream=sys.stderr, verbosity=2)
    result = runner.run(suite)
    sys.exit(not result.wasSuccessful())
