import unittest
import numpy as np
from src.mil_model import SolverConfig
from src.verification import (RHO_GRID, SuiteResult, CaseResult, batch_loss, gradient_check_suite,
                              oracle_agreement_suite, random_batch, random_problem)
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

class TestVerification(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        print(f"{YELLOW}[!]{RESET} Running verification tests...")

    def test_random_instances_stay_in_range(self):
        """Test the seeded instance and batch generators"""
        rng = np.random.default_rng(0)
        for _ in range(20):
            problem = random_problem(rng)
            self.assertTrue(2 <= problem.n_instances <= 8)
            self.assertTrue(1 <= problem.n_tokens <= 3)
            self.assertIn(problem.rho, RHO_GRID)
        model, bags = random_batch(np.random.default_rng(1))
        self.assertEqual(len(bags), 3)
        self.assertTrue(bags[0].event)
        self.assertTrue(all(bag.n_instances <= 12 and bag.features.shape[1] == model.in_dim for bag in bags))
        print(f"{GREEN}[✔]{RESET} test_random_instances_stay_in_range passed!")

    def test_random_batches_have_comparable_pairs(self):
        """Test that every seeded batch has an event earlier than another bag, so the loss is non-zero"""
        for seed in range(200):
            _, bags = random_batch(np.random.default_rng(seed))
            self.assertTrue(any(a.event and a.time < b.time for a in bags for b in bags), f"seed {seed}")
            self.assertTrue(all(bag.time > 0 for bag in bags))
        for seed in range(5):
            model, bags = random_batch(np.random.default_rng(seed))
            loss = batch_loss(model, bags, 0.6, SolverConfig()).item()
            self.assertGreater(loss, 1e-6, f"seed {seed}")
        print(f"{GREEN}[✔]{RESET} test_random_batches_have_comparable_pairs passed!")

    def test_oracle_agreement_suite(self):
        """Test that a short oracle suite passes every case"""
        result = oracle_agreement_suite(n_instances=3, seed=0)
        self.assertEqual(len(result.cases), 3)
        self.assertTrue(result.passed, [case.detail for case in result.cases])
        print(f"{GREEN}[✔]{RESET} test_oracle_agreement_suite passed!")

    def test_gradient_check_suite(self):
        """Test that unrolled gradients match central differences on one batch"""
        result = gradient_check_suite(n_batches=1, seed=0)
        self.assertTrue(result.passed, [case.detail for case in result.cases])
        self.assertGreater(result.cases[0].detail["parameters"], 0)
        print(f"{GREEN}[✔]{RESET} test_gradient_check_suite passed!")

    def test_suite_result(self):
        """Test pass and failure counting"""
        self.assertFalse(SuiteResult(name="empty").passed)
        result = SuiteResult(name="mixed", cases=[CaseResult(index=0, passed=True), CaseResult(index=1, passed=False)])
        self.assertFalse(result.passed)
        self.assertEqual(result.n_failed, 1)
        print(f"{GREEN}[✔]{RESET} test_suite_result passed!")

if __name__ == '__main__':
    suite = unittest.TestLoader().loadTestsFromTestCase(TestVerification)
    runner = unittest.TextTestRunner(resultclass=CustomTestResult, stream=sys.stderr, verbosity=2)
    result = runner.run(suite)
    sys.exit(not result.wasSuccessful())
