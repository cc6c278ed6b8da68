import unittest
import math
import numpy as np
from src.schedules import FixedRho, LinearRamp, SigmoidRamp, make_schedule, rho_schedule
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

class TestSchedules(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        print(f"{YELLOW}[!]{RESET} Running schedules tests...")

    def test_sigmoid_start_value(self):
        """Test the ramp value at the first iteration"""
        self.assertAlmostEqual(rho_schedule(0, 10, 5, 0.1), 0.1 + 0.9 * math.exp(-5.0), places=15)
        self.assertAlmostEqual(rho_schedule(0, 10, 5, 0.1), 0.106064, places=6)
        print(f"{GREEN}[✔]{RESET} test_sigmoid_start_value passed!")

    def test_sigmoid_end_value(self):
        """Test that the ramp holds at exactly 1 from T*I on"""
        self.assertEqual(rho_schedule(50, 10, 5, 0.1), 1.0)
        self.assertEqual(rho_schedule(10 ** 6, 10, 5, 0.1), 1.0)
        self.assertEqual(rho_schedule(3, 0, 5, 0.1), 1.0)
        print(f"{GREEN}[✔]{RESET} test_sigmoid_end_value passed!")

    def test_full_initial_mass(self):
        """Test that rho0 = 1 stays at 1"""
        for t in range(0, 60, 7):
            self.assertEqual(rho_schedule(t, 10, 5, 1.0), 1.0)
        print(f"{GREEN}[✔]{RESET} test_full_initial_mass passed!")

    def test_monotone_on_dense_grid(self):
        """Test that both ramps are nondecreasing and bounded"""
        for schedule in (SigmoidRamp(0.1, 10, 37), LinearRamp(0.1, 10, 37)):
            values = np.array([schedule.rho(t) for t in range(0, 10 * 37 + 50)])
            self.assertTrue(np.all(np.diff(values) >= 0.0))
            self.assertTrue(np.all((values > 0.0) & (values <= 1.0)))
            self.assertEqual(values[-1], 1.0)
            self.assertEqual(schedule.final_rho, 1.0)
        print(f"{GREEN}[✔]{RESET} test_monotone_on_dense_grid passed!")

    def test_linear_ramp_values(self):
        """Test the linear ramp at its start and midpoint"""
        ramp = LinearRamp(0.2, 2, 5)
        self.assertEqual(ramp.rho(0), 0.2)
        self.assertAlmostEqual(ramp.rho(5), 0.6, places=12)
        self.assertEqual(ramp.rho(10), 1.0)
        print(f"{GREEN}[✔]{RESET} test_linear_ramp_values passed!")

    def test_fixed_rho(self):
        """Test the constant schedule"""
        schedule = make_schedule("fixed", 0.1, 10, 5, fixed_rho=0.8)
        self.assertIsInstance(schedule, FixedRho)
        self.assertEqual(schedule.rho(0), 0.8)
        self.assertEqual(schedule.rho(1000), 0.8)
        self.assertEqual(schedule.final_rho, 0.8)
        print(f"{GREEN}[✔]{RESET} test_fixed_rho passed!")

    def test_invalid_inputs(self):
        """Test rejected schedule arguments"""
        with self.assertRaises(ValueError):
            rho_schedule(-1, 10, 5, 0.1)
        with self.assertRaises(ValueError):
            SigmoidRamp(0.0, 10, 5)
        with self.assertRaises(ValueError):
            FixedRho(1.5)
        with self.assertRaises(ValueError):
            make_schedule("cosine", 0.1, 10, 5)
        print(f"{GREEN}[✔]{RESET} test_invalid_inputs passed!")

if __name__ == '__main__':
    suite = unittest.TestLoader().loadTestsFromTestCase(TestSchedules)
    runner = unittest.TextTestRunner(resultclass=CustomTestResult, stream=sys.stderr, verbosity=2)
    result = runner.run(suite)
    sys.exit(not result.wasSuccessful())
