import unittest
import csv
import tempfile
from pathlib import Path
import numpy as np
from scipy.stats import chisquare
from src.data_io import load_bags, read_manifest
from src.synth import SynthConfig, generate, synth_dataset, true_hazard
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

SMALL = dict(n_bags=30, min_instances=5, max_instances=12, feature_dim=4, n_components=4)

class TestSynth(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        print(f"{YELLOW}[!]{RESET} Running synth tests...")

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def test_config_validation(self):
        """Test SynthConfig invariants and the default prognostic component"""
        self.assertEqual(SynthConfig(n_components=5).prognostic_index, 1)
        self.assertEqual(SynthConfig(n_components=1).prognostic_index, 0)
        self.assertEqual(SynthConfig().concentration, 0.25)
        weights = SynthConfig(n_components=3, tail_exponent=1.0).component_weights
        np.testing.assert_allclose(weights, np.array([1.0, 0.5, 1 / 3]) / (11 / 6), rtol=1e-12)
        for bad in (dict(n_bags=0), dict(min_instances=5, max_instances=4), dict(censoring_rate=1.0),
                    dict(prognostic_component=6), dict(concentration=0.0), dict(tail_exponent=0.0)):
            with self.assertRaises(ValueError):
                SynthConfig(**bad)
        print(f"{GREEN}[✔]{RESET} test_config_validation passed!")

    def test_written_files_are_deterministic(self):
        """Test that one seed writes byte-identical datasets"""
        cfg = SynthConfig(seed=9, **SMALL)
        synth_dataset(cfg, self.dir / "a")
        synth_dataset(cfg, self.dir / "b")
        files = sorted(p.relative_to(self.dir / "a") for p in (self.dir / "a").rglob("*") if p.is_file())
        self.assertEqual(len(files), 30 + 3)
        for rel in files:
            self.assertEqual((self.dir / "a" / rel).read_bytes(), (self.dir / "b" / rel).read_bytes(), str(rel))
        other = generate(SynthConfig(seed=10, **SMALL))
        self.assertFalse(np.array_equal(other.bags[0].features, generate(cfg).bags[0].features))
        print(f"{GREEN}[✔]{RESET} test_written_files_are_deterministic passed!")

    def test_disk_matches_memory(self):
        """Test that bags read back equal the generated bags"""
        dataset = synth_dataset(SynthConfig(seed=1, **SMALL), self.dir)
        records = read_manifest(self.dir / "manifest.tsv")
        self.assertTrue(all(r.fold is None and r.cohort == "synthetic" for r in records))
        for original, loaded in zip(dataset.bags, load_bags(self.dir / "manifest.tsv", records)):
            self.assertEqual(original.bag_id, loaded.bag_id)
            self.assertEqual(original.time, loaded.time)
            np.testing.assert_array_equal(original.features, loaded.features)
        print(f"{GREEN}[✔]{RESET} test_disk_matches_memory passed!")

    def test_ground_truth_reproduces_hazards(self):
        """Test that the hazard column follows from the prevalence column"""
        cfg = SynthConfig(seed=2, effect_size=1.5, baseline_hazard=0.5, **SMALL)
        synth_dataset(cfg, self.dir)
        with open(self.dir / "ground_truth.csv", newline="") as handle:
            rows = list(csv.DictReader(handle))
        self.assertEqual(len(rows), 30)
        for row in rows:
            self.assertEqual(float(row["hazard"]), float(true_hazard(float(row["prevalence"]), cfg)))
            self.assertIn(row["event"], ("0", "1"))
        with open(self.dir / "instance_components.csv", newline="") as handle:
            components = list(csv.DictReader(handle))
        for row in rows:
            labels = [int(c["component"]) for c in components if c["bag_id"] == row["bag_id"]]
            self.assertAlmostEqual(np.mean(np.array(labels) == 1), float(row["prevalence"]), places=15)
        print(f"{GREEN}[✔]{RESET} test_ground_truth_reproduces_hazards passed!")

    def test_zero_effect_gives_equal_hazards(self):
        """Test that effect_size 0 removes the prognostic signal"""
        dataset = generate(SynthConfig(seed=3, effect_size=0.0, baseline_hazard=2.0, **SMALL))
        np.testing.assert_array_equal(dataset.hazards, np.full(30, 2.0))
        print(f"{GREEN}[✔]{RESET} test_zero_effect_gives_equal_hazards passed!")

    def test_component_frequencies_follow_prior(self):
        """Test the pooled instance histogram against the power-law prior"""
        cfg = SynthConfig(n_bags=120, min_instances=20, max_instances=40, feature_dim=2, n_components=5, seed=4,
                          concentration=None)
        dataset = generate(cfg)
        labels = np.concatenate(dataset.components)
        observed = np.bincount(labels, minlength=5)
        _, p_value = chisquare(observed, cfg.component_weights * labels.size)
        self.assertGreater(p_value, 1e-4)
        print(f"{GREEN}[✔]{RESET} test_component_frequencies_follow_prior passed!")

    def test_per_bag_weights_spread_prevalence(self):
        """Test that per-bag component weights widen the spread of prognostic prevalence"""
        base = dict(n_bags=200, min_instances=60, max_instances=80, feature_dim=2, n_components=6, seed=12)
        shared = generate(SynthConfig(concentration=None, **base))
        mixed = generate(SynthConfig(**base))
        self.assertGreater(mixed.prevalence.std(), 2 * shared.prevalence.std())
        self.assertGreater(np.log(mixed.hazards).std(), 0.2)
        tiny = generate(SynthConfig(concentration=1e-3, **base))
        self.assertTrue(np.all(np.isfinite(tiny.hazards)))
        self.assertTrue(all(np.all(np.isfinite(bag.features)) for bag in tiny.bags))
        print(f"{GREEN}[✔]{RESET} test_per_bag_weights_spread_prevalence passed!")

    def test_censoring(self):
        """Test censoring rate and that censored times never exceed the event time"""
        cfg = SynthConfig(n_bags=400, min_instances=1, max_instances=2, feature_dim=1, n_components=2,
                          censoring_rate=0.3, seed=5)
        dataset = generate(cfg)
        censored = np.array([not bag.event for bag in dataset.bags])
        self.assertLess(abs(censored.mean() - 0.3), 0.08)
        self.assertTrue(all(bag.time > 0 for bag in dataset.bags))
        none_censored = generate(SynthConfig(censoring_rate=0.0, seed=5, **SMALL))
        self.assertTrue(all(bag.event for bag in none_censored.bags))
        print(f"{GREEN}[✔]{RESET} test_censoring passed!")

    def test_bag_sizes_and_ids(self):
        """Test instance count bounds and bag identifiers"""
        dataset = generate(SynthConfig(seed=6, **SMALL))
        sizes = [bag.n_instances for bag in dataset.bags]
        self.assertTrue(all(5 <= n <= 12 for n in sizes))
        self.assertEqual(dataset.bags[0].bag_id, "bag00000")
        self.assertEqual(dataset.bags[-1].bag_id, "bag00029")
        self.assertEqual(dataset.means.shape, (4, 4))
        print(f"{GREEN}[✔]{RESET} test_bag_sizes_and_ids passed!")

if __name__ == '__main__':
    suite = unittest.TestLoader().loadTestsFromTestCase(TestSynth)
    runner = unittest.TextTestRunner(resultclass=CustomTestResult, stream=sys.stderr, verbosity=2)
    result = runner.run(suite)
    sys.exit(not result.wasSuccessful())
