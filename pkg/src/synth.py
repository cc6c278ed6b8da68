import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from src.data_io import ManifestRecord, write_bag, write_manifest
from src.exports import write_csv
from src.mil_model import Bag

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SynthConfig:
    """
    a configuration of the synthetic long-tailed bag generator.

    every bag mixes instances from n_components Gaussian "morphology" components whose frequencies
    follow a power law. survival is exponential, with a log-hazard driven by how much of the bag
    belongs to the prognostic component.

    Attributes:
        n_bags (int): number of bags.
        min_instances (int): smallest bag size.
        max_instances (int): largest bag size (inclusive).
        feature_dim (int): feature dimension D.
        n_components (int): number of morphological components.
        tail_exponent (float): component weights are proportional to rank^(-tail_exponent).
        prognostic_component (int, optional): index of the component that shifts the hazard.
            component 1, the most frequent minority component, when None (0 with one component).
        effect_size (float): log-hazard per unit of prognostic prevalence.
        censoring_rate (float): probability that a bag is censored.
        noise_sigma (float): within-component standard deviation.
        concentration (float, optional): each bag draws its own component weights from a Dirichlet
            with mean equal to the power-law prior and this concentration per component. every bag
            shares the prior when None.
        baseline_hazard (float): hazard of a bag with zero prevalence.
        seed (int): seed of the single generator stream.
    """
    n_bags: int = 400
    min_instances: int = 60
    max_instances: int = 200
    feature_dim: int = 32
    n_components: int = 6
    tail_exponent: float = 1.5
    prognostic_component: Optional[int] = None
    effect_size: float = 2.0
    censoring_rate: float = 0.3
    noise_sigma: float = 0.5
    concentration: Optional[float] = 0.25
    baseline_hazard: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_bags < 1:
            raise ValueError(f"n_bags must be at least 1, got {self.n_bags}")
        if not 1 <= self.min_instances <= self.max_instances:
            raise ValueError(f"need 1 <= min_instances <= max_instances, got "
                             f"{self.min_instances}, {self.max_instances}")
        if self.feature_dim < 1 or self.n_components < 1:
            raise ValueError("feature_dim and n_components must be positive")
        if self.tail_exponent <= 0:
            raise ValueError(f"tail_exponent must be positive, got {self.tail_exponent}")
        if not 0.0 <= self.censoring_rate < 1.0:
            raise ValueError(f"censoring_rate must lie in [0, 1), got {self.censoring_rate}")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be nonnegative, got {self.noise_sigma}")
        if self.concentration is not None and self.concentration <= 0:
            raise ValueError(f"concentration must be positive, got {self.concentration}")
        if self.baseline_hazard <= 0:
            raise ValueError(f"baseline_hazard must be positive, got {self.baseline_hazard}")
        if not 0 <= self.prognostic_index < self.n_components:
            raise ValueError(f"prognostic_component {self.prognostic_component} outside 0..{self.n_components - 1}")

    @property
    def prognostic_index(self) -> int:
        if self.prognostic_component is None:
            return min(1, self.n_components - 1)
        return self.prognostic_component

    @property
    def component_weights(self) -> np.ndarray:
        """Power-law prior over components, rank 1 first."""
        weights = np.arange(1, self.n_components + 1, dtype=np.float64) ** -self.tail_exponent
        return weights / weights.sum()


@dataclass
class SynthDataset:
    """
    generated bags together with their ground truth.

    Attributes:
        bags (list[Bag]): the bags, labelled.
        hazards (np.ndarray): true hazard of every bag.
        prevalence (np.ndarray): fraction of each bag's instances from the prognostic component.
        components (list[np.ndarray]): component label of every instance.
        means (np.ndarray): (n_components, D) component centres.
    """
    bags: list = field(default_factory=list)
    hazards: np.ndarray = None
    prevalence: np.ndarray = None
    components: list = field(default_factory=list)
    means: np.ndarray = None


def true_hazard(prevalence, cfg: SynthConfig) -> np.ndarray:
    """baseline * exp(effect_size * prevalence)."""
    return cfg.baseline_hazard * np.exp(cfg.effect_size * np.asarray(prevalence, dtype=np.float64))


def _bag_weights(rng: np.random.Generator, cfg: SynthConfig, prior: np.ndarray) -> np.ndarray:
    weights = rng.dirichlet(cfg.concentration * cfg.n_components * prior)
    total = weights.sum()
    # small Dirichlet parameters can underflow every gamma draw to zero
    if not (np.all(np.isfinite(weights)) and total > 0):
        return prior
    return weights / total


def generate(cfg: SynthConfig) -> SynthDataset:
    """
    Draw a dataset in memory; every draw comes from one seeded generator in a fixed order.
    """
    rng = np.random.default_rng(cfg.seed)
    prior = cfg.component_weights
    means = rng.normal(0.0, 1.0, size=(cfg.n_components, cfg.feature_dim))
    dataset = SynthDataset(means=means)
    hazards, prevalence = [], []

    for b in range(cfg.n_bags):
        n = int(rng.integers(cfg.min_instances, cfg.max_instances + 1))
        weights = prior if cfg.concentration is None else _bag_weights(rng, cfg, prior)
        labels = rng.choice(cfg.n_components, size=n, p=weights)
        features = means[labels] + cfg.noise_sigma * rng.standard_normal((n, cfg.feature_dim))
        # stored as float32 on disk; keep memory and disk identical
        features = features.astype(np.float32).astype(np.float64)

        share = float(np.mean(labels == cfg.prognostic_index))
        hazard = float(true_hazard(share, cfg))
        time = float(rng.exponential(1.0 / hazard))
        event = True
        if rng.uniform() < cfg.censoring_rate:
            time *= 1.0 - rng.uniform()
            event = False

        bag_id = f"bag{b:05d}"
        dataset.bags.append(Bag(features=features, time=time, event=event, bag_id=bag_id))
        dataset.components.append(labels)
        hazards.append(hazard)
        prevalence.append(share)

    dataset.hazards = np.asarray(hazards)
    dataset.prevalence = np.asarray(prevalence)
    logger.info(f"generated {cfg.n_bags} bags: {int(sum(bag.event for bag in dataset.bags))} events, "
                f"mean prognostic prevalence {dataset.prevalence.mean():.4f}")
    return dataset


def synth_dataset(cfg: SynthConfig, out_dir) -> SynthDataset:
    """
    Generate a dataset and write it under `out_dir`.

    Layout: bags/<bag_id>.bag, manifest.tsv (folds unassigned), ground_truth.csv
    (bag_id, hazard, prevalence, time, event) and instance_components.csv
    (bag_id, instance, component).

    Returns:
        SynthDataset: the generated data.
    """
    out_dir = Path(out_dir)
    (out_dir / "bags").mkdir(parents=True, exist_ok=True)
    dataset = generate(cfg)

    records = []
    for bag in dataset.bags:
        rel_path = f"bags/{bag.bag_id}.bag"
        write_bag(bag, out_dir / rel_path)
        records.append(ManifestRecord(bag_id=bag.bag_id, path=rel_path, time=bag.time, event=bag.event,
                                      fold=None, cohort="synthetic"))
    write_manifest(records, out_dir / "manifest.tsv")
    write_csv(out_dir / "ground_truth.csv", ("bag_id", "hazard", "prevalence", "time", "event"),
              ((bag.bag_id, h, p, bag.time, bag.event)
               for bag, h, p in zip(dataset.bags, dataset.hazards, dataset.prevalence)))
    write_csv(out_dir / "instance_components.csv", ("bag_id", "instance", "component"),
              ((bag.bag_id, i, int(c)) for bag, labels in zip(dataset.bags, dataset.components)
               for i, c in enumerate(labels)))
    logger.info(f"synthetic dataset written to {out_dir}")
    return dataset


def read_ground_truth(data_dir) -> dict:
    """
    True hazard per bag from ground_truth.csv.

    Returns:
        dict: bag_id -> hazard.
    """
    path = Path(data_dir) / "ground_truth.csv"
    if not path.is_file():
        raise FileNotFoundError(f"{path} does not exist; the dataset was not written by synth")
    with open(path, newline="", encoding="utf-8") as handle:
        return {row["bag_id"]: float(row["hazard"]) for row in csv.DictReader(handle)}


def read_instance_components(data_dir) -> dict:
    """
    Component label of every instance from instance_components.csv.

    Returns:
        dict: bag_id -> integer array indexed by instance.
    """
    path = Path(data_dir) / "instance_components.csv"
    if not path.is_file():
        raise FileNotFoundError(f"{path} does not exist; the dataset was not written by synth")
    labels = {}
    with open(path, newline="", encoding="utf-8") as handle:
        for row in csv.DictReader(handle):
            labels.setdefault(row["bag_id"], {})[int(row["instance"])] = int(row["component"])
    return {bag_id: np.array([by_instance[i] for i in range(len(by_instance))])
            for bag_id, by_instance in labels.items()}
