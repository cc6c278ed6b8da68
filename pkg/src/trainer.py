"""
Cox training loop with the mass-ratio curriculum.

Per-bag forward passes of a batch run on a thread pool driven by asyncio; the batch loss and its
gradient are reduced in bag-index order, so results do not depend on the worker count.
"""

import asyncio
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from src.mil_model import DTYPE, Bag, SolverConfig, TransportMIL, backward, bag_rng, cox_loss, forward
from src.schedules import RhoSchedule, make_schedule
from src.survival_stats import Cohort, NoComparablePairsError, c_index

logger = logging.getLogger(__name__)

THREADS_ENV = "OTMIL_THREADS"


class TrainingError(RuntimeError):
    """Training aborted: non-finite loss, or no batch of an epoch carried an event."""


@dataclass(frozen=True)
class TrainConfig:
    """
    training hyper-parameters.

    Attributes:
        rho0 (float): initial mass ratio of the curriculum.
        ramp_epochs (int): epochs T needed to reach rho = 1.
        epochs (int): number of training epochs.
        lr (float): initial AdamW learning rate, decayed on a cosine.
        weight_decay (float): decoupled weight decay.
        batch_size (int): bags per Cox risk set.
        n_tokens (int): number of survival tokens K.
        kl_weight (float): KL weight of the token marginal.
        epsilon (float): entropic regularisation.
        iota (float): virtual-token KL weight.
        latent_dim (int): projected dimension d.
        ramp_shape (str): 'sigmoid', 'linear' or 'fixed'.
        fixed_rho (float): rho of the 'fixed' ramp shape.
        global_constraint (str): 'kl' or 'equality'.
        max_patches (int, optional): subsample bags larger than this.
        selection (str): 'mass' (virtual token) or 'cost' (keep the cheapest instances).
        use_projection (bool): learn f_proj; features are used as-is when False.
        tol (float): scaling tolerance during training.
        max_iter (int): scaling sweep cap during training.
        seed (int): seed of initialisation, shuffling and subsampling.
    """
    rho0: float = 0.1
    ramp_epochs: int = 10
    epochs: int = 50
    lr: float = 1e-4
    weight_decay: float = 1e-5
    batch_size: int = 16
    n_tokens: int = 16
    kl_weight: float = 0.1
    epsilon: float = 0.05
    iota: float = 1e8
    latent_dim: int = 256
    ramp_shape: str = "sigmoid"
    fixed_rho: float = 0.8
    global_constraint: str = "kl"
    max_patches: Optional[int] = None
    selection: str = "mass"
    use_projection: bool = True
    tol: float = 1e-6
    max_iter: int = 1000
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.rho0 <= 1.0:
            raise ValueError(f"rho0 must lie in (0, 1], got {self.rho0}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be nonnegative, got {self.epochs}")
        if self.epochs > 0 and self.ramp_epochs > self.epochs:
            raise ValueError(f"ramp_epochs={self.ramp_epochs} exceeds epochs={self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be at least 1, got {self.batch_size}")
        if self.max_patches is not None and self.max_patches < 1:
            raise ValueError(f"max_patches must be at least 1, got {self.max_patches}")
        if self.selection not in ("mass", "cost"):
            raise ValueError(f"selection must be 'mass' or 'cost', got {self.selection!r}")
        if self.ramp_shape not in ("sigmoid", "linear", "fixed"):
            raise ValueError(f"ramp_shape must be sigmoid, linear or fixed, got {self.ramp_shape!r}")

    def solver_config(self) -> SolverConfig:
        return SolverConfig(kl_weight=self.kl_weight, epsilon=self.epsilon, iota=self.iota, tol=self.tol,
                            max_iter=self.max_iter, global_constraint=self.global_constraint)

    def schedule(self, iters_per_epoch: int) -> RhoSchedule:
        return make_schedule(self.ramp_shape, self.rho0, self.ramp_epochs, iters_per_epoch, self.fixed_rho)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    rho: float
    val_cindex: float = math.nan


@dataclass
class TrainResult:
    model: TransportMIL
    history: list = field(default_factory=list)


def worker_count() -> int:
    """Worker threads for per-bag work, from OTMIL_THREADS (default 1)."""
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        count = int(raw)
    except ValueError:
        raise ValueError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    if count < 1:
        raise ValueError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return count


class BatchProcessor:
    """
    a class to run per-bag work of a batch concurrently.

    jobs are submitted to a thread pool from an asyncio event loop and gathered in submission
    order, so the caller always sees results indexed like its inputs.

    Attributes:
        workers (int): size of the thread pool.
    """

    def __init__(self, workers: Optional[int] = None):
        self.workers = workers if workers is not None else worker_count()
        self._executor = ThreadPoolExecutor(max_workers=self.workers) if self.workers > 1 else None

    async def process_batch(self, job: Callable, items: Sequence) -> list:
        """
        asynchronously apply `job` to every item.

        Args:
            job (Callable): function of (index, item).
            items (Sequence): batch members.

        Returns:
            list: job results in the order of `items`.
        """
        if self._executor is None:
            return [job(i, item) for i, item in enumerate(items)]
        loop = asyncio.get_running_loop()
        futures = [loop.run_in_executor(self._executor, job, i, item) for i, item in enumerate(items)]
        return list(await asyncio.gather(*futures))

    def run(self, job: Callable, items: Sequence) -> list:
        """
        run process_batch synchronously.
        """
        return asyncio.run(self.process_batch(job, items))

    def close(self) -> None:
        if self._executor is not None:
            self._executor.shutdown(wait=True)
            self._executor = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


def build_model(in_dim: int, cfg: TrainConfig) -> TransportMIL:
    """Model for `in_dim` features; latent_dim is capped at in_dim."""
    latent_dim = cfg.latent_dim
    if cfg.use_projection and latent_dim > in_dim:
        logger.warning(f"latent_dim={latent_dim} exceeds the feature dimension {in_dim}; using {in_dim}")
        latent_dim = in_dim
    return TransportMIL(in_dim, latent_dim=latent_dim, n_tokens=cfg.n_tokens,
                        use_projection=cfg.use_projection, seed=cfg.seed)


def _batches(order: np.ndarray, batch_size: int) -> list:
    return [order[i:i + batch_size] for i in range(0, len(order), batch_size)]


def train(bags: Sequence[Bag], cfg: TrainConfig, val_bags: Optional[Sequence[Bag]] = None,
          processor: Optional[BatchProcessor] = None) -> TrainResult:
    """
    Train a model on `bags` with the batch Cox loss.

    Args:
        bags (Sequence[Bag]): training bags, all with the same feature dimension.
        cfg (TrainConfig): hyper-parameters.
        val_bags (Sequence[Bag], optional): bags for the per-epoch validation C-index.
        processor (BatchProcessor, optional): concurrency for forward passes.

    Returns:
        TrainResult: trained model and one EpochRecord per epoch.

    Raises:
        TrainingError: non-finite loss, or an epoch whose batches carry no events.
    """
    if not bags:
        raise ValueError("training set is empty")
    in_dims = {bag.features.shape[1] for bag in bags}
    if len(in_dims) != 1:
        raise ValueError(f"bags disagree on the feature dimension: {sorted(in_dims)}")

    torch.manual_seed(cfg.seed)
    model = build_model(in_dims.pop(), cfg)
    if cfg.epochs == 0:
        return TrainResult(model=model, history=[])

    solver_cfg = cfg.solver_config()
    iters_per_epoch = math.ceil(len(bags) / cfg.batch_size)
    schedule = cfg.schedule(iters_per_epoch)
    optimizer = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=cfg.epochs * iters_per_epoch)

    shuffle_rng = np.random.default_rng(cfg.seed)
    owns_processor = processor is None
    processor = processor if processor is not None else BatchProcessor()
    history = []
    iteration = 0
    try:
        for epoch in range(cfg.epochs):
            order = shuffle_rng.permutation(len(bags))
            losses = []
            for batch_index in _batches(order, cfg.batch_size):
                rho = schedule.rho(iteration)
                batch = [bags[i] for i in batch_index]
                iteration += 1
                if not any(bag.event for bag in batch):
                    logger.warning(f"epoch {epoch + 1}: skipping a batch of {len(batch)} bags with no events")
                    scheduler.step()
                    continue

                def job(position, bag, _epoch=epoch, _rho=rho):
                    rng = bag_rng(cfg.seed, bag.bag_id, _epoch + 1)
                    return forward(bag, model, _rho, solver_cfg, max_patches=cfg.max_patches,
                                   selection=cfg.selection, rng=rng).risk

                risks = torch.stack(processor.run(job, batch))
                times = torch.tensor([bag.time for bag in batch], dtype=DTYPE)
                events = torch.tensor([bag.event for bag in batch], dtype=torch.bool)
                loss = cox_loss(risks, times, events)
                if not math.isfinite(loss.item()):
                    raise TrainingError(f"non-finite loss {loss.item()} at epoch {epoch + 1}, rho={rho:.4f}")

                gradients = backward(loss, model)
                optimizer.zero_grad(set_to_none=False)
                for name, param in model.named_parameters():
                    param.grad = gradients[name]
                optimizer.step()
                scheduler.step()
                losses.append(loss.item())
                logger.debug(f"epoch {epoch + 1} batch loss={loss.item():.6f} rho={rho:.4f}")

            if not losses:
                raise TrainingError(f"epoch {epoch + 1}: every batch had zero events")
            record = EpochRecord(epoch=epoch + 1, train_loss=float(np.mean(losses)), rho=rho,
                                 val_cindex=_validation_cindex(model, val_bags, cfg, schedule, processor))
            history.append(record)
            logger.info(f"epoch {record.epoch}/{cfg.epochs}: loss={record.train_loss:.6f} "
                        f"rho={record.rho:.4f} val_cindex={record.val_cindex:.4f}")
    finally:
        if owns_processor:
            processor.close()
    return TrainResult(model=model, history=history)


def predict_risks(model: TransportMIL, bags: Sequence[Bag], cfg: TrainConfig, rho: Optional[float] = None,
                  processor: Optional[BatchProcessor] = None) -> np.ndarray:
    """
    Risk of every bag at the inference mass ratio (the schedule's final rho unless given).
    """
    rho = rho if rho is not None else cfg.schedule(1).final_rho
    solver_cfg = cfg.solver_config()

    def job(position, bag):
        rng = bag_rng(cfg.seed, bag.bag_id)
        with torch.no_grad():
            return forward(bag, model, rho, solver_cfg, max_patches=cfg.max_patches,
                           selection=cfg.selection, rng=rng).risk.item()

    if processor is not None:
        return np.asarray(processor.run(job, bags), dtype=np.float64)
    with BatchProcessor() as owned:
        return np.asarray(owned.run(job, bags), dtype=np.float64)


def _validation_cindex(model, val_bags, cfg, schedule, processor) -> float:
    if not val_bags:
        return math.nan
    risks = predict_risks(model, val_bags, cfg, rho=schedule.final_rho, processor=processor)
    cohort = Cohort(risks=risks, times=[bag.time for bag in val_bags], events=[bag.event for bag in val_bags],
                    ids=[bag.bag_id for bag in val_bags])
    try:
        return c_index(cohort)
    except NoComparablePairsError:
        logger.warning("validation set has no comparable pairs; C-index left undefined")
        return math.nan


def config_record(cfg: TrainConfig) -> dict:
    """Plain dict of the config, for checkpoint metadata."""
    return asdict(cfg)
