"""
Acceptance suites run by `verify`: scaling solver against the mirror-descent oracle, and unrolled
model gradients against central differences.
"""

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from src.mil_model import Bag, SolverConfig, TransportMIL, backward, cox_loss, forward, \
    load_parameter_vector, parameter_vector
from src.ot_core import OtProblem, build_augmented, entropic_objective, marginal_residuals, scaling_solve
from src.ot_oracle import OracleConfig, finite_diff_gradient, oracle_solve

logger = logging.getLogger(__name__)

RHO_GRID = (0.3, 0.6, 1.0)
KL_WEIGHT_GRID = (0.05, 0.1, 0.5)
EPSILON_GRID = (0.02, 0.05, 0.1)


@dataclass
class CaseResult:
    index: int
    passed: bool
    detail: dict = field(default_factory=dict)


@dataclass
class SuiteResult:
    """
    outcome of one acceptance suite.

    Attributes:
        name (str): suite name.
        cases (list[CaseResult]): one entry per seeded case.
        elapsed (float): wall-clock seconds.
    """
    name: str
    cases: list = field(default_factory=list)
    elapsed: float = 0.0

    @property
    def passed(self) -> bool:
        return bool(self.cases) and all(case.passed for case in self.cases)

    @property
    def n_failed(self) -> int:
        return sum(not case.passed for case in self.cases)


def random_problem(rng: np.random.Generator) -> OtProblem:
    """One seeded instance from the oracle-agreement grid (N in 2..8, K in 1..3)."""
    n = int(rng.integers(2, 9))
    k = int(rng.integers(1, 4))
    return OtProblem(cost=rng.uniform(0.0, 2.0, size=(n, k)), rho=float(rng.choice(RHO_GRID)),
                     kl_weight=float(rng.choice(KL_WEIGHT_GRID)), epsilon=float(rng.choice(EPSILON_GRID)))


def oracle_agreement_suite(n_instances: int = 50, seed: int = 0, objective_tol: float = 1e-4,
                           plan_tol: float = 1e-3, row_tol: float = 1e-7, mass_tol: float = 1e-4) -> SuiteResult:
    """
    Compare the scaling solver with the oracle on seeded instances.

    A case passes when objectives agree within `objective_tol`, plans within `plan_tol` entrywise,
    and the solver plan meets the row and mass feasibility bounds.
    """
    rng = np.random.default_rng(seed)
    result = SuiteResult(name="oracle-agreement")
    start = time.perf_counter()
    for index in range(n_instances):
        problem = random_problem(rng)
        aug = build_augmented(problem)
        plan = scaling_solve(aug, problem.epsilon, tol=1e-10, max_iter=100000)
        reference = oracle_solve(aug, problem.epsilon, OracleConfig(seed=seed + index))

        objective_gap = abs(entropic_objective(plan, aug, problem.epsilon)
                            - entropic_objective(reference, aug, problem.epsilon))
        plan_gap = float(np.max(np.abs(plan.full - reference.full)))
        row_residual, mass_residual = marginal_residuals(plan)
        passed = (objective_gap <= objective_tol and plan_gap <= plan_tol
                  and row_residual <= row_tol and mass_residual <= mass_tol)
        detail = {"n": problem.n_instances, "k": problem.n_tokens, "rho": problem.rho,
                  "kl_weight": problem.kl_weight, "epsilon": problem.epsilon, "objective_gap": objective_gap,
                  "plan_gap": plan_gap, "row_residual": row_residual, "mass_residual": mass_residual}
        result.cases.append(CaseResult(index=index, passed=passed, detail=detail))
        logger.debug(f"oracle case {index}: {detail} passed={passed}")
    result.elapsed = time.perf_counter() - start
    return result


def random_batch(rng: np.random.Generator) -> tuple[TransportMIL, list]:
    """
    A seeded model with a 3-bag batch (N <= 12, K <= 4, d <= 8).

    The first bag is an event strictly earlier than the other two, so the batch always has a
    comparable pair and a non-zero Cox loss.
    """
    k = int(rng.integers(2, 5))
    d = int(rng.integers(3, 6))
    in_dim = d + 3
    model = TransportMIL(in_dim, latent_dim=d, n_tokens=k, seed=int(rng.integers(2 ** 31)))
    events = rng.uniform(size=3) < 0.7
    events[0] = True
    times = rng.uniform(0.5, 5.0, size=3)
    times[0] = times[1:].min() - 0.25
    bags = [Bag(features=rng.normal(size=(int(rng.integers(4, 13)), in_dim)), time=float(times[i]),
                event=bool(events[i]), bag_id=f"check{i}") for i in range(3)]
    return model, bags


def batch_loss(model: TransportMIL, bags: list, rho: float, solver_cfg: SolverConfig) -> torch.Tensor:
    risks = torch.stack([forward(bag, model, rho, solver_cfg).risk for bag in bags])
    return cox_loss(risks, [bag.time for bag in bags], [bag.event for bag in bags])


def gradient_check_suite(n_batches: int = 10, seed: int = 0, rho: float = 0.6, rel_tol: float = 1e-4,
                         h: float = 1e-5) -> SuiteResult:
    """
    Compare backward() with central differences of the batch Cox loss over all parameters.

    The solver runs to tol 1e-12, so the unrolled gradient and the differences of converged
    solutions describe the same function.
    """
    rng = np.random.default_rng(seed)
    solver_cfg = SolverConfig(tol=1e-12, max_iter=100000)
    result = SuiteResult(name="gradient-check")
    start = time.perf_counter()
    for index in range(n_batches):
        model, bags = random_batch(rng)
        gradients = backward(batch_loss(model, bags, rho, solver_cfg), model)
        analytic = torch.cat([gradients[name].reshape(-1) for name, _ in model.named_parameters()]).numpy()

        probe = TransportMIL(model.in_dim, model.latent_dim, model.n_tokens)

        def loss_at(vector):
            load_parameter_vector(probe, vector)
            with torch.no_grad():
                return batch_loss(probe, bags, rho, solver_cfg).item()

        numeric = finite_diff_gradient(loss_at, parameter_vector(model), h=h)
        scale = max(float(np.max(np.abs(numeric))), 1e-8)
        error = float(np.max(np.abs(analytic - numeric))) / scale
        passed = error <= rel_tol
        result.cases.append(CaseResult(index=index, passed=passed,
                                       detail={"parameters": analytic.size, "relative_error": error}))
        logger.debug(f"gradient case {index}: {analytic.size} parameters, relative error {error:.3e}")
    result.elapsed = time.perf_counter() - start
    return result
