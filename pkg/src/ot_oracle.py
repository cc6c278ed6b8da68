"""
Slow reference solvers used to cross-check the scaling solver and the model gradients.

The transport oracle minimises the same entropic objective as src.ot_core by exponentiated-gradient
(mirror) descent over the rows of the augmented plan. Each row lives on the simplex scaled by 1/N,
and every step ends with the exact KL projection that also pins the virtual column to its target
1 - rho, so the oracle works in the infinite-iota limit. Nothing here shares the a/b fixed-point
structure of the scaling iterations.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.optimize import brentq
from scipy.special import log_expit, logit, logsumexp

from src.ot_core import AugmentedProblem, TransportPlan, entropic_objective

logger = logging.getLogger(__name__)

MAX_ORACLE_INSTANCES = 16
MAX_ORACLE_TOKENS = 8


class OracleDivergenceError(RuntimeError):
    """The oracle objective went up across a checkpoint window."""


@dataclass(frozen=True)
class OracleConfig:
    """
    settings of the mirror-descent oracle.

    Attributes:
        iterations (int): maximum number of mirror steps.
        step (float, optional): initial step size. defaults to 1 / (epsilon + kl_weight), the
            inverse relative-smoothness constant of the objective.
        seed (int): seed of the random feasible starting plan.
        checkpoint_every (int): window length of the monotonicity check.
        stop_change (float): stop once no log-plan entry moves more than this.
    """
    iterations: int = 200000
    step: Optional[float] = None
    seed: int = 0
    checkpoint_every: int = 1000
    stop_change: float = 1e-13

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError(f"iterations must be at least 1, got {self.iterations}")
        if self.step is not None and self.step <= 0:
            raise ValueError(f"step must be positive, got {self.step}")


def oracle_solve(aug: AugmentedProblem, epsilon: float, cfg: OracleConfig = OracleConfig()) -> TransportPlan:
    """
    Minimise the entropic objective by mirror descent with step_t = step / (1 + t/10000).

    Args:
        aug (AugmentedProblem): problem at oracle scale (N <= 16, K <= 8).
        epsilon (float): entropic regularisation.
        cfg (OracleConfig): oracle settings.

    Returns:
        TransportPlan: the iterate with the lowest objective.

    Raises:
        OracleDivergenceError: the objective failed to decrease over a checkpoint window.
    """
    n, k = aug.n_instances, aug.n_tokens
    if n > MAX_ORACLE_INSTANCES or k > MAX_ORACLE_TOKENS:
        raise ValueError(f"oracle handles N <= {MAX_ORACLE_INSTANCES}, K <= {MAX_ORACLE_TOKENS}; got N={n}, K={k}")
    token_weights = aug.lambda_hat[:-1]
    if np.any(token_weights >= aug.lambda_hat[-1]):
        raise ValueError("oracle handles finite token KL weights only (kl_weight < iota)")

    step0 = cfg.step if cfg.step is not None else 1.0 / (epsilon + float(token_weights.max()))
    rng = np.random.default_rng(cfg.seed)
    log_q = _project(np.log(rng.uniform(0.5, 1.5, size=aug.cost_hat.shape)), aug)

    objective = _objective(log_q, aug, epsilon)
    best_objective, best_log_q = objective, log_q
    checkpoint_objective = objective
    iterations = 0

    for t in range(cfg.iterations):
        marginal = np.exp(log_q).sum(axis=0)
        gradient = aug.cost_hat + epsilon * log_q
        # the sink penalty depends on the sink total only, which the projection keeps fixed
        gradient[:, :-1] += token_weights * np.log(marginal[:-1] / aug.beta[:-1])

        step = step0 / (1.0 + t / 10000.0)
        updated = _project(log_q - step * gradient, aug)
        change = float(np.max(np.abs(updated - log_q)))
        log_q = updated
        iterations = t + 1

        objective = _objective(log_q, aug, epsilon)
        if objective < best_objective:
            best_objective, best_log_q = objective, log_q

        if iterations % cfg.checkpoint_every == 0:
            logger.debug(f"oracle checkpoint t={iterations} objective={objective:.15g}")
            if objective > checkpoint_objective + 1e-12 * max(1.0, abs(checkpoint_objective)):
                raise OracleDivergenceError(
                    f"objective rose from {checkpoint_objective:.15g} to {objective:.15g} "
                    f"over iterations {iterations - cfg.checkpoint_every}..{iterations}; step {step0} too large")
            checkpoint_objective = objective

        if change < cfg.stop_change:
            break

    return _plan(best_log_q, aug, iterations)


def _project(log_q: np.ndarray, aug: AugmentedProblem) -> np.ndarray:
    """
    KL projection onto {rows sum to alpha, virtual column sums to beta_sink}.

    The minimiser rescales each row and the virtual column: Q_ij = Q~_ij exp(u_i + t [j = sink]).
    The row factors follow from the row constraint; t is the root of a monotone scalar equation.
    """
    log_real = logsumexp(log_q[:, :-1], axis=1)
    offset = log_q[:, -1] - log_real
    sink_target = aug.beta[-1]

    def sink_excess(t: float) -> float:
        return float(np.sum(aug.alpha * np.exp(log_expit(offset + t)))) - sink_target

    centre = float(logit(sink_target))
    t = brentq(sink_excess, centre - offset.max() - 1.0, centre - offset.min() + 1.0,
               xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)

    log_alpha = np.log(aug.alpha)[:, None]
    projected = np.empty_like(log_q)
    projected[:, :-1] = log_alpha + log_q[:, :-1] - log_real[:, None] + log_expit(-(offset + t))[:, None]
    projected[:, -1] = log_alpha[:, 0] + log_expit(offset + t)
    return projected


def _plan(log_q: np.ndarray, aug: AugmentedProblem, iterations: int) -> TransportPlan:
    q_hat = np.exp(log_q)
    residual = float(np.max(np.abs(q_hat.sum(axis=1) - aug.alpha)))
    return TransportPlan(mass=q_hat[:, :-1], sink_mass=q_hat[:, -1], iterations=iterations,
                         residual=residual, rho=aug.rho, log_domain=True)


def _objective(log_q: np.ndarray, aug: AugmentedProblem, epsilon: float) -> float:
    return entropic_objective(_plan(log_q, aug, 0), aug, epsilon)


def finite_diff_gradient(f: Callable[[np.ndarray], float], point, h: float = 1e-5) -> np.ndarray:
    """
    Central-difference gradient of a scalar function.

    Args:
        f (Callable): scalar function of a parameter vector.
        point: where to differentiate.
        h (float): step, in [1e-6, 1e-3].

    Returns:
        np.ndarray: (f(x + h e_i) - f(x - h e_i)) / (2h) for every coordinate, shaped like `point`.
    """
    if not 1e-6 <= h <= 1e-3:
        raise ValueError(f"h must lie in [1e-6, 1e-3], got {h}")
    point = np.atleast_1d(np.asarray(point, dtype=np.float64))
    flat = point.reshape(-1)
    gradient = np.empty_like(flat)
    for i in range(flat.size):
        forward = flat.copy()
        backward = flat.copy()
        forward[i] += h
        backward[i] -= h
        upper = np.asarray(f(forward.reshape(point.shape))).item()
        lower = np.asarray(f(backward.reshape(point.shape))).item()
        gradient[i] = (upper - lower) / (2.0 * h)
    return gradient.reshape(point.shape)
