"""
Heterogeneity-aware optimal transport.

Instances (rows) are transported onto K survival tokens (columns). Every row ships exactly 1/N of
mass, only a fraction rho of the total reaches the real tokens, and the token marginal is pulled
towards a uniform target through a weighted KL penalty. The problem is solved by adding a virtual
zero-cost token that absorbs the 1 - rho unselected mass and running alternating matrix scaling on
the augmented (N, K+1) problem.
"""

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import entr, kl_div, logsumexp, rel_entr

logger = logging.getLogger(__name__)

DEFAULT_IOTA = 1e8
SINK_FLOOR = 1e-12
LOG_DOMAIN_THRESHOLD = 500.0


class TransportError(RuntimeError):
    """Base class for failures of the scaling solver."""


class KernelUnderflowError(TransportError):
    """exp(-C/epsilon) lost a whole row or column to underflow."""


class ConvergenceError(TransportError):
    """The scaling iterations stopped at max_iter with an unacceptable residual."""


def _frozen(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class OtProblem:
    """
    a single heterogeneity-aware OT instance.

    Attributes:
        cost (np.ndarray): (N, K) nonnegative cost matrix.
        rho (float): fraction of the total mass routed to the real tokens, in (0, 1].
        kl_weight (float): weight of the KL penalty on the token marginal.
        epsilon (float): entropic regularisation of the scaling solver.
        iota (float): finite stand-in for the infinite KL weight of the virtual token.
        token_prior (np.ndarray, optional): target shape of the K real-token marginal.
            uniform when omitted.
    """
    cost: np.ndarray
    rho: float = 1.0
    kl_weight: float = 0.1
    epsilon: float = 0.05
    iota: float = DEFAULT_IOTA
    token_prior: Optional[np.ndarray] = None

    def __post_init__(self):
        cost = np.array(self.cost, dtype=np.float64)
        if cost.ndim != 2 or cost.shape[0] == 0 or cost.shape[1] == 0:
            raise ValueError(f"cost must be a non-empty 2-D matrix, got shape {cost.shape}")
        if not np.all(np.isfinite(cost)):
            raise ValueError("cost matrix contains non-finite entries")
        if np.any(cost < 0):
            raise ValueError("cost matrix entries must be nonnegative")
        if not 0.0 < self.rho <= 1.0:
            raise ValueError(f"rho must lie in (0, 1], got {self.rho}")
        if self.kl_weight <= 0:
            raise ValueError(f"kl_weight must be positive, got {self.kl_weight}")
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        # the sink is either far stiffer than the tokens, or as stiff (equality limit)
        if self.kl_weight != self.iota and self.iota < 1e6 * self.kl_weight:
            raise ValueError(f"iota={self.iota} must be at least 1e6 * kl_weight={self.kl_weight}")
        object.__setattr__(self, "cost", _frozen(cost))

        if self.token_prior is not None:
            prior = np.array(self.token_prior, dtype=np.float64).reshape(-1)
            if prior.shape[0] != cost.shape[1]:
                raise ValueError(f"token_prior has {prior.shape[0]} entries for {cost.shape[1]} tokens")
            if not np.all(np.isfinite(prior)) or np.any(prior <= 0):
                raise ValueError("token_prior entries must be finite and positive")
            object.__setattr__(self, "token_prior", _frozen(prior / prior.sum()))

    @classmethod
    def equality_limit(cls, cost, rho: float = 1.0, epsilon: float = 0.05,
                       iota: float = DEFAULT_IOTA) -> "OtProblem":
        """Problem whose token marginal is enforced as hard as the sink (balanced behaviour)."""
        return cls(cost=cost, rho=rho, kl_weight=iota, epsilon=epsilon, iota=iota)

    @property
    def n_instances(self) -> int:
        return self.cost.shape[0]

    @property
    def n_tokens(self) -> int:
        return self.cost.shape[1]


@dataclass(frozen=True)
class AugmentedProblem:
    """
    the (N, K+1) unbalanced problem with a virtual token in the last column.

    Attributes:
        cost_hat (np.ndarray): [C, 0_N].
        beta (np.ndarray): column targets [rho/K * 1_K, 1 - rho].
        lambda_hat (np.ndarray): column KL weights [kl_weight * 1_K, iota].
        alpha (np.ndarray): row marginal 1/N * 1_N.
        rho (float): mass ratio the problem was built with.
    """
    cost_hat: np.ndarray
    beta: np.ndarray
    lambda_hat: np.ndarray
    alpha: np.ndarray
    rho: float

    @property
    def n_instances(self) -> int:
        return self.cost_hat.shape[0]

    @property
    def n_tokens(self) -> int:
        return self.cost_hat.shape[1] - 1

    def shifted(self, constant: float) -> "AugmentedProblem":
        """Copy with `constant` added to every entry of cost_hat, virtual column included."""
        return AugmentedProblem(cost_hat=_frozen(self.cost_hat + constant), beta=self.beta,
                                lambda_hat=self.lambda_hat, alpha=self.alpha, rho=self.rho)


@dataclass(frozen=True)
class TransportPlan:
    """
    solver output.

    Attributes:
        mass (np.ndarray): (N, K) mass sent to the real tokens.
        sink_mass (np.ndarray): (N,) mass absorbed by the virtual token.
        iterations (int): number of scaling sweeps performed.
        residual (float): final row-marginal residual max|row_sum - 1/N|.
        rho (float): mass ratio of the problem that produced the plan.
        log_domain (bool): whether the log-domain iterations were used.
        converged (bool): whether the stopping tolerance was met before max_iter.
    """
    mass: np.ndarray
    sink_mass: np.ndarray
    iterations: int
    residual: float
    rho: float
    log_domain: bool = False
    converged: bool = True

    @property
    def full(self) -> np.ndarray:
        """The augmented plan [mass | sink_mass]."""
        return np.column_stack([self.mass, self.sink_mass])

    @property
    def n_instances(self) -> int:
        return self.mass.shape[0]

    @property
    def n_tokens(self) -> int:
        return self.mass.shape[1]


def build_augmented(problem: OtProblem) -> AugmentedProblem:
    """
    Append the virtual token to a heterogeneity-aware OT problem.

    Args:
        problem (OtProblem): validated problem.

    Returns:
        AugmentedProblem: cost, targets, KL weights and row marginal of the augmented problem.
    """
    n, k = problem.cost.shape
    cost_hat = np.zeros((n, k + 1), dtype=np.float64)
    cost_hat[:, :k] = problem.cost

    if problem.token_prior is None:
        token_target = np.full(k, problem.rho / k)
    else:
        token_target = problem.rho * problem.token_prior
    # rho == 1 would leave a zero target on the sink; keep it strictly positive
    beta = np.append(token_target, max(1.0 - problem.rho, SINK_FLOOR))

    lambda_hat = np.append(np.full(k, float(problem.kl_weight)), float(problem.iota))
    alpha = np.full(n, 1.0 / n)
    return AugmentedProblem(cost_hat=_frozen(cost_hat), beta=_frozen(beta),
                            lambda_hat=_frozen(lambda_hat), alpha=_frozen(alpha), rho=float(problem.rho))


def weighted_kl(marginal, beta, lambda_hat) -> float:
    """
    Weighted KL divergence sum_i lambda_i * m_i * log(m_i / beta_i), with 0 * log 0 = 0.

    Args:
        marginal: nonnegative column marginal.
        beta: positive target of the same length.
        lambda_hat: per-entry weights.

    Returns:
        float: the divergence.
    """
    marginal = np.asarray(marginal, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    lambda_hat = np.asarray(lambda_hat, dtype=np.float64)
    if marginal.shape != beta.shape or lambda_hat.shape != beta.shape:
        raise ValueError(f"shape mismatch: marginal {marginal.shape}, beta {beta.shape}, "
                         f"lambda_hat {lambda_hat.shape}")
    if np.any(beta <= 0):
        raise ValueError("beta entries must be strictly positive")
    if np.any(marginal < 0):
        raise ValueError("marginal entries must be nonnegative")
    return float(np.sum(lambda_hat * rel_entr(marginal, beta)))


class Scaler(ABC):
    """
    Alternating a/b scaling updates against the Gibbs kernel.

    Subclasses hold the two scaling vectors in their own representation and must implement
    'update_a', 'update_b' and 'plan'.
    """

    @abstractmethod
    def update_a(self) -> None:
        """Rescale rows so that the current plan meets the row marginal exactly."""
        pass

    @abstractmethod
    def update_b(self) -> float:
        """
        Rescale columns towards the softened column targets.

        Returns:
            float: change of b used as the stopping criterion.
        """
        pass

    @abstractmethod
    def plan(self) -> np.ndarray:
        """Return diag(a) M diag(b)."""
        pass


@dataclass
class ScalingState(Scaler):
    """
    scaling iterates in the standard domain.

    Attributes:
        a (np.ndarray): (N,) row scaling.
        b (np.ndarray): (K+1,) column scaling.
        kernel (np.ndarray): M = exp(-C_hat / epsilon).
        exponent (np.ndarray): f = lambda_hat / (lambda_hat + epsilon).
        alpha (np.ndarray): row marginal.
        beta (np.ndarray): column targets.
    """
    a: np.ndarray
    b: np.ndarray
    kernel: np.ndarray
    exponent: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray

    @classmethod
    def initial(cls, aug: AugmentedProblem, epsilon: float) -> "ScalingState":
        if kernel_underflows(aug, epsilon):
            raise KernelUnderflowError(
                f"exp(-C/epsilon) underflows to an all-zero row or column at epsilon={epsilon}; "
                "raise epsilon or use log-domain mode")
        return cls(a=np.ones(aug.n_instances), b=np.ones(aug.n_tokens + 1),
                   kernel=np.exp(-aug.cost_hat / epsilon), exponent=_exponent(aug, epsilon),
                   alpha=aug.alpha, beta=aug.beta)

    def update_a(self) -> None:
        self.a = self.alpha / (self.kernel @ self.b)

    def update_b(self) -> float:
        previous = self.b
        self.b = (self.beta / (self.kernel.T @ self.a)) ** self.exponent
        if not (np.all(np.isfinite(self.b)) and np.all(self.b > 0) and np.all(np.isfinite(self.a))):
            raise KernelUnderflowError("scaling vectors left the positive finite range; "
                                       "raise epsilon or use log-domain mode")
        return float(np.max(np.abs(self.b - previous)) / np.max(np.abs(previous)))

    def plan(self) -> np.ndarray:
        return self.a[:, None] * self.kernel * self.b[None, :]


@dataclass
class LogScalingState(Scaler):
    """Scaling iterates stored as log a, log b with logsumexp reductions."""
    log_a: np.ndarray
    log_b: np.ndarray
    log_kernel: np.ndarray
    exponent: np.ndarray
    log_alpha: np.ndarray
    log_beta: np.ndarray

    @classmethod
    def initial(cls, aug: AugmentedProblem, epsilon: float) -> "LogScalingState":
        return cls(log_a=np.zeros(aug.n_instances), log_b=np.zeros(aug.n_tokens + 1),
                   log_kernel=-aug.cost_hat / epsilon, exponent=_exponent(aug, epsilon),
                   log_alpha=np.log(aug.alpha), log_beta=np.log(aug.beta))

    def update_a(self) -> None:
        self.log_a = self.log_alpha - logsumexp(self.log_kernel + self.log_b[None, :], axis=1)

    def update_b(self) -> float:
        previous = self.log_b
        self.log_b = self.exponent * (self.log_beta - logsumexp(self.log_kernel + self.log_a[:, None], axis=0))
        return float(np.max(np.abs(self.log_b - previous)))

    def plan(self) -> np.ndarray:
        return np.exp(self.log_a[:, None] + self.log_kernel + self.log_b[None, :])


def _exponent(aug: AugmentedProblem, epsilon: float) -> np.ndarray:
    exponent = aug.lambda_hat / (aug.lambda_hat + epsilon)
    if exponent[-1] < 1.0 - 1e-6:
        raise ValueError(f"sink exponent {exponent[-1]} too far from 1; iota is too small for epsilon={epsilon}")
    return exponent


def needs_log_domain(aug: AugmentedProblem, epsilon: float) -> bool:
    """True when the real-token kernel entries are all close to underflow."""
    return float(np.min(aug.cost_hat[:, :-1])) / epsilon > LOG_DOMAIN_THRESHOLD


def kernel_underflows(aug: AugmentedProblem, epsilon: float) -> bool:
    """True when exp(-C_hat/epsilon) has an all-zero row or column."""
    kernel = np.exp(-aug.cost_hat / epsilon)
    return bool(np.any(~kernel.any(axis=1)) or np.any(~kernel.any(axis=0)))


def scaling_solve(aug: AugmentedProblem, epsilon: float, tol: float = 1e-8, max_iter: int = 5000,
                  log_domain: Optional[bool] = None) -> TransportPlan:
    """
    Run the scaling algorithm on an augmented problem.

    Iterates a <- alpha / (M b), b <- (beta / (M^T a))^f until the relative change of b falls below
    `tol` (absolute change of log b in log-domain mode) or `max_iter` sweeps are done.

    Args:
        aug (AugmentedProblem): problem from build_augmented.
        epsilon (float): entropic regularisation.
        tol (float): stopping tolerance, > 0.
        max_iter (int): maximum number of sweeps, >= 1.
        log_domain (bool, optional): force or forbid log-domain iterations. chosen automatically
            from min(C)/epsilon when None.

    Returns:
        TransportPlan: first K columns as mass, the virtual column as sink_mass.

    Raises:
        KernelUnderflowError: the kernel lost a row or column to underflow with log_domain=False.
            in automatic mode the solve is retried in the log domain instead.
        ConvergenceError: max_iter reached with a row residual above 100 * tol.
    """
    if tol <= 0:
        raise ValueError(f"tol must be positive, got {tol}")
    if max_iter < 1:
        raise ValueError(f"max_iter must be at least 1, got {max_iter}")
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")

    automatic = log_domain is None
    if automatic:
        log_domain = needs_log_domain(aug, epsilon)
        if log_domain:
            logger.warning(f"min(C)/epsilon exceeds {LOG_DOMAIN_THRESHOLD}; switching to log-domain scaling")

    try:
        state, sweeps, converged = _iterate(
            (LogScalingState if log_domain else ScalingState).initial(aug, epsilon), tol, max_iter)
    except KernelUnderflowError as e:
        if not automatic or log_domain:
            raise
        logger.warning(f"{e}; retrying in log-domain")
        log_domain = True
        state, sweeps, converged = _iterate(LogScalingState.initial(aug, epsilon), tol, max_iter)

    q_hat = state.plan()
    residual = float(np.max(np.abs(q_hat.sum(axis=1) - aug.alpha)))
    if not converged and residual > 100 * tol:
        raise ConvergenceError(f"scaling did not converge in {max_iter} sweeps "
                               f"(row residual {residual:.3e} > {100 * tol:.1e})")

    logger.debug(f"scaling solve: N={aug.n_instances} K={aug.n_tokens} sweeps={sweeps} "
                 f"residual={residual:.3e} converged={converged} log_domain={log_domain}")
    return TransportPlan(mass=q_hat[:, :-1], sink_mass=q_hat[:, -1], iterations=sweeps,
                         residual=residual, rho=aug.rho, log_domain=bool(log_domain), converged=converged)


def _iterate(state: Scaler, tol: float, max_iter: int) -> tuple[Scaler, int, bool]:
    sweeps = 0
    while sweeps < max_iter:
        sweeps += 1
        state.update_a()
        if state.update_b() < tol:
            return state, sweeps, True
    return state, sweeps, False


def solve_heterogeneity_ot(problem: OtProblem, tol: float = 1e-8, max_iter: int = 5000,
                           log_domain: Optional[bool] = None) -> TransportPlan:
    """
    Solve a heterogeneity-aware OT problem through its virtual-token reformulation.

    Returns:
        TransportPlan: plan whose rows ship at most 1/N to the real tokens and whose real-token
            mass totals rho.
    """
    return scaling_solve(build_augmented(problem), problem.epsilon, tol=tol, max_iter=max_iter,
                         log_domain=log_domain)


def solve_semi_relaxed(cost, kl_weight: float = 0.1, epsilon: float = 0.05, tol: float = 1e-8,
                       max_iter: int = 5000, iota: float = DEFAULT_IOTA) -> TransportPlan:
    """Semi-relaxed OT: hard row marginal, KL-softened token marginal, all mass selected."""
    problem = OtProblem(cost=cost, rho=1.0, kl_weight=kl_weight, epsilon=epsilon, iota=iota)
    return solve_heterogeneity_ot(problem, tol=tol, max_iter=max_iter)


def entropic_objective(plan: TransportPlan, aug: AugmentedProblem, epsilon: float) -> float:
    """
    Objective minimised by the scaling iterations.

    <Q_hat, C_hat> + sum_j lambda_j * (m_j log(m_j/beta_j) - m_j + beta_j) + epsilon * sum Q_hat (log Q_hat - 1),
    i.e. weighted_kl plus the mass-deviation term sum_j lambda_j (beta_j - m_j).

    Args:
        plan (TransportPlan): plan to evaluate.
        aug (AugmentedProblem): problem it belongs to.
        epsilon (float): entropic regularisation.

    Returns:
        float: the objective value.
    """
    q_hat = plan.full
    if q_hat.shape != aug.cost_hat.shape:
        raise ValueError(f"plan shape {q_hat.shape} does not match problem shape {aug.cost_hat.shape}")
    marginal = q_hat.sum(axis=0)
    transport = float(np.sum(q_hat * aug.cost_hat))
    divergence = float(np.sum(aug.lambda_hat * kl_div(marginal, aug.beta)))
    neg_entropy = float(-np.sum(entr(q_hat)) - np.sum(q_hat))
    return transport + divergence + epsilon * neg_entropy


def marginal_residuals(plan: TransportPlan) -> tuple[float, float]:
    """
    Feasibility residuals of a plan.

    Returns:
        tuple[float, float]: (max_i |sum_j Q_hat_ij - 1/N|, |sum mass - rho|).
    """
    n = plan.n_instances
    row_residual = float(np.max(np.abs(plan.full.sum(axis=1) - 1.0 / n)))
    mass_residual = float(abs(plan.mass.sum() - plan.rho))
    return row_residual, mass_residual
