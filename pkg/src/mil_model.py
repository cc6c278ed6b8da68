"""
Multiple-instance survival model with transport-based aggregation.

A bag of instance features F (N, D) is projected to Z (N, d), compared against K learnable survival
tokens through a normalised Euclidean cost, aligned to the tokens by the heterogeneity-aware
transport layer, pooled to a slide embedding E = f_agg(Q^T Z) and mapped to a scalar risk. All
operations, the scaling sweeps included, are torch operations, so gradients reach every parameter
through the unrolled solver.
"""

import io
import json
import logging
import math
import zipfile
import zlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from src.ot_core import (DEFAULT_IOTA, ConvergenceError, KernelUnderflowError, OtProblem, TransportError,
                         TransportPlan, build_augmented, kernel_underflows, needs_log_domain)

logger = logging.getLogger(__name__)

DTYPE = torch.float64
CHECKPOINT_FORMAT = "otmil-checkpoint"
CHECKPOINT_VERSION = 1
PARAMETER_DIMS = {
    "proj.weight": ["latent", "feature"],
    "proj.bias": ["latent"],
    "tokens": ["token", "latent"],
    "agg.weight": ["output", "token"],
    "agg.bias": ["output"],
    "pred.weight": ["output", "latent"],
    "pred.bias": ["output"],
}


class NonFiniteGradientError(FloatingPointError):
    """A backward pass produced NaN or infinite gradient entries."""


@dataclass(frozen=True)
class Bag:
    """
    one patient: instance features plus the survival label.

    Attributes:
        features (np.ndarray): (N, D) frozen instance embeddings.
        time (float): survival or censoring time, > 0.
        event (bool): True when the event was observed, False when censored.
        bag_id (str): identifier of the bag.
        instance_ids (tuple[str, ...]): identifiers of the N instances.
    """
    features: np.ndarray
    time: float
    event: bool
    bag_id: str = "bag"
    instance_ids: tuple = ()

    def __post_init__(self):
        features = np.array(self.features, dtype=np.float64)
        if features.ndim != 2 or features.shape[0] < 1:
            raise ValueError(f"bag {self.bag_id}: features must be an (N, D) matrix with N >= 1, got {features.shape}")
        if not np.all(np.isfinite(features)):
            raise ValueError(f"bag {self.bag_id}: features contain non-finite values")
        if not self.time > 0:
            raise ValueError(f"bag {self.bag_id}: time must be positive, got {self.time}")
        features.setflags(write=False)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "time", float(self.time))
        object.__setattr__(self, "event", bool(self.event))
        ids = tuple(self.instance_ids) or tuple(f"{self.bag_id}/{i}" for i in range(features.shape[0]))
        if len(ids) != features.shape[0]:
            raise ValueError(f"bag {self.bag_id}: {len(ids)} instance ids for {features.shape[0]} instances")
        object.__setattr__(self, "instance_ids", ids)

    @property
    def n_instances(self) -> int:
        return self.features.shape[0]


@dataclass(frozen=True)
class SolverConfig:
    """
    settings of the transport layer.

    Attributes:
        kl_weight (float): KL weight lambda of the token marginal.
        epsilon (float): entropic regularisation.
        iota (float): stand-in for the infinite weight of the virtual token.
        tol (float): stopping tolerance on the change of b.
        max_iter (int): maximum number of scaling sweeps.
        global_constraint (str): 'kl' for the softened token marginal, 'equality' for the
            balanced limit kl_weight = iota.
        log_domain (bool, optional): force log-domain sweeps; automatic when None.
        token_prior (tuple, optional): relative sizes of the K token marginals; uniform when None.
    """
    kl_weight: float = 0.1
    epsilon: float = 0.05
    iota: float = DEFAULT_IOTA
    tol: float = 1e-8
    max_iter: int = 5000
    global_constraint: str = "kl"
    log_domain: Optional[bool] = None
    token_prior: Optional[tuple] = None

    def __post_init__(self):
        if self.global_constraint not in ("kl", "equality"):
            raise ValueError(f"global_constraint must be 'kl' or 'equality', got {self.global_constraint!r}")

    def problem(self, cost: np.ndarray, rho: float) -> OtProblem:
        kl_weight = self.iota if self.global_constraint == "equality" else self.kl_weight
        return OtProblem(cost=cost, rho=rho, kl_weight=kl_weight, epsilon=self.epsilon, iota=self.iota,
                         token_prior=self.token_prior)


class TransportMIL(nn.Module):
    """
    model parameters: projection f_proj, survival tokens S, token aggregation f_agg and risk head f_pred.

    Attributes:
        proj (nn.Module): linear D -> d projection, or identity when projection is disabled.
        tokens (nn.Parameter): (K, d) survival tokens.
        agg (nn.Linear): K -> 1 token weights W_agg plus bias.
        pred (nn.Linear): d -> 1 risk head.
    """

    def __init__(self, in_dim: int, latent_dim: int = 256, n_tokens: int = 16,
                 use_projection: bool = True, seed: int = 0):
        super().__init__()
        if use_projection and latent_dim > in_dim:
            raise ValueError(f"latent_dim={latent_dim} must not exceed the feature dimension {in_dim}")
        if n_tokens < 1:
            raise ValueError(f"n_tokens must be at least 1, got {n_tokens}")
        if not use_projection:
            latent_dim = in_dim
        self.in_dim = in_dim
        self.latent_dim = latent_dim
        self.n_tokens = n_tokens
        self.use_projection = use_projection

        self.proj = nn.Linear(in_dim, latent_dim, dtype=DTYPE) if use_projection else nn.Identity()
        self.tokens = nn.Parameter(torch.empty(n_tokens, latent_dim, dtype=DTYPE))
        self.agg = nn.Linear(n_tokens, 1, dtype=DTYPE)
        self.pred = nn.Linear(latent_dim, 1, dtype=DTYPE)
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int) -> None:
        """
        Centered uniform init scaled by 1/sqrt(fan_in) for the linear layers, unit-norm Gaussian tokens.
        """
        generator = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            layers = [self.agg, self.pred] + ([self.proj] if self.use_projection else [])
            for layer in layers:
                bound = 1.0 / math.sqrt(layer.in_features)
                layer.weight.uniform_(-bound, bound, generator=generator)
                layer.bias.uniform_(-bound, bound, generator=generator)
            tokens = torch.randn(self.n_tokens, self.latent_dim, generator=generator, dtype=DTYPE)
            self.tokens.copy_(F.normalize(tokens, dim=1))

    @property
    def agg_weight(self) -> np.ndarray:
        return self.agg.weight.detach().numpy().reshape(-1).copy()


@dataclass
class ScalingTrace:
    """Iterates of the unrolled scaling sweeps (log a, log b in log-domain mode)."""
    a_iterates: list = field(default_factory=list)
    b_iterates: list = field(default_factory=list)
    sweeps: int = 0
    residual: float = 0.0
    log_domain: bool = False
    converged: bool = True


@dataclass
class ForwardTrace:
    """
    intermediates of one forward pass, kept alive for the backward pass.

    Attributes:
        instance_index (np.ndarray): rows of the bag that entered the pass (after subsampling).
        z (torch.Tensor): projected instances.
        cost (torch.Tensor): instance-token cost matrix.
        scaling (ScalingTrace): scaling iterates.
        mass (torch.Tensor): (N, K) transport mass on the real tokens.
        embedding (torch.Tensor): aggregated slide embedding E.
    """
    instance_index: np.ndarray
    z: torch.Tensor
    cost: torch.Tensor
    scaling: ScalingTrace
    mass: torch.Tensor
    embedding: torch.Tensor


@dataclass
class ForwardResult:
    risk: torch.Tensor
    plan: TransportPlan
    trace: ForwardTrace
    instance_ids: tuple


def project(features, model: TransportMIL) -> torch.Tensor:
    """Z = features @ proj_weight^T + bias, row by row."""
    features = torch.as_tensor(features, dtype=DTYPE)
    if features.ndim != 2 or features.shape[1] != model.in_dim:
        raise ValueError(f"features of shape {tuple(features.shape)} do not match in_dim={model.in_dim}")
    return model.proj(features)


def cost_matrix(z: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
    """
    Normalised Euclidean cost.

    Rows of z and tokens are scaled to unit L2 norm (zero rows stay zero) and C_ij = ||z_i - s_j||_2,
    which keeps every entry in [0, 2].

    Args:
        z (torch.Tensor): (N, d) instance embeddings.
        tokens (torch.Tensor): (K, d) survival tokens.

    Returns:
        torch.Tensor: (N, K) cost matrix.
    """
    if z.shape[1] != tokens.shape[1]:
        raise ValueError(f"embedding width {z.shape[1]} does not match token width {tokens.shape[1]}")
    z_hat = F.normalize(z, dim=1)
    s_hat = F.normalize(tokens, dim=1)
    distance = torch.linalg.vector_norm(z_hat[:, None, :] - s_hat[None, :, :], dim=-1)
    return distance.clamp(max=2.0)


def unrolled_scaling(cost: torch.Tensor, rho: float, solver_cfg: SolverConfig) -> tuple[torch.Tensor, ScalingTrace]:
    """
    Differentiable scaling sweeps on the virtual-token problem.

    Marginals and weights come from src.ot_core.build_augmented; the sweeps and the stopping rule
    are the same as src.ot_core.scaling_solve, recorded as torch operations.

    Returns:
        tuple[torch.Tensor, ScalingTrace]: the (N, K+1) plan and the recorded iterates.
    """
    aug = build_augmented(solver_cfg.problem(cost.detach().numpy(), rho))
    epsilon = solver_cfg.epsilon
    alpha = torch.tensor(aug.alpha, dtype=DTYPE)
    beta = torch.tensor(aug.beta, dtype=DTYPE)
    lambda_hat = torch.tensor(aug.lambda_hat, dtype=DTYPE)
    exponent = lambda_hat / (lambda_hat + epsilon)
    cost_hat = torch.cat([cost, cost.new_zeros(cost.shape[0], 1)], dim=1)

    log_domain = solver_cfg.log_domain
    if log_domain is None:
        log_domain = needs_log_domain(aug, epsilon) or kernel_underflows(aug, epsilon)
    trace = ScalingTrace(log_domain=bool(log_domain))

    converged = False
    if log_domain:
        log_kernel = -cost_hat / epsilon
        log_alpha, log_beta = torch.log(alpha), torch.log(beta)
        log_b = torch.zeros_like(beta)
        while trace.sweeps < solver_cfg.max_iter:
            trace.sweeps += 1
            log_a = log_alpha - torch.logsumexp(log_kernel + log_b[None, :], dim=1)
            previous = log_b
            log_b = exponent * (log_beta - torch.logsumexp(log_kernel + log_a[:, None], dim=0))
            trace.a_iterates.append(log_a)
            trace.b_iterates.append(log_b)
            if (log_b - previous).abs().max().item() < solver_cfg.tol:
                converged = True
                break
        q_hat = torch.exp(log_a[:, None] + log_kernel + log_b[None, :])
    else:
        kernel = torch.exp(-cost_hat / epsilon)
        if not bool((kernel > 0).any(dim=1).all()) or not bool((kernel > 0).any(dim=0).all()):
            raise KernelUnderflowError(
                f"exp(-C/epsilon) underflows to an all-zero row or column at epsilon={epsilon}; "
                "raise epsilon or use log-domain mode")
        b = torch.ones_like(beta)
        while trace.sweeps < solver_cfg.max_iter:
            trace.sweeps += 1
            a = alpha / (kernel @ b)
            previous = b
            b = (beta / (kernel.T @ a)) ** exponent
            trace.a_iterates.append(a)
            trace.b_iterates.append(b)
            if ((b - previous).abs().max() / previous.abs().max()).item() < solver_cfg.tol:
                converged = True
                break
        q_hat = a[:, None] * kernel * b[None, :]

    trace.residual = float((q_hat.detach().sum(dim=1) - alpha).abs().max())
    trace.converged = converged
    if not converged and trace.residual > 100 * solver_cfg.tol:
        raise ConvergenceError(f"scaling did not converge in {solver_cfg.max_iter} sweeps "
                               f"(row residual {trace.residual:.3e})")
    return q_hat, trace


def aggregate(mass: torch.Tensor, z: torch.Tensor, model: TransportMIL) -> torch.Tensor:
    """
    E = agg_weight . (mass^T Z) + bias.

    Args:
        mass (torch.Tensor): (N, K) transport mass.
        z (torch.Tensor): (N, d) instance embeddings.
        model (TransportMIL): supplies the token weights.

    Returns:
        torch.Tensor: (d,) slide embedding.
    """
    if mass.shape[0] != z.shape[0] or mass.shape[1] != model.n_tokens:
        raise ValueError(f"mass {tuple(mass.shape)} does not fit Z {tuple(z.shape)} and K={model.n_tokens}")
    pooled = mass.T @ z
    return model.agg(pooled.T).squeeze(-1)


def bag_rng(seed: int, bag_id: str, *stream: int) -> np.random.Generator:
    """Subsampling generator keyed on the seed and bag id; `stream` separates training epochs."""
    return np.random.default_rng([seed, zlib.crc32(bag_id.encode("utf-8")), *stream])


def forward(bag: Bag, model: TransportMIL, rho: float, solver_cfg: SolverConfig,
            max_patches: Optional[int] = None, selection: str = "mass",
            rng: Optional[np.random.Generator] = None) -> ForwardResult:
    """
    Risk score of one bag.

    Args:
        bag (Bag): the bag.
        model (TransportMIL): model parameters.
        rho (float): mass ratio for this pass.
        solver_cfg (SolverConfig): transport layer settings.
        max_patches (int, optional): subsample this many instances when the bag is larger.
        selection (str): 'mass' routes 1 - rho of the mass to the virtual token; 'cost' keeps the
            ceil(rho N) instances closest to any token and transports all of their mass.
        rng (np.random.Generator, optional): generator for subsampling. bag_rng(0, bag.bag_id)
            when omitted.

    Returns:
        ForwardResult: risk, detached plan and the trace needed for backward.
    """
    index = np.arange(bag.n_instances)
    if max_patches is not None and bag.n_instances > max_patches:
        rng = rng if rng is not None else bag_rng(0, bag.bag_id)
        index = np.sort(rng.choice(bag.n_instances, size=max_patches, replace=False))

    z = project(bag.features[index], model)
    cost = cost_matrix(z, model.tokens)
    n = cost.shape[0]
    try:
        if selection == "mass":
            q_hat, scaling = unrolled_scaling(cost, rho, solver_cfg)
            plan_rho = rho
        elif selection == "cost":
            n_keep = max(1, math.ceil(rho * n - 1e-9))
            keep = torch.argsort(cost.detach().min(dim=1).values, stable=True)[:n_keep].sort().values
            q_kept, scaling = unrolled_scaling(cost[keep], 1.0, solver_cfg)
            q_hat = cost.new_zeros(n, cost.shape[1] + 1).index_copy(0, keep, q_kept)
            plan_rho = 1.0
        else:
            raise ValueError(f"selection must be 'mass' or 'cost', got {selection!r}")
    except TransportError as exc:
        raise type(exc)(f"bag {bag.bag_id}: {exc}") from exc

    mass = q_hat[:, :-1]
    embedding = aggregate(mass, z, model)
    risk = model.pred(embedding).squeeze(-1)

    detached = q_hat.detach().numpy().copy()
    plan = TransportPlan(mass=detached[:, :-1], sink_mass=detached[:, -1], iterations=scaling.sweeps,
                         residual=scaling.residual, rho=plan_rho, log_domain=scaling.log_domain,
                         converged=scaling.converged)
    trace = ForwardTrace(instance_index=index, z=z, cost=cost, scaling=scaling, mass=mass, embedding=embedding)
    logger.debug(f"forward {bag.bag_id}: N={n} rho={rho:.4f} sweeps={scaling.sweeps} risk={risk.item():.6g}")
    return ForwardResult(risk=risk, plan=plan, trace=trace,
                         instance_ids=tuple(bag.instance_ids[i] for i in index))


def cox_loss(risks, times, events) -> torch.Tensor:
    """
    Negative Cox partial log-likelihood averaged over observed events (Breslow ties).

    (1/|E|) * sum_{i: event_i} [log sum_{j: t_j >= t_i} exp(r_j) - r_i]; risk sets are formed within
    the batch. Returns 0 when the batch has no events.

    Args:
        risks: (B,) risk scores, a tensor when gradients are needed.
        times: (B,) survival or censoring times.
        events: (B,) event indicators.

    Returns:
        torch.Tensor: scalar loss.
    """
    risks = torch.as_tensor(risks, dtype=DTYPE)
    times = torch.as_tensor(times, dtype=DTYPE)
    events = torch.as_tensor(events, dtype=torch.bool)
    if risks.ndim != 1 or risks.shape != times.shape or risks.shape != events.shape:
        raise ValueError(f"risks, times and events must be equal-length vectors, got "
                         f"{tuple(risks.shape)}, {tuple(times.shape)}, {tuple(events.shape)}")
    n_events = int(events.sum())
    if n_events == 0:
        return risks.sum() * 0.0
    at_risk = times[None, :] >= times[:, None]
    batch = risks.shape[0]
    log_risk_set = torch.logsumexp(risks[None, :].expand(batch, batch).masked_fill(~at_risk, -math.inf), dim=1)
    return (log_risk_set - risks)[events].sum() / n_events


def backward(loss: torch.Tensor, model: TransportMIL, loss_grad: float = 1.0) -> dict:
    """
    Reverse-mode gradients of `loss` for every model parameter.

    The graph recorded by forward runs through the unrolled scaling sweeps, the cost matrix, the
    aggregation and the risk head. rho enters as a constant.

    Args:
        loss (torch.Tensor): scalar produced from forward results.
        model (TransportMIL): the model.
        loss_grad (float): upstream gradient of the loss.

    Returns:
        dict[str, torch.Tensor]: gradient per parameter name.

    Raises:
        NonFiniteGradientError: any gradient entry is NaN or infinite.
    """
    names, params = zip(*model.named_parameters())
    grads = torch.autograd.grad(loss, params, grad_outputs=torch.as_tensor(loss_grad, dtype=loss.dtype),
                                allow_unused=True)
    gradients = {name: (g if g is not None else torch.zeros_like(p)) for name, p, g in zip(names, params, grads)}
    bad = [name for name, g in gradients.items() if not bool(torch.isfinite(g).all())]
    if bad:
        raise NonFiniteGradientError(f"non-finite gradient entries in {', '.join(bad)} (loss={loss.item():.6g})")
    return gradients


def attention_scores(plan: TransportPlan, model: TransportMIL) -> np.ndarray:
    """Per-instance attention sum_j Q_ij * |agg_weight_j|."""
    return plan.mass @ np.abs(model.agg_weight)


def parameter_vector(model: TransportMIL) -> np.ndarray:
    """All parameters flattened in named_parameters order."""
    return torch.cat([p.detach().reshape(-1) for p in model.parameters()]).numpy().copy()


def load_parameter_vector(model: TransportMIL, vector) -> None:
    """Inverse of parameter_vector."""
    vector = torch.as_tensor(np.asarray(vector), dtype=DTYPE)
    offset = 0
    with torch.no_grad():
        for p in model.parameters():
            size = p.numel()
            p.copy_(vector[offset:offset + size].reshape(p.shape))
            offset += size
    if offset != vector.numel():
        raise ValueError(f"parameter vector has {vector.numel()} entries, model needs {offset}")


def save_checkpoint(path, model: TransportMIL, config: dict, seed: int, epochs: int,
                    fold: Optional[int] = None) -> None:
    """
    Write a checkpoint: a zip of `meta.json` plus one little-endian float64 .npy per parameter.

    Members carry a fixed timestamp so identical models give identical bytes; numpy.load can
    open the file as an npz archive.
    """
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": config,
        "seed": seed,
        "epochs": epochs,
        "fold": fold,
        "in_dim": model.in_dim,
        "latent_dim": model.latent_dim,
        "n_tokens": model.n_tokens,
        "use_projection": model.use_projection,
    }
    state = model.state_dict()
    meta["dims"] = {name: PARAMETER_DIMS[name] for name in state}
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as archive:
        _write_member(archive, "meta.json", json.dumps(meta, sort_keys=True, indent=1).encode("utf-8"))
        for name, tensor in state.items():
            buffer = io.BytesIO()
            np.lib.format.write_array(buffer, tensor.detach().numpy().astype("<f8"), allow_pickle=False)
            _write_member(archive, f"{name}.npy", buffer.getvalue())
    logger.info(f"checkpoint written to {path}")


def _write_member(archive: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    info.compress_type = zipfile.ZIP_STORED
    archive.writestr(info, data)


def load_checkpoint(path) -> tuple[TransportMIL, dict]:
    """
    Read a checkpoint written by save_checkpoint.

    Returns:
        tuple[TransportMIL, dict]: the restored model and the metadata record.
    """
    with zipfile.ZipFile(path, "r") as archive:
        meta = json.loads(archive.read("meta.json").decode("utf-8"))
        if meta.get("format") != CHECKPOINT_FORMAT or meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path} is not a version {CHECKPOINT_VERSION} {CHECKPOINT_FORMAT} file")
        state = {}
        for name in meta["dims"]:
            array = np.lib.format.read_array(io.BytesIO(archive.read(f"{name}.npy")), allow_pickle=False)
            state[name] = torch.from_numpy(np.ascontiguousarray(array, dtype=np.float64))
    model = TransportMIL(meta["in_dim"], meta["latent_dim"], meta["n_tokens"], meta["use_projection"])
    model.load_state_dict(state)
    return model, meta
