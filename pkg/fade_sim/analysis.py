# Copyright 2025 Zenshiro
# Licensed under the Apache License, Version 2.0

"""
Evaluation metrics and robustness/consistency diagnostics.

- natural and adversarial accuracy of the joint model
- feature perturbation ||f_1(x + delta) - f_1(x)||_2 at the first module
- linear-head curvature: grad = W (p - y), H = W J W^T, J = diag(p) - p p^T
- the epsilon lower bound g/mu + sqrt(2c/mu + g^2/mu^2) and a brute-force
  check of it on strongly convex synthetic heads
- the measured gap between joint and early-exit gradients of a module
- metrics CSV (append per round) and plot-data export
"""

import logging
import math
import os
from dataclasses import asdict, dataclass
from typing import Callable, Iterable, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .adversary import AttackConfig, pgd, project
from .data import Dataset
from .exceptions import ConfigError, StrongConvexityError, UnsupportedHeadError
from .model import FadeModel, ModuleNet, ModuleRef
from .tensor import Flatten, Linear, MaxPool2x2, Tensor, softmax
from .utils import smooth

logger = logging.getLogger(__name__)

METRIC_COLUMNS = [
    "round", "phase", "module", "loss", "nat_acc", "adv_acc", "feat_pert_mean", "feat_pert_max",
    "g_m", "mu_hat", "beta_hat", "eps_lb", "grad_gap",
]
NAN = float("nan")


@dataclass
class RoundRecord:
    """Metrics of one module after one round; fields that were not measured are NaN."""

    round: int
    phase: str
    module: str
    loss: float = NAN
    nat_acc: float = NAN
    adv_acc: float = NAN
    feat_pert_mean: float = NAN
    feat_pert_max: float = NAN
    g_m: float = NAN
    mu_hat: float = NAN
    beta_hat: float = NAN
    eps_lb: float = NAN
    grad_gap: float = NAN

    def as_row(self) -> dict:
        return asdict(self)


def records_frame(records: Sequence[RoundRecord]) -> pd.DataFrame:
    return pd.DataFrame([r.as_row() for r in records], columns=METRIC_COLUMNS)


class _Bound:
    """A module net bound to a parameter mapping, attackable by `pgd`."""

    def __init__(self, net: ModuleNet, params: Mapping[str, Tensor]):
        self.net = net
        self.params = params

    def loss_and_input_grad(self, z, labels):
        return self.net.loss_and_input_grad(self.params, z, labels)


# ============================================================================
# ACCURACY AND FEATURE PERTURBATION
# ============================================================================

def evaluate(model: FadeModel, dataset: Dataset, attack: AttackConfig, batch_size: int = 100,
             rng: Optional[np.random.Generator] = None) -> Tuple[float, float]:
    """
    Natural and adversarial accuracy of the joint model.

    Only clean-correct samples are attacked; a sample counts as robust when
    it is classified correctly both clean and under the attack.

    Returns:
        (natural accuracy, adversarial accuracy), NaN for an empty dataset
    """
    if len(dataset) == 0:
        return NAN, NAN
    net = model.joint_net()
    objective = _Bound(net, model.params)
    correct = robust = 0
    for start in range(0, len(dataset), batch_size):
        x = dataset.images[start:start + batch_size]
        y = dataset.labels[start:start + batch_size]
        clean = net.body.forward(model.params, x).argmax(axis=1) == y
        correct += int(clean.sum())
        if not clean.any():
            continue
        xs, ys = x[clean], y[clean]
        delta = pgd(objective, xs, ys, attack, rng=rng)
        robust += int((net.body.forward(model.params, xs + delta).argmax(axis=1) == ys).sum())
    return correct / len(dataset), robust / len(dataset)


@dataclass
class FeaturePerturbation:
    """Per-sample l2 displacement of the first module's output."""

    norms: np.ndarray

    @property
    def mean(self) -> float:
        return float(self.norms.mean()) if self.norms.size else NAN

    @property
    def max(self) -> float:
        return float(self.norms.max()) if self.norms.size else NAN

    def percentile(self, q: float) -> float:
        return float(np.percentile(self.norms, q)) if self.norms.size else NAN

    def summary(self) -> dict:
        return {"feat_pert_mean": self.mean, "feat_pert_max": self.max,
                "feat_pert_p50": self.percentile(50), "feat_pert_p95": self.percentile(95)}


def first_module(model: FadeModel) -> ModuleRef:
    """Module 1 of the first scheme with at least two modules."""
    for ref in model.module_refs():
        if ref.index == 1 and ref.count >= 2:
            return ref
    raise ConfigError("feature perturbation needs a partition with at least 2 modules")


def feature_perturbation(model: FadeModel, dataset: Dataset, attack: AttackConfig,
                         ref: Optional[ModuleRef] = None, batch_size: int = 100,
                         rng: Optional[np.random.Generator] = None) -> FeaturePerturbation:
    """
    Attack the early-exit loss of module 1 at the input and measure how far
    its output moves.
    """
    ref = ref or first_module(model)
    if ref.index != 1 or ref.count < 2:
        raise ConfigError(f"feature perturbation is measured at module 1 of a split model, got {ref.label}")
    module = model.module_params(ref)
    norms = []
    for start in range(0, len(dataset), batch_size):
        x = dataset.images[start:start + batch_size]
        y = dataset.labels[start:start + batch_size]
        delta = pgd(module, x, y, attack, rng=rng)
        clean = module.net.body.forward(module.as_dict(), x).astype(np.float64)
        moved = module.net.body.forward(module.as_dict(), x + delta).astype(np.float64)
        diff = (moved - clean).reshape(len(x), -1)
        norms.append(np.sqrt((diff * diff).sum(axis=1)))
    return FeaturePerturbation(np.concatenate(norms) if norms else np.zeros(0))


# ============================================================================
# LINEAR-HEAD CURVATURE
# ============================================================================

@dataclass
class HeadCurvature:
    """Gradient norm and Hessian spectrum of the head loss at one feature point."""

    gradient: np.ndarray
    eigenvalues: np.ndarray

    @property
    def g(self) -> float:
        return float(np.linalg.norm(self.gradient))

    @property
    def mu_hat(self) -> float:
        return float(self.eigenvalues[0])

    @property
    def beta_hat(self) -> float:
        return float(self.eigenvalues[-1])


def softmax_jacobian(p: np.ndarray) -> np.ndarray:
    return np.diag(p) - np.outer(p, p)


def head_hessian(weight: np.ndarray, z: np.ndarray, bias: Optional[np.ndarray] = None) -> np.ndarray:
    """Full d x d Hessian W J W^T of the cross-entropy w.r.t. the head input."""
    w = np.asarray(weight, dtype=np.float64)
    logits = np.asarray(z, dtype=np.float64) @ w + (0.0 if bias is None else np.asarray(bias, dtype=np.float64))
    p = softmax(logits)
    return w @ softmax_jacobian(p) @ w.T


def head_curvature(weight: np.ndarray, bias: Optional[np.ndarray], z: np.ndarray, label: int) -> HeadCurvature:
    """
    Closed-form curvature of a linear softmax head, logits = z W + b.

    The spectrum is computed on the K x K matrix J^(1/2) W^T W J^(1/2) when
    the input dimension d exceeds K; it shares the nonzero eigenvalues of
    W J W^T and the remaining d - K eigenvalues are zero.

    Args:
        weight: [d, K]
        bias: [K] or None
        z: [d] head input
        label: Class index
    """
    w = np.asarray(weight, dtype=np.float64)
    d, k = w.shape
    logits = np.asarray(z, dtype=np.float64).reshape(d) @ w
    if bias is not None:
        logits = logits + np.asarray(bias, dtype=np.float64)
    p = softmax(logits)
    residual = p.copy()
    residual[int(label)] -= 1.0
    gradient = w @ residual
    jac = softmax_jacobian(p)
    if d <= k:
        eigenvalues = np.linalg.eigvalsh(w @ jac @ w.T)
    else:
        s, v = np.linalg.eigh(jac)
        root = v * np.sqrt(np.clip(s, 0.0, None))
        reduced = np.linalg.eigvalsh(root.T @ (w.T @ w) @ root)
        eigenvalues = np.sort(np.concatenate([reduced, np.zeros(d - k)]))
    return HeadCurvature(gradient=gradient, eigenvalues=eigenvalues)


def head_input(model: FadeModel, ref: ModuleRef, z_out: Tensor) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Linear-stage input of a module's auxiliary head.

    Returns:
        (weight, bias, [B, d] inputs of the Linear layer)

    Raises:
        UnsupportedHeadError: the module has no head or the head is not
            (MaxPool2x2) -> Flatten -> Linear
    """
    net = model.module_net(ref)
    head = net.head
    if head is None:
        raise UnsupportedHeadError(f"{ref.label} has no auxiliary head")
    *front, last = head.layers
    if not isinstance(last, Linear) or not all(isinstance(l, (MaxPool2x2, Flatten)) for l in front):
        raise UnsupportedHeadError(f"{ref.label}: curvature needs a (pool) -> flatten -> linear head")
    z = z_out
    for layer in front:
        z, _ = layer.forward(model.params, z)
    return model.params[last.name + ".weight"], model.params.get(last.name + ".bias"), z


def epsilon_lower_bound(g: float, mu: float, c: float) -> float:
    """
    Radius g/mu + sqrt(2c/mu + g^2/mu^2) that bounds the feature displacement.

    Raises:
        StrongConvexityError: mu <= 0
    """
    if g < 0 or c < 0:
        raise ValueError(f"g and c must be >= 0, got g={g}, c={c}")
    if not mu > 0:
        raise StrongConvexityError(f"head loss is not strongly convex (mu = {mu:.3g})")
    ratio = g / mu
    return ratio + math.sqrt(2.0 * c / mu + ratio * ratio)


def linf_equivalent(epsilon_l2: float, dim: int) -> float:
    """l_inf radius whose ball fits inside the l2 ball of radius `epsilon_l2` in `dim` dimensions."""
    return epsilon_l2 / math.sqrt(dim)


# ============================================================================
# BRUTE-FORCE CHECK ON SYNTHETIC HEADS
# ============================================================================

@dataclass
class QuadraticHead:
    """Strongly convex loss h(u) = 1/2 (u - a)^T Q (u - a) with Q positive definite."""

    q: np.ndarray
    center: np.ndarray

    @property
    def mu(self) -> float:
        return float(np.linalg.eigvalsh(self.q)[0])

    def loss(self, u: np.ndarray) -> np.ndarray:
        r = np.atleast_2d(u) - self.center
        return 0.5 * np.einsum("pi,ij,pj->p", r, self.q, r)

    def grad(self, u: np.ndarray) -> np.ndarray:
        return (np.asarray(u, dtype=np.float64) - self.center) @ self.q.T


@dataclass
class AffineMap:
    """Synthetic module u = act(A z + b), batched over rows of z."""

    a: np.ndarray
    b: np.ndarray
    activation: Optional[str] = None

    def __call__(self, z: np.ndarray) -> np.ndarray:
        u = np.atleast_2d(z) @ self.a.T + self.b
        return np.tanh(u) if self.activation == "tanh" else u


@dataclass
class DisplacementReport:
    epsilon_in: float
    max_displacement: float
    loss_increase: float
    g: float
    mu: float
    bound: float
    tolerance: float

    @property
    def holds(self) -> bool:
        return self.max_displacement <= self.bound + self.tolerance


def ball_grid(dim: int, epsilon: float, resolution: float) -> np.ndarray:
    """Grid of the l2 ball; points outside are projected onto the sphere."""
    if epsilon == 0:
        return np.zeros((1, dim))
    steps = max(int(math.ceil(epsilon / resolution)), 1)
    axis = np.linspace(-epsilon, epsilon, 2 * steps + 1)
    points = np.stack(np.meshgrid(*([axis] * dim), indexing="ij"), axis=-1).reshape(-1, dim)
    return project(points, "l2", epsilon)


def theorem1_empirical_check(module: Callable[[np.ndarray], np.ndarray], head: QuadraticHead, z: np.ndarray,
                             epsilon: float, resolution: float = 1e-3, tolerance: float = 1e-3,
                             max_points: int = 2_000_000) -> DisplacementReport:
    """
    Brute-force the largest feature displacement over the input ball and
    compare it with the epsilon lower bound of the head.

    c is the largest loss increase over the same grid, g the head gradient
    norm at the clean feature, mu the head's strong convexity constant.
    """
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    dim = z.size
    if dim > 3:
        raise ValueError(f"grid search supports input dimension <= 3, got {dim}")
    steps = 2 * max(int(math.ceil(epsilon / resolution)), 1) + 1
    if steps ** dim > max_points:
        resolution = 2 * epsilon / (max_points ** (1.0 / dim) - 1)
    deltas = ball_grid(dim, epsilon, resolution)
    clean = module(z[None, :])[0]
    moved = module(z[None, :] + deltas)
    displacement = np.sqrt(((moved - clean) ** 2).sum(axis=1))
    increase = head.loss(moved) - head.loss(clean)[0]
    g = float(np.linalg.norm(head.grad(clean)))
    c = max(float(increase.max()), 0.0)
    mu = head.mu
    return DisplacementReport(epsilon_in=epsilon, max_displacement=float(displacement.max()), loss_increase=c,
                          g=g, mu=mu, bound=epsilon_lower_bound(g, mu, c), tolerance=tolerance)


# ============================================================================
# GRADIENT GAP
# ============================================================================

def gradient_gap(model: FadeModel, ref: ModuleRef, x: Tensor, labels) -> float:
    """
    l2 norm of grad_{w_m} l - grad_{w_m} l_m for the batch-mean losses.

    l is the joint loss at the raw input; l_m the early-exit loss of module
    m evaluated at z_{m-1} produced by the current upstream modules.
    """
    joint = model.joint_net()
    _, _, joint_grads = joint.loss_and_grads(model.params, x, labels)
    net = model.module_net(ref)
    z = model.features(ref, x)
    _, _, local_grads = net.loss_and_grads(model.params, z, labels)
    total = 0.0
    for name in net.backbone_names():
        diff = joint_grads.by_parameter[name].astype(np.float64) - local_grads.by_parameter[name].astype(np.float64)
        total += float((diff * diff).sum())
    return math.sqrt(total)


# ============================================================================
# ROUND DIAGNOSTICS
# ============================================================================

@dataclass
class ModuleDiagnostics:
    g_m: float = NAN
    mu_hat: float = NAN
    beta_hat: float = NAN
    eps_lb: float = NAN
    grad_gap: float = NAN


def module_diagnostics(model: FadeModel, ref: ModuleRef, x: Tensor, labels, attack_gain: float) -> ModuleDiagnostics:
    """
    Batch-mean curvature of the module head at its clean outputs, the epsilon
    bound with c estimated by the training attack's largest loss increase,
    and the gradient gap.
    """
    result = ModuleDiagnostics(grad_gap=gradient_gap(model, ref, x, labels))
    if ref.is_last:
        return result
    z_out = model.module_net(ref).body.forward(model.params, model.features(ref, x))
    weight, bias, z = head_input(model, ref, z_out)
    curves = [head_curvature(weight, bias, z[i], labels[i]) for i in range(len(z))]
    result.g_m = float(np.mean([c.g for c in curves]))
    result.mu_hat = float(np.mean([c.mu_hat for c in curves]))
    result.beta_hat = float(np.mean([c.beta_hat for c in curves]))
    if not math.isnan(attack_gain):
        try:
            result.eps_lb = epsilon_lower_bound(result.g_m, result.mu_hat, max(attack_gain, 0.0))
            logger.debug(f"{ref.label}: eps_lb={result.eps_lb:.6g} (l2), "
                         f"{linf_equivalent(result.eps_lb, z.shape[1]):.6g} (linf, d={z.shape[1]})")
        except StrongConvexityError as e:
            logger.warning(f"{ref.label}: epsilon bound unavailable: {e}")
    return result


def loss_decrease_report(records: Sequence[RoundRecord], start: int, end: int, window: int = 10) -> pd.DataFrame:
    """
    Smoothed local-loss values of every module at two rounds.

    Rounds where a module was not trained are skipped by the moving average.
    """
    frame = records_frame(records)
    rows = []
    for module, group in frame.groupby("module", sort=False):
        series = group.set_index("round")["loss"].reindex(range(1, int(frame["round"].max()) + 1))
        smoothed = pd.Series(smooth(series.to_numpy(), window), index=series.index)
        at_start = float(smoothed.get(start, NAN))
        at_end = float(smoothed.get(end, NAN))
        rows.append({"module": module, f"loss_r{start}": at_start, f"loss_r{end}": at_end,
                     "decreased": bool(at_end < at_start)})
    return pd.DataFrame(rows)


# ============================================================================
# METRICS FILES
# ============================================================================

class MetricsWriter:
    """Append-only metrics CSV, flushed after every round."""

    def __init__(self, path: str):
        self.path = path
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        pd.DataFrame(columns=METRIC_COLUMNS).to_csv(path, index=False)

    def append(self, records: Iterable[RoundRecord]) -> None:
        frame = records_frame(list(records))
        if frame.empty:
            return
        frame.to_csv(self.path, mode="a", header=False, index=False, float_format="%.8g", na_rep="")


def export_plot_data(metrics_path: str, out_path: str) -> pd.DataFrame:
    """Rows of evaluated rounds only, same columns."""
    frame = pd.read_csv(metrics_path)
    evaluated = frame[frame["nat_acc"].notna() | frame["feat_pert_mean"].notna()]
    evaluated.to_csv(out_path, index=False, float_format="%.8g", na_rep="")
    logger.info(f"Plot data written: {out_path} ({len(evaluated)} rows)")
    return evaluated
