# Copyright 2025 Zenshiro
# Licensed under the Apache License, Version 2.0

"""
Federated round loop for decoupled adversarial training.

Every round the server samples C clients; each sampled client picks one
module allowed by its resource class, regenerates its input features through
the current global upstream modules, trains the module locally (clean during
warm-up, on PGD perturbed features afterwards) and uploads it. Every
parameter is then averaged over exactly the clients whose module holds it,
weighted by p_k; untouched parameters carry over.

Randomness comes from named streams of the master seed:
    plan/<t>           client sampling and module selection
    batch/<t>/<k>      mini-batch order of client k in round t
    attack/<t>/<k>     random PGD init of client k in round t
    eval/<t>           random PGD init during evaluation
"""

import logging
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from .adversary import AttackConfig, AttackStats, pgd
from .analysis import (
    NAN,
    MetricsWriter,
    RoundRecord,
    evaluate,
    feature_perturbation,
    module_diagnostics,
)
from .config import PHASE_ADVERSARIAL, PHASE_WARMUP, ExperimentConfig, TrainConfig
from .data import Dataset, ShardAssignment, load_idx_dataset, shard_non_iid, synthetic
from .exceptions import ConfigError, NumericError, ProtocolError
from .model import FadeModel, ModuleParams, ModuleRef, Partition, save_checkpoint
from .tensor import FLOAT, Tensor
from .utils import params_digest, stream

logger = logging.getLogger(__name__)


# ============================================================================
# CLIENTS AND PLANS
# ============================================================================

@dataclass
class ClientState:
    """A client's shard, weight and allowed partition schemes."""

    id: int
    indices: np.ndarray
    val_indices: np.ndarray
    p_k: float
    resource_class: Tuple[str, ...]
    adversarial: bool = True

    @property
    def size(self) -> int:
        return len(self.indices)


def _largest_remainder(fractions: Sequence[float], total: int) -> List[int]:
    quotas = np.asarray(fractions, dtype=np.float64) * total
    counts = np.floor(quotas).astype(np.int64)
    for i in np.argsort(-(quotas - counts), kind="stable")[:total - int(counts.sum())]:
        counts[i] += 1
    return [int(c) for c in counts]


def assign_clients(shards: ShardAssignment, classes: Sequence[Tuple[Tuple[str, ...], float]],
                   adversarial_fraction: float = 1.0) -> List[ClientState]:
    """
    Fixed resource classes over consecutive client-id ranges.

    Class sizes are the largest-remainder rounding of fraction * N in class
    order; adversarial training is enabled for the first round(f * N) ids.
    """
    n = shards.num_clients
    counts = _largest_remainder([fraction for _, fraction in classes], n)
    owners = [schemes for (schemes, _), count in zip(classes, counts) for _ in range(count)]
    adversarial = int(math.floor(adversarial_fraction * n + 0.5))
    weights = shards.weights()
    return [ClientState(id=k, indices=shards.train[k], val_indices=shards.validation[k], p_k=float(weights[k]),
                        resource_class=tuple(owners[k]), adversarial=k < adversarial)
            for k in range(n)]


@dataclass
class RoundPlan:
    round_index: int
    clients: List[int]
    modules: Dict[int, ModuleRef]
    lr: float
    phase: str


def plan_round(t: int, clients: Sequence[ClientState], c: int, rng: np.random.Generator,
               partitions: Mapping[str, Partition], selection: Optional[Mapping[str, Sequence[float]]] = None,
               lr: float = 0.0, phase: str = PHASE_WARMUP) -> RoundPlan:
    """
    Sample C clients without replacement and pick one module per client.

    Modules are drawn over every module of every scheme in the client's
    resource class; `selection` gives per-module weights of a scheme
    (uniform by default).

    Raises:
        ConfigError: C > N or a client names an unknown scheme
    """
    if c > len(clients):
        raise ConfigError(f"cannot sample C={c} clients out of N={len(clients)}")
    chosen = sorted(int(i) for i in rng.choice(len(clients), size=c, replace=False))
    modules: Dict[int, ModuleRef] = {}
    for position in chosen:
        client = clients[position]
        options: List[ModuleRef] = []
        weights: List[float] = []
        for scheme in client.resource_class:
            if scheme not in partitions:
                raise ConfigError(f"client {client.id}: unknown partition scheme {scheme!r}")
            count = partitions[scheme].count
            scheme_weights = list((selection or {}).get(scheme, [1.0] * count))
            for index in range(1, count + 1):
                options.append(ModuleRef(scheme, index, count))
                weights.append(float(scheme_weights[index - 1]))
        p = np.asarray(weights) / np.sum(weights)
        modules[client.id] = options[int(rng.choice(len(options), p=p))]
    return RoundPlan(round_index=t, clients=[clients[i].id for i in chosen], modules=modules, lr=lr, phase=phase)


# ============================================================================
# FEATURES
# ============================================================================

@dataclass
class FeatureSet:
    """Module inputs z_{m-1} of one client, tagged with the upstream parameters that produced them."""

    ref: ModuleRef
    client_id: int
    z: Tensor
    labels: np.ndarray
    digest: str

    def __len__(self) -> int:
        return len(self.labels)


def generate_features(model: FadeModel, client: ClientState, ref: ModuleRef, dataset: Dataset,
                      indices: Optional[np.ndarray] = None) -> FeatureSet:
    """Frozen forward pass of the client's shard through modules 1..m-1 (m = 1 gives the raw inputs)."""
    indices = client.indices if indices is None else indices
    x = dataset.images[indices]
    z = model.features(ref, x)
    digest = params_digest(model.params, model.upstream_names(ref))
    return FeatureSet(ref=ref, client_id=client.id, z=z, labels=dataset.labels[indices], digest=digest)


def is_stale(features: FeatureSet, model: FadeModel) -> bool:
    """True when the upstream modules changed since `features` were computed."""
    return features.digest != params_digest(model.params, model.upstream_names(features.ref))


# ============================================================================
# LOCAL TRAINING
# ============================================================================

class SGDMomentum:
    """
    Heavy-ball SGD: v = mu v + g, w = w - lr v.

    `weight_decay` is added to the gradient of backbone parameters; the
    auxiliary-head decay acts as theta = theta - lr v - 2 lr lambda theta,
    the gradient step of lambda ||theta||^2.
    """

    def __init__(self, lr: float, momentum: float = 0.0, weight_decay: float = 0.0, aux_decay: float = 0.0,
                 head_names: Sequence[str] = ()):
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.aux_decay = aux_decay
        self.head_names = set(head_names)
        self.velocity: Dict[str, np.ndarray] = {}

    def step(self, params: Dict[str, Tensor], grads: Mapping[str, Tensor]) -> None:
        for name, grad in grads.items():
            w = params[name].astype(np.float64)
            g = grad.astype(np.float64)
            is_head = name in self.head_names
            if not is_head and self.weight_decay:
                g = g + self.weight_decay * w
            v = self.momentum * self.velocity[name] + g if name in self.velocity else g
            self.velocity[name] = v
            updated = w - self.lr * v
            if is_head and self.aux_decay:
                updated -= 2.0 * self.lr * self.aux_decay * w
            params[name] = updated.astype(params[name].dtype)


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Endless mini-batches cycling through fresh permutations."""
    size = min(batch_size, n)
    buffer = np.zeros(0, dtype=np.int64)
    while True:
        while len(buffer) < size:
            buffer = np.concatenate([buffer, rng.permutation(n)])
        yield buffer[:size]
        buffer = buffer[size:]


@dataclass
class LocalResult:
    params: ModuleParams
    loss: float = NAN
    attack_gain: float = NAN
    iterations: int = 0
    stats: AttackStats = field(default_factory=AttackStats)


def local_train(module: ModuleParams, features: FeatureSet, cfg: TrainConfig, attack: Optional[AttackConfig],
                phase: str, lr: float, rng: np.random.Generator,
                attack_rng: Optional[np.random.Generator] = None) -> LocalResult:
    """
    tau iterations of mini-batch SGD on a copy of the module.

    Warm-up, and standard training without `attack`, minimize the plain
    early-exit loss. The adversarial phase with an attack minimizes it at
    z + delta with delta from `pgd`, plus the auxiliary-head decay. The
    caller's parameters are never modified.

    Raises:
        NumericError: non-finite loss (sample index attached)
    """
    trained = module.copy()
    result = LocalResult(params=trained)
    if cfg.local_iters == 0 or len(features) == 0:
        return result
    adversarial = phase == PHASE_ADVERSARIAL and attack is not None
    # Head decay is part of the adversarial objective only
    optimizer = SGDMomentum(lr, cfg.momentum, cfg.weight_decay, cfg.aux_decay(module.ref) if adversarial else 0.0,
                            head_names=list(trained.head or ()))
    params = trained.as_dict()
    losses, gains = [], []
    batches = _batches(len(features), cfg.batch_size, rng)
    for _ in range(cfg.local_iters):
        idx = next(batches)
        z, y = features.z[idx], features.labels[idx]
        try:
            if adversarial:
                z = z + pgd(trained, z, y, attack, rng=attack_rng, stats=result.stats)
            batch_losses, _, grads = trained.net.loss_and_grads(params, z, y)
        except NumericError as e:
            sample = None if e.sample is None else int(idx[e.sample])
            raise NumericError(f"{e.message} in {module.ref.label}", sample=sample) from None
        bad = ~np.isfinite(batch_losses)
        if bad.any():
            raise NumericError(f"non-finite loss in {module.ref.label}", sample=int(idx[np.flatnonzero(bad)[0]]))
        if adversarial and result.stats.clean_losses is not None:
            gains.append(float((batch_losses - result.stats.clean_losses).max()))
        optimizer.step(params, grads.by_parameter)
        for name, value in params.items():
            if name in trained.backbone:
                trained.backbone[name] = value
            else:
                trained.head[name] = value
        losses.append(float(batch_losses.mean()))
    result.loss = float(np.mean(losses))
    result.attack_gain = max(gains) if gains else NAN
    result.iterations = cfg.local_iters
    return result


# ============================================================================
# AGGREGATION
# ============================================================================

@dataclass
class Upload:
    client_id: int
    ref: ModuleRef
    params: Dict[str, Tensor]
    weight: float


def aggregate(model: FadeModel, uploads: Sequence[Upload], plan: Optional[RoundPlan] = None) -> FadeModel:
    """
    Per-parameter weighted mean over the clients whose module contains it.

    Sums run in float64 in ascending client-id order whatever the upload
    order; parameters no upload contains are carried over unchanged.

    Raises:
        ProtocolError: duplicate client, module not in the plan, unknown
            parameter or shape mismatch
    """
    shapes = model.param_shapes()
    seen = set()
    for up in uploads:
        if up.client_id in seen:
            raise ProtocolError(up.client_id, "uploaded twice in one round")
        seen.add(up.client_id)
        if plan is not None and plan.modules.get(up.client_id) != up.ref:
            raise ProtocolError(up.client_id, f"module {up.ref.label} was not planned for this client")
        if not up.weight > 0:
            raise ProtocolError(up.client_id, f"weight must be > 0, got {up.weight}")
        for name, value in up.params.items():
            if name not in shapes:
                raise ProtocolError(up.client_id, f"unknown parameter {name}")
            if tuple(value.shape) != tuple(shapes[name]):
                raise ProtocolError(up.client_id, f"{name} has shape {tuple(value.shape)}, expected {shapes[name]}")
    sums: Dict[str, np.ndarray] = {}
    totals: Dict[str, float] = {}
    for up in sorted(uploads, key=lambda u: u.client_id):
        for name, value in up.params.items():
            if name in sums:
                sums[name] += up.weight * value.astype(np.float64)
                totals[name] += up.weight
            else:
                sums[name] = up.weight * value.astype(np.float64)
                totals[name] = up.weight
    params = dict(model.params)
    for name, total in sums.items():
        params[name] = (total / totals[name]).astype(FLOAT)
    return FadeModel(model.spec, model.partitions, params)


# ============================================================================
# RUN
# ============================================================================

@dataclass
class RunResult:
    model: FadeModel
    records: List[RoundRecord]
    clients: List[ClientState]
    final_accuracy: Tuple[float, float] = (NAN, NAN)


def load_datasets(config: ExperimentConfig) -> Tuple[Dataset, Dataset]:
    """Train and test sets named by the [data] section."""
    data = config.data
    seed = config.experiment.seed
    if data.source == "synthetic":
        train = synthetic(data.num_classes, data.train_count, data.input_shape, seed, data.spread, "synthetic/train")
        test = synthetic(data.num_classes, data.test_count, data.input_shape, seed, data.spread, "synthetic/test")
        return train, test
    train = load_idx_dataset(data.train_images, data.train_labels, data.num_classes, data.limit_train)
    test = load_idx_dataset(data.test_images, data.test_labels, data.num_classes, data.limit_test)
    return train, test


def build_model(config: ExperimentConfig, input_shape: Tuple[int, ...]) -> FadeModel:
    spec = config.backbone_spec(tuple(input_shape))
    return FadeModel.build(spec, config.partition_specs(), config.experiment.seed)


def _client_task(model: FadeModel, client: ClientState, ref: ModuleRef, train_set: Dataset,
                 plan: RoundPlan, cfg: TrainConfig, seed: int) -> Tuple[Optional[LocalResult], float, bool]:
    """(result, validation accuracy, failed); result is None for skipped and failed clients."""
    t = plan.round_index
    features = generate_features(model, client, ref, train_set)
    if len(features) == 0:
        logger.warning(f"Round {t}: client {client.id} has no data for {ref.label}, skipped")
        return None, NAN, False
    attack = cfg.attack_for(ref) if client.adversarial else None
    try:
        result = local_train(model.module_params(ref), features, cfg, attack, plan.phase, plan.lr,
                             rng=stream(seed, "batch", t, client.id), attack_rng=stream(seed, "attack", t, client.id))
    except NumericError as e:
        logger.warning(f"Aborted client: {e.with_context(round_index=t, client_id=client.id)}")
        return None, NAN, True
    val_acc = NAN
    if len(client.val_indices):
        val = generate_features(model, client, ref, train_set, client.val_indices)
        _, logits = result.params.net.logits(result.params.as_dict(), val.z)
        val_acc = float((logits.argmax(axis=1) == val.labels).mean())
    return result, val_acc, False


def _evaluate_round(model: FadeModel, config: ExperimentConfig, test: Dataset, t: int) -> Dict[str, float]:
    rng = stream(config.experiment.seed, "eval", t)
    nat, adv = evaluate(model, test, config.eval_attack, rng=rng)
    metrics = {"nat_acc": nat, "adv_acc": adv}
    if any(ref.count >= 2 for ref in model.module_refs()):
        pert = feature_perturbation(model, test, config.eval_attack, rng=rng)
        metrics.update(feat_pert_mean=pert.mean, feat_pert_max=pert.max)
    return metrics


def run(config: ExperimentConfig, output_dir: Optional[str] = None, progress: bool = False,
        datasets: Optional[Tuple[Dataset, Dataset]] = None) -> RunResult:
    """
    Execute the configured number of rounds.

    With `output_dir`, writes metrics.csv (appended every round), the
    initial checkpoint, periodic checkpoints and final.fade.

    Raises:
        ConfigError, DataError: invalid setup
        NumericError: every client of a round that trained failed, or the
            aggregated model is non-finite (round attached)
    """
    exp, cfg = config.experiment, config.train
    train_set, test_set = datasets if datasets is not None else load_datasets(config)
    model = build_model(config, train_set.input_shape)
    shards = shard_non_iid(train_set.labels, exp.clients, config.data.labels_per_client, exp.seed,
                           config.data.val_ratio)
    clients = assign_clients(shards, config.resource_classes(), cfg.adversarial_fraction)
    eval_set = test_set.head(exp.eval_samples)
    diag_set = test_set.head(exp.diag_samples)
    logger.info(f"Model {model.spec.name}: {len(model.params)} tensors, schemes {list(model.partitions)}; "
                f"{len(clients)} clients, {exp.rounds} rounds")

    writer = None
    if output_dir:
        os.makedirs(output_dir, exist_ok=True)
        writer = MetricsWriter(os.path.join(output_dir, "metrics.csv"))
        save_checkpoint(os.path.join(output_dir, "checkpoint_r0000.fade"), model)

    records: List[RoundRecord] = []
    final = (NAN, NAN)
    executor = ThreadPoolExecutor(max_workers=exp.workers) if exp.workers > 1 else None
    try:
        for t in tqdm(range(exp.rounds), desc="rounds", disable=not progress, file=sys.stderr):
            plan = plan_round(t, clients, exp.clients_per_round, stream(exp.seed, "plan", t),
                              model.partitions, config.selection, cfg.lr_at(t), cfg.phase(t))
            tasks = [(clients[k], plan.modules[k]) for k in plan.clients]

            def work(task, model=model, plan=plan):
                return _client_task(model, task[0], task[1], train_set, plan, cfg, exp.seed)

            outcomes = list(executor.map(work, tasks)) if executor else [work(task) for task in tasks]

            uploads, losses, gains, failed = [], {}, {}, 0
            for (client, ref), (result, val_acc, aborted) in zip(tasks, outcomes):
                if result is None:
                    failed += aborted
                    continue
                uploads.append(Upload(client.id, ref, result.params.as_dict(), client.p_k))
                losses.setdefault(ref, []).append(result.loss)
                if not math.isnan(result.attack_gain):
                    gains[ref] = max(gains.get(ref, -math.inf), result.attack_gain)
                logger.debug(f"Round {t}: client {client.id} {ref.label} loss={result.loss:.4f} val_acc={val_acc:.3f}")
            if failed and not uploads:
                raise NumericError(f"every trained client failed ({failed} aborted)", round_index=t)
            model = aggregate(model, uploads, plan)
            for name, value in model.params.items():
                if not np.isfinite(value).all():
                    raise NumericError(f"non-finite parameter {name} after aggregation", round_index=t)

            is_last = t == exp.rounds - 1
            evaluated = is_last or (exp.eval_interval > 0 and (t + 1) % exp.eval_interval == 0)
            metrics = _evaluate_round(model, config, eval_set, t) if evaluated else {}
            if is_last:
                final = (metrics["nat_acc"], metrics["adv_acc"])
            round_records = []
            for ref in model.module_refs():
                record = RoundRecord(round=t + 1, phase=plan.phase, module=ref.label,
                                     loss=float(np.mean(losses[ref])) if ref in losses else NAN)
                if evaluated:
                    record.nat_acc = metrics["nat_acc"]
                    record.adv_acc = metrics["adv_acc"]
                    if ref.index == 1 and ref.count >= 2 and "feat_pert_mean" in metrics:
                        record.feat_pert_mean = metrics["feat_pert_mean"]
                        record.feat_pert_max = metrics["feat_pert_max"]
                    if exp.diagnostics and len(diag_set):
                        diag = module_diagnostics(model, ref, diag_set.images, diag_set.labels, gains.get(ref, NAN))
                        record.g_m, record.mu_hat, record.beta_hat = diag.g_m, diag.mu_hat, diag.beta_hat
                        record.eps_lb, record.grad_gap = diag.eps_lb, diag.grad_gap
                round_records.append(record)
            records.extend(round_records)
            if writer:
                writer.append(round_records)
            if evaluated:
                logger.info(f"Round {t + 1}/{exp.rounds} [{plan.phase}] nat_acc={metrics['nat_acc']:.4f} "
                            f"adv_acc={metrics['adv_acc']:.4f}")
            if output_dir and exp.checkpoint_interval and (t + 1) % exp.checkpoint_interval == 0:
                save_checkpoint(os.path.join(output_dir, f"checkpoint_r{t + 1:04d}.fade"), model)
    finally:
        if executor:
            executor.shutdown()

    if output_dir:
        save_checkpoint(os.path.join(output_dir, "final.fade"), model)
    return RunResult(model=model, records=records, clients=clients, final_accuracy=final)
