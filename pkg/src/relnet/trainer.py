"""Joint training of the multi-task network and its covariance prior.

Each epoch alternates two blocks:

1. SGD with momentum over the pooled examples of all tasks.  Batches
   mix tasks; every example contributes its cross-entropy gradient, and
   the prior adds its task's slice of ``Sigma^{-1} vec(W)`` per layer,
   scaled so the epoch accumulates the full prior gradient exactly once
   per task no matter how examples landed in batches.
2. One covariance sweep per stack layer: with the weights fixed, each
   mode factor in turn is replaced by the maximizer of the prior term
   given the other two (the same cyclic scheme as the distribution
   fitter), then ridged and trace-normalized.  Only the task-mode
   factor carries the inter-task relationship; feature and output
   factors absorb within-layer scale.

Task-specific layers train with a learning-rate multiplier since they
start from scratch while a trunk may be pre-initialized.  Everything is
driven by one integer seed: shuffles come from per-epoch child
generators, so a fixed config yields a bit-identical trajectory.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import solve_triangular

from .data import MultiTaskDataset
from .network import (
    MultiTaskNet,
    TaskLayerStack,
    _batch_task_gradients,
    accuracy,
    prior_penalty,
    task_log_loss,
)
from .serialize import write_csv_rows
from .tensor_normal import EstimationError, KronCovariance, SpdFactor

__all__ = [
    "TrainingError",
    "TrainConfig",
    "CovarianceState",
    "OptimizerState",
    "OpCounter",
    "EpochRecord",
    "TrainReport",
    "learning_rate_at",
    "sgd_epoch",
    "update_covariances",
    "objective",
    "train",
    "extract_relationship",
]


class TrainingError(RuntimeError):
    """Raised when optimization produces unusable values."""


@dataclass
class TrainConfig:
    """Hyper-parameters of the joint training loop.

    ``prior_weight`` scales the whole prior term in the objective and
    the gradients; zero recovers independent per-task training.
    ``lr_schedule`` is ``"constant"`` or ``"inv"``, the latter decaying
    the base rate by ``(1 + lr_gamma * iteration) ** -lr_power``.
    ``shared_task_sigma`` estimates one task-mode factor pooled over
    all stack layers instead of one per layer.
    """

    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 16
    epochs: int = 20
    prior_weight: float = 1.0
    epsilon_ridge: float = 1e-3
    new_layer_lr_multiplier: float = 10.0
    lr_schedule: str = "constant"
    lr_gamma: float = 1e-4
    lr_power: float = 0.75
    shared_task_sigma: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.prior_weight < 0:
            raise ValueError("prior_weight must be non-negative")
        if self.epsilon_ridge <= 0:
            raise ValueError("epsilon_ridge must be positive")
        if self.new_layer_lr_multiplier <= 0:
            raise ValueError("new_layer_lr_multiplier must be positive")
        if self.lr_schedule not in ("constant", "inv"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.lr_gamma < 0 or self.lr_power < 0:
            raise ValueError("lr_gamma and lr_power must be non-negative")


def learning_rate_at(cfg: TrainConfig, iteration: int) -> float:
    """Base learning rate at a 0-based iteration under the schedule."""
    if cfg.lr_schedule == "constant":
        return cfg.learning_rate
    return cfg.learning_rate * (1.0 + cfg.lr_gamma * iteration) ** (-cfg.lr_power)


@dataclass
class CovarianceState:
    """Per-layer Kronecker factors of the prior.

    ``feature[l]``, ``output[l]`` and ``task[l]`` are the mode factors
    of stack layer ``layer_ids[l]``.  With ``shared_task`` every entry
    of ``task`` is the same pooled factor.
    """

    layer_ids: list
    feature: list
    output: list
    task: list
    shared_task: bool = False

    @classmethod
    def identity_for(cls, stack: TaskLayerStack, shared_task: bool = False):
        """Unit-trace scaled identities matching the stack's dims."""
        feature, output, task = [], [], []
        shared = None
        for w in stack.weights:
            din, dout, t = w.shape
            feature.append(SpdFactor.identity(din, 1.0 / din))
            output.append(SpdFactor.identity(dout, 1.0 / dout))
            if shared_task:
                if shared is None:
                    shared = SpdFactor.identity(t, 1.0 / t)
                task.append(shared)
            else:
                task.append(SpdFactor.identity(t, 1.0 / t))
        return cls(
            layer_ids=list(stack.layer_ids),
            feature=feature,
            output=output,
            task=task,
            shared_task=shared_task,
        )

    def layer_index(self, layer) -> int:
        if isinstance(layer, str):
            try:
                return self.layer_ids.index(layer)
            except ValueError:
                raise ValueError(
                    f"unknown stack layer {layer!r}; have {self.layer_ids}"
                ) from None
        idx = int(layer)
        if not 0 <= idx < len(self.layer_ids):
            raise ValueError(f"layer index {idx} out of range")
        return idx

    def prior(self, layer) -> KronCovariance:
        l = self.layer_index(layer)
        return KronCovariance([self.feature[l], self.output[l], self.task[l]])

    def priors(self) -> list:
        return [self.prior(l) for l in range(len(self.layer_ids))]


@dataclass
class OptimizerState:
    """Momentum buffers plus iteration and epoch counters."""

    velocity_trunk_w: list
    velocity_trunk_b: list
    velocity_stack_w: list
    velocity_stack_b: list
    iteration: int = 0
    epoch: int = 0

    @classmethod
    def zeros_like(cls, net: MultiTaskNet):
        return cls(
            velocity_trunk_w=[np.zeros_like(l.weight) for l in net.trunk],
            velocity_trunk_b=[np.zeros_like(l.bias) for l in net.trunk],
            velocity_stack_w=[np.zeros_like(w) for w in net.stack.weights],
            velocity_stack_b=[np.zeros_like(b) for b in net.stack.biases],
        )


class OpCounter:
    """Tallies floating-point multiply counts of covariance updates.

    Keys are ``mode{k}_solve`` (whitening triangular solves),
    ``mode{k}_gram`` (Gram products) and ``mode{k}_factor`` (Cholesky),
    accumulated over layers.
    """

    def __init__(self):
        self.counts = {}

    def add(self, key: str, n) -> None:
        self.counts[key] = self.counts.get(key, 0) + int(n)

    def __getitem__(self, key: str) -> int:
        return self.counts.get(key, 0)

    def total(self, prefix: str = "") -> int:
        return sum(v for k, v in self.counts.items() if k.startswith(prefix))


def _mode_gram(
    w: np.ndarray, factors: Sequence[SpdFactor], k: int, counter: OpCounter | None
) -> np.ndarray:
    """Gram matrix of mode ``k`` after whitening the other modes.

    Equals ``W_(k) (kron of other factors)^{-1} W_(k)^T`` and is
    symmetric PSD by construction.
    """
    dims = w.shape
    d = int(np.prod(dims))
    z = w
    for j in range(3):
        if j == k:
            continue
        moved = np.moveaxis(z, j, 0)
        flat = moved.reshape(dims[j], -1)
        sol = solve_triangular(factors[j].chol, flat, lower=True)
        z = np.moveaxis(sol.reshape(moved.shape), 0, j)
        if counter is not None:
            counter.add(f"mode{k + 1}_solve", dims[j] ** 2 * (d // dims[j]))
    rows = np.moveaxis(z, k, 0).reshape(dims[k], -1)
    gram = rows @ rows.T
    if counter is not None:
        counter.add(f"mode{k + 1}_gram", dims[k] ** 2 * (d // dims[k]))
    return gram


def _finish_factor(
    gram: np.ndarray,
    denom: float,
    eps: float,
    dim: int,
    counter: OpCounter | None,
    key: str,
    context: str,
):
    s = gram / denom + eps * np.eye(dim)
    s = s / np.trace(s)
    if counter is not None:
        counter.add(key, dim**3 // 3)
    try:
        return SpdFactor(s)
    except ValueError:
        raise EstimationError(f"{context}: covariance update is not positive definite") from None


def update_covariances(
    stack: TaskLayerStack,
    cov: CovarianceState,
    cfg: TrainConfig,
    counter: OpCounter | None = None,
) -> CovarianceState:
    """One cyclic re-estimation sweep over all prior factors.

    Per layer, the feature, output and task factors are updated in that
    order, each from the weights whitened by the other modes' most
    recent factors, then ridged with ``epsilon_ridge`` and scaled to
    unit trace.  With ``shared_task_sigma`` the task-mode Gram matrices
    are pooled across layers (weighted by ``D_in * D_out``) before the
    ridge and normalization.

    The mode-3 (task) step costs ``O(T^2 D_in D_out + T^3)`` arithmetic
    per layer: one Gram product against the pre-whitened weights plus
    one Cholesky.  Pass an :class:`OpCounter` to audit that.
    """
    if list(stack.layer_ids) != list(cov.layer_ids):
        raise ValueError("covariance state does not match the stack")
    new_feature = list(cov.feature)
    new_output = list(cov.output)
    new_task = list(cov.task)
    task_grams = []
    for l, w in enumerate(stack.weights):
        din, dout, t = w.shape
        lid = stack.layer_ids[l]

        factors = [new_feature[l], new_output[l], new_task[l]]
        gram = _mode_gram(w, factors, 0, counter)
        new_feature[l] = _finish_factor(
            gram, dout * t, cfg.epsilon_ridge, din, counter, "mode1_factor",
            f"layer {lid!r} feature mode",
        )

        factors = [new_feature[l], new_output[l], new_task[l]]
        gram = _mode_gram(w, factors, 1, counter)
        new_output[l] = _finish_factor(
            gram, din * t, cfg.epsilon_ridge, dout, counter, "mode2_factor",
            f"layer {lid!r} output mode",
        )

        factors = [new_feature[l], new_output[l], new_task[l]]
        gram = _mode_gram(w, factors, 2, counter)
        if cfg.shared_task_sigma:
            task_grams.append((gram, din * dout))
        else:
            new_task[l] = _finish_factor(
                gram, din * dout, cfg.epsilon_ridge, t, counter, "mode3_factor",
                f"layer {lid!r} task mode",
            )

    if cfg.shared_task_sigma:
        pooled = sum(g for g, _ in task_grams)
        weight = sum(wt for _, wt in task_grams)
        t = stack.num_tasks
        shared = _finish_factor(
            pooled, weight, cfg.epsilon_ridge, t, counter, "mode3_factor",
            "shared task mode",
        )
        new_task = [shared] * len(stack.weights)

    return CovarianceState(
        layer_ids=list(cov.layer_ids),
        feature=new_feature,
        output=new_output,
        task=new_task,
        shared_task=cfg.shared_task_sigma,
    )


def _check_data(net: MultiTaskNet, data: MultiTaskDataset, what: str):
    if data.num_tasks != net.num_tasks:
        raise ValueError(
            f"{what} has {data.num_tasks} tasks, network expects {net.num_tasks}"
        )
    if data.feature_dim != net.input_dim:
        raise ValueError(
            f"{what} feature dim {data.feature_dim} != network input "
            f"{net.input_dim}"
        )
    if data.num_classes != net.num_classes:
        raise ValueError(
            f"{what} has {data.num_classes} classes, network expects "
            f"{net.num_classes}"
        )


def sgd_epoch(
    net: MultiTaskNet,
    cov: CovarianceState,
    data: MultiTaskDataset,
    cfg: TrainConfig,
    state: OptimizerState,
) -> tuple:
    """One epoch of momentum SGD over the pooled examples.

    Examples of all tasks are shuffled together (child generator of
    ``cfg.seed`` and the epoch counter) and walked in batches.  Data
    gradients are averaged within the batch; the prior gradient of task
    ``t`` and layer ``l`` enters scaled by ``prior_weight * c_t /
    N_t`` with ``c_t`` the task's example count in the batch, so over
    the epoch each task accumulates its full prior gradient exactly
    once.  The velocity update is ``v = momentum * v - lr * g`` with
    task-specific layers at ``lr * new_layer_lr_multiplier``.

    Mutates ``net`` and ``state`` in place and returns them.
    """
    _check_data(net, data, "training data")
    stack = net.stack
    sizes = data.task_sizes
    task_of = np.concatenate(
        [np.full(n, t, dtype=int) for t, n in enumerate(sizes)]
    )
    row_of = np.concatenate([np.arange(n, dtype=int) for n in sizes])
    total = task_of.shape[0]

    rng = np.random.default_rng([cfg.seed, 0, state.epoch])
    perm = rng.permutation(total)

    use_prior = cfg.prior_weight > 0.0
    n_trunk = len(net.trunk)

    for start in range(0, total, cfg.batch_size):
        batch = perm[start : start + cfg.batch_size]
        bsz = batch.shape[0]
        g_trunk_w = [np.zeros_like(l.weight) for l in net.trunk]
        g_trunk_b = [np.zeros_like(l.bias) for l in net.trunk]
        g_stack_w = [np.zeros_like(w) for w in stack.weights]
        g_stack_b = [np.zeros_like(b) for b in stack.biases]

        counts = np.bincount(task_of[batch], minlength=net.num_tasks)
        for t in range(net.num_tasks):
            if counts[t] == 0:
                continue
            sel = batch[task_of[batch] == t]
            rows = row_of[sel]
            tg, sg = _batch_task_gradients(
                net, t, data.features[t][rows], data.labels[t][rows]
            )
            for i in range(n_trunk):
                g_trunk_w[i] += tg[i][0]
                g_trunk_b[i] += tg[i][1]
            for l in range(stack.num_layers):
                g_stack_w[l][:, :, t] += sg[l][0]
                g_stack_b[l][t] += sg[l][1]

        inv_b = 1.0 / bsz
        for i in range(n_trunk):
            g_trunk_w[i] *= inv_b
            g_trunk_b[i] *= inv_b
        for l in range(stack.num_layers):
            g_stack_w[l] *= inv_b
            g_stack_b[l] *= inv_b

        if use_prior:
            for l in range(stack.num_layers):
                # One inverse application per layer per batch covers all tasks.
                full = cov.prior(l).apply_inverse(stack.weights[l])
                for t in range(net.num_tasks):
                    if counts[t] == 0:
                        continue
                    scale = cfg.prior_weight * counts[t] / sizes[t]
                    g_stack_w[l][:, :, t] += scale * full[:, :, t]

        finite = all(
            np.isfinite(g).all()
            for gs in (g_trunk_w, g_trunk_b, g_stack_w, g_stack_b)
            for g in gs
        )
        if not finite:
            raise TrainingError(
                f"non-finite gradient at epoch {state.epoch}, "
                f"batch {start // cfg.batch_size}"
            )

        lr = learning_rate_at(cfg, state.iteration)
        lr_stack = lr * cfg.new_layer_lr_multiplier
        mu = cfg.momentum
        for i, layer in enumerate(net.trunk):
            state.velocity_trunk_w[i] = mu * state.velocity_trunk_w[i] - lr * g_trunk_w[i]
            state.velocity_trunk_b[i] = mu * state.velocity_trunk_b[i] - lr * g_trunk_b[i]
            layer.weight += state.velocity_trunk_w[i]
            layer.bias += state.velocity_trunk_b[i]
        for l in range(stack.num_layers):
            state.velocity_stack_w[l] = (
                mu * state.velocity_stack_w[l] - lr_stack * g_stack_w[l]
            )
            state.velocity_stack_b[l] = (
                mu * state.velocity_stack_b[l] - lr_stack * g_stack_b[l]
            )
            stack.weights[l] += state.velocity_stack_w[l]
            stack.biases[l] += state.velocity_stack_b[l]
        state.iteration += 1

    state.epoch += 1
    return net, state


def objective(
    net: MultiTaskNet,
    cov: CovarianceState,
    data: MultiTaskDataset,
    cfg: TrainConfig,
) -> float:
    """Total loss: summed cross-entropy plus the weighted prior term."""
    _check_data(net, data, "data")
    risk = sum(
        task_log_loss(net, t, data.features[t], data.labels[t])
        for t in range(data.num_tasks)
    )
    if cfg.prior_weight > 0.0:
        risk += cfg.prior_weight * prior_penalty(net.stack, cov.priors())
    return float(risk)


@dataclass
class EpochRecord:
    epoch: int
    objective: float
    train_accuracy: tuple
    test_accuracy: tuple | None
    residuals: tuple
    sgd_seconds: float
    cov_seconds: float


@dataclass
class TrainReport:
    """Per-epoch training curve plus factored timing columns.

    ``to_csv`` writes the deterministic part (objective, accuracies,
    covariance-update residuals); wall-clock phase timings go to a
    separate file via ``timings_to_csv`` so the report bytes depend
    only on the seed and config.
    """

    task_names: list
    layer_ids: list
    records: list = field(default_factory=list)

    def to_csv(self, path) -> None:
        header = ["epoch", "objective"]
        header += [f"train_acc_{name}" for name in self.task_names]
        has_test = any(r.test_accuracy is not None for r in self.records)
        if has_test:
            header += [f"test_acc_{name}" for name in self.task_names]
        header += [f"residual_{lid}" for lid in self.layer_ids]
        rows = []
        for r in self.records:
            row = [r.epoch, r.objective, *r.train_accuracy]
            if has_test:
                row += list(r.test_accuracy) if r.test_accuracy is not None else [
                    float("nan")
                ] * len(self.task_names)
            row += list(r.residuals)
            rows.append(row)
        write_csv_rows(path, header, rows)

    def timings_to_csv(self, path) -> None:
        write_csv_rows(
            path,
            ["epoch", "sgd_seconds", "covariance_seconds"],
            [[r.epoch, r.sgd_seconds, r.cov_seconds] for r in self.records],
        )

    @property
    def final_train_accuracy(self) -> tuple | None:
        return self.records[-1].train_accuracy if self.records else None

    @property
    def final_objective(self) -> float | None:
        return self.records[-1].objective if self.records else None


def _residual(old: CovarianceState, new: CovarianceState, l: int) -> float:
    return max(
        float(np.linalg.norm(a.matrix - b.matrix))
        for a, b in (
            (old.feature[l], new.feature[l]),
            (old.output[l], new.output[l]),
            (old.task[l], new.task[l]),
        )
    )


def train(
    net: MultiTaskNet,
    data: MultiTaskDataset,
    cfg: TrainConfig,
    eval_data: MultiTaskDataset | None = None,
) -> tuple:
    """Run the full joint loop; returns ``(net, covariances, report)``.

    Covariances start as unit-trace scaled identities.  Every epoch runs
    :func:`sgd_epoch`, one :func:`update_covariances` sweep, then scores
    the objective and per-task accuracies.  With ``epochs == 0`` the
    initialization is returned untouched and the report is empty.

    When ``cfg.prior_weight == 0`` the covariance refit is skipped: the
    prior has no influence on the parameters, so tasks train
    independently and the factors stay at their identity initialization.
    """
    _check_data(net, data, "training data")
    if eval_data is not None:
        _check_data(net, eval_data, "eval data")

    cov = CovarianceState.identity_for(net.stack, cfg.shared_task_sigma)
    state = OptimizerState.zeros_like(net)
    report = TrainReport(
        task_names=list(data.task_names), layer_ids=list(net.stack.layer_ids)
    )

    for _ in range(cfg.epochs):
        t0 = time.perf_counter()
        sgd_epoch(net, cov, data, cfg, state)
        t1 = time.perf_counter()
        if cfg.prior_weight > 0.0:
            new_cov = update_covariances(net.stack, cov, cfg)
        else:
            new_cov = cov
        t2 = time.perf_counter()

        residuals = tuple(
            _residual(cov, new_cov, l) for l in range(len(cov.layer_ids))
        )
        cov = new_cov
        obj = objective(net, cov, data, cfg)
        train_acc = tuple(
            accuracy(net, t, data.features[t], data.labels[t])
            for t in range(data.num_tasks)
        )
        test_acc = None
        if eval_data is not None:
            test_acc = tuple(
                accuracy(net, t, eval_data.features[t], eval_data.labels[t])
                for t in range(eval_data.num_tasks)
            )
        report.records.append(
            EpochRecord(
                epoch=state.epoch,
                objective=obj,
                train_accuracy=train_acc,
                test_accuracy=test_acc,
                residuals=residuals,
                sgd_seconds=t1 - t0,
                cov_seconds=t2 - t1,
            )
        )
    return net, cov, report


def extract_relationship(cov: CovarianceState, layer) -> np.ndarray:
    """Task correlation matrix of one layer's task-mode factor.

    Normalizes the covariance factor to correlations; the diagonal is
    exactly 1.  A non-positive diagonal entry raises
    :class:`EstimationError`.
    """
    l = cov.layer_index(layer)
    m = cov.task[l].matrix
    diag = np.diag(m)
    if np.any(diag <= 0):
        raise EstimationError(
            f"layer {cov.layer_ids[l]!r}: task variance is not positive"
        )
    scale = np.sqrt(diag)
    corr = m / np.outer(scale, scale)
    np.fill_diagonal(corr, 1.0)
    return corr
