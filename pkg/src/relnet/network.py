"""Multi-task feed-forward classifier with stacked task-specific layers.

The network is a shared trunk of dense layers followed by a stack of
task-specific layers.  Every task owns one slice of each stack layer:
layer ``l`` keeps its per-task weight matrices in a single order-3
tensor of shape ``(D_in, D_out, T)`` with tasks along the third mode,
which is exactly the arrangement the tensor-normal prior expects.

The prior couples tasks through layer-wise Kronecker-factored
covariances (feature mode, output mode, task mode).  Biases are not
regularized.  All parameter gradients are computed by hand with
reverse-mode accumulation; the softmax/cross-entropy pair is fused so
losses and gradients stay finite for logits of any magnitude.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .serialize import dump_json, load_json
from .tensor_normal import KronCovariance

__all__ = [
    "DenseLayer",
    "TaskLayerStack",
    "MultiTaskNet",
    "Gradients",
    "init_network",
    "forward",
    "predict",
    "accuracy",
    "softmax",
    "cross_entropy",
    "cross_entropy_from_logits",
    "task_log_loss",
    "backward",
    "prior_penalty",
    "prior_gradient",
    "prior_gradient_full",
    "save_checkpoint",
    "load_checkpoint",
]

_HIDDEN_ACTIVATIONS = ("relu", "identity")
CHECKPOINT_SCHEMA_VERSION = 1


@dataclass
class DenseLayer:
    """One shared dense layer: ``act(x @ weight + bias)``."""

    weight: np.ndarray
    bias: np.ndarray
    activation: str = "relu"

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=float)
        self.bias = np.asarray(self.bias, dtype=float)
        if self.weight.ndim != 2:
            raise ValueError(f"weight must be a matrix, got ndim {self.weight.ndim}")
        if self.bias.shape != (self.weight.shape[1],):
            raise ValueError(
                f"bias shape {self.bias.shape} does not match out dim "
                f"{self.weight.shape[1]}"
            )
        if self.activation not in _HIDDEN_ACTIVATIONS:
            raise ValueError(f"unsupported trunk activation {self.activation!r}")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]


@dataclass
class TaskLayerStack:
    """Task-specific layers stored as stacked order-3 weight tensors.

    ``weights[l][:, :, t]`` is the weight matrix of layer ``layer_ids[l]``
    for task ``t``; ``biases[l][t]`` is the matching bias row.  The last
    layer uses a softmax output, earlier ones ReLU (or identity).
    """

    layer_ids: list
    weights: list
    biases: list
    activations: list

    def __post_init__(self):
        n = len(self.layer_ids)
        if n == 0:
            raise ValueError("stack needs at least one task-specific layer")
        if len(set(self.layer_ids)) != n:
            raise ValueError("stack layer ids must be unique")
        if not (len(self.weights) == len(self.biases) == len(self.activations) == n):
            raise ValueError("stack fields must have one entry per layer id")
        self.weights = [np.asarray(w, dtype=float) for w in self.weights]
        self.biases = [np.asarray(b, dtype=float) for b in self.biases]
        tasks = None
        for lid, w, b, act in zip(
            self.layer_ids, self.weights, self.biases, self.activations
        ):
            if w.ndim != 3:
                raise ValueError(f"layer {lid!r}: weights must be order-3 tensors")
            din, dout, t = w.shape
            if tasks is None:
                tasks = t
            elif t != tasks:
                raise ValueError(f"layer {lid!r}: inconsistent task count")
            if b.shape != (t, dout):
                raise ValueError(
                    f"layer {lid!r}: bias shape {b.shape} != {(t, dout)}"
                )
        for prev, nxt in zip(self.weights, self.weights[1:]):
            if nxt.shape[0] != prev.shape[1]:
                raise ValueError("stack layer dims do not chain")
        for act in self.activations[:-1]:
            if act not in _HIDDEN_ACTIVATIONS:
                raise ValueError(f"unsupported hidden activation {act!r}")
        if self.activations[-1] != "softmax":
            raise ValueError("the final stack layer must use softmax")

    @property
    def num_tasks(self) -> int:
        return self.weights[0].shape[2]

    @property
    def num_layers(self) -> int:
        return len(self.layer_ids)

    def layer_index(self, layer) -> int:
        """Resolve a layer given by id or position."""
        if isinstance(layer, str):
            try:
                return self.layer_ids.index(layer)
            except ValueError:
                raise ValueError(
                    f"unknown stack layer {layer!r}; have {self.layer_ids}"
                ) from None
        idx = int(layer)
        if not 0 <= idx < self.num_layers:
            raise ValueError(f"stack layer index {idx} out of range")
        return idx

    def layer_dims(self, layer) -> tuple:
        """(D_in, D_out, T) of one stack layer."""
        return self.weights[self.layer_index(layer)].shape


@dataclass
class MultiTaskNet:
    """Shared trunk plus task-specific stack."""

    input_dim: int
    num_classes: int
    num_tasks: int
    trunk: list
    stack: TaskLayerStack

    def __post_init__(self):
        dim = self.input_dim
        for layer in self.trunk:
            if layer.in_dim != dim:
                raise ValueError("trunk layer dims do not chain from the input")
            dim = layer.out_dim
        if self.stack.weights[0].shape[0] != dim:
            raise ValueError(
                f"stack expects input dim {self.stack.weights[0].shape[0]}, "
                f"trunk produces {dim}"
            )
        if self.stack.weights[-1].shape[1] != self.num_classes:
            raise ValueError("final stack layer width must equal num_classes")
        if self.stack.num_tasks != self.num_tasks:
            raise ValueError("stack task count does not match num_tasks")


@dataclass
class Gradients:
    """Parameter gradients mirroring the network's storage layout.

    Stack gradients are dense ``(D_in, D_out, T)`` tensors; for a
    single-sample backward pass only the observed task's slice is
    nonzero.
    """

    trunk_weights: list = field(default_factory=list)
    trunk_biases: list = field(default_factory=list)
    stack_weights: list = field(default_factory=list)
    stack_biases: list = field(default_factory=list)


def init_network(
    input_dim: int,
    trunk_widths: Sequence[int],
    stack_widths: Sequence[int],
    num_tasks: int,
    rng: np.random.Generator,
    stack_ids: Sequence[str] | None = None,
    tied_tasks: bool = False,
) -> MultiTaskNet:
    """Build a network with seeded Gaussian weights and zero biases.

    ``stack_widths`` lists the output widths of the task-specific
    layers; the last entry is the class count.  Weights are drawn with
    standard deviation ``1/sqrt(fan_in)`` in a fixed order (trunk first,
    then stack), so a given generator state yields one network.

    With ``tied_tasks`` every task starts from the same stack weights
    (one draw broadcast across tasks), modelling tasks that branch off
    a common starting point.  Without it each task's slice is an
    independent draw, so hidden units of different tasks live in
    unrelated bases and elementwise cross-task coupling is meaningless
    for hidden layers.
    """
    if len(stack_widths) < 1:
        raise ValueError("need at least one task-specific layer")
    if num_tasks < 1:
        raise ValueError("need at least one task")
    if stack_ids is None:
        hidden = len(stack_widths) - 1
        if hidden == 0:
            stack_ids = ["classifier"]
        elif hidden == 1:
            stack_ids = ["bottleneck", "classifier"]
        else:
            stack_ids = [f"bottleneck{i + 1}" for i in range(hidden)] + ["classifier"]
    if len(stack_ids) != len(stack_widths):
        raise ValueError("stack_ids must match stack_widths")

    trunk = []
    dim = int(input_dim)
    for width in trunk_widths:
        w = rng.standard_normal((dim, width)) / np.sqrt(dim)
        trunk.append(DenseLayer(w, np.zeros(width), "relu"))
        dim = int(width)

    weights, biases, activations = [], [], []
    for i, width in enumerate(stack_widths):
        if tied_tasks:
            shared = rng.standard_normal((dim, width)) / np.sqrt(dim)
            w = np.repeat(shared[:, :, None], num_tasks, axis=2)
        else:
            w = rng.standard_normal((dim, width, num_tasks)) / np.sqrt(dim)
        weights.append(w)
        biases.append(np.zeros((num_tasks, width)))
        activations.append("softmax" if i == len(stack_widths) - 1 else "relu")
        dim = int(width)

    stack = TaskLayerStack(list(stack_ids), weights, biases, activations)
    return MultiTaskNet(
        input_dim=int(input_dim),
        num_classes=int(stack_widths[-1]),
        num_tasks=int(num_tasks),
        trunk=trunk,
        stack=stack,
    )


def softmax(z: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction; finite for any logits."""
    z = np.asarray(z, dtype=float)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(z, 0.0)
    return z


def _check_task(net: MultiTaskNet, task: int) -> int:
    task = int(task)
    if not 0 <= task < net.num_tasks:
        raise ValueError(f"task {task} out of range [0, {net.num_tasks})")
    return task


def _forward_cached(net: MultiTaskNet, task: int, x: np.ndarray):
    """Run the batched forward pass, keeping per-layer caches.

    Returns ``(inputs, pre_acts, logits)`` where ``inputs[l]`` is the
    activation fed into layer ``l`` and ``pre_acts[l]`` its
    pre-activation.  The final softmax is left to the caller.
    """
    inputs, pre_acts = [], []
    h = x
    specs = [(layer.weight, layer.bias, layer.activation) for layer in net.trunk]
    for w, b, act in specs:
        inputs.append(h)
        z = h @ w + b
        pre_acts.append(z)
        h = _activate(z, act)
    stack = net.stack
    for l in range(stack.num_layers):
        w = stack.weights[l][:, :, task]
        b = stack.biases[l][task]
        inputs.append(h)
        z = h @ w + b
        pre_acts.append(z)
        if l < stack.num_layers - 1:
            h = _activate(z, stack.activations[l])
    return inputs, pre_acts, pre_acts[-1]


def _as_batch(net: MultiTaskNet, x) -> tuple:
    arr = np.asarray(x, dtype=float)
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != net.input_dim:
        raise ValueError(
            f"expected features of dim {net.input_dim}, got shape {np.shape(x)}"
        )
    return arr, single


def logits(net: MultiTaskNet, task: int, x) -> np.ndarray:
    """Classifier pre-activations for one task."""
    task = _check_task(net, task)
    arr, single = _as_batch(net, x)
    _, _, out = _forward_cached(net, task, arr)
    return out[0] if single else out


def forward(net: MultiTaskNet, task: int, x) -> np.ndarray:
    """Class probabilities for ``x`` under task ``task``.

    Accepts a single feature vector or a batch with rows as examples.
    """
    return softmax(logits(net, task, x))


def predict(net: MultiTaskNet, task: int, x) -> np.ndarray:
    """Most probable class per example; ties break toward the lower index."""
    out = logits(net, task, x)
    return np.argmax(out, axis=-1)


def accuracy(net: MultiTaskNet, task: int, x, labels) -> float:
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("cannot score an empty set")
    return float(np.mean(predict(net, task, x) == labels))


def cross_entropy(probs, label: int) -> float:
    """``-ln probs[label]`` for an explicit probability vector."""
    probs = np.asarray(probs, dtype=float)
    label = int(label)
    if not 0 <= label < probs.shape[-1]:
        raise ValueError(f"label {label} out of range")
    with np.errstate(divide="ignore"):
        return float(-np.log(probs[label]))


def cross_entropy_from_logits(z, label: int) -> float:
    """Fused log-sum-exp cross-entropy, finite for any logit magnitude."""
    z = np.asarray(z, dtype=float)
    label = int(label)
    if not 0 <= label < z.shape[-1]:
        raise ValueError(f"label {label} out of range")
    m = z.max()
    return float(m + np.log(np.sum(np.exp(z - m))) - z[label])


def task_log_loss(net: MultiTaskNet, task: int, x, labels) -> float:
    """Summed cross-entropy of a batch under one task."""
    z = logits(net, task, x)
    if z.ndim == 1:
        z = z[None, :]
    labels = np.asarray(labels, dtype=int).reshape(-1)
    m = z.max(axis=1)
    lse = m + np.log(np.exp(z - m[:, None]).sum(axis=1))
    return float(np.sum(lse - z[np.arange(z.shape[0]), labels]))


def _batch_task_gradients(net: MultiTaskNet, task: int, x: np.ndarray, labels):
    """Gradients of the summed cross-entropy of a batch for one task.

    Returns ``(trunk_grads, stack_grads)`` where trunk_grads is a list
    of ``(dW, db)`` and stack_grads a list of per-layer ``(dW_t, db_t)``
    slices for the given task.
    """
    labels = np.asarray(labels, dtype=int).reshape(-1)
    inputs, pre_acts, out = _forward_cached(net, task, x)
    probs = softmax(out)
    dz = probs
    dz[np.arange(dz.shape[0]), labels] -= 1.0

    n_trunk = len(net.trunk)
    stack = net.stack
    trunk_grads = [None] * n_trunk
    stack_grads = [None] * stack.num_layers

    for l in range(n_trunk + stack.num_layers - 1, -1, -1):
        a = inputs[l]
        dw = a.T @ dz
        db = dz.sum(axis=0)
        if l >= n_trunk:
            stack_grads[l - n_trunk] = (dw, db)
            w = stack.weights[l - n_trunk][:, :, task]
        else:
            trunk_grads[l] = (dw, db)
            w = net.trunk[l].weight
        if l > 0:
            da = dz @ w.T
            act = (
                net.trunk[l - 1].activation
                if l - 1 < n_trunk
                else stack.activations[l - 1 - n_trunk]
            )
            if act == "relu":
                dz = da * (pre_acts[l - 1] > 0)
            else:
                dz = da
    return trunk_grads, stack_grads


def backward(net: MultiTaskNet, task: int, x, label: int) -> Gradients:
    """Cross-entropy gradient of one labeled example.

    Stack gradients come back as dense tensors in which only the slice
    of ``task`` is nonzero, matching the stacked parameter layout.
    ReLU uses subgradient 0 at 0.
    """
    task = _check_task(net, task)
    arr, single = _as_batch(net, x)
    if not single:
        raise ValueError("backward takes a single example")
    label = int(label)
    if not 0 <= label < net.num_classes:
        raise ValueError(f"label {label} out of range")
    trunk_grads, stack_grads = _batch_task_gradients(net, task, arr, [label])

    grads = Gradients()
    for dw, db in trunk_grads:
        grads.trunk_weights.append(dw)
        grads.trunk_biases.append(db)
    stack = net.stack
    for l, (dw, db) in enumerate(stack_grads):
        dense_w = np.zeros_like(stack.weights[l])
        dense_w[:, :, task] = dw
        dense_b = np.zeros_like(stack.biases[l])
        dense_b[task] = db
        grads.stack_weights.append(dense_w)
        grads.stack_biases.append(dense_b)
    return grads


def _check_priors(stack: TaskLayerStack, priors: Sequence[KronCovariance]):
    if len(priors) != stack.num_layers:
        raise ValueError(
            f"need one covariance per stack layer ({stack.num_layers}), "
            f"got {len(priors)}"
        )
    for lid, w, cov in zip(stack.layer_ids, stack.weights, priors):
        if cov.dims != w.shape:
            raise ValueError(
                f"layer {lid!r}: covariance dims {cov.dims} != weights {w.shape}"
            )


def prior_penalty(stack: TaskLayerStack, priors: Sequence[KronCovariance]) -> float:
    """Negative log prior of the stacked weights (up to constants).

    Per layer: ``0.5 * (vec(W)^T Sigma^{-1} vec(W) - D_in*D_out *
    logdet(Sigma_task))`` where ``Sigma_task`` is the task-mode factor.
    The quadratic form runs through per-mode triangular solves.
    """
    _check_priors(stack, priors)
    total = 0.0
    for w, cov in zip(stack.weights, priors):
        z = cov.whiten(w)
        din, dout, _ = w.shape
        total += 0.5 * (float(np.sum(z * z)) - din * dout * cov.factors[2].logdet)
    return total


def prior_gradient_full(
    stack: TaskLayerStack, priors: Sequence[KronCovariance], layer
) -> np.ndarray:
    """``Sigma^{-1} vec(W)`` of one stack layer, as a ``(D_in, D_out, T)``
    tensor covering every task."""
    _check_priors(stack, priors)
    l = stack.layer_index(layer)
    return priors[l].apply_inverse(stack.weights[l])


def prior_gradient(
    stack: TaskLayerStack, priors: Sequence[KronCovariance], task: int, layer
) -> np.ndarray:
    """Task ``task``'s slice of the prior gradient for one stack layer."""
    full = prior_gradient_full(stack, priors, layer)
    task = int(task)
    if not 0 <= task < stack.num_tasks:
        raise ValueError(f"task {task} out of range")
    return full[:, :, task]


def _layer_doc(w: np.ndarray, b: np.ndarray, activation: str) -> dict:
    return {
        "in_dim": int(w.shape[0]),
        "out_dim": int(w.shape[1]),
        "activation": activation,
        "weight": [float(v) for v in w.ravel()],
        "bias": [float(v) for v in b.ravel()],
    }


def save_checkpoint(net: MultiTaskNet, path, task_names=None) -> None:
    """Write the network to JSON with a fixed field order.

    Weight tensors are flattened row-major next to their dims, floats
    carry 17 significant digits, so save/load/save round-trips are
    byte-stable.
    """
    if task_names is not None and len(task_names) != net.num_tasks:
        raise ValueError("task_names must have one entry per task")
    doc = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "input_dim": net.input_dim,
        "num_classes": net.num_classes,
        "num_tasks": net.num_tasks,
        "task_names": list(task_names) if task_names is not None else None,
        "trunk": [
            _layer_doc(layer.weight, layer.bias, layer.activation)
            for layer in net.trunk
        ],
        "stack": {
            "layer_ids": list(net.stack.layer_ids),
            "layers": [
                {
                    "id": lid,
                    "num_tasks": net.num_tasks,
                    **_layer_doc(w, b, act),
                }
                for lid, w, b, act in zip(
                    net.stack.layer_ids,
                    net.stack.weights,
                    net.stack.biases,
                    net.stack.activations,
                )
            ],
        },
    }
    dump_json(doc, path)


def load_checkpoint(path) -> tuple:
    """Read a checkpoint; returns ``(net, task_names)``."""
    doc = load_json(path)
    if not isinstance(doc, dict) or doc.get("schema_version") != CHECKPOINT_SCHEMA_VERSION:
        raise ValueError(
            f"unsupported checkpoint schema: {doc.get('schema_version')!r}"
            if isinstance(doc, dict)
            else "checkpoint must be a JSON object"
        )
    try:
        trunk = [
            DenseLayer(
                np.array(entry["weight"], dtype=float).reshape(
                    entry["in_dim"], entry["out_dim"]
                ),
                np.array(entry["bias"], dtype=float),
                entry["activation"],
            )
            for entry in doc["trunk"]
        ]
        num_tasks = int(doc["num_tasks"])
        ids, weights, biases, activations = [], [], [], []
        for entry in doc["stack"]["layers"]:
            ids.append(entry["id"])
            weights.append(
                np.array(entry["weight"], dtype=float).reshape(
                    entry["in_dim"], entry["out_dim"], num_tasks
                )
            )
            biases.append(
                np.array(entry["bias"], dtype=float).reshape(
                    num_tasks, entry["out_dim"]
                )
            )
            activations.append(entry["activation"])
        if ids != doc["stack"]["layer_ids"]:
            raise ValueError("checkpoint stack ids are inconsistent")
        net = MultiTaskNet(
            input_dim=int(doc["input_dim"]),
            num_classes=int(doc["num_classes"]),
            num_tasks=num_tasks,
            trunk=trunk,
            stack=TaskLayerStack(ids, weights, biases, activations),
        )
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed checkpoint: {exc}") from None
    return net, doc.get("task_names")
