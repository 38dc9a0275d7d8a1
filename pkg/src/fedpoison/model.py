"""Small fully connected classifier with manual backpropagation.

Parameters live in a single flat float64 vector so that attacks and
aggregation rules can treat models as points in R^d. Hidden layers use ReLU
(subgradient 0 at exactly 0); the output layer is linear with softmax applied
by the loss functions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError


@dataclass(frozen=True)
class MlpArchitecture:
    """Layer sizes: (input dim, hidden..., class count)."""

    layer_sizes: tuple[int, ...]

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2:
            raise ContractError("need at least input and output layers")
        if any(s < 1 for s in sizes):
            raise ContractError(f"layer sizes must be positive: {sizes}")
        if sizes[-1] < 2:
            raise ContractError("need at least 2 output classes")

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def num_classes(self) -> int:
        return self.layer_sizes[-1]

    @property
    def param_count(self) -> int:
        return sum(
            n_in * n_out + n_out
            for n_in, n_out in zip(self.layer_sizes, self.layer_sizes[1:])
        )


@dataclass
class LabeledBatch:
    """A batch of feature rows with integer class labels."""

    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2:
            raise ContractError(f"inputs must be 2-D, got shape {self.inputs.shape}")
        if self.labels.shape != (self.inputs.shape[0],):
            raise ContractError("one label per input row required")
        if len(self) < 1:
            raise ContractError("batch must contain at least one sample")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def subset(self, idx) -> "LabeledBatch":
        return LabeledBatch(self.inputs[idx], self.labels[idx])


def _check_labels(batch: LabeledBatch, num_classes: int) -> None:
    if batch.labels.min() < 0 or batch.labels.max() >= num_classes:
        raise ContractError(f"labels must lie in [0, {num_classes})")


def init_params(arch: MlpArchitecture, seed: int) -> np.ndarray:
    """Glorot-uniform weights (bound sqrt(6/(n_in+n_out))), zero biases."""
    rng = np.random.default_rng(seed)
    chunks = []
    for n_in, n_out in zip(arch.layer_sizes, arch.layer_sizes[1:]):
        bound = np.sqrt(6.0 / (n_in + n_out))
        chunks.append(rng.uniform(-bound, bound, size=n_in * n_out))
        chunks.append(np.zeros(n_out))
    return np.concatenate(chunks)


def _unpack(arch: MlpArchitecture, params: np.ndarray):
    """Views (no copies) of the flat vector as per-layer (W, b) pairs."""
    if params.shape != (arch.param_count,):
        raise ContractError(
            f"params has dim {params.shape}, architecture needs {arch.param_count}"
        )
    layers = []
    off = 0
    for n_in, n_out in zip(arch.layer_sizes, arch.layer_sizes[1:]):
        w = params[off : off + n_in * n_out].reshape(n_in, n_out)
        off += n_in * n_out
        b = params[off : off + n_out]
        off += n_out
        layers.append((w, b))
    return layers


def _forward(arch: MlpArchitecture, params: np.ndarray, inputs: np.ndarray):
    """Forward pass; returns logits and the per-layer activations for backprop."""
    layers = _unpack(arch, params)
    acts = [np.asarray(inputs, dtype=np.float64)]
    for i, (w, b) in enumerate(layers):
        z = acts[-1] @ w + b
        if i < len(layers) - 1:
            z = np.maximum(z, 0.0)
        acts.append(z)
    return acts[-1], acts


def _backward(
    arch: MlpArchitecture, params: np.ndarray, acts, dlogits: np.ndarray
) -> np.ndarray:
    """Backprop a gradient at the logits down to a flat parameter gradient."""
    layers = _unpack(arch, params)
    grad = np.empty_like(params)
    off = params.shape[0]
    delta = dlogits
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        a_in = acts[i]
        db = delta.sum(axis=0)
        dw = a_in.T @ delta
        off -= db.shape[0]
        grad[off : off + db.shape[0]] = db
        off -= dw.size
        grad[off : off + dw.size] = dw.ravel()
        if i > 0:
            delta = delta @ w.T
            delta = delta * (acts[i] > 0.0)  # ReLU subgradient, 0 at the kink
    return grad


def forward_logits(arch: MlpArchitecture, params: np.ndarray, inputs: np.ndarray) -> np.ndarray:
    logits, _ = _forward(arch, params, inputs)
    return logits


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction for overflow safety."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict_probs(arch: MlpArchitecture, params: np.ndarray, batch: LabeledBatch) -> np.ndarray:
    """Class probability rows (each sums to 1) for every sample in the batch."""
    return softmax(forward_logits(arch, params, batch.inputs))


def hinge_poison_loss(probs_row: np.ndarray, true_label: int) -> float:
    """max(0, P_y - max_{j != y} P_j): zero iff the sample is misclassified or tied."""
    p = np.asarray(probs_row, dtype=np.float64)
    if p.shape[0] < 2:
        raise ContractError("need at least two classes")
    if not 0 <= true_label < p.shape[0]:
        raise ContractError(f"label {true_label} out of range")
    others = np.delete(p, true_label)
    return float(max(0.0, p[true_label] - others.max()))


def _hinge_batch_loss_and_dlogits(probs: np.ndarray, labels: np.ndarray):
    n, num_classes = probs.shape
    class_idx = np.arange(num_classes)
    p_true = probs[np.arange(n), labels]
    masked = np.where(class_idx[None, :] == labels[:, None], -np.inf, probs)
    runner_up = masked.argmax(axis=1)
    p_runner = probs[np.arange(n), runner_up]
    margins = p_true - p_runner
    active = margins > 0.0
    loss = float(np.where(active, margins, 0.0).mean())

    # dL/dp for active rows is e_y - e_{j*}; through the softmax Jacobian:
    # dL/dz_k = p_k (g_k - <g, p>) with g = e_y - e_{j*}
    g = np.zeros_like(probs)
    rows = np.arange(n)[active]
    g[rows, labels[active]] = 1.0
    g[rows, runner_up[active]] -= 1.0
    gp = (g * probs).sum(axis=1, keepdims=True)
    dlogits = probs * (g - gp) / n
    return loss, dlogits


def ce_loss(arch: MlpArchitecture, params: np.ndarray, batch: LabeledBatch) -> float:
    """Mean cross-entropy without the backward pass."""
    _check_labels(batch, arch.num_classes)
    probs = softmax(forward_logits(arch, params, batch.inputs))
    return float(-np.log(probs[np.arange(len(batch)), batch.labels] + 1e-300).mean())


def ce_loss_and_grad(
    arch: MlpArchitecture, params: np.ndarray, batch: LabeledBatch
) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its parameter gradient."""
    _check_labels(batch, arch.num_classes)
    logits, acts = _forward(arch, params, batch.inputs)
    probs = softmax(logits)
    n = len(batch)
    eps = 1e-300  # guards log(0) for saturated wrong predictions
    loss = float(-np.log(probs[np.arange(n), batch.labels] + eps).mean())
    dlogits = probs.copy()
    dlogits[np.arange(n), batch.labels] -= 1.0
    dlogits /= n
    return loss, _backward(arch, params, acts, dlogits)


def poison_objective(
    arch: MlpArchitecture,
    params: np.ndarray,
    reference: np.ndarray,
    batch: LabeledBatch,
    lam: float,
) -> tuple[float, np.ndarray]:
    """Perturbation-penalized misclassification objective.

    loss = lam * ||params - reference||_2 + mean hinge_poison_loss; minimizing
    it pushes every sample off its true label while staying close to the
    reference model. The norm term's gradient is defined as 0 at params ==
    reference.
    """
    if lam < 0:
        raise ContractError(f"lambda must be nonnegative, got {lam}")
    if params.shape != reference.shape:
        raise ContractError("params and reference dims differ")
    _check_labels(batch, arch.num_classes)
    logits, acts = _forward(arch, params, batch.inputs)
    probs = softmax(logits)
    hinge, dlogits = _hinge_batch_loss_and_dlogits(probs, batch.labels)
    grad = _backward(arch, params, acts, dlogits)
    delta = params - reference
    dist = float(np.linalg.norm(delta))
    if dist > 0.0:
        grad = grad + (lam / dist) * delta
    return lam * dist + hinge, grad


@dataclass
class OptimizerState:
    """Adam accumulators for one flat parameter vector."""

    lr: float
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, dim: int, lr: float) -> "OptimizerState":
        if lr <= 0:
            raise ContractError(f"learning rate must be positive, got {lr}")
        return cls(lr=lr, m=np.zeros(dim), v=np.zeros(dim))


def adam_step(
    state: OptimizerState, params: np.ndarray, grad: np.ndarray
) -> tuple[np.ndarray, OptimizerState]:
    """One Adam update with bias correction; returns new params and state."""
    if params.shape != grad.shape or params.shape != state.m.shape:
        raise ContractError("params/grad/state dims differ")
    t = state.step + 1
    m = state.beta1 * state.m + (1 - state.beta1) * grad
    v = state.beta2 * state.v + (1 - state.beta2) * grad * grad
    m_hat = m / (1 - state.beta1**t)
    v_hat = v / (1 - state.beta2**t)
    new_params = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    new_state = OptimizerState(
        lr=state.lr, m=m, v=v, step=t,
        beta1=state.beta1, beta2=state.beta2, eps=state.eps,
    )
    return new_params, new_state


def minibatches(n: int, batch_size: int, rng: np.random.Generator):
    """Deterministic shuffled index blocks covering range(n); last may be short."""
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def local_train(
    arch: MlpArchitecture,
    params: np.ndarray,
    data: LabeledBatch,
    epochs: int,
    batch_size: int,
    lr: float,
    seed: int,
) -> np.ndarray:
    """Mini-batch Adam on cross-entropy; the shuffle is seeded per (seed, epoch)."""
    if epochs < 1:
        raise ContractError(f"epochs must be >= 1, got {epochs}")
    if batch_size < 1:
        raise ContractError(f"batch size must be >= 1, got {batch_size}")
    state = OptimizerState.fresh(params.shape[0], lr)
    for epoch in range(epochs):
        rng = np.random.default_rng([seed, epoch])
        for idx in minibatches(len(data), batch_size, rng):
            _, grad = ce_loss_and_grad(arch, params, data.subset(idx))
            params, state = adam_step(state, params, grad)
    return params


def accuracy(arch: MlpArchitecture, params: np.ndarray, data: LabeledBatch) -> float:
    """Fraction of argmax-correct predictions; ties go to the lowest class index."""
    logits = forward_logits(arch, params, data.inputs)
    return float((logits.argmax(axis=1) == data.labels).mean())
