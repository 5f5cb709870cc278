"""Small feedforward networks: affine + ReLU stacks trained with SGD.

Houses both the soft classifier (K outputs, softmax downstream) and the
discriminator body (1 output).  Forward and reverse passes are exact
float64 numpy; reverse mode supplies input gradients for attacks and
parameter gradients for training.  Checkpoints are a bit-exact binary
format (magic ``SCKPT1\\n``).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CheckpointError, TrainingDiverged
from .fileio import atomic_write_bytes
from .numerics import RngStream
from .synthdata import LabeledDataset, OodDataset

MAGIC = b"SCKPT1\n"


@dataclass(frozen=True)
class MlpModel:
    """Affine/ReLU stack: ReLU between layers, identity at the output."""

    weights: tuple          # per layer, (out, in) float64
    biases: tuple           # per layer, (out,) float64

    def __post_init__(self):
        weights = tuple(np.asarray(w, dtype=float) for w in self.weights)
        biases = tuple(np.asarray(b, dtype=float) for b in self.biases)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "biases", biases)
        if len(weights) != len(biases) or not weights:
            raise ValueError("need one bias vector per weight matrix")
        for i, (w, b) in enumerate(zip(weights, biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ValueError(f"layer {i}: shape mismatch {w.shape}/{b.shape}")
            if i > 0 and w.shape[1] != weights[i - 1].shape[0]:
                raise ValueError(f"layer {i}: dimension chain broken")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {i}: non-finite parameters")

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def layer_count(self) -> int:
        return len(self.weights)


def _as_batch(x: np.ndarray, dim: int):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        if x.shape[0] != dim:
            raise ValueError(f"input dim {x.shape[0]} != model dim {dim}")
        return x[None, :], True
    if x.ndim != 2 or x.shape[1] != dim:
        raise ValueError(f"input shape {x.shape} incompatible with dim {dim}")
    return x, False


def forward_logits(model: MlpModel, x: np.ndarray) -> np.ndarray:
    """Logits for one point (d,) -> (K,) or a batch (n, d) -> (n, K)."""
    batch, squeeze = _as_batch(x, model.input_dim)
    h = batch
    for w, b in zip(model.weights[:-1], model.biases[:-1]):
        h = np.maximum(h @ w.T + b, 0.0)
    out = h @ model.weights[-1].T + model.biases[-1]
    return out[0] if squeeze else out


def _forward_cached(model: MlpModel, batch: np.ndarray):
    """Forward pass keeping pre-activations for reverse mode."""
    pre = []
    h = batch
    for w, b in zip(model.weights[:-1], model.biases[:-1]):
        z = h @ w.T + b
        pre.append(z)
        h = np.maximum(z, 0.0)
    logits = h @ model.weights[-1].T + model.biases[-1]
    return logits, pre


def input_grad_from_logit_grad(model: MlpModel, x: np.ndarray,
                               glogits: np.ndarray) -> np.ndarray:
    """Reverse-mode input gradient given the upstream dL/dlogits."""
    batch, squeeze = _as_batch(x, model.input_dim)
    glogits = np.atleast_2d(np.asarray(glogits, dtype=float))
    _, pre = _forward_cached(model, batch)
    g = glogits
    for i in range(model.layer_count - 1, 0, -1):
        g = (g @ model.weights[i]) * (pre[i - 1] > 0.0)
    g = g @ model.weights[0]
    return g[0] if squeeze else g


def softmax(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    if not temperature > 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    z = np.asarray(logits, dtype=float) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def msp(logits: np.ndarray, temperature: float = 1.0):
    """Maximum softmax probability, the confidence score."""
    p = softmax(logits, temperature).max(axis=-1)
    return float(p) if np.ndim(p) == 0 else p


def energy_score(logits: np.ndarray, temperature: float = 1.0):
    """-T * logsumexp(logits / T), computed with max subtraction."""
    if not temperature > 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    z = np.asarray(logits, dtype=float) / temperature
    m = z.max(axis=-1, keepdims=True)
    lse = m[..., 0] + np.log(np.exp(z - m).sum(axis=-1))
    out = -temperature * lse
    return float(out) if np.ndim(out) == 0 else out


def input_gradient(model: MlpModel, x: np.ndarray, head) -> np.ndarray:
    """Exact gradient of a scalar head with respect to the input.

    ``head`` is ``("logit", c)``, ``("msp_of_class", c)`` or ``"msp_max"``;
    the msp heads differentiate the softmax branch chosen at x.
    """
    batch, squeeze = _as_batch(x, model.input_dim)
    logits = forward_logits(model, batch)
    k = model.output_dim
    if head == "msp_max":
        cls = logits.argmax(axis=1)
        glogits = _softmax_class_grad(logits, cls)
    elif isinstance(head, tuple) and head[0] == "logit":
        glogits = np.zeros_like(logits)
        glogits[:, int(head[1])] = 1.0
    elif isinstance(head, tuple) and head[0] == "msp_of_class":
        cls = np.full(len(batch), int(head[1]))
        glogits = _softmax_class_grad(logits, cls)
    else:
        raise ValueError(f"unknown head {head!r}")
    if k < 1:
        raise ValueError("model has no outputs")
    g = input_grad_from_logit_grad(model, batch, glogits)
    return g[0] if squeeze else g


def _softmax_class_grad(logits: np.ndarray, cls: np.ndarray) -> np.ndarray:
    """d softmax(logits)_cls / d logits = p_c * (onehot_c - p)."""
    p = softmax(logits)
    rows = np.arange(len(logits))
    pc = p[rows, cls]
    g = -p * pc[:, None]
    g[rows, cls] += pc
    return g


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 128
    learning_rate: float = 0.05
    momentum: float = 0.9
    oe_weight: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.oe_weight < 0:
            raise ValueError("oe_weight must be >= 0")


def init_model(input_dim: int, hidden: tuple, output_dim: int,
               stream: RngStream) -> MlpModel:
    """He-initialized stack input_dim -> hidden... -> output_dim."""
    dims = (input_dim, *hidden, output_dim)
    weights, biases = [], []
    for i in range(len(dims) - 1):
        gen = stream.child(i).generator()
        scale = np.sqrt(2.0 / dims[i])
        weights.append(scale * gen.standard_normal((dims[i + 1], dims[i])))
        biases.append(np.zeros(dims[i + 1]))
    return MlpModel(weights=tuple(weights), biases=tuple(biases))


class _SgdState:
    def __init__(self, model: MlpModel, cfg: TrainConfig):
        self.weights = [w.copy() for w in model.weights]
        self.biases = [b.copy() for b in model.biases]
        self.vel_w = [np.zeros_like(w) for w in self.weights]
        self.vel_b = [np.zeros_like(b) for b in self.biases]
        self.cfg = cfg

    def model(self) -> MlpModel:
        return MlpModel(weights=tuple(w.copy() for w in self.weights),
                        biases=tuple(b.copy() for b in self.biases))

    def step(self, grads_w, grads_b):
        lr, mu = self.cfg.learning_rate, self.cfg.momentum
        for i in range(len(self.weights)):
            self.vel_w[i] = mu * self.vel_w[i] - lr * grads_w[i]
            self.vel_b[i] = mu * self.vel_b[i] - lr * grads_b[i]
            self.weights[i] += self.vel_w[i]
            self.biases[i] += self.vel_b[i]


def _param_grads(state: _SgdState, batch: np.ndarray, gz: np.ndarray):
    """Backprop dL/dlogits through the current parameters."""
    pre, acts = [], [batch]
    h = batch
    for w, b in zip(state.weights[:-1], state.biases[:-1]):
        z = h @ w.T + b
        pre.append(z)
        h = np.maximum(z, 0.0)
        acts.append(h)
    grads_w, grads_b = [None] * len(state.weights), [None] * len(state.weights)
    g = gz
    for i in range(len(state.weights) - 1, -1, -1):
        grads_w[i] = g.T @ acts[i]
        grads_b[i] = g.sum(axis=0)
        if i > 0:
            g = (g @ state.weights[i]) * (pre[i - 1] > 0.0)
    return grads_w, grads_b


def cross_entropy_loss(model: MlpModel, points: np.ndarray,
                       labels: np.ndarray) -> float:
    logits = forward_logits(model, points)
    z = logits - logits.max(axis=1, keepdims=True)
    log_p = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-log_p[np.arange(len(labels)), labels].mean())


def train_classifier(data: LabeledDataset, cfg: TrainConfig,
                     ood: OodDataset | None = None,
                     hidden: tuple = (64, 64),
                     output_dim: int | None = None) -> MlpModel:
    """Cross-entropy SGD with momentum; optional outlier-exposure term.

    The OE term is the cross-entropy to the uniform distribution over the
    K classes, evaluated on OOD minibatches and weighted by
    ``cfg.oe_weight``; it is skipped entirely (with no RNG consumption)
    when disabled, so a zero weight reproduces the plain run bit-exactly.
    """
    if len(data) == 0:
        raise ValueError("training data must be nonempty")
    k = int(data.labels.max()) + 1 if output_dim is None else output_dim
    root = RngStream(cfg.seed)
    state = _SgdState(init_model(data.points.shape[1], hidden, k,
                                 root.child(0)), cfg)

    use_oe = ood is not None and cfg.oe_weight > 0 and len(ood) > 0
    n = len(data)
    for epoch in range(cfg.epochs):
        perm = root.child(1, epoch).generator().permutation(n)
        if use_oe:
            ood_perm = root.child(2, epoch).generator().permutation(len(ood))
            ood_cursor = 0
        epoch_loss = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            batch, labels = data.points[idx], data.labels[idx]
            logits = _batch_logits(state, batch)
            p = softmax(logits)
            onehot = np.zeros_like(p)
            onehot[np.arange(len(idx)), labels] = 1.0
            gz = (p - onehot) / len(idx)
            loss = float(-np.log(p[np.arange(len(idx)), labels] + 1e-300).mean())

            if use_oe:
                take = min(len(idx), len(ood))
                sel = ood_perm[(ood_cursor + np.arange(take)) % len(ood)]
                ood_cursor = (ood_cursor + take) % len(ood)
                ood_batch = ood.points[sel]
                ood_logits = _batch_logits(state, ood_batch)
                q = softmax(ood_logits)
                # cross-entropy to uniform: -(1/K) sum_y log q_y
                loss += cfg.oe_weight * float(
                    -np.log(q + 1e-300).mean(axis=1).mean())
                g_ood = cfg.oe_weight * (q - 1.0 / k) / take
                gw_id, gb_id = _param_grads(state, batch, gz)
                gw_ood, gb_ood = _param_grads(state, ood_batch, g_ood)
                grads_w = [a + b for a, b in zip(gw_id, gw_ood)]
                grads_b = [a + b for a, b in zip(gb_id, gb_ood)]
            else:
                grads_w, grads_b = _param_grads(state, batch, gz)

            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
            state.step(grads_w, grads_b)
            epoch_loss += loss
        if not np.isfinite(epoch_loss):
            raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
    return state.model()


def _batch_logits(state: _SgdState, batch: np.ndarray) -> np.ndarray:
    h = batch
    for w, b in zip(state.weights[:-1], state.biases[:-1]):
        h = np.maximum(h @ w.T + b, 0.0)
    return h @ state.weights[-1].T + state.biases[-1]


def classifier_accuracy(model: MlpModel, data: LabeledDataset) -> float:
    pred = forward_logits(model, data.points).argmax(axis=1)
    return float((pred == data.labels).mean())


def save_model(model: MlpModel, path) -> None:
    atomic_write_bytes(path, MAGIC + model_payload(model))


def model_payload(model: MlpModel) -> bytes:
    parts = [struct.pack("<I", model.layer_count)]
    for w, b in zip(model.weights, model.biases):
        out_dim, in_dim = w.shape
        parts.append(struct.pack("<II", in_dim, out_dim))
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return b"".join(parts)


def load_model(path) -> MlpModel:
    buf = Path(path).read_bytes()
    if len(buf) < len(MAGIC):
        raise CheckpointError(f"{path}: truncated header")
    head = buf[:len(MAGIC)]
    if head != MAGIC:
        if head[:5] == b"SCKPT" and head[6:7] == b"\n" and head[5:6] != b"1":
            raise CheckpointError(
                f"{path}: unsupported checkpoint version {head[5:6]!r}")
        raise CheckpointError(f"{path}: bad magic {head!r}")
    return parse_payload(buf[len(MAGIC):], str(path))


def parse_payload(buf: bytes, origin: str) -> MlpModel:
    off = 0

    def take(size: int) -> bytes:
        nonlocal off
        if off + size > len(buf):
            raise CheckpointError(f"{origin}: truncated at byte {off}")
        chunk = buf[off:off + size]
        off += size
        return chunk

    (layer_count,) = struct.unpack("<I", take(4))
    if layer_count == 0 or layer_count > 10_000:
        raise CheckpointError(f"{origin}: implausible layer count {layer_count}")
    weights, biases = [], []
    for i in range(layer_count):
        in_dim, out_dim = struct.unpack("<II", take(8))
        if in_dim == 0 or out_dim == 0:
            raise CheckpointError(f"{origin}: layer {i}: zero dimension")
        if i > 0 and in_dim != weights[-1].shape[0]:
            raise CheckpointError(f"{origin}: layer {i}: dimension chain broken")
        w = np.frombuffer(take(8 * in_dim * out_dim), dtype="<f8")
        weights.append(w.reshape(out_dim, in_dim).copy())
        biases.append(np.frombuffer(take(8 * out_dim), dtype="<f8").copy())
    if off != len(buf):
        raise CheckpointError(f"{origin}: {len(buf) - off} trailing bytes")
    try:
        return MlpModel(weights=tuple(weights), biases=tuple(biases))
    except ValueError as exc:
        raise CheckpointError(f"{origin}: {exc}") from exc
