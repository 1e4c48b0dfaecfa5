"""Downstream probe models: construction, training, inference.

Probes are affine/ReLU stacks trained with Adam (beta1 0.9, beta2 0.999,
eps 1e-8) and decoupled weight decay. Training compute is float32; the
gradient-check oracle runs the same kernels in float64. Everything is
deterministic for a fixed seed in single-threaded mode.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import _kernels, features

ARCHITECTURES = ("slp", "mlp", "mlp_adaptive")
ADAPTIVE_VARIANTS = ("half", "full_half")

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class ProbeError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch):
        super().__init__(f"non-finite loss at epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class ProbeSpec:
    id: str
    architecture: str = "slp"
    hidden: tuple = ()            # for architecture == "mlp"
    variant: str | None = None    # for architecture == "mlp_adaptive"
    dropout_p: float = 0.0
    activation: str = "relu"

    def check(self) -> None:
        if self.architecture not in ARCHITECTURES:
            raise ProbeError(f"probe {self.id!r}: unknown architecture "
                             f"{self.architecture!r}")
        if self.architecture == "mlp":
            if not self.hidden or any(int(h) < 1 for h in self.hidden):
                raise ProbeError(
                    f"probe {self.id!r}: mlp needs a nonempty list of "
                    f"positive hidden sizes")
        if self.architecture == "mlp_adaptive" and self.variant not in ADAPTIVE_VARIANTS:
            raise ProbeError(f"probe {self.id!r}: mlp_adaptive needs variant "
                             f"in {ADAPTIVE_VARIANTS}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ProbeError(f"probe {self.id!r}: dropout_p must be in [0, 1)")
        if self.activation != "relu":
            raise ProbeError(f"probe {self.id!r}: only relu is supported")

    def hidden_sizes(self, input_dim: int) -> list:
        if self.architecture == "slp":
            return []
        if self.architecture == "mlp":
            return [int(h) for h in self.hidden]
        if self.variant == "half":
            return [-(-input_dim // 2)]
        return [min(input_dim, 1024), -(-input_dim // 2)]


@dataclass(frozen=True)
class OptimizerSpec:
    algorithm: str = "adam"
    lr: float = 1e-3
    wd: float = 1e-5
    batch_size: int = 32
    max_epochs: int = 200
    patience: int = 20
    seed: int = 0

    def check(self) -> None:
        if self.algorithm != "adam":
            raise ProbeError(f"unknown optimizer {self.algorithm!r}")
        if self.lr <= 0:
            raise ProbeError("lr must be positive")
        if self.wd < 0:
            raise ProbeError("wd must be nonnegative")
        if self.batch_size < 1:
            raise ProbeError("batch_size must be >= 1")
        if not 0 <= self.patience <= self.max_epochs:
            raise ProbeError("need 0 <= patience <= max_epochs")


@dataclass
class ProbeModel:
    weights: list          # [fan_in, fan_out] float32 per layer
    biases: list           # [fan_out] float32 per layer
    input_dim: int
    output_dim: int
    task_kind: str         # multiclass | multilabel | key
    spec: ProbeSpec
    seed: int = 0

    def parameter_count(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def copy_params(self):
        return [w.copy() for w in self.weights], [b.copy() for b in self.biases]


@dataclass
class TrainedProbe:
    model: ProbeModel
    history: list = field(default_factory=list)  # per-epoch dicts
    epochs_run: int = 0
    stopped_early: bool = False


def _loss_kind(task_kind: str) -> str:
    # key classification trains as plain multiclass over the key vocabulary
    return "multilabel" if task_kind == "multilabel" else "multiclass"


def build_probe(spec: ProbeSpec, input_dim: int, output_dim: int,
                task_kind: str, seed: int) -> ProbeModel:
    """Glorot-uniform initialized probe; deterministic per seed."""
    spec.check()
    if input_dim < 1 or output_dim < 1:
        raise ProbeError("input_dim and output_dim must be >= 1")
    dims = [input_dim] + spec.hidden_sizes(input_dim) + [output_dim]
    rng = np.random.default_rng([int(seed), 0xB11D])
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit,
                                   size=(fan_in, fan_out)).astype(np.float32))
        biases.append(np.zeros(fan_out, dtype=np.float32))
    return ProbeModel(weights=weights, biases=biases, input_dim=input_dim,
                      output_dim=output_dim, task_kind=task_kind, spec=spec,
                      seed=int(seed))


def forward(model: ProbeModel, batch) -> np.ndarray:
    """Logits for a [B, d] batch (no dropout at inference)."""
    x = np.ascontiguousarray(batch)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ProbeError(f"batch shape {x.shape} does not match input_dim "
                         f"{model.input_dim}")
    return np.asarray(_kernels.forward_logits(model.weights, model.biases, x))


def loss(logits, targets, task_kind: str) -> float:
    """Mean softmax cross-entropy (multiclass/key) or mean sigmoid BCE
    over all labels (multilabel), with stabilized formulas."""
    logits = np.asarray(logits, dtype=np.float64)
    if _loss_kind(task_kind) == "multilabel":
        t = np.asarray(targets, dtype=np.float64)
        per = np.maximum(logits, 0) - logits * t + np.log1p(np.exp(-np.abs(logits)))
        return float(per.mean())
    t = np.asarray(targets)
    zmax = logits.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(logits - zmax).sum(axis=1))
    return float((lse - logits[np.arange(len(t)), t]).mean())


def grad(model: ProbeModel, batch, targets):
    """Exact backpropagated gradients (dweights, dbiases); same shapes as
    the parameters, mean reduction matching `loss`."""
    x = np.ascontiguousarray(batch)
    _, dw, db = _kernels.loss_and_grads(
        model.weights, model.biases, x, _prep_targets(targets, model, x.dtype),
        _loss_kind(model.task_kind))
    return dw, db


def _prep_targets(targets, model, dtype):
    if _loss_kind(model.task_kind) == "multilabel":
        return np.ascontiguousarray(targets, dtype=dtype)
    return np.ascontiguousarray(targets, dtype=np.int64)


def probabilities(model: ProbeModel, batch) -> np.ndarray:
    """Softmax probabilities (multiclass/key) or per-label sigmoids."""
    logits = forward(model, batch).astype(np.float64)
    if _loss_kind(model.task_kind) == "multilabel":
        return 1.0 / (1.0 + np.exp(-logits))
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _dropout_masks(rng, hidden_dims, batch, p, dtype):
    keep = 1.0 - p
    return [(rng.random((batch, h)) < keep).astype(dtype) / dtype(keep)
            for h in hidden_dims]


def train(model: ProbeModel, train_set, val_set, opt: OptimizerSpec) -> TrainedProbe:
    """Minibatch Adam with early stopping on validation loss.

    train_set/val_set are (X, targets) pairs with X [N, d] float32. Stops
    once the validation loss has failed to improve for max(1, patience)
    consecutive epochs and returns the best-validation weights.
    """
    opt.check()
    x_train, y_train = train_set
    x_val, y_val = val_set
    x_train = np.ascontiguousarray(x_train, dtype=np.float32)
    x_val = np.ascontiguousarray(x_val, dtype=np.float32)
    n = len(x_train)
    if n < 1 or len(x_val) < 1:
        raise ProbeError("train and validation sets must be nonempty")
    if x_train.shape[1] != model.input_dim:
        raise ProbeError(f"train dim {x_train.shape[1]} != model input_dim "
                         f"{model.input_dim}")
    kind = _loss_kind(model.task_kind)
    y_train = _prep_targets(y_train, model, np.float32)
    y_val = _prep_targets(y_val, model, np.float32)

    rng = np.random.default_rng([int(opt.seed), 0x7A13])
    params = model.weights + model.biases
    m_state = [np.zeros_like(p) for p in params]
    v_state = [np.zeros_like(p) for p in params]
    hidden_dims = [w.shape[1] for w in model.weights[:-1]]

    best_val = math.inf
    best = model.copy_params()
    streak = 0
    step = 0
    history = []
    stopped_early = False

    for epoch in range(opt.max_epochs):
        perm = rng.permutation(n)
        total = 0.0
        for lo in range(0, n, opt.batch_size):
            idx = perm[lo:lo + opt.batch_size]
            masks = None
            if model.spec.dropout_p > 0 and hidden_dims:
                masks = _dropout_masks(rng, hidden_dims, len(idx),
                                       model.spec.dropout_p, np.float32)
            batch_loss, dw, db = _kernels.loss_and_grads(
                model.weights, model.biases, x_train[idx], y_train[idx],
                kind, masks)
            step += 1
            _kernels.adam_step(params, list(dw) + list(db), m_state, v_state,
                               step, opt.lr, ADAM_BETA1, ADAM_BETA2, ADAM_EPS,
                               opt.wd)
            total += batch_loss * len(idx)
        train_loss = total / n
        val_logits = _kernels.forward_logits(model.weights, model.biases, x_val)
        val_loss = loss(val_logits, y_val, model.task_kind)
        if not (math.isfinite(train_loss) and math.isfinite(val_loss)):
            raise TrainingDivergedError(epoch)
        history.append({"epoch": epoch, "train_loss": float(train_loss),
                        "val_loss": float(val_loss)})
        if val_loss < best_val:
            best_val = val_loss
            best = model.copy_params()
            streak = 0
        else:
            streak += 1
            if streak >= max(1, opt.patience):
                stopped_early = True
                break

    best_model = ProbeModel(weights=best[0], biases=best[1],
                            input_dim=model.input_dim,
                            output_dim=model.output_dim,
                            task_kind=model.task_kind, spec=model.spec,
                            seed=model.seed)
    return TrainedProbe(model=best_model, history=history,
                        epochs_run=len(history), stopped_early=stopped_early)


def predict(trained: TrainedProbe, track_windows,
            aggregation_mode: str, agg: features.AggregationSpec) -> np.ndarray:
    """Per-track probabilities from a [n_windows, d] feature sequence.

    representation mode aggregates windows first and runs one forward pass;
    prediction mode runs every window and averages the probability vectors.
    """
    model = trained.model
    m = np.asarray(track_windows, dtype=np.float32)
    if aggregation_mode == "representation":
        vec = features.aggregate_representation(m, agg.representation_op)
        return probabilities(model, vec[None, :].astype(np.float32))[0]
    if aggregation_mode == "prediction":
        return probabilities(model, m).mean(axis=0)
    raise ProbeError(f"unknown aggregation mode {aggregation_mode!r}")


# ---------------------------------------------------------------------------
# serialization: MRT1 tensors + JSON header
# ---------------------------------------------------------------------------


def save_probe(trained: TrainedProbe, out_dir, name: str) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = trained.model
    layers = []
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        wf, bf = f"{name}.w{i}.mrt", f"{name}.b{i}.mrt"
        features.write_tensor_file(out_dir / wf, w)
        features.write_tensor_file(out_dir / bf, b[None, :])
        layers.append({"weights": wf, "biases": bf})
    header = {
        "architecture": {
            "id": model.spec.id,
            "kind": model.spec.architecture,
            "hidden": list(model.spec.hidden),
            "variant": model.spec.variant,
            "dropout_p": model.spec.dropout_p,
        },
        "input_dim": model.input_dim,
        "output_dim": model.output_dim,
        "task_kind": model.task_kind,
        "seed": model.seed,
        "layers": layers,
        "epochs_run": trained.epochs_run,
        "stopped_early": trained.stopped_early,
        "history": trained.history,
    }
    path = out_dir / f"{name}.json"
    path.write_text(json.dumps(header, indent=2, sort_keys=True))
    return path


def load_probe(header_path) -> TrainedProbe:
    header_path = Path(header_path)
    h = json.loads(header_path.read_text())
    arch = h["architecture"]
    spec = ProbeSpec(id=arch["id"], architecture=arch["kind"],
                     hidden=tuple(arch["hidden"]), variant=arch["variant"],
                     dropout_p=arch["dropout_p"])
    weights, biases = [], []
    for layer in h["layers"]:
        weights.append(features.read_tensor_file(header_path.parent / layer["weights"]))
        biases.append(features.read_tensor_file(header_path.parent / layer["biases"])[0])
    model = ProbeModel(weights=weights, biases=biases, input_dim=h["input_dim"],
                       output_dim=h["output_dim"], task_kind=h["task_kind"],
                       spec=spec, seed=h["seed"])
    return TrainedProbe(model=model, history=h["history"],
                        epochs_run=h["epochs_run"],
                        stopped_early=h["stopped_early"])


def seed_for_run(opt_seed: int, run_seed: int) -> int:
    """Stable mix of the optimizer's base seed with a run's seed axis."""
    return (int(opt_seed) * 0x9E3779B1 + int(run_seed)) % (2 ** 31)


def optimizer_for_run(opt: OptimizerSpec, run_seed: int) -> OptimizerSpec:
    return replace(opt, seed=seed_for_run(opt.seed, run_seed))
