"""Optimization loop with the alternating freeze/unfreeze schedule.

A training run walks through phases; each phase freezes a subset of the two
parameter groups (``cnn``: the backbone, ``head``: conversions, recurrent
parts and residual arcs).  The default schedule trains the head first with
the backbone frozen, then flips, then unfreezes everything.  Every run is
bit-reproducible from its seed on a single thread.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .decode import (beam_search, node_accuracy, node_f1, path_accuracy,
                     path_f1, lift_final_node, select_paths_by_threshold,
                     tune_threshold)
from .errors import ConfigError, NumericError, UsageError
from .model import (ModelBundle, fpl_forward, flat_baseline_forward,
                    general_forward, multilabel_loss, path_loss)
from .tensor import Tensor, no_grad
from .tree import enumerate_paths, one_hot

COMPONENTS = ("cnn", "head")


@dataclass(frozen=True)
class Phase:
    epochs: int
    frozen: frozenset  # subset of COMPONENTS


@dataclass
class TrainingSchedule:
    phases: list
    optimizer: str = "sgd"
    lr: float = 0.01
    momentum: float = 0.9
    betas: tuple = (0.9, 0.999)
    clip: float = 5.0
    seed: int = 0
    batch_size: int = 32

    def __post_init__(self):
        for i, phase in enumerate(self.phases, start=1):
            if set(phase.frozen) >= set(COMPONENTS):
                raise ConfigError(f"phase {i} freezes every parameter group")

    @property
    def total_epochs(self) -> int:
        return sum(p.epochs for p in self.phases)

    def phase_at(self, epoch: int) -> Phase:
        """Phase covering a zero-based epoch index."""
        seen = 0
        for phase in self.phases:
            seen += phase.epochs
            if epoch < seen:
                return phase
        return self.phases[-1]


def default_alternating_schedule(total_epochs: int, **kwargs) -> TrainingSchedule:
    """Head first with frozen backbone, then the flip, then joint training.

    Epochs split 1:1:2 across the three phases.
    """
    if total_epochs < 3:
        raise UsageError(f"alternating training needs >= 3 epochs, got {total_epochs}")
    first = max(1, total_epochs // 4)
    second = max(1, total_epochs // 4)
    phases = [
        Phase(first, frozenset({"cnn"})),
        Phase(second, frozenset({"head"})),
        Phase(total_epochs - first - second, frozenset()),
    ]
    return TrainingSchedule(phases, **kwargs)


def joint_schedule(total_epochs: int, **kwargs) -> TrainingSchedule:
    return TrainingSchedule([Phase(total_epochs, frozenset())], **kwargs)


# -- optimizers --------------------------------------------------------------


class SgdMomentum:
    def __init__(self, lr: float, momentum: float):
        self.lr = lr
        self.momentum = momentum
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: dict):
        for name, t in params.items():
            g = t.grad
            v = self.velocity.get(name)
            v = g if v is None else self.momentum * v + g
            self.velocity[name] = v
            t.data = t.data - self.lr * v


class Adam:
    def __init__(self, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def step(self, params: dict):
        for name, tensor in params.items():
            g = tensor.grad
            t = self.t.get(name, 0) + 1
            self.t[name] = t
            m = self.b1 * self.m.get(name, 0.0) + (1 - self.b1) * g
            v = self.b2 * self.v.get(name, 0.0) + (1 - self.b2) * g * g
            self.m[name], self.v[name] = m, v
            mhat = m / (1 - self.b1 ** t)
            vhat = v / (1 - self.b2 ** t)
            tensor.data = tensor.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def make_optimizer(schedule: TrainingSchedule):
    if schedule.optimizer == "sgd":
        return SgdMomentum(schedule.lr, schedule.momentum)
    if schedule.optimizer == "adam":
        return Adam(schedule.lr, schedule.betas)
    raise ConfigError(f"unknown optimizer {schedule.optimizer!r}")


@dataclass
class TrainState:
    epoch: int = 0
    step: int = 0
    optimizer: object = None
    best_metric: float = -1.0
    best_epoch: int = -1
    history: list = field(default_factory=list)


def component_of(param_name: str) -> str:
    head = param_name.split(".", 1)[0]
    if head not in COMPONENTS:
        raise ConfigError(f"parameter {param_name!r} has no component prefix")
    return head


def parameter_hash(bundle: ModelBundle, component: str) -> str:
    """SHA-256 over the raw bytes of one component's parameters."""
    digest = hashlib.sha256()
    for name in sorted(bundle.parameters()):
        if component_of(name) == component:
            digest.update(np.ascontiguousarray(
                bundle.parameters()[name].data, dtype="<f8").tobytes())
    return digest.hexdigest()


def _clip_gradients(params: dict, max_norm: float):
    if not max_norm:
        return
    total = math.sqrt(sum(float((t.grad ** 2).sum()) for t in params.values()))
    if total > max_norm:
        scale = max_norm / total
        for t in params.values():
            t._grad = t.grad * scale


# -- batch assembly ----------------------------------------------------------


def _batch_targets(bundle: ModelBundle, paths_batch):
    """Per-level targets (+ teacher inputs and masks) for one batch."""
    tree = bundle.tree
    n = tree.n_classes
    batch = len(paths_batch)
    if bundle.mode == "fpl":
        steps = bundle.steps
        targets = [np.zeros((batch, n)) for _ in range(steps)]
        for b, paths in enumerate(paths_batch):
            path = paths[0]
            for t in range(steps):
                targets[t][b] = one_hot(tree, path, t + 1)
        return targets, None, None
    if bundle.mode == "general":
        steps = max(len(paths[0]) for paths in paths_batch)
        targets = [np.zeros((batch, n)) for _ in range(steps)]
        mask = [np.zeros(batch) for _ in range(steps)]
        for b, paths in enumerate(paths_batch):
            path = paths[0]
            for t, node in enumerate(path):
                targets[t][b, node - 1] = 1.0
                mask[t][b] = 1.0
        teacher = [Tensor(targets[t]) for t in range(steps - 1)]
        return targets, teacher, mask
    if bundle.mode == "multilabel":
        steps = tree.max_path_length()
        targets = [np.zeros((batch, n)) for _ in range(steps)]
        for b, paths in enumerate(paths_batch):
            for path in paths:
                for t, node in enumerate(path):
                    targets[t][b, node - 1] = 1.0
        teacher = [Tensor(targets[t]) for t in range(steps - 1)]
        return targets, teacher, None
    # flat: the final node of the (single) path
    targets = [np.zeros((batch, n))]
    for b, paths in enumerate(paths_batch):
        targets[0][b, paths[0][-1] - 1] = 1.0
    return targets, None, None


def _batch_loss(bundle: ModelBundle, images: np.ndarray, paths_batch) -> Tensor:
    x = Tensor(images)
    targets, teacher, mask = _batch_targets(bundle, paths_batch)
    weights = bundle.config["loss"].get("weights")
    if bundle.mode == "fpl":
        outputs = fpl_forward(x, bundle)
        return path_loss(outputs, targets, weights=weights)
    if bundle.mode == "general":
        outputs = general_forward(x, bundle, len(targets), teacher=teacher)
        return path_loss(outputs, targets, weights=weights, mask=mask)
    if bundle.mode == "multilabel":
        outputs = general_forward(x, bundle, len(targets), teacher=teacher,
                                  feedback="sigmoid")
        return multilabel_loss(outputs, targets)
    logits = flat_baseline_forward(x, bundle)
    return path_loss([logits], targets, weights=weights)


def toy_loss_fn(bundle: ModelBundle, seed: int = 0, batch: int = 2):
    """Closure computing the full model loss on a fixed random batch.

    The same images and targets are used on every call, so the closure can
    feed both reverse-mode and finite-difference gradient computations.
    """
    rng = np.random.default_rng(seed)
    size = bundle.backbone.input_size
    images = rng.uniform(0.0, 1.0,
                         (batch, bundle.backbone.input_channels, size, size))
    if bundle.mode in ("general", "multilabel"):
        pool = enumerate_paths(bundle.tree, leaves_only=False)
    else:
        pool = enumerate_paths(bundle.tree, leaves_only=True)
    paths_batch = [[pool[int(rng.integers(len(pool)))]] for _ in range(batch)]

    def fn():
        return _batch_loss(bundle, images, paths_batch)

    return fn


# -- the loop ----------------------------------------------------------------


def train_epoch(bundle: ModelBundle, samples, schedule: TrainingSchedule,
                state: TrainState) -> float:
    """One pass over the data; only unfrozen parameters move."""
    if state.optimizer is None:
        state.optimizer = make_optimizer(schedule)
    phase = schedule.phase_at(state.epoch)
    params = bundle.parameters()
    active = {name: t for name, t in params.items()
              if component_of(name) not in phase.frozen}

    order = np.random.default_rng([schedule.seed, state.epoch]).permutation(len(samples))
    losses = []
    bs = schedule.batch_size
    for start in range(0, len(order), bs):
        idx = order[start:start + bs]
        images = np.stack([samples[i][0] for i in idx])
        paths_batch = [samples[i][1] for i in idx]
        for t in params.values():
            t.zero_grad()
        loss = _batch_loss(bundle, images, paths_batch)
        value = loss.item()
        if not np.isfinite(value):
            raise NumericError(
                f"non-finite loss {value} in batch {start // bs} of epoch {state.epoch}")
        loss.backward()
        _clip_gradients(active, schedule.clip)
        state.optimizer.step(active)
        state.step += 1
        bundle.step_count = state.step
        losses.append(value)
    state.epoch += 1
    return float(np.mean(losses))


# -- evaluation --------------------------------------------------------------


def _predict_logits(bundle: ModelBundle, samples, batch_size: int = 64):
    """Per-sample lists of per-level logit vectors, without building graphs."""
    results = []
    with no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            x = Tensor(np.stack([s[0] for s in chunk]))
            if bundle.mode == "fpl":
                outputs = fpl_forward(x, bundle)
            elif bundle.mode in ("general", "multilabel"):
                feedback = "sigmoid" if bundle.mode == "multilabel" else "softmax"
                outputs = general_forward(x, bundle, bundle.tree.max_path_length(),
                                          feedback=feedback)
            else:
                outputs = [flat_baseline_forward(x, bundle)]
            stacked = np.stack([o.data for o in outputs])  # (T, B, N)
            for b in range(len(chunk)):
                results.append([stacked[t, b] for t in range(stacked.shape[0])])
    return results


def evaluate(bundle: ModelBundle, samples, mode: str | None = None,
             beam_width: int = 5, threshold: float | None = None,
             val_samples=None, threshold_grid: float = 0.01) -> dict:
    """Inference plus metrics; returns reports keyed by metric kind.

    Multi-label evaluation tunes the threshold on ``val_samples`` (required
    unless an explicit threshold is given) and applies it to ``samples``.
    """
    mode = mode or bundle.mode
    if mode != bundle.mode:
        raise ConfigError(f"bundle is {bundle.mode!r} but {mode!r} evaluation requested")
    logits = _predict_logits(bundle, samples)
    truths = [s[1] for s in samples]

    if mode == "multilabel":
        if threshold is None:
            if val_samples is None:
                raise ConfigError("multilabel evaluation needs val_samples or a threshold")
            val_logits = _predict_logits(bundle, val_samples)
            val_truths = [s[1] for s in val_samples]
            threshold = tune_threshold(val_logits, val_truths, bundle.tree,
                                       grid_step=threshold_grid)
        preds = [select_paths_by_threshold(lg, bundle.tree, threshold) for lg in logits]
        return {
            "path_f1": path_f1(preds, truths, threshold=threshold),
            "node_f1": node_f1(preds, truths, threshold=threshold),
        }

    single_truths = [paths[0] for paths in truths]
    if mode == "flat":
        preds = [lift_final_node(int(np.argmax(lg[0])) + 1, bundle.tree) for lg in logits]
    elif mode == "fpl":
        preds = [beam_search(lg, bundle.tree, beam_width, mode="fixed") for lg in logits]
    else:
        preds = [beam_search(lg, bundle.tree, beam_width, mode="general") for lg in logits]
    return {
        "path_accuracy": path_accuracy(preds, single_truths),
        "node_accuracy": node_accuracy(preds, single_truths),
    }


def fit(bundle: ModelBundle, train_samples, schedule: TrainingSchedule,
        val_samples=None, log=None) -> TrainState:
    """Train through every phase, tracking the best validation epoch."""
    state = TrainState()
    for _ in range(schedule.total_epochs):
        epoch = state.epoch
        phase = schedule.phase_at(epoch)
        loss = train_epoch(bundle, train_samples, schedule, state)
        record = {"epoch": epoch, "frozen": sorted(phase.frozen), "loss": loss}
        if val_samples:
            if bundle.mode == "multilabel":
                reports = evaluate(bundle, val_samples, threshold=0.5)
                metric = reports["path_f1"].score
            else:
                reports = evaluate(bundle, val_samples)
                metric = reports["path_accuracy"].score
            record["val_metric"] = metric
            if metric > state.best_metric:
                state.best_metric = metric
                state.best_epoch = record["epoch"]
        state.history.append(record)
        if log is not None:
            log(record)
    return state
