"""Compression-aware finetuning of a small tanh MLP with hand-written gradients.

Two ways of training through a sketch are compared on a synthetic regression
task (a frozen random teacher network):

* ``ste_multirow``: the original weights stay the trainable parameters. Every
  step they are compressed into a multi-row AbsMaxMin sketch and immediately
  decompressed ("fake compression"); the forward pass uses the decompressed
  weights and the gradient flows straight through to the originals. Because
  the sketch is rebuilt each step, which colliding weight wins a cell, and
  which row a weight reads from, can change as training proceeds.
* ``aggregated_singlerow``: a single-row sketch with fixed bindings; the shared
  cell values are the trainable parameters and each receives the summed
  gradient of the weights mapped onto it.

``uncompressed`` trains the plain network for reference.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .hashing import derive_seed
from .sketch import SketchConfig, Variant, compress_unit, decompress_unit, selected_rows

__all__ = [
    "Mode",
    "ToyModel",
    "Task",
    "DemoConfig",
    "TrainRun",
    "TrainingDiverged",
    "make_task",
    "pretrain",
    "fake_compress_forward",
    "ste_backward",
    "aggregated_backward",
    "train",
    "compress_only",
    "peak_memory_estimate",
]


_F32_MAX = float(np.finfo(np.float32).max)


class Mode(enum.Enum):
    STE_MULTIROW = "ste_multirow"
    AGGREGATED_SINGLEROW = "aggregated_singlerow"
    UNCOMPRESSED = "uncompressed"


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"loss became non-finite ({loss}) at step {step}")
        self.step = step
        self.loss = loss


@dataclass
class ToyModel:
    weights: list[np.ndarray]  # (fan_in, fan_out) float64
    biases: list[np.ndarray]
    seed: int = 0

    @classmethod
    def init(cls, sizes: Sequence[int], seed: int = 0, gain: float = 1.0) -> "ToyModel":
        rng = np.random.default_rng(seed)
        ws, bs = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            ws.append(rng.normal(0.0, gain / np.sqrt(fan_in), (fan_in, fan_out)))
            bs.append(np.zeros(fan_out))
        return cls(ws, bs, seed)

    def copy(self) -> "ToyModel":
        return ToyModel([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.seed)

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]


def forward(weights: Sequence[np.ndarray], biases: Sequence[np.ndarray], x: np.ndarray) -> list[np.ndarray]:
    """Activations of every layer; hidden layers use tanh, the output is linear."""
    acts = [x]
    h = x
    last = len(weights) - 1
    for i, (w, b) in enumerate(zip(weights, biases)):
        z = h @ w + b
        h = z if i == last else np.tanh(z)
        acts.append(h)
    return acts


def mse(pred: np.ndarray, target: np.ndarray) -> float:
    return float(0.5 * np.mean((pred - target) ** 2))


def backward(
    weights: Sequence[np.ndarray], acts: Sequence[np.ndarray], target: np.ndarray
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Gradients of :func:`mse` w.r.t. the weights and biases used in ``forward``."""
    out = acts[-1]
    delta = (out - target) / out.size
    gw: list[np.ndarray] = [None] * len(weights)  # type: ignore[list-item]
    gb: list[np.ndarray] = [None] * len(weights)  # type: ignore[list-item]
    for i in range(len(weights) - 1, -1, -1):
        gw[i] = acts[i].T @ delta
        gb[i] = delta.sum(axis=0)
        if i:
            delta = (delta @ weights[i].T) * (1.0 - acts[i] ** 2)
    return gw, gb


@dataclass(frozen=True)
class Task:
    x: np.ndarray
    y: np.ndarray


def make_task(sizes: Sequence[int], samples: int = 512, seed: int = 0) -> Task:
    """Inputs ~ N(0, I) labelled by a frozen random teacher of the same shape."""
    teacher = ToyModel.init(sizes, seed=derive_seed(seed, 0xC0FFEE), gain=1.5)
    rng = np.random.default_rng(derive_seed(seed, 0xDA7A))
    x = rng.normal(size=(samples, sizes[0]))
    y = forward(teacher.weights, teacher.biases, x)[-1]
    return Task(x, y)


@dataclass(frozen=True)
class DemoConfig:
    """Sketch layout applied to the compressed layers of a :class:`ToyModel`."""

    rate: float = 0.25
    rows: int = 3
    seed: int = 0
    layers: tuple[int, ...] = (0, 1, 2)
    variant: Variant = Variant.ABS_MAX_MIN
    test_hash: bool = False

    def state_size(self, n: int) -> int:
        """Sketch elements for a layer of ``n`` weights (shared by both modes)."""
        return max(self.rows, int(round(self.rate * n)) // self.rows * self.rows)

    def sketch(self, layer: int, n: int, rows: int | None = None) -> SketchConfig:
        rows = self.rows if rows is None else rows
        return SketchConfig(
            columns=self.state_size(n) // rows,
            rows=rows,
            variant=self.variant,
            seed=derive_seed(self.seed, layer),
            test_hash=self.test_hash,
        )


def fake_compress(w: np.ndarray, cfg: SketchConfig) -> np.ndarray:
    state = compress_unit(w.ravel(), cfg)
    return decompress_unit(state, state.weight_count).astype(np.float64).reshape(w.shape)


def fake_compress_forward(
    model: ToyModel, config: DemoConfig, task: Task
) -> tuple[float, list[np.ndarray]]:
    """Loss with the designated layers compressed and decompressed in place."""
    ws = [
        fake_compress(w, config.sketch(i, w.size)) if i in config.layers else w
        for i, w in enumerate(model.weights)
    ]
    acts = forward(ws, model.biases, task.x)
    return mse(acts[-1], task.y), ws


def ste_backward(grad_wrt_decompressed: np.ndarray, shape: tuple[int, ...] | None = None) -> np.ndarray:
    """Straight-through: the original weight takes its decompressed copy's gradient."""
    g = np.asarray(grad_wrt_decompressed)
    if shape is not None and tuple(shape) != g.shape:
        raise ValueError(f"gradient shape {g.shape} does not match weights {tuple(shape)}")
    return g


def aggregated_backward(member_grads: np.ndarray, mapping: np.ndarray, shared_size: int) -> np.ndarray:
    """Sum each member weight's gradient into the shared slot it maps to."""
    g = np.asarray(member_grads, np.float64).ravel()
    idx = np.asarray(mapping).ravel()
    if g.size != idx.size:
        raise ValueError(f"{g.size} gradients but {idx.size} mapped members")
    return np.bincount(idx, weights=g, minlength=shared_size)


def mean_relative_error(reference: np.ndarray, approx: np.ndarray) -> float:
    r = np.asarray(reference, np.float64).ravel()
    a = np.asarray(approx, np.float64).ravel()
    nz = r != 0
    return float(np.mean(np.abs(r[nz] - a[nz]) / np.abs(r[nz]))) if nz.any() else 0.0


@dataclass
class TrainRun:
    mode: Mode
    steps: int
    lr: float
    loss: list[float] = field(default_factory=list)
    relative_error: list[float] = field(default_factory=list)
    migrations: list[int] = field(default_factory=list)
    model: ToyModel | None = None
    shared: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def final_loss(self) -> float:
        return self.loss[-1]

    @property
    def final_relative_error(self) -> float:
        return self.relative_error[-1]

    def table(self) -> str:
        lines = ["step\tloss\tmean_relative_error\tmigrations"]
        for i, (l, e) in enumerate(zip(self.loss, self.relative_error)):
            m = self.migrations[i] if self.migrations else 0
            lines.append(f"{i}\t{l:.9g}\t{e:.9g}\t{m}")
        return "\n".join(lines) + "\n"


def _lr_at(lr: float, step: int, steps: int) -> float:
    return lr * (1.0 - step / steps)


def pretrain(sizes: Sequence[int], task: Task, steps: int = 2000, lr: float = 0.1, seed: int = 0) -> ToyModel:
    """Fit an uncompressed student to the task; the starting point for finetuning."""
    run = train(ToyModel.init(sizes, seed), Mode.UNCOMPRESSED, steps, task, lr=lr)
    assert run.model is not None
    return run.model


def _weighted_mre(refs: list[np.ndarray], approx: list[np.ndarray]) -> float:
    return mean_relative_error(np.concatenate([r.ravel() for r in refs]), np.concatenate([a.ravel() for a in approx]))


def compress_only(model: ToyModel, config: DemoConfig, task: Task) -> tuple[float, float]:
    """Loss and mean relative error of compressing ``model`` with no finetuning."""
    loss, ws = fake_compress_forward(model, config, task)
    refs = [model.weights[i] for i in config.layers]
    return loss, _weighted_mre(refs, [ws[i] for i in config.layers])


def train(
    model: ToyModel,
    mode: Mode | str,
    steps: int,
    task: Task,
    config: DemoConfig | None = None,
    lr: float = 1e-2,
) -> TrainRun:
    """Full-batch SGD with a linearly decaying learning rate.

    ``history`` entries record the loss of the network actually evaluated at
    that step (decompressed weights in the compressed modes) and the mean
    relative error of the compressed layers against their full-precision
    reference: the trainable originals for ``ste_multirow``, the weights the
    shared vector was built from for ``aggregated_singlerow``.
    """
    mode = Mode(mode)
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if mode is not Mode.UNCOMPRESSED and config is None:
        raise ValueError(f"{mode.value} needs a DemoConfig")
    m = model.copy()
    run = TrainRun(mode, steps, lr)
    layers = tuple(config.layers) if config is not None else ()

    shared: dict[int, np.ndarray] = {}
    mapping: dict[int, np.ndarray] = {}
    frozen_refs: dict[int, np.ndarray] = {}
    if mode is Mode.AGGREGATED_SINGLEROW:
        for i in layers:
            w = m.weights[i]
            cfg = config.sketch(i, w.size, rows=1)
            state = compress_unit(w.ravel(), cfg)
            shared[i] = state.values[0].astype(np.float64)
            mapping[i] = cfg.family.indices(0, np.arange(w.size), cfg.columns)
            frozen_refs[i] = w.copy()

    prev_rows: dict[int, np.ndarray] = {}
    for step in range(steps):
        if not all(np.abs(w).max() < _F32_MAX for w in m.weights) or any(
            not np.isfinite(v).all() for v in shared.values()
        ):
            raise TrainingDiverged(step, float("nan"))
        if mode is Mode.STE_MULTIROW:
            ws = list(m.weights)
            moved = 0
            for i in layers:
                cfg = config.sketch(i, m.weights[i].size)
                state = compress_unit(m.weights[i].ravel(), cfg)
                ws[i] = decompress_unit(state, state.weight_count).astype(np.float64).reshape(m.weights[i].shape)
                rows = selected_rows(state)
                if i in prev_rows:
                    moved += int(np.count_nonzero(rows != prev_rows[i]))
                prev_rows[i] = rows
            run.migrations.append(moved)
            refs = [m.weights[i] for i in layers]
        elif mode is Mode.AGGREGATED_SINGLEROW:
            ws = list(m.weights)
            for i in layers:
                ws[i] = shared[i][mapping[i]].reshape(m.weights[i].shape)
            refs = [frozen_refs[i] for i in layers]
        else:
            ws = m.weights
            refs = []

        acts = forward(ws, m.biases, task.x)
        loss = mse(acts[-1], task.y)
        if not np.isfinite(loss):
            raise TrainingDiverged(step, loss)
        run.loss.append(loss)
        run.relative_error.append(_weighted_mre(refs, [ws[i] for i in layers]) if layers else 0.0)

        gw, gb = backward(ws, acts, task.y)
        eta = _lr_at(lr, step, steps)
        for i in range(len(m.weights)):
            m.biases[i] = m.biases[i] - eta * gb[i]
            if mode is Mode.AGGREGATED_SINGLEROW and i in shared:
                shared[i] = shared[i] - eta * aggregated_backward(gw[i], mapping[i], shared[i].size)
            elif mode is Mode.STE_MULTIROW and i in layers:
                m.weights[i] = m.weights[i] - eta * ste_backward(gw[i], m.weights[i].shape)
            else:
                m.weights[i] = m.weights[i] - eta * gw[i]

    run.model = m
    run.shared = shared
    return run


def peak_memory_estimate(layer_bytes: Sequence[int], sketch_bytes: Sequence[int]) -> tuple[int, int]:
    """Peak bytes with resident sketches plus one live layer, and the dense baseline."""
    if len(layer_bytes) == 0:
        raise ValueError("need at least one layer")
    if len(layer_bytes) != len(sketch_bytes):
        raise ValueError("layer and sketch size lists differ in length")
    if any(b <= 0 for b in layer_bytes) or any(b <= 0 for b in sketch_bytes):
        raise ValueError("sizes must be positive")
    return int(sum(sketch_bytes) + max(layer_bytes)), int(sum(layer_bytes))
