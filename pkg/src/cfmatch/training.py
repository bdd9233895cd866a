"""Two-phase min-max training with an in-house Adam optimizer.

Every step follows the same fixed order:

1. evaluate both ECFs at fresh Gaussian query points,
2. augment the points with the observed discrepancy,
3. ascent: the sampler moves the points, the discrepancy at the moved
   points is maximized with respect to the sampler parameters,
4. descent: the sampler (now updated) is re-forwarded, and the generator
   descends on the discrepancy at the re-proposed points.

The sampler therefore always sees the loss surface before the generator
moves, and the generator gradient is always taken at the post-ascent
sampler. With the ``gaussian`` sampler kind phase 3 is skipped and the
loop degenerates to fixed-frequency training.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError, Tensor, backward, no_grad, zero_grad
from .cf import cf_loss, ecf, grid_loss
from .nets import Mlp
from .samplers import (
    KINDS,
    SamplerParams,
    apply_sampler,
    augment_with_loss,
    build_knn_graph,
    sample_base_points,
)

__all__ = [
    "ADAM_BETA1",
    "ADAM_BETA2",
    "ADAM_EPS",
    "AdamState",
    "StepResult",
    "TrainConfig",
    "TrainState",
    "TrainingAborted",
    "adam_step",
    "load_checkpoint",
    "save_checkpoint",
    "train_loop",
    "train_step",
]

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class TrainingAborted(RuntimeError):
    """Raised when a loss goes non-finite; carries the offending step index."""

    def __init__(self, step: int, message: str):
        super().__init__(f"step {step}: {message}")
        self.step = step


@dataclass
class AdamState:
    """First/second moment estimates plus the shared step count."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: dict[str, Tensor]) -> "AdamState":
        return cls(
            m={name: np.zeros_like(p.data) for name, p in params.items()},
            v={name: np.zeros_like(p.data) for name, p in params.items()},
        )


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState,
              lr: float, sign: str) -> None:
    """One bias-corrected Adam update, in place.

    ``sign`` selects ascent (add the step) or descent (subtract it).
    """
    if sign not in ("ascent", "descent"):
        raise ValueError(f"adam_step: sign must be 'ascent' or 'descent', got {sign!r}")
    state.t += 1
    correction1 = 1.0 - ADAM_BETA1 ** state.t
    correction2 = 1.0 - ADAM_BETA2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise ShapeError(f"adam_step: gradient shape {g.shape} != parameter shape {p.data.shape} for {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * (g * g)
        update = lr * (m / correction1) / (np.sqrt(v / correction2) + ADAM_EPS)
        if sign == "ascent":
            p.data += update
        else:
            p.data -= update


@dataclass
class TrainConfig:
    b_d: int = 256
    b_g: int = 256
    b_t: int = 64
    lr_g: float = 1e-3
    lr_gnn: float = 1e-3
    steps: int = 1000
    seed: int = 0
    sampler: str = "gnn"
    log_every: int = 100

    def validate(self) -> None:
        for name in ("b_d", "b_g", "b_t"):
            if getattr(self, name) < 2:
                raise ValueError(f"TrainConfig: {name} must be >= 2")
        if self.lr_g <= 0.0:
            raise ValueError("TrainConfig: lr_g must be > 0")
        if self.lr_gnn <= 0.0:
            raise ValueError("TrainConfig: lr_gnn must be > 0")
        if self.steps < 1:
            raise ValueError("TrainConfig: steps must be >= 1")
        if self.log_every < 1:
            raise ValueError("TrainConfig: log_every must be >= 1")
        if self.sampler not in KINDS:
            raise ValueError(f"TrainConfig: unknown sampler {self.sampler!r}")


@dataclass
class TrainState:
    gen_opt: AdamState
    sampler_opt: AdamState
    step: int = 0

    @classmethod
    def init(cls, generator: Mlp, sampler: SamplerParams) -> "TrainState":
        return cls(
            gen_opt=AdamState.for_params(generator.parameters()),
            sampler_opt=AdamState.for_params(sampler.weights),
        )


@dataclass
class StepResult:
    """Losses of one step plus the query points each phase actually used."""

    loss_t: float
    loss_g: float
    points_ascent: np.ndarray
    points_descent: np.ndarray


def _require_finite(value: float, step: int, what: str) -> None:
    if not np.isfinite(value):
        raise TrainingAborted(step, f"non-finite {what} loss ({value})")


def train_step(real_batch: np.ndarray, generator: Mlp, sampler: SamplerParams,
               state: TrainState, config: TrainConfig) -> StepResult:
    """One full ascent/descent iteration on one minibatch."""
    if real_batch.ndim != 2 or real_batch.shape[0] != config.b_d:
        raise ShapeError(
            f"train_step: real batch shape {real_batch.shape} != ({config.b_d}, m)"
        )
    i = state.step
    dim = real_batch.shape[1]
    if not np.isfinite(real_batch).all():
        raise TrainingAborted(i, "non-finite real batch")
    x = Tensor(real_batch)

    z = Tensor(np.random.default_rng([config.seed, i, 0]).standard_normal(
        (config.b_g, generator.spec.widths[0])))
    with no_grad():
        y_data = generator(z).data
    if not np.isfinite(y_data).all():
        raise TrainingAborted(i, "non-finite generator output")
    y_const = Tensor(y_data)

    points = sample_base_points(config.b_t, dim, [config.seed, i, 1])
    with no_grad():
        grid_x = ecf(x, points)
        grid_y = ecf(y_const, points)
    aug = None if sampler.kind == "gaussian" else augment_with_loss(points, grid_x, grid_y)
    graph = build_knn_graph(points, sampler.k) if sampler.kind == "gnn" else None

    # ascent phase: maximize the discrepancy at the moved points
    if sampler.kind == "gaussian":
        with no_grad():
            loss_t = grid_loss(grid_x, grid_y).item()
        _require_finite(loss_t, i, "sampler")
        ascent_points = points.points.data
    else:
        zero_grad(sampler.weights)
        moved = apply_sampler(points, aug, sampler, graph)
        loss_t_node = cf_loss(x, y_const, moved)
        loss_t = loss_t_node.item()
        _require_finite(loss_t, i, "sampler")
        backward(loss_t_node)
        adam_step(sampler.weights, {n: w.grad for n, w in sampler.weights.items()},
                  state.sampler_opt, config.lr_gnn, "ascent")
        ascent_points = moved.points.data

    # descent phase: re-propose with the updated sampler, move the generator
    with no_grad():
        final_points = apply_sampler(points, aug, sampler, graph)
    zero_grad(generator.parameters())
    y = generator(z)
    if sampler.kind == "gaussian":
        # the points were not moved, so the real-data grid is reusable
        loss_g_node = grid_loss(grid_x, ecf(y, final_points))
    else:
        loss_g_node = cf_loss(x, y, final_points)
    loss_g = loss_g_node.item()
    _require_finite(loss_g, i, "generator")
    backward(loss_g_node)
    adam_step(generator.parameters(), {n: w.grad for n, w in generator.parameters().items()},
              state.gen_opt, config.lr_g, "descent")

    state.step += 1
    return StepResult(
        loss_t=loss_t,
        loss_g=loss_g,
        points_ascent=np.array(ascent_points, copy=True),
        points_descent=final_points.points.data.copy(),
    )


def train_loop(data: np.ndarray, generator: Mlp, sampler: SamplerParams, config: TrainConfig,
               row_hook=None) -> tuple[list[list[float]], list[list[float]], TrainState]:
    """Run ``config.steps`` iterations over shuffled minibatches.

    Returns (metrics rows, timing rows, final state). A metrics row is
    [step, loss_g, loss_t] and is emitted at the first step, every
    ``log_every`` steps, and at the last step. ``row_hook(generator, step)``
    may append extra columns. Timing rows ([step, wall_ms]) are kept apart
    from the metrics so the metrics stay bit-reproducible.
    """
    config.validate()
    if data.ndim != 2 or data.shape[0] < config.b_d:
        raise ValueError(f"train_loop: dataset shape {data.shape} too small for b_d={config.b_d}")
    state = TrainState.init(generator, sampler)
    rows: list[list[float]] = []
    timings: list[list[float]] = []
    order = np.empty(0, dtype=np.intp)
    pos = 0
    epoch = 0
    last_clock = time.perf_counter()
    for step in range(config.steps):
        if pos + config.b_d > order.size:
            order = np.random.default_rng([config.seed, 2, epoch]).permutation(data.shape[0])
            pos = 0
            epoch += 1
        batch = data[order[pos:pos + config.b_d]]
        pos += config.b_d
        result = train_step(batch, generator, sampler, state, config)
        step_no = step + 1
        if step_no == 1 or step_no % config.log_every == 0 or step_no == config.steps:
            row = [float(step_no), result.loss_g, result.loss_t]
            if row_hook is not None:
                row.extend(row_hook(generator, step_no))
            rows.append(row)
            now = time.perf_counter()
            timings.append([float(step_no), (now - last_clock) * 1e3])
            last_clock = now
    return rows, timings, state


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, tensors: dict[str, Tensor | np.ndarray], meta: dict) -> None:
    """Write named arrays plus metadata as one JSON document.

    Values are emitted as plain floats, which JSON round-trips exactly for
    64-bit doubles.
    """
    doc = {"meta": meta, "params": {}}
    for name, t in tensors.items():
        arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
        doc["params"][name] = {
            "shape": list(arr.shape),
            "values": [float(v) for v in arr.ravel()],
        }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    params = {
        name: np.array(entry["values"], dtype=np.float64).reshape(entry["shape"])
        for name, entry in doc["params"].items()
    }
    return params, doc.get("meta", {})
