"""Staged fine-tuning: the sequential subclass-then-class strategy, the
joint hierarchical strategy, and the plain baseline arm.

Each stage names a label space, a freeze policy, a head action, and an
iteration budget. Stage RNG streams derive from (experiment seed, stage
tag), so dropping the optional class-head stage does not perturb the
draws of any other stage.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data_model import (
    AggregationMatrix,
    DataError,
    Hyperparameters,
    TrainingSample,
    ValidatedDataset,
)
from .ingestion import extract_patch
from .network import (
    CLASS_SPACE,
    SUBCLASS_SPACE,
    Model,
    NumericalAbort,
    SGDState,
    add_hierarchy_head,
    backward_and_step,
    learning_rate,
    replace_head,
    set_aggregation_trainable,
)
from .rng import derive_rng, derive_seed

FREEZE_HEAD_ONLY = "head-only"
FREEZE_NONE = "all-trainable"

# Early stop compares consecutive moving-average windows of this length.
EARLY_STOP_WINDOW = 100
EARLY_STOP_MIN_IMPROVEMENT = 0.001


@dataclass(frozen=True)
class Stage:
    """One fine-tuning stage."""

    name: str
    label_space: str
    freeze: str
    head_action: tuple[str, object] = ("keep", None)
    W_trainable: bool = False
    iterations: int = 0
    seed_tag: int = 0

    def freeze_mask(self, model: Model) -> list[bool]:
        """Per-layer frozen flags, materialized against the actual model."""
        n = len(model.layers)
        if self.freeze == FREEZE_HEAD_ONLY:
            return [i != n - 1 for i in range(n)]
        return [False] * n


@dataclass
class ScheduleReport:
    """Loss curves recorded while a schedule ran."""

    rows: list[tuple[str, int, float, float, float, float]] = field(default_factory=list)

    def record(self, stage: str, iteration: int, lr: float,
               total: float, subclass_ce: float, class_ce: float) -> None:
        self.rows.append((stage, iteration, lr, total, subclass_ce, class_ce))

    def stage_rows(self, stage: str) -> list[tuple[str, int, float, float, float, float]]:
        return [r for r in self.rows if r[0] == stage]

    def to_csv(self, path: Path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["stage", "iteration", "lr", "total", "subclass_ce", "class_ce"])
            for stage, iteration, lr, total, sub, cls in self.rows:
                writer.writerow([
                    stage,
                    iteration,
                    repr(lr),
                    repr(total),
                    "" if np.isnan(sub) else repr(sub),
                    "" if np.isnan(cls) else repr(cls),
                ])


def sequential_schedule(
    n_subclasses: int,
    n_classes: int,
    iters: Sequence[int],
    include_step3: bool = True,
) -> list[Stage]:
    """The four-step subclass-then-class recipe.

    Step 1 replaces the head for the subclass task and trains it alone;
    step 2 opens the whole network; step 3 (optional) swaps in a class
    head and trains it alone; the final step trains everything on the
    class task. Skipping step 3 still replaces the head at the start of
    the final stage.
    """
    expected = 4 if include_step3 else 3
    if len(iters) != expected:
        raise DataError(f"expected {expected} iteration counts, got {len(iters)}")
    if any(i < 0 for i in iters):
        raise DataError("iteration counts must be non-negative")
    stages = [
        Stage("subclass-head", SUBCLASS_SPACE, FREEZE_HEAD_ONLY,
              ("replace", n_subclasses), iterations=iters[0], seed_tag=1),
        Stage("subclass-full", SUBCLASS_SPACE, FREEZE_NONE,
              ("keep", None), iterations=iters[1], seed_tag=2),
    ]
    if include_step3:
        stages.append(
            Stage("class-head", CLASS_SPACE, FREEZE_HEAD_ONLY,
                  ("replace", n_classes), iterations=iters[2], seed_tag=3)
        )
        stages.append(
            Stage("class-full", CLASS_SPACE, FREEZE_NONE,
                  ("keep", None), iterations=iters[3], seed_tag=4)
        )
    else:
        stages.append(
            Stage("class-full", CLASS_SPACE, FREEZE_NONE,
                  ("replace", n_classes), iterations=iters[2], seed_tag=4)
        )
    return stages


def hierarchical_schedule(W: AggregationMatrix, iters: Sequence[int]) -> list[Stage]:
    """Joint subclass+class training: aggregation frozen, then trainable."""
    if len(iters) != 2:
        raise DataError(f"expected 2 iteration counts, got {len(iters)}")
    return [
        Stage("hierarchical-frozen", SUBCLASS_SPACE, FREEZE_NONE,
              ("add_hierarchy", W), W_trainable=False, iterations=iters[0], seed_tag=1),
        Stage("hierarchical-joint", SUBCLASS_SPACE, FREEZE_NONE,
              ("keep", None), W_trainable=True, iterations=iters[1], seed_tag=2),
    ]


def baseline_schedule(iters: int) -> list[Stage]:
    """Single-stage control arm: class labels, no hierarchy."""
    return [Stage("baseline", CLASS_SPACE, FREEZE_NONE, ("keep", None),
                  iterations=iters, seed_tag=1)]


class _BatchStream:
    """Endless stream of sample indices, reshuffled per pass."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        self.n = n
        self.batch_size = min(batch_size, n)
        self.rng = rng
        self.order = rng.permutation(n)
        self.pos = 0

    def next_batch(self) -> np.ndarray:
        if self.pos + self.batch_size > self.n:
            self.order = self.rng.permutation(self.n)
            self.pos = 0
        batch = self.order[self.pos : self.pos + self.batch_size]
        self.pos += self.batch_size
        return batch


def _assemble(
    dataset: ValidatedDataset,
    samples: Sequence[TrainingSample],
    idxs: np.ndarray,
    patch_size: int,
    extra_images: dict | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    by_id = dict(dataset.by_id)
    if extra_images:
        by_id.update(extra_images)
    pixels = np.empty((len(idxs), patch_size, patch_size, 3))
    cls = np.empty(len(idxs), dtype=np.int64)
    sub = np.empty(len(idxs), dtype=np.int64)
    for row, i in enumerate(idxs):
        s = samples[i]
        img = by_id[s.image_id]
        pixels[row] = extract_patch(img, s.center, patch_size, img.channel_mean).pixels
        cls[row] = s.class_label
        sub[row] = s.subclass_label
    return pixels, cls, sub


def _apply_stage_setup(model: Model, stage: Stage, stage_seed: int) -> None:
    action, arg = stage.head_action
    if action == "replace":
        replace_head(model, int(arg), derive_seed(stage_seed, "head"), stage.label_space)
    elif action == "add_hierarchy":
        add_hierarchy_head(model, arg)
    elif action == "keep":
        model.head_label_space = stage.label_space
    else:
        raise DataError(f"unknown head action {action!r}")
    mask = stage.freeze_mask(model)
    for layer, frozen in zip(model.layers, mask):
        if layer.params:
            layer.trainable = not frozen
    if model.aggregation_W is not None:
        set_aggregation_trainable(model, stage.W_trainable)


def run_stage(
    model: Model,
    stage: Stage,
    samples: Sequence[TrainingSample],
    dataset: ValidatedDataset,
    hyper: Hyperparameters,
    seed: int,
    report: ScheduleReport,
    record_interval: int = 50,
    early_stop: bool = True,
    extra_images: dict | None = None,
    state: SGDState | None = None,
) -> Model:
    """Execute one stage in place, appending loss rows to the report.

    The optimizer state carries the global iteration that drives the step
    learning-rate schedule; one schedule spans all stages of a run, so a
    later stage continues at the already-decayed rate.
    """
    if not samples:
        raise DataError("cannot train on an empty sample list")
    stage_seed = derive_seed(seed, "stage", stage.seed_tag)
    _apply_stage_setup(model, stage, stage_seed)
    hierarchical = model.aggregation_W is not None
    if stage.label_space == SUBCLASS_SPACE and any(
        s.subclass_label < 0 for s in samples
    ):
        raise DataError(f"stage {stage.name} needs subclass labels on every sample")

    stream = _BatchStream(len(samples), hyper.batch_size, derive_rng(stage_seed, "shuffle"))
    state = state if state is not None else SGDState()
    window: list[float] = []
    prev_window_mean: float | None = None

    if stage.iterations == 0:
        # Still emit one row so every executed stage has a curve.
        x, cls, sub = _assemble(dataset, samples, stream.next_batch(), hyper.patch_size, extra_images)
        out = _loss_only(model, x, cls, sub, hyper, hierarchical)
        report.record(stage.name, 0, learning_rate(hyper, state.iteration),
                      out.total, out.subclass_ce, out.class_ce)
        return model

    for iteration in range(stage.iterations):
        x, cls, sub = _assemble(dataset, samples, stream.next_batch(), hyper.patch_size, extra_images)
        labels = (sub, cls) if hierarchical else (sub if stage.label_space == SUBCLASS_SPACE else cls)
        lr_now = learning_rate(hyper, state.iteration)
        try:
            out = backward_and_step(model, x, labels, hyper, state, hierarchical=hierarchical)
        except NumericalAbort as exc:
            raise NumericalAbort(f"stage {stage.name}: {exc.args[0]}", exc.iteration) from exc
        if iteration % record_interval == 0 or iteration == stage.iterations - 1:
            report.record(
                stage.name, iteration, lr_now,
                out.total, out.subclass_ce, out.class_ce,
            )
        if early_stop:
            window.append(out.total)
            if len(window) == EARLY_STOP_WINDOW:
                mean = float(np.mean(window))
                window.clear()
                if prev_window_mean is not None and prev_window_mean > 0:
                    if (prev_window_mean - mean) / prev_window_mean < EARLY_STOP_MIN_IMPROVEMENT:
                        break
                prev_window_mean = mean
    return model


def _loss_only(model, x, cls, sub, hyper, hierarchical):
    """Loss evaluation without stepping; used for zero-iteration stages."""
    from .network import _mean_ce, _trainable_sq_sum, forward, hierarchical_loss, HierarchicalLossOutput

    logits = forward(model, x)
    theta_sq = _trainable_sq_sum(model)
    if hierarchical:
        out, _, _ = hierarchical_loss(
            logits, sub, cls, model.aggregation_W, hyper.alpha, hyper.beta, theta_sq
        )
        return out
    labels = sub if model.head_label_space == SUBCLASS_SPACE else cls
    ce, _, _ = _mean_ce(logits, np.asarray(labels))
    decay = 0.5 * hyper.beta * theta_sq
    if model.head_label_space == SUBCLASS_SPACE:
        return HierarchicalLossOutput(ce + decay, ce, float("nan"), decay)
    return HierarchicalLossOutput(ce + decay, float("nan"), ce, decay)


def run_schedule(
    model: Model,
    stages: Sequence[Stage],
    samples: Sequence[TrainingSample],
    dataset: ValidatedDataset,
    hyper: Hyperparameters,
    seed: int,
    record_interval: int = 50,
    early_stop: bool = True,
    extra_images: dict | None = None,
) -> tuple[Model, ScheduleReport]:
    """Run every stage in order; deterministic given (seed, config, data).

    A stage that replaces the head (or bolts on the hierarchy stage)
    begins a new fine-tuning run, so the learning-rate schedule restarts
    there; stages that keep the head continue the current run at its
    already-decayed rate.
    """
    report = ScheduleReport()
    state = SGDState()
    try:
        for stage in stages:
            if stage.head_action[0] != "keep":
                state = SGDState()
            run_stage(
                model, stage, samples, dataset, hyper, seed, report,
                record_interval=record_interval, early_stop=early_stop,
                extra_images=extra_images, state=state,
            )
    except NumericalAbort as exc:
        exc.partial_report = report
        raise
    return model, report
