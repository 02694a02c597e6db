"""Few-shot adaptation over a multi-language batch pool: per-task inner
gradient steps on the support half, outer updates to the shared parameters
from query-half gradients, applied once per update window.

Inner and outer losses run in eval mode (no dropout) so task adaptation is
deterministic and finite-difference checkable.
"""

from __future__ import annotations

import csv
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from . import model as mdl
from .autodiff import backward
from .corpus import LanguageBatch, MetaTask, split_task
from .finetune import matching_loss
from .model import Checkpoint, EncoderConfig, ParameterSet
from .validation import check_in, check_phase, check_positive

DIVERGENCE_FACTOR = 1e3


@dataclass
class MetaConfig:
    alpha: float = 1e-5  # inner step size
    beta: float = 1e-4  # outer step size
    window: int = 100  # tasks per outer update
    tasks_per_epoch: int | None = None  # None: the whole pool
    inner_steps: int = 1
    order: str = "first_order"
    outer_aggregation: str = "window_average"  # or "per_task_literal"
    epochs: int = 1
    patience: int | None = None
    seed: int = 0

    def __post_init__(self):
        # alpha 0 is allowed: it collapses the loop onto plain SGD, which the
        # degenerate-equality checks rely on
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        check_positive(self.beta, "beta")
        check_positive(self.window, "window")
        check_positive(self.inner_steps, "inner_steps")
        check_positive(self.epochs, "epochs")
        if self.tasks_per_epoch is not None:
            check_positive(self.tasks_per_epoch, "tasks_per_epoch")
        check_in(self.order, "order", ("first_order", "second_order"))
        check_in(self.outer_aggregation, "outer_aggregation",
                 ("window_average", "per_task_literal"))


def _support_step(theta_i, task, alpha, encoder):
    loss = matching_loss(theta_i, task.support, encoder)
    grads = backward(loss, theta_i)
    for name, t in theta_i.items():
        t.data -= alpha * grads[name]
    return float(loss.data)


def inner_update(
    theta: ParameterSet,
    task: MetaTask,
    alpha: float,
    encoder: EncoderConfig,
    inner_steps: int = 1,
) -> ParameterSet:
    """Adapt a value copy of theta with plain gradient descent on the support
    set; theta itself is untouched."""
    if not task.support:
        raise ValueError("inner_update: empty support set")
    theta_i = theta.copy()
    for _ in range(inner_steps):
        _support_step(theta_i, task, alpha, encoder)
    return theta_i


def _query_gradients(theta_i, task, encoder):
    loss = matching_loss(theta_i, task.query, encoder)
    return backward(loss, theta_i), float(loss.data)


def outer_gradient(
    theta_i: ParameterSet,
    task: MetaTask,
    encoder: EncoderConfig,
    order: str = "first_order",
) -> dict[str, np.ndarray]:
    """Gradient of the query-set loss taken at the adapted parameters.

    Only the first-order form is computable here; asking for second_order
    raises, since this engine does not differentiate through the inner update.
    """
    if not task.query:
        raise ValueError("outer_gradient: empty query set")
    if order == "second_order":
        raise NotImplementedError(
            "second-order outer gradients need an engine that differentiates "
            "through the inner update; this build is first-order only"
        )
    grads, _ = _query_gradients(theta_i, task, encoder)
    return grads


@dataclass
class MetaStep:
    task_index: int
    language: str
    support_loss: float
    query_loss: float
    outer_update_applied: int


def write_history_csv(path, rows: Sequence[MetaStep]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["task_index", "language", "support_loss", "query_loss",
                         "outer_update_applied"])
        for r in rows:
            writer.writerow([r.task_index, r.language, repr(r.support_loss),
                             repr(r.query_loss), r.outer_update_applied])


class MetaLearner(BaseEstimator):
    """Window-batched task adaptation starting from a pretrained checkpoint.

    Per epoch: draw tasks_per_epoch batches from the pool without
    replacement, halve each into support/query, adapt a private parameter
    copy on the support half, and every `window` tasks update the shared
    parameters from the collected query gradients (their mean by default,
    or only the window's last one with outer_aggregation="per_task_literal").
    A window left incomplete at the epoch boundary is dropped.

    After fit: checkpoint_ (phase "meta") and history_. Seeding: child 0
    draws tasks, child 1 splits them.
    """

    def __init__(self, init_checkpoint=None, alpha=1e-5, beta=1e-4, window=100,
                 tasks_per_epoch=None, inner_steps=1, order="first_order",
                 outer_aggregation="window_average", epochs=1, patience=None,
                 seed=0, force=False):
        self.init_checkpoint = init_checkpoint
        self.alpha = alpha
        self.beta = beta
        self.window = window
        self.tasks_per_epoch = tasks_per_epoch
        self.inner_steps = inner_steps
        self.order = order
        self.outer_aggregation = outer_aggregation
        self.epochs = epochs
        self.patience = patience
        self.seed = seed
        self.force = force

    def _config(self) -> MetaConfig:
        return MetaConfig(
            alpha=self.alpha, beta=self.beta, window=self.window,
            tasks_per_epoch=self.tasks_per_epoch, inner_steps=self.inner_steps,
            order=self.order, outer_aggregation=self.outer_aggregation,
            epochs=self.epochs, patience=self.patience, seed=self.seed,
        )

    def fit(self, pool: Sequence[LanguageBatch]):
        cfg = self._config()
        if self.init_checkpoint is None:
            raise ValueError("MetaLearner: init_checkpoint is required")
        check_phase(self.init_checkpoint, ("pretrained",), force=self.force)
        if not pool:
            raise ValueError("MetaLearner: empty batch pool")
        k = cfg.tasks_per_epoch if cfg.tasks_per_epoch is not None else len(pool)
        if k > len(pool):
            raise ValueError(f"MetaLearner: {k} tasks per epoch but the pool has {len(pool)}")

        encoder = self.init_checkpoint.config
        theta = self.init_checkpoint.params.copy()
        draw_rng, split_rng = (
            np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(2)
        )

        history: list[MetaStep] = []
        task_counter = 0
        first_query_loss: float | None = None
        best_epoch_loss, stale_epochs = np.inf, 0
        for _epoch in range(cfg.epochs):
            order = draw_rng.permutation(len(pool))[:k]
            window_grads: list[dict[str, np.ndarray]] = []
            epoch_losses: list[float] = []
            for pos, pool_idx in enumerate(order, start=1):
                batch = pool[int(pool_idx)]
                task = split_task(batch, split_rng)
                task_counter += 1
                try:
                    theta_i = theta.copy()
                    support_loss = np.nan
                    for _ in range(cfg.inner_steps):
                        support_loss = _support_step(theta_i, task, cfg.alpha, encoder)
                    if cfg.order == "second_order":
                        raise NotImplementedError(
                            "second-order outer gradients are not available in this build"
                        )
                    grads, query_loss = _query_gradients(theta_i, task, encoder)
                except FloatingPointError as exc:
                    raise FloatingPointError(f"task {task_counter}: {exc}") from exc
                window_grads.append(grads)
                epoch_losses.append(query_loss)
                if first_query_loss is None:
                    first_query_loss = query_loss
                if query_loss > DIVERGENCE_FACTOR * max(abs(first_query_loss), 1e-12):
                    raise RuntimeError(
                        f"meta training diverged at task {task_counter}: query loss "
                        f"{query_loss:.4g} vs initial {first_query_loss:.4g}"
                    )
                applied = 0
                if pos % cfg.window == 0:
                    agg = self._aggregate(window_grads, cfg.outer_aggregation)
                    for name, t in theta.items():
                        t.data -= cfg.beta * agg[name]
                    window_grads = []
                    applied = 1
                history.append(
                    MetaStep(task_counter, batch.language, support_loss, query_loss, applied)
                )
            epoch_loss = float(np.mean(epoch_losses))
            if cfg.patience is not None:
                if epoch_loss < best_epoch_loss - 1e-12:
                    best_epoch_loss, stale_epochs = epoch_loss, 0
                else:
                    stale_epochs += 1
                    if stale_epochs >= cfg.patience:
                        break

        self.checkpoint_ = Checkpoint(
            version=mdl.CHECKPOINT_VERSION, config=encoder, params=theta, phase="meta",
            metrics={"tasks_seen": task_counter,
                     "mean_final_epoch_query_loss": epoch_loss},
        )
        self.history_ = history
        return self

    @staticmethod
    def _aggregate(window_grads, mode):
        if mode == "per_task_literal":
            return window_grads[-1]
        names = window_grads[0].keys()
        scale = 1.0 / len(window_grads)
        return {n: sum(g[n] for g in window_grads) * scale for n in names}
