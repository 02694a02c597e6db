"""Target-language adaptation: binary relevance classification (default) or
the cosine triplet ranking objective, with best-validation checkpointing."""

from __future__ import annotations

import csv
import json
from collections.abc import Mapping, Sequence
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from . import model as mdl
from .autodiff import OptimizerState, Tensor, backward, optimizer_step
from .corpus import CorpusSplit, PairExample
from .model import Checkpoint, EncoderConfig, ParameterSet
from .pretrain import lr_at
from .validation import (
    check_in,
    check_pairs,
    check_phase,
    check_positive,
    positive_fraction,
)


@dataclass
class FinetuneConfig:
    lr: float = 5e-5
    warmup_steps: int | None = None
    total_steps: int = 300
    batch_size: int = 64
    objective: str = "binary_ce"  # or "triplet"
    margin: float = 0.3
    printed_margin_form: bool = False
    eval_every: int = 50
    decay: str = "linear"
    seed: int = 0

    def __post_init__(self):
        check_positive(self.lr, "lr")
        check_positive(self.total_steps, "total_steps")
        check_positive(self.batch_size, "batch_size")
        check_positive(self.eval_every, "eval_every")
        check_positive(self.margin, "margin")
        check_in(self.objective, "objective", ("binary_ce", "triplet"))
        check_in(self.decay, "decay", ("linear", "cosine"))
        if self.warmup_steps is not None and self.warmup_steps > self.total_steps:
            raise ValueError(
                f"warmup_steps {self.warmup_steps} > total_steps {self.total_steps}"
            )

    def resolved_warmup(self) -> int:
        if self.warmup_steps is not None:
            return self.warmup_steps
        if self.total_steps < 10_000:
            return max(1, round(self.total_steps * 0.1))
        return 1000


def matching_loss(
    params: Mapping[str, Tensor],
    batch: Sequence[PairExample],
    encoder: EncoderConfig,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Mean cross-entropy of the matching head against the batch labels."""
    check_pairs(batch, "matching_loss", labels={0, 1})
    ids, pad = mdl.encode_pair_batch(batch, encoder)
    hidden = mdl.forward_batch(params, ids, pad, encoder, train_mode=train_mode, rng=rng)
    logits = mdl.match_logits_batch(params, hidden, pad, encoder)
    labels = np.array([p.label for p in batch], dtype=np.int64)
    return ad.cross_entropy_with_logits(logits, labels)


def triplet_loss(
    c_vec: Tensor,
    d_pos_vec: Tensor,
    d_neg_vec: Tensor,
    margin: float,
    printed_form: bool = False,
) -> Tensor:
    """Hinge on cosine similarities: zero once the correct description is at
    least `margin` closer to the code than the distractor.

    printed_form flips the two cosine terms for exactness experiments against
    the opposite orientation.
    """
    if margin <= 0:
        raise ValueError(f"triplet_loss: margin must be > 0, got {margin}")
    cp = ad.cosine_similarity(c_vec, d_pos_vec)
    cn = ad.cosine_similarity(c_vec, d_neg_vec)
    gap = ad.sub(cp, cn) if printed_form else ad.sub(cn, cp)
    return ad.relu(ad.add(gap, margin))


def embed_tokens(
    params: Mapping[str, Tensor],
    token_rows: Sequence[Sequence[int]],
    encoder: EncoderConfig,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Aggregate vectors [n, d_model] for single-segment token sequences."""
    encoded = [mdl.encode_single_sequence(t, encoder) for t in token_rows]
    ids = np.stack([e[0] for e in encoded])
    pad = np.stack([e[1] for e in encoded])
    hidden = mdl.forward_batch(params, ids, pad, encoder, train_mode=train_mode, rng=rng)
    b, s, d = hidden.shape
    pos = mdl._aggregate_positions(pad, encoder)
    return ad.take_rows(ad.reshape(hidden, (b * s, d)), np.arange(b) * s + pos)


def _triplet_batch_loss(params, batch, encoder, margin, printed_form, train_mode, rng):
    # anchors are code vectors; distractor descriptions are drawn in-batch
    positives = [p for p in batch if p.label == 1]
    if len(positives) < 2:
        raise ValueError("triplet objective needs >= 2 positive pairs per batch")
    code_vecs = embed_tokens(params, [p.pl_tokens for p in positives], encoder,
                             train_mode, rng)
    nl_vecs = embed_tokens(params, [p.nl_tokens for p in positives], encoder,
                           train_mode, rng)
    d = encoder.d_model
    total = None
    n = len(positives)
    for i in range(n):
        c = ad.reshape(ad.narrow(code_vecs, 0, i, 1), (d,))
        dp = ad.reshape(ad.narrow(nl_vecs, 0, i, 1), (d,))
        dn = ad.reshape(ad.narrow(nl_vecs, 0, (i + 1) % n, 1), (d,))
        term = triplet_loss(c, dp, dn, margin, printed_form)
        total = term if total is None else ad.add(total, term)
    return ad.mul(total, 1.0 / n)


def _valid_accuracy_binary(params, pairs, encoder, batch_size):
    good = 0
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start : start + batch_size]
        ids, pad = mdl.encode_pair_batch(chunk, encoder)
        hidden = mdl.forward_batch(params, ids, pad, encoder)
        logits = mdl.match_logits_batch(params, hidden, pad, encoder)
        pred = logits.data.argmax(axis=-1)
        good += int((pred == np.array([p.label for p in chunk])).sum())
    return good / len(pairs)


def _valid_accuracy_triplet(params, pairs, encoder, margin):
    positives = [p for p in pairs if p.label == 1]
    if len(positives) < 2:
        raise ValueError("triplet validation needs >= 2 positive pairs")
    code_vecs = embed_tokens(params, [p.pl_tokens for p in positives], encoder).data
    nl_vecs = embed_tokens(params, [p.nl_tokens for p in positives], encoder).data

    def cos(a, b):
        return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))

    n = len(positives)
    ordered = sum(
        cos(code_vecs[i], nl_vecs[i]) > cos(code_vecs[i], nl_vecs[(i + 1) % n])
        for i in range(n)
    )
    return ordered / n


@dataclass
class FinetuneStep:
    step: int
    train_loss: float
    valid_accuracy: float | None


def write_history_csv(path, rows: Sequence[FinetuneStep]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "train_loss", "valid_accuracy"])
        for r in rows:
            writer.writerow([r.step, repr(r.train_loss),
                             "" if r.valid_accuracy is None else repr(r.valid_accuracy)])


def write_summary_json(path, summary: Mapping) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(dict(summary), fh, sort_keys=True, indent=2)
        fh.write("\n")


class MatchFinetuner(BaseEstimator):
    """Pair-relevance classifier fine-tuned from a pretrained or meta checkpoint.

    Parameters
    ----------
    init_checkpoint : Checkpoint or None
        Starting point; phase must be pretrained or meta unless force=True.
        None trains from random init, which needs `encoder`.
    encoder : EncoderConfig, optional
        Only used when init_checkpoint is None.
    objective : {"binary_ce", "triplet"}
        Cross-entropy on the matching head, or the cosine ranking hinge over
        separately embedded code and descriptions.

    After fit: checkpoint_ (best validation snapshot, phase "finetuned"),
    history_, summary_. Seeding: child 0 init, 1 shuffling, 2 dropout.
    """

    def __init__(self, init_checkpoint=None, encoder=None, lr=5e-5, warmup_steps=None,
                 total_steps=300, batch_size=64, objective="binary_ce", margin=0.3,
                 printed_margin_form=False, eval_every=50, decay="linear", seed=0,
                 force=False):
        self.init_checkpoint = init_checkpoint
        self.encoder = encoder
        self.lr = lr
        self.warmup_steps = warmup_steps
        self.total_steps = total_steps
        self.batch_size = batch_size
        self.objective = objective
        self.margin = margin
        self.printed_margin_form = printed_margin_form
        self.eval_every = eval_every
        self.decay = decay
        self.seed = seed
        self.force = force

    def _config(self) -> FinetuneConfig:
        return FinetuneConfig(
            lr=self.lr, warmup_steps=self.warmup_steps, total_steps=self.total_steps,
            batch_size=self.batch_size, objective=self.objective, margin=self.margin,
            printed_margin_form=self.printed_margin_form, eval_every=self.eval_every,
            decay=self.decay, seed=self.seed,
        )

    def fit(self, split: CorpusSplit):
        cfg = self._config()
        init_rng, shuffle_rng, drop_rng = (
            np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(3)
        )
        if self.init_checkpoint is not None:
            check_phase(self.init_checkpoint, ("pretrained", "meta"), force=self.force)
            encoder = self.init_checkpoint.config
            params = self.init_checkpoint.params.copy()
        else:
            if self.encoder is None:
                raise ValueError("MatchFinetuner: encoder config needed for random init")
            encoder = self.encoder
            params = mdl.init_params(encoder, seed=int(init_rng.integers(0, 2**31 - 1)))

        check_pairs(split.train, "finetune train split", labels={0, 1})
        if not split.valid:
            raise ValueError("finetune: empty valid split")
        warnings: list[str] = []
        frac = positive_fraction(split.train)
        if cfg.objective == "binary_ce" and not 0.4 <= frac <= 0.6:
            warnings.append(
                f"train labels unbalanced: {frac:.2f} positive (expected about half)"
            )

        opt = OptimizerState("adam", lr=cfg.lr)
        history: list[FinetuneStep] = []
        best_acc, best_step, best_params = -1.0, -1, None
        train = list(split.train)
        if cfg.objective == "triplet":
            # distractor descriptions come from inside the batch, so the
            # triplet route consumes positives only
            train = [p for p in train if p.label == 1]
            if len(train) < 2:
                raise ValueError("triplet objective needs >= 2 positive training pairs")
        cursor: list[PairExample] = []
        for step in range(1, cfg.total_steps + 1):
            if len(cursor) < cfg.batch_size:
                order = shuffle_rng.permutation(len(train))
                cursor.extend(train[i] for i in order)
            batch, cursor = cursor[: cfg.batch_size], cursor[cfg.batch_size:]
            train_mode = encoder.dropout > 0
            if cfg.objective == "binary_ce":
                loss = matching_loss(params, batch, encoder, train_mode, drop_rng)
            else:
                loss = _triplet_batch_loss(params, batch, encoder, cfg.margin,
                                           cfg.printed_margin_form, train_mode, drop_rng)
            grads = backward(loss, params)
            opt.lr = lr_at(step, cfg)
            optimizer_step(opt, params, grads)

            acc = None
            if step % cfg.eval_every == 0 or step == cfg.total_steps:
                if cfg.objective == "binary_ce":
                    acc = _valid_accuracy_binary(params, split.valid, encoder, cfg.batch_size)
                else:
                    acc = _valid_accuracy_triplet(params, split.valid, encoder, cfg.margin)
                if acc > best_acc:
                    best_acc, best_step = acc, step
                    best_params = params.copy()
            history.append(FinetuneStep(step, float(loss.data), acc))

        assert best_params is not None  # eval always runs at total_steps
        summary = {
            "best_step": best_step,
            "best_valid_accuracy": best_acc,
            "objective": cfg.objective,
            "warnings": warnings,
        }
        self.checkpoint_ = Checkpoint(
            version=mdl.CHECKPOINT_VERSION, config=encoder,
            params=ParameterSet(dict(best_params)), phase="finetuned", metrics=summary,
        )
        self.history_ = history
        self.summary_ = summary
        return self

    def predict_proba(self, pairs: Sequence[PairExample]) -> np.ndarray:
        check_is_fitted(self, "checkpoint_")
        encoder = self.checkpoint_.config
        params = self.checkpoint_.params
        out = np.empty((len(pairs), 2))
        for start in range(0, len(pairs), self.batch_size):
            chunk = pairs[start : start + self.batch_size]
            ids, pad = mdl.encode_pair_batch(chunk, encoder)
            hidden = mdl.forward_batch(params, ids, pad, encoder)
            logits = mdl.match_logits_batch(params, hidden, pad, encoder)
            out[start : start + len(chunk)] = ad.softmax(logits).data
        return out

    def predict(self, pairs: Sequence[PairExample]) -> np.ndarray:
        return self.predict_proba(pairs).argmax(axis=-1)

    def score(self, pairs: Sequence[PairExample], y=None) -> float:
        labels = np.array([p.label for p in pairs]) if y is None else np.asarray(y)
        return float((self.predict(pairs) == labels).mean())
