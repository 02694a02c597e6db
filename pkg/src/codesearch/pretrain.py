"""Masked-language-model pretraining over positive pairs from the source
languages, with warmup plus linear (or cosine) learning-rate decay."""

from __future__ import annotations

import csv
from collections.abc import Mapping, Sequence
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from . import autodiff as ad
from . import model as mdl
from .autodiff import OptimizerState, Tensor, backward, optimizer_step
from .corpus import BOS, CLS, EOS, MASK, PAD, SEP, N_SPECIALS, PairExample
from .model import Checkpoint, EncoderConfig, ParameterSet
from .validation import check_fraction, check_in, check_pairs, check_positive

# [MASK] replacement never targets these; [UNK] counts as content.
NEVER_MASK = frozenset({PAD, CLS, SEP, EOS, BOS})


@dataclass
class PretrainConfig:
    mask_rate: float = 0.15
    mask_style: str = "replace_all"  # or "bert_80_10_10"
    lr: float = 5e-5
    warmup_steps: int | None = None  # None: scaled default, see resolved_warmup
    total_steps: int = 300
    batch_size: int = 64
    decay: str = "linear"  # or "cosine"
    eval_every: int = 50
    valid_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        # mask_rate 0 is allowed so the force-one-mask rule stays testable
        if not 0.0 <= self.mask_rate < 1.0:
            raise ValueError(f"mask_rate must be in [0, 1), got {self.mask_rate}")
        check_in(self.mask_style, "mask_style", ("replace_all", "bert_80_10_10"))
        check_in(self.decay, "decay", ("linear", "cosine"))
        check_positive(self.lr, "lr")
        check_positive(self.total_steps, "total_steps")
        check_positive(self.batch_size, "batch_size")
        check_positive(self.eval_every, "eval_every")
        check_fraction(self.valid_fraction, "valid_fraction")
        if self.warmup_steps is not None:
            check_positive(self.warmup_steps, "warmup_steps", strict=False)
            if self.warmup_steps > self.total_steps:
                raise ValueError(
                    f"warmup_steps {self.warmup_steps} > total_steps {self.total_steps}"
                )

    def resolved_warmup(self) -> int:
        if self.warmup_steps is not None:
            return self.warmup_steps
        # keep the reference 1000/10000 warmup ratio at smaller budgets
        if self.total_steps < 10_000:
            return max(1, round(self.total_steps * 0.1))
        return 1000


def lr_at(step: int, config) -> float:
    """Schedule value at a step: linear ramp over warmup, then decay to zero."""
    total = config.total_steps
    warm = config.resolved_warmup()
    if not 0 <= step <= total:
        raise ValueError(f"lr_at: step {step} outside [0, {total}]")
    if step <= warm:
        return config.lr * (step / warm) if warm > 0 else config.lr
    frac = (step - warm) / (total - warm)
    if getattr(config, "decay", "linear") == "cosine":
        return config.lr * 0.5 * (1.0 + np.cos(np.pi * frac))
    return config.lr * (1.0 - frac)


def mask_sequence(
    sequence: np.ndarray,
    mask: np.ndarray,
    config: PretrainConfig,
    rng: np.random.Generator,
    vocab_size: int | None = None,
) -> tuple[np.ndarray, dict[int, int]]:
    """Independently mask content positions; if none get drawn, force one.

    Returns the masked sequence and {position: original id} targets.
    bert_80_10_10 style needs vocab_size for its random-token branch.
    """
    sequence = np.asarray(sequence)
    mask = np.asarray(mask)
    maskable = [
        i for i in range(len(sequence)) if mask[i] and int(sequence[i]) not in NEVER_MASK
    ]
    if not maskable:
        raise ValueError("mask_sequence: no maskable positions")
    draws = rng.random(len(maskable))
    picked = [pos for pos, u in zip(maskable, draws) if u < config.mask_rate]
    if not picked:
        picked = [maskable[int(rng.integers(len(maskable)))]]
    masked = sequence.copy()
    targets: dict[int, int] = {}
    for pos in picked:
        targets[pos] = int(sequence[pos])
        if config.mask_style == "replace_all":
            masked[pos] = MASK
        else:
            u = rng.random()
            if u < 0.8:
                masked[pos] = MASK
            elif u < 0.9:
                if vocab_size is None:
                    raise ValueError("mask_sequence: bert_80_10_10 needs vocab_size")
                masked[pos] = int(rng.integers(N_SPECIALS, vocab_size))
            # else: leave the original token in place
    return masked, targets


def mlm_loss(
    params: Mapping[str, Tensor],
    sequence: np.ndarray,
    pad_mask: np.ndarray,
    targets: Mapping[int, int],
    encoder: EncoderConfig,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Mean cross-entropy at the masked positions of one sequence."""
    if not targets:
        raise ValueError("mlm_loss: empty target map")
    positions = np.fromiter(targets.keys(), dtype=np.int64)
    if positions.max() >= len(sequence):
        raise IndexError(f"mlm_loss: target position {int(positions.max())} out of range")
    hidden = mdl.forward(params, sequence, pad_mask, encoder, train_mode=train_mode, rng=rng)
    logits = mdl.mlm_logits(params, hidden, encoder)
    picked = ad.take_rows(logits, positions)
    return ad.cross_entropy_with_logits(picked, np.fromiter(targets.values(), dtype=np.int64))


def _mask_batch(ids, pad, config, rng, vocab_size):
    seq_len = ids.shape[1]
    masked = np.empty_like(ids)
    flat_pos: list[int] = []
    target_ids: list[int] = []
    for b in range(ids.shape[0]):
        row, targets = mask_sequence(ids[b], pad[b], config, rng, vocab_size)
        masked[b] = row
        for pos, orig in targets.items():
            flat_pos.append(b * seq_len + pos)
            target_ids.append(orig)
    return masked, np.array(flat_pos, dtype=np.int64), np.array(target_ids, dtype=np.int64)


def _mlm_loss_batch(params, ids, pad, flat_pos, target_ids, encoder, train_mode, rng):
    hidden = mdl.forward_batch(params, ids, pad, encoder, train_mode=train_mode, rng=rng)
    b, s, d = hidden.shape
    logits = mdl.mlm_logits(params, ad.reshape(hidden, (b * s, d)), encoder)
    return ad.cross_entropy_with_logits(ad.take_rows(logits, flat_pos), target_ids)


@dataclass
class PretrainStep:
    step: int
    lr: float
    train_loss: float
    valid_loss: float | None


def write_history_csv(path, rows: Sequence[PretrainStep]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "lr", "train_loss", "valid_loss"])
        for r in rows:
            writer.writerow(
                [r.step, repr(r.lr), repr(r.train_loss),
                 "" if r.valid_loss is None else repr(r.valid_loss)]
            )


class MlmPretrainer(BaseEstimator):
    """Masked-token pretraining on positive description/code pairs.

    Parameters mirror PretrainConfig plus the encoder geometry. fit() takes
    {language: [PairExample, ...]} with every label 1, trains with Adam under
    the warmup/decay schedule, and exposes checkpoint_ and history_.

    Seeding layout (fixed so reruns replay exactly): child 0 initializes
    parameters, 1 shuffles data, 2 drives training masking, 3 dropout,
    4 validation masking.
    """

    def __init__(self, encoder=None, mask_rate=0.15, mask_style="replace_all",
                 lr=5e-5, warmup_steps=None, total_steps=300, batch_size=64,
                 decay="linear", eval_every=50, valid_fraction=0.1, seed=0):
        self.encoder = encoder
        self.mask_rate = mask_rate
        self.mask_style = mask_style
        self.lr = lr
        self.warmup_steps = warmup_steps
        self.total_steps = total_steps
        self.batch_size = batch_size
        self.decay = decay
        self.eval_every = eval_every
        self.valid_fraction = valid_fraction
        self.seed = seed

    def _config(self) -> PretrainConfig:
        return PretrainConfig(
            mask_rate=self.mask_rate, mask_style=self.mask_style, lr=self.lr,
            warmup_steps=self.warmup_steps, total_steps=self.total_steps,
            batch_size=self.batch_size, decay=self.decay, eval_every=self.eval_every,
            valid_fraction=self.valid_fraction, seed=self.seed,
        )

    def fit(self, corpora: Mapping[str, Sequence[PairExample]]):
        cfg = self._config()
        if self.encoder is None:
            raise ValueError("MlmPretrainer: encoder config is required")
        encoder: EncoderConfig = self.encoder
        for lang in sorted(corpora):
            check_pairs(corpora[lang], f"pretraining corpus {lang!r}", labels={1})
        pairs = [p for lang in sorted(corpora) for p in corpora[lang]]

        init_rng, shuffle_rng, mask_rng, drop_rng, vmask_rng = (
            np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(5)
        )
        params = _init_from_rng(encoder, init_rng)

        ids, pad = mdl.encode_pair_batch(pairs, encoder)
        n = len(pairs)
        n_valid = min(max(1, round(cfg.valid_fraction * n)), n - 1) if cfg.valid_fraction else 0
        order = shuffle_rng.permutation(n)
        valid_idx, train_idx = order[:n_valid], order[n_valid:]
        if train_idx.size == 0:
            raise ValueError("MlmPretrainer: no training pairs left after the valid split")

        opt = OptimizerState("adam", lr=cfg.lr)
        history: list[PretrainStep] = []
        cursor = np.array([], dtype=np.int64)
        for step in range(1, cfg.total_steps + 1):
            if cursor.size < cfg.batch_size:
                cursor = np.concatenate([cursor, shuffle_rng.permutation(train_idx)])
            take, cursor = cursor[: cfg.batch_size], cursor[cfg.batch_size:]
            masked, pos, tgt = _mask_batch(ids[take], pad[take], cfg, mask_rng, encoder.vocab_size)
            loss = _mlm_loss_batch(
                params, masked, pad[take], pos, tgt, encoder,
                train_mode=encoder.dropout > 0, rng=drop_rng,
            )
            grads = backward(loss, params)
            opt.lr = lr_at(step, cfg)
            optimizer_step(opt, params, grads)
            valid_loss = None
            if valid_idx.size and (step % cfg.eval_every == 0 or step == cfg.total_steps):
                valid_loss = self._valid_loss(params, ids[valid_idx], pad[valid_idx], cfg,
                                              encoder, vmask_rng)
            history.append(PretrainStep(step, opt.lr, float(loss.data), valid_loss))

        metrics = {
            "initial_train_loss": history[0].train_loss,
            "final_train_loss": history[-1].train_loss,
            "final_valid_loss": history[-1].valid_loss,
        }
        self.checkpoint_ = Checkpoint(
            version=mdl.CHECKPOINT_VERSION, config=encoder, params=ParameterSet(dict(params)),
            phase="pretrained", metrics=metrics,
        )
        self.history_ = history
        return self

    @staticmethod
    def _valid_loss(params, ids, pad, cfg, encoder, rng):
        masked, pos, tgt = _mask_batch(ids, pad, cfg, rng, encoder.vocab_size)
        loss = _mlm_loss_batch(params, masked, pad, pos, tgt, encoder, False, None)
        return float(loss.data)


def _init_from_rng(encoder: EncoderConfig, rng: np.random.Generator) -> ParameterSet:
    # same layout as model.init_params but driven by an already-spawned stream
    seed = int(rng.integers(0, 2**31 - 1))
    return mdl.init_params(encoder, seed)


def masked_token_accuracy(
    params: Mapping[str, Tensor],
    pairs: Sequence[PairExample],
    encoder: EncoderConfig,
    config: PretrainConfig,
    seed: int = 0,
) -> float:
    """Top-1 accuracy at masked positions of held-out pairs (eval mode)."""
    check_pairs(pairs, "masked_token_accuracy")
    rng = np.random.default_rng(seed)
    ids, pad = mdl.encode_pair_batch(pairs, encoder)
    masked, pos, tgt = _mask_batch(ids, pad, config, rng, encoder.vocab_size)
    hidden = mdl.forward_batch(params, masked, pad, encoder)
    b, s, d = hidden.shape
    logits = mdl.mlm_logits(params, ad.reshape(hidden, (b * s, d)), encoder)
    pred = logits.data[pos].argmax(axis=-1)
    return float((pred == tgt).mean())
