"""Ranked code search and the retrieval evaluation harness: reciprocal-rank
and top-k metrics over the square query-by-candidate protocol, plus the
training-set-size sweep."""

from __future__ import annotations

import csv
import json
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import model as mdl
from .corpus import CorpusSplit, PairExample
from .finetune import MatchFinetuner
from .model import Checkpoint, EncoderConfig
from .validation import check_pairs, check_phase, check_positive

Scorer = Callable[[Sequence[int], Sequence[Sequence[int]]], np.ndarray]


@dataclass
class SearchResult:
    """Candidates ordered by matching score, ties broken by ascending id."""

    entries: list[tuple] = field(default_factory=list)  # (snippet_id, score)

    def __post_init__(self):
        scores = [s for _, s in self.entries]
        if any(a < b for a, b in zip(scores, scores[1:])):
            raise ValueError("SearchResult: scores must be non-increasing")
        ids = [i for i, _ in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("SearchResult: snippet ids must be unique")

    def top(self, k: int) -> list[tuple]:
        return self.entries[:k]


@dataclass
class EvalReport:
    mrr: float
    acc_at: dict[int, float]
    ranks: list[int]
    n_queries: int
    n_candidates: int

    def __post_init__(self):
        if not 0.0 <= self.mrr <= 1.0:
            raise ValueError(f"EvalReport: mrr {self.mrr} outside [0, 1]")
        ks = sorted(self.acc_at)
        accs = [self.acc_at[k] for k in ks]
        if any(a > b for a, b in zip(accs, accs[1:])) or any(
            not 0.0 <= a <= 1.0 for a in accs
        ):
            raise ValueError(f"EvalReport: top-k accuracies not monotone in k: {self.acc_at}")
        if 1 in self.acc_at and self.mrr + 1e-12 < self.acc_at[1]:
            raise ValueError("EvalReport: mrr must be >= acc@1")

    def to_json(self) -> str:
        payload = {
            "mrr": self.mrr,
            "acc_at": {str(k): v for k, v in sorted(self.acc_at.items())},
            "ranks": self.ranks,
            "n_queries": self.n_queries,
            "n_candidates": self.n_candidates,
        }
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def mrr(ranks: Sequence[int]) -> float:
    """Arithmetic mean of reciprocal ranks."""
    if not len(ranks):
        raise ValueError("mrr: empty rank list")
    for r in ranks:
        if int(r) != r or r < 1:
            raise ValueError(f"mrr: ranks must be positive integers, got {r!r}")
    return float(np.mean([1.0 / r for r in ranks]))


def topk_accuracy(ranks: Sequence[int], k: int) -> float:
    """Fraction of queries whose correct snippet sits within the first k."""
    if k < 1:
        raise ValueError(f"topk_accuracy: k must be >= 1, got {k}")
    if not len(ranks):
        raise ValueError("topk_accuracy: empty rank list")
    return float(np.mean([1.0 if r <= k else 0.0 for r in ranks]))


def make_scorer(
    params: Mapping[str, ad.Tensor],
    encoder: EncoderConfig,
    chunk_size: int = 128,
) -> Scorer:
    """Matching-probability scorer over (query, snippet) pairs, chunked so
    memory stays flat; chunking cannot change per-pair scores."""
    check_positive(chunk_size, "chunk_size")

    def score(query_tokens, snippet_token_rows):
        out = np.empty(len(snippet_token_rows))
        for start in range(0, len(snippet_token_rows), chunk_size):
            rows = snippet_token_rows[start : start + chunk_size]
            encoded = [
                mdl.encode_pair_sequence(query_tokens, pl, encoder) for pl in rows
            ]
            ids = np.stack([e[0] for e in encoded])
            pad = np.stack([e[1] for e in encoded])
            hidden = mdl.forward_batch(params, ids, pad, encoder)
            logits = mdl.match_logits_batch(params, hidden, pad, encoder)
            out[start : start + len(rows)] = mdl.match_scores(logits)
        return out

    return score


def rank_candidates(
    params: Mapping[str, ad.Tensor],
    encoder: EncoderConfig,
    query_tokens: Sequence[int],
    snippets: Sequence[tuple],
    chunk_size: int = 128,
) -> SearchResult:
    """Score every (query, snippet) pair and sort descending, ids ascending on ties."""
    if not snippets:
        raise ValueError("rank_candidates: empty codebase")
    if not len(query_tokens):
        raise ValueError("rank_candidates: empty query after tokenization")
    scorer = make_scorer(params, encoder, chunk_size)
    scores = scorer(query_tokens, [tokens for _, tokens in snippets])
    order = sorted(range(len(snippets)), key=lambda i: (-scores[i], snippets[i][0]))
    return SearchResult([(snippets[i][0], float(scores[i])) for i in order])


def evaluate(
    test_pairs: Sequence[PairExample],
    n_candidates: int,
    scorer: Scorer,
) -> EvalReport:
    """Rank each query's true snippet among the test set's own snippets.

    The first n_candidates pairs form a square protocol: their descriptions
    are the queries, their snippets the shared candidate pool. Ties resolve
    by ascending candidate index.
    """
    check_pairs(test_pairs, "evaluate test pairs", labels={1})
    check_positive(n_candidates, "n_candidates")
    if n_candidates > len(test_pairs):
        raise ValueError(
            f"evaluate: n_candidates {n_candidates} > {len(test_pairs)} test pairs"
        )
    pool = list(test_pairs[:n_candidates])
    snippets = [p.pl_tokens for p in pool]
    if len(set(snippets)) != len(snippets):
        raise ValueError(
            "evaluate: duplicate PL among candidates makes ranks undefined; "
            "deduplicate the test set first"
        )
    ranks = []
    for qi, query in enumerate(pool):
        scores = scorer(query.nl_tokens, snippets)
        true_score = scores[qi]
        better = int((scores > true_score).sum())
        tied_before = int((scores[:qi] == true_score).sum())
        ranks.append(1 + better + tied_before)
    return EvalReport(
        mrr=mrr(ranks),
        acc_at={k: topk_accuracy(ranks, k) for k in (1, 5, 10)},
        ranks=ranks,
        n_queries=len(pool),
        n_candidates=n_candidates,
    )


def evaluate_checkpoint(
    ckpt: Checkpoint,
    test_pairs: Sequence[PairExample],
    n_candidates: int,
    chunk_size: int = 128,
) -> EvalReport:
    return evaluate(test_pairs, n_candidates,
                    make_scorer(ckpt.params, ckpt.config, chunk_size))


# ---------------------------------------------------------------------------
# training-set-size sweep


@dataclass
class SweepRow:
    init: str
    size: int
    seed: int
    mrr: float
    acc1: float
    acc5: float
    acc10: float


def _subsample_balanced(train: Sequence[PairExample], size: int, seed: int):
    """Pick `size` examples preserving the label balance and original order."""
    if size >= len(train):
        return list(train)
    pos = [i for i, p in enumerate(train) if p.label == 1]
    neg = [i for i, p in enumerate(train) if p.label == 0]
    n_pos = min(len(pos), (size + 1) // 2)
    n_neg = min(len(neg), size - n_pos)
    rng = np.random.default_rng(seed)
    chosen = sorted(
        list(rng.choice(pos, size=n_pos, replace=False))
        + list(rng.choice(neg, size=n_neg, replace=False))
    )
    return [train[i] for i in chosen]


def data_size_sweep(
    inits: Mapping[str, Checkpoint | None],
    split: CorpusSplit,
    sizes: Sequence[int],
    seeds: Sequence[int],
    finetune_params: Mapping | None = None,
    encoder: EncoderConfig | None = None,
    n_candidates: int = 100,
    chunk_size: int = 128,
) -> list[SweepRow]:
    """Fine-tune at each training-set size and seed, then evaluate.

    inits maps a label to a starting checkpoint (None means random init,
    which needs `encoder`). Size 0 evaluates the starting point untrained.
    """
    if list(sizes) != sorted(sizes) or (sizes and sizes[0] < 0):
        raise ValueError(f"data_size_sweep: sizes must be ascending and >= 0, got {sizes}")
    for s in sizes:
        if s > len(split.train):
            raise ValueError(f"data_size_sweep: size {s} > train split of {len(split.train)}")
    ft_kwargs = dict(finetune_params or {})
    rows: list[SweepRow] = []
    for label, ckpt in inits.items():
        for size in sizes:
            for seed in seeds:
                if size == 0:
                    if ckpt is None:
                        enc = encoder
                        params = mdl.init_params(enc, seed=seed)
                    else:
                        enc = ckpt.config
                        params = ckpt.params
                    report = evaluate(split.test, n_candidates,
                                      make_scorer(params, enc, chunk_size))
                else:
                    sub = CorpusSplit(
                        train=_subsample_balanced(split.train, size, seed),
                        valid=split.valid,
                        test=split.test,
                    )
                    est = MatchFinetuner(init_checkpoint=ckpt, encoder=encoder,
                                         seed=seed, **ft_kwargs)
                    est.fit(sub)
                    report = evaluate_checkpoint(est.checkpoint_, split.test,
                                                 n_candidates, chunk_size)
                rows.append(SweepRow(label, size, seed, report.mrr,
                                     report.acc_at[1], report.acc_at[5], report.acc_at[10]))
    return rows


def summarize_sweep(rows: Sequence[SweepRow]) -> dict[tuple[str, int], dict[str, float]]:
    """Mean and stddev of MRR per (init, size) across seeds."""
    grouped: dict[tuple[str, int], list[float]] = {}
    for r in rows:
        grouped.setdefault((r.init, r.size), []).append(r.mrr)
    return {
        key: {"mean_mrr": float(np.mean(v)), "std_mrr": float(np.std(v)), "n": len(v)}
        for key, v in grouped.items()
    }


def write_sweep_csv(path, rows: Sequence[SweepRow]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["init", "size", "seed", "mrr", "acc1", "acc5", "acc10"])
        for r in rows:
            writer.writerow([r.init, r.size, r.seed, repr(r.mrr), repr(r.acc1),
                             repr(r.acc5), repr(r.acc10)])


class CodeSearcher:
    """Query-to-ranked-snippets interface over a fine-tuned checkpoint."""

    def __init__(self, checkpoint: Checkpoint, chunk_size: int = 128, force: bool = False):
        check_phase(checkpoint, ("finetuned",), force=force)
        self.checkpoint = checkpoint
        self.chunk_size = chunk_size

    def rank(self, query_tokens: Sequence[int], snippets: Sequence[tuple]) -> SearchResult:
        return rank_candidates(
            self.checkpoint.params, self.checkpoint.config, query_tokens, snippets,
            self.chunk_size,
        )
