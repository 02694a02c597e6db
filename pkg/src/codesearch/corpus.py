"""Corpus handling: pair loading, vocabulary, negatives, batch pool, synthetic data.

Everything here is a pure function of (input, seed). Natural-language text
is lowercased before tokenization, code keeps its case.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

PAD, UNK, CLS, SEP, EOS, MASK, BOS = range(7)
SPECIAL_TOKENS = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[EOS]", "[MASK]", "[BOS]"]
N_SPECIALS = len(SPECIAL_TOKENS)

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def tokenize_nl(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def tokenize_pl(text: str) -> list[str]:
    return _TOKEN_RE.findall(text)


@dataclass(frozen=True)
class RawPair:
    """One untokenized description/code pair."""

    nl: str
    code: str
    language: str
    label: int = 1


@dataclass(frozen=True)
class PairExample:
    """One encoded pair: token ids, relevance label, provenance language."""

    nl_tokens: tuple[int, ...]
    pl_tokens: tuple[int, ...]
    label: int
    language: str

    def __post_init__(self):
        if not self.nl_tokens or not self.pl_tokens:
            raise ValueError("PairExample: token lists must be non-empty")
        if self.label not in (0, 1):
            raise ValueError(f"PairExample: label must be 0 or 1, got {self.label}")

    def key(self) -> tuple:
        return (self.nl_tokens, self.pl_tokens)


@dataclass
class CorpusSplit:
    train: list[PairExample]
    valid: list[PairExample]
    test: list[PairExample]


@dataclass
class MetaTask:
    """One meta-learning task: a batch split into support and query halves."""

    support: list[PairExample]
    query: list[PairExample]


@dataclass
class LanguageBatch:
    language: str
    pairs: list[PairExample]


class Vocabulary:
    """Token/id mapping with fixed special ids at the front."""

    def __init__(self, tokens: Sequence[str]):
        for t in tokens:
            if t in SPECIAL_TOKENS:
                raise ValueError(f"vocabulary token collides with special {t!r}")
        self.id_to_token: list[str] = SPECIAL_TOKENS + list(tokens)
        self.token_to_id: dict[str, int] = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValueError("vocabulary contains duplicate tokens")

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def ids(self, tokens: Sequence[str]) -> tuple[int, ...]:
        return tuple(self.token_to_id.get(t, UNK) for t in tokens)

    def encode_nl(self, text: str) -> tuple[int, ...]:
        return self.ids(tokenize_nl(text))

    def encode_pl(self, text: str) -> tuple[int, ...]:
        return self.ids(tokenize_pl(text))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"tokens": self.id_to_token[N_SPECIALS:]}, fh)

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            return cls(json.load(fh)["tokens"])


def build_vocab(pairs: Sequence[RawPair], max_size: int = 8192, min_freq: int = 1) -> Vocabulary:
    """Frequency-ranked vocabulary; ties broken lexicographically.

    max_size counts the reserved specials; tokens below min_freq are dropped.
    """
    if not pairs:
        raise ValueError("build_vocab: no pairs")
    if max_size < N_SPECIALS:
        raise ValueError(f"build_vocab: max_size {max_size} < {N_SPECIALS} reserved specials")
    counts: Counter[str] = Counter()
    for p in pairs:
        counts.update(tokenize_nl(p.nl))
        counts.update(tokenize_pl(p.code))
    ranked = sorted(
        (t for t, c in counts.items() if c >= min_freq),
        key=lambda t: (-counts[t], t),
    )
    return Vocabulary(ranked[: max_size - N_SPECIALS])


def encode_pairs(pairs: Sequence[RawPair], vocab: Vocabulary) -> list[PairExample]:
    return [
        PairExample(vocab.encode_nl(p.nl), vocab.encode_pl(p.code), p.label, p.language)
        for p in pairs
    ]


def load_pairs(path, fmt: str = "jsonl") -> list[RawPair]:
    """Read raw pairs from disk.

    jsonl: one object per line with fields nl, code, lang (extras ignored).
    sql-json: a JSON array whose objects carry at least question and query;
    question becomes the NL, query the PL. Every loaded pair gets label 1.
    """
    if fmt == "jsonl":
        out = []
        with open(path, encoding="utf-8") as fh:
            for i, line in enumerate(fh):
                if not line.strip():
                    continue
                rec = json.loads(line)
                for fld in ("nl", "code", "lang"):
                    if fld not in rec:
                        raise ValueError(f"{path}: record {i} missing field {fld!r}")
                out.append(RawPair(rec["nl"], rec["code"], rec["lang"], 1))
        if not out:
            raise ValueError(f"{path}: no records")
        return out
    if fmt == "sql-json":
        with open(path, encoding="utf-8") as fh:
            records = json.load(fh)
        if not records:
            raise ValueError(f"{path}: no records")
        out = []
        for i, rec in enumerate(records):
            for fld in ("question", "query"):
                if fld not in rec:
                    raise ValueError(f"{path}: record {i} missing field {fld!r}")
            out.append(RawPair(rec["question"], rec["query"], "sql", 1))
        return out
    raise ValueError(f"load_pairs: unknown format {fmt!r}")


def deduplicate(pairs: Sequence[PairExample]) -> list[PairExample]:
    """Drop exact duplicates on (nl_tokens, pl_tokens), keeping first occurrences."""
    seen = set()
    out = []
    for p in pairs:
        k = p.key()
        if k in seen:
            continue
        seen.add(k)
        out.append(p)
    return out


def generate_negatives(pairs: Sequence[PairExample], seed: int) -> list[PairExample]:
    """Balance a positive-only corpus with randomly mismatched pairs.

    Each negative replaces either the NL or the PL side (coin flip) with the
    corresponding side of a uniformly drawn different pair. Collisions with
    any positive are resampled up to 100 times, then refused.
    """
    pairs = list(pairs)
    for i, p in enumerate(pairs):
        if p.label != 1:
            raise ValueError(f"generate_negatives: pair {i} is not a positive")
    if len({p.key() for p in pairs}) < 2:
        raise ValueError("generate_negatives: need at least 2 distinct pairs")
    positives = {p.key() for p in pairs}
    rng = np.random.default_rng(seed)
    out = list(pairs)
    n = len(pairs)
    for i, p in enumerate(pairs):
        for _ in range(100):
            replace_nl = rng.random() < 0.5
            j = int(rng.integers(n - 1))
            if j >= i:
                j += 1
            other = pairs[j]
            cand = (
                (other.nl_tokens, p.pl_tokens) if replace_nl else (p.nl_tokens, other.pl_tokens)
            )
            if cand not in positives:
                out.append(PairExample(cand[0], cand[1], 0, p.language))
                break
        else:
            raise RuntimeError(
                f"generate_negatives: no non-colliding distractor for pair {i} in 100 draws"
            )
    return out


def build_batch_pool(
    corpora: Mapping[str, Sequence[PairExample]], batch_size: int, seed: int
) -> list[LanguageBatch]:
    """Segment each language into fixed-size single-language batches.

    Each language is shuffled with the run seed, cut into consecutive
    batches of batch_size, and the last partial batch is dropped.
    """
    if batch_size < 2:
        raise ValueError("build_batch_pool: batch_size must be >= 2")
    pool: list[LanguageBatch] = []
    seeds = np.random.SeedSequence(seed).spawn(len(corpora))
    for child, lang in zip(seeds, sorted(corpora)):
        pairs = list(corpora[lang])
        if len(pairs) < batch_size:
            raise ValueError(
                f"build_batch_pool: language {lang!r} has {len(pairs)} pairs; "
                f"need at least {batch_size}"
            )
        order = np.random.default_rng(child).permutation(len(pairs))
        shuffled = [pairs[i] for i in order]
        for start in range(0, len(shuffled) - batch_size + 1, batch_size):
            pool.append(LanguageBatch(lang, shuffled[start : start + batch_size]))
    return pool


def split_task(batch, seed) -> MetaTask:
    """Randomly halve a batch into support and query; support takes the odd extra."""
    pairs = batch.pairs if isinstance(batch, LanguageBatch) else list(batch)
    if len(pairs) < 2:
        raise ValueError(f"split_task: batch of {len(pairs)} cannot be halved")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    order = rng.permutation(len(pairs))
    cut = (len(pairs) + 1) // 2
    support = [pairs[i] for i in order[:cut]]
    query = [pairs[i] for i in order[cut:]]
    return MetaTask(support, query)


def split_pairs(
    pairs: Sequence[PairExample], fractions: tuple[float, float, float], seed: int
) -> CorpusSplit:
    """Shuffle and cut into train/valid/test by the given fractions."""
    if abs(sum(fractions) - 1.0) > 1e-9 or any(f < 0 for f in fractions):
        raise ValueError(f"split_pairs: fractions must be >= 0 and sum to 1, got {fractions}")
    order = np.random.default_rng(seed).permutation(len(pairs))
    shuffled = [pairs[i] for i in order]
    n = len(shuffled)
    n_train = int(round(fractions[0] * n))
    n_valid = int(round(fractions[1] * n))
    return CorpusSplit(
        train=shuffled[:n_train],
        valid=shuffled[n_train : n_train + n_valid],
        test=shuffled[n_train + n_valid :],
    )


# ---------------------------------------------------------------------------
# synthetic paired-language corpus


@dataclass
class DialectSpec:
    role: str  # "source" | "target"
    pl_template: str  # uses {op} and {noun}
    op_prefix: str  # surface prefix for operation keywords


@dataclass
class SyntheticSpec:
    """Template grammar for the synthetic multi-language benchmark.

    Languages share the semantic space (operation x noun) and the English
    descriptions; each dialect renders the code with its own keywords and
    boilerplate, so distractors are wrong in a learnable way.
    """

    nl_templates: dict[str, str] = field(default_factory=dict)  # op -> phrase with {noun}
    nouns: list[str] = field(default_factory=list)
    dialects: dict[str, DialectSpec] = field(default_factory=dict)

    def __post_init__(self):
        if self.dialects:
            self.validate()

    @property
    def capacity(self) -> int:
        return len(self.nl_templates) * len(self.nouns)

    def validate(self) -> None:
        roles = [d.role for d in self.dialects.values()]
        if roles.count("source") < 2 or roles.count("target") != 1:
            raise ValueError(
                "synthetic spec needs at least 2 source dialects and exactly 1 target"
            )
        if not self.nl_templates or not self.nouns:
            raise ValueError("synthetic spec needs operations and nouns")
        for op, tpl in self.nl_templates.items():
            if "{noun}" not in tpl:
                raise ValueError(f"NL template for {op!r} must mention {{noun}}")

    def source_languages(self) -> list[str]:
        return sorted(n for n, d in self.dialects.items() if d.role == "source")

    def target_language(self) -> str:
        return next(n for n in sorted(self.dialects) if self.dialects[n].role == "target")

    @classmethod
    def default(cls) -> "SyntheticSpec":
        return cls(nl_templates=dict(_DEFAULT_OPS), nouns=list(_DEFAULT_NOUNS), dialects={
            "alpha": DialectSpec("source", "fn run ( ) {{ ret {op} ( {noun} ) ; }}", "al"),
            "beta": DialectSpec("source", "proc main = {op} [ {noun} ] end", "be"),
            "delta": DialectSpec("target", "select {op} from {noun} ;", "de"),
        })

    def to_flat(self) -> dict[str, str]:
        flat = {"synth.nouns": ", ".join(self.nouns)}
        for op, tpl in sorted(self.nl_templates.items()):
            flat[f"synth.op.{op}"] = tpl
        for name, d in sorted(self.dialects.items()):
            flat[f"synth.lang.{name}.role"] = d.role
            flat[f"synth.lang.{name}.template"] = d.pl_template
            flat[f"synth.lang.{name}.prefix"] = d.op_prefix
        return flat

    @classmethod
    def from_flat(cls, flat: Mapping[str, str]) -> "SyntheticSpec":
        nouns = [n.strip() for n in flat["synth.nouns"].split(",") if n.strip()]
        ops = {}
        langs: dict[str, dict[str, str]] = {}
        for key, value in flat.items():
            if key.startswith("synth.op."):
                ops[key[len("synth.op."):]] = value
            elif key.startswith("synth.lang."):
                _, _, name, fld = key.split(".", 3)
                langs.setdefault(name, {})[fld] = value
        dialects = {
            name: DialectSpec(d["role"], d["template"], d["prefix"]) for name, d in langs.items()
        }
        return cls(nl_templates=ops, nouns=nouns, dialects=dialects)


_DEFAULT_OPS = {
    "max": "find the largest value among the {noun}",
    "min": "find the smallest value among the {noun}",
    "sum": "add up all of the {noun}",
    "mean": "compute the average of the {noun}",
    "count": "count how many {noun} there are",
    "sort": "sort the {noun} in ascending order",
    "reverse": "reverse the order of the {noun}",
    "first": "take the first of the {noun}",
    "last": "take the last of the {noun}",
    "unique": "remove duplicates from the {noun}",
    "clear": "reset all the {noun} to zero",
    "double": "multiply each of the {noun} by two",
    "halve": "divide each of the {noun} by two",
    "square": "square each of the {noun}",
    "negate": "flip the sign of each of the {noun}",
    "round": "round the {noun} to whole numbers",
    "trim": "strip leading and trailing blanks from the {noun}",
    "merge": "combine the {noun} into one list",
    "split": "break the {noun} into chunks",
    "copy": "make a copy of the {noun}",
    "drop": "delete all of the {noun}",
    "lock": "prevent changes to the {noun}",
    "scan": "iterate over each of the {noun}",
    "save": "write the {noun} to disk",
    "load": "read the {noun} from disk",
}

_DEFAULT_NOUNS = [
    "prices", "scores", "balances", "users", "files", "orders", "items", "tokens",
    "nodes", "edges", "rows", "columns", "records", "emails", "tasks", "events",
    "logs", "keys", "values", "labels", "images", "frames", "samples", "weights",
    "grades", "points", "cities", "names", "dates", "totals", "limits", "ranks",
    "tags", "paths", "queues", "stacks", "buffers", "pages", "links", "counts",
]


def generate_synthetic_corpus(
    spec: SyntheticSpec, n_pairs: int, seed: int
) -> dict[str, list[RawPair]]:
    """Deterministic per-language positive pairs from the template grammar.

    Every NL maps to exactly one PL within its language; any other snippet
    differs in operation or noun, so distractors are semantically wrong.
    """
    spec.validate()
    if n_pairs < 1:
        raise ValueError("generate_synthetic_corpus: n_pairs must be >= 1")
    if n_pairs > spec.capacity:
        raise ValueError(
            f"generate_synthetic_corpus: {n_pairs} pairs exceed template capacity "
            f"{spec.capacity}"
        )
    combos = [(op, noun) for op in sorted(spec.nl_templates) for noun in spec.nouns]
    corpora: dict[str, list[RawPair]] = {}
    children = np.random.SeedSequence(seed).spawn(len(spec.dialects))
    for child, name in zip(children, sorted(spec.dialects)):
        dialect = spec.dialects[name]
        rng = np.random.default_rng(child)
        picked = rng.choice(len(combos), size=n_pairs, replace=False)
        rows = []
        for idx in picked:
            op, noun = combos[int(idx)]
            nl = spec.nl_templates[op].format(noun=noun)
            code = dialect.pl_template.format(op=f"{dialect.op_prefix}_{op}", noun=noun)
            rows.append(RawPair(nl, code, name, 1))
        corpora[name] = rows
    return corpora


def write_pairs_jsonl(path, pairs: Sequence[RawPair]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in pairs:
            fh.write(json.dumps({"nl": p.nl, "code": p.code, "lang": p.language}) + "\n")
