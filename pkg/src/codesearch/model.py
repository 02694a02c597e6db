"""Small transformer encoder over description/code sequences, with MLM and
matching heads, plus versioned checkpoint files.

Two attention regimes share the weights and code path: bidirectional with a
leading aggregate token, and causal with the final end-of-sequence token as
the aggregate. The training loops run the batched entry points; the
single-sequence functions wrap them.
"""

from __future__ import annotations

import io
import json
import struct
from collections.abc import Iterator, Mapping, Sequence
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import BOS, CLS, EOS, N_SPECIALS, PAD, SEP, PairExample

CHECKPOINT_MAGIC = b"CSCKPT\x00"
CHECKPOINT_VERSION = 1
PHASES = ("pretrained", "meta", "finetuned")


class CheckpointFormatError(ValueError):
    pass


class CheckpointVersionError(ValueError):
    pass


@dataclass
class EncoderConfig:
    vocab_size: int
    d_model: int = 128
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    max_len: int = 128
    attention_mode: str = "bidirectional"
    aggregate: str | None = None  # derived from attention_mode when unset
    dropout: float = 0.1
    tie_mlm: bool = True

    def __post_init__(self):
        if self.attention_mode not in ("bidirectional", "causal"):
            raise ValueError(f"attention_mode must be bidirectional or causal, got {self.attention_mode!r}")
        if self.aggregate is None:
            self.aggregate = "first_token" if self.attention_mode == "bidirectional" else "last_token"
        expected = "first_token" if self.attention_mode == "bidirectional" else "last_token"
        if self.aggregate != expected:
            raise ValueError(
                f"aggregate {self.aggregate!r} does not pair with attention_mode "
                f"{self.attention_mode!r} (expected {expected!r})"
            )
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.max_len < 8:
            raise ValueError(f"max_len must be >= 8, got {self.max_len}")
        if self.vocab_size <= N_SPECIALS:
            raise ValueError(f"vocab_size must exceed the {N_SPECIALS} specials")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "EncoderConfig":
        return cls(**d)


class ParameterSet(Mapping):
    """Ordered named tensors; value-copyable, names unique by construction."""

    def __init__(self, tensors: Mapping[str, Tensor]):
        self._tensors: dict[str, Tensor] = dict(tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def copy(self) -> "ParameterSet":
        return ParameterSet(
            {n: Tensor(t.data, requires_grad=t.requires_grad) for n, t in self._tensors.items()}
        )

    def n_parameters(self) -> int:
        return sum(t.data.size for t in self._tensors.values())

    def bitwise_equal(self, other: "ParameterSet") -> bool:
        if list(self) != list(other):
            return False
        return all(
            self[n].data.shape == other[n].data.shape
            and self[n].data.tobytes() == other[n].data.tobytes()
            for n in self
        )

    def assert_finite(self) -> None:
        for n, t in self._tensors.items():
            if not np.isfinite(t.data).all():
                raise FloatingPointError(f"parameter {n!r} contains non-finite values")


@dataclass
class Checkpoint:
    version: int
    config: EncoderConfig
    params: ParameterSet
    phase: str
    metrics: dict | None = None

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ValueError(f"phase must be one of {PHASES}, got {self.phase!r}")


def init_params(config: EncoderConfig, seed: int) -> ParameterSet:
    """Fresh trainable parameters: N(0, 0.02) weights, zero biases, unit norms."""
    rng = np.random.default_rng(seed)
    d, ff, v = config.d_model, config.d_ff, config.vocab_size

    def w(*shape):
        return Tensor(rng.normal(0.0, 0.02, size=shape), requires_grad=True)

    def zeros(*shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    def ones(*shape):
        return Tensor(np.ones(shape), requires_grad=True)

    tensors: dict[str, Tensor] = {
        "tok_emb": w(v, d),
        "pos_emb": w(config.max_len, d),
        "emb_ln_g": ones(d),
        "emb_ln_b": zeros(d),
    }
    for i in range(config.n_layers):
        p = f"l{i}."
        tensors[p + "wq"] = w(d, d)
        tensors[p + "bq"] = zeros(d)
        tensors[p + "wk"] = w(d, d)
        tensors[p + "bk"] = zeros(d)
        tensors[p + "wv"] = w(d, d)
        tensors[p + "bv"] = zeros(d)
        tensors[p + "wo"] = w(d, d)
        tensors[p + "bo"] = zeros(d)
        tensors[p + "ln1_g"] = ones(d)
        tensors[p + "ln1_b"] = zeros(d)
        tensors[p + "w1"] = w(d, ff)
        tensors[p + "b1"] = zeros(ff)
        tensors[p + "w2"] = w(ff, d)
        tensors[p + "b2"] = zeros(d)
        tensors[p + "ln2_g"] = ones(d)
        tensors[p + "ln2_b"] = zeros(d)
    if not config.tie_mlm:
        tensors["mlm_w"] = w(d, v)
    tensors["mlm_b"] = zeros(v)
    tensors["cls_w"] = w(d, 2)
    tensors["cls_b"] = zeros(2)
    return ParameterSet(tensors)


# ---------------------------------------------------------------------------
# sequence encoding


def _fit_lengths(n_nl: int, n_pl: int, budget: int) -> tuple[int, int]:
    # truncate PL from the tail first (floor one token), then NL from the tail
    if n_nl + n_pl <= budget:
        return n_nl, n_pl
    n_pl = max(budget - n_nl, 1)
    n_nl = min(n_nl, budget - n_pl)
    return n_nl, n_pl


def encode_pair_sequence(
    nl_tokens: Sequence[int], pl_tokens: Sequence[int], config: EncoderConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Lay out one description/code pair as a padded id sequence plus mask.

    Bidirectional mode: [CLS] nl [SEP] pl [EOS]. Causal mode: [BOS] nl pl
    [EOS]. Both pad with [PAD] to max_len.
    """
    if not len(nl_tokens) or not len(pl_tokens):
        raise ValueError("encode_pair_sequence: token lists must be non-empty")
    if config.attention_mode == "bidirectional":
        n_nl, n_pl = _fit_lengths(len(nl_tokens), len(pl_tokens), config.max_len - 3)
        body = [CLS, *nl_tokens[:n_nl], SEP, *pl_tokens[:n_pl], EOS]
    else:
        n_nl, n_pl = _fit_lengths(len(nl_tokens), len(pl_tokens), config.max_len - 2)
        body = [BOS, *nl_tokens[:n_nl], *pl_tokens[:n_pl], EOS]
    if len(body) < 4:
        raise ValueError(f"encode_pair_sequence: sequence of {len(body)} tokens is too short")
    ids = np.full(config.max_len, PAD, dtype=np.int64)
    ids[: len(body)] = body
    mask = np.zeros(config.max_len, dtype=np.int64)
    mask[: len(body)] = 1
    return ids, mask


def encode_single_sequence(
    tokens: Sequence[int], config: EncoderConfig
) -> tuple[np.ndarray, np.ndarray]:
    """One-segment layout used by the embedding (triplet) route."""
    if not len(tokens):
        raise ValueError("encode_single_sequence: token list must be non-empty")
    budget = config.max_len - 2
    head = CLS if config.attention_mode == "bidirectional" else BOS
    body = [head, *tokens[:budget], EOS]
    ids = np.full(config.max_len, PAD, dtype=np.int64)
    ids[: len(body)] = body
    mask = np.zeros(config.max_len, dtype=np.int64)
    mask[: len(body)] = 1
    return ids, mask


def encode_pair_batch(
    pairs: Sequence[PairExample], config: EncoderConfig
) -> tuple[np.ndarray, np.ndarray]:
    rows = [encode_pair_sequence(p.nl_tokens, p.pl_tokens, config) for p in pairs]
    return np.stack([r[0] for r in rows]), np.stack([r[1] for r in rows])


# ---------------------------------------------------------------------------
# forward pass


def _attention_bias(pad_mask: np.ndarray, causal: bool) -> np.ndarray:
    b, s = pad_mask.shape
    allowed = np.broadcast_to(pad_mask[:, None, :].astype(bool), (b, s, s))
    if causal:
        allowed = allowed & np.tril(np.ones((s, s), dtype=bool))
    return np.where(allowed, 0.0, ad.MASK_NEG)


def forward_batch(
    params: Mapping[str, Tensor],
    ids: np.ndarray,
    pad_mask: np.ndarray,
    config: EncoderConfig,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Hidden states [batch, seq_len, d_model] for a padded id batch."""
    ids = np.asarray(ids, dtype=np.int64)
    pad_mask = np.asarray(pad_mask)
    if ids.ndim != 2 or ids.shape != pad_mask.shape:
        raise ad.ShapeMismatch(f"forward: ids {ids.shape} vs mask {pad_mask.shape}")
    if ids.shape[1] > config.max_len:
        raise ValueError(f"forward: sequence length {ids.shape[1]} > max_len {config.max_len}")
    if ids.max() >= config.vocab_size:
        raise IndexError(f"forward: token id {int(ids.max())} >= vocab_size {config.vocab_size}")
    drop = config.dropout if train_mode else 0.0
    if drop > 0.0 and rng is None:
        raise ValueError("forward: training mode with dropout needs an rng")
    b, s = ids.shape
    d = config.d_model
    dh = d // config.n_heads
    bias = _attention_bias(pad_mask, config.attention_mode == "causal")

    x = ad.add(
        ad.embedding(params["tok_emb"], ids),
        ad.embedding(params["pos_emb"], np.broadcast_to(np.arange(s), (b, s))),
    )
    x = ad.layer_norm(x, params["emb_ln_g"], params["emb_ln_b"])
    if drop:
        x = ad.dropout(x, drop, rng)
    x2 = ad.reshape(x, (b * s, d))

    for i in range(config.n_layers):
        p = f"l{i}."
        q = ad.reshape(ad.add(ad.matmul(x2, params[p + "wq"]), params[p + "bq"]), (b, s, d))
        k = ad.reshape(ad.add(ad.matmul(x2, params[p + "wk"]), params[p + "bk"]), (b, s, d))
        v = ad.reshape(ad.add(ad.matmul(x2, params[p + "wv"]), params[p + "bv"]), (b, s, d))
        heads = []
        for h in range(config.n_heads):
            qh = ad.narrow(q, -1, h * dh, dh)
            kh = ad.narrow(k, -1, h * dh, dh)
            vh = ad.narrow(v, -1, h * dh, dh)
            scores = ad.mul(ad.matmul(qh, ad.transpose(kh)), 1.0 / np.sqrt(dh))
            att = ad.softmax(scores, additive_mask=bias)
            if drop:
                att = ad.dropout(att, drop, rng)
            heads.append(ad.matmul(att, vh))
        ctx = ad.reshape(ad.concat(heads, axis=-1), (b * s, d))
        attn_out = ad.add(ad.matmul(ctx, params[p + "wo"]), params[p + "bo"])
        if drop:
            attn_out = ad.dropout(attn_out, drop, rng)
        x2 = ad.layer_norm(ad.add(x2, attn_out), params[p + "ln1_g"], params[p + "ln1_b"])
        ff = ad.gelu(ad.add(ad.matmul(x2, params[p + "w1"]), params[p + "b1"]))
        ff = ad.add(ad.matmul(ff, params[p + "w2"]), params[p + "b2"])
        if drop:
            ff = ad.dropout(ff, drop, rng)
        x2 = ad.layer_norm(ad.add(x2, ff), params[p + "ln2_g"], params[p + "ln2_b"])

    return ad.reshape(x2, (b, s, d))


def forward(
    params: Mapping[str, Tensor],
    sequence: np.ndarray,
    mask: np.ndarray,
    config: EncoderConfig,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Hidden states [seq_len, d_model] for one sequence."""
    hidden = forward_batch(
        params, np.asarray(sequence)[None, :], np.asarray(mask)[None, :], config,
        train_mode=train_mode, rng=rng,
    )
    return ad.reshape(hidden, hidden.shape[1:])


def mlm_logits(params: Mapping[str, Tensor], hidden: Tensor, config: EncoderConfig) -> Tensor:
    """Vocabulary logits at every position; projection is tied to the token
    embedding unless the config unties it."""
    d = config.d_model
    lead = hidden.shape[:-1]
    flat = hidden if hidden.data.ndim == 2 else ad.reshape(hidden, (-1, d))
    proj = ad.transpose(params["tok_emb"]) if config.tie_mlm else params["mlm_w"]
    logits = ad.add(ad.matmul(flat, proj), params["mlm_b"])
    if hidden.data.ndim == 2:
        return logits
    return ad.reshape(logits, (*lead, config.vocab_size))


def _aggregate_positions(pad_mask: np.ndarray, config: EncoderConfig) -> np.ndarray:
    if config.aggregate == "first_token":
        return np.zeros(pad_mask.shape[0], dtype=np.int64)
    return pad_mask.astype(np.int64).sum(axis=1) - 1  # last non-pad: [EOS]


def match_logits_batch(
    params: Mapping[str, Tensor],
    hidden: Tensor,
    pad_mask: np.ndarray,
    config: EncoderConfig,
) -> Tensor:
    """Two matching logits per sequence, read at the aggregate position."""
    b, s, d = hidden.shape
    pos = _aggregate_positions(np.asarray(pad_mask), config)
    rows = ad.take_rows(ad.reshape(hidden, (b * s, d)), np.arange(b) * s + pos)
    return ad.add(ad.matmul(rows, params["cls_w"]), params["cls_b"])


def match_logits(
    params: Mapping[str, Tensor],
    hidden: Tensor,
    config: EncoderConfig,
    pad_mask: np.ndarray | None = None,
) -> Tensor:
    """Matching logits for one sequence's hidden states [seq_len, d_model]."""
    s, d = hidden.shape
    if pad_mask is None:
        pos = 0 if config.aggregate == "first_token" else s - 1
    else:
        pos = int(_aggregate_positions(np.asarray(pad_mask)[None, :], config)[0])
    row = ad.take_rows(hidden, np.array([pos]))
    return ad.reshape(ad.add(ad.matmul(row, params["cls_w"]), params["cls_b"]), (2,))


def match_scores(logits: Tensor) -> np.ndarray:
    """Probability of the relevant class from a [n, 2] logit tensor."""
    return ad.softmax(logits).data[..., 1]


# ---------------------------------------------------------------------------
# checkpoint container
#
# Layout: magic, u32 version, u32 header length, header JSON (config, phase,
# metrics, tensor manifest), then per tensor a u64 byte length followed by
# raw little-endian float64 in C order. Round trips are bit-exact.


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    header = {
        "config": ckpt.config.to_dict(),
        "phase": ckpt.phase,
        "metrics": ckpt.metrics,
        "tensors": [{"name": n, "shape": list(t.shape)} for n, t in ckpt.params.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", ckpt.version, len(blob)))
        fh.write(blob)
        for _, t in ckpt.params.items():
            raw = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
            fh.write(struct.pack("<Q", len(raw)))
            fh.write(raw)


def _read_exact(fh: io.BufferedReader, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointFormatError(f"truncated checkpoint file while reading {what}")
    return buf


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, len(CHECKPOINT_MAGIC), "magic")
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointFormatError(f"{path}: not a checkpoint file")
        version, hlen = struct.unpack("<II", _read_exact(fh, 8, "header sizes"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointVersionError(
                f"{path}: checkpoint version {version}, this build reads version "
                f"{CHECKPOINT_VERSION}"
            )
        header = json.loads(_read_exact(fh, hlen, "header"))
        tensors: dict[str, Tensor] = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            (nbytes,) = struct.unpack("<Q", _read_exact(fh, 8, f"size of {entry['name']}"))
            expected = int(np.prod(shape, dtype=np.int64)) * 8 if shape else 8
            if nbytes != expected:
                raise CheckpointFormatError(
                    f"{path}: tensor {entry['name']!r} has {nbytes} bytes, expected {expected}"
                )
            raw = _read_exact(fh, nbytes, entry["name"])
            data = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
            tensors[entry["name"]] = Tensor(data, requires_grad=True)
    return Checkpoint(
        version=version,
        config=EncoderConfig.from_dict(header["config"]),
        params=ParameterSet(tensors),
        phase=header["phase"],
        metrics=header["metrics"],
    )
