"""Input-validation helpers shared by the estimators and the CLI."""

from __future__ import annotations

from collections.abc import Sequence

from .corpus import PairExample
from .model import Checkpoint


class PhaseError(ValueError):
    """A checkpoint arrived from the wrong pipeline phase."""


def check_in(value, name: str, options) -> None:
    if value not in options:
        raise ValueError(f"{name} must be one of {tuple(options)}, got {value!r}")


def check_positive(value, name: str, strict: bool = True) -> None:
    if value is None or (value <= 0 if strict else value < 0):
        bound = ">" if strict else ">="
        raise ValueError(f"{name} must be {bound} 0, got {value!r}")


def check_fraction(value, name: str) -> None:
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"{name} must be in [0, 1], got {value!r}")


def check_pairs(pairs: Sequence[PairExample], name: str, labels=None) -> None:
    if not pairs:
        raise ValueError(f"{name}: no pairs")
    if labels is not None:
        for i, p in enumerate(pairs):
            if p.label not in labels:
                raise ValueError(f"{name}: pair {i} has label {p.label}, expected {set(labels)}")


def check_phase(ckpt: Checkpoint, allowed: Sequence[str], force: bool = False) -> None:
    if force or ckpt.phase in allowed:
        return
    raise PhaseError(
        f"checkpoint phase {ckpt.phase!r} not accepted here (expected one of "
        f"{tuple(allowed)}); pass force to override"
    )


def positive_fraction(pairs: Sequence[PairExample]) -> float:
    return sum(p.label for p in pairs) / len(pairs)
