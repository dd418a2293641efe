"""Discrete unit sequences, run-length grouping and the shared text format.

An utterance is a sequence of unit ids, one per 20 ms frame.  Runs of equal
grouping keys are the atomic spans the corrector masks and fills.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .exceptions import ContractError

MASK_SYMBOL = "M"


@dataclass(frozen=True)
class UnitVocab:
    size: int = 500

    def __post_init__(self):
        if int(self.size) < 2:
            raise ContractError("seqcore", f"vocabulary size must be >= 2, got {self.size}")

    @property
    def mask_id(self) -> int:
        return self.size


@dataclass(frozen=True)
class ClusterSequence:
    utt_id: str
    tokens: tuple[int, ...]

    def __init__(self, utt_id: str, tokens: Iterable[int], vocab: UnitVocab | None = None,
                 allow_empty: bool = False):
        toks = tuple(int(t) for t in tokens)
        if not toks and not allow_empty:
            raise ContractError("seqcore", f"utterance {utt_id!r} is empty")
        if vocab is not None:
            bad = [t for t in toks if t < 0 or t >= vocab.size]
            if bad:
                raise ContractError(
                    "seqcore", f"utterance {utt_id!r} has ids outside [0, {vocab.size}): {bad[:5]}"
                )
        object.__setattr__(self, "utt_id", str(utt_id))
        object.__setattr__(self, "tokens", toks)

    def __len__(self):
        return len(self.tokens)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.tokens, dtype=np.int64)


@dataclass(frozen=True)
class Group:
    key: int
    start: int
    length: int
    score: float | None = None

    @property
    def stop(self) -> int:
        return self.start + self.length


@dataclass(frozen=True)
class GroupedSequence:
    groups: tuple[Group, ...] = field(default_factory=tuple)

    def __len__(self):
        return len(self.groups)

    def __iter__(self) -> Iterator[Group]:
        return iter(self.groups)

    def __getitem__(self, i) -> Group:
        return self.groups[i]

    @property
    def n_frames(self) -> int:
        return self.groups[-1].stop if self.groups else 0

    def with_scores(self, frame_scores: Sequence[float]) -> "GroupedSequence":
        """Score each group by the maximum of its member-frame scores."""
        frame_scores = np.asarray(frame_scores, dtype=np.float64)
        if len(frame_scores) != self.n_frames:
            raise ContractError(
                "seqcore", f"{len(frame_scores)} frame scores for {self.n_frames} frames"
            )
        return GroupedSequence(tuple(
            Group(g.key, g.start, g.length, float(frame_scores[g.start:g.stop].max()))
            for g in self.groups
        ))


def _as_tokens(seq) -> np.ndarray:
    if isinstance(seq, ClusterSequence):
        return seq.as_array()
    return np.asarray(seq, dtype=np.int64).reshape(-1)


def run_boundaries(keys: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(starts, lengths)`` of maximal runs of equal values."""
    keys = np.asarray(keys)
    if keys.size == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    change = np.flatnonzero(keys[1:] != keys[:-1]) + 1
    starts = np.concatenate(([0], change)).astype(np.int64)
    lengths = np.diff(np.concatenate((starts, [keys.size]))).astype(np.int64)
    return starts, lengths


def group_runs(seq, keys: Sequence[int] | None = None) -> GroupedSequence:
    """Group maximal runs of identical keys.

    The grouping key of frame ``i`` is ``keys[i]`` when given (e.g. the phone
    of each cluster) and the token itself otherwise.
    """
    tokens = _as_tokens(seq)
    if keys is None:
        key_arr = tokens
    else:
        key_arr = np.asarray(keys, dtype=np.int64).reshape(-1)
        if key_arr.size != tokens.size:
            raise ContractError(
                "seqcore", f"{key_arr.size} grouping keys for {tokens.size} tokens"
            )
    starts, lengths = run_boundaries(key_arr)
    return GroupedSequence(tuple(
        Group(int(key_arr[s]), int(s), int(n)) for s, n in zip(starts, lengths)
    ))


def ungroup(grouped: GroupedSequence) -> list[int]:
    out: list[int] = []
    for g in grouped:
        out.extend([g.key] * g.length)
    return out


# -- text format ---------------------------------------------------------------

def format_line(utt_id: str, tokens: Iterable[int], mask_id: int | None = None) -> str:
    parts = [utt_id]
    for t in tokens:
        t = int(t)
        parts.append(MASK_SYMBOL if mask_id is not None and t == mask_id else str(t))
    return " ".join(parts) + "\n"


def parse_line(line: str, mask_id: int | None = None) -> tuple[str, list[int]]:
    fields = line.split()
    if not fields:
        raise ContractError("seqcore", "blank line in sequence file")
    toks = []
    for f in fields[1:]:
        if f == MASK_SYMBOL:
            if mask_id is None:
                raise ContractError("seqcore", f"mask symbol in utterance {fields[0]!r}")
            toks.append(mask_id)
        else:
            try:
                toks.append(int(f))
            except ValueError:
                raise ContractError(
                    "seqcore", f"non-integer token {f!r} in utterance {fields[0]!r}"
                ) from None
    return fields[0], toks


def read_sequences(path, vocab: UnitVocab | None = None) -> list[ClusterSequence]:
    out = []
    with open(path, encoding="ascii") as fh:
        for line in fh:
            if not line.strip():
                continue
            utt, toks = parse_line(line)
            out.append(ClusterSequence(utt, toks, vocab=vocab, allow_empty=True))
    return out


def write_sequences(path, sequences: Iterable[ClusterSequence]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        for s in sequences:
            fh.write(format_line(s.utt_id, s.tokens))


def read_symbol_lines(path) -> dict[str, list[str]]:
    """Read ``<utt_id> <sym> ...`` lines (frame phones, reference phones)."""
    out: dict[str, list[str]] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            fields = line.split()
            if fields:
                out[fields[0]] = fields[1:]
    return out


def write_symbol_lines(path, rows: Iterable[tuple[str, Sequence[str]]]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for utt, syms in rows:
            fh.write(" ".join([utt, *syms]) + "\n")
