"""Cluster-to-phone mapping and phone error rate."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .exceptions import ContractError, NotFittedError
from .seqcore import ClusterSequence

UNKNOWN_PHONE = "<unk>"


@dataclass
class PhoneMap:
    phones: tuple[str, ...]
    vowels: tuple[str, ...]
    mapping: np.ndarray   # cluster id -> phone index; len(phones) marks unknown
    counts: np.ndarray    # V x P frame co-occurrence counts

    def __post_init__(self):
        self.phones = tuple(self.phones)
        self.vowels = tuple(self.vowels)
        self.mapping = np.asarray(self.mapping, dtype=np.int64)
        self.counts = np.asarray(self.counts, dtype=np.int64)

    @property
    def V(self) -> int:
        return self.mapping.size

    @property
    def unknown_index(self) -> int:
        return len(self.phones)

    @property
    def symbols(self) -> tuple[str, ...]:
        return self.phones + (UNKNOWN_PHONE,)

    def vowel_mask(self) -> np.ndarray:
        """Per phone index (including unknown), whether it is a vowel."""
        vow = set(self.vowels)
        return np.array([p in vow for p in self.phones] + [False])

    def phone_ids(self, tokens) -> np.ndarray:
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.V):
            raise ContractError("phonemap", f"cluster id outside the mapped range [0, {self.V})")
        return self.mapping[tokens]

    def is_vowel_cluster(self, clusters) -> np.ndarray:
        return self.vowel_mask()[self.phone_ids(clusters)]

    def to_dict(self) -> dict:
        return {
            "phones": list(self.phones),
            "vowels": list(self.vowels),
            "unknown": UNKNOWN_PHONE,
            "mapping": self.mapping.tolist(),
            "counts": self.counts.tolist(),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "PhoneMap":
        return cls(d["phones"], d["vowels"], d["mapping"], d["counts"])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), separators=(",", ":")) + "\n")

    @classmethod
    def load(cls, path) -> "PhoneMap":
        return cls.from_dict(json.loads(Path(path).read_text()))


def learn_phone_map(cluster_lines: Iterable, frame_phone_lines: Mapping[str, Sequence[str]],
                    phones: Sequence[str], vowels: Sequence[str], V: int) -> PhoneMap:
    """Most frequent co-occurring phone per cluster, from frame alignments.

    ``cluster_lines`` holds :class:`ClusterSequence` items (or ``(utt_id,
    tokens)`` pairs); ``frame_phone_lines`` maps utterance ids to per-frame
    phone symbols.  Ties go to the lowest phone index; clusters never seen
    map to the unknown phone.
    """
    index = {p: i for i, p in enumerate(phones)}
    counts = np.zeros((V, len(phones)), dtype=np.int64)
    for item in cluster_lines:
        utt, tokens = (item.utt_id, item.tokens) if isinstance(item, ClusterSequence) else item
        if utt not in frame_phone_lines:
            raise ContractError("phonemap", f"no frame phones for utterance {utt!r}")
        syms = frame_phone_lines[utt]
        if len(syms) != len(tokens):
            raise ContractError(
                "phonemap", f"utterance {utt!r}: {len(tokens)} clusters vs {len(syms)} frame phones"
            )
        try:
            ph = np.fromiter((index[s] for s in syms), dtype=np.int64, count=len(syms))
        except KeyError as e:
            raise ContractError("phonemap", f"utterance {utt!r}: unknown phone {e.args[0]!r}") from None
        tok = np.asarray(tokens, dtype=np.int64)
        if tok.size and (tok.min() < 0 or tok.max() >= V):
            raise ContractError("phonemap", f"utterance {utt!r}: cluster id outside [0, {V})")
        np.add.at(counts, (tok, ph), 1)
    mapping = counts.argmax(axis=1)
    mapping[counts.sum(axis=1) == 0] = len(phones)
    return PhoneMap(tuple(phones), tuple(vowels), mapping, counts)


def collapse_runs(symbols: Sequence) -> list:
    out = []
    for s in symbols:
        if not out or out[-1] != s:
            out.append(s)
    return out


def frames_to_phones(seq, phone_map: PhoneMap, collapse: bool = False) -> list[str]:
    tokens = seq.tokens if isinstance(seq, ClusterSequence) else seq
    ids = phone_map.phone_ids(tokens)   # raises for ids the map does not cover
    symbols = phone_map.symbols
    syms = [symbols[i] for i in ids.tolist()]
    return collapse_runs(syms) if collapse else syms


@dataclass(frozen=True)
class ErrorCounts:
    subs: int
    dels: int
    ins: int
    ref_len: int

    @property
    def errors(self) -> int:
        return self.subs + self.dels + self.ins

    @property
    def per(self) -> float:
        return 100.0 * self.errors / self.ref_len

    def __add__(self, other: "ErrorCounts") -> "ErrorCounts":
        return ErrorCounts(self.subs + other.subs, self.dels + other.dels,
                           self.ins + other.ins, self.ref_len + other.ref_len)


def align_counts(hyp: Sequence, ref: Sequence) -> ErrorCounts:
    """Unit-cost Levenshtein alignment counts.

    Among minimum-cost alignments the one with the fewest insertions plus
    deletions is taken, which makes the counts symmetric under swapping
    ``hyp`` and ``ref`` (deletions and insertions trade places).
    """
    n, m = len(ref), len(hyp)
    # cell = (cost, indels, subs, dels, ins); rows over ref, columns over hyp
    prev = [(j, j, 0, 0, j) for j in range(m + 1)]
    for i in range(1, n + 1):
        cur = [(i, i, 0, i, 0)]
        r = ref[i - 1]
        for j in range(1, m + 1):
            diag = prev[j - 1]
            if hyp[j - 1] == r:
                best = diag
            else:
                best = (diag[0] + 1, diag[1], diag[2] + 1, diag[3], diag[4])
            up = prev[j]
            cand = (up[0] + 1, up[1] + 1, up[2], up[3] + 1, up[4])
            if cand[:2] < best[:2]:
                best = cand
            left = cur[j - 1]
            cand = (left[0] + 1, left[1] + 1, left[2], left[3], left[4] + 1)
            if cand[:2] < best[:2]:
                best = cand
            cur.append(best)
        prev = cur
    _, _, s, d, ins = prev[m]
    return ErrorCounts(s, d, ins, n)


def phone_error_rate(hyp: Sequence, ref: Sequence) -> ErrorCounts:
    if len(ref) == 0:
        raise ContractError("phonemap", "empty reference phone sequence")
    return align_counts(list(hyp), list(ref))


def corpus_error_rate(pairs: Iterable[tuple[Sequence, Sequence]]) -> ErrorCounts:
    total = ErrorCounts(0, 0, 0, 0)
    for hyp, ref in pairs:
        total = total + phone_error_rate(hyp, ref)
    return total


def write_per_report(path, rows: Sequence[tuple[str, ErrorCounts]]) -> ErrorCounts:
    total = ErrorCounts(0, 0, 0, 0)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["utt_id", "per", "S", "D", "I", "ref_len"])
        for utt, c in rows:
            w.writerow([utt, f"{c.per:.2f}", c.subs, c.dels, c.ins, c.ref_len])
            total = total + c
        if total.ref_len:
            w.writerow(["__corpus__", f"{total.per:.2f}", total.subs, total.dels, total.ins, total.ref_len])
    return total


class PhoneMapper(TransformerMixin, BaseEstimator):
    """Learn a cluster-to-phone map from aligned frames and map unit sequences.

    ``fit(X, y)`` takes cluster sequences ``X`` and per-frame phone symbol
    lists ``y`` in the same order.  ``transform`` returns phone symbol lists,
    merging repeated phones when ``collapse`` is set.
    """

    def __init__(self, phones=None, vowels=None, n_clusters=500, collapse=True):
        self.phones = phones
        self.vowels = vowels
        self.n_clusters = n_clusters
        self.collapse = collapse

    def fit(self, X, y):
        from .corpus import PHONES, VOWELS

        phones = tuple(self.phones) if self.phones is not None else PHONES
        vowels = tuple(self.vowels) if self.vowels is not None else VOWELS
        X = list(X)
        y = list(y)
        if len(X) != len(y):
            raise ContractError("phonemap", f"{len(X)} cluster sequences vs {len(y)} phone sequences")
        keyed = [(str(i), s.tokens if isinstance(s, ClusterSequence) else s) for i, s in enumerate(X)]
        self.phone_map_ = learn_phone_map(keyed, {str(i): p for i, p in enumerate(y)},
                                          phones, vowels, self.n_clusters)
        return self

    def transform(self, X):
        if not hasattr(self, "phone_map_"):
            raise NotFittedError(self)
        return [frames_to_phones(s, self.phone_map_, self.collapse) for s in X]

    def score(self, X, y):
        """Negative corpus PER of mapped ``X`` against reference phones ``y``."""
        return -corpus_error_rate(zip(self.transform(X), y)).per
