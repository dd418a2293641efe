"""Iterative mask-and-decode correction of unit sequences.

Each iteration scores the current sequence, groups frames into runs, masks
the lowest-scoring groups until at least ``n_k`` frames are covered, asks the
scorer to fill the masks and commits the most confident groups until at
least ``m`` frames are filled.  Masked groups that are not committed keep
their previous units.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np
from joblib import Parallel, delayed
from sklearn.base import BaseEstimator, TransformerMixin

from .exceptions import ContractError
from .mlm import CountScorer, UnitScorer, predict_masked, score_confidences
from .phonemap import PhoneMap
from .seqcore import ClusterSequence, GroupedSequence, group_runs

_FLOOR_EPS = 1e-9


@dataclass(frozen=True)
class MaskSchedule:
    T: int
    K: int
    p_mask: float
    n_max: int
    n_k: tuple[int, ...]   # n_k[k - 1] for iteration k
    m: int

    @property
    def empty(self) -> bool:
        return self.n_max == 0

    def masks_at(self, k: int) -> int:
        return self.n_k[k - 1]


def build_schedule(T: int, K: int, p_mask: float) -> MaskSchedule:
    if T < 1 or K < 1 or not 0.0 < p_mask < 1.0:
        raise ContractError("corrector", f"invalid schedule T={T}, K={K}, p_mask={p_mask}")
    # the epsilon keeps e.g. 0.29 * 100 from flooring to 28
    n_max = int(math.floor(p_mask * T + _FLOOR_EPS))
    n_k = tuple((n_max * (K - k + 1)) // K for k in range(1, K + 1))
    m = max(1, n_max // K)
    return MaskSchedule(T, K, p_mask, n_max, n_k, m)


@dataclass(frozen=True)
class CorrectionVariant:
    grouping: Literal["cluster", "phone"] = "cluster"
    fill: Literal["top-m", "fill-all"] = "top-m"
    vowels_after: int | None = None   # only vowel groups are candidates for k > this

    def __post_init__(self):
        if self.grouping not in ("cluster", "phone"):
            raise ContractError("corrector", f"unknown grouping {self.grouping!r}")
        if self.fill not in ("top-m", "fill-all"):
            raise ContractError("corrector", f"unknown fill mode {self.fill!r}")
        if self.vowels_after is not None and self.vowels_after < 0:
            raise ContractError("corrector", "vowels_after must be >= 0")

    @property
    def needs_phone_map(self) -> bool:
        return self.grouping == "phone" or self.vowels_after is not None

    @classmethod
    def from_name(cls, name: str, fill: str = "top-m", vowels_after: int | None = None):
        """Parse CLI names such as ``cluster-groups`` or ``phone-groups-fill-all``."""
        names = {
            "cluster-groups": ("cluster", fill),
            "phone-groups": ("phone", fill),
            "cluster-groups-fill-all": ("cluster", "fill-all"),
            "phone-groups-fill-all": ("phone", "fill-all"),
        }
        if name not in names:
            raise ContractError("corrector", f"unknown variant {name!r}; choose from {sorted(names)}")
        grouping, fill = names[name]
        return cls(grouping, fill, vowels_after)


def select_mask_groups(grouped: GroupedSequence, n_k: int,
                       candidates: Sequence[bool] | None = None) -> list[int]:
    """Lowest-scoring candidate groups until at least ``n_k`` frames are covered.

    Ties in score go to the earlier group.  If the candidates cannot reach
    ``n_k`` frames, all of them are selected.  Returns indices in order of
    selection.
    """
    if n_k <= 0:
        return []
    if any(g.score is None for g in grouped):
        raise ContractError("corrector", "every group needs a score before masking")
    order = sorted(range(len(grouped)), key=lambda i: (grouped[i].score, grouped[i].start))
    chosen, covered = [], 0
    for i in order:
        if candidates is not None and not candidates[i]:
            continue
        chosen.append(i)
        covered += grouped[i].length
        if covered >= n_k:
            break
    return chosen


@dataclass
class IterationResult:
    tokens: np.ndarray
    k: int
    n_k: int
    m: int
    masked: list[tuple[int, int]] = field(default_factory=list)   # (start, length)
    filled: list[tuple[int, int]] = field(default_factory=list)
    group_scores: list[float] = field(default_factory=list)       # of masked groups
    fill_confidences: list[float] = field(default_factory=list)   # of filled groups

    @property
    def n_masked(self) -> int:
        return sum(n for _, n in self.masked)

    @property
    def n_filled(self) -> int:
        return sum(n for _, n in self.filled)

    def to_record(self) -> dict:
        return {
            "iteration": self.k, "n_k": self.n_k, "m": self.m,
            "masked": [list(s) for s in self.masked],
            "filled": [list(s) for s in self.filled],
            "mask_scores": [round(x, 6) for x in self.group_scores],
            "fill_confidences": [round(x, 6) for x in self.fill_confidences],
        }


def _check_variant(variant, phone_map):
    if variant.needs_phone_map and phone_map is None:
        raise ContractError("corrector", "phone grouping and vowel filtering need a phone map")


def group_keys(tokens: np.ndarray, variant: CorrectionVariant, phone_map: PhoneMap | None):
    if variant.grouping == "phone":
        return phone_map.phone_ids(tokens)
    return tokens


def correct_iteration(tokens, scorer: UnitScorer, schedule: MaskSchedule, k: int,
                      variant: CorrectionVariant = CorrectionVariant(),
                      phone_map: PhoneMap | None = None) -> IterationResult:
    _check_variant(variant, phone_map)
    tokens = np.asarray(tokens, dtype=np.int64)
    V = scorer.vocab_size
    if np.any(tokens >= V):
        raise ContractError("corrector", "input to an iteration must not contain mask ids")
    n_k = schedule.masks_at(k)
    result = IterationResult(tokens.copy(), k, n_k, schedule.m)
    if n_k == 0:
        return result

    conf = score_confidences(scorer, tokens)
    grouped = group_runs(tokens, group_keys(tokens, variant, phone_map)).with_scores(conf)
    candidates = None
    if variant.vowels_after is not None and k > variant.vowels_after:
        vowel = phone_map.vowel_mask()
        if variant.grouping == "phone":
            candidates = [bool(vowel[g.key]) for g in grouped]
        else:
            candidates = [bool(vowel[phone_map.mapping[g.key]]) for g in grouped]
    chosen = select_mask_groups(grouped, n_k, candidates)
    if not chosen:
        return result

    masked = tokens.copy()
    for i in chosen:
        g = grouped[i]
        masked[g.start:g.stop] = V
    pos, best, best_conf = predict_masked(scorer, masked)
    pred = np.full(tokens.size, -1, dtype=np.int64)
    pconf = np.zeros(tokens.size, dtype=np.float64)
    pred[pos], pconf[pos] = best, best_conf

    groups = [grouped[i] for i in chosen]
    result.masked = [(g.start, g.length) for g in groups]
    result.group_scores = [g.score for g in groups]
    fill_conf = [float(pconf[g.start:g.stop].mean()) for g in groups]
    order = sorted(range(len(groups)), key=lambda j: (-fill_conf[j], groups[j].start))
    out = tokens.copy()
    filled = 0
    for j in order:
        if variant.fill == "top-m" and filled >= schedule.m:
            break
        g = groups[j]
        out[g.start:g.stop] = pred[g.start:g.stop]
        filled += g.length
        result.filled.append((g.start, g.length))
        result.fill_confidences.append(fill_conf[j])
    result.tokens = out
    return result


def correct(seq, scorer: UnitScorer, K: int = 10, p_mask: float = 0.2,
            variant: CorrectionVariant = CorrectionVariant(), phone_map: PhoneMap | None = None,
            trace: list | None = None) -> ClusterSequence:
    """Run ``K`` mask-and-decode iterations, re-scoring the sequence each time.

    When ``trace`` is a list, one :class:`IterationResult` per iteration is
    appended to it.
    """
    _check_variant(variant, phone_map)
    if isinstance(seq, ClusterSequence):
        utt, tokens = seq.utt_id, seq.as_array()
    else:
        utt, tokens = "", np.asarray(seq, dtype=np.int64)
    if tokens.size == 0:
        return ClusterSequence(utt, [], allow_empty=True)
    schedule = build_schedule(tokens.size, K, p_mask)
    if not schedule.empty:
        for k in range(1, K + 1):
            step = correct_iteration(tokens, scorer, schedule, k, variant, phone_map)
            tokens = step.tokens
            if trace is not None:
                trace.append(step)
    return ClusterSequence(utt, tokens)


def trace_record(utt_id: str, schedule: MaskSchedule, steps: Sequence[IterationResult]) -> str:
    return json.dumps({
        "utt_id": utt_id, "T": schedule.T, "K": schedule.K, "p_mask": schedule.p_mask,
        "n_max": schedule.n_max, "m": schedule.m,
        "iterations": [s.to_record() for s in steps],
    }, separators=(",", ":"))


def _correct_one(seq, scorer, K, p_mask, variant, phone_map, want_trace):
    steps: list | None = [] if want_trace else None
    out = correct(seq, scorer, K, p_mask, variant, phone_map, steps)
    record = None
    if want_trace:
        record = trace_record(out.utt_id, build_schedule(max(len(out), 1), K, p_mask), steps)
    return out, record


class AccentCorrector(TransformerMixin, BaseEstimator):
    """Correct accented unit sequences towards a standard-accent scorer.

    Parameters
    ----------
    scorer : UnitScorer or None
        A fitted scorer.  When None, ``fit`` trains a :class:`CountScorer`
        on the standard-accent sequences it receives.
    n_iter : int, default=10
        Number of mask-and-decode iterations ``K``.
    p_mask : float, default=0.2
    grouping : {"cluster", "phone"}
    fill : {"top-m", "fill-all"}
    vowels_after : int or None
        After this many iterations only vowel groups may be masked.
    phone_map : PhoneMap or None
        Needed for phone grouping and vowel filtering.
    n_jobs : int, default=1
        Utterances are corrected independently; output does not depend on it.
    """

    def __init__(self, scorer=None, n_iter=10, p_mask=0.2, grouping="cluster", fill="top-m",
                 vowels_after=None, phone_map=None, vocab_size=500, smoothing=0.01, n_jobs=1):
        self.scorer = scorer
        self.n_iter = n_iter
        self.p_mask = p_mask
        self.grouping = grouping
        self.fill = fill
        self.vowels_after = vowels_after
        self.phone_map = phone_map
        self.vocab_size = vocab_size
        self.smoothing = smoothing
        self.n_jobs = n_jobs

    @property
    def variant(self) -> CorrectionVariant:
        return CorrectionVariant(self.grouping, self.fill, self.vowels_after)

    def fit(self, X=None, y=None):
        if self.n_iter < 1 or not 0.0 < self.p_mask < 1.0:
            raise ContractError("corrector", f"need K >= 1 and 0 < p_mask < 1, got {self.n_iter}, {self.p_mask}")
        _check_variant(self.variant, self.phone_map)
        if self.scorer is None:
            if X is None:
                raise ContractError("corrector", "no scorer given and no standard corpus to fit one")
            self.scorer_ = CountScorer(self.vocab_size, self.smoothing).fit(X)
        else:
            self.scorer_ = self.scorer
        return self

    def transform(self, X, trace: list | None = None):
        if not hasattr(self, "scorer_"):
            self.fit()
        seqs = [s if isinstance(s, ClusterSequence) else ClusterSequence(str(i), s)
                for i, s in enumerate(X)]
        results = Parallel(n_jobs=self.n_jobs)(
            delayed(_correct_one)(s, self.scorer_, self.n_iter, self.p_mask, self.variant,
                                  self.phone_map, trace is not None)
            for s in seqs
        )
        if trace is not None:
            trace.extend(r for _, r in results)
        return [out for out, _ in results]
