"""Standard-accent unit language models.

Two scorers share one interface: ``distributions(tokens)`` returns, for every
frame, a probability vector over the real units (the mask id is never in the
support).  :class:`CountScorer` is an exact context-count model;
:class:`MaskedUnitLM` is a transformer trained with span masking.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import torch
from sklearn.base import BaseEstimator

from . import neural
from .exceptions import ContractError, NotFittedError
from .seqcore import ClusterSequence, run_boundaries

_FLOOR_EPS = 1e-9


class UnitScorer(Protocol):
    vocab_size: int

    def distributions(self, tokens: np.ndarray) -> np.ndarray:
        """(T, V) per-frame unit probabilities; masked frames may be present."""


@dataclass(frozen=True)
class SpanMaskPolicy:
    span_len: int = 10
    p_mask: float = 0.2
    replace_mask: float = 0.8
    replace_random: float = 0.1
    replace_keep: float = 0.1

    def __post_init__(self):
        if self.span_len < 1:
            raise ContractError("mlm", "span_len must be >= 1")
        if not 0.0 < self.p_mask < 1.0:
            raise ContractError("mlm", f"p_mask must lie in (0, 1), got {self.p_mask}")
        probs = (self.replace_mask, self.replace_random, self.replace_keep)
        if min(probs) < 0 or abs(sum(probs) - 1.0) > 1e-9:
            raise ContractError("mlm", f"replacement probabilities must sum to 1, got {probs}")


@dataclass
class SpanMask:
    corrupted: np.ndarray
    positions: np.ndarray   # bool per frame, selected regardless of replacement
    short: bool             # fewer positions than the target could be selected


def _tokens(seq) -> np.ndarray:
    if isinstance(seq, ClusterSequence):
        return seq.as_array()
    return np.asarray(seq, dtype=np.int64).reshape(-1)


def mask_budget(T: int, p_mask: float) -> int:
    return int(math.floor(p_mask * T + _FLOOR_EPS))


def select_spans(T: int, span_len: int, p_mask: float, rng: np.random.Generator) -> tuple[np.ndarray, bool]:
    """Non-overlapping spans (truncated at the end) until the budget is reached."""
    target = mask_budget(T, p_mask)
    selected = np.zeros(T, dtype=bool)
    while selected.sum() < target:
        # a start is valid when its (possibly truncated) span is still free
        free = np.concatenate(([0], np.cumsum(~selected)))
        starts = np.arange(T)
        stops = np.minimum(starts + span_len, T)
        valid = starts[(free[stops] - free[starts]) == (stops - starts)]
        if valid.size == 0:
            break
        s = int(valid[rng.integers(valid.size)])
        selected[s:min(s + span_len, T)] = True
    return selected, bool(selected.sum() < target)


def apply_span_mask(seq, policy: SpanMaskPolicy, seed, vocab_size: int) -> SpanMask:
    tokens = _tokens(seq)
    if tokens.size < 1:
        raise ContractError("mlm", "cannot mask an empty sequence")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    positions, short = select_spans(tokens.size, policy.span_len, policy.p_mask, rng)
    corrupted = tokens.copy()
    idx = np.flatnonzero(positions)
    u = rng.random(idx.size)
    random_units = rng.integers(vocab_size, size=idx.size)
    to_mask = u < policy.replace_mask
    to_rand = (~to_mask) & (u < policy.replace_mask + policy.replace_random)
    corrupted[idx[to_mask]] = vocab_size
    corrupted[idx[to_rand]] = random_units[to_rand]
    return SpanMask(corrupted, positions, short)


# -- scoring interface --------------------------------------------------------------

def score_confidences(scorer: UnitScorer, seq) -> np.ndarray:
    """Probability the scorer assigns to each frame's own unit, unmasked pass."""
    tokens = _tokens(seq)
    if np.any(tokens >= scorer.vocab_size) or np.any(tokens < 0):
        raise ContractError("mlm", "confidence scoring input contains mask or out-of-range ids")
    dist = scorer.distributions(tokens)
    return dist[np.arange(tokens.size), tokens]


def predict_masked(scorer: UnitScorer, tokens) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(positions, argmax units, confidences)`` for every masked frame."""
    tokens = _tokens(tokens)
    pos = np.flatnonzero(tokens == scorer.vocab_size)
    if pos.size == 0:
        raise ContractError("mlm", "predict_masked needs at least one masked frame")
    dist = scorer.distributions(tokens)[pos]
    best = dist.argmax(axis=1)
    return pos, best, dist[np.arange(pos.size), best]


# -- count scorer ------------------------------------------------------------------

class CountScorer(BaseEstimator):
    """Unit probabilities from counts of neighbouring runs.

    A frame's context is the unit of the run before its run and the unit of
    the run after it (edge symbols at utterance boundaries), so repeated
    frames of one unit share one context.  Probabilities are add-k smoothed
    counts of ``(left, unit, right)`` run triples.  Unseen contexts back off
    to left/right neighbour estimates, then to run unigrams.

    A masked span may cover several runs.  Its frames get the posterior over
    every run sequence of up to ``max_gap`` runs seen between the same outer
    neighbours, weighted by how well run-length counts explain the span
    length, then add-k smoothed like a single context.

    Parameters
    ----------
    vocab_size : int
    smoothing : float, default=0.01
        Add-k constant, must be > 0.
    max_gap : int, default=3
        Longest run sequence considered for a masked span.
    length_smoothing : float, default=0.01
        Add-k constant of the run-length distributions.
    """

    def __init__(self, vocab_size=500, smoothing=0.01, max_gap=3, length_smoothing=0.01):
        self.vocab_size = vocab_size
        self.smoothing = smoothing
        self.max_gap = max_gap
        self.length_smoothing = length_smoothing

    @property
    def bos(self):
        return self.vocab_size

    @property
    def eos(self):
        return self.vocab_size + 1

    def _contexts(self, tokens):
        """Per run: key, left/right neighbour keys and length.

        A neighbour that is a masked run is reported as -1 (unknown).
        """
        starts, lengths = run_boundaries(tokens)
        keys = tokens[starts]
        if keys.size == 0:
            return keys, keys, keys, lengths
        mask = self.vocab_size
        left = np.concatenate(([self.bos], keys[:-1]))
        right = np.concatenate((keys[1:], [self.eos]))
        left[1:][keys[:-1] == mask] = -1
        right[:-1][keys[1:] == mask] = -1
        return keys, left, right, lengths

    def fit(self, X, y=None):
        if self.smoothing <= 0 or self.length_smoothing <= 0:
            raise ContractError("mlm", "smoothing constants must be > 0")
        if self.max_gap < 1:
            raise ContractError("mlm", "max_gap must be >= 1")
        V = self.vocab_size
        counts: dict[tuple[int, int], np.ndarray] = {}
        gaps: dict[tuple[int, int], dict[tuple, int]] = {}
        run_lengths: dict[int, dict[int, int]] = {}
        n_seq = 0
        for seq in X:
            tokens = _tokens(seq)
            if tokens.size == 0:
                continue
            if tokens.min() < 0 or tokens.max() >= V:
                raise ContractError("mlm", f"training ids must lie in [0, {V})")
            n_seq += 1
            keys, left, right, lengths = self._contexts(tokens)
            for l, u, r in zip(left.tolist(), keys.tolist(), right.tolist()):
                row = counts.get((l, r))
                if row is None:
                    row = counts[(l, r)] = np.zeros(V, dtype=np.int64)
                row[u] += 1
            for u, n in zip(keys.tolist(), lengths.tolist()):
                per_unit = run_lengths.setdefault(u, {})
                per_unit[n] = per_unit.get(n, 0) + 1
            padded = [self.bos, *keys.tolist(), self.eos]
            for i in range(len(padded)):
                for g in range(2, self.max_gap + 1):
                    j = i + g + 1
                    if j >= len(padded):
                        break
                    table = gaps.setdefault((padded[i], padded[j]), {})
                    mid = tuple(padded[i + 1:j])
                    table[mid] = table.get(mid, 0) + 1
        if n_seq == 0:
            raise ContractError("mlm", "empty training corpus")
        self.counts_ = counts
        self.gaps_ = gaps
        self._set_run_lengths(run_lengths)
        self._marginals()
        return self

    def _set_run_lengths(self, run_lengths: dict[int, dict[int, int]]):
        longest = max((n for per in run_lengths.values() for n in per), default=1)
        table = np.zeros((self.vocab_size, longest + 1), dtype=np.int64)
        for u, per in run_lengths.items():
            for n, c in per.items():
                table[u, n] = c
        self.run_length_counts_ = table

    def _marginals(self):
        V = self.vocab_size
        self.left_counts_ = np.zeros((V + 2, V), dtype=np.int64)
        self.right_counts_ = np.zeros((V + 2, V), dtype=np.int64)
        for (l, r), row in self.counts_.items():
            self.left_counts_[l] += row
            self.right_counts_[r] += row
        self.unigram_ = self.left_counts_.sum(axis=0)

    def _check(self):
        if not hasattr(self, "counts_"):
            raise NotFittedError(self)

    def context_distribution(self, left: int, right: int) -> np.ndarray:
        """P(unit | left, right).

        Seen contexts use add-k smoothed triple counts.  Unseen contexts
        combine the add-k left and right neighbour estimates as a normalized
        product divided by the unigram; with one side unknown (-1) only the
        other side is used, and with neither the add-k unigram.
        """
        self._check()
        k, V = self.smoothing, self.vocab_size
        row = self.counts_.get((left, right))
        if row is not None:
            return (row + k) / (row.sum() + k * V)
        uni = (self.unigram_ + k) / (self.unigram_.sum() + k * V)
        sides = []
        if 0 <= left < V + 2 and self.left_counts_[left].any():
            c = self.left_counts_[left]
            sides.append((c + k) / (c.sum() + k * V))
        if 0 <= right < V + 2 and self.right_counts_[right].any():
            c = self.right_counts_[right]
            sides.append((c + k) / (c.sum() + k * V))
        if not sides:
            return uni
        if len(sides) == 1:
            return sides[0]
        p = sides[0] * sides[1] / uni
        return p / p.sum()

    def length_probs(self, unit: int, n_frames: int) -> np.ndarray:
        """P(run length = n) for n = 0..n_frames (entry 0 is always 0)."""
        a = self.length_smoothing
        row = self.run_length_counts_[unit]
        support = max(n_frames, row.size - 1)
        c = np.zeros(n_frames + 1)
        m = min(n_frames, row.size - 1)
        c[1:m + 1] = row[1:m + 1]
        c[1:] += a
        return c / (row.sum() + a * support)

    def _occupancy(self, runs: tuple, F: int):
        """Likelihood of ``runs`` spanning exactly F frames, and per-frame run posteriors."""
        P = [self.length_probs(u, F) for u in runs]
        g = len(runs)
        fwd = [np.zeros(F + 1)]
        fwd[0][0] = 1.0
        for j in range(g):
            fwd.append(np.convolve(fwd[j], P[j])[:F + 1])
        # backward pass on the reversed axis: bwd[j][F - s] = P(runs j.. cover frames s..F-1)
        rev = [None] * (g + 1)
        rev[g] = np.zeros(F + 1)
        rev[g][0] = 1.0
        for j in range(g - 1, -1, -1):
            rev[j] = np.convolve(rev[j + 1], P[j])[:F + 1]
        Z = fwd[g][F]
        if Z <= 0:
            return 0.0, None
        idx = np.arange(F + 1)
        occ = np.zeros((F, g))
        for j in range(g):
            after = rev[j + 1][::-1]                       # after[e] = P(runs j+1.. cover e..F-1)
            lag = idx[None, :] - idx[:, None]              # e - s
            A = np.where(lag > 0, P[j][np.clip(lag, 0, F)], 0.0) * fwd[j][:, None] * after[None, :]
            C = A.cumsum(axis=0)                           # sum over starts s <= i
            tail = C[:, ::-1].cumsum(axis=1)[:, ::-1]      # sum over ends e >= column
            occ[:, j] = tail[idx[:F], idx[:F] + 1]
        return Z, occ / Z

    def span_distribution(self, left: int, right: int, n_frames: int) -> np.ndarray:
        """Per-frame unit probabilities for a masked span of ``n_frames`` frames."""
        self._check()
        k, V = self.smoothing, self.vocab_size
        cands = []
        row = self.counts_.get((left, right))
        if row is not None:
            cands.extend(((int(u),), int(row[u])) for u in np.flatnonzero(row))
        for runs, c in self.gaps_.get((left, right), {}).items():
            if len(runs) <= n_frames:
                cands.append((runs, c))
        if not cands:
            return np.tile(self.context_distribution(left, right), (n_frames, 1))
        N = float(sum(c for _, c in cands))
        scored = []
        for runs, c in cands:
            Z, occ = self._occupancy(runs, n_frames)
            if Z > 0:
                scored.append((runs, c * Z, occ))
        W = sum(w for _, w, _ in scored)
        M = np.zeros((n_frames, V))
        for runs, w, occ in scored:
            for j, u in enumerate(runs):
                M[:, u] += (N * w / W) * occ[:, j]
        return (M + k) / (N + k * V)

    def distributions(self, tokens) -> np.ndarray:
        self._check()
        tokens = _tokens(tokens)
        keys, left, right, lengths = self._contexts(tokens)
        out = np.empty((tokens.size, self.vocab_size), dtype=np.float64)
        pos = 0
        cache: dict[tuple[int, int], np.ndarray] = {}
        for u, l, r, n in zip(keys.tolist(), left.tolist(), right.tolist(), lengths.tolist()):
            if u == self.vocab_size:
                out[pos:pos + n] = self.span_distribution(l, r, n)
            else:
                d = cache.get((l, r))
                if d is None:
                    d = cache[(l, r)] = self.context_distribution(l, r)
                out[pos:pos + n] = d
            pos += n
        return out

    def to_dict(self) -> dict:
        self._check()

        def enc(x):
            return -1 if x == self.bos else -2 if x == self.eos else int(x)

        table = []
        for (l, r), row in sorted(self.counts_.items()):
            nz = np.flatnonzero(row)
            table.append([enc(l), enc(r), {str(int(u)): int(row[u]) for u in nz}])
        gaps = []
        for (l, r), runs in sorted(self.gaps_.items()):
            gaps.append([enc(l), enc(r), [[[enc(u) for u in mid], c] for mid, c in sorted(runs.items())]])
        lengths = {
            str(u): {str(n): int(c) for n, c in enumerate(row) if c}
            for u, row in enumerate(self.run_length_counts_) if row.any()
        }
        return {"kind": "count", "vocab_size": self.vocab_size,
                "smoothing": self.smoothing, "max_gap": self.max_gap,
                "length_smoothing": self.length_smoothing,
                "edges": {"bos": -1, "eos": -2},
                "contexts": table, "gaps": gaps, "run_lengths": lengths}

    @classmethod
    def from_dict(cls, d: dict) -> "CountScorer":
        est = cls(vocab_size=int(d["vocab_size"]), smoothing=float(d["smoothing"]),
                  max_gap=int(d.get("max_gap", 3)),
                  length_smoothing=float(d.get("length_smoothing", 0.01)))
        V = est.vocab_size

        def dec(x):
            return est.bos if x == -1 else est.eos if x == -2 else int(x)

        counts = {}
        for l, r, row in d["contexts"]:
            arr = np.zeros(V, dtype=np.int64)
            for u, c in row.items():
                arr[int(u)] = int(c)
            counts[(dec(l), dec(r))] = arr
        est.counts_ = counts
        est.gaps_ = {
            (dec(l), dec(r)): {tuple(dec(u) for u in mid): int(c) for mid, c in runs}
            for l, r, runs in d.get("gaps", [])
        }
        est._set_run_lengths({int(u): {int(n): int(c) for n, c in per.items()}
                              for u, per in d.get("run_lengths", {}).items()})
        est._marginals()
        return est

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), separators=(",", ":")) + "\n")


def fit_count_scorer(corpus, vocab_size: int, smoothing: float = 0.01, max_gap: int = 3) -> CountScorer:
    return CountScorer(vocab_size=vocab_size, smoothing=smoothing, max_gap=max_gap).fit(corpus)


# -- neural masked LM ------------------------------------------------------------

def pad_batch(seqs: Sequence[np.ndarray], pad_value: int):
    T = max(len(s) for s in seqs)
    out = np.full((len(seqs), T), pad_value, dtype=np.int64)
    pad = np.ones((len(seqs), T), dtype=bool)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
        pad[i, :len(s)] = False
    return out, pad


@dataclass
class TrainingLog:
    rows: list[tuple]
    header: tuple[str, ...] = ("step", "loss", "lr")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.header)
            for row in self.rows:
                w.writerow([row[0], *(f"{v:.6f}" for v in row[1:])])

    @property
    def losses(self) -> list[float]:
        return [r[1] for r in self.rows]


def _crop(tokens, max_len, rng):
    if tokens.size <= max_len:
        return tokens
    s = int(rng.integers(tokens.size - max_len + 1))
    return tokens[s:s + max_len]


def train_mlm(corpus, config: neural.EncoderConfig, policy: SpanMaskPolicy,
              schedule: neural.LRSchedule, seed: int = 0, batch_size: int = 16,
              max_grad_norm: float | None = 1.0):
    """Span-masked unit LM training from random initialization.

    Returns ``(params, log)``; the loss covers selected span positions only.
    """
    seqs = [_tokens(s) for s in corpus]
    seqs = [s for s in seqs if s.size]
    if not seqs:
        raise ContractError("mlm", "empty training corpus")
    V = config.vocab_out
    for s in seqs:
        if s.min() < 0 or s.max() >= V:
            raise ContractError("mlm", f"training ids must lie in [0, {V})")
    params = neural.init_params(config, seed=seed)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x313]))
    torch_gen = torch.Generator().manual_seed(int(seed))
    rows = []
    for step in range(1, schedule.total_steps + 1):
        inputs, targets, flags = [], [], []
        while not inputs:
            for i in rng.integers(len(seqs), size=batch_size):
                toks = _crop(seqs[i], config.max_len, rng)
                m = apply_span_mask(toks, policy, rng, V)
                if m.positions.any():
                    inputs.append(m.corrupted)
                    targets.append(toks)
                    flags.append(m.positions)
        x, pad = pad_batch(inputs, V)
        y, _ = pad_batch(targets, 0)
        f, _ = pad_batch([fl.astype(np.int64) for fl in flags], 0)
        loss, grads = neural.loss_and_grads(
            params, torch.from_numpy(x), torch.from_numpy(y), torch.from_numpy(f.astype(bool)),
            pad_mask=torch.from_numpy(pad), train_mode=True, rng=torch_gen,
        )
        if not math.isfinite(loss):
            raise ContractError("mlm", f"non-finite loss at step {step}")
        lr = neural.optimizer_step(params, grads, step, schedule, max_grad_norm=max_grad_norm)
        rows.append((step, loss, lr))
    return params, TrainingLog(rows)


class NeuralScorer:
    """Wrap trained encoder parameters as a :class:`UnitScorer`."""

    def __init__(self, params: neural.EncoderParams):
        if params.config.input_kind != "token":
            raise ContractError("mlm", "a unit scorer needs a token-input encoder")
        self.params = params
        self.vocab_size = params.config.vocab_out

    def distributions(self, tokens) -> np.ndarray:
        tokens = _tokens(tokens)
        with torch.no_grad():
            _, logits = neural.encoder_forward(self.params, torch.from_numpy(tokens))
            return torch.softmax(logits.double(), dim=-1).numpy()

    def distributions_batch(self, batch: Sequence[np.ndarray]) -> list[np.ndarray]:
        x, pad = pad_batch([_tokens(b) for b in batch], self.vocab_size)
        with torch.no_grad():
            _, logits = neural.encoder_forward(self.params, torch.from_numpy(x), torch.from_numpy(pad))
            probs = torch.softmax(logits.double(), dim=-1).numpy()
        return [probs[i, :len(b)] for i, b in enumerate(batch)]


class MaskedUnitLM(BaseEstimator):
    """Transformer masked LM over discrete units (sklearn-style wrapper).

    Hidden width and head count are free choices; ``layers=6`` mirrors the
    reference setup.
    """

    def __init__(self, vocab_size=500, layers=6, model_dim=64, heads=4, ffn_dim=256,
                 max_len=512, dropout=0.0, span_len=10, p_mask=0.2, replace_mask=0.8,
                 replace_random=0.1, replace_keep=0.1, peak_lr=1e-3, warmup_steps=100,
                 n_steps=1000, batch_size=16, random_state=0):
        self.vocab_size = vocab_size
        self.layers = layers
        self.model_dim = model_dim
        self.heads = heads
        self.ffn_dim = ffn_dim
        self.max_len = max_len
        self.dropout = dropout
        self.span_len = span_len
        self.p_mask = p_mask
        self.replace_mask = replace_mask
        self.replace_random = replace_random
        self.replace_keep = replace_keep
        self.peak_lr = peak_lr
        self.warmup_steps = warmup_steps
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.random_state = random_state

    def _config(self):
        return neural.EncoderConfig(
            layers=self.layers, model_dim=self.model_dim, heads=self.heads, ffn_dim=self.ffn_dim,
            max_len=self.max_len, dropout=self.dropout, input_kind="token", vocab_out=self.vocab_size,
        )

    def policy(self) -> SpanMaskPolicy:
        return SpanMaskPolicy(self.span_len, self.p_mask, self.replace_mask,
                              self.replace_random, self.replace_keep)

    def fit(self, X, y=None):
        schedule = neural.LRSchedule(self.peak_lr, self.warmup_steps, self.n_steps)
        self.params_, self.log_ = train_mlm(X, self._config(), self.policy(), schedule,
                                            self.random_state, self.batch_size)
        self.scorer_ = NeuralScorer(self.params_)
        return self

    def _check(self):
        if not hasattr(self, "params_"):
            raise NotFittedError(self)

    def distributions(self, tokens):
        self._check()
        return self.scorer_.distributions(tokens)

    def frame_confidences(self, seq):
        self._check()
        return score_confidences(self.scorer_, seq)

    def predict_masked(self, tokens):
        self._check()
        return predict_masked(self.scorer_, tokens)


def masked_accuracy(scorer: UnitScorer, corpus, policy: SpanMaskPolicy, seed: int = 0) -> float:
    """Top-1 accuracy on span positions replaced by the mask id."""
    rng = np.random.default_rng(seed)
    hits = total = 0
    for seq in corpus:
        toks = _tokens(seq)
        m = apply_span_mask(toks, SpanMaskPolicy(policy.span_len, policy.p_mask, 1.0, 0.0, 0.0),
                            rng, scorer.vocab_size)
        if not m.positions.any():
            continue
        pos, best, _ = predict_masked(scorer, m.corrupted)
        hits += int((best == toks[pos]).sum())
        total += pos.size
    return hits / max(total, 1)


def load_scorer(path) -> UnitScorer:
    """Load a count scorer (JSON) or a neural scorer (ENCP checkpoint)."""
    raw = Path(path).read_bytes()
    if raw[:4] == neural.CHECKPOINT_MAGIC:
        return NeuralScorer(neural.params_from_bytes(raw))
    try:
        d = json.loads(raw)
    except ValueError:
        raise ContractError("mlm", f"{path}: neither an ENCP checkpoint nor a count-scorer JSON") from None
    if d.get("kind") != "count":
        raise ContractError("mlm", f"{path}: unknown scorer kind {d.get('kind')!r}")
    return CountScorer.from_dict(d)
