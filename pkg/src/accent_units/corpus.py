"""Synthetic paired standard/accented corpus.

Utterances are rendered layer by layer: words -> phones -> durations -> frame
phones -> frame clusters (per-phone emission) -> feature frames (isotropic
Gaussian around each cluster's center).  An accent is a phone-level
substitution that re-renders the affected phone instances while keeping the
standard rendering as ground truth.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from joblib import Parallel, delayed

from .exceptions import ContractError
from .seqcore import (
    format_line,
    read_sequences,
    read_symbol_lines,
    write_symbol_lines,
)

VOWELS = ("AA", "AE", "AH", "AO", "AW", "AX", "AY", "EH", "ER", "EY",
          "IH", "IY", "OW", "OY", "UH", "UW")
CONSONANTS = ("B", "CH", "D", "DH", "F", "G", "HH", "JH", "K", "L", "M", "N",
              "NG", "P", "R", "S", "SH", "T", "TH", "V", "W", "Y", "Z", "ZH")
PHONES = tuple(sorted(VOWELS + CONSONANTS))

# A British-to-American style vowel shift, applied in reverse by the corrector.
DEFAULT_SHIFT = {"AE": "AA", "OW": "AO", "UW": "UH", "EY": "EH", "IY": "IH"}

FEATURE_MAGIC = b"ACFT"
FEATURE_VERSION = 1
_FEATURE_HEADER = struct.Struct("<4sIQI")


@dataclass
class LexiconSpec:
    phones: tuple[str, ...] = PHONES
    vowels: tuple[str, ...] = VOWELS
    words: tuple[tuple[str, ...], ...] = ()
    clusters_per_phone: int = 1
    n_clusters: int | None = None
    emission: dict[str, dict[int, float]] | None = None
    duration_range: tuple[int, int] = (2, 6)
    feature_dim: int = 16
    centroid_spread: float = 10.0
    noise_sigma: float = 1.0
    center_seed: int = 0

    def __post_init__(self):
        self.phones = tuple(self.phones)
        self.vowels = tuple(self.vowels)
        self.words = tuple(tuple(w) for w in self.words)
        self.duration_range = tuple(int(d) for d in self.duration_range)
        self.validate()

    @property
    def V(self) -> int:
        if self.n_clusters is None:
            return len(self.phones) * self.clusters_per_phone
        return int(self.n_clusters)

    def validate(self):
        if not self.words:
            raise ContractError("corpus", "empty lexicon")
        if self.clusters_per_phone < 1:
            raise ContractError("corpus", "clusters_per_phone must be >= 1")
        if self.V < len(self.phones) * self.clusters_per_phone:
            raise ContractError(
                "corpus", f"n_clusters={self.V} cannot give every phone "
                f"{self.clusters_per_phone} clusters"
            )
        lo, hi = self.duration_range
        if lo < 1 or hi < lo:
            raise ContractError("corpus", f"invalid duration range {self.duration_range}")
        known = set(self.phones)
        if not set(self.vowels) <= known:
            raise ContractError("corpus", "vowels must be a subset of phones")
        for w in self.words:
            if not w or not set(w) <= known:
                raise ContractError("corpus", f"word {' '.join(w)!r} uses undeclared phones")
        if self.centroid_spread <= 0 or self.noise_sigma < 0:
            raise ContractError("corpus", "centroid_spread must be > 0 and noise_sigma >= 0")

    def partition(self) -> dict[str, np.ndarray]:
        """Contiguous cluster ids per phone; leftover ids go to the first phones."""
        n_ph = len(self.phones)
        base, extra = divmod(self.V, n_ph)
        out, start = {}, 0
        for i, ph in enumerate(self.phones):
            n = base + (1 if i < extra else 0)
            out[ph] = np.arange(start, start + n)
            start += n
        return out

    def emission_table(self) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        part = self.partition()
        table = {}
        for ph, ids in part.items():
            if self.emission and ph in self.emission:
                probs = np.zeros(len(ids))
                for c, p in self.emission[ph].items():
                    where = np.flatnonzero(ids == int(c))
                    if where.size == 0:
                        raise ContractError("corpus", f"phone {ph} cannot emit cluster {c}")
                    probs[where[0]] = p
                if probs.sum() <= 0:
                    raise ContractError("corpus", f"phone {ph} has an all-zero emission")
                probs = probs / probs.sum()
            else:
                probs = np.full(len(ids), 1.0 / len(ids))
            table[ph] = (ids, probs)
        return table

    def centers(self) -> np.ndarray:
        rng = np.random.default_rng(np.random.SeedSequence([self.center_seed, 0xC3]))
        return rng.normal(size=(self.V, self.feature_dim)) * self.centroid_spread

    def cluster_phone(self) -> np.ndarray:
        """Generator ground truth: phone index of every cluster id."""
        out = np.empty(self.V, dtype=np.int64)
        for i, ids in enumerate(self.partition().values()):
            out[ids] = i
        return out

    def to_dict(self) -> dict:
        return {
            "phones": list(self.phones),
            "vowels": list(self.vowels),
            "words": [list(w) for w in self.words],
            "clusters_per_phone": self.clusters_per_phone,
            "n_clusters": self.V,
            "emission": None if self.emission is None else {
                ph: {str(c): p for c, p in e.items()} for ph, e in self.emission.items()
            },
            "duration_range": list(self.duration_range),
            "feature_dim": self.feature_dim,
            "centroid_spread": self.centroid_spread,
            "noise_sigma": self.noise_sigma,
            "center_seed": self.center_seed,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "LexiconSpec":
        d = dict(d)
        if d.get("emission") is not None:
            d["emission"] = {ph: {int(c): p for c, p in e.items()}
                             for ph, e in d["emission"].items()}
        return cls(**d)


_BOS, _EOS = "<s>", "</s>"


def _word_contexts(word) -> dict:
    padded = (_BOS, *word, _EOS)
    return {(padded[j - 1], padded[j + 1]): padded[j] for j in range(1, len(padded) - 1)}


def _admissible(words, multi) -> bool:
    """Whether every neighbour context in any concatenation has one middle phone.

    Words may follow each other in any order, so besides the contexts inside
    each word the check covers the contexts across every word boundary.  No
    context pair may also occur as a phone bigram (otherwise a phone rendered
    as two cluster runs would look like a different phone between the pair),
    and phones owning several clusters never touch.
    """
    inits = {w[0] for w in words}
    finals = {w[-1] for w in words}
    if inits & finals:
        return False
    table: dict = {}
    pairs = []
    for w in words:
        pairs.extend(_word_contexts(w).items())
        pairs.extend(((w[-2], i), w[-1]) for i in inits)
        pairs.extend(((f, w[1]), w[0]) for f in finals)
    for key, mid in pairs:
        if table.setdefault(key, mid) != mid:
            return False
    bigrams = {(f, i) for f in finals for i in inits}
    for w in words:
        bigrams.update(zip(w[:-1], w[1:]))
    if any(b in table for b in bigrams):
        return False
    return not any(a in multi and b in multi for a, b in bigrams)


def make_lexicon(n_words: int = 16, word_len: tuple[int, int] = (4, 8), seed: int = 0,
                 vowel_prob: float = 0.4, unique_contexts: bool = True, max_tries: int = 50_000,
                 **spec_kwargs) -> LexiconSpec:
    """Random lexicon over the default inventory with no repeated adjacent phones.

    With ``unique_contexts`` (the default) a word is only accepted if the
    lexicon stays :func:`_admissible`, so a standard-accent phone is fully
    determined by its neighbours.  Phone draws favour phones the lexicon does
    not use yet, which tends to cover the whole inventory.
    """
    if word_len[0] < 2 or word_len[1] < word_len[0]:
        raise ContractError("corpus", f"invalid word length range {word_len}")
    phones = tuple(spec_kwargs.get("phones", PHONES))
    vowels = set(spec_kwargs.get("vowels", VOWELS))
    shape = LexiconSpec(words=((phones[0],),), **spec_kwargs)
    multi = {ph for ph, ids in shape.partition().items() if len(ids) > 1}
    vow = [p for p in phones if p in vowels]
    con = [p for p in phones if p not in vowels]
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x1E]))
    used = dict.fromkeys(phones, 0)
    words: list[tuple[str, ...]] = []
    seen = set()
    for _ in range(max_tries):
        if len(words) == n_words:
            break
        n = int(rng.integers(word_len[0], word_len[1] + 1))
        w: list[str] = []
        while len(w) < n:
            pool = vow if (not con or rng.random() < vowel_prob) else con
            weight = np.array([1.0 / (1 + used[p]) for p in pool])
            ph = pool[int(rng.choice(len(pool), p=weight / weight.sum()))]
            if not w or w[-1] != ph:
                w.append(ph)
        word = tuple(w)
        if word in seen:
            continue
        if unique_contexts and not _admissible(words + [word], multi):
            continue
        seen.add(word)
        words.append(word)
        for ph in word:
            used[ph] += 1
    if len(words) < n_words:
        raise ContractError(
            "corpus", f"only {len(words)} of {n_words} words satisfy the lexicon constraints"
        )
    return LexiconSpec(words=tuple(words), **spec_kwargs)


@dataclass(frozen=True)
class ShiftSpec:
    substitutions: Mapping[str, str] = field(default_factory=lambda: dict(DEFAULT_SHIFT))
    apply_prob: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.apply_prob <= 1.0:
            raise ContractError("corpus", f"apply_prob must lie in [0, 1], got {self.apply_prob}")


@dataclass
class Utterance:
    utt_id: str
    accent: str
    phones: list[str]             # standard pronunciation (reference)
    realized_phones: list[str]    # what was rendered
    durations: np.ndarray
    clusters: np.ndarray
    standard_clusters: np.ndarray
    features: np.ndarray
    shifted: np.ndarray           # per phone instance

    @property
    def n_frames(self) -> int:
        return int(self.clusters.size)

    @property
    def frame_phones(self) -> list[str]:
        return [p for p, d in zip(self.realized_phones, self.durations) for _ in range(int(d))]


@dataclass
class Dataset:
    lexicon: LexiconSpec
    utterances: list[Utterance]

    def __len__(self):
        return len(self.utterances)

    def __iter__(self):
        return iter(self.utterances)

    def cluster_sequences(self, standard: bool = False):
        from .seqcore import ClusterSequence
        attr = "standard_clusters" if standard else "clusters"
        return [ClusterSequence(u.utt_id, getattr(u, attr)) for u in self.utterances]


def _render(rng, phones, durations, table, centers, noise_sigma):
    clusters = np.empty(int(durations.sum()), dtype=np.int64)
    pos = 0
    for ph, d in zip(phones, durations):
        ids, probs = table[ph]
        clusters[pos:pos + d] = ids[0] if ids.size == 1 else rng.choice(ids, size=d, p=probs)
        pos += d
    feats = centers[clusters] + rng.normal(scale=noise_sigma, size=(clusters.size, centers.shape[1]))
    return clusters, feats.astype(np.float32)


def _generate_one(spec, table, centers, index, words_per_utt, seed, prefix):
    rng = np.random.default_rng(np.random.SeedSequence([seed, index]))
    n_words = int(rng.integers(words_per_utt[0], words_per_utt[1] + 1))
    word_ids = rng.integers(len(spec.words), size=n_words)
    phones = [ph for w in word_ids for ph in spec.words[w]]
    lo, hi = spec.duration_range
    durations = rng.integers(lo, hi + 1, size=len(phones))
    clusters, feats = _render(rng, phones, durations, table, centers, spec.noise_sigma)
    return Utterance(
        utt_id=f"{prefix}{index:06d}", accent="standard", phones=phones,
        realized_phones=list(phones), durations=durations, clusters=clusters,
        standard_clusters=clusters.copy(), features=feats,
        shifted=np.zeros(len(phones), dtype=bool),
    )


def generate_standard(spec: LexiconSpec, n_utts: int, words_per_utt: tuple[int, int] = (3, 8),
                      seed: int = 0, prefix: str = "std", n_jobs: int = 1) -> Dataset:
    spec.validate()
    if n_utts < 0 or words_per_utt[0] < 1 or words_per_utt[1] < words_per_utt[0]:
        raise ContractError("corpus", f"invalid range n_utts={n_utts}, words_per_utt={words_per_utt}")
    table, centers = spec.emission_table(), spec.centers()
    utts = Parallel(n_jobs=n_jobs)(
        delayed(_generate_one)(spec, table, centers, i, words_per_utt, seed, prefix)
        for i in range(n_utts)
    )
    return Dataset(spec, list(utts))


def _shift_one(utt, shift, table, centers, noise_sigma, seed, index, accent):
    rng = np.random.default_rng(np.random.SeedSequence([seed, index, 0x5F]))
    draws = rng.random(len(utt.phones))
    realized, shifted = [], np.zeros(len(utt.phones), dtype=bool)
    clusters = utt.clusters.copy()
    feats = utt.features.copy()
    pos = 0
    for j, (ph, d) in enumerate(zip(utt.realized_phones, utt.durations)):
        target = shift.substitutions.get(ph, ph)
        if draws[j] < shift.apply_prob and ph in shift.substitutions:
            shifted[j] = True
            if target != ph:
                c, f = _render(rng, [target], np.array([d]), table, centers, noise_sigma)
                clusters[pos:pos + d] = c
                feats[pos:pos + d] = f
            realized.append(target)
        else:
            realized.append(ph)
        pos += d
    return replace(utt, accent=accent, realized_phones=realized, clusters=clusters,
                   features=feats, shifted=shifted,
                   standard_clusters=utt.standard_clusters.copy())


def apply_accent_shift(dataset: Dataset, shift: ShiftSpec, seed: int = 0,
                       accent: str = "accented", n_jobs: int = 1) -> Dataset:
    spec = dataset.lexicon
    unknown = {p for kv in shift.substitutions.items() for p in kv} - set(spec.phones)
    if unknown:
        raise ContractError("corpus", f"unknown phones in shift: {sorted(unknown)}")
    table, centers = spec.emission_table(), spec.centers()
    utts = Parallel(n_jobs=n_jobs)(
        delayed(_shift_one)(u, shift, table, centers, spec.noise_sigma, seed, i, accent)
        for i, u in enumerate(dataset.utterances)
    )
    return Dataset(spec, list(utts))


# -- on-disk layout --------------------------------------------------------------

def write_features(path, frames: np.ndarray) -> None:
    frames = np.ascontiguousarray(frames, dtype="<f4")
    if frames.ndim != 2:
        raise ContractError("corpus", "feature matrix must be 2-D")
    with open(path, "wb") as fh:
        fh.write(_FEATURE_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, frames.shape[0], frames.shape[1]))
        fh.write(frames.tobytes())


def read_features(path) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(_FEATURE_HEADER.size)
        if len(head) < _FEATURE_HEADER.size:
            raise ContractError("corpus", f"{path}: truncated feature header")
        magic, version, frames, dim = _FEATURE_HEADER.unpack(head)
        if magic != FEATURE_MAGIC or version != FEATURE_VERSION:
            raise ContractError("corpus", f"{path}: not an ACFT v1 feature file")
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != frames * dim:
        raise ContractError("corpus", f"{path}: expected {frames}x{dim} values, found {data.size}")
    return data.reshape(frames, dim).astype(np.float32)


FILES = {
    "clusters": "clusters.txt",
    "frame_phones": "frame_phones.txt",
    "ref_phones": "ref_phones.txt",
    "standard_clusters": "standard_clusters.txt",
}


def write_dataset(dataset: Dataset, outdir) -> Path:
    out = Path(outdir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    (out / "lexicon.json").write_text(json.dumps(dataset.lexicon.to_dict(), indent=1) + "\n")
    handles = {k: open(out / f, "w", encoding="utf-8", newline="\n") for k, f in FILES.items()}
    try:
        with open(out / "manifest.jsonl", "w", encoding="utf-8", newline="\n") as man:
            for line_no, u in enumerate(dataset.utterances):
                feat_rel = f"features/{u.utt_id}.acft"
                write_features(out / feat_rel, u.features)
                handles["clusters"].write(format_line(u.utt_id, u.clusters))
                handles["standard_clusters"].write(format_line(u.utt_id, u.standard_clusters))
                handles["frame_phones"].write(" ".join([u.utt_id, *u.frame_phones]) + "\n")
                handles["ref_phones"].write(" ".join([u.utt_id, *u.phones]) + "\n")
                record = {
                    "utt_id": u.utt_id,
                    "accent": u.accent,
                    "features": feat_rel,
                    "frames": u.n_frames,
                    "clusters": {"file": FILES["clusters"], "line": line_no},
                    "frame_phones": {"file": FILES["frame_phones"], "line": line_no},
                    "ref_phones": list(u.phones),
                    "standard_clusters": {"file": FILES["standard_clusters"], "line": line_no},
                    "realized_phones": list(u.realized_phones),
                    "durations": [int(d) for d in u.durations],
                    "shifted": [bool(s) for s in u.shifted],
                }
                man.write(json.dumps(record, separators=(",", ":")) + "\n")
    finally:
        for h in handles.values():
            h.close()
    return out


def read_manifest(corpus_dir) -> list[dict]:
    with open(Path(corpus_dir) / "manifest.jsonl", encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def read_dataset(corpus_dir) -> Dataset:
    root = Path(corpus_dir)
    lexicon = LexiconSpec.from_dict(json.loads((root / "lexicon.json").read_text()))
    records = read_manifest(root)
    clusters = {s.utt_id: s.as_array() for s in read_sequences(root / FILES["clusters"])}
    standard = {s.utt_id: s.as_array() for s in read_sequences(root / FILES["standard_clusters"])}
    frame_phones = read_symbol_lines(root / FILES["frame_phones"])
    utts = []
    for r in records:
        uid = r["utt_id"]
        feats = read_features(root / r["features"])
        c, sc = clusters[uid], standard[uid]
        if not (feats.shape[0] == c.size == sc.size == len(frame_phones[uid]) == r["frames"]):
            raise ContractError("corpus", f"frame counts disagree for utterance {uid!r}")
        utts.append(Utterance(
            utt_id=uid, accent=r["accent"], phones=list(r["ref_phones"]),
            realized_phones=list(r["realized_phones"]),
            durations=np.asarray(r["durations"], dtype=np.int64),
            clusters=c, standard_clusters=sc, features=feats,
            shifted=np.asarray(r["shifted"], dtype=bool),
        ))
    return Dataset(lexicon, utts)


def write_reference_phones(path, dataset: Dataset) -> None:
    write_symbol_lines(path, ((u.utt_id, u.phones) for u in dataset))
