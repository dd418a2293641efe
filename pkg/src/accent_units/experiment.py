"""Desk-scale experiments on the synthetic accent corpus.

:func:`correction_experiment` measures phone error rates of the uncorrected
and corrected accented sequences against the standard-accent reference
phones.  :func:`adaptation_experiment` continues pre-training an acoustic
encoder with adapters on corrected versus uncorrected targets and compares
masked-frame accuracy on held-out accented utterances.

Run ``python -m accent_units.experiment`` to print both as JSON.
"""

from __future__ import annotations

import argparse
import json
from dataclasses import dataclass

import numpy as np

from . import adapt, neural
from .corpus import Dataset, LexiconSpec, ShiftSpec, apply_accent_shift, generate_standard, make_lexicon
from .corrector import AccentCorrector
from .mlm import CountScorer
from .phonemap import PhoneMap, corpus_error_rate, frames_to_phones, learn_phone_map

VARIANTS: dict[str, dict] = {
    "cluster/top-m": dict(grouping="cluster", fill="top-m"),
    "cluster/fill-all": dict(grouping="cluster", fill="fill-all"),
    "phone/top-m": dict(grouping="phone", fill="top-m"),
    "phone/fill-all": dict(grouping="phone", fill="fill-all"),
    # vowel-only masking from the fourth iteration on
    "vowels": dict(grouping="cluster", fill="top-m", vowels_after=3),
}


@dataclass
class SyntheticSetup:
    lexicon: LexiconSpec
    standard: Dataset
    accented: Dataset
    phone_map: PhoneMap
    scorer: CountScorer


def build_setup(seed: int = 0, n_standard: int = 2000, n_accented: int = 500, n_clusters: int = 50,
                apply_prob: float = 0.5, n_jobs: int = 1) -> SyntheticSetup:
    """Same corpus as ``accent-units gen-corpus --seed <seed>``, plus a phone map and count scorer."""
    lex = make_lexicon(seed=seed, n_clusters=n_clusters, center_seed=seed)
    std = generate_standard(lex, n_standard, seed=seed, prefix="std", n_jobs=n_jobs)
    base = generate_standard(lex, n_accented, seed=seed + 1, prefix="acc", n_jobs=n_jobs)
    acc = apply_accent_shift(base, ShiftSpec(apply_prob=apply_prob), seed=seed + 2, n_jobs=n_jobs)
    pm = learn_phone_map(std.cluster_sequences(), {u.utt_id: u.frame_phones for u in std},
                         lex.phones, lex.vowels, lex.V)
    scorer = CountScorer(lex.V).fit(std.cluster_sequences())
    return SyntheticSetup(lex, std, acc, pm, scorer)


def correct(setup: SyntheticSetup, variant: str, K: int = 10, p_mask: float = 0.2, n_jobs: int = 1):
    corrector = AccentCorrector(setup.scorer, K, p_mask, phone_map=setup.phone_map, n_jobs=n_jobs,
                                **VARIANTS[variant])
    return corrector.transform(setup.accented.cluster_sequences())


def corpus_per(setup: SyntheticSetup, sequences) -> float:
    refs = [u.phones for u in setup.accented]
    pairs = ((frames_to_phones(s, setup.phone_map, collapse=True), r) for s, r in zip(sequences, refs))
    return corpus_error_rate(pairs).per


def correction_experiment(setup: SyntheticSetup, K: int = 10, p_mask: float = 0.2,
                          variants=tuple(VARIANTS), n_jobs: int = 1) -> dict[str, float]:
    """Corpus PER (percent) of the original sequences and of each corrected variant."""
    out = {"original": corpus_per(setup, setup.accented.cluster_sequences())}
    for name in variants:
        out[name] = corpus_per(setup, correct(setup, name, K, p_mask, n_jobs))
    return out


def adaptation_experiment(setup: SyntheticSetup, variant: str = "vowels", n_train: int = 400,
                          layers: int = 2, model_dim: int = 64, ffn_dim: int = 128, span_len: int = 4,
                          bottleneck: int = 8, peak_lr: float = 3e-3, warmup_steps: int = 100,
                          base_steps: int = 1400, adapt_steps: int = 700, batch_size: int = 8,
                          seed: int = 0) -> dict[str, float]:
    """Masked-frame accuracy against standard clusters on held-out accented utterances.

    The base encoder is pre-trained on the standard corpus; two copies with
    fresh adapters are then trained on the first ``n_train`` accented
    utterances, one on their uncorrected units and one on the units corrected
    with ``variant``.
    """
    lex, acc = setup.lexicon, setup.accented
    spec = adapt.AcousticEncoderSpec.desk(lex.feature_dim, lex.V, layers=layers, model_dim=model_dim,
                                          ffn_dim=ffn_dim, span_len=span_len)
    base, _ = adapt.pretrain_base(spec, [u.features for u in setup.standard],
                                  [u.clusters for u in setup.standard],
                                  neural.LRSchedule(peak_lr, warmup_steps, base_steps), seed, batch_size)
    train, held = acc.utterances[:n_train], acc.utterances[n_train:]
    held_x = [u.features for u in held]
    held_y = [u.standard_clusters for u in held]
    original = acc.cluster_sequences()[:n_train]
    targets = {"uncorrected": original, "corrected": correct(setup, variant)[:n_train]}
    out = {"base": adapt.masked_frame_accuracy(base, spec, held_x, held_y, seed)}
    for name, seqs in targets.items():
        model = adapt.insert_adapters(base, neural.AdapterConfig(bottleneck), seed=seed)
        model, _ = adapt.continual_pretrain(model, spec, [u.features for u in train],
                                            [np.asarray(s.tokens) for s in seqs],
                                            neural.LRSchedule(peak_lr, warmup_steps, adapt_steps),
                                            seed, batch_size)
        out[name] = adapt.masked_frame_accuracy(model, spec, held_x, held_y, seed)
    return out


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="python -m accent_units.experiment")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--skip-adapt", action="store_true")
    args = p.parse_args(argv)
    import torch

    torch.set_num_threads(1)
    setup = build_setup(args.seed, n_jobs=args.jobs)
    result = {"per": correction_experiment(setup, n_jobs=args.jobs)}
    if not args.skip_adapt:
        result["masked_acc"] = adaptation_experiment(setup)
    print(json.dumps(result, indent=2))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
