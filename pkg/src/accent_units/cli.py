"""``accent-units`` command line.

Every subcommand reads and writes the on-disk formats of the module it wraps.
Exit status is 0 on success, 1 on a usage error and 2 when the data violates
a module contract.
"""

from __future__ import annotations

import argparse
import json
import sys
from importlib import metadata
from pathlib import Path

import numpy as np
import torch

from . import adapt, neural
from .config import PipelineConfig, load_config, with_overrides
from .corpus import (
    FEATURE_VERSION,
    LexiconSpec,
    ShiftSpec,
    apply_accent_shift,
    generate_standard,
    make_lexicon,
    read_dataset,
    write_dataset,
)
from .corrector import CorrectionVariant, AccentCorrector
from .exceptions import ContractError
from .mlm import CountScorer, MaskedUnitLM, load_scorer, score_confidences
from .phonemap import (
    PhoneMap,
    corpus_error_rate,
    frames_to_phones,
    learn_phone_map,
    phone_error_rate,
    write_per_report,
)
from .quantizer import CODEBOOK_VERSION, Codebook, assign, fit_kmeans
from .seqcore import (
    ClusterSequence,
    read_sequences,
    read_symbol_lines,
    write_sequences,
    write_symbol_lines,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _version() -> str:
    try:
        pkg = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        pkg = "unknown"
    return (f"accent-units {pkg} (ACFT v{FEATURE_VERSION}, KMCB v{CODEBOOK_VERSION}, "
            f"ENCP v{neural.CHECKPOINT_VERSION})")


# -- helpers -------------------------------------------------------------------------

def _config(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    return with_overrides(cfg, {"seed": args.seed})


def _read_clusters(path) -> list[ClusterSequence]:
    seqs = read_sequences(path)
    if not seqs:
        raise ContractError("seqcore", f"{path}: no sequences")
    return seqs


def _lexicon_of(corpus_dir) -> LexiconSpec:
    return LexiconSpec.from_dict(json.loads((Path(corpus_dir) / "lexicon.json").read_text()))


def _targets_for(dataset, targets_path):
    if targets_path is None:
        return [u.clusters for u in dataset]
    by_id = {s.utt_id: s.as_array() for s in read_sequences(targets_path)}
    missing = [u.utt_id for u in dataset if u.utt_id not in by_id]
    if missing:
        raise ContractError("adapt", f"targets missing for {len(missing)} utterances, e.g. {missing[0]!r}")
    return [by_id[u.utt_id] for u in dataset]


# -- commands ------------------------------------------------------------------------

def cmd_gen_corpus(args, cfg):
    c = cfg.corpus
    lex = make_lexicon(n_words=c.n_words, seed=cfg.seed, n_clusters=c.n_clusters,
                       feature_dim=c.feature_dim, center_seed=cfg.seed)
    out = Path(args.out or cfg.paths.corpus_dir)
    std = generate_standard(lex, c.n_standard, seed=cfg.seed, prefix="std", n_jobs=args.jobs)
    base = generate_standard(lex, c.n_accented, seed=cfg.seed + 1, prefix="acc", n_jobs=args.jobs)
    acc = apply_accent_shift(base, ShiftSpec(apply_prob=c.apply_prob), seed=cfg.seed + 2,
                             n_jobs=args.jobs)
    write_dataset(std, out / "standard")
    write_dataset(acc, out / "accented")
    print(f"wrote {len(std)} standard and {len(acc)} accented utterances to {out}")


def cmd_kmeans_fit(args, cfg):
    ds = read_dataset(args.corpus)
    frames = np.concatenate([u.features for u in ds])
    q = cfg.quantizer
    cb = fit_kmeans(frames, q.V, q.iters, q.tol, seed=cfg.seed, n_init=q.n_init)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    cb.save(args.out)
    print(f"V={cb.V} inertia={cb.inertia:.6f}")


def cmd_kmeans_assign(args, cfg):
    cb = Codebook.load(args.codebook)
    ds = read_dataset(args.corpus)
    write_sequences(args.out, (ClusterSequence(u.utt_id, assign(cb, u.features)) for u in ds))


def cmd_phonemap_learn(args, cfg):
    lex = _lexicon_of(args.corpus)
    seqs = _read_clusters(args.clusters)
    frame_phones = read_symbol_lines(Path(args.corpus) / "frame_phones.txt")
    V = args.V or cfg.quantizer.V
    pm = learn_phone_map(seqs, frame_phones, lex.phones, lex.vowels, V)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    pm.save(args.out)


def cmd_mlm_train(args, cfg):
    seqs = _read_clusters(args.train)
    V = args.V or cfg.quantizer.V
    m = cfg.mlm
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    if m.kind == "count":
        CountScorer(V, m.smoothing, m.max_gap).fit(seqs).save(args.out)
        return
    e, s = m.encoder, m.schedule
    lm = MaskedUnitLM(V, e.layers, e.model_dim, e.heads, e.ffn_dim, e.max_len,
                      span_len=m.span.span_len, p_mask=m.span.p_mask, peak_lr=s.peak_lr,
                      warmup_steps=s.warmup_steps, n_steps=s.steps, batch_size=s.batch_size,
                      random_state=cfg.seed).fit(seqs)
    neural.save_params(lm.params_, args.out)
    if args.log:
        lm.log_.write_csv(args.log)


def cmd_score(args, cfg):
    scorer = load_scorer(args.scorer)
    rows = []
    for s in _read_clusters(args.input):
        conf = score_confidences(scorer, s) if len(s) else np.zeros(0)
        rows.append((s.utt_id, [f"{c:.6f}" for c in conf]))
    write_symbol_lines(args.out, rows)


def cmd_correct(args, cfg):
    c = cfg.corrector
    scorer = load_scorer(args.scorer)
    variant = CorrectionVariant.from_name(c.variant, c.fill, c.k0)
    phone_map = PhoneMap.load(args.phone_map) if args.phone_map else None
    corrector = AccentCorrector(scorer, c.K, c.p_mask, variant.grouping, variant.fill,
                                variant.vowels_after, phone_map, n_jobs=args.jobs)
    seqs = _read_clusters(args.input)
    trace = [] if args.trace else None
    out = corrector.transform(seqs, trace=trace)
    write_sequences(args.out, out)
    if args.trace:
        Path(args.trace).write_text("".join(r + "\n" for r in trace))


def cmd_eval_per(args, cfg):
    refs = read_symbol_lines(args.ref)
    if args.phone_map:
        pm = PhoneMap.load(args.phone_map)
        hyps = {s.utt_id: frames_to_phones(s, pm, collapse=True) for s in read_sequences(args.hyp)}
    else:
        hyps = read_symbol_lines(args.hyp)
    missing = sorted(set(refs) - set(hyps))
    if missing:
        raise ContractError("phonemap", f"no hypothesis for {len(missing)} utterances, e.g. {missing[0]!r}")
    rows = [(utt, phone_error_rate(hyps[utt], ref)) for utt, ref in refs.items()]
    if args.report:
        total = write_per_report(args.report, rows)
    else:
        total = corpus_error_rate((hyps[u], r) for u, r in refs.items())
    print(f"PER {total.per:.2f}")


def _acoustic_spec(cfg, input_dim, vocab) -> adapt.AcousticEncoderSpec:
    e, s = cfg.adapt.encoder, cfg.adapt.span
    return adapt.AcousticEncoderSpec.desk(input_dim, vocab, e.layers, e.model_dim, e.heads,
                                          e.ffn_dim, e.max_len, span_len=s.span_len, p_mask=s.p_mask)


def _schedule(section) -> neural.LRSchedule:
    return neural.LRSchedule(section.peak_lr, section.warmup_steps, section.steps)


def cmd_adapt_pretrain(args, cfg):
    ds = read_dataset(args.corpus)
    targets = _targets_for(ds, args.targets)
    V = args.V or cfg.quantizer.V
    spec = _acoustic_spec(cfg, ds.lexicon.feature_dim, V)
    sec = cfg.adapt.base_schedule
    params, log = adapt.pretrain_base(spec, [u.features for u in ds], targets, _schedule(sec),
                                      cfg.seed, sec.batch_size)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    neural.save_params(params, args.out)
    if args.log:
        log.write_csv(args.log)


def _spec_from_params(cfg, params) -> adapt.AcousticEncoderSpec:
    s = cfg.adapt.span
    return adapt.AcousticEncoderSpec(params.config, span_len=s.span_len, p_mask=s.p_mask)


def cmd_adapt_train(args, cfg):
    base = neural.load_params(args.base)
    ds = read_dataset(args.corpus)
    targets = _targets_for(ds, args.targets)
    spec = _spec_from_params(cfg, base)
    model = adapt.insert_adapters(base, neural.AdapterConfig(cfg.adapt.bottleneck), seed=cfg.seed)
    sec = cfg.adapt.schedule
    params, log = adapt.continual_pretrain(model, spec, [u.features for u in ds], targets,
                                           _schedule(sec), cfg.seed, sec.batch_size)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    neural.save_params(params, args.out)
    if args.log:
        log.write_csv(args.log)
    print(f"trainable {params.n_params(trainable_only=True)} of {params.n_params()} parameters")


def cmd_adapt_eval(args, cfg):
    params = neural.load_params(args.model)
    ds = read_dataset(args.corpus)
    targets = _targets_for(ds, args.targets)
    acc = adapt.masked_frame_accuracy(params, _spec_from_params(cfg, params),
                                      [u.features for u in ds], targets, seed=cfg.seed)
    print(f"masked_acc {acc:.4f}")


# -- parser --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="pipeline config (JSON)")
    common.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    common.add_argument("--jobs", type=int, default=1, help="worker processes (1 = serial)")

    p = _Parser(prog="accent-units", description="Accent correction of discrete speech units.")
    p.add_argument("--version", action="version", version=_version())
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_):
        sp = sub.add_parser(name, parents=[common], help=help_)
        sp.set_defaults(func=func)
        return sp

    sp = add("gen-corpus", cmd_gen_corpus, "generate the synthetic standard/accented corpus")
    sp.add_argument("--out")
    sp.add_argument("--n-standard", type=int, dest="corpus.n_standard")
    sp.add_argument("--n-accented", type=int, dest="corpus.n_accented")
    sp.add_argument("--clusters", type=int, dest="corpus.n_clusters")
    sp.add_argument("--apply-prob", type=float, dest="corpus.apply_prob")

    sp = add("kmeans-fit", cmd_kmeans_fit, "fit a k-means codebook on corpus features")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--V", type=int, dest="quantizer.V")
    sp.add_argument("--iters", type=int, dest="quantizer.iters")

    sp = add("kmeans-assign", cmd_kmeans_assign, "quantize corpus features to unit ids")
    sp.add_argument("--codebook", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--out", required=True)

    sp = add("phonemap-learn", cmd_phonemap_learn, "learn the cluster-to-phone map")
    sp.add_argument("--clusters", required=True)
    sp.add_argument("--corpus", required=True, help="corpus dir with frame_phones.txt and lexicon.json")
    sp.add_argument("--out", required=True)
    sp.add_argument("--V", type=int)

    sp = add("mlm-train", cmd_mlm_train, "train a unit language model")
    sp.add_argument("--train", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--kind", choices=["count", "neural"], dest="mlm.kind")
    sp.add_argument("--V", type=int)
    sp.add_argument("--log")

    sp = add("score", cmd_score, "per-frame confidences of unit sequences")
    sp.add_argument("--scorer", required=True)
    sp.add_argument("--input", required=True)
    sp.add_argument("--out", required=True)

    sp = add("correct", cmd_correct, "mask-and-decode correction")
    sp.add_argument("--scorer", required=True)
    sp.add_argument("--input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--k", type=int, dest="corrector.K")
    sp.add_argument("--p-mask", type=float, dest="corrector.p_mask")
    sp.add_argument("--variant", choices=["cluster-groups", "phone-groups"], dest="corrector.variant")
    sp.add_argument("--fill", choices=["top-m", "fill-all"], dest="corrector.fill")
    sp.add_argument("--k0", type=int, dest="corrector.k0", help="vowel-only masking after this iteration")
    sp.add_argument("--phone-map")
    sp.add_argument("--trace", help="write per-iteration traces (JSON lines) here")

    sp = add("eval-per", cmd_eval_per, "corpus phone error rate")
    sp.add_argument("--hyp", required=True)
    sp.add_argument("--ref", required=True)
    sp.add_argument("--phone-map", help="treat --hyp as unit sequences and map them to phones")
    sp.add_argument("--report")

    sp = add("adapt-pretrain", cmd_adapt_pretrain, "train the base masked-prediction encoder")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--targets")
    sp.add_argument("--out", required=True)
    sp.add_argument("--V", type=int)
    sp.add_argument("--steps", type=int, dest="adapt.base_schedule.steps")
    sp.add_argument("--warmup", type=int, dest="adapt.base_schedule.warmup_steps")
    sp.add_argument("--batch-size", type=int, dest="adapt.base_schedule.batch_size")
    sp.add_argument("--log")

    sp = add("adapt-train", cmd_adapt_train, "adapter continual pre-training")
    sp.add_argument("--base", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--targets", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--steps", type=int, dest="adapt.schedule.steps")
    sp.add_argument("--warmup", type=int, dest="adapt.schedule.warmup_steps")
    sp.add_argument("--batch-size", type=int, dest="adapt.schedule.batch_size")
    sp.add_argument("--bottleneck", type=int, dest="adapt.bottleneck")
    sp.add_argument("--log")

    sp = add("adapt-eval", cmd_adapt_eval, "masked-frame accuracy of an encoder")
    sp.add_argument("--model", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--targets")
    return p


def main(argv=None) -> int:
    torch.set_num_threads(1)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    if args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return 1
    try:
        overrides = {k: v for k, v in vars(args).items() if "." in k}
        cfg = with_overrides(_config(args), overrides)
        args.func(args, cfg)
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
