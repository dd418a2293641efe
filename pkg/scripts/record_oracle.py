"""Record the reference numbers the acceptance suite checks against.

Phone error rates are recomputed here without the package's phonemap code:
the cluster-to-phone map is a plain co-occurrence argmax and the edit
distance fills the whole dynamic-programming table.  Output goes to
``tests/data/oracle_run.json``.

    python scripts/record_oracle.py [--seed 0] [--skip-adapt]
"""

import argparse
import itertools
import json
import platform
import time
from pathlib import Path

import numpy as np
import torch

from accent_units import experiment

OUT = Path(__file__).resolve().parents[1] / "tests" / "data" / "oracle_run.json"


def edit_distance(hyp, ref):
    table = [[0] * (len(hyp) + 1) for _ in range(len(ref) + 1)]
    for i in range(len(ref) + 1):
        table[i][0] = i
    for j in range(len(hyp) + 1):
        table[0][j] = j
    for i in range(1, len(ref) + 1):
        for j in range(1, len(hyp) + 1):
            sub = table[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1])
            table[i][j] = min(sub, table[i - 1][j] + 1, table[i][j - 1] + 1)
    return table[-1][-1]


def cluster_to_phone(setup):
    phones = list(setup.lexicon.phones)
    counts = np.zeros((setup.lexicon.V, len(phones)), dtype=np.int64)
    for u in setup.standard:
        np.add.at(counts, (u.clusters, [phones.index(p) for p in u.frame_phones]), 1)
    return [phones[i] for i in counts.argmax(axis=1)]


def oracle_per(mapping, sequences, refs):
    errors = total = 0
    for seq, ref in zip(sequences, refs):
        hyp = [k for k, _ in itertools.groupby(mapping[t] for t in seq.tokens)]
        errors += edit_distance(hyp, list(ref))
        total += len(ref)
    return 100.0 * errors / total


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--skip-adapt", action="store_true", help="keep the recorded adaptation numbers")
    args = p.parse_args()
    torch.set_num_threads(1)

    record = json.loads(OUT.read_text()) if OUT.exists() else {}
    setup = experiment.build_setup(args.seed)
    mapping = cluster_to_phone(setup)
    refs = [u.phones for u in setup.accented]
    per = {"original": oracle_per(mapping, setup.accented.cluster_sequences(), refs)}
    for name in experiment.VARIANTS:
        per[name] = oracle_per(mapping, experiment.correct(setup, name), refs)
    record.update(seed=args.seed, corpus=dict(n_standard=2000, n_accented=500, V=50, apply_prob=0.5),
                  K=10, p_mask=0.2, per={k: round(v, 4) for k, v in per.items()},
                  machine=platform.machine())
    if not args.skip_adapt:
        start = time.perf_counter()
        acc = experiment.adaptation_experiment(setup)
        record["masked_acc"] = {k: round(v, 6) for k, v in acc.items()}
        record["adapt_seconds"] = round(time.perf_counter() - start, 1)
    OUT.parent.mkdir(parents=True, exist_ok=True)
    OUT.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    print(json.dumps(record, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
