"""Small end-to-end pipeline driven through the command line entry point."""

from pathlib import Path

from accent_units.cli import main

FINAL_ARTIFACTS = ("cb.kmcb", "std.txt", "acc.txt", "pm.json", "scorer.json", "corrected.txt",
                   "trace.jsonl", "per_orig.csv", "per_corr.csv")


def run(argv):
    code = main([str(a) for a in argv])
    assert code == 0, f"{argv[0]} exited with {code}"


def run_pipeline(work: Path, jobs: int, seed: int = 0, n_standard: int = 300, n_accented: int = 60,
                 V: int = 50) -> dict[str, bytes]:
    work = Path(work)
    common = ["--seed", seed, "--jobs", jobs]
    corpus = work / "corpus"
    run(["gen-corpus", "--out", corpus, "--n-standard", n_standard, "--n-accented", n_accented,
         "--clusters", V, *common])
    run(["kmeans-fit", "--corpus", corpus / "standard", "--out", work / "cb.kmcb", "--V", V,
         "--iters", 30, *common])
    run(["kmeans-assign", "--codebook", work / "cb.kmcb", "--corpus", corpus / "standard",
         "--out", work / "std.txt", *common])
    run(["kmeans-assign", "--codebook", work / "cb.kmcb", "--corpus", corpus / "accented",
         "--out", work / "acc.txt", *common])
    run(["phonemap-learn", "--clusters", work / "std.txt", "--corpus", corpus / "standard",
         "--out", work / "pm.json", "--V", V, *common])
    run(["mlm-train", "--train", work / "std.txt", "--out", work / "scorer.json", "--V", V, *common])
    run(["correct", "--scorer", work / "scorer.json", "--input", work / "acc.txt",
         "--out", work / "corrected.txt", "--k", 10, "--p-mask", 0.2, "--phone-map", work / "pm.json",
         "--trace", work / "trace.jsonl", *common])
    ref = corpus / "accented" / "ref_phones.txt"
    for hyp, report in (("acc.txt", "per_orig.csv"), ("corrected.txt", "per_corr.csv")):
        run(["eval-per", "--hyp", work / hyp, "--ref", ref, "--phone-map", work / "pm.json",
             "--report", work / report, *common])
    return {name: (work / name).read_bytes() for name in FINAL_ARTIFACTS}
