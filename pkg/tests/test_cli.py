import json

import pytest

from accent_units.cli import main as _main
from accent_units.seqcore import read_sequences

from cli_pipeline import run_pipeline


def main(argv):
    return _main([str(a) for a in argv])


def write_lines(path, rows):
    path.write_text("".join(" ".join(map(str, r)) + "\n" for r in rows))


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    work = tmp_path_factory.mktemp("run")
    return work, run_pipeline(work, jobs=1)


def test_version(capsys):
    assert main(["--version"]) == 0
    out = capsys.readouterr().out
    assert out.startswith("accent-units ") and "ACFT v1" in out and "ENCP v1" in out


def test_usage_errors_exit_1(capsys):
    assert main([]) == 1
    assert main(["frobnicate"]) == 1
    assert main(["correct", "--scorer", "x"]) == 1
    assert main(["score", "--scorer", "a", "--input", "b", "--out", "c", "--jobs", "0"]) == 1


def test_contract_errors_exit_2(tmp_path, capsys):
    (tmp_path / "bad.json").write_text('{"corrector": {"K": 0}}')
    write_lines(tmp_path / "in.txt", [("u", 1, 2)])
    code = main(["correct", "--config", tmp_path / "bad.json", "--scorer", tmp_path / "s.json",
                 "--input", tmp_path / "in.txt", "--out", tmp_path / "o.txt"])
    assert code == 2
    assert "corrector.K" in capsys.readouterr().err
    assert main(["eval-per", "--hyp", tmp_path / "missing", "--ref", tmp_path / "in.txt"]) == 2


def test_eval_per_identical_files(tmp_path, capsys):
    write_lines(tmp_path / "r.txt", [("a", "W", "AH", "R"), ("b", "IH", "Z")])
    assert main(["eval-per", "--hyp", tmp_path / "r.txt", "--ref", tmp_path / "r.txt"]) == 0
    assert capsys.readouterr().out.strip() == "PER 0.00"


def test_correct_preserves_line_count_and_lengths(small_run):
    work, _ = small_run
    before = read_sequences(work / "acc.txt")
    after = read_sequences(work / "corrected.txt")
    assert [s.utt_id for s in after] == [s.utt_id for s in before]
    assert [len(s) for s in after] == [len(s) for s in before]
    assert len((work / "corrected.txt").read_text().splitlines()) == len(before)
    first = json.loads((work / "trace.jsonl").read_text().splitlines()[0])
    assert {"utt_id", "iterations", "n_max", "m"} <= set(first)


def test_reports_have_corpus_rows(small_run):
    _, artifacts = small_run
    for name in ("per_orig.csv", "per_corr.csv"):
        last = artifacts[name].decode().splitlines()[-1]
        assert last.startswith("__corpus__,")


def test_override_flags_beat_config(tmp_path, small_run):
    work, _ = small_run
    (tmp_path / "c.json").write_text('{"corrector": {"K": 1}}')
    argv = ["correct", "--scorer", work / "scorer.json", "--input", work / "acc.txt",
            "--config", tmp_path / "c.json", "--k", "10", "--phone-map", work / "pm.json",
            "--out", tmp_path / "o.txt"]
    assert main(argv) == 0
    assert (tmp_path / "o.txt").read_bytes() == (work / "corrected.txt").read_bytes()


@pytest.mark.slow
def test_rerun_with_four_jobs_is_identical(tmp_path, small_run):
    _, serial = small_run
    assert run_pipeline(tmp_path, jobs=4) == serial
