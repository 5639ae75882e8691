import csv
import json

import pytest

from satforge.cli import main

TINY = """\
[corpus]
feat_dim = 6
num_classes = 4
num_speakers = 10
dev_speakers = 2
eval_speakers = 2
utts_per_speaker = 6
min_frames = 20
max_frames = 60
seed = 3

[model]
hidden_layers = 2
hidden_units = 12

[training]
epochs_stage1 = 2
epochs_stage2 = 1
batch_size = 64

[evaluation]
min_lengths = 0.0,0.3
"""


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.ini").write_text(TINY)
    cfg = str(root / "tiny.ini")
    assert main(["gen-data", "--config", cfg, "--out", str(root / "corpus")]) == 0
    assert main(["train", "--si", "--config", cfg, "--corpus", str(root / "corpus"), "--out", str(root / "si")]) == 0
    return root, cfg


def test_gen_data_manifest_and_determinism(work, tmp_path):
    root, cfg = work
    lines = (root / "corpus" / "manifest.txt").read_text().splitlines()
    assert len(lines) == 60
    assert main(["gen-data", "--config", cfg, "--out", str(tmp_path / "again")]) == 0
    assert (tmp_path / "again" / "manifest.txt").read_bytes() == (root / "corpus" / "manifest.txt").read_bytes()
    for kind in ("oracle_full", "oracle_speaker", "oracle_full_noisy"):
        assert (root / "corpus" / "embeddings" / f"{kind}.txt").exists()


def test_gen_data_refuses_non_empty_dir_without_force(work, tmp_path):
    _, cfg = work
    out = tmp_path / "c"
    out.mkdir()
    (out / "junk").write_text("x")
    assert main(["gen-data", "--config", cfg, "--out", str(out)]) == 2
    assert main(["gen-data", "--config", cfg, "--out", str(out), "--force"]) == 0
    assert not (out / "junk").exists()


def test_train_si_outputs(work):
    root, _ = work
    rows = _rows(root / "si" / "report.csv")
    assert list(rows[0]) == ["experiment", "stage", "split", "threshold", "fer"]
    assert [r["split"] for r in rows] == ["dev", "eval", "eval"]
    manifest = json.loads((root / "si" / "manifest.json").read_text())
    assert manifest["stage"] == "si" and manifest["training_seed"] == 0 and manifest["corpus_seed"] == 3
    assert (root / "si" / "model.bin").exists() and (root / "si" / "config.ini").exists()


def test_train_sat_policies_are_tagged(work, tmp_path):
    root, cfg = work
    common = ["train", "--sat", "--config", cfg, "--corpus", str(root / "corpus"), "--si-checkpoint", str(root / "si"),
              "--mechanism", "ctrl-layer", "--mode", "shift", "--site", "input"]
    assert main(common + ["--out", str(tmp_path / "ft")]) == 0
    assert main(common + ["--policy", "freeze-main", "--out", str(tmp_path / "fz")]) == 0
    a = json.loads((tmp_path / "ft" / "manifest.json").read_text())
    b = json.loads((tmp_path / "fz" / "manifest.json").read_text())
    assert a["experiment"] != b["experiment"] and a["run_fingerprint"] != b["run_fingerprint"]
    assert "freeze_main" in b["experiment"]


def test_usage_errors(work, tmp_path):
    root, cfg = work
    base = ["train", "--sat", "--config", cfg, "--corpus", str(root / "corpus"), "--out", str(tmp_path / "x")]
    assert main(base + ["--si-checkpoint", str(root / "si"), "--mechanism", "ctrl-banana"]) == 1
    assert main(base) == 1  # no SI checkpoint
    assert main(["train", "--config", cfg, "--corpus", str(root / "corpus"), "--out", str(tmp_path / "y")]) == 1
    assert main(["frobnicate"]) == 1


def test_data_errors(work, tmp_path):
    root, cfg = work
    assert main(["train", "--si", "--corpus", str(tmp_path / "nope"), "--out", str(tmp_path / "a")]) == 2
    # default config has a different [corpus] section: fingerprint mismatch
    assert main(["train", "--si", "--corpus", str(root / "corpus"), "--out", str(tmp_path / "b")]) == 2
    (tmp_path / "bad.ini").write_text("[training]\nwhat = 1\n")
    assert main(["gen-data", "--config", str(tmp_path / "bad.ini"), "--out", str(tmp_path / "c")]) == 2


def test_numeric_failure_exit_code(work, tmp_path):
    root, _ = work
    (tmp_path / "hot.ini").write_text(TINY.replace("batch_size = 64", "batch_size = 64\nlr = 1e30\nmomentum = 0.0")
                                      .replace("hidden_units = 12", "hidden_units = 12\nbatch_norm = false"))
    with pytest.warns(RuntimeWarning):
        code = main(["train", "--si", "--config", str(tmp_path / "hot.ini"), "--corpus", str(root / "corpus"),
                     "--out", str(tmp_path / "hot")])
    assert code == 3


def test_thread_env_validation(work, tmp_path, monkeypatch):
    _, cfg = work
    monkeypatch.setenv("SATFORGE_THREADS", "zero")
    assert main(["gen-data", "--config", cfg, "--out", str(tmp_path / "t")]) == 1


def test_eval_asr_sweep(work, tmp_path):
    root, _ = work
    assert main(["eval-asr", "--run", str(root / "si"), "--min-length", "0", "0.3", "100", "--out", str(tmp_path / "asr")]) == 0
    rows = _rows(tmp_path / "asr" / "fer_by_length.csv")
    assert [(r["split"], r["threshold"]) for r in rows] == [("dev", "0.0000"), ("dev", "0.3000"), ("eval", "0.0000"), ("eval", "0.3000")]
    counts = [int(r["utterances"]) for r in rows if r["split"] == "dev"]
    assert counts == sorted(counts, reverse=True)
    assert (tmp_path / "asr" / "fer_by_length.png").stat().st_size > 0
    si_eval = next(r for r in _rows(root / "si" / "report.csv") if r["split"] == "eval")
    assert si_eval["fer"] == rows[2]["fer"]


def test_eval_spk_perfect_embeddings(work, tmp_path):
    root, cfg = work
    perfect = tmp_path / "perfect.ini"
    perfect.write_text(TINY.replace("seed = 3", "seed = 3\njitter_speaker = 0.0"))
    assert main(["gen-data", "--config", str(perfect), "--out", str(tmp_path / "pc"), "--kinds", "oracle_speaker"]) == 0
    assert main(["eval-spk", "--config", str(perfect), "--corpus", str(tmp_path / "pc"), "--embedding", "oracle_speaker",
                 "--backend", "cosine", "--min-length", "0", "0.2", "0.4", "--out", str(tmp_path / "spk")]) == 0
    rows = _rows(tmp_path / "spk" / "eer.csv")
    assert [r["threshold"] for r in rows] == ["0.0000", "0.2000", "0.4000"]
    assert float(rows[0]["eer"]) == 0.0
    trials = (tmp_path / "spk" / "trials.txt").read_text().splitlines()
    scores = (tmp_path / "spk" / "scores" / "cosine.txt").read_text().splitlines()
    assert len(trials) == len(scores) and trials[0].split()[:2] == scores[0].split()[:2]


def test_eval_spk_subsets_and_missing_table(work, tmp_path):
    root, cfg = work
    assert main(["eval-spk", "--config", cfg, "--corpus", str(root / "corpus"), "--embedding", "oracle_full",
                 "--subset-max-sec", "1.0", "--out", str(tmp_path / "sub")]) == 0
    rows = _rows(tmp_path / "sub" / "eer.csv")
    assert {r["task"] for r in rows} == {"subset"} and len({r["backend"] for r in rows}) == 4
    assert main(["gen-data", "--config", cfg, "--out", str(tmp_path / "only"), "--kinds", "oracle_full"]) == 0
    assert main(["eval-spk", "--config", cfg, "--corpus", str(tmp_path / "only"), "--embedding", "oracle_speaker",
                 "--out", str(tmp_path / "miss")]) == 2


def test_report_and_rerun(work, tmp_path):
    root, cfg = work
    corpus = str(root / "corpus")
    sat = tmp_path / "sat"
    assert main(["train", "--sat", "--config", cfg, "--corpus", corpus, "--si-checkpoint", str(root / "si"),
                 "--mechanism", "control_network", "--mode", "both", "--site", "hidden", "--name", "net-hid",
                 "--out", str(sat)]) == 0
    spk = tmp_path / "spk"
    assert main(["eval-spk", "--config", cfg, "--corpus", corpus, "--embedding", "oracle_full", "--out", str(spk)]) == 0

    assert main(["report", str(root / "si"), "--out", str(tmp_path / "one")]) == 0
    assert len(_rows(tmp_path / "one" / "asr_table.csv")) == 1

    assert main(["report", str(root / "si"), str(sat), str(spk), "--out", str(tmp_path / "rep")]) == 0
    table = _rows(tmp_path / "rep" / "asr_table.csv")
    assert {r["experiment"] for r in table} == {"si-cmn", "net-hid"}
    si_row = next(r for r in table if r["experiment"] == "si-cmn")
    assert si_row["rel_gain"] == "0.0000"
    for f in ("fer_curves.csv", "eer_table.csv", "eer_curves.csv", "asr_comparison.png", "fer_curves.png", "eer_curves.png"):
        assert (tmp_path / "rep" / f).stat().st_size > 0

    # duplicate names and foreign corpora are refused
    assert main(["report", str(root / "si"), str(root / "si"), "--out", str(tmp_path / "dup")]) == 2
    other = tmp_path / "other.ini"
    other.write_text(TINY.replace("seed = 3", "seed = 4"))
    assert main(["gen-data", "--config", str(other), "--out", str(tmp_path / "oc")]) == 0
    assert main(["eval-spk", "--config", str(other), "--corpus", str(tmp_path / "oc"), "--out", str(tmp_path / "ospk")]) == 0
    assert main(["report", str(root / "si"), str(tmp_path / "ospk"), "--out", str(tmp_path / "mixed")]) == 2

    # every CSV is reproduced byte for byte from the manifests alone
    for run, files in ((root / "si", ["report.csv", "model.bin"]), (sat, ["report.csv", "model.bin"]),
                       (spk, ["eer.csv", "trials.txt", "scores/plda.txt"])):
        again = tmp_path / ("re-" + run.name)
        assert main(["rerun", str(run), "--out", str(again)]) == 0
        for f in files:
            assert (again / f).read_bytes() == (run / f).read_bytes(), f
