import json

import pytest

from fgam import cli, evaluation
from fgam.corpus import read_corpus
from fgam.neural import load

SMALL = """\
# tiny run for tests
corpus.n_malware = 16
corpus.n_benign = 16
image.epochs = 6
byteseq.epochs = 3
attack.max_samples = 3
evaluate.rates = 0.1,0.5
evaluate.checkpoints = 0,20
"""


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    config = root / "small.cfg"
    config.write_text(SMALL)
    out = root / "run"
    common = ["--config", str(config), "--out", str(out)]
    codes = [
        cli.run(["gen-corpus", *common]),
        cli.run(["train", *common]),
        cli.run(["attack", *common, "--rate", "0.1", "--method", "padding", "-T", "20"]),
        cli.run(["attack", *common, "--rate", "0.5", "--method", "padding", "-T", "20"]),
        cli.run(["evaluate", *common]),
        cli.run(["stats", *common, "--cohorts", "orig,adv10,adv50"]),
    ]
    return out, common, codes


def test_pipeline_exit_codes(pipeline):
    assert pipeline[2] == [0] * 6


def test_pipeline_artifacts(pipeline):
    out = pipeline[0]
    assert (out / "corpus" / "manifest.tsv").exists()
    assert len(read_corpus(out / "corpus")) == 32
    assert (out / "models" / "image.ckpt").exists() and (out / "models" / "byteseq.ckpt").exists()
    attack_dir = out / "attack" / "padding_0p1"
    traces = [json.loads(line) for line in (attack_dir / "traces.jsonl").read_text().splitlines()]
    assert len(traces) == 3
    for row in traces:
        assert (attack_dir / f"{row['sample_id']}.adv").exists()
        assert (attack_dir / f"{row['sample_id']}.adv.json").exists()


def test_reports_carry_hashes(pipeline):
    out = pipeline[0]
    texts = [(out / "reports" / name).read_text() for name in ("evaluate.txt", "stats.txt")]
    texts.append((out / "models" / "train.txt").read_text())
    texts.append((out / "attack" / "padding_0p1" / "summary.txt").read_text())
    for text in texts:
        assert "# config_hash: " in text and "# corpus_manifest_hash: " in text
    hashes = {line for text in texts for line in text.splitlines() if "_hash" in line}
    assert len(hashes) == 2


def test_evaluate_report_contents(pipeline):
    text = (pipeline[0] / "reports" / "evaluate.txt").read_text()
    assert "MR(0)\tMR(20)" in text
    assert "padding\t0.1\t" in text and "padding\t0.5\t" in text
    assert "transfer (byte-sequence model)" in text
    rows = [json.loads(line) for line in (pipeline[0] / "reports" / "evaluate.jsonl").read_text().splitlines()]
    assert {r["cohort"] for r in rows} == {"adv10", "adv50"}


def test_stats_cohorts(pipeline):
    lines = (pipeline[0] / "reports" / "stats.txt").read_text().splitlines()
    names = [line.split("\t")[0] for line in lines if not line.startswith("#")][1:]
    assert names == ["orig", "adv10", "adv50", "benign"]


def test_rerun_is_identical(pipeline, tmp_path):
    out, common, _ = pipeline
    before = (out / "attack" / "padding_0p1" / "traces.jsonl").read_bytes()
    report = (out / "reports" / "evaluate.txt").read_text()
    assert cli.run(["attack", *common, "--rate", "0.1", "--method", "padding", "-T", "20"]) == 0
    assert cli.run(["evaluate", *common]) == 0
    assert (out / "attack" / "padding_0p1" / "traces.jsonl").read_bytes() == before
    assert (out / "reports" / "evaluate.txt").read_text() == report


def test_undetected_explicit_file_is_precondition_error(pipeline, capsys):
    out, common, _ = pipeline
    model = load(out / "models" / "image.ckpt")
    samples = read_corpus(out / "corpus")
    scores = evaluation.score_files(model, [s.data for s in samples])
    lowest = min(zip(scores, samples), key=lambda p: p[0])
    assert lowest[0] < 0.5
    path = out / "corpus" / f"{lowest[1].id}.exe"
    before = sorted(p.name for p in (out / "attack").rglob("*"))
    assert cli.run(["attack", *common, str(path)]) == 3
    assert sorted(p.name for p in (out / "attack").rglob("*")) == before
    assert "error:" in capsys.readouterr().err


def test_dump_images(pipeline, tmp_path):
    out, common, _ = pipeline
    assert cli.run(["attack", *common, "--dump-images"]) == 0
    pgms = sorted((out / "attack" / "padding_0p1" / "images").glob("*.pgm"))
    assert len(pgms) == 9
    assert pgms[0].read_bytes().startswith(b"P5")


def test_unknown_flag_is_usage_error(tmp_path):
    assert cli.run(["attack", "--out", str(tmp_path), "--bogus"]) == 1


def test_unknown_subcommand_is_usage_error():
    assert cli.run(["explode"]) == 1


def test_unknown_config_key_is_usage_error(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("attack.rate = 0.1\nattack.nonsense = 3\n")
    assert cli.run(["gen-corpus", "--config", str(cfg), "--out", str(tmp_path)]) == 1
    assert cli.run(["gen-corpus", "--set", "no.such.key=1", "--out", str(tmp_path)]) == 1
    assert cli.run(["gen-corpus", "--set", "attack.rate=abc", "--out", str(tmp_path)]) == 1


def test_missing_prerequisites_are_precondition_errors(tmp_path):
    assert cli.run(["evaluate", "--out", str(tmp_path)]) == 3
    assert cli.run(["train", "--out", str(tmp_path)]) == 3


def test_unreadable_input_is_data_error(pipeline, tmp_path):
    out, common, _ = pipeline
    assert cli.run(["attack", *common, str(tmp_path / "missing.exe")]) == 2
    junk = tmp_path / "junk.exe"
    junk.write_bytes(b"not a pe file at all")
    assert cli.run(["attack", *common, str(junk)]) == 2


def test_flags_override_config_file(tmp_path):
    cfg = tmp_path / "a.cfg"
    cfg.write_text("seed = 5\nattack.rate = 0.2\ncorpus.n_malware = 2\ncorpus.n_benign = 2\n")
    out = tmp_path / "o"
    assert cli.run(["gen-corpus", "--config", str(cfg), "--out", str(out), "--seed", "7",
                    "--set", "corpus.n_benign=3"]) == 0
    text = (out / "config.txt").read_text()
    assert "seed = 7" in text.splitlines()
    assert "attack.rate = 0.2" in text.splitlines()
    assert "corpus.n_benign = 3" in text.splitlines()
    assert len(read_corpus(out / "corpus")) == 5


def test_config_hash_tracks_values_not_output_dir(tmp_path):
    a = cli.RunConfig({"seed": 1}, tmp_path / "x")
    b = cli.RunConfig({"seed": 1}, tmp_path / "y")
    c = cli.RunConfig({"seed": 2}, tmp_path / "x")
    assert a.hash == b.hash != c.hash
    assert len(a.hash) == 16


def test_rendered_config_parses_back():
    cfg = cli.RunConfig({"attack.epsilon": 8.0, "evaluate.rates": (0.05, 0.5)}, "run")
    assert cli.parse_config_text(cfg.text, "rendered") == cfg.values
