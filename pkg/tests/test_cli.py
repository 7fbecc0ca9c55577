"""End-to-end command-line behavior and exit codes."""

import json
import os

import pytest

from avdoc import cli

MICRO_CFG = """\
model.d_enc=16
model.d_llm=16
model.n_heads=2
model.n_enc_layers=1
model.n_dec_layers=1
model.n_query=2
train.epochs=1
train.batch_size=64
corpus.n_subvideos=12
corpus.domain_count=3
corpus.qa_per_subvideo=3
split.train=0.7
split.val=0.15
split.test=0.15
"""


@pytest.fixture()
def micro_cfg(tmp_path):
    path = tmp_path / "micro.cfg"
    path.write_text(MICRO_CFG)
    return str(path)


def run(*argv):
    return cli.main(list(argv))


def test_gen_writes_manifest_splits_and_record(tmp_path, micro_cfg):
    out = str(tmp_path / "corpus.jsonl")
    assert run("gen", "--config", micro_cfg, "--out", out) == 0
    assert os.path.exists(out)
    for part in ("train", "val", "test"):
        assert os.path.exists(str(tmp_path / f"corpus.{part}.jsonl"))
    record = json.loads((tmp_path / "corpus.run.json").read_text())
    assert record["command"][0] == "avdoc"
    assert record["format_versions"]["manifest"] == 1
    assert any(p.endswith("corpus.jsonl") for p in record["artifacts"])


def test_gen_is_byte_deterministic(tmp_path, micro_cfg):
    a = tmp_path / "a.jsonl"
    b = tmp_path / "b.jsonl"
    assert run("gen", "--config", micro_cfg, "--out", str(a)) == 0
    assert run("gen", "--config", micro_cfg, "--out", str(b)) == 0
    assert a.read_bytes() == b.read_bytes()
    assert (tmp_path / "a.train.jsonl").read_bytes() == \
           (tmp_path / "b.train.jsonl").read_bytes()


def test_gen_seed_flag_overrides_config(tmp_path, micro_cfg):
    a = tmp_path / "a.jsonl"
    b = tmp_path / "b.jsonl"
    assert run("gen", "--config", micro_cfg, "--out", str(a), "--seed", "5") == 0
    assert run("gen", "--config", micro_cfg, "--out", str(b)) == 0
    assert a.read_bytes() != b.read_bytes()


def test_full_cli_pipeline(tmp_path, micro_cfg):
    manifest = str(tmp_path / "c.jsonl")
    assert run("gen", "--config", micro_cfg, "--out", manifest) == 0

    ckpt_dir = str(tmp_path / "run")
    assert run("train", "--config", micro_cfg, "--data", manifest,
               "--out", ckpt_dir, "--merge") == 0
    for name in ("S1_VISION.ckpt", "S1_AUDIO.ckpt", "S2_ALIGN.ckpt",
                 "S3_FUSION.ckpt", "final.ckpt", "merged.ckpt", "run.json"):
        assert os.path.exists(os.path.join(ckpt_dir, name)), name

    report_path = str(tmp_path / "report.json")
    assert run("eval", "--config", micro_cfg,
               "--data", str(tmp_path / "c.test.jsonl"),
               "--ckpt", os.path.join(ckpt_dir, "final.ckpt"),
               "--out", report_path) == 0
    report = json.loads(open(report_path).read())
    assert set(report) == {"threshold", "n", "overall", "per_domain",
                           "per_category", "histogram"}
    assert os.path.exists(report_path + ".run.json")

    assert run("report", "--in", report_path) == 0
    assert run("report", "--in", report_path, "--format", "json") == 0

    # The merged checkpoint evaluates identically under the default tag.
    report2 = str(tmp_path / "report2.json")
    assert run("eval", "--config", micro_cfg,
               "--data", str(tmp_path / "c.test.jsonl"),
               "--ckpt", os.path.join(ckpt_dir, "merged.ckpt"),
               "--out", report2) == 0


def test_train_rejects_double_skip(tmp_path, micro_cfg):
    manifest = str(tmp_path / "c.jsonl")
    assert run("gen", "--config", micro_cfg, "--out", manifest) == 0
    code = run("train", "--config", micro_cfg, "--data", manifest,
               "--out", str(tmp_path / "run"), "--skip", "s2", "--skip", "s3")
    assert code == 2


def test_train_single_skip_runs_ablation(tmp_path, micro_cfg):
    manifest = str(tmp_path / "c.jsonl")
    assert run("gen", "--config", micro_cfg, "--out", manifest) == 0
    ckpt_dir = tmp_path / "ablate"
    assert run("train", "--config", micro_cfg, "--data", manifest,
               "--out", str(ckpt_dir), "--skip", "s2") == 0
    meta = json.loads((ckpt_dir / "final.ckpt.meta.json").read_text())
    assert meta["lineage"] == ["S1_VISION", "S1_AUDIO", "S3_FUSION"]
    assert meta["ablation"] == "S2"


def test_train_out_of_order_stages_exit_2(tmp_path, micro_cfg):
    manifest = str(tmp_path / "c.jsonl")
    assert run("gen", "--config", micro_cfg, "--out", manifest) == 0
    assert run("train", "--config", micro_cfg, "--data", manifest,
               "--out", str(tmp_path / "x"), "--stages", "s3,s1") == 2
    assert run("train", "--config", micro_cfg, "--data", manifest,
               "--out", str(tmp_path / "x"), "--stages", "s9") == 2


def test_bad_config_exit_2(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("no.such.key=1\n")
    assert run("gen", "--config", str(bad), "--out", str(tmp_path / "m.jsonl")) == 2


def test_malformed_manifest_exit_3(tmp_path, micro_cfg):
    bad = tmp_path / "bad.jsonl"
    bad.write_text("{}\n")
    assert run("train", "--config", micro_cfg, "--data", str(bad),
               "--out", str(tmp_path / "x")) == 3


def test_malformed_report_exit_3(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{rotten")
    assert run("report", "--in", str(bad)) == 3
    bad.write_text('{"threshold": 0.8}')
    assert run("report", "--in", str(bad)) == 3


def test_missing_checkpoint_exit_3(tmp_path, micro_cfg):
    manifest = str(tmp_path / "c.jsonl")
    assert run("gen", "--config", micro_cfg, "--out", manifest) == 0
    fake = tmp_path / "fake.ckpt"
    fake.write_bytes(b"not a checkpoint at all")
    assert run("eval", "--config", micro_cfg, "--data", manifest,
               "--ckpt", str(fake), "--out", str(tmp_path / "r.json")) == 3


def test_gradcheck_passes_and_prints_per_op(capsys):
    assert run("gradcheck", "--seeds", "1") == 0
    out = capsys.readouterr().out
    lines = [l for l in out.splitlines() if l.strip()]
    assert any(l.startswith("matmul") for l in lines)
    assert any(l.startswith("attention_causal") for l in lines)
    assert any(l.startswith("stage2_contrastive_loss") for l in lines)
    assert any(l.startswith("stage3_fusion_loss") for l in lines)
    assert lines[-1].startswith("max")


def test_usage_errors_exit_2():
    with pytest.raises(SystemExit) as exc:
        cli.main(["definitely-not-a-command"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        cli.main(["gen"])  # --out is required
    assert exc.value.code == 2
