import csv
import json

import pytest
import yaml

from unifier import cli
from unifier.config import RunConfig, config_from_dict, config_from_yaml, set_override
from unifier.exceptions import ConfigError, IntegrityError
from unifier.harness import RunRecord, aggregate
from unifier.synth import generate_samples

TINY = ["--depth", "2", "--d1", "16", "--d2", "4", "--heads", "2", "--c-max", "8", "--epochs-initial", "1",
        "--epochs-later", "1", "--n-train", "8", "--n-test", "4", "--pretrain-samples", "16",
        "--pretrain-epochs", "1", "--set", "model.hidden=16"]


# -- config ------------------------------------------------------------------------


def test_yaml_round_trip_is_lossless():
    cfg = set_override(RunConfig(), "vcc.tau", "3.5")
    back = config_from_yaml(cfg.to_yaml())
    assert back == cfg
    assert back.digest() == cfg.digest()


def test_defaults_validate():
    cfg = RunConfig().validate()
    assert cfg.vcc.tau == 2.0 and cfg.vcc.lambda_vcc == 1.0 and cfg.T == 4


@pytest.mark.parametrize(
    "data,field",
    [({"T": 6}, "T"), ({"model": {"depth": "deep"}}, "model.depth"), ({"colour": 1}, "colour"),
     ({"vcc": {"tau": -1.0}}, "vcc.tau"), ({"data": {"scenarios": ["S1", "S9"]}}, "data.scenarios"),
     ({"model": {"d1": 30}}, "model.heads"), ({"schedule": {"warmup_frac": 1.5}}, "schedule.warmup_frac")],
)
def test_invalid_configs_name_their_field(data, field):
    with pytest.raises(ConfigError) as exc:
        config_from_dict(data).validate()
    assert exc.value.field == field


def test_unknown_override_key():
    with pytest.raises(ConfigError):
        set_override(RunConfig(), "model.width", "3")


# -- CLI ---------------------------------------------------------------------------


def test_print_config_echoes_flags(capsys):
    assert cli.main(["train", "--print-config", "--tau", "4", "--set", "data.n_test=7"]) == 0
    data = yaml.safe_load(capsys.readouterr().out)
    assert data["vcc"]["tau"] == 4.0 and data["data"]["n_test"] == 7


def test_out_flag_beats_env_beats_config(monkeypatch, capsys, tmp_path):
    conf = tmp_path / "c.yaml"
    conf.write_text("out_dir: from-config\n")
    base = ["train", "--print-config", "--config", str(conf)]
    monkeypatch.delenv("UNIFIER_OUT", raising=False)
    cli.main(base)
    assert yaml.safe_load(capsys.readouterr().out)["out_dir"] == "from-config"
    monkeypatch.setenv("UNIFIER_OUT", "from-env")
    cli.main(base)
    assert yaml.safe_load(capsys.readouterr().out)["out_dir"] == "from-env"
    cli.main(base + ["--out", "from-flag"])
    assert yaml.safe_load(capsys.readouterr().out)["out_dir"] == "from-flag"


def test_config_errors_exit_2_with_field(capsys):
    assert cli.main(["train", "--T", "6"]) == 2
    assert "[field: T]" in capsys.readouterr().err
    assert cli.main(["train", "--config", "/nonexistent.yaml"]) == 2
    assert cli.main([]) == 2


def test_internal_faults_exit_3(monkeypatch, capsys):
    def broken(*_args, **_kw):
        raise IntegrityError("projector width drifted")

    monkeypatch.setattr(cli, "_run_one", broken)
    assert cli.main(["train", *TINY]) == 3
    assert "internal error" in capsys.readouterr().err


def test_generate_writes_jsonl_and_manifest(monkeypatch, tmp_path, capsys):
    monkeypatch.setenv("UNIFIER_OUT", str(tmp_path))
    assert cli.main(["generate", "--n-train", "3", "--n-test", "2"]) == 0
    manifest = json.loads((tmp_path / "data" / "manifest.json").read_text())
    assert set(manifest["scenarios"]) == {"S1", "S2", "S3", "S4"}
    lines = (tmp_path / "data" / "S2" / "train.jsonl").read_text().splitlines()
    assert len(lines) == 3 and json.loads(lines[0])["scenario"] == "S2"


def test_train_from_generated_dataset(tmp_path, capsys):
    assert cli.main(["generate", "--out", str(tmp_path), "--n-train", "8", "--n-test", "4"]) == 0
    args = ["train", *TINY, "--out", str(tmp_path), "--dataset-dir", str(tmp_path / "data")]
    assert cli.main(args) == 0
    assert RunRecord.from_csv(tmp_path / "runs" / "unifier-seed0.csv").steps == [1, 2, 3, 4]


def records_file(tmp_path, corrupt=None):
    recs = []
    for s in generate_samples("S1", 2, 0, 1):
        for q, gt in s.questions:
            recs.append({"sample_id": s.sample_id, "scenario": "S1", "kind": q.kind,
                         "prediction": gt, "ground_truth": gt})
    if corrupt:
        corrupt(recs)
    path = tmp_path / "records.json"
    path.write_text(json.dumps({"records": recs}))
    return path


def test_score_writes_json_and_csv(tmp_path, capsys):
    path = records_file(tmp_path)
    assert cli.main(["score", str(path), "--out", str(tmp_path / "o")]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["scenarios"]["S1"]["vqa"] == 100.0 and report["scenarios"]["S1"]["f1"] == 100.0
    assert json.loads((tmp_path / "o" / "score.json").read_text()) == report
    with open(tmp_path / "o" / "score.csv", newline="") as fh:
        assert next(csv.reader(fh)) == ["scenario", "n", "vqa", "f1"]


@pytest.mark.parametrize(
    "corrupt,pointer",
    [(lambda r: r[0].pop("kind"), "/records/0/kind"),
     (lambda r: r[1].__setitem__("kind", "caption"), "/records/1/kind"),
     (lambda r: r[0].__setitem__("prediction", -2), "/records/0/prediction"),
     (lambda r: r[3]["prediction"].append([5, 5, 1, 1, 0, 0.5]), "/records/3/prediction/")],
)
def test_score_schema_errors_point_at_the_record(tmp_path, capsys, corrupt, pointer):
    path = records_file(tmp_path, corrupt)
    assert cli.main(["score", str(path)]) == 2
    assert pointer in capsys.readouterr().err


def test_score_rejects_broken_json(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text("{")
    assert cli.main(["score", str(path)]) == 2


def test_report_charts_summary_and_determinism(tmp_path, capsys):
    for mode in ("unifier", "finetune"):
        assert cli.main(["train", *TINY, "--mode", mode, "--out", str(tmp_path)]) == 0
    records = sorted(str(p) for p in (tmp_path / "runs").glob("*-seed0.csv"))
    assert cli.main(["report", *records, "--out", str(tmp_path / "r1")]) == 0
    assert cli.main(["report", *records, "--out", str(tmp_path / "r2")]) == 0
    svgs = sorted(p.name for p in (tmp_path / "r1").glob("*.svg"))
    assert len(svgs) == 8
    for name in svgs + ["summary.csv"]:
        assert (tmp_path / "r1" / name).read_bytes() == (tmp_path / "r2" / name).read_bytes()
    with open(tmp_path / "r1" / "summary.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    rec = RunRecord.from_csv(records[0])
    mean, last = aggregate(rec)
    for row in rows:
        if row["mode"] == rec.mode:
            assert float(row["average"]) == mean[row["scenario"]][row["metric"]]
            assert float(row["last"]) == last[row["scenario"]][row["metric"]]


def test_report_missing_file_exits_2(tmp_path, capsys):
    assert cli.main(["report", str(tmp_path / "none.csv")]) == 2
