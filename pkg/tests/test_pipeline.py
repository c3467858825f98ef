import dataclasses
import json
from pathlib import Path

import pytest

from unlearnlab import cli
from unlearnlab import model as MD
from unlearnlab import pipeline as P

SMOKE = Path(__file__).resolve().parents[1] / "configs" / "smoke.json"


def smoke_config() -> P.PipelineConfig:
    return P.load_config(SMOKE)


@pytest.fixture(scope="module")
def finished(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert cli.main(["all", "--config", str(SMOKE), "--out", str(out)]) == 0
    return out


def _tree(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_all_stages_done_and_outputs_present(finished):
    m = json.loads((finished / "manifest.json").read_text())
    assert {s: v["status"] for s, v in m["stages"].items()} == {s: "done" for s in P.STAGES}
    for rel in ("corpus.jsonl", "pretrain/model.ckpt", "unlearn/GA/model.ckpt", "unlearn/SSIUU/trace.json",
                "analyze/GA/top_m_minus.csv", "analyze/GA/grid_plus.csv", "analyze/SSIUU/lens.csv",
                "attack/GA/attacks.json", "attack/GA/harmful_p0.3_distribution.csv", "summary.csv", "report.json"):
        assert (finished / rel).is_file(), rel
    header = (finished / "summary.csv").read_text().splitlines()[0].split(",")
    assert tuple(header) == P.SUMMARY_COLUMNS


def test_same_config_twice_is_byte_identical(finished, tmp_path):
    assert cli.main(["all", "--config", str(SMOKE), "--out", str(tmp_path)]) == 0
    a, b = _tree(finished), _tree(tmp_path)
    assert a.keys() == b.keys()
    assert [k for k in a if a[k] != b[k]] == []


def test_report_values_recomputable(finished):
    cfg = smoke_config()
    run = P.Run(cfg, finished)
    from unlearnlab import metrics

    rep = json.loads((finished / "report.json").read_text())
    assert rep["config_hash"] == cfg.hash() and rep["seed"] == cfg.seed
    for method in run.methods():
        s = metrics.score(run.unlearned(method), run.splits)
        assert rep["methods"][method]["scores"]["fs"] == s.fs
        assert rep["methods"][method]["scores"]["rs"] == s.rs
        an = rep["methods"][method]["analysis"]
        assert an["clamps_nonnegative"] is True
        att = rep["methods"][method]["attacks"]["harmful_p0.3"]
        assert att["disjoint"] is True


def test_resume_skips_completed_stages(tmp_path):
    cfg = smoke_config()
    run = P.Run(cfg, tmp_path)
    assert run.execute(("pretrain",)) == 0
    ckpt = tmp_path / "pretrain" / "model.ckpt"
    stamp = ckpt.stat().st_mtime_ns
    assert set(run.manifest()["stages"]) == {"generate", "pretrain"}
    assert run.execute(("pretrain",)) == 0
    assert ckpt.stat().st_mtime_ns == stamp
    assert run.execute(("pretrain",), force=True) == 0
    assert ckpt.stat().st_mtime_ns != stamp


def test_stage_failure_skips_dependents(tmp_path, monkeypatch):
    run = P.Run(smoke_config(), tmp_path)

    def boom():
        raise RuntimeError("disk on fire")

    monkeypatch.setattr(run, "stage_pretrain", boom)
    assert run.execute(P.STAGES) == 1
    st = run.manifest()["stages"]
    assert st["generate"]["status"] == "done"
    assert st["pretrain"]["status"] == "failed" and "disk on fire" in st["pretrain"]["detail"]
    assert all(st[s]["status"] == "skipped" for s in ("unlearn", "analyze", "attack", "report"))


def test_changed_config_refuses_reuse(finished):
    cfg = dataclasses.replace(smoke_config(), seed=9)
    with pytest.raises(P.ConfigError, match="different config"):
        P.Run(cfg, finished).execute(("report",))


def test_hash_ignores_out_dir_and_survives_round_trip(tmp_path):
    cfg = smoke_config()
    assert dataclasses.replace(cfg, out_dir="elsewhere").hash() == cfg.hash()
    assert dataclasses.replace(cfg, seed=1).hash() != cfg.hash()
    P.save_config(cfg, tmp_path / "c.json")
    back = P.load_config(tmp_path / "c.json")
    assert back == cfg and back.hash() == cfg.hash()


def test_default_config_round_trip():
    cfg = P.default_config()
    assert [u.method for u in cfg.unlearn] == ["GA", "GD", "DPO", "NPO", "RMU", "SSIUU"]
    assert P.config_from_dict(json.loads(cfg.canonical())) == cfg


@pytest.mark.parametrize("patch,match", [
    ({"bogus": 1}, "unknown field"),
    ({"model": {"d_modle": 8}}, r"model: unknown field\(s\) \['d_modle'\]"),
    ({"unlearn": [{"method": "GA"}, {"method": "GA"}]}, "duplicate"),
    ({"unlearn": [{"method": "XYZ"}]}, r"unlearn\[0\]"),
    ({"attacks": [{"kind": "harmful", "p": 2.0}]}, r"attacks\[0\]"),
    ({"version": 99}, "version"),
    ({"seed": "zero"}, "seed"),
])
def test_validation_errors_name_the_field(patch, match):
    data = {**json.loads(SMOKE.read_text()), **patch}
    with pytest.raises(P.ConfigError, match=match):
        P.config_from_dict(data)


def test_sub_seeds_are_stable_and_distinct():
    assert P.sub_seed(0, "corpus") == P.sub_seed(0, "corpus")
    assert len({P.sub_seed(0, n) for n in ("corpus", "init", "pretrain", "benign")}) == 4


def test_cli_invalid_config_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"model": {"width": 3}}))
    assert cli.main(["generate", "--config", str(bad), "--out", str(tmp_path / "r")]) == 2
    assert "model: unknown field" in capsys.readouterr().err
    bad.write_text("{not json")
    assert cli.main(["generate", "--config", str(bad), "--out", str(tmp_path / "r")]) == 2


def test_cli_report_on_empty_directory(tmp_path, capsys):
    assert cli.main(["report", "--out", str(tmp_path)]) == 1
    assert "no runs found" in capsys.readouterr().out


def test_cli_report_rerenders_summary(finished, capsys):
    assert cli.main(["report", "--out", str(finished)]) == 0
    assert capsys.readouterr().out == (finished / "summary.csv").read_text()


def test_cli_default_config(tmp_path):
    assert cli.main(["default-config", "--out", str(tmp_path / "d.json")]) == 0
    assert P.load_config(tmp_path / "d.json") == P.default_config()
