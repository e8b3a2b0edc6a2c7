import json
import os

import pytest

from dpq import cli
from dpq import quant as Q


TEST_CONFIG = {
    "model": {"n_blocks": 2, "d_model": 32, "n_heads": 4, "d_ff": 64,
              "vocab": 256, "seq_cap": 128},
    "target_bits": [4.0],
    "fit": {"epochs": 1},
    "estimator": {"k": 8},
    "calib": {"seq_len": 20, "n_samples": 4},
    "eval": {"seq_len": 24, "n_samples": 2, "n_queries": 3, "offset": 1024},
    "corpus_gen": {"seed": 0, "n_chars": 4096},
}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg_path = str(d / "config.json")
    cfg = dict(TEST_CONFIG)
    cfg["paths"] = {
        "weights": str(d / "weights.json"),
        "corpus": str(d / "toy.txt"),
        "store": str(d / "model.dpqs"),
        "profile": str(d / "model.dpqp"),
        "plan_dir": str(d / "plans"),
        "report_dir": str(d / "reports"),
    }
    with open(cfg_path, "w") as f:
        json.dump(cfg, f)
    for command in ("init", "quantize", "profile"):
        assert cli.main(["--config", cfg_path, command]) == 0
    return d, cfg_path, cfg


def test_quantize_idempotent(workdir):
    d, cfg_path, cfg = workdir
    h1 = Q.file_hash(cfg["paths"]["store"])
    assert cli.main(["--config", cfg_path, "quantize"]) == 0
    assert Q.file_hash(cfg["paths"]["store"]) == h1


def test_plan_all_methods(workdir):
    d, cfg_path, cfg = workdir
    for method in ("dp", "llm_mq", "hawq_v2"):
        assert cli.main(["--config", cfg_path, "plan",
                         "--method", method]) == 0
        assert os.path.exists(os.path.join(cfg["paths"]["plan_dir"],
                                           f"{method}_t4.json"))


def test_eval_reports_rows(workdir, capsys):
    d, cfg_path, cfg = workdir
    plan = os.path.join(cfg["paths"]["plan_dir"], "dp_t4.json")
    out = str(d / "eval.json")
    assert cli.main(["--config", cfg_path, "eval", "--fp", plan,
                     "--out", out]) == 0
    doc = json.load(open(out))
    assert doc["schema"] == cli.REPORT_SCHEMA
    methods = [r["method"] for r in doc["rows"]]
    assert methods == ["fp", "dp"]
    assert doc["rows"][1]["plan_hash"] == Q.file_hash(plan)


def test_decode_outputs_json(workdir, capsys):
    d, cfg_path, cfg = workdir
    plan = os.path.join(cfg["paths"]["plan_dir"], "dp_t4.json")
    trace = str(d / "trace.csv")
    assert cli.main(["--config", cfg_path, "decode", "--plan", plan,
                     "--prompt", "the unit", "--n-new", "4",
                     "--trace", trace]) == 0
    out = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert len(out["tokens"]) == 4
    assert os.path.exists(trace)


def test_report_grid(workdir):
    d, cfg_path, cfg = workdir
    assert cli.main(["--config", cfg_path, "report",
                     "--methods", "dp,llm_mq", "--targets", "4.0"]) == 0
    doc = json.load(open(os.path.join(cfg["paths"]["report_dir"],
                                      "report.json")))
    rows = doc["rows"]
    assert {(r["method"], r["target"]) for r in rows} == \
        {("dp", 4.0), ("llm_mq", 4.0)}
    dp_row = next(r for r in rows if r["method"] == "dp")
    assert "perplexity_exact_est" in dp_row
    assert "qos_p90_delta_pct" in dp_row
    assert dp_row["incurred_error_dynamic"] <= \
        dp_row["incurred_error_matched_static"] + 1e-9
    csv_path = os.path.join(cfg["paths"]["report_dir"], "report.csv")
    header = open(csv_path).readline().strip().split(",")
    assert header == cli._REPORT_COLUMNS


def test_missing_artifact_is_config_error(workdir, tmp_path):
    d, cfg_path, cfg = workdir
    bad = dict(cfg)
    bad["paths"] = dict(cfg["paths"], store=str(tmp_path / "missing.dpqs"))
    bad_path = str(tmp_path / "bad.json")
    with open(bad_path, "w") as f:
        json.dump(bad, f)
    assert cli.main(["--config", bad_path, "plan"]) == cli.EXIT_CONFIG


def test_bad_config_json(tmp_path):
    p = str(tmp_path / "cfg.json")
    with open(p, "w") as f:
        f.write("{nope")
    assert cli.main(["--config", p, "quantize"]) == cli.EXIT_CONFIG


def test_bad_quant_range(tmp_path):
    p = str(tmp_path / "cfg.json")
    with open(p, "w") as f:
        json.dump({"quant": {"n_bits": 2, "b_min": 6}}, f)
    assert cli.main(["--config", p, "quantize"]) == cli.EXIT_CONFIG


def test_infeasible_target_exit_code(workdir, tmp_path):
    d, cfg_path, cfg = workdir
    assert cli.main(["--config", cfg_path, "plan", "--method", "dp",
                     "--target", "2.0"]) == cli.EXIT_INFEASIBLE


def test_provenance_mismatch_exit_code(workdir, tmp_path):
    d, cfg_path, cfg = workdir
    plan_path = os.path.join(cfg["paths"]["plan_dir"], "dp_t4.json")
    doc = json.load(open(plan_path))
    doc["store_hash"] = "0" * 64
    tampered = str(tmp_path / "tampered.json")
    with open(tampered, "w") as f:
        json.dump(doc, f)
    assert cli.main(["--config", cfg_path, "eval", tampered]) == \
        cli.EXIT_PROVENANCE


def test_default_alpha_rule():
    assert cli.default_alpha(3.25) == 10.0
    assert cli.default_alpha(3.5) == 1.0
    assert cli.default_alpha(4.0) == 1.0
