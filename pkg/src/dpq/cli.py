"""Command-line pipeline: quantize -> profile -> plan -> eval / decode / report.

One JSON config file drives everything; individual flags override config
values. Every artifact embeds the hashes of its inputs and eval/decode refuse
to run across a mismatched chain. Exit codes: 0 success, 2 config error,
3 infeasible plan, 4 provenance mismatch.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys

import numpy as np

from . import model as M
from . import quant as Q
from . import sensitivity as S
from . import allocator as A
from . import fitter as F
from . import estimator as E
from . import runtime as R
from . import planner as P
from . import corpus as C

REPORT_SCHEMA = "dpq-report-v1"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3
EXIT_PROVENANCE = 4


class ConfigError(Exception):
    pass


DEFAULT_CONFIG = {
    "paths": {
        "weights": "artifacts/weights.json",
        "corpus": "data/toy.txt",
        "store": "artifacts/model.dpqs",
        "profile": "artifacts/model.dpqp",
        "plan_dir": "artifacts/plans",
        "report_dir": "artifacts/reports",
    },
    "model": {"n_blocks": 2, "d_model": 32, "n_heads": 4, "d_ff": 64,
              "vocab": 256, "seq_cap": 256, "norm_eps": 1e-6},
    "seed": 0,
    "quant": {"n_bits": 6, "b_min": 3},
    "budget_bits": 5.0,
    "target_bits": [3.25, 3.5, 4.0, 4.5],
    "fit": {"epochs": 5, "lr": 0.01, "alpha": None, "batch_size": 2,
            "seed": 0},
    "estimator": {"mode": "hybrid", "k": 64, "seed": 0, "r2_gate": 0.9,
                  "calibrate": True, "use_async": False},
    "calib": {"seq_len": 32, "n_samples": 8, "seed": 0},
    "eval": {"seq_len": 48, "n_samples": 4, "n_queries": 10, "offset": 4096},
    "corpus_gen": {"seed": 0, "n_chars": 16384},
}


def default_alpha(target_bits: float) -> float:
    """Regularizer weight: 1 everywhere, raised to 10 for the lowest 3.25
    target where the penalty needs more pull against the loss term."""
    return 10.0 if abs(target_bits - 3.25) < 1e-9 else 1.0


def _deep_update(base: dict, over: dict) -> dict:
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _deep_update(base[k], v)
        else:
            base[k] = v
    return base


def load_config(path: str | None, overrides: dict | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            with open(path) as f:
                user = json.load(f)
        except OSError as e:
            raise ConfigError(f"cannot read config: {e}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}")
        if not isinstance(user, dict):
            raise ConfigError("config root must be a JSON object")
        _deep_update(cfg, user)
    if overrides:
        _deep_update(cfg, overrides)
    q = cfg["quant"]
    if not (2 <= q["b_min"] <= q["n_bits"] <= 8):
        raise ConfigError(f"quant bits out of range: {q}")
    if cfg["estimator"]["mode"] not in ("hybrid", "exact", "projection"):
        raise ConfigError(f"unknown estimator mode {cfg['estimator']['mode']!r}")
    return cfg


def _model_config(cfg) -> M.ModelConfig:
    try:
        return M.ModelConfig.from_dict(cfg["model"])
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad model config: {e}")


def _require(path: str, what: str) -> str:
    if not os.path.exists(path):
        raise ConfigError(f"{what} not found: {path}")
    return path


def _load_weights(cfg) -> M.ModelWeights:
    return M.load_weights(_require(cfg["paths"]["weights"], "weight manifest"))


def _load_store(cfg):
    path = _require(cfg["paths"]["store"], "quantized store")
    return Q.load_store(path), Q.file_hash(path)


def _calib_chunks(cfg, tokens):
    c = cfg["calib"]
    return C.sample_chunks(tokens, c["seq_len"], c["n_samples"], c["seed"])


def _eval_chunks(cfg, tokens):
    e = cfg["eval"]
    return C.contiguous_chunks(tokens, e["seq_len"], e["n_samples"],
                               e["offset"])


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_init(cfg, args) -> int:
    """Materialize the deterministic toy model and corpus."""
    paths = cfg["paths"]
    os.makedirs(os.path.dirname(paths["weights"]) or ".", exist_ok=True)
    weights = M.init_model(cfg["seed"], _model_config(cfg))
    M.export_weights(weights, paths["weights"])
    if not os.path.exists(paths["corpus"]):
        os.makedirs(os.path.dirname(paths["corpus"]) or ".", exist_ok=True)
        g = cfg["corpus_gen"]
        C.write_corpus(paths["corpus"], g["seed"], g["n_chars"])
    print(f"weights: {paths['weights']} checksum {weights.checksum()[:16]}")
    print(f"corpus:  {paths['corpus']} hash {C.corpus_hash(paths['corpus'])[:16]}")
    return EXIT_OK


def cmd_quantize(cfg, args) -> int:
    weights = _load_weights(cfg)
    store = Q.quantize_model(weights, cfg["quant"]["n_bits"],
                             cfg["quant"]["b_min"])
    out = cfg["paths"]["store"]
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    Q.save_store(store, out)
    print(f"store: {out} hash {Q.file_hash(out)[:16]} "
          f"({store.n_bits}->{store.b_min} bits, {len(store.layers)} layers)")
    return EXIT_OK


def cmd_profile(cfg, args) -> int:
    weights = _load_weights(cfg)
    store, store_hash = _load_store(cfg)
    corpus_path = _require(cfg["paths"]["corpus"], "corpus")
    tokens = C.load_corpus(corpus_path)
    calib = _calib_chunks(cfg, tokens)
    prof = S.profile(weights, store, calib,
                     corpus_hash=C.corpus_hash(corpus_path),
                     store_hash=store_hash)
    out = cfg["paths"]["profile"]
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    S.save_profile(prof, out)
    print(f"profile: {out} ({prof.n_samples} samples, "
          f"{len(prof.scores_second_order)} score cells)")
    return EXIT_OK


def _plan_path(cfg, method, target) -> str:
    return os.path.join(cfg["paths"]["plan_dir"],
                        f"{method}_t{target:g}.json")


def _build_plan(cfg, method, target, weights, store, store_hash, prof,
                profile_hash, calib, estimator_mode=None):
    fit = cfg["fit"]
    alpha = fit["alpha"] if fit["alpha"] is not None else default_alpha(target)
    hyper = F.FitConfig(epochs=fit["epochs"], lr=fit["lr"], alpha=alpha,
                        batch_size=fit["batch_size"], seed=fit["seed"])
    est = cfg["estimator"]
    if method == "dp":
        plan, _, fit_log = P.build_dp_plan(
            weights, store, prof, calib, cfg["budget_bits"], target,
            estimator_mode=estimator_mode or est["mode"],
            use_async=est["use_async"], k=est["k"], seed=est["seed"],
            calibrate=est["calibrate"], hyper=hyper,
            store_hash=store_hash, profile_hash=profile_hash)
        return plan, fit_log
    plan, _ = P.build_static_baseline(weights, store, prof, method, target,
                                      store_hash=store_hash,
                                      profile_hash=profile_hash)
    return plan, None


def cmd_plan(cfg, args) -> int:
    weights = _load_weights(cfg)
    store, store_hash = _load_store(cfg)
    profile_path = _require(cfg["paths"]["profile"], "sensitivity profile")
    prof = S.load_profile(profile_path)
    profile_hash = Q.file_hash(profile_path)
    if prof.store_hash and prof.store_hash != store_hash:
        raise R.ProvenanceError("profile was built against a different store")
    tokens = C.load_corpus(_require(cfg["paths"]["corpus"], "corpus"))
    calib = _calib_chunks(cfg, tokens)
    os.makedirs(cfg["paths"]["plan_dir"], exist_ok=True)
    targets = [args.target] if args.target is not None else cfg["target_bits"]
    for target in targets:
        plan, fit_log = _build_plan(cfg, args.method, target, weights, store,
                                    store_hash, prof, profile_hash, calib)
        out = _plan_path(cfg, args.method, target)
        R.save_plan(plan, out)
        avg = P.plan_effective_bits(plan)
        flag = " WARNING: off-target" if plan.warning else ""
        print(f"plan: {out} avg precision {avg:.4f} (target {target}){flag}")
        if fit_log is not None and args.fit_log:
            F.write_fit_log(fit_log, args.fit_log)
    return EXIT_OK


def _eval_plan(cfg, weights, store, store_hash, plan, chunks,
               track_exact=False):
    ppls, traces = [], []
    losses = []
    for toks in chunks:
        ppl, tr = R.eval_perplexity(weights, store, toks, "dynamic",
                                    plan=plan, store_hash=store_hash,
                                    track_exact=track_exact)
        ppls.append(ppl)
        traces.append(tr)
        losses.extend(tr.token_losses)
    ppl = float(np.exp(np.mean(losses)))
    eff = float(np.mean([t.mean_effective_bits() for t in traces]))
    ops = int(sum(t.estimator_ops for t in traces))
    return ppl, eff, ops, traces


def cmd_eval(cfg, args) -> int:
    weights = _load_weights(cfg)
    store, store_hash = _load_store(cfg)
    tokens = C.load_corpus(_require(cfg["paths"]["corpus"], "corpus"))
    chunks = _eval_chunks(cfg, tokens)
    rows = []
    if args.fp:
        losses = []
        for toks in chunks:
            _, tr = R.eval_perplexity(weights, store, toks, "fp")
            losses.extend(tr.token_losses)
        rows.append({"method": "fp", "target": None, "plan_hash": None,
                     "perplexity": float(np.exp(np.mean(losses))),
                     "effective_bits": None, "estimator_ops": 0})
    for path in args.plans:
        plan = R.load_plan(_require(path, "plan"), store)
        ppl, eff, ops, _ = _eval_plan(cfg, weights, store, store_hash, plan,
                                      chunks)
        rows.append({"method": plan.method, "target": plan.target_bits,
                     "plan_hash": Q.file_hash(path),
                     "perplexity": ppl, "effective_bits": eff,
                     "estimator_ops": ops})
    for r in rows:
        tgt = "-" if r["target"] is None else f"{r['target']:g}"
        eff = "-" if r["effective_bits"] is None else f"{r['effective_bits']:.4f}"
        print(f"{r['method']:>8} target {tgt:>5} ppl {r['perplexity']:.4f} "
              f"eff_bits {eff} est_ops {r['estimator_ops']}")
    if args.out:
        _write_report(args.out, rows)
    return EXIT_OK


def cmd_decode(cfg, args) -> int:
    weights = _load_weights(cfg)
    store, store_hash = _load_store(cfg)
    plan = R.load_plan(_require(args.plan, "plan"), store)
    prompt = np.frombuffer(args.prompt.encode("utf-8", "replace"),
                           dtype=np.uint8).astype(np.int64)
    if len(prompt) == 0:
        raise ConfigError("empty prompt")
    out, trace = R.decode(weights, store, plan, prompt, args.n_new,
                          store_hash=store_hash)
    text = bytes(out).decode("utf-8", "replace")
    print(json.dumps({"prompt": args.prompt, "generated": text,
                      "tokens": out,
                      "mean_effective_bits": trace.mean_effective_bits(),
                      "estimator_ops": trace.estimator_ops}))
    if args.trace:
        trace.export_csv(args.trace)
    return EXIT_OK


def cmd_report(cfg, args) -> int:
    """Full comparison grid: (method x target) perplexity and effective bits,
    exact-vs-approximate estimator columns for the dynamic method, incurred
    error accounting, and QoS percentiles over per-query effective bits."""
    weights = _load_weights(cfg)
    store, store_hash = _load_store(cfg)
    profile_path = _require(cfg["paths"]["profile"], "sensitivity profile")
    prof = S.load_profile(profile_path)
    profile_hash = Q.file_hash(profile_path)
    if prof.store_hash and prof.store_hash != store_hash:
        raise R.ProvenanceError("profile was built against a different store")
    tokens = C.load_corpus(_require(cfg["paths"]["corpus"], "corpus"))
    calib = _calib_chunks(cfg, tokens)
    chunks = _eval_chunks(cfg, tokens)
    q = cfg["eval"]
    qos_chunks = C.contiguous_chunks(tokens, q["seq_len"], q["n_queries"], 0)
    methods = args.methods.split(",") if args.methods else ["dp", "llm_mq",
                                                            "hawq_v2"]
    targets = ([float(t) for t in args.targets.split(",")]
               if args.targets else cfg["target_bits"])
    os.makedirs(cfg["paths"]["plan_dir"], exist_ok=True)
    os.makedirs(cfg["paths"]["report_dir"], exist_ok=True)

    losses = []
    for toks in chunks:
        _, tr = R.eval_perplexity(weights, store, toks, "fp")
        losses.extend(tr.token_losses)
    fp_ppl = float(np.exp(np.mean(losses)))

    rows = []
    for method in methods:
        for target in targets:
            row = {"method": method, "target": target, "fp_perplexity": fp_ppl}
            try:
                plan, _ = _build_plan(cfg, method, target, weights, store,
                                      store_hash, prof, profile_hash, calib)
            except A.InfeasibleError as e:
                row.update({"error": f"infeasible: {e}"})
                rows.append(row)
                continue
            path = _plan_path(cfg, method, target)
            R.save_plan(plan, path)
            row["plan_hash"] = Q.file_hash(path)
            row["warning"] = plan.warning
            ppl, eff, ops, traces = _eval_plan(cfg, weights, store,
                                               store_hash, plan, chunks,
                                               track_exact=(method == "dp"))
            row.update({"perplexity": ppl, "effective_bits": eff,
                        "estimator_ops": ops})
            if method == "dp":
                # exact-estimator column next to the approximate one
                plan_x, _ = _build_plan(cfg, method, target, weights, store,
                                        store_hash, prof, profile_hash,
                                        calib, estimator_mode="exact")
                ppl_x, eff_x, ops_x, traces_x = _eval_plan(
                    cfg, weights, store, store_hash, plan_x, chunks,
                    track_exact=True)
                row.update({"perplexity_exact_est": ppl_x,
                            "effective_bits_exact_est": eff_x,
                            "estimator_ops_exact": ops_x})
                dyn_sum = stat_sum = 0.0
                for tr in traces_x:
                    for d, m, _, _ in R.incurred_error_comparison(
                            tr, plan_x).values():
                        dyn_sum += d
                        stat_sum += m
                row["incurred_error_dynamic"] = dyn_sum
                row["incurred_error_matched_static"] = stat_sum
                qos_traces = [R.eval_perplexity(weights, store, toks,
                                                "dynamic", plan=plan,
                                                store_hash=store_hash)[1]
                              for toks in qos_chunks]
                qs = R.qos_stats(qos_traces, target)
                row.update({"qos_p90_delta_pct": qs["p90_delta_pct"],
                            "qos_p99_delta_pct": qs["p99_delta_pct"]})
            rows.append(row)
            print(f"{method:>8} target {target:g}: "
                  f"ppl {row.get('perplexity', float('nan')):.4f} "
                  f"eff {row.get('effective_bits', float('nan')):.4f}")

    out_csv = os.path.join(cfg["paths"]["report_dir"], "report.csv")
    out_json = os.path.join(cfg["paths"]["report_dir"], "report.json")
    _write_report(out_json, rows)
    _write_report_csv(out_csv, rows)
    print(f"report: {out_csv}, {out_json}")
    return EXIT_OK


_REPORT_COLUMNS = [
    "method", "target", "fp_perplexity", "perplexity", "effective_bits",
    "estimator_ops", "perplexity_exact_est", "effective_bits_exact_est",
    "estimator_ops_exact", "incurred_error_dynamic",
    "incurred_error_matched_static", "qos_p90_delta_pct",
    "qos_p99_delta_pct", "warning", "plan_hash", "error",
]


def _write_report(path, rows):
    with open(path, "w") as f:
        json.dump({"schema": REPORT_SCHEMA, "rows": rows}, f, indent=1)


def _write_report_csv(path, rows):
    import csv
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=_REPORT_COLUMNS, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow(r)


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="dpq", description="dynamic-precision quantized decoding pipeline")
    ap.add_argument("--config", help="JSON config file (defaults built in)")
    sub = ap.add_subparsers(dest="command", required=True)

    sub.add_parser("init", help="create the toy model weights and corpus")
    sub.add_parser("quantize", help="build the nested quantized store")
    sub.add_parser("profile", help="accumulate sensitivity statistics")

    p = sub.add_parser("plan", help="build a precision plan")
    p.add_argument("--method", choices=["dp", "llm_mq", "hawq_v2"],
                   default="dp")
    p.add_argument("--target", type=float, default=None,
                   help="single target average precision (default: config list)")
    p.add_argument("--fit-log", default=None, help="CSV path for fit history")

    p = sub.add_parser("eval", help="teacher-forced perplexity of plans")
    p.add_argument("plans", nargs="*", help="plan files")
    p.add_argument("--fp", action="store_true", help="include the unquantized row")
    p.add_argument("--out", default=None, help="JSON report path")

    p = sub.add_parser("decode", help="greedy generation with a plan")
    p.add_argument("--plan", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--n-new", type=int, default=32)
    p.add_argument("--trace", default=None, help="CSV trace path")

    p = sub.add_parser("report", help="full method x target comparison grid")
    p.add_argument("--methods", default=None, help="comma-separated subset")
    p.add_argument("--targets", default=None, help="comma-separated subset")
    return ap


_COMMANDS = {
    "init": cmd_init, "quantize": cmd_quantize, "profile": cmd_profile,
    "plan": cmd_plan, "eval": cmd_eval, "decode": cmd_decode,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        return _COMMANDS[args.command](cfg, args)
    except (ConfigError, M.WeightFormatError, Q.QuantError, ValueError,
            OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (A.InfeasibleError, F.InfeasibleError) as e:
        print(f"infeasible: {e}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except R.ProvenanceError as e:
        print(f"provenance mismatch: {e}", file=sys.stderr)
        return EXIT_PROVENANCE


if __name__ == "__main__":
    sys.exit(main())
