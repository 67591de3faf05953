"""Command-line entry point.

Subcommands: gen-data, train-teacher, distill, certify, evaluate.  All take a
JSON config file; unknown config keys are rejected.  Every artifact written
embeds (config hash, seed, tool version).  Exit codes: 0 success, 2 bad
config/usage, 3 runtime failure (divergence, corrupt weights, numerics).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys

from . import __version__
from .tensor import NumericError, ContractError
from . import data as data_mod
from .data import ConfigError, FactorError, ParseError, FactorSpec, default_factor_specs
from .encoder import CorruptWeightsError, save_weights, load_weights
from .losses import Margins
from .train import TrainConfig, TeacherConfig, TrainingError, distill, train_teacher
from .spectral import certify
from .evaluate import evaluate_models

CONFIG_SCHEMA = {
    "seed": None,
    "data": {"counts": {"train", "calibration", "test"},
             "image_size": None, "pairs_per_factor": None, "factors": None,
             "noise": None},
    "teacher": {"epochs", "batch_size", "lr", "decoder_hidden", "kl_weight",
                "recon_weight", "align_penalty", "align_reward", "arch"},
    "distill": {"epochs", "batch_size", "lr", "ratio", "margins", "dual_init",
                "dual_rates", "spectral_clip", "early_stop_hinge",
                "early_stop_dloss", "early_stop_patience"},
    "cert": {"kappa", "loss_bound", "omega", "delta", "m", "m_grid"},
    "ood": {"percentile", "k"},
    "bench": {"runs"},
}


def _check_keys(obj: dict, allowed, ctx: str) -> None:
    for key in obj:
        if key not in allowed:
            raise ConfigError(f"unknown config key '{key}' in {ctx}")


def load_config(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as f:
            cfg = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}") from e
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    _check_keys(cfg, CONFIG_SCHEMA, "config")
    for section, allowed in CONFIG_SCHEMA.items():
        if allowed is None or section not in cfg:
            continue
        if not isinstance(cfg[section], dict):
            raise ConfigError(f"config section '{section}' must be an object")
        _check_keys(cfg[section], allowed, f"section '{section}'")
    counts = cfg.get("data", {}).get("counts")
    if counts is not None:
        _check_keys(counts, CONFIG_SCHEMA["data"]["counts"], "data.counts")
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(
        json.dumps(cfg, sort_keys=True).encode("utf-8")).hexdigest()


def _provenance(cfg: dict, seed: int) -> dict:
    return {"config_sha256": config_hash(cfg), "seed": seed,
            "version": __version__}


def _seed(cfg: dict, args) -> int:
    if args.seed is not None:
        return args.seed
    return int(cfg.get("seed", 0))


def _factor_specs(cfg: dict):
    raw = cfg.get("data", {}).get("factors")
    if raw is None:
        return default_factor_specs()
    specs = []
    for s in raw:
        _check_keys(s, {"name", "observed_values", "train_values", "render"},
                    "factor spec")
        for key in ("name", "observed_values", "train_values", "render"):
            if key not in s:
                raise ConfigError(f"factor spec missing field '{key}'")
        specs.append(FactorSpec(s["name"], tuple(s["observed_values"]),
                                tuple(s["train_values"]), s["render"]))
    return specs


def _margins(raw: dict | None) -> Margins | None:
    if raw is None:
        return None
    adapt, isolate = {}, {}
    for f, pair in raw.items():
        if not isinstance(pair, (list, tuple)) or len(pair) != 2:
            raise ConfigError(f"margins for '{f}' must be [adapt, isolate]")
        adapt[f], isolate[f] = float(pair[0]), float(pair[1])
    return Margins(adapt, isolate)


def _dual_table(raw: dict | None, what: str) -> dict | None:
    """{"A": {factor: v}, "I": {factor: v}} -> {("A"|"I", factor): v}."""
    if raw is None:
        return None
    _check_keys(raw, {"A", "I"}, what)
    out = {}
    for kind, table in raw.items():
        for f, v in table.items():
            v = float(v)
            if v < 0:
                raise ConfigError(f"{what}[{kind}][{f}] must be >= 0")
            out[(kind, f)] = v
    return out


def _train_config(cfg: dict, seed: int) -> TrainConfig:
    d = cfg.get("distill", {})
    clip = d.get("spectral_clip", {})
    _check_keys(clip, {"enabled", "theta"}, "distill.spectral_clip")
    return TrainConfig(
        batch_size=int(d.get("batch_size", 16)),
        lr=float(d.get("lr", 1e-5)),
        epochs=int(d.get("epochs", 50)),
        seed=seed,
        ratio=float(d.get("ratio", 0.5)),
        margins=_margins(d.get("margins")),
        dual_init=_dual_table(d.get("dual_init"), "distill.dual_init"),
        dual_rates=_dual_table(d.get("dual_rates"), "distill.dual_rates"),
        spectral_clip_enabled=bool(clip.get("enabled", False)),
        spectral_clip_theta=float(clip.get("theta", 1.0)),
        early_stop_hinge=float(d.get("early_stop_hinge", 1e-4)),
        early_stop_dloss=float(d.get("early_stop_dloss", 1e-5)),
        early_stop_patience=int(d.get("early_stop_patience", 3)),
    )


def _teacher_config(cfg: dict, seed: int) -> TeacherConfig:
    t = cfg.get("teacher", {})
    return TeacherConfig(
        arch=dict(t.get("arch", {})),
        epochs=int(t.get("epochs", 100)),
        batch_size=int(t.get("batch_size", 16)),
        lr=float(t.get("lr", 1e-3)),
        seed=seed,
        decoder_hidden=int(t.get("decoder_hidden", 128)),
        kl_weight=float(t.get("kl_weight", 0.005)),
        recon_weight=float(t.get("recon_weight", 1.0)),
        align_penalty=float(t.get("align_penalty", 2.0)),
        align_reward=float(t.get("align_reward", 0.5)),
    )


def _write_json(path: str, obj: dict) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=1, sort_keys=True)


# -- subcommands -----------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    seed = _seed(cfg, args)
    d = cfg.get("data", {})
    counts = d.get("counts", {"train": 50, "calibration": 25, "test": 25})
    size = tuple(d.get("image_size", (32, 32)))
    specs = _factor_specs(cfg)
    ds = data_mod.generate(specs, counts, image_size=size, seed=seed,
                           noise=float(d.get("noise", 0.04)))
    data_mod.build_all_pairs(ds, int(d.get("pairs_per_factor", 300)), seed=seed)
    data_mod.save(ds, args.out, meta=_provenance(cfg, seed))
    parts = data_mod.partition(ds)
    print(f"wrote {len(ds.images)} samples to {args.out}")
    for p in parts:
        print(f"  partition {p.id}: {len(p.indices)} train samples")
    return 0


def cmd_train_teacher(args) -> int:
    cfg = load_config(args.config)
    seed = _seed(cfg, args)
    ds = data_mod.load(args.data)
    model = train_teacher(ds, _teacher_config(cfg, seed))
    save_weights(model, args.out, meta=_provenance(cfg, seed))
    print(f"teacher saved to {args.out} "
          f"({model.parameter_count()} parameters)")
    return 0


def cmd_distill(args) -> int:
    cfg = load_config(args.config)
    seed = _seed(cfg, args)
    ds = data_mod.load(args.data)
    teacher = load_weights(args.teacher)
    student, trace = distill(teacher, None, ds, _train_config(cfg, seed))
    meta = _provenance(cfg, seed)
    save_weights(student, args.out, meta=meta)
    if args.trace:
        trace.to_csv(args.trace, meta=meta)
    last = trace.records[-1]
    print(f"student saved to {args.out} "
          f"({student.parameter_count()} parameters, "
          f"{len(trace.records)} epochs, final L_D={last['L_D']:.6f})")
    return 0


def cmd_certify(args) -> int:
    cfg = load_config(args.config)
    seed = _seed(cfg, args)
    ds = data_mod.load(args.data)
    model = load_weights(args.model)
    consts = {k: v for k, v in cfg.get("cert", {}).items() if k != "m_grid"}
    report = certify(model, ds, constants=consts or None,
                     m_grid=cfg.get("cert", {}).get("m_grid"))
    report["provenance"] = _provenance(cfg, seed)
    _write_json(args.out_json, report)
    meta = {k: str(v) for k, v in report["provenance"].items()}
    cols = (["m"] + [f"dudley_{k}" for k in ("D", "A", "I")]
            + [f"zeta_{k}" for k in ("D", "A", "I")] + list(meta))
    with open(args.out_csv, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=cols)
        writer.writeheader()
        for row in report["zeta_vs_m"]:
            writer.writerow({k: repr(v) if isinstance(v, float) else v
                             for k, v in row.items()} | meta)
    for kind in ("D", "A", "I"):
        print(f"kappa_theta[{kind}]={report['kappa_theta'][kind]:.6g} "
              f"zeta[{kind}]={report['zeta'][kind]['zeta']:.6g}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config)
    seed = _seed(cfg, args)
    ds = data_mod.load(args.data)
    teacher = load_weights(args.teacher)
    student = load_weights(args.student)
    ocfg = cfg.get("ood", {})
    report = evaluate_models(
        teacher, student, ds,
        percentile=float(ocfg.get("percentile", 5.0)), seed=seed,
        bench_runs=int(cfg.get("bench", {}).get("runs", 1000)))
    report["provenance"] = _provenance(cfg, seed)
    _write_json(args.out, report)
    for who in ("teacher", "student"):
        aur = " ".join(f"{f}={v:.3f}" for f, v in report["auroc"][who].items())
        print(f"{who}: auroc {aur} | {report['model_bytes'][who]} bytes | "
              f"p50 {report['timing'][who]['p50_ms']:.2f} ms")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dde", description="Distilled disentangled encoders: data "
        "generation, training, certification, and OOD evaluation.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")

    p = sub.add_parser("gen-data", help="generate the synthetic dataset")
    common(p)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-teacher", help="train the teacher encoder")
    common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output weight file")
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("distill", help="distill a compressed student")
    common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--teacher", required=True, help="teacher weight file")
    p.add_argument("--out", required=True, help="output weight file")
    p.add_argument("--trace", default=None, help="optional trace CSV path")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("certify", help="emit the certification report")
    common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--model", required=True, help="weight file to certify")
    p.add_argument("--out-json", required=True, help="report JSON path")
    p.add_argument("--out-csv", required=True, help="bound-vs-m CSV path")
    p.set_defaults(func=cmd_certify)

    p = sub.add_parser("evaluate", help="OOD + size/latency evaluation")
    common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--teacher", required=True, help="teacher weight file")
    p.add_argument("--student", required=True, help="student weight file")
    p.add_argument("--out", required=True, help="report JSON path")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FactorError, ParseError, FileNotFoundError,
            NotADirectoryError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (TrainingError, NumericError, ContractError,
            CorruptWeightsError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
