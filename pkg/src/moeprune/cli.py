"""Command-line pipeline: train, prune, distill, eval, analyze, sweep.

Config file (JSON) sections: "model", "train", "calibration", "kd"; flags
override file values, and the effective configuration is echoed into every
artifact. Exit codes: 0 success, 2 usage error, 3 input/format error, 4
numerical error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import warnings
from pathlib import Path

from .analysis import analyze_model, ingest_frequencies
from .calibration import build_calibration_set, collect
from .distill import KDConfig, distill
from .errors import (
    ContractError,
    FormatError,
    InputError,
    MoePruneError,
    NumericalError,
    ShapeError,
    StorageError,
    UsageError,
)
from .model import ModelConfig, MoEModel
from .persistence import load_checkpoint, save_checkpoint
from .pruning import METHODS, SparsityTarget, prune_model
from .training import evaluate_perplexity, train_model

TRAIN_DEFAULTS = {"steps": 2000, "batch_size": 8, "learning_rate": 1e-3, "seed": 0}
CALIB_DEFAULTS = {"nsamples": 128, "seed": 0}


def _read_corpus(path: str) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise InputError(f"cannot read corpus {path}: {exc}") from exc


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: config is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise FormatError(f"{path}: config root must be a JSON object")
    return cfg


def _merge(defaults: dict, file_section: dict, overrides: dict) -> dict:
    out = dict(defaults)
    out.update({k: v for k, v in file_section.items()})
    out.update({k: v for k, v in overrides.items() if v is not None})
    return out


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _write_jsonl(path: Path, records: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def cmd_train(args) -> int:
    file_cfg = _load_config_file(args.config)
    model_cfg = _merge(ModelConfig().to_dict(), file_cfg.get("model", {}),
                       {"seed": args.seed})
    train_cfg = _merge(TRAIN_DEFAULTS, file_cfg.get("train", {}),
                       {"steps": args.steps, "seed": args.seed,
                        "learning_rate": args.lr, "batch_size": args.batch_size})
    config = ModelConfig.from_dict(model_cfg)
    corpus = _read_corpus(args.corpus)
    model = MoEModel.init(config, upcycle=args.upcycle)
    trained, log = train_model(
        model, corpus,
        steps=int(train_cfg["steps"]),
        batch_size=int(train_cfg["batch_size"]),
        learning_rate=float(train_cfg["learning_rate"]),
        seed=int(train_cfg["seed"]),
    )
    effective = {"model": config.to_dict(), "train": train_cfg, "upcycle": args.upcycle}
    save_checkpoint(trained, args.out, extra={"config": effective})
    _write_jsonl(Path(args.out) / "train_log.jsonl", log)
    final = log[-1]["loss"] if log else None
    print(json.dumps({"out": str(args.out), "steps": len(log), "final_loss": final}))
    return 0


def cmd_prune(args) -> int:
    if (args.sparsity is None) == (args.pattern is None):
        raise UsageError("specify exactly one of --sparsity or --pattern")
    target = (SparsityTarget.unstructured(args.sparsity) if args.sparsity is not None
              else SparsityTarget.parse(args.pattern))
    file_cfg = _load_config_file(args.config)
    calib_cfg = _merge(CALIB_DEFAULTS, file_cfg.get("calibration", {}),
                       {"nsamples": args.nsamples, "seed": args.seed})
    model, _ = load_checkpoint(args.ckpt)
    corpus = _read_corpus(args.calib)
    cal = build_calibration_set(corpus, int(calib_cfg["nsamples"]),
                                model.config.seq_len, int(calib_cfg["seed"]))
    stats = collect(model, cal)
    pruned, masks, report = prune_model(model, stats, args.method, target,
                                        propagate=args.propagate)
    effective = {
        "model": model.config.to_dict(),
        "calibration": calib_cfg,
        "method": args.method,
        "sparsity": target.describe(),
        "propagate": args.propagate,
    }
    save_checkpoint(pruned, args.out, masks=masks, extra={"config": effective})
    payload = {"config": effective, **report.to_dict()}
    _write_json(Path(args.out) / "prune_report.json", payload)
    print(json.dumps({
        "out": str(args.out),
        "sparsity_achieved": report.totals["sparsity_achieved"],
        "recon_error_after_update": report.totals["recon_error_after_update"],
    }))
    return 0


def cmd_distill(args) -> int:
    file_cfg = _load_config_file(args.config)
    kd_cfg = _merge(
        {"lambda_mode": "auto", "epochs": 3, "learning_rate": 2e-5, "batch_size": 8,
         "samples": 1000, "seed": 0, "router_frozen": True},
        file_cfg.get("kd", {}),
        {"epochs": args.epochs, "learning_rate": args.lr, "samples": args.samples,
         "batch_size": args.batch_size, "seed": args.seed,
         "lambda_mode": args.lam,
         "router_frozen": (False if args.full_parameter else None)},
    )
    cfg = KDConfig(
        lambda_mode=kd_cfg["lambda_mode"], epochs=int(kd_cfg["epochs"]),
        learning_rate=float(kd_cfg["learning_rate"]), batch_size=int(kd_cfg["batch_size"]),
        samples=int(kd_cfg["samples"]), seed=int(kd_cfg["seed"]),
        router_frozen=bool(kd_cfg["router_frozen"]),
    )
    teacher, _ = load_checkpoint(args.teacher)
    student, masks = load_checkpoint(args.student)
    if masks is None:
        masks = {}
    corpus = _read_corpus(args.corpus)
    result = distill(teacher, student, masks, corpus, cfg)
    effective = {"model": student.config.to_dict(),
                 "kd": {**kd_cfg, "lambda_resolved": result.lam}}
    save_checkpoint(result.student, args.out, masks=masks, extra={"config": effective})
    _write_jsonl(Path(args.out) / "kd_log.jsonl", result.log)
    last = result.log[-1] if result.log else None
    print(json.dumps({"out": str(args.out), "steps": len(result.log),
                      "lambda": result.lam,
                      "final_total": (last or {}).get("total")}))
    return 0


def cmd_eval(args) -> int:
    model, _ = load_checkpoint(args.ckpt)
    corpus = _read_corpus(args.corpus)
    if not corpus:
        raise InputError(f"corpus {args.corpus} is empty")
    ppl, tokens = evaluate_perplexity(model, corpus)
    print(json.dumps({"perplexity": ppl, "token_count": tokens}))
    return 0


def cmd_analyze(args) -> int:
    sources = [s for s in (args.ckpt, args.freq) if s is not None]
    if len(sources) != 1:
        raise UsageError("specify exactly one input: --ckpt (with --corpus) or --freq")
    if args.ckpt is not None:
        if args.corpus is None:
            raise UsageError("--ckpt requires --corpus")
        model, _ = load_checkpoint(args.ckpt)
        report = analyze_model(model, _read_corpus(args.corpus),
                               nsamples=args.nsamples, mode=args.mode,
                               seed=args.seed or 0, name=str(args.ckpt))
        print(json.dumps(report.to_dict(), indent=2))
    else:
        reports = ingest_frequencies(args.freq)
        payload = [r.to_dict() for r in reports]
        print(json.dumps(payload[0] if len(payload) == 1 else payload, indent=2))
    return 0


def cmd_sweep(args) -> int:
    if (args.sparsities is None) == (args.nsamples_list is None):
        raise UsageError("specify exactly one of --sparsities or --nsamples-list")
    model, _ = load_checkpoint(args.ckpt)
    calib_corpus = _read_corpus(args.calib)
    eval_corpus = _read_corpus(args.eval_corpus)
    seed = args.seed or 0

    if args.sparsities is not None:
        raw = [s.strip() for s in args.sparsities.split(",") if s.strip()]
        settings = [("sparsity", float(v)) for v in raw]
    else:
        raw = [s.strip() for s in args.nsamples_list.split(",") if s.strip()]
        settings = [("nsamples", int(v)) for v in raw]

    seen = set()
    unique = []
    for s in settings:
        if s in seen:
            warnings.warn(f"duplicate sweep setting {s[1]} skipped", stacklevel=1)
            continue
        seen.add(s)
        unique.append(s)

    rows = []
    for kind, value in unique:
        nsamples = value if kind == "nsamples" else args.nsamples
        sparsity = value if kind == "sparsity" else (args.sparsity or 0.5)
        cal = build_calibration_set(calib_corpus, int(nsamples), model.config.seq_len, seed)
        stats = collect(model, cal)
        target = SparsityTarget.unstructured(float(sparsity))
        pruned, _, _ = prune_model(model, stats, args.method, target,
                                   propagate=args.propagate)
        ppl, _ = evaluate_perplexity(pruned, eval_corpus)
        rows.append({"setting": value, "perplexity": ppl})
        print(f"{kind}={value}: perplexity={ppl:.4f}", file=sys.stderr)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["setting", "perplexity"])
        writer.writeheader()
        writer.writerows(rows)
    print(json.dumps({"out": str(out), "rows": len(rows)}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="moeprune",
                                description="Desk-scale MoE pruning toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a toy MoE teacher with plain CE")
    t.add_argument("--config", help="JSON run-config file")
    t.add_argument("--corpus", required=True)
    t.add_argument("--steps", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--upcycle", action="store_true",
                   help="clone expert 0 across each layer at init")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("prune", help="one-shot prune expert matrices")
    pr.add_argument("--config")
    pr.add_argument("--ckpt", required=True)
    pr.add_argument("--method", choices=list(METHODS), default="moe-pruner")
    pr.add_argument("--sparsity", type=float, help="unstructured fraction in [0,1)")
    pr.add_argument("--pattern", help="semi-structured N:M, e.g. 2:4")
    pr.add_argument("--calib", required=True, help="calibration corpus path")
    pr.add_argument("--nsamples", type=int)
    pr.add_argument("--seed", type=int)
    pr.add_argument("--propagate", choices=["dense", "recompute"], default="dense")
    pr.add_argument("--out", required=True)
    pr.set_defaults(func=cmd_prune)

    di = sub.add_parser("distill", help="expert-wise KD from teacher to pruned student")
    di.add_argument("--config")
    di.add_argument("--teacher", required=True)
    di.add_argument("--student", required=True)
    di.add_argument("--corpus", required=True)
    di.add_argument("--samples", type=int)
    di.add_argument("--epochs", type=int)
    di.add_argument("--lr", type=float)
    di.add_argument("--batch-size", type=int)
    di.add_argument("--seed", type=int)
    di.add_argument("--lam", type=float, help="fixed lambda (default: auto l_ce/l_expert)")
    di.add_argument("--full-parameter", action="store_true",
                    help="also update the router (default keeps it frozen)")
    di.add_argument("--out", required=True)
    di.set_defaults(func=cmd_distill)

    ev = sub.add_parser("eval", help="perplexity over non-overlapping windows")
    ev.add_argument("--ckpt", required=True)
    ev.add_argument("--corpus", required=True)
    ev.set_defaults(func=cmd_eval)

    an = sub.add_parser("analyze", help="expert load-balance report")
    an.add_argument("--ckpt")
    an.add_argument("--corpus")
    an.add_argument("--freq", help="external frequency JSON file")
    an.add_argument("--nsamples", type=int, default=128)
    an.add_argument("--mode", choices=["argmax", "topk"], default="argmax")
    an.add_argument("--seed", type=int)
    an.set_defaults(func=cmd_analyze)

    sw = sub.add_parser("sweep", help="prune+eval over a list of settings, CSV out")
    sw.add_argument("--ckpt", required=True)
    sw.add_argument("--method", choices=list(METHODS), default="moe-pruner")
    sw.add_argument("--sparsities", help="comma list, e.g. 0.1,0.3,0.5")
    sw.add_argument("--nsamples-list", help="comma list, e.g. 2,8,32,128")
    sw.add_argument("--sparsity", type=float, help="fixed sparsity for --nsamples-list")
    sw.add_argument("--nsamples", type=int, default=128,
                    help="fixed nsamples for --sparsities")
    sw.add_argument("--calib", required=True)
    sw.add_argument("--eval-corpus", required=True)
    sw.add_argument("--propagate", choices=["dense", "recompute"], default="dense")
    sw.add_argument("--seed", type=int)
    sw.add_argument("--out", required=True)
    sw.set_defaults(func=cmd_sweep)

    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 4
    except (InputError, FormatError, StorageError, ContractError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except MoePruneError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
