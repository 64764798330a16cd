"""``blockprune`` command line: pretrain, prune, validate, report.

Every command prints exactly one JSON document on stdout; logs go to
stderr.  Exit codes: 0 ok, 1 validation failure, 2 usage or config error,
3 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import statistics
import sys
from pathlib import Path

import numpy as np

from .baselines import run_awg, run_magnitude
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config
from .data import FormatError, batches, evaluate
from .models import build_model
from .smart import (
    model_descriptor,
    resolve_schedule,
    run_from_checkpoint,
    run_smart,
    run_to_checkpoint,
)
from .training import train_step, write_diagnostics
from .verify import run_all

logger = logging.getLogger("blockprune")

EXIT_OK, EXIT_VALIDATION, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2, 3
METRIC_KEYS = ("accuracy", "loss", "block_sparsity", "element_sparsity", "mac_reduction")
REPORT_COLUMNS = ("method", "r", "seed") + METRIC_KEYS + ("source",)


class UsageError(Exception):
    pass


def _emit(doc: dict) -> None:
    sys.stdout.write(json.dumps(doc, sort_keys=True) + "\n")
    sys.stdout.flush()


def _load(path) -> RunConfig:
    cfg = load_config(path)
    logger.info("config %s (sha256 %s)", cfg.source, cfg.hash)
    for section, keys in cfg.resolved().items():
        logger.info("  [%s] %s", section, json.dumps(keys, sort_keys=True))
    return cfg


def _prepare_out(path) -> None:
    # fail before training, not after
    Path(path).parent.mkdir(parents=True, exist_ok=True)


def _metrics(report: dict) -> dict:
    return {k: report[k] for k in METRIC_KEYS if k in report}


def _model_for(cfg: RunConfig):
    return build_model(cfg.model_spec(), cfg["train"]["seed"], cfg.prunable())


def _load_init(path, model) -> dict:
    if not Path(path).is_file():
        raise UsageError(f"init checkpoint not found: {path}")
    ckpt = load_checkpoint(path)
    want = model_descriptor(model)
    if ckpt.meta.get("model") != want:
        raise ConfigError(
            f"{path}: checkpoint model {ckpt.meta.get('model')} does not match config {want}"
        )
    for name in model.params:
        model.params[name] = np.array(ckpt.tensors[f"param/{name}"], dtype=np.float64)
    return ckpt.meta


def cmd_pretrain(args) -> int:
    cfg = _load(args.config)
    _prepare_out(args.out)
    train, test = cfg.load_data()
    model = _model_for(cfg)
    tc = cfg.train_config()
    opt = tc.optimizer()
    history = []
    for epoch in range(tc.epochs):
        losses = [train_step(model, opt, x, y) for x, y in batches(train, tc.batch_size, tc.seed, epoch)]
        metrics = evaluate(model, test)
        metrics.update(epoch=epoch, train_loss=float(np.mean(losses)))
        history.append(metrics)
        logger.info("pretrain epoch %d %s", epoch, metrics)
    report = evaluate(model, test)
    meta = {"kind": "dense", "config_hash": cfg.hash, "model": model_descriptor(model),
            "history": history, "report": report}
    tensors = {f"param/{k}": v for k, v in model.params.items()}
    tensors.update({f"w_vel/{k}": v for k, v in opt.velocity.items()})
    save_checkpoint(args.out, tensors, meta)
    _emit({"command": "pretrain", "checkpoint": str(args.out), "epochs": tc.epochs,
           "seed": tc.seed, "config_hash": cfg.hash, **_metrics(report)})
    return EXIT_OK


def _side_paths(out) -> tuple[Path, Path]:
    out = Path(out)
    return out.with_name(out.name + ".metrics.json"), out.with_name(out.name + ".diagnostics.csv")


def cmd_prune(args) -> int:
    cfg = _load(args.config)
    method = args.method
    if method != cfg["prune"]["method"]:
        logger.info("--method %s overrides config method %s", method, cfg["prune"]["method"])
    if args.init is None and args.resume is None:
        raise UsageError("prune needs --init (or --resume for smart)")
    if (args.resume is not None or args.stop_at is not None) and method != "smart":
        raise UsageError("--resume/--stop-at are only supported for --method smart")
    _prepare_out(args.out)
    train, test = cfg.load_data()
    model = _model_for(cfg)
    init_meta = _load_init(args.init, model) if args.init is not None else {}
    r = cfg["prune"]["r"]
    finished = True

    if method == "smart":
        scfg = resolve_schedule(cfg.smart_config(), train)
        run = None
        if args.resume is not None:
            if not Path(args.resume).is_file():
                raise UsageError(f"resume checkpoint not found: {args.resume}")
            ck = load_checkpoint(args.resume)
            run = run_from_checkpoint(model, scfg, ck.tensors, ck.meta, cfg.hash)
            init_meta = ck.meta.get("init", {})
            logger.info("resuming at global step %d", run.step)
        run = run_smart(model, train, test, scfg, run=run, stop_at=args.stop_at)
        tensors, meta = run_to_checkpoint(run, cfg.hash)
        meta["init"] = {"report": init_meta.get("report", {})}
        diagnostics, report, finished = run.diagnostics, run.report, run.finished
        if not finished:
            # interrupted: report the current soft state instead of a final result
            report = run.history[-1] if run.history else {}
    elif method == "awg":
        res = run_awg(model, train, test, cfg.awg_config())
        tensors, meta, diagnostics, report = _result_checkpoint(res, cfg, "awg")
    else:
        p = cfg["prune"]
        # same post-init epoch budget as smart: search epochs plus fine-tune epochs
        epochs = (p["l"] - p["s"]) + p["finetune_epochs"]
        res = run_magnitude(model, train, test, r, epochs, cfg.train_config(), cfg.block())
        tensors, meta, diagnostics, report = _result_checkpoint(res, cfg, "magnitude")

    save_checkpoint(args.out, tensors, meta)
    metrics_path, diag_path = _side_paths(args.out)
    write_diagnostics(diag_path, diagnostics)
    doc = {
        "command": "prune",
        "method": method,
        "r": r,
        "seed": cfg["train"]["seed"],
        "finished": finished,
        "config_hash": cfg.hash,
        "checkpoint": str(args.out),
        "diagnostics": str(diag_path),
        "dense_accuracy": init_meta.get("report", {}).get("accuracy"),
        **_metrics(report),
    }
    for key in ("n_blocks", "zero_blocks", "layer_block_sparsity"):
        if key in report:
            doc[key] = report[key]
    metrics_path.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    doc["metrics"] = str(metrics_path)
    _emit(doc)
    return EXIT_OK


def _result_checkpoint(res, cfg: RunConfig, kind: str):
    tensors = {f"param/{k}": v for k, v in res.model.params.items()}
    tensors["mask/hard"] = res.hard_mask
    meta = {"kind": kind, "config_hash": cfg.hash, "model": model_descriptor(res.model),
            "partition": res.partition.describe(), "history": res.history, "report": res.report}
    return tensors, meta, res.diagnostics, res.report


def cmd_validate(args) -> int:
    results = run_all(inject=args.inject)
    failed = [r for r in results if not r["pass"]]
    doc = {"command": "validate", "pass": not failed, "suites": results,
           "failed": [r["suite"] for r in failed]}
    if failed:
        first = failed[0]
        doc["first_counterexample"] = {"suite": first["suite"],
                                       "counterexample": first.get("counterexample")}
        logger.error("suite %s failed; first counterexample: %s", first["suite"],
                     json.dumps(first.get("counterexample")))
    _emit(doc)
    return EXIT_VALIDATION if failed else EXIT_OK


def _read_run(path: Path):
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
        row = {"method": str(doc["method"]), "r": float(doc["r"]), "seed": int(doc["seed"])}
        for key in METRIC_KEYS:
            row[key] = float(doc[key])
    except (OSError, ValueError, KeyError, TypeError) as exc:
        logger.warning("skipping %s: %s", path, exc)
        return None
    row["source"] = path.name
    return row


def cmd_report(args) -> int:
    runs = Path(args.runs)
    if not runs.is_dir():
        raise UsageError(f"runs directory not found: {runs}")
    _prepare_out(args.out)
    rows = [row for p in sorted(runs.glob("*.json")) if (row := _read_run(p)) is not None]
    rows.sort(key=lambda r: (r["method"], r["r"], r["seed"], r["source"]))
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    groups: dict = {}
    for row in rows:
        groups.setdefault(row["method"], {}).setdefault(repr(row["r"]), []).append(row)
    medians = {
        method: {r: {k: statistics.median(x[k] for x in grp) for k in METRIC_KEYS}
                 for r, grp in by_r.items()}
        for method, by_r in groups.items()
    }
    _emit({"command": "report", "out": str(args.out), "rows": len(rows), "medians": medians})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="blockprune", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train the dense model and write a checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("prune", help="prune a pretrained checkpoint")
    p.add_argument("--method", required=True, choices=("smart", "awg", "magnitude"))
    p.add_argument("--config", required=True)
    p.add_argument("--init", help="dense checkpoint from 'pretrain'")
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="continue an interrupted smart checkpoint")
    p.add_argument("--stop-at", type=int, help="stop after this many global mini-batch steps")
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("validate", help="run the oracle suites")
    p.add_argument("--inject", choices=("jacobian-sign-flip",),
                   help="deliberately break a component (mutation smoke test)")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("report", help="tabulate run metric JSONs into a CSV")
    p.add_argument("--runs", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        code = EXIT_USAGE if exc.code else EXIT_OK
        if code:
            _emit({"error": "invalid command line", "exit_code": code})
        return code
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        logger.error("%s", exc)
        _emit({"error": str(exc), "exit_code": EXIT_USAGE})
        return EXIT_USAGE
    except (CheckpointError, FormatError, FloatingPointError, OSError, ValueError) as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        _emit({"error": f"{type(exc).__name__}: {exc}", "exit_code": EXIT_RUNTIME})
        return EXIT_RUNTIME


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
