"""Command-line entry point: ``madkit <command> [flags]``.

Every command resolves its effective configuration as built-in defaults,
overlaid by an optional ``--config`` JSON file, overlaid by explicit flags,
and writes a run record ``{command, config, seed, version, started,
finished}``. Exit codes are 0 on success, 2 for usage or configuration
errors and 1 for runtime failures; failures also print one JSON line
``{"error": ..., "kind": ..., "message": ...}`` on stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, blob
from .adapters import HybridAdapter, sparsity_report
from .data import (
    DatasetManifest,
    default_benchmark_specs,
    generate_synthetic_benchmark,
    load_checkpoint,
    load_domain,
    save_checkpoint,
)
from .errors import ConfigError, DomainLookupError, MadkitError
from .metrics import (
    ScoreConfig,
    accuracy_table,
    append_result,
    average_rank,
    budget,
    domain_budget,
    read_results,
    rows_to_csv,
    score_rows,
)
from .model import DOMAIN_KINDS, BackboneSpec
from .train import TrainConfig, evaluate, pretrain, train_domain

DEFAULT_SWEEP_RANKS = (2, 4, 8, 16, 24, 36, 48, 64, 92)
RUNS_DIR = ".madkit-runs"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# configuration -----------------------------------------------------------------------


def _read_json(path, what: str) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"{what} file not found: {path}") from None
    except ValueError as exc:
        raise ConfigError(f"{what} file {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{what} file {path} must hold a JSON object")
    return data


def _train_config(cfg: dict) -> TrainConfig:
    return TrainConfig.from_dict(cfg.get("train", {}))


def resolve_config(args, defaults: dict, flag_keys) -> dict:
    """defaults < --config file < --train-config file (train section only) < flags."""
    cfg = json.loads(json.dumps(defaults))
    if getattr(args, "config", None):
        for k, v in _read_json(args.config, "config").items():
            if k == "train" and isinstance(v, dict):
                cfg.setdefault("train", {}).update(v)
            else:
                cfg[k] = v
    if getattr(args, "train_config", None):
        cfg.setdefault("train", {}).update(_read_json(args.train_config, "train config"))
    for key in flag_keys:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    for key in ("epochs", "lr", "batch_size", "optimizer", "lr_decay_epochs"):
        val = getattr(args, key, None)
        if val is not None:
            cfg.setdefault("train", {})[key] = val
    if "seed" in cfg:
        cfg.setdefault("train", {})["seed"] = cfg["seed"]
    cfg["train"] = _train_config(cfg).to_dict()
    return cfg


def package_version() -> str:
    """git-describe style version when run from a checkout, else the package version."""
    try:
        out = subprocess.run(
            ["git", "describe", "--tags", "--always", "--dirty"],
            cwd=Path(__file__).resolve().parent, capture_output=True, text=True, timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="milliseconds")


def write_record(path, command: str, cfg: dict, started: str) -> None:
    record = {"command": command, "config": cfg, "seed": cfg.get("seed"), "version": package_version(),
              "started": started, "finished": _now()}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob.atomic_write(path, (json.dumps(record, indent=1, sort_keys=True) + "\n").encode())


def _record_path(args, command: str, out_dir=None) -> Path:
    if getattr(args, "record", None):
        return Path(args.record)
    if out_dir is not None:
        return Path(out_dir) / "run.json"
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S%fZ")
    return Path(RUNS_DIR) / f"{command}-{stamp}-{os.getpid()}.json"


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


def worker_limit(cells: int) -> int:
    raw = os.environ.get("MADKIT_THREADS")
    if raw is None:
        cap = os.cpu_count() or 1
    else:
        try:
            cap = int(raw)
        except ValueError:
            raise ConfigError(f"MADKIT_THREADS must be an integer, got {raw!r}") from None
        if cap < 1:
            raise ConfigError("MADKIT_THREADS must be >= 1")
    return max(1, min(cap, cells))


# generate ------------------------------------------------------------------------------


def cmd_generate(args) -> int:
    started = _now()
    cfg = resolve_config(args, {"image_size": 16, "train_count": 320, "val_count": 80, "test_count": 200,
                                "source_train_count": 400, "seed": 0}, ["image_size", "train_count", "val_count",
                                                                        "test_count", "source_train_count", "seed"])
    specs = default_benchmark_specs(cfg["image_size"], cfg["train_count"], cfg["val_count"], cfg["test_count"],
                                    cfg["seed"])
    specs[0].train_count = cfg["source_train_count"]
    manifests = generate_synthetic_benchmark(specs, args.out)
    write_record(_record_path(args, "generate", args.out), "generate", cfg, started)
    _emit({"out": str(args.out), "domains": [m.name for m in manifests]})
    return 0


# pretrain --------------------------------------------------------------------------------


def cmd_pretrain(args) -> int:
    started = _now()
    cfg = resolve_config(args, {"seed": 0, "backbone": BackboneSpec().to_dict(), "train": {}}, ["seed"])
    if args.backbone:
        cfg["backbone"] = _read_json(args.backbone, "backbone") if Path(args.backbone).exists() else _inline(args.backbone)
    spec = BackboneSpec.from_dict(cfg["backbone"])
    cfg["backbone"] = spec.to_dict()
    manifest = DatasetManifest.load(args.data)
    data = load_domain(manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model, log = pretrain(spec, data, _train_config(cfg), seed=int(cfg["seed"]), log_path=out / "pretrain_log.jsonl")
    save_checkpoint(model, out)
    _, test_acc = evaluate(model, "source", data.test) if len(data.test) else (None, None)
    write_record(out / "run.json", "pretrain", cfg, started)
    _emit({"checkpoint": str(out), "final_val_acc": log[-1]["val_acc"], "test_acc": test_acc})
    return 0


def _inline(text: str) -> dict:
    try:
        d = json.loads(text)
    except ValueError:
        raise ConfigError(f"--backbone is neither a file nor inline JSON: {text!r}") from None
    if not isinstance(d, dict):
        raise ConfigError("--backbone JSON must be an object")
    return d


# adapt ---------------------------------------------------------------------------------------


def method_label(kind: str, rank) -> str:
    return f"{kind}@I{rank}" if rank is not None and kind in ("mad-fact", "pa-fact", "hybrid") else kind


def adapt_once(checkpoint, data_dir, domain_id, kind: str, cfg: dict, out=None, log_path=None,
               replace: bool = False) -> dict:
    """Register + train one domain; save the updated checkpoint to ``out`` and return a results record.

    ``replace`` drops an already registered domain of the same id first
    (sweep cells start from the checkpoint but never save it).
    """
    model = load_checkpoint(checkpoint)
    manifest = DatasetManifest.load(data_dir)
    data = load_domain(manifest)
    domain_id = str(domain_id or manifest.domain_id)
    rank = cfg.get("rank")
    adapter_cfg = {"seed": int(cfg["seed"]), "scheme": cfg.get("scheme", "ones"),
                   "rank_overflow": cfg.get("rank_overflow", "full"), "budget_split": cfg.get("budget_split", 0.5),
                   "adapt_pointwise": bool(cfg.get("adapt_pointwise", False))}
    if rank is not None:
        adapter_cfg["rank"] = int(rank)
    if replace:
        model.domains.pop(domain_id, None)
    model.register_domain(domain_id, kind, adapter_cfg, data.class_count)
    checksum = model.backbone_checksum()
    log = train_domain(model, domain_id, data, _train_config(cfg), log_path)
    if model.backbone_checksum() != checksum:
        raise MadkitError("backbone changed during adaptation")
    _, acc = evaluate(model, domain_id, data.test)
    db = domain_budget(model, domain_id)
    backbone = model.backbone_param_count()
    record = {
        "method": method_label(kind, rank),
        "adapter": kind,
        "rank": rank,
        "domain": domain_id,
        "seed": int(cfg["seed"]),
        "accuracy": acc,
        "error": 1.0 - acc,
        "val_acc": log[-1]["val_acc"],
        "params_abs": db.adapters,
        "params_rel": db.adapters / backbone,
        "params_rel_with_bn": (db.adapters + db.bn) / backbone,
        "mask_bits": db.mask_bits,
    }
    hybrids = {n: a for n, a in model.domain(domain_id).adapters.items() if isinstance(a, HybridAdapter)}
    if hybrids:
        record["hybrid_split"] = {n: [a.mad.num_params, a.pa.num_params, model.sites[n].in_channels
                                      + model.sites[n].out_channels] for n, a in hybrids.items()}
    if out is not None:
        save_checkpoint(model, out)
    return record


def cmd_adapt(args) -> int:
    started = _now()
    cfg = resolve_config(args, {"seed": 0, "scheme": "ones", "rank": None, "rank_overflow": "full",
                                "budget_split": 0.5, "adapt_pointwise": False, "train": {}},
                         ["seed", "scheme", "rank", "rank_overflow", "budget_split"])
    kind = args.adapter
    if kind in ("mad-fact", "pa-fact", "hybrid") and cfg.get("rank") is None:
        raise ConfigError(f"--adapter {kind} needs --rank")
    if cfg.get("rank") is not None and int(cfg["rank"]) < 1:
        raise ConfigError(f"--rank must be >= 1, got {cfg['rank']}")
    domain_id = str(args.domain or DatasetManifest.load(args.data).domain_id)
    out = Path(args.out or args.checkpoint)
    out.mkdir(parents=True, exist_ok=True)
    record = adapt_once(args.checkpoint, args.data, domain_id, kind, cfg, out,
                        log_path=out / f"adapt_{domain_id}_log.jsonl")
    results = Path(args.results) if args.results else out / "results.jsonl"
    append_result(results, record)
    cfg.update(adapter=kind, domain=record["domain"])
    write_record(out / f"run_adapt_{record['domain']}.json", "adapt", cfg, started)
    _emit(record)
    return 0


# eval / fold -------------------------------------------------------------------------------------


def load_folded(folded_dir, model, domain_id) -> dict:
    folded_dir = Path(folded_dir)
    meta = _read_json(folded_dir / "fold.json", "fold manifest")
    if meta.get("domain") != domain_id:
        raise ConfigError(f"folded weights belong to domain {meta.get('domain')!r}, not {domain_id!r}")
    return {name: blob.load(folded_dir / rel) for name, rel in meta["sites"].items()}


def cmd_eval(args) -> int:
    started = _now()
    cfg = {"checkpoint": str(args.checkpoint), "domain": args.domain, "split": args.split,
           "folded": str(args.folded) if args.folded else None, "seed": None}
    model = load_checkpoint(args.checkpoint)
    manifest = DatasetManifest.load(args.data)
    domain_id = str(args.domain or manifest.domain_id)
    model.domain(domain_id)
    data = load_domain(manifest)
    weights = load_folded(args.folded, model, domain_id) if args.folded else None
    logits, acc = evaluate(model, domain_id, data.split(args.split), weights=weights)
    if args.logits_out:
        blob.save(args.logits_out, logits)
    write_record(_record_path(args, "eval"), "eval", cfg, started)
    _emit({"domain": domain_id, "split": args.split, "accuracy": acc, "n": int(len(logits)),
           "path": "folded" if weights is not None else "adapters"})
    return 0


def cmd_fold(args) -> int:
    started = _now()
    model = load_checkpoint(args.checkpoint)
    domain_id = str(args.domain)
    model.domain(domain_id)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sites = {}
    for name, g in model.folded_weights(domain_id).items():
        rel = f"{name}.mdlt"
        blob.save(out / rel, g)
        sites[name] = rel
    meta = {"domain": domain_id, "backbone_checksum": model.backbone_checksum(), "sites": sites}
    blob.atomic_write(out / "fold.json", json.dumps(meta, indent=1, sort_keys=True).encode())
    write_record(out / "run.json", "fold", {"checkpoint": str(args.checkpoint), "domain": domain_id, "seed": None},
                 started)
    _emit({"domain": domain_id, "out": str(out), "sites": len(sites)})
    return 0


# report -----------------------------------------------------------------------------------------


def _write_or_print(text: str, out) -> None:
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_report(args) -> int:
    started = _now()
    modes = [m for m in ("score_config", "budget", "rank", "heatmap") if getattr(args, m)]
    if len(modes) != 1:
        raise UsageError("choose exactly one of --score-config, --budget, --rank, --heatmap")
    mode = modes[0]
    cfg = {"mode": mode, "results": args.results, "checkpoint": args.checkpoint, "seed": None}
    if mode == "score_config":
        records = read_results(_need(args.results, "--results"))
        config = None if args.score_config == "auto" else ScoreConfig.from_dict(
            _read_json(args.score_config, "score config"))
        _write_or_print(rows_to_csv(score_rows(records, config)), args.out)
    elif mode == "rank":
        table = accuracy_table(read_results(_need(args.results, "--results")))
        ranks = average_rank(table)
        rows = [{"method": m, "average_rank": r} for m, r in sorted(ranks.items(), key=lambda kv: kv[1])]
        _write_or_print(rows_to_csv(rows), args.out)
    elif mode == "budget":
        model = load_checkpoint(_need(args.checkpoint, "--checkpoint"))
        domains = args.domains.split(",") if args.domains else [d for d in model.domains if d != "source"]
        rep = budget(model, include_bn=args.include_bn, include_heads=args.include_heads, domains=domains)
        _write_or_print(rep.to_csv(), args.out)
    else:
        site, domain_id = args.heatmap
        model = load_checkpoint(_need(args.checkpoint, "--checkpoint"))
        dm = model.domain(domain_id)
        if site not in dm.adapters:
            raise DomainLookupError(f"domain {domain_id!r} has no adapter at site {site!r}")
        rep = sparsity_report(dm.adapters[site], args.threshold)
        prefix = Path(_need(args.out, "--out"))
        prefix.parent.mkdir(parents=True, exist_ok=True)
        Path(f"{prefix}.csv").write_text(rep.to_csv())
        Path(f"{prefix}.pgm").write_bytes(rep.to_pgm())
        M, N = rep.heatmap.shape
        _emit({"site": site, "domain": domain_id, "rows": M, "cols": N, "sparsity": rep.sparsity,
               "numerical_rank": rep.numerical_rank, "csv": f"{prefix}.csv", "pgm": f"{prefix}.pgm"})
    write_record(_record_path(args, "report"), "report", cfg, started)
    return 0


def _need(value, flag: str):
    if value is None:
        raise UsageError(f"this report needs {flag}")
    return value


# sweep ------------------------------------------------------------------------------------------


def _sweep_cell(job: tuple) -> dict:
    checkpoint, data_dir, domain, kind, cfg, cell_dir = job
    cell_dir = Path(cell_dir)
    cell_dir.mkdir(parents=True, exist_ok=True)
    rec = adapt_once(checkpoint, data_dir, domain, kind, cfg, out=None, log_path=cell_dir / "log.jsonl",
                     replace=True)
    blob.atomic_write(cell_dir / "result.json", json.dumps(rec, sort_keys=True).encode())
    return rec


def loo_selection(rows: list[dict]) -> list[dict]:
    """For each held-out domain pick the rank with the best mean accuracy on the others."""
    domains = sorted({r["domain"] for r in rows})
    if len(domains) < 2:
        raise ConfigError("leave-one-out budget selection needs at least 2 domains")
    acc = {}
    for r in rows:
        acc.setdefault((r["domain"], r["rank"]), []).append(r["accuracy"])
    ranks = sorted({r["rank"] for r in rows})
    out = []
    for held in domains:
        others = [d for d in domains if d != held]
        score = {i: float(np.mean([np.mean(acc[(d, i)]) for d in others])) for i in ranks}
        best = max(ranks, key=lambda i: (score[i], -i))
        out.append({"held_out": held, "selected_rank": best, "others_mean_accuracy": score[best],
                    "held_out_accuracy": float(np.mean(acc[(held, best)]))})
    return out


def cmd_sweep(args) -> int:
    started = _now()
    cfg = resolve_config(args, {"seed": 0, "scheme": "ones", "rank_overflow": "full", "train": {},
                                "ranks": list(DEFAULT_SWEEP_RANKS)}, ["seed", "scheme", "rank_overflow"])
    if args.ranks:
        cfg["ranks"] = _parse_ranks(args.ranks)
    ranks = sorted({int(i) for i in cfg["ranks"]})
    if not ranks or ranks[0] < 1:
        raise ConfigError(f"sweep ranks must be >= 1, got {ranks}")
    domains = [d for d in args.domains.split(",") if d]
    if not domains:
        raise UsageError("--domains must name at least one domain directory")
    if args.loo and len(domains) < 2:
        raise ConfigError("leave-one-out budget selection needs at least 2 domains")
    data_root = Path(args.data_root)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = []
    for d in domains:
        for i in ranks:
            cell_cfg = dict(cfg, rank=i)
            jobs.append((str(args.checkpoint), str(data_root / d), d, args.adapter, cell_cfg,
                         str(out / "cells" / f"{d}_I{i}")))
    workers = worker_limit(len(jobs))
    if workers == 1:
        rows = [_sweep_cell(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_sweep_cell, jobs))
    results = out / "results.jsonl"
    results.write_text("")
    for r in rows:
        append_result(results, r)
    table = [{"domain": r["domain"], "rank": r["rank"], "params_abs": r["params_abs"], "params_rel": r["params_rel"],
              "accuracy": r["accuracy"]} for r in rows]
    (out / "sweep.csv").write_text(rows_to_csv(table))
    curve = []
    for i in ranks:
        cell = [r for r in rows if r["rank"] == i]
        curve.append({"rank": i, "mean_params_rel": float(np.mean([r["params_rel"] for r in cell])),
                      "mean_accuracy": float(np.mean([r["accuracy"] for r in cell]))})
    (out / "curve.csv").write_text(rows_to_csv(curve))
    summary = {"rows": len(rows), "workers": workers, "out": str(out)}
    if args.loo:
        loo = loo_selection(rows)
        (out / "loo.csv").write_text(rows_to_csv(loo))
        summary["loo"] = loo
    cfg.update(adapter=args.adapter, domains=domains)
    write_record(out / "run.json", "sweep", cfg, started)
    _emit(summary)
    return 0


def _parse_ranks(text: str) -> list[int]:
    try:
        return [int(v) for v in text.replace(" ", "").split(",") if v]
    except ValueError:
        raise UsageError(f"--ranks must be a comma-separated list of integers, got {text!r}") from None


# parser -------------------------------------------------------------------------------------------


def _train_flags(p) -> None:
    p.add_argument("--train-config", help="JSON file with TrainConfig fields")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--optimizer", choices=["sgd", "adamw"])
    p.add_argument("--lr-decay-epochs", type=lambda s: [int(v) for v in s.split(",") if v],
                   help="comma-separated epochs after which the learning rate decays")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="madkit", description="Multi-domain adapters on a frozen backbone.")
    parser.add_argument("--version", action="version", version=f"madkit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="JSON config file; explicit flags take precedence")
        p.add_argument("--record", help="where to write the run record (default depends on the command)")

    p = sub.add_parser("generate", help="render the synthetic source + target benchmark")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--image-size", type=int)
    p.add_argument("--train-count", type=int)
    p.add_argument("--val-count", type=int)
    p.add_argument("--test-count", type=int)
    p.add_argument("--source-train-count", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("pretrain", help="train backbone and source head, then freeze the backbone")
    common(p)
    p.add_argument("--data", required=True, help="source domain directory (with manifest.json)")
    p.add_argument("--backbone", help="BackboneSpec as a JSON file or inline JSON")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--seed", type=int)
    _train_flags(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("adapt", help="register and train one domain")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="domain directory (with manifest.json)")
    p.add_argument("--domain", help="domain id (default: the manifest's)")
    p.add_argument("--adapter", required=True, choices=list(DOMAIN_KINDS))
    p.add_argument("--rank", type=int, help="intermediate dimension I for factorized kinds")
    p.add_argument("--scheme", choices=["ones", "low"])
    p.add_argument("--rank-overflow", choices=["error", "full"])
    p.add_argument("--budget-split", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output checkpoint directory (default: update --checkpoint)")
    p.add_argument("--results", help="results JSONL to append to (default: <out>/results.jsonl)")
    _train_flags(p)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("eval", help="evaluate one domain")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--domain")
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--folded", help="directory written by `madkit fold` to use instead of live adapters")
    p.add_argument("--logits-out", help="write logits as an MDLT blob")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("fold", help="export folded per-site filter banks")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--domain", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fold)

    p = sub.add_parser("report", help="score, budget, rank or heatmap reports")
    common(p)
    p.add_argument("--results")
    p.add_argument("--checkpoint")
    p.add_argument("--score-config", help="JSON {domain: e_max} or 'auto' (twice the finetune error)")
    p.add_argument("--budget", action="store_true")
    p.add_argument("--rank", action="store_true")
    p.add_argument("--heatmap", nargs=2, metavar=("SITE", "DOMAIN"))
    p.add_argument("--threshold", type=float, default=0.1, help="sparsity threshold fraction of mean |alpha|")
    p.add_argument("--include-bn", action="store_true")
    p.add_argument("--include-heads", action="store_true")
    p.add_argument("--domains", help="comma-separated domain ids for --budget")
    p.add_argument("--out", help="output file (heatmap: path prefix)")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("sweep", help="adapt every (domain, I) cell and aggregate accuracy vs budget")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-root", required=True, help="directory holding one sub-directory per domain")
    p.add_argument("--domains", required=True, help="comma-separated domain directory names")
    p.add_argument("--adapter", default="mad-fact", choices=["mad-fact", "pa-fact", "hybrid"])
    p.add_argument("--ranks", help="comma-separated I values (default 2,4,8,16,24,36,48,64,92)")
    p.add_argument("--loo", action="store_true", help="leave-one-out budget selection")
    p.add_argument("--scheme", choices=["ones", "low"])
    p.add_argument("--rank-overflow", choices=["error", "full"])
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    _train_flags(p)
    p.set_defaults(func=cmd_sweep)
    return parser


def _fail(code: int, kind: str, message: str) -> int:
    sys.stderr.write(json.dumps({"error": "usage" if code == 2 else "runtime", "kind": kind,
                                 "message": message}) + "\n")
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        return _fail(2, "UsageError", str(exc))
    except ConfigError as exc:
        return _fail(2, type(exc).__name__, str(exc))
    except MadkitError as exc:
        return _fail(1, type(exc).__name__, str(exc))
    except (OSError, ValueError, KeyError, ArithmeticError) as exc:
        return _fail(1, type(exc).__name__, str(exc))


if __name__ == "__main__":
    sys.exit(main())
