"""Command-line entry point: ``lossmap dataset|explore|graph|analyze|ablate``.

Runs are driven by a YAML config (schema in :data:`DEFAULTS`).  Precedence
is command-line flag > ``LOSSMAP_*`` environment variable > config file >
built-in default.  ``--set section.key=value`` overrides any config key.

Every random stream derives from the root ``seed``: component ``name`` gets
``derive_seed(seed, name)`` unless ``seeds.<name>`` pins it explicitly.

Exit status is 0 on success, 2 for usage or configuration errors and 1 for
runtime failures.  With ``--json`` the only thing on stdout is one JSON
summary object; progress goes to stderr.
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import yaml

from . import data, interpret, landscape, optim, saddle
from .errors import ContractError, FingerprintMismatch, LossmapError
from .model import Architecture, Objective

ENV_PREFIX = "LOSSMAP_"
DB_FILE = "landscape.json"
STATE_FILE = "explore_state.json"
RUN_CONFIG_FILE = "run_config.json"
SUMMARY_FILE = "explore_summary.json"

DEFAULTS: dict = {
    "seed": 0,
    "out_dir": "lossmap-run",
    "workers": None,  # processes; None means all available cores
    "seeds": {},  # optional explicit per-component seeds
    "dataset": {
        "generator": "checkerboard",  # or "csv"
        "samples": 10000,
        "tiles": 4,
        "noise": 0.0,
        "path": None,
        "label_column": -1,
        "has_header": True,
        "standardize": True,
    },
    "architecture": "2-5-2",
    "l2": 1e-4,
    "minimize": {"grad_tol": 1e-6, "max_iters": 2000, "history_size": 10,
                 "initial_step": 1.0, "max_step": 1.0},
    "basin_hop": {"n_steps": 2000, "perturbation_scale": 0.8, "metropolis_temperature": 0.05,
                  "init_scale": 1.0, "walkers": 4, "check_index": True},
    "band": {"n_images": 15, "spring_constant": 1.0, "band_grad_tol": 1e-3,
             "max_band_iters": 500, "climb_after": 20, "time_step": 0.1, "max_move": 0.2},
    "refine": {"ts_grad_tol": 1e-5, "eig_tol": 1e-6, "max_iters": 200, "trust_radius": 0.1,
               "max_trust": 0.5, "hessian_every": 5, "displacement": 1e-3},
    "connect": {"budget": 50, "focus_global": False},
    "graph": {"n_levels": 25, "formats": ["json", "svg"]},
    "analysis": {"n": 0.01, "min_group_size": 2},
    "ablation": {"trials": 20},
}


class UsageError(LossmapError):
    """Bad command line or configuration (exit status 2)."""


def derive_seed(root: int, component: str) -> int:
    """Seed for one component, independent of every other component's use."""
    digest = hashlib.sha256(f"{int(root)}/{component}".encode()).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def component_seed(cfg: dict, component: str) -> int:
    pinned = cfg.get("seeds", {}).get(component)
    return int(pinned) if pinned is not None else derive_seed(cfg["seed"], component)


# configuration

def _merge(base: dict, extra: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in extra.items():
        if key not in base:
            raise UsageError(f"unknown config key {where}{key}")
        if isinstance(base[key], dict) and key != "seeds":
            if not isinstance(value, dict):
                raise UsageError(f"config key {where}{key} must be a mapping")
            out[key] = _merge(base[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


def _set_path(cfg: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = cfg
    for key in keys[:-1]:
        if not isinstance(node.get(key), dict):
            raise UsageError(f"unknown config key {dotted}")
        node = node[key]
    if keys[-1] not in node and node is not cfg.get("seeds"):
        raise UsageError(f"unknown config key {dotted}")
    node[keys[-1]] = value


def load_config(path=None, overrides=(), seed=None, out_dir=None, workers=None,
                environ=os.environ) -> dict:
    """Resolve the effective configuration."""
    path = path or environ.get(ENV_PREFIX + "CONFIG")
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        try:
            doc = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from None
        if not isinstance(doc, dict):
            raise UsageError(f"config {path} must be a mapping")
        cfg = _merge(cfg, doc)
    for name, key in (("SEED", "seed"), ("OUT_DIR", "out_dir"), ("WORKERS", "workers")):
        if ENV_PREFIX + name in environ:
            cfg[key] = yaml.safe_load(environ[ENV_PREFIX + name])
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, raw = item.split("=", 1)
        _set_path(cfg, key.strip(), yaml.safe_load(raw))
    for key, value in (("seed", seed), ("out_dir", out_dir), ("workers", workers)):
        if value is not None:
            cfg[key] = value
    validate_config(cfg)
    return cfg


def _cores() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1


def validate_config(cfg: dict) -> None:
    try:
        cfg["seed"] = int(cfg["seed"])
        if cfg["workers"] is not None and int(cfg["workers"]) < 1:
            raise UsageError("workers must be >= 1")
        ds = cfg["dataset"]
        if ds["generator"] == "checkerboard":
            if int(ds["samples"]) < 1 or int(ds["tiles"]) < 1:
                raise UsageError("dataset.samples and dataset.tiles must be >= 1")
            if not 0.0 <= float(ds["noise"]) < 1.0:
                raise UsageError("dataset.noise must lie in [0, 1)")
        elif ds["generator"] == "csv":
            if not ds["path"] or not Path(ds["path"]).is_file():
                raise UsageError(f"dataset.path {ds['path']!r} does not exist")
        else:
            raise UsageError("dataset.generator must be 'checkerboard' or 'csv'")
        Architecture.parse(str(cfg["architecture"]))
        if not float(cfg["l2"]) >= 0:
            raise UsageError("l2 must be >= 0")
        _configs(cfg)
        if int(cfg["basin_hop"]["walkers"]) < 1:
            raise UsageError("basin_hop.walkers must be >= 1")
        if int(cfg["connect"]["budget"]) < 0:
            raise UsageError("connect.budget must be >= 0")
        if int(cfg["graph"]["n_levels"]) < 2:
            raise UsageError("graph.n_levels must be >= 2")
        bad = set(cfg["graph"]["formats"]) - {"json", "dot", "svg"}
        if bad:
            raise UsageError(f"unknown graph formats {sorted(bad)}")
        if not float(cfg["analysis"]["n"]) >= 0:
            raise UsageError("analysis.n must be >= 0")
        if int(cfg["ablation"]["trials"]) < 0:
            raise UsageError("ablation.trials must be >= 0")
    except (TypeError, ValueError, KeyError) as exc:
        raise UsageError(f"invalid config: {exc}") from None


def _configs(cfg: dict):
    hop = {k: v for k, v in cfg["basin_hop"].items() if k not in ("walkers", "check_index")}
    return (optim.MinimizeConfig(**cfg["minimize"]),
            optim.BasinHopConfig(seed=component_seed(cfg, "basin_hop"), **hop),
            saddle.BandConfig(**cfg["band"]),
            saddle.RefineConfig(**cfg["refine"]))


def build_dataset(cfg: dict) -> data.Dataset:
    ds = cfg["dataset"]
    if ds["generator"] == "checkerboard":
        out = data.gen_checkerboard(int(ds["samples"]), int(ds["tiles"]), float(ds["noise"]),
                                    seed=component_seed(cfg, "dataset"))
    else:
        out = data.load_csv(ds["path"], ds["label_column"], bool(ds["has_header"]))
    return data.standardize(out) if ds["standardize"] else out


def build_objective(cfg: dict) -> Objective:
    arch = Architecture.parse(str(cfg["architecture"]))
    return Objective(arch, build_dataset(cfg), l2=float(cfg["l2"]))


# output helpers

class Output:
    def __init__(self, as_json: bool):
        self.as_json = as_json

    def say(self, text: str) -> None:
        print(text, file=sys.stderr if self.as_json else sys.stdout, flush=True)

    def finish(self, summary: dict) -> None:
        if self.as_json:
            print(json.dumps(summary, sort_keys=True), flush=True)


def _write(path: Path, payload: bytes) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        landscape.atomic_write(path, payload)
    except OSError as exc:
        raise LossmapError(f"cannot write {path}: {exc}") from None


def _dump(doc) -> bytes:
    return (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode()


def _out_dir(cfg: dict) -> Path:
    return Path(cfg["out_dir"])


def _report_dir(args, cfg: dict) -> Path:
    """Where a command writes: --out-dir if given, else beside --db, else the run directory."""
    if args.out_dir is None and getattr(args, "db", None):
        return Path(args.db).parent
    return _out_dir(cfg)


def _db_path(args, cfg: dict) -> Path:
    return Path(args.db) if getattr(args, "db", None) else _out_dir(cfg) / DB_FILE


def _load_db(path: Path) -> landscape.LandscapeDatabase:
    if not path.is_file():
        raise UsageError(f"no landscape database at {path}")
    return landscape.LandscapeDatabase.load(path)


def _run_config(args) -> dict:
    """Config for commands that need the data: explicit, else the explore run's record."""
    if args.config or os.environ.get(ENV_PREFIX + "CONFIG"):
        return load_config(args.config, args.set, args.seed, args.out_dir, args.workers)
    probe = load_config(None, args.set, args.seed, args.out_dir, args.workers)
    db_dir = Path(args.db).parent if getattr(args, "db", None) else _out_dir(probe)
    recorded = db_dir / RUN_CONFIG_FILE
    if not recorded.is_file():
        return probe
    cfg = _merge(DEFAULTS, json.loads(recorded.read_text()))
    for item in args.set:
        key, raw = item.split("=", 1)
        _set_path(cfg, key.strip(), yaml.safe_load(raw))
    for key, value in (("seed", args.seed), ("out_dir", args.out_dir), ("workers", args.workers)):
        if value is not None:
            cfg[key] = value
    validate_config(cfg)
    return cfg


# commands

def cmd_dataset(args, out: Output) -> dict:
    if args.kind != "checkerboard":
        raise UsageError(f"unknown dataset kind {args.kind!r}")
    if args.tiles < 1:
        raise UsageError("--tiles must be >= 1")
    if args.samples < 1:
        raise UsageError("--samples must be >= 1")
    if not 0.0 <= args.noise < 1.0:
        raise UsageError("--noise must lie in [0, 1)")
    root = int(os.environ.get(ENV_PREFIX + "SEED", 0)) if args.seed is None else args.seed
    # same stream as the dataset an explore run with this root seed generates
    seed = derive_seed(root, "dataset")
    ds = data.gen_checkerboard(args.samples, args.tiles, args.noise, seed=seed)
    path = Path(args.out)
    try:
        if path.parent and not path.parent.exists():
            path.parent.mkdir(parents=True)
        data.save_csv(ds, path)
    except OSError as exc:
        raise LossmapError(f"cannot write {path}: {exc}") from None
    out.say(f"wrote {len(ds)} rows to {path}")
    return {"command": "dataset", "path": str(path), "rows": len(ds), "seed": root,
            "dataset_seed": seed, "digest": ds.digest}


def cmd_explore(args, out: Output) -> dict:
    cfg = load_config(args.config, args.set, args.seed, args.out_dir, args.workers)
    objective = build_objective(cfg)
    mcfg, hcfg, bcfg, rcfg = _configs(cfg)
    root = _out_dir(cfg)
    db_path, state_path = root / DB_FILE, root / STATE_FILE
    walkers = int(cfg["basin_hop"]["walkers"])
    budget = int(cfg["connect"]["budget"])
    run_record = {k: v for k, v in cfg.items() if k not in ("out_dir", "workers")}

    if args.resume and db_path.is_file():
        db = landscape.LandscapeDatabase.load(db_path)
        try:
            db.check(objective.fingerprint)
        except FingerprintMismatch as exc:
            raise LossmapError(f"{exc}; refusing to resume into {db_path}") from None
        state = json.loads(state_path.read_text()) if state_path.is_file() else {}
        if state.get("run") not in (None, run_record):
            raise LossmapError(f"{db_path} was produced by a different configuration; "
                               "refusing to resume")
    else:
        if db_path.is_file():
            try:
                landscape.LandscapeDatabase.load(db_path, fingerprint=objective.fingerprint)
            except FingerprintMismatch:
                raise LossmapError(f"{db_path} holds a landscape of a different model or "
                                   "dataset; refusing to overwrite it (choose another "
                                   "--out-dir)") from None
        db = landscape.LandscapeDatabase.for_objective(objective)
        state = {}
    state.setdefault("walkers_done", [])
    state.setdefault("tried", [])
    state["run"] = run_record

    def checkpoint():
        _write(db_path, _dump(db.to_dict()))
        _write(state_path, _dump(state))

    _write(root / RUN_CONFIG_FILE, _dump(run_record))
    started = time.perf_counter()
    pending = [i for i in range(walkers) if i not in state["walkers_done"]]
    if pending:
        out.say(f"basin hopping: {hcfg.n_steps} steps over {walkers} walkers "
                f"({len(pending)} to run)")

        def walker_done(index, trace):
            state["walkers_done"] = sorted(state["walkers_done"] + [index])
            checkpoint()
            out.say(f"walker {index}: {sum(s.converged for s in trace)} converged quenches, "
                    f"{len(db)} minima so far ({time.perf_counter() - started:.1f} s)")

        optim.basin_hop(objective, hcfg, db, mcfg, n_walkers=walkers,
                        workers=int(cfg["workers"] or _cores()),
                        check_index=bool(cfg["basin_hop"]["check_index"]),
                        only=pending, on_walker=walker_done)

    tried = {tuple(p) for p in state["tried"]}
    remaining = budget - len(tried)
    if remaining > 0 and len(db) >= 2:
        def attempt_done(attempt):
            state["tried"] = sorted([list(p) for p in tried])
            checkpoint()

        saddle.connect_landscape(objective, db, remaining, bcfg, rcfg, report=out.say,
                                 tried=tried, on_attempt=attempt_done,
                                 focus_global=bool(cfg["connect"]["focus_global"]))
    checkpoint()

    summary = explore_summary(objective, db)
    _write(root / SUMMARY_FILE, _dump(summary))
    out.say(f"minima {summary['minima']}, transition states {summary['transition_states']}, "
            f"components {summary['components']}, best loss {summary['best_loss']:.6f}, "
            f"best AUC {summary['best_auc']:.4f} "
            f"({time.perf_counter() - started:.1f} s)")
    return {"command": "explore", "db": str(db_path), **summary}


def explore_summary(objective: Objective, db: landscape.LandscapeDatabase) -> dict:
    if not db.minima:
        return {"minima": 0, "transition_states": 0, "components": 0, "best_loss": None,
                "best_minimum": None, "best_auc": None, "max_auc": None}
    best = db.global_minimum
    aucs = [objective.auc(m.params) for m in db.minima]
    return {"minima": len(db), "transition_states": len(db.transition_states),
            "components": len(db.components()), "best_loss": best.loss_value,
            "best_minimum": best.id, "best_auc": objective.auc(best.params),
            "max_auc": max(aucs)}


def cmd_graph(args, out: Output) -> dict:
    cfg = load_config(args.config, args.set, args.seed, args.out_dir, args.workers)
    db = _load_db(_db_path(args, cfg))
    n_levels = args.levels or int(cfg["graph"]["n_levels"])
    formats = args.format or list(cfg["graph"]["formats"])
    graph = landscape.build_disconnectivity(db, n_levels)
    stem = Path(args.out) if args.out else _report_dir(args, cfg) / "graph"
    files = []
    for fmt in formats:
        path = stem.with_suffix("." + fmt)
        _write(path, landscape.emit_graph(graph, db, fmt))
        files.append(str(path))
    roster = graph.roster()
    for label, count in roster:
        out.say(f"{label}\t{count}")
    return {"command": "graph", "files": files, "n_levels": n_levels,
            "roster": [{"group": label, "members": count} for label, count in roster]}


def _group(db, n_levels: int, label: str):
    graph = landscape.build_disconnectivity(db, n_levels)
    try:
        level, index = landscape.parse_group_label(label)
    except ContractError as exc:
        raise UsageError(f"{exc}; available: {', '.join(graph.labels())}") from None
    if f"{level}_{index}" not in graph.nodes:
        raise UsageError(f"no group {label}; available: {', '.join(graph.labels())}")
    return graph, level, index


def cmd_analyze(args, out: Output) -> dict:
    cfg = load_config(args.config, args.set, args.seed, args.out_dir, args.workers)
    db = _load_db(_db_path(args, cfg))
    n = float(cfg["analysis"]["n"]) if args.n is None else args.n
    if not n >= 0:
        raise UsageError("n must be >= 0")
    graph, level, index = _group(db, args.levels or int(cfg["graph"]["n_levels"]), args.group)
    report = interpret.conserved_weights(db, graph, level, index, n)
    relevance = interpret.input_relevance(report, db.arch)
    doc = report.to_dict()
    doc["input_relevance"] = [{"input": r.input_node, "count": r.count,
                               "edges": [str(e) for e in r.edges]} for r in relevance]
    stem = _report_dir(args, cfg) / f"analysis_{report.group_label}"
    table = report.to_table()
    if relevance:
        table += "".join(f"input {r.input_node}: {r.count} conserved edges\n" for r in relevance)
    _write(stem.with_suffix(".json"), _dump(doc))
    _write(stem.with_suffix(".txt"), table.encode())
    out.say(table.rstrip("\n"))
    if report.member_count < int(cfg["analysis"]["min_group_size"]):
        out.say(f"note: group has fewer than {cfg['analysis']['min_group_size']} minima")
    return {"command": "analyze", "group": report.group_label, "n": n,
            "members": report.member_count, "conserved": len(report.conserved),
            "trivially_conserved": report.trivially_conserved,
            "files": [str(stem.with_suffix(".json")), str(stem.with_suffix(".txt"))]}


def cmd_ablate(args, out: Output) -> dict:
    cfg = _run_config(args)
    db = _load_db(_db_path(args, cfg))
    objective = build_objective(cfg)
    db.check(objective.fingerprint)
    n = float(cfg["analysis"]["n"]) if args.n is None else args.n
    graph, level, index = _group(db, args.levels or int(cfg["graph"]["n_levels"]), args.group)
    report = interpret.conserved_weights(db, graph, level, index, n)
    if report.trivially_conserved and not args.allow_trivial:
        raise UsageError(f"group {report.group_label} has a single minimum, so its conserved "
                         "set is vacuous; pass --allow-trivial to ablate anyway")
    trials = int(cfg["ablation"]["trials"]) if args.trials is None else args.trials
    seed = component_seed(cfg, "ablate")
    result = interpret.ablation_experiment(objective, db, report, trials, seed)
    stem = _report_dir(args, cfg) / f"ablation_{report.group_label}"
    _write(stem.with_suffix(".json"), result.to_json())
    _write(stem.with_suffix(".txt"), result.to_table().encode())
    out.say(result.to_table().rstrip("\n"))
    doc = result.to_dict()
    return {"command": "ablate", "group": report.group_label, "trials": trials,
            "baseline_auc": doc["baseline_auc"], "ablated": doc["ablated_auc_stats"],
            "control": doc["random_control_stats"], "gap": doc["gap"],
            "files": [str(stem.with_suffix(".json")), str(stem.with_suffix(".txt"))]}


# argument parsing

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(2)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML config file (env LOSSMAP_CONFIG)")
    p.add_argument("--seed", type=int, help="root seed (env LOSSMAP_SEED)")
    p.add_argument("--out-dir", help="output directory (env LOSSMAP_OUT_DIR)")
    p.add_argument("--workers", type=int, help="worker processes (env LOSSMAP_WORKERS)")
    p.add_argument("--json", action="store_true", help="print a JSON summary on stdout")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key, e.g. basin_hop.n_steps=200")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lossmap", description="Loss-landscape exploration of small networks.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("dataset", help="generate a synthetic dataset as CSV")
    p.add_argument("kind", choices=["checkerboard"])
    p.add_argument("--samples", type=int, default=10000)
    p.add_argument("--tiles", type=int, default=4)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--out", required=True)
    _common(p)

    p = sub.add_parser("explore", help="basin hopping then transition-state connection")
    p.add_argument("--resume", action="store_true", help="continue a partial run in --out-dir")
    _common(p)

    p = sub.add_parser("graph", help="disconnectivity graph of a database")
    p.add_argument("--db", help=f"database file (default OUT_DIR/{DB_FILE})")
    p.add_argument("--levels", type=int)
    p.add_argument("--format", action="append", choices=["json", "dot", "svg"])
    p.add_argument("--out", help="output path stem (default OUT_DIR/graph)")
    _common(p)

    for name, text in (("analyze", "conserved weights of one group"),
                       ("ablate", "ablation experiment on one group's conserved weights")):
        p = sub.add_parser(name, help=text)
        p.add_argument("group", help="group label LEVEL_NODE, e.g. 25_7")
        p.add_argument("--db", help=f"database file (default OUT_DIR/{DB_FILE})")
        p.add_argument("--levels", type=int)
        p.add_argument("-n", type=float, help="sigma threshold (default 0.01)")
        if name == "ablate":
            p.add_argument("--trials", type=int)
            p.add_argument("--allow-trivial", action="store_true")
        _common(p)
    return parser


COMMANDS = {"dataset": cmd_dataset, "explore": cmd_explore, "graph": cmd_graph,
            "analyze": cmd_analyze, "ablate": cmd_ablate}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # usage errors and --help
        return exc.code if isinstance(exc.code, int) else 2
    out = Output(args.json)
    try:
        if getattr(args, "levels", None) is not None and args.levels < 2:
            raise UsageError("--levels must be >= 2")
        summary = COMMANDS[args.command](args, out)
    except (UsageError, ContractError) as exc:
        print(f"lossmap {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (LossmapError, OSError) as exc:
        print(f"lossmap {args.command}: {exc}", file=sys.stderr)
        return 1
    out.finish(summary)
    return 0


if __name__ == "__main__":
    sys.exit(main())
