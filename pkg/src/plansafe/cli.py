"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime failure. All randomness flows
from ``--seed``; ``--config`` loads a RunConfig JSON whose unknown keys are
rejected, and flags override it. Each run logs the resolved config and its hash
and writes it to ``run_config.json`` under ``--out``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .config import canonical_json, config_hash, from_dict, to_dict
from .datagen import DataConfig
from .planner import TreeConfig
from .qmonitor import HeatmapSpec, ModelConfig, TrainConfig
from .reachability import FRTConfig, GameConfig
from .rules import RuleConfig

log = logging.getLogger("plansafe")

COMMANDS = ("gen-scenes", "gen-data", "reach-precompute", "train", "eval", "monitor", "heatmap", "bench")
METHODS = ("monitor", "frt3d", "frt4d", "game")


@dataclass(frozen=True)
class EvalConfig:
    methods: tuple = METHODS
    mapping: str = "unsafe-critical"
    n_boot: int = 1000

    def check(self):
        from .evalx import BINARY_MAPS

        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ValueError(f"unknown methods {bad}; choose from {list(METHODS)}")
        if self.mapping not in BINARY_MAPS:
            raise ValueError(f"mapping must be one of {list(BINARY_MAPS)}")
        if self.n_boot < 0:
            raise ValueError("n_boot must be >= 0")


@dataclass(frozen=True)
class BenchConfig:
    n_plans: int = 256
    repeats: int = 5
    warmup: int = 1


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    threads: int = 1
    data: DataConfig = field(default_factory=DataConfig)
    tree: TreeConfig = field(default_factory=TreeConfig)
    rules: RuleConfig = field(default_factory=RuleConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    frt: FRTConfig = field(default_factory=FRTConfig)
    game: GameConfig = field(default_factory=GameConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    heatmap: HeatmapSpec = field(default_factory=HeatmapSpec)
    bench: BenchConfig = field(default_factory=BenchConfig)

    def check(self):
        if self.threads < 1:
            raise ValueError("threads must be >= 1")


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common(p):
    p.add_argument("--seed", type=int, default=None, help="master random seed (default: config value, 0)")
    p.add_argument("--threads", type=int, default=None, help="cap on numeric library threads (default: 1)")
    p.add_argument("--config", type=Path, default=None, help="RunConfig JSON; unknown keys are rejected")
    p.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"], help="logging verbosity")


def build_parser() -> Parser:
    parser = Parser(prog="plansafe", description="Plan-safety monitoring workbench.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=Parser)
    sub.required = True

    p = sub.add_parser("gen-scenes", help="write synthetic scenes as JSON")
    _common(p)
    p.add_argument("--n", type=int, required=True, help="number of scenes")
    p.add_argument("--out", type=Path, required=True, help="output directory")

    p = sub.add_parser("gen-data", help="generate a labeled dataset (JSONL + meta.json)")
    _common(p)
    p.add_argument("--n", type=int, required=True, help="number of samples")
    p.add_argument("--out", type=Path, required=True, help="output JSONL path; meta.json goes next to it")
    p.add_argument("--sigma-pos", type=float, default=None, help="std-dev of the failure offset around the ego (m)")
    p.add_argument("--radius", type=float, default=None, help="radius for nearby-agent lookup (m)")
    p.add_argument("--p-no-failure", type=float, default=None, help="probability of a sample without failure")
    p.add_argument("--store-plans", action="store_true", help="store plan states in each record")

    p = sub.add_parser("reach-precompute", help="solve and store reachability value grids (VGRD)")
    _common(p)
    p.add_argument("--out", type=Path, required=True, help="output directory for .vgrd files")
    p.add_argument("--kinds", default="frt3d,frt4d,game", help="comma list from frt3d, frt4d, game")

    p = sub.add_parser("train", help="train the learned monitor")
    _common(p)
    p.add_argument("--data", type=Path, required=True, help="dataset JSONL")
    p.add_argument("--out", type=Path, required=True, help="output directory (model.spqm, train_log.jsonl)")
    p.add_argument("--epochs", type=int, default=None, help="training epochs")
    p.add_argument("--lr", type=float, default=None, help="Adam learning rate")
    p.add_argument("--batch", type=int, default=None, help="scenes per optimizer step")
    p.add_argument("--plans-per-scene", type=int, default=None, help="plans sampled per scene per step")

    p = sub.add_parser("eval", help="compare the monitor with reachability baselines")
    _common(p)
    p.add_argument("--data", type=Path, required=True, help="evaluation dataset JSONL")
    p.add_argument("--checkpoint", type=Path, default=None, help="monitor checkpoint (needed for method 'monitor')")
    p.add_argument("--tables", type=Path, default=None, help="directory written by reach-precompute")
    p.add_argument("--out", type=Path, required=True, help="output directory (metrics.csv, confusion_<method>.csv)")
    p.add_argument("--methods", default=None, help=f"comma list from {', '.join(METHODS)}")
    p.add_argument("--mapping", default=None, help="binary verdict mapping: unsafe-critical or unsafe-nonsafe")
    p.add_argument("--n-boot", type=int, default=None, help="bootstrap resamples for confidence intervals")
    p.add_argument("--filter-data", type=Path, default=None, help="failure-free dataset for the filter study")

    p = sub.add_parser("monitor", help="classify the planner's choice on one scene and repair it")
    _common(p)
    p.add_argument("--scene", type=Path, required=True, help="perceived scene JSON")
    p.add_argument("--checkpoint", type=Path, required=True, help="monitor checkpoint")
    p.add_argument("--failure", default=None, help='missed agent as "x,y,theta,v" (omit for none)')
    p.add_argument("--kind", default="vehicle", choices=["vehicle", "pedestrian"], help="missed agent kind")
    p.add_argument("--out", type=Path, default=None, help="optional output directory for verdict.json")

    p = sub.add_parser("heatmap", help="class grid over monitor positions")
    _common(p)
    p.add_argument("--scene", type=Path, required=True, help="perceived scene JSON")
    p.add_argument("--checkpoint", type=Path, required=True, help="monitor checkpoint")
    p.add_argument("--out", type=Path, required=True, help="output directory (grid.csv, grid.svg)")
    p.add_argument("--resolution", type=float, default=None, help="cell size (m)")
    p.add_argument("--speed", type=float, default=None, help="monitor agent speed (m/s)")
    p.add_argument("--heading", default=None, choices=["oncoming", "along"], help="monitor heading relative to the route")
    p.add_argument("--svg", action="store_true", help="also render grid.svg")

    p = sub.add_parser("bench", help="throughput of batched prediction and repair")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True, help="monitor checkpoint")
    p.add_argument("--scene", type=Path, default=None, help="scene JSON (default: generated from --seed)")
    p.add_argument("--out", type=Path, required=True, help="output directory (bench.json)")
    p.add_argument("--repeats", type=int, default=None, help="timed repetitions")
    return parser


# ---------------------------------------------------------------- config resolution


def _override(cfg: RunConfig, args) -> RunConfig:
    def maybe(obj, **kw):
        kw = {k: v for k, v in kw.items() if v is not None}
        return replace(obj, **kw) if kw else obj

    cfg = maybe(cfg, seed=args.seed, threads=args.threads)
    c = args.command
    if c == "gen-data":
        cfg = replace(cfg, data=maybe(cfg.data, sigma_pos=args.sigma_pos, radius=args.radius, p_no_failure=args.p_no_failure, store_plans=True if args.store_plans else None))
    elif c == "train":
        cfg = replace(cfg, train=maybe(cfg.train, epochs=args.epochs, lr=args.lr, batch=args.batch, plans_per_scene=args.plans_per_scene, seed=args.seed))
    elif c == "eval":
        methods = tuple(m.strip() for m in args.methods.split(",")) if args.methods else None
        cfg = replace(cfg, eval=maybe(cfg.eval, methods=methods, mapping=args.mapping, n_boot=args.n_boot))
    elif c == "heatmap":
        cfg = replace(cfg, heatmap=maybe(cfg.heatmap, resolution=args.resolution, speed=args.speed, heading=args.heading))
    elif c == "bench":
        cfg = replace(cfg, bench=maybe(cfg.bench, repeats=args.repeats))
    _check_all(cfg)
    return cfg


def _check_all(obj):
    import dataclasses

    if dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            _check_all(getattr(obj, f.name))
        check = getattr(obj, "check", None)
        if callable(check):
            check()


def resolve_config(args) -> RunConfig:
    data = {}
    if args.config is not None:
        with open(args.config) as fh:
            data = json.load(fh)
    cfg = from_dict(RunConfig, data, "config")
    return _override(cfg, args)


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------- commands


def cmd_gen_scenes(args, cfg: RunConfig):
    from .datagen import scene_seed
    from .scene import generate_scene, scene_to_dict

    if args.n < 1:
        raise UsageError("--n must be >= 1")
    args.out.mkdir(parents=True, exist_ok=True)
    for i in range(args.n):
        scene = generate_scene(scene_seed(cfg.seed, i), cfg.data.scene)
        _write_json(args.out / f"scene_{i:05d}.json", scene_to_dict(scene))
    log.info("wrote %d scenes to %s", args.n, args.out)


def cmd_gen_data(args, cfg: RunConfig):
    from .datagen import collect, write_dataset

    if args.n < 1:
        raise UsageError("--n must be >= 1")
    stats = {}
    samples = collect(args.n, cfg.seed, cfg.data, cfg.tree, cfg.rules, stats)
    meta = write_dataset(samples, args.out, cfg.seed, cfg.data, {"skipped": stats["skipped"], "run_config_hash": config_hash(cfg)})
    log.info("wrote %d samples (%d plans) to %s; classes %s", meta["n_samples"], meta["n_plans"], args.out, meta["class_histogram"])


def cmd_reach_precompute(args, cfg: RunConfig):
    from .reachability import save_family, solve_frt_family, solve_game_family

    kinds = [k.strip() for k in args.kinds.split(",") if k.strip()]
    bad = [k for k in kinds if k not in ("frt3d", "frt4d", "game")]
    if bad or not kinds:
        raise UsageError(f"--kinds must be a comma list from frt3d, frt4d, game (got {args.kinds!r})")
    for k in kinds:
        if k == "game":
            fam = solve_game_family(cfg.game, cfg.tree.bounds)
        else:
            fam = solve_frt_family(k[3:], cfg.frt, cfg.tree.bounds)
        paths = save_family(fam, args.out, k)
        log.info("%s: wrote %d value grids", k, len(paths))


def cmd_train(args, cfg: RunConfig):
    from . import qmonitor as Q
    from .datagen import read_dataset, split_by_scene

    samples = read_dataset(args.data)
    train, val = split_by_scene(samples, cfg.train.val_fraction, cfg.seed)
    if not train:
        raise ValueError("training split is empty")
    log.info("train %d samples, val %d samples", len(train), len(val))
    enc_train = [Q.encode_sample(s, cfg.model) for s in train]
    enc_val = [Q.encode_sample(s, cfg.model) for s in val]
    model, history = Q.train(enc_train, enc_val, cfg.model, cfg.train)
    args.out.mkdir(parents=True, exist_ok=True)
    Q.save_checkpoint(model, args.out / "model.spqm", {"run_config_hash": config_hash(cfg)})
    with open(args.out / "train_log.jsonl", "w") as fh:
        for rec in history:
            rec = {k: v for k, v in rec.items() if k != "seconds"}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    log.info("saved %s (%d parameters)", args.out / "model.spqm", model.n_parameters)


def _load_tables(tables: Optional[Path], kind: str):
    from .reachability import load_frt_family, load_game_family

    if tables is None:
        raise FileNotFoundError(f"method {kind} needs value tables: run `plansafe reach-precompute --out DIR` and pass --tables DIR")
    if kind == "game":
        return load_game_family(tables, "game")
    return load_frt_family(tables, kind)


def cmd_eval(args, cfg: RunConfig):
    from . import evalx
    from .datagen import read_dataset
    from .estimators import FRTBaseline, GameBaseline, SafetyMonitor
    from .qmonitor import load_checkpoint

    samples = read_dataset(args.data)
    methods, binary = {}, []
    for m in cfg.eval.methods:
        if m == "monitor":
            if args.checkpoint is None:
                raise UsageError("method 'monitor' needs --checkpoint")
            methods[m] = SafetyMonitor(model=load_checkpoint(args.checkpoint))
        elif m == "game":
            methods[m] = GameBaseline(_load_tables(args.tables, m)).fit()
            binary.append(m)
        else:
            methods[m] = FRTBaseline(_load_tables(args.tables, m), cfg.rules.d_col).fit()
            binary.append(m)
    res = evalx.compare(samples, methods, binary, cfg.eval.mapping, cfg.eval.n_boot, cfg.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    evalx.write_metrics_csv(res["candidate"], args.out / "metrics.csv")
    evalx.write_metrics_csv(res["all"], args.out / "metrics_all.csv")
    mask = res["candidate_mask"]
    for name, r in res["results"].items():
        evalx.write_confusion_csv(evalx.confusion(r.y_true[mask], r.y_pred[mask]), args.out / f"confusion_{name}.csv")
        evalx.write_confusion_csv(evalx.confusion(r.y_true, r.y_pred), args.out / f"confusion_all_{name}.csv")
    for name, rep in res["candidate"].items():
        log.info("%s: macro acc %.3f f1 %.3f critical recall %.3f", name, rep.accuracy, rep.f1, rep.per_class["Critical"]["recall"])
    if args.filter_data is not None:
        if "monitor" not in methods:
            raise UsageError("--filter-data needs method 'monitor'")
        rep = evalx.filter_study(read_dataset(args.filter_data), methods["monitor"], cfg.eval.n_boot, cfg.seed)
        _write_json(args.out / "filter.json", {"flagged": rep.flagged, "support": rep.support, "ci": list(rep.ci)})
        log.info("filter study: %.3f of %d critical plans flagged", rep.flagged, rep.support)


def _parse_failure(text: Optional[str], kind: str):
    from .scene import AgentState, MonitorInput

    if text is None:
        return MonitorInput.absent()
    try:
        x, y, th, v = (float(t) for t in text.split(","))
    except ValueError:
        raise UsageError('--failure must be "x,y,theta,v"') from None
    return MonitorInput.of(AgentState.of_kind(x, y, th, v, kind))


def _load_scene(path: Path):
    from .scene import loads_scene

    with open(path) as fh:
        return loads_scene(fh.read())


def cmd_monitor(args, cfg: RunConfig):
    from .planner import rh_plan
    from .qmonitor import load_checkpoint, repair
    from .rules import SafetyClass

    scene = _load_scene(args.scene)
    failure = _parse_failure(args.failure, args.kind)
    model = load_checkpoint(args.checkpoint)
    candidate, tree, _ = rh_plan(scene, None, cfg.rules, cfg.tree)
    cand_pred = model.predict_one(scene, failure, candidate)
    plan, verdict, index = repair(model, scene, failure, candidate, tree)
    out = {
        "class": SafetyClass(int(verdict)).label,
        "candidate_class": SafetyClass(int(cand_pred.classes)).label,
        "candidate_probs": [float(p) for p in cand_pred.probs],
        "repaired": index is not None,
    }
    if index is not None:
        out["leaf"] = index
        out["repaired_plan"] = plan.to_rows()
    text = json.dumps(out, sort_keys=True)
    print(text)
    if args.out is not None:
        _write_json(args.out / "verdict.json", out)


def write_svg(classes, xs, ys, path) -> None:
    colors = {0: "#4caf50", 1: "#ffb300", 2: "#e53935"}
    ny, nx = classes.shape
    cell = 8
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{nx * cell}" height="{ny * cell}">']
    for i in range(ny):
        for j in range(nx):
            # ego-frame +y (left) drawn upward
            parts.append(f'<rect x="{j * cell}" y="{(ny - 1 - i) * cell}" width="{cell}" height="{cell}" fill="{colors[int(classes[i, j])]}"/>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")


def cmd_heatmap(args, cfg: RunConfig):
    from .planner import rh_plan
    from .qmonitor import heatmap, load_checkpoint
    from .rules import SafetyClass

    scene = _load_scene(args.scene)
    model = load_checkpoint(args.checkpoint)
    candidate, _, _ = rh_plan(scene, None, cfg.rules, cfg.tree)
    classes, world, xs, ys = heatmap(model, scene, candidate, cfg.heatmap)
    args.out.mkdir(parents=True, exist_ok=True)
    with open(args.out / "grid.csv", "w") as fh:
        fh.write("x_local,y_local,x,y,class\n")
        for i, y in enumerate(ys):
            for j, x in enumerate(xs):
                wx, wy = world[i, j]
                fh.write(f"{x:.3f},{y:.3f},{wx:.3f},{wy:.3f},{SafetyClass(int(classes[i, j])).label}\n")
    if args.svg:
        write_svg(classes, xs, ys, args.out / "grid.svg")
    log.info("heatmap %dx%d written to %s", len(ys), len(xs), args.out)


def cmd_bench(args, cfg: RunConfig):
    from .datagen import make_sample
    from .evalx import bench
    from .planner import build_tree
    from .qmonitor import load_checkpoint

    model = load_checkpoint(args.checkpoint)
    if args.scene is not None:
        from .scene import MonitorInput

        scene = _load_scene(args.scene)
        failure = MonitorInput.absent()
    else:
        s = make_sample(0, cfg.seed, cfg.data, cfg.tree, cfg.rules)
        scene, failure = s.perceived, s.failure
    tree = build_tree(scene.ego.last, scene.road, cfg.tree)
    rep = bench(model, scene, failure, tree, cfg.bench.n_plans, cfg.bench.repeats, cfg.bench.warmup)
    _write_json(args.out / "bench.json", rep)
    log.info("batched %.1f Hz, speedup over sequential %.1fx", rep["batched"]["hz"], rep.get("speedup", float("nan")))


HANDLERS = {
    "gen-scenes": cmd_gen_scenes,
    "gen-data": cmd_gen_data,
    "reach-precompute": cmd_reach_precompute,
    "train": cmd_train,
    "eval": cmd_eval,
    "monitor": cmd_monitor,
    "heatmap": cmd_heatmap,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
    except (ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"plansafe {args.command}: error: {exc}", file=sys.stderr)
        return 1
    log.info("resolved config %s", canonical_json(cfg))
    log.info("config hash %s", config_hash(cfg))
    out = getattr(args, "out", None)
    if out is not None and args.command not in ("gen-data",):
        _write_json(out / "run_config.json", {"config": to_dict(cfg), "hash": config_hash(cfg)})
    try:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=cfg.threads):
            HANDLERS[args.command](args, cfg)
    except UsageError as exc:
        print(f"plansafe {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        log.debug("traceback", exc_info=True)
        print(f"plansafe {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
