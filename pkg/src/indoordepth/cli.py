"""``indoordepth`` command line: association, evaluation, post-processing,
per-pair optimisation, filter studies and synthetic data.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numerical
failure (divergence).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .dataset import (
    DEFAULT_MAX_DT,
    TUM_DEPTH_DIVISOR,
    DatasetError,
    associate_frames,
    load_depth_png,
    read_listing,
    save_depth_png,
    write_association,
)
from .geometry import RigidTransform
from .image import DepthMap, read_raw_depth, resize_nearest, write_image, write_raw_depth
from .losses import LossWeights, Strategy
from .metrics import COLUMNS, DEFAULT_CAP, MetricsError, depth_metrics, format_table, mean_report
from .optimizer import (
    DEPTH_PROFILES,
    DivergenceError,
    PairProblem,
    inject_holes,
    make_synthetic_scene,
    optimize_pair,
    perturb_pose,
    pose_error,
    synthetic_depth_maps,
)
from .postproc import FilterSpec, apply_filter, elwf_combine, godard_postprocess, in_domain

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
RAW_EXT = ".rdpf"
DEPTH_EXTS = (".png", RAW_EXT)
DEFAULT_GRID = ("none", "max-15", "median-35", "median-55")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --- depth file helpers --------------------------------------------------------


def load_depth(path: Path, divisor: float) -> DepthMap:
    ext = path.suffix.lower()
    if ext == ".png":
        return load_depth_png(path, divisor)
    if ext == RAW_EXT:
        return read_raw_depth(path)
    raise DataError(f"{path}: unsupported depth format (use .png or {RAW_EXT})")


def save_depth(path: Path, depth: DepthMap, divisor: float) -> None:
    if path.suffix.lower() == ".png":
        save_depth_png(path, depth, divisor)
    else:
        write_raw_depth(path, depth)


def depth_files(path) -> list[Path]:
    """A single depth file, or the depth files of a directory in name order."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file or directory")
    if path.is_file():
        return [path]
    found = sorted(p for p in path.iterdir() if p.is_file() and p.suffix.lower() in DEPTH_EXTS)
    if not found:
        raise DataError(f"{path}: no depth maps ({', '.join(DEPTH_EXTS)})")
    return found


def _paired(pred_dir, gt_dir) -> list[tuple[Path, Path]]:
    preds, gts = depth_files(pred_dir), depth_files(gt_dir)
    if len(preds) != len(gts):
        raise DataError(f"{len(preds)} predictions but {len(gts)} ground-truth maps")
    return list(zip(preds, gts))


def _pmap(fn, items, workers: int):
    """Ordered map; frames are independent so threads only change wall time."""
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _metric_kwargs(args) -> dict:
    cap = None if args.no_cap else tuple(args.cap)
    if cap is not None and not 0 < cap[0] < cap[1]:
        raise UsageError(f"--cap needs 0 < LO < HI, got {cap}")
    return {"median_scale": not args.no_median_scaling, "cap": cap, "holes": args.holes}


def _report_rows_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["name", *COLUMNS, "n_pixels", "scale_factor"])
    for name, rep in rows:
        writer.writerow([name, *(repr(getattr(rep, c)) for c in COLUMNS), rep.n_pixels, repr(rep.scale_factor)])
    return buf.getvalue()


# --- associate -----------------------------------------------------------------


def cmd_associate(args) -> int:
    for p in (args.rgb_list, args.depth_list):
        if not Path(p).is_file():
            raise DataError(f"{p}: no such file")
    records = associate_frames(read_listing(args.rgb_list), read_listing(args.depth_list), args.max_dt)
    if args.output:
        write_association(args.output, records)
    else:
        for r in records:
            print(f"{r.timestamp:.6f} {r.rgb_path} {r.depth_timestamp:.6f} {r.depth_path}")
    print(f"{len(records)} pairs at max_dt={args.max_dt:g}s", file=sys.stderr)
    return EXIT_OK


# --- eval / filter-study -----------------------------------------------------------


def _evaluate_pairs(pairs, args, filt: FilterSpec | None = None):
    kw = _metric_kwargs(args)

    def one(pair):
        pred_path, gt_path = pair
        pred = load_depth(pred_path, args.pred_divisor)
        gt = load_depth(gt_path, args.gt_divisor)
        if filt is not None:
            pred = apply_filter(pred, filt)
        if pred.size != gt.size:
            pred = resize_nearest(pred, gt.width, gt.height)
        return pred_path.stem, depth_metrics(pred, gt, **kw)

    return _pmap(one, pairs, args.workers)


def cmd_eval(args) -> int:
    rows = _evaluate_pairs(_paired(args.pred, args.gt), args)
    agg = mean_report([rep for _, rep in rows])
    shown = rows + [("mean", agg)] if args.per_frame else [("mean", agg)]
    if args.json:
        for name, rep in shown:
            print(rep.to_json(name=name))
    else:
        print(format_table(shown, label="Frame"))
    if args.csv:
        Path(args.csv).write_text(_report_rows_csv(rows + [("mean", agg)]))
    return EXIT_OK


def parse_grid(text: str) -> list[FilterSpec | None]:
    grid = []
    for item in text.split(","):
        item = item.strip()
        if item == "none":
            grid.append(None)
            continue
        try:
            grid.append(FilterSpec.parse(item))
        except ValueError as exc:
            raise UsageError(f"bad filter {item!r}: {exc}") from None
    if not grid:
        raise UsageError("empty filter grid")
    return grid


def cmd_filter_study(args) -> int:
    from .plotting import filter_study_figure

    grid = parse_grid(args.grid)
    pairs = _paired(args.pred, args.gt)
    rows = []
    for spec in grid:
        reports = [rep for _, rep in _evaluate_pairs(pairs, args, spec)]
        rows.append(("none" if spec is None else str(spec), mean_report(reports)))
    rows.sort(key=lambda r: r[1].rmse)
    print(format_table(rows, label="Filter"))
    if args.output:
        out = Path(args.output)
        out.mkdir(parents=True, exist_ok=True)
        (out / "filter_study.csv").write_text(_report_rows_csv(rows))
        filter_study_figure(rows, out / "filter_study.png")
    return EXIT_OK


# --- postprocess ---------------------------------------------------------------------


def cmd_postprocess(args) -> int:
    inputs = [depth_files(p) for p in args.inputs]
    need = 1 if args.mode == "filter" else 2
    if len(inputs) != need:
        raise UsageError(f"{args.mode} takes {need} input(s), got {len(inputs)}")
    if need == 2 and len(inputs[0]) != len(inputs[1]):
        raise DataError(f"input counts differ: {len(inputs[0])} vs {len(inputs[1])}")
    if args.mode == "filter":
        try:
            spec = FilterSpec(args.filter, args.size)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    single = len(inputs[0]) == 1 and Path(args.inputs[0]).is_file()
    out = Path(args.output)
    if not single:
        out.mkdir(parents=True, exist_ok=True)

    def one(i):
        maps = [load_depth(files[i], args.depth_divisor) for files in inputs]
        if args.mode == "filter":
            res = in_domain(lambda m: apply_filter(m, spec), maps, args.filter_domain, args.maps)
        elif args.mode == "elwf":
            res = in_domain(elwf_combine, maps, args.combine_domain, args.maps)
        else:
            res = in_domain(godard_postprocess, maps, args.combine_domain, args.maps)
        dest = out if single else out / inputs[0][i].name
        save_depth(dest, res, args.depth_divisor)
        return dest

    for dest in _pmap(one, range(len(inputs[0])), args.workers):
        print(dest)
    return EXIT_OK


# --- optimize ---------------------------------------------------------------------------


@dataclass
class SceneConfig:
    seed: int = 0
    width: int = 64
    height: int = 48
    depth_profile: str = "slant"
    base_depth: float = 2.0
    rotation: list = field(default_factory=lambda: [0.01, -0.02, 0.005])
    translation: list = field(default_factory=lambda: [0.12, 0.03, 0.04])


@dataclass
class InitConfig:
    rotation_deg: float = 2.0
    translation_frac: float = 0.05
    seed: int = 1
    disparity: str = "gt"  # "gt" or "constant" (mean GT disparity)


@dataclass
class OptimizerConfig:
    steps: int = 500
    step_size: float = 2e-3
    schedule: str = "cosine"
    disparity_step_scale: float = 0.03
    monotone: bool = True


@dataclass
class OptimizeConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    init: InitConfig = field(default_factory=InitConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    strategy: str = "B"
    scales_2d: str = "input"


_SECTIONS = {"scene": SceneConfig, "init": InitConfig, "weights": LossWeights, "optimizer": OptimizerConfig}


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise UsageError(f"config {where}: expected an object")
    unknown = set(data) - {f.name for f in fields(cls)}
    if unknown:
        raise UsageError(f"config {where}: unknown keys {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"config {where}: {exc}") from None


def load_config(path) -> OptimizeConfig:
    if path is None:
        return OptimizeConfig()
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"{path}: config file not found") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: malformed JSON ({exc})") from None
    if not isinstance(data, dict):
        raise UsageError(f"{path}: config must be a JSON object")
    unknown = set(data) - {f.name for f in fields(OptimizeConfig)}
    if unknown:
        raise UsageError(f"{path}: unknown keys {sorted(unknown)}")
    kw = {k: _build(_SECTIONS[k], v, k) if k in _SECTIONS else v for k, v in data.items()}
    return OptimizeConfig(**kw)


def _apply_overrides(cfg: OptimizeConfig, args) -> OptimizeConfig:
    for flag, section, key in (
        ("steps", cfg.optimizer, "steps"),
        ("step_size", cfg.optimizer, "step_size"),
        ("schedule", cfg.optimizer, "schedule"),
        ("scene_seed", cfg.scene, "seed"),
        ("depth_profile", cfg.scene, "depth_profile"),
        ("init_seed", cfg.init, "seed"),
    ):
        value = getattr(args, flag)
        if value is not None:
            setattr(section, key, value)
    if args.strategy is not None:
        cfg.strategy = args.strategy
    if args.omega is not None:
        w = cfg.weights
        cfg.weights = LossWeights(w.alpha, w.beta, w.gamma, args.omega)
    return cfg


def _check_config(cfg: OptimizeConfig) -> None:
    checks = [
        (cfg.optimizer.steps >= 1, "optimizer.steps must be >= 1"),
        (cfg.optimizer.step_size > 0, "optimizer.step_size must be positive"),
        (cfg.optimizer.schedule in ("cosine", "constant", "step"), "optimizer.schedule must be cosine|constant|step"),
        (cfg.scene.depth_profile in DEPTH_PROFILES, f"scene.depth_profile must be one of {DEPTH_PROFILES}"),
        (cfg.strategy in ("A", "B"), "strategy must be A or B"),
        (cfg.scales_2d in ("input", "all"), "scales_2d must be input or all"),
        (cfg.init.disparity in ("gt", "constant"), "init.disparity must be gt or constant"),
        (len(cfg.scene.rotation) == 3 and len(cfg.scene.translation) == 3, "scene rotation/translation need 3 values"),
    ]
    for ok, msg in checks:
        if not ok:
            raise UsageError(f"config: {msg}")


def _trace_csv(trace) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    header = ["step", *trace[0].as_row().keys()]
    writer.writerow(header)
    for i, b in enumerate(trace):
        writer.writerow([i, *(repr(float(v)) for v in b.as_row().values())])
    return buf.getvalue()


def _pose_dict(pose: RigidTransform) -> dict:
    return {"rotation": pose.rotation.tolist(), "translation": pose.translation.tolist()}


def cmd_optimize(args) -> int:
    from .plotting import loss_trace_figure

    cfg = _apply_overrides(load_config(args.config), args)
    _check_config(cfg)
    sc = cfg.scene
    motion = RigidTransform(np.array(sc.rotation, float), np.array(sc.translation, float))
    scene = make_synthetic_scene(
        seed=sc.seed, size=(sc.width, sc.height), depth_profile=sc.depth_profile,
        motion=motion, base_depth=sc.base_depth,
    )
    init_pose = perturb_pose(motion, cfg.init.rotation_deg, cfg.init.translation_frac, cfg.init.seed)
    disp = scene.gt_disparity
    if cfg.init.disparity == "constant":
        disp = np.full_like(disp, disp.mean())
    problem = PairProblem.from_scene(
        scene, disparity=disp, pose=init_pose, weights=cfg.weights,
        strategy=Strategy(cfg.strategy), scales_2d=cfg.scales_2d,
    )
    o = cfg.optimizer
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(asdict(cfg), indent=2) + "\n")
    try:
        res = optimize_pair(
            problem, steps=o.steps, step_size=o.step_size, schedule=o.schedule,
            disparity_step_scale=o.disparity_step_scale, monotone=o.monotone,
        )
    except DivergenceError as exc:
        (out / "trace.csv").write_text(_trace_csv(exc.trace))
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    (out / "trace.csv").write_text(_trace_csv(res.trace))
    write_raw_depth(out / f"depth{RAW_EXT}", DepthMap(1.0 / res.disparity))
    rot_err, trans_err = pose_error(res.pose, scene.gt_pose)
    totals = res.totals
    summary = {
        "initial_loss": float(totals[0]),
        "final_loss": float(totals[-1]),
        "loss_ratio": float(totals[-1] / totals[0]) if totals[0] > 0 else 0.0,
        "rotation_error_deg": rot_err,
        "translation_error_rel": trans_err,
        "estimate": _pose_dict(res.pose),
        "initial": _pose_dict(init_pose),
        "ground_truth": _pose_dict(scene.gt_pose),
    }
    (out / "pose.json").write_text(json.dumps(summary, indent=2) + "\n")
    loss_trace_figure(res.trace, out / "loss_trace.png")
    print("step,total")
    print(f"0,{float(totals[0])!r}")
    print(f"{len(totals) - 1},{float(totals[-1])!r}")
    print(
        f"loss ratio {summary['loss_ratio']:.4g}, rotation error {rot_err:.4f} deg, "
        f"translation error {100 * trans_err:.3f}%",
        file=sys.stderr,
    )
    return EXIT_OK


# --- synth -------------------------------------------------------------------------------


def cmd_synth(args) -> int:
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    if args.kind == "holes":
        gts = synthetic_depth_maps(args.count, (args.width, args.height), args.seed)
        (out / "gt").mkdir(exist_ok=True)
        (out / "pred").mkdir(exist_ok=True)
        for i, gt in enumerate(gts):
            name = f"{i:04d}.png"
            save_depth_png(out / "gt" / name, gt, args.depth_divisor)
            holed = inject_holes(gt, args.fraction, seed=args.seed + i)
            save_depth_png(out / "pred" / name, holed, args.depth_divisor)
        print(f"{len(gts)} map pairs in {out}")
        return EXIT_OK
    motion = RigidTransform(np.array(args.rotation, float), np.array(args.translation, float))
    scene = make_synthetic_scene(
        seed=args.seed, size=(args.width, args.height), depth_profile=args.profile, motion=motion
    )
    write_image(out / "target.png", scene.target)
    write_image(out / "source.png", scene.source)
    save_depth_png(out / "depth_target.png", scene.gt_depth, args.depth_divisor)
    save_depth_png(out / "depth_source.png", scene.source_depth, args.depth_divisor)
    scene.intrinsics.to_file(out / "intrinsics.txt")
    (out / "pose.json").write_text(json.dumps(_pose_dict(scene.gt_pose), indent=2) + "\n")
    print(f"scene written to {out} ({100 * scene.visible.mean():.1f}% of pixels visible)")
    return EXIT_OK


# --- parser ----------------------------------------------------------------------------------


def _add_metric_options(p) -> None:
    p.add_argument("pred", help="prediction depth file or directory")
    p.add_argument("gt", help="ground-truth depth file or directory")
    p.add_argument("--pred-divisor", type=float, default=TUM_DEPTH_DIVISOR, help="PNG raw units per metre (default 5000)")
    p.add_argument("--gt-divisor", type=float, default=TUM_DEPTH_DIVISOR, help="PNG raw units per metre (default 5000)")
    p.add_argument("--no-median-scaling", action="store_true", help="compare metric depth as is")
    p.add_argument("--cap", type=float, nargs=2, metavar=("LO", "HI"), default=list(DEFAULT_CAP))
    p.add_argument("--no-cap", action="store_true", help="evaluate without a depth range")
    p.add_argument(
        "--holes", choices=("cap", "exclude"), default="cap",
        help="invalid predicted pixels: score as the lower cap (default) or skip",
    )
    p.add_argument("--workers", type=int, default=1, help="frames evaluated in parallel")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="indoordepth", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("associate", help="pair RGB and depth frames by timestamp")
    p.add_argument("rgb_list")
    p.add_argument("depth_list")
    p.add_argument("--max-dt", type=float, default=DEFAULT_MAX_DT, help="seconds (default 0.02)")
    p.add_argument("-o", "--output", help="association file (default: stdout)")
    p.set_defaults(func=cmd_associate)

    p = sub.add_parser("eval", help="depth metrics of predictions against ground truth")
    _add_metric_options(p)
    p.add_argument("--per-frame", action="store_true", help="list every frame before the mean")
    p.add_argument("--json", action="store_true", help="JSON lines instead of a table")
    p.add_argument("--csv", help="also write per-frame and mean rows to this CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("postprocess", help="flip ensembling, Godard blending or filtering")
    p.add_argument("mode", choices=("elwf", "godard", "filter"))
    p.add_argument(
        "inputs", nargs="+", help="filter: one map set; elwf: primary maps, then the flip model's still-mirrored maps; "
        "godard: primary maps, then the flipped-input maps already flipped back",
    )
    p.add_argument("-o", "--output", required=True, help="output file or directory")
    p.add_argument("--filter", choices=("median", "max"), default="median")
    p.add_argument("--size", type=int, default=35, help="filter window (default 35)")
    p.add_argument("--filter-domain", choices=("depth", "disparity"), default="depth")
    p.add_argument("--maps", choices=("depth", "disparity"), default="depth", help="what the files hold")
    p.add_argument(
        "--combine-domain", choices=("disparity", "depth"), default="disparity",
        help="elwf/godard: average disparities (default) or depths",
    )
    p.add_argument("--depth-divisor", type=float, default=TUM_DEPTH_DIVISOR)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_postprocess)

    p = sub.add_parser("optimize", help="fit depth and pose to a synthetic pair")
    p.add_argument("config", nargs="?", help="JSON config; flags below override it")
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.add_argument("--steps", type=int)
    p.add_argument("--step-size", type=float)
    p.add_argument("--schedule", choices=("cosine", "constant", "step"))
    p.add_argument("--scene-seed", type=int)
    p.add_argument("--init-seed", type=int)
    p.add_argument("--depth-profile", choices=DEPTH_PROFILES)
    p.add_argument("--strategy", choices=("A", "B"))
    p.add_argument("--omega", type=float, help="3D loss weight")
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("filter-study", help="rank filter configurations by RMSE")
    _add_metric_options(p)
    p.add_argument("--grid", default=",".join(DEFAULT_GRID), help="comma list, e.g. none,median-35")
    p.add_argument("-o", "--output", help="directory for the CSV and bar chart")
    p.set_defaults(func=cmd_filter_study)

    p = sub.add_parser("synth", help="write a synthetic scene or hole-injected depth maps")
    p.add_argument("kind", choices=("pair", "holes"))
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--height", type=int, default=48)
    p.add_argument("--profile", choices=DEPTH_PROFILES, default="slant")
    p.add_argument("--rotation", type=float, nargs=3, default=[0.01, -0.02, 0.005])
    p.add_argument("--translation", type=float, nargs=3, default=[0.12, 0.03, 0.04])
    p.add_argument("--count", type=int, default=20, help="holes: number of maps")
    p.add_argument("--fraction", type=float, default=0.01, help="holes: fraction of pixels zeroed")
    p.add_argument("--depth-divisor", type=float, default=TUM_DEPTH_DIVISOR)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "workers", 1) < 1:
            raise UsageError("--workers must be >= 1")
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, DatasetError, MetricsError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
