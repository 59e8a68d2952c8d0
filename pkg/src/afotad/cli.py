"""``afotad`` command line: synth | train | infer | eval | ablate | gradcheck.

Every subcommand takes an optional ``--config`` JSON file; explicit flags
override its values.  Exit codes: 0 success, 2 usage or configuration error,
3 data error (missing or malformed files, class-id mismatch), 4 numeric
failure (non-finite loss, gradient check failure).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

from .autodiff import NonFiniteError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

log = logging.getLogger("afotad")


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers


def _read_json(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{p}: invalid JSON ({e})") from None


def _overrides(args: argparse.Namespace, mapping: dict[str, str]) -> dict:
    """Flags that were actually given, renamed to config keys."""
    return {key: getattr(args, dest) for dest, key in mapping.items() if getattr(args, dest) is not None}


def _need_dir(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise DataError(f"{what} not found: {p}")
    return p


def _need_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"{what} not found: {p}")
    return p


def dataset_checksum(root: str | Path) -> str:
    """SHA-256 over every file below ``root`` (relative path and bytes, sorted)."""
    root = Path(root)
    h = hashlib.sha256()
    for p in sorted(q for q in root.rglob("*") if q.is_file()):
        h.update(p.relative_to(root).as_posix().encode() + b"\0")
        h.update(p.read_bytes())
    return h.hexdigest()


def _parse_floats(text: str) -> tuple[float, ...]:
    try:
        vals = tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}") from None
    if not vals:
        raise ConfigError("empty list")
    return vals


def _parse_ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from None


# ---------------------------------------------------------------------------
# synth

_SYNTH_FLAGS = {
    "seed": "seed", "num_train": "num_train", "num_test": "num_test", "classes": "num_classes",
    "channels": "channels", "noise": "noise", "min_frames": "min_frames", "max_frames": "max_frames",
    "min_duration": "min_duration_s", "max_duration": "max_duration_s",
    "min_instances": "min_instances", "max_instances": "max_instances", "overlap": "overlap_fraction",
}


def synth_spec(args: argparse.Namespace):
    from .synthdata import SynthSpec

    cfg = _read_json(args.config)
    cfg.update(_overrides(args, _SYNTH_FLAGS))
    if "seed" not in cfg:
        raise ConfigError("synth needs a seed (--seed or \"seed\" in the config)")
    unknown = set(cfg) - {f.name for f in fields(SynthSpec)}
    if unknown:
        raise ConfigError(f"unknown synth config keys: {sorted(unknown)}")
    spec = SynthSpec(**cfg)
    if spec.num_classes < 1:
        raise ConfigError("class list is empty: need at least one foreground class")
    try:
        spec.validate()
    except ValueError as e:
        raise ConfigError(str(e)) from None
    return spec


def cmd_synth(args: argparse.Namespace) -> int:
    from .synthdata import generate, save_dataset

    spec = synth_spec(args)
    log.info("generating %d train / %d test videos (seed %d)", spec.num_train, spec.num_test, spec.seed)
    ds = generate(spec)
    save_dataset(ds, args.out)
    digest = dataset_checksum(args.out)
    log.info("wrote %s", args.out)
    print(f"sha256 {digest}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train

_TRAIN_FLAGS = {
    "seed": "seed", "lr": "lr", "momentum": "momentum", "weight_decay": "weight_decay",
    "beta": "beta", "batch_size": "batch_size", "iterations": "iterations",
    "lr_decay": "lr_decay", "lr_step": "lr_step", "clip_length": "clip_length",
    "checkpoint_every": "checkpoint_every", "log_every": "log_every",
}
_MODEL_FLAGS = {"width": "width", "depth": "depth", "num_deformable": "num_deformable",
                "downsample": "downsample"}


def train_config(args: argparse.Namespace, need_seed: bool = True):
    from .rfam import ModelConfig
    from .training import TrainConfig

    cfg = _read_json(args.config)
    model = dict(cfg.pop("model", {}))
    cfg.update(_overrides(args, _TRAIN_FLAGS))
    model.update(_overrides(args, _MODEL_FLAGS))
    if need_seed and "seed" not in cfg:
        raise ConfigError("train needs a seed (--seed or \"seed\" in the config)")
    try:
        if getattr(args, "dilation", None) is not None:
            depth = model.get("depth", 3)
            model["dilations"] = list(ModelConfig.variant(dilation=args.dilation, depth=depth).dilations)
        return TrainConfig.from_dict({**cfg, "model": model})
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad training config: {e}") from None


def _load_data(path: str, splits: tuple[str, ...]):
    from .synthdata import load_dataset

    root = _need_dir(path, "dataset directory")
    if not (root / "dataset.json").is_file():
        raise DataError(f"{root} has no dataset.json")
    try:
        return load_dataset(root, splits)
    except (OSError, ValueError, KeyError) as e:
        raise DataError(f"cannot load dataset {root}: {e}") from None


def _align_model(ds, cfg):
    """Match in_channels / num_classes to the dataset."""
    want = {"in_channels": ds.spec.channels, "num_classes": ds.spec.num_classes + 1}
    return replace(cfg, model=replace(cfg.model, **want))


def cmd_train(args: argparse.Namespace) -> int:
    from .engine import save_checkpoint, train
    from .rfam import RFAM, Checkpoint
    from .training import SGD

    cfg = train_config(args)
    ds = _load_data(args.data, ("train",))
    cfg = _align_model(ds, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    model = optimizer = None
    start = 0
    if args.resume:
        ck = Checkpoint.load(_need_file(args.resume, "checkpoint"))
        if ck.config != cfg.model:
            raise ConfigError(_config_diff(ck.config, cfg.model))
        model = RFAM(cfg.model, seed=cfg.seed)
        try:
            model.load_state_dict(ck.params)
        except ValueError as e:
            raise ConfigError(str(e)) from None
        optimizer = SGD(model.named_parameters(), cfg.momentum, cfg.weight_decay)
        for k, v in ck.velocity.items():
            optimizer.velocity[k][...] = v
        start = ck.iteration
        log.info("resuming from %s at iteration %d", args.resume, start)

    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    curve = out / "loss.csv"
    mode = "w"
    if args.resume and curve.exists():
        # drop rows past the resume point so the curve has one row per iteration
        rows = curve.read_text().splitlines()
        kept = [rows[0]] + [r for r in rows[1:] if int(r.split(",")[0]) <= start]
        curve.write_text("\n".join(kept) + "\n")
        mode = "a"
    last_good: list[Path] = []

    def on_checkpoint(m, opt, it):
        p = out / f"checkpoint_{it:06d}.bin"
        save_checkpoint(p, m, opt, it)
        last_good.append(p)
        log.info("checkpoint %s", p)

    with open(curve, mode) as fh:
        if mode == "w":
            fh.write("iteration,loss_cls,loss_loc\n")

        def on_step(it, lc, ll):
            fh.write(f"{it},{lc:.8f},{ll:.8f}\n")

        try:
            result = train(ds, cfg, model, optimizer, start, on_checkpoint=on_checkpoint, on_step=on_step)
        except NonFiniteError as e:
            keep = last_good[-1] if last_good else "none"
            log.error("aborting: %s; last good checkpoint: %s", e, keep)
            return EXIT_NUMERIC
        except ValueError as e:
            raise DataError(str(e)) from None
    save_checkpoint(out / "checkpoint.bin", result.model, result.optimizer, result.iteration)
    log.info("trained to iteration %d in %.1fs", result.iteration, result.seconds)
    return EXIT_OK


def _config_diff(a, b) -> str:
    da, db = a.to_dict(), b.to_dict()
    lines = [f"  {k}: checkpoint {da[k]!r} vs config {db[k]!r}" for k in da if da[k] != db[k]]
    return "checkpoint model config does not match:\n" + "\n".join(lines)


# ---------------------------------------------------------------------------
# infer


def cmd_infer(args: argparse.Namespace) -> int:
    from .engine import infer
    from .pipeline import write_detections
    from .rfam import RFAM, Checkpoint

    ck_path = _need_file(args.checkpoint, "checkpoint")
    try:
        ck = Checkpoint.load(ck_path)
    except (ValueError, KeyError, TypeError) as e:
        raise DataError(f"cannot read checkpoint {ck_path}: {e}") from None
    model_cfg = ck.config
    clip_length = 768
    if args.config:
        cfg = train_config(args, need_seed=False)
        model_cfg = replace(cfg.model, in_channels=ck.config.in_channels, num_classes=ck.config.num_classes)
        clip_length = cfg.clip_length
    if args.clip_length is not None:
        clip_length = args.clip_length
    model = RFAM(model_cfg)
    try:
        model.load_state_dict(ck.params)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    ds = _load_data(args.data, (args.split,))
    if ds.spec.channels != model_cfg.in_channels:
        raise ConfigError(f"model expects {model_cfg.in_channels} feature channels, "
                          f"dataset has {ds.spec.channels}")
    dets = infer(model, ds, args.split, clip_length, score_floor=args.score_floor,
                 nms_threshold=args.nms, top_k=args.top_k)
    write_detections(args.out, dets)
    log.info("%d detections over %d videos -> %s", len(dets), len(ds.split(args.split)), args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args: argparse.Namespace) -> int:
    from .evaluation import DEFAULT_THRESHOLDS, EvalConfig, evaluate, timeline_rows, write_timeline_csv
    from .pipeline import read_annotations, read_detections

    cfg = _read_json(args.config)
    thresholds = tuple(cfg.get("thresholds", DEFAULT_THRESHOLDS))
    classes = cfg.get("classes")
    if args.thresholds:
        thresholds = _parse_floats(args.thresholds)
    if args.classes:
        classes = _parse_ints(args.classes)
    if any(not 0 < t <= 1 for t in thresholds):
        raise ConfigError(f"thresholds must lie in (0, 1], got {thresholds}")
    try:
        dets = read_detections(_need_file(args.detections, "detections file"))
        gts = read_annotations(_need_file(args.annotations, "annotations file"))
    except ValueError as e:
        raise DataError(str(e)) from None
    gt_classes = {g.label for g in gts}
    det_classes = {d.label for d in dets}
    if classes:
        universe = set(classes)
        stray = sorted((det_classes | gt_classes) - universe)
        if stray:
            raise DataError(f"class ids {stray} are outside --classes {sorted(universe)}")
    else:
        universe = gt_classes
        stray = sorted(det_classes - gt_classes)
        if stray:
            raise DataError(f"class ids {stray} appear in the detections but not in the annotations")
    report = evaluate(dets, gts, EvalConfig(thresholds, tuple(sorted(universe))))
    table = report.table()
    sys.stdout.write(table)
    if args.out_json:
        Path(args.out_json).write_text(report.to_json())
    if args.out_table:
        Path(args.out_table).write_text(table)
    if args.timeline:
        durations = {}
        if args.data:
            meta = json.loads((_need_dir(args.data, "dataset directory") / "dataset.json").read_text())
            fps = meta["spec"]["fps"]
            durations = {v["name"]: v["num_frames"] / fps for v in meta["videos"]}
        for x in list(dets) + list(gts):
            durations.setdefault(x.video, 0.0)
            if not args.data:
                durations[x.video] = max(durations[x.video], x.end_s)
        write_timeline_csv(args.timeline, timeline_rows(dets, gts, durations, theta=args.timeline_theta))
    return EXIT_OK


# ---------------------------------------------------------------------------
# ablate


def cmd_ablate(args: argparse.Namespace) -> int:
    from .ablation import Cell, format_table, grid, results_json, run_grid

    cfg = train_config(args, need_seed=False)
    ds = _load_data(args.data, ("train", "test"))
    cfg = _align_model(ds, cfg)
    try:
        cells = [Cell.parse(c) for c in args.cells.split()] if args.cells else grid()
    except ValueError as e:
        raise ConfigError(str(e)) from None
    seeds = tuple(range(args.seeds))
    log.info("ablation: %d cells x %d seeds at %d iterations", len(cells), len(seeds), cfg.iterations)
    try:
        results = run_grid(ds, cfg, cells, seeds, workers=args.workers)
    except NonFiniteError as e:
        log.error("ablation cell diverged: %s", e)
        return EXIT_NUMERIC
    table = format_table(results)
    sys.stdout.write(table)
    if args.out:
        Path(args.out).write_text(table)
    if args.json:
        Path(args.json).write_text(results_json(results))
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck


def cmd_gradcheck(args: argparse.Namespace) -> int:
    from .gradsuite import OP_NAMES, OPS, run_suite

    ops = None
    if args.ops:
        ops = tuple(o.strip() for o in args.ops.split(",") if o.strip())
    if args.linear_only:
        ops = tuple(o.name for o in OPS if o.linear)
    if args.mutate is not None and args.mutate not in OP_NAMES:
        raise ConfigError(f"unknown op to mutate: {args.mutate}")
    try:
        report = run_suite(args.cases, args.tolerance, args.seed, ops=ops, mutate=args.mutate)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    for line in report.lines():
        print(line)
    bad = [r for r in report.results if not r.passed]
    if bad:
        for r in bad:
            log.error("gradient check failed: op %s, seed %d, max error %.3e > %.1e",
                      r.name, r.worst_seed, r.max_error, r.tolerance)
        return EXIT_NUMERIC
    print(f"all {len(report.results)} ops pass at tolerance {args.tolerance:g}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training (override the config file)")
    g.add_argument("--seed", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--momentum", type=float)
    g.add_argument("--weight-decay", type=float)
    g.add_argument("--beta", type=float, help="weight of the localization loss")
    g.add_argument("--batch-size", type=int)
    g.add_argument("--iterations", type=int)
    g.add_argument("--lr-decay", type=float)
    g.add_argument("--lr-step", type=int)
    g.add_argument("--clip-length", type=int)
    g.add_argument("--checkpoint-every", type=int)
    g.add_argument("--log-every", type=int)
    m = p.add_argument_group("model")
    m.add_argument("--width", type=int)
    m.add_argument("--depth", type=int)
    m.add_argument("--dilation", type=int, help="rate for the last two layers")
    m.add_argument("--num-deformable", type=int)
    m.add_argument("--downsample", dest="downsample", action="store_true", default=None)
    m.add_argument("--no-downsample", dest="downsample", action="store_false")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="afotad", description=__doc__.splitlines()[0])
    ap.add_argument("-q", "--quiet", action="store_true", help="only log warnings and errors")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--num-train", type=int)
    p.add_argument("--num-test", type=int)
    p.add_argument("--classes", type=int, help="number of foreground classes")
    p.add_argument("--channels", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--min-frames", type=int)
    p.add_argument("--max-frames", type=int)
    p.add_argument("--min-duration", type=float)
    p.add_argument("--max-duration", type=float)
    p.add_argument("--min-instances", type=int)
    p.add_argument("--max-instances", type=int)
    p.add_argument("--overlap", type=float, help="ambiguous-location fraction in [0, 0.2]")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--config")
    p.add_argument("--resume", help="checkpoint to continue from")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="detect actions in a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="training config; its model must match the checkpoint")
    p.add_argument("--clip-length", type=int)
    p.add_argument("--score-floor", type=float, default=0.005)
    p.add_argument("--nms", type=float, default=0.3)
    p.add_argument("--top-k", type=int, default=300)
    for name in ("seed", "width", "depth", "num_deformable", "downsample", "dilation"):
        p.set_defaults(**{name: None})
    for name in _TRAIN_FLAGS:
        p.set_defaults(**{name: None})
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score detections against annotations")
    p.add_argument("--detections", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--config")
    p.add_argument("--thresholds", help="comma-separated tIoU thresholds")
    p.add_argument("--classes", help="comma-separated class ids to score")
    p.add_argument("--out-json")
    p.add_argument("--out-table")
    p.add_argument("--timeline", help="write per-video timeline CSV here")
    p.add_argument("--timeline-theta", type=float, default=0.5)
    p.add_argument("--data", help="dataset directory, for video durations in the timeline")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train/evaluate the receptive-field grid")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--seeds", type=int, default=3, help="seeds 0..N-1 per cell")
    p.add_argument("--cells", help="space-separated 'down,dilation,deformable' cells")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", help="write the table here")
    p.add_argument("--json", help="write per-seed results here")
    _add_train_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every operator")
    p.add_argument("--cases", type=int, default=100)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ops", help="comma-separated subset of ops")
    p.add_argument("--linear-only", action="store_true")
    p.add_argument("--mutate", help=argparse.SUPPRESS)  # test hook: negate one op's gradient
    p.set_defaults(func=cmd_gradcheck)
    return ap


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as e:
        log.error("config error: %s", e)
        return EXIT_CONFIG
    except DataError as e:
        log.error("data error: %s", e)
        return EXIT_DATA
    except NonFiniteError as e:
        log.error("numeric failure: %s", e)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
