"""``fovtrack`` command line: data generation, cropping, training, evaluation and latency tools.

Every subcommand accepts ``--config`` (one JSON experiment file) and
``--seed``.  Flags win over the config file.  ``FOVTRACK_OUTPUT_DIR``
replaces the output directory named in the config.

Exit codes: 0 success, 1 user error (bad config, paths or inputs),
2 internal invariant violation.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import cropper, geometry, selector, synth, training, vit
from .images import ImageFormatError, read_image

log = logging.getLogger("fovtrack")

OUTPUT_ENV = "FOVTRACK_OUTPUT_DIR"
EXIT_OK, EXIT_USER, EXIT_INTERNAL = 0, 1, 2


class UserError(Exception):
    """Bad input from the command line or config file (exit code 1)."""


# --- config plumbing -------------------------------------------------------


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise UserError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise UserError(f"config file {path}: {exc}") from None
    if not isinstance(data, dict):
        raise UserError(f"config file {path}: top level must be an object")
    return data


def section(cfg: dict, name: str) -> dict:
    value = cfg.get(name, {})
    if not isinstance(value, dict):
        raise UserError(f"config section {name!r} must be an object")
    return dict(value)


def output_dir(args, cfg: dict, default: str) -> Path:
    """``--out`` flag, then the environment override, then the config, then ``default``."""
    if getattr(args, "out", None):
        return Path(args.out)
    if os.environ.get(OUTPUT_ENV):
        return Path(os.environ[OUTPUT_ENV])
    return Path(section(cfg, "paths").get("output_dir", default))


def build(kind, fields: dict, what: str):
    try:
        return kind(**fields)
    except TypeError as exc:
        raise UserError(f"{what}: {exc}") from None


def write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# --- subcommands -----------------------------------------------------------


def cmd_synth(args, cfg) -> int:
    fields = section(cfg, "scene")
    if args.seed is not None:
        fields["seed"] = args.seed
    params = synth.scene_from_dict(fields)
    params.validate()
    count = args.count if args.count is not None else int(section(cfg, "synth").get("count", 100))
    if count < 0:
        raise UserError("count must be non-negative")
    out = output_dir(args, cfg, "corpus")
    if count == 0:
        log.warning("count is 0: writing an empty corpus")
    items = synth.generate(params, count)
    names = synth.save_corpus(items, out, fmt=args.format)
    # No timestamps: identical inputs give a byte-identical manifest.
    write_json(out / "manifest.json", {
        "count": count,
        "seed": params.seed,
        "format": args.format,
        "scene": synth.scene_to_dict(params),
        "files": names,
    })
    print(f"wrote {count} frames to {out}")
    return EXIT_OK


def _frame_paths(inputs) -> list[Path]:
    paths = []
    for p in map(Path, inputs):
        if p.is_dir():
            paths.extend(sorted(q for q in p.iterdir() if q.suffix.lower() in (".pgm", ".png")))
        elif p.exists():
            paths.append(p)
        else:
            raise UserError(f"{p} not found")
    return paths


def cmd_crop(args, cfg) -> int:
    ccfg = section(cfg, "cropper")
    if "window" in ccfg:
        ccfg["window"] = tuple(ccfg["window"])
    config = build(cropper.CropperConfig, ccfg, "cropper config")
    session = cropper.CropSession(config, build(cropper.EventParams, section(cfg, "event"), "event config"))
    sink = open(args.out_file, "w", encoding="utf-8") if args.out_file else sys.stdout
    try:
        for path in _frame_paths(args.inputs):
            rec = {"file": str(path)}
            try:
                frame = read_image(path)
            except (ImageFormatError, OSError) as exc:
                rec["error"] = str(exc)
                log.warning("%s", exc)
            else:
                if args.prev:
                    decision, window = session.step(frame)
                    rec["decision"] = decision.value
                else:
                    window = cropper.locate_and_crop(frame, config)
                rec["window"] = None if window is None else window.as_dict()
            sink.write(json.dumps(rec, sort_keys=True) + "\n")
    finally:
        if sink is not sys.stdout:
            sink.close()
    return EXIT_OK


def _corpus(path) -> list[synth.LabeledFrame]:
    if path is None:
        raise UserError("a corpus directory is required (--corpus or paths.corpus)")
    if not Path(path).is_dir():
        raise UserError(f"corpus directory {path} not found")
    items = synth.load_corpus(path)
    if not items:
        raise UserError(f"corpus {path} is empty")
    return items


def cmd_train(args, cfg) -> int:
    tfields = section(cfg, "train")
    if args.seed is not None:
        tfields["seed"] = args.seed
    for flag, key in (("epochs", "max_epochs"), ("loss", "loss"), ("N", "N"), ("profile", "profile")):
        if getattr(args, flag) is not None:
            tfields[key] = getattr(args, flag)
    if "max_epochs" in tfields and "patience" not in tfields:
        tfields["patience"] = min(10, tfields["max_epochs"])
    tcfg = build(training.TrainConfig, tfields, "train config")
    mfields = section(cfg, "model")
    if args.depth is not None:
        mfields["depth"] = args.depth
        mfields.pop("exit_blocks", None)
    mcfg = vit.ModelConfig.from_dict(mfields)
    crop = not args.no_crop and section(cfg, "data").get("crop", True)

    items = _corpus(args.corpus or section(cfg, "paths").get("corpus"))
    data = training.make_dataset(items, mcfg.image_side, crop=crop)
    model = vit.GazeViT(mcfg, seed=tcfg.seed)
    result = training.train(model, data, tcfg)

    out = output_dir(args, cfg, "run")
    out.mkdir(parents=True, exist_ok=True)
    norm = {"mean": result.norm.mean, "std": result.norm.std}
    vit.save_checkpoint(result.model, out / "model.fvt",
                        extra={"norm": norm, "crop": bool(crop), "best_epoch": result.best_epoch})
    training.write_log(result.log, out / "log.csv")
    write_json(out / "experiment.json", {
        "train": tcfg.to_dict(), "model": mcfg.to_dict(), "data": {"crop": bool(crop)},
    })
    best = result.log[result.best_epoch]
    print(f"best epoch {result.best_epoch}: val mean {best.val_mean_deg:.3f} deg, "
          f"P95 {best.val_p95_deg:.3f} deg -> {out / 'model.fvt'}")
    return EXIT_OK


def cmd_eval(args, cfg) -> int:
    ckpt = args.checkpoint or section(cfg, "paths").get("checkpoint")
    if ckpt is None or not Path(ckpt).exists():
        raise UserError(f"checkpoint {ckpt} not found")
    model, extra = vit.load_checkpoint(ckpt, return_extra=True)
    norm = synth.AugmentConfig(**extra.get("norm", {}))
    items = _corpus(args.corpus or section(cfg, "paths").get("corpus"))
    data = training.make_dataset(items, model.config.image_side, crop=extra.get("crop", True))
    depth = args.depth or model.config.depth
    if depth not in model.config.exit_blocks:
        raise UserError(f"depth {depth} is not an exit of this model {list(model.config.exit_blocks)}")
    dist = training.evaluate(model, data, depth, norm)
    text = json.dumps({"depth": depth, **dist.to_dict()}, indent=2, sort_keys=True) + "\n"
    if args.out_file:
        Path(args.out_file).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out_file).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_fit_profile(args, cfg) -> int:
    path = Path(args.samples)
    if not path.exists():
        raise UserError(f"{path} not found")
    profile = geometry.load_profile(path, device_label=args.device or path.stem,
                                    resolution_label=args.resolution)
    target = Path(args.out_file) if args.out_file else output_dir(args, cfg, ".") / f"{profile.device_label}.csv"
    target.parent.mkdir(parents=True, exist_ok=True)
    geometry.save_profile(profile, target)
    print(json.dumps({"device": profile.device_label, "resolution": profile.resolution_label,
                      "knots": len(profile.knots), "path": str(target)}, sort_keys=True))
    return EXIT_OK


def cmd_select(args, cfg) -> int:
    scfg = section(cfg, "select")
    depths_path = args.depths or scfg.get("depths")
    depths = selector.load_depth_profile(depths_path) if depths_path else selector.bundled_depth_profile()
    resolution = args.resolution or scfg.get("resolution", "1080P")
    profile_path = args.profile or scfg.get("profile")
    if profile_path:
        profile = geometry.load_profile(profile_path, resolution_label=resolution)
    else:
        if resolution not in geometry.BUNDLED_PROFILES:
            raise UserError(f"no bundled profile for {resolution}; pass --profile")
        profile = geometry.bundled_profile(resolution)
    query = selector.SelectionQuery(
        resolution=resolution,
        profile=profile,
        percentile=args.percentile or scfg.get("percentile", "P95"),
        theta_i=args.theta_i if args.theta_i is not None else scfg.get("theta_i", 5.0),
        t_sensing_ms=args.t_sensing if args.t_sensing is not None else scfg.get("t_sensing_ms", 0.0),
        t_comm_ms=args.t_comm if args.t_comm is not None else scfg.get("t_comm_ms", 0.0),
    )
    choice = selector.select(depths, query)
    print(json.dumps(choice.to_dict(), sort_keys=True))
    return EXIT_OK


def _accuracy_table(rows) -> list[str]:
    lines = ["| Run | Depth | Mean | P90 | P95 | Min | Max | N |", "|---|---|---|---|---|---|---|---|"]
    for name, r in rows:
        lines.append(f"| {name} | {r.get('depth', '')} | {r['mean']:.2f} | {r['p90']:.2f} | {r['p95']:.2f} "
                     f"| {r['min']:.2f} | {r['max']:.2f} | {r['count']} |")
    return lines


def _latency_table(name, depths: selector.DepthProfile, percentile: str) -> list[str]:
    res = list(geometry.BUNDLED_PROFILES)
    lines = [f"Latency by depth ({name}, {percentile}; T_tracking + T_fr in ms)", "",
             "| Depth | T_tracking | " + " | ".join(res) + " |",
             "|---|---|" + "---|" * len(res)]
    best = {r: selector.select(depths, selector.SelectionQuery.bundled(r, percentile=percentile)).depth
            for r in res}
    for e in depths:
        cells = []
        for r in res:
            q = selector.SelectionQuery.bundled(r, percentile=percentile)
            total = e.t_tracking_ms + selector.render_latency_for_depth(e, q)
            cells.append(f"**{total:.2f}**" if best[r] == e.depth else f"{total:.2f}")
        lines.append(f"| {e.depth} | {e.t_tracking_ms:.3f} | " + " | ".join(cells) + " |")
    return lines


def cmd_report(args, cfg) -> int:
    results = Path(args.results or section(cfg, "paths").get("results", "results"))
    if not results.is_dir():
        raise UserError(f"results directory {results} not found")
    evals, profiles = [], []
    for path in sorted(results.iterdir()):
        if path.suffix == ".json":
            try:
                data = json.loads(path.read_text(encoding="utf-8"))
            except json.JSONDecodeError:
                continue
            if isinstance(data, dict) and {"mean", "p90", "p95", "min", "max", "count"} <= set(data):
                evals.append((path.stem, data))
        elif path.suffix == ".csv":
            try:
                profiles.append((path.stem, selector.load_depth_profile(path)))
            except ValueError:
                continue
    if not evals and not profiles:
        raise UserError(f"no evaluation or depth-profile results in {results}")
    lines = ["# fovtrack report", ""]
    if evals:
        lines += ["## Angular error (degrees)", ""] + _accuracy_table(evals) + [""]
    for name, dp in profiles:
        lines += ["## " + name, ""] + _latency_table(name, dp, args.percentile or "P95") + [""]
    text = "\n".join(lines)
    if args.out_file:
        Path(args.out_file).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


# --- parser ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment file")
    common.add_argument("--seed", type=int, help="random seed (overrides the config)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="fovtrack", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="render a synthetic eye corpus")
    s.add_argument("--count", type=int)
    s.add_argument("--out", help="corpus directory")
    s.add_argument("--format", choices=("pgm", "png"), default="pgm")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("crop", parents=[common], help="locate the pupil and print crop windows as JSON lines")
    s.add_argument("inputs", nargs="+", help="frames or directories of frames")
    s.add_argument("--prev", action="store_true", help="stream frames in order and report reuse/recompute")
    s.add_argument("--out-file")
    s.set_defaults(func=cmd_crop)

    s = sub.add_parser("train", parents=[common], help="train a gaze model on a corpus")
    s.add_argument("--corpus")
    s.add_argument("--out", help="run directory")
    s.add_argument("--epochs", type=int)
    s.add_argument("--depth", type=int)
    s.add_argument("--loss", choices=("mse", "smooth_max", "performance_aware", "multires"))
    s.add_argument("--N", type=float)
    s.add_argument("--profile", help="bundled resolution label or profile CSV")
    s.add_argument("--no-crop", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="angular-error summary of a checkpoint")
    s.add_argument("--checkpoint")
    s.add_argument("--corpus")
    s.add_argument("--depth", type=int, help="exit to evaluate (default: final block)")
    s.add_argument("--out-file")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("fit-profile", parents=[common], help="validate latency samples into a profile CSV")
    s.add_argument("samples", help="CSV with eccentricity_deg,latency_ms")
    s.add_argument("--device")
    s.add_argument("--resolution", default="custom", choices=("720P", "1080P", "1440P", "custom"))
    s.add_argument("--out")
    s.add_argument("--out-file")
    s.set_defaults(func=cmd_fit_profile)

    s = sub.add_parser("select", parents=[common], help="pick the depth with the lowest latency")
    s.add_argument("--depths", help="depth-profile CSV (default: bundled fixture)")
    s.add_argument("--resolution")
    s.add_argument("--profile", help="latency profile CSV (default: bundled for the resolution)")
    s.add_argument("--percentile", choices=("P90", "P95"))
    s.add_argument("--theta-i", type=float)
    s.add_argument("--t-sensing", type=float)
    s.add_argument("--t-comm", type=float)
    s.set_defaults(func=cmd_select)

    s = sub.add_parser("report", parents=[common], help="render Markdown tables from a results directory")
    s.add_argument("results", nargs="?")
    s.add_argument("--percentile", choices=("P90", "P95"))
    s.add_argument("--out-file")
    s.set_defaults(func=cmd_report)
    return p


USER_ERRORS = (UserError, FileNotFoundError, NotADirectoryError, PermissionError, IsADirectoryError,
               geometry.ProfileError, synth.GeometryError, vit.CheckpointError, ImageFormatError,
               ValueError, KeyError)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except training.TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except FloatingPointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except Exception as exc:  # noqa: BLE001 - anything else is our bug
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
