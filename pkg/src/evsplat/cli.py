"""Command-line entry point: ``evsplat <subcommand> [options]``.

Exit codes: 0 success, 2 usage error, 3 input error (bad or missing file),
4 runtime error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from .errors import EvsplatError, InputError
from .events import EventCameraModel, accumulate, parse_stream, slice_stream, to_csv, to_evt1
from .io import PoseManifest, dump_toml, load_pfm, load_ply, load_png, load_poses, load_toml, save_pfm, save_ply, save_png
from .metrics import evaluate
from .optim import EventDataset, TrainConfig, TrainingLog, refine_appearance, train_progressive
from .render import BlurConfig, RenderSettings, render

log = logging.getLogger("evsplat")

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_RUNTIME = 0, 2, 3, 4

SIM_DEFAULTS = dict(n_sim_frames=512, n_train_views=200, n_heldout=20, n_blurred=10, n_eiw=8, format="csv")
REFINE_DEFAULTS = dict(n_eiw=8)


class UsageError(EvsplatError):
    pass


def _read(path, what: str) -> bytes:
    p = Path(path)
    try:
        return p.read_bytes()
    except FileNotFoundError:
        raise InputError(f"{what} not found: {p}") from None
    except OSError as exc:
        raise InputError(f"cannot read {what} {p}: {exc.strerror}") from None


def _with_path(fn, path, what):
    """Run a parser, prefixing input errors with the offending path."""
    try:
        return fn(_read(path, what))
    except InputError as exc:
        if str(path) in str(exc):
            raise
        raise InputError(f"{path}: {exc}") from exc


def _section_defaults() -> dict:
    return dict(
        train=TrainConfig().to_dict(),
        events={f.name: getattr(EventCameraModel(), f.name) for f in fields(EventCameraModel)},
        simulate=dict(SIM_DEFAULTS),
        refine=dict(REFINE_DEFAULTS),
    )


def _load_config(args) -> dict:
    doc = {}
    if args.config:
        doc = _with_path(load_toml, args.config, "config file")
    known = _section_defaults()
    for section, values in doc.items():
        if section not in known or not isinstance(values, dict):
            raise InputError(f"{args.config}: unknown config section [{section}]")
        for key in values:
            if key not in known[section]:
                raise InputError(f"{args.config}: unknown key {key!r} in [{section}]")
    return doc


def _train_config(args, doc) -> TrainConfig:
    try:
        cfg = TrainConfig(**doc.get("train", {}))
        over = {}
        for name in ("iterations", "rounds", "seed", "alpha_pro", "lambda_dssim"):
            val = getattr(args, name, None)
            if val is not None:
                over[name] = val
        if getattr(args, "fix_gamma", False):
            over["learn_gamma"] = False
        if getattr(args, "carry_params", False):
            over["carry_params"] = True
        return replace(cfg, **over) if over else cfg
    except (TypeError, ValueError) as exc:
        raise InputError(f"invalid training configuration: {exc}") from exc


def _event_model(doc, width, height) -> EventCameraModel:
    try:
        return EventCameraModel.for_sensor(width, height, **doc.get("events", {}))
    except (TypeError, ValueError) as exc:
        raise InputError(f"invalid event configuration: {exc}") from exc


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_stream(args, manifest=None):
    w, h = args.width, args.height
    if (w is None or h is None) and manifest is not None:
        w, h = manifest.intrinsics["width"], manifest.intrinsics["height"]
    return _with_path(lambda b: parse_stream(b, w, h), args.events, "events file")


def _images_in(folder, what) -> list:
    d = Path(folder)
    if not d.is_dir():
        raise InputError(f"{what} directory not found: {d}")
    files = sorted(p for p in d.iterdir() if p.suffix.lower() in (".pfm", ".png"))
    pfm = [p for p in files if p.suffix.lower() == ".pfm"]
    files = pfm or files
    if not files:
        raise InputError(f"no PFM or PNG images in {d}")
    return [_with_path(load_pfm if p.suffix.lower() == ".pfm" else load_png, p, "image").astype(np.float64)
            for p in files]


def _write_images(folder: Path, images, stem="view") -> None:
    folder.mkdir(parents=True, exist_ok=True)
    for k, im in enumerate(images):
        (folder / f"{stem}_{k:04d}.pfm").write_bytes(save_pfm(im))
        (folder / f"{stem}_{k:04d}.png").write_bytes(save_png(im))


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(args, doc) -> None:
    from .toy import build_toy_problem, toy_event_model, toy_train_config

    opts = dict(SIM_DEFAULTS, **doc.get("simulate", {}))
    problem = build_toy_problem(opts["n_sim_frames"], opts["n_train_views"], opts["n_heldout"])
    out = _out_dir(args)
    stream = problem.stream
    if opts["format"] == "evt1":
        (out / "events.evt1").write_bytes(to_evt1(stream))
    elif opts["format"] == "csv":
        (out / "events.csv").write_bytes(to_csv(stream))
    else:
        raise InputError(f"unknown event format {opts['format']!r} (csv or evt1)")
    exposures = problem.blur_exposures(opts["n_blurred"])
    blurred = problem.blurred_frames(opts["n_blurred"], opts["n_eiw"])
    (out / "poses.json").write_bytes(PoseManifest.from_views(problem.train_views, exposures).to_json())
    (out / "heldout_poses.json").write_bytes(PoseManifest.from_views(problem.heldout_views).to_json())
    (out / "scene.ply").write_bytes(save_ply(problem.scene))
    _write_images(out / "heldout", problem.heldout_images)
    if blurred:
        _write_images(out / "blurred", [im for im, _ in blurred], stem="blur")
    cfg = replace(toy_train_config(), seed=args.seed if args.seed is not None else 0)
    model = toy_event_model()
    config = dict(train=cfg.to_dict(), events=asdict(model), refine=dict(n_eiw=opts["n_eiw"]))
    (out / "config.toml").write_text(dump_toml(config))
    log.info("simulated %d events, %d windows into %s", len(stream), len(problem.dataset), out)


def cmd_slice(args, doc) -> None:
    stream = _load_stream(args)
    model = _event_model(doc, stream.width, stream.height)
    windows = slice_stream(stream, model)
    out = _out_dir(args)
    lines = ["index,start_us,end_us,events"]
    lines += [f"{k},{w.start_time},{w.end_time},{len(w)}" for k, w in enumerate(windows)]
    (out / "windows.csv").write_text("\n".join(lines) + "\n")
    log.info("%d events -> %d windows", len(stream), len(windows))


def cmd_export_frames(args, doc) -> None:
    stream = _load_stream(args)
    model = _event_model(doc, stream.width, stream.height)
    windows = slice_stream(stream, model)
    seed = args.seed if args.seed is not None else 0
    frames = [accumulate(w, model, [seed, k], stream.width, stream.height).accumulated
              for k, w in enumerate(windows)]
    out = _out_dir(args) / "frames"
    out.mkdir(parents=True, exist_ok=True)
    span = max(float(np.max(np.abs(np.stack(frames)))) if frames else 1.0, 1e-12)
    for k, f in enumerate(frames):
        (out / f"window_{k:04d}.pfm").write_bytes(save_pfm(f))
        (out / f"window_{k:04d}.png").write_bytes(save_png(0.5 + 0.5 * f / span))
    log.info("wrote %d accumulated frames to %s", len(frames), out)


def cmd_train(args, doc) -> None:
    manifest = _with_path(load_poses, args.poses, "poses file")
    stream = _load_stream(args, manifest)
    cfg = _train_config(args, doc)
    model = _event_model(doc, stream.width, stream.height)
    dataset = EventDataset.from_stream(stream, manifest.views, model, color=not args.mono)
    log.info("training on %d windows (%d events)", len(dataset), len(stream))
    tlog = TrainingLog()
    cloud = train_progressive(dataset, cfg, tlog,
                              lambda r, c: log.info("round %d done: %d splats", r + 1, len(c)))
    out = _out_dir(args)
    (out / "cloud.ply").write_bytes(save_ply(cloud))
    (out / "training_log.csv").write_text(tlog.to_csv())
    (out / "train.json").write_text(json.dumps(dict(gamma=tlog.gamma, splats=len(cloud),
                                                    windows=len(dataset)), indent=1))


def cmd_refine(args, doc) -> None:
    from .sim import pose_at

    cloud = _with_path(load_ply, args.cloud, "cloud file")
    manifest = _with_path(load_poses, args.poses, "poses file")
    images = _images_in(args.blurred, "blurred image")
    if len(images) != len(manifest.exposures):
        raise InputError(f"{args.blurred}: {len(images)} images but {args.poses} lists "
                         f"{len(manifest.exposures)} exposures")
    n_eiw = args.n_eiw or dict(REFINE_DEFAULTS, **doc.get("refine", {}))["n_eiw"]
    pairs = [(im, BlurConfig.from_exposure(pose_at(manifest.views, a), pose_at(manifest.views, b), n_eiw))
             for im, (a, b) in zip(images, manifest.exposures)]
    cfg = _train_config(args, doc)
    refined = refine_appearance(cloud, pairs, cfg)
    (_out_dir(args) / "refined.ply").write_bytes(save_ply(refined))


def cmd_render(args, doc) -> None:
    cloud = _with_path(load_ply, args.cloud, "cloud file")
    manifest = _with_path(load_poses, args.poses, "poses file")
    st = RenderSettings(background=_train_config(args, doc).background)
    _write_images(_out_dir(args) / "renders", [render(cloud, v, st).rgb for v in manifest.views])


def cmd_eval(args, doc) -> None:
    cloud = _with_path(load_ply, args.cloud, "cloud file")
    manifest = _with_path(load_poses, args.poses, "poses file")
    truth = _images_in(args.gt, "ground-truth image")
    st = RenderSettings(background=_train_config(args, doc).background)
    renders = [render(cloud, v, st).rgb for v in manifest.views]
    report = evaluate(renders, truth, aligned=not args.unaligned)
    (_out_dir(args) / "report.json").write_text(json.dumps(report.to_dict(), indent=1))
    log.info("PSNR %.3f dB  SSIM %.4f", report.psnr_mean, report.ssim_mean)


COMMANDS = {
    "simulate": (cmd_simulate, "render the toy scene and write events, poses, PLY and reference frames"),
    "slice": (cmd_slice, "split an event file into training windows"),
    "train": (cmd_train, "reconstruct a Gaussian cloud from events and poses"),
    "refine": (cmd_refine, "fit appearance to motion-blurred photos"),
    "render": (cmd_render, "render a cloud at every pose of a manifest"),
    "eval": (cmd_eval, "score renders against ground-truth images"),
    "export-frames": (cmd_export_frames, "write accumulated event frames per window"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="evsplat", description="Gaussian splatting from event streams.")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--out", default=".", help="output directory (default: current directory)")
        p.add_argument("--config", help="TOML config; command-line flags override it")
        p.add_argument("--dump-config", action="store_true", help="print the effective config as TOML and exit")
        p.add_argument("--seed", type=int, help="random seed")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("slice", "export-frames", "train"):
            p.add_argument("--events", help="event file (CSV or EVT1)")
            p.add_argument("--width", type=int, help="sensor width (needed for CSV without a pose manifest)")
            p.add_argument("--height", type=int)
        if name in ("train", "refine", "render", "eval"):
            p.add_argument("--poses", help="pose manifest JSON")
        if name in ("refine", "render", "eval"):
            p.add_argument("--cloud", help="Gaussian cloud PLY")
        if name in ("train", "refine"):
            p.add_argument("--iterations", type=int)
            p.add_argument("--lambda-dssim", dest="lambda_dssim", type=float)
        if name == "train":
            p.add_argument("--rounds", type=int)
            p.add_argument("--alpha-pro", dest="alpha_pro", type=float)
            p.add_argument("--fix-gamma", action="store_true", help="keep gamma at its initial value")
            p.add_argument("--carry-params", action="store_true",
                           help="start each later round from the surviving splats' full parameters")
            p.add_argument("--mono", action="store_true", help="monochrome sensor (no Bayer mask)")
        if name == "refine":
            p.add_argument("--blurred", help="directory of blurred images, one per exposure")
            p.add_argument("--n-eiw", dest="n_eiw", type=int, help="sub-poses per exposure")
        if name == "eval":
            p.add_argument("--gt", help="directory of ground-truth images, one per pose")
            p.add_argument("--unaligned", action="store_true", help="skip the log-space alignment")
    return parser


_REQUIRED = {
    "slice": ("events",),
    "export-frames": ("events",),
    "train": ("events", "poses"),
    "refine": ("cloud", "poses", "blurred"),
    "render": ("cloud", "poses"),
    "eval": ("cloud", "poses", "gt"),
}


def _dump_config(args, doc) -> str:
    eff = _section_defaults()
    for section, values in doc.items():
        eff[section].update(values)
    if "train" in eff:
        eff["train"] = _train_config(args, doc).to_dict()
    return dump_toml(eff)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s", force=True)
    try:
        doc = _load_config(args)
        if args.dump_config:
            sys.stdout.write(_dump_config(args, doc))
            return EXIT_OK
        missing = [f"--{k}" for k in _REQUIRED.get(args.command, ()) if getattr(args, k, None) is None]
        if missing:
            raise UsageError(f"{args.command}: missing required option(s) {', '.join(missing)}")
        COMMANDS[args.command][0](args, doc)
    except UsageError as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except InputError as exc:
        log.error("%s", exc)
        return EXIT_INPUT
    except (EvsplatError, ValueError, ArithmeticError, MemoryError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
