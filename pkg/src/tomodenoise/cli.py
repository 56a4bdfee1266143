"""Command-line pipeline: configuration, run manifests, and subcommands.

Every invocation owns its output directory through a lock file, reads its
knobs from a flat ``key = value`` config file or flags, and finishes by
writing a JSON manifest recording the config snapshot, input and output
digests, seeds, and per-stage timings.  Re-running a stage from its
manifest reproduces the output digests bit for bit.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import re
import sys
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from time import perf_counter

import numpy as np

from . import __version__
from .errors import (
    ConfigurationError,
    CorruptFileError,
    IndexRangeError,
    InvalidSpecError,
    IOFailureError,
    ToolError,
    UsageError,
)

LOCK_FILENAME = ".tomodenoise.lock"
_HEX64 = re.compile(r"^[0-9a-f]{64}$")


# ---------------------------------------------------------------- config

@dataclass(frozen=True)
class ConfigField:
    """Schema entry for one config key.

    kind: int | float | bool | str | size, where size admits a positive
    integer or the word ``full``.  Optional keys fall back to ``default``.
    """

    kind: str
    required: bool = True
    choices: tuple = ()
    default: object = None


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse flat ``key = value`` lines; ``#`` starts a full-line comment."""
    raw = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        key, sep, value = stripped.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigurationError(f"{source}:{lineno}: expected 'key = value', got {stripped!r}")
        if any(c.isspace() for c in key):
            raise ConfigurationError(f"{source}:{lineno}: config key {key!r} contains whitespace")
        if not value:
            raise ConfigurationError(f"{source}:{lineno}: key {key} has an empty value")
        if key in raw:
            raise ConfigurationError(f"{source}:{lineno}: duplicate key {key}")
        raw[key] = value
    return raw


def load_config(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise IOFailureError(f"no such config file: {path}")
    return parse_config_text(path.read_text(), source=str(path))


def _coerce_value(key: str, value: str, spec: ConfigField):
    kind = spec.kind
    try:
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
        if kind == "bool":
            lowered = value.lower()
            if lowered not in ("true", "false"):
                raise ValueError
            return lowered == "true"
        if kind == "size":
            if value == "full":
                return "full"
            size = int(value)
            if size < 1:
                raise ValueError
            return size
        if kind == "str":
            return value
    except ValueError:
        article = {"int": "an integer", "float": "a number", "bool": "true or false",
                   "size": "a positive integer or 'full'"}[kind]
        raise ConfigurationError(f"config key {key} expects {article}, got {value!r}") from None
    raise ConfigurationError(f"config key {key} has unknown schema kind {kind!r}")


def coerce_config(raw: dict, schema: dict) -> dict:
    """Validate a raw string config against a schema; returns typed values.

    Keys absent from the schema are rejected so typos cannot silently
    change physics.  Required keys must appear explicitly.
    """
    unknown = sorted(set(raw) - set(schema))
    if unknown:
        raise ConfigurationError(f"unknown config key(s): {', '.join(unknown)}")
    missing = sorted(k for k, f in schema.items() if f.required and k not in raw)
    if missing:
        raise ConfigurationError(f"missing required config key(s): {', '.join(missing)}")
    typed = {}
    for key, spec in schema.items():
        if key not in raw:
            typed[key] = spec.default
            continue
        value = _coerce_value(key, raw[key], spec)
        if spec.choices and value not in spec.choices:
            raise ConfigurationError(
                f"config key {key} must be one of {', '.join(map(str, spec.choices))}, got {value!r}"
            )
        typed[key] = value
    return typed


# ---------------------------------------------------------------- manifest

@dataclass
class RunManifest:
    """Everything needed to audit or re-run one pipeline stage."""

    stage: str
    invocation: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    version: str = __version__


def write_manifest(path, manifest: RunManifest) -> None:
    """Atomically write a manifest; every output must carry a sha256 digest."""
    for out_path, digest in manifest.outputs.items():
        if not isinstance(digest, str) or not _HEX64.match(digest):
            raise InvalidSpecError(f"output {out_path} lacks a sha256 digest")
    payload = json.dumps(dataclasses.asdict(manifest), indent=2, sort_keys=True) + "\n"
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_text(payload)
        os.replace(tmp, path)
    except OSError as e:
        tmp.unlink(missing_ok=True)
        raise IOFailureError(f"cannot write manifest {path}: {e.strerror or e}") from e


def load_manifest(path) -> RunManifest:
    path = Path(path)
    if not path.is_file():
        raise IOFailureError(f"no such manifest: {path}")
    try:
        doc = json.loads(path.read_text())
    except (ValueError, OSError) as e:
        raise CorruptFileError(f"{path} is not a readable manifest ({e})") from e
    fields = {f.name for f in dataclasses.fields(RunManifest)}
    missing = sorted(f for f in fields if f not in doc)
    if missing or not isinstance(doc, dict):
        raise CorruptFileError(f"{path}: manifest is missing field(s): {', '.join(missing)}")
    return RunManifest(**{k: v for k, v in doc.items() if k in fields})


def rerun_invocation(manifest: RunManifest, out_dir=None) -> list:
    """The argv that reproduces this stage, optionally into a new directory."""
    argv = list(manifest.invocation)
    if out_dir is not None:
        try:
            argv[argv.index("--out") + 1] = str(out_dir)
        except (ValueError, IndexError):
            raise InvalidSpecError("manifest invocation has no --out argument to replace") from None
    return argv


# ---------------------------------------------------------------- locking

@contextmanager
def output_lock(out_dir):
    """Exclusive ownership of an output directory for one invocation."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / LOCK_FILENAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise IOFailureError(
            f"output directory {out_dir} is locked by another run (remove {lock} if stale)"
        ) from None
    try:
        os.write(fd, f"{os.getpid()}\n".encode("ascii"))
        os.close(fd)
        yield out_dir
    finally:
        lock.unlink(missing_ok=True)


# ------------------------------------------------------------ subcommands

SIMULATE_SCHEMA = {
    "seed": ConfigField("int"),
    "grid": ConfigField("int"),
    "depth": ConfigField("int", required=False),  # slice count; defaults to grid
    "n_angles": ConfigField("int"),
    "n_features": ConfigField("int", required=False, default=2000),
    "radius_min": ConfigField("float", required=False, default=2.0),
    "radius_max": ConfigField("float", required=False, default=12.0),
    "background_attenuation": ConfigField("float", required=False, default=0.01),
    "feature_attenuation": ConfigField("float", required=False, default=0.0),
    "antialias": ConfigField("bool", required=False, default=True),
}

# loss weights and sampling knobs are deliberately mandatory: a run must
# state them even when they match common defaults
TRAIN_SCHEMA = {
    "seed": ConfigField("int"),
    "depth": ConfigField("int"),
    "batch_size": ConfigField("int"),
    "d_steps_per_g": ConfigField("int"),
    "learning_rate": ConfigField("float"),
    "total_g_steps": ConfigField("int"),
    "lambda_g": ConfigField("float"),
    "lambda_p": ConfigField("float"),
    "lambda_v": ConfigField("float"),
    "lambda_d": ConfigField("float", required=False, default=10.0),
    "beta1": ConfigField("float", required=False, default=0.5),
    "beta2": ConfigField("float", required=False, default=0.9),
    "crop_size": ConfigField("size", required=False, default=256),
    "extractor_kind": ConfigField("str", required=False, default="pretrained_vgg"),
    "vgg_weights": ConfigField("str", required=False, default=""),
    "vgg_count_mode": ConfigField("str", required=False, default="weight_layers"),
    "checkpoint_every": ConfigField("int", required=False, default=1000),
    "mse_form": ConfigField("str", required=False, default="sum"),
    "feature_threshold": ConfigField("float", required=False, default=0.01),
}

MANIFEST_NAME = "manifest.json"


def _digest_inputs(paths) -> dict:
    from .formats import file_digest

    return {str(p): file_digest(p) for p in paths}


def _digest_outputs(out_dir, names) -> dict:
    from .formats import file_digest

    return {str(name): file_digest(Path(out_dir) / name) for name in names}


def _finish_run(out_dir, stage, argv, config, inputs, outputs, seeds, timings):
    manifest = RunManifest(
        stage=stage,
        invocation=[str(a) for a in argv],
        config=config,
        inputs=inputs,
        outputs=outputs,
        seeds=seeds,
        timings=timings,
    )
    write_manifest(Path(out_dir) / MANIFEST_NAME, manifest)


def _cmd_simulate(args, argv) -> int:
    from .formats import save_sinogram_stack, save_volume
    from .phantoms import FoamSpec, generate_foam_phantom
    from .projector import forward_project, uniform_angles

    cfg = coerce_config(load_config(args.config), SIMULATE_SCHEMA)
    inputs = _digest_inputs([args.config])
    out = Path(args.out)
    with output_lock(out):
        t0 = perf_counter()
        side = cfg["grid"]
        depth = side if cfg["depth"] is None else cfg["depth"]
        spec = FoamSpec(
            seed=cfg["seed"],
            n_features=cfg["n_features"],
            grid=(depth, side, side),
            radius_range=(cfg["radius_min"], cfg["radius_max"]),
            background_attenuation=cfg["background_attenuation"],
            feature_attenuation=cfg["feature_attenuation"],
        )
        volume = generate_foam_phantom(spec, antialias=cfg["antialias"])
        t_phantom = perf_counter() - t0
        angles = uniform_angles(cfg["n_angles"])
        sinograms = [forward_project(volume.data[i], angles) for i in range(depth)]
        t_project = perf_counter() - t0 - t_phantom
        save_volume(out / "ground_truth.h5", volume)
        save_sinogram_stack(
            out / "sinograms.h5", sinograms, extra_attrs={"phantom_seed": cfg["seed"]}
        )
        _finish_run(
            out, "simulate", argv, cfg, inputs,
            _digest_outputs(out, ("ground_truth.h5", "sinograms.h5")),
            seeds={"phantom": cfg["seed"]},
            timings={"phantom_seconds": t_phantom, "project_seconds": t_project},
        )
    return 0


def _cmd_degrade(args, argv) -> int:
    from .formats import load_sinogram_stack, save_sinogram_stack
    from .projector import DoseSpec, apply_photon_noise, invert_absorption_rescale, subsample_angles

    have_factor = args.factor is not None
    have_photons = args.photons is not None
    if have_factor == have_photons:
        raise UsageError("degrade needs exactly one of --factor or --photons")
    if have_photons and args.noise_seed is None:
        raise UsageError("--photons requires --noise-seed")
    inputs = _digest_inputs([args.in_path])
    out = Path(args.out)
    with output_lock(out):
        t0 = perf_counter()
        sinograms, attrs = load_sinogram_stack(args.in_path)
        if have_factor:
            degraded = [subsample_angles(s, args.factor) for s in sinograms]
            attrs = {**attrs, "subsample_factor": args.factor}
            config = {"factor": args.factor}
            seeds = {}
        else:
            dose = DoseSpec(args.photons, args.noise_seed, args.absorption_scale)
            degraded = [
                invert_absorption_rescale(
                    apply_photon_noise(s, dose, slice_index=i, noiseless=args.noiseless)
                )
                for i, s in enumerate(sinograms)
            ]
            config = {
                "photons_per_pixel": args.photons,
                "noise_seed": args.noise_seed,
                "absorption_scale": args.absorption_scale,
                "noiseless": args.noiseless,
            }
            seeds = {"noise": args.noise_seed}
        save_sinogram_stack(out / "sinograms.h5", degraded, extra_attrs=attrs)
        _finish_run(
            out, "degrade", argv, config, inputs,
            _digest_outputs(out, ("sinograms.h5",)),
            seeds=seeds, timings={"degrade_seconds": perf_counter() - t0},
        )
    return 0


def _cmd_reconstruct(args, argv) -> int:
    from .formats import load_sinogram_stack, save_volume
    from .phantoms import Volume
    from .recon import fbp, sirt

    if args.method == "sirt" and args.iterations is None:
        raise UsageError("--method sirt requires --iterations")
    inputs = _digest_inputs([args.in_path])
    out = Path(args.out)
    with output_lock(out):
        sinograms, attrs = load_sinogram_stack(args.in_path)
        per_slice = []
        slices = []
        for i, s in enumerate(sinograms):
            t0 = perf_counter()
            if args.method == "fbp":
                image = fbp(s, filter_name=args.filter, slice_index=i)
            else:
                image = sirt(s, args.iterations, nonneg=args.nonneg, slice_index=i)
            per_slice.append(perf_counter() - t0)
            slices.append(image.data)
        meta = {k: v for k, v in attrs.items() if isinstance(v, (str, bool, int, float))}
        meta.update(method=args.method, n_angles=sinograms[0].n_angles)
        if args.method == "fbp":
            meta["filter"] = args.filter
        else:
            meta.update(iterations=args.iterations, nonneg=args.nonneg)
        config = {k: meta[k] for k in ("method", "filter", "iterations", "nonneg") if k in meta}
        volume = Volume(np.stack(slices), provenance="low_dose", meta=meta)
        save_volume(out / "volume.h5", volume)
        _finish_run(
            out, "reconstruct", argv, config, inputs,
            _digest_outputs(out, ("volume.h5",)),
            seeds={},
            timings={"per_slice_seconds": per_slice, "total_seconds": float(sum(per_slice))},
        )
    return 0


def _cmd_train(args, argv) -> int:
    from .formats import load_volume
    from .losses import LossWeights
    from .trainer import TrainConfig, train

    cfg = coerce_config(load_config(args.config), TRAIN_SCHEMA)
    input_paths = [args.ld, args.nd, args.config]
    if cfg["vgg_weights"]:
        input_paths.append(cfg["vgg_weights"])
    inputs = _digest_inputs(input_paths)
    ld = load_volume(args.ld)
    nd = load_volume(args.nd)
    train_config = TrainConfig(
        weights=LossWeights(
            lambda_g=cfg["lambda_g"],
            lambda_p=cfg["lambda_p"],
            lambda_v=cfg["lambda_v"],
            lambda_d=cfg["lambda_d"],
        ),
        d=cfg["depth"],
        batch_size=cfg["batch_size"],
        d_steps_per_g=cfg["d_steps_per_g"],
        learning_rate=cfg["learning_rate"],
        beta1=cfg["beta1"],
        beta2=cfg["beta2"],
        total_g_steps=cfg["total_g_steps"],
        crop_size=cfg["crop_size"],
        seed=cfg["seed"],
        extractor_kind=cfg["extractor_kind"],
        vgg_weights=cfg["vgg_weights"] or None,
        vgg_count_mode=cfg["vgg_count_mode"],
        checkpoint_every=cfg["checkpoint_every"],
        mse_form=cfg["mse_form"],
        feature_threshold=cfg["feature_threshold"],
    )
    out = Path(args.out)
    with output_lock(out):
        t0 = perf_counter()
        result = train(ld, nd, train_config, out)
        names = [p.name for p in result.checkpoint_paths] + [result.metrics_path.name]
        _finish_run(
            out, "train", argv, cfg, inputs,
            _digest_outputs(out, names),
            seeds={"train": cfg["seed"]},
            timings={"train_seconds": perf_counter() - t0},
        )
    return 0


def _cmd_enhance(args, argv) -> int:
    from .enhance import enhance_stream
    from .formats import load_generator_checkpoint, load_volume, save_volume
    from .phantoms import Volume

    inputs = _digest_inputs([args.in_path, args.checkpoint])
    out = Path(args.out)
    with output_lock(out):
        generator, ckpt_meta = load_generator_checkpoint(args.checkpoint)
        volume = load_volume(args.in_path)
        d = int(ckpt_meta["depth"])
        source = ((i, volume.data[i]) for i in range(volume.data.shape[0]))
        per_slice = []
        slices = []
        t0 = perf_counter()
        for image in enhance_stream(generator, source, d, pad=args.pad):
            per_slice.append(perf_counter() - t0)
            slices.append(image.data)
            t0 = perf_counter()
        meta = dict(volume.meta)
        meta["model_digest"] = inputs[str(args.checkpoint)]
        if "g_step" in ckpt_meta:
            meta["model_g_step"] = int(ckpt_meta["g_step"])
        denoised = Volume(
            np.stack(slices).astype(np.float32),
            voxel_size=volume.voxel_size,
            provenance="denoised",
            meta=meta,
        )
        save_volume(out / "volume.h5", denoised)
        _finish_run(
            out, "enhance", argv,
            {"checkpoint": str(args.checkpoint), "depth": d, "pad": args.pad},
            inputs, _digest_outputs(out, ("volume.h5",)),
            seeds={},
            timings={"per_slice_seconds": per_slice, "total_seconds": float(sum(per_slice))},
        )
    return 0


def _parse_profile(text: str):
    parts = text.split(":")
    if len(parts) != 4:
        raise UsageError(f"--profile expects slice:row:col0:col1, got {text!r}")
    try:
        return tuple(int(p) for p in parts)
    except ValueError:
        raise UsageError(f"--profile fields must be integers, got {text!r}") from None


def _cmd_evaluate(args, argv) -> int:
    from .formats import load_volume
    from .quality import build_report, line_profile, write_report
    from .recon import SliceImage

    profile_specs = [_parse_profile(text) for text in args.profile or ()]
    inputs = _digest_inputs([args.gt, args.ld, args.dn])
    out = Path(args.out)
    with output_lock(out):
        t0 = perf_counter()
        gt = load_volume(args.gt)
        ld = load_volume(args.ld)
        dn = load_volume(args.dn)
        report = build_report(gt, ld, dn, rel_threshold=args.rel_threshold)
        profiles = []
        for s, row, c0, c1 in profile_specs:
            n_slices = gt.data.shape[0]
            if not 0 <= s < n_slices:
                raise IndexRangeError(f"profile slice {s} outside [0, {n_slices})")
            images = [
                SliceImage(vol.data[s], prov, s)
                for vol, prov in ((gt, "ground_truth"), (ld, "low_dose"), (dn, "denoised"))
            ]
            table = line_profile(images, row, (c0, c1))
            table["slice_index"] = s
            profiles.append(table)
        report.line_profiles = profiles
        write_report(report, out / "report.tsv", out / "summary.json")
        names = ["report.tsv", "summary.json"]
        if profiles:
            serializable = [
                {
                    "slice_index": p["slice_index"],
                    "row": p["row"],
                    "col_start": p["col_start"],
                    "col_stop": p["col_stop"],
                    "profiles": [[name, [float(v) for v in vals]] for name, vals in p["profiles"]],
                }
                for p in profiles
            ]
            with open(out / "profiles.json", "w") as f:
                json.dump(serializable, f, indent=2, sort_keys=True)
                f.write("\n")
            names.append("profiles.json")
        _finish_run(
            out, "evaluate", argv,
            {"rel_threshold": args.rel_threshold, "profiles": list(args.profile or ())},
            inputs, _digest_outputs(out, names),
            seeds={}, timings={"evaluate_seconds": perf_counter() - t0},
        )
    return 0


def _montage(maps) -> np.ndarray:
    """Tile per-channel maps row-major into one near-square image."""
    count = len(maps)
    ncol = int(np.ceil(np.sqrt(count)))
    nrow = int(np.ceil(count / ncol))
    h, w = maps[0].shape
    canvas = np.zeros((nrow * h, ncol * w), dtype=np.float64)
    for k, m in enumerate(maps):
        r, c = divmod(k, ncol)
        canvas[r * h : (r + 1) * h, c * w : (c + 1) * w] = m
    return canvas


def _cmd_inspect(args, argv) -> int:
    from matplotlib import image as mpimage

    from .formats import load_generator_checkpoint, load_volume, save_volume
    from .network import SliceStack, extract_feature_maps
    from .phantoms import Volume

    inputs = _digest_inputs([args.in_path, args.checkpoint])
    out = Path(args.out)
    with output_lock(out):
        t0 = perf_counter()
        generator, ckpt_meta = load_generator_checkpoint(args.checkpoint)
        volume = load_volume(args.in_path)
        d = int(ckpt_meta["depth"])
        n_slices = volume.data.shape[0]
        if not 0 <= args.slice < n_slices:
            raise IndexRangeError(f"slice {args.slice} outside [0, {n_slices})")
        half = d // 2
        idx = np.clip(np.arange(args.slice - half, args.slice + half + 1), 0, n_slices - 1)
        stack = SliceStack(volume.data[idx].astype(np.float32), center_index=args.slice)
        maps = extract_feature_maps(generator, stack, args.tag)
        feature_volume = Volume(
            np.stack(maps),
            provenance="feature_maps",
            meta={
                "layer_tag": args.tag,
                "slice_index": args.slice,
                "model_digest": inputs[str(args.checkpoint)],
            },
        )
        save_volume(out / "feature_maps.h5", feature_volume)
        canvas = _montage(maps)
        lo, hi = float(canvas.min()), float(canvas.max())
        mpimage.imsave(
            out / "feature_maps.png", canvas, cmap="gray",
            vmin=lo, vmax=hi if hi > lo else lo + 1.0, format="png",
        )
        _finish_run(
            out, "inspect", argv,
            {"tag": args.tag, "slice": args.slice, "checkpoint": str(args.checkpoint)},
            inputs, _digest_outputs(out, ("feature_maps.h5", "feature_maps.png")),
            seeds={}, timings={"inspect_seconds": perf_counter() - t0},
        )
    return 0


def _read_report_tsv(path) -> dict:
    expected = ("slice_index", "ssim_ld", "ssim_dn", "psnr_ld", "psnr_dn")
    try:
        with open(path) as f:
            lines = f.read().splitlines()
    except OSError as e:
        raise IOFailureError(f"cannot read {path}: {e}") from None
    if not lines or tuple(lines[0].split("\t")) != expected:
        raise CorruptFileError(f"{path}: not a quality report")
    rows = []
    for n, line in enumerate(lines[1:], start=2):
        parts = line.split("\t")
        if len(parts) != len(expected):
            raise CorruptFileError(f"{path}:{n}: expected {len(expected)} fields")
        try:
            rows.append([float(p) for p in parts])
        except ValueError:
            raise CorruptFileError(f"{path}:{n}: non-numeric field") from None
    table = np.asarray(rows, dtype=np.float64).reshape(len(rows), len(expected))
    return {name: table[:, k] for k, name in enumerate(expected)}


def _cmd_plot(args, argv) -> int:
    from .quality import render_box_plot, render_profile_overlay, render_training_curves

    sources = [p for p in (args.report, args.metrics, args.profiles) if p is not None]
    if not sources:
        raise UsageError("plot needs at least one of --report, --metrics, --profiles")
    inputs = _digest_inputs(sources)
    out = Path(args.out)
    with output_lock(out):
        t0 = perf_counter()
        names = []
        if args.report is not None:
            columns = _read_report_tsv(args.report)
            render_box_plot(
                {"low dose": columns["ssim_ld"], "denoised": columns["ssim_dn"]},
                "SSIM", out / "ssim_box.png",
            )
            render_box_plot(
                {"low dose": columns["psnr_ld"], "denoised": columns["psnr_dn"]},
                "PSNR (dB)", out / "psnr_box.png",
            )
            names += ["ssim_box.png", "psnr_box.png"]
        if args.metrics is not None:
            from .trainer import read_metrics

            render_training_curves(read_metrics(args.metrics), out / "training_curves.png")
            names.append("training_curves.png")
        if args.profiles is not None:
            try:
                with open(args.profiles) as f:
                    tables = json.load(f)
            except OSError as e:
                raise IOFailureError(f"cannot read {args.profiles}: {e}") from None
            except json.JSONDecodeError as e:
                raise CorruptFileError(f"{args.profiles}: {e}") from None
            for k, table in enumerate(tables):
                name = f"profile_{table.get('slice_index', k)}_{table['row']}.png"
                render_profile_overlay(table, out / name)
                names.append(name)
        _finish_run(
            out, "plot", argv,
            {
                "report": str(args.report) if args.report else None,
                "metrics": str(args.metrics) if args.metrics else None,
                "profiles": str(args.profiles) if args.profiles else None,
            },
            inputs, _digest_outputs(out, names),
            seeds={}, timings={"plot_seconds": perf_counter() - t0},
        )
    return 0


# ----------------------------------------------------------------- parser

class _Parser(argparse.ArgumentParser):
    """Parser whose failures surface as single-line usage errors."""

    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="tomodenoise",
        description="Simulate, degrade, reconstruct, denoise, and score tomography volumes.",
        allow_abbrev=False,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="subcommand", metavar="subcommand", required=True)

    p = sub.add_parser("simulate", help="foam phantom plus noiseless projections")
    p.add_argument("--config", required=True, help="simulation config file")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(handler=_cmd_simulate)

    p = sub.add_parser("degrade", help="subsample views or add photon noise")
    p.add_argument("--in", dest="in_path", required=True, help="sinogram stack")
    p.add_argument("--out", required=True)
    p.add_argument("--factor", type=int, help="keep every factor-th view")
    p.add_argument("--photons", type=float, help="incident photons per detector pixel")
    p.add_argument("--noise-seed", type=int, help="photon noise seed")
    p.add_argument("--absorption-scale", type=float, default=0.025,
                   help="target mean sample absorption before noising")
    p.add_argument("--noiseless", action="store_true",
                   help="apply the absorption rescale round trip without sampling")
    p.set_defaults(handler=_cmd_degrade)

    p = sub.add_parser("reconstruct", help="FBP or SIRT per slice")
    p.add_argument("--in", dest="in_path", required=True, help="sinogram stack")
    p.add_argument("--out", required=True)
    p.add_argument("--method", required=True, choices=("fbp", "sirt"))
    p.add_argument("--filter", default="ramp", choices=("ramp", "shepp_logan", "hann"),
                   help="FBP frequency filter")
    p.add_argument("--iterations", type=int, help="SIRT iteration count")
    p.add_argument("--nonneg", action="store_true", help="project SIRT iterates to >= 0")
    p.set_defaults(handler=_cmd_reconstruct)

    p = sub.add_parser("train", help="fit the denoising generator")
    p.add_argument("--ld", required=True, help="low-dose reconstruction volume")
    p.add_argument("--nd", required=True, help="normal-dose reconstruction volume")
    p.add_argument("--config", required=True, help="training config file")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_cmd_train)

    p = sub.add_parser("enhance", help="denoise a volume with a trained generator")
    p.add_argument("--in", dest="in_path", required=True, help="low-dose volume")
    p.add_argument("--checkpoint", required=True, help="generator checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--pad", action="store_true",
                   help="edge-pad slices whose sides are not multiples of 8")
    p.set_defaults(handler=_cmd_enhance)

    p = sub.add_parser("evaluate", help="SSIM/PSNR report against ground truth")
    p.add_argument("--gt", required=True, help="ground truth volume")
    p.add_argument("--ld", required=True, help="low-dose volume")
    p.add_argument("--dn", required=True, help="denoised volume")
    p.add_argument("--out", required=True)
    p.add_argument("--rel-threshold", type=float, default=0.01,
                   help="feature-slice variance threshold, relative")
    p.add_argument("--profile", action="append", metavar="SLICE:ROW:COL0:COL1",
                   help="extract a pixel line profile (repeatable)")
    p.set_defaults(handler=_cmd_evaluate)

    p = sub.add_parser("inspect", help="dump generator feature maps at one layer")
    p.add_argument("--in", dest="in_path", required=True, help="input volume")
    p.add_argument("--checkpoint", required=True, help="generator checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--slice", type=int, required=True, help="center slice index")
    p.add_argument("--tag", default="bottleneck", help="layer tag to tap")
    p.set_defaults(handler=_cmd_inspect)

    p = sub.add_parser("plot", help="figures from reports, metrics logs, and profiles")
    p.add_argument("--report", help="quality report TSV")
    p.add_argument("--metrics", help="training metrics log")
    p.add_argument("--profiles", help="line profile JSON")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_cmd_plot)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:]) if argv is None else [str(a) for a in argv]
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.handler(args, argv)
    except ToolError as e:
        print(e.oneline(), file=sys.stderr)
        return 2 if e.code == "usage" else 1
