"""Command-line entry point: ``cranio-synth <command> [options]``.

Settings resolve as command-line flag > JSON config file > built-in default.
The config file holds one object per section (``phantom``, ``train``,
``synthesis``, ``eval``, ``embed``, ``interp``) plus top-level ``seed``,
``workers`` and ``out``. Unknown keys are rejected before any work starts.

Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Sequence

import torch

from . import evaluation as ev
from . import phantom as ph
from . import synthesis as syn
from . import training as tr

log = logging.getLogger("cranio_synth")

OUT_ENV = "CRANIO_SYNTH_OUT"
DEFAULT_OUT = "cranio_out"
EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _field_names(cls) -> set[str]:
    return {f.name for f in dataclasses.fields(cls)}


SECTIONS: dict[str, set[str]] = {
    "phantom": (_field_names(ph.PhantomParams) - {"seed"}) | {"n_skulls", "split_fractions"},
    "train": (_field_names(tr.TrainConfig) - {"seed"}) | {"data", "resume"},
    "synthesis": (_field_names(syn.SynthesisConfig) - {"seed", "out_dir", "workers"}) | {"checkpoint"},
    "eval": {"real", "generators", "subset_sizes", "vnet_epochs", "vnet_steps", "vnet_base_channels", "vnet_levels", "eval_resolution", "include_baseline"},
    "embed": {"datasets", "mode", "k", "encoder"},
    "interp": {"checkpoint", "steps", "z_seeds"},
}
TOP_LEVEL = {"seed", "workers", "out"}

DEFAULTS: dict[str, dict[str, Any]] = {
    "phantom": {"resolution": 32, "n_skulls": 10, "split_fractions": [0.8, 0.0, 0.2]},
    "train": {},
    "synthesis": {"count": 100},
    "eval": {"subset_sizes": [50, 200, 1000], "vnet_epochs": 20, "include_baseline": True, "generators": {}},
    "embed": {"mode": "flatten_downsampled", "k": 16, "datasets": {}},
    "interp": {"steps": 5},
}


def load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        cfg = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise UsageError("config file must hold a JSON object")
    for key, value in cfg.items():
        if key in TOP_LEVEL:
            continue
        if key not in SECTIONS:
            raise UsageError(f"unknown config key {key!r}")
        if not isinstance(value, dict):
            raise UsageError(f"config section {key!r} must be an object")
        for sub in value:
            if sub not in SECTIONS[key]:
                raise UsageError(f"unknown config key {key}.{sub}")
    return cfg


def resolve(section: str, file_cfg: dict, flags: dict) -> dict:
    """Merge one section: defaults, then file values, then non-None flags."""
    out = dict(DEFAULTS.get(section, {}))
    out.update(file_cfg.get(section, {}))
    out.update({k: v for k, v in flags.items() if v is not None})
    return out


def _global(args, file_cfg: dict, key: str, default):
    v = getattr(args, key, None)
    if v is not None:
        return v
    return file_cfg.get(key, default)


def _out_dir(args, file_cfg: dict) -> Path:
    return Path(_global(args, file_cfg, "out", None) or os.environ.get(OUT_ENV) or DEFAULT_OUT)


def _require_path(value, what: str, is_dir: bool = False) -> Path:
    if value is None:
        raise UsageError(f"{what} is required")
    p = Path(value)
    if not (p.is_dir() if is_dir else p.is_file()):
        raise UsageError(f"{what} not found: {value}")
    return p


def _pairs(items: Sequence[str] | None, what: str) -> dict[str, str] | None:
    if items is None:
        return None
    out = {}
    for item in items:
        name, sep, path = item.partition("=")
        if not sep or not name or not path:
            raise UsageError(f"{what} must look like NAME=PATH, got {item!r}")
        out[name] = path
    return out


def _csv_numbers(text: str | None, cast, what: str):
    if text is None:
        return None
    try:
        return [cast(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"{what} must be a comma-separated list of numbers, got {text!r}") from None


def _build(cls, what: str, **kwargs):
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid {what} config: {exc}") from None


# -- commands ------------------------------------------------------------------------


def cmd_phantom(args, file_cfg: dict) -> int:
    c = resolve("phantom", file_cfg, {"resolution": args.resolution, "n_skulls": args.n_skulls, "split_fractions": _csv_numbers(args.split_fractions, float, "--split-fractions")})
    seed = _global(args, file_cfg, "seed", 0)
    fractions = c.pop("split_fractions")
    n_skulls = c.pop("n_skulls")
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise UsageError(f"phantom.split_fractions must be three non-negative numbers summing to 1, got {fractions}")
    res = c.pop("resolution")
    if "outer_radii" in c:
        c["outer_radii"] = tuple(c["outer_radii"])
    try:
        params = ph.PhantomParams.for_resolution(res, seed=seed, **c)
        params.validate()
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid phantom config: {exc}") from None
    try:
        data = ph.build_dataset(n_skulls, params, tuple(fractions))
    except ph.PhantomError:
        raise
    except ValueError as exc:
        raise UsageError(f"invalid phantom config: {exc}") from None
    out = ph.save_dataset(data, _out_dir(args, file_cfg))
    for split in ph.SPLITS:
        print(f"{split}: {data.splits.count(split)} samples")
    log.info("dataset written to %s", out)
    return EXIT_OK


def cmd_train(args, file_cfg: dict) -> int:
    flags = {
        "model_kind": args.model_kind,
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "learning_rate": args.learning_rate,
        "base_channels": args.base_channels,
        "checkpoint_every": args.checkpoint_every,
        "data": args.data,
        "resume": args.resume,
    }
    c = resolve("train", file_cfg, flags)
    data_dir = _require_path(c.pop("data", None), "train.data (dataset directory)", is_dir=True)
    resume_path = c.pop("resume", None)
    resume = tr.load_checkpoint(_require_path(resume_path, "--resume checkpoint")) if resume_path else None
    data = ph.load_dataset(data_dir)
    if data.splits and "train" in data.splits:
        data = data.subset("train")
    c.setdefault("resolution", data.resolution)
    cfg = _build(tr.TrainConfig, "train", seed=_global(args, file_cfg, "seed", 0), **c)
    if cfg.resolution != data.resolution:
        raise UsageError(f"train.resolution {cfg.resolution} does not match dataset resolution {data.resolution}")
    out = _out_dir(args, file_cfg)
    out.mkdir(parents=True, exist_ok=True)
    log.info("training %s on %d samples for %d epochs", cfg.model_kind, len(data), cfg.total_epochs())
    ckpt, trace = tr.train(cfg, data, resume=resume, checkpoint_dir=out)
    for r in trace.records("stage_start"):
        print(f"stage {int(r.value)} started at epoch {r.epoch}")
    print(f"final checkpoint: {out / 'final.ckpt'}")
    return EXIT_OK


def _synthesis_config(args, file_cfg: dict, section: dict, **extra) -> syn.SynthesisConfig:
    keys = _field_names(syn.SynthesisConfig)
    kw = {k: v for k, v in section.items() if k in keys}
    kw.update(extra)
    return _build(syn.SynthesisConfig, "synthesis", seed=_global(args, file_cfg, "seed", 0), workers=_global(args, file_cfg, "workers", 1), **kw)


def cmd_generate(args, file_cfg: dict) -> int:
    c = resolve("synthesis", file_cfg, {"checkpoint": args.checkpoint, "count": args.count, "threshold": args.threshold, "min_voxels": args.min_voxels, "connectivity": args.connectivity})
    ckpt = tr.load_checkpoint(_require_path(c.pop("checkpoint", None), "synthesis.checkpoint"))
    cfg = _synthesis_config(args, file_cfg, c, out_dir=str(_out_dir(args, file_cfg)))
    _, info = syn.synthesize_dataset(ckpt, cfg)
    print(f"emitted: {info['emitted']}")
    print(f"discarded: {info['discarded']}")
    return EXIT_OK


def cmd_eval(args, file_cfg: dict) -> int:
    flags = {
        "real": args.real,
        "generators": _pairs(args.generator, "--generator"),
        "subset_sizes": _csv_numbers(args.sizes, int, "--sizes"),
        "vnet_epochs": args.vnet_epochs,
        "vnet_steps": args.vnet_steps,
        "eval_resolution": args.eval_resolution,
        "include_baseline": False if args.no_baseline else None,
    }
    c = resolve("eval", file_cfg, flags)
    if not c["subset_sizes"]:
        raise UsageError("eval.subset_sizes is empty")
    if not c["generators"] and not c["include_baseline"]:
        raise UsageError("eval grid is empty: give at least one --generator or enable the baseline")
    real = ph.load_dataset(_require_path(c.get("real"), "eval.real (phantom dataset directory)", is_dir=True))
    gens: dict[str, Any] = {}
    for name, path in c["generators"].items():
        p = Path(path)
        if p.is_dir():
            gens[name] = ph.load_dataset(p)
        else:
            gens[name] = tr.load_checkpoint(_require_path(path, f"generator {name}"))
    seed = _global(args, file_cfg, "seed", 0)
    vnet_kw = {k: c[f"vnet_{k}"] for k in ("base_channels", "levels") if c.get(f"vnet_{k}") is not None}
    vnet = _build(tr.TrainConfig, "vnet", model_kind="vnet", resolution=real.resolution, epochs=c["vnet_epochs"], seed=seed, **{f"vnet_{k}": v for k, v in vnet_kw.items()})
    try:
        table = ev.TableConfig(
            subset_sizes=tuple(c["subset_sizes"]),
            vnet=vnet,
            vnet_steps=c.get("vnet_steps"),
            synthesis=_synthesis_config(args, file_cfg, resolve("synthesis", file_cfg, {})),
            eval_resolution=c.get("eval_resolution"),
            include_baseline=bool(c["include_baseline"]),
            seed=seed,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    reports = ev.run_table_experiment(gens, real, table)
    paths = ev.export_report(reports, _out_dir(args, file_cfg))
    sys.stdout.write(paths["table"].read_text())
    return EXIT_OK


def cmd_embed(args, file_cfg: dict) -> int:
    c = resolve("embed", file_cfg, {"datasets": _pairs(args.dataset, "--dataset"), "mode": args.mode, "k": args.k, "encoder": args.encoder})
    if not c["datasets"]:
        raise UsageError("embed.datasets is empty")
    if c["mode"] not in ("flatten_downsampled", "encoder_latent"):
        raise UsageError(f"embed.mode must be flatten_downsampled or encoder_latent, got {c['mode']!r}")
    data = {name: ph.load_dataset(_require_path(p, f"dataset {name}", is_dir=True)) for name, p in c["datasets"].items()}
    encoder = None
    if c["mode"] == "encoder_latent":
        encoder = tr.load_checkpoint(_require_path(c.get("encoder"), "embed.encoder checkpoint"))
    k = c.get("k")
    m = ev.build_embedding_matrix(data, c["mode"], None if k in (None, 0) else int(k), encoder)
    coords, var = ev.project_pca_2d(m)
    ev.export_embedding(m, coords, _out_dir(args, file_cfg))
    print(f"rows: {m.features.shape[0]} features: {m.features.shape[1]}")
    print(f"explained variance: {var[0]:.4f} {var[1]:.4f}")
    return EXIT_OK


def cmd_interp(args, file_cfg: dict) -> int:
    c = resolve("interp", file_cfg, {"checkpoint": args.checkpoint, "steps": args.steps, "z_seeds": _csv_numbers(args.z_seeds, int, "--z-seeds")})
    if c["steps"] < 2:
        raise UsageError(f"interp.steps must be >= 2, got {c['steps']}")
    ckpt = tr.load_checkpoint(_require_path(c.get("checkpoint"), "interp.checkpoint"))
    seed = _global(args, file_cfg, "seed", 0)
    z_seeds = c.get("z_seeds") or [seed, seed + 1]
    if len(z_seeds) != 2:
        raise UsageError("interp.z_seeds must name exactly two seeds")
    gen = syn.load_generator(ckpt)
    dim = gen.config["latent_dim"]
    z1 = syn.sample_latents(1, dim, z_seeds[0])[0]
    z2 = syn.sample_latents(1, dim, z_seeds[1])[0]
    samples = syn.interpolate_latent(gen, z1, z2, c["steps"], _synthesis_config(args, file_cfg, resolve("synthesis", file_cfg, {})))
    paths = syn.write_samples(samples, _out_dir(args, file_cfg))
    print(f"wrote {len(paths)} interpolation steps")
    return EXIT_OK


COMMANDS = {"phantom": cmd_phantom, "train": cmd_train, "generate": cmd_generate, "eval": cmd_eval, "embed": cmd_embed, "interp": cmd_interp}


# -- parser ----------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("global options")
    g.add_argument("--config", help="JSON config file")
    g.add_argument("--seed", type=int, help="global seed (default 0)")
    g.add_argument("--workers", type=int, help="worker threads (default 1, the deterministic mode)")
    g.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./{DEFAULT_OUT})")
    g.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    parser = _Parser(prog="cranio-synth", description="Volumetric skull-defect synthesis and evaluation.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("phantom", parents=[common], help="build a phantom dataset")
    p.add_argument("--n-skulls", type=int)
    p.add_argument("--resolution", type=int)
    p.add_argument("--split-fractions", help="train,validation,test e.g. 0.8,0,0.2")

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--model-kind", choices=tr.MODEL_KINDS)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--base-channels", type=int)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--resume", help="checkpoint to resume from")

    p = sub.add_parser("generate", parents=[common], help="synthesize a dataset from a checkpoint")
    p.add_argument("--checkpoint")
    p.add_argument("--count", type=int)
    p.add_argument("--threshold", type=float)
    p.add_argument("--min-voxels", type=int)
    p.add_argument("--connectivity", type=int, choices=(6, 18, 26))

    p = sub.add_parser("eval", parents=[common], help="V-Net DSC table over synthetic subsets")
    p.add_argument("--real", help="phantom dataset directory with train/test splits")
    p.add_argument("--generator", action="append", metavar="NAME=PATH", help="checkpoint or synthetic dataset directory")
    p.add_argument("--sizes", help="comma-separated subset sizes")
    p.add_argument("--vnet-epochs", type=int)
    p.add_argument("--vnet-steps", type=int, help="fixed optimiser-step budget per V-Net")
    p.add_argument("--eval-resolution", type=int)
    p.add_argument("--no-baseline", action="store_true")

    p = sub.add_parser("embed", parents=[common], help="embedding matrix and 2D PCA")
    p.add_argument("--dataset", action="append", metavar="NAME=DIR")
    p.add_argument("--mode", choices=("flatten_downsampled", "encoder_latent"))
    p.add_argument("--k", type=int, help="downsampled side length (0 keeps native resolution)")
    p.add_argument("--encoder", help="checkpoint with an encoder (latent mode)")

    p = sub.add_parser("interp", parents=[common], help="latent interpolation between two draws")
    p.add_argument("--checkpoint")
    p.add_argument("--steps", type=int)
    p.add_argument("--z-seeds", help="two comma-separated seeds for the endpoint codes")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)
    try:
        file_cfg = load_config_file(args.config)
        workers = _global(args, file_cfg, "workers", 1)
        if not isinstance(workers, int) or workers < 1:
            raise UsageError("workers must be a positive integer")
        torch.set_num_threads(workers)
        return COMMANDS[args.command](args, file_cfg)
    except UsageError as exc:
        print(f"cranio-synth {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - every other failure is a runtime error
        log.debug("traceback", exc_info=True)
        print(f"cranio-synth {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
