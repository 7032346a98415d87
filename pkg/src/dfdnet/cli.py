"""Command-line entry point: ``dfdnet {train,derain,eval,decompose,rainfall}``.

Exit codes are 0 on success, 2 for usage or configuration problems and 3 for
failures while the command runs (I/O, numerical).
"""

from __future__ import annotations

import argparse
import configparser
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from dfdnet.autodiff import Tensor, no_grad
from dfdnet.errors import ContractError
from dfdnet.image import (
    DatasetManifest,
    RainParams,
    atomic_write,
    decompose_label,
    detail_to_display,
    load_image,
    save_image,
    synthesize_rain,
)
from dfdnet.losses import LossWeights
from dfdnet.net import ModelConfig
from dfdnet.trainer import Checkpoint, TrainHyper, derain, evaluate, restore, train

log = logging.getLogger("dfdnet")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3


class ConfigError(Exception):
    """Bad or missing configuration; maps to exit code 2."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(f"{self.prog}: {message}")


# -- configuration -------------------------------------------------------------------

_MODEL_KEYS = {f.name: f for f in fields(ModelConfig)}
_HYPER_KEYS = {
    "lr": float, "batch": int, "iters": int, "seed": int, "halve_lr_every": int, "patch_size": int,
    "log_every": int, "val_every": int, "checkpoint_every": int,
}
_WEIGHT_KEYS = {"lambda_detail": "detail", "lambda_structure": "structure",
                "lambda_reconstruction": "reconstruction"}
_PATH_KEYS = ("train_manifest", "val_manifest", "out_dir")
_SECTION = "config"


def _to_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def parse_config(path: str | Path) -> tuple[ModelConfig, TrainHyper, dict[str, Path | None]]:
    """Read a ``key = value`` file into model config, hyperparameters and paths.

    Blank lines and ``#`` comments are ignored, unknown or repeated keys are
    errors, and relative paths resolve against the config file's folder.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    cp = configparser.ConfigParser(delimiters=("=",), comment_prefixes=("#",), inline_comment_prefixes=None,
                                   interpolation=None, strict=True)
    cp.optionxform = str
    try:
        cp.read_string(f"[{_SECTION}]\n{text}", source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    raw = dict(cp[_SECTION])

    known = set(_MODEL_KEYS) | set(_HYPER_KEYS) | set(_WEIGHT_KEYS) | set(_PATH_KEYS)
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"{path}: unknown key(s) {', '.join(unknown)}")

    model, hyper, weights = {}, {}, {}
    try:
        for key, value in raw.items():
            if key in _MODEL_KEYS:
                default = _MODEL_KEYS[key].default
                model[key] = _to_bool(value) if isinstance(default, bool) else type(default)(value.strip())
            elif key in _HYPER_KEYS:
                hyper[key] = _HYPER_KEYS[key](value.strip())
            elif key in _WEIGHT_KEYS:
                weights[_WEIGHT_KEYS[key]] = float(value)
        cfg = ModelConfig(**model)
        hyper = TrainHyper(**hyper, weights=LossWeights(**weights))
    except (ValueError, TypeError) as exc:
        # ContractError is a ValueError, so config invariants land here as well
        raise ConfigError(f"{path}: {exc}") from exc

    paths: dict[str, Path | None] = {}
    for key in _PATH_KEYS:
        value = raw.get(key, "").strip()
        paths[key] = (path.parent / value) if value else None
    for key in ("train_manifest", "out_dir"):
        if paths[key] is None:
            raise ConfigError(f"{path}: missing required key {key}")
    return cfg, hyper, paths


def _echo_config(cfg: ModelConfig, hyper: TrainHyper, paths: dict) -> None:
    for key, value in cfg.to_dict().items():
        log.info("config %s = %s", key, value)
    for key in _HYPER_KEYS:
        log.info("config %s = %s", key, getattr(hyper, key))
    for key, attr in _WEIGHT_KEYS.items():
        log.info("config %s = %s", key, getattr(hyper.weights, attr))
    for key, value in paths.items():
        log.info("config %s = %s", key, value if value is not None else "")


# -- subcommands ----------------------------------------------------------------------

def _load_manifest(path: Path) -> DatasetManifest:
    try:
        manifest = DatasetManifest.load(path)
    except FileNotFoundError as exc:
        raise ConfigError(f"manifest not found: {path}") from exc
    except ContractError as exc:
        raise ConfigError(str(exc)) from exc
    if not manifest.entries:
        raise ConfigError(f"manifest {path} has no entries")
    return manifest


def cmd_train(args) -> int:
    cfg, hyper, paths = parse_config(args.config)
    _echo_config(cfg, hyper, paths)
    resume = None
    if args.resume:
        resume = Checkpoint.load(args.resume)
        if resume.config != cfg:
            diff = [k for k, v in cfg.to_dict().items() if resume.config.to_dict()[k] != v]
            raise ConfigError(f"--resume checkpoint config differs in field(s) {', '.join(diff)}")
    manifest = _load_manifest(paths["train_manifest"])
    val = _load_manifest(paths["val_manifest"]) if paths["val_manifest"] else None
    result = train(manifest, cfg, hyper, val_manifest=val, out_dir=paths["out_dir"], resume=resume)
    log.info("wrote %s and %s", paths["out_dir"] / "checkpoint.dfd", paths["out_dir"] / "log.csv")
    if result.losses.size:
        print(f"final L_c {result.losses[-1]:.6f}")
    return EXIT_OK


def _dump_features(model, image: np.ndarray, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    feats: list = []
    model.eval()
    with no_grad():
        model(Tensor(image[None]), features=feats)
    notes = ["# channel-mean feature maps per stage",
             "# detail maps are shown as 0.5 + x/2; structure maps as x, both clamped to [0, 1]",
             "file\tmin\tmax"]
    for t, (z_d, z_s) in enumerate(feats, 1):
        for branch, z in (("detail", z_d), ("structure", z_s)):
            fmap = z.data[0].mean(axis=0)
            name = f"stage{t}_{branch}.png"
            save_image(detail_to_display(fmap) if branch == "detail" else fmap, directory / name)
            notes.append(f"{name}\t{fmap.min():.6g}\t{fmap.max():.6g}")
    atomic_write(directory / "features.txt",
                 lambda tmp: Path(tmp).write_text("\n".join(notes) + "\n", encoding="utf-8"))


def cmd_derain(args) -> int:
    model = restore(Checkpoint.load(args.model))
    if args.dump_features and not model.config.dual:
        raise ConfigError("--dump-features needs a dual-branch model (ablation BL has one branch)")
    image = load_image(args.input)
    save_image(derain(model, image), args.output)
    if args.dump_features:
        _dump_features(model, image, Path(args.dump_features))
    return EXIT_OK


def cmd_eval(args) -> int:
    manifest = _load_manifest(Path(args.manifest))
    report = evaluate(Checkpoint.load(args.model), manifest)
    report.write_csv(args.out)
    m = report.mean
    print(f"mean psnr_in {m['psnr_in']:.6f} psnr_out {m['psnr_out']:.6f} "
          f"ssim_in {m['ssim_in']:.6f} ssim_out {m['ssim_out']:.6f}")
    return EXIT_OK


def cmd_decompose(args) -> int:
    structure, detail = decompose_label(load_image(args.input))
    save_image(structure, args.structure)
    save_image(detail_to_display(detail), args.detail)
    return EXIT_OK


def cmd_rainfall(args) -> int:
    try:
        params = RainParams(angle_degrees=args.angle, density=args.density, intensity=args.intensity,
                            seed=args.seed, length_px=args.length)
    except ContractError as exc:
        raise ConfigError(str(exc)) from exc
    save_image(synthesize_rain(load_image(args.input), params), args.output)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dfdnet", description="Two-branch structure/detail image deraining on numpy.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a model from a key = value config file")
    t.add_argument("--config", required=True)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("derain", help="derain one PNG with a trained checkpoint")
    d.add_argument("--model", required=True)
    d.add_argument("--input", required=True)
    d.add_argument("--output", required=True)
    d.add_argument("--dump-features", metavar="DIR", help="write per-stage branch feature maps here")
    d.set_defaults(func=cmd_derain)

    e = sub.add_parser("eval", help="PSNR/SSIM of a checkpoint over a manifest")
    e.add_argument("--model", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--out", required=True, help="CSV path")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("decompose", help="split an image into structure and detail PNGs")
    c.add_argument("--input", required=True)
    c.add_argument("--structure", required=True)
    c.add_argument("--detail", required=True, help="written as 0.5 + detail/2")
    c.set_defaults(func=cmd_decompose)

    r = sub.add_parser("rainfall", help="add synthetic rain streaks to a PNG")
    r.add_argument("--input", required=True)
    r.add_argument("--output", required=True)
    r.add_argument("--angle", type=float, default=10.0, help="degrees from vertical")
    r.add_argument("--density", type=float, default=2.0)
    r.add_argument("--intensity", type=float, default=0.6)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--length", type=float, default=24.0, help="streak length in pixels")
    r.set_defaults(func=cmd_rainfall)
    return p


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ContractError, FloatingPointError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
