"""Command-line entry points: gen-data, train, train-gan, eval, gradcheck, flow-viz.

Every command reads a flat ``key = value`` config (``--config``) plus
``--set key=value`` overrides, requires an explicit ``seed``, and echoes the
resolved config to ``<output>/config.txt``. Errors are one line on stderr of
the form ``rc3d: error: <kind>: <message>`` with a non-zero exit code.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import datagen, gradcheck, serialize
from .flow import FarnebackParams, motion_image
from .models import ConfigError, ModelConfig, build_classifier, build_critic, build_unet_generator, \
    parse_key_values
from .training import DEPTH_SOURCES, GanHyper, GanSchedule, TrainHyper, evaluate, train_classifier, train_gan

COMMANDS = ("gen-data", "train", "train-gan", "eval", "gradcheck", "flow-viz")
_MODEL = ("train", "train-gan", "eval")


@dataclass(frozen=True)
class Key:
    kind: type
    default: object
    commands: tuple[str, ...]
    help: str


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


REQUIRED = object()

KEYS: dict[str, Key] = {
    "seed": Key(int, REQUIRED, COMMANDS, "base seed for every random draw"),
    "output": Key(str, REQUIRED, COMMANDS, "output directory"),
    # gen-data
    "samples_per_class": Key(int, 100, ("gen-data",), "videos per class"),
    "valid_fraction": Key(float, 0.3, ("gen-data",), "per-class share of validation samples"),
    "render_size": Key(int, 64, ("gen-data",), "rendered frame extent in pixels"),
    "render_noise": Key(float, 0.02, ("gen-data",), "sensor noise std added at render time"),
    # model description
    "dataset": Key(str, REQUIRED, _MODEL, "dataset directory written by gen-data"),
    "model": Key(str, "rc3d", _MODEL, "c3d, p3da or rc3d"),
    "streams": Key(str, "rgb", _MODEL, "comma list drawn from rgb, gdepth, motion"),
    "profile": Key(str, "toy", _MODEL, "scale profile: toy or paper"),
    "frame_size": Key(int, 32, _MODEL, "clip frame extent after resampling"),
    "slope": Key(float, 0.1, _MODEL, "leaky slope of the activation"),
    "shift": Key(float, 0.1, _MODEL, "downward shift of the activation"),
    "head_width": Key(int, 256, _MODEL, "hidden width of the classifier head"),
    "motion_mode": Key(str, "span", _MODEL, "span or adjacent motion images"),
    # classifier training
    "optimizer": Key(str, "adam", ("train",), "adam or sgd"),
    "lr": Key(float, 1e-3, ("train", "train-gan"), "learning rate"),
    "momentum": Key(float, 0.9, ("train",), "sgd momentum"),
    "batch_size": Key(int, 8, ("train", "train-gan"), "minibatch size"),
    "epochs": Key(int, 20, ("train",), "training epochs"),
    "augment": Key(_bool, True, ("train",), "rotate and add noise to training clips"),
    "noise_sigma": Key(float, 0.03, ("train",), "augmentation noise std"),
    "max_rotation": Key(float, 30.0, ("train",), "augmentation rotation bound in degrees"),
    "generator": Key(str, "", ("train", "eval"), "train-gan output directory feeding the gdepth stream"),
    "depth_source": Key(str, "generated", ("train",), "gdepth input: generated or real"),
    # gan training
    "generator_pretrain_epochs": Key(int, 10, ("train-gan",), "phase 1 epochs"),
    "critic_pretrain_epochs": Key(int, 5, ("train-gan",), "phase 2 epochs"),
    "adversarial_epochs": Key(int, 2, ("train-gan",), "phase 3 epochs"),
    "switch_ratio": Key(int, 1, ("train-gan",), "critic steps per generator step"),
    "switch_mode": Key(str, "fixed", ("train-gan",), "fixed or threshold"),
    "loss_threshold": Key(float, 0.5, ("train-gan",), "critic loss below which threshold mode skips it"),
    "critic_lr": Key(float, 1e-3, ("train-gan",), "critic learning rate"),
    "mse_weight": Key(float, 100.0, ("train-gan",), "weight of the pixel MSE in the phase 3 generator loss"),
    # eval
    "checkpoint": Key(str, REQUIRED, ("eval",), "train output directory"),
    "split": Key(str, "valid", ("eval",), "train or valid"),
    # gradcheck
    "only": Key(str, "", ("gradcheck",), "substring filter on case names"),
    # flow-viz
    "sample": Key(str, REQUIRED, ("flow-viz",), "sample directory holding rgb_###.png frames"),
    "flow_levels": Key(int, 3, ("flow-viz",), "pyramid levels"),
    "flow_window": Key(int, 15, ("flow-viz",), "averaging window"),
    "flow_iterations": Key(int, 3, ("flow-viz",), "iterations per level"),
}


class CommandError(RuntimeError):
    """A failure with a one-line user-facing message."""


@dataclass
class RunConfig:
    command: str
    values: dict
    explicit: frozenset

    @classmethod
    def resolve(cls, command: str, config_path: str | None, sets: list[str]) -> "RunConfig":
        raw: dict[str, str] = {}
        if config_path:
            path = Path(config_path)
            if not path.is_file():
                raise ConfigError(f"config file {config_path} does not exist")
            raw.update(parse_key_values(path.read_text()))
        for item in sets:
            if "=" not in item:
                raise ConfigError(f"--set expects key=value, got {item!r}")
            k, v = item.split("=", 1)
            raw[k.strip()] = v.strip()
        known = {k for k, key in KEYS.items() if command in key.commands}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown keys for {command}: {', '.join(unknown)}")
        values = {}
        for name in sorted(known):
            key = KEYS[name]
            if name in raw:
                try:
                    values[name] = key.kind(raw[name])
                except ValueError as exc:
                    raise ConfigError(f"key {name}: {exc}") from None
            elif key.default is REQUIRED:
                if name == "seed":
                    raise ConfigError("seed is required; pass --set seed=N")
                raise ConfigError(f"key {name} is required for {command}")
            else:
                values[name] = key.default
        return cls(command, values, frozenset(raw))

    def __getitem__(self, name):
        return self.values[name]

    def to_text(self) -> str:
        lines = [f"# rc3d {self.command}"]
        lines += [f"{k} = {str(v).lower() if isinstance(v, bool) else v}" for k, v in sorted(self.values.items())]
        return "\n".join(lines) + "\n"

    def output_dir(self) -> Path:
        out = Path(self["output"])
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(self.to_text())
        return out

    def model_config(self, base: ModelConfig | None = None) -> ModelConfig:
        """Model keys from this run; keys not given explicitly fall back to ``base``."""
        names = ("model", "streams", "profile", "frame_size", "slope", "shift", "head_width", "motion_mode")
        kv = {} if base is None else parse_key_values(base.to_text())
        for n in names:
            if base is None or n in self.explicit:
                kv[n] = self.values[n]
        kv["seed"] = self["seed"]
        return ModelConfig.from_mapping(kv)


# ---------------------------------------------------------------------------
# helpers

def _existing_dir(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise ConfigError(f"{what} directory {path} does not exist")
    return p


def _write_jsonl(path: Path, records) -> None:
    path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))


def _write_csv(path: Path, rows: list[dict]) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def _load_into(module, directory: Path, what: str) -> None:
    try:
        module.load_state_dict(serialize.load_checkpoint(directory))
    except (KeyError, ValueError) as exc:
        raise CommandError(f"{what} checkpoint does not match the model config: {exc}") from None


def _load_generator(path: str):
    root = _existing_dir(path, "generator")
    cfg_path = root / "generator.txt"
    if not cfg_path.is_file():
        raise ConfigError(f"{cfg_path} is missing; point generator at a train-gan output")
    cfg = ModelConfig.from_text(cfg_path.read_text())
    gen = build_unet_generator(cfg.scale_profile(), np.random.default_rng(cfg.seed), cfg.activation())
    _load_into(gen, root / "generator", "generator")
    return gen.eval(), cfg


def _load_clipsets(cfg: RunConfig, size: int):
    root = _existing_dir(cfg["dataset"], "dataset")
    return datagen.load_clipsets(root, size)


def _model_label(mcfg: ModelConfig) -> str:
    return f"{mcfg.model}[{'+'.join(mcfg.streams)}]"


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(cfg: RunConfig) -> int:
    out = cfg.output_dir()
    videos = datagen.generate_dataset(cfg["samples_per_class"], cfg["seed"], cfg["render_size"],
                                      cfg["render_noise"])
    manifest = datagen.split_dataset(videos, cfg["valid_fraction"], cfg["seed"])
    datagen.write_dataset(out, videos, manifest)
    train, valid = manifest.per_class("train"), manifest.per_class("valid")
    print(f"{'class':<10s} {'train':>5s} {'valid':>5s}")
    for name, a, b in zip(manifest.class_names, train, valid):
        print(f"{name:<10s} {a:>5d} {b:>5d}")
    print(f"{'total':<10s} {sum(train):>5d} {sum(valid):>5d}")
    return 0


def cmd_train(cfg: RunConfig) -> int:
    mcfg = cfg.model_config()
    if cfg["depth_source"] not in DEPTH_SOURCES:
        raise ConfigError(f"depth_source must be one of {DEPTH_SOURCES}")
    generator = None
    if "gdepth" in mcfg.streams and cfg["depth_source"] == "generated":
        if not cfg["generator"]:
            raise ConfigError("streams include gdepth but no generator checkpoint was given (set generator=DIR)")
        generator, _ = _load_generator(cfg["generator"])
    net = build_classifier(mcfg)
    train, valid = _load_clipsets(cfg, mcfg.frame_size)
    out = cfg.output_dir()
    hyper = TrainHyper(optimizer=cfg["optimizer"], lr=cfg["lr"], momentum=cfg["momentum"],
                       batch_size=cfg["batch_size"], epochs=cfg["epochs"], seed=cfg["seed"],
                       augment=cfg["augment"], noise_sigma=cfg["noise_sigma"],
                       max_rotation=cfg["max_rotation"], depth_source=cfg["depth_source"])
    log = lambda rec: print(json.dumps(rec, sort_keys=True), flush=True)  # noqa: E731
    result = train_classifier(net, train, valid, hyper, generator, log)
    _write_jsonl(out / "metrics.jsonl", result.history)
    _write_jsonl(out / "timings.jsonl", result.timings)
    serialize.save_checkpoint(out / "checkpoint", result.best_state)
    serialize.save_checkpoint(out / "final", net.state_dict())
    (out / "model.txt").write_text(mcfg.to_text())
    row = result.metrics.row(_model_label(mcfg))
    row["best_epoch"] = result.best_epoch
    _write_csv(out / "results.csv", [row])
    print(f"validation {row['validation']:.2f}%  training {row['training']:.2f}%  variance {row['variance']:.2f}%")
    return 0


def cmd_train_gan(cfg: RunConfig) -> int:
    mcfg = cfg.model_config()
    if mcfg.frame_size % 16:
        raise ConfigError(f"frame_size must be a multiple of 16 for the generator, got {mcfg.frame_size}")
    profile = mcfg.scale_profile()
    rng = np.random.default_rng(mcfg.seed)
    generator = build_unet_generator(profile, rng, mcfg.activation())
    critic = build_critic(profile, rng, mcfg.activation())
    train, valid = _load_clipsets(cfg, mcfg.frame_size)
    out = cfg.output_dir()
    schedule = GanSchedule(cfg["generator_pretrain_epochs"], cfg["critic_pretrain_epochs"],
                           cfg["adversarial_epochs"], cfg["switch_ratio"], cfg["switch_mode"],
                           cfg["loss_threshold"])
    hyper = GanHyper(lr=cfg["lr"], critic_lr=cfg["critic_lr"], batch_size=cfg["batch_size"],
                     mse_weight=cfg["mse_weight"], seed=cfg["seed"])
    log = lambda rec: print(json.dumps(rec, sort_keys=True), flush=True)  # noqa: E731
    result = train_gan(generator, critic, train, valid, schedule, hyper, log)
    _write_jsonl(out / "metrics.jsonl", result.history)
    serialize.save_checkpoint(out / "generator", result.generator_state)
    serialize.save_checkpoint(out / "generator_pretrained", result.pretrained_state)
    serialize.save_checkpoint(out / "critic", result.critic_state)
    (out / "generator.txt").write_text(mcfg.to_text())
    row = {"critic_valid_accuracy": round(result.critic_accuracy, 4),
           "pretrain_mse": round(result.pretrain_mse, 6), "generator_mse": round(result.generator_mse, 6),
           "mean_depth_mse": round(result.baseline_mse, 6)}
    _write_csv(out / "results.csv", [row])
    print(" ".join(f"{k}={v}" for k, v in row.items()))
    return 0


def cmd_eval(cfg: RunConfig) -> int:
    ckpt = _existing_dir(cfg["checkpoint"], "checkpoint")
    if not (ckpt / "model.txt").is_file():
        raise ConfigError(f"{ckpt}/model.txt is missing; point checkpoint at a train output")
    if cfg["split"] not in ("train", "valid"):
        raise ConfigError(f"split must be train or valid, got {cfg['split']!r}")
    mcfg = cfg.model_config(ModelConfig.from_text((ckpt / "model.txt").read_text()))
    net = build_classifier(mcfg)
    _load_into(net, ckpt / "checkpoint", "classifier")
    generator = _load_generator(cfg["generator"])[0] if cfg["generator"] else None
    train, valid = _load_clipsets(cfg, mcfg.frame_size)
    clips = train if cfg["split"] == "train" else valid
    sources = ["none"]
    if "gdepth" in mcfg.streams:
        sources = ["real"] + (["generated"] if generator is not None else [])
    out = cfg.output_dir()
    rows = []
    for source in sources:
        acc = evaluate(net, clips, generator, depth_source="real" if source == "real" else "generated")
        rows.append({"model": _model_label(mcfg), "split": cfg["split"], "depth_source": source,
                     "accuracy": round(acc, 4)})
    if len(rows) == 2:
        rows[1]["delta_vs_real"] = round(rows[1]["accuracy"] - rows[0]["accuracy"], 4)
        rows[0]["delta_vs_real"] = 0.0
    _write_csv(out / "results.csv", rows)
    for r in rows:
        print(" ".join(f"{k}={v}" for k, v in r.items()))
    return 0


def cmd_gradcheck(cfg: RunConfig) -> int:
    out = cfg.output_dir()
    reports = gradcheck.run_suite(cfg["seed"], cfg["only"] or None)
    if not reports:
        raise ConfigError(f"no gradient-check case matches {cfg['only']!r}")
    lines = [r.line() for r in reports]
    failed = [r.name for r in reports if not r.passed]
    lines.append(f"{len(reports) - len(failed)}/{len(reports)} passed")
    (out / "gradcheck.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    if failed:
        raise CommandError(f"gradient check failed for {', '.join(failed)}")
    return 0


def _read_frames(sample: Path) -> np.ndarray:
    paths = sorted(sample.glob("rgb_*.png"))
    if len(paths) < 2:
        raise ConfigError(f"{sample} needs at least two rgb_###.png frames")
    frames = [np.asarray(Image.open(p).convert("RGB"), dtype=np.float64).transpose(2, 0, 1) / 255.0
              for p in paths]
    if len({f.shape for f in frames}) != 1:
        raise ConfigError(f"frames in {sample} have different extents")
    return np.stack(frames)


def cmd_flow_viz(cfg: RunConfig) -> int:
    frames = _read_frames(_existing_dir(cfg["sample"], "sample"))
    params = FarnebackParams(pyramid_levels=cfg["flow_levels"], window_size=cfg["flow_window"],
                             iterations=cfg["flow_iterations"])
    out = cfg.output_dir()
    for k in range(len(frames) - 1):
        img = motion_image(frames[k], frames[k + 1], params)
        pixels = np.round(np.clip(img, 0, 1) * 255.0).astype(np.uint8).transpose(1, 2, 0)
        Image.fromarray(pixels, "RGB").save(out / f"motion_{k:03d}.png")
    print(f"wrote {len(frames) - 1} motion images to {out}")
    return 0


HANDLERS = {"gen-data": cmd_gen_data, "train": cmd_train, "train-gan": cmd_train_gan,
            "eval": cmd_eval, "gradcheck": cmd_gradcheck, "flow-viz": cmd_flow_viz}


def _key_help() -> str:
    lines = ["config keys (key: commands; default):"]
    for name, key in KEYS.items():
        default = "required" if key.default is REQUIRED else key.default
        lines.append(f"  {name}: {', '.join(key.commands)}; {default}. {key.help}")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rc3d", description="Synthetic gesture-video experiments.",
                                     epilog=_key_help(), formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="flat key = value config file")
    parser.add_argument("--set", dest="sets", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = RunConfig.resolve(args.command, args.config, args.sets)
        return HANDLERS[args.command](cfg)
    except ConfigError as exc:
        print(f"rc3d: error: config: {exc}", file=sys.stderr)
        return 2
    except CommandError as exc:
        print(f"rc3d: error: {args.command}: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, RuntimeError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"rc3d: error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
