"""Command-line entry point: ``posediff {synth,train,sample,eval,plot}``.

Every command reads an optional YAML run config, applies flag overrides
(``--set section.key=value`` plus a few named shortcuts), writes the merged
config to its output directory as ``config.yaml`` and then does its work.
``POSEDIFF_SEED`` in the environment replaces the configured seed.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import io as pio
from .denoiser import (CheckpointError, DenoiserConfig, TrainConfig, TrainingError, load_checkpoint,
                       make_denoise_fn, regress_poses, save_checkpoint, train)
from .diffusion import SamplerError, make_schedule
from .evalkit import ANGLE_THRESHOLDS, ATE_THRESHOLDS, evaluate, reports_to_csv, reports_to_json
from .geometry import GeometryError, StackedMatches, total_sampson_and_grad
from .guidance import GuidanceConfig, guided_ddpm_sample
from .scenegen import SceneGenerationError, SceneSpec, generate_dataset

log = logging.getLogger("posediff")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
SEED_ENV = "POSEDIFF_SEED"


class ConfigError(ValueError):
    pass


# -------------------------------------------------------------------- config

@dataclass
class DataConfig:
    path: str = "data"
    n_scenes: int = 20
    train_ratio: float = 0.8
    scene: SceneSpec = field(default_factory=SceneSpec)


@dataclass
class ScheduleConfig:
    T: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.2


@dataclass
class MetricsConfig:
    angle_thresholds: tuple = ANGLE_THRESHOLDS
    ate_thresholds: tuple = ATE_THRESHOLDS


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    model: DenoiserConfig = field(default_factory=DenoiserConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)

    def to_dict(self) -> dict:
        d = _plain(dataclasses.asdict(self))
        d["train"].pop("seed", None)
        d["data"]["scene"].pop("seed", None)
        return d


# the master seed drives these; they are not separately configurable
_DERIVED = {("train", "seed"), ("data", "scene", "seed")}


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, values, path=()):
    if not isinstance(values, dict):
        raise ConfigError(f"section {'.'.join(path) or '<root>'} must be a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in values.items():
        if key not in fields or path + (key,) in _DERIVED:
            raise ConfigError(f"unknown config key {'.'.join(path + (key,))}")
        default = getattr(cls(), key) if key in fields else None
        if dataclasses.is_dataclass(default):
            kwargs[key] = _build(type(default), value, path + (key,))
        elif isinstance(default, tuple) and isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid section {'.'.join(path) or '<root>'}: {exc}") from exc


def _set_path(tree: dict, dotted: str, value):
    keys = dotted.split(".")
    node = tree
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {dotted}: {k} is not a section")
    node[keys[-1]] = value


def load_config(path=None, overrides=(), env=None) -> RunConfig:
    """Merge the YAML file, ``key=value`` overrides and the seed environment variable."""
    tree = {}
    if path is not None:
        try:
            tree = yaml.safe_load(Path(path).read_text()) or {}
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"config file {path} is not valid YAML: {exc}") from exc
        if not isinstance(tree, dict):
            raise ConfigError("config file must contain a mapping")
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        _set_path(tree, key.strip(), yaml.safe_load(raw))
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            tree["seed"] = int(env[SEED_ENV])
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer") from exc
    config = _build(RunConfig, tree)
    if not isinstance(config.seed, int) or config.seed < 0:
        raise ConfigError("seed must be a non-negative integer")
    return config


def write_config(config: RunConfig, out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    text = yaml.safe_dump(config.to_dict(), sort_keys=True, default_flow_style=False)
    (out_dir / "config.yaml").write_text(text)


def _schedule(config: RunConfig):
    s = config.schedule
    try:
        return make_schedule(s.T, s.beta_start, s.beta_end)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _scene_rng(seed: int, index: int):
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def _write_csv(path: Path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue())


# ------------------------------------------------------------------ commands

def cmd_synth(config: RunConfig, out_dir: Path):
    """Generate a dataset directory."""
    spec = dataclasses.replace(config.data.scene, seed=config.seed)
    dataset = generate_dataset(config.data.n_scenes, spec, seed=config.seed,
                               train_ratio=config.data.train_ratio)
    pio.save_dataset(out_dir, dataset, spec=spec, seed=config.seed)
    log.info("wrote %d train / %d test scenes to %s", len(dataset.train), len(dataset.test), out_dir)


def cmd_train(config: RunConfig, out_dir: Path, data_dir: Path):
    """Train the denoiser on the train split; write the checkpoint and loss curve."""
    dataset = pio.load_dataset(data_dir, splits=("train",))
    if not dataset.train:
        raise pio.DataError(f"{data_dir} has no training scenes")
    embed_dim = np.asarray(dataset.train[0].conditioning).shape[1]
    if embed_dim != config.model.embed_dim:
        raise pio.DataError(f"scene embeddings have dimension {embed_dim}, "
                            f"model.embed_dim is {config.model.embed_dim}")
    tc = dataclasses.replace(config.train, seed=config.seed)
    result = train(dataset.train, tc, _schedule(config), config.model)
    save_checkpoint(out_dir / "checkpoint", result.model, _schedule(config),
                    regression=tc.regression, seed=config.seed)
    _write_csv(out_dir / "loss.csv", ["step", "loss"],
               [(k, repr(float(v))) for k, v in enumerate(result.losses)])
    log.info("final loss %.6g after %d steps", result.losses[-1], len(result.losses))


def _sample_one(model, schedule, manifest, scene, guidance: GuidanceConfig, rng):
    if manifest.get("regression"):
        return regress_poses(model, schedule, scene.conditioning), []
    stacked = StackedMatches.from_sets(scene.matches, scene.n_frames)
    trace = []

    def on_step(t, x_t, mu):
        err = (total_sampson_and_grad(mu, stacked, guidance.epsilon, guidance.pixel_scale)[0]
               if stacked is not None else 0.0)
        trace.append((t, repr(float(err)), int(guidance.active and t <= guidance.guided_last_steps)))

    fn = make_denoise_fn(model, schedule)
    poses = guided_ddpm_sample(fn, schedule, scene.conditioning, scene.matches, guidance, rng,
                               on_step=on_step)
    return poses, trace


def cmd_sample(config: RunConfig, out_dir: Path, checkpoint: Path, scenes, named: bool = True):
    """Sample camera tuples for ``scenes`` (list of (index, SceneRecord)).

    Outputs are ``<scene>.cameras.json`` / ``<scene>.trace.csv``, or plain
    ``cameras.json`` / ``trace.csv`` when ``named`` is false.
    """
    try:
        model, schedule, manifest = load_checkpoint(checkpoint)
    except FileNotFoundError as exc:
        raise pio.DataError(f"checkpoint not found: {checkpoint}") from exc
    for index, scene in scenes:
        rng = _scene_rng(config.seed, index)
        poses, trace = _sample_one(model, schedule, manifest, scene, config.guidance, rng)
        stem = f"{scene.name}." if named else ""
        pio.save_cameras(out_dir / f"{stem}cameras.json", poses)
        _write_csv(out_dir / f"{stem}trace.csv", ["t", "sampson_error", "guided"], trace)
    log.info("sampled %d scene(s) into %s", len(scenes), out_dir)


def _load_gt(path: Path):
    """Ground truth as ``{name: PoseTuple}`` from a dataset dir, scene file or camera file."""
    if path.is_dir():
        ds = pio.load_dataset(path)
        return {s.name: s.ground_truth for s in ds.scenes}
    doc = pio._load(path)
    if "pairs" in doc or "conditioning" in doc:
        scene = pio.scene_from_json(doc)
        return {scene.name or path.stem: scene.ground_truth}
    return {path.stem: pio.cameras_from_json(doc)}


def cmd_eval(config: RunConfig, out_dir: Path, pred: Path, gt: Path):
    """Score predictions against ground truth; write ``report.json`` and ``report.csv``."""
    truth = _load_gt(gt)
    if pred.is_dir():
        files = sorted(pred.glob("*cameras.json"))
        preds = {f.name[:-len("cameras.json")].rstrip("."): pio.load_cameras(f) for f in files}
    else:
        preds = {"": pio.load_cameras(pred)}
    if "" in preds:
        if len(truth) != 1:
            raise pio.DataError("a single prediction file needs a single ground-truth scene")
        preds = {next(iter(truth)): preds.pop("")}
    missing = sorted(set(preds) - set(truth))
    if missing or not preds:
        raise pio.DataError(f"no ground truth for predictions {missing}" if missing
                            else f"no predictions found in {pred}")
    reports = []
    for name in sorted(preds):
        p, g = preds[name], truth[name]
        if len(p) != len(g):
            raise pio.DataError(f"{name}: {len(p)} predicted cameras vs {len(g)} ground truth")
        reports.append(evaluate(p, g, config.metrics.angle_thresholds,
                                config.metrics.ate_thresholds, scene=name))
    (out_dir / "report.json").write_text(reports_to_json(reports))
    (out_dir / "report.csv").write_text(reports_to_csv(reports))
    log.info("evaluated %d scene(s)", len(reports))


def _read_report(path: Path):
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except FileNotFoundError as exc:
        raise pio.DataError(f"report not found: {path}") from exc
    need = {"scene", "n_frames", "metric", "threshold", "accuracy"}
    if not rows or not need <= set(rows[0]):
        raise pio.DataError(f"{path} is not a metric report CSV")
    return rows


def cmd_plot(config: RunConfig, out_dir: Path, report_paths):
    """Accuracy-vs-threshold and mean-accuracy-vs-frame-count figures as SVG."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    metrics = ("are", "ate", "rre", "rte")
    # reports written by ``eval`` are all called report.csv; label those by their directory
    runs = [(Path(p).parent.name if Path(p).stem == "report" else Path(p).stem, _read_report(Path(p)))
            for p in report_paths]
    with matplotlib.rc_context({"svg.hashsalt": "posediff", "svg.fonttype": "path"}):
        fig, axes = plt.subplots(1, 4, figsize=(14, 3.2))
        for ax, m in zip(axes, metrics):
            for label, rows in runs:
                sel = [r for r in rows if r["metric"] == m]
                taus = sorted({float(r["threshold"]) for r in sel})
                acc = [np.mean([float(r["accuracy"]) for r in sel if float(r["threshold"]) == t])
                       for t in taus]
                ax.plot(taus, acc, marker="o", label=label)
            ax.set_title(m.upper())
            ax.set_xlabel("threshold" + (" (scene scale)" if m == "ate" else " (deg)"))
            ax.set_ylim(0, 1.02)
        axes[0].set_ylabel("accuracy")
        axes[-1].legend(fontsize=8)
        fig.tight_layout()
        fig.savefig(out_dir / "accuracy_vs_threshold.svg", metadata={"Date": None})
        plt.close(fig)

        fig, axes = plt.subplots(1, 4, figsize=(14, 3.2))
        for ax, m in zip(axes, metrics):
            for label, rows in runs:
                sel = [r for r in rows if r["metric"] == m]
                frames = sorted({int(r["n_frames"]) for r in sel})
                acc = [np.mean([float(r["accuracy"]) for r in sel if int(r["n_frames"]) == n])
                       for n in frames]
                ax.plot(frames, acc, marker="o", label=label)
            ax.set_title("m" + m.upper())
            ax.set_xlabel("number of frames")
            ax.set_ylim(0, 1.02)
        axes[0].set_ylabel("mean accuracy")
        axes[-1].legend(fontsize=8)
        fig.tight_layout()
        fig.savefig(out_dir / "accuracy_vs_frames.svg", metadata={"Date": None})
        plt.close(fig)


# ---------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="posediff", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML run config")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config entry, e.g. train.steps=500")
        p.add_argument("--seed", type=int, help="master seed")
        p.add_argument("--out", help="output directory (default: config output_dir)")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    p = common(sub.add_parser("synth", help="generate a synthetic dataset"))
    p.add_argument("--n-scenes", type=int)
    p.add_argument("--trajectory", choices=["orbit", "linear"])
    p.add_argument("--n-frames", type=int)

    p = common(sub.add_parser("train", help="train a denoiser"))
    p.add_argument("--data", help="dataset directory (default: config data.path)")
    p.add_argument("--steps", type=int)
    p.add_argument("--regression", action="store_true", help="train the one-shot regression baseline")

    p = common(sub.add_parser("sample", help="sample camera tuples"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", help="scene JSON file or scene name (default: every test scene)")
    p.add_argument("--data", help="dataset directory (default: config data.path)")
    p.add_argument("--no-ggs", action="store_true", help="disable geometry guidance")
    p.add_argument("--ggs-eps", type=float)
    p.add_argument("--ggs-alpha", type=float)
    p.add_argument("--ggs-iters", type=int)
    p.add_argument("--ggs-last-steps", type=int)

    p = common(sub.add_parser("eval", help="evaluate predictions"))
    p.add_argument("--pred", required=True, help="camera JSON or directory of *cameras.json")
    p.add_argument("--gt", required=True, help="dataset directory, scene JSON or camera JSON")

    p = common(sub.add_parser("plot", help="plot metric report CSVs"))
    p.add_argument("reports", nargs="+")
    return parser


def _overrides(args) -> list:
    items = list(args.set)
    shortcuts = {
        "n_scenes": "data.n_scenes", "trajectory": "data.scene.trajectory",
        "n_frames": "data.scene.n_frames", "steps": "train.steps",
        "ggs_eps": "guidance.epsilon", "ggs_alpha": "guidance.alpha",
        "ggs_iters": "guidance.ggs_iters", "ggs_last_steps": "guidance.guided_last_steps",
    }
    for attr, key in shortcuts.items():
        value = getattr(args, attr, None)
        if value is not None:
            items.append(f"{key}={value}")
    if getattr(args, "regression", False):
        items.append("train.regression=true")
    if getattr(args, "no_ggs", False):
        items.append("guidance.enabled=false")
    if args.seed is not None:
        items.append(f"seed={args.seed}")
    return items


def _run(args) -> None:
    config = load_config(args.config, _overrides(args))
    out_dir = Path(args.out or config.output_dir)
    write_config(config, out_dir)
    if args.command == "synth":
        cmd_synth(config, out_dir)
    elif args.command == "train":
        cmd_train(config, out_dir, Path(args.data or config.data.path))
    elif args.command == "sample":
        data_dir = Path(args.data or config.data.path)
        if args.scene:
            scene = pio.resolve_scene(args.scene, data_dir)
            scenes = [(0, scene)]
        else:
            scenes = list(enumerate(pio.load_dataset(data_dir, splits=("test",)).test))
            if not scenes:
                raise pio.DataError(f"{data_dir} has no test scenes")
        cmd_sample(config, out_dir, Path(args.checkpoint), scenes, named=not args.scene)
    elif args.command == "eval":
        cmd_eval(config, out_dir, Path(args.pred), Path(args.gt))
    elif args.command == "plot":
        cmd_plot(config, out_dir, args.reports)


def _fail(code: int, exc: BaseException) -> int:
    payload = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _run(args)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, exc)
    except (pio.DataError, CheckpointError, GeometryError, SceneGenerationError, IndexError,
            FileNotFoundError) as exc:
        return _fail(EXIT_DATA, exc)
    except (SamplerError, TrainingError, FloatingPointError) as exc:
        return _fail(EXIT_NUMERIC, exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
