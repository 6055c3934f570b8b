"""Command-line interface: ``gazenlq <subcommand> [options]``.

Configuration is layered. Built-in defaults are overridden by an INI file
(``--config``), which is overridden by command-line flags. Every config key
``key`` in section ``[section]`` can be set from the command line as
``--section.key VALUE``. The single root seed (``--seed`` / ``[run] seed``)
feeds every random substream.

Exit status is 0 only when the requested artifact was completely written,
1 on runtime or I/O errors and 2 on usage or configuration errors.
"""

import argparse
import configparser
import contextlib
import dataclasses
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from .checkpoint import GAZE_VERSION, GROUND_VERSION, CheckpointError, file_sha256, load_checkpoint
from .data import DatasetFormatError, SyntheticSpec, generate_dataset, load_dataset, save_dataset, train_val_split
from .experiments import PRETRAIN_FIRST_INDEX
from .finetune import (
    finetune,
    gaze_state,
    load_grounding_checkpoint,
    predict,
    save_grounding_checkpoint,
)
from .gaze import GazeEstimatorConfig
from .grounding import GAZE_MODES, GroundingConfig
from .inference import evaluate
from .predictions import (
    PredictionFileError,
    ensemble_predictions,
    gts_from_samples,
    read_predictions,
    write_metrics,
    write_predictions,
)
from .pretrain import (
    load_gaze_checkpoint,
    pretrain_gaze,
    pretrain_pairs,
    save_gaze_checkpoint,
    write_loss_log,
)

log = logging.getLogger("gazenlq")

LOG_LEVELS = {"debug": logging.DEBUG, "info": logging.INFO, "warn": logging.WARNING}


class ConfigError(ValueError):
    pass


@dataclasses.dataclass
class RunSettings:
    seed: int = 0
    val_fraction: float = 0.25


@dataclasses.dataclass
class PretrainSettings:
    lr: float = 1e-3
    batch: int = 16
    epochs: int = 8
    warmup_epochs: int = 1
    weight_decay: float = 0.01


@dataclasses.dataclass
class PathSettings:
    dataset: str = "dataset.gnlq"
    gaze_checkpoint: str = "gaze.ckpt"
    checkpoint: str = "grounding.ckpt"
    predictions: str = "predictions.json"
    ensemble: str = "ensemble.json"
    metrics: str = "metrics.csv"
    loss_log: str = "gaze_loss.csv"
    plots: str = "plots"


SECTIONS = {
    "run": RunSettings,
    "data": SyntheticSpec,
    "gaze": GazeEstimatorConfig,
    "pretrain": PretrainSettings,
    "grounding": GroundingConfig,
    "paths": PathSettings,
}
# the root seed lives in [run]; the data seed always follows it
_HIDDEN = {("data", "seed")}


def _keys(section):
    return [f.name for f in dataclasses.fields(SECTIONS[section]) if (section, f.name) not in _HIDDEN]


def _parse_value(section, key, text):
    default = {f.name: f.default for f in dataclasses.fields(SECTIONS[section])}[key]
    kind = type(default)
    try:
        if kind is bool:
            low = str(text).strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        return kind(text)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {text!r} as {kind.__name__}") from None


@dataclasses.dataclass
class RunConfig:
    run: RunSettings
    data: SyntheticSpec
    gaze: GazeEstimatorConfig
    pretrain: PretrainSettings
    grounding: GroundingConfig
    paths: PathSettings

    @property
    def seed(self):
        return self.run.seed


def load_run_config(config_path=None, overrides=None):
    """Build a :class:`RunConfig` from defaults, an INI file and overrides.

    ``overrides`` maps ``"section.key"`` to a raw string (or typed) value.
    """
    values = {name: {} for name in SECTIONS}
    if config_path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with open(config_path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {config_path}: {exc}") from None
        except configparser.Error as exc:
            raise ConfigError(f"malformed config {config_path}: {exc}") from None
        for section in parser.sections():
            if section not in SECTIONS:
                raise ConfigError(f"unknown config section [{section}]")
            for key, text in parser.items(section):
                if key not in _keys(section):
                    raise ConfigError(f"unknown key {key!r} in [{section}]")
                values[section][key] = _parse_value(section, key, text)
    for dotted, raw in (overrides or {}).items():
        section, key = dotted.split(".", 1)
        values[section][key] = _parse_value(section, key, raw) if isinstance(raw, str) else raw
    values["data"]["seed"] = values["run"].get("seed", RunSettings.seed)
    try:
        built = {name: cls(**values[name]) for name, cls in SECTIONS.items()}
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return RunConfig(**built)


def write_run_config(cfg: RunConfig, path):
    """Write ``cfg`` as an INI file that :func:`load_run_config` reads back."""
    parser = configparser.ConfigParser(interpolation=None)
    for section in SECTIONS:
        obj = getattr(cfg, section)
        parser[section] = {k: str(getattr(obj, k)) for k in _keys(section)}
    with open(path, "w", encoding="utf-8") as fh:
        parser.write(fh)


# helpers ----------------------------------------------------------------------

@contextlib.contextmanager
def _atomic_path(path):
    """Yield a temporary sibling path that replaces ``path`` on success."""
    path = Path(path)
    if path.parent and not path.parent.exists():
        raise FileNotFoundError(f"output directory {path.parent} does not exist")
    tmp = path.with_name(f".{path.name}.partial")
    try:
        yield tmp
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def _require(path, what):
    if not Path(path).is_file():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def _load_split(path, split, val_fraction):
    ds = load_dataset(_require(path, "dataset"))
    if split == "all":
        return ds
    train, val = train_val_split(ds, val_fraction)
    return train if split == "train" else val


def _load_any_gaze(path):
    """The gaze estimator from a gaze checkpoint or a grounding checkpoint."""
    version, *_ = load_checkpoint(_require(path, "checkpoint"))
    if version == GAZE_VERSION:
        return load_gaze_checkpoint(path)[0]
    if version == GROUND_VERSION:
        model, _ = load_grounding_checkpoint(path)
        if model.gaze is None:
            raise CheckpointError(f"{path} was trained with gaze_mode=off and holds no gaze estimator")
        return model.gaze
    raise CheckpointError(f"{path}: unsupported checkpoint version {version!r}")


# subcommands --------------------------------------------------------------------

def cmd_gen_data(cfg: RunConfig, args):
    spec = cfg.data
    if args.corpus:
        spec = dataclasses.replace(spec, first_index=PRETRAIN_FIRST_INDEX)
    out = args.out or cfg.paths.dataset
    ds = generate_dataset(spec)
    with _atomic_path(out) as tmp:
        save_dataset(ds, tmp)
    print(f"wrote {len(ds)} videos x {spec.n_windows} windows to {out}")
    return 0


def cmd_pretrain_gaze(cfg: RunConfig, args):
    ds = load_dataset(_require(args.dataset or cfg.paths.dataset, "dataset"))
    out = args.out or cfg.paths.gaze_checkpoint
    loss_log = args.loss_log or cfg.paths.loss_log
    p = cfg.pretrain
    model, start, opt_state = None, 0, None
    if args.resume:
        model, meta, opt_state = load_gaze_checkpoint(_require(args.resume, "checkpoint"), True,
                                                      p.lr, p.weight_decay)
        start = int(meta.get("epochs_done", 0))
        log.info("resuming from %s at epoch %d", args.resume, start)
    res = pretrain_gaze(pretrain_pairs(ds), cfg.gaze if model is None else model.cfg, lr=p.lr,
                        batch=p.batch, epochs=p.epochs, warmup_epochs=p.warmup_epochs,
                        weight_decay=p.weight_decay, seed=cfg.seed, model=model,
                        start_epoch=start, optimizer_state=opt_state)
    write_loss_log(loss_log, res.log_rows, append=bool(args.resume) and Path(loss_log).exists())
    with _atomic_path(out) as tmp:
        save_gaze_checkpoint(tmp, res.model, res.epochs_done, res.optimizer)
    last = res.log_rows[-1] if res.log_rows else None
    print(f"pretrained epochs {start}..{res.epochs_done - 1}; "
          + (f"final loss {last[4]:.4f}; " if last else "")
          + f"checkpoint {out}; loss log {loss_log}")
    return 0


def cmd_train(cfg: RunConfig, args):
    gcfg = cfg.grounding
    samples = _load_split(args.dataset or cfg.paths.dataset, args.split, cfg.run.val_fraction).samples
    out = args.out or cfg.paths.checkpoint
    gaze, gaze_hash = None, None
    if gcfg.gaze_mode != "off":
        path = _require(args.gaze_checkpoint or cfg.paths.gaze_checkpoint, "gaze checkpoint")
        gaze, _ = load_gaze_checkpoint(path)
        gaze_hash = file_sha256(path)
    before = {k: v.detach().clone() for k, v in gaze.state_dict().items()} if gaze else {}
    res = finetune(samples, gcfg, gaze, seed=cfg.seed)
    if gaze is not None and gcfg.freeze_gaze:
        after = gaze_state(res.model)
        if not all(torch.equal(before[k], after[k]) for k in before):
            raise RuntimeError("gaze parameters changed although --freeze-gaze was set")
        log.info("verified: %d gaze tensors bitwise unchanged", len(before))
    with _atomic_path(out) as tmp:
        save_grounding_checkpoint(tmp, res.model, gaze_hash)
    print(f"trained on {len(samples)} queries (gaze_mode={gcfg.gaze_mode}, "
          f"freeze_gaze={gcfg.freeze_gaze}); final loss {res.losses[-1][4]:.4f}; checkpoint {out}")
    return 0


def cmd_predict(cfg: RunConfig, args):
    model, _ = load_grounding_checkpoint(_require(args.checkpoint or cfg.paths.checkpoint, "checkpoint"))
    samples = _load_split(args.dataset or cfg.paths.dataset, args.split, cfg.run.val_fraction).samples
    out = args.out or cfg.paths.predictions
    preds = predict(model, samples) if samples else {}
    with _atomic_path(out) as tmp:
        write_predictions(tmp, preds)
    print(f"wrote predictions for {len(preds)} queries to {out}")
    return 0


def cmd_eval(cfg: RunConfig, args):
    preds = read_predictions(_require(args.predictions or cfg.paths.predictions, "prediction file"))
    samples = _load_split(args.dataset or cfg.paths.dataset, args.split, cfg.run.val_fraction).samples
    result = evaluate(preds, gts_from_samples(samples))
    out = args.out or cfg.paths.metrics
    with _atomic_path(out) as tmp:
        write_metrics(tmp, result)
    for name, value in result.as_rows():
        print(f"{name}\t{value:.2f}")
    print(f"{result.n_queries} queries; metrics written to {out}")
    return 0


def cmd_ensemble(cfg: RunConfig, args):
    sets = [read_predictions(_require(p, "prediction file")) for p in args.files]
    merged = ensemble_predictions(sets, args.weights)
    out = args.out or cfg.paths.ensemble
    with _atomic_path(out) as tmp:
        write_predictions(tmp, merged)
    print(f"merged {len(sets)} files ({len(merged)} queries) into {out}")
    return 0


def cmd_plot_heatmaps(cfg: RunConfig, args):
    import matplotlib

    matplotlib.use("Agg")
    from matplotlib import pyplot as plt

    gaze = _load_any_gaze(args.gaze_checkpoint or cfg.paths.gaze_checkpoint)
    ds = _load_split(args.dataset or cfg.paths.dataset, args.split, cfg.run.val_fraction)
    out_dir = Path(args.out or cfg.paths.plots)
    out_dir.mkdir(parents=True, exist_ok=True)
    # the middle window of each planted segment, in dataset order
    picks = [(i, (first + last - 1) // 2) for i, (first, last) in enumerate(ds.segments)]
    picks = picks[: args.max_windows]
    written = 0
    for i, t in picks:
        s = ds.samples[i]
        feats = torch.from_numpy(np.asarray(s.gaze_features, dtype=np.float32))[None]
        with torch.no_grad():
            _, maps = gaze.predict(feats)
        stem = f"{s.video_id}_q{s.query_idx}_w{t:03d}"
        for tag, grid in (("gt", ds.heatmaps[i][t]), ("pred", maps[0, t].numpy())):
            fig, ax = plt.subplots(figsize=(2.5, 2.5), dpi=80)
            ax.imshow(grid, cmap="inferno", interpolation="nearest")
            ax.set_title(f"{tag} {s.video_id} w{t}", fontsize=7)
            ax.axis("off")
            with _atomic_path(out_dir / f"{stem}_{tag}.png") as tmp:
                fig.savefig(tmp, format="png", metadata={"Software": None})
            plt.close(fig)
            written += 1
    print(f"wrote {written} images ({written // 2} window pairs) to {out_dir}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain-gaze": cmd_pretrain_gaze,
    "train": cmd_train,
    "predict": cmd_predict,
    "eval": cmd_eval,
    "ensemble": cmd_ensemble,
    "plot-heatmaps": cmd_plot_heatmaps,
}


def _add_shared(parser, default):
    parser.add_argument("--config", default=default, help="INI config file")
    parser.add_argument("--seed", type=int, default=default,
                        help="root seed for every random substream")
    for section in SECTIONS:
        for key in _keys(section):
            parser.add_argument(f"--{section}.{key}", dest=f"{section}.{key}", metavar="V",
                                default=default, help=argparse.SUPPRESS)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="gazenlq", description=__doc__.split("\n\n")[0],
        epilog="Any config key can be overridden with --section.key VALUE, e.g. --grounding.lr 1e-4.")
    parser.add_argument("--out", help="output path of the subcommand's artifact")
    _add_shared(parser, None)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--out", dest="sub_out", help="output path (same as the global --out)")
        # shared flags may also follow the subcommand; absent ones leave the global value
        _add_shared(p, argparse.SUPPRESS)
        return p

    p = add("gen-data", "generate a synthetic dataset file")
    p.add_argument("--corpus", action="store_true",
                   help="draw videos from the index range reserved for gaze pretraining")

    p = add("pretrain-gaze", "pretrain the gaze estimator")
    p.add_argument("--dataset")
    p.add_argument("--resume", metavar="CKPT", help="continue from a gaze checkpoint")
    p.add_argument("--loss-log")

    for name, text in (("train", "finetune the grounding model"),
                       ("predict", "write a prediction file"),
                       ("eval", "score a prediction file"),
                       ("plot-heatmaps", "plot ground-truth vs predicted gaze heatmaps")):
        p = add(name, text)
        p.add_argument("--dataset")
        p.add_argument("--split", choices=("train", "val", "all"),
                       default={"train": "train", "plot-heatmaps": "all"}.get(name, "val"))
        if name == "train":
            p.add_argument("--gaze-checkpoint")
            p.add_argument("--gaze-mode", choices=GAZE_MODES)
            p.add_argument("--freeze-gaze", action=argparse.BooleanOptionalAction, default=None)
        elif name == "predict":
            p.add_argument("--checkpoint")
        elif name == "eval":
            p.add_argument("--predictions")
        else:
            p.add_argument("--gaze-checkpoint", help="gaze or grounding checkpoint")
            p.add_argument("--max-windows", type=int, default=8)

    p = add("ensemble", "merge prediction files")
    p.add_argument("files", nargs="+")
    p.add_argument("--weights", type=float, nargs="+")
    return parser


def _setup_logging():
    level = os.environ.get("GAZENLQ_LOG", "info").strip().lower()
    if level not in LOG_LEVELS:
        raise ConfigError(f"GAZENLQ_LOG must be one of {sorted(LOG_LEVELS)}, got {level!r}")
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("gazenlq")
    root.handlers[:] = [handler]
    root.setLevel(LOG_LEVELS[level])
    root.propagate = False


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    args.out = args.sub_out or args.out
    try:
        _setup_logging()
        overrides = {k: v for k, v in vars(args).items() if "." in k and v is not None}
        if args.seed is not None:
            overrides["run.seed"] = args.seed
        if getattr(args, "gaze_mode", None) is not None:
            overrides["grounding.gaze_mode"] = args.gaze_mode
        if getattr(args, "freeze_gaze", None) is not None:
            overrides["grounding.freeze_gaze"] = args.freeze_gaze
        cfg = load_run_config(args.config, overrides)
        if args.command == "ensemble" and args.weights and len(args.weights) != len(args.files):
            raise ConfigError("--weights needs one value per file")
    except ConfigError as exc:
        print(f"gazenlq: config error: {exc}", file=sys.stderr)
        return 2
    try:
        return COMMANDS[args.command](cfg, args)
    except (OSError, ValueError, RuntimeError, CheckpointError, DatasetFormatError,
            PredictionFileError) as exc:
        print(f"gazenlq {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
