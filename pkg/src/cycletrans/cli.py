"""``cycletrans <command> [--key value ...]``

Exit codes: 0 ok, 1 configuration error, 2 numeric failure, 3 I/O error.
"""
from __future__ import annotations

import logging
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import COMMANDS, DATA_ROOT_ENV, ConfigError, RunConfig, parse_overrides, resolve
from .cytr import FormatError
from .data import Manifest, SampleArrays, load_arrays, synth_generate
from .evaluation import embed, evaluate
from .gradcheck import check_objective, format_table, passed
from .trainer import TrainingAborted, load_model, train

log = logging.getLogger("cycletrans")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3

USAGE = f"""usage: cycletrans {{{'|'.join(COMMANDS)}}} [--config FILE] [--preset NAME] [--key value ...]

Config files hold one 'key = value' per line; '#' starts a comment.
Flags win over the file, the file wins over the preset.
{DATA_ROOT_ENV} overrides data_root from presets and files.
"""


class DataError(OSError):
    """Missing or malformed dataset files."""


def _load_split(cfg: RunConfig, split: str) -> SampleArrays:
    root = Path(cfg.data_root)
    try:
        manifest = Manifest.read(root / "manifest.csv").split(split)
        return load_arrays(manifest, root)
    except (ValueError, FormatError) as exc:
        raise DataError(f"{root}: {split} split: {exc}") from exc


def _echo(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    cfg.write(out / "effective_config.txt")
    return out


def cmd_synth(cfg: RunConfig) -> int:
    manifest = synth_generate(cfg.synth_spec(), cfg.data_root)
    _echo(cfg)
    print(f"wrote {len(manifest)} samples ({len(manifest.identities())} identities) to {cfg.data_root}")
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    arrays = _load_split(cfg, "train")
    # identities become contiguous class indices for the classifier
    classes, arrays.labels = np.unique(arrays.labels, return_inverse=True)
    out = _echo(cfg)
    result = train(cfg.model_config(len(classes)), cfg.train_config(), arrays, out_dir=out)
    for col in ("L_id", "L_MMD", "total"):
        means = result.epoch_means(col)
        print(f"{col:<6} epoch 1 {means[0]:.4f}  final {means[-1]:.4f}")
    print(f"checkpoint: {out / 'model.ckpt'}")
    return EXIT_OK


def _checkpoint(cfg: RunConfig) -> Path:
    return Path(cfg.checkpoint) if cfg.checkpoint else Path(cfg.out) / "model.ckpt"


def cmd_eval(cfg: RunConfig) -> int:
    net = load_model(_checkpoint(cfg))
    queries = embed(net, _load_split(cfg, "query"))
    gallery = embed(net, _load_split(cfg, "gallery"))
    out = _echo(cfg)
    report = evaluate(queries, gallery, cfg.protocol, cfg.draws, cfg.seed, cfg.metric)
    print(report.table())
    report.write_csv(out / "eval_report.csv")
    return EXIT_OK


def cmd_export(cfg: RunConfig) -> int:
    net = load_model(_checkpoint(cfg))
    out = _echo(cfg)
    for split in ("query", "gallery"):
        path = out / f"embeddings_{split}.csv"
        embed(net, _load_split(cfg, split)).write_csv(path)
        print(f"wrote {path}")
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig) -> int:
    _echo(cfg)
    table = check_objective(cfg.gradcheck_seed, cfg.step)
    print(format_table(table))
    return EXIT_OK if passed(table) else EXIT_NUMERIC


HANDLERS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval,
            "gradcheck": cmd_gradcheck, "export-embeddings": cmd_export}


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv or argv[0] in ("-h", "--help"):
        print(USAGE)
        return EXIT_OK if argv else EXIT_CONFIG
    command, rest = argv[0], argv[1:]
    try:
        if command not in COMMANDS:
            raise ConfigError(f"unknown command {command!r}")
        cfg = resolve(command, parse_overrides(rest))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return HANDLERS[command](cfg)
    except (TrainingAborted, T.NonFiniteError, T.GradCheckError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, FormatError, KeyError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


def main() -> None:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    sys.exit(run())


if __name__ == "__main__":
    main()
