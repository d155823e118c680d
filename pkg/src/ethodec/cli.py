"""Command-line entry point: ``ethodec <subcommand> [flags]``.

Settings resolve as flags, then the ``--config`` JSON file, then defaults;
``ETHODEC_SEED`` supplies the seed when neither flag nor file does. The
resolved settings are written next to every command's outputs.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from .errors import EthodecError, ValidationError

log = logging.getLogger("ethodec")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2

DEFAULTS = {
    "synth": {
        "classes": 12, "dim": 256, "noise": 0.1, "head_clips": 240, "min_clips": 4, "exponent": 2.5,
        "frame_min": 48, "frame_max": 96, "task": "multilabel", "co_label_prob": 0.3, "actions_per_class": 3,
        "seed": 0,
    },
    "lm-train": {
        "corpus": [], "ethogram": None, "dim": 256, "depth": 2, "heads": 4, "max_len": 512, "mask_prob": 0.2,
        "lr": 2e-5, "weight_decay": 0.01, "batch_size": 128, "epochs": 100, "min_freq": 1, "seed": 0,
    },
    "embed-queries": {
        "ethogram": None, "source": "descriptions", "lm": None, "lm_dir": None, "lm_mode": None,
        "reduction": "mean",
    },
    "train": {
        "task": None, "queries": None, "manifest": None, "lm": None, "depth": 3, "heads": 4, "mlp_ratio": 4,
        "no_norm": False, "pooled_len": 16, "epochs": 100, "warmup_epochs": 10, "batch_size": 64,
        "start_lr": 1e-5, "peak_lr": 1e-4, "floor_lr": 0.0, "weight_decay": 0.01, "frames": 16,
        "run_threshold": 16, "sampling": "uniform", "seed": 0,
    },
    "eval": {"model": None, "manifest": None, "ethogram": None, "split": "test", "task": None},
    "report": {"predictions": None, "manifest": None, "ethogram": None, "task": None},
}

_REQUIRED = {
    "embed-queries": ("ethogram",),
    "train": ("queries", "manifest"),
    "eval": ("model", "manifest"),
    "report": ("predictions", "manifest"),
}


class _Parser(argparse.ArgumentParser):
    """Usage errors exit with status 1 rather than argparse's 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ethodec", description="Ethogram-initialised query decoding for behaviour recognition.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def cmd(name, help_):
        sp = sub.add_parser(name, help=help_, argument_default=argparse.SUPPRESS)
        sp.add_argument("--config", help="JSON file of settings (overridden by flags)")
        sp.add_argument("--out", required=True, help="output directory (embed-queries: output .edwt file)")
        return sp

    s = cmd("synth", "generate a synthetic long-tail dataset")
    s.add_argument("--classes", type=int)
    s.add_argument("--dim", type=int, help="feature dimension")
    s.add_argument("--noise", type=float)
    s.add_argument("--head-clips", type=int, help="clips of the most frequent class")
    s.add_argument("--min-clips", type=int)
    s.add_argument("--exponent", type=float, help="power-law exponent of class sizes")
    s.add_argument("--frame-min", type=int)
    s.add_argument("--frame-max", type=int)
    s.add_argument("--task", choices=("multiclass", "multilabel"))
    s.add_argument("--co-label-prob", type=float)
    s.add_argument("--actions-per-class", type=int)
    s.add_argument("--seed", type=int)

    s = cmd("lm-train", "initialise (pt) and masked-LM fine-tune (ft) the text encoder")
    s.add_argument("--corpus", action="append", help="text file, one passage per line (repeatable)")
    s.add_argument("--ethogram", help="ethogram TSV whose names and descriptions join the corpus")
    s.add_argument("--dim", type=int)
    s.add_argument("--depth", type=int)
    s.add_argument("--heads", type=int)
    s.add_argument("--max-len", type=int)
    s.add_argument("--mask-prob", type=float)
    s.add_argument("--lr", type=float)
    s.add_argument("--weight-decay", type=float)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--min-freq", type=int)
    s.add_argument("--seed", type=int)

    s = cmd("embed-queries", "embed ethogram entries into a query bank")
    s.add_argument("--ethogram")
    s.add_argument("--query-source", "--source", dest="source", choices=("names", "descriptions"))
    s.add_argument("--lm", help="text encoder .edwt")
    s.add_argument("--lm-dir", help="lm-train output directory (pick pt/ft with --lm-mode)")
    s.add_argument("--lm-mode", choices=("pt", "ft"))
    s.add_argument("--reduction", choices=("mean", "cls"))

    s = cmd("train", "train the query decoder")
    s.add_argument("--task", choices=("multiclass", "multilabel"))
    s.add_argument("--queries", help="query bank .edwt from embed-queries")
    s.add_argument("--manifest")
    s.add_argument("--lm", help="text encoder whose hash must stay unchanged")
    s.add_argument("--depth", type=int)
    s.add_argument("--heads", type=int)
    s.add_argument("--mlp-ratio", type=int)
    s.add_argument("--no-norm", action="store_true")
    s.add_argument("--pooled-len", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--warmup-epochs", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--start-lr", type=float)
    s.add_argument("--peak-lr", type=float)
    s.add_argument("--floor-lr", type=float)
    s.add_argument("--weight-decay", type=float)
    s.add_argument("--frames", type=int)
    s.add_argument("--run-threshold", type=int)
    s.add_argument("--sampling", choices=("uniform", "contiguous"))
    s.add_argument("--seed", type=int)

    s = cmd("eval", "score a trained model and write predictions and a report")
    s.add_argument("--model")
    s.add_argument("--manifest")
    s.add_argument("--ethogram", help="defaults to ethogram.tsv beside the manifest")
    s.add_argument("--split", choices=("train", "val", "test"))
    s.add_argument("--task", choices=("multiclass", "multilabel"))

    s = cmd("report", "rebuild a report from a predictions CSV")
    s.add_argument("--predictions")
    s.add_argument("--manifest")
    s.add_argument("--ethogram")
    s.add_argument("--task", choices=("multiclass", "multilabel"))
    return p


def resolve(command: str, given: dict, env=None) -> dict:
    """Merge defaults, the ``--config`` file and explicit flags."""
    env = os.environ if env is None else env
    given = dict(given)
    out_path = given.pop("out")
    config_path = given.pop("config", None)
    from_file = {}
    if config_path is not None:
        try:
            from_file = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot read config {config_path}: {exc}") from None
        if not isinstance(from_file, dict):
            raise ValidationError(f"config {config_path} must hold a JSON object")
    defaults = DEFAULTS[command]
    unknown = sorted(set(from_file) - set(defaults))
    if unknown:
        raise ValidationError(f"unknown config key(s) for {command}: {', '.join(unknown)}")
    resolved = dict(defaults)
    if "seed" in defaults and "seed" not in from_file and "seed" not in given and env.get("ETHODEC_SEED"):
        try:
            resolved["seed"] = int(env["ETHODEC_SEED"])
        except ValueError:
            raise ValidationError("ETHODEC_SEED must be an integer") from None
    resolved.update(from_file)
    resolved.update(given)
    for key in _REQUIRED.get(command, ()):
        if resolved.get(key) is None:
            raise ValidationError(f"{command}: --{key.replace('_', '-')} is required")
    resolved["out"] = out_path
    return resolved


def _write_config(cfg: dict, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ------------------------------------------------------------------ commands


def cmd_synth(cfg):
    from .dataio import SyntheticSpec, generate_synthetic

    spec = SyntheticSpec(
        classes=cfg["classes"], dim=cfg["dim"], head_clips=cfg["head_clips"], min_clips=cfg["min_clips"],
        frame_range=(cfg["frame_min"], cfg["frame_max"]), noise=cfg["noise"], exponent=cfg["exponent"],
        seed=cfg["seed"], task=cfg["task"], co_label_prob=cfg["co_label_prob"],
        actions_per_class=cfg["actions_per_class"],
    )
    out = Path(cfg["out"])
    ds = generate_synthetic(spec, out)
    _write_config(cfg, out / "config.json")
    log.info("wrote %d clips over %d classes to %s", len(ds.manifest.records), spec.classes, out)


def _read_corpus(cfg):
    from .dataio import parse_ethogram

    texts = []
    for path in cfg["corpus"] or []:
        try:
            lines = Path(path).read_text(encoding="utf-8").splitlines()
        except OSError as exc:
            raise ValidationError(f"cannot read corpus {path}: {exc}") from None
        texts.extend(line.strip() for line in lines if line.strip())
    if cfg["ethogram"]:
        for e in parse_ethogram(cfg["ethogram"]):
            texts.extend([e.name, e.description])
    if not texts:
        raise ValidationError("lm-train needs --corpus and/or --ethogram text")
    return texts


def cmd_lm_train(cfg):
    from .text import EncoderWeights, MlmConfig, build_vocab, mlm_finetune

    out = Path(cfg["out"])
    corpus = _read_corpus(cfg)
    mcfg = MlmConfig(
        mask_prob=cfg["mask_prob"], depth=cfg["depth"], heads=cfg["heads"], dim=cfg["dim"],
        max_len=cfg["max_len"], seed=cfg["seed"], lr=cfg["lr"], weight_decay=cfg["weight_decay"],
        batch_size=cfg["batch_size"], epochs=cfg["epochs"],
    )
    vocab = build_vocab(corpus, cfg["min_freq"])
    pt = EncoderWeights.init(vocab, mcfg, seed=cfg["seed"])
    out.mkdir(parents=True, exist_ok=True)
    pt.save(out / "pt.edwt")
    rows = []
    ft = mlm_finetune(corpus, mcfg, pt, log=lambda epoch, loss: rows.append((epoch + 1, loss)))
    ft.save(out / "ft.edwt")
    with open(out / "mlm_log.csv", "w", encoding="utf-8") as fh:
        fh.write("epoch,train_loss\n")
        fh.writelines(f"{e},{loss!r}\n" for e, loss in rows)
    _write_config(cfg, out / "config.json")
    log.info("pt %s, ft %s", pt.content_hash()[:12], ft.content_hash()[:12])


def cmd_embed_queries(cfg):
    from .dataio import parse_ethogram
    from .decoder import init_queries
    from .text import EncoderWeights

    if cfg["lm"] is not None:
        lm_path = Path(cfg["lm"])
    elif cfg["lm_dir"] is not None:
        lm_path = Path(cfg["lm_dir"]) / f"{cfg['lm_mode'] or 'ft'}.edwt"
    else:
        raise ValidationError("embed-queries needs --lm or --lm-dir")
    lm = EncoderWeights.load(lm_path)
    if cfg["lm_mode"] is not None and lm.mode != cfg["lm_mode"]:
        raise ValidationError(f"{lm_path} holds a {lm.mode!r} encoder but --lm-mode is {cfg['lm_mode']!r}")
    bank = init_queries(parse_ethogram(cfg["ethogram"]), cfg["source"], lm, cfg["reduction"])
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    bank.save(out)
    _write_config(cfg, out.with_name(out.stem + ".config.json"))


def _train_config(cfg, task):
    from .training import TrainConfig

    return TrainConfig(
        task=task, epochs=cfg["epochs"], warmup_epochs=cfg["warmup_epochs"], batch_size=cfg["batch_size"],
        start_lr=cfg["start_lr"], peak_lr=cfg["peak_lr"], floor_lr=cfg["floor_lr"],
        weight_decay=cfg["weight_decay"], frames=cfg["frames"], run_threshold=cfg["run_threshold"],
        sampling=cfg["sampling"], seed=cfg["seed"],
    )


def cmd_train(cfg):
    from .dataio import parse_manifest
    from .decoder import DecoderConfig, QueryBank, QueryDecoderModel
    from .text import EncoderWeights
    from .training import fit

    manifest = parse_manifest(cfg["manifest"])
    task = cfg["task"] or manifest.task
    bank = QueryBank.load(cfg["queries"])
    dcfg = DecoderConfig(depth=cfg["depth"], heads=cfg["heads"], mlp_ratio=cfg["mlp_ratio"],
                         use_norm=not cfg["no_norm"], pooled_len=cfg["pooled_len"])
    model = QueryDecoderModel.create(bank, dcfg, seed=cfg["seed"])
    lm = EncoderWeights.load(cfg["lm"]) if cfg["lm"] else None
    out = Path(cfg["out"])
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        fit(model, manifest, _train_config(cfg, task), out_dir=out, frozen_lm=lm,
            progress=lambda row: log.info("epoch %(epoch)d loss %(train_loss).5f", row))
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    cfg = dict(cfg, task=task)
    _write_config(cfg, out / "config.json")


def _ethogram_for(cfg):
    from .dataio import parse_ethogram

    path = cfg["ethogram"] or Path(cfg["manifest"]).parent / "ethogram.tsv"
    return parse_ethogram(path)


def _emit(task, scores, labels, manifest, ethogram, class_ids, out):
    from .dataio import train_frequencies
    from .metrics import build_report, emit_report

    names = {e.class_id: e.name for e in ethogram}
    index = {cid: i for i, cid in enumerate(class_ids)}
    if not set(index) <= set(names):
        raise ValidationError("model classes are missing from the ethogram")
    freqs_by_id = train_frequencies(manifest, max(max(class_ids), max(names)) + 1)
    freqs = np.array([freqs_by_id[c] for c in class_ids])
    truth = labels.argmax(axis=1) if task == "multiclass" else labels
    report = build_report(task, scores, truth, class_ids, [names[c] for c in class_ids], freqs)
    emit_report(report, out)
    return report


def cmd_eval(cfg):
    from .dataio import parse_manifest
    from .decoder import QueryDecoderModel
    from .metrics import write_predictions
    from .training import TrainConfig, predict

    manifest = parse_manifest(cfg["manifest"])
    task = cfg["task"] or manifest.task
    model = QueryDecoderModel.load(cfg["model"])
    train_cfg_path = Path(cfg["model"]).parent / "config.json"
    tc = {}
    if train_cfg_path.exists():
        saved = json.loads(train_cfg_path.read_text())
        tc = {k: saved[k] for k in ("frames", "run_threshold", "sampling") if k in saved}
    ids, scores, labels = predict(model, manifest, cfg["split"], TrainConfig(task=task, **tc))
    if not ids:
        raise ValidationError(f"split {cfg['split']!r} has no samples")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_predictions(out / "predictions.csv", ids, scores, labels)
    _emit(task, scores, labels, manifest, _ethogram_for(cfg), model.bank.class_ids, out)
    _write_config(dict(cfg, task=task), out / "config.json")


def cmd_report(cfg):
    from .dataio import parse_manifest
    from .metrics import read_predictions

    manifest = parse_manifest(cfg["manifest"])
    task = cfg["task"] or manifest.task
    _, scores, labels = read_predictions(cfg["predictions"])
    ethogram = _ethogram_for(cfg)
    class_ids = [e.class_id for e in ethogram]
    if len(class_ids) != scores.shape[1]:
        raise ValidationError(f"predictions have {scores.shape[1]} classes, ethogram has {len(class_ids)}")
    out = Path(cfg["out"])
    _emit(task, scores, labels, manifest, ethogram, class_ids, out)
    _write_config(dict(cfg, task=task), out / "config.json")


COMMANDS = {
    "synth": cmd_synth,
    "lm-train": cmd_lm_train,
    "embed-queries": cmd_embed_queries,
    "train": cmd_train,
    "eval": cmd_eval,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    given = vars(args)
    command = given.pop("command")
    verbose = given.pop("verbose")
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = resolve(command, given)
        COMMANDS[command](cfg)
    except (ValidationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (EthodecError, FloatingPointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
