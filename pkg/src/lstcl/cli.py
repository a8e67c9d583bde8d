"""Command line entry point: gen, pretrain, probe, finetune, eval, sweep.

Exit codes: 0 success, 2 usage / configuration / missing input, 3 numeric or
invariant failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import itertools
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Any

import numpy as np
import torch
import yaml

from .backbone import BackboneConfig, VideoTransformer
from .checkpoint import load_checkpoint, save_checkpoint
from .contrastive import LossConfig
from .errors import (
    AttentionError,
    ConfigError,
    NumericError,
    ParameterMapError,
    ProtocolError,
    SamplingError,
    ShapeError,
)
from .evaluation import Classifier, FinetuneConfig, ProbeConfig, evaluate, finetune, linear_probe
from .trainer import TrainConfig, load_training_state, pretrain
from .videogen import (
    GeneratorConfig,
    ambiguity_check,
    generate_corpus,
    read_corpus,
    read_manifest,
    write_corpus,
    write_manifest,
)

log = logging.getLogger("lstcl")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

# knobs that change what the experiment measures must be written out explicitly
REQUIRED = {
    "pretrain": ("stride_short", "stride_long", "strategy"),
    "pretrain.loss": ("framework", "temperature", "momentum"),
}


class InvariantError(RuntimeError):
    """A post-condition checked by the CLI did not hold."""


# --------------------------------------------------------------------------
# configuration

@dataclasses.dataclass
class Experiment:
    raw: dict
    seed: int
    out: Path
    data_dir: Path
    threads: int
    generator: GeneratorConfig
    n_train: int
    n_test: int
    train: TrainConfig
    probe: ProbeConfig
    finetune: FinetuneConfig
    finetune_init: str
    check_ambiguity: bool
    sweep: dict

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.raw, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def classifier_hash(self) -> str:
        shape = {"backbone": self.train.to_dict()["backbone"], "k_classes": self.generator.k_classes}
        return hashlib.sha256(json.dumps(shape, sort_keys=True).encode()).hexdigest()[:16]


def _build(cls, section: dict | None, where: str, **extra):
    section = dict(section or {})
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(section) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown field(s) {', '.join(unknown)}")
    section.update(extra)
    try:
        return cls(**section)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise ConfigError(f"{where}: {exc}") from exc
        raise ConfigError(f"{where}: {exc}") from exc


def _require(raw: dict) -> None:
    for path, fields in REQUIRED.items():
        node: Any = raw
        for part in path.split("."):
            node = node.get(part) if isinstance(node, dict) else None
        for f in fields:
            if not isinstance(node, dict) or f not in node:
                raise ConfigError(f"missing required field {path}.{f}")


def load_experiment(path: str | Path, seed: int | None = None, out: str | None = None,
                    threads: int | None = None) -> Experiment:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file {path} does not exist")
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    if seed is not None:
        raw["seed"] = seed
    _require(raw)
    known = {"seed", "out", "threads", "data", "pretrain", "probe", "finetune", "eval", "sweep"}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown top-level field(s) {', '.join(unknown)}")

    seed = int(raw.get("seed", 0))
    threads = int(threads or raw.get("threads", 1))
    data = dict(raw.get("data") or {})
    data_dir = data.pop("dir", None) or os.environ.get("LSTCL_DATA_DIR") or "data"
    gen = _build(GeneratorConfig, data.pop("generator", None), "data.generator")
    n_train, n_test = int(data.pop("n_train", 500)), int(data.pop("n_test", 300))
    check = bool(data.pop("check_ambiguity", True))
    if data:
        raise ConfigError(f"data: unknown field(s) {', '.join(sorted(data))}")
    if n_train < 1 or n_test < 1:
        raise ConfigError("data.n_train and data.n_test must be >= 1")

    pre = dict(raw.get("pretrain") or {})
    pre["loss"] = _build(LossConfig, pre.get("loss"), "pretrain.loss")
    pre["backbone"] = _build(BackboneConfig, pre.get("backbone"), "pretrain.backbone",
                             channels=gen.channels, image_size=gen.height)
    train = _build(TrainConfig, pre, "pretrain", seed=seed, threads=threads)

    probe = _build(ProbeConfig, raw.get("probe"), "probe", seed=seed, frames=train.frames)
    ft = dict(raw.get("finetune") or {})
    init = ft.pop("init", "pretrained")
    if init not in ("pretrained", "scratch"):
        raise ConfigError("finetune.init must be 'pretrained' or 'scratch'")
    finetune_cfg = _build(FinetuneConfig, ft, "finetune", seed=seed, frames=train.frames)

    out_dir = Path(out or raw.get("out") or "runs")
    return Experiment(raw, seed, out_dir, Path(data_dir), threads, gen, n_train, n_test, train, probe,
                      finetune_cfg, init, check, dict(raw.get("sweep") or {}))


# --------------------------------------------------------------------------
# helpers

def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n")


def _load_split(exp: Experiment, split: str):
    path = exp.data_dir / f"{split}.lstclvid"
    if not path.exists():
        raise FileNotFoundError(f"corpus file {path} not found; run `lstcl gen` first")
    videos = read_corpus(path)
    cfg, _ = read_manifest(exp.data_dir / "manifest.json")
    if cfg != exp.generator:
        raise ConfigError(f"corpus in {exp.data_dir} was generated with a different generator config")
    return videos


def _pretrained_backbone(exp: Experiment, directory: Path | None = None) -> VideoTransformer:
    directory = directory or exp.out / "pretrain" / "checkpoint"
    if not (directory / "manifest.json").exists():
        raise FileNotFoundError(f"no pretraining checkpoint in {directory}")
    online, _, _, _ = load_training_state(directory, exp.train)
    return online.backbone


def _save_classifier(directory: Path, model: Classifier, exp: Experiment, kind: str, report: dict) -> str:
    meta = {"kind": kind, "config_hash": exp.config_hash, "model_hash": exp.classifier_hash(),
            "k_classes": exp.generator.k_classes, "report": report}
    return save_checkpoint(directory, model.state_dict(), meta)


# --------------------------------------------------------------------------
# commands

def cmd_gen(exp: Experiment) -> dict:
    exp.data_dir.mkdir(parents=True, exist_ok=True)
    train = generate_corpus(exp.generator, exp.n_train, seed=2 * exp.seed)
    test = generate_corpus(exp.generator, exp.n_test, seed=2 * exp.seed + 1)
    extra: dict[str, Any] = {"experiment_config_hash": exp.config_hash}
    if exp.check_ambiguity:
        res = ambiguity_check(exp.generator, videos=train, seed=exp.seed)
        extra["ambiguity"] = res
        if not (res["window_accuracy"] < 1.0 and res["video_accuracy"] == 1.0):
            raise InvariantError(f"corpus ambiguity property violated: {res}")
    write_corpus(exp.data_dir / "train.lstclvid", train, exp.generator)
    write_corpus(exp.data_dir / "test.lstclvid", test, exp.generator)
    write_manifest(exp.data_dir / "manifest.json", exp.generator, exp.seed,
                   {"train": exp.n_train, "test": exp.n_test}, extra)
    return extra


def cmd_pretrain(exp: Experiment) -> dict:
    train = _load_split(exp, "train")
    root = exp.out / "pretrain"
    cfg = dataclasses.replace(exp.train, checkpoint_dir=str(root / "checkpoint"),
                              metrics_path=str(root / "metrics.csv"))
    t0 = time.perf_counter()
    res = pretrain(train, cfg)
    summary = {"config_hash": exp.config_hash, "train_config_hash": cfg.config_hash(),
               "model_hash": cfg.model_hash(), "epochs": res.epoch, "steps": len(res.metrics),
               "final_loss": res.metrics[-1]["loss"] if res.metrics else None,
               "seconds": round(time.perf_counter() - t0, 2)}
    _write_json(root / "summary.json", summary)
    return summary


def cmd_probe(exp: Experiment) -> dict:
    train, test = _load_split(exp, "train"), _load_split(exp, "test")
    backbone = _pretrained_backbone(exp)
    head, rtr, rte = linear_probe(backbone, train, test, exp.generator.k_classes, exp.probe)
    model = Classifier(backbone, backbone.out_dim, exp.generator.k_classes)
    model.head.load_state_dict(head.state_dict())
    report = {"config_hash": exp.config_hash, "train": rtr.to_dict(), "test": rte.to_dict()}
    _save_classifier(exp.out / "probe" / "checkpoint", model, exp, "probe", report)
    _write_json(exp.out / "probe" / "report.json", report)
    return report


def cmd_finetune(exp: Experiment) -> dict:
    train, test = _load_split(exp, "train"), _load_split(exp, "test")
    if exp.finetune_init == "pretrained":
        backbone = _pretrained_backbone(exp)
    else:
        torch.manual_seed(exp.seed)
        backbone = VideoTransformer(exp.train.backbone)
    model, rep = finetune(backbone, train, test, exp.generator.k_classes, exp.finetune)
    report = {"config_hash": exp.config_hash, "init": exp.finetune_init, "test": rep.to_dict()}
    _save_classifier(exp.out / "finetune" / "checkpoint", model, exp, "finetune", report)
    _write_json(exp.out / "finetune" / "report.json", report)
    return report


def cmd_eval(exp: Experiment) -> dict:
    test = _load_split(exp, "test")
    section = exp.raw.get("eval") or {}
    if not isinstance(section, dict) or set(section) - {"checkpoint"}:
        raise ConfigError("eval: only the field 'checkpoint' is accepted")
    directory = Path(section.get("checkpoint") or exp.out / "finetune" / "checkpoint")
    if not (directory / "manifest.json").exists():
        raise FileNotFoundError(f"no classifier checkpoint in {directory}")
    tensors, meta = load_checkpoint(directory)
    if meta.get("model_hash") != exp.classifier_hash():
        raise ConfigError(f"checkpoint {directory} was built for a different model shape")
    model = Classifier(VideoTransformer(exp.train.backbone), exp.train.backbone.out_dim, exp.generator.k_classes)
    model.load_state_dict(tensors)
    model.eval()
    rep = evaluate(model, test, exp.generator.k_classes, exp.probe.n_clips, exp.probe.stride, exp.probe.frames)
    report = {"config_hash": exp.config_hash, "checkpoint": str(directory), "checkpoint_kind": meta.get("kind"),
              "test": rep.to_dict()}
    _write_json(exp.out / "eval" / "report.json", report)
    return report


SWEEP_AXES = ("stride_short", "stride_long", "strategy", "framework")


def sweep_cells(exp: Experiment) -> list[dict]:
    axes = {k: exp.sweep.get(k) for k in SWEEP_AXES}
    seeds = exp.sweep.get("seeds", [exp.seed])
    unknown = sorted(set(exp.sweep) - set(SWEEP_AXES) - {"seeds", "tie_long_to_short"})
    if unknown:
        raise ConfigError(f"sweep: unknown axis {', '.join(unknown)}")
    defaults = {"stride_short": [exp.train.stride_short], "stride_long": [exp.train.stride_long],
                "strategy": [exp.train.strategy.value], "framework": [exp.train.loss.framework.value]}
    for k, v in axes.items():
        if v is None:
            axes[k] = defaults[k]
        elif not isinstance(v, list) or not v:
            raise ConfigError(f"sweep axis {k} is empty")
    if not isinstance(seeds, list) or not seeds:
        raise ConfigError("sweep axis seeds is empty")
    ratio = exp.sweep.get("tie_long_to_short")
    cells = []
    for ts, tl, strat, fw in itertools.product(*(axes[k] for k in SWEEP_AXES)):
        if ratio is not None:
            tl = ts * tl  # stride_long entries read as multiples of stride_short
        cells.append({"stride_short": int(ts), "stride_long": int(tl), "strategy": str(strat), "framework": str(fw)})
    return [dict(c, seed=int(s)) for c in cells for s in seeds]


def cmd_sweep(exp: Experiment) -> dict:
    cells = sweep_cells(exp)  # validates axes before anything runs
    train, test = _load_split(exp, "train"), _load_split(exp, "test")
    root = exp.out / "sweep"
    root.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, cell in enumerate(cells):
        row = dict(cell, status="ok", probe_top1="", final_loss="", seconds="")
        t0 = time.perf_counter()
        try:
            loss = dataclasses.replace(exp.train.loss, framework=cell["framework"])
            cfg = dataclasses.replace(exp.train, stride_short=cell["stride_short"], stride_long=cell["stride_long"],
                                      strategy=cell["strategy"], loss=loss, seed=cell["seed"],
                                      metrics_path=str(root / f"cell{i:03d}_metrics.csv"), checkpoint_dir=None)
            res = pretrain(train, cfg)
            probe = dataclasses.replace(exp.probe, seed=cell["seed"])
            _, _, rep = linear_probe(res.backbone, train, test, exp.generator.k_classes, probe)
            row.update(probe_top1=rep.top1, final_loss=res.metrics[-1]["loss"] if res.metrics else "")
        except Exception as exc:  # a failed cell is recorded and the sweep moves on
            row["status"] = f"error: {type(exc).__name__}: {exc}"
        row["seconds"] = round(time.perf_counter() - t0, 2)
        rows.append(row)
        log.info("cell %d/%d %s", i + 1, len(cells), row)

    fields = [*SWEEP_AXES, "seed", "status", "probe_top1", "final_loss", "seconds"]
    with open(root / "results.csv", "w", newline="") as fh:
        fh.write(f"# config_hash={exp.config_hash}\n")
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)

    groups: dict[tuple, list[float]] = {}
    for r in rows:
        if r["status"] == "ok":
            groups.setdefault(tuple(r[k] for k in SWEEP_AXES), []).append(float(r["probe_top1"]))
    lines = [f"config_hash {exp.config_hash}", "stride_short stride_long strategy framework  mean  std  n"]
    for key, accs in groups.items():
        lines.append(f"{key[0]} {key[1]} {key[2]} {key[3]}  {np.mean(accs):.4f}  {np.std(accs):.4f}  {len(accs)}")
    best = max(groups, key=lambda k: np.mean(groups[k])) if groups else None
    lines.append(f"argmax {' '.join(map(str, best)) if best else 'none (all cells failed)'}")
    failed = sum(r["status"] != "ok" for r in rows)
    lines.append(f"failed cells {failed}/{len(rows)}")
    (root / "summary.txt").write_text("\n".join(lines) + "\n")
    return {"config_hash": exp.config_hash, "cells": len(rows), "failed": failed,
            "argmax": dict(zip(SWEEP_AXES, best)) if best else None}


COMMANDS = {"gen": cmd_gen, "pretrain": cmd_pretrain, "probe": cmd_probe, "finetune": cmd_finetune,
            "eval": cmd_eval, "sweep": cmd_sweep}

CONFIG_ERRORS = (ConfigError, FileNotFoundError, ShapeError, SamplingError, ProtocolError, ParameterMapError,
                 PermissionError, IsADirectoryError, NotADirectoryError)
NUMERIC_ERRORS = (NumericError, AttentionError, InvariantError, FloatingPointError)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lstcl", description="Long-short temporal contrastive learning at desk scale")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=fn.__doc__)
        p.add_argument("--config", required=True, help="YAML experiment file")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="output directory (default: config 'out' or ./runs)")
        p.add_argument("--threads", type=int, default=None, help="torch intra-op threads")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        exp = load_experiment(args.config, args.seed, args.out, args.threads)
        torch.set_num_threads(exp.threads)
        result = COMMANDS[args.command](exp)
    except CONFIG_ERRORS as exc:
        print(f"lstcl {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NUMERIC_ERRORS as exc:
        print(f"lstcl {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(json.dumps(result, sort_keys=True, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
