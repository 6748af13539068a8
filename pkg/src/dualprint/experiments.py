"""Orchestration helpers shared by the command-line tool and tests.

Each run_* function takes explicit arguments and writes its outputs under a
directory, together with a copy of the resolved configuration, so results
stay reproducible from the artifacts alone.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .data import DatasetManifest, load_manifest
from .errors import ConfigError
from .matching import MatchParams
from .metrics import EvalReport, evaluate_matching, evaluate_pad
from .nets import (DualHeadConfig, build_model, count_params, get_backbone,
                   load_model, save_model)
from .training import (LossWeights, PseudoTeacher, SuppressionFlags,
                       TrainConfig, train_joint, write_history)

MODEL_FILENAME = "model.dpn"
HISTORY_FILENAME = "history.csv"
CONFIG_FILENAME = "run_config.json"


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to reproduce a training or evaluation run."""

    variant: str = "tiny"
    split_point: int = 0
    descriptor_dim: int = 64
    weights: LossWeights = field(default_factory=LossWeights)
    flags: SuppressionFlags = field(default_factory=SuppressionFlags)
    train: TrainConfig = field(default_factory=TrainConfig)
    match: MatchParams = field(default_factory=MatchParams)
    teacher_seed: int = 97
    far_targets: tuple = (1.0, 0.1)

    def model_spec(self):
        return get_backbone(self.variant)

    def model_config(self) -> DualHeadConfig:
        return DualHeadConfig(split_point=self.split_point,
                              descriptor_dim=self.descriptor_dim)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        raw = dict(raw)
        for key, sub in (("weights", LossWeights), ("flags", SuppressionFlags),
                         ("train", TrainConfig), ("match", MatchParams)):
            if key in raw and isinstance(raw[key], dict):
                raw[key] = sub(**raw[key])
        if "far_targets" in raw:
            raw["far_targets"] = tuple(raw["far_targets"])
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**raw)


def prepare_out_dir(out_dir, force: bool = False) -> Path:
    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()) and not force:
        raise ConfigError(
            f"output directory {out_dir} is not empty (pass --force to reuse)")
    out_dir.mkdir(parents=True, exist_ok=True)
    return out_dir


def write_run_config(out_dir, cfg: ExperimentConfig) -> None:
    (Path(out_dir) / CONFIG_FILENAME).write_text(cfg.to_json() + "\n",
                                                 encoding="utf-8")


def resolve_manifest(path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    return load_manifest(path)


def run_training(manifest: DatasetManifest, cfg: ExperimentConfig, out_dir,
                 force: bool = False):
    """Train a joint model and save model, history, and config under out_dir."""
    out_dir = prepare_out_dir(out_dir, force)
    write_run_config(out_dir, cfg)
    model = build_model(cfg.model_spec(), cfg.model_config(), seed=cfg.train.seed)
    teacher = PseudoTeacher(descriptor_dim=cfg.descriptor_dim,
                            seed=cfg.teacher_seed)
    model, history = train_joint(manifest, teacher, model, cfg.weights,
                                 cfg.flags, cfg.train,
                                 history_path=out_dir / HISTORY_FILENAME)
    save_model(model, out_dir / MODEL_FILENAME)
    return model, history


def run_pad_eval(model, manifest: DatasetManifest, cfg: ExperimentConfig,
                 out_dir, force: bool = False, split: str = "test"):
    out_dir = prepare_out_dir(out_dir, force)
    write_run_config(out_dir, cfg)
    report, scores = evaluate_pad(model, manifest, split=split,
                                  cap=cfg.train.minutiae_cap)
    report.write(out_dir / "pad_report.json")
    return report, scores


def run_match_eval(model, manifest: DatasetManifest, cfg: ExperimentConfig,
                   out_dir, force: bool = False, split: str = "test"):
    out_dir = prepare_out_dir(out_dir, force)
    write_run_config(out_dir, cfg)
    report, scores = evaluate_matching(model, manifest,
                                       far_targets=cfg.far_targets,
                                       split=split,
                                       cap=cfg.train.minutiae_cap,
                                       params=cfg.match)
    report.write(out_dir / "match_report.json")
    return report, scores


def load_run_model(run_dir, expect_descriptor_dim: int | None = None):
    return load_model(Path(run_dir) / MODEL_FILENAME,
                      expect_descriptor_dim=expect_descriptor_dim)


SUPPRESSION_GRID = (
    SuppressionFlags(1.0, 1.0),
    SuppressionFlags(-1.0, 1.0),
    SuppressionFlags(1.0, -1.0),
)


def _flag_label(flags: SuppressionFlags) -> str:
    def sign(v):
        return "pos" if v > 0 else "neg"
    return f"ssd_{sign(flags.s_sd)}_sm_{sign(flags.s_m)}"


def run_suppression_grid(manifest: DatasetManifest, cfg: ExperimentConfig,
                         out_dir, force: bool = False,
                         grid=SUPPRESSION_GRID) -> list[dict]:
    """Train once per flag setting and evaluate both tasks on the test split.

    Returns one row per setting with ACE and FRR at the configured primary
    FAR target, plus the flag values, and writes the table as JSON.
    """
    out_dir = prepare_out_dir(out_dir, force)
    write_run_config(out_dir, cfg)
    rows = []
    for flags in grid:
        sub_cfg = dataclasses.replace(cfg, flags=flags)
        run_dir = out_dir / _flag_label(flags)
        model, _ = run_training(manifest, sub_cfg, run_dir, force=force)
        pad_report, _ = evaluate_pad(model, manifest, split="test",
                                     cap=cfg.train.minutiae_cap)
        match_report, _ = evaluate_matching(
            model, manifest, far_targets=cfg.far_targets, split="test",
            cap=cfg.train.minutiae_cap, params=cfg.match)
        primary = repr(float(cfg.far_targets[0]))
        rows.append({
            "s_sd": flags.s_sd,
            "s_m": flags.s_m,
            "ace_pct": pad_report.acer,
            "frr_pct": match_report.frr_at_far[primary],
            "run_dir": str(run_dir),
        })
    (out_dir / "suppression.json").write_text(
        json.dumps(rows, indent=2) + "\n", encoding="utf-8")
    return rows


def run_split_sweep(manifest: DatasetManifest, cfg: ExperimentConfig, out_dir,
                    splits=None, force: bool = False) -> list[dict]:
    """Train and evaluate at several split points; tabulate cost vs accuracy."""
    out_dir = prepare_out_dir(out_dir, force)
    write_run_config(out_dir, cfg)
    spec = cfg.model_spec()
    if splits is None:
        splits = sorted(spec.valid_splits())
    rows = []
    for split_point in splits:
        sub_cfg = dataclasses.replace(cfg, split_point=split_point)
        run_dir = out_dir / f"split_{split_point}"
        model, _ = run_training(manifest, sub_cfg, run_dir, force=force)
        counts = count_params(model)
        pad_report, _ = evaluate_pad(model, manifest, split="test",
                                     cap=cfg.train.minutiae_cap)
        match_report, _ = evaluate_matching(
            model, manifest, far_targets=cfg.far_targets, split="test",
            cap=cfg.train.minutiae_cap, params=cfg.match)
        primary = repr(float(cfg.far_targets[0]))
        rows.append({
            "split_point": split_point,
            "params_total": counts["total"],
            "params_base": counts["base"],
            "ace_pct": pad_report.acer,
            "frr_pct": match_report.frr_at_far[primary],
            "run_dir": str(run_dir),
        })
    (out_dir / "split_sweep.json").write_text(
        json.dumps(rows, indent=2) + "\n", encoding="utf-8")
    return rows
