"""Desk-scale experiments on synthetic phantoms: end-to-end run and ablation matrix."""
from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .dataset import PhantomConfig, SlabSampler, phantom_series, prepare_phantoms
from .detect import ALL_ORIENTATIONS, DEFAULT_THRESHOLD, detect, write_candidates
from .froc import FP_LEVELS, FrocResult, evaluate, write_report
from .segnet import NetworkSpec, variant_spec
from .train import TrainConfig, train

log = logging.getLogger(__name__)


@dataclass
class ExperimentConfig:
    """Phantom split plus training budget.

    The defaults are the small-config phantom run: 30 training and 10
    held-out phantoms, 300 Adam steps of 8 cropped slabs.
    """
    train_count: int = 30
    test_count: int = 10
    train_first_seed: int = 0
    test_first_seed: int = 1000
    variant: str = "AttentionMIP"
    small: bool = True
    crop: int = 32
    lr: float = 2e-3
    epochs: int = 5
    steps_per_epoch: int = 60
    batch_size: int = 8
    threshold: float = DEFAULT_THRESHOLD
    phantom: dict = field(default_factory=dict)

    def phantom_config(self) -> PhantomConfig:
        return PhantomConfig(**self.phantom)

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(lr=self.lr, epochs=self.epochs, steps_per_epoch=self.steps_per_epoch,
                           batch_size=self.batch_size, seed=seed)


@dataclass
class Split:
    train_volumes: list
    train_masks: list
    test_volumes: list
    test_annotations: list
    test_ids: list

    @property
    def all_test_annotations(self) -> list:
        return [a for ann in self.test_annotations for a in ann]


def make_split(cfg: ExperimentConfig, jobs: int = 1) -> Split:
    pc = cfg.phantom_config()
    train_ph = phantom_series(pc, cfg.train_count, cfg.train_first_seed, jobs)
    test_ph = phantom_series(pc, cfg.test_count, cfg.test_first_seed, jobs)
    tv, tm, _ = prepare_phantoms(train_ph)
    ev, _, ea = prepare_phantoms(test_ph)
    ids = [f"phantom-{cfg.test_first_seed + i:06d}" for i in range(cfg.test_count)]
    return Split(tv, tm, ev, ea, ids)


def train_model(spec: NetworkSpec, split: Split, cfg: ExperimentConfig, seed: int,
                orientations=ALL_ORIENTATIONS, out_dir=None):
    crop = (cfg.crop, cfg.crop) if cfg.crop else None
    sampler = SlabSampler(split.train_volumes, split.train_masks, orientations,
                          slab_width=spec.depth // 2, crop=crop)
    return train(spec, sampler, cfg.train_config(seed), out_dir).model


def evaluate_model(model, split: Split, orientations=ALL_ORIENTATIONS,
                   threshold: float = DEFAULT_THRESHOLD, jobs: int = 1):
    """Detect on every held-out phantom; returns (candidates, FrocResult)."""
    cands = []
    for sid, vol in zip(split.test_ids, split.test_volumes):
        cands.extend(detect(model, vol, orientations, threshold, sid, jobs))
    return cands, evaluate(cands, split.all_test_annotations, scans=split.test_ids)


def run_end_to_end(cfg: ExperimentConfig, seed: int = 0, out_dir=None, jobs: int = 1,
                   split: Split | None = None):
    """Train the configured variant and evaluate it tri-planar on the held-out phantoms."""
    split = split or make_split(cfg, jobs)
    spec = variant_spec(cfg.variant, small=cfg.small)
    model = train_model(spec, split, cfg, seed, out_dir=out_dir)
    cands, result = evaluate_model(model, split, threshold=cfg.threshold, jobs=jobs)
    if out_dir is not None:
        write_candidates(os.path.join(out_dir, "candidates.csv"), cands)
        write_report(result, os.path.join(out_dir, "froc.json"), os.path.join(out_dir, "froc.csv"))
    return model, cands, result


# ------------------------------------------------------------------ ablation

# (group, row name, variant, training/inference orientations)
ABLATION_ARMS = (
    ("Tri-planar", "AttentionMIP", "AttentionMIP", ALL_ORIENTATIONS),
    ("Only axial data", "AttentionMIP", "AttentionMIP", ("axial",)),
    ("Feature blocks", "MIP", "MIP", ALL_ORIENTATIONS),
    ("Feature blocks", "Naive", "Naive", ALL_ORIENTATIONS),
    ("U-net", "MaxMIP", "U-net MaxMIP", ALL_ORIENTATIONS),
)

# (description, better arm, worse arm); each gap is mean(better) - mean(worse)
ABLATION_GAPS = (
    ("tri-planar vs axial-only", 0, 1),
    ("MBFP vs naive 21-channel", 0, 3),
    ("MBFP vs static MIP 4-channel", 0, 2),
)


@dataclass
class AblationRow:
    group: str
    name: str
    seed: int
    result: FrocResult


def run_ablation(cfg: ExperimentConfig, seeds=(0, 1, 2), jobs: int = 1, out_dir=None,
                 split: Split | None = None, arms=ABLATION_ARMS) -> list:
    """Train and evaluate every arm for every seed on one shared phantom split."""
    split = split or make_split(cfg, jobs)
    rows = []
    for seed in seeds:
        for group, name, variant, orientations in arms:
            spec = variant_spec(variant, small=cfg.small)
            arm_dir = None
            if out_dir is not None:
                tag = f"{group}_{name}".lower().replace(" ", "-")
                arm_dir = os.path.join(out_dir, f"seed{seed}", tag)
            model = train_model(spec, split, cfg, seed, orientations, arm_dir)
            _, result = evaluate_model(model, split, orientations, cfg.threshold, jobs)
            log.info("ablation seed %d %s/%s mean %.3f", seed, group, name, result.mean_sensitivity)
            rows.append(AblationRow(group, name, seed, result))
    return rows


def summarize_ablation(rows: list, arms=ABLATION_ARMS, gaps=ABLATION_GAPS) -> dict:
    """Seed-averaged per-level table plus the directional gaps."""
    table = []
    for group, name, _, _ in arms:
        mine = [r.result for r in rows if r.group == group and r.name == name]
        per_level = [float(np.mean([r.level_sensitivity[float(l)] for r in mine])) for l in FP_LEVELS]
        table.append({"group": group, "experiment": name, "seeds": len(mine),
                      "sensitivity": per_level,
                      "mean_sensitivity": float(np.mean([r.mean_sensitivity for r in mine]))})
    gap_list = [{"comparison": desc,
                 "gap": table[a]["mean_sensitivity"] - table[b]["mean_sensitivity"]}
                for desc, a, b in gaps]
    return {"fp_levels": list(FP_LEVELS), "rows": table, "gaps": gap_list,
            "per_seed": [{"group": r.group, "experiment": r.name, "seed": r.seed,
                          "mean_sensitivity": r.result.mean_sensitivity} for r in rows]}


def write_ablation_report(summary: dict, json_path=None, csv_path=None) -> None:
    if json_path is not None:
        with open(json_path, "w") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
            fh.write("\n")
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["group", "experiment"] + [f"{l:g} FP" for l in FP_LEVELS] + ["mean"])
            for r in summary["rows"]:
                w.writerow([r["group"], r["experiment"]] + [f"{s:.3f}" for s in r["sensitivity"]]
                           + [f"{r['mean_sensitivity']:.3f}"])


def format_ablation_table(summary: dict) -> str:
    head = f"{'group':<16s} {'experiment':<14s}" + "".join(f"{l:>7g}" for l in FP_LEVELS) + "   mean"
    lines = [head]
    for r in summary["rows"]:
        lines.append(f"{r['group']:<16s} {r['experiment']:<14s}"
                     + "".join(f"{s:7.3f}" for s in r["sensitivity"])
                     + f"  {r['mean_sensitivity']:.3f}")
    for g in summary["gaps"]:
        lines.append(f"gap {g['comparison']}: {g['gap']:+.3f}")
    return "\n".join(lines)


def config_dict(cfg: ExperimentConfig) -> dict:
    return asdict(cfg)
