"""FROC analysis: hit matching, curves, sensitivity at fixed FP/scan levels."""
from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

FP_LEVELS = (0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0)


@dataclass
class FrocResult:
    fp_per_scan: np.ndarray
    sensitivity: np.ndarray
    thresholds: np.ndarray
    level_sensitivity: dict
    mean_sensitivity: float
    n_nodules: int
    n_scans: int
    empty: bool = False
    levels: tuple = field(default=FP_LEVELS)

    def same_curve(self, other: "FrocResult") -> bool:
        """Equality of everything except the raw threshold values."""
        return (np.array_equal(self.fp_per_scan, other.fp_per_scan)
                and np.array_equal(self.sensitivity, other.sensitivity)
                and self.level_sensitivity == other.level_sensitivity
                and self.mean_sensitivity == other.mean_sensitivity
                and self.empty == other.empty)


def match_candidates(candidates, annotations) -> list:
    """Label each candidate with the index of the nodule it hits, or None.

    A hit needs Euclidean distance to the nodule centre strictly below the
    radius; candidates inside several nodules credit the nearest one. Only
    nodules from the candidate's own series are considered.
    """
    by_series = defaultdict(list)
    for j, a in enumerate(annotations):
        by_series[a.series_id].append(j)
    labels = []
    for c in candidates:
        best, best_d = None, math.inf
        for j in by_series.get(c.series_id, ()):
            a = annotations[j]
            d = math.dist(c.center, a.center)
            if d < a.diameter / 2 and d < best_d:
                best, best_d = j, d
        labels.append(best)
    return labels


def sensitivity_at(fp: np.ndarray, sens: np.ndarray, level: float) -> float:
    """Step interpolation: sensitivity at the last curve point with FP/scan <= level."""
    idx = np.flatnonzero(fp <= level + 1e-12)
    return float(sens[idx[-1]]) if idx.size else 0.0


def froc_curve(scores, labels, n_nodules: int, n_scans: int, levels=FP_LEVELS) -> FrocResult:
    """Sweep score thresholds from high to low.

    ``labels[i]`` is a nodule key for a hit or None for a false positive.
    The first curve point (threshold +inf) is (0, 0).
    """
    if n_nodules <= 0:
        raise ValueError("FROC needs at least one nodule")
    if n_scans <= 0:
        raise ValueError("FROC needs at least one scan")
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    fps, thresholds, sens = [0.0], [math.inf], [0.0]
    seen = set()
    n_fp = 0
    i = 0
    while i < len(order):
        t = scores[order[i]]
        while i < len(order) and scores[order[i]] == t:
            lab = labels[order[i]]
            if lab is None:
                n_fp += 1
            else:
                seen.add(lab)
            i += 1
        thresholds.append(float(t))
        fps.append(n_fp / n_scans)
        sens.append(len(seen) / n_nodules)
    fp_arr, sens_arr = np.asarray(fps), np.asarray(sens)
    per_level = {float(l): sensitivity_at(fp_arr, sens_arr, l) for l in levels}
    return FrocResult(fp_arr, sens_arr, np.asarray(thresholds), per_level,
                      float(np.mean(list(per_level.values()))), n_nodules, n_scans,
                      levels=tuple(levels))


def empty_result(n_scans: int, levels=FP_LEVELS) -> FrocResult:
    return FrocResult(np.zeros(1), np.zeros(1), np.asarray([math.inf]),
                      {float(l): 0.0 for l in levels}, 0.0, 0, n_scans, empty=True,
                      levels=tuple(levels))


def _scan_ids(candidates, annotations, scans):
    """Scan list; an integer ``scans`` is a total count that may include
    scans with neither nodules nor candidates."""
    seen = sorted({a.series_id for a in annotations} | {c.series_id for c in candidates})
    if scans is None:
        return seen
    if isinstance(scans, int):
        if scans < len(seen):
            raise ValueError(f"scan count {scans} is below the {len(seen)} series present")
        return seen + [f"<unlisted-{i}>" for i in range(scans - len(seen))]
    return list(scans)


def evaluate(candidates, annotations, scans=None, levels=FP_LEVELS) -> FrocResult:
    """Match and compute the FROC over all scans (default: every series id seen)."""
    scan_ids = _scan_ids(candidates, annotations, scans)
    labels = match_candidates(candidates, annotations)
    return froc_curve([c.probability for c in candidates], labels, len(annotations),
                      len(scan_ids), levels)


def froc_by_size(candidates, annotations, bins, scans=None, levels=FP_LEVELS) -> list:
    """One FROC per diameter bin ``(lo, hi]``; false positives are shared by
    all bins, hits on nodules of other bins are ignored."""
    edges = list(bins)
    if edges[0] != 0 or not math.isinf(edges[-1]) or any(b <= a for a, b in zip(edges, edges[1:])):
        raise ValueError("bins must be increasing edges from 0 to inf")
    scan_ids = _scan_ids(candidates, annotations, scans)
    labels = match_candidates(candidates, annotations)
    scores = [c.probability for c in candidates]
    out = []
    for lo, hi in zip(edges, edges[1:]):
        members = {j for j, a in enumerate(annotations) if lo < a.diameter <= hi}
        if not members:
            out.append(empty_result(len(scan_ids), levels))
            continue
        keep_s, keep_l = [], []
        for s, lab in zip(scores, labels):
            if lab is None or lab in members:
                keep_s.append(s)
                keep_l.append(lab)
        out.append(froc_curve(keep_s, keep_l, len(members), len(scan_ids), levels))
    return out


def write_report(result: FrocResult, json_path=None, csv_path=None) -> dict:
    report = {
        "fp_levels": [float(l) for l in result.levels],
        "sensitivity": [result.level_sensitivity[float(l)] for l in result.levels],
        "mean_sensitivity": result.mean_sensitivity,
        "n_nodules": result.n_nodules,
        "n_scans": result.n_scans,
        "empty": result.empty,
    }
    if json_path is not None:
        with open(json_path, "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["threshold", "fp_per_scan", "sensitivity"])
            for t, f, s in zip(result.thresholds, result.fp_per_scan, result.sensitivity):
                w.writerow([repr(float(t)), repr(float(f)), repr(float(s))])
    return report
