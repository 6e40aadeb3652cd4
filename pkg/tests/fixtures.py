"""Candidate/annotation sets whose FROC reproduces published per-level sensitivities."""
from noduleproj.dataset import NoduleAnnotation
from noduleproj.detect import Candidate
from noduleproj.froc import FP_LEVELS

BASELINE_ROW = (0.848, 0.899, 0.925, 0.936, 0.949, 0.957, 0.960)
ATTENTION_ENC_ROW = (0.872, 0.931, 0.965, 0.978, 0.987, 0.991, 0.991)


def table_row_fixture(per_level, n_scans=8, n_nodules=1000):
    """Hits and false positives interleaved by descending score.

    Before the FP that crosses level l, exactly ``per_level[l] * n_nodules``
    nodules have been hit, so step interpolation returns the row.
    """
    series = [f"scan-{i}" for i in range(n_scans)]
    ann = [NoduleAnnotation(series[j % n_scans], 20.0 * j, 0.0, 0.0, 6.0) for j in range(n_nodules)]
    events = []
    hits = fps = 0
    for level, sens in zip(FP_LEVELS, per_level):
        want_hits = round(sens * n_nodules)
        events += ["hit"] * (want_hits - hits)
        hits = want_hits
        want_fps = round(level * n_scans) + 1  # the FP that crosses this level
        events += ["fp"] * (want_fps - fps)
        fps = want_fps
    cands = []
    nxt = 0
    for i, e in enumerate(events):
        score = 1.0 - (i + 1) / (len(events) + 2)
        if e == "hit":
            a = ann[nxt]
            nxt += 1
            cands.append(Candidate(a.series_id, a.x, a.y, a.z, score))
        else:
            cands.append(Candidate(series[i % n_scans], -1000.0, -1000.0, -1000.0, score))
    return cands, ann
