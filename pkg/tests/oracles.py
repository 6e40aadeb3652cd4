"""Brute-force reference implementations used as test oracles.

Written independently of the package code: explicit loops, no shared helpers.
Do not edit these to make a failing test pass.
"""
import itertools
from collections import deque

import numpy as np


def conv_loops(x, w, b=None, stride=1, padding=0):
    """Direct cross-correlation, channels-first, any spatial rank."""
    n, c = x.shape[:2]
    o, _, *k = w.shape
    nd = len(k)
    stride = (stride,) * nd if np.isscalar(stride) else tuple(stride)
    padding = (padding,) * nd if np.isscalar(padding) else tuple(padding)
    xp = np.pad(x, [(0, 0), (0, 0)] + [(p, p) for p in padding])
    out_sp = [(xp.shape[2 + i] - k[i]) // stride[i] + 1 for i in range(nd)]
    y = np.zeros((n, o, *out_sp))
    for bi in range(n):
        for oc in range(o):
            for pos in itertools.product(*[range(s) for s in out_sp]):
                acc = 0.0 if b is None else float(b[oc])
                for ic in range(c):
                    for off in itertools.product(*[range(ki) for ki in k]):
                        src = tuple(p * s + f for p, s, f in zip(pos, stride, off))
                        acc += xp[(bi, ic) + src] * w[(oc, ic) + off]
                y[(bi, oc) + pos] = acc
    return y


def max_pool_loops(x, window, stride):
    n, c = x.shape[:2]
    nd = x.ndim - 2
    window = (window,) * nd if np.isscalar(window) else tuple(window)
    stride = (stride,) * nd if np.isscalar(stride) else tuple(stride)
    out_sp = [(x.shape[2 + i] - window[i]) // stride[i] + 1 for i in range(nd)]
    y = np.empty((n, c, *out_sp))
    for bi in range(n):
        for ch in range(c):
            for pos in itertools.product(*[range(s) for s in out_sp]):
                best = -np.inf
                for off in itertools.product(*[range(k) for k in window]):
                    v = x[(bi, ch) + tuple(p * s + f for p, s, f in zip(pos, stride, off))]
                    best = max(best, v)
                y[(bi, ch) + pos] = best
    return y


def windowed_max_loops(m, center, widths):
    """Output channel ``g * C + c`` holds channel c reduced over window g."""
    n, c, d, h, w = m.shape
    out = np.empty((n, c * len(widths), h, w))
    for g, wd in enumerate(widths):
        for bi in range(n):
            for ch in range(c):
                for i in range(h):
                    for j in range(w):
                        vals = [m[bi, ch, z, i, j] for z in range(center - wd, center + wd + 1)]
                        out[bi, g * c + ch, i, j] = max(vals)
    return out


def static_mip_loops(slab):
    """Central slice plus MIPs over 7, 13 and 19 slices (5, 10, 15 mm at 0.8 mm)."""
    d, h, w = slab.shape
    c = d // 2
    out = np.empty((4, h, w))
    out[0] = slab[c]
    for k, n in enumerate((7, 13, 19), start=1):
        for i in range(h):
            for j in range(w):
                out[k, i, j] = max(slab[z, i, j] for z in range(c - n // 2, c + n // 2 + 1))
    return out


def components_bfs(mask):
    """26-connected components by breadth-first flood fill.

    Returns a list of voxel-coordinate lists, ordered by first voxel in C order.
    """
    mask = np.asarray(mask, dtype=bool)
    seen = np.zeros_like(mask)
    comps = []
    offsets = [o for o in itertools.product((-1, 0, 1), repeat=3) if o != (0, 0, 0)]
    for start in zip(*np.nonzero(mask)):
        if seen[start]:
            continue
        seen[start] = True
        queue, comp = deque([start]), []
        while queue:
            v = queue.popleft()
            comp.append(v)
            for o in offsets:
                u = tuple(a + b for a, b in zip(v, o))
                if all(0 <= u[i] < mask.shape[i] for i in range(3)) and mask[u] and not seen[u]:
                    seen[u] = True
                    queue.append(u)
        comps.append(comp)
    return comps


def froc_bruteforce(scores, labels, n_nodules, n_scans, levels):
    """Re-scan every candidate at every distinct threshold.

    ``labels[i]`` is a nodule key or None. Returns (fp list, sens list,
    per-level dict, mean) with the (0, 0) point first.
    """
    thresholds = sorted(set(scores), reverse=True)
    fps, sens = [0.0], [0.0]
    for t in thresholds:
        kept = [i for i in range(len(scores)) if scores[i] >= t]
        fp = sum(1 for i in kept if labels[i] is None)
        hit = len({labels[i] for i in kept if labels[i] is not None})
        fps.append(fp / n_scans)
        sens.append(hit / n_nodules)
    per = {}
    for lv in levels:
        best = 0.0
        for f, s in zip(fps, sens):
            if f <= lv:
                best = s  # curve is ordered, keep the last qualifying point
        per[lv] = best
    return fps, sens, per, sum(per.values()) / len(levels)
