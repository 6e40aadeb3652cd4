"""Finite-difference checks over every differentiable operator in the package."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .mbfp import MbfpBlock, MbfpConfig
from .nnops import ConvParams, attention_gate, batch_norm, conv_nd, max_pool, upsample_concat, \
    windowed_max_aggregate
from .tensorcore import grad_check, relu, sigmoid
from .train import seg_loss

TOLERANCE = 1e-6


@dataclass
class GradCase:
    name: str
    op: object
    shapes: list
    kink_check: bool = False
    sampler: object = None


@dataclass
class CaseReport:
    name: str
    max_rel_error: float
    resamples: int
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def _bind(module, names, tensors):
    """Point the named parameters of ``module`` at ``tensors`` (dotted names)."""
    for name, t in zip(names, tensors):
        *path, leaf = name.split(".")
        owner = module
        for part in path:
            owner = owner[int(part)] if part.isdigit() else getattr(owner, part)
        setattr(owner, leaf, t)


def _mbfp_case(attention: bool) -> GradCase:
    cfg = MbfpConfig(conv_channels=2, bottleneck=2, widths=(1, 2, 3), attention=attention, depth=7)
    block = MbfpBlock(cfg, np.random.default_rng(0), np.float64)
    names = [n for n, _ in block.named_parameters()]
    shapes = [(2, 1, 7, 4, 4)] + [p.shape for _, p in block.named_parameters()]

    def op(x, *params):
        _bind(block, names, params)
        return block(x)

    return GradCase(f"mbfp_block{'_attention' if attention else ''}", op, shapes, kink_check=True)


def _bce_dice_sampler(rng, shapes):
    logits = rng.standard_normal(shapes[0])
    return [logits]


def default_cases() -> list:
    """The registered operator list; every entry is checked in float64."""
    target = (np.random.default_rng(1234).random((2, 1, 4, 4)) > 0.5).astype(np.float64)
    mean0, var0 = np.zeros(3), np.ones(3)
    return [
        GradCase("conv3d", lambda x, w, b: conv_nd(x, ConvParams(w, b, 1, 1)),
                 [(2, 2, 3, 4, 4), (3, 2, 3, 3, 3), (3,)]),
        GradCase("conv3d_pointwise", lambda x, w: conv_nd(x, ConvParams(w, None, 1, 0)),
                 [(2, 3, 2, 3, 3), (2, 3, 1, 1, 1)]),
        GradCase("conv2d", lambda x, w, b: conv_nd(x, ConvParams(w, b, 1, 1)),
                 [(2, 3, 5, 5), (4, 3, 3, 3), (4,)]),
        GradCase("conv2d_strided", lambda x, w: conv_nd(x, ConvParams(w, None, 2, 1)),
                 [(2, 2, 6, 5), (3, 2, 3, 3)]),
        GradCase("batch_norm", lambda x, g, b: batch_norm(x, g, b, mean0.copy(), var0.copy(), True),
                 [(4, 3, 3, 3), (3,), (3,)]),
        GradCase("relu", lambda x: relu(x), [(3, 4, 5)], kink_check=True),
        GradCase("max_pool3d", lambda x: max_pool(x, (1, 2, 2), (1, 2, 2)), [(2, 2, 2, 4, 4)],
                 kink_check=True),
        GradCase("max_pool2d", lambda x: max_pool(x, 2, 2), [(2, 3, 4, 6)], kink_check=True),
        GradCase("windowed_max_aggregate", lambda m: windowed_max_aggregate(m, 4, (1, 2, 4)),
                 [(2, 3, 9, 3, 3)], kink_check=True),
        GradCase("attention_gate", lambda m, w, b: attention_gate(m, ConvParams(w, b, 1, 0)),
                 [(2, 3, 5, 3, 3), (1, 3, 1, 1, 1), (1,)]),
        GradCase("upsample_concat", lambda d, s: upsample_concat(d, s), [(2, 3, 2, 3), (2, 2, 4, 6)]),
        GradCase("seg_loss", lambda z: seg_loss(sigmoid(z), target), [(2, 1, 4, 4)],
                 sampler=_bce_dice_sampler),
        _mbfp_case(attention=False),
        _mbfp_case(attention=True),
    ]


def run_suite(seeds=range(10), cases=None, progress=None) -> list:
    """Run every case for every seed; one report per case holding the worst seed."""
    reports = []
    for case in cases or default_cases():
        t0 = time.perf_counter()
        worst, resamples = 0.0, 0
        for seed in seeds:
            res = grad_check(case.op, case.shapes, seed, sampler=case.sampler,
                             kink_check=case.kink_check)
            worst = max(worst, res.max_rel_error)
            resamples += res.resamples
        rep = CaseReport(case.name, worst, resamples, time.perf_counter() - t0)
        reports.append(rep)
        if progress is not None:
            progress(rep)
    return reports


def format_report(rep: CaseReport) -> str:
    status = "PASS" if rep.passed else "FAIL"
    return (f"{status} {rep.name:<24s} max_rel_error={rep.max_rel_error:.3e} "
            f"resamples={rep.resamples} time={rep.seconds:.1f}s")
