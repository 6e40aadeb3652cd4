"""Segmentation loss, Adam and the training loop."""
from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .segnet import NetworkSpec, SegNet, build_network
from .tensorcore import NonFiniteError, Tensor, backward, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

BCE_CLAMP = 1e-7
METRICS_HEADER = ["step", "epoch", "loss", "dice", "bce"]


@dataclass
class TrainConfig:
    lr: float = 0.0005
    epochs: int = 5
    batch_size: int = 8
    steps_per_epoch: int = 100
    seed: int = 0
    dice_weight: float = 1.0
    bce_weight: float = 1.0
    precision: str = "float32"
    log_every: int = 10

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be float32 or float64")


def loss_terms(pred: Tensor, target, smooth: float = 1.0):
    """(soft Dice term, mean BCE term) as scalar tensors."""
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ValueError(f"prediction {pred.shape} and target {target.shape} differ")
    if not pred.is_finite():
        raise NonFiniteError("prediction contains NaN or Inf")
    inter = (pred * target).sum()
    dice = 1.0 - (inter * 2.0 + smooth) / (pred.sum() + float(target.sum()) + smooth)
    p = pred.clip(BCE_CLAMP, 1.0 - BCE_CLAMP)
    bce = -(p.log() * target + (1.0 - p).log() * (1.0 - target)).mean()
    return dice, bce


def seg_loss(pred: Tensor, target, dice_weight: float = 1.0, bce_weight: float = 1.0) -> Tensor:
    dice, bce = loss_terms(pred, target)
    return dice * dice_weight + bce * bce_weight


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state: AdamState, lr: float) -> AdamState:
    """Bias-corrected Adam update, in place on ``params``."""
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            continue
        if m.shape != p.shape or g.shape != p.shape:
            raise ValueError("parameter, gradient and moment shapes must agree")
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - update).astype(p.dtype)
    return state


class FixedBatch:
    """Data source that always yields the same (slabs, masks) pair."""

    def __init__(self, x, y):
        self.x = np.asarray(x)
        self.y = np.asarray(y)

    def __call__(self, rng, size):
        return self.x, self.y


@dataclass
class TrainResult:
    model: SegNet
    history: list
    checkpoints: list


def save_model(model: SegNet, path) -> None:
    save_checkpoint(path, model.state_dict())


def load_model(checkpoint_path, spec: NetworkSpec | None = None, spec_path=None, dtype=None) -> SegNet:
    if spec is None:
        if spec_path is None:
            spec_path = os.path.join(os.path.dirname(os.fspath(checkpoint_path)), "network.json")
        with open(spec_path) as fh:
            spec = NetworkSpec.from_json(fh.read())
    sd = load_checkpoint(checkpoint_path)
    if dtype is None:
        dtype = next(iter(sd.values())).dtype
    model = build_network(spec, 0, dtype)
    model.load_state_dict(sd)
    return model


def _dump_diagnostics(out_dir, step, epoch, loss, model):
    if out_dir is None:
        return
    stats = {name: {"finite": bool(np.isfinite(p.data).all()),
                    "abs_max": float(np.nanmax(np.abs(p.data)))}
             for name, p in model.named_parameters()}
    with open(os.path.join(out_dir, "nan_dump.json"), "w") as fh:
        json.dump({"step": step, "epoch": epoch, "loss": repr(loss), "parameters": stats},
                  fh, indent=2, sort_keys=True)


def train(model_or_spec, data_source, cfg: TrainConfig = None, out_dir=None) -> TrainResult:
    """Train with Adam on batches from ``data_source(rng, batch_size)``.

    ``data_source`` returns raw slabs (N, 1, d, h, w) and central-slice masks
    (N, 1, h, w). One checkpoint is written per epoch when ``out_dir`` is set,
    together with ``metrics.csv``, ``network.json`` and ``train_config.json``.
    """
    cfg = cfg or TrainConfig()
    dtype = np.dtype(cfg.precision)
    if isinstance(model_or_spec, NetworkSpec):
        model = build_network(model_or_spec, cfg.seed, dtype)
    else:
        model = model_or_spec
    model.train()
    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    state = AdamState()
    history, checkpoints = [], []
    metrics_fh = writer = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "network.json"), "w") as fh:
            fh.write(model.spec.to_json())
        with open(os.path.join(out_dir, "train_config.json"), "w") as fh:
            json.dump(asdict(cfg), fh, indent=2, sort_keys=True)
        metrics_fh = open(os.path.join(out_dir, "metrics.csv"), "w", newline="")
        writer = csv.writer(metrics_fh, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
    step = 0
    try:
        for epoch in range(cfg.epochs):
            for _ in range(cfg.steps_per_epoch):
                x, y = data_source(rng, cfg.batch_size)
                xin = Tensor(model.prepare(x).astype(dtype))
                loss = None
                try:
                    pred = model(xin)
                    dice, bce = loss_terms(pred, np.asarray(y, dtype=dtype))
                    loss = dice * cfg.dice_weight + bce * cfg.bce_weight
                    if not loss.is_finite():
                        raise NonFiniteError(f"loss became non-finite at step {step}")
                    model.zero_grad()
                    backward(loss, params)
                except NonFiniteError:
                    _dump_diagnostics(out_dir, step, epoch,
                                      float("nan") if loss is None else loss.item(), model)
                    raise
                adam_step(params, [p.grad for p in params], state, cfg.lr)
                step += 1
                rec = {"step": step, "epoch": epoch + 1, "loss": loss.item(),
                       "dice": dice.item(), "bce": bce.item()}
                history.append(rec)
                if writer is not None and (step % cfg.log_every == 0
                                           or step == cfg.epochs * cfg.steps_per_epoch):
                    writer.writerow([rec[k] for k in METRICS_HEADER])
                if step % cfg.log_every == 0:
                    log.info("step %d epoch %d loss %.4f", step, epoch + 1, rec["loss"])
            if out_dir is not None:
                path = os.path.join(out_dir, f"epoch_{epoch + 1:03d}.ckpt")
                save_model(model, path)
                checkpoints.append(path)
        if out_dir is not None:
            path = os.path.join(out_dir, "model.ckpt")
            save_model(model, path)
            checkpoints.append(path)
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    model.eval()
    return TrainResult(model, history, checkpoints)
