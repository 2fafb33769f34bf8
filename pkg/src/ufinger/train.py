"""Patch-based SGD training with loss targets aligned to the unpadded output."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from . import ops
from .checkpoint import save_checkpoint
from .errors import ConfigError, DataError, StateError
from .net import Model, NetworkConfig, forward, min_input_size, output_shape, trace_shapes
from .tensor import Tape, Tensor, backward

log = logging.getLogger(__name__)

# smallest supervised output extent used when no patch size is given
DEFAULT_TARGET_EXTENT = 32


def default_patch_size(cfg: NetworkConfig, target: int = DEFAULT_TARGET_EXTENT) -> int:
    """Smallest patch, on the pooling lattice, whose output is at least ``target`` wide.

    Gives 200 for the dilated unpadded network, 88 without dilation and 32
    with same padding.
    """
    unit = 2 ** (cfg.scales - 1)
    size = -(-min_input_size(cfg) // unit) * unit
    while output_shape(cfg, size)[0] < target:
        size += unit
    return size


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    momentum: float = 0.9
    batch_size: int = 8
    iterations: int = 1000
    seed: int = 0
    patch_size: Optional[int] = None
    checkpoint_every: int = 0
    log_every: int = 1

    def resolved_patch(self, net: NetworkConfig) -> int:
        return default_patch_size(net) if self.patch_size is None else int(self.patch_size)

    def validate(self, net: NetworkConfig) -> None:
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.log_every < 1 or self.checkpoint_every < 0:
            raise ConfigError("log_every must be >= 1 and checkpoint_every >= 0")
        patch = self.resolved_patch(net)
        minimum = min_input_size(net)
        if patch < minimum:
            raise ConfigError(f"patch size {patch} is below the minimum input size {minimum} for this network")
        for stage, (h, w), _ in trace_shapes(net, patch).stages:
            if stage[:3] in ("enc", "dec") and "." not in stage and h * w * self.batch_size < 2:
                raise ConfigError(
                    f"patch {patch} with batch {self.batch_size} leaves one value per channel at {stage}; "
                    "batch norm needs at least 2"
                )


class OptimizerState:
    """Momentum buffers, one per learnable parameter."""

    def __init__(self, model: Model):
        self.velocity = {name: np.zeros_like(t.data) for name, t in model.params.items()}


def sgd_step(model, grads: Mapping[str, np.ndarray], state: OptimizerState, lr: float, momentum: float) -> None:
    """In-place heavy-ball update: v = momentum * v + g; p = p - lr * v."""
    for name in model.params:
        g = grads.get(name)
        if g is None:
            raise StateError(f"missing gradient for {name}")
        if not np.all(np.isfinite(g)):
            raise StateError(f"non-finite gradient for {name}")
    for name, p in model.params.items():
        v = state.velocity[name]
        v *= momentum
        v += grads[name]
        p.data -= lr * v


def make_batch(
    dataset: Sequence[tuple],
    rng: np.random.Generator,
    patch_size: int,
    batch_size: int,
    config: NetworkConfig,
) -> tuple[np.ndarray, np.ndarray]:
    """Random co-centred (degraded patch, clean target) pairs.

    ``dataset`` holds ``(degraded, clean)`` arrays or ``(id, degraded, clean)``
    tuples. Targets are centre crops sized to the network output.
    """
    if not dataset:
        raise DataError("dataset is empty")
    pairs = [item[-2:] for item in dataset]
    for degraded, clean in pairs:
        if min(degraded.shape) < patch_size or degraded.shape != clean.shape:
            raise DataError(f"image of extents {degraded.shape} cannot supply {patch_size}px patches")
    oh, ow = output_shape(config, patch_size)
    top_off = (patch_size - oh) // 2
    left_off = (patch_size - ow) // 2
    inputs = np.empty((batch_size, 1, patch_size, patch_size), dtype=np.float32)
    targets = np.empty((batch_size, 1, oh, ow), dtype=np.float32)
    for b in range(batch_size):
        degraded, clean = pairs[int(rng.integers(len(pairs)))]
        h, w = degraded.shape
        top = int(rng.integers(0, h - patch_size + 1))
        left = int(rng.integers(0, w - patch_size + 1))
        inputs[b, 0] = degraded[top : top + patch_size, left : left + patch_size]
        t0, l0 = top + top_off, left + left_off
        targets[b, 0] = clean[t0 : t0 + oh, l0 : l0 + ow]
    return np.clip(inputs, 0, 1), np.clip(targets, 0, 1)


def train_step(model: Model, state: OptimizerState, inputs: np.ndarray, targets: np.ndarray, cfg: TrainConfig) -> float:
    with Tape() as tape:
        out = forward(model, Tensor(inputs), "train")
        loss = ops.mse_loss(out, Tensor(targets.astype(out.dtype, copy=False)))
    value = loss.item()
    if not math.isfinite(value):
        raise StateError(f"loss became non-finite ({value})")
    backward(loss, tape, model.parameters())
    sgd_step(model, {k: t.grad for k, t in model.params.items()}, state, cfg.learning_rate, cfg.momentum)
    return value


def train(
    model: Model,
    dataset: Sequence[tuple],
    cfg: TrainConfig,
    out_dir: Optional[Path] = None,
    fixed_batch: Optional[tuple[np.ndarray, np.ndarray]] = None,
) -> tuple[Model, list[tuple[int, float]]]:
    """Run ``cfg.iterations`` SGD steps; returns the model and (iteration, loss) log.

    The first and last iterations are always logged. With ``out_dir`` the
    loss log is written to ``loss.csv`` and the final weights to
    ``model.ufgr``, plus ``model_iter%06d.ufgr`` every ``checkpoint_every``
    iterations. ``fixed_batch`` replaces sampling with one batch reused at
    every step.
    """
    cfg.validate(model.config)
    patch = cfg.resolved_patch(model.config)
    rng = np.random.default_rng([cfg.seed, 1])
    state = OptimizerState(model)
    history: list[tuple[int, float]] = []
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "loss.csv", "w")
        log_fh.write("iteration,loss\n")
    else:
        log_fh = None
    try:
        for it in range(1, cfg.iterations + 1):
            if fixed_batch is not None:
                inputs, targets = fixed_batch
            else:
                inputs, targets = make_batch(dataset, rng, patch, cfg.batch_size, model.config)
            value = train_step(model, state, inputs, targets, cfg)
            if it == 1 or it % cfg.log_every == 0 or it == cfg.iterations:
                history.append((it, value))
                if log_fh is not None:
                    log_fh.write(f"{it},{value!r}\n")
                    log_fh.flush()
                log.info("iteration %d loss %.6f", it, value)
            if out_dir is not None and cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
                save_checkpoint(model, out_dir / f"model_iter{it:06d}.ufgr")
    finally:
        if log_fh is not None:
            log_fh.close()
    if out_dir is not None:
        save_checkpoint(model, out_dir / "model.ufgr")
    return model, history
