"""Adam, the two-group learning-rate schedule and the training loop."""

from __future__ import annotations

import logging
import time
import zlib
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import cem, iem, losses
from . import ndgrad as nd
from .cem import CrfParams, Variant
from .imageio.checkpoint import Checkpoint
from .imageio.dataset import Dataset
from .ndgrad import NumericError, Tensor

logger = logging.getLogger(__name__)

MODES = ("iem_only", "fixed_theta", "learned_theta")


class TrainingAborted(NumericError):
    """Non-finite loss during training."""


@dataclass
class TrainConfig:
    epochs: int = 100
    lr_iem: float = 1e-4
    lr_cem: float = 1e-5
    cem_decay: float = 0.1
    cem_decay_every: int = 100
    weight_decay: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    stages: int = 3
    mode: str = "learned_theta"
    variant: str = "sc"
    theta_a: float | None = None
    theta_b: float | None = None
    checkpoint_every: int = 50

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr_iem < 0 or self.lr_cem < 0:
            raise ValueError("learning rates must be non-negative")
        if self.stages < 1:
            raise ValueError("stages must be >= 1")
        if self.cem_decay_every < 1:
            raise ValueError("cem_decay_every must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {', '.join(MODES)}, got {self.mode!r}")
        variant = Variant.parse(self.variant)
        if self.mode == "iem_only" and variant is not Variant.NONE:
            raise ValueError(f"mode iem_only uses plain reflectance; variant {variant.value!r} contradicts it")
        if self.mode != "iem_only" and variant is Variant.NONE:
            raise ValueError(f"mode {self.mode} needs a comparametric variant (bgc, pc or sc)")

    def initial_crf(self) -> CrfParams:
        variant = Variant.parse(self.variant)
        return CrfParams(variant, a=self.theta_a, b=self.theta_b,
                         trainable=self.mode == "learned_theta")


def named_rng(seed: int, name: str) -> np.random.Generator:
    """Independent, reproducible stream derived from one seed and a label."""
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(name.encode())]))


@dataclass
class AdamState:
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    step: int = 0


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState,
              lr: float, weight_decay: float = 0.0, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, in place.

    Weight decay is the coupled form: ``weight_decay * p`` is added to the
    gradient before the moment updates.
    """
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} parameters but {len(grads)} gradients")
    if not state.m:
        state.m = [np.zeros(p.shape) for p in params]
        state.v = [np.zeros(p.shape) for p in params]
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.shape or state.m[i].shape != p.shape:
            raise nd.ShapeError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        g = g.astype(np.float64)
        if weight_decay:
            g = g + weight_decay * p.data
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g
        update = lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + eps)
        p.data[...] = (p.data - update).astype(p.dtype)


def lr_at(epoch: int, cfg: TrainConfig) -> tuple[float, float]:
    """Learning rates for zero-based ``epoch``: constant IEM, step-decayed CEM."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.lr_iem, cfg.lr_cem * cfg.cem_decay ** (epoch // cfg.cem_decay_every)


LOG_COLUMNS = ("epoch", "lr_iem", "lr_cem", "L_sm", "L_f", "L_e", "L_sp", "L_c", "total",
               "wall_seconds")


@dataclass
class EpochLog:
    epoch: int
    lr_iem: float
    lr_cem: float
    smooth: float
    fidelity: float
    exposure: float
    spatial: float
    color: float
    total: float
    wall_seconds: float

    def csv_row(self) -> str:
        vals = [str(self.epoch)] + [repr(float(v)) for v in (
            self.lr_iem, self.lr_cem, self.smooth, self.fidelity, self.exposure,
            self.spatial, self.color, self.total)] + [f"{self.wall_seconds:.3f}"]
        return ",".join(vals)


def log_header() -> str:
    return ",".join(LOG_COLUMNS)


def enhance(x: Tensor, t: Tensor, crf: CrfParams, mode: str) -> Tensor:
    if mode == "iem_only":
        return cem.apply_baseline(x, t)
    return cem.apply(x, t, crf)


def _training_images(dataset) -> list[tuple[str, Callable[[], Tensor]]]:
    if isinstance(dataset, Dataset):
        if dataset.split != "train" or dataset.has_references:
            raise ValueError("training is unsupervised; pass a train split without references")
        return [(e.name, e.load_low) for e in dataset.entries]
    items = []
    for i, item in enumerate(dataset):
        name, img = item if isinstance(item, tuple) else (f"image{i:04d}", item)
        img = img if isinstance(img, Tensor) else Tensor(img)
        items.append((name, lambda img=img: img))
    return items


def train(dataset, cfg: TrainConfig, loss_cfg: losses.LossConfig | None = None,
          on_epoch: Callable[[EpochLog], None] | None = None,
          on_checkpoint: Callable[[Checkpoint], None] | None = None,
          ) -> tuple[Checkpoint, list[EpochLog]]:
    """Train from scratch; returns the final checkpoint and per-epoch log."""
    loss_cfg = loss_cfg or losses.LossConfig()
    cfg.validate()
    loss_cfg.validate()
    images = _training_images(dataset)
    if not images:
        raise ValueError("training set is empty")

    enh, selfcal = iem.init_weights(named_rng(cfg.seed, "init"))
    crf = cfg.initial_crf()
    shuffle = named_rng(cfg.seed, "shuffle")
    iem_params = enh.tensors() + selfcal.tensors()
    cem_params = crf.tensors() if cfg.mode == "learned_theta" else []
    iem_state, cem_state = AdamState(), AdamState()

    def snapshot(epoch: int) -> Checkpoint:
        return Checkpoint(enh, selfcal, crf, mode=cfg.mode, stages=cfg.stages, epoch=epoch,
                          train_config=asdict(cfg), loss_config=asdict(loss_cfg))

    history: list[EpochLog] = []
    for epoch in range(cfg.epochs):
        started = time.perf_counter()
        lr_iem, lr_cem = lr_at(epoch, cfg)
        sums = np.zeros(6)
        for idx in shuffle.permutation(len(images)):
            name, load = images[idx]
            x = load()
            try:
                trace = iem.unroll(x, enh, selfcal, cfg.stages)
                y = enhance(x, trace.final_illumination, crf, cfg.mode)
                terms = losses.loss_terms(trace, x, y, loss_cfg)
                vals = terms.values()
                if not np.isfinite(vals["total"]):
                    raise NumericError("non-finite loss")
                grads = nd.backward(terms.total, iem_params + cem_params, accumulate=False)
            except NumericError as exc:
                raise TrainingAborted(f"epoch {epoch + 1}, image {name!r}: {exc}") from exc
            n_iem = len(iem_params)
            adam_step(iem_params, grads[:n_iem], iem_state, lr_iem, cfg.weight_decay,
                      cfg.beta1, cfg.beta2, cfg.adam_eps)
            if cem_params:
                adam_step(cem_params, grads[n_iem:], cem_state, lr_cem, 0.0,
                          cfg.beta1, cfg.beta2, cfg.adam_eps)
                crf.project()
            sums += [vals[k] for k in ("smooth", "fidelity", "exposure", "spatial", "color", "total")]
        means = sums / len(images)
        entry = EpochLog(epoch + 1, lr_iem, lr_cem, *means.tolist(),
                         wall_seconds=time.perf_counter() - started)
        history.append(entry)
        logger.info("epoch %d total %.6f", entry.epoch, entry.total)
        if on_epoch is not None:
            on_epoch(entry)
        if (on_checkpoint is not None and cfg.checkpoint_every
                and (epoch + 1) % cfg.checkpoint_every == 0 and epoch + 1 < cfg.epochs):
            on_checkpoint(snapshot(epoch + 1))
    return snapshot(cfg.epochs), history
