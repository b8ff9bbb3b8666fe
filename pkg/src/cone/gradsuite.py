"""Randomised finite-difference checks of the CEM partials and the losses."""

from __future__ import annotations

import numpy as np

from . import cem, losses
from . import ndgrad as nd
from .cem import CrfParams, Variant
from .iem import StageTrace

# small pools so partial windows are exercised on 6x6 fixtures
CHECK_LOSS_CONFIG = losses.LossConfig(exposure_pool=4, spatial_pool=4)
CHECK_SIZE = 6
CEM_VARIANTS = (Variant.BGC, Variant.PC, Variant.SC)
LOSS_NAMES = ("smoothness", "fidelity", "exposure", "spatial", "color", "total")


# CEM closed forms are smooth, a wider step keeps cancellation error far below
# the 1e-8 denominator floor where BGC saturates. Losses contain |.| kinks and
# need the narrow step.
CEM_STEP = 1e-4
LOSS_STEP = 1e-6


def cem_trial(variant: Variant, rng: np.random.Generator, h: float = CEM_STEP) -> float:
    x = rng.uniform(0.05, 0.95, (3, 2, 2))
    w = rng.uniform(0.5, 1.5, (3, 2, 2))
    t = rng.uniform(0.1, 0.95, (1, 2, 2))
    a = rng.uniform(-1.0, 1.5)
    b = rng.uniform(0.2, 3.0)
    xt = nd.Tensor(x, dtype=np.float64)
    wt = nd.Tensor(w, dtype=np.float64)

    def fn(t_, a_, b_):
        y = cem.apply(xt, t_, CrfParams(variant, a=a_, b=b_))
        return nd.sum(nd.mul(wt, y))

    return nd.gradcheck(fn, (t, np.float64(a), np.float64(b)), h)


def loss_trial(name: str, rng: np.random.Generator, h: float = LOSS_STEP) -> float:
    cfg = CHECK_LOSS_CONFIG
    s = CHECK_SIZE
    x = nd.Tensor(rng.uniform(0.0, 1.0, (3, s, s)), dtype=np.float64)
    t0 = rng.uniform(0.1, 1.0, (1, s, s))
    y0 = rng.uniform(0.0, 1.5, (3, s, s))
    if name == "smoothness":
        return nd.gradcheck(lambda t: losses.smoothness_loss(t, x, cfg), t0, h)
    if name == "fidelity":
        v0 = rng.uniform(0.0, 1.0, (3, s, s))
        return nd.gradcheck(lambda t, v: losses.fidelity_loss(t, v), (t0, v0), h)
    if name == "exposure":
        return nd.gradcheck(lambda y: losses.exposure_loss(y, cfg), y0, h)
    if name == "spatial":
        return nd.gradcheck(lambda y: losses.spatial_loss(x, y, cfg), y0, h)
    if name == "color":
        return nd.gradcheck(losses.color_loss, y0, h)
    if name == "total":
        a, b = rng.uniform(0.5, 1.5), rng.uniform(0.5, 2.0)

        def fn(t, a_, b_):
            trace = StageTrace([x], [t], [nd.div(x, t)])
            y = cem.apply(x, t, CrfParams(Variant.SC, a=a_, b=b_))
            return losses.total_loss(trace, x, y, cfg)

        return nd.gradcheck(fn, (t0, np.float64(a), np.float64(b)), h)
    raise ValueError(f"unknown loss {name!r}")


def run(trials: int = 100, seed: int = 0, variants=CEM_VARIANTS,
        loss_names=LOSS_NAMES) -> dict[str, float]:
    """Worst relative error per CEM variant and per loss over ``trials`` draws."""
    rng = np.random.default_rng(seed)
    worst: dict[str, float] = {}
    for v in variants:
        v = Variant.parse(v)
        worst[f"cem.{v.value}"] = max(cem_trial(v, rng) for _ in range(trials))
    for name in loss_names:
        worst[f"loss.{name}"] = max(loss_trial(name, rng) for _ in range(trials))
    return worst
