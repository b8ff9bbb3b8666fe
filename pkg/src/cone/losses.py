"""Unsupervised losses on the illumination map and on the enhanced image."""

from __future__ import annotations

from dataclasses import dataclass

from . import ndgrad as nd
from .iem import StageTrace
from .ndgrad import ShapeError, Tensor


@dataclass
class LossConfig:
    omega_f: float = 1.5
    omega_c: float = 0.5
    epsilon: float = 0.6
    exposure_pool: int = 16
    spatial_pool: int = 4
    smooth_lambda: float = 10.0
    weight_t: float = 1.0
    weight_y: float = 1.0

    def validate(self) -> None:
        for name in ("omega_f", "omega_c", "smooth_lambda", "weight_t", "weight_y"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0 < self.epsilon < 1:
            raise ValueError("epsilon must lie in (0, 1)")
        if self.exposure_pool < 1 or self.spatial_pool < 1:
            raise ValueError("pool sizes must be >= 1")


def _channel_mean(x: Tensor) -> Tensor:
    return nd.mean(x, axis=0, keepdims=True)


def smoothness_loss(t: Tensor, x: Tensor, cfg: LossConfig) -> Tensor:
    """Edge-weighted total variation of ``t``.

    Differences of ``t`` are down-weighted by ``exp(-lambda |grad mean_c(x)|)``
    so the illumination may jump where the image itself has edges.
    """
    gx_img, gy_img = nd.spatial_gradient(_channel_mean(x))
    wx = nd.exp(nd.mul(-cfg.smooth_lambda, nd.absolute(gx_img.detach())))
    wy = nd.exp(nd.mul(-cfg.smooth_lambda, nd.absolute(gy_img.detach())))
    gx, gy = nd.spatial_gradient(t)
    tv = nd.add(nd.mean(nd.mul(wx, nd.absolute(gx))), nd.mean(nd.mul(wy, nd.absolute(gy))))
    return nd.mul(0.5, tv)


def fidelity_loss(t: Tensor, v: Tensor) -> Tensor:
    return nd.mean(nd.square(nd.sub(t, _channel_mean(v))))


def loss_t_terms(trace: StageTrace, x: Tensor, cfg: LossConfig) -> tuple[Tensor, Tensor]:
    """Stage-averaged (smoothness, fidelity)."""
    if len(trace) == 0:
        raise ValueError("empty stage trace")
    sm = fid = None
    for v, t in zip(trace.inputs, trace.illumination):
        s, f = smoothness_loss(t, x, cfg), fidelity_loss(t, v)
        sm = s if sm is None else nd.add(sm, s)
        fid = f if fid is None else nd.add(fid, f)
    n = float(len(trace))
    return nd.div(sm, n), nd.div(fid, n)


def loss_t(trace: StageTrace, x: Tensor, cfg: LossConfig) -> Tensor:
    sm, fid = loss_t_terms(trace, x, cfg)
    return nd.add(sm, nd.mul(cfg.omega_f, fid))


def exposure_loss(y: Tensor, cfg: LossConfig) -> Tensor:
    pooled = nd.avg_pool(y, cfg.exposure_pool)
    return nd.mean(nd.square(nd.sub(pooled, cfg.epsilon)))


def spatial_loss(x: Tensor, y: Tensor, cfg: LossConfig) -> Tensor:
    if x.shape != y.shape:
        raise ShapeError(f"spatial loss needs equal shapes, got {x.shape} and {y.shape}")
    px, py = nd.avg_pool(x, cfg.spatial_pool), nd.avg_pool(y, cfg.spatial_pool)
    xh, xv = nd.spatial_gradient(px)
    yh, yv = nd.spatial_gradient(py)
    sq = nd.add(nd.sum(nd.square(nd.sub(yh, xh))), nd.sum(nd.square(nd.sub(yv, xv))))
    return nd.div(sq, float(2 * px.size))


def color_loss(y: Tensor) -> Tensor:
    means = nd.mean(y, axis=(1, 2))
    r, g, b = means[0], means[1], means[2]
    return nd.add(nd.add(nd.square(nd.sub(r, g)), nd.square(nd.sub(r, b))),
                  nd.square(nd.sub(g, b)))


def loss_y(x: Tensor, y: Tensor, cfg: LossConfig) -> Tensor:
    e = exposure_loss(y, cfg)
    sp = spatial_loss(x, y, cfg)
    return nd.add(nd.add(e, sp), nd.mul(cfg.omega_c, color_loss(y)))


@dataclass
class LossTerms:
    smooth: Tensor
    fidelity: Tensor
    exposure: Tensor
    spatial: Tensor
    color: Tensor
    total: Tensor

    def values(self) -> dict[str, float]:
        return {k: float(getattr(self, k).data)
                for k in ("smooth", "fidelity", "exposure", "spatial", "color", "total")}


def loss_terms(trace: StageTrace, x: Tensor, y: Tensor, cfg: LossConfig) -> LossTerms:
    """All components plus the weighted total, sharing one graph."""
    sm, fid = loss_t_terms(trace, x, cfg)
    e, sp, c = exposure_loss(y, cfg), spatial_loss(x, y, cfg), color_loss(y)
    lt = nd.add(sm, nd.mul(cfg.omega_f, fid))
    ly = nd.add(nd.add(e, sp), nd.mul(cfg.omega_c, c))
    total = nd.add(nd.mul(cfg.weight_t, lt), nd.mul(cfg.weight_y, ly))
    return LossTerms(sm, fid, e, sp, c, total)


def total_loss(trace: StageTrace, x: Tensor, y: Tensor, cfg: LossConfig) -> Tensor:
    return loss_terms(trace, x, y, cfg).total
