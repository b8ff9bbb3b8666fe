"""Comparametric conversion from (low-light image, illumination) to output.

The illumination map ``t`` (1 x H x W) sets a per-pixel exposure ratio
``k = 1 / t`` that is shared by the three colour channels. The variants are
the closed forms of ``y = f(k f^-1(x))`` for three camera response models:

    BGC  y = exp(b (1 - k^a)) x^(k^a)
    PC   y = k^(ab) x / ((k^a - 1) x^(1/b) + 1)^b
    SC   y = (b + 1) k^a x / ((k^a - 1) x + b + 1)

``NONE`` is plain reflectance, ``y = x / t``. Every variant reduces to the
identity at ``k = 1``.

Evaluation happens in float64 and the result is cast back to the input
dtype. Gradients with respect to ``t``, ``a`` and ``b`` are closed-form.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import ndgrad as nd
from .ndgrad import NumericError, Tensor

T_MIN = 1e-4
B_FLOOR = 1e-3


class DomainError(ValueError):
    """Input or parameter outside the domain of a comparametric equation."""


class Variant(str, enum.Enum):
    BGC = "bgc"
    PC = "pc"
    SC = "sc"
    NONE = "none"

    @classmethod
    def parse(cls, value) -> Variant:
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            names = ", ".join(v.value for v in cls)
            raise ValueError(f"unknown CEM variant {value!r} (expected one of {names})") from None


# (a, b) starting points. BGC starts from a widely used fixed pair; PC/SC have no
# published constants, (1, 1) is an interior point of their domains.
DEFAULT_THETA = {
    Variant.BGC: (-0.3293, 1.1258),
    Variant.PC: (1.0, 1.0),
    Variant.SC: (1.0, 1.0),
    Variant.NONE: (0.0, 0.0),
}


def _scalar(value, trainable: bool) -> Tensor:
    return Tensor(np.float32(value), requires_grad=trainable)


@dataclass
class CrfParams:
    """The trainable pair (a, b) and the equation it parameterises."""

    variant: Variant
    a: Tensor = field(default=None)
    b: Tensor = field(default=None)
    trainable: bool = False

    def __post_init__(self):
        self.variant = Variant.parse(self.variant)
        da, db = DEFAULT_THETA[self.variant]
        self.a = self._leaf(da if self.a is None else self.a)
        self.b = self._leaf(db if self.b is None else self.b)
        self.check()

    def _leaf(self, value) -> Tensor:
        if isinstance(value, Tensor):
            return value
        return _scalar(value, self.trainable)

    @property
    def theta(self) -> tuple[float, float]:
        return float(self.a.data), float(self.b.data)

    def tensors(self) -> list[Tensor]:
        return [self.a, self.b] if self.variant is not Variant.NONE else []

    def check(self) -> None:
        if self.variant in (Variant.PC, Variant.SC) and not float(self.b.data) > 0:
            raise DomainError(
                f"{self.variant.name} requires b > 0, got b = {float(self.b.data)}")

    def project(self) -> None:
        """Keep b inside the PC/SC domain after an optimiser step."""
        if self.variant in (Variant.PC, Variant.SC):
            np.maximum(self.b.data, np.float32(B_FLOOR), out=self.b.data)

    def __repr__(self) -> str:
        a, b = self.theta
        return f"CrfParams({self.variant.name}, a={a:.6g}, b={b:.6g}, trainable={self.trainable})"


@dataclass
class ExposureRatioMap:
    k: Tensor


def _check_illumination(t: Tensor) -> None:
    if np.any(t.data <= 0):
        raise DomainError(
            f"illumination must be strictly positive (min {float(t.data.min())}); "
            "the illumination clamp upstream is broken")


def exposure_ratio(t: Tensor) -> ExposureRatioMap:
    """``k = 1 / t`` with gradient ``-1 / t**2``."""
    _check_illumination(t)
    return ExposureRatioMap(nd.div(1.0, t))


def apply_baseline(x: Tensor, t: Tensor) -> Tensor:
    """Reflectance ``x / t``, ``t`` broadcast over the colour channels."""
    _check_illumination(t)
    return nd.div(x, t)


# ---------------------------------------------------------------------------
# closed forms and partials, all in float64
#
# Each ``_eval_*`` returns (y, dy/du, dy/db) with u = k^a; the chain rule
# through u = (1/t)^a is shared.


def _safe_log(x: np.ndarray) -> np.ndarray:
    return np.log(np.where(x > 0, x, 1.0))


def _eval_bgc(x, u, b):
    y = np.exp(b * (1.0 - u)) * np.power(x, u)
    dy_du = np.where(x > 0, y * (_safe_log(x) - b), 0.0)
    dy_db = y * (1.0 - u)
    return y, dy_du, dy_db


def _eval_pc(x, u, b):
    xb = np.power(x, 1.0 / b)
    d = (u - 1.0) * xb + 1.0
    y = x * np.power(u / d, b)
    dy_du = y * b * (1.0 / u - xb / d)
    dy_db = y * (np.log(u / d) + (u - 1.0) * xb * _safe_log(x) / (b * d))
    return y, dy_du, dy_db


def _eval_sc(x, u, b):
    d = (u - 1.0) * x + b + 1.0
    y = (b + 1.0) * u * x / d
    dy_du = (b + 1.0) * x * (b + 1.0 - x) / (d * d)
    dy_db = u * x * (u - 1.0) * x / (d * d)
    return y, dy_du, dy_db


_EVAL = {Variant.BGC: _eval_bgc, Variant.PC: _eval_pc, Variant.SC: _eval_sc}


def _evaluate(x: Tensor, t: Tensor, params: CrfParams):
    _check_illumination(t)
    params.check()
    a, b = (float(v) for v in (params.a.data, params.b.data))
    xd = x.data.astype(np.float64)
    td = t.data.astype(np.float64)
    lnk = -np.log(td)
    u = np.exp(a * lnk)
    with np.errstate(all="ignore"):
        y, dy_du, dy_db = _EVAL[params.variant](xd, u, b)
        dy_da = dy_du * u * lnk
        dy_dt = dy_du * (-a * u / td)
    if not np.all(np.isfinite(y)):
        raise NumericError(
            f"{params.variant.name} produced non-finite output for a={a:.6g}, b={b:.6g}")
    return y, dy_dt, dy_da, dy_db


def partials(x: Tensor, t: Tensor, params: CrfParams) -> tuple[Tensor, Tensor, Tensor]:
    """Elementwise (dy/dt, dy/da, dy/db), each shaped like ``x``."""
    if params.variant is Variant.NONE:
        _check_illumination(t)
        xd, td = x.data.astype(np.float64), t.data.astype(np.float64)
        dy_dt = np.broadcast_to(-xd / (td * td), x.shape)
        zero = np.zeros(x.shape)
        return Tensor(dy_dt, dtype=x.dtype), Tensor(zero, dtype=x.dtype), Tensor(zero, dtype=x.dtype)
    _, dy_dt, dy_da, dy_db = _evaluate(x, t, params)
    return tuple(Tensor(np.broadcast_to(g, x.shape), dtype=x.dtype) for g in (dy_dt, dy_da, dy_db))


def apply(x: Tensor, t: Tensor, params: CrfParams) -> Tensor:
    """Enhanced image for the selected variant. The output is not clamped."""
    if params.variant is Variant.NONE:
        return apply_baseline(x, t)
    y, dy_dt, dy_da, dy_db = _evaluate(x, t, params)
    dtype = np.result_type(x.dtype, t.dtype)

    def grad_fn(g):
        g = g.astype(np.float64)
        gt = (g * dy_dt).sum(axis=0, keepdims=True) if t.shape[0] == 1 else g * dy_dt
        return None, gt, np.sum(g * dy_da), np.sum(g * dy_db)

    return nd.custom(f"cem_{params.variant.value}", y.astype(dtype),
                     (x, t, params.a, params.b), grad_fn)
