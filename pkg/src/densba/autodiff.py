"""Forward-mode dual numbers over numpy arrays, plus a gradient checker.

A Dual carries a value array of shape S and a tangent array of shape
S + (width,): one tangent slot per differentiation variable. Loss kernels are
written against the small dispatch helpers at the bottom of this module so
the identical code path runs either on plain ndarrays (cheap value-only
evaluation, used by finite-difference probes) or on Duals (analytic
gradients).

Kink conventions, fixed and relied on by the tests:
  abs'(0) = 0; minimum() takes the first argument on exact ties; clamp has
  zero derivative strictly outside [lo, hi] and passes the tangent through on
  the closed interval.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .validation import NumericalError


def _ex(v) -> np.ndarray:
    """Append a broadcasting axis so values can scale tangent stacks."""
    return np.asarray(v, dtype=np.float64)[..., None]


class Dual:
    __slots__ = ("val", "tan")

    # make ndarray <op> Dual defer to the reflected Dual methods
    __array_ufunc__ = None

    def __init__(self, val, tan):
        self.val = np.asarray(val, dtype=np.float64)
        self.tan = np.asarray(tan, dtype=np.float64)

    @staticmethod
    def seed(val, width: int, slot: int) -> "Dual":
        """Variable with tangent e_slot in a tangent space of given width."""
        val = np.asarray(val, dtype=np.float64)
        tan = np.zeros(val.shape + (width,))
        tan[..., slot] = 1.0
        return Dual(val, tan)

    @staticmethod
    def constant(val, width: int) -> "Dual":
        val = np.asarray(val, dtype=np.float64)
        return Dual(val, np.zeros(val.shape + (width,)))

    @property
    def width(self) -> int:
        return self.tan.shape[-1]

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Dual):
            return Dual(self.val + other.val, self.tan + other.tan)
        return Dual(self.val + other, self.tan)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Dual):
            return Dual(self.val - other.val, self.tan - other.tan)
        return Dual(self.val - other, self.tan)

    def __rsub__(self, other):
        return Dual(other - self.val, -self.tan)

    def __neg__(self):
        return Dual(-self.val, -self.tan)

    def __mul__(self, other):
        if isinstance(other, Dual):
            return Dual(
                self.val * other.val,
                self.tan * _ex(other.val) + other.tan * _ex(self.val),
            )
        return Dual(self.val * other, self.tan * _ex(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Dual):
            _check_nonzero(other.val)
            # true division keeps x/x == 1.0 exactly (the tangent may use the
            # rounded reciprocal: it is scaled by an exact 0 on that path)
            inv = 1.0 / other.val
            val = self.val / other.val
            return Dual(val, (self.tan - other.tan * _ex(val)) * _ex(inv))
        _check_nonzero(other)
        return Dual(self.val / other, self.tan / _ex(other))

    def __rtruediv__(self, other):
        _check_nonzero(self.val)
        val = other / self.val
        return Dual(val, self.tan * _ex(-val / self.val))

    def __abs__(self):
        return Dual(np.abs(self.val), self.tan * _ex(np.sign(self.val)))

    # -- elementary functions -------------------------------------------------

    def sin(self):
        return Dual(np.sin(self.val), self.tan * _ex(np.cos(self.val)))

    def cos(self):
        return Dual(np.cos(self.val), self.tan * _ex(-np.sin(self.val)))

    def exp(self):
        e = np.exp(self.val)
        return Dual(e, self.tan * _ex(e))

    def log(self):
        if np.any(self.val <= 0.0):
            raise NumericalError("log of non-positive dual value")
        return Dual(np.log(self.val), self.tan / _ex(self.val))

    def sqrt(self):
        if np.any(self.val <= 0.0):
            raise NumericalError("sqrt of non-positive dual value (derivative undefined)")
        s = np.sqrt(self.val)
        return Dual(s, self.tan / _ex(2.0 * s))

    def __repr__(self):
        return f"Dual(val={self.val!r}, width={self.width})"


def _check_nonzero(v):
    if np.any(np.asarray(v) == 0.0):
        raise NumericalError("division by zero in dual arithmetic")


# ── Dispatch helpers (ndarray or Dual) ───────────────────────────────────────


def minimum(a, b):
    """Elementwise min; exact ties take the first argument (and its tangent)."""
    if not isinstance(a, Dual) and not isinstance(b, Dual):
        return np.where(b < a, b, a)
    if not isinstance(a, Dual):
        a = Dual.constant(a, b.width)
    if not isinstance(b, Dual):
        b = Dual.constant(b, a.width)
    take_b = b.val < a.val
    return Dual(np.where(take_b, b.val, a.val), np.where(_ex(take_b), b.tan, a.tan))


def where(mask, a, b):
    """Select a where mask else b, carrying tangents through the selection."""
    if not isinstance(a, Dual) and not isinstance(b, Dual):
        return np.where(mask, a, b)
    if not isinstance(a, Dual):
        a = Dual.constant(np.broadcast_to(np.asarray(a, dtype=np.float64), b.val.shape), b.width)
    if not isinstance(b, Dual):
        b = Dual.constant(np.broadcast_to(np.asarray(b, dtype=np.float64), a.val.shape), a.width)
    return Dual(np.where(mask, a.val, b.val), np.where(_ex(mask), a.tan, b.tan))


def clamp(x, lo: float, hi: float):
    """Clip to [lo, hi]; tangent passes through on the closed interval."""
    if not isinstance(x, Dual):
        return np.clip(x, lo, hi)
    inside = (x.val >= lo) & (x.val <= hi)
    return Dual(np.clip(x.val, lo, hi), x.tan * _ex(inside))


def value_of(x) -> np.ndarray:
    return x.val if isinstance(x, Dual) else np.asarray(x, dtype=np.float64)


# ── Finite-difference verification ───────────────────────────────────────────


@dataclass(frozen=True)
class GradCheckReport:
    """Outcome of checking one gradient block against central differences.

    Relative error per coordinate is
    |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
    """

    name: str
    max_rel_error: float
    failing: np.ndarray
    tolerance: float
    n_coords: int
    rel_errors: np.ndarray = field(repr=False, default=None)

    @property
    def ok(self) -> bool:
        return self.failing.size == 0

    def __str__(self):
        status = "OK" if self.ok else f"FAIL ({self.failing.size} coords)"
        return (
            f"block {self.name!r}: {self.n_coords} coords, "
            f"max rel err {self.max_rel_error:.3e} [{status}]"
        )


def finite_diff_check(
    f,
    x0,
    analytic_grad,
    step: float = 1e-6,
    *,
    name: str = "x",
    tolerance: float = 1e-4,
) -> GradCheckReport:
    """Compare analytic_grad against central differences of scalar f at x0.

    step is relative: coordinate i is probed with h = step * max(1, |x0_i|).
    Non-finite f at a probe point marks the coordinate failing instead of
    raising.
    """
    if not step > 0:
        raise ValueError(f"step must be positive, got {step}")
    x0 = np.asarray(x0, dtype=np.float64).ravel().copy()
    analytic = np.asarray(analytic_grad, dtype=np.float64).ravel()
    if analytic.shape != x0.shape:
        raise ValueError(f"gradient shape {analytic.shape} != variable shape {x0.shape}")

    rel = np.empty(x0.size)
    for i in range(x0.size):
        h = step * max(1.0, abs(x0[i]))
        orig = x0[i]
        try:
            x0[i] = orig + h
            f_plus = float(f(x0))
            x0[i] = orig - h
            f_minus = float(f(x0))
        except (ArithmeticError, ValueError):
            f_plus = f_minus = np.nan
        finally:
            x0[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            rel[i] = np.inf
            continue
        numeric = (f_plus - f_minus) / (2.0 * h)
        rel[i] = abs(analytic[i] - numeric) / max(1e-8, abs(analytic[i]) + abs(numeric))

    failing = np.flatnonzero(~(rel <= tolerance))
    return GradCheckReport(
        name=name,
        max_rel_error=float(np.max(rel)) if rel.size else 0.0,
        failing=failing,
        tolerance=tolerance,
        n_coords=int(x0.size),
        rel_errors=rel,
    )
