import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

ArrayLike = float | np.ndarray

SCHEDULE_KINDS = ("cosine", "linear", "vp-beta")


@dataclass(frozen=True)
class Schedule:
    """
    Scalar interpolation pair (a(t), gamma(t)) with a(0) = 1, a(1) = 0 and
    gamma^2 = 1 - a^2. Every function accepts a float or a numpy array of times.
    """

    class DomainError(ValueError):
        pass

    kind: str = "cosine"
    params: dict[str, float] = field(default_factory=dict)
    t_terminal: float = 0.992

    def __post_init__(self) -> None:
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"Unsupported schedule kind: '{self.kind}'. Use one of {SCHEDULE_KINDS}.")
        if not 0.0 < self.t_terminal < 1.0:
            raise ValueError("t_terminal must lie in (0, 1)")
        if self.kind == "vp-beta":
            beta_min, beta_max = self.beta_range
            if beta_min <= 0 or beta_max < beta_min:
                raise ValueError("vp-beta requires 0 < beta_min <= beta_max")
            if self._alpha(1.0) > 1e-4:
                raise ValueError(
                    f"vp-beta with beta_min={beta_min}, beta_max={beta_max} leaves "
                    f"a(1)={self._alpha(1.0):.2e} > 1e-4; raise beta_max"
                )

    @property
    def beta_range(self) -> tuple[float, float]:
        return float(self.params.get("beta_min", 0.1)), float(self.params.get("beta_max", 40.0))

    def _check(self, t: ArrayLike, upper_open: bool = False) -> np.ndarray:
        arr = np.asarray(t, dtype=float)
        if np.any(~np.isfinite(arr)) or np.any(arr < 0.0) or np.any(arr > 1.0):
            raise self.DomainError(f"t must lie in [0, 1], got {t}")
        if upper_open and np.any(arr >= 1.0):
            raise self.DomainError(f"t must lie in [0, 1), got {t}")
        return arr

    def _alpha(self, t: ArrayLike) -> ArrayLike:
        if self.kind == "cosine":
            return np.cos(0.5 * math.pi * t)
        if self.kind == "linear":
            return 1.0 - t
        beta_min, beta_max = self.beta_range
        return np.exp(-0.25 * t**2 * (beta_max - beta_min) - 0.5 * t * beta_min)

    def alpha(self, t: ArrayLike) -> ArrayLike:
        arr = self._check(t)
        out = self._alpha(arr)
        # cos(pi/2) evaluates to 6e-17, not 0
        if self.kind == "cosine":
            out = np.where(arr == 1.0, 0.0, out)
        return _like(out, t)

    def alpha_dot(self, t: ArrayLike) -> ArrayLike:
        arr = self._check(t, upper_open=True)
        if self.kind == "cosine":
            out = -0.5 * math.pi * np.sin(0.5 * math.pi * arr)
        elif self.kind == "linear":
            out = -np.ones_like(arr)
        else:
            out = -0.5 * self._beta_vp(arr) * self._alpha(arr)
        return _like(out, t)

    def gamma_sq(self, t: ArrayLike) -> ArrayLike:
        a = np.asarray(self.alpha(t), dtype=float)
        return _like(1.0 - a**2, t)

    def d_gamma_sq(self, t: ArrayLike) -> ArrayLike:
        """Time derivative of gamma^2, i.e. -2 a(t) a'(t)."""
        a = np.asarray(self.alpha(t), dtype=float)
        a_dot = np.asarray(self.alpha_dot(t), dtype=float)
        return _like(-2.0 * a * a_dot, t)

    def _beta_vp(self, t: np.ndarray) -> np.ndarray:
        beta_min, beta_max = self.beta_range
        return beta_min + t * (beta_max - beta_min)

    def beta(self, t: ArrayLike) -> ArrayLike:
        """Noise rate with a(t) = exp(-1/2 int_0^t beta), i.e. beta = -2 a'/a."""
        arr = self._check(t, upper_open=True)
        if self.kind == "vp-beta":
            return _like(self._beta_vp(arr), t)
        a = self._alpha(arr)
        a_dot = np.asarray(self.alpha_dot(arr), dtype=float)
        return _like(-2.0 * a_dot / a, t)

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind, "params": dict(self.params), "t_terminal": self.t_terminal}


def _like(value: np.ndarray, t: ArrayLike) -> ArrayLike:
    if np.ndim(t) == 0:
        return float(value)
    return np.asarray(value, dtype=float)
