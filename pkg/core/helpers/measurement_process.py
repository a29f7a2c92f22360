import functools
import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any

import numpy as np
from scipy import linalg

from core.helpers.schedule import Schedule

logger = logging.getLogger(__name__)

OPERATOR_KINDS = ("identity", "grid_mask", "dense")

_PSD_TOL = 1e-10
_COND_LIMIT = 1e12
_JITTER = 1e-12


def psd_sqrt(matrix: np.ndarray) -> np.ndarray:
    """Symmetric square root of a PSD matrix; eigenvalues are clamped at 0."""
    sym = 0.5 * (matrix + matrix.T)
    w, v = linalg.eigh(sym)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


@dataclass(frozen=True, eq=False)
class MeasurementOperator:
    """Linear measurement z = A x + sigma * eps with a nonnegative-spectrum A."""

    class OperatorError(ValueError):
        pass

    kind: str
    dim: int
    sigma: float = 1.0
    mask: tuple[bool, ...] | None = None
    matrix: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if self.kind not in OPERATOR_KINDS:
            raise self.OperatorError(f"Unsupported operator kind: '{self.kind}'. Use one of {OPERATOR_KINDS}.")
        if self.dim < 1:
            raise self.OperatorError("dim must be a positive integer")
        if not self.sigma > 0:
            raise self.OperatorError("sigma must be positive")

        if self.kind == "grid_mask":
            if self.mask is None or len(self.mask) != self.dim:
                raise self.OperatorError(f"grid_mask needs a mask of length {self.dim}")
            object.__setattr__(self, "mask", tuple(bool(m) for m in self.mask))

        if self.kind == "dense":
            if self.matrix is None:
                raise self.OperatorError("dense operator needs a matrix")
            matrix = np.array(self.matrix, dtype=float)
            if matrix.shape != (self.dim, self.dim):
                raise self.OperatorError(f"matrix must be {self.dim}x{self.dim}, got {matrix.shape}")
            self._validate_spectrum(matrix)
            matrix.setflags(write=False)
            object.__setattr__(self, "matrix", matrix)

    def _validate_spectrum(self, matrix: np.ndarray) -> None:
        sym_min = linalg.eigvalsh(0.5 * (matrix + matrix.T)).min()
        if sym_min < -_PSD_TOL:
            logger.debug("symmetric part of A is indefinite (min eig %.3e); checking spectrum", sym_min)
        eigs = linalg.eigvals(matrix)
        if np.any(np.abs(eigs.imag) > _PSD_TOL) or np.any(eigs.real < -_PSD_TOL):
            raise self.OperatorError(
                "dense operator must have a real, nonnegative spectrum so that A(t) stays invertible"
            )

    @property
    def is_diagonal(self) -> bool:
        return self.kind != "dense"

    @cached_property
    def diagonal(self) -> np.ndarray:
        if self.kind == "identity":
            return np.ones(self.dim)
        if self.kind == "grid_mask":
            return np.array(self.mask, dtype=float)
        return np.diag(self.matrix).copy()

    def as_matrix(self) -> np.ndarray:
        if self.is_diagonal:
            return np.diag(self.diagonal)
        return np.array(self.matrix)

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.is_diagonal:
            return x * self.diagonal
        return x @ self.matrix.T

    def measure(self, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return self.apply(x) + self.sigma * rng.standard_normal(x.shape)

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"kind": self.kind, "dim": self.dim, "sigma": self.sigma}
        if self.mask is not None:
            out["mask"] = [int(m) for m in self.mask]
        if self.matrix is not None:
            out["matrix"] = np.asarray(self.matrix).tolist()
        return out


@dataclass(frozen=True, eq=False)
class TransitionKernel:
    """
    Gaussian kernel X_t | X_s = x ~ N(M x, S). For s > t (reverse step) S holds
    D = M Sigma(s) M^T - Sigma(t), which is PSD in that direction.
    """

    M: np.ndarray
    S: np.ndarray
    s: float
    t: float
    diagonal: bool = False

    @property
    def is_forward(self) -> bool:
        return self.s < self.t

    @cached_property
    def sqrt_S(self) -> np.ndarray:
        if self.diagonal:
            return np.diag(np.sqrt(np.clip(np.diag(self.S), 0.0, None)))
        return psd_sqrt(self.S)

    def apply_mean(self, x: np.ndarray) -> np.ndarray:
        if self.diagonal:
            return x * np.diag(self.M)
        return x @ self.M.T

    def apply_cov(self, v: np.ndarray) -> np.ndarray:
        if self.diagonal:
            return v * np.diag(self.S)
        return v @ self.S

    def noise(self, eps: np.ndarray) -> np.ndarray:
        if self.diagonal:
            return eps * np.diag(self.sqrt_S)
        return eps @ self.sqrt_S.T

    def to_dict(self) -> dict[str, Any]:
        return {
            "s": self.s,
            "t": self.t,
            "direction": "forward" if self.is_forward else "reverse",
            "M": self.M.tolist(),
            "S": self.S.tolist(),
        }


class ForwardProcess:
    """
    Measurement-aware forward process X_t = A(t) X_0 + sigma gamma(t) eps with
    A(t) = (1 - a(t)) A + a(t) I, built from an operator and a schedule.
    Kernels and likelihood operators are memoised per time pair.
    """

    class DomainError(ValueError):
        pass

    class SingularityError(Exception):
        pass

    class CovarianceError(Exception):
        pass

    def __init__(self, operator: MeasurementOperator, schedule: Schedule, cache_size: int = 4096) -> None:
        self.operator = operator
        self.schedule = schedule
        self._transition_cached = functools.lru_cache(maxsize=cache_size)(self._build_transition)
        self._likelihood_cached = functools.lru_cache(maxsize=cache_size)(self._build_likelihood)

    @property
    def dim(self) -> int:
        return self.operator.dim

    @property
    def sigma(self) -> float:
        return self.operator.sigma

    @property
    def _diag(self) -> bool:
        return self.operator.is_diagonal

    def _check_t(self, t: float, upper_open: bool = False) -> float:
        t = float(t)
        if not 0.0 <= t <= 1.0 or (upper_open and t >= 1.0):
            bound = "[0, 1)" if upper_open else "[0, 1]"
            raise self.DomainError(f"t must lie in {bound}, got {t}")
        return t

    def _check_state(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dim:
            raise ValueError(f"state dimension mismatch: expected {self.dim}, got {x.shape[-1]}")
        return x

    def _interp_diag(self, t: float) -> np.ndarray:
        a = self.schedule.alpha(t)
        return (1.0 - a) * self.operator.diagonal + a

    def interp_operator(self, t: float) -> np.ndarray:
        t = self._check_t(t)
        if self._diag:
            return np.diag(self._interp_diag(t))
        a = self.schedule.alpha(t)
        return (1.0 - a) * self.operator.matrix + a * np.eye(self.dim)

    def sigma_t(self, t: float) -> np.ndarray:
        t = self._check_t(t)
        return self.sigma**2 * self.schedule.gamma_sq(t) * np.eye(self.dim)

    def forward_perturb(self, x0: np.ndarray, t: float | np.ndarray, noise: np.ndarray) -> np.ndarray:
        """
        A(t) x0 + sigma gamma(t) noise. `t` is a scalar, or one time per row of
        an (N, d) batch.
        """
        x0 = self._check_state(x0)
        noise = np.asarray(noise, dtype=float)
        if noise.shape != x0.shape:
            raise ValueError(f"noise shape {noise.shape} does not match state shape {x0.shape}")
        if np.ndim(t) == 0:
            a = self.schedule.alpha(self._check_t(t))
        else:
            t = np.asarray(t, dtype=float)
            if t.shape != x0.shape[:-1]:
                raise ValueError(f"per-row times of shape {t.shape} do not match batch {x0.shape}")
            a = np.asarray(self.schedule.alpha(t))[..., None]
        mean = (1.0 - a) * self.operator.apply(x0) + a * x0
        return mean + self.sigma * np.sqrt(1.0 - a**2) * noise

    def _inverse_interp(self, t: float) -> np.ndarray:
        if self._diag:
            diag = self._interp_diag(t)
            if diag.min() <= 0 or diag.max() / diag.min() > _COND_LIMIT:
                raise self.SingularityError(f"A(t) is numerically singular at t={t}")
            return np.diag(1.0 / diag)
        a_t = self.interp_operator(t)
        if np.linalg.cond(a_t) > _COND_LIMIT:
            raise self.SingularityError(f"A(t) is numerically singular at t={t}")
        return linalg.inv(a_t)

    def drift_matrix(self, t: float) -> np.ndarray:
        """F(t) = A'(t) A(t)^{-1} with A'(t) = a'(t) (I - A)."""
        t = self._check_t(t, upper_open=True)
        a_dot = self.schedule.alpha_dot(t)
        if self._diag:
            inv_diag = np.diag(self._inverse_interp(t))
            return np.diag(a_dot * (1.0 - self.operator.diagonal) * inv_diag)
        a_t = self.interp_operator(t)
        if np.linalg.cond(a_t) > _COND_LIMIT:
            raise self.SingularityError(f"A(t) is numerically singular at t={t}")
        a_t_dot = a_dot * (np.eye(self.dim) - self.operator.matrix)
        return linalg.solve(a_t.T, a_t_dot.T).T

    def diffusion_sq(self, t: float) -> np.ndarray:
        """G G^T = Sigma'(t) - F Sigma - Sigma F^T, symmetrised and clipped to PSD."""
        t = self._check_t(t, upper_open=True)
        f = self.drift_matrix(t)
        gamma_sq = self.schedule.gamma_sq(t)
        d_gamma_sq = self.schedule.d_gamma_sq(t)
        gg = self.sigma**2 * (d_gamma_sq * np.eye(self.dim) - gamma_sq * (f + f.T))
        gg = 0.5 * (gg + gg.T)

        if self._diag:
            w = np.diag(gg)
            if w.min() < -_PSD_TOL:
                raise self.CovarianceError(
                    f"diffusion G G^T is not PSD at t={t} (min eig {w.min():.3e}); "
                    "the schedule/operator pairing is invalid"
                )
            return np.diag(np.clip(w, 0.0, None))

        w, v = linalg.eigh(gg)
        if w.min() < -_PSD_TOL:
            raise self.CovarianceError(
                f"diffusion G G^T is not PSD at t={t} (min eig {w.min():.3e}); "
                "the schedule/operator pairing is invalid"
            )
        return (v * np.clip(w, 0.0, None)) @ v.T

    def transition(self, s: float, t: float) -> TransitionKernel:
        s = self._check_t(s, upper_open=True)
        t = self._check_t(t)
        if s == t:
            raise self.DomainError("transition requires s != t")
        return self._transition_cached(s, t)

    def _build_transition(self, s: float, t: float) -> TransitionKernel:
        gs = self.schedule.gamma_sq(s)
        gt = self.schedule.gamma_sq(t)
        sigma_sq = self.sigma**2

        if self._diag:
            m = self._interp_diag(t) * np.diag(self._inverse_interp(s))
            cov = sigma_sq * (gt - gs * m**2)
            if s > t:
                cov = -cov
            if cov.min() < -_PSD_TOL:
                raise self.CovarianceError(f"kernel covariance is not PSD for s={s}, t={t}")
            return TransitionKernel(M=np.diag(m), S=np.diag(np.clip(cov, 0.0, None)), s=s, t=t, diagonal=True)

        m = self.interp_operator(t) @ self._inverse_interp(s)
        cov = sigma_sq * (gt * np.eye(self.dim) - gs * m @ m.T)
        if s > t:
            cov = -cov
        cov = 0.5 * (cov + cov.T)
        if linalg.eigvalsh(cov).min() < -_PSD_TOL:
            raise self.CovarianceError(
                f"kernel covariance is not PSD for s={s}, t={t}; "
                "operator eigenvalues above 1 break the moment-matching construction"
            )
        return TransitionKernel(M=m, S=cov, s=s, t=t, diagonal=False)

    def likelihood_operators(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        """Return (M_{t->1}, Sigma_{t->1}^{-1}) used by the likelihood score."""
        t = self._check_t(t, upper_open=True)
        if t > self.schedule.t_terminal + 1e-12:
            raise self.DomainError(f"likelihood score is only evaluated up to t_terminal={self.schedule.t_terminal}")
        return self._likelihood_cached(t)

    def _build_likelihood(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        kernel = self._transition_cached(t, 1.0)
        cov = kernel.S
        if kernel.diagonal:
            w = np.diag(cov).copy()
            if w.min() < -_PSD_TOL:
                raise self.SingularityError(f"Sigma_(t->1) is not positive at t={t}")
            if w.min() < _JITTER:
                w = w + _JITTER
            return kernel.M, np.diag(1.0 / w)

        w, v = linalg.eigh(cov)
        if w.min() < -_PSD_TOL:
            raise self.SingularityError(f"Sigma_(t->1) is not positive at t={t}")
        if w.min() < _JITTER:
            w = w + _JITTER
        return kernel.M, (v / w) @ v.T

    def likelihood_score(self, z: np.ndarray, x_t: np.ndarray, t: float) -> np.ndarray:
        """M^T Sigma_(t->1)^{-1} (z - M x_t) with M = M_{t->1}; x_t may be (d,) or (N, d)."""
        x_t = self._check_state(x_t)
        z = self._check_state(z)
        m, precision = self.likelihood_operators(t)
        residual = z - x_t @ m.T
        return residual @ precision @ m

    def conditional_score(self, x_t: np.ndarray, x0: np.ndarray, t: float) -> np.ndarray:
        t = self._check_t(t)
        if t == 0.0:
            raise self.DomainError("conditional score is undefined at t=0 where Sigma(0)=0")
        x_t = self._check_state(x_t)
        x0 = self._check_state(x0)
        var = self.sigma**2 * self.schedule.gamma_sq(t)
        mean = self.forward_perturb(x0, t, np.zeros_like(x0))
        return -(x_t - mean) / var

    def to_dict(self) -> dict[str, Any]:
        return {"operator": self.operator.to_dict(), "schedule": self.schedule.to_dict()}
