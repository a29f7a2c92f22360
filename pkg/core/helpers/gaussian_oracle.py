"""
Closed-form references for the linear-Gaussian case: the exact prior score of
the perturbed marginals, the Kalman posterior, and the moments the discretised
reverse sampler produces when driven by that exact score.
"""
import numpy as np
from scipy import linalg

from core.helpers.measurement_process import ForwardProcess, MeasurementOperator
from core.helpers.sampler import SamplerConfig
from core.interfaces.score_model_interface import ScoreModel


class GaussianPriorScore(ScoreModel):
    """Score of N(A(t) mu, A(t) P A(t)^T + Sigma(t)) for a Gaussian prior N(mu, P)."""

    def __init__(self, fp: ForwardProcess, mean: np.ndarray, cov: np.ndarray) -> None:
        self.fp = fp
        self.mean = np.asarray(mean, dtype=float)
        self.cov = np.atleast_2d(np.asarray(cov, dtype=float))

    def marginal(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        a_t = self.fp.interp_operator(t)
        return a_t @ self.mean, a_t @ self.cov @ a_t.T + self.fp.sigma_t(t)

    def precision(self, t: float) -> np.ndarray:
        _, cov = self.marginal(t)
        return linalg.inv(cov)

    def score(self, x_t: np.ndarray, t: float) -> np.ndarray:
        mean, cov = self.marginal(t)
        return -linalg.solve(cov, (np.asarray(x_t) - mean).T, assume_a="pos").T


def kalman_posterior(
    mean: np.ndarray, cov: np.ndarray, operator: MeasurementOperator, z: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    a = operator.as_matrix()
    innovation = a @ cov @ a.T + operator.sigma**2 * np.eye(operator.dim)
    gain = linalg.solve(innovation, a @ cov, assume_a="pos").T
    post_mean = mean + gain @ (z - a @ mean)
    post_cov = (np.eye(operator.dim) - gain @ a) @ cov
    return post_mean, 0.5 * (post_cov + post_cov.T)


def posterior_marginal(
    fp: ForwardProcess, mean: np.ndarray, cov: np.ndarray, z: np.ndarray, t: float
) -> tuple[np.ndarray, np.ndarray]:
    """Law of X_t given Z = z, with Z the endpoint X_1 of the forward process."""
    a_t = fp.interp_operator(t)
    a = fp.operator.as_matrix()
    cov_xx = a_t @ cov @ a_t.T + fp.sigma_t(t)
    cov_zz = a @ cov @ a.T + fp.sigma**2 * np.eye(fp.dim)
    cov_xz = a_t @ cov @ a.T
    if t > 0.0:
        # X_t and Z = X_1 share the forward path
        cov_xz = cov_xz + fp.sigma_t(t) @ fp.transition(t, 1.0).M.T
    gain = linalg.solve(cov_zz, cov_xz.T, assume_a="pos").T
    post_mean = a_t @ mean + gain @ (z - a @ mean)
    post_cov = cov_xx - gain @ cov_xz.T
    return post_mean, 0.5 * (post_cov + post_cov.T)


def sampler_moments(
    fp: ForwardProcess,
    prior: GaussianPriorScore,
    z: np.ndarray,
    cfg: SamplerConfig,
) -> tuple[np.ndarray, np.ndarray]:
    """
    Exact mean and covariance of the reverse sampler's output when the prior
    score is `prior`; every step is affine in x, so the moments propagate
    without Monte-Carlo noise.
    """
    times = np.linspace(cfg.t_start, 0.0, cfg.nfe + 1)
    mean, cov = prior.marginal(float(times[0]))
    for j in range(cfg.nfe):
        s, t = float(times[j]), float(times[j + 1])
        kernel = fp.transition(s, t)
        m_s, _ = prior.marginal(s)
        prec_s = prior.precision(s)
        m1, like_prec = fp.likelihood_operators(s)
        like = m1.T @ like_prec
        d = kernel.S
        # score(x) = -prec_s (x - m_s) + g * like (z - m1 x)
        slope = kernel.M - d @ prec_s - cfg.guidance_scale * d @ like @ m1
        offset = d @ prec_s @ m_s + cfg.guidance_scale * d @ like @ z
        mean = slope @ mean + offset
        cov = slope @ cov @ slope.T
        if not (j == cfg.nfe - 1 and cfg.final_denoise):
            cov = cov + d
        cov = 0.5 * (cov + cov.T)
    return mean, cov
