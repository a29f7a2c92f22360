"""
Analytic oracle checks for the numerical core. Each check returns a
CheckResult; `verify` on the command line runs them all and fails if any
check fails.
"""
import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import linalg
from scipy.integrate import solve_ivp
from scipy.stats import multivariate_normal

from core.helpers.gaussian_oracle import GaussianPriorScore, kalman_posterior, sampler_moments
from core.helpers.measurement_process import ForwardProcess, MeasurementOperator
from core.helpers.sampler import ReverseSampler, SamplerConfig
from core.helpers.schedule import Schedule
from core.helpers.score_net import ScoreNet, dsm_loss

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    error: float
    tolerance: float
    detail: str = ""


def random_spd(dim: int, rng: np.random.Generator, low: float = 0.2, high: float = 1.0) -> np.ndarray:
    q, _ = linalg.qr(rng.standard_normal((dim, dim)))
    return (q * rng.uniform(low, high, size=dim)) @ q.T


def random_operator(kind: str, dim: int, sigma: float, rng: np.random.Generator) -> MeasurementOperator:
    """Operators whose spectrum lies in [0, 1], which keeps G G^T positive semidefinite."""
    if kind == "identity":
        return MeasurementOperator("identity", dim, sigma)
    if kind == "grid_mask":
        mask = [i % 2 == 0 for i in range(dim)]
        return MeasurementOperator("grid_mask", dim, sigma, mask=tuple(mask))
    return MeasurementOperator("dense", dim, sigma, matrix=random_spd(dim, rng, 0.05, 1.0))


def check_likelihood_score(fp: ForwardProcess, rng: np.random.Generator, n_triples: int = 100, h: float = 1e-5) -> CheckResult:
    """Analytic likelihood score against central differences of log N(z; M x, S)."""
    worst = 0.0
    for _ in range(n_triples):
        t = float(rng.uniform(0.05, 0.9))
        x = rng.standard_normal(fp.dim)
        z = rng.standard_normal(fp.dim)
        kernel = fp.transition(t, 1.0)
        cov = kernel.S + 1e-12 * np.eye(fp.dim) if np.linalg.eigvalsh(kernel.S).min() < 1e-12 else kernel.S

        def logp(v: np.ndarray) -> float:
            return float(multivariate_normal.logpdf(z, mean=kernel.M @ v, cov=cov))

        fd = np.empty(fp.dim)
        for i in range(fp.dim):
            e = np.zeros(fp.dim)
            e[i] = h
            fd[i] = (logp(x + e) - logp(x - e)) / (2 * h)
        analytic = fp.likelihood_score(z, x, t)
        worst = max(worst, float(np.linalg.norm(analytic - fd) / max(np.linalg.norm(fd), 1.0)))
    return CheckResult("likelihood_score", worst <= 1e-5, worst, 1e-5)


def check_kernel_composition(fp: ForwardProcess, rng: np.random.Generator, n_triples: int = 200) -> CheckResult:
    worst_m = worst_s = 0.0
    for _ in range(n_triples):
        s, u, t = np.sort(rng.uniform(0.0, 0.98, size=3))
        if u - s < 1e-6 or t - u < 1e-6:
            continue
        k_su, k_ut, k_st = fp.transition(s, u), fp.transition(u, t), fp.transition(s, t)
        worst_m = max(worst_m, float(np.abs(k_ut.M @ k_su.M - k_st.M).max()))
        composed = k_ut.M @ k_su.S @ k_ut.M.T + k_ut.S
        worst_s = max(worst_s, float(np.abs(composed - k_st.S).max()))
    passed = worst_m <= 1e-10 and worst_s <= 1e-8
    return CheckResult("kernel_composition", passed, max(worst_m, worst_s), 1e-8, f"mean {worst_m:.2e}, cov {worst_s:.2e}")


def check_lyapunov(fp: ForwardProcess, times: tuple[float, ...] = (0.1, 0.25, 0.5, 0.75, 0.9), h: float = 1e-6) -> CheckResult:
    """A'(t) = F A(t) and Sigma'(t) = F Sigma + Sigma F^T + G G^T, with derivatives by central differences."""
    worst = 0.0
    for t in times:
        f = fp.drift_matrix(t)
        d_interp = (fp.interp_operator(t + h) - fp.interp_operator(t - h)) / (2 * h)
        d_sigma = (fp.sigma_t(t + h) - fp.sigma_t(t - h)) / (2 * h)
        sigma = fp.sigma_t(t)
        lyap = d_sigma - f @ sigma - sigma @ f.T - fp.diffusion_sq(t)
        mean_res = d_interp - f @ fp.interp_operator(t)
        scale = max(1.0, float(np.abs(d_sigma).max()))
        worst = max(worst, float(np.abs(lyap).max()) / scale, float(np.abs(mean_res).max()))
    return CheckResult("lyapunov", worst <= 1e-5, worst, 1e-5)


def check_fundamental_matrix(
    fp: ForwardProcess, pairs: tuple[tuple[float, float], ...] = ((0.0, 0.3), (0.1, 0.6), (0.4, 0.9))
) -> CheckResult:
    """M_{s->t} against an ODE solve of Phi' = F(t) Phi, Phi(s) = I."""
    d = fp.dim
    worst = 0.0
    for s, t in pairs:
        sol = solve_ivp(
            lambda tau, y: (fp.drift_matrix(tau) @ y.reshape(d, d)).ravel(),
            (s, t),
            np.eye(d).ravel(),
            rtol=1e-10,
            atol=1e-12,
        )
        phi = sol.y[:, -1].reshape(d, d)
        worst = max(worst, float(np.abs(phi - fp.transition(s, t).M).max()))
    return CheckResult("fundamental_matrix", worst <= 1e-6, worst, 1e-6)


def check_dsm_gradient(rng: np.random.Generator, dim: int = 2, h: float = 1e-5, n_directions: int = 6) -> CheckResult:
    fp = ForwardProcess(MeasurementOperator("identity", dim, 1.0), Schedule("cosine"))
    net = ScoreNet(dim, hidden_width=8, depth=2, time_embed_dim=4, activation="tanh", rng=rng, zero_head=False)
    batch = rng.standard_normal((5, dim))
    t = rng.uniform(0.3, 0.9, size=5)
    noise = rng.standard_normal(batch.shape)
    _, grads = dsm_loss(net, batch, fp, t, noise=noise)

    worst = 0.0
    for i, (w, b) in enumerate(net.layers):
        for param, grad in ((w, grads[i][0]), (b, grads[i][1])):
            for _ in range(n_directions):
                idx = tuple(rng.integers(0, n) for n in param.shape)
                orig = param[idx]
                param[idx] = orig + h
                up, _ = dsm_loss(net, batch, fp, t, noise=noise, compute_grads=False)
                param[idx] = orig - h
                down, _ = dsm_loss(net, batch, fp, t, noise=noise, compute_grads=False)
                param[idx] = orig
                fd = (up - down) / (2 * h)
                worst = max(worst, abs(fd - grad[idx]) / max(abs(fd), abs(grad[idx]), 1e-3))
    return CheckResult("dsm_gradient", worst <= 1e-4, float(worst), 1e-4)


def check_sampler_exactness(
    fp: ForwardProcess,
    rng: np.random.Generator,
    cfg: SamplerConfig | None = None,
    n_samples: int = 0,
) -> CheckResult:
    """
    With the exact Gaussian prior score, the sampler's output moments (exact,
    and optionally Monte-Carlo) must match the Kalman posterior.
    """
    cfg = cfg or SamplerConfig()
    mean = rng.standard_normal(fp.dim)
    cov = random_spd(fp.dim, rng, 0.3, 1.5)
    z = fp.operator.measure(mean, rng)
    post_mean, post_cov = kalman_posterior(mean, cov, fp.operator, z)
    prior = GaussianPriorScore(fp, mean, cov)

    m, c = sampler_moments(fp, prior, z, cfg)
    mean_gap = np.abs(m - post_mean)
    cov_err = float(linalg.norm(c - post_cov) / linalg.norm(post_cov))
    mean_err = float(mean_gap.max() / np.sqrt(np.diag(post_cov)).max())
    passed = cov_err <= 0.05 and mean_err <= 0.05
    detail = f"moments: mean {mean_err:.2e}, cov {cov_err:.2e}"

    if n_samples:
        members = rng.multivariate_normal(mean, cov, size=n_samples)
        samples = ReverseSampler(prior, fp, cfg).sample(members, z, rng)
        se = np.sqrt(np.diag(post_cov) / n_samples)
        mc_mean_ok = bool(np.all(np.abs(samples.mean(axis=0) - post_mean) <= 3 * se + mean_gap + 1e-3))
        mc_cov_err = float(linalg.norm(np.cov(samples.T).reshape(fp.dim, fp.dim) - post_cov) / linalg.norm(post_cov))
        passed = passed and mc_mean_ok and mc_cov_err <= 0.05 + cov_err
        detail += f"; monte-carlo: mean within 3 SE {mc_mean_ok}, cov {mc_cov_err:.2e}"
    return CheckResult("sampler_exactness", passed, max(cov_err, mean_err), 0.05, detail)


def operator_cases(rng: np.random.Generator) -> list[MeasurementOperator]:
    cases = []
    for dim in (1, 2, 3):
        for sigma in (0.5, 1.0):
            cases.append(random_operator("identity", dim, sigma, rng))
            cases.append(random_operator("dense", dim, sigma, rng))
            if dim == 2:
                cases.append(random_operator("grid_mask", dim, sigma, rng))
    return cases


def run_verification(seed: int = 0, n_samples: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results: list[CheckResult] = []
    for op in operator_cases(rng):
        fp = ForwardProcess(op, Schedule("cosine"))
        label = f"{op.kind}/d={op.dim}/sigma={op.sigma}"
        checks: list[Callable[[], CheckResult]] = [
            lambda: check_likelihood_score(fp, rng, n_triples=20),
            lambda: check_kernel_composition(fp, rng, n_triples=50),
            lambda: check_lyapunov(fp),
            lambda: check_fundamental_matrix(fp),
            lambda: check_sampler_exactness(fp, rng, n_samples=n_samples),
        ]
        for check in checks:
            result = check()
            results.append(CheckResult(f"{result.name}[{label}]", result.passed, result.error, result.tolerance, result.detail))
            logger.debug("%s: %s (%.3e)", results[-1].name, "ok" if result.passed else "FAIL", result.error)
    results.append(check_dsm_gradient(rng))
    return results
