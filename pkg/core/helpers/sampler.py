import csv
import logging
from dataclasses import dataclass

import numpy as np

from core.helpers.measurement_process import ForwardProcess
from core.interfaces.score_model_interface import ScoreModel

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SamplerConfig:
    nfe: int = 500
    eps: float = 0.008
    guidance_scale: float = 1.0
    final_denoise: bool = True

    def __post_init__(self) -> None:
        if self.nfe < 1:
            raise ValueError("nfe must be >= 1")
        if not 0.0 < self.eps < 1.0:
            raise ValueError("eps must lie in (0, 1)")

    @property
    def t_start(self) -> float:
        return 1.0 - self.eps


def posterior_score(
    model: ScoreModel,
    fp: ForwardProcess,
    x_s: np.ndarray,
    s: float,
    z: np.ndarray,
    guidance_scale: float = 1.0,
) -> np.ndarray:
    """Learned prior score plus the exact likelihood score at time s."""
    prior = model.score(x_s, s)
    if guidance_scale == 0.0:
        return prior
    return prior + guidance_scale * fp.likelihood_score(z, x_s, s)


def reverse_step(
    fp: ForwardProcess,
    x_s: np.ndarray,
    s: float,
    t: float,
    score: np.ndarray,
    rng: np.random.Generator | None = None,
    noise: np.ndarray | None = None,
    add_noise: bool = True,
) -> np.ndarray:
    """x_t = M x_s + D score + D^{1/2} eps with D = M Sigma(s) M^T - Sigma(t), for t < s."""
    if not 0.0 <= t < s:
        raise ValueError(f"reverse step needs 0 <= t < s, got s={s}, t={t}")
    kernel = fp.transition(s, t)
    x_t = kernel.apply_mean(x_s) + kernel.apply_cov(score)
    if add_noise:
        if noise is None:
            if rng is None:
                raise ValueError("either rng or noise is required when add_noise is set")
            noise = rng.standard_normal(np.shape(x_s))
        x_t = x_t + kernel.noise(noise)
    return x_t


class ReverseSampler:
    """
    Draws posterior samples by running the reverse kernel over
    linspace(1 - eps, 0, nfe + 1), with the score frozen at each step's
    larger time. Members are processed as one (N, d) batch.
    """

    class DivergenceError(Exception):
        def __init__(self, message: str, step: int) -> None:
            super().__init__(message)
            self.step = step

    def __init__(self, model: ScoreModel, fp: ForwardProcess, cfg: SamplerConfig, trace: bool = False) -> None:
        if cfg.t_start > fp.schedule.t_terminal + 1e-12:
            raise ValueError(
                f"sampling starts at 1 - eps = {cfg.t_start}, beyond t_terminal = {fp.schedule.t_terminal}"
            )
        self.model = model
        self.fp = fp
        self.cfg = cfg
        self.trace = trace
        self.trace_rows: list[dict[str, float]] = []

    def time_grid(self) -> np.ndarray:
        return np.linspace(self.cfg.t_start, 0.0, self.cfg.nfe + 1)

    def sample(self, prior_members: np.ndarray, z: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        single = np.ndim(prior_members) == 1
        x0 = np.atleast_2d(np.asarray(prior_members, dtype=float))
        times = self.time_grid()
        x = self.fp.forward_perturb(x0, float(times[0]), rng.standard_normal(x0.shape))

        for j in range(self.cfg.nfe):
            s, t = float(times[j]), float(times[j + 1])
            x_s = x
            score = posterior_score(self.model, self.fp, x_s, s, z, self.cfg.guidance_scale)
            noise = rng.standard_normal(x.shape)
            last = j == self.cfg.nfe - 1
            x = reverse_step(
                self.fp, x_s, s, t, score, noise=noise,
                add_noise=not (last and self.cfg.final_denoise),
            )
            if not np.all(np.isfinite(x)):
                raise self.DivergenceError(f"reverse sampling diverged at step {j} (s={s:.4f})", step=j)
            if self.trace:
                prior = self.model.score(x_s, s)
                guidance = self.fp.likelihood_score(z, x_s, s)
                self.trace_rows.append(
                    {
                        "step": j,
                        "t": s,
                        "mean_score_norm": float(np.linalg.norm(prior, axis=-1).mean()),
                        "mean_guidance_norm": float(np.linalg.norm(guidance, axis=-1).mean()),
                    }
                )
        return x[0] if single else x

    def write_trace(self, path: str) -> str:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["step", "t", "mean_score_norm", "mean_guidance_norm"])
            writer.writeheader()
            writer.writerows(self.trace_rows)
        return path


def sample_posterior(
    model: ScoreModel,
    fp: ForwardProcess,
    prior_member: np.ndarray,
    z: np.ndarray,
    cfg: SamplerConfig,
    rng: np.random.Generator,
) -> np.ndarray:
    return ReverseSampler(model, fp, cfg).sample(prior_member, z, rng)

