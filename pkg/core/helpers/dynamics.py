import csv
import hashlib
import json
import logging
import os
import threading
from dataclasses import asdict, dataclass
from typing import Any

import numpy as np

logger = logging.getLogger(__name__)

DYNAMICS_KINDS = ("lorenz63", "lorenz96")


@dataclass(frozen=True)
class DynamicsModel:
    """
    Lorenz-63 / Lorenz-96 state equations integrated with Euler-Maruyama.
    All operations accept a single state (d,) or an ensemble (N, d).
    """

    class DivergenceError(Exception):
        def __init__(self, message: str, step: int, member: int | None = None) -> None:
            super().__init__(message)
            self.step = step
            self.member = member

    kind: str = "lorenz63"
    dim: int = 3
    dt: float = 0.01
    process_noise: float = 0.0
    sigma: float = 10.0
    rho: float = 28.0
    beta: float = 8.0 / 3.0
    forcing: float = 8.0

    def __post_init__(self) -> None:
        if self.kind not in DYNAMICS_KINDS:
            raise ValueError(f"Unsupported dynamics kind: '{self.kind}'. Use one of {DYNAMICS_KINDS}.")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.process_noise < 0:
            raise ValueError("process_noise must be >= 0")
        if self.kind == "lorenz63" and self.dim != 3:
            raise ValueError("lorenz63 has dim = 3 exactly")
        if self.kind == "lorenz96" and self.dim < 4:
            raise ValueError("lorenz96 needs dim >= 4 for its i-2..i+1 stencil")

    def _check(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dim:
            raise ValueError(f"state dimension mismatch: expected {self.dim}, got {x.shape[-1]}")
        return x

    def drift(self, x: np.ndarray) -> np.ndarray:
        x = self._check(x)
        if self.kind == "lorenz63":
            u, v, w = x[..., 0], x[..., 1], x[..., 2]
            return np.stack(
                [
                    self.sigma * (v - u),
                    u * (self.rho - w) - v,
                    u * v - self.beta * w,
                ],
                axis=-1,
            )
        # cyclic indices: x_{i+1}, x_{i-2}, x_{i-1}
        ahead = np.roll(x, -1, axis=-1)
        back2 = np.roll(x, 2, axis=-1)
        back1 = np.roll(x, 1, axis=-1)
        return (ahead - back2) * back1 - x + self.forcing

    def step(self, x: np.ndarray, rng: np.random.Generator | None = None, step_index: int = 0) -> np.ndarray:
        x = self._check(x)
        out = x + self.drift(x) * self.dt
        if self.process_noise > 0:
            if rng is None:
                raise ValueError("a random generator is required when process_noise > 0")
            out = out + self.process_noise * np.sqrt(self.dt) * rng.standard_normal(x.shape)
        finite = np.isfinite(out)
        if not finite.all():
            member = None
            if out.ndim == 2:
                member = int(np.flatnonzero(~finite.all(axis=1))[0])
            where = f" (member {member})" if member is not None else ""
            raise self.DivergenceError(f"state diverged at step {step_index}{where}", step_index, member)
        return out

    def simulate(
        self,
        x0: np.ndarray,
        n_steps: int,
        rng: np.random.Generator | None = None,
        start_index: int = 0,
    ) -> np.ndarray:
        """Trajectory of shape (n_steps + 1, *x0.shape); row 0 is x0."""
        if n_steps < 0:
            raise ValueError("n_steps must be >= 0")
        x = self._check(x0)
        traj = np.empty((n_steps + 1, *x.shape))
        traj[0] = x
        for r in range(n_steps):
            x = self.step(x, rng, step_index=start_index + r + 1)
            traj[r + 1] = x
        return traj

    def simulate_ensemble(
        self,
        members: np.ndarray,
        n_steps: int,
        rng: np.random.Generator | None = None,
        start_index: int = 0,
    ) -> np.ndarray:
        """Advance an (N, d) ensemble n_steps and return only the final members."""
        x = self._check(members)
        if x.ndim != 2:
            raise ValueError(f"ensemble must be (N, {self.dim}), got {x.shape}")
        for r in range(n_steps):
            x = self.step(x, rng, step_index=start_index + r + 1)
        return x

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def config_hash(payload: dict[str, Any]) -> str:
    blob = json.dumps(payload, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def write_trajectory_csv(path: str, trajectory: np.ndarray, dt: float) -> str:
    d = trajectory.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t"] + [f"x_{i + 1}" for i in range(d)])
        for r, row in enumerate(trajectory):
            writer.writerow([repr(r * dt)] + [repr(float(v)) for v in row])
    return path


def read_trajectory_csv(path: str) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return np.array([[float(v) for v in row[1:]] for row in rows[1:]])


def cached_simulate(
    model: DynamicsModel,
    x0: np.ndarray,
    n_steps: int,
    cache_dir: str,
    key_payload: dict[str, Any],
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Simulate once per config hash; later calls load the compact .npz copy."""
    os.makedirs(cache_dir, exist_ok=True)
    key = config_hash({"model": model.to_dict(), "n_steps": n_steps, **key_payload})
    path = os.path.join(cache_dir, f"trajectory_{key}.npz")
    if os.path.exists(path):
        logger.debug("loading cached trajectory %s", path)
        with np.load(path) as data:
            return data["trajectory"]
    traj = model.simulate(x0, n_steps, rng)
    # concurrent runs may share a key; publish atomically
    tmp = f"{path}.{os.getpid()}.{threading.get_ident()}.tmp"
    with open(tmp, "wb") as fh:
        np.savez_compressed(fh, trajectory=traj)
    os.replace(tmp, path)
    return traj
