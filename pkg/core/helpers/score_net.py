import json
import logging
import math
import struct
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from core.helpers.measurement_process import ForwardProcess
from core.interfaces.score_model_interface import ScoreModel

logger = logging.getLogger(__name__)

Layer = tuple[np.ndarray, np.ndarray]

LOSS_WEIGHTINGS = ("score", "noise")
T_SAMPLING = ("per_example", "shared")
EPOCH_MODES = ("single_batch", "full_pass")

_CHECKPOINT_MAGIC = b"MASFNET\x00"
_CHECKPOINT_VERSION = 1


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _silu(x: np.ndarray) -> np.ndarray:
    return x * _sigmoid(x)


def _silu_grad(x: np.ndarray) -> np.ndarray:
    s = _sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def _tanh_grad(x: np.ndarray) -> np.ndarray:
    return 1.0 - np.tanh(x) ** 2


ACTIVATIONS = {
    "silu": (_silu, _silu_grad),
    "tanh": (np.tanh, _tanh_grad),
}


def sinusoidal_embedding(t: np.ndarray, width: int, max_period: float = 10000.0, scale: float = 1000.0) -> np.ndarray:
    """(B,) times -> (B, width) sin/cos features."""
    t = np.asarray(t, dtype=float).reshape(-1)
    half = width // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / max(half, 1))
    args = scale * t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if width % 2:
        emb = np.concatenate([emb, np.zeros((t.shape[0], 1))], axis=1)
    return emb


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 500
    batch_size: int = 32
    learning_rate: float = 3e-4
    t_min: float = 1e-3
    loss_weighting: str = "score"
    t_sampling: str = "per_example"
    finetune_layers: int | None = 2
    finetune_epochs: int | None = None
    validation_split: float = 0.2
    epoch_mode: str = "single_batch"
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self) -> None:
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 < self.t_min < 1.0:
            raise ValueError("t_min must lie in (0, 1)")
        if self.loss_weighting not in LOSS_WEIGHTINGS:
            raise ValueError(f"loss_weighting must be one of {LOSS_WEIGHTINGS}")
        if self.t_sampling not in T_SAMPLING:
            raise ValueError(f"t_sampling must be one of {T_SAMPLING}")
        if self.epoch_mode not in EPOCH_MODES:
            raise ValueError(f"epoch_mode must be one of {EPOCH_MODES}")
        if not 0.0 <= self.validation_split < 1.0:
            raise ValueError("validation_split must lie in [0, 1)")
        if self.finetune_layers is not None and self.finetune_layers < 0:
            raise ValueError("finetune_layers must be >= 0 (or null for all layers)")
        if self.finetune_epochs is not None and self.finetune_epochs < 0:
            raise ValueError("finetune_epochs must be >= 0")


@dataclass
class TrainingHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)

    @property
    def epochs(self) -> int:
        return len(self.train_loss)

    def to_dict(self) -> dict[str, Any]:
        return {"train_loss": list(self.train_loss), "val_loss": list(self.val_loss)}


class ScoreNet(ScoreModel):
    """
    Time-conditioned MLP S(x, t): the state is concatenated with a sinusoidal
    embedding of t, passed through `depth` hidden layers, and mapped back to d.
    Gradients are computed by an explicit backward pass.
    """

    class NonFiniteError(Exception):
        def __init__(self, message: str, layer: int) -> None:
            super().__init__(message)
            self.layer = layer

    class TrainingError(Exception):
        def __init__(self, message: str, epoch: int) -> None:
            super().__init__(message)
            self.epoch = epoch

    def __init__(
        self,
        dim: int,
        hidden_width: int = 64,
        depth: int = 3,
        time_embed_dim: int = 16,
        activation: str = "silu",
        layers: list[Layer] | None = None,
        rng: np.random.Generator | None = None,
        zero_head: bool = True,
    ) -> None:
        if activation not in ACTIVATIONS:
            raise ValueError(f"Unsupported activation: '{activation}'. Use one of {sorted(ACTIVATIONS)}.")
        if dim < 1 or hidden_width < 1 or depth < 1 or time_embed_dim < 0:
            raise ValueError("dim, hidden_width and depth must be positive; time_embed_dim >= 0")
        self.dim = dim
        self.hidden_width = hidden_width
        self.depth = depth
        self.time_embed_dim = time_embed_dim
        self.activation = activation
        self._act, self._act_grad = ACTIVATIONS[activation]

        if layers is None:
            layers = self._init_layers(rng or np.random.default_rng(0), zero_head)
        if [w.shape for w, _ in layers] != self._shapes():
            raise ValueError("layer shapes do not match the declared widths")
        self.layers: list[Layer] = [(np.array(w, dtype=float), np.array(b, dtype=float)) for w, b in layers]

    @property
    def widths(self) -> list[int]:
        return [self.dim + self.time_embed_dim] + [self.hidden_width] * self.depth + [self.dim]

    def _shapes(self) -> list[tuple[int, int]]:
        w = self.widths
        return list(zip(w[:-1], w[1:]))

    def _init_layers(self, rng: np.random.Generator, zero_head: bool) -> list[Layer]:
        layers: list[Layer] = []
        shapes = self._shapes()
        for i, (fan_in, fan_out) in enumerate(shapes):
            if zero_head and i == len(shapes) - 1:
                weight = np.zeros((fan_in, fan_out))
            else:
                bound = math.sqrt(6.0 / fan_in)
                weight = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            layers.append((weight, np.zeros(fan_out)))
        return layers

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def parameter_count(self) -> int:
        return int(sum(w.size + b.size for w, b in self.layers))

    def copy(self) -> "ScoreNet":
        return ScoreNet(
            self.dim,
            hidden_width=self.hidden_width,
            depth=self.depth,
            time_embed_dim=self.time_embed_dim,
            activation=self.activation,
            layers=[(w.copy(), b.copy()) for w, b in self.layers],
        )

    def _inputs(self, x_t: np.ndarray, t: float | np.ndarray) -> np.ndarray:
        x_t = np.atleast_2d(np.asarray(x_t, dtype=float))
        if x_t.shape[-1] != self.dim:
            raise ValueError(f"state dimension mismatch: expected {self.dim}, got {x_t.shape[-1]}")
        t_arr = np.broadcast_to(np.asarray(t, dtype=float), (x_t.shape[0],))
        if np.any(t_arr < 0.0) or np.any(t_arr > 1.0):
            raise ValueError(f"t must lie in [0, 1], got {t}")
        if self.time_embed_dim == 0:
            return x_t
        return np.concatenate([x_t, sinusoidal_embedding(t_arr, self.time_embed_dim)], axis=1)

    def _forward(self, x_t: np.ndarray, t: float | np.ndarray) -> tuple[np.ndarray, list[np.ndarray], list[np.ndarray]]:
        h = self._inputs(x_t, t)
        inputs, pre = [], []
        last = self.n_layers - 1
        for i, (w, b) in enumerate(self.layers):
            inputs.append(h)
            z = h @ w + b
            if i < last:
                pre.append(z)
                h = self._act(z)
            else:
                h = z
            if not np.all(np.isfinite(h)):
                raise self.NonFiniteError(f"non-finite activations at layer {i}", layer=i)
        return h, inputs, pre

    def forward(self, x_t: np.ndarray, t: float | np.ndarray) -> np.ndarray:
        out, _, _ = self._forward(x_t, t)
        return out[0] if np.ndim(x_t) == 1 else out

    def score(self, x_t: np.ndarray, t: float) -> np.ndarray:
        return self.forward(x_t, t)

    def backward(self, inputs: list[np.ndarray], pre: list[np.ndarray], grad_out: np.ndarray) -> list[Layer]:
        grads: list[Layer] = [None] * self.n_layers  # type: ignore[list-item]
        g = grad_out
        for i in range(self.n_layers - 1, -1, -1):
            w, _ = self.layers[i]
            if i < self.n_layers - 1:
                g = g * self._act_grad(pre[i])
            grads[i] = (inputs[i].T @ g, g.sum(axis=0))
            if i > 0:
                g = g @ w.T
        return grads

    def metadata(self) -> dict[str, Any]:
        return {
            "dim": self.dim,
            "hidden_width": self.hidden_width,
            "depth": self.depth,
            "time_embed_dim": self.time_embed_dim,
            "activation": self.activation,
            "widths": self.widths,
            "parameter_count": self.parameter_count,
        }


class Adam:
    """Adam with bias correction; frozen layers are skipped entirely."""

    def __init__(self, layers: list[Layer], lr: float, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> None:
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m = [(np.zeros_like(w), np.zeros_like(b)) for w, b in layers]
        self.v = [(np.zeros_like(w), np.zeros_like(b)) for w, b in layers]
        self.steps = 0

    def step(self, layers: list[Layer], grads: list[Layer], trainable: list[bool]) -> None:
        self.steps += 1
        c1 = 1.0 - self.beta1**self.steps
        c2 = 1.0 - self.beta2**self.steps
        for i, update in enumerate(trainable):
            if not update:
                continue
            for j in range(2):
                g = grads[i][j]
                m = self.m[i][j]
                v = self.v[i][j]
                m *= self.beta1
                m += (1.0 - self.beta1) * g
                v *= self.beta2
                v += (1.0 - self.beta2) * g * g
                layers[i][j][...] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def dsm_loss(
    net: ScoreNet,
    batch: np.ndarray,
    fp: ForwardProcess,
    t: float | np.ndarray,
    rng: np.random.Generator | None = None,
    noise: np.ndarray | None = None,
    weighting: str = "score",
    t_min: float = 1e-3,
    compute_grads: bool = True,
) -> tuple[float, list[Layer] | None]:
    """
    Denoising score matching: mean over the batch of
    w(t) * || S(x_t, t) + Sigma(t)^{-1/2} eps ||^2 with x_t = A(t) x + Sigma(t)^{1/2} eps.
    w = 1 for "score" weighting, sigma^2 gamma^2(t) for "noise" weighting.
    """
    batch = np.atleast_2d(np.asarray(batch, dtype=float))
    t_arr = np.broadcast_to(np.asarray(t, dtype=float), (batch.shape[0],))
    if np.any(t_arr < t_min) or np.any(t_arr > 1.0):
        raise ValueError(f"DSM times must lie in [t_min={t_min}, 1]")
    if weighting not in LOSS_WEIGHTINGS:
        raise ValueError(f"weighting must be one of {LOSS_WEIGHTINGS}")
    if noise is None:
        if rng is None:
            raise ValueError("either rng or noise is required")
        noise = rng.standard_normal(batch.shape)

    x_t = fp.forward_perturb(batch, t_arr, noise)
    std = fp.sigma * np.sqrt(np.asarray(fp.schedule.gamma_sq(t_arr)))
    weights = std**2 if weighting == "noise" else np.ones_like(std)

    out, inputs, pre = net._forward(x_t, t_arr)
    residual = out + noise / std[:, None]
    loss = float(np.mean(weights * np.sum(residual**2, axis=1)))
    if not compute_grads:
        return loss, None
    grad_out = 2.0 * weights[:, None] * residual / batch.shape[0]
    return loss, net.backward(inputs, pre, grad_out)


def _trainable_mask(net: ScoreNet, finetune_layers: int | None) -> list[bool]:
    if finetune_layers is None:
        return [True] * net.n_layers
    first = max(net.n_layers - finetune_layers, 0)
    return [i >= first for i in range(net.n_layers)]


def _sample_times(rng: np.random.Generator, size: int, cfg: TrainConfig) -> np.ndarray:
    if cfg.t_sampling == "shared":
        return np.full(size, rng.uniform(cfg.t_min, 1.0))
    return rng.uniform(cfg.t_min, 1.0, size=size)


def _epoch_batches(rng: np.random.Generator, n_train: int, cfg: TrainConfig) -> list[np.ndarray]:
    if n_train < cfg.batch_size:
        return [rng.integers(0, n_train, size=cfg.batch_size)]
    perm = rng.permutation(n_train)
    if cfg.epoch_mode == "single_batch":
        return [perm[:cfg.batch_size]]
    return [perm[i:i + cfg.batch_size] for i in range(0, n_train, cfg.batch_size)]


def train(
    net: ScoreNet,
    prior: np.ndarray,
    fp: ForwardProcess,
    cfg: TrainConfig,
    rng: np.random.Generator,
    trainable: list[bool] | None = None,
    epochs: int | None = None,
) -> tuple[ScoreNet, TrainingHistory]:
    """
    Fit the prior score of `prior` (N, d) by DSM with Adam. One epoch is one
    minibatch and one optimiser step (`epoch_mode="full_pass"` sweeps the whole
    training split instead); returns a new net and the history.
    """
    prior = np.atleast_2d(np.asarray(prior, dtype=float))
    if prior.shape[0] == 0:
        raise ValueError("prior ensemble is empty")
    epochs = cfg.epochs if epochs is None else epochs
    trainable = trainable or [True] * net.n_layers
    net = net.copy()
    history = TrainingHistory()
    if epochs == 0 or not any(trainable):
        return net, history

    n = prior.shape[0]
    n_val = int(round(n * cfg.validation_split)) if n > 1 else 0
    n_val = min(n_val, n - 1)
    order = rng.permutation(n)
    val, train_set = prior[order[:n_val]], prior[order[n_val:]]
    n_train = train_set.shape[0]
    val_t = rng.uniform(cfg.t_min, 1.0, size=n_val)
    val_noise = rng.standard_normal(val.shape)

    optimizer = Adam(net.layers, cfg.learning_rate, cfg.adam_betas, cfg.adam_eps)
    for epoch in range(epochs):
        losses = []
        for idx in _epoch_batches(rng, n_train, cfg):
            t = _sample_times(rng, idx.size, cfg)
            loss, grads = dsm_loss(
                net, train_set[idx], fp, t, rng=rng, weighting=cfg.loss_weighting, t_min=cfg.t_min
            )
            if not math.isfinite(loss):
                raise ScoreNet.TrainingError(f"non-finite training loss at epoch {epoch}", epoch=epoch)
            optimizer.step(net.layers, grads, trainable)
            losses.append(loss)
        history.train_loss.append(float(np.mean(losses)))

        if n_val:
            val_loss, _ = dsm_loss(
                net, val, fp, val_t, noise=val_noise, weighting=cfg.loss_weighting,
                t_min=cfg.t_min, compute_grads=False,
            )
            if not math.isfinite(val_loss):
                raise ScoreNet.TrainingError(f"non-finite validation loss at epoch {epoch}", epoch=epoch)
            history.val_loss.append(val_loss)

    logger.debug(
        "trained %d epochs: train loss %.4g -> %.4g", epochs, history.train_loss[0], history.train_loss[-1]
    )
    return net, history


def finetune(
    net: ScoreNet,
    prior: np.ndarray,
    fp: ForwardProcess,
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> tuple[ScoreNet, TrainingHistory]:
    """Continue training with only the trailing `cfg.finetune_layers` layers unfrozen."""
    trainable = _trainable_mask(net, cfg.finetune_layers)
    epochs = cfg.epochs if cfg.finetune_epochs is None else cfg.finetune_epochs
    return train(net, prior, fp, cfg, rng, trainable=trainable, epochs=epochs)


def save_checkpoint(net: ScoreNet, path: str, extra: dict[str, Any] | None = None) -> str:
    """Binary layout: magic, version, layer count, (rows, cols) per layer, then row-major f64 W and b."""
    with open(path, "wb") as fh:
        fh.write(_CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", _CHECKPOINT_VERSION, net.n_layers))
        for w, _ in net.layers:
            fh.write(struct.pack("<II", *w.shape))
        for w, b in net.layers:
            fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())
    with open(f"{path}.json", "w") as fh:
        json.dump({"format_version": _CHECKPOINT_VERSION, **net.metadata(), **(extra or {})}, fh, indent=2, sort_keys=True)
    return path


def load_checkpoint(path: str) -> ScoreNet:
    with open(f"{path}.json") as fh:
        meta = json.load(fh)
    with open(path, "rb") as fh:
        if fh.read(len(_CHECKPOINT_MAGIC)) != _CHECKPOINT_MAGIC:
            raise ValueError(f"{path} is not a score-net checkpoint")
        version, n_layers = struct.unpack("<II", fh.read(8))
        if version != _CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        shapes = [struct.unpack("<II", fh.read(8)) for _ in range(n_layers)]
        layers = []
        for rows, cols in shapes:
            w = np.frombuffer(fh.read(rows * cols * 8), dtype="<f8").reshape(rows, cols)
            b = np.frombuffer(fh.read(cols * 8), dtype="<f8")
            layers.append((w.astype(float), b.astype(float)))
    return ScoreNet(
        meta["dim"],
        hidden_width=meta["hidden_width"],
        depth=meta["depth"],
        time_embed_dim=meta["time_embed_dim"],
        activation=meta["activation"],
        layers=layers,
    )
