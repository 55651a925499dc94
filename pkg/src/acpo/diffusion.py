"""DDPM forward/reverse processes and a small MLP noise predictor."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import numcore as nc
from .errors import ConfigError, ShapeError
from .numcore import ParamStore, Tensor


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def check_t(self, t) -> np.ndarray:
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t >= self.T):
            raise ConfigError(f"timestep out of range [0, {self.T - 1}]: {t}")
        return t


def make_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Linear beta schedule; timesteps are indexed ``0 .. T-1``."""
    if T < 2:
        raise ConfigError(f"T must be >= 2, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = beta_start + (beta_end - beta_start) * np.arange(T) / (T - 1)
    alpha = 1.0 - beta
    return NoiseSchedule(T, beta, alpha, np.cumprod(alpha))


def timestep_embedding(t, dim: int = 16) -> np.ndarray:
    """Sinusoidal embedding, ``[len(t), dim]``."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


@dataclass
class NoisePredictor:
    """MLP epsilon-predictor over flattened images.

    The input row is ``[x_t, timestep embedding, condition embedding]``.
    The MLP output ``v`` is turned into a noise prediction with
    ``eps = sqrt(1 - abar_t) * x_t + sqrt(abar_t) * v``, so at high noise the
    prediction is close to ``x_t`` without the MLP having to copy 256 inputs
    through a narrow hidden layer.

    Affine layers are named ``fc0 .. fc{n-1}``; adapters (if attached) live
    in the same ``ParamStore`` next to the weights they modify.
    """

    params: ParamStore
    image_shape: tuple[int, int]
    hidden: tuple[int, ...]
    alpha_bar: np.ndarray
    temb_dim: int = 16
    num_classes: int = 0
    cond_dim: int = 0
    adapters: object = None  # AdapterSet, set by adapters.attach_adapters

    @property
    def layer_names(self) -> list[str]:
        return [f"fc{i}" for i in range(len(self.hidden) + 1)]

    def descriptor(self) -> dict:
        return {
            "image_shape": list(self.image_shape),
            "hidden": list(self.hidden),
            "temb_dim": self.temb_dim,
            "num_classes": self.num_classes,
            "cond_dim": self.cond_dim,
            "T": int(len(self.alpha_bar)),
        }


def build_predictor(
    sched: NoiseSchedule,
    image_shape: Sequence[int] = (16, 16),
    hidden: Sequence[int] = (256, 256),
    temb_dim: int = 16,
    num_classes: int = 0,
    cond_dim: int = 0,
    seed: int = 0,
) -> NoisePredictor:
    rng = np.random.default_rng(seed)
    h, w = image_shape
    d_img = h * w
    if num_classes and not cond_dim:
        raise ConfigError("conditional predictor needs cond_dim > 0")
    store = ParamStore()
    widths = [d_img + temb_dim + (cond_dim if num_classes else 0), *hidden, d_img]
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        std = 1.0 / np.sqrt(fan_in)
        if i == len(widths) - 2:
            std *= 0.1
        store.add(f"fc{i}.weight", rng.normal(0.0, std, (fan_out, fan_in)))
        store.add(f"fc{i}.bias", np.zeros(fan_out))
    if num_classes:
        store.add("cond.embed", rng.normal(0.0, 1.0, (num_classes, cond_dim)))
    return NoisePredictor(store, (h, w), tuple(hidden), sched.alpha_bar.copy(), temb_dim, num_classes,
                          cond_dim if num_classes else 0)


def layer_forward(net: NoisePredictor, name: str, h: Tensor, adapted: bool) -> Tensor:
    p = net.params
    out = nc.affine(h, p[f"{name}.weight"], p[f"{name}.bias"])
    ad = net.adapters
    if adapted and ad is not None and name in ad.layers:
        delta = nc.affine(nc.affine(h, p[f"{name}.lora_A"]), p[f"{name}.lora_B"])
        out = nc.add(out, nc.scale(delta, ad.scale / ad.rank))
    return out


def _condition_rows(net: NoisePredictor, condition, batch: int) -> Tensor | None:
    if not net.num_classes:
        if condition is not None:
            raise ShapeError("predict_noise: unconditional network given a condition")
        return None
    if condition is None:
        raise ShapeError("predict_noise: conditional network needs a condition")
    ids = np.broadcast_to(np.asarray(condition, dtype=int), (batch,))
    if np.any(ids < 0) or np.any(ids >= net.num_classes):
        raise ShapeError(f"predict_noise: condition ids {ids} outside [0, {net.num_classes})")
    onehot = np.eye(net.num_classes)[ids]
    # [B, classes] @ table -> [B, cond_dim]; affine expects [out, in] weights
    return nc.affine(onehot, nc.transpose(net.params["cond.embed"], (1, 0)))


def predict_noise(net: NoisePredictor, x_t, t, condition=None, adapted: bool = True) -> Tensor:
    """epsilon_theta(x_t, t, c) for a batch ``x_t`` of shape ``[B, H, W]``."""
    x_t = nc.as_tensor(x_t)
    if x_t.data.ndim != 3 or tuple(x_t.shape[1:]) != tuple(net.image_shape):
        raise ShapeError(f"predict_noise: expected [B, {net.image_shape[0]}, {net.image_shape[1]}], got {x_t.shape}")
    B = x_t.shape[0]
    t = np.broadcast_to(np.asarray(t), (B,))
    if np.any(t < 0) or np.any(t >= len(net.alpha_bar)):
        raise ShapeError(f"predict_noise: timestep outside [0, {len(net.alpha_bar) - 1}]")
    parts = [nc.reshape(x_t, (B, -1)), Tensor(timestep_embedding(t, net.temb_dim))]
    cond = _condition_rows(net, condition, B)
    if cond is not None:
        parts.append(cond)
    h = nc.concat(parts, axis=1)
    names = net.layer_names
    for name in names[:-1]:
        h = nc.tanh(layer_forward(net, name, h, adapted))
    v = nc.reshape(layer_forward(net, names[-1], h, adapted), x_t.shape)
    ab = net.alpha_bar[t].reshape(B, 1, 1)
    return nc.add(nc.mul(x_t, np.sqrt(1.0 - ab)), nc.mul(v, np.sqrt(ab)))


EpsFn = Callable[..., Tensor]


def _eps(net, x_t, t, condition, adapted) -> Tensor:
    if isinstance(net, NoisePredictor):
        return predict_noise(net, x_t, t, condition, adapted)
    return nc.as_tensor(net(x_t, t, condition))


def q_sample(x0, t, epsilon, sched: NoiseSchedule) -> Tensor:
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps; ``t`` scalar or per-item."""
    x0, epsilon = nc.as_tensor(x0), nc.as_tensor(epsilon)
    if x0.shape != epsilon.shape:
        raise ShapeError(f"q_sample: x0 {x0.shape} vs epsilon {epsilon.shape}")
    t = sched.check_t(t)
    ab = sched.alpha_bar[t]
    if ab.ndim:
        ab = ab.reshape((-1,) + (1,) * (x0.data.ndim - 1))
    return nc.add(nc.mul(x0, np.sqrt(ab)), nc.mul(epsilon, np.sqrt(1.0 - ab)))


def p_sample_step(net, x_t, t: int, sched: NoiseSchedule, noise=None, condition=None, adapted: bool = True) -> Tensor:
    """One ancestral step x_t -> x_{t-1} with sigma_t^2 = beta_t.

    Timesteps are 0-indexed, so the last step is ``t == 0`` and takes no
    noise; every other step requires it.
    """
    t = int(sched.check_t(t))
    x_t = nc.as_tensor(x_t)
    if t == 0 and noise is not None:
        raise ShapeError("p_sample_step: the final step (t=0) is deterministic; noise must be None")
    if t > 0:
        if noise is None:
            raise ShapeError(f"p_sample_step: noise required at t={t}")
        noise = np.asarray(noise.data if isinstance(noise, Tensor) else noise, dtype=np.float64)
        if noise.shape != x_t.shape:
            raise ShapeError(f"p_sample_step: noise {noise.shape} vs x_t {x_t.shape}")
    eps = _eps(net, x_t, t, condition, adapted)
    coef = sched.beta[t] / np.sqrt(1.0 - sched.alpha_bar[t])
    mean = nc.scale(nc.sub(x_t, nc.scale(eps, coef)), 1.0 / np.sqrt(sched.alpha[t]))
    if t == 0:
        return mean
    return nc.add(mean, noise * np.sqrt(sched.beta[t]))


class SampleNoise:
    """Per-sample noise streams derived from ``(seed, index)``.

    Sample ``i`` draws the same sequence regardless of batch composition, so
    base and adapted chains can be compared on identical noise. Each stream
    is drawn up front in blocks of ``block`` arrays.
    """

    def __init__(self, seed, indices: Sequence[int], shape: tuple[int, ...], block: int = 64):
        root = [int(v) for v in np.atleast_1d(seed)]
        self.rngs = [np.random.default_rng(root + [int(i)]) for i in indices]
        self.shape = tuple(shape)
        self.block = block
        self._buf = None
        self._pos = block

    def draw(self) -> np.ndarray:
        if self._pos == self.block:
            self._buf = np.stack([r.standard_normal((self.block,) + self.shape) for r in self.rngs], axis=1)
            self._pos = 0
        out = self._buf[self._pos]
        self._pos += 1
        return out


def merged_weights(net: NoisePredictor, adapted: bool = True) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per-layer ``(W_eff.T, b)`` with the low-rank delta folded into ``W``.

    The transposed weight is stored contiguous for faster row-batch products.
    """
    p, ad = net.params, net.adapters
    out = []
    for name in net.layer_names:
        w = p[f"{name}.weight"].data
        if adapted and ad is not None and name in ad.layers:
            w = w + (ad.scale / ad.rank) * (p[f"{name}.lora_B"].data @ p[f"{name}.lora_A"].data)
        out.append((np.ascontiguousarray(w.T), p[f"{name}.bias"].data))
    return out


def predict_noise_array(net: NoisePredictor, x_t: np.ndarray, t, condition=None,
                        weights=None, adapted: bool = True) -> np.ndarray:
    """Graph-free evaluation of ``predict_noise`` for sampling."""
    weights = weights if weights is not None else merged_weights(net, adapted)
    B = x_t.shape[0]
    t = np.broadcast_to(np.asarray(t), (B,))
    parts = [x_t.reshape(B, -1), timestep_embedding(t, net.temb_dim)]
    cond = _condition_rows(net, condition, B)
    if cond is not None:
        parts.append(cond.data)
    h = np.concatenate(parts, axis=1)
    for wt, b in weights[:-1]:
        h = np.tanh(h @ wt + b)
    wt, b = weights[-1]
    v = (h @ wt + b).reshape(x_t.shape)
    ab = net.alpha_bar[t].reshape(B, 1, 1)
    return x_t * np.sqrt(1.0 - ab) + v * np.sqrt(ab)


def run_chain(net, sched: NoiseSchedule, x, noise: SampleNoise, t_from: int, t_to: int,
              condition=None, adapted: bool = True) -> Tensor:
    """Apply reverse steps ``t_from, t_from-1, ..., t_to`` (inclusive).

    Outside gradient recording a predictor is evaluated with plain numpy.
    """
    fast = not nc.grad_enabled() and isinstance(net, NoisePredictor)
    if fast:
        weights = merged_weights(net, adapted)
        x = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
        for t in range(t_from, t_to - 1, -1):
            eps = predict_noise_array(net, x, t, condition, weights)
            coef = sched.beta[t] / np.sqrt(1.0 - sched.alpha_bar[t])
            x = (x - eps * coef) * (1.0 / np.sqrt(sched.alpha[t]))
            if t > 0:
                x = x + noise.draw() * np.sqrt(sched.beta[t])
        if not np.all(np.isfinite(x)):
            raise nc.NonFiniteError("run_chain: sampler produced non-finite values")
        return Tensor(x)
    x = nc.as_tensor(x)
    for t in range(t_from, t_to - 1, -1):
        z = noise.draw() if t > 0 else None
        x = p_sample_step(net, x, t, sched, z, condition, adapted)
    return x


def sample_loop(net, sched: NoiseSchedule, batch: int, seed: int, condition=None,
                record_final: bool = False, adapted: bool = True, image_shape=None,
                start_index: int = 0):
    """Draw ``batch`` samples by ancestral sampling from pure noise.

    Returns images clipped to ``[0, 1]``; with ``record_final`` also returns
    the unclipped final chain state.
    """
    if batch < 1:
        raise ConfigError("batch must be >= 1")
    shape = tuple(image_shape or net.image_shape)
    noise = SampleNoise(seed, range(start_index, start_index + batch), shape)
    x = noise.draw()
    with nc.no_grad():
        x = run_chain(net, sched, x, noise, sched.T - 1, 0, condition, adapted).data
    clipped = np.clip(x, 0.0, 1.0)
    if record_final:
        return clipped, x
    return clipped


@dataclass
class DiffusionBatch:
    x0: np.ndarray
    t: np.ndarray
    epsilon: np.ndarray
    condition: np.ndarray | None = None


def make_batch(images: np.ndarray, sched: NoiseSchedule, batch: int, rng: np.random.Generator,
               classes: np.ndarray | None = None, t_max: int | None = None) -> DiffusionBatch:
    idx = rng.integers(0, len(images), batch)
    t = rng.integers(0, sched.T if t_max is None else t_max, batch)
    eps = rng.standard_normal((batch,) + images.shape[1:])
    cond = None if classes is None else classes[idx]
    return DiffusionBatch(images[idx], t, eps, cond)


def denoising_mse(net, batch: DiffusionBatch, sched: NoiseSchedule, adapted: bool = True) -> Tensor:
    """Mean squared error between the true and predicted noise."""
    x_t = q_sample(batch.x0, batch.t, batch.epsilon, sched)
    pred = _eps(net, x_t, batch.t, batch.condition, adapted)
    return nc.mean(nc.square(nc.sub(pred, batch.epsilon)))


def gaussian_oracle(mean: float, std: float, sched: NoiseSchedule) -> EpsFn:
    """Closed-form optimal epsilon-predictor for data ``x0 ~ N(mean, std^2)``."""
    s2 = std * std

    def eps(x_t, t, condition=None):
        x = x_t.data if isinstance(x_t, Tensor) else np.asarray(x_t)
        ab = sched.alpha_bar[int(t)]
        return (x - np.sqrt(ab) * mean) * np.sqrt(1.0 - ab) / (s2 * ab + 1.0 - ab)

    return eps


def train_base(net: NoisePredictor, images: np.ndarray, sched: NoiseSchedule, steps: int,
               lr: float = 1e-3, batch: int = 64, seed: int = 0, classes: np.ndarray | None = None,
               log_every: int = 0, callback=None) -> list[float]:
    """Plain denoising-MSE pretraining of every non-frozen parameter."""
    rng = np.random.default_rng([seed, 7])
    losses = []
    for step in range(1, steps + 1):
        b = make_batch(images, sched, batch, rng, classes if net.num_classes else None)
        net.params.zero_grad()
        loss = denoising_mse(net, b, sched)
        loss.backward()
        nc.adam_step(net.params, lr=lr, step_index=step)
        losses.append(loss.item())
        if callback is not None and log_every and step % log_every == 0:
            callback(step, float(np.mean(losses[-log_every:])))
    return losses
