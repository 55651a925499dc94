"""Differentiable no-reference quality scorers.

Two variants share one ``Scorer`` container:

* ``two-stream``: pixel and Sobel-magnitude streams, each a per-pixel MLP over
  3x3 neighbourhoods mean-pooled to a feature vector, fused by a small MLP
  and squashed with a sigmoid.
* ``conditional``: a patch-token encoder whose image embedding is compared
  with a class embedding (semantic term) and whose tokens are compared with
  their pooled mean (structural term); both feed a sigmoid of a learned
  linear combination.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import numcore as nc
from .data import IQADataset
from .errors import ConfigError
from .numcore import ParamStore, Tensor

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T.copy()
_UNFOLD3 = np.eye(9).reshape(9, 3, 3)
# norm floor for token agreement; a blank patch can map to an exact zero token
_TOKEN_EPS = 1e-12


@lru_cache(maxsize=8)
def _sobel_operator(h: int, w: int) -> np.ndarray:
    """``[2*h*w, h*w]`` matrix giving (gx, gy) with edge-replicated borders."""
    op = np.zeros((2, h, w, h, w))
    for k, kern in enumerate((SOBEL_X, SOBEL_Y)):
        for i in range(h):
            for j in range(w):
                for di in (-1, 0, 1):
                    for dj in (-1, 0, 1):
                        op[k, i, j, min(max(i + di, 0), h - 1), min(max(j + dj, 0), w - 1)] += kern[di + 1, dj + 1]
    op = op.reshape(2 * h * w, h * w)
    op.flags.writeable = False
    return op


def gradient_map(x) -> Tensor:
    """Per-pixel Sobel magnitude ``sqrt(gx^2 + gy^2 + 1e-12)``, same shape as ``x``.

    Borders replicate the edge pixel, so a constant image maps to zero.
    """
    x = nc.as_tensor(x)
    squeeze = x.data.ndim == 2
    if squeeze:
        x = nc.reshape(x, (1,) + x.shape)
    B, h, w = x.shape
    g = nc.affine(nc.reshape(x, (B, h * w)), _sobel_operator(h, w))
    g = nc.l2norm(nc.reshape(g, (B, 2, h, w)), axis=1, eps=1e-12)
    return nc.reshape(g, (h, w)) if squeeze else g


@dataclass
class ScorerConfig:
    variant: str = "two-stream"
    image_size: int = 16
    # two-stream
    stream_width: int = 16
    fuse_width: int = 16
    # conditional
    grid: int = 4
    token_width: int = 24
    embed_width: int = 16
    num_classes: int = 4
    layer_weights: tuple[float, ...] = (0.5, 0.5)
    combine_init: tuple[float, float, float] = (1.0, 1.0, 0.0)

    def __post_init__(self):
        if self.variant not in ("two-stream", "conditional"):
            raise ConfigError(f"unknown scorer variant {self.variant!r}")
        w = np.asarray(self.layer_weights, dtype=float)
        if len(w) != 2 or np.any(w < 0) or w.sum() <= 0:
            raise ConfigError(f"layer_weights must be two non-negative values, got {self.layer_weights}")
        self.layer_weights = tuple(float(v) for v in w / w.sum())
        if self.image_size % self.grid:
            raise ConfigError(f"image size {self.image_size} not divisible by patch grid {self.grid}")


@dataclass
class Scorer:
    config: ScorerConfig
    params: ParamStore = field(default_factory=ParamStore)

    @property
    def variant(self) -> str:
        return self.config.variant

    def freeze(self) -> None:
        self.params.freeze()

    def score(self, images, conditions=None) -> Tensor:
        if self.variant == "two-stream":
            if conditions is not None:
                raise ConfigError("two-stream scorer takes no condition")
            return two_stream_score(self, images)
        if conditions is None:
            raise ConfigError("conditional scorer needs a condition")
        return conditional_score(self, images, conditions)

    def score_numpy(self, images, conditions=None, batch: int = 256) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        out = []
        with nc.no_grad():
            for i in range(0, len(images), batch):
                c = None if conditions is None else np.asarray(conditions)[i:i + batch]
                out.append(self.score(images[i:i + batch], c).data)
        return np.concatenate(out) if out else np.empty(0)


def build_scorer(config: ScorerConfig, seed: int = 0) -> Scorer:
    rng = np.random.default_rng([seed, 13])
    p = ParamStore()

    def dense(name, fan_in, fan_out, gain=1.0, bias_std=0.0):
        p.add(f"{name}.weight", rng.normal(0.0, gain / np.sqrt(fan_in), (fan_out, fan_in)))
        p.add(f"{name}.bias", rng.normal(0.0, bias_std, fan_out) if bias_std else np.zeros(fan_out))

    c = config
    if c.variant == "two-stream":
        for stream in ("rgb", "grad"):
            dense(f"{stream}.l0", 9, c.stream_width)
            dense(f"{stream}.l1", c.stream_width, c.stream_width)
        dense("fuse.l0", 2 * c.stream_width, c.fuse_width)
        dense("fuse.l1", c.fuse_width, 1, gain=0.1)
    else:
        patch = (c.image_size // c.grid) ** 2
        dense("enc.l0", patch, c.token_width, bias_std=0.5)
        dense("enc.l1", c.token_width, c.token_width)
        dense("enc.proj", c.token_width, c.embed_width)
        p.add("text.embed", rng.normal(0.0, 1.0, (c.num_classes, c.embed_width)))
        p.add("combine", np.array(c.combine_init, dtype=float))
    return Scorer(config, p)


def _dense(p: ParamStore, name: str, x) -> Tensor:
    return nc.affine(x, p[f"{name}.weight"], p[f"{name}.bias"])


def _stream(p: ParamStore, name: str, img) -> Tensor:
    patches = nc.conv2d(img, _UNFOLD3)  # [B, H, W, 9]
    h = nc.tanh(_dense(p, f"{name}.l0", patches))
    h = nc.tanh(_dense(p, f"{name}.l1", h))
    return nc.mean(h, axis=(1, 2))


def two_stream_features(s: Scorer, x) -> Tensor:
    """Penultimate (fusion hidden) features, ``[B, fuse_width]``."""
    x = nc.as_tensor(x)
    if x.data.ndim == 2:
        x = nc.reshape(x, (1,) + x.shape)
    p = s.params
    feats = nc.concat([_stream(p, "rgb", x), _stream(p, "grad", gradient_map(x))], axis=1)
    return nc.tanh(_dense(p, "fuse.l0", feats))


def two_stream_score(s: Scorer, x) -> Tensor:
    """sigmoid(F_fuse([phi_rgb(x), phi_grad(grad x)])), one score per image."""
    if s.variant != "two-stream":
        raise ConfigError(f"two_stream_score called on a {s.variant} scorer")
    h = two_stream_features(s, x)
    logit = _dense(s.params, "fuse.l1", h)
    return nc.sigmoid(nc.reshape(logit, (logit.shape[0],)))


# --------------------------------------------------------------------------
# conditional variant


def patch_tokens(s: Scorer, x) -> list[Tensor]:
    """Token maps of the last two encoder layers, each ``[B, K, width]``."""
    x = nc.as_tensor(x)
    if x.data.ndim == 2:
        x = nc.reshape(x, (1,) + x.shape)
    c = s.config
    B, g, ps = x.shape[0], c.grid, c.image_size // c.grid
    t = nc.reshape(x, (B, g, ps, g, ps))
    t = nc.transpose(t, (0, 1, 3, 2, 4))
    t = nc.reshape(t, (B, g * g, ps * ps))
    l0 = nc.tanh(_dense(s.params, "enc.l0", t))
    l1 = nc.tanh(_dense(s.params, "enc.l1", l0))
    return [l0, l1]


def image_embedding(s: Scorer, tokens: list[Tensor]) -> Tensor:
    return _dense(s.params, "enc.proj", nc.mean(tokens[-1], axis=1))


def text_embedding(s: Scorer, conditions) -> Tensor:
    ids = np.atleast_1d(np.asarray(conditions, dtype=int))
    if np.any(ids < 0) or np.any(ids >= s.config.num_classes):
        raise ConfigError(f"condition ids {ids} outside [0, {s.config.num_classes})")
    onehot = np.eye(s.config.num_classes)[ids]
    return nc.affine(onehot, nc.transpose(s.params["text.embed"], (1, 0)))


def semantic_from_embeddings(img_emb, text_emb) -> Tensor:
    return nc.cosine(img_emb, text_emb, axis=-1)


def structural_from_tokens(tokens: list[Tensor], weights) -> Tensor:
    """sum_l alpha_l * mean_k cos(p_k, g) with g the token mean of layer l."""
    total = None
    for tok, a in zip(tokens, weights):
        g = nc.mean(tok, axis=1, keepdims=True)
        agree = nc.mean(nc.cosine(tok, g, axis=-1, eps=_TOKEN_EPS), axis=1)
        term = nc.scale(agree, a)
        total = term if total is None else nc.add(total, term)
    return total


def semantic_score(s: Scorer, x, c) -> Tensor:
    if s.variant != "conditional":
        raise ConfigError("semantic_score needs the conditional scorer")
    tokens = patch_tokens(s, x)
    return semantic_from_embeddings(image_embedding(s, tokens), text_embedding(s, c))


def structural_score(s: Scorer, x) -> Tensor:
    if s.variant != "conditional":
        raise ConfigError("structural_score needs the conditional scorer")
    return structural_from_tokens(patch_tokens(s, x), s.config.layer_weights)


def combine_scores(beta, s_sem, s_str) -> Tensor:
    """sigmoid(beta1 * S_sem + beta2 * S_str + beta3)."""
    beta = nc.as_tensor(beta)
    terms = nc.stack([s_sem, s_str, np.ones(np.shape(nc.as_tensor(s_sem).data))], axis=-1)
    return nc.sigmoid(nc.sum(nc.mul(terms, beta), axis=-1))


def conditional_score(s: Scorer, x, c) -> Tensor:
    if s.variant != "conditional":
        raise ConfigError("conditional_score needs the conditional scorer")
    tokens = patch_tokens(s, x)
    s_sem = semantic_from_embeddings(image_embedding(s, tokens), text_embedding(s, c))
    s_str = structural_from_tokens(tokens, s.config.layer_weights)
    return combine_scores(s.params["combine"], s_sem, s_str)


def conditional_features(s: Scorer, x) -> Tensor:
    return image_embedding(s, patch_tokens(s, x))


def features(s: Scorer, images) -> np.ndarray:
    """Penultimate features used for Frechet comparisons."""
    with nc.no_grad():
        if s.variant == "two-stream":
            return two_stream_features(s, images).data
        return conditional_features(s, images).data


# --------------------------------------------------------------------------
# Stage-1 training


def train_evaluator(variant: str, dataset: IQADataset, epochs: int = 30, lr: float = 3e-3,
                    seed: int = 0, batch_size: int = 64, config: ScorerConfig | None = None,
                    callback=None) -> Scorer:
    """Fit a scorer to ``dataset.labels`` by mean-squared error, then freeze it."""
    if len(dataset) == 0:
        raise ConfigError("train_evaluator: empty dataset")
    if np.any(dataset.labels < 0) or np.any(dataset.labels > 1):
        raise ConfigError("train_evaluator: labels must lie in [0, 1]")
    cfg = config or ScorerConfig(variant=variant, image_size=dataset.images.shape[-1])
    if cfg.variant != variant:
        raise ConfigError(f"config variant {cfg.variant!r} != {variant!r}")
    if variant == "conditional" and dataset.conditions is None:
        raise ConfigError("conditional scorer needs a conditional dataset")
    scorer = build_scorer(cfg, seed)
    rng = np.random.default_rng([seed, 17])
    n = len(dataset)
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(n)
        losses = []
        for i in range(0, n, batch_size):
            idx = order[i:i + batch_size]
            cond = None if variant == "two-stream" else dataset.conditions[idx]
            scorer.params.zero_grad()
            pred = scorer.score(dataset.images[idx], cond)
            loss = nc.mean(nc.square(nc.sub(pred, dataset.labels[idx])))
            loss.backward()
            step += 1
            nc.adam_step(scorer.params, lr=lr, step_index=step)
            losses.append(loss.item())
        if callback is not None:
            callback(epoch, float(np.mean(losses)))
    scorer.freeze()
    return scorer
