"""Procedural toy images, graded degradations and labelled corpora."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError

SHAPE_CLASSES = ("circle", "square", "cross", "stripes")
DEGRADATIONS = ("blur", "noise", "contrast")
_SUB = (np.arange(4) + 0.5) / 4.0  # symmetric supersampling offsets


@dataclass(frozen=True)
class DegradationSpec:
    kind: str
    severity: float

    def __post_init__(self):
        if self.kind not in DEGRADATIONS:
            raise ConfigError(f"unknown degradation {self.kind!r}")
        if not 0.0 <= self.severity <= 1.0:
            raise ConfigError(f"severity must lie in [0, 1], got {self.severity}")


def _jitter(size: int, seed: int) -> tuple[float, float, float]:
    rng = np.random.default_rng([int(seed), 3])
    span = max(1, size // 8)
    cy = size / 2 + rng.integers(-span, span + 1)
    cx = size / 2 + rng.integers(-span, span + 1)
    return float(cy), float(cx), float(rng.uniform(0.8, 1.2))


def render_clean(class_id: int, size: int = 16, seed: int = 0) -> np.ndarray:
    """Antialiased white shape on black; centre jitter is whole pixels.

    The centre sits on a pixel boundary, so rows ``cy-1-d`` and ``cy+d``
    mirror each other exactly.
    """
    if size < 8:
        raise ConfigError(f"size must be >= 8, got {size}")
    if not 0 <= class_id < len(SHAPE_CLASSES):
        raise ConfigError(f"class id {class_id} outside [0, {len(SHAPE_CLASSES)})")
    cy, cx, s = _jitter(size, seed)
    coords = (np.arange(size)[:, None] + _SUB[None, :]).reshape(-1)
    dy = (coords - cy)[:, None]
    dx = (coords - cx)[None, :]
    name = SHAPE_CLASSES[class_id]
    if name == "circle":
        r = 0.25 * size * s
        mask = dy * dy + dx * dx <= r * r
    elif name == "square":
        h = 0.22 * size * s
        mask = (np.abs(dy) <= h) & (np.abs(dx) <= h)
    elif name == "cross":
        arm, half = 0.3 * size * s, 0.08 * size * s
        mask = ((np.abs(dy) <= half) & (np.abs(dx) <= arm)) | ((np.abs(dx) <= half) & (np.abs(dy) <= arm))
    else:
        h = 0.28 * size * s
        period = size / 8.0
        band = np.floor(np.abs(dy) / period + 0.5) % 2 == 0
        mask = (np.abs(dy) <= h) & (np.abs(dx) <= h) & band
    n = len(_SUB)
    return mask.astype(np.float64).reshape(size, n, size, n).mean(axis=(1, 3))


def box_blur(x: np.ndarray, passes: int) -> np.ndarray:
    """``passes`` repetitions of a 3x3 mean filter with edge replication."""
    out = np.asarray(x, dtype=np.float64)
    H, W = out.shape
    for _ in range(passes):
        p = np.pad(out, 1, mode="edge")
        out = sum(p[i:i + H, j:j + W] for i in range(3) for j in range(3)) / 9.0
    return out


def apply_degradation(x: np.ndarray, spec: DegradationSpec, seed: int = 0) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if spec.severity == 0.0:
        return x.copy()
    if spec.kind == "blur":
        out = box_blur(x, int(np.floor(spec.severity * 4 + 0.5)))
    elif spec.kind == "noise":
        rng = np.random.default_rng([int(seed), 5])
        out = x + spec.severity * 0.5 * rng.standard_normal(x.shape)
    else:
        out = x + spec.severity * (0.5 - x)
    return np.clip(out, 0.0, 1.0)


@dataclass
class IQADataset:
    images: np.ndarray  # [n, H, W]
    labels: np.ndarray
    severity: np.ndarray
    kinds: list[str]
    classes: np.ndarray  # true shape class of each image
    conditions: np.ndarray | None = None  # condition presented to the scorer
    matched: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "IQADataset":
        idx = np.asarray(idx, dtype=int)
        return IQADataset(
            self.images[idx], self.labels[idx], self.severity[idx], [self.kinds[i] for i in idx],
            self.classes[idx],
            None if self.conditions is None else self.conditions[idx],
            None if self.matched is None else self.matched[idx],
        )


def build_iqa_dataset(n: int, conditional: bool = False, seed: int = 0, size: int = 16) -> IQADataset:
    """Degraded renders labelled ``1 - severity``.

    Conditional items pair each image with a class token; half the tokens
    are deliberately wrong and those items are labelled 0.
    """
    if n < 1:
        raise ConfigError("n must be >= 1")
    images = np.empty((n, size, size))
    labels, sev, drawn, classes = np.empty(n), np.empty(n), [], np.empty(n, dtype=int)
    conds = np.empty(n, dtype=int) if conditional else None
    matched = np.empty(n, dtype=bool) if conditional else None
    k = len(SHAPE_CLASSES)
    for i in range(n):
        rng = np.random.default_rng([int(seed), i, 1])
        c = int(rng.integers(k))
        s = float(rng.uniform(0.0, 1.0))
        kind = DEGRADATIONS[int(rng.integers(len(DEGRADATIONS)))]
        img_seed = int(rng.integers(2**31))
        images[i] = apply_degradation(render_clean(c, size, img_seed), DegradationSpec(kind, s), img_seed)
        classes[i], sev[i] = c, s
        drawn.append(kind)
        label = 1.0 - s
        if conditional:
            ok = bool(rng.random() < 0.5)
            matched[i] = ok
            conds[i] = c if ok else (c + 1 + int(rng.integers(k - 1))) % k
            label *= float(ok)
        labels[i] = label
    return IQADataset(images, labels, sev, drawn, classes, conds, matched)


@dataclass
class DiffusionCorpus:
    images: np.ndarray
    classes: np.ndarray


def build_diffusion_dataset(n: int, size: int = 16, conditional: bool = False, seed: int = 0) -> DiffusionCorpus:
    """Clean renders with classes assigned round-robin."""
    if n < 1:
        raise ConfigError("n must be >= 1")
    classes = np.arange(n) % len(SHAPE_CLASSES)
    images = np.stack([render_clean(int(c), size, int(np.random.default_rng([int(seed), i, 2]).integers(2**31)))
                       for i, c in enumerate(classes)])
    return DiffusionCorpus(images, classes)


def write_pgm(path, image: np.ndarray) -> None:
    """Binary P5, maxval 255; values are clipped to [0, 1] first."""
    img = np.asarray(image)
    q = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = q.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(q.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos].decode("ascii"))
    if tokens[0] != "P5":
        raise ValueError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval > 255:
        raise ValueError(f"{path}: 16-bit PGM not supported")
    body = raw[pos + 1:pos + 1 + w * h]
    if len(body) != w * h:
        raise ValueError(f"{path}: truncated pixel data")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).astype(np.float64) / maxval


def export_corpus(directory, dataset: IQADataset) -> Path:
    """Write each image as PGM plus ``manifest.csv``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    manifest = d / "manifest.csv"
    with open(manifest, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["filename", "class", "severity", "label"])
        for i in range(len(dataset)):
            name = f"img_{i:05d}.pgm"
            write_pgm(d / name, dataset.images[i])
            w.writerow([name, SHAPE_CLASSES[int(dataset.classes[i])], f"{dataset.severity[i]:.6f}",
                        f"{dataset.labels[i]:.6f}"])
    return manifest
