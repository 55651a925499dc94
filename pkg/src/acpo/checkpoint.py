"""Self-describing checkpoints for base models, adapters and scorers.

File layout::

    ACPO-CKPT <schema_version> <body_bytes> <sha256 of body>\\n
    <JSON body>

The body holds ``kind``, an ``architecture`` descriptor, ``provenance`` and
named ``sections`` of arrays, each stored as base64 little-endian float64
with its shape. The header makes a short read (truncation) distinguishable
from damaged content.
"""

from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .adapters import attach_adapters
from .diffusion import NoisePredictor, NoiseSchedule
from .errors import (ArchitectureMismatchError, CheckpointCorruptError, CheckpointKindError,
                     CheckpointTruncatedError, CheckpointVersionError, ConfigError)
from .iqa import Scorer, ScorerConfig
from .numcore import ParamStore

MAGIC = "ACPO-CKPT"
SCHEMA_VERSION = 1
KINDS = ("base-model", "adapters", "scorer")


def _encode(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _decode(entry: dict, where: str) -> np.ndarray:
    try:
        shape = tuple(int(s) for s in entry["shape"])
        raw = base64.b64decode(entry["data"], validate=True)
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointCorruptError(f"{where}: malformed array entry ({e})") from None
    if len(raw) != 8 * int(np.prod(shape, dtype=np.int64)):
        raise CheckpointCorruptError(f"{where}: {len(raw)} bytes for shape {shape}")
    return np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)


def write_checkpoint(path, kind: str, architecture: dict, sections: dict[str, dict[str, np.ndarray]],
                     provenance: dict | None = None) -> Path:
    if kind not in KINDS:
        raise ConfigError(f"unknown checkpoint kind {kind!r}")
    doc = {
        "schema_version": SCHEMA_VERSION,
        "kind": kind,
        "architecture": architecture,
        "provenance": provenance or {},
        "sections": {s: {n: _encode(a) for n, a in arrays.items()} for s, arrays in sections.items()},
    }
    body = json.dumps(doc, sort_keys=True).encode("utf-8")
    header = f"{MAGIC} {SCHEMA_VERSION} {len(body)} {hashlib.sha256(body).hexdigest()}\n".encode("ascii")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(header + body)
    tmp.replace(path)
    return path


def read_checkpoint(path, expected_kind: str | None = None) -> dict:
    """Parse and verify a checkpoint; arrays come back as ``{section: {name: ndarray}}``."""
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        if MAGIC.encode().startswith(raw[:len(MAGIC)]):
            raise CheckpointTruncatedError(f"{path}: file ends inside the header")
        raise CheckpointCorruptError(f"{path}: no checkpoint header")
    parts = raw[:nl].decode("ascii", errors="replace").split(" ")
    if len(parts) != 4 or parts[0] != MAGIC:
        raise CheckpointCorruptError(f"{path}: bad header {raw[:nl][:60]!r}")
    try:
        version, length = int(parts[1]), int(parts[2])
    except ValueError:
        raise CheckpointCorruptError(f"{path}: bad header fields {parts[1:3]}") from None
    if version != SCHEMA_VERSION:
        raise CheckpointVersionError(f"{path}: schema version {version}, expected {SCHEMA_VERSION}")
    body = raw[nl + 1:]
    if len(body) < length:
        raise CheckpointTruncatedError(f"{path}: body has {len(body)} of {length} bytes")
    if len(body) > length:
        raise CheckpointCorruptError(f"{path}: {len(body) - length} trailing bytes after body")
    if hashlib.sha256(body).hexdigest() != parts[3]:
        raise CheckpointCorruptError(f"{path}: body checksum mismatch")
    doc = json.loads(body.decode("utf-8"))
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise CheckpointVersionError(f"{path}: body schema version {doc.get('schema_version')}")
    if expected_kind is not None and doc.get("kind") != expected_kind:
        raise CheckpointKindError(f"{path}: holds {doc.get('kind')!r}, expected {expected_kind!r}")
    doc["arrays"] = {s: {n: _decode(e, f"{path}:{s}/{n}") for n, e in entries.items()}
                     for s, entries in doc.pop("sections").items()}
    return doc


def _descriptor_diff(want: dict, got: dict) -> str:
    keys = sorted(set(want) | set(got))
    return ", ".join(f"{k}: {got.get(k)!r} != {want.get(k)!r}" for k in keys if want.get(k) != got.get(k))


# --------------------------------------------------------------------------
# typed front ends


def save_base(net: NoisePredictor, sched: NoiseSchedule, path, provenance: dict | None = None) -> Path:
    params = {n: t.data for n, t in net.params.items() if ".lora_" not in n}
    return write_checkpoint(path, "base-model", net.descriptor(),
                            {"params": params, "schedule": {"beta": sched.beta}}, provenance)


def load_base(path) -> tuple[NoisePredictor, NoiseSchedule]:
    doc = read_checkpoint(path, "base-model")
    arch, arrays = doc["architecture"], doc["arrays"]
    beta = arrays["schedule"]["beta"]
    alpha = 1.0 - beta
    sched = NoiseSchedule(len(beta), beta, alpha, np.cumprod(alpha))
    store = ParamStore()
    for name, a in arrays["params"].items():
        store.add(name, a)
    net = NoisePredictor(store, tuple(arch["image_shape"]), tuple(arch["hidden"]), sched.alpha_bar.copy(),
                         arch["temb_dim"], arch["num_classes"], arch["cond_dim"])
    if net.descriptor() != arch:
        raise ArchitectureMismatchError(f"{path}: {_descriptor_diff(arch, net.descriptor())}")
    return net, sched


def save_adapters(net: NoisePredictor, path, provenance: dict | None = None) -> Path:
    ad = net.adapters
    if ad is None:
        raise ConfigError("network has no adapters to save")
    arch = {"base": net.descriptor(), "rank": ad.rank, "scale": ad.scale, "layers": list(ad.layers)}
    prov = {"base_checksum": net.params.checksum(frozen_only=True), **(provenance or {})}
    arrays = {n: net.params[n].data for n in ad.param_names()}
    return write_checkpoint(path, "adapters", arch, {"adapters": arrays}, prov)


def load_adapters(path, net: NoisePredictor, seed: int = 0):
    """Attach the saved adapters to ``net`` (which must match the saved base)."""
    doc = read_checkpoint(path, "adapters")
    arch = doc["architecture"]
    if arch["base"] != net.descriptor():
        raise ArchitectureMismatchError(f"{path}: adapters built for a different base "
                                        f"({_descriptor_diff(arch['base'], net.descriptor())})")
    if net.adapters is None:
        attach_adapters(net, arch["rank"], arch["scale"], seed)
    elif (net.adapters.rank, net.adapters.scale) != (arch["rank"], arch["scale"]):
        raise ArchitectureMismatchError(f"{path}: rank/scale {arch['rank']}/{arch['scale']} vs attached "
                                        f"{net.adapters.rank}/{net.adapters.scale}")
    want = doc["provenance"].get("base_checksum")
    if want is not None and want != net.params.checksum(frozen_only=True):
        raise ArchitectureMismatchError(f"{path}: adapters were trained against different base weights")
    for name, a in doc["arrays"]["adapters"].items():
        if name not in net.params or net.params[name].shape != a.shape:
            raise ArchitectureMismatchError(f"{path}: adapter tensor {name} {a.shape} does not fit")
        net.params[name].data = a.copy()
    return net.adapters


def save_scorer(scorer: Scorer, path, provenance: dict | None = None) -> Path:
    arch = asdict(scorer.config)
    arch["layer_weights"] = list(arch["layer_weights"])
    arch["combine_init"] = list(arch["combine_init"])
    return write_checkpoint(path, "scorer", arch, {"params": {n: t.data for n, t in scorer.params.items()}},
                            provenance)


def load_scorer(path) -> Scorer:
    """Load a scorer; every parameter comes back frozen."""
    doc = read_checkpoint(path, "scorer")
    arch = dict(doc["architecture"])
    arch["layer_weights"] = tuple(arch["layer_weights"])
    arch["combine_init"] = tuple(arch["combine_init"])
    try:
        config = ScorerConfig(**arch)
    except TypeError as e:
        raise ArchitectureMismatchError(f"{path}: unreadable scorer descriptor ({e})") from None
    store = ParamStore()
    for name, a in doc["arrays"]["params"].items():
        store.add(name, a, frozen=True)
    return Scorer(config, store)


def checkpoint_load(path, expected_kind: str, net: NoisePredictor | None = None):
    """Dispatch on ``expected_kind``; adapters need the ``net`` they attach to."""
    if expected_kind == "base-model":
        return load_base(path)
    if expected_kind == "scorer":
        return load_scorer(path)
    if expected_kind == "adapters":
        if net is None:
            raise ConfigError("loading adapters needs the base network")
        return load_adapters(path, net)
    raise ConfigError(f"unknown checkpoint kind {expected_kind!r}")
