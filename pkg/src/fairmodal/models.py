"""Modality encoders, auxiliary classifiers, attention fusion, and head.

Parameters live in a :class:`ModelState` as plain float64 arrays grouped by
named parameter groups (``encoder:<m>``, ``classifier:<m>``, ``fusion``,
``head``).  Each training step binds the state onto a fresh tape via
:func:`bind`, runs the forward pass, and applies updates back onto the
arrays.  No dropout or normalisation layers: runs stay deterministic and
gradient checks stay tight.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Tape, Value
from .errors import ConfigError, InputError, ShapeError


@dataclass(frozen=True)
class ModelConfig:
    modality_dims: tuple[int, ...]
    hidden_dims: tuple[int, ...] = (32,)
    feature_dim: int = 16
    heads: int = 2
    classes: int = 2
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "modality_dims", tuple(int(d) for d in self.modality_dims))
        object.__setattr__(self, "hidden_dims", tuple(int(d) for d in self.hidden_dims))
        if len(self.modality_dims) < 1 or any(d < 1 for d in self.modality_dims):
            raise ConfigError("modality_dims must all be >= 1")
        if any(d < 1 for d in self.hidden_dims):
            raise ConfigError("hidden_dims must all be >= 1")
        if self.feature_dim < 1:
            raise ConfigError("feature_dim must be >= 1")
        if self.classes < 2:
            raise ConfigError("classes must be >= 2")
        if self.heads < 1 or self.feature_dim % self.heads != 0:
            raise ConfigError(
                f"feature_dim {self.feature_dim} must be divisible by heads {self.heads}"
            )

    @property
    def modalities(self) -> int:
        return len(self.modality_dims)


@dataclass
class ModelState:
    config: ModelConfig
    params: dict[str, np.ndarray]
    groups: dict[str, list[str]] = field(default_factory=dict)

    def group_names(self) -> list[str]:
        return list(self.groups)


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


def init_state(config: ModelConfig) -> ModelState:
    """Seeded uniform(-a, a) init with a = sqrt(6/(fan_in+fan_out)); zero biases."""
    rng = np.random.default_rng(config.seed)
    params: dict[str, np.ndarray] = {}
    groups: dict[str, list[str]] = {}

    def linear(group: str, name: str, fan_in: int, fan_out: int):
        params[f"{name}/W"] = _xavier(rng, fan_in, fan_out)
        params[f"{name}/b"] = np.zeros(fan_out)
        groups.setdefault(group, []).extend([f"{name}/W", f"{name}/b"])

    d = config.feature_dim
    for m, dim_m in enumerate(config.modality_dims):
        widths = (dim_m,) + config.hidden_dims + (d,)
        for k in range(len(widths) - 1):
            linear(f"encoder:{m}", f"encoder:{m}/l{k}", widths[k], widths[k + 1])
    for m in range(config.modalities):
        linear(f"classifier:{m}", f"classifier:{m}", d, config.classes)
    for proj in ("Wq", "Wk", "Wv", "Wo"):
        params[f"fusion/{proj}"] = _xavier(rng, d, d)
        groups.setdefault("fusion", []).append(f"fusion/{proj}")
    linear("head", "head", d, config.classes)
    return ModelState(config=config, params=params, groups=groups)


class BoundModel:
    """A model state registered as leaves on one tape."""

    def __init__(self, tape: Tape, state: ModelState):
        self.tape = tape
        self.config = state.config
        self.p = {pid: tape.leaf(arr, pid) for pid, arr in state.params.items()}

    def _linear(self, x: Value, name: str) -> Value:
        w = self.p[f"{name}/W"]
        b = self.p[f"{name}/b"]
        out = dc.matmul(x, w)
        bias = dc.broadcast_to(dc.reshape(b, (1, b.size)), out.shape)
        return dc.add(out, bias)

    def _as_value(self, x) -> Value:
        return x if isinstance(x, Value) else self.tape.const(x)

    def encode(self, m: int, inputs) -> Value:
        """Per-modality MLP: relu hidden layers, linear output of width d."""
        if not 0 <= m < self.config.modalities:
            raise InputError(f"unknown modality index {m}")
        x = self._as_value(inputs)
        if x.data.ndim != 2 or x.shape[1] != self.config.modality_dims[m]:
            raise ShapeError(
                f"modality {m} expects width {self.config.modality_dims[m]}, got {x.shape}"
            )
        n_layers = len(self.config.hidden_dims) + 1
        for k in range(n_layers):
            x = self._linear(x, f"encoder:{m}/l{k}")
            if k < n_layers - 1:
                x = dc.relu(x)
        return x

    def classify_modality(self, m: int, h: Value) -> Value:
        if not 0 <= m < self.config.modalities:
            raise InputError(f"unknown modality index {m}")
        return dc.softmax_rows(self._linear(h, f"classifier:{m}"))

    def fuse(self, features: list[Value], return_attention: bool = False):
        """Self-attention over the length-M token sequence, mean-pooled.

        Each sample's M modality features form the token sequence; heads
        use per-head width d/H, followed by an output projection and a
        mean over tokens.
        """
        cfg = self.config
        m_count = len(features)
        if m_count < 2:
            raise InputError(f"fuse needs >= 2 modalities, got {m_count}")
        n = features[0].shape[0]
        for h in features:
            if h.shape != (n, cfg.feature_dim):
                raise InputError(
                    f"feature blocks disagree: {h.shape} vs {(n, cfg.feature_dim)}"
                )
        d, heads = cfg.feature_dim, cfg.heads
        dh = d // heads

        flat = dc.reshape(dc.concat(features, axis=1), (n * m_count, d))

        def heads_of(proj: str) -> Value:
            x = dc.matmul(flat, self.p[f"fusion/{proj}"])
            x = dc.reshape(x, (n, m_count, heads, dh))
            x = dc.transpose(x, (0, 2, 1, 3))
            return dc.reshape(x, (n * heads, m_count, dh))

        q, k, v = heads_of("Wq"), heads_of("Wk"), heads_of("Wv")
        logits = dc.scale(dc.bmm(q, dc.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(dh))
        attn2d = dc.softmax_rows(dc.reshape(logits, (n * heads * m_count, m_count)))
        attn = dc.reshape(attn2d, (n * heads, m_count, m_count))
        mixed = dc.bmm(attn, v)
        mixed = dc.reshape(mixed, (n, heads, m_count, dh))
        mixed = dc.transpose(mixed, (0, 2, 1, 3))
        out = dc.matmul(dc.reshape(mixed, (n * m_count, d)), self.p["fusion/Wo"])
        z = dc.mean_axis(dc.reshape(out, (n, m_count, d)), 1)
        if return_attention:
            return z, dc.reshape(attn, (n, heads, m_count, m_count))
        return z

    def predict(self, z: Value) -> Value:
        return dc.softmax_rows(self._linear(z, "head"))


@dataclass
class Forward:
    """All the per-batch tensors the trainer needs from one forward pass."""

    features: list[Value]
    modality_probs: list[Value]
    fused: Value
    probs: Value


def bind(tape: Tape, state: ModelState) -> BoundModel:
    return BoundModel(tape, state)


def forward(tape: Tape, state: ModelState, inputs: list[np.ndarray]) -> Forward:
    """encode -> classify per modality, fuse -> predict."""
    bound = bind(tape, state)
    if len(inputs) != state.config.modalities:
        raise InputError(
            f"expected {state.config.modalities} modality blocks, got {len(inputs)}"
        )
    hs = [bound.encode(m, x) for m, x in enumerate(inputs)]
    cls = [bound.classify_modality(m, h) for m, h in enumerate(hs)]
    z = bound.fuse(hs)
    return Forward(features=hs, modality_probs=cls, fused=z, probs=bound.predict(z))


# ---------------------------------------------------------------------------
# checkpoint format: a .npz archive of flat key -> float64 array, plus the
# model configuration under reserved "~config/" keys.  Documented in README.

_CONFIG_KEYS = ("modality_dims", "hidden_dims", "feature_dim", "heads", "classes", "seed")


def save_checkpoint(state: ModelState, path) -> None:
    payload: dict[str, np.ndarray] = dict(state.params)
    cfg = state.config
    for key in _CONFIG_KEYS:
        payload[f"~config/{key}"] = np.atleast_1d(np.asarray(getattr(cfg, key), dtype=np.int64))
    np.savez(path, **payload)


def load_checkpoint(path) -> ModelState:
    with np.load(path) as archive:
        raw = {k: archive[k] for k in archive.files}
    cfg_vals = {}
    params = {}
    for key, arr in raw.items():
        if key.startswith("~config/"):
            name = key.split("/", 1)[1]
            vals = tuple(int(v) for v in arr)
            cfg_vals[name] = vals if name.endswith("dims") else vals[0]
        else:
            params[key] = arr.astype(np.float64)
    config = ModelConfig(**cfg_vals)
    rebuilt = init_state(config)
    missing = set(rebuilt.params) - set(params)
    if missing:
        raise InputError(f"checkpoint missing parameters: {sorted(missing)[:3]}...")
    for pid, arr in rebuilt.params.items():
        if params[pid].shape != arr.shape:
            raise InputError(f"checkpoint parameter {pid} has shape {params[pid].shape}")
    rebuilt.params = {pid: params[pid] for pid in rebuilt.params}
    return rebuilt
