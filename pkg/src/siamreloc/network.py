"""Shared-weight twin network with global and relative pose heads.

Each twin is ``encoder -> GPRU``; the encoder maps a scene descriptor to a
feature ``f`` and the GPRU regresses an absolute position (3) and a raw
quaternion (4). The RPRU reads ``concat(f, f_ref)`` and regresses the
relative pose of the pair. Both twins use the same parameter dict, so weight
sharing is structural rather than enforced by copying.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diff as D
from .diff import Tensor
from .errors import MissingHead, ShapeMismatch
from .pose import Pose, canonicalize_hemisphere, quat_normalize


CHECKPOINT_FORMAT = "siamreloc-checkpoint/1"


@dataclass
class EncoderConfig:
    input_dim: int = 32
    hidden_dims: list[int] = field(default_factory=lambda: [128, 128])
    feature_dim: int = 64
    dropout_rate: float = 0.2
    head_dim: int = 128  # width of the first GPRU/RPRU layer; 1024 in the full-size model
    use_rpru: bool = True
    # the backbone being replaced has no dropout, so by default only the heads use it
    encoder_dropout: bool = False

    def __post_init__(self):
        if self.input_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise ValueError("layer widths must be positive")
        if self.feature_dim < 8:
            raise ValueError("feature_dim must be at least 8")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


class SiameseNet:
    def __init__(self, config: EncoderConfig | None = None, seed: int = 0):
        self.config = config or EncoderConfig()
        self.params: dict[str, Tensor] = {}
        self.extra: dict = {}
        rng = np.random.default_rng(seed)
        c = self.config
        widths = [c.input_dim, *c.hidden_dims, c.feature_dim]
        for i, (fi, fo) in enumerate(zip(widths[:-1], widths[1:])):
            self._dense(f"enc{i}", fi, fo, rng)
        self._dense("gpru.fc1", c.feature_dim, c.head_dim, rng)
        self._dense("gpru.head_x", c.head_dim, 3, rng)
        self._dense("gpru.head_q", c.head_dim, 4, rng)
        if c.use_rpru:
            self._dense("rpru.fc1", 2 * c.feature_dim, c.head_dim, rng)
            self._dense("rpru.head_x", c.head_dim, 3, rng)
            self._dense("rpru.head_q", c.head_dim, 4, rng)

    def _dense(self, name, fan_in, fan_out, rng):
        self.params[f"{name}.W"] = Tensor(_xavier(rng, fan_in, fan_out), requires_grad=True, name=f"{name}.W")
        self.params[f"{name}.b"] = Tensor(np.zeros(fan_out), requires_grad=True, name=f"{name}.b")

    @property
    def has_rpru(self) -> bool:
        return "rpru.fc1.W" in self.params

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    # ------------------------------------------------------------ layers

    def _linear(self, x: Tensor, name: str) -> Tensor:
        W, b = self.params[f"{name}.W"], self.params[f"{name}.b"]
        if x.shape[1] != W.shape[0]:
            raise ShapeMismatch(f"{name}: expected width {W.shape[0]}, got {x.shape[1]}")
        return D.matmul(x, W) + D.expand(b, (x.shape[0], W.shape[1]))

    def _dropout(self, x: Tensor, rng: np.random.Generator | None, groups: int = 1) -> Tensor:
        # with groups=k the rows form k equal blocks that all get the same mask
        rate = self.config.dropout_rate
        if rng is None or rate == 0.0:
            return x
        n, width = x.shape
        if n % groups:
            raise ShapeMismatch(f"{n} rows cannot be split into {groups} mask groups")
        keep = (rng.random((n // groups, width)) >= rate) / (1.0 - rate)
        return x * Tensor(np.tile(keep, (groups, 1)))

    @staticmethod
    def _batch(x) -> tuple[Tensor, bool]:
        t = D.as_tensor(x)
        if t.data.ndim == 1:
            return D.reshape(t, (1, -1)), True
        return t, False

    # ------------------------------------------------------------ forward

    def encode(self, descriptor, rng: np.random.Generator | None = None) -> Tensor:
        """Feature vector(s) for one descriptor or an ``(N, input_dim)`` batch.

        Passing ``rng`` selects train mode; dropout masks are drawn from it when
        ``config.encoder_dropout`` is set. With ``rng=None`` the encoder is
        deterministic (eval mode).
        """
        x, single = self._batch(descriptor)
        if x.shape[1] != self.config.input_dim:
            raise ShapeMismatch(f"descriptor width {x.shape[1]} != input_dim {self.config.input_dim}")
        n_layers = len(self.config.hidden_dims) + 1
        for i in range(n_layers):
            x = self._linear(x, f"enc{i}")
            if i < n_layers - 1:
                x = D.relu(x)
                if self.config.encoder_dropout:
                    x = self._dropout(x, rng)
        return D.reshape(x, (-1,)) if single else x

    def _head(self, h: Tensor, unit: str, rng, groups: int = 1) -> tuple[Tensor, Tensor]:
        h = self._dropout(D.relu(self._linear(h, f"{unit}.fc1")), rng, groups)
        return self._linear(h, f"{unit}.head_x"), self._linear(h, f"{unit}.head_q")

    def gpru(self, f, rng: np.random.Generator | None = None, mask_groups: int = 1) -> tuple[Tensor, Tensor]:
        """Global pose ``(x_hat, raw q_hat)`` from features.

        In train mode, ``mask_groups=2`` on a stacked ``[f; f_ref]`` batch gives
        row ``i`` and row ``i + N`` the same dropout mask, so both twins of a
        pair see the same thinned head.
        """
        f, single = self._batch(f)
        if f.shape[1] != self.config.feature_dim:
            raise ShapeMismatch(f"feature width {f.shape[1]} != {self.config.feature_dim}")
        x, q = self._head(f, "gpru", rng, mask_groups)
        if single:
            return D.reshape(x, (3,)), D.reshape(q, (4,))
        return x, q

    def rpru(self, f, f_ref, rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor]:
        if not self.has_rpru:
            raise MissingHead("model was built without an RPRU")
        f, single = self._batch(f)
        f_ref, _ = self._batch(f_ref)
        d = self.config.feature_dim
        if f.shape[1] != d or f_ref.shape != f.shape:
            raise ShapeMismatch(f"rpru expects two features of width {d}, got {f.shape} and {f_ref.shape}")
        x, q = self._head(D.concat([f, f_ref], axis=1), "rpru", rng)
        if single:
            return D.reshape(x, (3,)), D.reshape(q, (4,))
        return x, q

    def predict_arrays(self, descriptors) -> tuple[np.ndarray, np.ndarray]:
        """Eval-mode positions ``(N, 3)`` and canonical unit quaternions ``(N, 4)``."""
        desc = np.atleast_2d(np.asarray(descriptors, dtype=np.float64))
        x, q = self.gpru(self.encode(desc))
        return x.data, canonicalize_hemisphere(quat_normalize(q.data))

    def predict_pose(self, descriptor) -> Pose:
        x, q = self.predict_arrays(descriptor)
        return Pose(x[0], q[0])

    # ------------------------------------------------------------ checkpoints

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict):
        for k, v in state.items():
            if k not in self.params:
                raise KeyError(f"unexpected parameter {k}")
            arr = np.asarray(v, dtype=np.float64)
            if arr.shape != self.params[k].shape:
                raise ShapeMismatch(f"{k}: checkpoint shape {arr.shape} != {self.params[k].shape}")
            self.params[k].data = arr.copy()
        missing = [k for k in self.params if k not in state]
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {missing}")

    def save(self, path, extra: dict | None = None):
        doc = {
            "format": CHECKPOINT_FORMAT,
            "config": asdict(self.config),
            "params": {k: v.data.tolist() for k, v in self.params.items()},
            "extra": extra or {},
        }
        Path(path).write_text(json.dumps(doc, sort_keys=True))

    @classmethod
    def load(cls, path, inference_only: bool = False) -> "SiameseNet":
        """Rebuild a model from :meth:`save` output.

        With ``inference_only`` any RPRU weights are dropped, which is all the
        single-twin test phase needs.
        """
        doc = json.loads(Path(path).read_text())
        if doc.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: unsupported checkpoint format {doc.get('format')!r}")
        params = doc["params"]
        cfg = EncoderConfig(**doc["config"])
        if inference_only or not any(k.startswith("rpru.") for k in params):
            cfg.use_rpru = False
            params = {k: v for k, v in params.items() if not k.startswith("rpru.")}
        model = cls(cfg)
        model.load_state_dict(params)
        model.extra = doc.get("extra", {})
        return model
