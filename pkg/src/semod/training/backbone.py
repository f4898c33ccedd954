"""Reference convolutional backbone and checkpoint format.

A deliberately small network (two 3x3 conv blocks with 2x2 max pooling,
a global mean+max pooling head, linear output) implemented directly on
numpy with hand-written backprop. Forward passes are deterministic,
parameters round-trip bit-identically through ``.npz`` checkpoints, and
the backbone protocol below admits externally trained models.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np
from PIL import Image

from ..errors import ValidationError
from ..hloss import Logits3, Prob3, softmax

CHECKPOINT_SCHEMA_VERSION = "1"


class Backbone(Protocol):
    """Differentiable image -> 3-logit model.

    ``forward`` caches whatever ``backward`` needs; ``backward`` takes
    the loss gradient w.r.t. the logits and accumulates parameter
    gradients. Parameters and gradients are name-keyed arrays.
    """

    input_size: int

    def preprocess(self, image: np.ndarray) -> np.ndarray: ...

    def forward(self, batch: np.ndarray) -> np.ndarray: ...

    def backward(self, grad_logits: np.ndarray) -> None: ...

    def zero_grad(self) -> None: ...

    def get_parameters(self) -> dict[str, np.ndarray]: ...

    def set_parameters(self, params: dict[str, np.ndarray]) -> None: ...

    def gradients(self) -> dict[str, np.ndarray]: ...

    def head_parameter_names(self) -> frozenset[str]: ...


@dataclass(frozen=True)
class BackboneConfig:
    input_size: int = 32
    channels: tuple[int, int] = (8, 16)

    def __post_init__(self) -> None:
        if self.input_size < 8 or self.input_size % 4 != 0:
            raise ValidationError(
                f"input_size must be a multiple of 4 and >= 8: {self.input_size}"
            )
        if len(self.channels) != 2 or any(c < 1 for c in self.channels):
            raise ValidationError(f"channels must be two positive ints: {self.channels}")

    def fingerprint(self) -> str:
        blob = json.dumps(
            {"input_size": self.input_size, "channels": list(self.channels)},
            sort_keys=True,
        )
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _im2col(x: np.ndarray, k: int = 3, pad: int = 1) -> np.ndarray:
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    cols = np.empty((n, h, w, k * k * c), dtype=x.dtype)
    idx = 0
    for dy in range(k):
        for dx in range(k):
            cols[..., idx * c : (idx + 1) * c] = xp[:, dy : dy + h, dx : dx + w, :]
            idx += 1
    return cols


def _col2im(dcols: np.ndarray, shape: tuple[int, int, int, int], k: int = 3, pad: int = 1) -> np.ndarray:
    n, h, w, c = shape
    dxp = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=dcols.dtype)
    idx = 0
    for dy in range(k):
        for dx in range(k):
            dxp[:, dy : dy + h, dx : dx + w, :] += dcols[..., idx * c : (idx + 1) * c]
            idx += 1
    return dxp[:, pad : pad + h, pad : pad + w, :]


def _maxpool2(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """2x2 max pool; returns (pooled, window view (N,h2,w2,C,4))."""
    n, h, w, c = x.shape
    windows = np.ascontiguousarray(
        x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4)
    ).reshape(n, h // 2, w // 2, c, 4)
    return windows.max(axis=-1), windows


def _maxpool2_back(dout: np.ndarray, windows: np.ndarray) -> np.ndarray:
    """Route the gradient to the first max position of each window."""
    n, h2, w2, c, _ = windows.shape
    idx = windows.argmax(axis=-1)
    grad = np.zeros_like(windows)
    np.put_along_axis(grad, idx[..., None], dout[..., None], axis=-1)
    return (
        grad.reshape(n, h2, w2, c, 2, 2)
        .transpose(0, 1, 4, 2, 5, 3)
        .reshape(n, h2 * 2, w2 * 2, c)
    )


class TinyConvNet:
    """conv(3->c1) -> relu -> maxpool -> conv(c1->c2) -> relu -> maxpool
    -> global mean+max pool -> linear(2*c2 -> 3). Float32 throughout."""

    def __init__(self, config: BackboneConfig = BackboneConfig(), seed: int = 0):
        self.config = config
        self.input_size = config.input_size
        c1, c2 = config.channels
        rng = np.random.default_rng(seed)

        def he(shape, fan_in):
            return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)

        self.params: dict[str, np.ndarray] = {
            "conv1_w": he((27, c1), 27),
            "conv1_b": np.zeros(c1, dtype=np.float32),
            "conv2_w": he((9 * c1, c2), 9 * c1),
            "conv2_b": np.zeros(c2, dtype=np.float32),
            "fc_w": he((2 * c2, 3), 2 * c2),
            "fc_b": np.zeros(3, dtype=np.float32),
        }
        self.grads: dict[str, np.ndarray] = {}
        self._cache: dict[str, np.ndarray] = {}
        self.zero_grad()

    def head_parameter_names(self) -> frozenset[str]:
        return frozenset({"fc_w", "fc_b"})

    def preprocess(self, image: np.ndarray) -> np.ndarray:
        """uint8 (H, W, 3) -> float32 (S, S, 3) in [0, 1], bilinear resize."""
        arr = np.asarray(image)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValidationError(f"expected an (H, W, 3) image, got shape {arr.shape}")
        size = self.input_size
        if arr.shape[0] != size or arr.shape[1] != size:
            resized = Image.fromarray(arr.astype(np.uint8)).resize(
                (size, size), Image.BILINEAR
            )
            arr = np.asarray(resized)
        return arr.astype(np.float32) / np.float32(255.0)

    def forward(self, batch: np.ndarray) -> np.ndarray:
        x = np.ascontiguousarray(batch, dtype=np.float32)
        if x.ndim != 4 or x.shape[1] != self.input_size or x.shape[3] != 3:
            raise ValidationError(
                f"expected (N, {self.input_size}, {self.input_size}, 3), got {x.shape}"
            )
        c1 = self.params["conv1_b"].shape[0]
        c2 = self.params["conv2_b"].shape[0]
        n, s = x.shape[0], self.input_size

        cols1 = _im2col(x)
        z1 = cols1.reshape(-1, 27) @ self.params["conv1_w"] + self.params["conv1_b"]
        z1 = z1.reshape(n, s, s, c1)
        a1 = np.maximum(z1, 0.0)
        p1, win1 = _maxpool2(a1)

        cols2 = _im2col(p1)
        z2 = cols2.reshape(-1, 9 * c1) @ self.params["conv2_w"] + self.params["conv2_b"]
        z2 = z2.reshape(n, s // 2, s // 2, c2)
        a2 = np.maximum(z2, 0.0)
        p2, win2 = _maxpool2(a2)

        flat = p2.reshape(n, -1, c2)
        pooled = np.concatenate([flat.mean(axis=1), flat.max(axis=1)], axis=1)
        logits = pooled @ self.params["fc_w"] + self.params["fc_b"]

        self._cache = {
            "cols1": cols1,
            "mask1": (z1 > 0),
            "win1": win1,
            "p1_shape": np.array(p1.shape),
            "cols2": cols2,
            "mask2": (z2 > 0),
            "win2": win2,
            "p2_shape": np.array(p2.shape),
            "flat": flat,
            "pooled": pooled,
        }
        return logits

    def backward(self, grad_logits: np.ndarray) -> None:
        if not self._cache:
            raise ValidationError("backward called before forward")
        g = np.ascontiguousarray(grad_logits, dtype=np.float32)
        pooled = self._cache["pooled"]
        n = pooled.shape[0]
        c1 = self.params["conv1_b"].shape[0]
        s = self.input_size

        self.grads["fc_w"] += pooled.T @ g
        self.grads["fc_b"] += g.sum(axis=0)
        dpooled = g @ self.params["fc_w"].T

        n2, h2, w2, c2 = (int(v) for v in self._cache["p2_shape"])
        flat = self._cache["flat"]
        dmean, dmax = dpooled[:, :c2], dpooled[:, c2:]
        dflat = np.broadcast_to(
            dmean[:, None, :] / np.float32(h2 * w2), flat.shape
        ).astype(np.float32).copy()
        max_contrib = np.zeros_like(dflat)
        np.put_along_axis(
            max_contrib, flat.argmax(axis=1)[:, None, :], dmax[:, None, :], axis=1
        )
        dflat += max_contrib
        dp2 = dflat.reshape(n2, h2, w2, c2)
        da2 = _maxpool2_back(dp2, self._cache["win2"])
        dz2 = da2 * self._cache["mask2"]

        dz2_flat = dz2.reshape(-1, c2)
        self.grads["conv2_w"] += self._cache["cols2"].reshape(-1, 9 * c1).T @ dz2_flat
        self.grads["conv2_b"] += dz2_flat.sum(axis=0)
        dcols2 = (dz2_flat @ self.params["conv2_w"].T).reshape(n, s // 2, s // 2, 9 * c1)
        dp1 = _col2im(dcols2, tuple(int(v) for v in self._cache["p1_shape"]))

        da1 = _maxpool2_back(dp1, self._cache["win1"])
        dz1 = da1 * self._cache["mask1"]
        dz1_flat = dz1.reshape(-1, c1)
        self.grads["conv1_w"] += self._cache["cols1"].reshape(-1, 27).T @ dz1_flat
        self.grads["conv1_b"] += dz1_flat.sum(axis=0)

    def zero_grad(self) -> None:
        self.grads = {name: np.zeros_like(p) for name, p in self.params.items()}

    def get_parameters(self) -> dict[str, np.ndarray]:
        return {name: p.copy() for name, p in self.params.items()}

    def set_parameters(self, params: dict[str, np.ndarray]) -> None:
        if set(params) != set(self.params):
            raise ValidationError(
                f"parameter names mismatch: {sorted(params)} vs {sorted(self.params)}"
            )
        for name, value in params.items():
            if value.shape != self.params[name].shape:
                raise ValidationError(f"shape mismatch for {name}")
            self.params[name] = value.astype(np.float32).copy()

    def gradients(self) -> dict[str, np.ndarray]:
        return self.grads

    def predict_logits(self, image: np.ndarray) -> Logits3:
        logits = self.forward(self.preprocess(image)[None, ...])[0]
        return Logits3(float(logits[0]), float(logits[1]), float(logits[2]))


class BackboneClassifier:
    """Adapter exposing a backbone through the classifier protocol."""

    def __init__(self, backbone: TinyConvNet):
        self.backbone = backbone

    def predict(self, image: np.ndarray) -> Prob3:
        return softmax(self.backbone.predict_logits(image))


def save_checkpoint(
    backbone: TinyConvNet,
    path: str | Path,
    *,
    stage: str,
    epoch: int,
    optimizer_state: dict[str, np.ndarray] | None = None,
) -> None:
    """Atomically write parameters, optimizer state, and metadata."""
    path = Path(path)
    arrays: dict[str, np.ndarray] = {}
    for name, p in backbone.params.items():
        arrays[f"param:{name}"] = p
    if optimizer_state:
        for name, value in optimizer_state.items():
            arrays[f"opt:{name}"] = value
    meta = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "stage": stage,
        "epoch": epoch,
        "config_fingerprint": backbone.config.fingerprint(),
        "input_size": backbone.config.input_size,
        "channels": list(backbone.config.channels),
    }
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    tmp = path.with_name(path.name + ".tmp.npz")
    with tmp.open("wb") as fh:
        np.savez(fh, **arrays)
    os.replace(tmp, path)


def load_checkpoint(
    path: str | Path,
) -> tuple[TinyConvNet, dict, dict[str, np.ndarray]]:
    """Rebuild the backbone from a checkpoint; returns (backbone,
    metadata, optimizer state)."""
    path = Path(path)
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        config = BackboneConfig(
            input_size=int(meta["input_size"]), channels=tuple(meta["channels"])
        )
        backbone = TinyConvNet(config, seed=0)
        params = {
            key.split(":", 1)[1]: data[key] for key in data.files if key.startswith("param:")
        }
        backbone.set_parameters(params)
        opt_state = {
            key.split(":", 1)[1]: data[key] for key in data.files if key.startswith("opt:")
        }
    return backbone, meta, opt_state
