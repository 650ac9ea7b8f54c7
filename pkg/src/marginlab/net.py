"""Feedforward classifiers: exact forward pass, hidden-activation capture,
and reverse-mode Jacobians of the class logits.

Networks are immutable after load.  The forward pass takes a single sample
(a flat feature vector, reshaped internally to ``input_shape``); dense-only
stacks additionally support a batched path used by the trainer.

Conventions: logits are raw (no softmax); the ReLU gradient at exactly zero
is zero; hidden-layer boundaries are the outputs of ReLU layers only.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .tensorio import read_tensor, write_tensor


class Dense:
    kind = "dense"

    def __init__(self, weight: np.ndarray, bias: np.ndarray):
        self.weight = np.asarray(weight, dtype=np.float64)  # (out, in)
        self.bias = np.asarray(bias, dtype=np.float64)  # (out,)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise DataError("dense layer weight/bias shapes inconsistent")

    def out_shape(self, in_shape):
        if in_shape != (self.weight.shape[1],):
            raise DataError(
                f"dense layer expects {(self.weight.shape[1],)}, got {in_shape}"
            )
        return (self.weight.shape[0],)

    def forward(self, x):
        return x @ self.weight.T + self.bias

    def backward(self, grad_out, x):
        return grad_out @ self.weight

    def param_grads(self, grad_out, x):
        # Batched: grad_out (B, out), x (B, in).
        return grad_out.T @ x, grad_out.sum(axis=0)


class ReLU:
    kind = "relu"

    def out_shape(self, in_shape):
        return in_shape

    def forward(self, x):
        return np.maximum(x, 0.0)

    def backward(self, grad_out, x):
        return grad_out * (x > 0.0)


class Flatten:
    kind = "flatten"

    def out_shape(self, in_shape):
        size = 1
        for extent in in_shape:
            size *= extent
        return (size,)

    def forward(self, x):
        return x.reshape(-1)

    def backward(self, grad_out, x):
        return grad_out.reshape(x.shape)


class MaxPool2x2:
    kind = "maxpool2x2"

    def out_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[1] % 2 or in_shape[2] % 2:
            raise DataError(f"maxpool2x2 needs (c, even h, even w), got {in_shape}")
        return (in_shape[0], in_shape[1] // 2, in_shape[2] // 2)

    @staticmethod
    def _windows(x):
        c, h, w = x.shape
        return x.reshape(c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 2, 4).reshape(
            c, h // 2, w // 2, 4
        )

    def forward(self, x):
        return self._windows(x).max(axis=-1)

    def backward(self, grad_out, x):
        windows = self._windows(x)
        # First-occurrence argmax fixes tie-breaking deterministically.
        idx = windows.argmax(axis=-1)
        grad_windows = np.zeros_like(windows)
        np.put_along_axis(grad_windows, idx[..., None], grad_out[..., None], axis=-1)
        c, ho, wo, _ = grad_windows.shape
        return (
            grad_windows.reshape(c, ho, wo, 2, 2)
            .transpose(0, 1, 3, 2, 4)
            .reshape(c, ho * 2, wo * 2)
        )


class Conv2d:
    kind = "conv2d"

    def __init__(self, weight: np.ndarray, bias: np.ndarray, stride: int = 1):
        self.weight = np.asarray(weight, dtype=np.float64)  # (oc, ic, kh, kw)
        self.bias = np.asarray(bias, dtype=np.float64)  # (oc,)
        self.stride = int(stride)
        if self.weight.ndim != 4 or self.bias.shape != (self.weight.shape[0],):
            raise DataError("conv2d weight/bias shapes inconsistent")
        if self.stride < 1:
            raise DataError("conv2d stride must be positive")

    def out_shape(self, in_shape):
        oc, ic, kh, kw = self.weight.shape
        if len(in_shape) != 3 or in_shape[0] != ic:
            raise DataError(f"conv2d expects ({ic}, h, w), got {in_shape}")
        h_out = (in_shape[1] - kh) // self.stride + 1
        w_out = (in_shape[2] - kw) // self.stride + 1
        if h_out < 1 or w_out < 1:
            raise DataError("conv2d kernel larger than input")
        return (oc, h_out, w_out)

    def forward(self, x):
        oc, ic, kh, kw = self.weight.shape
        _, h_out, w_out = self.out_shape(x.shape)
        out = np.empty((oc, h_out, w_out))
        flat_w = self.weight.reshape(oc, -1)
        for i in range(h_out):
            for j in range(w_out):
                patch = x[
                    :,
                    i * self.stride : i * self.stride + kh,
                    j * self.stride : j * self.stride + kw,
                ]
                out[:, i, j] = flat_w @ patch.reshape(-1) + self.bias
        return out

    def backward(self, grad_out, x):
        oc, ic, kh, kw = self.weight.shape
        _, h_out, w_out = grad_out.shape
        grad_in = np.zeros_like(x)
        for i in range(h_out):
            for j in range(w_out):
                contrib = np.tensordot(grad_out[:, i, j], self.weight, axes=(0, 0))
                grad_in[
                    :,
                    i * self.stride : i * self.stride + kh,
                    j * self.stride : j * self.stride + kw,
                ] += contrib
        return grad_in


class BatchNormInference:
    """Batchnorm frozen at stored running statistics (per leading channel)."""

    kind = "batchnorm-inference"

    def __init__(self, scale, shift, running_mean, running_var, epsilon=1e-5):
        self.scale = np.asarray(scale, dtype=np.float64)
        self.shift = np.asarray(shift, dtype=np.float64)
        self.running_mean = np.asarray(running_mean, dtype=np.float64)
        self.running_var = np.asarray(running_var, dtype=np.float64)
        self.epsilon = float(epsilon)
        shapes = {self.scale.shape, self.shift.shape, self.running_mean.shape,
                  self.running_var.shape}
        if len(shapes) != 1 or self.scale.ndim != 1:
            raise DataError("batchnorm parameter vectors must share one 1-D shape")
        if np.any(self.running_var <= 0.0):
            raise DataError("batchnorm running variance must be strictly positive")

    def out_shape(self, in_shape):
        if in_shape[0] != self.scale.shape[0]:
            raise DataError(
                f"batchnorm over {self.scale.shape[0]} channels, input {in_shape}"
            )
        return in_shape

    def _broadcast(self, v, ndim):
        return v.reshape((-1,) + (1,) * (ndim - 1))

    def forward(self, x):
        gain = self.scale / np.sqrt(self.running_var + self.epsilon)
        return self._broadcast(gain, x.ndim) * (
            x - self._broadcast(self.running_mean, x.ndim)
        ) + self._broadcast(self.shift, x.ndim)

    def backward(self, grad_out, x):
        gain = self.scale / np.sqrt(self.running_var + self.epsilon)
        return grad_out * self._broadcast(gain, x.ndim)


_LAYER_KINDS = {
    cls.kind: cls
    for cls in (Dense, ReLU, Flatten, MaxPool2x2, Conv2d, BatchNormInference)
}


@dataclass
class Network:
    """An ordered layer stack producing ``num_classes`` raw logits."""

    layers: list
    num_classes: int
    input_shape: tuple
    hidden_boundaries: list = field(init=False)

    def __post_init__(self):
        self.input_shape = tuple(int(e) for e in self.input_shape)
        shape = self.input_shape
        self.hidden_boundaries = []
        for idx, layer in enumerate(self.layers):
            shape = layer.out_shape(shape)
            if isinstance(layer, ReLU) and idx != len(self.layers) - 1:
                self.hidden_boundaries.append(idx)
        if shape != (self.num_classes,):
            raise DataError(
                f"network produces {shape}, expected ({self.num_classes},) logits"
            )

    @property
    def num_features(self) -> int:
        size = 1
        for extent in self.input_shape:
            size *= extent
        return size

    def _prepare(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.size != self.num_features:
            raise DataError(
                f"input has {x.size} values, network expects {self.num_features}"
            )
        return x.reshape(self.input_shape)

    def _run(self, x: np.ndarray):
        """Forward pass caching every layer input; returns (caches, logits)."""
        value = self._prepare(x)
        caches = []
        for layer in self.layers:
            caches.append(value)
            value = layer.forward(value)
        return caches, value

    def forward(self, x: np.ndarray) -> np.ndarray:
        _, logits = self._run(x)
        if not np.all(np.isfinite(logits)):
            raise DataError("non-finite logits")
        return logits

    def forward_with_activations(self, x: np.ndarray):
        """Logits plus the post-activation tensor at each hidden boundary."""
        caches, value = self._run(x)
        activations = []
        for idx in self.hidden_boundaries:
            if idx + 1 < len(self.layers):
                activations.append(caches[idx + 1])
            else:
                activations.append(value)
        return value, activations

    def forward_from(self, boundary: int, activation: np.ndarray) -> np.ndarray:
        """Evaluate only the layers after hidden boundary ``boundary``."""
        layer_idx = self._boundary_layer(boundary)
        value = np.asarray(activation, dtype=np.float64)
        for layer in self.layers[layer_idx + 1 :]:
            value = layer.forward(value)
        return value

    def _boundary_layer(self, boundary: int) -> int:
        if not 0 <= boundary < len(self.hidden_boundaries):
            raise DataError(
                f"hidden boundary {boundary} invalid; "
                f"network has {len(self.hidden_boundaries)}"
            )
        return self.hidden_boundaries[boundary]

    def class_jacobian(self, x: np.ndarray, at="input") -> np.ndarray:
        """Rows are gradients of each class logit w.r.t. the chosen representation.

        ``at`` is ``"input"`` or a hidden-boundary index; the representation is
        flattened, so the result is (num_classes, dims).
        """
        caches, logits = self._run(x)
        if at == "input":
            stop = 0
            rep_shape = self.input_shape
        else:
            stop = self._boundary_layer(int(at)) + 1
            rep_shape = caches[stop].shape if stop < len(caches) else logits.shape
        dims = int(np.prod(rep_shape))
        jac = np.empty((self.num_classes, dims))
        for k in range(self.num_classes):
            grad = np.zeros(self.num_classes)
            grad[k] = 1.0
            for idx in range(len(self.layers) - 1, stop - 1, -1):
                grad = self.layers[idx].backward(grad, caches[idx])
            jac[k] = grad.reshape(-1)
        return jac


def make_mlp(input_dim: int, hidden: list[int], num_classes: int, rng) -> Network:
    """Dense/ReLU stack with He-normal init; used for zoo training."""
    layers = []
    fan_in = input_dim
    for width in hidden:
        scale = np.sqrt(2.0 / fan_in)
        layers.append(Dense(rng.normal(0.0, scale, size=(width, fan_in)),
                            np.zeros(width)))
        layers.append(ReLU())
        fan_in = width
    scale = np.sqrt(2.0 / fan_in)
    layers.append(Dense(rng.normal(0.0, scale, size=(num_classes, fan_in)),
                        np.zeros(num_classes)))
    return Network(layers=layers, num_classes=num_classes, input_shape=(input_dim,))


def save_network(net: Network, directory: str | Path, name: str) -> Path:
    """Persist layer manifest plus .mpt weight tensors; returns manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for pos, layer in enumerate(net.layers):
        entry: dict = {"kind": layer.kind}
        if isinstance(layer, Dense):
            entry["weight"] = f"{name}_l{pos}_w.mpt"
            entry["bias"] = f"{name}_l{pos}_b.mpt"
            write_tensor(layer.weight, directory / entry["weight"])
            write_tensor(layer.bias, directory / entry["bias"])
        elif isinstance(layer, Conv2d):
            entry["weight"] = f"{name}_l{pos}_w.mpt"
            entry["bias"] = f"{name}_l{pos}_b.mpt"
            entry["stride"] = layer.stride
            write_tensor(layer.weight, directory / entry["weight"])
            write_tensor(layer.bias, directory / entry["bias"])
        elif isinstance(layer, BatchNormInference):
            for attr, tag in (("scale", "scale"), ("shift", "shift"),
                              ("running_mean", "mean"), ("running_var", "var")):
                rel = f"{name}_l{pos}_{tag}.mpt"
                entry[attr] = rel
                write_tensor(getattr(layer, attr), directory / rel)
            entry["epsilon"] = layer.epsilon
        entries.append(entry)
    manifest = {
        "num_classes": net.num_classes,
        "input_shape": list(net.input_shape),
        "layers": entries,
    }
    manifest_path = directory / f"{name}_model.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest_path


def load_network(manifest_path: str | Path) -> Network:
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read model manifest {manifest_path}: {exc}") from exc
    base = manifest_path.parent
    layers = []
    for entry in manifest["layers"]:
        kind = entry.get("kind")
        if kind not in _LAYER_KINDS:
            raise DataError(f"unknown layer kind {kind!r}")
        if kind == "dense":
            layers.append(Dense(read_tensor(base / entry["weight"]),
                                read_tensor(base / entry["bias"])))
        elif kind == "conv2d":
            layers.append(Conv2d(read_tensor(base / entry["weight"]),
                                 read_tensor(base / entry["bias"]),
                                 stride=entry.get("stride", 1)))
        elif kind == "batchnorm-inference":
            layers.append(BatchNormInference(
                read_tensor(base / entry["scale"]),
                read_tensor(base / entry["shift"]),
                read_tensor(base / entry["running_mean"]),
                read_tensor(base / entry["running_var"]),
                epsilon=entry.get("epsilon", 1e-5)))
        else:
            layers.append(_LAYER_KINDS[kind]())
    return Network(
        layers=layers,
        num_classes=int(manifest["num_classes"]),
        input_shape=tuple(manifest["input_shape"]),
    )
