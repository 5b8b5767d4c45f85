"""Fixed-topology MLPs with hand-written backprop, Adam, and the ParamBlob wire format.

All parameters of a network live in one flat contiguous array; the per-layer
weight matrices and bias vectors are views into it. Flat order is frozen:
for each layer, the (fan_in, fan_out) weight matrix in row-major order,
then the bias vector.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

BLOB_MAGIC = b"EL"
BLOB_FORMAT_VERSION = 1
_BLOB_HEADER = struct.Struct("<2sHQQ")
BLOB_HEADER_SIZE = _BLOB_HEADER.size  # 20 bytes

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


class BlobError(ValueError):
    """A ParamBlob failed validation (magic, spec hash, length or finiteness)."""


def fnv1a_64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


@dataclass(frozen=True)
class MlpSpec:
    widths: tuple[int, ...]
    output_activation: str = "none"  # "tanh" | "none"

    def __post_init__(self):
        if len(self.widths) < 2 or any(w <= 0 for w in self.widths):
            raise ValueError(f"bad layer widths {self.widths}")
        if self.output_activation not in ("tanh", "none"):
            raise ValueError(f"unknown output activation {self.output_activation!r}")

    @property
    def input_width(self) -> int:
        return self.widths[0]

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        return list(zip(self.widths[:-1], self.widths[1:]))

    @property
    def n_params(self) -> int:
        return sum(i * o + o for i, o in self.layer_shapes)

    @property
    def spec_hash(self) -> int:
        return fnv1a_64(struct.pack(f"<{len(self.widths)}I", *self.widths))


HIDDEN = (256, 128, 64)
ACTOR_SPEC = MlpSpec((10, *HIDDEN, 1), "tanh")
CRITIC_SPEC = MlpSpec((11, *HIDDEN, 1), "none")


class Mlp:
    """ReLU hidden layers, single configurable output activation.

    ``forward`` accepts a single input vector or a (batch, width) matrix and
    returns outputs plus the activation cache ``backward`` needs.
    """

    def __init__(self, spec: MlpSpec, flat: np.ndarray | None = None, version: int = 0, dtype=np.float32):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        if flat is None:
            flat = np.zeros(spec.n_params, dtype=self.dtype)
        else:
            flat = np.array(flat, dtype=self.dtype, copy=True).reshape(-1)
            if flat.size != spec.n_params:
                raise ValueError(f"expected {spec.n_params} parameters, got {flat.size}")
        self.flat = flat
        self.version = int(version)
        self.weights, self.biases = _layer_views(spec, self.flat)

    @classmethod
    def initialized(cls, spec: MlpSpec, rng: np.random.Generator, final_scale: float = 1.0, dtype=np.float32) -> "Mlp":
        net = cls(spec, dtype=dtype)
        for k, (w, b) in enumerate(zip(net.weights, net.biases)):
            bound = 1.0 / np.sqrt(w.shape[0])
            if k == len(net.weights) - 1:
                bound *= final_scale
            w[...] = rng.uniform(-bound, bound, size=w.shape)
            b[...] = rng.uniform(-bound, bound, size=b.shape)
        return net

    def copy(self) -> "Mlp":
        return Mlp(self.spec, self.flat, self.version, self.dtype)

    def load_flat(self, flat: np.ndarray, version: int) -> None:
        self.flat[...] = flat
        self.version = int(version)

    def forward(self, x: np.ndarray, need_cache: bool = True):
        x = np.asarray(x, dtype=self.dtype)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.shape[1] != self.spec.input_width:
            raise ValueError(f"input width {x.shape[1]} != {self.spec.input_width}")
        acts = [x]
        h = x
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w
            h += b
            if k < last:
                np.maximum(h, 0.0, out=h)
            elif self.spec.output_activation == "tanh":
                np.tanh(h, out=h)
            acts.append(h)
        out = h[0] if single else h
        return out, (acts if need_cache else None)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x, need_cache=False)[0]

    def backward(self, cache, grad_out: np.ndarray, param_grads: bool = True):
        """Reverse-mode pass. Returns (flat parameter gradient or None, input gradient)."""
        if cache is None:
            raise ValueError("backward needs the cache from forward(need_cache=True)")
        acts = cache
        g = np.asarray(grad_out, dtype=self.dtype).reshape(acts[-1].shape)
        flat_grad = np.zeros_like(self.flat) if param_grads else None
        gw, gb = _layer_views(self.spec, flat_grad) if param_grads else (None, None)
        last = len(self.weights) - 1
        for k in range(last, -1, -1):
            out = acts[k + 1]
            if k == last:
                if self.spec.output_activation == "tanh":
                    g = g * (1.0 - out * out)
            else:
                g = g * (out > 0)
            if param_grads:
                np.matmul(acts[k].T, g, out=gw[k])
                gb[k][...] = g.sum(axis=0)
            g = g @ self.weights[k].T
        return flat_grad, g


def _layer_views(spec: MlpSpec, flat: np.ndarray):
    weights, biases = [], []
    offset = 0
    for fan_in, fan_out in spec.layer_shapes:
        n = fan_in * fan_out
        weights.append(flat[offset : offset + n].reshape(fan_in, fan_out))
        offset += n
        biases.append(flat[offset : offset + fan_out])
        offset += fan_out
    return weights, biases


class Adam:
    """Bias-corrected Adam over a flat parameter vector."""

    def __init__(self, n_params: int, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8, dtype=np.float32):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(n_params, dtype=dtype)
        self.v = np.zeros(n_params, dtype=dtype)
        self.t = 0
        self.faults = 0

    def step(self, net: Mlp, grad: np.ndarray) -> bool:
        """Descend along ``grad``. Non-finite gradients skip the update and count a fault."""
        if grad.shape != net.flat.shape or self.m.shape != grad.shape:
            raise ValueError("gradient shape does not match parameters")
        if not np.isfinite(grad).all():
            self.faults += 1
            return False
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        self.m *= b1
        self.m += (1.0 - b1) * grad
        self.v *= b2
        self.v += (1.0 - b2) * (grad * grad)
        m_hat = self.m / (1.0 - b1**self.t)
        v_hat = self.v / (1.0 - b2**self.t)
        np.sqrt(v_hat, out=v_hat)
        v_hat += self.eps
        m_hat /= v_hat
        m_hat *= self.lr
        net.flat -= m_hat
        net.version += 1
        return True

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {"m": self.m.copy(), "v": self.v.copy(), "t": np.array(self.t), "faults": np.array(self.faults)}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        self.m[...] = arrays["m"]
        self.v[...] = arrays["v"]
        self.t = int(arrays["t"])
        self.faults = int(arrays["faults"])


def serialize(net: Mlp) -> bytes:
    header = _BLOB_HEADER.pack(BLOB_MAGIC, BLOB_FORMAT_VERSION, net.spec.spec_hash, net.version)
    return header + net.flat.astype("<f4", copy=False).tobytes()


def blob_header(blob: bytes) -> tuple[int, int]:
    """(spec hash, param version) of a blob, after checking the magic."""
    if len(blob) < BLOB_HEADER_SIZE:
        raise BlobError("blob shorter than its header")
    magic, fmt, spec_hash, version = _BLOB_HEADER.unpack_from(blob)
    if magic != BLOB_MAGIC or fmt != BLOB_FORMAT_VERSION:
        raise BlobError(f"bad blob magic/format {magic!r}/{fmt}")
    return spec_hash, version


def decode_params(blob: bytes, spec: MlpSpec) -> tuple[np.ndarray, int]:
    spec_hash, version = blob_header(blob)
    if spec_hash != spec.spec_hash:
        raise BlobError(f"spec hash {spec_hash:#x} does not match {spec.spec_hash:#x}")
    payload = memoryview(blob)[BLOB_HEADER_SIZE:]
    if len(payload) != 4 * spec.n_params:
        raise BlobError(f"payload is {len(payload)} bytes, expected {4 * spec.n_params}")
    flat = np.frombuffer(payload, dtype="<f4")
    if not np.isfinite(flat).all():
        raise BlobError("blob contains non-finite parameters")
    return flat, version


def deserialize(blob: bytes, spec: MlpSpec, dtype=np.float32) -> Mlp:
    flat, version = decode_params(blob, spec)
    return Mlp(spec, flat, version, dtype)
