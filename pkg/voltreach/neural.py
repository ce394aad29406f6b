"""
Fully connected networks in numpy (float64), Adam and the plain-text checkpoint format.

Checkpoint layout:

    voltreach-checkpoint 1
    config_hash <hex>
    network <name> dims=<d0,d1,...> hidden=relu head=<tanh|linear>
    W <rows> <cols>
    <row-major floats, one matrix row per line>
    b <n>
    <floats>
    ...
    sha256 <hex of everything above>

Floats are written with repr() so a load reproduces every parameter bit for bit.
"""

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from voltreach.errors import CheckpointFormatError, DimensionError

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = "voltreach-checkpoint"
CHECKPOINT_VERSION = 1
HEADS = ("tanh", "linear")


class Mlp:
    """dims = [in, h1, ..., out]; ReLU on hidden layers, `head` on the output."""

    def __init__(self, weights: List[np.ndarray], biases: List[np.ndarray], head: str = "linear"):
        if head not in HEADS:
            raise ValueError(f"unknown output activation: {head}")
        if len(weights) != len(biases) or not weights:
            raise DimensionError("need one bias vector per weight matrix")
        for i, (w, b) in enumerate(zip(weights, biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise DimensionError(f"layer {i}: weight {w.shape} and bias {b.shape} disagree")
            if i and weights[i - 1].shape[1] != w.shape[0]:
                raise DimensionError(f"layer {i}: input {w.shape[0]} != previous output {weights[i - 1].shape[1]}")
        self.weights = [np.array(w, dtype=np.float64) for w in weights]
        self.biases = [np.array(b, dtype=np.float64) for b in biases]
        self.head = head
        self._cache: Optional[Tuple[List[np.ndarray], List[np.ndarray]]] = None

    @classmethod
    def init(cls, dims: Sequence[int], rng: np.random.Generator, head: str = "linear",
             final_scale: float = 3e-3) -> "Mlp":
        """He-uniform hidden layers and a small uniform output layer."""
        weights, biases = [], []
        for i, (n_in, n_out) in enumerate(zip(dims[:-1], dims[1:])):
            last = i == len(dims) - 2
            bound = final_scale if last else np.sqrt(6.0 / n_in)
            weights.append(rng.uniform(-bound, bound, size=(n_in, n_out)))
            biases.append(np.zeros(n_out) if not last else rng.uniform(-final_scale, final_scale, size=n_out))
        return cls(weights, biases, head)

    @property
    def dims(self) -> List[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def params(self) -> List[np.ndarray]:
        """Parameters in checkpoint order: W1, b1, W2, b2, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    def copy(self) -> "Mlp":
        return Mlp([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.head)

    def forward(self, x: np.ndarray) -> np.ndarray:
        """x of shape (n, in) or (in,); caches activations for `backward`."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.shape[1] != self.dims[0]:
            raise DimensionError(f"input has {x.shape[1]} features, network expects {self.dims[0]}")
        inputs, pre = [], []
        a = x
        n_layers = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(a)
            zl = a @ w + b
            pre.append(zl)
            if i < n_layers - 1:
                a = np.maximum(zl, 0.0)
            else:
                a = np.tanh(zl) if self.head == "tanh" else zl
        self._cache = (inputs, pre)
        return a[0] if single else a

    __call__ = forward

    def backward(self, upstream: np.ndarray) -> Tuple[List[np.ndarray], np.ndarray]:
        """
        Gradients of sum(output * upstream) with respect to the parameters (in
        `params` order) and to the input of the last `forward` call.
        """
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        inputs, pre = self._cache
        g = np.asarray(upstream, dtype=np.float64)
        if g.ndim == 1:
            g = g[None, :] if pre[-1].shape[0] == 1 else g[:, None]
        if self.head == "tanh":
            g = g * (1.0 - np.tanh(pre[-1]) ** 2)
        grads: List[np.ndarray] = []
        for i in reversed(range(len(self.weights))):
            grads = [inputs[i].T @ g, g.sum(axis=0)] + grads
            g = g @ self.weights[i].T
            if i > 0:
                g = g * (pre[i - 1] > 0.0)
        return grads, g

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(p)) for p in self.params)


def polyak_update(target: Mlp, online: Mlp, rho: float) -> None:
    """target <- (1 - rho) target + rho online, in place."""
    for t, p in zip(target.params, online.params):
        t[...] = (1.0 - rho) * t + rho * p


@dataclass
class Adam:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)

    def step(self, params: List[np.ndarray], grads: List[np.ndarray]) -> List[np.ndarray]:
        """One descent step with bias correction; `params` are updated in place."""
        if len(params) != len(grads):
            raise DimensionError("params and grads differ in length")
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            if p.shape != g.shape:
                raise DimensionError(f"gradient shape {g.shape} != parameter shape {p.shape}")
            m[...] = self.beta1 * m + (1.0 - self.beta1) * g
            v[...] = self.beta2 * v + (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return params


# ============================================================================
# Checkpoints
# ============================================================================

def _format_array(arr: np.ndarray) -> List[str]:
    if arr.ndim == 1:
        return [" ".join(repr(float(x)) for x in arr)]
    return [" ".join(repr(float(x)) for x in row) for row in arr]


def dumps_checkpoint(networks: Dict[str, Mlp], config_hash: str = "") -> str:
    lines = [f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}", f"config_hash {config_hash or '-'}"]
    for name, net in networks.items():
        dims = ",".join(str(d) for d in net.dims)
        lines.append(f"network {name} dims={dims} hidden=relu head={net.head}")
        for w, b in zip(net.weights, net.biases):
            lines.append(f"W {w.shape[0]} {w.shape[1]}")
            lines += _format_array(w)
            lines.append(f"b {b.shape[0]}")
            lines += _format_array(b)
    body = "\n".join(lines) + "\n"
    digest = hashlib.sha256(body.encode("utf-8")).hexdigest()
    return body + f"sha256 {digest}\n"


def save_checkpoint(path: Path, networks: Dict[str, Mlp], config_hash: str = "") -> str:
    text = dumps_checkpoint(networks, config_hash)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(text, encoding="utf-8")
    logger.info(f"checkpoint written: path={path}, networks={len(networks)}")
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def loads_checkpoint(text: str) -> Tuple[Dict[str, Mlp], str]:
    """Parse checkpoint text; returns (networks, config_hash)."""
    lines = text.splitlines()
    if not lines or not lines[-1].startswith("sha256 "):
        raise CheckpointFormatError("checkpoint is truncated (no checksum line)")
    body = "\n".join(lines[:-1]) + "\n"
    if hashlib.sha256(body.encode("utf-8")).hexdigest() != lines[-1].split()[1]:
        raise CheckpointFormatError("checkpoint checksum mismatch")
    header = lines[0].split()
    if len(header) != 2 or header[0] != CHECKPOINT_MAGIC or header[1] != str(CHECKPOINT_VERSION):
        raise CheckpointFormatError(f"unsupported checkpoint header: {lines[0]!r}")
    config_hash = lines[1].split()[1] if lines[1].startswith("config_hash ") else ""
    config_hash = "" if config_hash == "-" else config_hash

    networks: Dict[str, Mlp] = {}
    i = 2
    end = len(lines) - 1
    try:
        while i < end:
            head_line = lines[i].split()
            if head_line[0] != "network":
                raise CheckpointFormatError(f"line {i + 1}: expected a network header")
            name = head_line[1]
            tags = dict(item.split("=", 1) for item in head_line[2:])
            dims = [int(d) for d in tags["dims"].split(",")]
            i += 1
            weights, biases = [], []
            for n_in, n_out in zip(dims[:-1], dims[1:]):
                rows, cols = (int(x) for x in lines[i].split()[1:3])
                if (rows, cols) != (n_in, n_out):
                    raise CheckpointFormatError(f"{name}: weight block {rows}x{cols} does not match dims")
                w = np.array([[float(x) for x in lines[i + 1 + r].split()] for r in range(rows)])
                i += 1 + rows
                size = int(lines[i].split()[1])
                b = np.array([float(x) for x in lines[i + 1].split()])
                if b.shape != (size,) or w.shape != (rows, cols):
                    raise CheckpointFormatError(f"{name}: malformed parameter block")
                i += 2
                weights.append(w)
                biases.append(b)
            networks[name] = Mlp(weights, biases, head=tags.get("head", "linear"))
    except (IndexError, KeyError, ValueError, DimensionError) as e:
        if isinstance(e, CheckpointFormatError):
            raise
        raise CheckpointFormatError(f"malformed checkpoint near line {i + 1}: {e}")
    return networks, config_hash


def load_checkpoint(path: Path) -> Tuple[Dict[str, Mlp], str]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise CheckpointFormatError(f"checkpoint not found: {path}")
    return loads_checkpoint(text)
