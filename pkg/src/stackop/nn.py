"""MLPs with per-neuron trainable activations.

Layer recursion (depth J)::

    x^(0) = x
    x^(j+1) = A^(j) sigma_{alpha^(j)} . (x^(j) + b^(j)),   j = 0..J-1
    f(x) = x^(J) + c

``b^(j)`` and ``alpha^(j)`` live on the layer input (dimension d_j).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from stackop import autodiff as ad
from stackop.errors import DimensionError


class Activation(str, Enum):
    STANDARD = "standard"
    SUPER_EXPRESSIVE = "superexpressive"
    RELU = "relu"


def _se_base(t):
    t = np.asarray(t, dtype=np.float64)
    return np.where(t >= 0, np.mod(t, 2.0), t / (np.abs(t) + 1.0))


def activation(family, alpha: float, t: float) -> float:
    """Scalar activation sigma_alpha(t).

    ``standard``: tanh(t + alpha) (alpha is an input shift, folded into the
    bias inside an MLP); ``relu``: max(t + alpha, 0); ``superexpressive``:
    alpha t + (1 - alpha) base(t).
    """
    family = Activation(family)
    if family is Activation.STANDARD:
        return float(np.tanh(t + alpha))
    if family is Activation.RELU:
        return float(max(t + alpha, 0.0))
    return float(alpha * t + (1.0 - alpha) * _se_base(t))


def _apply_activation(family: Activation, alpha, h):
    if family is Activation.SUPER_EXPRESSIVE:
        return ad.superexpressive(alpha, h)
    if family is Activation.RELU:
        return ad.relu(h)
    return ad.tanh(h)


@dataclass
class MLP:
    widths: list[int]
    family: Activation = Activation.STANDARD
    A: list = field(default_factory=list)
    b: list = field(default_factory=list)
    alpha: list = field(default_factory=list)
    c: ad.Tensor | None = None

    @classmethod
    def build(cls, widths, family=Activation.STANDARD, rng=None, zero=False) -> "MLP":
        """Glorot-uniform weights, zero biases, alpha = 1 (identity skip) for the super-expressive family."""
        family = Activation(family)
        if len(widths) < 2:
            raise DimensionError("an MLP needs at least input and output widths")
        rng = np.random.default_rng(rng)
        net = cls(list(widths), family)
        for d_in, d_out in zip(widths[:-1], widths[1:]):
            lim = math.sqrt(6.0 / (d_in + d_out))
            A = np.zeros((d_out, d_in)) if zero else rng.uniform(-lim, lim, size=(d_out, d_in))
            net.A.append(ad.parameter(A))
            net.b.append(ad.parameter(np.zeros(d_in)))
            if family is Activation.SUPER_EXPRESSIVE:
                net.alpha.append(ad.parameter(np.zeros(d_in) if zero else np.ones(d_in)))
        net.c = ad.parameter(np.zeros(widths[-1]))
        return net

    @property
    def depth(self) -> int:
        return len(self.widths) - 1

    @property
    def max_width(self) -> int:
        return max(self.widths)

    @property
    def d_in(self) -> int:
        return self.widths[0]

    @property
    def d_out(self) -> int:
        return self.widths[-1]

    def parameters(self) -> list[ad.Tensor]:
        return [*self.A, *self.b, *self.alpha, self.c]

    def named_parameters(self) -> dict[str, ad.Tensor]:
        out = {}
        for j, A in enumerate(self.A):
            out[f"A{j}"] = A
        for j, b in enumerate(self.b):
            out[f"b{j}"] = b
        for j, a in enumerate(self.alpha):
            out[f"alpha{j}"] = a
        out["c"] = self.c
        return out

    def __call__(self, x):
        return forward(self, x)


def forward(mlp: MLP, x):
    """Apply the network to a vector (d0,) or a batch (B, d0); returns a Tensor."""
    x = ad.as_tensor(x)
    if x.shape[-1] != mlp.d_in:
        raise DimensionError(f"input dimension {x.shape[-1]} != {mlp.d_in}")
    h = x
    for j, A in enumerate(mlp.A):
        z = h + mlp.b[j]
        alpha = mlp.alpha[j] if mlp.family is Activation.SUPER_EXPRESSIVE else None
        h = _apply_activation(mlp.family, alpha, z) @ ad.transpose(A)
    return h + mlp.c


def parameter_count(mlp: MLP) -> int:
    """Number of nonzero trainable entries in A, b, alpha and c."""
    return int(sum(np.count_nonzero(p.data) for p in mlp.parameters()))


def dense_parameter_count(widths, family=Activation.STANDARD) -> int:
    """Entry count of the dense parameterization: sum d_{j+1} d_j + |b| (+ |alpha|) + d_J."""
    family = Activation(family)
    weights = sum(a * b for a, b in zip(widths[:-1], widths[1:]))
    shifts = sum(widths[:-1])
    per_neuron = shifts * (2 if family is Activation.SUPER_EXPRESSIVE else 1)
    return weights + per_neuron + widths[-1]


# checkpoints ------------------------------------------------------------------------
#
# Named-tensor text format, one tensor per line:
#   <name> <comma-separated shape> <row-major values as repr floats>
# Lines starting with '#' are comments. Scalars use the empty shape "-".


def write_named_tensors(path, tensors: dict[str, np.ndarray], header: str = "") -> None:
    with open(path, "w") as fh:
        fh.write("# stackop named-tensor v1\n")
        for line in header.splitlines():
            fh.write(f"# {line}\n")
        for name, arr in tensors.items():
            arr = np.asarray(arr, dtype=np.float64)
            shape = ",".join(str(s) for s in arr.shape) or "-"
            vals = " ".join(repr(float(v)) for v in arr.reshape(-1))
            fh.write(f"{name} {shape} {vals}\n")


def read_named_tensors(path) -> dict[str, np.ndarray]:
    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split(" ")
            name, shape_s, vals = parts[0], parts[1], parts[2:]
            shape = () if shape_s == "-" else tuple(int(s) for s in shape_s.split(","))
            data = np.array([float(v) for v in vals if v], dtype=np.float64)
            out[name] = data.reshape(shape)
    return out


def mlp_state(mlp: MLP, prefix: str = "") -> dict[str, np.ndarray]:
    state = {f"{prefix}{k}": v.data for k, v in mlp.named_parameters().items()}
    state[f"{prefix}widths"] = np.asarray(mlp.widths, dtype=np.float64)
    return state


def mlp_from_state(state: dict, prefix: str, family) -> MLP:
    widths = [int(w) for w in state[f"{prefix}widths"]]
    family = Activation(family)
    net = MLP(widths, family)
    for j in range(len(widths) - 1):
        net.A.append(ad.parameter(state[f"{prefix}A{j}"]))
        net.b.append(ad.parameter(state[f"{prefix}b{j}"]))
        if family is Activation.SUPER_EXPRESSIVE:
            net.alpha.append(ad.parameter(state[f"{prefix}alpha{j}"]))
    net.c = ad.parameter(state[f"{prefix}c"])
    return net
