"""Dense fully connected networks with hand-derived reverse-mode gradients.

Every tensor is a float64 ``numpy.ndarray``. Weights use the row-batched
convention ``out = x @ W + b`` with ``W`` of shape ``(fan_in, fan_out)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, Mapping

import numpy as np

from .errors import ConfigError, NumericError

Tensor = np.ndarray

HIDDEN_ACTIVATIONS = ("tanh", "leaky_relu")
OUTPUT_ACTIVATIONS = ("identity", "sigmoid", "tanh")


def check_finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")
    return arr


def as_tensor(x, what: str = "tensor") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    return check_finite(arr, what)


@dataclass(frozen=True)
class MlpSpec:
    """Architecture of a fully connected network, input size first."""

    layer_sizes: tuple[int, ...]
    hidden_activation: str = "tanh"
    output_activation: str = "identity"
    leaky_slope: float = 0.2

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2:
            raise ConfigError("an MLP needs at least an input and an output size")
        if any(s < 1 for s in sizes):
            raise ConfigError(f"layer sizes must be positive, got {sizes}")
        if self.hidden_activation not in HIDDEN_ACTIVATIONS:
            raise ConfigError(f"unknown hidden activation {self.hidden_activation!r}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ConfigError(f"unknown output activation {self.output_activation!r}")
        if self.hidden_activation == "leaky_relu" and not 0.0 < self.leaky_slope < 1.0:
            raise ConfigError("leaky_relu slope must lie in (0, 1)")

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    @property
    def in_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def out_dim(self) -> int:
        return self.layer_sizes[-1]

    def param_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        shapes = []
        for i, (fan_in, fan_out) in enumerate(zip(self.layer_sizes[:-1], self.layer_sizes[1:])):
            shapes.append((f"W{i}", (fan_in, fan_out)))
            shapes.append((f"b{i}", (fan_out,)))
        return shapes

    def to_dict(self) -> dict:
        return {
            "layer_sizes": list(self.layer_sizes),
            "hidden_activation": self.hidden_activation,
            "output_activation": self.output_activation,
            "leaky_slope": self.leaky_slope,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "MlpSpec":
        try:
            return cls(
                layer_sizes=tuple(d["layer_sizes"]),
                hidden_activation=d.get("hidden_activation", "tanh"),
                output_activation=d.get("output_activation", "identity"),
                leaky_slope=float(d.get("leaky_slope", 0.2)),
            )
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed network spec: {exc}") from None


class ParamVector:
    """Ordered named parameter segments that flatten to one 1-D vector."""

    def __init__(self, segments: Mapping[str, np.ndarray] | Iterable[tuple[str, np.ndarray]]):
        items = segments.items() if isinstance(segments, Mapping) else segments
        self._segments: dict[str, np.ndarray] = {}
        for name, value in items:
            if name in self._segments:
                raise ConfigError(f"duplicate segment name {name!r}")
            self._segments[name] = np.asarray(value, dtype=np.float64)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._segments[name]

    def __contains__(self, name: str) -> bool:
        return name in self._segments

    def __iter__(self) -> Iterator[str]:
        return iter(self._segments)

    def __len__(self) -> int:
        return len(self._segments)

    def __repr__(self) -> str:
        inner = ", ".join(f"{k}{tuple(v.shape)}" for k, v in self._segments.items())
        return f"ParamVector({inner})"

    def items(self):
        return self._segments.items()

    @property
    def names(self) -> list[str]:
        return list(self._segments)

    @property
    def size(self) -> int:
        return sum(v.size for v in self._segments.values())

    def shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(k, v.shape) for k, v in self._segments.items()]

    def flatten(self) -> np.ndarray:
        if not self._segments:
            return np.zeros(0)
        return np.concatenate([v.ravel() for v in self._segments.values()])

    def unflatten(self, flat: np.ndarray) -> "ParamVector":
        """Return a ParamVector with this layout holding the values of ``flat``."""
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.size,):
            raise ConfigError(f"flat vector of shape {flat.shape} does not match size {self.size}")
        out, start = [], 0
        for name, value in self._segments.items():
            out.append((name, flat[start:start + value.size].reshape(value.shape).copy()))
            start += value.size
        return ParamVector(out)

    def copy(self) -> "ParamVector":
        return ParamVector((k, v.copy()) for k, v in self._segments.items())

    def zeros_like(self) -> "ParamVector":
        return ParamVector((k, np.zeros_like(v)) for k, v in self._segments.items())

    def map(self, fn: Callable[[np.ndarray], np.ndarray]) -> "ParamVector":
        return ParamVector((k, fn(v)) for k, v in self._segments.items())

    def _combine(self, other, op) -> "ParamVector":
        if isinstance(other, ParamVector):
            if other.names != self.names:
                raise ConfigError("parameter layouts differ")
            return ParamVector((k, op(v, other[k])) for k, v in self._segments.items())
        return ParamVector((k, op(v, other)) for k, v in self._segments.items())

    def __add__(self, other):
        return self._combine(other, np.add)

    def __sub__(self, other):
        return self._combine(other, np.subtract)

    def __mul__(self, other):
        return self._combine(other, np.multiply)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return self._combine(other, np.true_divide)


def init_mlp(spec: MlpSpec, rng: np.random.Generator) -> ParamVector:
    """Glorot-uniform weights, zero biases."""
    segments = []
    for name, shape in spec.param_shapes():
        if name.startswith("W"):
            a = np.sqrt(6.0 / (shape[0] + shape[1]))
            segments.append((name, rng.uniform(-a, a, size=shape)))
        else:
            segments.append((name, np.zeros(shape)))
    return ParamVector(segments)


def zeros_mlp(spec: MlpSpec) -> ParamVector:
    return ParamVector((name, np.zeros(shape)) for name, shape in spec.param_shapes())


def _check_layout(spec: MlpSpec, params: ParamVector) -> None:
    expected = spec.param_shapes()
    got = params.shapes()
    if [n for n, _ in expected] != [n for n, _ in got] or any(
        tuple(s) != tuple(g) for (_, s), (_, g) in zip(expected, got)
    ):
        raise ConfigError(f"parameters {got} do not match network layout {expected}")


def _as_batch(x, width: int, what: str) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != width:
        raise ConfigError(f"{what} of shape {np.shape(x)} does not have width {width}")
    return arr, single


def _hidden(spec: MlpSpec, a: np.ndarray) -> np.ndarray:
    if spec.hidden_activation == "tanh":
        return np.tanh(a)
    return np.where(a > 0, a, spec.leaky_slope * a)


def _hidden_grad(spec: MlpSpec, a: np.ndarray, h: np.ndarray) -> np.ndarray:
    if spec.hidden_activation == "tanh":
        return 1.0 - h * h
    return np.where(a > 0, 1.0, spec.leaky_slope)


def _output(spec: MlpSpec, a: np.ndarray) -> np.ndarray:
    if spec.output_activation == "identity":
        return a
    if spec.output_activation == "tanh":
        return np.tanh(a)
    # stable sigmoid
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _output_grad(spec: MlpSpec, y: np.ndarray) -> np.ndarray | None:
    if spec.output_activation == "identity":
        return None
    if spec.output_activation == "tanh":
        return 1.0 - y * y
    return y * (1.0 - y)


@dataclass
class ForwardTrace:
    """Layer inputs and pre-activations kept for the backward pass."""

    inputs: list[np.ndarray]
    preacts: list[np.ndarray]
    output: np.ndarray
    single: bool


def mlp_forward_trace(spec: MlpSpec, params: ParamVector, x, check: bool = True) -> ForwardTrace:
    """Forward pass that records what the backward pass needs.

    ``check=False`` skips layout and finiteness checks; callers that screen
    non-finite rows themselves (the HMC sampler) use it.
    """
    h, single = _as_batch(x, spec.in_dim, "network input")
    if check:
        _check_layout(spec, params)
        check_finite(h, "network input")
    inputs, preacts = [], []
    for i in range(spec.n_layers):
        inputs.append(h)
        a = h @ params[f"W{i}"] + params[f"b{i}"]
        preacts.append(a)
        h = _hidden(spec, a) if i < spec.n_layers - 1 else _output(spec, a)
    if check:
        check_finite(h, "network output")
    return ForwardTrace(inputs, preacts, h, single)


def mlp_forward(spec: MlpSpec, params: ParamVector, x) -> np.ndarray:
    trace = mlp_forward_trace(spec, params, x)
    return trace.output[0] if trace.single else trace.output


def mlp_backward_trace(
    spec: MlpSpec,
    params: ParamVector,
    trace: ForwardTrace,
    upstream,
    param_grads: bool = True,
    check: bool = True,
) -> tuple[ParamVector | None, np.ndarray]:
    """Backpropagate ``upstream`` (dL/d output) through a recorded forward pass.

    Returns gradients of ``sum(upstream * output)`` with respect to every
    parameter (summed over the batch) and with respect to the input rows.
    """
    g, _ = _as_batch(upstream, spec.out_dim, "upstream gradient")
    if g.shape != trace.output.shape:
        raise ConfigError(f"upstream gradient shape {g.shape} != output shape {trace.output.shape}")
    if check:
        check_finite(g, "upstream gradient")
    dout = _output_grad(spec, trace.output)
    if dout is not None:
        g = g * dout
    grads = {}
    for i in reversed(range(spec.n_layers)):
        if param_grads:
            grads[f"W{i}"] = trace.inputs[i].T @ g
            grads[f"b{i}"] = g.sum(axis=0)
        g = g @ params[f"W{i}"].T
        if i > 0:
            g = g * _hidden_grad(spec, trace.preacts[i - 1], trace.inputs[i])
    pv = None
    if param_grads:
        pv = ParamVector((name, grads[name]) for name, _ in spec.param_shapes())
    if check:
        check_finite(g, "input gradient")
        if pv is not None:
            check_finite(pv.flatten(), "parameter gradient")
    return pv, (g[0] if trace.single else g)


def mlp_backward(spec: MlpSpec, params: ParamVector, x, upstream_grad) -> tuple[ParamVector, np.ndarray]:
    trace = mlp_forward_trace(spec, params, x)
    up = np.asarray(upstream_grad, dtype=np.float64)
    if trace.single and up.ndim == 1:
        up = up[None, :]
    return mlp_backward_trace(spec, params, trace, up)


def finite_diff_grad(f: Callable[[ParamVector], float], params: ParamVector, step: float = 1e-5) -> ParamVector:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if not step > 0:
        raise ConfigError("finite-difference step must be positive")
    flat = params.flatten()
    grad = np.empty_like(flat)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        fp = float(f(params.unflatten(flat)))
        flat[i] = old - step
        fm = float(f(params.unflatten(flat)))
        flat[i] = old
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"objective not finite around coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * step)
    return params.unflatten(grad)
