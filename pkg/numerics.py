"""Dense float64 tensors with reverse-mode differentiation, Adam, and checkpoints.

Every forward pass records onto a ``Tape``. Operations are methods of the tape,
so a tensor always knows which recording it belongs to and there is no global
state. ``Tape.backward`` walks the recording once in reverse and accumulates
gradients into the ``Parameter`` objects that were read through ``Tape.param``.

Randomness comes from ``make_rng``: numpy's Philox4x64-10 counter-based
generator keyed through a ``SeedSequence``. Philox uses the round multipliers
0xD2E7470EE14C6C93 / 0xCA5A826395121157 and the Weyl key increments
0x9E3779B97F4A7C15 / 0xBB67AE8584CAA73B, so a given seed yields the same stream
on every platform.
"""

from __future__ import annotations

import logging
import math
import os
import struct
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from errors import ConfigError, DataError, NumericsError, ShapeError, TapeError

SEED_LIMIT = 2**64
CHECKPOINT_MAGIC = b"SMCKPT01"

Backward = Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


def make_rng(seed: int, *streams: int) -> np.random.Generator:
    """Return a Philox generator for a 64-bit seed and optional sub-stream ids."""
    if not 0 <= seed < SEED_LIMIT:
        raise ConfigError(f"seed must be an unsigned 64-bit integer, got {seed}")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, *streams])))


def derive_seed(seed: int, *streams: int) -> int:
    """Derive an independent 64-bit seed for a named sub-stream."""
    if not 0 <= seed < SEED_LIMIT:
        raise ConfigError(f"seed must be an unsigned 64-bit integer, got {seed}")
    return int(np.random.SeedSequence([seed, *streams]).generate_state(1, np.uint64)[0])


class Parameter:
    """A trainable array with its accumulated gradient."""

    def __init__(self, name: str, values: np.ndarray):
        """Copy ``values`` as float64 and allocate a zero gradient of the same shape."""
        self.name = name
        self.values = np.array(values, dtype=np.float64)
        self.gradient = np.zeros_like(self.values)

    @property
    def shape(self) -> tuple[int, ...]:
        """Shape of the parameter array."""
        return self.values.shape

    def zero_grad(self) -> None:
        """Reset the accumulated gradient."""
        self.gradient.fill(0.0)

    def __repr__(self) -> str:
        """Show the parameter name and shape."""
        return f"Parameter({self.name!r}, shape={self.shape})"


class Tensor:
    """A value recorded on a tape."""

    __slots__ = ("index", "tape", "values")

    def __init__(self, values: np.ndarray, tape: Tape, index: int):
        """Bind recorded values to their node on ``tape``."""
        self.values = values
        self.tape = tape
        self.index = index

    @property
    def shape(self) -> tuple[int, ...]:
        """Shape of the recorded values."""
        return self.values.shape

    def item(self) -> float:
        """Return the value of a single-element tensor."""
        return float(self.values.reshape(-1)[0])

    def __repr__(self) -> str:
        """Show shape and tape position."""
        return f"Tensor(shape={self.shape}, node={self.index})"


@dataclass
class _Node:
    inputs: tuple[int, ...]
    backward: Backward | None
    parameter: Parameter | None = None


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Tape:
    """Records one forward pass and replays it backwards.

    ``training`` switches dropout on; ``seed`` keys the dropout masks so a
    training step is reproducible.
    """

    def __init__(self, *, training: bool = False, seed: int = 0):
        """Create an empty recording."""
        self.training = training
        self._seed = seed
        self._rng: np.random.Generator | None = None
        self._nodes: list[_Node] = []
        self._param_nodes: dict[int, Tensor] = {}
        self._consumed = False

    def __len__(self) -> int:
        """Return the number of recorded nodes."""
        return len(self._nodes)

    def _record(
        self,
        op: str,
        values: np.ndarray,
        inputs: Sequence[Tensor] = (),
        backward: Backward | None = None,
        parameter: Parameter | None = None,
    ) -> Tensor:
        if self._consumed:
            raise TapeError("Tape was already consumed by backward(); record a new forward pass.")
        for tensor in inputs:
            if tensor.tape is not self:
                raise TapeError(f"{op}: operand belongs to a different tape")
        values = np.asarray(values)
        if not np.all(np.isfinite(values)):
            raise NumericsError(f"{op} produced non-finite values (shape {values.shape})")
        self._nodes.append(_Node(tuple(t.index for t in inputs), backward, parameter))
        return Tensor(values, self, len(self._nodes) - 1)

    def constant(self, values: np.ndarray | float | Sequence[float]) -> Tensor:
        """Record a value that receives no gradient."""
        return self._record("constant", np.array(values, dtype=np.float64))

    def zeros(self, *shape: int) -> Tensor:
        """Record a zero constant of the given shape."""
        return self.constant(np.zeros(shape))

    def param(self, parameter: Parameter) -> Tensor:
        """Read a parameter; its gradient accumulates on ``backward``."""
        cached = self._param_nodes.get(id(parameter))
        if cached is not None:
            return cached
        tensor = self._record(parameter.name, parameter.values, parameter=parameter)
        self._param_nodes[id(parameter)] = tensor
        return tensor

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        """Matrix product for 1-D and 2-D operands (numpy ``@`` shape rules)."""
        x, y = a.values, b.values
        if x.ndim not in (1, 2) or y.ndim not in (1, 2) or x.shape[-1] != y.shape[0]:
            raise ShapeError(f"matmul shape mismatch: {x.shape} @ {y.shape}")

        def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
            if x.ndim == 1 and y.ndim == 1:
                return g * y, g * x
            if x.ndim == 1:
                return y @ g, np.outer(x, g)
            if y.ndim == 1:
                return np.outer(g, y), x.T @ g
            return g @ y.T, x.T @ g

        return self._record("matmul", x @ y, (a, b), backward)

    def _broadcast(self, op: str, a: Tensor, b: Tensor) -> None:
        try:
            np.broadcast_shapes(a.shape, b.shape)
        except ValueError as e:
            raise ShapeError(f"{op} shape mismatch: {a.shape} vs {b.shape}") from e

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        """Elementwise sum with numpy broadcasting."""
        self._broadcast("add", a, b)

        def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

        return self._record("add", a.values + b.values, (a, b), backward)

    def sub(self, a: Tensor, b: Tensor) -> Tensor:
        """Elementwise difference with numpy broadcasting."""
        self._broadcast("sub", a, b)

        def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
            return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

        return self._record("sub", a.values - b.values, (a, b), backward)

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        """Elementwise product with numpy broadcasting."""
        self._broadcast("mul", a, b)
        x, y = a.values, b.values

        def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
            return _unbroadcast(g * y, a.shape), _unbroadcast(g * x, b.shape)

        return self._record("mul", x * y, (a, b), backward)

    def scale(self, a: Tensor, factor: float) -> Tensor:
        """Multiply by a fixed scalar."""

        def backward(g: np.ndarray) -> tuple[np.ndarray]:
            return (g * factor,)

        return self._record("scale", a.values * factor, (a,), backward)

    def concat(self, parts: Sequence[Tensor]) -> Tensor:
        """Concatenate along the last axis."""
        if not parts:
            raise ShapeError("concat needs at least one tensor")
        leading = {p.shape[:-1] for p in parts}
        if len(leading) != 1:
            raise ShapeError(f"concat shape mismatch: {[p.shape for p in parts]}")
        bounds = np.cumsum([0, *(p.shape[-1] for p in parts)])

        def backward(g: np.ndarray) -> tuple[np.ndarray, ...]:
            return tuple(g[..., lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:], strict=True))

        values = np.concatenate([p.values for p in parts], axis=-1)
        return self._record("concat", values, parts, backward)

    def take_last(self, a: Tensor, start: int, stop: int) -> Tensor:
        """Slice ``a[..., start:stop]``."""
        width = a.shape[-1]

        def backward(g: np.ndarray) -> tuple[np.ndarray]:
            full = np.zeros(a.shape[:-1] + (width,))
            full[..., start:stop] = g
            return (full,)

        return self._record("slice", a.values[..., start:stop].copy(), (a,), backward)

    def split(self, a: Tensor, parts: int = 3) -> list[Tensor]:
        """Split the last axis into ``parts`` equal segments."""
        width = a.shape[-1]
        if width % parts:
            raise ShapeError(f"cannot split last axis of {a.shape} into {parts} equal parts")
        step = width // parts
        return [self.take_last(a, i * step, (i + 1) * step) for i in range(parts)]

    def relu(self, a: Tensor) -> Tensor:
        """Rectified linear unit."""
        mask = a.values > 0

        def backward(g: np.ndarray) -> tuple[np.ndarray]:
            return (g * mask,)

        return self._record("relu", np.where(mask, a.values, 0.0), (a,), backward)

    def sigmoid(self, a: Tensor) -> Tensor:
        """Logistic function, computed without overflow."""
        x = a.values
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)

        def backward(g: np.ndarray) -> tuple[np.ndarray]:
            return (g * out * (1.0 - out),)

        return self._record("sigmoid", out, (a,), backward)

    def tanh(self, a: Tensor) -> Tensor:
        """Hyperbolic tangent."""
        out = np.tanh(a.values)

        def backward(g: np.ndarray) -> tuple[np.ndarray]:
            return (g * (1.0 - out * out),)

        return self._record("tanh", out, (a,), backward)

    def log(self, a: Tensor) -> Tensor:
        """Natural logarithm; inputs must be positive."""
        x = a.values
        if np.any(x <= 0):
            raise NumericsError("log of a non-positive value")

        def backward(g: np.ndarray) -> tuple[np.ndarray]:
            return (g / x,)

        return self._record("log", np.log(x), (a,), backward)

    def clip(self, a: Tensor, lo: float, hi: float) -> Tensor:
        """Clamp into ``[lo, hi]``; the gradient is zero where clamping applied."""
        inside = (a.values >= lo) & (a.values <= hi)

        def backward(g: np.ndarray) -> tuple[np.ndarray]:
            return (g * inside,)

        return self._record("clip", np.clip(a.values, lo, hi), (a,), backward)

    def row_mean(self, a: Tensor) -> Tensor:
        """Mean over rows of an ``[n, d]`` tensor; zero vector when ``n == 0``."""
        if a.values.ndim != 2:
            raise ShapeError(f"row_mean expects a 2-D tensor, got {a.shape}")
        rows, width = a.shape
        if rows == 0:
            return self.zeros(width)

        def backward(g: np.ndarray) -> tuple[np.ndarray]:
            return (np.broadcast_to(g / rows, (rows, width)).copy(),)

        return self._record("row_mean", a.values.mean(axis=0), (a,), backward)

    def row_sum(self, a: Tensor) -> Tensor:
        """Sum over rows of an ``[n, d]`` tensor; zero vector when ``n == 0``."""
        if a.values.ndim != 2:
            raise ShapeError(f"row_sum expects a 2-D tensor, got {a.shape}")
        rows, width = a.shape

        def backward(g: np.ndarray) -> tuple[np.ndarray]:
            return (np.broadcast_to(g, (rows, width)).copy(),)

        return self._record("row_sum", a.values.sum(axis=0), (a,), backward)

    def sum(self, a: Tensor) -> Tensor:
        """Sum of every element, as a 0-d tensor."""

        def backward(g: np.ndarray) -> tuple[np.ndarray]:
            return (np.full(a.shape, float(g)),)

        return self._record("sum", np.array(a.values.sum()), (a,), backward)

    def gather(self, a: Tensor, ids: Sequence[int] | np.ndarray) -> Tensor:
        """Select entries along axis 0; repeated ids accumulate their gradients."""
        index = np.asarray(ids, dtype=np.intp).reshape(-1)
        if index.size and (index.min() < 0 or index.max() >= a.shape[0]):
            raise ShapeError(f"gather index out of range for axis of size {a.shape[0]}")

        def backward(g: np.ndarray) -> tuple[np.ndarray]:
            full = np.zeros(a.shape)
            np.add.at(full, index, g)
            return (full,)

        return self._record("gather", a.values[index], (a,), backward)

    def reshape(self, a: Tensor, shape: tuple[int, ...]) -> Tensor:
        """Reshape without copying semantics."""
        try:
            values = a.values.reshape(shape)
        except ValueError as e:
            raise ShapeError(f"cannot reshape {a.shape} to {shape}") from e

        def backward(g: np.ndarray) -> tuple[np.ndarray]:
            return (g.reshape(a.shape),)

        return self._record("reshape", values, (a,), backward)

    def transpose(self, a: Tensor) -> Tensor:
        """Transpose a 2-D tensor."""
        if a.values.ndim != 2:
            raise ShapeError(f"transpose expects a 2-D tensor, got {a.shape}")

        def backward(g: np.ndarray) -> tuple[np.ndarray]:
            return (g.T,)

        return self._record("transpose", a.values.T.copy(), (a,), backward)

    def dropout(self, a: Tensor, p: float) -> Tensor:
        """Inverted dropout: active only on training tapes, identity otherwise."""
        if not 0.0 <= p < 1.0:
            raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
        if not self.training or p == 0.0:
            return a
        if self._rng is None:
            self._rng = make_rng(self._seed)
        keep = (self._rng.random(a.shape) >= p) / (1.0 - p)

        def backward(g: np.ndarray) -> tuple[np.ndarray]:
            return (g * keep,)

        return self._record("dropout", a.values * keep, (a,), backward)

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(parameter) into every parameter read on this tape."""
        if self._consumed:
            raise TapeError("Tape was already consumed by backward(); record a new forward pass.")
        if loss.tape is not self:
            raise TapeError("loss was recorded on a different tape")
        if loss.values.size != 1:
            raise TapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        grads: list[np.ndarray | None] = [None] * (loss.index + 1)
        grads[loss.index] = np.ones_like(loss.values)
        for index in range(loss.index, -1, -1):
            grad = grads[index]
            if grad is None:
                continue
            node = self._nodes[index]
            if node.parameter is not None:
                node.parameter.gradient += grad
            if node.backward is None:
                continue
            for source, contribution in zip(node.inputs, node.backward(grad), strict=True):
                if contribution is None:
                    continue
                previous = grads[source]
                grads[source] = contribution if previous is None else previous + contribution
        self._consumed = True
        self._nodes.clear()
        self._param_nodes.clear()


def backward(loss: Tensor) -> None:
    """Run reverse-mode differentiation from ``loss`` over the tape it was recorded on."""
    loss.tape.backward(loss)


@dataclass
class AdamState:
    """Moment buffers and hyperparameters for Adam with decoupled weight decay."""

    lr: float = 0.0005
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Sequence[Parameter], state: AdamState) -> None:
    """Apply one Adam update, then zero every gradient.

    Weight decay is decoupled: ``p <- p - lr * weight_decay * p`` runs before the
    moment update.
    """
    state.step += 1
    correction1 = 1.0 - state.beta1**state.step
    correction2 = 1.0 - state.beta2**state.step
    for param in params:
        m = state.first_moment.get(param.name)
        if m is None:
            m = state.first_moment[param.name] = np.zeros_like(param.values)
            state.second_moment[param.name] = np.zeros_like(param.values)
        v = state.second_moment[param.name]
        if m.shape != param.shape:
            raise ShapeError(f"Adam moment for {param.name} has shape {m.shape}, not {param.shape}")
        if state.weight_decay:
            param.values -= state.lr * state.weight_decay * param.values
        g = param.gradient
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        param.values -= state.lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        param.zero_grad()


def uniform_init(shape: tuple[int, ...], lo: float, hi: float, seed: int) -> np.ndarray:
    """Draw a float64 array uniformly from ``[lo, hi)``."""
    if not lo < hi:
        raise ConfigError(f"uniform_init needs lo < hi, got ({lo}, {hi})")
    return make_rng(seed).uniform(lo, hi, size=shape)


@dataclass(frozen=True)
class GradCheckReport:
    """Outcome of comparing analytic and finite-difference gradients."""

    max_rel_error: float
    tolerance: float
    checked: int
    worst: str = ""

    @property
    def passed(self) -> bool:
        """True when every sampled entry is within tolerance."""
        return self.max_rel_error < self.tolerance


def grad_check(
    loss_fn: Callable[[Tape], Tensor],
    params: Sequence[Parameter],
    tolerance: float = 1e-5,
    samples: int = 24,
    seed: int = 0,
    h: float = 1e-6,
    floor: float = 1e-2,
) -> GradCheckReport:
    """Compare backward() against central differences on sampled entries.

    ``loss_fn`` records a forward pass on the (evaluation-mode) tape it is
    given. The relative error of each entry is ``|a - n| / max(|a|, |n|, floor)``.
    """
    saved = [p.gradient.copy() for p in params]
    for p in params:
        p.zero_grad()
    tape = Tape()
    backward(loss_fn(tape))
    analytic = [p.gradient.copy() for p in params]
    for p, grad in zip(params, saved, strict=True):
        p.gradient[...] = grad

    rng = make_rng(seed)
    worst = 0.0
    worst_name = ""
    checked = 0
    for p, grad in zip(params, analytic, strict=True):
        flat = p.values.reshape(-1)
        picks = rng.choice(flat.size, size=min(samples, flat.size), replace=False)
        for pick in picks:
            original = flat[pick]
            flat[pick] = original + h
            plus = loss_fn(Tape()).item()
            flat[pick] = original - h
            minus = loss_fn(Tape()).item()
            flat[pick] = original
            numeric = (plus - minus) / (2.0 * h)
            exact = grad.reshape(-1)[pick]
            err = abs(exact - numeric) / max(abs(exact), abs(numeric), floor)
            checked += 1
            if err > worst:
                worst = err
                worst_name = f"{p.name}[{int(pick)}]"
    if worst >= tolerance:
        logging.warning("grad_check failed: %.3e at %s", worst, worst_name)
    return GradCheckReport(worst, tolerance, checked, worst_name)


def save_checkpoint(params: Sequence[Parameter], path: Path) -> None:
    """Write parameters in the length-prefixed named-tensor format.

    Layout (little-endian): 8-byte magic ``SMCKPT01``, u32 tensor count, then per
    tensor: u32 name length, UTF-8 name, u32 ndim, ndim x u64 dims, and the raw
    float64 values in row-major order. A ``<path>.manifest.txt`` lists each
    name with its shape.
    """
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", len(params))]
    manifest = []
    for param in params:
        name = param.name.encode("utf-8")
        chunks.append(struct.pack("<I", len(name)))
        chunks.append(name)
        chunks.append(struct.pack("<I", param.values.ndim))
        chunks.append(struct.pack(f"<{param.values.ndim}Q", *param.values.shape))
        chunks.append(np.ascontiguousarray(param.values, dtype="<f8").tobytes())
        manifest.append(f"{param.name}\t{'x'.join(str(d) for d in param.shape)}\n")
    atomic_write(path, b"".join(chunks))
    atomic_write(manifest_path(path), "".join(manifest).encode("utf-8"))


def manifest_path(path: Path) -> Path:
    """Return the text manifest written beside a checkpoint."""
    return path.with_name(path.name + ".manifest.txt")


def load_checkpoint(path: Path) -> dict[str, np.ndarray]:
    """Read a checkpoint written by ``save_checkpoint``."""
    try:
        data = path.read_bytes()
    except OSError as e:
        raise DataError(f"Failed to read checkpoint {path}. Check that it exists.") from e
    if not data.startswith(CHECKPOINT_MAGIC):
        raise DataError(f"{path} is not a checkpoint (bad magic header)")
    offset = len(CHECKPOINT_MAGIC)
    try:
        (count,) = struct.unpack_from("<I", data, offset)
        offset += 4
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", data, offset)
            offset += 4
            name = data[offset : offset + name_len].decode("utf-8")
            offset += name_len
            (ndim,) = struct.unpack_from("<I", data, offset)
            offset += 4
            shape = struct.unpack_from(f"<{ndim}Q", data, offset)
            offset += 8 * ndim
            size = math.prod(shape)
            values = np.frombuffer(data, dtype="<f8", count=size, offset=offset)
            offset += 8 * size
            tensors[name] = values.reshape(shape).astype(np.float64)
    except (struct.error, ValueError, UnicodeDecodeError) as e:
        raise DataError(f"Checkpoint {path} is truncated or corrupt.") from e
    if offset != len(data):
        raise DataError(f"Checkpoint {path} has {len(data) - offset} trailing bytes.")
    return tensors


def restore_parameters(params: Sequence[Parameter], tensors: dict[str, np.ndarray]) -> None:
    """Copy named arrays into matching parameters."""
    for param in params:
        if param.name not in tensors:
            raise DataError(f"Checkpoint has no tensor named {param.name}")
        values = tensors[param.name]
        if values.shape != param.shape:
            raise ShapeError(
                f"Checkpoint tensor {param.name} has shape {values.shape}, expected {param.shape}"
            )
        param.values[...] = values


def atomic_write(path: Path, payload: bytes) -> None:
    """Write ``payload`` to a temporary sibling, then rename it over ``path``."""
    tmp = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp.write_bytes(payload)
        os.replace(tmp, path)
    except OSError as e:
        raise DataError(f"Failed to write {path}. Check disk space and permissions.") from e
