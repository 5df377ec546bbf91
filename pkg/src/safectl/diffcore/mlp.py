"""Feed-forward networks over flat parameter vectors.

A network's parameters live in one flat float64 vector so the optimizer and
checkpoint code never deal with structure.  ``forward`` is a plain numpy
fast path for rollouts; ``forward_on_tape`` builds the identical expression
as tape ops so training can differentiate through it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tape import Tape, TapeError

ACTIVATIONS = ("relu", "tanh")
OUTPUT_ACTIVATIONS = ("affine", "tanh")


@dataclass
class Mlp:
    layer_shapes: list[tuple[int, int]]
    params: np.ndarray
    activation: str = "relu"
    output_activation: str = "affine"
    input_scale: np.ndarray | None = None
    output_scale: np.ndarray | None = None

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(
                f"unknown output activation {self.output_activation!r}")
        if len(self.params) != param_count(self.layer_shapes):
            raise ValueError("parameter vector length does not match shapes")

    @property
    def in_dim(self) -> int:
        return self.layer_shapes[0][0]

    @property
    def out_dim(self) -> int:
        return self.layer_shapes[-1][1]

    def _unpack(self):
        """Yield (W, b) views into the flat parameter vector, layer by layer."""
        off = 0
        for n_in, n_out in self.layer_shapes:
            w = self.params[off:off + n_in * n_out].reshape(n_out, n_in)
            off += n_in * n_out
            b = self.params[off:off + n_out]
            off += n_out
            yield w, b

    def forward(self, x) -> np.ndarray:
        """Evaluate on a single vector (n,) or a batch (B, n)."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.in_dim:
            raise TapeError(
                f"input dim {x.shape[-1]} != first layer in-dim {self.in_dim}")
        if self.input_scale is not None:
            x = x * self.input_scale
        layers = list(self._unpack())
        for i, (w, b) in enumerate(layers):
            x = (np.matmul(x, w.T) if x.ndim == 2 else np.matmul(w, x)) + b
            last = i == len(layers) - 1
            if not last:
                x = np.maximum(x, 0.0) if self.activation == "relu" else np.tanh(x)
            elif self.output_activation == "tanh":
                x = np.tanh(x)
                if self.output_scale is not None:
                    x = x * self.output_scale
        return x

    def forward_on_tape(self, tape: Tape, x, params_handle: int | None = None) -> int:
        """Same computation as ``forward`` built from tape ops.

        ``x`` may be a node handle or a raw array.  Pass ``params_handle``
        to reuse one parameter leaf across several forwards of this net on
        the same tape (required for a single coherent gradient).
        """
        h = x if isinstance(x, (int, np.integer)) else tape.const(x)
        if tape.value(h).shape[-1] != self.in_dim:
            raise TapeError(
                f"input dim {tape.value(h).shape[-1]} != first layer in-dim "
                f"{self.in_dim}")
        if params_handle is None:
            params_handle = tape.param(self.params)
        if self.input_scale is not None:
            h = tape.mul(h, tape.const(self.input_scale))
        off = 0
        n_layers = len(self.layer_shapes)
        for i, (n_in, n_out) in enumerate(self.layer_shapes):
            w = tape.reshape(
                tape.slice1d(params_handle, off, off + n_in * n_out),
                (n_out, n_in))
            off += n_in * n_out
            b = tape.slice1d(params_handle, off, off + n_out)
            off += n_out
            h = tape.add(tape.matvec(w, h), b)
            if i < n_layers - 1:
                h = tape.relu(h) if self.activation == "relu" else tape.tanh(h)
            elif self.output_activation == "tanh":
                h = tape.tanh(h)
                if self.output_scale is not None:
                    h = tape.mul(h, tape.const(self.output_scale))
        return h


def param_count(layer_shapes: list[tuple[int, int]]) -> int:
    return sum(n_in * n_out + n_out for n_in, n_out in layer_shapes)


def layer_shapes_from_sizes(sizes: list[int]) -> list[tuple[int, int]]:
    return [(sizes[i], sizes[i + 1]) for i in range(len(sizes) - 1)]


def init_mlp(sizes: list[int], rng: np.random.Generator, activation="relu",
             output_activation="affine", input_scale=None, output_scale=None,
             out_bias: float = 0.0) -> Mlp:
    """Uniform fan-in initialization: W, b ~ U(-1/sqrt(n_in), 1/sqrt(n_in))."""
    shapes = layer_shapes_from_sizes(sizes)
    chunks = []
    for n_in, n_out in shapes:
        bound = 1.0 / np.sqrt(n_in)
        chunks.append(rng.uniform(-bound, bound, size=n_in * n_out))
        chunks.append(rng.uniform(-bound, bound, size=n_out))
    params = np.concatenate(chunks)
    if out_bias != 0.0:
        params[-shapes[-1][1]:] += out_bias
    return Mlp(
        layer_shapes=shapes,
        params=params,
        activation=activation,
        output_activation=output_activation,
        input_scale=None if input_scale is None else np.asarray(input_scale, dtype=np.float64),
        output_scale=None if output_scale is None else np.asarray(output_scale, dtype=np.float64),
    )


def forward_mlp(net: Mlp, x, tape: Tape, params_handle: int | None = None) -> int:
    """Module-level alias for building a network forward pass on a tape."""
    return net.forward_on_tape(tape, x, params_handle)
