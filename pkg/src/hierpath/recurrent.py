"""Recurrent heads: bidirectional LSTM stacks, residual output arcs, and the
encoder/decoder pair used for variable-length paths."""

from __future__ import annotations

import numpy as np

from .errors import DimensionError
from .tensor import Tensor, _sigmoid, concat

GATES = ("input", "forget", "output", "candidate")


def orthogonal_init(rows: int, cols: int, rng) -> np.ndarray:
    """Seeded orthogonal matrix: the smaller-dimension Gram product is I.

    QR of a Gaussian sample with the signs fixed so the diagonal of R is
    positive, which makes the factorization (and so the output) unique.
    """
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    transpose = rows < cols
    a = rng.standard_normal((cols, rows) if transpose else (rows, cols))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    return q.T if transpose else q


def _param(data) -> Tensor:
    return Tensor(data, requires_grad=True)


class LstmCell:
    """Single-direction LSTM cell with one weight triple per gate."""

    def __init__(self, input_size: int, hidden_size: int, rng):
        self.input_size = input_size
        self.hidden_size = hidden_size
        self.params: dict[str, Tensor] = {}
        for gate in GATES:
            self.params[f"{gate}_wx"] = _param(orthogonal_init(input_size, hidden_size, rng))
            self.params[f"{gate}_wh"] = _param(orthogonal_init(hidden_size, hidden_size, rng))
            bias = np.ones(hidden_size) if gate == "forget" else np.zeros(hidden_size)
            self.params[f"{gate}_b"] = _param(bias)

    def initial_state(self, batch: int):
        zeros = Tensor(np.zeros((batch, self.hidden_size)))
        return zeros, zeros

    def step(self, x: Tensor, h: Tensor, c: Tensor):
        if x.shape[-1] != self.input_size:
            raise DimensionError(
                f"cell expects input size {self.input_size}, got {x.shape[-1]}")
        p = self.params

        def gate(name):
            return x @ p[f"{name}_wx"] + h @ p[f"{name}_wh"] + p[f"{name}_b"]

        i = gate("input").sigmoid()
        f = gate("forget").sigmoid()
        o = gate("output").sigmoid()
        g = gate("candidate").tanh()
        c_next = f * c + i * g
        h_next = o * c_next.tanh()
        return h_next, c_next

    def parameters(self) -> dict:
        return dict(self.params)


class BiLstmLayer:
    """Forward and backward cells; per-step outputs are concatenated."""

    def __init__(self, input_size: int, hidden_size: int, rng):
        self.fwd = LstmCell(input_size, hidden_size, rng)
        self.bwd = LstmCell(input_size, hidden_size, rng)
        self.output_size = 2 * hidden_size

    def forward(self, inputs):
        batch = inputs[0].shape[0]
        h, c = self.fwd.initial_state(batch)
        fwd_states = []
        for x in inputs:
            h, c = self.fwd.step(x, h, c)
            fwd_states.append(h)
        fwd_final = h
        h, c = self.bwd.initial_state(batch)
        bwd_states = []
        for x in reversed(inputs):
            h, c = self.bwd.step(x, h, c)
            bwd_states.append(h)
        bwd_final = h
        bwd_states.reverse()
        outputs = [concat([f, b], axis=1) for f, b in zip(fwd_states, bwd_states)]
        final = concat([fwd_final, bwd_final], axis=1)
        return outputs, final

    def parameters(self) -> dict:
        out = {}
        for name, t in self.fwd.parameters().items():
            out[f"fwd.{name}"] = t
        for name, t in self.bwd.parameters().items():
            out[f"bwd.{name}"] = t
        return out


class RnnStack:
    """Stacked bidirectional LSTM layers with an optional output projection."""

    def __init__(self, input_size: int, hidden_size: int, num_layers: int,
                 output_size: int | None, rng):
        self.layers = []
        size = input_size
        for _ in range(num_layers):
            layer = BiLstmLayer(size, hidden_size, rng)
            self.layers.append(layer)
            size = layer.output_size
        self.state_size = size
        self.output_size = output_size
        if output_size is not None:
            self.proj_w = _param(orthogonal_init(size, output_size, rng))
            self.proj_b = _param(np.zeros(output_size))

    def forward(self, inputs):
        """Per-step outputs (projected if configured) and the final state."""
        if not inputs:
            raise DimensionError("at least one recurrent step is required")
        seq = list(inputs)
        if any(x.data.ndim != 2 for x in seq):
            seq = [x.reshape(1, -1) if x.data.ndim == 1 else x for x in seq]
        final = None
        for layer in self.layers:
            seq, final = layer.forward(seq)
        if self.output_size is not None:
            seq = [h @ self.proj_w + self.proj_b for h in seq]
        return seq, final

    def parameters(self) -> dict:
        out = {}
        for i, layer in enumerate(self.layers):
            for name, t in layer.parameters().items():
                out[f"layer{i}.{name}"] = t
        if self.output_size is not None:
            out["proj.w"] = self.proj_w
            out["proj.b"] = self.proj_b
        return out


def rnn_forward(inputs, stack: RnnStack):
    return stack.forward(inputs)


class ResidualArc:
    """Additive shortcut from the converted CNN features to the head output.

    The feature branch goes through a fixed (seeded, non-trainable) projection
    that aligns length p with the class dimension; the head branch goes
    through a trainable linear map initialized at zero, so at initialization
    the arc passes the aligned features through unchanged.
    """

    def __init__(self, feature_size: int, num_classes: int, rng):
        rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
        scale = 1.0 / np.sqrt(feature_size)
        self.align = Tensor(rng.standard_normal((feature_size, num_classes)) * scale)
        self.z_w = _param(np.zeros((num_classes, num_classes)))
        self.z_b = _param(np.zeros(num_classes))

    def apply(self, u: Tensor, o: Tensor) -> Tensor:
        if u.shape[-1] != self.align.shape[0]:
            raise DimensionError(
                f"residual arc expects features of size {self.align.shape[0]}, "
                f"got {u.shape[-1]}")
        if o.shape[-1] != self.align.shape[1]:
            raise DimensionError(
                f"residual arc expects outputs of size {self.align.shape[1]}, "
                f"got {o.shape[-1]}")
        return (u @ self.align) + (o @ self.z_w + self.z_b)

    def parameters(self) -> dict:
        return {"z.w": self.z_w, "z.b": self.z_b}


def residual_output(u: Tensor, o: Tensor, arc: ResidualArc) -> Tensor:
    return arc.apply(u, o)


class Seq2Seq:
    """Bidirectional encoder feeding a unidirectional decoder.

    The decoder's initial hidden state is the encoder's final state reduced
    to the decoder size; each step consumes the previous step's output vector
    (ground-truth one-hot under teacher forcing, the model's own output at
    inference) starting from a zero vector.
    """

    def __init__(self, input_size: int, hidden_size: int, num_layers: int,
                 num_classes: int, rng):
        self.encoder = RnnStack(input_size, hidden_size, num_layers, None, rng)
        self.num_classes = num_classes
        self.hidden_size = hidden_size
        self.reduce_w = _param(orthogonal_init(self.encoder.state_size, hidden_size, rng))
        self.reduce_b = _param(np.zeros(hidden_size))
        self.cell = LstmCell(num_classes, hidden_size, rng)
        self.proj_w = _param(orthogonal_init(hidden_size, num_classes, rng))
        self.proj_b = _param(np.zeros(num_classes))

    def encode(self, inputs) -> Tensor:
        _, final = self.encoder.forward(inputs)
        return final @ self.reduce_w + self.reduce_b

    def start_output(self, batch: int) -> Tensor:
        return Tensor(np.zeros((batch, self.num_classes)))

    def decode_step(self, prev_output: Tensor, state):
        h, c = state
        h, c = self.cell.step(prev_output, h, c)
        o = h @ self.proj_w + self.proj_b
        return o, (h, c)

    def decode(self, initial_hidden: Tensor, steps: int, teacher=None,
               feedback: str = "softmax"):
        """Run the decoder for ``steps`` steps.

        Under teacher forcing, ``teacher[t]`` is the ground-truth encoding of
        the level-(t+1) label, fed as the input of step t+2.  Without a
        teacher the model's own (softmax or sigmoid) output is fed back.

        The cell state also starts from the reduced encoder state; seeding
        only the hidden state leaves the image signal too attenuated for the
        decoder to pick up.
        """
        batch = initial_hidden.shape[0]
        state = (initial_hidden, initial_hidden)
        prev = self.start_output(batch)
        outputs = []
        for t in range(steps):
            o, state = self.decode_step(prev, state)
            outputs.append(o)
            if teacher is not None and t < steps - 1:
                prev = teacher[t]
            elif feedback == "sigmoid":
                prev = Tensor(_sigmoid(o.data))
            else:
                prev = Tensor(_softmax_rows(o.data))
        return outputs

    def parameters(self) -> dict:
        out = {f"enc.{k}": v for k, v in self.encoder.parameters().items()}
        out["reduce.w"] = self.reduce_w
        out["reduce.b"] = self.reduce_b
        for k, v in self.cell.parameters().items():
            out[f"dec.{k}"] = v
        out["dec.proj.w"] = self.proj_w
        out["dec.proj.b"] = self.proj_b
        return out


def _softmax_rows(a: np.ndarray) -> np.ndarray:
    e = np.exp(a - a.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)
