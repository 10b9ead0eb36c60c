"""Parameterized layers composed from autodiff primitives.

Inputs are batched channels-last sequences: (B, T, C) for convolutional blocks
and (B, N, E) for the bi-directional LSTM. Parameter initialization is uniform
fan-in (bound 1/sqrt(fan_in)); batchnorm starts at scale 1, shift 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def same_padding(kernel: int) -> tuple[int, int]:
    """Left/right padding so conv output length is exactly ceil(T / stride)."""
    left = (kernel - 1) // 2
    return left, kernel - 1 - left


class Linear:
    """Affine map on the last axis."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True):
        self.w = ad.parameter(uniform_init(rng, (in_dim, out_dim), in_dim))
        self.b = ad.parameter(uniform_init(rng, (out_dim,), in_dim)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = x @ self.w
        if self.b is not None:
            out = out + self.b
        return out

    def named_params(self, prefix: str):
        yield f"{prefix}.w", self.w
        if self.b is not None:
            yield f"{prefix}.b", self.b


class BatchNorm:
    """Per-channel normalization over the batch and time axes of (B, T, C).

    Train mode uses batch statistics (biased variance) when the batch has at
    least `min_batch` samples, and falls back to running statistics otherwise;
    eval mode always uses running statistics.
    """

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, min_batch: int = 8):
        self.scale = ad.parameter(np.ones(channels, dtype=np.float32))
        self.shift = ad.parameter(np.zeros(channels, dtype=np.float32))
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)
        self.momentum = momentum
        self.eps = eps
        self.min_batch = min_batch

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        if train and x.shape[0] >= self.min_batch:
            mu = x.mean(axis=(0, 1))
            centered = x - mu
            var = (centered * centered).mean(axis=(0, 1))
            m = self.momentum
            self.running_mean = ((1.0 - m) * self.running_mean + m * mu.data).astype(np.float32)
            self.running_var = ((1.0 - m) * self.running_var + m * var.data).astype(np.float32)
            inv = ad.power(var + self.eps, -0.5)
        else:
            centered = x - ad.constant(self.running_mean, dtype=x.dtype)
            inv = ad.constant(1.0 / np.sqrt(self.running_var + self.eps), dtype=x.dtype)
        return centered * inv * self.scale + self.shift

    def named_params(self, prefix: str):
        yield f"{prefix}.scale", self.scale
        yield f"{prefix}.shift", self.shift

    def named_buffers(self, prefix: str):
        # (name, owner, attribute) so checkpoint code can read and restore
        yield f"{prefix}.running_mean", self, "running_mean"
        yield f"{prefix}.running_var", self, "running_var"


@dataclass
class Conv1dBlockSpec:
    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 1
    batchnorm: bool = False
    relu: bool = False

    def __post_init__(self):
        if self.kernel < 1 or self.stride < 1:
            raise ValueError(f"kernel and stride must be >= 1, got {self.kernel}, {self.stride}")


class Conv1dBlock:
    """Conv1d with "same" padding, then optional batchnorm and ReLU."""

    def __init__(self, spec: Conv1dBlockSpec, rng: np.random.Generator):
        self.spec = spec
        fan_in = spec.kernel * spec.in_channels
        self.w = ad.parameter(uniform_init(rng, (spec.kernel, spec.in_channels, spec.out_channels), fan_in))
        self.b = ad.parameter(uniform_init(rng, (spec.out_channels,), fan_in))
        self.bn = BatchNorm(spec.out_channels) if spec.batchnorm else None

    def __call__(self, x: Tensor, train: bool = False) -> Tensor:
        if x.shape[-1] != self.spec.in_channels:
            raise ad.ShapeError(
                f"conv block expected {self.spec.in_channels} input channels, got {x.shape[-1]}"
            )
        left, right = same_padding(self.spec.kernel)
        out = ad.conv1d(x, self.w, self.b, stride=self.spec.stride, pad_left=left, pad_right=right)
        if self.bn is not None:
            out = self.bn(out, train)
        if self.spec.relu:
            out = ad.relu(out)
        return out

    def named_params(self, prefix: str):
        yield f"{prefix}.w", self.w
        yield f"{prefix}.b", self.b
        if self.bn is not None:
            yield from self.bn.named_params(f"{prefix}.bn")

    def named_buffers(self, prefix: str):
        if self.bn is not None:
            yield from self.bn.named_buffers(f"{prefix}.bn")


class LstmCell:
    """Single-direction LSTM cell; gate order i, f, g, o."""

    def __init__(self, input_dim: int, hidden_dim: int, rng: np.random.Generator):
        self.hidden_dim = hidden_dim
        self.wx = ad.parameter(uniform_init(rng, (input_dim, 4 * hidden_dim), input_dim))
        self.wh = ad.parameter(uniform_init(rng, (hidden_dim, 4 * hidden_dim), hidden_dim))
        self.b = ad.parameter(uniform_init(rng, (4 * hidden_dim,), hidden_dim))

    def step(self, x_t: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        """One recurrence step; x_t (B, 1, E), h/c (B, 1, H)."""
        hd = self.hidden_dim
        z = x_t @ self.wx + h @ self.wh + self.b
        i = ad.sigmoid(z.slice((slice(None), slice(None), slice(0, hd))))
        f = ad.sigmoid(z.slice((slice(None), slice(None), slice(hd, 2 * hd))))
        g = ad.tanh(z.slice((slice(None), slice(None), slice(2 * hd, 3 * hd))))
        o = ad.sigmoid(z.slice((slice(None), slice(None), slice(3 * hd, 4 * hd))))
        c_new = f * c + i * g
        h_new = o * ad.tanh(c_new)
        return h_new, c_new

    def run(self, x: Tensor, mask: np.ndarray, reverse: bool = False) -> list[Tensor]:
        """Masked scan over the time axis of x (B, N, E); returns per-step
        hidden states (B, 1, H). Positions with mask 0 keep the previous state."""
        bsz, n, _ = x.shape
        hd = self.hidden_dim
        zeros = np.zeros((bsz, 1, hd), dtype=np.float32)
        h = ad.constant(zeros)
        c = ad.constant(zeros)
        order = range(n - 1, -1, -1) if reverse else range(n)
        states: dict[int, Tensor] = {}
        for t in order:
            x_t = x.slice((slice(None), slice(t, t + 1), slice(None)))
            h_new, c_new = self.step(x_t, h, c)
            m = ad.constant(mask[:, t].reshape(bsz, 1, 1).astype(np.float32))
            keep = ad.constant(1.0 - mask[:, t].reshape(bsz, 1, 1).astype(np.float32))
            h = m * h_new + keep * h
            c = m * c_new + keep * c
            states[t] = h
        return [states[t] for t in range(n)]

    def named_params(self, prefix: str):
        yield f"{prefix}.wx", self.wx
        yield f"{prefix}.wh", self.wh
        yield f"{prefix}.b", self.b


class BiLstm:
    """Bi-directional LSTM over word embeddings.

    Returns per-word hiddens (B, N, 2H), the forward and backward states
    concatenated, plus the raw global feature [h_1 ; h_N] (B, 4H).
    """

    def __init__(self, input_dim: int, hidden_dim: int, rng: np.random.Generator):
        self.hidden_dim = hidden_dim
        self.fwd = LstmCell(input_dim, hidden_dim, rng)
        self.bwd = LstmCell(input_dim, hidden_dim, rng)

    def __call__(self, x: Tensor, mask: np.ndarray) -> tuple[Tensor, Tensor]:
        bsz, n, _ = x.shape
        if n < 1:
            raise ad.ShapeError("bilstm needs at least one word")
        f_states = self.fwd.run(x, mask)
        b_states = self.bwd.run(x, mask, reverse=True)
        per_step = [ad.concat([f, b], axis=2) for f, b in zip(f_states, b_states)]
        hiddens = per_step[0] if n == 1 else ad.concat(per_step, axis=1)

        # h_1 components sit at position 0 for both directions. The forward
        # state at the last padded position equals the final state (the mask
        # freezes it), so no gather is needed there; the backward state at the
        # last *valid* word is picked out with a one-hot sum.
        h1 = per_step[0].reshape((bsz, 2 * self.hidden_dim))
        f_last = f_states[n - 1].reshape((bsz, self.hidden_dim))
        lengths = mask.sum(axis=1).astype(np.int64)
        onehot = np.zeros((bsz, n, 1), dtype=np.float32)
        onehot[np.arange(bsz), lengths - 1, 0] = 1.0
        b_stack = b_states[0] if n == 1 else ad.concat(b_states, axis=1)
        b_last = (b_stack * ad.constant(onehot)).sum(axis=1)
        g_raw = ad.concat([h1, ad.concat([f_last, b_last], axis=1)], axis=1)
        return hiddens, g_raw

    def named_params(self, prefix: str):
        yield from self.fwd.named_params(f"{prefix}.fwd")
        yield from self.bwd.named_params(f"{prefix}.bwd")
