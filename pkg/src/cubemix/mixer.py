"""Cubic-mixer blocks and the paired real/imaginary spectral networks."""
from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from .autodiff import DimensionError, Tensor, axis_linear, relu
from .spectral import SpectralPlanes, fft2, ifft2_real

SPECTRAL_INPUTS = ("split", "real", "imag")


@dataclass
class MixerBlockParams:
    """Weights of one block: a two-layer MLP along each of W, H and C.

    ``w1``/``w2`` mix the width axis, ``w3``/``w4`` the height axis and
    ``w5``/``w6`` the channel axis.  Weight ``w`` of shape ``(d_in, d_out)``
    maps each fiber ``v`` to ``w.T @ v + b``.
    """

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    w3: Tensor
    b3: Tensor
    w4: Tensor
    b4: Tensor
    w5: Tensor
    b5: Tensor
    w6: Tensor
    b6: Tensor

    def __post_init__(self):
        for first, second in (("w1", "w2"), ("w3", "w4"), ("w5", "w6")):
            a, b = getattr(self, first), getattr(self, second)
            if a.shape[1] != b.shape[0] or a.shape[0] != b.shape[1]:
                raise DimensionError(f"{first}{a.shape} and {second}{b.shape} do not chain")

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return self.w1.shape[0], self.w3.shape[0], self.w5.shape[0]

    def named(self) -> dict[str, Tensor]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def init(cls, W: int, H: int, C: int, hidden_ratio: float = 1.0, rng=None, dtype=np.float64):
        """Uniform(+-1/sqrt(fan_in)) weights, zero biases."""
        rng = np.random.default_rng() if rng is None else rng
        parts = {}
        for k, d in zip((1, 3, 5), (W, H, C)):
            dh = hidden_size(d, hidden_ratio)
            parts[f"w{k}"] = _uniform(rng, (d, dh), d, dtype)
            parts[f"b{k}"] = Tensor(np.zeros(dh, dtype=dtype))
            parts[f"w{k + 1}"] = _uniform(rng, (dh, d), dh, dtype)
            parts[f"b{k + 1}"] = Tensor(np.zeros(d, dtype=dtype))
        return cls(**parts)


@dataclass
class CubicMixerParams:
    blocks: list[MixerBlockParams] = field(default_factory=list)

    def named(self) -> dict[str, Tensor]:
        out = {}
        for i, blk in enumerate(self.blocks):
            for k, v in blk.named().items():
                out[f"block{i}.{k}"] = v
        return out

    @classmethod
    def init(cls, n_blocks, W, H, C, hidden_ratio=1.0, rng=None, dtype=np.float64):
        rng = np.random.default_rng() if rng is None else rng
        return cls([MixerBlockParams.init(W, H, C, hidden_ratio, rng, dtype) for _ in range(n_blocks)])


def hidden_size(d: int, ratio: float) -> int:
    return max(1, int(round(d * ratio)))


def _uniform(rng, shape, fan_in, dtype) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype))


def block_param_count(W: int, H: int, C: int, Wh: int, Hh: int, Ch: int) -> int:
    """Closed-form scalar count of one mixer block, weights plus biases."""
    weights = 2 * (W * Wh + H * Hh + C * Ch)
    biases = Wh + W + Hh + H + Ch + C
    return weights + biases


def _mlp(x: Tensor, axis: str, wa, ba, wb, bb) -> Tensor:
    return x + axis_linear(relu(axis_linear(x, axis, wa, ba)), axis, wb, bb)


def mixer_block(x: Tensor, p: MixerBlockParams) -> Tensor:
    """Residual two-layer MLP mixing along W, then H, then C."""
    if tuple(x.shape[-3:]) != p.input_shape:
        raise DimensionError(f"mixer_block: input {x.shape[-3:]} != block size {p.input_shape}")
    f = _mlp(x, "W", p.w1, p.b1, p.w2, p.b2)
    f = _mlp(f, "H", p.w3, p.b3, p.w4, p.b4)
    return _mlp(f, "C", p.w5, p.b5, p.w6, p.b6)


def cubic_mixer(x: Tensor, p: CubicMixerParams) -> Tensor:
    for blk in p.blocks:
        x = mixer_block(x, blk)
    return x


def _route(s: SpectralPlanes, spectral_input: str) -> tuple[Tensor, Tensor]:
    if spectral_input == "split":
        return s.real, s.imag
    if spectral_input == "real":
        return s.real, s.real
    if spectral_input == "imag":
        return s.imag, s.imag
    raise ValueError(f"spectral_input must be one of {SPECTRAL_INPUTS}, got {spectral_input!r}")


def wfp_apply(
    b_low: Tensor,
    phi1: CubicMixerParams,
    phi2: CubicMixerParams,
    spectral_input: str = "split",
) -> Tensor:
    """Transform, filter the two coefficient planes independently, invert.

    ``phi1``'s output becomes the real plane and ``phi2``'s the imaginary
    plane of the recombined spectrum.  ``spectral_input`` selects what each
    network sees: ``"split"`` (real to ``phi1``, imaginary to ``phi2``),
    or ``"real"``/``"imag"`` to feed the same plane to both.
    """
    a, b = _route(fft2(b_low), spectral_input)
    return ifft2_real(SpectralPlanes(cubic_mixer(a, phi1), cubic_mixer(b, phi2)))


def wfp_trace(b_low, phi1, phi2, spectral_input="split") -> list[SpectralPlanes]:
    """Spectra after each block pair: input spectrum first, then one per block."""
    a, b = _route(fft2(b_low), spectral_input)
    trace = [SpectralPlanes(a, b)]
    for blk1, blk2 in zip(phi1.blocks, phi2.blocks):
        a, b = mixer_block(a, blk1), mixer_block(b, blk2)
        trace.append(SpectralPlanes(a, b))
    return trace
