"""Per-channel 2-D Fourier analysis and synthesis with gradient support.

Transforms act on the W and H axes of ``(..., W, H, C)`` tensors.  The
forward transform is unnormalized and the inverse carries the ``1/(W*H)``
factor, so a constant image ``c`` has ``real[0, 0] == c*W*H``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import DimensionError, Tensor, add_flops, as_tensor


@dataclass(frozen=True)
class SpectralPlanes:
    """Real and imaginary Fourier coefficient planes of identical shape."""

    real: Tensor
    imag: Tensor

    def __post_init__(self):
        if self.real.shape != self.imag.shape:
            raise DimensionError(f"plane shapes differ: {self.real.shape} vs {self.imag.shape}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.real.shape

    def complex(self) -> np.ndarray:
        return self.real.data + 1j * self.imag.data

    @classmethod
    def from_complex(cls, z: np.ndarray, dtype=np.float64) -> "SpectralPlanes":
        return cls(Tensor(z.real.astype(dtype)), Tensor(z.imag.astype(dtype)))


def _fft_axes(x) -> tuple[int, int]:
    if x.ndim < 3:
        raise DimensionError(f"expected a (..., W, H, C) tensor, got shape {x.shape}")
    return (x.ndim - 3, x.ndim - 2)


def _fft_flops(shape, axes) -> int:
    n = int(np.prod([shape[a] for a in axes]))
    return int(5 * np.prod(shape) * max(np.log2(n), 1.0))


def fft2(x: Tensor) -> SpectralPlanes:
    """Unnormalized forward DFT over W and H, returned as two real planes."""
    x = as_tensor(x)
    axes = _fft_axes(x)
    z = np.fft.fft2(x.data, axes=axes)
    dtype = x.dtype
    n = x.shape[axes[0]] * x.shape[axes[1]]
    add_flops("fft2", _fft_flops(x.shape, axes))

    # Both outputs share one complex transform; the adjoint of the forward
    # DFT is N * ifft2 applied to (g_real + i g_imag), keeping the real part.
    def vjp_real(g):
        return ((n * np.fft.ifft2(g, axes=axes)).real.astype(dtype),)

    def vjp_imag(g):
        return ((n * np.fft.ifft2(1j * g, axes=axes)).real.astype(dtype),)

    real = Tensor._make(z.real.astype(dtype), (x,), vjp_real, "fft2_real")
    imag = Tensor._make(z.imag.astype(dtype), (x,), vjp_imag, "fft2_imag")
    return SpectralPlanes(real, imag)


def ifft2_real(s: SpectralPlanes) -> Tensor:
    """Inverse DFT with ``1/(W*H)`` normalization, keeping the real part.

    Planes that are not Hermitian-symmetric (for instance after independent
    processing of the real and imaginary parts) produce a complex result;
    its imaginary residual is discarded.
    """
    real, imag = s.real, s.imag
    axes = _fft_axes(real)
    dtype = real.dtype
    n = real.shape[axes[0]] * real.shape[axes[1]]
    y = np.fft.ifft2(real.data + 1j * imag.data, axes=axes).real.astype(dtype)
    add_flops("ifft2", _fft_flops(real.shape, axes))

    def vjp(g):
        z = np.fft.fft2(g, axes=axes) / n
        return z.real.astype(dtype), z.imag.astype(dtype)

    return Tensor._make(y, (real, imag), vjp, "ifft2_real")


def phase_spectrum(s: SpectralPlanes) -> Tensor:
    """Per-bin phase ``atan2(imag, real)`` in ``(-pi, pi]``; 0 where both parts vanish."""
    # adding 0.0 turns -0.0 into +0.0 so that atan2 never returns -pi
    imag = s.imag.data + 0.0
    return Tensor(np.arctan2(imag, s.real.data))


def render_spectrum(s: SpectralPlanes, lo: float = 0.0, hi: float = 10.0) -> Tensor:
    """Log-magnitude spectrum image with the DC bin moved to the center.

    Each channel is rescaled affinely to ``[lo, hi]``; a constant channel
    maps to ``lo``.
    """
    mag = np.log1p(np.hypot(s.real.data, s.imag.data))
    axes = _fft_axes(s.real)
    mag = np.fft.fftshift(mag, axes=axes)
    flat = mag.reshape(mag.shape[:-3] + (-1, mag.shape[-1]))
    mn = flat.min(axis=-2, keepdims=True)
    mx = flat.max(axis=-2, keepdims=True)
    span = mx - mn
    safe = np.where(span > 0, span, 1.0)
    out = np.where(span > 0, lo + (hi - lo) * (flat - mn) / safe, lo)
    return Tensor(out.reshape(mag.shape))

