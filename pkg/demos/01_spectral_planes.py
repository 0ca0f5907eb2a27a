"""Looking at an image through its real and imaginary Fourier planes.

Run: python3 demos/01_spectral_planes.py [out_dir]
"""
import sys
from pathlib import Path

import numpy as np

from cubemix.autodiff import Tensor
from cubemix.io import write_ppm
from cubemix.spectral import SpectralPlanes, fft2, ifft2_real, phase_spectrum, render_spectrum
from cubemix.training import BlurSpec, builtin_images, synth_blur

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(exist_ok=True)

# %% A 128x128 crop of the astronaut photo, stored width-first as (W, H, 3).
sharp = builtin_images()[0][180:308, 60:188]
blurry = synth_blur(sharp, BlurSpec("linear-motion", length=11, angle=30))

# %% The forward transform is unnormalized: the DC bin holds the pixel sum.
s = fft2(Tensor(sharp))
print("DC bin / pixel sum:", s.real.data[0, 0] / sharp.sum(axis=(0, 1)))
print("roundtrip error   :", np.abs(ifft2_real(s).data - sharp).max())

# %% Blur mostly leaves the magnitude of low frequencies alone and scrambles
# phase at high frequencies.  Compare the phase maps bin by bin.
sb = fft2(Tensor(blurry))
dphase = np.angle(np.exp(1j * (phase_spectrum(sb).data - phase_spectrum(s).data)))
r = np.hypot(*np.meshgrid(np.fft.fftfreq(128), np.fft.fftfreq(128), indexing="ij"))
for lo, hi in ((0, 0.05), (0.05, 0.15), (0.15, 0.5)):
    band = (r >= lo) & (r < hi)
    print(f"mean |phase change| for radius [{lo}, {hi}): {np.abs(dphase[band]).mean():.3f} rad")

# %% Render the planes on the 0..10 scale, then map to [0, 1] for PPM.
zeros = Tensor(np.zeros(sharp.shape))
for name, spec in (("sharp", s), ("blurry", sb)):
    write_ppm(out / f"{name}.ppm", sharp if name == "sharp" else blurry)
    write_ppm(out / f"{name}_real.ppm", render_spectrum(SpectralPlanes(spec.real, zeros)).data / 10)
    write_ppm(out / f"{name}_imag.ppm", render_spectrum(SpectralPlanes(zeros, spec.imag)).data / 10)
    write_ppm(out / f"{name}_magnitude.ppm", render_spectrum(spec).data / 10)
print("wrote spectra to", out)
