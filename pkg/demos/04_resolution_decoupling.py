"""Fixed low-resolution processing sizes decouple the mixers from output resolution.

Run: python3 demos/04_resolution_decoupling.py
"""
import numpy as np

from cubemix.autodiff import Tensor, count_flops
from cubemix.network import NetworkConfig, deblur_forward, init_params, param_count

sizes = ((24, 24), (12, 12), (6, 6))
print(f"{'input':>8} {'params':>8} {'downsample':>12} {'mixer':>10} {'fullres':>12}")
prev = None
for n in (96, 192, 384):
    cfg = NetworkConfig(image_width=n, image_height=n, path_sizes=sizes)
    params = init_params(cfg)
    with count_flops() as fc:
        deblur_forward(Tensor(np.zeros((n, n, 3), np.float32)), params, cfg)
    st = fc.by_stage
    growth = "" if prev is None else f"  (x{st['fullres'] / prev:.3f})"
    print(f"{n:>8} {param_count(params):>8} {st['downsample']:>12} {st['mixer']:>10} {st['fullres']:>12}{growth}")
    prev = st["fullres"]

# %% Mixer cost is constant; the full-resolution stage scales with the pixel count.
