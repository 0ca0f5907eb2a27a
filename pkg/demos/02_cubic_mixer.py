"""A cubic-mixer block mixes along width, then height, then channels.

Run: python3 demos/02_cubic_mixer.py
"""
import numpy as np

from cubemix.autodiff import Tensor
from cubemix.mixer import CubicMixerParams, MixerBlockParams, block_param_count, cubic_mixer, mixer_block, wfp_apply

rng = np.random.default_rng(0)
W, H, C = 24, 24, 3
blk = MixerBlockParams.init(W, H, C, rng=rng)

# %% Shapes: every weight is (d_in, d_out) and the block preserves the input shape.
for name, t in blk.named().items():
    print(f"{name}: {t.shape}")
x = Tensor(rng.standard_normal((W, H, C)))
print("output shape:", mixer_block(x, blk).shape)

# %% Parameter count matches the closed form.
counted = sum(t.size for t in blk.named().values())
print("params:", counted, "formula:", block_param_count(W, H, C, W, H, C))

# %% Zeroing the second layer of each MLP turns the residual block into the identity.
kw = blk.named()
for k in ("w2", "b2", "w4", "b4", "w6", "b6"):
    kw[k] = Tensor(np.zeros_like(kw[k].data))
ident = CubicMixerParams([MixerBlockParams(**kw)] * 4)
print("identity stack exact:", np.array_equal(cubic_mixer(x, ident).data, x.data))

# %% Inside the spectral wrapper the identity survives the FFT roundtrip.
img = Tensor(rng.uniform(size=(W, H, C)))
print("spectral identity error:", np.abs(wfp_apply(img, ident, ident).data - img.data).max())

# %% A random stack acts as a learned filter on the two coefficient planes.
phi1 = CubicMixerParams.init(4, W, H, C, rng=rng)
phi2 = CubicMixerParams.init(4, W, H, C, rng=rng)
y = wfp_apply(img, phi1, phi2)
print("random stack output range:", float(y.data.min()), float(y.data.max()))
