"""Train the full model on synthetic blur at desk scale and report the PSNR gain.

Run: python3 demos/03_desk_training.py [iterations]
The default 500 steps take about a minute on one core.
"""
import sys
import time

import numpy as np

from cubemix.network import NetworkConfig
from cubemix.training import TrainConfig, builtin_images, evaluate, make_dataset, psnr, train_loop

iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 500

# %% 32 training and 8 held-out 96x96 patches, each blurred by a random kernel.
data = make_dataset(builtin_images(), patch_size=96, seed=0, n_train=32, n_val=8)
for p in data.val:
    print(f"{p.name}: {p.spec.describe():38s} blurry PSNR {psnr(p.blurry, p.sharp):.2f} dB")
baseline = np.mean([psnr(p.blurry, p.sharp) for p in data.val])

# %% The network starts as the identity, so step 0 reproduces the baseline.
t0 = time.perf_counter()
result = train_loop(TrainConfig(iterations=iterations, log_every=max(1, iterations // 10)), data, net_cfg=NetworkConfig())
print(f"trained {iterations} steps in {time.perf_counter() - t0:.1f} s")
print(result.metrics_csv())

# %% Held-out comparison.
ev = evaluate(result.params, data.val, result.net_cfg)
print(f"baseline {baseline:.4f} dB -> {ev.psnr:.4f} dB ({ev.psnr - baseline:+.4f})")
