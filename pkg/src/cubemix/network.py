"""Three-scale spectral mixer paths, local feature fusion and affine slicing.

The network maps a blurry image ``B`` of shape ``(..., W, H, 3)`` to a sharp
estimate.  Each path resamples ``B`` to a small processing size, filters its
Fourier planes with a pair of cubic mixers and upsamples the result back to
full resolution.  The input and the three path outputs are stacked into a
12-channel tensor, passed through a 3x3 conv, PReLU and a 1x1 conv that
yields six planes: a per-channel scale and offset applied to ``B``.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .autodiff import (
    Tensor,
    concat_channels,
    conv2d,
    flop_stage,
    mul,
    prelu,
    resample,
    square,
    take_channels,
)
from .errors import ConfigError, DimensionError
from .mixer import SPECTRAL_INPUTS, CubicMixerParams, wfp_apply

MIN_PATH_SIZE = 4
N_PATHS = 3
# Order of the six head planes; frozen for checkpoint compatibility.
SLICE_PLANES = ("W_red", "W_green", "W_blue", "b_red", "b_green", "b_blue")


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture hyperparameters.

    ``path_sizes`` overrides ``path_scales`` with absolute processing sizes
    ``((w, h), ...)``; with it set, mixer parameters no longer depend on the
    input resolution.  ``spectral_input``, ``active_paths`` and ``head``
    exist for ablations.
    """

    image_width: int = 96
    image_height: int = 96
    path_scales: tuple[float, ...] = (1 / 4, 1 / 8, 1 / 16)
    path_sizes: Optional[tuple[tuple[int, int], ...]] = None
    blocks_per_path: int = 4
    channels: int = 3
    hidden_ratio: float = 1.0
    lfe_kernel: int = 3
    slicing_mode: str = "affine"
    spectral_input: str = "split"
    active_paths: int = 3
    head: str = "slice"

    def __post_init__(self):
        scales = tuple(float(s) for s in self.path_scales)
        object.__setattr__(self, "path_scales", scales)
        if self.path_sizes is not None:
            sizes = tuple((int(w), int(h)) for w, h in self.path_sizes)
            object.__setattr__(self, "path_sizes", sizes)
            if len(sizes) != N_PATHS:
                raise ConfigError(f"path_sizes needs {N_PATHS} entries, got {len(sizes)}")
        if len(scales) != N_PATHS:
            raise ConfigError(f"path_scales needs {N_PATHS} entries, got {len(scales)}")
        if any(s <= 0 or s > 1 for s in scales):
            raise ConfigError(f"path scales must lie in (0, 1], got {scales}")
        if any(b >= a for a, b in zip(scales, scales[1:])):
            raise ConfigError(f"path scales must be strictly decreasing, got {scales}")
        if self.blocks_per_path < 1:
            raise ConfigError("blocks_per_path must be >= 1")
        if self.channels != 3:
            raise ConfigError("only 3-channel images are supported")
        if self.hidden_ratio <= 0:
            raise ConfigError("hidden_ratio must be positive")
        if self.lfe_kernel not in (1, 3):
            raise ConfigError(f"lfe_kernel must be 1 or 3, got {self.lfe_kernel}")
        if self.slicing_mode not in ("affine", "polynomial"):
            raise ConfigError(f"slicing_mode must be affine or polynomial, got {self.slicing_mode!r}")
        if self.spectral_input not in SPECTRAL_INPUTS:
            raise ConfigError(f"spectral_input must be one of {SPECTRAL_INPUTS}")
        if self.active_paths not in (1, 2, 3):
            raise ConfigError("active_paths must be 1, 2 or 3")
        if self.head not in ("slice", "direct"):
            raise ConfigError(f"head must be slice or direct, got {self.head!r}")
        for w, h in self.processing_sizes():
            if w < MIN_PATH_SIZE or h < MIN_PATH_SIZE:
                raise ConfigError(
                    f"path processing size {w}x{h} is below {MIN_PATH_SIZE}x{MIN_PATH_SIZE}"
                )

    def processing_sizes(self) -> list[tuple[int, int]]:
        if self.path_sizes is not None:
            return [tuple(s) for s in self.path_sizes]
        return [scaled_size(self.image_width, self.image_height, s) for s in self.path_scales]

    @property
    def fused_channels(self) -> int:
        return self.channels * (1 + N_PATHS)

    def replace(self, **changes) -> "NetworkConfig":
        return dataclasses.replace(self, **changes)


def scaled_size(W: int, H: int, scale: float) -> tuple[int, int]:
    # small epsilon guards against 96 * 0.1 style products landing just below an integer
    return int(np.floor(W * scale + 1e-9)), int(np.floor(H * scale + 1e-9))


@dataclass
class NetworkParams:
    paths: list[tuple[CubicMixerParams, CubicMixerParams]] = field(default_factory=list)
    conv3_w: Optional[Tensor] = None
    conv3_b: Optional[Tensor] = None
    prelu_slope: Optional[Tensor] = None
    head_w: Optional[Tensor] = None
    head_b: Optional[Tensor] = None

    def named(self) -> dict[str, Tensor]:
        """Flat ``name -> Tensor`` view in a fixed order."""
        out: dict[str, Tensor] = {}
        for p, (phi1, phi2) in enumerate(self.paths):
            for k, phi in ((1, phi1), (2, phi2)):
                for name, t in phi.named().items():
                    out[f"path{p}.phi{k}.{name}"] = t
        for name in ("conv3_w", "conv3_b", "prelu_slope", "head_w", "head_b"):
            t = getattr(self, name)
            if t is not None:
                out[name] = t
        return out

    def with_tensors(self, mapping: dict[str, Tensor]) -> "NetworkParams":
        """Copy of this structure with tensors substituted by name."""
        def pick(name, old):
            return mapping.get(name, old)

        paths = []
        for p, (phi1, phi2) in enumerate(self.paths):
            new_pair = []
            for k, phi in ((1, phi1), (2, phi2)):
                blocks = []
                for i, blk in enumerate(phi.blocks):
                    kw = {n: pick(f"path{p}.phi{k}.block{i}.{n}", t) for n, t in blk.named().items()}
                    blocks.append(type(blk)(**kw))
                new_pair.append(CubicMixerParams(blocks))
            paths.append(tuple(new_pair))
        return NetworkParams(
            paths=paths,
            **{
                n: pick(n, getattr(self, n))
                for n in ("conv3_w", "conv3_b", "prelu_slope", "head_w", "head_b")
            },
        )

    def map(self, fn) -> "NetworkParams":
        return self.with_tensors({k: fn(v) for k, v in self.named().items()})


def param_count(params: NetworkParams) -> int:
    return int(sum(t.size for t in params.named().values()))


def mixer_param_count(params: NetworkParams) -> int:
    return int(sum(t.size for k, t in params.named().items() if k.startswith("path")))


def init_params(cfg: NetworkConfig, seed: int = 0, dtype=np.float32) -> NetworkParams:
    """Seeded initialization.

    Mixer and 3x3 conv weights are uniform in ``+-1/sqrt(fan_in)`` with zero
    biases.  The head starts at the identity map: the slicing head has zero
    weights and bias ``(1, 1, 1, 0, 0, 0)``.  For the direct head, hidden
    channels ``0..C-1`` pass the input through (centre tap, and PReLU is the
    identity on non-negative images) and the head copies them.
    """
    rng = np.random.default_rng(seed)
    C = cfg.channels
    paths = []
    for w, h in cfg.processing_sizes()[: cfg.active_paths]:
        phi1 = CubicMixerParams.init(cfg.blocks_per_path, w, h, C, cfg.hidden_ratio, rng, dtype)
        phi2 = CubicMixerParams.init(cfg.blocks_per_path, w, h, C, cfg.hidden_ratio, rng, dtype)
        paths.append((phi1, phi2))

    cf, K = cfg.fused_channels, cfg.lfe_kernel
    bound = 1.0 / np.sqrt(K * K * cf)
    conv3_w = Tensor(rng.uniform(-bound, bound, size=(K, K, cf, cf)).astype(dtype))
    conv3_b = Tensor(np.zeros(cf, dtype=dtype))
    slope = Tensor(np.full(cf, 0.25, dtype=dtype))
    if cfg.head == "slice":
        head_w = Tensor(np.zeros((1, 1, cf, 2 * C), dtype=dtype))
        head_b = Tensor(np.array([1.0] * C + [0.0] * C, dtype=dtype))
    else:
        w3 = conv3_w.data.copy()
        w3[:, :, :, :C] = 0.0
        w3[K // 2, K // 2, np.arange(C), np.arange(C)] = 1.0
        conv3_w = Tensor(w3)
        w = np.zeros((1, 1, cf, C), dtype=dtype)
        w[0, 0, np.arange(C), np.arange(C)] = 1.0
        head_w = Tensor(w)
        head_b = Tensor(np.zeros(C, dtype=dtype))
    return NetworkParams(paths, conv3_w, conv3_b, slope, head_w, head_b)


def identity_params(cfg: NetworkConfig, seed: int = 0, dtype=np.float64) -> NetworkParams:
    """Parameters that make :func:`deblur_forward` the exact identity.

    Second-layer mixer weights and biases are zeroed (so every mixer is a
    residual identity), both convolutions are zeroed and the slicing head
    bias is ``(1, 1, 1, 0, 0, 0)``.
    """
    params = init_params(cfg, seed, dtype)
    zero_keys = ("w2", "b2", "w4", "b4", "w6", "b6")
    new = {}
    for name, t in params.named().items():
        if name.rsplit(".", 1)[-1] in zero_keys or name in ("conv3_w", "conv3_b", "head_w"):
            new[name] = Tensor(np.zeros_like(t.data))
    return params.with_tensors(new)


@dataclass(frozen=True)
class SliceMaps:
    """Six full-resolution planes stored as one ``(..., W, H, 6)`` tensor."""

    planes: Tensor

    def __post_init__(self):
        if self.planes.shape[-1] != len(SLICE_PLANES):
            raise DimensionError(f"SliceMaps needs 6 channels, got {self.planes.shape[-1]}")

    @property
    def scales(self) -> Tensor:
        return take_channels(self.planes, 0, 3)

    @property
    def offsets(self) -> Tensor:
        return take_channels(self.planes, 3, 6)

    def plane(self, name: str) -> np.ndarray:
        return self.planes.data[..., SLICE_PLANES.index(name)]

    @classmethod
    def from_planes(cls, scales, offsets) -> "SliceMaps":
        return cls(concat_channels([_as_t(scales), _as_t(offsets)]))


def _as_t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def scale_path(
    b: Tensor,
    scale: float,
    phi1: CubicMixerParams,
    phi2: CubicMixerParams,
    size: Optional[tuple[int, int]] = None,
    spectral_input: str = "split",
) -> Tensor:
    """Resample to the path's size and run the spectral mixers there.

    ``size`` takes precedence over ``scale`` when given.
    """
    W, H = b.shape[-3], b.shape[-2]
    w, h = size if size is not None else scaled_size(W, H, scale)
    if w < MIN_PATH_SIZE or h < MIN_PATH_SIZE:
        raise ConfigError(f"path size {w}x{h} is below {MIN_PATH_SIZE}x{MIN_PATH_SIZE}")
    with flop_stage("downsample"):
        low = resample(b, w, h, "bicubic")
    with flop_stage("mixer"):
        return wfp_apply(low, phi1, phi2, spectral_input)


def multiscale_forward(b: Tensor, params: NetworkParams, cfg: NetworkConfig) -> list[Optional[Tensor]]:
    """Full-resolution feature maps ``[F_t, F_m, F_b]``; inactive paths give ``None``."""
    W, H = b.shape[-3], b.shape[-2]
    sizes = cfg.processing_sizes()
    maps: list[Optional[Tensor]] = []
    for p in range(N_PATHS):
        if p >= len(params.paths):
            maps.append(None)
            continue
        phi1, phi2 = params.paths[p]
        low = scale_path(b, cfg.path_scales[p], phi1, phi2, size=sizes[p], spectral_input=cfg.spectral_input)
        with flop_stage("fullres"):
            maps.append(resample(low, W, H, "bicubic"))
    return maps


def _fuse(b: Tensor, feats, params: NetworkParams) -> Tensor:
    filled = [f if f is not None else Tensor(np.zeros(b.shape, dtype=b.dtype)) for f in feats]
    T = concat_channels([b, *filled])
    hidden = prelu(conv2d(T, params.conv3_w, params.conv3_b), params.prelu_slope)
    return conv2d(hidden, params.head_w, params.head_b)


def local_feature_fuse(b, F_t, F_m, F_b, params: NetworkParams) -> SliceMaps:
    """Concat to 12 channels, conv (3x3 or 1x1), PReLU, 1x1 conv to 6 slice planes."""
    for f in (F_t, F_m, F_b):
        if f is not None and f.shape != b.shape:
            raise DimensionError(f"feature map {f.shape} != input {b.shape}")
    return SliceMaps(_fuse(b, (F_t, F_m, F_b), params))


def slice_apply(b: Tensor, m: SliceMaps) -> Tensor:
    """Per-channel ``W_c * B_c + b_c``."""
    if m.planes.shape[:-1] != b.shape[:-1]:
        raise DimensionError(f"slice maps {m.planes.shape[:-1]} != image {b.shape[:-1]}")
    return mul(m.scales, b) + m.offsets


def slice_apply_poly(b: Tensor, m: SliceMaps) -> Tensor:
    """Per-channel ``(W_c * B_c + b_c) ** 2``."""
    return square(slice_apply(b, m))


def deblur_forward(b: Tensor, params: NetworkParams, cfg: NetworkConfig) -> Tensor:
    """Blurry ``(..., W, H, 3)`` image to its restored estimate (not clamped)."""
    if b.shape[-1] != cfg.channels:
        raise DimensionError(f"expected {cfg.channels} channels, got {b.shape[-1]}")
    feats = multiscale_forward(b, params, cfg)
    with flop_stage("fullres"):
        if cfg.head == "direct":
            return _fuse(b, feats, params)
        maps = local_feature_fuse(b, *feats, params)
        if cfg.slicing_mode == "polynomial":
            return slice_apply_poly(b, maps)
        return slice_apply(b, maps)


def apply_ablation(cfg: NetworkConfig, ablation: str) -> NetworkConfig:
    """Network configuration for one of the ablation variants."""
    changes = {
        "full": {},
        "d-real": {"spectral_input": "real"},
        "d-imag": {"spectral_input": "imag"},
        "wo-ms": {"active_paths": 1},
        "wo-ss": {"head": "direct"},
        "wo-lfe": {"lfe_kernel": 1},
    }
    if ablation not in changes:
        raise ConfigError(f"unknown ablation {ablation!r}; expected one of {sorted(changes)}")
    return cfg.replace(**changes[ablation])


ABLATIONS = ("full", "d-real", "d-imag", "wo-ms", "wo-ss", "wo-lfe")
