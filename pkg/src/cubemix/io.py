"""Image files, checkpoints and flat ``key = value`` run configurations."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .autodiff import Tensor
from .errors import ConfigError
from .network import ABLATIONS, NetworkConfig, NetworkParams, init_params
from .training.loop import TrainConfig


class ImageIOError(OSError):
    """Unreadable or malformed image file."""


class CheckpointError(OSError):
    """Corrupt, truncated or incompatible checkpoint file."""


# ------------------------------------------------------------------ images ---

def _ppm_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, i, n = [], 0, len(buf)
    while len(tokens) < count:
        while i < n and buf[i:i + 1].isspace():
            i += 1
        if i < n and buf[i:i + 1] == b"#":
            while i < n and buf[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < n and not buf[i:i + 1].isspace() and buf[i:i + 1] != b"#":
            i += 1
        if start == i:
            raise ImageIOError("truncated PPM header")
        tokens.append(buf[start:i])
    # exactly one whitespace byte separates the header from the raster
    if i >= n or not buf[i:i + 1].isspace():
        raise ImageIOError("malformed PPM header: missing separator before pixel data")
    return tokens, i + 1


def read_ppm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if not buf.startswith(b"P6"):
        raise ImageIOError(f"{path}: not a binary PPM (P6) file")
    try:
        (magic, w, h, maxval), offset = _ppm_tokens(buf, 4)
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError as e:
        raise ImageIOError(f"{path}: malformed PPM header") from e
    if w < 1 or h < 1 or maxval != 255:
        raise ImageIOError(f"{path}: unsupported PPM geometry {w}x{h} maxval {maxval}")
    need = w * h * 3
    raster = buf[offset:offset + need]
    if len(raster) != need:
        raise ImageIOError(f"{path}: truncated pixel data, expected {need} bytes, got {len(raster)}")
    img = np.frombuffer(raster, dtype=np.uint8).reshape(h, w, 3)
    return img.transpose(1, 0, 2).astype(np.float64) / 255.0


def quantize(img: np.ndarray) -> np.ndarray:
    """Clamp to [0, 1] and round half up to 8 bits."""
    x = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    return np.floor(x * 255.0 + 0.5).astype(np.uint8)


def write_ppm(path, img: np.ndarray) -> None:
    q = quantize(img)
    if q.ndim != 3 or q.shape[-1] != 3:
        raise ImageIOError(f"expected a (W, H, 3) image, got shape {q.shape}")
    w, h = q.shape[0], q.shape[1]
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + np.ascontiguousarray(q.transpose(1, 0, 2)).tobytes())


def image_read(path) -> np.ndarray:
    """Read a ``(W, H, 3)`` float image in [0, 1] from PPM (or PNG via Pillow)."""
    path = Path(path)
    if not path.is_file():
        raise ImageIOError(f"{path}: no such file")
    if path.suffix.lower() == ".png":
        from PIL import Image

        try:
            arr = np.asarray(Image.open(path).convert("RGB"))
        except Exception as e:
            raise ImageIOError(f"{path}: {e}") from e
        return arr.transpose(1, 0, 2).astype(np.float64) / 255.0
    return read_ppm(path)


def image_write(path, img: np.ndarray) -> None:
    path = Path(path)
    if path.suffix.lower() == ".png":
        from PIL import Image

        Image.fromarray(quantize(img).transpose(1, 0, 2)).save(path)
        return
    write_ppm(path, img)


# ------------------------------------------------------------- checkpoints ---

MAGIC = b"CUBEMIXCKPT\x00"
FORMAT_VERSION = 1


def config_to_dict(cfg: NetworkConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["path_scales"] = list(cfg.path_scales)
    d["path_sizes"] = None if cfg.path_sizes is None else [list(s) for s in cfg.path_sizes]
    return d


def config_from_dict(d: dict) -> NetworkConfig:
    d = dict(d)
    known = {f.name for f in dataclasses.fields(NetworkConfig)}
    unknown = set(d) - known
    if unknown:
        raise CheckpointError(f"unknown network config keys in checkpoint: {sorted(unknown)}")
    d["path_scales"] = tuple(d["path_scales"])
    if d.get("path_sizes") is not None:
        d["path_sizes"] = tuple(tuple(s) for s in d["path_sizes"])
    return NetworkConfig(**d)


def checkpoint_bytes(params: NetworkParams, cfg: NetworkConfig) -> bytes:
    """Serialize: magic, version, config echo, named float32 blobs, SHA-256 trailer."""
    echo = json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":")).encode()
    named = params.named()
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<I", len(echo)), echo]
    parts.append(struct.pack("<I", len(named)))
    for name, t in named.items():
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack("<B", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def save_checkpoint(path, params: NetworkParams, cfg: NetworkConfig) -> None:
    Path(path).write_bytes(checkpoint_bytes(params, cfg))


def load_checkpoint(path, expected: Optional[NetworkConfig] = None) -> tuple[NetworkParams, NetworkConfig]:
    """Parse and verify a checkpoint; refuse it if ``expected`` differs from its config echo."""
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"{path}: {e}") from e
    if len(raw) < len(MAGIC) + 32 or not raw.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch")

    pos = len(MAGIC)

    def take(n):
        nonlocal pos
        if pos + n > len(body):
            raise CheckpointError(f"{path}: truncated")
        chunk = body[pos:pos + n]
        pos += n
        return chunk

    (version,) = struct.unpack("<I", take(4))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    (clen,) = struct.unpack("<I", take(4))
    try:
        cfg = config_from_dict(json.loads(take(clen)))
    except (ValueError, TypeError) as e:
        raise CheckpointError(f"{path}: bad config echo: {e}") from e
    if expected is not None and expected != cfg:
        raise ConfigError(f"{path}: checkpoint config does not match the requested network config")

    (count,) = struct.unpack("<I", take(4))
    blobs = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode()
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        data = np.frombuffer(take(4 * int(np.prod(shape))), dtype="<f4").astype(np.float32)
        blobs[name] = Tensor(data.reshape(shape))
    if pos != len(body):
        raise CheckpointError(f"{path}: trailing bytes after parameter blobs")

    template = init_params(cfg, 0, np.float32)
    want = {k: t.shape for k, t in template.named().items()}
    got = {k: t.shape for k, t in blobs.items()}
    if want != got:
        raise CheckpointError(f"{path}: parameter set does not match its config echo")
    return template.with_tensors(blobs), cfg


# ------------------------------------------------------------------ config ---

def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(Fraction(v.strip())) for v in s.split(",") if v.strip())


def _sizes(s: str) -> Optional[tuple[tuple[int, int], ...]]:
    if s.strip().lower() in ("", "none"):
        return None
    out = []
    for item in s.split(","):
        w, _, h = item.strip().lower().partition("x")
        out.append((int(w), int(h)))
    return tuple(out)


def _names(s: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in s.split(",") if v.strip())


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


# key -> (target, parser, description)
CONFIG_KEYS: dict[str, tuple[str, Callable, str]] = {
    "image_width": ("net", int, "network input width; defaults to patch_size"),
    "image_height": ("net", int, "network input height; defaults to patch_size"),
    "path_scales": ("net", _floats, "three strictly decreasing downsample factors, e.g. 1/4,1/8,1/16"),
    "path_sizes": ("net", _sizes, "absolute path sizes overriding path_scales, e.g. 24x24,12x12,6x6"),
    "blocks_per_path": ("net", int, "cubic-mixer blocks per path"),
    "hidden_ratio": ("net", float, "mixer hidden width / input width"),
    "lfe_kernel": ("net", int, "local feature conv size, 3 or 1"),
    "slicing_mode": ("net", str, "affine or polynomial"),
    "lr": ("train", float, "Adam learning rate"),
    "batch_size": ("train", int, "patches per step"),
    "iterations": ("train", int, "optimizer steps"),
    "lambda_p": ("train", float, "perceptual loss weight"),
    "seed": ("train", int, "seed for data, init and batching"),
    "ablation": ("train", str, "one of " + ", ".join(ABLATIONS)),
    "log_every": ("train", int, "steps between metric rows"),
    "patch_size": ("run", int, "square training patch size"),
    "n_train": ("run", int, "training patches"),
    "n_val": ("run", int, "held-out patches"),
    "data_dir": ("run", str, "directory of sharp source PPM/PNG images; empty uses bundled photos"),
    "out_dir": ("run", str, "output directory"),
    "variants": ("run", _names, "ablation variants for the ablate command"),
    "save_checkpoint": ("run", _bool, "write a checkpoint after training"),
}


@dataclass
class RunConfig:
    net: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    patch_size: int = 96
    n_train: int = 32
    n_val: int = 8
    data_dir: Optional[str] = None
    out_dir: str = "run"
    variants: tuple[str, ...] = ABLATIONS
    save_checkpoint: bool = True

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(self, train=dataclasses.replace(self.train, seed=seed))


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment; unknown keys are errors."""
    values: dict[str, dict] = {"net": {}, "train": {}, "run": {}}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        if key not in CONFIG_KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        target, parse, _ = CONFIG_KEYS[key]
        if key in values[target]:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        try:
            values[target][key] = parse(raw.strip())
        except (ValueError, ZeroDivisionError) as e:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {e}") from e

    run = values["run"]
    patch = run.get("patch_size", 96)
    net_kw = values["net"]
    net_kw.setdefault("image_width", patch)
    net_kw.setdefault("image_height", patch)
    if (net_kw["image_width"], net_kw["image_height"]) != (patch, patch):
        raise ConfigError(f"{source}: image_width/image_height must equal patch_size ({patch})")
    try:
        net = NetworkConfig(**net_kw)
        train = TrainConfig(**values["train"])
    except TypeError as e:
        raise ConfigError(f"{source}: {e}") from e
    variants = run.get("variants", ABLATIONS)
    for v in variants:
        if v not in ABLATIONS:
            raise ConfigError(f"{source}: unknown variant {v!r}")
    cfg = RunConfig(
        net=net,
        train=train,
        patch_size=patch,
        n_train=run.get("n_train", 32),
        n_val=run.get("n_val", 8),
        data_dir=run.get("data_dir") or None,
        out_dir=run.get("out_dir", "run"),
        variants=tuple(variants),
        save_checkpoint=run.get("save_checkpoint", True),
    )
    if cfg.n_train < 1 or cfg.n_val < 0:
        raise ConfigError(f"{source}: n_train must be >= 1 and n_val >= 0")
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text(), str(path))


def config_help() -> str:
    return "\n".join(f"  {k:<16} {doc}" for k, (_, _, doc) in CONFIG_KEYS.items())
