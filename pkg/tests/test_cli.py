import csv
import math

import numpy as np
import pytest

from cubemix import cli
from cubemix.autodiff import Tensor
from cubemix.errors import ConfigError, NumericError
from cubemix.io import (
    CheckpointError,
    ImageIOError,
    checkpoint_bytes,
    image_read,
    image_write,
    load_checkpoint,
    parse_config_text,
    quantize,
    read_ppm,
    save_checkpoint,
    write_ppm,
)
from cubemix.network import NetworkConfig, identity_params, init_params

TINY = """
patch_size = 16
path_scales = 1, 1/2, 1/4
blocks_per_path = 1
n_train = 3
n_val = 2
batch_size = 2
iterations = {iterations}
log_every = 1
out_dir = {out}
"""


def write_config(tmp_path, iterations=2, extra="", name="run.cfg"):
    path = tmp_path / name
    path.write_text(TINY.format(iterations=iterations, out=tmp_path / "out") + extra)
    return path


def uniform(shape, seed=0):
    return np.random.default_rng(seed).uniform(size=shape)


def quantized(shape, seed=0):
    return np.random.default_rng(seed).integers(0, 256, size=shape) / 255.0


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# --- images -----------------------------------------------------------------

def test_ppm_roundtrip_is_lossless(tmp_path):
    img = quantized((7, 5, 3))
    write_ppm(tmp_path / "a.ppm", img)
    np.testing.assert_array_equal(read_ppm(tmp_path / "a.ppm"), img)


def test_ppm_layout(tmp_path):
    img = quantized((4, 3, 3), 1)
    write_ppm(tmp_path / "a.ppm", img)
    raw = (tmp_path / "a.ppm").read_bytes()
    header = b"P6\n4 3\n255\n"
    assert raw.startswith(header) and len(raw) == len(header) + 4 * 3 * 3
    # rows run along the width axis
    assert raw[len(header):len(header) + 3] == bytes(quantize(img)[0, 0])
    assert raw[len(header) + 3:len(header) + 6] == bytes(quantize(img)[1, 0])


def test_quantize_rounds_half_up():
    vals = np.array([0.0, 0.5 / 255, 1.5 / 255, 254.49 / 255, 1.2, -0.3])
    assert quantize(vals).tolist() == [0, 1, 2, 254, 255, 0]


def test_ppm_with_comment(tmp_path):
    (tmp_path / "c.ppm").write_bytes(b"P6\n# made by hand\n2 1\n255\n" + bytes([255, 0, 0, 0, 255, 0]))
    img = read_ppm(tmp_path / "c.ppm")
    assert img.shape == (2, 1, 3)
    np.testing.assert_array_equal(img[:, 0], [[1, 0, 0], [0, 1, 0]])


def test_truncated_ppm(tmp_path):
    write_ppm(tmp_path / "a.ppm", quantized((4, 4, 3)))
    raw = (tmp_path / "a.ppm").read_bytes()
    (tmp_path / "t.ppm").write_bytes(raw[:-5])
    with pytest.raises(ImageIOError, match="expected 48 bytes, got 43"):
        read_ppm(tmp_path / "t.ppm")


@pytest.mark.parametrize("content", [b"P3\n1 1\n255\n0 0 0", b"P6\n1 x\n255\n\0\0\0", b"P6\n1 1\n65535\n\0\0\0", b"P6\n1"])
def test_malformed_ppm(tmp_path, content):
    (tmp_path / "m.ppm").write_bytes(content)
    with pytest.raises(ImageIOError):
        read_ppm(tmp_path / "m.ppm")


def test_png_roundtrip(tmp_path):
    pytest.importorskip("PIL")
    img = quantized((6, 9, 3), 2)
    image_write(tmp_path / "a.png", img)
    np.testing.assert_array_equal(image_read(tmp_path / "a.png"), img)


# --- checkpoints ------------------------------------------------------------

def test_checkpoint_roundtrip_is_bit_exact(tmp_path):
    cfg = NetworkConfig(image_width=16, image_height=16, path_scales=(1.0, 0.5, 0.25), blocks_per_path=2)
    params = init_params(cfg, 3)
    save_checkpoint(tmp_path / "a.ckpt", params, cfg)
    loaded, cfg2 = load_checkpoint(tmp_path / "a.ckpt")
    assert cfg2 == cfg
    for (k, a), b in zip(params.named().items(), loaded.named().values()):
        assert a.data.tobytes() == b.data.tobytes(), k
    save_checkpoint(tmp_path / "b.ckpt", loaded, cfg2)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_checkpoint_refuses_other_config(tmp_path):
    cfg = NetworkConfig()
    save_checkpoint(tmp_path / "a.ckpt", init_params(cfg), cfg)
    with pytest.raises(ConfigError):
        load_checkpoint(tmp_path / "a.ckpt", expected=cfg.replace(lfe_kernel=1))
    load_checkpoint(tmp_path / "a.ckpt", expected=NetworkConfig())


def test_checkpoint_corruption_detected(tmp_path):
    cfg = NetworkConfig()
    raw = bytearray(checkpoint_bytes(init_params(cfg), cfg))
    raw[200] ^= 0xFF
    (tmp_path / "bad.ckpt").write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(tmp_path / "bad.ckpt")
    (tmp_path / "short.ckpt").write_bytes(b"CUBEMIX")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "short.ckpt")


# --- config files -----------------------------------------------------------

def test_config_parsing():
    cfg = parse_config_text("lr = 3e-4  # faster\npath_scales = 1/2, 1/4, 1/8\nvariants = full, wo-ss\n")
    assert cfg.train.lr == 3e-4
    assert cfg.net.path_scales == (0.5, 0.25, 0.125)
    assert cfg.variants == ("full", "wo-ss")
    sized = parse_config_text("path_sizes = 24x24, 12x12, 6x6\n")
    assert sized.net.path_sizes == ((24, 24), (12, 12), (6, 6))


@pytest.mark.parametrize(
    "text, msg",
    [
        ("colour = red\n", "unknown key"),
        ("lr = 1\nlr = 2\n", "duplicate"),
        ("lr 1\n", "key = value"),
        ("iterations = many\n", "bad value"),
        ("path_scales = 1/4, 1/8, 1/32\n", "below 4x4"),
        ("ablation = wo-cm\n", "unknown ablation"),
        ("variants = full, nope\n", "unknown variant"),
        ("image_width = 64\n", "patch_size"),
    ],
)
def test_config_errors(text, msg):
    with pytest.raises(ConfigError, match=msg):
        parse_config_text(text)


# --- commands ---------------------------------------------------------------

def test_usage_errors(capsys):
    assert cli.main([]) == 2
    assert cli.main(["frobnicate"]) == 2
    assert cli.main(["train"]) == 2
    assert "--config is required" in capsys.readouterr().err


def test_train_missing_config(tmp_path, capsys):
    missing = tmp_path / "nope.cfg"
    assert cli.main(["train", "--config", str(missing)]) == 2
    assert str(missing) in capsys.readouterr().err


def test_train_bad_data_dir_fails_before_compute(tmp_path, capsys):
    cfg = write_config(tmp_path, extra=f"data_dir = {tmp_path / 'absent'}\n")
    assert cli.main(["train", "--config", str(cfg)]) == 2
    assert not (tmp_path / "out").exists() or not any((tmp_path / "out").iterdir())


def test_train_zero_iterations_writes_initial_checkpoint(tmp_path):
    cfg = write_config(tmp_path, iterations=0)
    assert cli.main(["train", "--config", str(cfg)]) == 0
    params, net = load_checkpoint(tmp_path / "out" / "checkpoint.ckpt")
    expected = checkpoint_bytes(init_params(net, 0), net)
    assert (tmp_path / "out" / "checkpoint.ckpt").read_bytes() == expected
    assert (tmp_path / "out" / "metrics.csv").read_text().startswith("iteration,loss")


def test_train_rerun_is_byte_identical(tmp_path):
    cfg = write_config(tmp_path, iterations=2)
    assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "b")]) == 0
    for name in ("metrics.csv", "checkpoint.ckpt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert cli.main(["train", "--config", str(cfg), "--seed", "5", "--out", str(tmp_path / "c")]) == 0
    assert (tmp_path / "a" / "metrics.csv").read_bytes() != (tmp_path / "c" / "metrics.csv").read_bytes()


def test_train_numeric_failure_exit_code(tmp_path, monkeypatch):
    def explode(*a, **k):
        raise NumericError("non-finite loss at iteration 1")

    monkeypatch.setattr(cli, "train_loop", explode)
    assert cli.main(["train", "--config", str(write_config(tmp_path))]) == 3


def test_train_from_image_directory(tmp_path):
    src = tmp_path / "photos"
    src.mkdir()
    for i in range(2):
        write_ppm(src / f"p{i}.ppm", uniform((40, 30, 3), i))
    cfg = write_config(tmp_path, iterations=1, extra=f"data_dir = {src}\n")
    assert cli.main(["train", "--config", str(cfg)]) == 0


@pytest.fixture
def identity_ckpt(tmp_path):
    cfg = NetworkConfig(image_width=16, image_height=16, path_scales=(1.0, 0.5, 0.25), blocks_per_path=1)
    path = tmp_path / "ident.ckpt"
    save_checkpoint(path, identity_params(cfg, dtype=np.float32), cfg)
    return path


def test_infer_identity(tmp_path, identity_ckpt):
    img = quantized((16, 16, 3), 3)
    write_ppm(tmp_path / "in.ppm", img)
    for name in ("o1.ppm", "o2.ppm"):
        assert cli.main(["infer", "--checkpoint", str(identity_ckpt), str(tmp_path / "in.ppm"), "--out", str(tmp_path / name)]) == 0
    out = read_ppm(tmp_path / "o1.ppm")
    assert out.shape == img.shape
    np.testing.assert_array_equal(out, img)
    assert (tmp_path / "o1.ppm").read_bytes() == (tmp_path / "o2.ppm").read_bytes()


def test_infer_size_mismatch(tmp_path, identity_ckpt, capsys):
    write_ppm(tmp_path / "in.ppm", quantized((20, 16, 3)))
    assert cli.main(["infer", "--checkpoint", str(identity_ckpt), str(tmp_path / "in.ppm"), str(tmp_path / "o.ppm")]) == 2
    assert "built for 16x16" in capsys.readouterr().err


def test_infer_unreadable_input(tmp_path, identity_ckpt):
    (tmp_path / "junk.ppm").write_bytes(b"hello")
    assert cli.main(["infer", "--checkpoint", str(identity_ckpt), str(tmp_path / "junk.ppm"), "--out", str(tmp_path / "o.ppm")]) == 2


def make_eval_set(root, n, sharp_as_input=False):
    (root / "blurry").mkdir(parents=True)
    (root / "sharp").mkdir()
    for i in range(n):
        sharp = quantized((16, 16, 3), 10 + i)
        blurry = sharp if sharp_as_input else quantized((16, 16, 3), 20 + i)
        write_ppm(root / "sharp" / f"im{i}.ppm", sharp)
        write_ppm(root / "blurry" / f"im{i}.ppm", blurry)


def test_eval_sharp_as_input(tmp_path, identity_ckpt, capsys):
    make_eval_set(tmp_path / "set", 3, sharp_as_input=True)
    rc = cli.main(["eval", "--checkpoint", str(identity_ckpt), str(tmp_path / "set"), "--out", str(tmp_path / "e.csv")])
    assert rc == 0
    line = capsys.readouterr().out.strip().splitlines()[-1]
    assert line.startswith("PSNR=") and " SSIM=" in line
    assert f"{float(line.split('SSIM=')[1]):.3f}" == "1.000"


def test_eval_summary_matches_csv(tmp_path, identity_ckpt, capsys):
    make_eval_set(tmp_path / "set", 4)
    assert cli.main(["eval", "--checkpoint", str(identity_ckpt), str(tmp_path / "set"), "--out", str(tmp_path / "e.csv")]) == 0
    rows = read_csv(tmp_path / "e.csv")
    assert [r["image_id"] for r in rows] == [f"im{i}" for i in range(4)]
    summary = capsys.readouterr().out.strip().splitlines()[-1]
    p, s = (float(v.split("=")[1]) for v in summary.split())
    assert abs(p - np.mean([float(r["psnr"]) for r in rows])) < 1e-9
    assert abs(s - np.mean([float(r["ssim"]) for r in rows])) < 1e-9


def test_eval_empty_dataset(tmp_path, identity_ckpt):
    (tmp_path / "set" / "blurry").mkdir(parents=True)
    (tmp_path / "set" / "sharp").mkdir()
    assert cli.main(["eval", "--checkpoint", str(identity_ckpt), str(tmp_path / "set")]) == 2
    assert cli.main(["eval", "--checkpoint", str(identity_ckpt), str(tmp_path / "missing")]) == 2


def test_ablate_table(tmp_path, capsys):
    cfg = write_config(tmp_path, iterations=1, extra="variants = d-imag, wo-lfe\n")
    assert cli.main(["ablate", "--config", str(cfg)]) == 0
    rows = read_csv(tmp_path / "out" / "ablation.csv")
    assert [r["variant"] for r in rows] == ["full", "d-imag", "wo-lfe"]
    assert all(math.isfinite(float(r["psnr"])) for r in rows)
    hashes = {line.split("dataset=")[1] for line in capsys.readouterr().out.splitlines() if "dataset=" in line}
    assert len(hashes) == 1


def test_ablate_continues_after_failure(tmp_path, monkeypatch):
    real = cli.train_loop

    def flaky(cfg, *a, **k):
        if cfg.ablation == "d-real":
            raise NumericError("boom")
        return real(cfg, *a, **k)

    monkeypatch.setattr(cli, "train_loop", flaky)
    cfg = write_config(tmp_path, iterations=1, extra="variants = d-real, wo-ss\n")
    assert cli.main(["ablate", "--config", str(cfg)]) == 3
    rows = read_csv(tmp_path / "out" / "ablation.csv")
    assert [r["variant"] for r in rows] == ["full", "d-real", "wo-ss"]
    assert rows[1]["psnr"] == "nan" and math.isfinite(float(rows[2]["psnr"]))


def test_spectrum_outputs(tmp_path, identity_ckpt):
    write_ppm(tmp_path / "in.ppm", quantized((16, 16, 3), 4))
    prefix = tmp_path / "spec" / "x"
    assert cli.main(["spectrum", str(tmp_path / "in.ppm"), "--out", str(prefix), "--checkpoint", str(identity_ckpt)]) == 0
    for name in ("real", "imag", "magnitude", "phase", "block0", "block1"):
        assert read_ppm(f"{prefix}_{name}.ppm").shape == (16, 16, 3)


def test_spectrum_of_constant_image(tmp_path):
    write_ppm(tmp_path / "c.ppm", np.full((8, 6, 3), 0.4))
    assert cli.main(["spectrum", str(tmp_path / "c.ppm"), "--out", str(tmp_path / "c")]) == 0
    mag = read_ppm(tmp_path / "c_magnitude.ppm")
    lit = np.argwhere(mag.max(axis=-1) > 0)
    assert lit.tolist() == [[4, 3]]


def test_spectrum_phase_of_shift_is_a_ramp(tmp_path):
    W, H, dx = 16, 16, 3
    img = quantized((W, H, 3), 5)
    write_ppm(tmp_path / "a.ppm", img)
    write_ppm(tmp_path / "b.ppm", np.roll(img, dx, axis=0))
    for n in ("a", "b"):
        assert cli.main(["spectrum", str(tmp_path / f"{n}.ppm"), "--out", str(tmp_path / n)]) == 0
    pa = read_ppm(tmp_path / "a_phase.ppm") * 2 * np.pi
    pb = read_ppm(tmp_path / "b_phase.ppm") * 2 * np.pi
    # phase images are centred, so row r holds frequency u = r - W // 2
    u = (np.arange(W) - W // 2)[:, None, None]
    ramp = -2 * np.pi * u * dx / W
    err = np.angle(np.exp(1j * (pb - pa - ramp)))
    assert np.max(np.abs(err)) < 2 * (2 * np.pi / 255)


def test_spectrum_unreadable_image(tmp_path):
    assert cli.main(["spectrum", str(tmp_path / "none.ppm"), "--out", str(tmp_path / "x")]) == 2
