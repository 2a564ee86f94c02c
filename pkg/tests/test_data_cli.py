import gzip
import struct

import numpy as np
import pytest

from dcgmm import data as dio
from dcgmm.cli import cli
from dcgmm.tensor import DataError

from _datasets import blob_mixture


def write_fixture(tmp_path, pixels, labels, gz=False):
    img_path = tmp_path / ("img.idx.gz" if gz else "img.idx")
    lab_path = tmp_path / ("lab.idx.gz" if gz else "lab.idx")
    a = np.asarray(pixels, dtype=np.uint8)
    blob = struct.pack(">IIII", dio.IDX_IMAGE_MAGIC, *a.shape) + a.tobytes()
    lblob = struct.pack(">II", dio.IDX_LABEL_MAGIC, len(labels)) + bytes(labels)
    if gz:
        blob, lblob = gzip.compress(blob), gzip.compress(lblob)
    img_path.write_bytes(blob)
    lab_path.write_bytes(lblob)
    return img_path, lab_path


# --------------------------------------------------------------------- IDX

def test_idx_fixture_round_trip(tmp_path):
    pixels = np.array([[[0, 255], [128, 64]], [[255, 0], [0, 0]]], dtype=np.uint8)
    img, lab = write_fixture(tmp_path, pixels, [3, 7])
    ds = dio.load_idx(img, lab)
    assert ds.images.shape == (2, 2, 2, 1)
    assert ds.images[0, 0, 0, 0] == 0.0
    assert ds.images[0, 0, 1, 0] == 1.0
    assert ds.images[0, 1, 1, 0] == pytest.approx(64 / 255)
    assert list(ds.labels) == [3, 7]


def test_idx_gzip_transparent(tmp_path):
    pixels = np.zeros((3, 2, 2), dtype=np.uint8)
    img, lab = write_fixture(tmp_path, pixels, [0, 1, 2], gz=True)
    ds = dio.load_idx(img, lab)
    assert len(ds) == 3 and ds.classes == {0, 1, 2}


def test_idx_bad_magic(tmp_path):
    path = tmp_path / "bad.idx"
    path.write_bytes(struct.pack(">IIII", 0xDEAD, 1, 2, 2) + bytes(4))
    with pytest.raises(DataError, match="magic"):
        dio.load_images(path)


def test_idx_truncated_payload(tmp_path):
    path = tmp_path / "short.idx"
    path.write_bytes(struct.pack(">IIII", dio.IDX_IMAGE_MAGIC, 2, 2, 2) + bytes(5))
    with pytest.raises(DataError, match="payload"):
        dio.load_images(path)


def test_idx_label_count_mismatch(tmp_path):
    img, _ = write_fixture(tmp_path, np.zeros((2, 2, 2), np.uint8), [1, 2])
    lab = tmp_path / "short_labels.idx"
    lab.write_bytes(struct.pack(">II", dio.IDX_LABEL_MAGIC, 3) + bytes([0, 1, 2]))
    with pytest.raises(DataError, match="label count"):
        dio.load_idx(img, lab)


def test_write_idx_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    pixels = rng.integers(0, 256, size=(5, 4, 4), dtype=np.uint8)
    dio.write_idx_images(pixels, tmp_path / "x.idx")
    dio.write_idx_labels(np.arange(5), tmp_path / "y.idx")
    ds = dio.load_idx(tmp_path / "x.idx", tmp_path / "y.idx")
    assert np.array_equal(np.round(ds.images[..., 0] * 255).astype(np.uint8), pixels)
    assert list(ds.labels) == [0, 1, 2, 3, 4]


# ------------------------------------------------------------- raw sidecar

def test_raw_sidecar_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    imgs = rng.random((4, 3, 5, 3)).astype(np.float32)
    path = tmp_path / "x.dct"
    dio.save_raw(imgs, path)
    back = dio.load_images(path)
    assert np.array_equal(back, imgs)


def test_raw_sidecar_clamps_out_of_range(tmp_path):
    imgs = np.array([[[[1.5], [-0.2]], [[0.5], [0.0]]]], dtype=np.float32)
    path = tmp_path / "x.dct"
    dio.save_raw(imgs, path)
    back = dio.load_images(path)
    assert back.max() <= 1.0 and back.min() >= 0.0


def test_raw_sidecar_truncation(tmp_path):
    path = tmp_path / "x.dct"
    dio.save_raw(np.zeros((2, 2, 2, 1), np.float32), path)
    blob = path.read_bytes()
    path.write_bytes(blob[:-3])
    with pytest.raises(DataError):
        dio.load_images(path)


# ------------------------------------------------------------ class filter

def make_ds(labels):
    labels = np.asarray(labels, dtype=np.int64)
    imgs = np.linspace(0, 1, labels.size * 4, dtype=np.float32).reshape(-1, 2, 2, 1)
    return dio.Dataset(imgs, labels)


def test_filter_keep_all_identity():
    ds = make_ds([0, 1, 2, 1, 0])
    out = dio.filter_classes(ds, {0, 1, 2})
    assert np.array_equal(out.images, ds.images)
    assert np.array_equal(out.labels, ds.labels)


def test_filter_single_class_stable_order():
    ds = make_ds([0, 1, 0, 1, 0])
    out = dio.filter_classes(ds, {0})
    assert np.array_equal(out.labels, [0, 0, 0])
    assert np.array_equal(out.images, ds.images[[0, 2, 4]])


def test_filter_cap_arithmetic():
    ds = make_ds(list(range(10)) * 30)
    out = dio.filter_classes(ds, set(range(10)), per_class_cap=10)
    assert len(out) == 100
    for c in range(10):
        assert int(np.sum(out.labels == c)) == 10


def test_filter_missing_class_and_empty():
    ds = make_ds([0, 0, 1])
    with pytest.raises(DataError):
        dio.filter_classes(ds, {0, 5})
    with pytest.raises(DataError):
        dio.filter_classes(ds, {1}, per_class_cap=0)


# --------------------------------------------------------------------- PNG

def test_png_single_black_image(tmp_path):
    path = tmp_path / "black.png"
    dio.write_png_grid(np.zeros((1, 8, 8, 1), np.float32), 1, path)
    back = dio.read_png(path)
    assert back.shape == (10, 10, 1)
    assert np.all(back[1:9, 1:9, 0] == 0)
    assert np.all(back[0, :, 0] == dio.SEPARATOR_GRAY)


def test_png_grid_layout_dimensions(tmp_path):
    imgs = np.random.default_rng(2).random((4, 28, 28, 1)).astype(np.float32)
    path = tmp_path / "grid.png"
    dio.write_png_grid(imgs, 2, path)
    back = dio.read_png(path)
    assert back.shape == (2 * 28 + 3, 2 * 28 + 3, 1)


def test_png_quantization_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    imgs = rng.random((2, 5, 7, 1)).astype(np.float32)
    path = tmp_path / "q.png"
    clamped = dio.write_png_grid(imgs, 2, path)
    assert clamped == 0
    back = dio.read_png(path)
    want = np.round(imgs * 255).astype(np.uint8)
    assert np.array_equal(back[1:6, 1:8, 0], want[0, :, :, 0])
    assert np.array_equal(back[1:6, 9:16, 0], want[1, :, :, 0])


def test_png_clamps_and_counts(tmp_path):
    imgs = np.array([[[[1.4], [-0.5]], [[0.2], [0.8]]]], dtype=np.float32)
    clamped = dio.write_png_grid(imgs, 1, tmp_path / "c.png")
    assert clamped == 2


def test_png_rgb_and_bad_channels(tmp_path):
    rgb = np.random.default_rng(4).random((2, 4, 4, 3)).astype(np.float32)
    dio.write_png_grid(rgb, 2, tmp_path / "rgb.png")
    assert dio.read_png(tmp_path / "rgb.png").shape == (6, 11, 3)
    with pytest.raises(DataError):
        dio.write_png_grid(np.zeros((1, 4, 4, 2), np.float32), 1, tmp_path / "x.png")


def test_png_deterministic_bytes(tmp_path):
    imgs = np.random.default_rng(5).random((3, 6, 6, 1)).astype(np.float32)
    dio.write_png_grid(imgs, 2, tmp_path / "a.png")
    dio.write_png_grid(imgs, 2, tmp_path / "b.png")
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()


# --------------------------------------------------------------------- CLI

def digits_fixture(tmp_path, n=120):
    rng = np.random.default_rng(6)
    pts, comp = blob_mixture(n, 7, [[0.25, 0.25], [0.75, 0.75]], sigma=0.05)
    imgs = np.zeros((n, 4, 4), dtype=np.uint8)
    imgs[:, :2, :2] = np.round(np.clip(pts[:, 0, None, None], 0, 1) * 255)
    imgs[:, 2:, 2:] = np.round(np.clip(pts[:, 1, None, None], 0, 1) * 255)
    dio.write_idx_images(imgs, tmp_path / "img.idx")
    dio.write_idx_labels(comp.astype(np.uint8), tmp_path / "lab.idx")
    return tmp_path / "img.idx", tmp_path / "lab.idx"


def test_cli_info_arch(capsys):
    assert cli(["info", "--arch", "F(28,1)-G(49)", "--input", "28x28x1"]) == 0
    out = capsys.readouterr().out
    assert "38416" in out


def test_cli_info_presets(capsys):
    for preset, token in [("A", "38416"), ("C", "DISCREPANCY"), ("G", "DISCREPANCY")]:
        assert cli(["info", "--preset", preset]) == 0
        assert token in capsys.readouterr().out


def test_cli_info_usage_error(capsys):
    assert cli(["info"]) == 1
    assert cli(["info", "--arch", "Z(1)", "--input", "4x4x1"]) == 1


def test_cli_train_density_sample_alphabet_inpaint(tmp_path, capsys):
    img, lab = digits_fixture(tmp_path)
    out = tmp_path / "run"
    rc = cli(["train", "--arch", "F(2,2)-G(4)", "--input", "4x4x1",
              "--images", str(img), "--labels", str(lab),
              "--epochs", "3", "--batch-size", "20", "--seed", "5",
              "--out", str(out)])
    assert rc == 0
    assert (out / "model.ckpt").exists() and (out / "trainlog.csv").exists()

    assert cli(["density", "--model", str(out / "model.ckpt"),
                "--images", str(img), "--out", str(tmp_path / "d.csv")]) == 0
    assert (tmp_path / "d.csv").read_text().startswith("layer,loss")

    assert cli(["outlier", "--model", str(out / "model.ckpt"),
                "--images", str(img), "--labels", str(lab),
                "--inlier-classes", "0", "--outlier-classes", "1",
                "--roc-out", str(tmp_path / "roc.csv")]) == 0
    assert "AUC:" in capsys.readouterr().out

    assert cli(["sample", "--model", str(out / "model.ckpt"), "--n", "4",
                "--cols", "2", "--seed", "9", "--out", str(tmp_path / "s.png"),
                "--loss-csv", str(tmp_path / "sl.csv")]) == 0
    assert (tmp_path / "s.png").exists()
    assert (tmp_path / "sl.csv").read_text().startswith("sample,loss")

    assert cli(["alphabet", "--model", str(out / "model.ckpt"),
                "--out", str(tmp_path / "a.png")]) == 0
    assert (tmp_path / "a.png").exists()

    assert cli(["inpaint", "--model", str(out / "model.ckpt"),
                "--images", str(img), "--n", "2", "--cols", "1", "--seed", "3",
                "--out", str(tmp_path / "i.png")]) == 0
    assert (tmp_path / "i.png").exists()


def test_cli_sample_class_without_classifier(tmp_path, capsys):
    img, lab = digits_fixture(tmp_path)
    out = tmp_path / "run"
    cli(["train", "--arch", "G(2)", "--input", "4x4x1", "--images", str(img),
         "--epochs", "1", "--batch-size", "20", "--seed", "1", "--out", str(out)])
    rc = cli(["sample", "--model", str(out / "model.ckpt"), "--class", "1",
              "--n", "1", "--seed", "2", "--out", str(tmp_path / "x.png")])
    assert rc == 1


def test_cli_missing_data_file(tmp_path):
    rc = cli(["density", "--model", str(tmp_path / "none.ckpt"),
              "--images", str(tmp_path / "none.idx")])
    assert rc == 2


def test_cli_config_file_and_derived_seed(tmp_path, capsys):
    img, lab = digits_fixture(tmp_path)
    conf = tmp_path / "exp.conf"
    conf.write_text(
        f"arch = G(3)\ninput = 4x4x1\nimages = {img}\n"
        f"epochs = 2\nbatch_size = 30\nout = {tmp_path / 'cfg_run'}\n"
        "# comment line\n")
    assert cli(["train", "--config", str(conf)]) == 0
    assert (tmp_path / "cfg_run" / "model.ckpt").exists()
    # unknown keys rejected
    bad = tmp_path / "bad.conf"
    bad.write_text("nonsense = 1\n")
    assert cli(["train", "--config", str(bad)]) == 1


def test_cli_train_determinism(tmp_path):
    img, lab = digits_fixture(tmp_path)
    outs = []
    for name in ("r1", "r2"):
        out = tmp_path / name
        assert cli(["train", "--arch", "F(2,2)-G(3)", "--input", "4x4x1",
                    "--images", str(img), "--labels", str(lab),
                    "--test-images", str(img), "--test-labels", str(lab),
                    "--epochs", "2", "--batch-size", "20", "--seed", "11",
                    "--out", str(out)]) == 0
        outs.append(out)
    for fname in ("model.ckpt", "trainlog.csv", "holdout.csv"):
        assert (outs[0] / fname).read_bytes() == (outs[1] / fname).read_bytes(), fname
