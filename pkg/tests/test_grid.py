"""Raster conventions: pixel centers, PGM round trip, CSV twin quantization."""

import numpy as np

from mrds.grid import (
    GridField,
    complex_grid,
    crop_center,
    pixel_centers,
    quantize,
    read_pgm,
    write_csv,
    write_pgm,
)


def test_pixel_centers():
    xs, ys = pixel_centers((-2, 2, -1, 1), 4, 2)
    assert np.allclose(xs, [-1.5, -0.5, 0.5, 1.5])
    assert np.allclose(ys, [-0.5, 0.5])
    z = complex_grid((-2, 2, -1, 1), 4, 2)
    assert z[0, 0] == -1.5 - 0.5j  # row 0 = lowest y
    assert z[1, 3] == 1.5 + 0.5j


def test_pgm_round_trip_16bit(tmp_path):
    rng = np.random.default_rng(3)
    vals = rng.random((5, 7))
    fld = GridField((-1, 1, -1, 1), 7, 5, vals, vertex=1)
    p = tmp_path / "f.pgm"
    write_pgm(p, fld, maxval=65535)
    maxval, back = read_pgm(p)
    assert maxval == 65535
    assert np.max(np.abs(back - vals)) <= 0.5 / 65535 + 1e-12


def test_pgm_mask_8bit(tmp_path):
    vals = np.array([[0.0, 1.0], [1.0, 0.0]])
    fld = GridField((0, 1, 0, 1), 2, 2, vals, vertex="mask")
    p = tmp_path / "m.pgm"
    write_pgm(p, fld, maxval=255)
    raw = p.read_bytes()
    assert raw.startswith(b"P5\n2 2\n255\n")
    assert set(raw[len(b"P5\n2 2\n255\n") :]) == {0, 255}


def test_csv_is_quantization_twin(tmp_path):
    rng = np.random.default_rng(4)
    vals = rng.random((6, 4))
    fld = GridField((0, 1, 0, 1), 4, 6, vals, vertex=2)
    write_pgm(tmp_path / "t.pgm", fld, maxval=65535)
    write_csv(tmp_path / "t.csv", fld)
    csv_rows = [
        [float(tok) for tok in line.split(",")]
        for line in (tmp_path / "t.csv").read_text().strip().splitlines()
    ]
    maxval, img = read_pgm(tmp_path / "t.pgm")
    img_q = np.rint(img * maxval)
    csv_q = np.rint(np.array(csv_rows)[::-1, :] * maxval)  # csv rows are image order
    assert np.array_equal(img_q, csv_q)


def test_crop_center_alignment():
    big = complex_grid((-4.5, 4.5, -4.5, 4.5), 12, 12)
    fld = GridField((-4.5, 4.5, -4.5, 4.5), 12, 12, np.abs(big), vertex=1)
    small = crop_center(fld, 8, 8, (-3, 3, -3, 3))
    direct = np.abs(complex_grid((-3, 3, -3, 3), 8, 8))
    assert np.array_equal(small.values, direct)


def test_quantize_rule():
    v = np.array([[0.0, 0.4999, 0.5, 1.0, 1.7, -0.2]])
    q = quantize(v, 255)
    assert list(q[0]) == [0, 127, 128, 255, 255, 0]
