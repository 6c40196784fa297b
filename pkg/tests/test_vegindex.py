"""Band math, raster I/O, stack flattening, and per-pixel prediction."""

from datetime import date, timedelta
from pathlib import Path

import numpy as np
import pytest

from smartcast.errors import (
    DataError,
    InsufficientDataError,
    InsufficientHistoryError,
    ShapeError,
)
from smartcast.lstm import ModelShape, init_params
from smartcast.vegindex import (
    DEFAULT_NODATA,
    BandGrid,
    ImageStack,
    IndexImage,
    PixelWindow,
    compute_index,
    flatten_image,
    flatten_stack,
    predict_pixels,
    read_bandgrid,
    read_stack_manifest,
    reshape_to_image,
    stack_windows_for_training,
    write_bandgrid,
    write_pgm,
)

MAPPING = {"red": "B04", "nir": "B08", "swir": "B11"}


def make_grid(red, nir, swir=None, nodata=DEFAULT_NODATA):
    """BandGrid from per-band 2-D arrays (float32-cast)."""
    red = np.asarray(red, dtype=np.float32)
    nir = np.asarray(nir, dtype=np.float32)
    if swir is None:
        swir = np.full_like(red, 0.1)
    else:
        swir = np.asarray(swir, dtype=np.float32)
    h, w = red.shape
    data = np.stack([red, nir, swir])
    return BandGrid(width=w, height=h, nodata=nodata, band_names=("B04", "B08", "B11"), data=data)


def constant_image(value, width=2, height=2, kind="NDVI"):
    return IndexImage(width, height, kind, DEFAULT_NODATA,
                      np.full((height, width), float(value)))


# -- band math -----------------------------------------------------------------


def test_index_matches_direct_arithmetic_randomized():
    # float32 storage, float64 ratio; oracle computed the same way by hand
    rng = np.random.default_rng(42)
    for _ in range(25):
        h, w = rng.integers(2, 9, size=2)
        red = rng.uniform(0.01, 1.0, (h, w)).astype(np.float32)
        nir = rng.uniform(0.01, 1.0, (h, w)).astype(np.float32)
        swir = rng.uniform(0.01, 1.0, (h, w)).astype(np.float32)
        grid = make_grid(red, nir, swir)

        ndvi = compute_index(grid, "NDVI", MAPPING)
        ndwi = compute_index(grid, "NDWI", MAPPING)
        r64, n64, s64 = (band.astype(np.float64) for band in (red, nir, swir))
        assert np.max(np.abs(ndvi.values - (n64 - r64) / (n64 + r64))) <= 1e-7
        assert np.max(np.abs(ndwi.values - (n64 - s64) / (n64 + s64))) <= 1e-7
        for img in (ndvi, ndwi):
            assert img.values.min() >= -1.0 and img.values.max() <= 1.0


def test_index_pinned_values():
    grid = make_grid([[0.2, 0.25, 0.3, 0.0]], [[0.6, 0.75, 0.3, 0.0]])
    img = compute_index(grid, "NDVI", MAPPING)
    assert abs(img.values[0, 0] - 0.5) <= 1e-7
    # 0.75 and 0.25 are exact in float32, so the ratio is exactly 0.5
    assert img.values[0, 1] == 0.5
    assert img.values[0, 2] == 0.0
    assert img.values[0, 3] == DEFAULT_NODATA  # zero denominator


def test_index_input_nodata_propagates():
    nod = np.float32(DEFAULT_NODATA)
    grid = make_grid([[0.2, nod], [0.3, 0.3]], [[nod, 0.5], [0.6, 0.6]])
    img = compute_index(grid, "NDVI", MAPPING)
    assert img.values[0, 0] == DEFAULT_NODATA
    assert img.values[0, 1] == DEFAULT_NODATA
    assert img.values[1, 0] != DEFAULT_NODATA


def test_index_rejects_reflectance_outside_unit_interval():
    grid = make_grid([[0.2]], [[1.5]])
    with pytest.raises(DataError, match="B08"):
        compute_index(grid, "NDVI", MAPPING)


def test_index_kind_and_mapping_errors():
    grid = make_grid([[0.2]], [[0.6]])
    with pytest.raises(DataError, match="EVI"):
        compute_index(grid, "EVI", MAPPING)
    with pytest.raises(DataError):
        compute_index(grid, "NDWI", {"red": "B04", "nir": "B08"})


# -- containers ------------------------------------------------------------------


def test_bandgrid_validation():
    data = np.zeros((2, 3, 4), dtype=np.float32)
    with pytest.raises(ShapeError):
        BandGrid(width=4, height=3, nodata=-1.0, band_names=("a",), data=data)
    with pytest.raises(ShapeError):
        BandGrid(width=4, height=3, nodata=-1.0, band_names=("a", "b"),
                 data=data.astype(np.float64))
    with pytest.raises(DataError):
        BandGrid(width=1, height=1, nodata=-1.0,
                 band_names=tuple(f"b{i}" for i in range(14)),
                 data=np.zeros((14, 1, 1), dtype=np.float32))
    grid = BandGrid(width=4, height=3, nodata=-1.0, band_names=("a", "b"), data=data)
    with pytest.raises(DataError, match="missing"):
        grid.band("missing")


def test_index_image_validation():
    with pytest.raises(DataError):
        constant_image(1.5)
    with pytest.raises(DataError):
        IndexImage(1, 1, "EVI", DEFAULT_NODATA, np.zeros((1, 1)))
    with pytest.raises(ShapeError):
        IndexImage(2, 2, "NDVI", DEFAULT_NODATA, np.zeros((2, 3)))
    vals = np.array([[0.5, DEFAULT_NODATA]])
    img = IndexImage(2, 1, "NDVI", DEFAULT_NODATA, vals)
    assert img.valid_mask().tolist() == [[True, False]]


def test_image_stack_validation():
    d0 = date(2024, 1, 1)
    img = constant_image(0.1)
    with pytest.raises(DataError, match="empty"):
        ImageStack(entries=())
    with pytest.raises(DataError, match="increasing"):
        ImageStack(entries=((d0, img), (d0, img)))
    other = constant_image(0.1, width=3)
    with pytest.raises(DataError, match="mixed"):
        ImageStack(entries=((d0, img), (d0 + timedelta(days=1), other)))


def test_pixel_window_validation():
    good = np.column_stack([np.zeros(5), [50.0, 40.0, 30.0, 20.0, 10.0]])
    PixelWindow(values=good, target_offset_days=10.0)
    bad = good.copy()
    bad[:, 1] = [50.0, 40.0, 40.0, 20.0, 10.0]
    with pytest.raises(DataError):
        PixelWindow(values=bad, target_offset_days=10.0)
    bad[:, 1] = [50.0, 40.0, 30.0, 20.0, 0.0]
    with pytest.raises(DataError):
        PixelWindow(values=bad, target_offset_days=10.0)


# -- raster file I/O ---------------------------------------------------------------


def test_bandgrid_roundtrip_is_byte_exact(tmp_path: Path):
    rng = np.random.default_rng(5)
    data = rng.uniform(0.0, 1.0, (3, 4, 5)).astype(np.float32)
    data[0, 0, 0] = np.float32(DEFAULT_NODATA)
    grid = BandGrid(width=5, height=4, nodata=DEFAULT_NODATA,
                    band_names=("B04", "B08", "B11"), data=data)
    p1, p2 = tmp_path / "a.bgrid", tmp_path / "b.bgrid"
    write_bandgrid(grid, p1)
    back = read_bandgrid(p1)
    assert back.width == 5 and back.height == 4
    assert back.band_names == grid.band_names
    assert back.nodata == grid.nodata
    assert back.data.tobytes() == grid.data.tobytes()
    write_bandgrid(back, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_bandgrid_read_errors(tmp_path: Path):
    good = tmp_path / "g.bgrid"
    write_bandgrid(make_grid([[0.2]], [[0.6]]), good)
    raw = good.read_bytes()

    bad_magic = tmp_path / "m.bgrid"
    bad_magic.write_bytes(b"NOTBG 1\n" + raw.split(b"\n", 1)[1])
    with pytest.raises(DataError, match="not a BGRID"):
        read_bandgrid(bad_magic)

    truncated = tmp_path / "t.bgrid"
    truncated.write_bytes(raw[:-2])
    with pytest.raises(DataError, match="truncated"):
        read_bandgrid(truncated)

    header_only = tmp_path / "h.bgrid"
    header_only.write_bytes(b"BGRID 1\n1 1")
    with pytest.raises(DataError, match="truncated header"):
        read_bandgrid(header_only)

    mismatch = tmp_path / "n.bgrid"
    head, tail = raw.split(b"\n", 3)[:3], raw.split(b"\n", 3)[3]
    mismatch.write_bytes(b"\n".join(head) + b"\nonly_one_name\n" + tail.split(b"\n", 1)[1])
    with pytest.raises(DataError, match="names listed"):
        read_bandgrid(mismatch)


def test_stack_manifest_errors(tmp_path: Path):
    bad_header = tmp_path / "m1.csv"
    bad_header.write_text("day,file\n", encoding="utf-8")
    with pytest.raises(DataError, match="header"):
        read_stack_manifest(bad_header)
    bad_date = tmp_path / "m2.csv"
    bad_date.write_text("date,path\nnot-a-date,x.bgrid\n", encoding="utf-8")
    with pytest.raises(DataError, match="line 2"):
        read_stack_manifest(bad_date)


def test_pgm_pinned_bytes_and_sidecar(tmp_path: Path):
    values = np.array([[0.0, 0.5], [1.0, DEFAULT_NODATA]])
    path = tmp_path / "img.pgm"
    lo, hi = write_pgm(values, path, nodata=DEFAULT_NODATA)
    assert (lo, hi) == (0.0, 1.0)
    raw = path.read_bytes()
    assert raw == b"P5\n2 2\n255\n" + bytes([0, 128, 255, 0])
    sidecar = (tmp_path / "img.pgm.txt").read_text(encoding="utf-8")
    assert "min=0.0" in sidecar and "max=1.0" in sidecar
    assert "nodata_value=-9999.0" in sidecar and "nodata_gray=0" in sidecar


def test_pgm_constant_field_maps_to_midgray(tmp_path: Path):
    path = tmp_path / "flat.pgm"
    write_pgm(np.full((1, 3), 7.25), path)
    assert path.read_bytes().endswith(bytes([128, 128, 128]))


# -- flatten / reshape --------------------------------------------------------------


def test_flatten_reshape_roundtrip_exact():
    rng = np.random.default_rng(11)
    vals = rng.uniform(-1.0, 1.0, (4, 3))
    vals[2, 1] = DEFAULT_NODATA
    img = IndexImage(3, 4, "NDWI", DEFAULT_NODATA, vals)
    flat = flatten_image(img)
    assert flat.shape == (12,)
    assert flat[2 * 3 + 1] == DEFAULT_NODATA
    back = reshape_to_image(flat, 3, 4, index_kind="NDWI")
    assert back.values.tobytes() == img.values.tobytes()
    assert back.index_kind == "NDWI"
    with pytest.raises(ShapeError):
        reshape_to_image(flat, 4, 4)


def step10_stack(n_images, width=2, height=2, bad=None):
    """Images every 10 days; pixel p of image k holds (k*P + p)/1000.

    `bad` marks (image, row, col) cells to overwrite with nodata.
    """
    d0 = date(2024, 1, 1)
    p = width * height
    entries = []
    for k in range(n_images):
        vals = (np.arange(p, dtype=np.float64).reshape(height, width) + k * p) / 1000.0
        for bk, br, bc in bad or ():
            if bk == k:
                vals[br, bc] = DEFAULT_NODATA
        entries.append((d0 + timedelta(days=10 * k),
                        IndexImage(width, height, "NDVI", DEFAULT_NODATA, vals)))
    return ImageStack(entries=tuple(entries))


def test_flatten_stack_offsets_and_values():
    stack = step10_stack(6)
    target = stack.entries[5][0]
    windows, mask = flatten_stack(stack, target)
    assert windows.shape == (4, 5, 2)
    assert mask.all()
    assert windows[0, :, 1].tolist() == [50.0, 40.0, 30.0, 20.0, 10.0]
    # pixel 3 of image k holds (4k+3)/1000
    assert windows[3, :, 0].tolist() == [(4 * k + 3) / 1000.0 for k in range(5)]


def test_flatten_stack_skips_later_images():
    stack = step10_stack(8)
    # target between images 5 and 6: window must end at image 5
    target = stack.entries[5][0] + timedelta(days=3)
    windows, _ = flatten_stack(stack, target)
    assert windows[0, :, 1].tolist() == [43.0, 33.0, 23.0, 13.0, 3.0]
    assert windows[1, -1, 0] == (5 * 4 + 1) / 1000.0


def test_flatten_stack_insufficient_history():
    stack = step10_stack(6)
    with pytest.raises(InsufficientHistoryError, match="need 5 images before 2024-01-11, have 1"):
        flatten_stack(stack, date(2024, 1, 11))


def test_flatten_stack_mask_and_zeroing():
    stack = step10_stack(6, bad=[(2, 0, 1)])  # pixel 1 missing in third image
    windows, mask = flatten_stack(stack, stack.entries[5][0])
    assert mask.tolist() == [True, False, True, True]
    assert np.all(windows[1, :, 0] == 0.0)
    assert windows[1, 0, 1] == 50.0  # offsets survive masking


def test_stack_windows_for_training_alignment():
    stack = step10_stack(7)
    ws, run_ids = stack_windows_for_training(stack)
    # 2 runs x 4 pixels, ordered run-major then pixel
    assert ws.inputs.shape == (8, 5, 2)
    assert ws.targets.shape == (8, 1, 1)
    assert run_ids.tolist() == [0, 0, 0, 0, 1, 1, 1, 1]
    for s in range(8):
        r, p = divmod(s, 4)
        assert ws.inputs[s, :, 0].tolist() == [((r + k) * 4 + p) / 1000.0 for k in range(5)]
        assert ws.inputs[s, :, 1].tolist() == [50.0, 40.0, 30.0, 20.0, 10.0]
        assert ws.targets[s, 0, 0] == ((r + 5) * 4 + p) / 1000.0


def test_stack_windows_excludes_invalid_pixels():
    # pixel 2 nodata in image 6 drops it from run 1 only
    stack = step10_stack(7, bad=[(6, 1, 0)])
    ws, run_ids = stack_windows_for_training(stack)
    assert ws.inputs.shape[0] == 7
    assert run_ids.tolist() == [0, 0, 0, 0, 1, 1, 1]
    assert ws.targets[4:, 0, 0].tolist() == [24 / 1000.0, 25 / 1000.0, 27 / 1000.0]


def test_stack_windows_requires_six_images():
    with pytest.raises(InsufficientDataError, match="need at least 6"):
        stack_windows_for_training(step10_stack(5))


# -- batched pixel prediction --------------------------------------------------------


PIXEL_SHAPE = ModelShape(input_dim=2, encoder_hidden=4, decoder_hidden=4,
                         dense_hidden=3, horizon=1)


def test_predict_pixels_mask_and_validation():
    model = init_params(PIXEL_SHAPE, seed=0)
    windows = np.zeros((3, 5, 2))
    windows[:, :, 1] = [50.0, 40.0, 30.0, 20.0, 10.0]
    out = predict_pixels(model, windows, np.array([True, False, True]))
    assert out[1] == DEFAULT_NODATA
    assert out[0] != DEFAULT_NODATA and -1.0 <= out[0] <= 1.0
    with pytest.raises(ShapeError):
        predict_pixels(model, windows[:, :4, :], np.ones(3, dtype=bool))
    with pytest.raises(ShapeError):
        predict_pixels(model, windows, np.ones(2, dtype=bool))
    soil_like = init_params(ModelShape(4, 4, 4, 3, horizon=2), seed=0)
    with pytest.raises(ShapeError):
        predict_pixels(soil_like, windows, np.ones(3, dtype=bool))


def test_predict_pixels_clamps_to_index_range():
    model = init_params(PIXEL_SHAPE, seed=1)
    model.head_out.bias[...] = 50.0  # force raw outputs far above 1
    windows = np.zeros((2, 5, 2))
    windows[:, :, 1] = [50.0, 40.0, 30.0, 20.0, 10.0]
    out = predict_pixels(model, windows, np.ones(2, dtype=bool))
    assert out.tolist() == [1.0, 1.0]


def test_predict_pixels_batch_size_agreement():
    # different batch splits hit different BLAS kernels; require closeness,
    # not byte equality
    rng = np.random.default_rng(3)
    model = init_params(PIXEL_SHAPE, seed=3)
    windows = rng.uniform(-1.0, 1.0, (37, 5, 2))
    windows[:, :, 1] = np.array([50.0, 40.0, 30.0, 20.0, 10.0])
    mask = rng.uniform(size=37) > 0.2
    full = predict_pixels(model, windows, mask, batch_size=4096)
    small = predict_pixels(model, windows, mask, batch_size=5)
    assert np.allclose(full, small, rtol=0.0, atol=1e-9)
    again = predict_pixels(model, windows, mask, batch_size=4096)
    assert again.tobytes() == full.tobytes()
