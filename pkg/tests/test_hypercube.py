import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from beltscan.hypercube import (
    CLASS_NAMES,
    DEFAULT_GRID,
    FormatError,
    HyperCube,
    LabelMap,
    MaterialClass,
    PatchSpec,
    band_to_wavelength,
    extract_patch,
    load_cube,
    load_labels,
    load_raster,
    save_cube,
    save_labels,
    save_raster,
    select_bands,
    tile,
    tile_origins,
    wavelength_to_band,
)

from conftest import random_cube


def lattice_table():
    """Independent enumeration: sensor band k sits at 942 + 3.5 k nm; retained bands are k = 20..203."""
    return {942.0 + 3.5 * k: k - 20 for k in range(224) if 20 <= k < 204}


def count_tiles(size, patch, stride):
    """Walk the axis one origin at a time, then shift the last tile flush."""
    n, pos = 0, 0
    while pos + patch <= size:
        n += 1
        last = pos
        pos += stride
    return n + (1 if last + patch < size else 0)


# ---------------------------------------------------------------- lattice

def test_grid_invariants():
    g = DEFAULT_GRID
    assert g.retained_bands == g.sensor_bands - g.skip_head - g.skip_tail == 184
    assert np.all(np.diff(g.wavelengths) > 0)
    assert g.wavelengths[0] == 1012.0 and g.wavelengths[-1] == 1652.5


@pytest.mark.parametrize("nm,band", [(1012, 0), (1225.5, 61), (1169.5, 45), (1638.5, 179), (1652.5, 183)])
def test_wavelength_to_band_examples(nm, band):
    assert lattice_table()[nm] == band
    assert wavelength_to_band(nm) == band


@pytest.mark.parametrize("band,nm", [(0, 1012.0), (183, 1652.5), (45, 1169.5)])
def test_band_to_wavelength_examples(band, nm):
    assert band_to_wavelength(band) == nm


@pytest.mark.parametrize("nm", [942.0, 1008.5, 1656.0, 1723.0])
def test_skipped_bands_raise_with_span(nm):
    with pytest.raises(ValueError, match=r"1012.*1652.5"):
        wavelength_to_band(nm)


@pytest.mark.parametrize("i", [-1, 184])
def test_band_index_out_of_range(i):
    with pytest.raises(IndexError):
        band_to_wavelength(i)


def test_lattice_round_trip_exact():
    for nm, band in lattice_table().items():
        assert wavelength_to_band(nm) == band
        assert band_to_wavelength(band) == nm


@given(st.floats(1012.0 - 1.74, 1652.5 + 1.74))
def test_round_trip_within_half_step(nm):
    assert abs(band_to_wavelength(wavelength_to_band(nm)) - nm) <= 1.75


# ---------------------------------------------------------------- classes

def test_material_classes():
    assert len(MaterialClass) == 13
    assert CLASS_NAMES[:3] == ("meat", "fat", "conveyor")
    assert CLASS_NAMES[-1] == "white_conveyor"
    for c in MaterialClass:
        assert c.is_contaminant == (c.code >= 3)
        assert MaterialClass.from_label(c.label) is c


# ---------------------------------------------------------------- cube types

def test_cube_rejects_non_finite():
    data = np.zeros((2, 2, 184), np.float32)
    data[0, 0, 0] = np.nan
    with pytest.raises(ValueError, match="non-finite"):
        HyperCube(data)


def test_cube_is_read_only(rng):
    cube = random_cube(rng)
    with pytest.raises(ValueError):
        cube.data[0, 0, 0] = 1.0


def test_band_lookup(rng):
    cube = random_cube(rng)
    np.testing.assert_array_equal(cube.band(1225.5), cube.data[:, :, 61])


def test_labelmap_range():
    with pytest.raises(ValueError):
        LabelMap(np.array([[13]]))
    lm = LabelMap(np.array([[0, 3], [12, 2]]))
    assert lm.contaminant_mask().tolist() == [[False, True], [True, False]]
    assert lm.classes_present() == {MaterialClass(0), MaterialClass(2), MaterialClass(3), MaterialClass(12)}


# ---------------------------------------------------------------- band selection

def test_select_bands_shape_and_shift():
    data = np.broadcast_to(np.arange(224, dtype=np.float32), (3, 5, 224))
    out = select_bands(HyperCube(data))
    assert out.shape == (3, 5, 184)
    assert np.all(out.data[:, :, 0] == 20)
    assert np.all(out.data[:, :, -1] == 203)
    assert out.stages == ("band_select",)
    np.testing.assert_array_equal(out.wavelengths, DEFAULT_GRID.wavelengths)


def test_select_bands_full_frame_dims():
    raw = HyperCube(np.zeros((640, 1000, 224), np.float32))
    assert select_bands(raw).shape == (640, 1000, 184)


def test_select_bands_twice_fails(rng):
    with pytest.raises(ValueError, match="224"):
        select_bands(random_cube(rng))


# ---------------------------------------------------------------- tiling

def test_tile_40x32_overlap_half():
    spec = PatchSpec(overlap_fraction=0.5)
    origins = tile_origins(40, 32, spec)
    assert origins == [(r, c) for r in (0, 10, 20) for c in (0, 8, 16)]


def test_single_patch():
    assert tile_origins(20, 16, PatchSpec()) == [(0, 0)]


def test_full_frame_counts():
    # Stride enumeration (independent walk) for 640 x 1000: rows 63 at stride 10,
    # columns 124 at stride 8 (the flush tile at 984 is distinct from 976).
    rows, cols = count_tiles(640, 20, 10), count_tiles(1000, 16, 8)
    assert (rows, cols) == (63, 124)
    assert len(tile_origins(640, 1000, PatchSpec(overlap_fraction=0.5))) == rows * cols == 7812
    assert len(tile_origins(640, 1000, PatchSpec())) == count_tiles(640, 20, 20) * count_tiles(1000, 16, 16) == 2016


def test_tile_too_small():
    with pytest.raises(ValueError, match="smaller"):
        tile_origins(19, 16, PatchSpec())


@settings(max_examples=60, deadline=None)
@given(st.integers(20, 90), st.integers(16, 90), st.sampled_from([0.0, 0.25, 0.5, 0.75]))
def test_tiling_covers_and_stays_inside(h, w, overlap):
    spec = PatchSpec(overlap_fraction=overlap)
    origins = tile_origins(h, w, spec)
    cover = np.zeros((h, w), int)
    for r, c in origins:
        assert 0 <= r and r + spec.patch_h <= h and 0 <= c and c + spec.patch_w <= w
        cover[r:r + spec.patch_h, c:c + spec.patch_w] += 1
    assert cover.min() >= 1
    assert origins == tile_origins(h, w, spec)
    assert origins == sorted(origins)


def test_tile_yields_pixel_tokens(rng):
    cube = random_cube(rng, 40, 32)
    spec = PatchSpec()
    patches = list(tile(cube, spec))
    assert len(patches) == 4
    tokens, (r, c) = patches[3]
    assert tokens.shape == (320, 184)
    np.testing.assert_array_equal(tokens[17], cube.data[r + 1, c + 1])
    np.testing.assert_array_equal(extract_patch(cube.data, (r, c), spec), tokens)


# ---------------------------------------------------------------- I/O

def test_cube_round_trip(tmp_path, rng):
    cube = random_cube(rng, stages=("band_select", "ffc"))
    save_cube(cube, tmp_path / "c.hdr")
    back = load_cube(tmp_path / "c.hdr")
    assert back.data.tobytes() == cube.data.tobytes()
    assert back.stages == cube.stages
    np.testing.assert_array_equal(back.wavelengths, cube.wavelengths)
    hdr = (tmp_path / "c.hdr").read_text()
    for key in ("samples = 8", "lines = 8", "bands = 184", "data type = 4", "interleave = bip", "byte order = 0"):
        assert key in hdr


def test_raw_sensor_cube_round_trip(tmp_path, rng):
    cube = random_cube(rng, 2, 3, 224)
    save_cube(cube, tmp_path / "raw.hdr")
    assert load_cube(tmp_path / "raw.hdr").data.tobytes() == cube.data.tobytes()


def test_short_raw_file(tmp_path, rng):
    save_cube(random_cube(rng), tmp_path / "c.hdr")
    hdr = tmp_path / "c.hdr"
    text = hdr.read_text().replace("samples = 8", "samples = 1000").replace("lines = 8", "lines = 640")
    hdr.write_text(text)
    with pytest.raises(FormatError, match="size mismatch"):
        load_cube(hdr)


def test_non_bip_rejected(tmp_path, rng):
    save_cube(random_cube(rng), tmp_path / "c.hdr")
    hdr = tmp_path / "c.hdr"
    hdr.write_text(hdr.read_text().replace("interleave = bip", "interleave = bsq"))
    with pytest.raises(FormatError, match="interleave"):
        load_cube(hdr)


def test_malformed_header(tmp_path):
    (tmp_path / "x.hdr").write_text("not an envi header\n")
    with pytest.raises(FormatError):
        load_cube(tmp_path / "x.hdr")


def test_non_finite_raster_rejected(tmp_path, rng):
    save_cube(random_cube(rng), tmp_path / "c.hdr")
    raw = np.fromfile(tmp_path / "c.raw", "<f4")
    raw[5] = np.inf
    raw.tofile(tmp_path / "c.raw")
    with pytest.raises(FormatError, match="non-finite"):
        load_cube(tmp_path / "c.hdr")


def test_label_round_trip(tmp_path, rng):
    lm = LabelMap(rng.integers(0, 13, (7, 9)))
    save_labels(lm, tmp_path / "l.hdr")
    hdr = (tmp_path / "l.hdr").read_text()
    assert "data type = 1" in hdr
    assert "classes = {" + ", ".join(CLASS_NAMES) + "}" in hdr
    np.testing.assert_array_equal(load_labels(tmp_path / "l.hdr").labels, lm.labels)


def test_confidence_raster_round_trip(tmp_path, rng):
    v = rng.random((4, 6)).astype(np.float32)
    save_raster(v, tmp_path / "conf.hdr", "confidence")
    np.testing.assert_array_equal(load_raster(tmp_path / "conf.hdr"), v)
