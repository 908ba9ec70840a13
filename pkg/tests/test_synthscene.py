import itertools
from dataclasses import replace

import numpy as np
import pytest
from scipy import ndimage

from beltscan.calibration import apply_ffc, compute_gain, normalize_array
from beltscan.hypercube import DEFAULT_GRID, MaterialClass, load_cube, load_labels, select_bands
from beltscan.postprocess import conveyor_predicate, fat_predicate, meat_predicate
from beltscan.synthscene import (
    CameraMeta,
    Contaminant,
    DatasetSpec,
    MaterialSpectrum,
    NoiseModel,
    SceneSpec,
    default_materials,
    read_manifest,
    render_dataset,
    render_scene,
    scene_seed,
)

M = MaterialClass
WL = DEFAULT_GRID.wavelengths


def mean_curve(cls, seed=0):
    return default_materials(seed)[cls].mean


# ---------------------------------------------------------------- materials

def test_thirteen_smooth_curves_in_unit_interval():
    mats = default_materials(0)
    assert set(mats) == set(MaterialClass)
    for m in mats.values():
        assert m.mean.shape == (184,)
        assert np.all(m.mean > 0) and np.all(m.mean <= 1)
        assert np.all(m.std >= 0)
        # narrowest feature is 9 nm wide; adjacent 3.5 nm steps stay small
        assert np.abs(np.diff(m.mean)).max() < 0.05


def test_curves_pairwise_distinct():
    mats = default_materials(0)
    for a, b in itertools.combinations(MaterialClass, 2):
        assert np.abs(mats[a].mean - mats[b].mean).max() > 0


def test_curves_distinct_after_normalization():
    mats = default_materials(0)
    for a, b in itertools.combinations(MaterialClass, 2):
        d = np.abs(normalize_array(mats[a].mean) - normalize_array(mats[b].mean)).max()
        assert d > 0.1, (a, b)


def test_fat_and_pehd_differ_only_near_1222():
    d = np.abs(mean_curve(M.FAT) - mean_curve(M.PEHD))
    far = np.abs(WL - 1222) > 55
    assert d[far].max() < 1e-3
    assert d[~far].max() > 0.05


@pytest.mark.parametrize("seed", [0, 1, 7, 123])
def test_rule_construction(seed):
    s = {c: mean_curve(c, seed)[None] for c in (M.FAT, M.PEHD, M.CONVEYOR, M.MEAT, M.PA_PP)}
    # true contaminants survive the rules
    assert not fat_predicate(s[M.PEHD])[0]
    assert not conveyor_predicate(s[M.PEHD])[0]
    assert not meat_predicate(s[M.PA_PP])[0]
    # mislabelled negatives are reclaimed
    assert fat_predicate(s[M.FAT])[0]
    assert conveyor_predicate(s[M.CONVEYOR])[0]
    assert meat_predicate(s[M.MEAT])[0]


def test_camera_meta():
    cam = CameraMeta()
    assert cam.fov_width_mm / cam.sensor_width_px == pytest.approx(cam.pixel_pitch_mm, rel=0.01)
    assert cam.min_feature_px >= 2


# ---------------------------------------------------------------- scene specs

def test_contaminant_validation():
    with pytest.raises(ValueError):
        Contaminant(M.MEAT)
    with pytest.raises(ValueError):
        Contaminant(M.PEHD, size=1)
    with pytest.raises(ValueError):
        Contaminant(M.PEHD, shape="star")
    with pytest.raises(ValueError, match="outside"):
        SceneSpec(40, 40, contaminants=(Contaminant(M.PEHD, size=6, position=(36, 0)),))


@pytest.mark.parametrize("shape", ["rectangle", "ellipse", "line", "spiral"])
def test_footprints_span_two_pixels(shape):
    fp = Contaminant(M.WOOD, shape, size=9, thickness=1, angle=0.7).footprint()
    assert fp.any()
    rows = np.flatnonzero(fp.any(axis=1))
    cols = np.flatnonzero(fp.any(axis=0))
    assert np.ptp(rows) + 1 >= 2 or np.ptp(cols) + 1 >= 2
    assert ndimage.label(fp, structure=np.ones((3, 3)))[1] == 1


# ---------------------------------------------------------------- rendering

def noiseless_materials():
    return {c: replace(m, band_std=0.0) for c, m in default_materials(0).items()}


def test_noiseless_limit_reproduces_material_curves():
    spec = SceneSpec(48, 40, contaminants=(Contaminant(M.PU, size=6, position=(20, 16)),),
                     seed=3, blend_px=0, shading=0.0)
    mats = noiseless_materials()
    raw, labels, _ = render_scene(spec, mats, NoiseModel.identity())
    sw = DEFAULT_GRID.sensor_wavelengths
    for c in labels.classes_present():
        px = raw.data[labels.labels == c]
        np.testing.assert_allclose(px, np.broadcast_to(mats[c].curve(sw), px.shape).astype(np.float32), rtol=1e-6)


def test_render_is_deterministic():
    spec = SceneSpec(40, 32, seed=11, contaminants=(Contaminant(M.METAL, size=5),))
    a = render_scene(spec)
    b = render_scene(spec)
    assert a[0].data.tobytes() == b[0].data.tobytes()
    assert a[1].labels.tobytes() == b[1].labels.tobytes()
    assert a[2].flat.data.tobytes() == b[2].flat.data.tobytes()


def test_labels_exact_and_contaminant_placed():
    c = Contaminant(M.NITRILE, size=7, position=(10, 10))
    _, labels, _ = render_scene(SceneSpec(40, 40, contaminants=(c,), seed=2))
    assert np.all(labels.labels[10:17, 10:17] == M.NITRILE)
    assert (labels.labels == M.NITRILE).sum() == 49


def test_stripes_removed_by_ffc():
    noise = NoiseModel(stripe_std=0.08)
    spec = SceneSpec(160, 100, orientation="belt", seed=5, shading=0.0)
    raw, _, frames = render_scene(spec, noise=noise)
    cube = select_bands(raw)
    fr = frames.select_bands()
    c = apply_ffc(cube, fr, compute_gain(fr)).data.astype(np.float64)
    col_mean = c.mean(axis=0)                           # per column, per band
    spread = np.abs(col_mean - col_mean.mean(axis=0)).max()
    assert spread <= 3 * noise.shot_std
    # the raw cube does carry visible stripes
    raw_cols = (cube.data.mean(axis=0) - noise.dark_offset)
    assert np.abs(raw_cols / raw_cols.mean(axis=0) - 1).max() > 0.05


def test_drift_neutral_after_preprocessing():
    spec = SceneSpec(64, 48, seed=9, contaminants=(Contaminant(M.PA_PP, size=6),))
    base = NoiseModel()
    out, spans = [], []
    for g, o in [(0.8, -0.02), (1.2, 0.02)]:
        raw, _, frames = render_scene(spec, noise=replace(base, drift_gain=g, drift_offset=o))
        fr = frames.select_bands()
        c = apply_ffc(select_bands(raw), fr, compute_gain(fr)).data.astype(np.float64)
        out.append(normalize_array(c))
        spans.append(np.ptp(c, axis=-1))
    # shot noise expressed in normalized units: divide by each pixel's spectral span
    rms = np.sqrt(((out[0] - out[1]) ** 2).mean(axis=-1))
    assert np.all(rms <= 3 * base.shot_std / np.minimum(*spans))


def test_drift_neutral_exactly_without_shot_noise():
    spec = SceneSpec(40, 32, seed=4)
    base = replace(NoiseModel(), shot_std=0.0)
    out = []
    for g, o in [(0.8, -0.02), (1.2, 0.02)]:
        raw, _, frames = render_scene(spec, noise=replace(base, drift_gain=g, drift_offset=o))
        fr = frames.select_bands()
        out.append(normalize_array(apply_ffc(select_bands(raw), fr, compute_gain(fr)).data))
    assert np.abs(out[0] - out[1]).max() < 1e-4


def test_drift_changes_raw_intensity():
    spec = SceneSpec(32, 32, seed=9)
    a, _, _ = render_scene(spec, noise=replace(NoiseModel(), drift_gain=0.8))
    b, _, _ = render_scene(spec, noise=replace(NoiseModel(), drift_gain=1.2))
    assert b.data.mean() > a.data.mean() * 1.2


# ---------------------------------------------------------------- datasets

def test_scene_seed_mixing():
    assert scene_seed(7, 0) == scene_seed(7, 0)
    assert len({scene_seed(7, i) for i in range(50)}) == 50
    assert scene_seed(7, 1) != scene_seed(8, 1)


@pytest.fixture(scope="module")
def small_ds(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    spec = DatasetSpec(n_scenes=4, height=48, width=40, contaminant_fraction=0.5, seed=3)
    return render_dataset(root / "a", spec), render_dataset(root / "b", spec)


def test_dataset_layout_and_manifest(small_ds):
    a, _ = small_ds
    rows = read_manifest(a)
    assert [r["scene_id"] for r in rows] == [f"scene_{i:04d}" for i in range(4)]
    assert {r["orientation"] for r in rows} == {"fat_up", "meat_up"}
    assert sum(bool(r["contaminants"]) for r in rows) == 2
    for r in rows:
        assert 0.8 <= float(r["drift_gain"]) <= 1.2
        cube = load_cube(a / "scenes" / f"{r['scene_id']}.hdr")
        labels = load_labels(a / "scenes" / f"{r['scene_id']}_labels.hdr")
        assert cube.shape == (48, 40, 224)
        present = {c.label for c in labels.classes_present() if c.is_contaminant}
        assert present == set(filter(None, r["contaminants"].split(";")))
    assert (a / "dark.hdr").exists() and (a / "flat.hdr").exists()


def test_dataset_deterministic(small_ds):
    a, b = small_ds
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert files == sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    for f in files:
        assert (a / f).read_bytes() == (b / f).read_bytes()


@pytest.mark.parametrize("fraction", [0.0, 1.0])
def test_contaminant_fraction_extremes(tmp_path, fraction):
    root = render_dataset(tmp_path, DatasetSpec(n_scenes=10, height=40, width=32,
                                                contaminant_fraction=fraction, seed=1))
    for r in read_manifest(root):
        labels = load_labels(root / "scenes" / f"{r['scene_id']}_labels.hdr")
        has = labels.contaminant_mask().any()
        assert has == (fraction == 1.0)
        if not has:
            assert labels.labels.max() <= 2


def test_drift_override(tmp_path):
    root = render_dataset(tmp_path, DatasetSpec(n_scenes=2, height=32, width=32, seed=1),
                          drift_override=(1.1, 0.01))
    for r in read_manifest(root):
        assert float(r["drift_gain"]) == pytest.approx(1.1)
        assert float(r["drift_offset"]) == pytest.approx(0.01)


def test_unwritable_output(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        render_dataset(blocker / "sub", DatasetSpec(n_scenes=1, height=32, width=32))
