import numpy as np
import pytest

from organpool.errors import DataError, GeometryError, SchemaError
from organpool.lattice import LatticeGeometry, Volume
from organpool.masks import (LabelSchema, ScalarStats, bounding_box_region,
                             compute_organ_scalars, dilate_metric, fit_scalar_stats,
                             load_schema, merge_classes, project_mask_to_lattice,
                             raw_organ_scalars, save_schema, scalar_vector)
from organpool.oracles import oracle_dilate

import organpool


def two_organ_schema() -> LabelSchema:
    return LabelSchema(
        labels=("a_focal", "a_size", "b_focal", "misc"),
        kappa={"a_focal": "organ_a", "a_size": "organ_a",
               "b_focal": "organ_b", "misc": "other"},
        merge_map={1: "organ_a", 2: "organ_a", 3: "organ_b"},
        dilation_mm={"organ_a": 1.0, "organ_b": 2.5})


# ---------------------------------------------------------------------------
# schema
# ---------------------------------------------------------------------------

def test_schema_accessors():
    s = two_organ_schema()
    assert s.n_labels == 4
    assert s.organs == ("organ_a", "organ_b")
    assert s.labels_for("organ_a") == ("a_focal", "a_size")
    assert s.other_labels == ("misc",)
    np.testing.assert_array_equal(s.label_indices_for("organ_b"), [2])


@pytest.mark.parametrize("breakage", [
    dict(labels=("x", "x"), kappa={"x": "other"}, merge_map={}, dilation_mm={}),
    dict(labels=(), kappa={}, merge_map={}, dilation_mm={}),
    dict(labels=("x",), kappa={}, merge_map={}, dilation_mm={}),
    dict(labels=("x",), kappa={"x": "lungs"}, merge_map={}, dilation_mm={}),
    dict(labels=("x",), kappa={"x": "lungs"}, merge_map={1: "lungs"},
         dilation_mm={"lungs": -1.0}),
    dict(labels=("x",), kappa={"x": "other"}, merge_map={1: "other"},
         dilation_mm={"other": 1.0}),
    dict(labels=("x",), kappa={"x": "lungs", "ghost": "other"},
         merge_map={1: "lungs"}, dilation_mm={"lungs": 1.0}),
])
def test_schema_validation(breakage):
    with pytest.raises(SchemaError):
        LabelSchema(**breakage)


def test_schema_file_round_trip(tmp_path):
    s = two_organ_schema()
    path = tmp_path / "x.schema"
    save_schema(s, path)
    got = load_schema(path)
    assert got == s
    assert got.content_hash() == s.content_hash()


def test_content_hash_tracks_semantics():
    s = two_organ_schema()
    moved = LabelSchema(labels=s.labels,
                        kappa={**s.kappa, "a_size": "organ_b"},
                        merge_map=s.merge_map, dilation_mm=s.dilation_mm)
    assert moved.content_hash() != s.content_hash()


@pytest.mark.parametrize("name,n_labels", [("ctrate_chest", 18), ("merlin_abdomen", 30)])
def test_packaged_schemas_load(name, n_labels):
    root = organpool.__path__[0]
    schema = load_schema(f"{root}/schemas/{name}.schema")
    assert schema.n_labels == n_labels
    assert schema.organs
    for r in schema.dilation_mm.values():
        assert r >= 0.0


def test_load_schema_rejects_garbage(tmp_path):
    bad = tmp_path / "bad.schema"
    bad.write_text("[labels]\n")
    with pytest.raises(SchemaError):
        load_schema(bad)


# ---------------------------------------------------------------------------
# merge / dilate / project / bbox
# ---------------------------------------------------------------------------

def test_merge_classes_unions_and_counts_unknown():
    s = two_organ_schema()
    seg = np.array([[[0, 1, 2], [3, 9, 0]]])
    grids, unknown = merge_classes(seg, s)
    np.testing.assert_array_equal(grids["organ_a"], [[[0, 1, 1], [0, 0, 0]]])
    np.testing.assert_array_equal(grids["organ_b"], [[[0, 0, 0], [1, 0, 0]]])
    assert unknown == 1
    with pytest.raises(DataError):
        merge_classes(seg.astype(np.float64), s)


def test_dilate_zero_radius_and_empty():
    grid = np.zeros((3, 3, 3), dtype=np.uint8)
    np.testing.assert_array_equal(dilate_metric(grid, 2.0, (1, 1, 1)), grid)
    grid[1, 1, 1] = 1
    np.testing.assert_array_equal(dilate_metric(grid, 0.0, (1, 1, 1)), grid)
    with pytest.raises(DataError):
        dilate_metric(grid, -1.0, (1, 1, 1))


def test_dilate_respects_anisotropy():
    grid = np.zeros((3, 3, 3), dtype=np.uint8)
    grid[1, 1, 1] = 1
    out = dilate_metric(grid, 1.0, (2.0, 1.0, 1.0))
    assert out[0, 1, 1] == 0 and out[2, 1, 1] == 0    # 2 mm along z
    assert out[1, 0, 1] == 1 and out[1, 1, 2] == 1    # 1 mm in plane
    assert out[1, 0, 0] == 0                          # sqrt(2) mm diagonal


def test_dilate_matches_brute_force(rng):
    spacings = [(1.0, 1.0, 1.0), (2.0, 1.0, 1.0), (2.5, 0.8, 1.2)]
    for shape, density in [((5, 6, 7), 0.15), ((4, 8, 8), 0.08)]:
        grid = (rng.random(shape) < density).astype(np.uint8)
        for spacing in spacings:
            for r in (0.0, 1.0, 2.0, 3.5):
                np.testing.assert_array_equal(
                    dilate_metric(grid, r, spacing), oracle_dilate(grid, r, spacing),
                    err_msg=f"shape={shape} spacing={spacing} r={r}")


def test_project_voxel_saturation_and_emptiness():
    geometry = LatticeGeometry(kind="voxel", cells=(2, 4, 4))
    full = np.ones((4, 8, 8), dtype=np.uint8)
    np.testing.assert_array_equal(project_mask_to_lattice(full, geometry), 1.0)
    empty = np.zeros((4, 8, 8), dtype=np.uint8)
    np.testing.assert_array_equal(project_mask_to_lattice(empty, geometry), 0.0)
    half = np.zeros((4, 8, 8), dtype=np.uint8)
    half[:2] = 1
    m = project_mask_to_lattice(half, geometry)
    assert set(np.unique(m)) <= {0.0, 1.0}
    np.testing.assert_array_equal(m.reshape(2, 4, 4)[0], 1.0)
    np.testing.assert_array_equal(m.reshape(2, 4, 4)[1], 0.0)


def test_project_token_uses_centers_and_patch_samples(rng):
    geometry = LatticeGeometry(kind="token", slabs=2, side=4, patch=2)
    grid = np.zeros((6, 4, 4), dtype=np.uint8)
    grid[1] = 1                               # only the first slab's slice is set
    m = project_mask_to_lattice(grid, geometry, centers=[1, 4])
    np.testing.assert_array_equal(m, [1, 1, 1, 1, 0, 0, 0, 0])
    with pytest.raises(GeometryError):
        project_mask_to_lattice(grid, geometry, centers=[1])
    with pytest.raises(GeometryError):
        project_mask_to_lattice(grid, geometry, centers=[1, 99])
    with pytest.raises(GeometryError):
        project_mask_to_lattice(grid[0], geometry, centers=[1, 4])


def test_bounding_box_contains_and_is_tight(rng):
    for _ in range(10):
        grid = (rng.random((5, 6, 4)) < 0.1).astype(np.uint8)
        box = bounding_box_region(grid)
        assert np.all(box >= grid)
        if grid.any():
            idx = np.nonzero(grid)
            lo = [int(a.min()) for a in idx]
            hi = [int(a.max()) for a in idx]
            expect = np.zeros_like(grid)
            expect[lo[0]:hi[0] + 1, lo[1]:hi[1] + 1, lo[2]:hi[2] + 1] = 1
            np.testing.assert_array_equal(box, expect)
        else:
            assert box.sum() == 0


# ---------------------------------------------------------------------------
# organ scalars
# ---------------------------------------------------------------------------

def _block_volume():
    data = np.full((4, 4, 4), -500.0)
    data[1:3, 1:3, 1:3] = 80.0
    data[1, 1, 1] = 5000.0    # must be clipped to 1000 in the mean
    return Volume(data=data, spacing=(2.0, 1.0, 1.0))


def test_raw_scalars_volume_hu_border():
    v = _block_volume()
    interior = np.zeros((4, 4, 4), dtype=np.uint8)
    interior[1:3, 1:3, 1:3] = 1
    vol_mm3, mean_hu, border = raw_organ_scalars(v, interior)
    assert vol_mm3 == pytest.approx(8 * 2.0)
    expect_mean = (7 * 80.0 + 1000.0) / 8.0
    assert mean_hu == pytest.approx(expect_mean)
    assert border == 0.0

    touching = np.zeros((4, 4, 4), dtype=np.uint8)
    touching[0, 1, 1] = 1
    assert raw_organ_scalars(v, touching)[2] == 1.0

    empty = np.zeros((4, 4, 4), dtype=np.uint8)
    assert raw_organ_scalars(v, empty) == (0.0, 0.0, 0.0)

    with pytest.raises(GeometryError):
        raw_organ_scalars(v, np.zeros((2, 2, 2)))


def test_fit_scalar_stats_and_round_trip(tmp_path):
    raws = [{"organ_a": (10.0, 50.0, 0.0), "organ_b": (0.0, 0.0, 0.0)},
            {"organ_a": (14.0, 54.0, 1.0), "organ_b": (0.0, 0.0, 0.0)},
            {"organ_a": (12.0, 52.0, 0.0), "organ_b": (0.0, 0.0, 1.0)}]
    stats = fit_scalar_stats(raws, ("organ_a", "organ_b"))
    a = stats.per_organ["organ_a"]
    assert a.mean_volume == pytest.approx(12.0)
    assert a.std_volume == pytest.approx(2.0)      # ddof=1
    assert a.mean_hu == pytest.approx(52.0)
    assert not a.absent
    b = stats.per_organ["organ_b"]
    assert b.absent
    assert b.std_volume == 1e-6                    # floored, never zero

    path = tmp_path / "stats.ini"
    stats.save(path)
    got = ScalarStats.load(path)
    for organ in ("organ_a", "organ_b"):
        x, y = stats.per_organ[organ], got.per_organ[organ]
        assert (x.mean_volume, x.std_volume, x.mean_hu, x.std_hu, x.absent) == \
               (y.mean_volume, y.std_volume, y.mean_hu, y.std_hu, y.absent)

    with pytest.raises(DataError):
        fit_scalar_stats(raws[:1], ("organ_a",))


def test_compute_scalars_z_scores():
    raws = [{"o": (10.0, 50.0, 0.0)}, {"o": (14.0, 54.0, 1.0)}]
    stats = fit_scalar_stats(raws, ("o",))
    v = _block_volume()
    mask = np.zeros((4, 4, 4), dtype=np.uint8)
    mask[1:3, 1:3, 1:3] = 1
    zv, zh, border = compute_organ_scalars(v, mask, "o", stats)
    raw_v, raw_h, raw_b = raw_organ_scalars(v, mask)
    assert zv == pytest.approx((raw_v - 12.0) / stats.per_organ["o"].std_volume)
    assert zh == pytest.approx((raw_h - 52.0) / stats.per_organ["o"].std_hu)
    assert border == raw_b


def test_scalar_vector_canonical_order():
    triple = (1.5, -0.5, 1.0)
    np.testing.assert_array_equal(scalar_vector(triple, ("volume", "hu", "border")),
                                  [1.5, -0.5, 1.0])
    np.testing.assert_array_equal(scalar_vector(triple, ("border", "volume")),
                                  [1.5, 1.0])
    np.testing.assert_array_equal(scalar_vector(triple, ()), np.zeros(0))
    with pytest.raises(DataError):
        scalar_vector(triple, ("mass",))
