import numpy as np
import pytest

from medpoint import datagen as D


# -- shapes ------------------------------------------------------------------

def test_sphere_shell_on_unit_sphere():
    r = np.linalg.norm(D.gen_shape("sphere_shell", 500, 0).coords, axis=1)
    assert np.all(np.abs(r - 1) <= 1e-6)


def test_nested_spheres_separable_by_radius():
    c = D.gen_shape("nested_spheres", 400, 1)
    r = np.linalg.norm(c.coords, axis=1)
    assert set(np.unique(c.point_labels)) == {0, 1}
    assert r[c.point_labels == 0].max() < r[c.point_labels == 1].min()
    np.testing.assert_allclose(r[c.point_labels == 0], 0.5, atol=1e-12)


@pytest.mark.parametrize("cls", D.CLASSES)
def test_shapes_deterministic_normalised_centred(cls):
    a = D.gen_shape(cls, 256, 42, noise=0.01, size_jitter=0.15)
    b = D.gen_shape(cls, 256, 42, noise=0.01, size_jitter=0.15)
    assert np.array_equal(a.coords, b.coords)
    assert a.coords.shape == (256, 3) and a.class_label == D.CLASSES.index(cls)
    assert np.linalg.norm(a.coords, axis=1).max() <= 1 + 1e-12
    assert np.linalg.norm(a.coords.mean(axis=0)) < 0.25


def test_gen_shape_errors():
    with pytest.raises(ValueError):
        D.gen_shape("cube", 64, 0)
    with pytest.raises(ValueError):
        D.gen_shape("torus", 31, 0)


def test_scene_parts_and_normalisation():
    s = D.gen_scene(300, 3, parts=3)
    assert sorted(np.unique(s.point_labels)) == [0, 1, 2]
    assert np.linalg.norm(s.coords, axis=1).max() <= 1 + 1e-12
    assert np.linalg.norm(s.coords.mean(axis=0)) < 0.25
    with pytest.raises(ValueError):
        D.gen_scene(100, 0, parts=5)


def test_nested_segmentation_varies_inner_radius():
    a, b = D.gen_nested_segmentation(256, 1, noise=0), D.gen_nested_segmentation(256, 2, noise=0)
    ra = np.linalg.norm(a.coords[a.point_labels == 0], axis=1).max()
    rb = np.linalg.norm(b.coords[b.point_labels == 0], axis=1).max()
    assert ra != rb and 0.4 <= ra <= 0.6 and 0.4 <= rb <= 0.6


# -- anchor crop ----------------------------------------------------------------

def test_crop_size():
    pair = D.mask_anchor_crop(D.gen_shape("sphere_shell", 2048, 0), 0.2, 1)
    assert len(pair.partial) == 1639 and len(pair.removed) == 409


def test_crop_empty_when_floor_is_zero():
    cloud = np.random.default_rng(0).normal(size=(40, 3))
    pair = D.mask_anchor_crop(cloud, 0.01, 0)
    assert np.array_equal(pair.partial, cloud)


def test_crop_removes_nearest_to_anchor():
    cloud = np.random.default_rng(1).normal(size=(100, 3))
    pair = D.mask_anchor_crop(cloud, 0.2, 5)
    d = np.linalg.norm(cloud - cloud[pair.anchor], axis=1)
    brute = sorted(range(100), key=lambda i: (d[i], i))[:20]
    assert sorted(brute) == list(pair.removed)
    assert pair.anchor in pair.removed
    kept = np.setdiff1d(np.arange(100), pair.removed)
    assert np.array_equal(pair.partial, cloud[kept])
    assert d[pair.removed].max() <= d[kept].min()


def test_crop_fraction_validation():
    for f in (0.0, 1.0, -0.1):
        with pytest.raises(ValueError):
            D.mask_anchor_crop(np.zeros((40, 3)), f, 0)


# -- folds ---------------------------------------------------------------------------

def test_fold_sizes():
    assert np.bincount(D.split_folds(1020, 5, 0)).tolist() == [204] * 5
    assert np.bincount(D.split_folds(7, 5, 0)).tolist() == [2, 2, 1, 1, 1]


def test_folds_partition_and_roles():
    f = D.split_folds(53, 5, 9)
    assert np.array_equal(f, D.split_folds(53, 5, 9))
    parts = [D.fold_members(f, r) for r in ("train", "val", "test")]
    assert sorted(np.concatenate(parts).tolist()) == list(range(53))
    assert np.all(np.isin(f[parts[1]], [3])) and np.all(np.isin(f[parts[2]], [4]))


def test_fold_errors():
    with pytest.raises(ValueError):
        D.split_folds(10, 1)
    with pytest.raises(ValueError):
        D.split_folds(3, 5)


# -- seeds ----------------------------------------------------------------------------

def test_splitmix_reference_values():
    # published splitmix64 outputs for state 0
    assert D.derive_seeds(0, 3) == [0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F]


# -- file I/O --------------------------------------------------------------------------

def test_io_round_trip(tmp_path):
    c = D.gen_shape("nested_spheres", 64, 3, noise=0.01)
    D.io_write(tmp_path / "a.pts", c)
    back = D.io_read(tmp_path / "a.pts")
    np.testing.assert_allclose(back.coords, c.coords, rtol=0, atol=1e-9)
    assert np.array_equal(back.point_labels, c.point_labels) and back.class_label == 1


def test_io_short_file_reports_line(tmp_path):
    p = tmp_path / "short.pts"
    p.write_text("# medpoints v1 n=3 class=0\n0 0 0\n1 1 1\n")
    with pytest.raises(D.ParseError) as err:
        D.io_read(p)
    assert err.value.line == 3


def test_io_missing_labels_read_as_minus_one(tmp_path):
    p = tmp_path / "nolab.pts"
    p.write_text("# medpoints v1 n=2 class=-1\n0 0 0\n1 2 3\n")
    c = D.io_read(p)
    assert c.point_labels.tolist() == [-1, -1]
    assert c.coords.tolist() == [[0, 0, 0], [1, 2, 3]]


@pytest.mark.parametrize("body, line", [
    ("# medpoints v1 n=2 class=0\n0 0\n1 1 1\n", 2),
    ("# medpoints v1 n=1 class=0\n0 0 zero\n", 2),
    ("# medpoints v1 n=1 class=0\n0 0 0\n1 1 1\n", 3),
    ("x y z\n", 1),
    ("", 1),
])
def test_io_malformed(tmp_path, body, line):
    p = tmp_path / "bad.pts"
    p.write_text(body)
    with pytest.raises(D.ParseError) as err:
        D.io_read(p)
    assert err.value.line == line


def test_write_ply(tmp_path):
    D.write_ply(tmp_path / "a.ply", np.zeros((2, 3)), colors=[[255, 0, 0], [0, 255, 0]])
    lines = (tmp_path / "a.ply").read_text().splitlines()
    assert lines[0] == "ply" and "element vertex 2" in lines
    assert lines[-1] == "0 0 0 0 255 0"


# -- datasets -----------------------------------------------------------------------------

def test_data_spec_defaults_and_errors():
    spec = D.data_spec(None, "segment")
    assert spec["kind"] == "nested" and spec["samples"] == 200
    with pytest.raises(ValueError):
        D.data_spec({"sample": 3})
    with pytest.raises(ValueError):
        D.data_spec({"kind": "meshes"})
    with pytest.raises(ValueError):
        D.data_spec({"points": 16})


def test_generate_dataset_deterministic():
    spec = {"kind": "shapes", "samples": 4, "points": 64}
    a, b = D.generate_dataset(spec, 7), D.generate_dataset(spec, 7)
    assert len(a) == 20 and a.num_classes == 5
    assert all(np.array_equal(x, y) for x, y in zip(a.inputs, b.inputs))
    assert np.array_equal(a.fold_of, b.fold_of)
    c = D.generate_dataset(spec, 8)
    assert not np.array_equal(a.inputs[0], c.inputs[0])


def test_completion_dataset_round_trip(tmp_path):
    ds = D.generate_dataset({"kind": "completion", "samples": 5, "points": 64,
                             "classes": ["sphere_shell"]}, 0)
    assert ds.inputs[0].shape == (52, 3) and ds.targets[0].shape == (64, 3)
    back = D.load_dataset(D.export_dataset(ds, tmp_path))
    assert back.kind == "completion" and np.array_equal(back.fold_of, ds.fold_of)
    for a, b in zip(ds.inputs + ds.targets, back.inputs + back.targets):
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-9)


def test_segmentation_dataset_round_trip(tmp_path):
    ds = D.generate_dataset({"kind": "nested", "samples": 5, "points": 64}, 0)
    assert ds.num_classes == 2
    back = D.load_dataset(D.export_dataset(ds, tmp_path), kind="nested")
    assert all(np.array_equal(a, b) for a, b in zip(ds.point_labels, back.point_labels))
