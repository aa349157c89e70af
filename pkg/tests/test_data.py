import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spncf import data
from spncf.data import LabeledDataset, SplitError, SplitSpec


def test_latent_mixture_empty():
    t = data.gen_latent_mixture(0, 2, [[0, 0], [1, 1]], [np.eye(2)] * 2, seed=0)
    assert len(t) == 0 and t.dimension == 2


def test_latent_mixture_bayes_rule():
    t = data.gen_latent_mixture(2000, 3, [[-5] * 3, [5] * 3], [np.eye(3)] * 2, seed=1)
    # equal covariances and priors: the Bayes rule is the sign of the coordinate sum
    pred = (t.rows.sum(axis=1) > 0).astype(int)
    assert np.mean(pred == t.labels) > 0.99
    assert np.bincount(t.labels).tolist() == [1000, 1000]


def test_latent_mixture_deterministic():
    args = (100, 2, [[0, 0], [1, 1]], [np.eye(2)] * 2)
    a, b = data.gen_latent_mixture(*args, seed=5), data.gen_latent_mixture(*args, seed=5)
    assert a.rows.tobytes() == b.rows.tobytes()
    assert a.labels.tobytes() == b.labels.tobytes()


def test_latent_mixture_rejects_non_spd():
    bad = np.array([[1.0, 2.0], [2.0, 1.0]])
    with pytest.raises(ValueError):
        data.gen_latent_mixture(10, 2, [[0, 0], [1, 1]], [np.eye(2), bad], seed=0)


def test_ellipse_templates_differ_only_inside_masks():
    ds = data.gen_ellipse_images(8, 32, noise_sigma=0.0, seed=0, group_size=8,
                                 size_jitter=0.0, intensity_jitter=0.0)
    masks = ds.metadata["masks"].reshape(len(ds), -1)
    i0 = int(np.flatnonzero(ds.labels == 0)[0])
    i1 = int(np.flatnonzero(ds.labels == 1)[0])
    diff = ds.instances[i0] != ds.instances[i1]
    union = masks[i0] | masks[i1]
    assert diff.any()
    assert not np.any(diff & ~union)


def test_ellipse_mask_area_ordering_and_balance():
    ds = data.gen_ellipse_images(200, 32, seed=3)
    area = ds.metadata["masks"].reshape(len(ds), -1).sum(axis=1)
    assert area[ds.labels == 1].min() > area[ds.labels == 0].max()
    assert np.bincount(ds.labels).tolist() == [100, 100]
    assert ds.instances.min() >= 0 and ds.instances.max() <= 1


def test_ellipse_rejects_bad_parameters():
    with pytest.raises(ValueError):
        data.gen_ellipse_images(10, 8)
    with pytest.raises(ValueError):
        data.gen_ellipse_images(10, 32, class_radii=((5, 6), (5, 6)))
    with pytest.raises(ValueError):
        data.gen_ellipse_images(10, 32, class_radii=((0, 6), (9, 10)))


def test_ellipse_deterministic():
    a, b = data.gen_ellipse_images(20, seed=9), data.gen_ellipse_images(20, seed=9)
    assert a.instances.tobytes() == b.instances.tobytes()


def test_region_bbox_contains_masks():
    ds = data.gen_ellipse_images(40, 32, seed=2)
    for m, box in zip(ds.metadata["masks"], ds.metadata["region_bbox"]):
        inside = data.bbox_mask(ds.shape, box)
        assert not np.any(m.reshape(ds.shape) & ~inside)


def _toy(n, groups):
    return LabeledDataset(np.zeros((n, 4)), (2, 2), np.zeros(n, dtype=int), groups)


def test_group_split_counts():
    ds = _toy(40, np.repeat(np.arange(10), 4))
    parts = data.split(ds, SplitSpec((0.8, 0.1, 0.1), seed=0))
    assert [len(np.unique(ds.group_ids[p])) for p in parts] == [8, 1, 1]


def test_plain_split_sizes():
    ds = _toy(10, np.arange(10))
    parts = data.split(ds, SplitSpec((0.8, 0.1, 0.1), seed=0, group_aware=False))
    assert [len(p) for p in parts] == [8, 1, 1]


def test_too_few_groups():
    ds = _toy(6, np.array([0, 0, 0, 1, 1, 1]))
    with pytest.raises(SplitError):
        data.split(ds, SplitSpec())


def test_split_spec_validation():
    with pytest.raises(ValueError):
        SplitSpec((0.5, 0.5, 0.5))
    with pytest.raises(ValueError):
        SplitSpec((1.0, 0.0, 0.0))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 30), min_size=3, max_size=200), st.integers(0, 10**6))
def test_group_split_never_leaks(groups, seed):
    groups = np.array(groups)
    ds = _toy(len(groups), groups)
    if len(np.unique(groups)) < 3:
        with pytest.raises(SplitError):
            data.split(ds, SplitSpec(seed=seed))
        return
    parts = data.split(ds, SplitSpec(seed=seed))
    assert sorted(np.concatenate(parts).tolist()) == list(range(len(groups)))
    sets = [set(groups[p].tolist()) for p in parts]
    assert not (sets[0] & sets[1]) and not (sets[0] & sets[2]) and not (sets[1] & sets[2])
    # fractions honored within one group
    ng = len(np.unique(groups))
    for s, f in zip(sets, (0.8, 0.1, 0.1)):
        assert abs(len(s) - f * ng) <= 1


def test_split_deterministic():
    ds = _toy(40, np.repeat(np.arange(10), 4))
    a = data.split(ds, SplitSpec(seed=4))
    b = data.split(ds, SplitSpec(seed=4))
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_group_folds_disjoint():
    groups = np.repeat(np.arange(9), 3)
    folds = data.group_folds(groups, 3, seed=0)
    assert sorted(np.concatenate(folds).tolist()) == list(range(27))
    for i in range(3):
        for j in range(i + 1, 3):
            assert not set(groups[folds[i]]) & set(groups[folds[j]])


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 20), st.integers(1, 20), st.integers(0, 10**6))
def test_pgm_round_trip(tmp_path_factory, h, w, seed):
    img = np.random.default_rng(seed).random((h, w))
    path = tmp_path_factory.mktemp("pgm") / "x.pgm"
    data.write_pgm(path, img)
    assert path.read_bytes().startswith(b"P5")
    back = data.read_pgm(path)
    assert np.array_equal(back, data.quantize(img) / 255.0)
    assert np.array_equal(data.read_pgm(path, raw=True), data.quantize(img))


def test_pgm_with_comment(tmp_path):
    path = tmp_path / "c.pgm"
    path.write_bytes(b"P5\n# made by hand\n2 1\n255\n" + bytes([0, 255]))
    np.testing.assert_array_equal(data.read_pgm(path), [[0.0, 1.0]])


def test_dataset_round_trip(tmp_path):
    ds = data.gen_ellipse_images(12, 32, seed=1)
    data.save_dataset(ds, tmp_path)
    back = data.load_dataset(tmp_path)
    assert np.array_equal(back.instances, data.quantize(ds.instances) / 255.0)
    assert np.array_equal(back.labels, ds.labels)
    assert np.array_equal(back.group_ids, ds.group_ids)
    assert np.array_equal(back.metadata["masks"], ds.metadata["masks"])
    assert np.array_equal(back.metadata["region_bbox"], ds.metadata["region_bbox"])


def test_png_export(tmp_path):
    from PIL import Image

    data.write_png(tmp_path / "x.png", np.full((4, 5), 0.5))
    assert Image.open(tmp_path / "x.png").size == (5, 4)
