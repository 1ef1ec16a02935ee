import numpy as np
import pytest

from sgdir.baseline import StationaryVelocityField, integrate_exact, scaling_squaring
from sgdir.errors import GeometryMismatch
from sgdir.grid import GridGeometry, compose, rms, warp_labels
from sgdir.metrics import dice, pct_neg_jac
from sgdir.synth import PHANTOM_KINDS, SynthConfig, make_dataset, make_pair, phantom, random_svf


def test_config_validation():
    for kwargs in [{"amplitude": -1.0}, {"smooth_sigma": 0.0}, {"phantom_kind": "brain"}, {"n_pairs": 0}]:
        with pytest.raises(ValueError):
            SynthConfig(**kwargs)


def test_random_svf_amplitude_and_determinism():
    assert not np.any(random_svf((32, 32), 6, 0.0, 1).vectors)
    a, b = random_svf((32, 32), 6, 4, 1), random_svf((32, 32), 6, 4, 1)
    assert a.vectors.tobytes() == b.vectors.tobytes()
    assert np.sqrt((a.vectors ** 2).sum(axis=0)).max() == pytest.approx(4.0)
    assert a.vectors.tobytes() != random_svf((32, 32), 6, 4, 2).vectors.tobytes()


def test_random_svf_normal_component_vanishes_on_outer_shells():
    v = random_svf((32, 24), 6, 4, 3).vectors
    for axis in range(2):
        edge = np.take(v[axis], [0, 1, -2, -1], axis=axis)
        assert not np.any(edge)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_random_svf_is_fold_free(seed):
    v = random_svf((64, 64), 6, 4, seed)
    assert pct_neg_jac(scaling_squaring(v, 8)) == 0.0


@pytest.mark.parametrize("kind", PHANTOM_KINDS)
def test_phantom_contract(kind):
    img, labels, landmarks = phantom(kind, (64, 64), 0)
    assert img.values.min() >= 0.0 and img.values.max() <= 1.0
    assert len(np.unique(labels.labels)) >= 4
    assert len(landmarks) >= 16
    landmarks.check_inside(img.geom)
    again = phantom(kind, (64, 64), 0)
    assert again[0].values.tobytes() == img.values.tobytes()
    assert again[1].labels.tobytes() == labels.labels.tobytes()


def test_rings_have_five_labels():
    _, labels, _ = phantom("rings", (64, 64), 3)
    assert np.array_equal(np.unique(labels.labels), np.arange(5))


def test_phantom_3d_and_unknown_kind():
    img, labels, landmarks = phantom("rings", (24, 24, 24), 0)
    assert img.geom.dims == (24, 24, 24) and len(np.unique(labels.labels)) >= 4
    with pytest.raises(ValueError):
        phantom("brain", (32, 32))


def test_zero_velocity_pair():
    base = phantom("rings", (32, 32), 0)
    pair = make_pair(base, StationaryVelocityField.from_array(np.zeros((2, 32, 32))))
    assert np.array_equal(pair.fixed.values, pair.moving.values)
    assert not np.any(pair.gt_forward.vectors)
    np.testing.assert_allclose(pair.landmarks_fixed.points, pair.landmarks_moving.points)


def test_translation_pair():
    base = phantom("blobs", (48, 48), 1)
    c = np.array([2.0, -1.0])
    v = StationaryVelocityField.from_array(np.broadcast_to(c[:, None, None], (2, 48, 48)).copy())
    pair = make_pair(base, v)
    # fixed(x) = moving(x + c) wherever x + c is inside
    np.testing.assert_allclose(pair.fixed.values[:-2, 1:], pair.moving.values[2:, :-1], atol=1e-6)
    inside = np.all((pair.landmarks_moving.points - c >= 0) & (pair.landmarks_moving.points - c <= 47), axis=1)
    assert inside.sum() >= 8
    diffs = pair.landmarks_moving.points - pair.landmarks_fixed.points
    np.testing.assert_allclose(diffs[inside], np.broadcast_to(c, diffs[inside].shape), atol=1e-9)


@pytest.mark.parametrize("seed", [0, 1])
def test_random_pair_consistency(seed):
    pair = make_dataset(SynthConfig(dims=(64, 64), seed=seed))[0]
    warped = warp_labels(pair.labels_moving, pair.gt_forward)
    assert dice(warped, pair.labels_fixed)[0] >= 0.98
    assert pct_neg_jac(pair.gt_forward) == 0.0
    v = random_svf((64, 64), 6, 4, seed + 1000)
    assert rms(compose(pair.gt_forward, integrate_exact(v, -1.0)).vectors) < 1e-2


def test_dataset_determinism_and_geometry():
    cfg = SynthConfig(dims=(32, 32), n_pairs=2, seed=5)
    a, b = make_dataset(cfg), make_dataset(cfg)
    assert len(a) == 2
    for p, q in zip(a, b):
        assert p.fixed.values.tobytes() == q.fixed.values.tobytes()
        assert p.gt_forward.vectors.tobytes() == q.gt_forward.vectors.tobytes()
        assert p.fixed.geom == GridGeometry((32, 32))
    assert a[0].fixed.values.tobytes() != a[1].fixed.values.tobytes()


def test_make_pair_geometry_mismatch():
    base = phantom("rings", (32, 32), 0)
    with pytest.raises(GeometryMismatch):
        make_pair(base, random_svf((32, 16), 6, 2, 0))
