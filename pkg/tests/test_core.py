import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fidip.core import ConfigError, DomainLabel, JointMap, KeypointAnnotation, KeypointSchema, \
    get_schema, map_joints, validate_annotation


@pytest.fixture
def coco():
    return get_schema("coco17")


def _ann(kps, area=100.0, bbox=(0, 0, 10, 10)):
    return KeypointAnnotation(image_id=1, keypoints=kps, bbox=bbox, area=area)


def test_bundled_schemas_are_valid():
    coco = get_schema("coco17")
    smil = get_schema("smil23")
    assert coco.num_joints == 17
    assert smil.num_joints == 24  # root + 23 joints
    assert smil.parent[0] is None
    assert coco.flip_permutation()[5] == 6


@pytest.mark.parametrize("bad", [
    dict(joint_names=[], oks_sigmas=[], parent=[]),
    dict(joint_names=["a", "b"], oks_sigmas=[0.1, 0.0], parent=[None, 0]),
    dict(joint_names=["a", "b"], oks_sigmas=[0.1, 0.1], parent=[None, None]),
    dict(joint_names=["a", "b"], oks_sigmas=[0.1, 0.1], parent=[None, 0], flip_pairs=[[0, 2]]),
    dict(joint_names=["a", "b"], oks_sigmas=[0.1, 0.1], parent=[None, 0], flip_pairs=[[1, 1]]),
])
def test_schema_invariants(bad):
    with pytest.raises(ConfigError):
        KeypointSchema.from_dict(bad)


def test_valid_annotation(coco):
    kps = np.zeros((17, 3))
    kps[:, :2] = 5
    kps[:, 2] = 2
    assert validate_annotation(_ann(kps), coco, (64, 64)) == []


def test_out_of_bounds_keypoint(coco):
    kps = np.zeros((17, 3))
    kps[3] = (-5, 10, 2)
    v = validate_annotation(_ann(kps), coco, (64, 64))
    assert len(v) == 1 and "keypoints[3]" in v[0] and "out-of-bounds" in v[0]


def test_unlabeled_keypoint_outside_is_fine(coco):
    kps = np.zeros((17, 3))
    kps[3] = (-5, 10, 0)
    assert validate_annotation(_ann(kps), coco, (64, 64)) == []


def test_count_mismatch():
    smil = get_schema("smil23")
    v = validate_annotation(_ann(np.zeros((17, 3))), smil, (64, 64))
    assert any("count mismatch" in x for x in v)


def test_bad_area_and_box(coco):
    v = validate_annotation(_ann(np.zeros((17, 3)), area=0, bbox=(0, 0, 0, 5)), coco, (64, 64))
    assert any(x.startswith("area") for x in v)
    assert any(x.startswith("bbox") for x in v)


def test_validate_is_idempotent(coco):
    kps = np.zeros((17, 3))
    kps[0] = (100, 100, 2)
    a = _ann(kps)
    before = a.keypoints.copy()
    assert validate_annotation(a, coco, (64, 64)) == validate_annotation(a, coco, (64, 64))
    np.testing.assert_array_equal(a.keypoints, before)


def test_annotation_is_immutable():
    a = _ann(np.zeros((17, 3)))
    with pytest.raises(ValueError):
        a.keypoints[0, 0] = 3.0


def test_domain_label_encoding():
    assert DomainLabel.SYNTHETIC == 1 and DomainLabel.REAL == 0
    assert DomainLabel.parse("synthetic") is DomainLabel.SYNTHETIC
    with pytest.raises(ConfigError):
        DomainLabel.parse("adult")


def test_map_joints_identity_subset():
    rng = np.random.default_rng(0)
    src = rng.uniform(0, 100, (23, 3))
    mapping = JointMap("a", "b", tuple(range(17)))
    np.testing.assert_array_equal(map_joints(src, mapping), src[:17])


def test_map_joints_absent_joint():
    src = np.arange(24 * 3, dtype=float).reshape(24, 3) + 1
    mapping = JointMap.load()
    out = map_joints(src, mapping)
    assert mapping.indices[1] is None
    np.testing.assert_array_equal(out[1], [0, 0, 0])
    np.testing.assert_array_equal(out[5], src[mapping.indices[5]])


def test_map_joints_out_of_range():
    with pytest.raises(ConfigError, match="source index 30"):
        map_joints(np.zeros((24, 3)), JointMap("a", "b", (30,)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_map_then_inverse_roundtrip(seed):
    rng = np.random.default_rng(seed)
    src = rng.uniform(-50, 50, (24, 3))
    mapping = JointMap.load()
    mapped = map_joints(src, mapping)
    back = map_joints(mapped, mapping.inverse(24))
    used = [s for s in mapping.indices if s is not None]
    np.testing.assert_array_equal(back[used], src[used])
