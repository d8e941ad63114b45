import math

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from fidip.core import ConfigError, JointMap, get_schema, load_resource, map_joints, \
    validate_annotation
from fidip.synthgen import BodyPoseParams, CameraParams, FitWeights, GenerateConfig, PosePrior, \
    ProjectionError, RejectionConfig, RejectionError, SceneConfig, build_library, \
    default_body, fit_pose_prior, fit_pose_to_2d, fitting_loss, forward_kinematics, \
    generate_dataset, look_at, pose_distribution_stats, project_pinhole, render_stick_figure, \
    sample_pose
from fidip.synthgen.kinematics import canonicalize_axis_angle
from fidip.synthgen.stats import angle_histograms


def naive_fk(theta, beta):
    """Homogeneous 4x4 transform chain built from the raw resource tables."""
    body = load_resource("smil23_body.json")
    parents = load_resource("smil23.json")["parent"]
    rest = np.array(body["rest_joints"])
    scale = 1.0 + np.array(body["shape_basis"]) @ beta
    mats = []
    for i, p in enumerate(parents):
        local = np.eye(4)
        local[:3, :3] = Rotation.from_rotvec(theta[3 * i:3 * i + 3]).as_matrix()
        if p is None:
            local[:3, 3] = rest[0]
            mats.append(local)
        else:
            local[:3, 3] = (rest[i] - rest[p]) * scale[i - 1]
            mats.append(mats[p] @ local)
    return np.array([m[:3, 3] for m in mats])


@pytest.fixture(scope="module")
def library():
    return build_library(32, seed=0)


@pytest.fixture(scope="module")
def prior(library):
    return fit_pose_prior(library, n_components=2)


def _front_camera(img=256, f=300.0):
    joints = forward_kinematics(np.zeros(72), np.zeros(20))
    center = joints.mean(0)
    rot, trans = look_at(center + np.array([0, 0, 1.2]), center)
    return CameraParams((img / 2, img / 2), f, rot, trans)


def test_rest_pose_is_shipped_table():
    rest = np.array(load_resource("smil23_body.json")["rest_joints"])
    np.testing.assert_array_equal(forward_kinematics(np.zeros(72), np.zeros(20)), rest)


def test_fk_matches_naive_chain():
    rng = np.random.default_rng(0)
    for _ in range(10):
        theta = rng.uniform(-1, 1, 72)
        beta = rng.normal(0, 1, 20)
        np.testing.assert_allclose(forward_kinematics(theta, beta), naive_fk(theta, beta),
                                   rtol=0, atol=1e-9)


def test_root_half_turn_mirrors_about_root():
    rng = np.random.default_rng(1)
    theta = rng.uniform(-0.5, 0.5, 72)
    theta[:3] = 0
    j0 = forward_kinematics(theta, np.zeros(20))
    theta[:3] = (0, math.pi, 0)
    j1 = forward_kinematics(theta, np.zeros(20))
    root = j0[0]
    np.testing.assert_allclose(j1 - root, (j0 - root) * [-1, 1, -1], atol=1e-9)


def test_fk_rejects_nan():
    theta = np.zeros(72)
    theta[5] = np.nan
    with pytest.raises(ValueError):
        forward_kinematics(theta, np.zeros(20))


def test_canonicalize_keeps_rotation():
    rng = np.random.default_rng(2)
    theta = rng.uniform(-7, 7, 72)
    c = canonicalize_axis_angle(theta)
    assert np.all(np.linalg.norm(c.reshape(-1, 3), axis=1) <= math.pi + 1e-12)
    np.testing.assert_allclose(Rotation.from_rotvec(c.reshape(-1, 3)).as_matrix(),
                               Rotation.from_rotvec(theta.reshape(-1, 3)).as_matrix(), atol=1e-9)


def test_projection_examples():
    cam = CameraParams((50, 50), 100.0)
    np.testing.assert_allclose(project_pinhole(np.array([[0.0, 0, 1]]), cam), [[50, 50]])
    cam0 = CameraParams((0, 0), 100.0)
    np.testing.assert_allclose(project_pinhole(np.array([[1.0, 0, 2]]), cam0), [[50, 0]])
    p = np.array([[0.3, -0.2, 1.5]])
    near = project_pinhole(p, cam) - 50
    far = project_pinhole(p * [1, 1, 2], cam) - 50
    np.testing.assert_allclose(far, near / 2, atol=1e-9)


def test_projection_behind_camera_names_joint():
    names = get_schema("smil23").joint_names
    pts = np.ones((24, 3))
    pts[7, 2] = -1
    with pytest.raises(ProjectionError, match=names[7]):
        project_pinhole(pts, CameraParams((0, 0), 10.0), joint_names=names)
    with pytest.raises(ValueError):
        CameraParams((0, 0), 0.0)


def _target(theta, beta, cam):
    j2d = project_pinhole(forward_kinematics(theta, beta), cam)
    return np.concatenate([j2d, np.full((24, 1), 2.0)], axis=1)


def test_fitting_loss_term_zeros():
    cam = _front_camera()
    body = default_body()
    rng = np.random.default_rng(3)
    theta = rng.uniform(-0.3, 0.3, 72)
    for i, _ in body.bend_components:
        theta[i] = 0.0
    beta = rng.normal(0, 0.5, 20)
    prior = PosePrior([1.0], [theta[3:]], [np.eye(69)], beta, np.eye(20), body.bend_components)
    w = FitWeights(pose=0.3, shape=0.2, bend=0.1)
    loss, _, terms = fitting_loss(theta, beta, cam, _target(theta, beta, cam), w, prior)
    l_theta_mean = 0.5 * 69 * math.log(2 * math.pi)  # -log N(mu; mu, I)
    assert terms["L_J"] == pytest.approx(0.0, abs=1e-12)
    assert terms["L_beta"] == pytest.approx(0.0, abs=1e-12)
    expected = 0.3 * l_theta_mean + 0.1 * len(body.bend_components) * math.exp(0)
    assert loss == pytest.approx(expected, rel=1e-12)


def test_fitting_loss_zero_weights_is_reprojection(prior):
    cam = _front_camera()
    rng = np.random.default_rng(4)
    theta = rng.uniform(-0.3, 0.3, 72)
    target = _target(theta, np.zeros(20), cam)
    target[:, :2] += rng.normal(0, 3, (24, 2))
    w = FitWeights(0, 0, 0, robust_sigma=None)
    loss, _, _ = fitting_loss(theta, np.zeros(20), cam, target, w, prior)
    proj = project_pinhole(forward_kinematics(theta, np.zeros(20)), cam)
    assert loss == pytest.approx(((proj - target[:, :2]) ** 2).sum(), rel=1e-12)


def test_fitting_loss_gradients_finite_differences(prior):
    cam = _front_camera()
    w = FitWeights(pose=0.05, shape=0.05, bend=0.05, robust_sigma=20.0)
    for seed in range(5):  # the acceptance suite runs 20
        rng = np.random.default_rng(seed)
        theta = rng.uniform(-0.4, 0.4, 72)
        beta = rng.normal(0, 0.5, 20)
        target = _target(rng.uniform(-0.4, 0.4, 72), np.zeros(20), cam)
        _, grads, _ = fitting_loss(theta, beta, cam, target, w, prior)
        h = 1e-6
        for name, x in (("theta", theta), ("beta", beta)):
            fd = np.zeros_like(x)
            for i in range(x.size):
                e = np.zeros_like(x)
                e[i] = h
                args = {"theta": theta, "beta": beta}
                args[name] = x + e
                up = fitting_loss(args["theta"], args["beta"], cam, target, w, prior)[0]
                args[name] = x - e
                dn = fitting_loss(args["theta"], args["beta"], cam, target, w, prior)[0]
                fd[i] = (up - dn) / (2 * h)
            rel = np.linalg.norm(grads[name] - fd) / np.linalg.norm(fd)
            assert rel < 1e-4, (seed, name, rel)


def test_singular_prior_is_config_error():
    with pytest.raises(ConfigError):
        PosePrior([1.0], [np.zeros(69)], [np.zeros((69, 69))])


def test_fit_from_truth_is_fixed_point():
    cam = _front_camera()
    theta = np.random.default_rng(5).uniform(-0.3, 0.3, 72)
    target = _target(theta, np.zeros(20), cam)
    res = fit_pose_to_2d(target, BodyPoseParams(theta, np.zeros(20)), cam,
                         FitWeights(0, 0, 0, robust_sigma=None))
    assert res.iterations <= 2
    assert res.reprojection_error < 1e-6


def test_fit_recovers_from_small_perturbation(prior):
    cam = _front_camera()
    rng = np.random.default_rng(6)
    theta = rng.uniform(-0.3, 0.3, 72)
    target = _target(theta, np.zeros(20), cam)
    init = BodyPoseParams(theta + rng.uniform(-0.1, 0.1, 72), np.zeros(20))
    res = fit_pose_to_2d(target, init, cam, FitWeights(1e-3, 1e-3, 1e-3), prior)
    assert res.reprojection_error < 2.0
    assert all(b <= a + 1e-9 for a, b in zip(res.history, res.history[1:]))
    assert res.loss <= res.history[0]


def test_fit_underdetermined_target():
    target = np.zeros((24, 3))
    target[:3] = (10, 10, 2)
    with pytest.raises(ValueError, match="at least 6"):
        fit_pose_to_2d(target, BodyPoseParams(), _front_camera(), FitWeights(0, 0, 0))


def test_sample_noise_free_is_library_pose(library):
    rng = np.random.default_rng(7)
    p = sample_pose(library, 0.0, rng)
    assert any(np.array_equal(p.theta, q.theta) and np.array_equal(p.beta, q.beta)
               for q in library)


def test_sample_mean_within_clt_bound():
    base = BodyPoseParams(np.random.default_rng(8).uniform(-0.5, 0.5, 72), np.zeros(20))
    rng = np.random.default_rng(9)
    n, sigma = 10_000, 0.1
    rej = RejectionConfig(check_intersection=False)
    draws = np.stack([sample_pose([base], sigma, rng, rejection=rej).theta for _ in range(n)])
    assert np.all(np.abs(draws.mean(0) - base.theta) <= 3 * sigma / math.sqrt(n))


def test_huge_noise_with_strict_cutoff_rejected(library, prior):
    cutoff = float(max(prior.neg_log_density(p.theta[3:]) for p in library))
    rej = RejectionConfig(prior_nll_cutoff=cutoff, check_intersection=False, max_rejections=200)
    with pytest.raises(RejectionError, match="noise_std"):
        sample_pose(library, 10.0, np.random.default_rng(0), prior, rej)


def test_render_annotation_is_projection():
    cam = _front_camera(img=128, f=150.0)
    pose = BodyPoseParams()
    img, ann = render_stick_figure(pose, cam, SceneConfig(background=0.2), (128, 128))
    j2d = project_pinhole(forward_kinematics(pose.theta, pose.beta), cam)
    full = np.concatenate([j2d, np.full((24, 1), 2.0)], axis=1)
    np.testing.assert_array_equal(ann.keypoints, map_joints(full, JointMap.load()))
    assert img.shape == (128, 128, 3) and 0 <= img.min() and img.max() <= 1
    _, ann2 = render_stick_figure(pose, cam, SceneConfig(background=0.7), (128, 128))
    img2, _ = render_stick_figure(pose, cam, SceneConfig(background=0.7), (128, 128))
    np.testing.assert_array_equal(ann.keypoints, ann2.keypoints)
    assert not np.array_equal(img, img2)


def test_render_offscreen_joint_unlabeled():
    cam = _front_camera(img=128, f=150.0)
    cam = CameraParams((10.0, 64.0), 150.0, cam.rotation, cam.translation)
    _, ann = render_stick_figure(BodyPoseParams(), cam, SceneConfig(), (128, 128))
    assert (ann.keypoints[:, 2] == 0).any()
    for x, y, v in ann.keypoints:
        assert v == 0 or (0 <= x <= 127 and 0 <= y <= 127)
    assert validate_annotation(ann, get_schema("coco17"), (128, 128)) == []


def test_stats_identical_poses_zero_entropy():
    kps = np.zeros((17, 3))
    kps[:, :2] = np.random.default_rng(0).uniform(0, 50, (17, 2))
    kps[:, 2] = 2
    stats = pose_distribution_stats([kps] * 20)
    assert stats["diversity_index"] == 0.0
    assert len(stats["histograms"]) == len(get_schema("coco17").limbs)
    assert all(len(h) == 36 for h in stats["histograms"])


def test_stats_uniform_angles_near_max_entropy():
    rng = np.random.default_rng(1)
    angles = [rng.uniform(-np.pi, np.pi, 10_000) for _ in range(4)]
    ent = angle_histograms(angles, 36)["entropy"]
    assert all(abs(e - math.log(36)) <= 0.02 * math.log(36) for e in ent)


def test_stats_more_distinct_poses_more_diverse():
    rng = np.random.default_rng(2)

    def pose():
        kps = np.zeros((17, 3))
        kps[:, :2] = rng.uniform(0, 100, (17, 2))
        kps[:, 2] = 2
        return kps

    distinct = [pose() for _ in range(12)]
    b = [distinct[0]] * 6 + [distinct[1]] * 6
    a = distinct
    assert pose_distribution_stats(a)["diversity_index"] > pose_distribution_stats(b)["diversity_index"]


def test_generated_dataset_is_valid(tmp_path):
    cfg = GenerateConfig(n=12, img_size=(64, 64), library_size=8, background_range=(0.1, 0.4))
    summary = generate_dataset(cfg, tmp_path, seed=3, name="g")
    assert summary["images"] == 12 and summary["violations"] == 0
    again = generate_dataset(cfg, tmp_path / "again", seed=3, name="g")
    assert (tmp_path / "g.json").read_text() == (tmp_path / "again" / "g.json").read_text()
