import json

import numpy as np
import pytest

from gazefield.camera import Camera, CameraIntrinsics, CameraPose
from gazefield.errors import GeometryError, InvalidArgument, NotEstimable
from gazefield.geometry import gaze_rotation_matrix, pitchyaw_error, pitchyaw_to_vector
from gazefield.synth import (GeneratorConfig, SyntheticSubject, generate_dataset, generate_sample,
                             load_dataset, manifest_hash, oracle_gaze_from_image, render_ground_truth,
                             subjects_for)


def frontal_camera(res=64, dist=680.0, focal=512.0):
    pose = CameraPose.look_at(np.array([0.0, 0.0, -dist]), np.zeros(3))
    return Camera(pose, CameraIntrinsics.centered(focal, res))


def symmetric_subject():
    s = SyntheticSubject.random(0)
    left = np.asarray(s.eye_offsets[0])
    right = left * np.array([-1.0, 1.0, 1.0])
    return SyntheticSubject(
        subject_id=0, head_radius=s.head_radius, eye_radius=s.eye_radius,
        eye_offsets=(tuple(left), tuple(right)), skin_albedo=s.skin_albedo, iris_albedo=s.iris_albedo,
        sclera_albedo=s.sclera_albedo, expression_bulge=s.expression_bulge,
        illumination_dir=(0.0, 0.0, -1.0))


def deg(a, b):
    return float(np.degrees(pitchyaw_error(a, b)))


def check_masks(sample):
    m_e, m_f, m_wf = sample.mask_eyes, sample.mask_face_only, sample.mask_whole_face
    assert m_e.dtype == bool and m_f.dtype == bool
    assert not (m_e & m_f).any()
    assert np.array_equal(m_wf, m_e | m_f)


def test_iris_centres_symmetric_for_frontal_gaze():
    s = symmetric_subject()
    cam = frontal_camera(res=128)
    sample = render_ground_truth(s, (0.0, 0.0), (0.0, 0.0), cam)
    centres = s.eye_centers() + s.eye_radius * pitchyaw_to_vector(np.zeros(2))
    px = sample.camera.project(centres)
    mid = sample.camera.intrinsics.center_x
    assert abs((px[0, 0] - mid) + (px[1, 0] - mid)) < 0.5
    # the rendered image itself is mirror symmetric too
    img = sample.image
    assert np.abs(img - img[:, ::-1]).max() < 1e-9


def test_masks_on_generated_samples():
    cfg = GeneratorConfig(n_subjects=4, views_per_subject=10, seed=3)
    for s in subjects_for(cfg):
        for v in range(cfg.views_per_subject):
            sample = generate_sample(s, v, cfg)
            check_masks(sample)
            assert sample.mask_eyes.any() and sample.mask_face_only.any()
            assert 0.0 <= sample.image.min() and sample.image.max() <= 1.0


def test_background_is_black_outside_whole_face():
    cfg = GeneratorConfig(n_subjects=1, views_per_subject=3, seed=5)
    s = subjects_for(cfg)[0]
    for v in range(3):
        sample = generate_sample(s, v, cfg)
        # supersampling only bleeds into pixels adjacent to the silhouette
        far = ~sample.mask_whole_face
        for axis in (0, 1):
            far &= ~np.roll(sample.mask_whole_face, 1, axis) & ~np.roll(sample.mask_whole_face, -1, axis)
        assert sample.image[far].max() == 0.0


@pytest.mark.parametrize("gaze", [(0.0, 0.0), (0.3, -0.4), (-0.2, 0.25)])
def test_oracle_recovers_gaze_examples(gaze):
    s = SyntheticSubject.random(2)
    sample = render_ground_truth(s, gaze, (0.05, -0.1), frontal_camera())
    est = oracle_gaze_from_image(sample.image, s, sample.camera)
    assert deg(est, gaze) < 0.5


def test_oracle_1000_random_draws():
    cfg = GeneratorConfig(n_subjects=50, views_per_subject=20, seed=31)
    errors = []
    for s in subjects_for(cfg):
        for v in range(cfg.views_per_subject):
            sample = generate_sample(s, v, cfg)
            errors.append(deg(oracle_gaze_from_image(sample.image, s, sample.camera), sample.gaze))
    assert len(errors) == 1000
    assert max(errors) < 0.5


def test_oracle_blank_image_not_estimable():
    s = SyntheticSubject.random(1)
    cam = frontal_camera()
    with pytest.raises(NotEstimable):
        oracle_gaze_from_image(np.zeros((64, 64, 3)), s, cam)


def test_gaze_equivariance_through_oracle():
    s = SyntheticSubject.random(4)
    cam = frontal_camera()
    rng = np.random.default_rng(0)
    for _ in range(10):
        g = rng.uniform(-0.25, 0.25, 2)
        delta = rng.uniform(-0.1, 0.1, 2)
        moved = render_ground_truth(s, g + delta, (0.0, 0.0), cam)
        est_g = oracle_gaze_from_image(render_ground_truth(s, g, (0.0, 0.0), cam).image, s, cam)
        est_moved = oracle_gaze_from_image(moved.image, s, moved.camera)
        assert deg(est_moved - est_g, delta) < 0.5


def test_render_is_deterministic():
    s = SyntheticSubject.random(6)
    a = render_ground_truth(s, (0.1, 0.2), (0.1, 0.0), frontal_camera())
    b = render_ground_truth(s, (0.1, 0.2), (0.1, 0.0), frontal_camera())
    assert a.image.tobytes() == b.image.tobytes()
    assert np.array_equal(a.mask_whole_face, b.mask_whole_face)


def test_head_pose_label_matches_camera():
    s = SyntheticSubject.random(0)
    sample = render_ground_truth(s, (0.0, 0.0), (0.2, -0.1), frontal_camera())
    # head-frame camera sees the head rotated by the applied pose
    assert deg(sample.head_pose, (0.2, -0.1)) < 1e-6


def test_camera_inside_head_rejected():
    s = SyntheticSubject.random(0)
    with pytest.raises(GeometryError):
        render_ground_truth(s, (0, 0), (0, 0), frontal_camera(dist=20.0))
    with pytest.raises(InvalidArgument):
        render_ground_truth(s, (0, 0), (0, 0), frontal_camera(), resolution=8)


def test_subject_identity():
    a1, a2 = SyntheticSubject.random(3, seed=1), SyntheticSubject.random(3, seed=1)
    assert a1 == a2
    others = [SyntheticSubject.random(i, seed=1) for i in range(20) if i != 3]
    others.append(SyntheticSubject.random(3, seed=2))
    for o in others:
        fields = a1.to_dict().keys() - {"subject_id"}
        assert any(o.to_dict()[k] != a1.to_dict()[k] for k in fields)
    assert SyntheticSubject.from_dict(json.loads(json.dumps(a1.to_dict()))) == a1


def test_subject_invariants():
    s = SyntheticSubject.random(0)
    with pytest.raises(InvalidArgument):
        SyntheticSubject(**{**s.__dict__, "eye_radius": 100.0})
    with pytest.raises(InvalidArgument):
        SyntheticSubject(**{**s.__dict__, "skin_albedo": (1.2, 0.5, 0.5)})


def test_dataset_determinism_and_manifest(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    generate_dataset(8, 20, 0.45, 7, a)
    generate_dataset(8, 20, 0.45, 7, b)
    files_a = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    assert files_a == files_b
    for rel in files_a:
        assert (a / rel).read_bytes() == (b / rel).read_bytes()
    assert manifest_hash(a) == manifest_hash(b)

    manifest, samples = load_dataset(a)
    assert len(manifest["samples"]) == 8 * 20 == len(samples)
    subjects = {s.subject_id: s for s in subjects_for(GeneratorConfig(**manifest["config"]))}
    for sample in samples:
        check_masks(sample)
        est = oracle_gaze_from_image(sample.image, subjects[sample.subject_id], sample.camera)
        assert deg(est, sample.gaze) < 0.5


def test_dataset_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        generate_dataset(1, 1, 0.3, 0, blocker / "sub")
    with pytest.raises(InvalidArgument):
        generate_dataset(0, 1, 0.3, 0, tmp_path / "x")


def test_gaze_rotation_moves_iris_consistently():
    # rendering with gaze g, then the iris position for R(delta) g, matches gaze g (+) delta
    s = SyntheticSubject.random(5)
    g = np.array([0.1, -0.15])
    v = gaze_rotation_matrix(np.array([0.0, 0.2])) @ pitchyaw_to_vector(g)
    target = render_ground_truth(s, (np.arcsin(-v[1]), np.arctan2(-v[0], -v[2])), (0, 0), frontal_camera())
    est = oracle_gaze_from_image(target.image, s, target.camera)
    assert np.degrees(np.arccos(np.clip(pitchyaw_to_vector(est) @ v, -1, 1))) < 0.5
