import numpy as np
import pytest
import torch

from gazefield.camera import Camera, CameraIntrinsics, CameraPose
from gazefield.compositor import (GazeFieldModel, ModelConfig, NeuralRenderer, RayBundle, composite,
                                  generate_rays, merge_features, neural_render, render_triplet,
                                  rotate_eye_features, sample_along_rays, volume_render)
from gazefield.errors import InvalidArgument
from gazefield.field import init_latents_from_subject
from gazefield.geometry import gaze_rotation_matrix
from gazefield.synth import SyntheticSubject

from fdcheck import fd_errors


def camera(res=16, dist=680.0):
    pose = CameraPose.look_at(np.array([0.0, 0.0, -dist]), np.zeros(3))
    return Camera(pose, CameraIntrinsics.centered(512.0 * res / 64, res))


def random_rotation(rng):
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    return q if np.linalg.det(q) > 0 else -q


# ---------------------------------------------------------------- rays

def test_center_ray_is_optical_axis():
    rays = generate_rays(camera(res=15), 15, 15)
    centre = rays.directions[7 * 15 + 7].numpy()
    assert np.abs(centre - np.array([0.0, 0.0, 1.0])).max() < 1e-9
    norms = torch.linalg.norm(rays.directions, dim=-1)
    assert (norms - 1).abs().max() < 1e-6


def test_rays_reproject_to_their_pixel():
    cam = camera(res=16)
    rays = generate_rays(cam, 16, 16)
    pts, _, _ = sample_along_rays(rays, 8, stratified=True, seed=3)
    px = cam.project(pts.reshape(-1, 3).numpy()).reshape(16, 16, 8, 2)
    jj, ii = np.meshgrid(np.arange(16) + 0.5, np.arange(16) + 0.5)
    assert np.abs(px[..., 0] - jj[..., None]).max() < 1e-6
    assert np.abs(px[..., 1] - ii[..., None]).max() < 1e-6


def test_ray_bundle_validates_bounds():
    o = torch.zeros(1, 3)
    with pytest.raises(InvalidArgument):
        RayBundle(o, torch.tensor([[0.0, 0.0, 1.0]]), 5.0, 5.0)


# ------------------------------------------------------------- sampling

def test_uniform_midpoints():
    rays = RayBundle(torch.zeros(4, 3, dtype=torch.float64), torch.eye(3, dtype=torch.float64)[[2, 2, 0, 1]], 2.0, 10.0)
    _, deltas, depths = sample_along_rays(rays, 8, stratified=False)
    assert torch.allclose(depths[0], 2.0 + (torch.arange(8, dtype=torch.float64) + 0.5))
    assert torch.allclose(deltas, torch.full_like(deltas, 1.0))


def test_stratified_is_seeded():
    rays = generate_rays(camera(), 16, 16)
    a = sample_along_rays(rays, 16, stratified=True, seed=5)
    b = sample_along_rays(rays, 16, stratified=True, seed=5)
    c = sample_along_rays(rays, 16, stratified=True, seed=6)
    assert all(torch.equal(x, y) for x, y in zip(a, b))
    assert not torch.equal(a[2], c[2])


def test_stratified_strictly_increasing_and_partitioning():
    n_rays = 10_000
    rays = RayBundle(torch.zeros(n_rays, 3, dtype=torch.float64),
                     torch.tensor([[0.0, 0.0, 1.0]], dtype=torch.float64).expand(n_rays, 3), 1.0, 3.0)
    _, deltas, depths = sample_along_rays(rays, 16, stratified=True, seed=0)
    assert bool((depths[:, 1:] > depths[:, :-1]).all())
    assert bool((depths >= 1.0).all() and (depths <= 3.0).all())
    assert torch.allclose(deltas.sum(-1), torch.full((n_rays,), 2.0, dtype=torch.float64))


def test_needs_two_samples():
    with pytest.raises(InvalidArgument):
        sample_along_rays(generate_rays(camera(), 4, 4), 1)


# ------------------------------------------------------- volume render

def _homogeneous(c, v, length, n):
    sigma = torch.full((n,), c, dtype=torch.float64)
    feats = torch.tensor(v, dtype=torch.float64).expand(n, len(v))
    deltas = torch.full((n,), length / n, dtype=torch.float64)
    return volume_render(sigma, feats, deltas)


def test_empty_space():
    out = volume_render(torch.zeros(5, 32), torch.rand(5, 32, 6), torch.full((5, 32), 0.1))
    assert torch.equal(out, torch.zeros(5, 7))


def test_homogeneous_medium_closed_form():
    rng = np.random.default_rng(0)
    for _ in range(20):
        c, length = rng.uniform(0.01, 5.0), rng.uniform(0.1, 3.0)
        v = rng.uniform(-1, 1, 3)
        out = _homogeneous(c, v, length, 256).numpy()
        a = 1 - np.exp(-c * length)
        assert np.abs(out[:3] - v * a).max() < 1e-5
        assert abs(out[3] - a) < 1e-5


def test_uniform_quadrature_is_exact_and_monotone():
    # with equal deltas the quadrature reproduces the closed form at every
    # sample count, so the error sequence is flat (hence non-increasing)
    rng = np.random.default_rng(1)
    for _ in range(20):
        c, length, v = rng.uniform(0.1, 4.0), rng.uniform(0.5, 2.0), rng.uniform(-1, 1, 3)
        exact = v * (1 - np.exp(-c * length))
        errs = [np.abs(_homogeneous(c, v, length, n).numpy()[:3] - exact).max() for n in (4, 8, 16, 32, 64)]
        assert max(errs) < 1e-12


def test_monotone_convergence_in_sample_count():
    # heterogeneous media: a linear density ramp with a step in the feature,
    # compared against a 65536-sample reference
    rng = np.random.default_rng(2)

    def render(a, b, f0, f1, split, n):
        t = (torch.arange(n, dtype=torch.float64) + 0.5) / n
        sigma = a + b * t
        feats = torch.where((t < split)[:, None], torch.tensor(f0), torch.tensor(f1))
        return volume_render(sigma, feats, torch.full((n,), 1.0 / n, dtype=torch.float64)).numpy()

    for _ in range(20):
        a, b = rng.uniform(0.1, 3.0), rng.uniform(0.0, 3.0)
        f0, f1 = rng.uniform(-1, 1, 3), rng.uniform(-1, 1, 3)
        split = rng.uniform(0.2, 0.8)
        ref = render(a, b, f0, f1, split, 2 ** 16)
        errs = [np.abs(render(a, b, f0, f1, split, n) - ref).max() for n in (16, 32, 64, 128, 256)]
        assert all(e2 <= e1 + 1e-12 for e1, e2 in zip(errs, errs[1:])), errs


def test_opaque_sample_limit():
    sigma = torch.tensor([0.0, 50.0, 3.0, 1.0], dtype=torch.float64)
    feats = torch.tensor([[9.0], [0.7], [-4.0], [2.0]], dtype=torch.float64)
    out = volume_render(sigma, feats, torch.ones(4, dtype=torch.float64))
    assert abs(out[0] - 0.7) < 1e-6 and abs(out[1] - 1.0) < 1e-6


def test_negative_density_rejected():
    with pytest.raises(InvalidArgument):
        volume_render(torch.tensor([0.1, -0.1]), torch.zeros(2, 3), torch.ones(2))


# ----------------------------------------------------- rotation / merge

def test_rotation_identity_norms_inverse():
    rng = np.random.default_rng(3)
    grid = torch.tensor(rng.standard_normal((2, 25, 4, 4)))
    assert torch.equal(rotate_eye_features(grid, np.eye(3)), grid)
    for _ in range(50):
        r = random_rotation(rng)
        out = rotate_eye_features(grid, r)
        n_in = torch.linalg.norm(grid[:, :24].reshape(2, 8, 3, 4, 4), dim=2)
        n_out = torch.linalg.norm(out[:, :24].reshape(2, 8, 3, 4, 4), dim=2)
        assert (n_in - n_out).abs().max() < 1e-6
        assert torch.equal(out[:, 24], grid[:, 24])
        back = rotate_eye_features(out, r.T)
        assert (back - grid).abs().max() < 1e-6


def test_rotation_acts_on_contiguous_triplets():
    grid = torch.zeros(1, 7, 1, 1, dtype=torch.float64)
    grid[0, 3:6, 0, 0] = torch.tensor([1.0, 2.0, 3.0], dtype=torch.float64)
    r = gaze_rotation_matrix(np.array([0.3, -0.2]))
    out = rotate_eye_features(grid, r)
    assert np.allclose(out[0, 3:6, 0, 0].numpy(), r @ np.array([1.0, 2.0, 3.0]))
    assert torch.equal(out[0, :3], grid[0, :3])


def test_rotation_requires_triplets():
    with pytest.raises(InvalidArgument):
        rotate_eye_features(torch.zeros(1, 5, 2, 2), np.eye(3))


def test_merge_algebra_on_random_grids():
    gen = torch.Generator().manual_seed(0)
    for _ in range(1000):
        a, b, c = (torch.randn(1, 7, 3, 3, generator=gen) for _ in range(3))
        assert torch.equal(merge_features(a, b), merge_features(b, a))
        assert torch.equal(merge_features(merge_features(a, b), c), merge_features(a, merge_features(b, c)))
        assert torch.equal(merge_features(a, a), a)
        assert torch.equal(merge_features(a, torch.full_like(a, -1e30)), a)


def test_merge_example_and_shape_check():
    a = torch.tensor([1.0, 5.0]).reshape(1, 2, 1, 1)
    b = torch.tensor([3.0, 2.0]).reshape(1, 2, 1, 1)
    assert merge_features(a, b).flatten().tolist() == [3.0, 5.0]
    with pytest.raises(InvalidArgument):
        merge_features(torch.zeros(1, 2, 2, 2), torch.zeros(1, 2, 2, 3))


# ------------------------------------------------------------- decoder

def test_zero_decoder_gives_half_grey():
    dec = NeuralRenderer(25, 2, 16, 16)
    for p in dec.parameters():
        torch.nn.init.zeros_(p)
    out = neural_render(torch.zeros(1, 25, 16, 16), dec)
    assert out.shape == (1, 3, 64, 64)
    assert torch.equal(out, torch.full_like(out, 0.5))


def test_decoder_shape_check():
    with pytest.raises(InvalidArgument):
        NeuralRenderer(25, 2, 16, 16)(torch.zeros(1, 24, 16, 16))


def test_composite_uses_alpha():
    rgb = torch.full((1, 3, 8, 8), 0.5)
    grid = torch.zeros(1, 4, 4, 4)
    assert torch.equal(composite(rgb, grid), torch.zeros_like(rgb))
    grid[:, -1] = 1.0
    assert torch.equal(composite(rgb, grid), rgb)


def test_decoder_gradient_matches_finite_differences():
    torch.manual_seed(0)
    dec = NeuralRenderer(7, 2, 8, 4).double()
    grid = torch.randn(2, 7, 4, 4, dtype=torch.float64)
    params = list(dec.parameters())
    grads = torch.autograd.grad(dec(grid).mean(), params)
    assert fd_errors(lambda: dec(grid).mean(), params, grads) < 1e-4


# ------------------------------------------------------------ triplet

def small_model(**kw):
    cfg = ModelConfig(width=32, depth=3, skip=2, grid=8, decoder_width=16, n_samples=12, **kw)
    torch.manual_seed(0)
    return GazeFieldModel(cfg)


def test_triplet_shapes_and_determinism():
    model = small_model()
    z = init_latents_from_subject(SyntheticSubject.random(0))
    cam = camera(res=32)
    a = render_triplet(model, z, (0.1, -0.2), cam)
    b = render_triplet(model, z, (0.1, -0.2), cam)
    for x, y in zip(a, b):
        assert x.shape == (3, 32, 32)
        assert torch.equal(x, y)
        assert 0 <= x.min() and x.max() <= 1
    c = render_triplet(model, z, (-0.3, 0.3), cam)
    assert not torch.equal(a[1], c[1])


def test_rays_do_not_depend_on_gaze():
    model = small_model()
    r1, r2 = model.rays_for(camera()), model.rays_for(camera())
    assert torch.equal(r1.origins, r2.origins) and torch.equal(r1.directions, r2.directions)


def test_empty_eye_stream_leaves_face_unchanged():
    model = small_model()
    with torch.no_grad():
        eyes = model.fields["eyes"]
        eyes.sigma_head.weight.zero_()
        eyes.sigma_head.bias.fill_(-1e4)    # softplus underflows to exactly 0
    z = init_latents_from_subject(SyntheticSubject.random(1)).vector()[None]
    g = torch.tensor([[0.2, 0.1]])
    out = model(z, g, [model.rays_for(camera())])
    assert torch.equal(out["F_e"][:, :-1], torch.zeros_like(out["F_e"][:, :-1]))
    assert torch.equal(out["F_wf"], out["F_fwo"])
    assert torch.equal(out["I_wf"], out["I_fwo"])


def test_single_stream_model():
    model = small_model(two_stream=False)
    i_fwo, i_e, i_wf = render_triplet(model, init_latents_from_subject(SyntheticSubject.random(0)),
                                      (0.0, 0.0), camera(res=32))
    assert i_fwo is None and i_e is None and i_wf.shape == (3, 32, 32)


def test_batch_size_mismatch():
    model = small_model()
    with pytest.raises(InvalidArgument):
        model(torch.zeros(2, 44), torch.zeros(1, 2), [model.rays_for(camera())])
