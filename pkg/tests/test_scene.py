"""Camera model, ray generation, projection, and scene I/O."""
import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from lumisurf.scene import (
    CameraModel,
    MultiViewScene,
    RayBundle,
    SceneFormatError,
    generate_rays,
    load_scene,
    project_point,
    viewing_directions,
    write_scene,
)
from lumisurf.synthetic import SphereSceneParams, make_sphere_scene


def _toy_camera(width=8, height=6, focal=10.0, eye=(0.0, 0.0, -2.0)) -> CameraModel:
    return CameraModel.look_at(eye, (0.0, 0.0, 0.0), focal, width, height)


# ---------------------------------------------------------------------------
# CameraModel validation


def test_camera_rejects_non_orthonormal_rotation():
    R = np.eye(3)
    R[0, 1] = 0.01
    K = np.array([[10.0, 0, 4], [0, 10.0, 3], [0, 0, 1]])
    with pytest.raises(SceneFormatError):
        CameraModel(K, R, np.zeros(3), 8, 6)


def test_camera_rejects_reflection():
    R = np.diag([1.0, 1.0, -1.0])  # orthonormal but det = -1
    K = np.array([[10.0, 0, 4], [0, 10.0, 3], [0, 0, 1]])
    with pytest.raises(SceneFormatError):
        CameraModel(K, R, np.zeros(3), 8, 6)


def test_camera_rejects_nonpositive_focal():
    K = np.array([[-1.0, 0, 4], [0, 10.0, 3], [0, 0, 1]])
    with pytest.raises(SceneFormatError):
        CameraModel(K, np.eye(3), np.zeros(3), 8, 6)


def test_camera_rejects_principal_point_outside_image():
    K = np.array([[10.0, 0, 50.0], [0, 10.0, 3], [0, 0, 1]])
    with pytest.raises(SceneFormatError):
        CameraModel(K, np.eye(3), np.zeros(3), 8, 6)


def test_camera_center_inverts_extrinsics():
    cam = _toy_camera(eye=(0.3, -0.2, -1.7))
    np.testing.assert_allclose(cam.center, [0.3, -0.2, -1.7], atol=1e-12)
    # world-to-camera maps the center to the origin
    np.testing.assert_allclose(cam.rotation @ cam.center + cam.translation, 0.0, atol=1e-12)


def test_camera_dict_round_trip():
    cam = _toy_camera()
    back = CameraModel.from_dict(cam.to_dict())
    np.testing.assert_allclose(back.intrinsics, cam.intrinsics)
    np.testing.assert_allclose(back.rotation, cam.rotation)
    np.testing.assert_allclose(back.translation, cam.translation)
    assert (back.width, back.height) == (cam.width, cam.height)


def test_resized_preserves_pose_and_scales_intrinsics():
    cam = _toy_camera(width=8, height=6)
    small = cam.resized(4, 3)
    assert (small.width, small.height) == (4, 3)
    np.testing.assert_allclose(small.rotation, cam.rotation)
    np.testing.assert_allclose(small.center, cam.center)
    np.testing.assert_allclose(small.fx, cam.fx * 0.5)
    np.testing.assert_allclose(small.cy, cam.cy * 0.5)


# ---------------------------------------------------------------------------
# generate_rays / viewing_directions


def test_principal_point_ray_is_optical_axis():
    # odd image + centered principal point puts a pixel center exactly on it
    cam = CameraModel.look_at((0.0, 0.5, -2.0), (0.0, 0.0, 0.0), 10.0, 5, 5)
    rays = generate_rays(cam, dtype=torch.float64)
    axis = cam.rotation[2]  # camera +z expressed in world coordinates
    got = rays.directions[2, 2].numpy()
    np.testing.assert_allclose(got, axis, atol=1e-12)


def test_corner_ray_matches_hand_back_projection():
    cam = _toy_camera(width=8, height=6, focal=11.0, eye=(0.4, 0.1, -1.9))
    rays = generate_rays(cam, dtype=torch.float64)
    u, v = 7 + 0.5, 0 + 0.5  # top-right corner pixel center
    d_cam = np.array([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0])
    d_world = cam.rotation.T @ d_cam
    d_world /= np.linalg.norm(d_world)
    np.testing.assert_allclose(rays.directions[0, 7].numpy(), d_world, atol=1e-12)


def test_identity_rotation_origin_is_negated_translation():
    K = np.array([[10.0, 0, 4], [0, 10.0, 3], [0, 0, 1]])
    cam = CameraModel(K, np.eye(3), np.array([0.1, -0.2, -3.0]), 8, 6)
    rays = generate_rays(cam)
    np.testing.assert_allclose(rays.origins[0, 0].numpy(), [-0.1, 0.2, 3.0], atol=1e-7)


def test_ray_directions_unit_norm():
    rays = generate_rays(_toy_camera(), dtype=torch.float64)
    norms = rays.directions.norm(dim=-1)
    assert float((norms - 1.0).abs().max()) < 1e-6


def test_viewing_directions_equal_ray_directions():
    cam = _toy_camera()
    torch.testing.assert_close(viewing_directions(cam), generate_rays(cam).directions)


def test_viewing_directions_depend_only_on_camera():
    cam = _toy_camera()
    again = CameraModel.from_dict(cam.to_dict())
    torch.testing.assert_close(viewing_directions(cam), viewing_directions(again))


def test_rotated_camera_rotates_direction_map():
    cam1 = _toy_camera(eye=(0.0, 0.0, -2.0))
    th = 0.3
    A = np.array(
        [[np.cos(th), 0, np.sin(th)], [0, 1, 0], [-np.sin(th), 0, np.cos(th)]]
    )
    # same intrinsics, world-to-camera pre-rotated by A
    cam2 = CameraModel(
        cam1.intrinsics, cam1.rotation @ A, cam1.translation, cam1.width, cam1.height
    )
    d1 = generate_rays(cam1, dtype=torch.float64).directions.numpy()
    d2 = generate_rays(cam2, dtype=torch.float64).directions.numpy()
    np.testing.assert_allclose(d2, d1 @ A, atol=1e-12)


def test_near_far_bracket_scene_bounds():
    cam = _toy_camera(width=16, height=16, focal=20.0, eye=(0.0, 0.0, -2.0))
    rays = generate_rays(cam)
    assert 0.0 < rays.near < rays.far
    # camera 2 units out, unit cube spans [-0.5, 0.5]: crossing is inside [1, 3.5]
    assert rays.near >= 1.0
    assert rays.far <= 3.5


def test_ray_bundle_rejects_inverted_interval():
    o = torch.zeros(2, 2, 3)
    d = torch.zeros(2, 2, 3)
    d[..., 2] = 1.0
    with pytest.raises(ValueError):
        RayBundle(origins=o, directions=d, near=2.0, far=1.0)


def test_per_ray_interval_misses_get_empty_segment():
    o = torch.tensor([[[0.0, 0.0, -2.0], [0.0, 5.0, -2.0]]])  # (1, 2, 3)
    d = torch.tensor([[[0.0, 0.0, 1.0], [0.0, 0.0, 1.0]]])
    rays = RayBundle(origins=o, directions=d, near=1.0, far=3.0)
    enter, exit_ = rays.per_ray_interval()
    assert enter[0, 0] < exit_[0, 0]  # through the cube
    assert enter[0, 1] > exit_[0, 1]  # passes above it


# ---------------------------------------------------------------------------
# project_point


def test_project_camera_center_depth_zero():
    cam = _toy_camera()
    _, _, depth = project_point(cam, cam.center)
    assert abs(float(depth)) < 1e-12


def test_project_optical_axis_point():
    cam = _toy_camera(eye=(0.2, -0.1, -2.0))
    x = cam.center + 2.0 * cam.rotation[2]
    u, v, depth = project_point(cam, x)
    np.testing.assert_allclose([float(u), float(v)], [cam.cx, cam.cy], atol=1e-9)
    np.testing.assert_allclose(float(depth), 2.0, atol=1e-12)


def test_project_matches_matrix_oracle():
    cam = _toy_camera(eye=(0.5, 0.3, -1.8))
    rng = np.random.default_rng(0)
    pts = rng.uniform(-0.5, 0.5, size=(32, 3))
    u, v, depth = project_point(cam, pts)
    P = cam.intrinsics @ np.hstack([cam.rotation, cam.translation[:, None]])  # (3, 4)
    homo = (P @ np.hstack([pts, np.ones((32, 1))]).T).T
    np.testing.assert_allclose(u, homo[:, 0] / homo[:, 2], atol=1e-9)
    np.testing.assert_allclose(v, homo[:, 1] / homo[:, 2], atol=1e-9)
    np.testing.assert_allclose(depth, homo[:, 2], atol=1e-9)


def test_project_behind_camera_flags_negative_depth():
    cam = _toy_camera()
    behind = cam.center - 1.0 * cam.rotation[2]
    _, _, depth = project_point(cam, behind)
    assert float(depth) < 0.0


@settings(max_examples=25, deadline=None)
@given(
    px=st.integers(min_value=0, max_value=7),
    py=st.integers(min_value=0, max_value=5),
    t=st.floats(min_value=1.2, max_value=3.0),
)
def test_pixel_round_trip(px, py, t):
    """Walking t along a pixel ray re-projects onto that pixel's center.

    Reported depth is the camera-space z of the sample, t scaled by the
    ray's obliquity (directions are unit-norm world vectors).
    """
    cam = _toy_camera(eye=(0.1, -0.3, -2.1))
    rays = generate_rays(cam, dtype=torch.float64)
    o = rays.origins[py, px].numpy()
    d = rays.directions[py, px].numpy()
    u, v, depth = project_point(cam, o + t * d)
    np.testing.assert_allclose([float(u), float(v)], [px + 0.5, py + 0.5], atol=1e-6)
    np.testing.assert_allclose(float(depth), t * float(cam.rotation[2] @ d), atol=1e-9)


@settings(max_examples=25, deadline=None)
@given(
    ex=st.floats(min_value=-3, max_value=3),
    ey=st.floats(min_value=-3, max_value=3),
    ez=st.floats(min_value=1.2, max_value=3),
)
def test_look_at_rotation_is_orthonormal(ex, ey, ez):
    cam = CameraModel.look_at((ex, ey, ez), (0.0, 0.0, 0.0), 10.0, 8, 6)
    R = cam.rotation
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-9)
    assert np.linalg.det(R) > 0.0


# ---------------------------------------------------------------------------
# MultiViewScene validation


def _tiny_scene_tensors(n=2, h=4, w=4):
    images = torch.rand(n, h, w, 3)
    masks = torch.zeros(n, h, w, dtype=torch.bool)
    masks[:, 1:3, 1:3] = True
    cams = [
        CameraModel.look_at((np.sin(a), 0.3, np.cos(a) * 2.0), (0, 0, 0), 6.0, w, h)
        for a in np.linspace(0.0, 1.0, n)
    ]
    return images, masks, cams


def test_scene_requires_two_views():
    images, masks, cams = _tiny_scene_tensors(n=2)
    with pytest.raises(SceneFormatError):
        MultiViewScene(images=images[:1], masks=masks[:1], cameras=cams[:1])


def test_scene_rejects_empty_mask():
    images, masks, cams = _tiny_scene_tensors()
    masks[1] = False
    with pytest.raises(SceneFormatError, match="view 1"):
        MultiViewScene(images=images, masks=masks, cameras=cams)


def test_scene_rejects_camera_inside_bounds():
    images, masks, cams = _tiny_scene_tensors()
    inside = CameraModel(
        cams[0].intrinsics, np.eye(3), np.array([0.0, 0.0, 0.1]), 4, 4
    )
    with pytest.raises(SceneFormatError, match="inside"):
        MultiViewScene(images=images, masks=masks, cameras=[inside, cams[1]])


def test_scene_rejects_out_of_range_images():
    images, masks, cams = _tiny_scene_tensors()
    images[0, 0, 0, 0] = 1.5
    with pytest.raises(SceneFormatError):
        MultiViewScene(images=images, masks=masks, cameras=cams)


# ---------------------------------------------------------------------------
# scene directory I/O


def test_load_toy_sphere_scene_directory(tmp_path):
    make_sphere_scene(SphereSceneParams(n_views=8, resolution=64, seed=0), tmp_path)
    scene = load_scene(tmp_path)
    assert scene.n_views == 8
    assert scene.image_size == (64, 64)
    assert scene.masks.dtype == torch.bool
    assert all(bool(scene.masks[i].any()) for i in range(8))


def test_write_load_round_trip(tmp_path):
    images, masks, cams = _tiny_scene_tensors(n=3, h=6, w=8)
    write_scene(tmp_path, images.numpy(), masks.numpy(), cams)
    scene = load_scene(tmp_path)
    assert scene.n_views == 3
    # 8-bit quantization is the only loss
    assert float((scene.images - images).abs().max()) <= 0.5 / 255.0 + 1e-6
    assert torch.equal(scene.masks, masks)
    np.testing.assert_allclose(scene.cameras[2].intrinsics, cams[2].intrinsics)


def test_load_scene_missing_mask_names_view(tmp_path):
    images, masks, cams = _tiny_scene_tensors(n=3, h=6, w=8)
    write_scene(tmp_path, images.numpy(), masks.numpy(), cams)
    (tmp_path / "masks" / "0001.png").unlink()
    with pytest.raises(SceneFormatError, match="0001"):
        load_scene(tmp_path)


def test_load_scene_rejects_reflected_rotation(tmp_path):
    images, masks, cams = _tiny_scene_tensors(n=2, h=6, w=8)
    write_scene(tmp_path, images.numpy(), masks.numpy(), cams)
    import json

    cam_file = tmp_path / "cameras.json"
    data = json.loads(cam_file.read_text())
    R = np.asarray(data["views"][0]["R"]).reshape(3, 3)
    data["views"][0]["R"] = (np.diag([1.0, 1.0, -1.0]) @ R).reshape(-1).tolist()
    cam_file.write_text(json.dumps(data))
    with pytest.raises(SceneFormatError):
        load_scene(tmp_path)
