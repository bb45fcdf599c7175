import numpy as np
import pytest

from fusemap.geometry import CameraIntrinsics
from fusemap.ingest import load_sequence, read_region_features
from fusemap.synthetic import (
    Box,
    PlaneRect,
    Sphere,
    SyntheticScene,
    default_scene_spec,
    export_dataset,
    features_from_ids,
    ground_truth_labels,
    look_at,
    orbit_trajectory,
    orthonormal_embeddings,
    raycast,
    scene_from_spec,
)

K = CameraIntrinsics(fx=80.0, fy=80.0, cx=40.17, cy=30.23, width=80, height=60)


def simple_scene(primitives, frames=4, radius=2.0, height=1.0, center=(0, 0, 0.3)):
    embs = orthonormal_embeddings(len(primitives), 16, 9)
    for p, e in zip(primitives, embs):
        p.embedding = e
    return SyntheticScene(primitives, orbit_trajectory(center, radius, height, frames))


class TestRaycast:
    def test_sphere_on_principal_ray(self):
        sphere = Sphere([0.0, 0.0, 2.0], 0.5, [1.0, 0.0, 0.0])
        sphere.embedding = np.ones(4, np.float32)
        pose = look_at([0.0, 0.0, 0.0], [0.0, 0.0, 2.0], up=(0, 1, 0))
        scene = SyntheticScene([sphere], [pose])
        depth, ids = raycast(scene, K, pose)
        px = (int(np.floor(K.cx + 0.5)), int(np.floor(K.cy + 0.5)))
        # center pixel hits near the sphere's closest point: distance - radius
        assert depth[px[1], px[0]] == pytest.approx(1.5, abs=1e-3)
        assert ids[px[1], px[0]] == 0

    def test_depth_matches_analytic_sphere(self, rng):
        center = np.array([0.2, -0.1, 1.8])
        sphere = Sphere(center, 0.4, [1.0, 0.0, 0.0])
        sphere.embedding = np.ones(4, np.float32)
        pose = look_at([0.1, 0.2, 0.0], center)
        scene = SyntheticScene([sphere], [pose])
        depth, ids = raycast(scene, K, pose)
        rows, cols = np.nonzero(depth > 0)
        # every hit point must lie exactly on the sphere
        from fusemap.geometry import DepthImage, unproject_depth

        pixels, points = unproject_depth(DepthImage(depth), K, pose)
        err = np.abs(np.linalg.norm(points - center, axis=1) - 0.4)
        assert err.max() < 1e-6

    def test_two_primitives_two_regions(self):
        s1 = Sphere([-0.5, 0.0, 0.3], 0.25, [1, 0, 0])
        s2 = Sphere([0.5, 0.0, 0.3], 0.25, [0, 1, 0])
        scene = simple_scene([s1, s2])
        depth, ids = raycast(scene, K, scene.trajectory[0])
        feats, owners = features_from_ids(scene, ids, 0)
        assert feats.n == 2 and owners == [0, 1]

    def test_occluded_primitive_has_empty_mask(self):
        # box fully behind the sphere from a head-on viewpoint
        sphere = Sphere([0.0, 0.0, 1.0], 0.45, [1, 0, 0])
        box = Box([-0.1, -0.1, 1.6], [0.1, 0.1, 1.8], [0, 1, 0])
        embs = orthonormal_embeddings(2, 8, 1)
        sphere.embedding, box.embedding = embs
        pose = look_at([0.0, 0.0, 0.0], [0.0, 0.0, 1.0], up=(0, 1, 0))
        scene = SyntheticScene([sphere, box], [pose])
        depth, ids = raycast(scene, K, pose)
        assert (ids == 1).sum() == 0
        feats, owners = features_from_ids(scene, ids, 0)
        assert owners == [0]

    def test_box_faces(self):
        box = Box([-0.3, -0.3, 1.0], [0.3, 0.3, 1.5], [0, 0, 1])
        box.embedding = np.ones(4, np.float32)
        pose = look_at([0.0, 0.0, -0.5], [0.0, 0.0, 1.0], up=(0, 1, 0))
        scene = SyntheticScene([box], [pose])
        depth, _ = raycast(scene, K, pose)
        px = (int(np.floor(K.cx + 0.5)), int(np.floor(K.cy + 0.5)))
        assert depth[px[1], px[0]] == pytest.approx(1.5, abs=1e-6)

    def test_plane_rect_bounds(self):
        plane = PlaneRect([0.0, 0.0, 2.0], 2, (0.5, 0.5), [1, 1, 1])
        plane.embedding = np.ones(4, np.float32)
        pose = look_at([0.0, 0.0, 0.0], [0.0, 0.0, 2.0], up=(0, 1, 0))
        scene = SyntheticScene([plane], [pose])
        depth, _ = raycast(scene, K, pose)
        hit = depth > 0
        assert hit.any() and not hit.all()
        assert np.allclose(depth[hit], 2.0, atol=1e-9)


class TestGroundTruth:
    def test_labels_near_surfaces(self):
        sphere = Sphere([0.0, 0.0, 0.5], 0.3, [1, 0, 0])
        box = Box([0.8, 0.8, 0.0], [1.2, 1.2, 0.4], [0, 1, 0])
        scene = simple_scene([sphere, box])
        vs, band = 0.05, 0.1
        coords, labels = ground_truth_labels(scene, vs, band)
        assert len(coords) > 0
        pts = coords * vs
        d_sphere = np.abs(np.linalg.norm(pts - sphere.center, axis=1) - 0.3)
        d_box = scene.primitives[1].surface_distance(pts)
        best = np.where(d_sphere <= d_box, 0, 1)
        assert (labels == best).all()
        assert (np.minimum(d_sphere, d_box) <= band + 1e-9).all()


class TestSceneSpec:
    def test_default_scene_builds(self):
        scene, k = scene_from_spec(default_scene_spec())
        assert len(scene.primitives) == 3
        assert len(scene.trajectory) == 60
        embs = scene.embeddings
        gram = embs @ embs.T
        assert np.allclose(gram, np.eye(3), atol=1e-5)

    def test_duplicate_embeddings_rejected(self):
        s1 = Sphere([0, 0, 0], 1.0, [1, 0, 0])
        s2 = Sphere([2, 0, 0], 1.0, [0, 1, 0])
        s1.embedding = s2.embedding = np.ones(4, np.float32)
        with pytest.raises(ValueError):
            SyntheticScene([s1, s2], [])


class TestExportDataset:
    def test_exported_sequence_round_trips(self, tmp_path):
        spec = default_scene_spec()
        spec["trajectory"]["frames"] = 3
        spec["camera"].update(width=64, height=48, fx=50.0, fy=50.0, cx=32.1, cy=24.2)
        scene, k = scene_from_spec(spec)
        manifest = export_dataset(scene, k, tmp_path, voxel_size=0.06)
        seq = load_sequence(manifest)
        frames = list(seq.iter_frames())
        assert len(frames) == 3
        # depth survives the npy round trip exactly
        depth, _ = raycast(scene, k, scene.trajectory[1])
        assert np.array_equal(frames[1].depth.values, depth.astype(np.float32))
        # features parse and align with the generator
        feats = read_region_features(seq.feature_dir / "1.ofrf")
        assert feats.frame_id == 1 and feats.n >= 1
        gt = np.load(tmp_path / "gt.npz")
        assert gt["coords"].shape[1] == 3
        assert gt["class_embeddings"].shape[0] == 3
