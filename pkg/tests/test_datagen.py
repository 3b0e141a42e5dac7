import json

import numpy as np
import pytest

from pointpretrain.datagen import (DataFormatError, GeneratorConfig, SceneObject,
                                   build_sample, generate_dataset, generate_scene,
                                   make_cameras, read_dataset, render_depth,
                                   surface_distance, synth_teacher, write_dataset)
from pointpretrain.geometry import (CameraModel, RigidTransform, backproject_depth,
                                    to_robot_frame)

GEN = GeneratorConfig(depth_height=48, depth_width=48, views_per_scene=3)


class TestSceneGeneration:
    def test_same_seed_same_scene(self):
        a = generate_scene(7, GEN)
        b = generate_scene(7, GEN)
        assert a == b

    def test_single_object_config(self):
        cfg = GeneratorConfig(object_count_range=(1, 1))
        scene = generate_scene(0, cfg)
        assert len(scene.objects) == 1

    def test_no_interpenetration_over_many_seeds(self):
        for seed in range(1000):
            scene = generate_scene(seed, GEN)
            for i, a in enumerate(scene.objects):
                for b in scene.objects[i + 1:]:
                    dist = np.linalg.norm(np.subtract(a.position, b.position))
                    assert dist >= a.bounding_radius() + b.bounding_radius() - 1e-12

    def test_objects_rest_above_table(self):
        for seed in range(50):
            scene = generate_scene(seed, GEN)
            for obj in scene.objects:
                assert obj.position[2] > 0

    def test_unknown_primitive_rejected(self):
        with pytest.raises(DataFormatError, match="unknown primitive"):
            SceneObject("cone", (0.1,), (0.0, 0.0, 0.1), 0.0)


class TestRendering:
    def test_empty_table_constant_depth(self):
        # camera looking straight down from height h sees the table plane at
        # depth h wherever the ray lands inside the table footprint; the one
        # object sits far off-table so only the plane is visible
        from pointpretrain.datagen import SceneSpec
        h = 0.8
        rot = np.array([[1.0, 0.0, 0.0],
                        [0.0, -1.0, 0.0],
                        [0.0, 0.0, -1.0]])   # z looks down, det +1
        cam = CameraModel(width=16, height=16, fx=40.0, fy=40.0, cx=7.5, cy=7.5,
                          extrinsic=RigidTransform(rot, [0.0, 0.0, h]))
        far = SceneObject("sphere", (0.01,), (5.0, 5.0, 0.01), 0.0)
        scene = SceneSpec(seed=0, objects=(far,), table_extent=(0.3, 0.3),
                          robot_state=(0.0,))
        depth = render_depth(scene, cam)
        hits = depth[depth > 0]
        assert hits.size == 16 * 16
        assert np.abs(hits - h).max() < 1e-9

    def test_sphere_on_optical_axis(self):
        # unit sphere centered 5m ahead of the camera: center pixel depth 4
        from pointpretrain.datagen import SceneSpec
        rot = np.array([[1.0, 0.0, 0.0],
                        [0.0, -1.0, 0.0],
                        [0.0, 0.0, -1.0]])
        cam = CameraModel(width=9, height=9, fx=20.0, fy=20.0, cx=4.0, cy=4.0,
                          extrinsic=RigidTransform(rot, [0.0, 0.0, 5.0]))
        sphere = SceneObject("sphere", (1.0,), (0.0, 0.0, 0.0), 0.0)
        scene = SceneSpec(seed=0, objects=(sphere,), table_extent=(1e-6, 1e-6),
                          robot_state=(0.0,))
        depth = render_depth(scene, cam)
        assert depth[4, 4] == pytest.approx(4.0, abs=1e-9)

    @pytest.mark.parametrize("seed", range(10))
    def test_backprojected_points_lie_on_surfaces(self, seed):
        scene = generate_scene(seed, GEN)
        sample = build_sample(seed, scene, GEN)
        for depth, cam in zip(sample.depths, sample.cameras):
            cloud = to_robot_frame(backproject_depth(depth, cam), cam.extrinsic)
            if len(cloud):
                assert surface_distance(scene, cloud.points).max() < 1e-6

    def test_camera_ring_extrinsics_are_valid(self):
        for seed in range(20):
            for cam in make_cameras(seed, GEN):
                rot = cam.extrinsic.rotation
                assert np.abs(rot.T @ rot - np.eye(3)).max() < 1e-9
                assert abs(np.linalg.det(rot) - 1.0) < 1e-9


class TestSyntheticTeacher:
    def test_deterministic_per_scene_and_view(self):
        scene = generate_scene(3, GEN)
        a = synth_teacher(scene, 1, 0, 32)
        b = synth_teacher(scene, 1, 0, 32)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, synth_teacher(scene, 2, 0, 32))
        assert np.array_equal(synth_teacher(scene, "text", 0, 32),
                              synth_teacher(scene, "text", 0, 32))

    def test_unit_norm(self):
        scene = generate_scene(5, GEN)
        for selector in (0, 1, "text"):
            assert abs(np.linalg.norm(synth_teacher(scene, selector, 0, 32)) - 1.0) < 1e-6

    @pytest.mark.parametrize("selector", [0, "text"])
    def test_scene_discrimination(self, selector):
        embs = np.stack([synth_teacher(generate_scene(s, GEN), selector, 0, 32)
                         for s in range(100)])
        cos = embs @ embs.T
        off_diag = cos[~np.eye(100, dtype=bool)]
        assert np.abs(off_diag).mean() < 0.5

    def test_small_dim_rejected(self):
        with pytest.raises(DataFormatError, match=">= 8"):
            synth_teacher(generate_scene(0, GEN), 0, 0, 4)


class TestDatasetIO:
    def test_round_trip_field_by_field(self, tmp_path):
        samples = generate_dataset(GEN, 3, base_seed=5)
        write_dataset(samples, tmp_path / "ds")
        loaded = read_dataset(tmp_path / "ds")
        assert len(loaded) == 3
        for a, b in zip(samples, loaded):
            assert a.scene_id == b.scene_id
            assert a.spec == b.spec
            assert np.array_equal(a.teacher_image, b.teacher_image)
            assert np.array_equal(a.teacher_text, b.teacher_text)
            for da, db in zip(a.depths, b.depths):
                assert np.array_equal(da, db)
            for ca, cb in zip(a.cameras, b.cameras):
                assert ca.width == cb.width and ca.height == cb.height
                assert (ca.fx, ca.fy, ca.cx, ca.cy) == (cb.fx, cb.fy, cb.cx, cb.cy)
                assert np.array_equal(ca.extrinsic.matrix(), cb.extrinsic.matrix())

    def test_truncated_depth_rejected_naming_file(self, tmp_path):
        samples = generate_dataset(GEN, 1, base_seed=0)
        write_dataset(samples, tmp_path / "ds")
        victim = tmp_path / "ds" / "scene_000000" / "views" / "view_01" / "depth.bin"
        victim.write_bytes(victim.read_bytes()[:-8])
        with pytest.raises(DataFormatError, match="view_01/depth.bin"):
            read_dataset(tmp_path / "ds")

    def test_unknown_version_rejected(self, tmp_path):
        samples = generate_dataset(GEN, 1, base_seed=0)
        write_dataset(samples, tmp_path / "ds")
        manifest_path = tmp_path / "ds" / "manifest.json"
        manifest = json.loads(manifest_path.read_text())
        manifest["format_version"] = 99
        manifest_path.write_text(json.dumps(manifest))
        with pytest.raises(DataFormatError, match="format_version"):
            read_dataset(tmp_path / "ds")

    def test_missing_manifest_rejected(self, tmp_path):
        with pytest.raises(DataFormatError, match="manifest.json"):
            read_dataset(tmp_path / "nope")

    def test_corrupt_teacher_norm_rejected(self, tmp_path):
        samples = generate_dataset(GEN, 1, base_seed=0)
        write_dataset(samples, tmp_path / "ds")
        teacher_path = tmp_path / "ds" / "scene_000000" / "teacher.json"
        teacher = json.loads(teacher_path.read_text())
        teacher["text"] = [v * 2.0 for v in teacher["text"]]
        teacher_path.write_text(json.dumps(teacher))
        with pytest.raises(DataFormatError, match="unit-norm"):
            read_dataset(tmp_path / "ds")


def test_build_sample_shapes():
    sample = build_sample(0, generate_scene(0, GEN), GEN)
    assert sample.teacher_image.shape == (3, 32)
    assert sample.teacher_text.shape == (32,)
    assert len(sample.depths) == 3
    assert sample.depths[0].shape == (48, 48)
    assert sample.depths[0].dtype == np.float32
