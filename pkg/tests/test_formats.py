import math
from pathlib import Path

import numpy as np
import pytest

from resplat import formats
from resplat.errors import DataError, FormatError
from resplat.scene import GaussianScene, TokenGrid

FIXTURES = Path(__file__).parent / "fixtures"


def write_raw_ply(path, rows, fields=formats.PLY_FIELDS):
    header = "\n".join(
        ["ply", "format binary_little_endian 1.0", f"element vertex {len(rows)}"]
        + [f"property float {f}" for f in fields]
        + ["end_header", ""]
    ).encode()
    payload = np.array([tuple(r) for r in rows], dtype=[(f, "<f4") for f in fields])
    path.write_bytes(header + payload.tobytes())


class TestScenePly:
    def test_all_zero_raw_fields_rejected_for_zero_quaternion(self, tmp_path):
        path = tmp_path / "zero.ply"
        write_raw_ply(path, [[0.0] * 14])
        with pytest.raises(DataError, match="rotation"):
            formats.load_scene_ply(path)

    def test_activation_identities_on_zero_fields(self, tmp_path):
        # zero raws except a unit quaternion: exp(0)=1, sigmoid(0)=0.5, dc 0 -> 0.5
        row = [0.0] * 14
        row[10] = 1.0  # rot_0
        path = tmp_path / "ident.ply"
        write_raw_ply(path, [row])
        scene = formats.load_scene_ply(path)
        assert len(scene) == 1
        np.testing.assert_allclose(scene.scales[0], [1.0, 1.0, 1.0])
        assert scene.opacities[0] == pytest.approx(0.5)
        np.testing.assert_allclose(scene.colors[0], [0.5, 0.5, 0.5])

    def test_activations_match_scalar_oracle(self, tmp_path):
        # hand-evaluated sigmoid/exp/affine per raw field on 3 primitives
        rows = [
            [0.1, -0.2, 0.3, 0.4, -0.5, 0.6, 0.7, -0.8, 0.9, -1.0, 0.5, 0.5, 0.5, 0.5],
            [1.0, 2.0, 3.0, -1.2, 0.0, 1.2, -2.0, 0.1, -0.1, 0.2, 1.0, 0.0, 0.0, 0.0],
            [-3.0, 0.5, 2.5, 1.5, -1.5, 0.2, 3.0, -1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0],
        ]
        path = tmp_path / "three.ply"
        write_raw_ply(path, rows)
        scene = formats.load_scene_ply(path)
        for i, row in enumerate(rows):
            f_dc = row[3:6]
            raw_op = row[6]
            raw_scale = row[7:10]
            quat = np.array(row[10:14])
            expect_color = [min(max(0.2820948 * v + 0.5, 0.0), 1.0) for v in f_dc]
            expect_op = 1.0 / (1.0 + math.exp(-raw_op))
            expect_scale = [math.exp(v) for v in raw_scale]
            np.testing.assert_allclose(scene.colors[i], expect_color, atol=1e-6)
            assert scene.opacities[i] == pytest.approx(expect_op, abs=1e-6)
            np.testing.assert_allclose(scene.scales[i], expect_scale, rtol=1e-5)
            np.testing.assert_allclose(
                scene.rotations[i], quat / np.linalg.norm(quat), atol=1e-6
            )
            assert np.linalg.norm(scene.rotations[i].astype(np.float64)) == pytest.approx(1.0, abs=1e-6)

    def test_raw_field_round_trip(self, tmp_path, rng):
        n = 20
        rows = np.column_stack([
            rng.normal(size=(n, 3)),                  # centers
            rng.uniform(-1.7, 1.7, size=(n, 3)),      # f_dc within clamp-free range
            rng.uniform(-8.0, 8.0, size=n)[:, None],  # opacity logits
            rng.uniform(-5.0, 2.0, size=(n, 3)),      # log scales
            rng.normal(size=(n, 4)),                  # quaternions (normalized on load)
        ])
        rows[:, 10:14] /= np.linalg.norm(rows[:, 10:14], axis=1, keepdims=True)
        src = tmp_path / "src.ply"
        dst = tmp_path / "dst.ply"
        write_raw_ply(src, rows.astype(np.float32))
        formats.save_scene_ply(formats.load_scene_ply(src), dst)
        raw1 = formats.read_scene_ply_raw(src)
        raw2 = formats.read_scene_ply_raw(dst)
        for name in formats.PLY_FIELDS:
            np.testing.assert_allclose(
                raw2[name].astype(np.float64), raw1[name].astype(np.float64), atol=1e-6,
                err_msg=f"field {name}",
            )

    def test_load_save_load_fixpoint(self, tmp_path, rng):
        rows = np.zeros((4, 14), np.float32)
        rows[:, 10] = 1.0
        rows[:, 6] = rng.uniform(-3, 3, 4)
        src = tmp_path / "a.ply"
        write_raw_ply(src, rows)
        s1 = formats.load_scene_ply(src)
        formats.save_scene_ply(s1, tmp_path / "b.ply")
        s2 = formats.load_scene_ply(tmp_path / "b.ply")
        for field in ("centers", "scales", "rotations", "opacities", "colors"):
            np.testing.assert_allclose(getattr(s2, field), getattr(s1, field), atol=1e-6)

    def test_empty_scene_round_trip(self, tmp_path):
        path = tmp_path / "empty.ply"
        formats.save_scene_ply(GaussianScene.empty(), path)
        scene = formats.load_scene_ply(path)
        assert len(scene) == 0

    def test_opacity_one_saves_clamped_logit(self, tmp_path):
        scene = GaussianScene(
            centers=[[0, 0, 0]], scales=[[1, 1, 1]], rotations=[[1, 0, 0, 0]],
            opacities=[1.0], colors=[[0.5, 0.5, 0.5]],
        )
        path = tmp_path / "one.ply"
        formats.save_scene_ply(scene, path)
        raw = formats.read_scene_ply_raw(path)
        expect_logit = math.log((1 - 1e-6) / 1e-6)
        assert raw["opacity"][0] == pytest.approx(expect_logit, rel=1e-5)
        reloaded = formats.load_scene_ply(path)
        assert reloaded.opacities[0] == pytest.approx(1.0, abs=1e-5)

    def test_missing_field_names_it(self, tmp_path):
        fields = [f for f in formats.PLY_FIELDS if f != "scale_1"]
        path = tmp_path / "missing.ply"
        write_raw_ply(path, [[0.0] * len(fields)], fields=fields)
        with pytest.raises(FormatError, match="scale_1"):
            formats.load_scene_ply(path)

    def test_non_finite_value_reports_index(self, tmp_path):
        rows = np.zeros((3, 14), np.float32)
        rows[:, 10] = 1.0
        rows[2, 0] = np.nan
        path = tmp_path / "nan.ply"
        write_raw_ply(path, rows)
        with pytest.raises(DataError, match="2"):
            formats.load_scene_ply(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "trunc.ply"
        write_raw_ply(path, np.zeros((2, 14), np.float32) + [[0] * 10 + [1, 0, 0, 0]])
        data = path.read_bytes()
        path.write_bytes(data[:-8])
        with pytest.raises(FormatError, match="truncated"):
            formats.load_scene_ply(path)


class TestCameras:
    def test_identity_camera_convention(self, tmp_path):
        # identity rotation, zero translation: camera at origin looking down +z
        path = tmp_path / "cams.txt"
        path.write_text("1 0 0 0 1 0 0 0 1  0 0 0  50 50 32 32 64 64\n")
        (cam,) = formats.load_camera_set(path)
        np.testing.assert_array_equal(cam.rotation, np.eye(3))
        np.testing.assert_array_equal(cam.camera_center(), np.zeros(3))

    def test_two_camera_fixture_parses(self):
        cams = formats.load_camera_set(FIXTURES / "cameras_two.txt")
        assert len(cams) == 2
        assert cams[1].translation[0] == pytest.approx(-0.5)

    def test_small_drift_projected_to_rotation(self, tmp_path, rng):
        # oracle: polar decomposition (SVD) is the nearest rotation
        base = np.eye(3)
        noise = rng.normal(size=(3, 3))
        noise *= 1e-4 / np.linalg.norm(base.T @ noise + noise.T @ base)
        drifted = base + noise
        nums = [*drifted.ravel(), 0, 0, 0, 50, 50, 32, 32, 64, 64]
        path = tmp_path / "drift.txt"
        path.write_text(" ".join(f"{v:.17g}" for v in nums) + "\n")
        (cam,) = formats.load_camera_set(path)
        eye_err = np.abs(cam.rotation.T @ cam.rotation - np.eye(3)).max()
        assert eye_err < 1e-9
        u, _, vt = np.linalg.svd(drifted)
        expected = u @ np.diag([1, 1, np.sign(np.linalg.det(u @ vt))]) @ vt
        np.testing.assert_allclose(cam.rotation, expected, atol=1e-12)

    def test_large_drift_rejected(self, tmp_path):
        bad = np.eye(3) + 0.01
        nums = [*bad.ravel(), 0, 0, 0, 50, 50, 32, 32, 64, 64]
        path = tmp_path / "bad.txt"
        path.write_text(" ".join(map(str, nums)) + "\n")
        with pytest.raises(DataError, match="drift"):
            formats.load_camera_set(path)

    def test_reflection_rejected(self, tmp_path):
        mirror = np.diag([1.0, 1.0, -1.0])
        nums = [*mirror.ravel(), 0, 0, 0, 50, 50, 32, 32, 64, 64]
        path = tmp_path / "mirror.txt"
        path.write_text(" ".join(map(str, nums)) + "\n")
        with pytest.raises(DataError, match="determinant"):
            formats.load_camera_set(path)

    def test_round_trip(self, tmp_path):
        cams = formats.load_camera_set(FIXTURES / "cameras_two.txt")
        path = tmp_path / "out.txt"
        formats.save_camera_set(cams, path)
        cams2 = formats.load_camera_set(path)
        for a, b in zip(cams, cams2):
            np.testing.assert_allclose(b.rotation, a.rotation, atol=1e-15)
            np.testing.assert_allclose(b.translation, a.translation, atol=1e-15)
            assert (b.fx, b.fy, b.cx, b.cy, b.width, b.height) == (a.fx, a.fy, a.cx, a.cy, a.width, a.height)


class TestTokenContainer:
    def test_single_zero_token(self, tmp_path):
        grid = TokenGrid(np.zeros((1, 1, 768), np.float32))
        path = tmp_path / "t.bin"
        formats.save_token_grid(grid, path)
        loaded = formats.load_token_grid(path)
        assert loaded.tokens.shape == (1, 1, 768)

    def test_448_image_patch_lattice(self, tmp_path, rng):
        # a 448x448 image at 14 px patches carries 32*32 = 1024 tokens
        grid = TokenGrid.zeros_for_image(448, 448)
        assert grid.rows == 32 and grid.cols == 32
        assert grid.rows * grid.cols == 1024
        tokens = rng.normal(size=(32, 32, 768)).astype(np.float32)
        path = tmp_path / "t.bin"
        formats.save_token_grid(TokenGrid(tokens), path)
        loaded = formats.load_token_grid(path)
        np.testing.assert_array_equal(loaded.tokens, tokens)
        assert loaded.image_height == 448 and loaded.image_width == 448

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "t.bin"
        formats.save_token_grid(TokenGrid(np.ones((2, 2, 8), np.float32)), path)
        path.write_bytes(path.read_bytes()[:-5])
        with pytest.raises(FormatError, match="size mismatch"):
            formats.load_token_grid(path)

    def test_trailing_bytes_rejected(self, tmp_path):
        path = tmp_path / "t.bin"
        formats.save_token_grid(TokenGrid(np.ones((2, 2, 8), np.float32)), path)
        path.write_bytes(path.read_bytes() + b"xx")
        with pytest.raises(FormatError, match="size mismatch"):
            formats.load_token_grid(path)

    def test_nan_reports_token_cell(self, tmp_path):
        tokens = np.zeros((2, 3, 4), np.float32)
        tokens[1, 2, 0] = np.nan
        path = tmp_path / "t.bin"
        # bypass TokenGrid validation by writing the container manually
        import struct
        with open(path, "wb") as fh:
            fh.write(formats.TOKEN_MAGIC)
            fh.write(struct.pack("<III", 2, 3, 4))
            fh.write(tokens.tobytes())
        with pytest.raises(DataError, match=r"\(1, 2\)"):
            formats.load_token_grid(path)

    def test_non_divisible_image_rejected(self):
        with pytest.raises(ValueError, match="not divisible"):
            TokenGrid.zeros_for_image(100, 448)


class TestArrayBundle:
    def test_round_trip(self, tmp_path, rng):
        arrays = {
            "a": rng.normal(size=(3, 4)).astype(np.float32),
            "deep.name": rng.normal(size=(2, 2, 2)).astype(np.float32),
            "scalar_vec": rng.normal(size=7).astype(np.float32),
        }
        path = tmp_path / "w.bin"
        formats.save_array_bundle(arrays, path)
        loaded = formats.load_array_bundle(path)
        assert list(loaded) == list(arrays)
        for k in arrays:
            np.testing.assert_array_equal(loaded[k], arrays[k])

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "w.bin"
        path.write_bytes(b"NOTMAGIC" + b"\0" * 16)
        with pytest.raises(FormatError, match="magic"):
            formats.load_array_bundle(path)


class TestImagePng:
    def test_image_round_trip_within_quantization(self, tmp_path, rng):
        img = rng.random((21, 17, 3)).astype(np.float32)
        path = tmp_path / "i.png"
        formats.save_image_png(img, path)
        loaded = formats.load_image_png(path)
        assert np.abs(loaded - img).max() <= 0.5 / 255.0 + 1e-7

    def test_depth_round_trip_millimeter_quantization(self, tmp_path, rng):
        depth = rng.uniform(0.0, 10.0, (15, 19)).astype(np.float32)
        path = tmp_path / "d.png"
        formats.save_depth_png(depth, path)
        loaded = formats.load_depth_png(path)
        assert np.abs(loaded - depth).max() <= 0.5 / 1000.0 + 1e-9

    def test_depth_saturates_at_limit(self, tmp_path):
        depth = np.array([[100.0, 0.0]], np.float32)
        path = tmp_path / "d.png"
        formats.save_depth_png(depth, path)
        loaded = formats.load_depth_png(path)
        assert loaded[0, 0] == pytest.approx(65.535)
        assert loaded[0, 1] == 0.0

    def test_mask_round_trip_exact(self, tmp_path, rng):
        mask = rng.random((33, 47)) < 0.4
        path = tmp_path / "m.png"
        formats.save_mask_png(mask, path)
        np.testing.assert_array_equal(formats.load_mask_png(path), mask)

    def test_out_of_range_image_rejected(self, tmp_path):
        with pytest.raises(DataError):
            formats.save_image_png(np.full((4, 4, 3), 1.5, np.float32), tmp_path / "x.png")
