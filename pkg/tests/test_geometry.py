"""Camera projection and voxel-grid geometry."""

import numpy as np
import pytest

from gaussianssc.geometry import (BehindCamera, CameraIntrinsics, CameraPose,
                                  OutsideROI, SemanticVolume, VoxelGridSpec,
                                  in_image, project, voxel_center, voxelize)
from gaussianssc.tensor import ConfigError


def test_voxel_center_half_cell_offset():
    spec = VoxelGridSpec(origin=(0, 0, 0), dims=(4, 4, 4), resolution=0.2)
    assert np.allclose(voxel_center(spec, (0, 0, 0)), (0.1, 0.1, 0.1))


def test_voxel_center_full_scale_grid():
    spec = VoxelGridSpec.paper_default()
    assert np.allclose(voxel_center(spec, (255, 255, 31)), (51.1, 51.1, 6.3))


def test_voxel_center_shifted_origin():
    spec = VoxelGridSpec(origin=(-1, -1, 0), dims=(4, 4, 4), resolution=1.0)
    assert np.allclose(voxel_center(spec, (1, 1, 0)), (0.5, 0.5, 0.5))


def test_voxel_center_out_of_range():
    spec = VoxelGridSpec(origin=(0, 0, 0), dims=(4, 4, 4), resolution=0.2)
    with pytest.raises(IndexError):
        voxel_center(spec, (4, 0, 0))


def _intr(fx=100.0, fy=100.0, cx=50.0, cy=40.0, w=640, h=480):
    return CameraIntrinsics(fx=fx, fy=fy, cx=cx, cy=cy, width=w, height=h)


def test_project_optical_axis():
    u, v, depth = project((0, 0, 1), _intr(), CameraPose.identity())
    assert np.allclose((u, v), (50.0, 40.0)) and depth == 1.0


def test_project_direct_formula():
    u, v, depth = project((1, 2, 5), _intr(), CameraPose.identity())
    assert np.allclose((u, v), (70.0, 80.0)) and depth == 5.0


def test_project_behind_camera():
    res = project((0, 0, -1), _intr(), CameraPose.identity())
    assert res is BehindCamera


def test_in_image_bounds():
    intr = _intr(w=1226, h=370)
    assert in_image((0, 0), intr)
    assert not in_image((1226, 0), intr)
    assert not in_image((-0.5, 10), intr)


def test_voxelize_center_and_faces():
    spec = VoxelGridSpec(origin=(0, 0, 0), dims=(4, 4, 4), resolution=0.2)
    assert tuple(voxelize(spec, voxel_center(spec, (2, 1, 3)))) == (2, 1, 3)
    assert voxelize(spec, (0.8, 0.1, 0.1)) is OutsideROI
    assert tuple(voxelize(spec, (0.39, 0.0, 0.0))) == (1, 0, 0)


def test_pose_rejects_non_orthonormal():
    with pytest.raises(ConfigError):
        CameraPose(rotation=np.eye(3) * 2.0, translation=np.zeros(3))


def test_pose_rejects_reflection():
    r = np.diag([1.0, 1.0, -1.0])
    with pytest.raises(ConfigError):
        CameraPose(rotation=r, translation=np.zeros(3))


def test_semantic_volume_masks():
    labels = np.array([[[0, 1], [-1, 2]]])
    vol = SemanticVolume(labels, num_classes=3)
    assert np.array_equal(vol.occupancy, [[[False, True], [False, True]]])
    assert np.array_equal(vol.valid, [[[True, True], [False, True]]])
