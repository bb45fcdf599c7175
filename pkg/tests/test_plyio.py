import numpy as np
import pytest

from fusemap.mesh import TriangleMesh
from fusemap.plyio import NO_REGION, write_mesh_ply, write_point_cloud_ply


def parse_ply_header(data: bytes):
    end = data.index(b"end_header\n") + len(b"end_header\n")
    header = data[:end].decode("ascii").splitlines()
    return header, data[end:]


class TestMeshPly:
    def test_header_and_sizes(self, tmp_path):
        mesh = TriangleMesh(
            vertices=np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]]),
            colors=np.array([[1.0, 0, 0], [0, 1, 0], [0, 0, 1]], np.float32),
            triangles=np.array([[0, 1, 2]]),
        )
        path = tmp_path / "m.ply"
        write_mesh_ply(path, mesh)
        header, body = parse_ply_header(path.read_bytes())
        assert header[0] == "ply"
        assert header[1] == "format binary_little_endian 1.0"
        assert "element vertex 3" in header
        assert "element face 1" in header
        # 3 verts * (12 + 3) bytes + 1 face * (1 + 12) bytes
        assert len(body) == 3 * 15 + 13
        vert = np.frombuffer(
            body[:45],
            dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("r", "u1"), ("g", "u1"), ("b", "u1")],
        )
        assert vert["x"].tolist() == [0.0, 1.0, 0.0]
        assert vert["r"].tolist() == [255, 0, 0]

    def test_empty_mesh(self, tmp_path):
        mesh = TriangleMesh(np.empty((0, 3)), np.empty((0, 3), np.float32), np.empty((0, 3), int))
        path = tmp_path / "empty.ply"
        write_mesh_ply(path, mesh)
        header, body = parse_ply_header(path.read_bytes())
        assert "element vertex 0" in header and body == b""


class TestPointCloudPly:
    def test_region_key_and_confidence(self, tmp_path):
        pts = np.array([[0.0, 0, 0], [0.1, 0.2, 0.3]])
        cols = np.array([[1.0, 1, 1], [0, 0, 0]], np.float32)
        keys = np.array([5, -1])
        conf = np.array([0.75, 0.0], np.float32)
        path = tmp_path / "c.ply"
        write_point_cloud_ply(path, pts, cols, keys, conf)
        header, body = parse_ply_header(path.read_bytes())
        assert "property uint region_key" in header
        assert "property float confidence" in header
        rec = np.frombuffer(
            body,
            dtype=[
                ("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                ("r", "u1"), ("g", "u1"), ("b", "u1"),
                ("key", "<u4"), ("conf", "<f4"),
            ],
        )
        assert rec["key"].tolist() == [5, NO_REGION]
        assert rec["conf"][0] == pytest.approx(0.75)
