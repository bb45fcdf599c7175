import json
import socket
import threading
import time
from pathlib import Path

import numpy as np
import pytest

from fusemap.cli import main
from fusemap.ingest import write_query_vectors
from fusemap.synthetic import default_scene_spec


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cliwork")


@pytest.fixture(scope="module")
def scene_file(workdir):
    spec = default_scene_spec()
    spec["trajectory"]["frames"] = 6
    spec["camera"].update(width=96, height=72, fx=70.0, fy=70.0, cx=48.13, cy=36.21)
    path = workdir / "scene.json"
    path.write_text(json.dumps(spec))
    return path


@pytest.fixture(scope="module")
def dataset(workdir, scene_file):
    out = workdir / "data"
    rc = main(["synth", "--scene", str(scene_file), "--out", str(out), "--voxel-size", "0.05"])
    assert rc == 0
    return out


@pytest.fixture(scope="module")
def state(workdir, dataset):
    out = workdir / "state"
    rc = main(
        [
            "reconstruct",
            "--manifest",
            str(dataset / "manifest.txt"),
            "--out",
            str(out),
            "--voxel-size",
            "0.05",
            "--semantic-every",
            "2",
        ]
    )
    assert rc == 0
    return out


class TestCliLocal:
    def test_synth_produces_dataset(self, dataset):
        assert (dataset / "manifest.txt").is_file()
        assert (dataset / "gt.npz").is_file()
        assert any(dataset.glob("features/*.ofrf"))

    def test_reconstruct_writes_state(self, state):
        for name in ("volume.bin", "dict.bin", "report.json", "mesh.ply", "cloud.ply"):
            assert (state / name).is_file()
        report = json.loads((state / "report.json").read_text())
        assert report["frames"] == 6

    def test_query_self_embedding_top1(self, state, dataset, workdir, capsys):
        gt = np.load(dataset / "gt.npz")
        qfile = workdir / "queries.ofqv"
        write_query_vectors(qfile, gt["class_embeddings"])
        rc = main(
            [
                "query",
                "--state",
                str(state),
                "--queries",
                str(qfile),
                "--out",
                str(workdir / "regions"),
                "--top-k",
                "2",
            ]
        )
        assert rc == 0
        out = json.loads(capsys.readouterr().out)
        assert len(out["results"]) == 3
        for r in out["results"]:
            assert r["ranked"][0][1] > 0.99
            assert Path(r["geometry"]).is_file()

    def test_eval(self, state, dataset, capsys):
        rc = main(["eval", "--state", str(state), "--gt", str(dataset / "gt.npz")])
        assert rc == 0
        out = json.loads(capsys.readouterr().out)
        assert 0 <= out["mAcc"] <= 1

    def test_bench(self, dataset, capsys):
        rc = main(
            ["bench", "--manifest", str(dataset / "manifest.txt"), "--voxel-size", "0.05",
             "--semantic-every", "2"]
        )
        assert rc == 0
        out = json.loads(capsys.readouterr().out)
        assert out["geometry_fps"] > 0 and out["semantic_fps"] > 0

    def test_query_via_bridge_text(self, state, workdir, monkeypatch, capsys):
        # stand-in bridge: any text becomes a fixed unit vector
        bridge = workdir / "fake_bridge.py"
        bridge.write_text(
            "import sys, struct, numpy as np\n"
            "args = sys.argv[1:]\n"
            "assert args[0] == 'encode'\n"
            "out = args[args.index('--out') + 1]\n"
            "d = 16\n"
            "v = np.zeros(d, dtype='<f4'); v[1] = 1.0\n"
            "open(out, 'wb').write(b'OFQV' + struct.pack('<III', 1, 1, d) + v.tobytes())\n"
        )
        rc = main(
            [
                "query",
                "--state",
                str(state),
                "--text",
                "red ball",
                "--bridge-cmd",
                f"python3 {bridge}",
            ]
        )
        assert rc == 0
        out = json.loads(capsys.readouterr().out)
        assert len(out["results"]) == 1


class TestCliErrors:
    def test_usage_error_missing_option(self):
        assert main(["reconstruct"]) == 1

    def test_query_without_vectors(self, state):
        assert main(["query", "--state", str(state)]) == 1

    def test_text_without_bridge(self, state, monkeypatch):
        monkeypatch.delenv("FUSEMAP_BRIDGE", raising=False)
        assert main(["query", "--state", str(state), "--text", "sofa"]) == 1

    def test_data_error_bad_manifest(self, workdir):
        rc = main(
            ["reconstruct", "--manifest", str(workdir / "missing.txt"), "--out",
             str(workdir / "x")]
        )
        assert rc == 2

    def test_data_error_bad_gt(self, state):
        assert main(["eval", "--state", str(state), "--gt", "/nonexistent.npz"]) == 2


def _free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


@pytest.fixture(scope="module")
def live_server():
    import uvicorn

    from fusemap.service import create_app

    port = _free_port()
    config = uvicorn.Config(create_app(), host="127.0.0.1", port=port, log_level="error")
    server = uvicorn.Server(config)
    thread = threading.Thread(target=server.run, daemon=True)
    thread.start()
    deadline = time.time() + 10
    import httpx

    url = f"http://127.0.0.1:{port}"
    while time.time() < deadline:
        try:
            if httpx.get(url + "/health", timeout=1.0).status_code == 200:
                break
        except httpx.HTTPError:
            time.sleep(0.05)
    else:
        raise RuntimeError("server did not start")
    yield url
    server.should_exit = True
    thread.join(timeout=5)


class TestCliRemote:
    def test_reconstruct_query_eval_roundtrip(self, live_server, dataset, workdir, capsys):
        state = workdir / "remote_state"
        rc = main(
            [
                "reconstruct",
                "--manifest",
                str(dataset / "manifest.txt"),
                "--out",
                str(state),
                "--voxel-size",
                "0.05",
                "--semantic-every",
                "2",
                "--server",
                live_server,
            ]
        )
        assert rc == 0
        out = json.loads(capsys.readouterr().out)
        assert out["report"]["frames"] == 6

        gt = np.load(dataset / "gt.npz")
        qfile = workdir / "remote.ofqv"
        write_query_vectors(qfile, gt["class_embeddings"][:1])
        rc = main(
            ["query", "--state", str(state), "--queries", str(qfile), "--server", live_server]
        )
        assert rc == 0
        out = json.loads(capsys.readouterr().out)
        assert out["results"][0]["ranked"][0][1] > 0.99

        rc = main(
            ["eval", "--state", str(state), "--gt", str(dataset / "gt.npz"),
             "--server", live_server]
        )
        assert rc == 0
        out = json.loads(capsys.readouterr().out)
        assert out["evaluated_voxels"] > 0

    def test_server_unreachable(self, dataset, workdir):
        rc = main(
            [
                "reconstruct",
                "--manifest",
                str(dataset / "manifest.txt"),
                "--out",
                str(workdir / "y"),
                "--server",
                "http://127.0.0.1:1",
            ]
        )
        assert rc == 2
