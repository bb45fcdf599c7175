import numpy as np
import pytest
from fastapi.testclient import TestClient

from fusemap.ingest import write_query_vectors
from fusemap.service import create_app
from fusemap.synthetic import default_scene_spec


@pytest.fixture(scope="module")
def small_spec():
    spec = default_scene_spec()
    spec["trajectory"]["frames"] = 6
    spec["camera"].update(width=96, height=72, fx=70.0, fy=70.0, cx=48.13, cy=36.21)
    return spec


@pytest.fixture(scope="module")
def client():
    return TestClient(create_app())


@pytest.fixture(scope="module")
def dataset(client, small_spec, tmp_path_factory):
    out = tmp_path_factory.mktemp("synthdata")
    resp = client.post(
        "/synth", json={"out_dir": str(out), "scene": small_spec, "voxel_size": 0.05}
    )
    assert resp.status_code == 200, resp.text
    return resp.json()


@pytest.fixture(scope="module")
def session(client, dataset, tmp_path_factory):
    state = tmp_path_factory.mktemp("state")
    resp = client.post(
        "/reconstruct",
        json={
            "manifest": dataset["manifest"],
            "out_dir": str(state),
            "voxel_size": 0.05,
            "semantic_every": 2,
        },
    )
    assert resp.status_code == 200, resp.text
    return resp.json()


class TestServiceBasics:
    def test_health(self, client):
        body = client.get("/health").json()
        assert body["status"] == "ok" and body["service"] == "fusemap"

    def test_synth_outputs(self, dataset):
        assert dataset["frames"] == 6
        assert dataset["manifest"].endswith("manifest.txt")

    def test_reconstruct_report(self, session):
        report = session["report"]
        assert report["frames"] == 6
        assert report["dictionary_size"] >= 3
        assert report["geometric_fps"] > 0

    def test_snapshot_written(self, session):
        from pathlib import Path

        out = Path(session["out_dir"])
        for name in ("volume.bin", "dict.bin", "report.json", "mesh.ply", "cloud.ply"):
            assert (out / name).is_file(), name

    def test_sessions_listing(self, client, session):
        listing = client.get("/sessions").json()["sessions"]
        assert any(s["session_id"] == session["session_id"] for s in listing)

    def test_session_report(self, client, session):
        body = client.get(f"/sessions/{session['session_id']}/report").json()
        assert body["frames"] == 6

    def test_unknown_session(self, client):
        assert client.get("/sessions/snope/report").status_code == 404


class TestServiceQueryEval:
    def test_query_inline_embedding(self, client, session, dataset):
        gt = np.load(dataset["ground_truth"])
        emb = gt["class_embeddings"][1].tolist()
        resp = client.post(
            f"/sessions/{session['session_id']}/query",
            json={"embeddings": [emb], "top_k": 3},
        )
        assert resp.status_code == 200, resp.text
        ranked = resp.json()["results"][0]["ranked"]
        assert len(ranked) >= 1
        assert ranked[0][1] > 0.99  # self-similarity

    def test_query_file_and_geometry_export(self, client, session, dataset, tmp_path):
        gt = np.load(dataset["ground_truth"])
        qfile = tmp_path / "q.ofqv"
        write_query_vectors(qfile, gt["class_embeddings"])
        resp = client.post(
            f"/sessions/{session['session_id']}/query",
            json={"queries_file": str(qfile), "out_dir": str(tmp_path / "geo")},
        )
        assert resp.status_code == 200, resp.text
        results = resp.json()["results"]
        assert len(results) == 3
        from pathlib import Path

        for r in results:
            assert Path(r["geometry"]).is_file()

    def test_query_no_vectors(self, client, session):
        resp = client.post(f"/sessions/{session['session_id']}/query", json={})
        assert resp.status_code == 422

    def test_eval(self, client, session, dataset):
        resp = client.post(
            f"/sessions/{session['session_id']}/eval", json={"gt": dataset["ground_truth"]}
        )
        assert resp.status_code == 200, resp.text
        body = resp.json()
        assert 0 <= body["mAcc"] <= 1 and 0 <= body["f_mIoU"] <= 1
        assert body["evaluated_voxels"] > 0

    def test_eval_missing_gt(self, client, session):
        resp = client.post(
            f"/sessions/{session['session_id']}/eval", json={"gt": "/nonexistent.npz"}
        )
        assert resp.status_code == 422

    def test_load_state_session(self, client, session):
        resp = client.post("/sessions/load", json={"state_dir": session["out_dir"]})
        assert resp.status_code == 200
        sid = resp.json()["session_id"]
        assert sid != session["session_id"]
        report = client.get(f"/sessions/{sid}/report").json()
        assert report["frames"] == 6

    def test_delete_session(self, client, session):
        resp = client.post("/sessions/load", json={"state_dir": session["out_dir"]})
        sid = resp.json()["session_id"]
        assert client.delete(f"/sessions/{sid}").status_code == 200
        assert client.get(f"/sessions/{sid}/report").status_code == 404


class TestServiceBench:
    def test_bench(self, client, dataset):
        resp = client.post(
            "/bench",
            json={"manifest": dataset["manifest"], "voxel_size": 0.05, "semantic_every": 2},
        )
        assert resp.status_code == 200, resp.text
        body = resp.json()
        assert body["geometry_fps"] > 0
        assert body["semantic_fps"] > 0
        assert body["frames"] == 6

    def test_bench_bad_manifest(self, client):
        resp = client.post("/bench", json={"manifest": "/nope/manifest.txt"})
        assert resp.status_code == 422

    def test_reconstruct_bad_manifest(self, client):
        resp = client.post("/reconstruct", json={"manifest": "/nope/manifest.txt"})
        assert resp.status_code == 422
