"""Command-line front end.

Every command runs in-process by default; pass ``--server http://host:port``
to forward the same operation to a running service instead.  Exit codes:
0 success, 1 usage error, 2 data error.
"""

from __future__ import annotations

import json
import subprocess
import sys
import tempfile
from pathlib import Path
from typing import Optional

import click

from .ingest import LoadError, read_query_vectors
from .ops import (
    DataError,
    op_bench,
    op_eval_state_dir,
    op_query_state_dir,
    op_reconstruct,
    op_synth,
)

class RemoteError(Exception):
    pass


class Client:
    """Minimal HTTP client for the service endpoints."""

    def __init__(self, base_url: str):
        import httpx

        self.http = httpx.Client(base_url=base_url, timeout=600.0)

    def call(self, method: str, path: str, payload: Optional[dict] = None) -> dict:
        import httpx

        try:
            resp = self.http.request(method, path, json=payload)
        except httpx.HTTPError as exc:
            raise RemoteError(f"cannot reach server: {exc}") from exc
        if resp.status_code >= 400:
            try:
                detail = resp.json().get("detail", resp.text)
            except Exception:
                detail = resp.text
            raise RemoteError(f"server error {resp.status_code}: {detail}")
        return resp.json()


def emit(data: dict):
    click.echo(json.dumps(data, indent=2, sort_keys=True))


server_option = click.option(
    "--server", default=None, help="Forward to a running service at this base URL."
)


@click.group()
def cli():
    """Semantic TSDF mapping engine."""


@cli.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8765, show_default=True, type=int)
def serve(host, port):
    """Run the HTTP service."""
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(), host=host, port=port, log_level="info")


@cli.command()
@click.option("--manifest", required=True, type=click.Path())
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--voxel-size", default=0.02, show_default=True, type=float)
@click.option("--semantic-every", default=3, show_default=True, type=int)
@click.option("--features", "features_dir", default=None, type=click.Path())
@click.option("--match-threshold", default=0.10, show_default=True, type=float)
@click.option("--workers", default="single", type=click.Choice(["single", "two-lane"]))
@click.option("--depth-max", default=5.0, show_default=True, type=float)
@server_option
def reconstruct(manifest, out_dir, voxel_size, semantic_every, features_dir,
                match_threshold, workers, depth_max, server):
    """Fuse an RGB-D sequence into a semantic volume snapshot."""
    if server:
        out = Client(server).call(
            "POST",
            "/reconstruct",
            {
                "manifest": str(Path(manifest).resolve()),
                "out_dir": str(Path(out_dir).resolve()),
                "voxel_size": voxel_size,
                "semantic_every": semantic_every,
                "features_dir": features_dir and str(Path(features_dir).resolve()),
                "match_threshold": match_threshold,
                "workers": workers,
                "depth_max": depth_max,
            },
        )
        emit(out)
        return
    _, _, report = op_reconstruct(
        manifest=manifest,
        out_dir=out_dir,
        voxel_size=voxel_size,
        semantic_every=semantic_every,
        match_threshold=match_threshold,
        workers=workers,
        features_dir=features_dir,
        depth_max=depth_max,
    )
    emit({"out_dir": out_dir, "report": report.to_dict()})


def _queries_from_text(text: str, bridge_cmd: Optional[str]):
    if not bridge_cmd:
        raise click.UsageError(
            "--text needs --bridge-cmd (a feature bridge providing 'encode')"
        )
    with tempfile.TemporaryDirectory() as td:
        out = Path(td) / "query.ofqv"
        cmd = [*bridge_cmd.split(), "encode", "--text", text, "--out", str(out)]
        proc = subprocess.run(cmd, capture_output=True, text=True)
        if proc.returncode != 0:
            raise DataError(f"bridge encoder failed: {proc.stderr.strip()}")
        return read_query_vectors(out)


@cli.command()
@click.option("--state", "state_dir", required=True, type=click.Path())
@click.option("--queries", "queries_file", default=None, type=click.Path())
@click.option("--text", default=None, help="Encode a text query via the bridge.")
@click.option("--bridge-cmd", default=None, envvar="FUSEMAP_BRIDGE",
              help="Feature bridge command for --text (env FUSEMAP_BRIDGE).")
@click.option("--top-k", default=1, show_default=True, type=int)
@click.option("--mode", default="voxels", type=click.Choice(["voxels", "mesh"]))
@click.option("--out", "out_dir", default=None, type=click.Path())
@click.option("--min-score", default=None, type=float)
@server_option
def query(state_dir, queries_file, text, bridge_cmd, top_k, mode, out_dir, min_score, server):
    """Rank regions against query vectors and export their geometry."""
    if not queries_file and not text:
        raise click.UsageError("provide --queries or --text")
    if server:
        client = Client(server)
        loaded = client.call("POST", "/sessions/load", {"state_dir": str(Path(state_dir).resolve())})
        payload = {
            "top_k": top_k,
            "mode": mode,
            "out_dir": out_dir and str(Path(out_dir).resolve()),
            "min_score": min_score,
        }
        if text:
            vectors = _queries_from_text(text, bridge_cmd)
            payload["embeddings"] = [v.values.tolist() for v in vectors]
        else:
            payload["queries_file"] = str(Path(queries_file).resolve())
        out = client.call("POST", f"/sessions/{loaded['session_id']}/query", payload)
        emit(out)
        return
    if text:
        queries = _queries_from_text(text, bridge_cmd)
    else:
        try:
            queries = read_query_vectors(queries_file)
        except (LoadError, OSError) as exc:
            raise DataError(str(exc)) from exc
    emit(
        op_query_state_dir(
            state_dir, queries, top_k=top_k, mode=mode, out_dir=out_dir, min_score=min_score
        )
    )


@cli.command("eval")
@click.option("--state", "state_dir", required=True, type=click.Path())
@click.option("--gt", "gt_path", required=True, type=click.Path())
@server_option
def eval_cmd(state_dir, gt_path, server):
    """Open-set segmentation metrics against voxel ground truth."""
    if server:
        client = Client(server)
        loaded = client.call("POST", "/sessions/load", {"state_dir": str(Path(state_dir).resolve())})
        emit(client.call(
            "POST", f"/sessions/{loaded['session_id']}/eval",
            {"gt": str(Path(gt_path).resolve())},
        ))
        return
    emit(op_eval_state_dir(state_dir, gt_path))


@cli.command()
@click.option("--manifest", required=True, type=click.Path())
@click.option("--voxel-size", default=0.05, show_default=True, type=float)
@click.option("--semantic-every", default=3, show_default=True, type=int)
@click.option("--features", "features_dir", default=None, type=click.Path())
@server_option
def bench(manifest, voxel_size, semantic_every, features_dir, server):
    """Report geometry-lane and semantic-lane throughput separately."""
    if server:
        emit(Client(server).call(
            "POST", "/bench",
            {
                "manifest": str(Path(manifest).resolve()),
                "voxel_size": voxel_size,
                "semantic_every": semantic_every,
                "features_dir": features_dir and str(Path(features_dir).resolve()),
            },
        ))
        return
    emit(op_bench(manifest, voxel_size=voxel_size, semantic_every=semantic_every,
                  features_dir=features_dir))


@cli.command()
@click.option("--scene", "scene_path", default=None, type=click.Path(),
              help="Scene spec JSON; omit for the built-in default scene.")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--voxel-size", default=0.04, show_default=True, type=float)
@server_option
def synth(scene_path, out_dir, voxel_size, server):
    """Generate a synthetic sequence with features and ground truth."""
    spec = None
    if scene_path:
        try:
            spec = json.loads(Path(scene_path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read scene spec: {exc}") from exc
    if server:
        emit(Client(server).call(
            "POST", "/synth",
            {"out_dir": str(Path(out_dir).resolve()), "scene": spec, "voxel_size": voxel_size},
        ))
        return
    emit(op_synth(out_dir, spec, voxel_size))


def main(argv=None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.UsageError as exc:
        exc.show()
        return 1
    except click.ClickException as exc:
        exc.show()
        return 1
    except click.exceptions.Abort:
        return 1
    except (DataError, LoadError) as exc:
        click.echo(f"error: {exc}", err=True)
        return 2
    except RemoteError as exc:
        click.echo(f"error: {exc}", err=True)
        return 2


if __name__ == "__main__":
    sys.exit(main())
