"""FastAPI service wrapping the mapping engine.

Reconstructions become in-memory sessions that can be queried and evaluated
without reloading; every reconstruction can also persist a snapshot
directory that ``/sessions/load`` (or the CLI) can pick up later.
"""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass
from typing import Dict

from fastapi import FastAPI, HTTPException

from .. import __version__
from ..fusion import EmbeddingDictionary
from ..ingest import LoadError, read_query_vectors
from ..ops import DataError, op_bench, op_eval, op_query, op_reconstruct, op_synth
from ..pipeline import RunReport
from ..query import QueryVector
from ..snapshot import load_state
from ..tsdf import SparseVolume
from .schemas import (
    BenchRequest,
    BenchResponse,
    EvalRequest,
    EvalResponse,
    HealthResponse,
    LoadStateRequest,
    QueryRequest,
    QueryResponse,
    ReconstructRequest,
    ReconstructResponse,
    ReportModel,
    SessionInfo,
    SessionList,
    SynthRequest,
    SynthResponse,
)


@dataclass
class Session:
    volume: SparseVolume
    dictionary: EmbeddingDictionary
    report: RunReport


class SessionStore:
    def __init__(self):
        self._lock = threading.Lock()
        self._sessions: Dict[str, Session] = {}
        self._counter = itertools.count(1)

    def put(self, session: Session) -> str:
        with self._lock:
            sid = f"s{next(self._counter):04d}"
            self._sessions[sid] = session
            return sid

    def get(self, sid: str) -> Session:
        with self._lock:
            if sid not in self._sessions:
                raise HTTPException(status_code=404, detail=f"unknown session {sid}")
            return self._sessions[sid]

    def drop(self, sid: str):
        with self._lock:
            if sid not in self._sessions:
                raise HTTPException(status_code=404, detail=f"unknown session {sid}")
            del self._sessions[sid]

    def items(self):
        with self._lock:
            return list(self._sessions.items())


def _report_model(report: RunReport) -> ReportModel:
    return ReportModel(**{k: getattr(report, k) for k in ReportModel.model_fields})


def create_app() -> FastAPI:
    app = FastAPI(title="fusemap", version=__version__)
    store = SessionStore()
    app.state.sessions = store

    @app.get("/health", response_model=HealthResponse)
    def health():
        return HealthResponse(status="ok", service="fusemap", version=__version__)

    @app.post("/synth", response_model=SynthResponse)
    def synth(req: SynthRequest):
        try:
            return SynthResponse(**op_synth(req.out_dir, req.scene, req.voxel_size))
        except DataError as exc:
            raise HTTPException(status_code=422, detail=str(exc))

    @app.post("/reconstruct", response_model=ReconstructResponse)
    def reconstruct(req: ReconstructRequest):
        try:
            volume, dictionary, report = op_reconstruct(
                manifest=req.manifest,
                out_dir=req.out_dir,
                voxel_size=req.voxel_size,
                semantic_every=req.semantic_every,
                match_threshold=req.match_threshold,
                workers=req.workers,
                features_dir=req.features_dir,
                depth_max=req.depth_max,
            )
        except DataError as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        sid = store.put(Session(volume, dictionary, report))
        return ReconstructResponse(
            session_id=sid, report=_report_model(report), out_dir=req.out_dir
        )

    @app.post("/sessions/load", response_model=ReconstructResponse)
    def load_session(req: LoadStateRequest):
        try:
            volume, dictionary, report = load_state(req.state_dir)
        except (FileNotFoundError, ValueError) as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        report = report or RunReport(frames=volume.frame_count)
        sid = store.put(Session(volume, dictionary, report))
        return ReconstructResponse(session_id=sid, report=_report_model(report))

    @app.get("/sessions", response_model=SessionList)
    def sessions():
        return SessionList(
            sessions=[
                SessionInfo(
                    session_id=sid,
                    blocks=len(s.volume.blocks),
                    dictionary_size=len(s.dictionary),
                    frames=s.report.frames,
                )
                for sid, s in store.items()
            ]
        )

    @app.get("/sessions/{sid}/report", response_model=ReportModel)
    def session_report(sid: str):
        return _report_model(store.get(sid).report)

    @app.delete("/sessions/{sid}")
    def delete_session(sid: str):
        store.drop(sid)
        return {"deleted": sid}

    @app.post("/sessions/{sid}/query", response_model=QueryResponse)
    def query(sid: str, req: QueryRequest):
        session = store.get(sid)
        queries = []
        try:
            if req.queries_file:
                queries.extend(read_query_vectors(req.queries_file))
            if req.embeddings:
                queries.extend(QueryVector(v) for v in req.embeddings)
        except (LoadError, ValueError, OSError) as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        if not queries:
            raise HTTPException(status_code=422, detail="no queries supplied")
        try:
            out = op_query(
                (session.volume, session.dictionary),
                queries,
                top_k=req.top_k,
                mode=req.mode,
                out_dir=req.out_dir,
                min_score=req.min_score,
            )
        except DataError as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        return QueryResponse(**out)

    @app.post("/sessions/{sid}/eval", response_model=EvalResponse)
    def evaluate(sid: str, req: EvalRequest):
        session = store.get(sid)
        try:
            return EvalResponse(**op_eval((session.volume, session.dictionary), req.gt))
        except DataError as exc:
            raise HTTPException(status_code=422, detail=str(exc))

    @app.post("/bench", response_model=BenchResponse)
    def bench(req: BenchRequest):
        try:
            return BenchResponse(
                **op_bench(
                    req.manifest,
                    voxel_size=req.voxel_size,
                    semantic_every=req.semantic_every,
                    features_dir=req.features_dir,
                )
            )
        except DataError as exc:
            raise HTTPException(status_code=422, detail=str(exc))

    return app


app = create_app()
