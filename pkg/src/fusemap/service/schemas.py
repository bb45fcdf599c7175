"""Pydantic request/response models for the mapping service."""

from typing import List, Optional

from pydantic import BaseModel, Field


class HealthResponse(BaseModel):
    status: str
    service: str
    version: str


class SynthRequest(BaseModel):
    out_dir: str
    scene: Optional[dict] = None
    voxel_size: float = Field(default=0.04, gt=0)


class SynthResponse(BaseModel):
    manifest: str
    frames: int
    features_dir: str
    ground_truth: str


class ReconstructRequest(BaseModel):
    manifest: str
    out_dir: Optional[str] = None
    voxel_size: float = Field(default=0.02, gt=0)
    semantic_every: int = Field(default=3, ge=0)
    match_threshold: float = Field(default=0.10, ge=0.0, le=1.0)
    workers: str = Field(default="single", pattern="^(single|two-lane)$")
    features_dir: Optional[str] = None
    depth_max: float = Field(default=5.0, gt=0)


class ReportModel(BaseModel):
    frames: int
    semantic_frames: int
    geometric_fps: float
    semantic_fps: float
    geometry_seconds: float
    semantic_seconds: float
    dictionary_size: int
    block_count: int
    peak_memory_bytes: int


class ReconstructResponse(BaseModel):
    session_id: str
    report: ReportModel
    out_dir: Optional[str] = None


class LoadStateRequest(BaseModel):
    state_dir: str


class SessionInfo(BaseModel):
    session_id: str
    blocks: int
    dictionary_size: int
    frames: int


class SessionList(BaseModel):
    sessions: List[SessionInfo]


class QueryRequest(BaseModel):
    embeddings: Optional[List[List[float]]] = None
    queries_file: Optional[str] = None
    top_k: int = Field(default=1, ge=1)
    mode: str = Field(default="voxels", pattern="^(voxels|mesh)$")
    out_dir: Optional[str] = None
    min_score: Optional[float] = None


class QueryRanked(BaseModel):
    query: int
    ranked: List[List[float]]
    geometry: Optional[str] = None


class QueryResponse(BaseModel):
    results: List[QueryRanked]
    dictionary_size: int


class EvalRequest(BaseModel):
    gt: str


class EvalResponse(BaseModel):
    mAcc: float
    f_mIoU: float
    coverage: float
    evaluated_voxels: int
    classes: int


class BenchRequest(BaseModel):
    manifest: str
    voxel_size: float = Field(default=0.05, gt=0)
    semantic_every: int = Field(default=3, ge=0)
    features_dir: Optional[str] = None


class BenchResponse(BaseModel):
    frames: int
    geometry_fps: float
    geometry_ms_per_frame: float
    semantic_fps: float
    semantic_ms_per_frame: float
    semantic_frames: int


class ErrorResponse(BaseModel):
    detail: str
