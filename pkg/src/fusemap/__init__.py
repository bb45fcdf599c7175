"""fusemap: real-time semantic TSDF mapping with open-vocabulary queries."""

from .geometry import (
    CameraIntrinsics,
    DepthImage,
    Pose,
    identity_pose,
    project_point,
    project_points,
    scale_intrinsics,
    unproject_depth,
)
from .tsdf import (
    SparseVolume,
    VolumeConfig,
    Voxel,
    VoxelBlock,
    allocate_active_blocks,
    extract_mesh,
    extract_point_cloud,
    integrate_geometry,
    truncate,
)
from .mesh import TriangleMesh, marching_cubes
from .fusion import (
    EmbeddingDictionary,
    MatchResult,
    RegionFeatureSet,
    RenderedRegions,
    downsample_depth,
    match_regions,
    render_confidence_maps,
    soft_iou,
    update_semantics,
)
from .query import QueryVector, QueryResult, extract_region, rank_regions, segment_all
from .ingest import (
    FrameObservation,
    SequenceManifest,
    load_sequence,
    read_query_vectors,
    read_region_features,
    synchronize,
    write_query_vectors,
    write_region_features,
)
from .pipeline import Pipeline, PipelineConfig, RunReport, evaluate_segmentation, run_reconstruction
from .snapshot import load_state, save_state

__version__ = "0.1.0"
