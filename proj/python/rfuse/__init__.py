"""Python bindings for the rfuse reconstruction library."""

from ._rfuse import (  # noqa: F401
    ChunkDatabase,
    ChunkLayout,
    MissingArtifact,
    attention_scores,
    attention_weights,
    blend,
    chunk_iou,
    coarsen,
    evaluate_meshes,
    generate_scene,
    iou_temperature,
    load_config,
    marching_cubes,
    mesh_to_tdf,
    run_stage,
    unfold,
)
