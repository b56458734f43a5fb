"""patchvote: patch-level Hough voting for 6D object pose estimation in point clouds.

Local surface patches are canonicalized (PCA frames), described, matched or
regressed to local-frame transforms, and cast as full-pose votes that are
clustered in pose space and refined with ICP.
"""

from .geometry import (
    RigidTransform,
    compose,
    invert,
    to_vector,
    from_vector,
    pca_frame,
    farthest_point_sample,
    object_diameter,
    rotation_angle,
    rotation_vector,
    random_transform,
)
from .dataio import (
    CameraIntrinsics,
    RunConfig,
    SceneAnnotation,
    depth_to_cloud,
    load_annotations,
    load_cloud,
    load_config,
    load_pgm,
    load_results,
    save_annotations,
    save_cloud,
    save_pgm,
    save_results,
    synth_scene,
)
from .patches import (
    Patch,
    PatchDatabase,
    PatchRecord,
    ScenePatch,
    StandardizedPatch,
    build_patch_database,
    extract_patch,
    load_database,
    normalize_patch,
    sample_scene_patches,
    save_database,
    standardize_model,
    standardize_patch,
)
from .features import (
    compute_descriptor,
    concat_fuse,
    fuse_features,
    neighbor_weight,
    reference_vector,
    wnff_fuse,
)
from .regressor import (
    MLPRegressor,
    PredictedTransform,
    RegressorBank,
    RegressorConfig,
    TemplateMatcher,
    fuse_record_features,
    record_descriptors,
    train_regressor,
)
from .voting import (
    PoseCluster,
    PoseVote,
    aggregate_votes,
    cast_vote,
    icp_refine,
    pose_distance,
)
from .metrics import (
    DetectionResult,
    EvalReport,
    add_accuracy,
    add_metric,
    adds_metric,
    evaluate_detections,
    f1_score,
)
from .pipeline import EstimationResult, build_predictor, estimate_poses

__version__ = "0.1.0"
