"""Recompression detection for H.264 video from macroblock-mode instability."""

from .codec import (
    EncodeConfig,
    RecompressionLadder,
    VideoInfo,
    build_ladder,
    dump_mb_debug,
    dump_motion_vectors,
    probe_video,
    recompress,
)
from .extract import (
    FrameGrid,
    MacroblockMode,
    MacroblockType,
    MotionVector,
    classify_symbol,
    merge_mb_and_mv,
    parse_debug_stream,
    parse_grids,
    parse_mv_dump,
    serialize_grids,
)
from .feature import (
    FeatureScaler,
    FeatureVector,
    VideoClass,
    apply_scaler,
    compute_feature_vector,
    compute_vi,
    fit_scaler,
    indicator,
    mbm_equal,
)
from .svm import (
    SvmModel,
    SvmParams,
    grid_search,
    predict,
    rbf_kernel,
    train_binary,
    train_multiclass,
)

__version__ = "0.1.0"
