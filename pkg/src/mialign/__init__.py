"""FFT-based mutual information over all integer displacements, and global
rigid multimodal image alignment built on top of it."""

from .align import (
    AlignmentConfig,
    AlignmentResult,
    align_and_refine,
    align_label_images,
    corner_error,
    gated_argmax,
    global_align,
    make_angle_grid,
    refine,
    warp_nn,
    zero_pad,
)
from .cmif import (
    CMIFMap,
    CmifSearch,
    EntropyMaps,
    cmif_map,
    count_maps,
    entropy_maps,
    joint_count_maps,
    marginal_count_maps,
    overlap_map,
    read_cmif_map,
    swmi_map,
    write_cmif_csv,
    write_cmif_map,
)
from .core import (
    DegenerateInputError,
    DisplacementDomain,
    LabelImage,
    RigidTransform,
    compose,
    identity,
    image_center,
    make_circular_mask,
    rotation,
    translation,
)
from .oracle import DirectResult, direct_cmif_map, scalar_mi
from .quantize import (
    KMeansModel,
    fit_kmeans,
    level_set,
    load_model,
    quantize,
    save_model,
    weighted_level_set,
)
from .xcorr import (
    NumericalHealthError,
    SpectrumCache,
    correlate_cached,
    cross_correlate,
    round_counts,
)

__version__ = "0.1.0"

__all__ = [
    "AlignmentConfig",
    "AlignmentResult",
    "CMIFMap",
    "CmifSearch",
    "DegenerateInputError",
    "DirectResult",
    "DisplacementDomain",
    "EntropyMaps",
    "KMeansModel",
    "LabelImage",
    "NumericalHealthError",
    "RigidTransform",
    "SpectrumCache",
    "align_and_refine",
    "align_label_images",
    "cmif_map",
    "compose",
    "corner_error",
    "correlate_cached",
    "count_maps",
    "cross_correlate",
    "direct_cmif_map",
    "entropy_maps",
    "fit_kmeans",
    "gated_argmax",
    "global_align",
    "identity",
    "image_center",
    "joint_count_maps",
    "level_set",
    "load_model",
    "make_angle_grid",
    "make_circular_mask",
    "marginal_count_maps",
    "overlap_map",
    "quantize",
    "read_cmif_map",
    "refine",
    "rotation",
    "round_counts",
    "save_model",
    "scalar_mi",
    "swmi_map",
    "translation",
    "warp_nn",
    "weighted_level_set",
    "write_cmif_csv",
    "write_cmif_map",
    "zero_pad",
]
