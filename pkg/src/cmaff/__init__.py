"""Cross-modality attentive fusion for aligned RGB/thermal feature maps,
with the detection-evaluation, annotation-conversion, and paired-augmentation
tooling around it."""

from .tensor import (
    AffineLayer,
    ChannelVector,
    FeatureMap,
    affine_apply,
    gap,
    gmp,
    grad_check,
    relu,
    sigmoid,
    softmax_pair,
)
from .fusion import (
    Arrangement,
    CmaffParams,
    ConcatReduceParams,
    CsmParams,
    DemParams,
    check_gradients,
    csm_attention,
    csm_forward,
    decompose,
    dem_attention,
    dem_forward,
    fuse,
    fuse_backward,
    fuse_with_masks,
    init_params,
    load_params,
    param_count,
    save_params,
)
from .metrics import (
    Box,
    DetectionBox,
    GroundTruthBox,
    PrCurve,
    average_precision,
    evaluate,
    iou,
    map_sweep,
    match,
    mean_ap,
    pr_curve,
)
from .annotations import RotatedBox, convert_obb_to_hbb, dataset_stats, write_label
from .augment import ImagePair, MosaicConfig, mosaic_pair, remap_box
from .ften import read_ften, write_ften

__version__ = "0.1.0"
