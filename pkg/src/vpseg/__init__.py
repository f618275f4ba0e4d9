"""Video polyp segmentation: windowed temporal attention over branched
encoder features, trained jointly with a jigsaw contrastive auxiliary task."""

from .attention import (
    AttentionInternals,
    GlobalToLocalFusion,
    NormalizedAttentionBlock,
    NSBlockConfig,
    gather_windows,
    sample_neighborhood,
)
from .backbone import BackboneConfig, ChannelReducer, Encoder, FeatureMap, branch
from .config import RunConfig, apply_overrides, load_config
from .dataio import (
    DatasetIndex,
    PatchSet,
    Split,
    SyntheticClipSpec,
    VideoClip,
    gen_synthetic_clip,
    load_dataset,
    make_jigsaw,
    reassemble_jigsaw,
    resize_clip,
    sample_clip,
    save_clip,
)
from .decoder import MaskDecoder, PredictionMask, bce_loss, decode
from .metrics import (
    MetricReport,
    dice,
    e_measure,
    evaluate,
    iou,
    paired_ttest,
    s_measure,
    weighted_fmeasure,
)
from .network import VideoSegNet, predict_case
from .selfsup import (
    ClusterModel,
    MemoryBank,
    fit_clusters,
    h_posterior,
    nce_loss,
    pld_loss,
)
from .training import (
    count_params,
    fit,
    grad_check,
    joint_loss,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
    train_step,
)

__version__ = "0.1.0"
