"""Training-free open-vocabulary semantic segmentation.

Recovers patch-level semantic correlation inside a frozen image-text
transformer (cosine self-correlation of final-layer q/k/v), clusters the
correlation rows into object masks, removes global-patch noise, and
classifies each mask by collaborative voting against text embeddings.
"""

__version__ = "0.1.0"

from .classifier import (
    PatchLogits,
    SegmentationMap,
    background_gate,
    patch_logits,
    render_map,
    vote,
)
from .correlation import (
    CorrelationMatrix,
    PatchEmbeddings,
    forward_with_w,
    inner_product_correlation,
    self_correlation,
    self_correlation_fast,
)
from .datasets import DatasetManifest, ingest
from .errors import CorrsegError, DataError, ModelError
from .metrics import MetricReport, accumulate_confusion, metrics
from .model import ModelBundle, PatchFeatureSet, forward_trunk, project_qkv
from .pipeline import Pipeline, PipelineConfig
from .preprocess import ImageTensor, preprocess
from .runner import RunConfig, run_benchmark
from .segmenter import (
    ClusterResult,
    GlobalPatchReport,
    MaskGrid,
    PrototypeStack,
    assign_masks,
    cluster,
    denoise_and_segment,
    global_patch_filter,
    prototypes,
)
from .textbank import TextBank, encode_text_bank, load_templates
from .weights import convert_checkpoint, load_bundle
