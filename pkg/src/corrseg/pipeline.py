"""End-to-end per-image segmentation pipeline.

Stages: preprocess -> trunk -> final-layer q/k/v -> correlation recovery
-> forward with w -> text logits -> masks (cluster / denoise) -> vote ->
render. Ablation modes mirror the build-up: "clip" (standard attention
per-patch argmax), "scr" (recovered attention, per-patch argmax),
"scr+pc" (clustered masks, no denoising), "full".
"""

from dataclasses import asdict, dataclass, field

from . import classifier, correlation, model, segmenter
from .errors import DataError
from .preprocess import preprocess

ABLATIONS = ("clip", "scr", "scr+pc", "full")
BACKGROUND_MODES = ("none", "gate", "text")


@dataclass(frozen=True)
class PipelineConfig:
    side: int = 224
    eps: float = segmenter.DEFAULT_EPS
    min_samples: int = segmenter.DEFAULT_MIN_SAMPLES
    denoise: bool = True
    ablation: str = "full"
    background: str = "none"
    background_index: int | None = None
    tau: float = classifier.BACKGROUND_GATE_TAU
    fast_corr: bool = False
    recovery_layer: int | None = None  # block index; None = final block
    cluster_features: bool = False  # debug flag: cluster embeddings, not w rows

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise DataError(f"unknown ablation {self.ablation!r}; choose from {ABLATIONS}")
        if self.background not in BACKGROUND_MODES:
            raise DataError(
                f"unknown background mode {self.background!r}; choose from {BACKGROUND_MODES}"
            )
        # background_index may stay None here: the runner injects the
        # manifest's index, and background_gate errors if still unset.
        if self.background == "gate" and self.ablation in ("clip", "scr"):
            raise DataError("background gate needs masks; unavailable in per-patch ablations")

    def snapshot(self):
        d = asdict(self)
        d["effective_ablation"] = self.effective_ablation
        return d

    @property
    def effective_ablation(self):
        if self.ablation == "full" and not self.denoise:
            return "scr+pc"
        return self.ablation

    @property
    def uses_masks(self):
        return self.effective_ablation in ("scr+pc", "full")

    @property
    def uses_denoise(self):
        return self.effective_ablation == "full"


@dataclass
class PipelineResult:
    seg_map: classifier.SegmentationMap
    config: PipelineConfig
    feats: model.PatchFeatureSet = None
    qkv: tuple = None
    w_cos: correlation.CorrelationMatrix = None
    w_inner: correlation.CorrelationMatrix = None
    embeddings: correlation.PatchEmbeddings = None
    logits: classifier.PatchLogits = None
    clusters_pre: segmenter.ClusterResult = None
    denoise: segmenter.DenoiseResult = None
    mask_grid: segmenter.MaskGrid = None
    votes: list = field(default_factory=list)

    @property
    def grid(self):
        return self.feats.grid


class Pipeline:
    """Reusable runner binding a frozen bundle to a configuration."""

    def __init__(self, bundle, config=None):
        self.bundle = bundle
        self.config = config or PipelineConfig()

    def run(self, rgb_image, text_bank, out_dims=None):
        cfg = self.config
        bundle = self.bundle
        image = preprocess(rgb_image, side=cfg.side)
        out_dims = out_dims or image.original_size

        feats = model.forward_trunk(image, bundle, upto_block=cfg.recovery_layer)
        qkv = model.project_qkv(feats, bundle, block_index=cfg.recovery_layer)
        q, k, v = qkv

        if cfg.ablation == "clip":
            attn = model.standard_attention(q, k)
            projected = model.complete_block(feats, attn, bundle, cfg.recovery_layer)
            patches = projected[1:]
            patches = patches / patches.norm(dim=-1, keepdim=True).clamp_min(1e-8)
            embeddings = correlation.PatchEmbeddings(
                vectors=patches.numpy(), grid=feats.grid, image_size=image.original_size
            )
            w_cos = w_inner = None
        else:
            corr_fn = (
                correlation.self_correlation_fast
                if cfg.fast_corr
                else correlation.self_correlation
            )
            w_cos = corr_fn(q, k, v, feats.grid)
            w_inner = (
                correlation.inner_product_correlation(q, k, v, feats.grid)
                if cfg.uses_denoise
                else None
            )
            embeddings = correlation.forward_with_w(
                feats, w_cos, bundle, block_index=cfg.recovery_layer
            )

        logits = classifier.patch_logits(embeddings, text_bank, bundle.logit_scale)

        result = PipelineResult(seg_map=None, config=cfg)
        result.feats = feats
        result.qkv = qkv
        result.w_cos = w_cos
        result.w_inner = w_inner
        result.embeddings = embeddings
        result.logits = logits

        if not cfg.uses_masks:
            result.seg_map = classifier.render_patch_argmax(
                logits, feats.grid, out_dims, text_bank.class_names
            )
            return result

        cluster_input = w_cos if not cfg.cluster_features else embeddings.vectors
        result.clusters_pre = segmenter.cluster(
            cluster_input, eps=cfg.eps, min_samples=cfg.min_samples
        )
        if cfg.uses_denoise:
            result.denoise = segmenter.denoise_and_segment(
                w_cos, w_inner, eps=cfg.eps, min_samples=cfg.min_samples
            )
            mask_grid = result.denoise.mask_grid
        else:
            stack = segmenter.prototypes(w_cos, result.clusters_pre)
            mask_grid = segmenter.assign_masks(stack, feats.grid)
        result.mask_grid = mask_grid

        votes = classifier.vote(mask_grid, logits)
        if cfg.background == "gate":
            votes = classifier.background_gate(votes, cfg.tau, cfg.background_index)
        result.votes = votes
        result.seg_map = classifier.render_map(
            mask_grid, votes, out_dims, text_bank.class_names
        )
        return result
