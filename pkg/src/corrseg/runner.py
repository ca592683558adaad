"""Benchmark sweeps: manifest -> full pipeline per image -> metric report.

Per-image failures are logged and counted; a run with more than 1%
failures fails outright. Reports serialize to JSON with a schema
version; everything except the timing block is deterministic for fixed
inputs, so determinism checks compare reports with timing stripped.
"""

import copy
import dataclasses
import json
import logging
import random
import time
from dataclasses import dataclass, field

import numpy as np

from . import datasets, textbank
from .errors import CorrsegError, DataError
from .metrics import accumulate_confusion, metrics as compute_metrics
from .pipeline import Pipeline, PipelineConfig

log = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1
MAX_FAILURE_FRACTION = 0.01


@dataclass
class RunConfig:
    manifest_path: str
    weight_dir: str | None = None
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    template_path: str | None = None
    limit: int | None = None
    subset_size: int | None = None
    subset_seed: int = 0
    report_path: str | None = None
    validate_labels: bool = True


def select_pairs(pairs, limit=None, subset_size=None, subset_seed=0):
    """Deterministic evaluation subset: seeded sample, then head -limit."""
    pairs = list(pairs)
    if subset_size is not None and subset_size < len(pairs):
        rng = random.Random(subset_seed)
        pairs = rng.sample(pairs, subset_size)
    if limit is not None:
        pairs = pairs[:limit]
    return pairs


def run_benchmark(config, bundle=None, manifest=None, text_bank=None):
    """Evaluate a manifest with the configured pipeline; returns MetricReport."""
    if manifest is None:
        manifest = datasets.ingest(config.manifest_path, validate_labels=config.validate_labels)
    if bundle is None:
        if config.weight_dir is None:
            raise DataError("run config needs a weight_dir or a preloaded bundle")
        from .weights import load_bundle

        bundle = load_bundle(config.weight_dir, require_tokenizer=True)

    pcfg = config.pipeline
    if pcfg.background == "gate" and pcfg.background_index is None:
        if manifest.background_index is None:
            raise DataError("background gate requested on a benchmark without background")
        pcfg = dataclasses.replace(pcfg, background_index=manifest.background_index)
    if text_bank is None:
        templates = textbank.load_templates(config.template_path)
        text_bank = textbank.encode_text_bank(manifest.classes, templates, bundle)

    pairs = select_pairs(
        manifest.pairs, config.limit, config.subset_size, config.subset_seed
    )
    if not pairs:
        raise DataError("no images selected for evaluation")

    pipe = Pipeline(bundle, pcfg)
    n_classes = len(manifest.classes)
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    failures = []
    start = time.monotonic()
    for img_path, label_path in pairs:
        try:
            gt = datasets.load_label(label_path, n_classes, manifest.ignore_index)
            image = datasets.load_image(img_path)
            result = pipe.run(image, text_bank, out_dims=gt.shape)
            confusion += accumulate_confusion(
                result.seg_map.labels, gt, n_classes, manifest.ignore_index
            )
        except CorrsegError as e:
            log.error("image failed: %s (%s)", img_path, e)
            failures.append({"image": img_path, "error": str(e)})
    elapsed = time.monotonic() - start

    if len(failures) > MAX_FAILURE_FRACTION * len(pairs):
        raise DataError(
            f"{len(failures)}/{len(pairs)} images failed (> {MAX_FAILURE_FRACTION:.0%}); "
            f"first: {failures[0]['error']}"
        )
    report = compute_metrics(confusion)
    report.config = {
        "dataset": {
            "manifest": str(config.manifest_path),
            "split": manifest.split,
            "classes": len(manifest.classes),
            "background_index": manifest.background_index,
        },
        "pipeline": pcfg.snapshot(),
        "selection": {
            "limit": config.limit,
            "subset_size": config.subset_size,
            "subset_seed": config.subset_seed,
        },
    }
    report.image_count = len(pairs) - len(failures)
    report.wall_seconds = elapsed
    if config.report_path:
        write_report(report, config.report_path, failures=failures)
    return report


def report_dict(report, failures=()):
    return {
        "schema_version": REPORT_SCHEMA_VERSION,
        "metrics": report.core_dict(),
        "per_class": {
            "iou": report.per_class_iou,
            "acc": report.per_class_acc,
        },
        "config": report.config,
        "image_count": report.image_count,
        "failures": list(failures),
        "timing": {"wall_seconds": report.wall_seconds},
    }


def write_report(report, path, failures=()):
    with open(path, "w") as f:
        json.dump(report_dict(report, failures), f, indent=2)
        f.write("\n")


def load_report(path):
    with open(path) as f:
        return json.load(f)


def strip_timing(report_payload):
    """Copy of a report dict with the non-deterministic timing removed."""
    out = copy.deepcopy(report_payload)
    out.pop("timing", None)
    return out
