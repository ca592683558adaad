"""Command-line surface.

Commands: convert, segment, evaluate, inspect, export-prompts, dump.
Every pipeline flag has a config-file equivalent (JSON, keys matching
the flag names with underscores); CLI flags override the config file,
which overrides defaults. Exit codes: 0 success, 1 usage, 2 data error,
3 model error.
"""

import argparse
import json
import os
import sys

from PIL import Image

from . import classifier, correlation, dumpio, model, prompts, segmenter, textbank
from .errors import DataError, ModelError
from .pipeline import ABLATIONS, BACKGROUND_MODES, Pipeline, PipelineConfig
from .preprocess import preprocess
from .runner import RunConfig, run_benchmark, write_report
from .weights import convert_checkpoint, load_bundle

PIPELINE_DEFAULTS = {
    "side": 224,
    "eps": segmenter.DEFAULT_EPS,
    "min_samples": segmenter.DEFAULT_MIN_SAMPLES,
    "denoise": True,
    "ablation": "full",
    "background": "none",
    "background_index": None,
    "tau": classifier.BACKGROUND_GATE_TAU,
    "fast_corr": False,
    "recovery_layer": None,
    "templates": None,
}


class _Parser(argparse.ArgumentParser):
    # usage problems exit 1 (argparse default is 2, reserved for data errors)
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _add_pipeline_flags(p):
    p.add_argument("--config", help="JSON config file with flag defaults")
    p.add_argument("--side", type=int, help="input side length (multiple of 16)")
    p.add_argument("--eps", type=float, help="DBSCAN neighborhood distance")
    p.add_argument("--min-samples", type=int, dest="min_samples")
    p.add_argument("--no-denoise", action="store_const", const=False, dest="denoise")
    p.add_argument("--background", choices=list(BACKGROUND_MODES))
    p.add_argument("--background-index", type=int, dest="background_index")
    p.add_argument("--tau", type=float, help="background-gate confidence threshold")
    p.add_argument("--fast-corr", action="store_const", const=True, dest="fast_corr")
    p.add_argument("--recovery-layer", type=int, dest="recovery_layer")
    p.add_argument("--templates", help="prompt template file (default: built-in 80)")


def _merged_options(args, extra=None):
    merged = dict(PIPELINE_DEFAULTS)
    if extra:
        merged.update(extra)
    if getattr(args, "config", None):
        try:
            with open(args.config) as f:
                file_cfg = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise DataError(f"cannot read config file {args.config}: {e}") from e
        unknown = set(file_cfg) - set(merged)
        if unknown:
            raise DataError(f"unknown config keys: {sorted(unknown)}")
        merged.update(file_cfg)
    for key in merged:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    return merged


def _pipeline_config(opts):
    return PipelineConfig(
        side=opts["side"],
        eps=opts["eps"],
        min_samples=opts["min_samples"],
        denoise=opts["denoise"],
        ablation=opts["ablation"],
        background=opts["background"],
        background_index=opts["background_index"],
        tau=opts["tau"],
        fast_corr=opts["fast_corr"],
        recovery_layer=opts["recovery_layer"],
    )


def _load_rgb(path):
    try:
        with Image.open(path) as img:
            return img.convert("RGB")
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read image {path}: {e}") from e


def _classes_from_args(args):
    if getattr(args, "manifest", None):
        from .datasets import ingest

        manifest = ingest(args.manifest, validate_labels=False)
        return list(manifest.classes), manifest.background_index
    if getattr(args, "classes", None):
        names = [c.strip() for c in args.classes.split(",") if c.strip()]
        if not names:
            raise DataError("empty class list")
        return names, None
    raise DataError("provide --classes or --manifest")


def _bundle_and_bank(args, opts, class_names):
    bundle = load_bundle(args.weights, require_tokenizer=True)
    templates = textbank.load_templates(opts["templates"])
    bank = textbank.encode_text_bank(class_names, templates, bundle)
    return bundle, bank


def dump_result(result, dump_dir):
    """Write the pipeline intermediates in the raw-tensor dump format."""
    q, k, v = result.qkv
    tensors = {"q": q, "k": k, "v": v}
    if result.w_cos is not None:
        tensors["w_cosine"] = result.w_cos.values
    if result.w_inner is not None:
        tensors["w_inner"] = result.w_inner.values
    tensors["patch_embeddings"] = result.embeddings.vectors
    if result.logits is not None:
        tensors["logits"] = result.logits.values
    if result.clusters_pre is not None:
        tensors["cluster_labels"] = result.clusters_pre.labels
    if result.denoise is not None:
        tensors["denoised_labels"] = result.denoise.clusters.labels
        tensors["prototypes"] = result.denoise.prototypes.prototypes
        tensors["global_scores"] = result.denoise.report.scores
    if result.mask_grid is not None:
        tensors["mask_ids"] = result.mask_grid.ids
    dumpio.write_dump(dump_dir, tensors)


def cmd_convert(args):
    convert_checkpoint(args.archive, args.out_dir, vocab_path=args.vocab)
    print(f"converted {args.archive} -> {args.out_dir}")


def cmd_segment(args):
    opts = _merged_options(args)
    class_names, bg_index = _classes_from_args(args)
    if opts["background"] == "gate" and opts["background_index"] is None:
        opts["background_index"] = bg_index
    cfg = _pipeline_config(opts)
    bundle, bank = _bundle_and_bank(args, opts, class_names)
    image = _load_rgb(args.image)
    result = Pipeline(bundle, cfg).run(image, bank)
    out = args.out or os.path.splitext(os.path.basename(args.image))[0] + "_seg"
    sidecar_extra = {
        "config": cfg.snapshot(),
        "grid": list(result.grid),
        "image": os.path.abspath(args.image),
    }
    classifier.save_segmentation(
        result.seg_map, out + ".png", out + ".json", extra=sidecar_extra
    )
    if args.dump_dir:
        dump_result(result, args.dump_dir)
    print(f"wrote {out}.png and {out}.json")


def cmd_inspect(args):
    from . import viz  # matplotlib import kept off the other commands' startup path

    opts = _merged_options(args)
    bundle = load_bundle(args.weights)
    image = _load_rgb(args.image)
    tensor = preprocess(image, side=opts["side"])
    feats = model.forward_trunk(tensor, bundle, upto_block=opts["recovery_layer"])
    q, k, v = model.project_qkv(feats, bundle, block_index=opts["recovery_layer"])
    corr_fn = (
        correlation.self_correlation_fast
        if opts["fast_corr"]
        else correlation.self_correlation
    )
    w_cos = corr_fn(q, k, v, feats.grid)
    w_inner = correlation.inner_product_correlation(q, k, v, feats.grid)
    clusters = segmenter.cluster(w_cos, eps=opts["eps"], min_samples=opts["min_samples"])
    den = segmenter.denoise_and_segment(
        w_cos, w_inner, eps=opts["eps"], min_samples=opts["min_samples"]
    )

    try:
        r, c = (int(x) for x in args.patch.split(","))
    except ValueError as e:
        raise DataError(f"--patch expects row,col, got {args.patch!r}") from e
    os.makedirs(args.out_dir, exist_ok=True)
    resized = image.resize((opts["side"], opts["side"]), Image.BICUBIC)
    viz.save_patch_heatmap(
        resized, w_cos, (r, c), os.path.join(args.out_dir, "heatmap.png")
    )
    viz.save_cluster_maps(
        clusters.labels,
        den.clusters.labels,
        feats.grid,
        os.path.join(args.out_dir, "clusters.png"),
    )
    viz.save_global_score_map(
        den.report.scores, feats.grid, os.path.join(args.out_dir, "global_scores.png")
    )
    print(f"wrote inspection figures to {args.out_dir}")


def cmd_evaluate(args):
    opts = _merged_options(args)
    cfg = _pipeline_config(opts)
    run = RunConfig(
        manifest_path=args.manifest,
        weight_dir=args.weights,
        pipeline=cfg,
        template_path=opts["templates"],
        limit=args.limit,
        subset_size=args.subset,
        subset_seed=args.subset_seed,
        report_path=args.report,
        validate_labels=not args.no_validate_labels,
    )
    report = run_benchmark(run)
    if not args.report:
        write_report(report, "report.json")
    for name, value in report.core_dict().items():
        print(f"{name}: {value:.2f}")
    print(f"images: {report.image_count}  seconds: {report.wall_seconds:.1f}")


def cmd_export_prompts(args):
    opts = _merged_options(args)
    if opts["denoise"] is False:
        raise DataError("prompt export requires denoising; drop --no-denoise")
    opts["denoise"] = True
    opts["ablation"] = "full"
    class_names, bg_index = _classes_from_args(args)
    if opts["background"] == "gate" and opts["background_index"] is None:
        opts["background_index"] = bg_index
    cfg = _pipeline_config(opts)
    bundle, bank = _bundle_and_bank(args, opts, class_names)
    result = Pipeline(bundle, cfg).run(_load_rgb(args.image), bank)
    prompt_set = prompts.build_prompt_set(result, k=args.points)
    prompts.write_prompt_set(prompt_set, args.out)
    print(f"wrote {len(prompt_set['masks'])} mask prompts to {args.out}")


def cmd_dump(args):
    opts = _merged_options(args)
    bundle = load_bundle(args.weights, require_tokenizer=bool(args.classes))
    image = _load_rgb(args.image)
    if args.classes:
        names = [c.strip() for c in args.classes.split(",") if c.strip()]
        templates = textbank.load_templates(opts["templates"])
        bank = textbank.encode_text_bank(names, templates, bundle)
        result = Pipeline(bundle, _pipeline_config(opts)).run(image, bank)
    else:
        # no classes: run everything up to the text-dependent stages
        cfg = _pipeline_config(opts)
        tensor = preprocess(image, side=cfg.side)
        feats = model.forward_trunk(tensor, bundle, upto_block=cfg.recovery_layer)
        qkv = model.project_qkv(feats, bundle, block_index=cfg.recovery_layer)
        q, k, v = qkv
        w_cos = correlation.self_correlation(q, k, v, feats.grid)
        w_inner = correlation.inner_product_correlation(q, k, v, feats.grid)
        emb = correlation.forward_with_w(feats, w_cos, bundle, cfg.recovery_layer)
        clusters = segmenter.cluster(w_cos, eps=cfg.eps, min_samples=cfg.min_samples)
        den = segmenter.denoise_and_segment(
            w_cos, w_inner, eps=cfg.eps, min_samples=cfg.min_samples
        )
        dumpio.write_dump(
            args.out_dir,
            {
                "q": q,
                "k": k,
                "v": v,
                "w_cosine": w_cos.values,
                "w_inner": w_inner.values,
                "patch_embeddings": emb.vectors,
                "cluster_labels": clusters.labels,
                "denoised_labels": den.clusters.labels,
                "prototypes": den.prototypes.prototypes,
                "global_scores": den.report.scores,
                "mask_ids": den.mask_grid.ids,
            },
        )
        print(f"wrote tensor dump to {args.out_dir}")
        return
    dump_result(result, args.out_dir)
    print(f"wrote tensor dump to {args.out_dir}")


def build_parser():
    parser = _Parser(prog="corrseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("convert", parents=[], help="convert a published checkpoint")
    p.add_argument("archive", help="checkpoint file or directory")
    p.add_argument("out_dir", help="neutral weight directory to create")
    p.add_argument("--vocab", help="BPE vocabulary file to bundle")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("segment", help="segment one image")
    p.add_argument("image")
    p.add_argument("--weights", required=True, help="neutral weight directory")
    p.add_argument("--classes", help="comma-separated class names")
    p.add_argument("--manifest", help="dataset manifest to take classes from")
    p.add_argument("--out", help="output path prefix (default: <image>_seg)")
    p.add_argument("--dump-dir", dest="dump_dir", help="also dump intermediates here")
    _add_pipeline_flags(p)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("inspect", help="write correlation/cluster figures")
    p.add_argument("image")
    p.add_argument("--weights", required=True)
    p.add_argument("--patch", required=True, help="row,col of the patch to visualize")
    p.add_argument("--out-dir", dest="out_dir", default="inspect_out")
    _add_pipeline_flags(p)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("evaluate", help="run a benchmark manifest")
    p.add_argument("manifest")
    p.add_argument("--weights", required=True)
    p.add_argument("--ablation", choices=list(ABLATIONS))
    p.add_argument("--limit", type=int, help="evaluate only the first N selected images")
    p.add_argument("--subset", type=int, help="seeded random subset size")
    p.add_argument("--subset-seed", type=int, default=0, dest="subset_seed")
    p.add_argument("--report", help="report JSON path (default: report.json)")
    p.add_argument(
        "--no-validate-labels",
        action="store_true",
        dest="no_validate_labels",
        help="skip eager label-range validation at ingest",
    )
    _add_pipeline_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("export-prompts", help="emit point prompts for a mask model")
    p.add_argument("image")
    p.add_argument("--weights", required=True)
    p.add_argument("--classes", help="comma-separated class names")
    p.add_argument("--manifest", help="dataset manifest to take classes from")
    p.add_argument("--out", required=True, help="PromptSet JSON path")
    p.add_argument(
        "--points",
        type=int,
        default=prompts.DEFAULT_MEMBER_POINTS,
        help="member-patch points per mask besides the centroid",
    )
    _add_pipeline_flags(p)
    p.set_defaults(func=cmd_export_prompts)

    p = sub.add_parser("dump", help="dump pipeline tensors for external oracles")
    p.add_argument("image")
    p.add_argument("--weights", required=True)
    p.add_argument("--classes", help="optional classes to include logits")
    p.add_argument("--out-dir", dest="out_dir", required=True)
    _add_pipeline_flags(p)
    p.set_defaults(func=cmd_dump)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except DataError as e:
        print(f"corrseg: data error: {e}", file=sys.stderr)
        return 2
    except ModelError as e:
        print(f"corrseg: model error: {e}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
