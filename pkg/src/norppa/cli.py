"""Command-line interface: one subcommand per pipeline stage plus mirrors of
every HTTP endpoint, so the whole system is drivable without the service.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .config import PipelineConfig
from .encoder import l2_normalize, load_embedding, power_normalize, save_embedding, encode
from .errors import NorppaError
from .features import detect_regions, load_descriptors, save_descriptors
from .geoverify import (
    match_features,
    overlay_to_json,
    overlay_to_svg,
    percentile_filter,
    ransac_homography,
    render_hotspots,
)
from .image_io import load_pattern_mask, load_raster, save_pattern_mask, save_raster
from .index import DatabaseEntry, IdentityIndex
from .pipeline import (
    ReidPipeline,
    config_snapshot,
    load_manifest,
    run_eval,
)
from .preprocess import equalize_contrast
from .vocab import fit_gmm, fit_pca, load_vocabulary, project, save_vocabulary


def _load_config(path: str | None) -> PipelineConfig:
    path = path or os.environ.get("NORPPA_CONFIG")
    return PipelineConfig.load(path) if path else PipelineConfig()


def _emit(payload: dict) -> None:
    json.dump(payload, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")


# -- stage commands ----------------------------------------------------------


def _cmd_preprocess(args) -> None:
    config = _load_config(args.config)
    if args.mask:
        pipeline = ReidPipeline(config.with_overrides(target_stroke_width=args.target_stroke))
        pattern = pipeline.prepare_pattern(load_pattern_mask(args.mask))
        save_pattern_mask(pattern, args.out)
        _emit(
            {
                "out": args.out,
                "mean-stroke-width": pattern.mean_stroke_width,
                "scale-factor": pattern.scale_factor_applied,
            }
        )
    elif getattr(args, "in_path", None):
        raster = load_raster(args.in_path)
        save_raster(equalize_contrast(raster, tile=config.clahe_tile, clip=config.clahe_clip), args.out)
        _emit({"out": args.out, "mode": "contrast-equalized"})
    else:
        raise NorppaError("preprocess needs --mask (pattern) or --in (raster)")


def _cmd_extract(args) -> None:
    config = _load_config(args.config)
    if args.max_regions:
        config = config.with_overrides(max_regions=args.max_regions)
    pipeline = ReidPipeline(config)
    pattern = load_pattern_mask(args.in_path)
    dset = pipeline.extract_features(pattern, image_id=Path(args.out).stem)
    save_descriptors(dset, args.out)
    _emit({"out": args.out, "regions": dset.T})


def _cmd_train_vocab(args) -> None:
    config = _load_config(args.config)
    files = sorted(Path(args.desc_dir).glob("*.nrpd"))
    if not files:
        raise NorppaError(f"no .nrpd files in {args.desc_dir}")
    matrices = [m for m in (load_descriptors(f).matrix() for f in files) if m.size]
    stacked = np.vstack(matrices)
    pca = fit_pca(stacked, args.pca_dim)
    gmm = fit_gmm(
        project(pca, stacked),
        args.k,
        seed=args.seed,
        max_iters=config.gmm_max_iters,
        tol=config.gmm_tol,
        variance_floor=config.variance_floor,
    )
    gmm.pca = pca
    save_vocabulary(gmm, args.out)
    _emit(
        {
            "out": args.out,
            "k": gmm.K,
            "dim": gmm.D,
            "samples": int(stacked.shape[0]),
            "log-likelihood": gmm.trained_log_likelihood,
            "vocab-id": gmm.id_hex(),
        }
    )


def _cmd_encode(args) -> None:
    config = _load_config(args.config)
    vocab = load_vocabulary(args.vocab)
    desc = Path(args.desc)
    files = sorted(desc.glob("*.nrpd")) if desc.is_dir() else [desc]
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for f in files:
        dset = load_descriptors(f)
        x = dset.matrix()
        if vocab.pca is not None:
            x = project(vocab.pca, x)
        fv = l2_normalize(power_normalize(encode(vocab, x, image_id=dset.image_id), config.power_alpha))
        target = out_dir / (f.stem + ".nrpf")
        save_embedding(fv, target)
        written.append(str(target))
    _emit({"out": written, "count": len(written)})


def _cmd_index_build(args) -> None:
    config = _load_config(args.config)
    entries = load_manifest(args.manifest)
    index = IdentityIndex(config=config_snapshot(config))
    embeddings = Path(args.embeddings)
    for entry in entries:
        if entry.split != "database":
            continue
        fv = load_embedding(embeddings / f"{entry.image_id}.nrpf")
        index.add_entry(
            DatabaseEntry(
                individual_id=entry.individual_id,
                image_id=entry.image_id,
                embedding=fv.values,
                descriptor_ref=entry.descriptor_path,
                added_at=0.0,
            )
        )
    index.save(args.out)
    _emit({"out": args.out, "entries": len(index), "individuals": len(index.individuals())})


def _cmd_index_query(args) -> None:
    index = IdentityIndex.load(args.index)
    fv = load_embedding(args.embedding)
    matches = index.query_topk(fv.values, args.k)
    _emit(
        {
            "matches": [
                {
                    "rank": m.rank,
                    "individual-id": m.entry.individual_id,
                    "image-id": m.entry.image_id,
                    "distance": m.distance,
                }
                for m in matches
            ]
        }
    )


def _cmd_eval(args) -> None:
    config = _load_config(args.config)
    if args.index:
        if not args.embeddings:
            raise NorppaError("eval with --index needs --embeddings for the query split")
        index = IdentityIndex.load(args.index)
        entries = load_manifest(args.manifest)
        embeddings = Path(args.embeddings)
        queries = [
            (load_embedding(embeddings / f"{e.image_id}.nrpf").values, e.individual_id)
            for e in entries
            if e.split == "query"
        ]
        report = index.evaluate_topk(queries, args.kmax)
    else:
        report, _ = run_eval(config, args.manifest, k_max=args.kmax)
    payload = report.to_dict()
    Path(args.report).write_text(json.dumps(payload, indent=2, sort_keys=True))
    if args.csv:
        lines = ["k,accuracy"] + [f"{k + 1},{a:.6f}" for k, a in enumerate(report.accuracies)]
        Path(args.csv).write_text("\n".join(lines) + "\n")
    _emit({"report": args.report, "accuracy": payload["accuracy"]})


def _cmd_verify(args) -> None:
    config = _load_config(args.config)
    query = load_descriptors(args.query_desc)
    db = load_descriptors(args.db_desc)
    pairs = percentile_filter(match_features(query, db), args.percentile)
    homography, inliers = ransac_homography(
        pairs,
        iterations=config.ransac_iterations,
        inlier_threshold=config.ransac_inlier_threshold,
        seed=config.seed,
    )
    overlay = render_hotspots(inliers, query_image_id=query.image_id, db_image_id=db.image_id)
    payload = overlay_to_json(overlay, homography)
    Path(args.out).write_text(json.dumps(payload, indent=2, sort_keys=True))
    if args.svg:
        Path(args.svg).write_text(overlay_to_svg(payload, side="query"))
    _emit(
        {
            "out": args.out,
            "inliers": homography.inlier_count,
            "mean-reprojection-error": homography.mean_reprojection_error,
        }
    )


# -- endpoint mirrors ----------------------------------------------------------


def _pipeline_from_args(args) -> ReidPipeline:
    config = _load_config(args.config)
    index_path = args.index or os.environ.get("NORPPA_INDEX")
    vocab = load_vocabulary(args.vocab) if getattr(args, "vocab", None) else None
    index = IdentityIndex.load(index_path) if index_path else None
    return ReidPipeline(config, vocab=vocab, index=index, journal_path=getattr(args, "journal", None))


def _cmd_query(args) -> None:
    pipeline = _pipeline_from_args(args)
    result = pipeline.query_and_verify(args.in_path, k=args.k)
    _emit(result.to_dict())


def _cmd_individuals(args) -> None:
    index = IdentityIndex.load(args.index or os.environ.get("NORPPA_INDEX"))
    ids = index.individuals()
    _emit({"individuals": ids, "count": len(ids)})


def _cmd_images(args) -> None:
    index = IdentityIndex.load(args.index or os.environ.get("NORPPA_INDEX"))
    if args.individual not in index.individuals():
        raise NorppaError(f"unknown individual: {args.individual}")
    _emit({"individual-id": args.individual, "images": index.images_of(args.individual)})


def _cmd_confirm(args) -> None:
    pipeline = _pipeline_from_args(args)
    embedding = load_embedding(args.embedding).values
    used = pipeline.confirm_match(
        query_image_id=args.image_id,
        individual_id=args.individual,
        embedding=embedding,
        descriptor_ref=args.desc,
        new_individual=args.new,
    )
    index_path = args.index or os.environ.get("NORPPA_INDEX")
    pipeline.index.save(index_path)
    _emit({"status": "confirmed", "individual-id": used})


def _cmd_health(args) -> None:
    index_path = args.index or os.environ.get("NORPPA_INDEX")
    config = _load_config(args.config)
    entries = len(IdentityIndex.load(index_path)) if index_path and Path(index_path).exists() else 0
    _emit({"status": "ok", "entries": entries, "config-hash": config.hash_hex()})


def _cmd_config(args) -> None:
    config = _load_config(args.config)
    _emit({"config": json.loads(config.canonical_json()), "config-hash": config.hash_hex()})


def _cmd_serve(args) -> None:
    import uvicorn

    from .service import build_pipeline, create_app

    index_path = args.index or os.environ.get("NORPPA_INDEX")
    pipeline = build_pipeline(
        config_path=args.config or os.environ.get("NORPPA_CONFIG"),
        index_path=index_path,
        vocab_path=args.vocab or os.environ.get("NORPPA_VOCAB"),
        journal_path=args.journal,
    )
    app = create_app(pipeline, index_path=index_path)
    port = args.port or int(os.environ.get("NORPPA_PORT", "8000"))
    uvicorn.run(app, host=args.host, port=port)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="norppa", description="Pelage-pattern re-identification pipeline")
    parser.add_argument("--config", help="pipeline config JSON (default: NORPPA_CONFIG or built-ins)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="clean and scale-normalize a pattern mask")
    p.add_argument("--in", dest="in_path", help="raw raster for contrast equalization")
    p.add_argument("--mask", help="binary pattern mask")
    p.add_argument("--target-stroke", type=float, default=8.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_preprocess)

    p = sub.add_parser("extract", help="detect regions and write descriptors")
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-regions", type=int)
    p.set_defaults(func=_cmd_extract)

    p = sub.add_parser("train-vocab", help="fit PCA + GMM on a descriptor directory")
    p.add_argument("--desc-dir", required=True)
    p.add_argument("--pca-dim", type=int, default=64)
    p.add_argument("--k", type=int, default=256)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train_vocab)

    p = sub.add_parser("encode", help="encode descriptors into final embeddings")
    p.add_argument("--vocab", required=True)
    p.add_argument("--desc", required=True, help="descriptor file or directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--no-kpca", action="store_true", help="skip KPCA compression (the default; file-based encode always writes full embeddings)")
    p.set_defaults(func=_cmd_encode)

    p_index = sub.add_parser("index", help="index maintenance")
    index_sub = p_index.add_subparsers(dest="index_command", required=True)
    p = index_sub.add_parser("build", help="build an index from manifest + embeddings")
    p.add_argument("--manifest", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_index_build)
    p = index_sub.add_parser("query", help="top-k lookup of one embedding")
    p.add_argument("--index", required=True)
    p.add_argument("--embedding", required=True)
    p.add_argument("-k", type=int, default=5)
    p.set_defaults(func=_cmd_index_query)

    p = sub.add_parser("eval", help="top-k accuracy over a manifest")
    p.add_argument("--index", help="prebuilt index (requires --embeddings)")
    p.add_argument("--manifest", required=True)
    p.add_argument("--embeddings", help="directory of query .nrpf files")
    p.add_argument("--kmax", type=int, default=5)
    p.add_argument("--report", required=True)
    p.add_argument("--csv")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("verify", help="geometric verification of two descriptor files")
    p.add_argument("--query-desc", required=True)
    p.add_argument("--db-desc", required=True)
    p.add_argument("--percentile", type=float, default=10.0)
    p.add_argument("--out", required=True)
    p.add_argument("--svg")
    p.set_defaults(func=_cmd_verify)

    p = sub.add_parser("query", help="query the index with a pattern or descriptor file")
    p.add_argument("--index")
    p.add_argument("--vocab")
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("-k", type=int, default=None)
    p.set_defaults(func=_cmd_query)

    p = sub.add_parser("individuals", help="list known individuals")
    p.add_argument("--index")
    p.set_defaults(func=_cmd_individuals)

    p = sub.add_parser("images", help="list images of one individual")
    p.add_argument("--index")
    p.add_argument("--individual", required=True)
    p.set_defaults(func=_cmd_images)

    p = sub.add_parser("confirm", help="append an expert-confirmed identity")
    p.add_argument("--index")
    p.add_argument("--image-id", required=True)
    p.add_argument("--individual")
    p.add_argument("--new", action="store_true")
    p.add_argument("--embedding", required=True)
    p.add_argument("--desc")
    p.add_argument("--journal")
    p.set_defaults(func=_cmd_confirm)

    p = sub.add_parser("health", help="index/config status")
    p.add_argument("--index")
    p.set_defaults(func=_cmd_health)

    p = sub.add_parser("show-config", help="print the resolved config and its hash")
    p.set_defaults(func=_cmd_config)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--index")
    p.add_argument("--vocab")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int)
    p.add_argument("--journal")
    p.set_defaults(func=_cmd_serve)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except NorppaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
