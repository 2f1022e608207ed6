"""Command line entry point.

Exit codes: 0 ok, 1 dataset failed validation, 2 usage or input error,
3 backend error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from synthcomp.backgrounds import (
    build_context_backgrounds,
    build_zero_shot_backgrounds,
    find_cdis,
    load_backgrounds,
    save_backgrounds,
)
from synthcomp.compositor import build_dataset
from synthcomp.config import (
    ConfigError,
    PipelineConfig,
    RunManifest,
    expected_counts,
    load_config,
    load_vocabulary,
    voc_vocabulary,
)
from synthcomp.dataset_io import DatasetError, contact_sheet_from_dataset, validate_dataset, write_coco
from synthcomp.foreground import AssetStore, build_foreground_assets
from synthcomp.gateway import BackendEndpoint, BackendError, Gateway
from synthcomp.prompts import Caption, Lexicon, count_occurrences, intervene, parse_intervention

logger = logging.getLogger("synthcomp")

EXIT_OK, EXIT_INVALID, EXIT_USAGE, EXIT_BACKEND = 0, 1, 2, 3
BACKEND_ENV = "SYNTHCOMP_BACKEND_URL"


class UsageError(Exception):
    pass


class StageFailed(Exception):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def _load_inputs(args):
    config = load_config(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        config = config.with_overrides(master_seed=args.seed)
    if args.vocab:
        vocab = load_vocabulary(args.vocab)
    else:
        vocab = voc_vocabulary()
    return config, vocab


def _gateway(args, config) -> Gateway:
    if args.stub:
        return Gateway.stub(config, max_in_flight=max(args.workers, 1))
    url = args.backend_url or os.environ.get(BACKEND_ENV)
    if not url:
        raise UsageError(f"no backend: pass --stub, --backend-url or set {BACKEND_ENV}")
    return Gateway.http(BackendEndpoint(url, max_in_flight=max(args.workers, 1)), config.image_size)


def _lexicon(args) -> Lexicon:
    return Lexicon.load(args.lexicon) if args.lexicon else Lexicon.load()


class Run:
    """Stage bookkeeping: every stage writes its manifest record before the next starts."""

    def __init__(self, out: Path, manifest: RunManifest):
        self.out = out
        self.manifest = manifest
        out.mkdir(parents=True, exist_ok=True)

    def record(self, stage: str, counts: dict, digest: str = "", status: str = "ok"):
        self.manifest.record_stage(stage, counts, digest, status)
        self.manifest.save(self.out / "manifest.json")
        summary = ", ".join(f"{k}={v}" for k, v in counts.items())
        logger.info("[%s] %s %s", stage, status, summary)

    def stage(self, name: str, fn, *args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (BackendError, DatasetError, OSError, ValueError) as exc:
            self.record(name, {"error": str(exc)}, status="failed")
            raise StageFailed(name, exc) from exc


# --------------------------------------------------------------------------
# stages


def stage_captions(run, args, config, vocab, gateway) -> list[Caption]:
    cdis = find_cdis(args.cdi_dir, vocab, config.num_cdis_per_class)
    captions = []
    for cdi_id, path in cdis:
        captions += gateway.caption_image(path, config.captions_per_cdi, provenance=cdi_id)
    with open(run.out / "captions.jsonl", "w") as fh:
        for c in captions:
            fh.write(json.dumps({"cdi": c.provenance, "caption": c.text}) + "\n")
    run.record("caption-cdis", {"cdis": len(cdis), "captions": len(captions)})
    return captions


def stage_backgrounds(run, args, config, vocab, gateway):
    log_path = run.out / "filter_log.jsonl"
    with open(log_path, "a") as log:
        if args.zero_shot:
            backgrounds, stats = build_zero_shot_backgrounds(vocab, config, gateway, filter_log=log)
        else:
            cdis = find_cdis(args.cdi_dir, vocab, config.num_cdis_per_class)
            captions = []
            backgrounds, stats = build_context_backgrounds(
                cdis, vocab, _lexicon(args), config, gateway, filter_log=log, captions_out=captions
            )
            with open(run.out / "captions.jsonl", "w") as fh:
                for c in captions:
                    fh.write(json.dumps({"cdi": c.provenance, "caption": c.text}) + "\n")
    save_backgrounds(backgrounds, run.out / "assets" / "bg")
    run.record("gen-backgrounds", {**stats.as_counts(), "backgrounds": len(backgrounds)})
    print(f"backgrounds: {len(backgrounds)}")
    return backgrounds


def stage_foregrounds(run, args, config, vocab, gateway) -> AssetStore:
    with open(run.out / "filter_log.jsonl", "a") as log:
        store, stats = build_foreground_assets(vocab, config, gateway, workers=args.workers, filter_log=log)
    store.save(run.out / "assets" / "fg")
    run.record("gen-foregrounds", {**stats.as_counts(), "assets": len(store)})
    print(f"foregrounds: {len(store)}")
    return store


def stage_compose(run, args, config, vocab, store, backgrounds) -> int:
    samples = build_dataset(store, backgrounds, config, workers=args.workers)
    run.manifest.record_stage("compose", {"target": config.target_dataset_size}, status="running")
    write_coco(samples, vocab, run.out, run.manifest, workers=args.workers)
    run.record("compose", {"samples": config.target_dataset_size, "paste_slots": config.target_dataset_size * config.pastes_per_image})
    report = validate_dataset(run.out)
    run.record("validate", {"images": report.images, "annotations": report.annotations, "violations": len(report.violations)})
    if report.images:
        contact_sheet_from_dataset(run.out, n=min(16, report.images), grid=(4, 4))
    print(report.summary())
    return EXIT_OK if report.ok else EXIT_INVALID


def run_full_pipeline(args) -> int:
    config, vocab = _load_inputs(args)
    if not args.zero_shot and not args.cdi_dir:
        raise UsageError("run-all needs --cdi-dir or --zero-shot")
    if args.cdi_dir and not Path(args.cdi_dir).is_dir():
        raise UsageError(f"CDI directory not found: {args.cdi_dir}")
    gateway = _gateway(args, config)
    run = Run(Path(args.out), RunManifest.create(config, vocab))
    plan = expected_counts(config, vocab)
    run.record("plan", {k: v for k, v in plan.__dict__.items()})
    backgrounds = run.stage("gen-backgrounds", stage_backgrounds, run, args, config, vocab, gateway)
    store = run.stage("gen-foregrounds", stage_foregrounds, run, args, config, vocab, gateway)
    if not backgrounds or not len(store):
        run.record("compose", {"backgrounds": len(backgrounds), "assets": len(store)}, status="failed")
        raise StageFailed("compose", ValueError("no backgrounds or no foreground assets to compose"))
    return run.stage("compose", stage_compose, run, args, config, vocab, store, backgrounds)


def intervene_command(captions_path, edits_path, out_path, log_path=None) -> dict:
    """Apply every edit, in order, to every caption line; returns per-edit occurrence counts."""
    captions_path, edits_path = Path(captions_path), Path(edits_path)
    for p in (captions_path, edits_path):
        if not p.is_file():
            raise UsageError(f"file not found: {p}")
    edits = []
    for lineno, raw in enumerate(edits_path.read_text().splitlines(), start=1):
        line = raw.strip()
        if line and not line.startswith("#"):
            try:
                edits.append(parse_intervention(line, lineno))
            except ValueError as exc:
                raise UsageError(f"{edits_path}: {exc}") from None
    lines = captions_path.read_text().splitlines()
    counts = {f"{e.kind.value}:{e.target}": 0 for e in edits}
    out_lines, log_lines = [], []
    for text in lines:
        if not text.strip():
            out_lines.append(text)
            continue
        caption = Caption(text)
        for e in edits:
            counts[f"{e.kind.value}:{e.target}"] += count_occurrences(caption.text, e.target) if e.kind.value != "add" else 1
            caption = intervene(caption, e)
        out_lines.append(caption.text)
        log_lines.append(f"{text}\t->\t{caption.text}")
    Path(out_path).write_text("\n".join(out_lines) + ("\n" if out_lines else ""))
    log_path = Path(log_path) if log_path else Path(str(out_path) + ".log")
    log_lines += [f"# {key}: {n}" for key, n in counts.items()]
    log_path.write_text("\n".join(log_lines) + "\n")
    for key, n in counts.items():
        logger.info("%s applied to %d occurrence(s)", key, n)
    return counts


# --------------------------------------------------------------------------
# argparse


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--vocab", help="class vocabulary file (default: the 20 VOC classes)")
    common.add_argument("--lexicon", help="directory with nouns.txt, class_synonyms.tsv, relations.tsv")
    common.add_argument("--seed", type=int, help="override master_seed")
    common.add_argument("--workers", type=int, default=1)
    common.add_argument("--stub", action="store_true", help="use the offline procedural backend")
    common.add_argument("--backend-url", help=f"model server base URL (fallback: ${BACKEND_ENV})")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="synthcomp", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("caption-cdis", parents=[common], help="caption context description images")
    p.add_argument("--cdi-dir", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("gen-backgrounds", parents=[common], help="generate and filter context backgrounds")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--cdi-dir")
    src.add_argument("--zero-shot", action="store_true")
    p.add_argument("--out", required=True)

    p = sub.add_parser("gen-foregrounds", parents=[common], help="generate and extract foreground cutouts")
    p.add_argument("--out", required=True)

    p = sub.add_parser("compose", parents=[common], help="cut-and-paste assets into a COCO dataset")
    p.add_argument("--assets", help="asset root with fg/ and bg/ (default: OUT/assets)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("validate", parents=[common], help="check a written dataset")
    p.add_argument("path")

    p = sub.add_parser("intervene", parents=[common], help="apply caption edits")
    p.add_argument("--captions", required=True)
    p.add_argument("--edits", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log")

    p = sub.add_parser("run-all", parents=[common], help="the whole pipeline")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--cdi-dir")
    src.add_argument("--zero-shot", action="store_true")
    p.add_argument("--out", required=True)
    return parser


def _dispatch(args) -> int:
    if args.command == "validate":
        report = validate_dataset(args.path)
        print(report.summary())
        return EXIT_OK if report.ok else EXIT_INVALID
    if args.command == "intervene":
        intervene_command(args.captions, args.edits, args.out, args.log)
        return EXIT_OK
    if args.command == "run-all":
        return run_full_pipeline(args)

    config, vocab = _load_inputs(args)
    run = Run(Path(args.out), RunManifest.create(config, vocab))
    if args.command == "compose":
        assets = Path(args.assets) if args.assets else run.out / "assets"
        if not (assets / "fg").is_dir() or not (assets / "bg").is_dir():
            raise UsageError(f"asset directories not found under {assets}")
        store = AssetStore.load(assets / "fg")
        backgrounds = load_backgrounds(assets / "bg")
        if not len(store) or not backgrounds:
            raise UsageError(f"empty asset store under {assets}")
        return run.stage("compose", stage_compose, run, args, config, vocab, store, backgrounds)
    gateway = _gateway(args, config)
    if args.command == "caption-cdis":
        run.stage("caption-cdis", stage_captions, run, args, config, vocab, gateway)
    elif args.command == "gen-backgrounds":
        run.stage("gen-backgrounds", stage_backgrounds, run, args, config, vocab, gateway)
    elif args.command == "gen-foregrounds":
        run.stage("gen-foregrounds", stage_foregrounds, run, args, config, vocab, gateway)
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except (UsageError, ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except StageFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        if isinstance(exc.cause, BackendError):
            return EXIT_BACKEND
        if isinstance(exc.cause, DatasetError):
            return EXIT_INVALID
        return EXIT_USAGE
    except BackendError as exc:
        print(f"error: backend: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except DatasetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
