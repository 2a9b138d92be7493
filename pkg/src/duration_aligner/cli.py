"""duration-aligner: phoneme duration alignment pipeline.

Subcommands run one stage each and share a workspace directory
(``--workspace``, else $ALIGNER_WORKSPACE, else ``[paths] workspace_dir``)::

    duration-aligner synth --spec corpus.toml --out corpus/
    duration-aligner features --manifest corpus/manifest.jsonl --kind melspec
    duration-aligner train-asr --manifest corpus/manifest.jsonl
    duration-aligner align --manifest corpus/manifest.jsonl
    duration-aligner train-duration --manifest corpus/manifest.jsonl
    duration-aligner eval --manifest corpus/manifest.jsonl --alignments ...
    duration-aligner ablation --manifest corpus/manifest.jsonl

Exit codes: 0 success, 1 stage failure, 2 configuration or usage error.
Failures print a JSON object with ``error`` and ``message`` to stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import tomllib
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Sequence

from duration_aligner import __version__
from duration_aligner.acoustic import AsrModel, decode_greedy, train_asr
from duration_aligner.alignment import (
    align_corpus,
    alignments_from_manifest,
    read_alignments,
    write_alignment_tsv,
    write_alignments,
    write_duration_comparison,
)
from duration_aligner.config import PipelineConfig, load_config, resolve_workspace
from duration_aligner.constants import ALIGNMENT_POLICIES
from duration_aligner.duration import predict_durations, train_duration_model
from duration_aligner.errors import AlignerError, ConfigurationError
from duration_aligner.features import (
    FeatureConfig,
    FeatureExtractor,
    FeatureMatrix,
    extract_corpus,
    feature_path,
    load_corpus,
    load_features,
    save_features,
)
from duration_aligner.inventory import PhonemeInventory
from duration_aligner.manifest import Manifest, read_manifest
from duration_aligner.metrics import boundary_accuracy, evaluate_corpus, write_evaluation_tsv
from duration_aligner.synthetic import (
    MANIFEST_NAME,
    SyntheticCorpusSpec,
    generate_synthetic_corpus,
)
from duration_aligner.utils import file_checksum

logger = logging.getLogger(__name__)


# --- run bookkeeping ---


def _path_checksum(path: Path) -> str:
    if path.is_dir():
        digest = hashlib.sha256()
        for child in sorted(p for p in path.rglob("*") if p.is_file()):
            digest.update(str(child.relative_to(path)).encode("utf-8"))
            digest.update(file_checksum(child).encode("ascii"))
        return digest.hexdigest()
    return file_checksum(path)


class RunRecord:
    """Config snapshot, input checksums and outputs of one subcommand run."""

    def __init__(self, command: str, argv: Sequence[str], config: PipelineConfig) -> None:
        self.command = command
        self.argv = list(argv)
        self.config = config
        self.started = datetime.now(timezone.utc)
        self.inputs: dict[str, str] = {}
        self.outputs: list[str] = []

    def add_input(self, path: str | Path | None) -> None:
        if path is not None and Path(path).exists():
            self.inputs[str(path)] = _path_checksum(Path(path))

    def add_output(self, path: str | Path) -> None:
        self.outputs.append(str(path))

    def write(self, workspace: Path) -> Path:
        content = {
            "command": self.command,
            "config": self.config.to_dict(),
            "inputs": dict(sorted(self.inputs.items())),
        }
        digest = hashlib.sha256(json.dumps(content, sort_keys=True).encode("utf-8")).hexdigest()
        record = {
            **content,
            "argv": self.argv,
            "outputs": self.outputs,
            "version": __version__,
            "started_at": self.started.isoformat(),
        }
        path = workspace / "runs" / f"{self.started:%Y%m%dT%H%M%S%fZ}-{digest[:12]}.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(record, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
        return path


def _print_json(data: Any) -> None:
    print(json.dumps(data, indent=2, ensure_ascii=False))


def _write_json(data: Any, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    return path


# --- shared stage helpers ---


def _load_stage_features(
    manifest: Manifest,
    kind: str,
    feature_config: FeatureConfig,
    directory: Path | None,
    jobs: int,
    progress: bool,
) -> dict[str, FeatureMatrix]:
    """Features from ``directory`` when given, otherwise extracted from the audio."""
    if directory is not None:
        return load_corpus(manifest, directory, latent=kind == "latent")
    extractor = FeatureExtractor(kind, feature_config)  # type: ignore[arg-type]
    features, failures = extract_corpus(manifest, extractor, jobs=jobs, progress=progress)
    if failures:
        raise AlignerError(f"Feature extraction failed for {sorted(failures)}")
    return features


def _load_synthetic_spec(path: Path) -> SyntheticCorpusSpec:
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError as e:
        raise ConfigurationError(f"Synthetic corpus spec {path} does not exist") from e
    try:
        data = json.loads(text) if path.suffix == ".json" else tomllib.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as e:
        raise ConfigurationError(f"Cannot parse synthetic corpus spec {path}: {e}") from e
    return SyntheticCorpusSpec.from_dict(data)


# --- subcommands ---


def cmd_synth(args: argparse.Namespace, config: PipelineConfig, run: RunRecord) -> int:
    spec = _load_synthetic_spec(Path(args.spec))
    run.add_input(args.spec)
    manifest = generate_synthetic_corpus(spec, args.out, config.features, jobs=args.jobs)
    manifest_path = Path(args.out) / MANIFEST_NAME
    run.add_output(manifest_path)
    _print_json(
        {
            "manifest": str(manifest_path),
            "utterances": len(manifest),
            "phonemes": sum(len(e.phonemes) for e in manifest),
            "inventory": manifest.phoneme_symbols(),
        }
    )
    return 0


def cmd_features(args: argparse.Namespace, config: PipelineConfig, run: RunRecord) -> int:
    kind = args.kind or config.feature_kind
    extractor = FeatureExtractor(kind, config.features)
    manifest = read_manifest(args.manifest)
    run.add_input(args.manifest)
    out = Path(args.out) if args.out else args.workspace_path / "features" / kind
    out.mkdir(parents=True, exist_ok=True)
    features, failures = extract_corpus(
        manifest, extractor, jobs=args.jobs, progress=args.progress
    )
    for utterance_id, matrix in features.items():
        save_features(matrix, feature_path(out, utterance_id))
    run.add_output(out)
    _print_json({"kind": kind, "out": str(out), "written": len(features), "failures": failures})
    if failures:
        for utterance_id, message in sorted(failures.items()):
            print(f"{utterance_id}: {message}", file=sys.stderr)
        return 1
    return 0


def cmd_train_asr(args: argparse.Namespace, config: PipelineConfig, run: RunRecord) -> int:
    manifest = read_manifest(args.manifest)
    run.add_input(args.manifest)
    kind = args.kind or config.feature_kind
    features_dir = Path(args.features) if args.features else args.workspace_path / "features" / kind
    run.add_input(features_dir)
    features = load_corpus(manifest, features_dir, latent=kind == "latent")
    out = Path(args.out) if args.out else args.workspace_path / "checkpoints"
    result = train_asr(
        manifest,
        features,
        PhonemeInventory.from_manifest(manifest),
        config.asr,
        checkpoint_dir=out,
        feature_config=config.features,
        progress=args.progress,
    )
    curve = _write_json(
        {"loss_curve": result.loss_curve, "skipped": result.skipped},
        args.workspace_path / "reports" / "asr_loss.json",
    )
    run.add_output(out / "asr.tnsr")
    run.add_output(curve)
    _print_json(
        {
            "checkpoint": str(out / "asr"),
            "epochs": len(result.loss_curve),
            "first_loss": result.loss_curve[0],
            "final_loss": result.loss_curve[-1],
            "skipped": result.skipped,
        }
    )
    return 0


def cmd_align(args: argparse.Namespace, config: PipelineConfig, run: RunRecord) -> int:
    manifest = read_manifest(args.manifest)
    run.add_input(args.manifest)
    out = Path(args.out) if args.out else args.workspace_path / "alignments" / "alignments.jsonl"
    out.parent.mkdir(parents=True, exist_ok=True)

    if args.from_manifest:
        records = alignments_from_manifest(manifest, config.features.frame_hop_seconds)
        summary: dict[str, Any] = {"utterances": len(manifest), "aligned": len(records)}
    else:
        checkpoint = (
            Path(args.checkpoint)
            if args.checkpoint
            else args.workspace_path / "checkpoints" / "asr"
        )
        run.add_input(checkpoint.with_suffix(".tnsr"))
        model, _ = AsrModel.load(checkpoint)
        features = None
        if args.features:
            run.add_input(args.features)
            features = load_corpus(manifest, args.features, latent=model.feature_kind == "latent")
        result = align_corpus(
            model,
            manifest,
            args.policy or config.align_policy,
            features=features,
            jobs=args.jobs,
            progress=args.progress,
        )
        records = result.records
        assert result.summary is not None
        summary = {**result.summary.to_dict(), "failures": result.failures}

    write_alignments(records, out)
    tsv = Path(args.tsv) if args.tsv else out.with_suffix(".tsv")
    write_alignment_tsv(records, tsv)
    report = _write_json(summary, args.workspace_path / "reports" / f"{out.stem}_summary.json")
    for path in (out, tsv, report):
        run.add_output(path)
    _print_json(summary)
    return 0


def cmd_train_duration(args: argparse.Namespace, config: PipelineConfig, run: RunRecord) -> int:
    manifest = read_manifest(args.manifest)
    run.add_input(args.manifest)
    alignments = (
        Path(args.alignments)
        if args.alignments
        else args.workspace_path / "alignments" / "alignments.jsonl"
    )
    run.add_input(alignments)
    records = read_alignments(alignments)
    targets = None
    if args.targets:
        run.add_input(args.targets)
        covered = manifest.subset(r.utterance_id for r in records)
        targets = load_corpus(covered, args.targets, latent=True)
    out = Path(args.out) if args.out else args.workspace_path / "checkpoints"
    result = train_duration_model(
        records,
        manifest,
        config.duration,
        targets=targets,
        checkpoint_dir=out,
        progress=args.progress,
    )
    report = _write_json(
        {**result.report.to_dict(), "loss_curve": result.loss_curve},
        args.workspace_path / "reports" / "duration_report.json",
    )
    run.add_output(out / "duration.tnsr")
    run.add_output(report)

    if args.compare:
        by_id = {r.utterance_id: r for r in records}
        if args.compare not in by_id:
            raise ConfigurationError(f"--compare: no alignment for {args.compare!r}")
        record = by_id[args.compare]
        entry = manifest[args.compare]
        rows: dict[str, Any] = {}
        if entry.reference_durations is not None:
            rows["external"] = entry.reference_durations
        rows[record.method] = record
        rows["predicted"] = predict_durations(result.model, record.phonemes, record.styles)
        comparison = args.workspace_path / "reports" / f"duration_comparison_{args.compare}.tsv"
        write_duration_comparison(rows, record.phonemes, comparison)
        run.add_output(comparison)

    _print_json(result.report.to_dict())
    return 0


def _read_hypotheses(path: Path) -> dict[str, list[str]]:
    """``utterance_id<TAB>symbol symbol ...`` per line."""
    hypotheses = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        utterance_id, _, symbols = line.partition("\t")
        hypotheses[utterance_id] = symbols.split()
    return hypotheses


def cmd_eval(args: argparse.Namespace, config: PipelineConfig, run: RunRecord) -> int:
    manifest = read_manifest(args.manifest)
    run.add_input(args.manifest)

    hypotheses = None
    if args.hypotheses:
        run.add_input(args.hypotheses)
        hypotheses = _read_hypotheses(Path(args.hypotheses))
    elif args.asr_checkpoint:
        run.add_input(Path(args.asr_checkpoint).with_suffix(".tnsr"))
        model, _ = AsrModel.load(args.asr_checkpoint)
        features = _load_stage_features(
            manifest,
            model.feature_kind,
            model.feature_config or config.features,
            Path(args.features) if args.features else None,
            args.jobs,
            args.progress,
        )
        hypotheses = {u: decode_greedy(model, matrix) for u, matrix in features.items()}

    alignments = None
    if args.alignments:
        run.add_input(args.alignments)
        alignments = read_alignments(args.alignments)

    cepstra = None
    if args.reference_cepstra or args.hypothesis_cepstra:
        if not (args.reference_cepstra and args.hypothesis_cepstra):
            raise ConfigurationError(
                "--reference-cepstra and --hypothesis-cepstra must be given together"
            )
        run.add_input(args.reference_cepstra)
        run.add_input(args.hypothesis_cepstra)
        cepstra = {}
        for path in sorted(Path(args.hypothesis_cepstra).glob("*.feat")):
            reference = feature_path(args.reference_cepstra, path.stem)
            cepstra[path.stem] = (load_features(reference), load_features(path))

    if hypotheses is None and alignments is None and cepstra is None:
        raise ConfigurationError(
            "Nothing to evaluate: give --alignments, --hypotheses, --asr-checkpoint or cepstra"
        )
    report = evaluate_corpus(
        manifest,
        hypotheses=hypotheses,
        alignments=alignments,
        cepstra=cepstra,
        use_dtw=not args.no_dtw,
    )
    out = Path(args.out) if args.out else args.workspace_path / "reports" / "eval.json"
    _write_json(report.summary, out)
    write_evaluation_tsv(report, out.with_suffix(".tsv"))
    run.add_output(out)
    run.add_output(out.with_suffix(".tsv"))
    _print_json(report.summary)
    return 0


def cmd_ablation(args: argparse.Namespace, config: PipelineConfig, run: RunRecord) -> int:
    manifest = read_manifest(args.manifest)
    run.add_input(args.manifest)
    train, test = manifest.split(args.test_count)
    kinds = list(args.kinds)
    if args.latent_dir:
        run.add_input(args.latent_dir)
        kinds.append("latent")
    inventory = PhonemeInventory.from_manifest(manifest)
    policy = args.policy or config.align_policy

    results: dict[str, Any] = {}
    for kind in kinds:
        logger.info("Ablation run for %s features", kind)
        directory = Path(args.latent_dir) if kind == "latent" else None
        features = _load_stage_features(
            manifest, kind, config.features, directory, args.jobs, args.progress
        )
        trained = train_asr(
            train,
            {u: features[u] for u in train.utterance_ids},
            inventory,
            config.asr,
            checkpoint_dir=args.workspace_path / "checkpoints" / f"ablation-{kind}",
            feature_config=config.features,
            progress=args.progress,
        )
        aligned = align_corpus(
            trained.model,
            test,
            policy,
            features={u: features[u] for u in test.utterance_ids},
            jobs=args.jobs,
        )
        boundary = boundary_accuracy(aligned.records, test)
        assert aligned.summary is not None
        results[kind] = {
            "final_loss": trained.loss_curve[-1],
            "mismatch_rate": aligned.summary.mismatch_rate,
            "boundary": boundary.to_dict(),
        }
    report: dict[str, Any] = {
        "train": len(train),
        "test": len(test),
        "policy": policy,
        "results": results,
    }
    if "melspec" in results and "mfcc" in results:
        # reported, not enforced
        melspec = results["melspec"]["boundary"]["within_2"]
        mfcc = results["mfcc"]["boundary"]["within_2"]
        if melspec is not None and mfcc is not None:
            report["melspec_at_least_mfcc"] = melspec >= mfcc
        if report.get("melspec_at_least_mfcc") is False:
            logger.info("MFCC boundary accuracy %.1f exceeds MelSpec %.1f", mfcc, melspec)
    out = _write_json(report, args.workspace_path / "reports" / "ablation.json")
    run.add_output(out)
    _print_json(results)
    return 0


# --- parser ---


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="Pipeline TOML config")
    parser.add_argument("--workspace", help="Workspace directory")
    parser.add_argument("--seed", type=int, help="Override the config seed")
    parser.add_argument(
        "--jobs",
        type=int,
        default=os.cpu_count() or 1,
        help="Worker threads for per-utterance stages",
    )
    parser.add_argument("--progress", action="store_true", help="Show progress bars")
    parser.add_argument(
        "-v", "--verbose", action="count", default=0, help="-v for INFO, -vv for DEBUG"
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="duration-aligner",
        description=__doc__,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="Generate a synthetic tone corpus")
    p.add_argument("--spec", required=True, help="Corpus spec (.toml or .json)")
    p.add_argument("--out", required=True, help="Output corpus directory")
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("features", help="Extract feature files")
    p.add_argument("--manifest", required=True)
    p.add_argument("--kind", choices=("melspec", "mfcc", "latent"))
    p.add_argument("--out", help="Feature directory (default: workspace/features/<kind>)")
    p.set_defaults(handler=cmd_features)

    p = sub.add_parser("train-asr", help="Train the CTC acoustic model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--features", help="Feature directory (default: workspace/features/<kind>)")
    p.add_argument("--kind", choices=("melspec", "mfcc", "latent"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--hidden-dim", type=int)
    p.add_argument("--out", help="Checkpoint directory (default: workspace/checkpoints)")
    p.set_defaults(handler=cmd_train_asr)

    p = sub.add_parser("align", help="Align a corpus to phoneme durations")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", help="ASR checkpoint (default: workspace/checkpoints/asr)")
    p.add_argument("--features", help="Precomputed feature directory")
    p.add_argument("--policy", choices=ALIGNMENT_POLICIES)
    p.add_argument(
        "--from-manifest",
        action="store_true",
        help="Export manifest reference durations as external alignments",
    )
    p.add_argument("--out", help="Alignment file (default: workspace/alignments/alignments.jsonl)")
    p.add_argument("--tsv", help="TSV export (default: next to --out)")
    p.set_defaults(handler=cmd_align)

    p = sub.add_parser("train-duration", help="Train the duration predictor")
    p.add_argument("--manifest", required=True)
    p.add_argument("--alignments", help="Alignment file")
    p.add_argument("--targets", help="Directory of M x T target feature files")
    p.add_argument("--epochs", type=int)
    p.add_argument("--compare", help="Write a duration comparison table for this utterance")
    p.add_argument("--out", help="Checkpoint directory (default: workspace/checkpoints)")
    p.set_defaults(handler=cmd_train_duration)

    p = sub.add_parser("eval", help="Compute WER, MCD and boundary accuracy")
    p.add_argument("--manifest", required=True)
    p.add_argument("--alignments", help="Alignment file to score against reference durations")
    p.add_argument("--hypotheses", help="TSV of utterance id and space-separated symbols")
    p.add_argument("--asr-checkpoint", help="Decode hypotheses with this acoustic model")
    p.add_argument("--features", help="Feature directory for --asr-checkpoint")
    p.add_argument("--reference-cepstra", help="Directory of reference MFCC feature files")
    p.add_argument("--hypothesis-cepstra", help="Directory of hypothesis MFCC feature files")
    p.add_argument("--no-dtw", action="store_true", help="Truncate instead of DTW for MCD")
    p.add_argument("--out", help="Report JSON (default: workspace/reports/eval.json)")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("ablation", help="Compare feature kinds end to end")
    p.add_argument("--manifest", required=True)
    p.add_argument("--test-count", type=int, default=50)
    p.add_argument("--kinds", nargs="+", choices=("melspec", "mfcc"), default=["melspec", "mfcc"])
    p.add_argument("--latent-dir", help="Directory of latent feature files to include")
    p.add_argument("--policy", choices=ALIGNMENT_POLICIES)
    p.add_argument("--epochs", type=int)
    p.set_defaults(handler=cmd_ablation)

    for subparser in sub.choices.values():
        _add_common(subparser)
    return parser


def _configure_logging(verbosity: int) -> None:
    level = logging.WARNING if verbosity == 0 else logging.INFO if verbosity == 1 else logging.DEBUG
    logging.basicConfig(
        level=level, format="%(asctime)s %(name)s %(levelname)s: %(message)s"
    )


def _report_error(error: BaseException) -> None:
    print(
        json.dumps({"error": type(error).__name__, "message": str(error)}, ensure_ascii=False),
        file=sys.stderr,
    )


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    _configure_logging(args.verbose)

    handler: Callable[[argparse.Namespace, PipelineConfig, RunRecord], int] = args.handler
    try:
        epochs = getattr(args, "epochs", None)
        stage = "duration" if args.command == "train-duration" else "asr"
        config = load_config(args.config).with_overrides(
            seed=args.seed,
            asr_batch_size=getattr(args, "batch_size", None),
            asr_hidden_dim=getattr(args, "hidden_dim", None),
            **{f"{stage}_epochs": epochs},
        )
        args.workspace_path = resolve_workspace(args.workspace, config)
        run = RunRecord(args.command, argv, config)
        run.add_input(args.config)
        status = handler(args, config, run)
        run.write(args.workspace_path)
        return status
    except ConfigurationError as e:
        _report_error(e)
        return 2
    except (AlignerError, OSError) as e:
        logger.debug("Stage failed", exc_info=True)
        _report_error(e)
        return 1


if __name__ == "__main__":
    sys.exit(main())
