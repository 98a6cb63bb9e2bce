"""Command-line front door for the generation and evaluation pipelines.

Exit codes: 0 success, 1 partial (some items failed, outputs written),
2 configuration or usage error, 3 backend/auth failure. Progress goes to
stderr; data goes only to files or stdout.
"""

from __future__ import annotations

import logging
import sys
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import click

from . import dataset_io
from .benchgen import ChainFailure, build_chain
from .client import (
    AuthError,
    ClientError,
    MockClient,
    RemoteClient,
    TransportError,
    load_mock_script,
)
from .config import ConfigError, GenerationConfig, load_config
from .core import ImageRef
from .evaluate import compute_task_metrics, evaluate_chain, format_report_table, metrics_report
from .mcts import extract_top_k, run_search

log = logging.getLogger("hiervqa")

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_USAGE = 2
EXIT_BACKEND = 3


def _setup_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
        force=True,
    )


def _load_config_or_exit(config_path: str | None) -> GenerationConfig:
    try:
        return load_config(config_path)
    except (ConfigError, OSError) as exc:
        raise click.UsageError(str(exc)) from exc


def _make_backend(mock_path: str | None, config: GenerationConfig):
    if mock_path:
        return MockClient(load_mock_script(mock_path))
    try:
        return RemoteClient.from_env(config.client)
    except AuthError as exc:
        log.error("%s", exc)
        sys.exit(EXIT_BACKEND)


def _pool_size(parallel: int, mock_path: str | None) -> int:
    # A shared mock script must be consumed in a deterministic order.
    return 1 if mock_path else max(1, parallel)


@click.group()
@click.option("--verbose", is_flag=True, help="Debug logging on stderr.")
def main(verbose: bool) -> None:
    """Hierarchical visual QA pipelines: generate, search, evaluate, report.

    \b
    Exit codes:
      0  success
      1  partial: some items failed, outputs written
      2  configuration or usage error
      3  backend or auth failure
    """
    _setup_logging(verbose)


_templates_option = click.option(
    "--templates",
    "templates_dir",
    type=click.Path(exists=True, file_okay=False),
    help="Directory of per-template .txt overrides.",
)


@main.command("gen-bench")
@click.option("--sources", "sources_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--mock", "mock_path", type=click.Path(exists=True, dir_okay=False))
@_templates_option
@click.option("--seed", default=0, show_default=True)
@click.option("--parallel", default=4, show_default=True)
def cmd_gen_bench(sources_path, out_path, config_path, mock_path, templates_dir, seed, parallel) -> None:
    """Build validated three-level chains from raw source anchors."""
    config = _load_config_or_exit(config_path)
    try:
        sources = dataset_io.load_raw_sources(sources_path)
    except (dataset_io.FormatError, OSError) as exc:
        raise click.UsageError(f"{sources_path}: {exc}") from exc
    backend = _make_backend(mock_path, config)

    def _one(indexed):
        index, raw = indexed
        stem = Path(raw.image.path_or_uri).stem or "item"
        return build_chain(
            backend, raw, config, item_id=f"{stem}-{index:04d}", overrides_dir=templates_dir
        )

    try:
        with ThreadPoolExecutor(max_workers=_pool_size(parallel, mock_path)) as pool:
            results = list(pool.map(_one, enumerate(sources)))
    except AuthError as exc:
        log.error("%s", exc)
        sys.exit(EXIT_BACKEND)
    except ClientError as exc:
        log.error("backend failure: %s", exc)
        sys.exit(EXIT_BACKEND)

    items = [r for r in results if not isinstance(r, ChainFailure)]
    failures = [(i, r) for i, r in enumerate(results) if isinstance(r, ChainFailure)]
    dataset_io.save_benchmark(items, out_path)
    if failures:
        dataset_io.write_jsonl(
            (
                {
                    "schema_version": dataset_io.SCHEMA_VERSION,
                    "source_index": i,
                    "image": sources[i].image.path_or_uri,
                    "stage": f.stage,
                    "attempts": f.attempts,
                    "last_reason": f.last_reason,
                }
                for i, f in failures
            ),
            f"{out_path}.failures.jsonl",
        )

    histogram: Counter[int] = Counter()
    for item in items:
        for stage in ("l2", "l1"):
            histogram[len(item.provenance[stage]["attempts"])] += 1
    log.info("chains: %d ok, %d failed (seed=%d)", len(items), len(failures), seed)
    log.info(
        "pass rate %.1f%%; stage-attempt histogram %s",
        100.0 * len(items) / len(sources) if sources else 100.0,
        dict(sorted(histogram.items())),
    )
    sys.exit(EXIT_PARTIAL if failures else EXIT_OK)


def _read_image_list(path: str) -> list[ImageRef]:
    refs = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if line:
            refs.append(ImageRef(path_or_uri=line))
    return refs


@main.command("gen-sft")
@click.option("--images", "images_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out-dir", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--mock", "mock_path", type=click.Path(exists=True, dir_okay=False))
@_templates_option
@click.option("--flat", is_flag=True, help="One record per QA pair instead of per conversation.")
@click.option("--seed", default=0, show_default=True)
@click.option("--parallel", default=4, show_default=True)
def cmd_gen_sft(images_path, out_dir, config_path, mock_path, templates_dir, flat, seed, parallel) -> None:
    """Search a QA tree per image and export the top-ranked chains."""
    config = _load_config_or_exit(config_path)
    images = _read_image_list(images_path)
    backend = _make_backend(mock_path, config)
    out = Path(out_dir)
    trees_dir = out / "trees"

    def _one(image: ImageRef):
        stem = Path(image.path_or_uri).stem or "image"
        try:
            tree = run_search(backend, image, config.mcts, overrides_dir=templates_dir)
        except ClientError as exc:
            partial = getattr(exc, "partial_tree", None)
            if partial is not None:
                dataset_io.checkpoint_tree(
                    partial, trees_dir / f"{stem}.partial.json", config.to_dict()["mcts"]
                )
            raise
        paths = extract_top_k(tree, config.mcts.top_k)
        return tree, paths

    try:
        with ThreadPoolExecutor(max_workers=_pool_size(parallel, mock_path)) as pool:
            results = list(pool.map(_one, images))
    except AuthError as exc:
        log.error("%s", exc)
        sys.exit(EXIT_BACKEND)
    except ClientError as exc:
        log.error("backend failure; partial trees are checkpointed: %s", exc)
        sys.exit(EXIT_BACKEND)

    conversations = []
    checkpoints = []
    for image, (tree, paths) in zip(images, results):
        stem = Path(image.path_or_uri).stem or "image"
        checkpoint_path = trees_dir / f"{stem}.json"
        dataset_io.checkpoint_tree(tree, checkpoint_path, config.to_dict()["mcts"])
        checkpoints.append(str(checkpoint_path.relative_to(out)))
        conversations.extend(dataset_io.export_sft(paths, tree, image))

    conversations_path = out / ("qa_pairs.jsonl" if flat else "conversations.jsonl")
    dataset_io.write_conversations(conversations, conversations_path, flat=flat)

    manifest = {
        "schema_version": dataset_io.SCHEMA_VERSION,
        "seed": seed,
        "backend": "mock" if mock_path else getattr(backend, "model", "remote"),
        "flat": bool(flat),
        "config": config.to_dict(),
        "images": [i.path_or_uri for i in images],
        "checkpoints": checkpoints,
        "conversations": conversations_path.name,
        "counts": {
            "images": len(images),
            "conversations": len(conversations),
            "qa_pairs": 3 * len(conversations),
        },
    }
    dataset_io.write_json(manifest, out / "manifest.json")
    if not conversations:
        log.warning("no complete chains were extracted; export is empty")
    log.info("wrote %d conversations for %d images", len(conversations), len(images))
    sys.exit(EXIT_OK)


@main.command("evaluate")
@click.option("--bench", "bench_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--setting", type=click.Choice(["base", "context"]), default="base", show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--mock", "mock_path", type=click.Path(exists=True, dir_okay=False))
@_templates_option
@click.option("--parallel", default=4, show_default=True)
def cmd_evaluate(bench_path, setting, out_dir, config_path, mock_path, templates_dir, parallel) -> None:
    """Evaluate a backend on a benchmark file; resumable per chain."""
    config = _load_config_or_exit(config_path)
    try:
        items = dataset_io.load_benchmark(bench_path)
    except dataset_io.FormatError as exc:
        raise click.UsageError(f"{bench_path}: {exc}") from exc
    backend = _make_backend(mock_path, config)
    out = Path(out_dir)
    outcomes_path = out / f"outcomes.{setting}.jsonl"

    done = {}
    if outcomes_path.exists():
        done = {c.item_id: c for c in dataset_io.load_outcomes(outcomes_path)}
        log.info("resuming: %d of %d chains already evaluated", len(done), len(items))
    pending = [item for item in items if item.id not in done]

    chains = list(done.values())
    exit_code = EXIT_OK
    try:
        with ThreadPoolExecutor(max_workers=_pool_size(parallel, mock_path)) as pool:
            for chain in pool.map(
                lambda it: evaluate_chain(backend, it, setting, overrides_dir=templates_dir),
                pending,
            ):
                dataset_io.append_outcome(chain, outcomes_path)
                chains.append(chain)
    except AuthError as exc:
        log.error("%s", exc)
        sys.exit(EXIT_BACKEND)
    except (TransportError, ClientError) as exc:
        log.error("backend failure mid-run; completed chains are checkpointed: %s", exc)
        sys.exit(EXIT_BACKEND)

    by_task: dict[str, list] = {}
    for chain in chains:
        by_task.setdefault(chain.task, []).append(chain)
    metrics = {task: compute_task_metrics(group) for task, group in by_task.items()}
    report = metrics_report(metrics)
    report = {"schema_version": report.pop("schema_version"), "setting": setting, **report}
    dataset_io.write_json(report, out / f"report.{setting}.json")
    table = format_report_table(report)
    (out / f"report.{setting}.txt").write_text(table, encoding="utf-8")
    click.echo(table, nl=False)
    sys.exit(exit_code)


@main.command("report")
@click.argument("outcome_files", nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_path", type=click.Path(dir_okay=False), help="Also write the report JSON here.")
def cmd_report(outcome_files, out_path) -> None:
    """Merge outcome files into per-task and per-aspect tables plus the score."""
    chains = []
    for path in outcome_files:
        try:
            chains.extend(dataset_io.load_outcomes(path))
        except dataset_io.FormatError as exc:
            raise click.UsageError(f"{path}: {exc}") from exc
    if not chains:
        raise click.UsageError("no outcomes found in the given files")
    by_task: dict[str, list] = {}
    for chain in chains:
        by_task.setdefault(chain.task, []).append(chain)
    metrics = {task: compute_task_metrics(group) for task, group in by_task.items()}
    report = metrics_report(metrics)
    if out_path:
        dataset_io.write_json(report, out_path)
    click.echo(format_report_table(report), nl=False)
    sys.exit(EXIT_OK)


if __name__ == "__main__":
    main()
