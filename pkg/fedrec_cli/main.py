"""fedrec CLI entrypoint: config-driven experiments and the per-module subcommands."""

from __future__ import annotations

import json
import logging
import os
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

import typer

app = typer.Typer(help="Two-stage recommender toolkit: CCO candidates and federated CTR ranking.")

EXIT_RUNTIME = 1
EXIT_INVALID = 2

_THREAD_ENV = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")

ConfigOption = typer.Option(..., "--config", "-c", help="Experiment config (JSON or YAML).")
SeedOption = typer.Option(None, "--seed", help="Override the config seed.")
ThreadsOption = typer.Option(None, "--threads", help="Worker threads; 1 forces the reproducible path.")
OutOption = typer.Option(None, "--out", help="Output root (run directories are named by config hash).")
DebugOption = typer.Option(False, "--debug", help="Verbose logging (same as FEDREC_DEBUG=1).")


def _prepare(threads: Optional[int], debug: bool) -> None:
    # BLAS pools are sized at import; set before numpy loads.
    if threads is not None:
        for var in _THREAD_ENV:
            os.environ.setdefault(var, str(threads))
    from fedrec_core import setup_logging

    setup_logging(logging.DEBUG if debug else None)


def _load_config(
    path: Path,
    seed: Optional[int],
    threads: Optional[int],
    out: Optional[str],
    extra: Optional[Dict[str, Any]] = None,
    stages: Optional[tuple] = None,
):
    from pydantic import ValidationError

    from fedrec_core.config import cli_overrides, deep_merge, load_experiment_config

    overrides = cli_overrides(seed=seed, threads=threads, out=out)
    if extra:
        overrides = deep_merge(overrides, extra)
    try:
        config = load_experiment_config(path, overrides)
    except FileNotFoundError as e:
        typer.echo(str(e), err=True)
        raise typer.Exit(code=EXIT_INVALID) from e
    except (ValidationError, ValueError) as e:
        typer.echo(f"Invalid config {path}:\n{e}", err=True)
        raise typer.Exit(code=EXIT_INVALID) from e
    if stages is not None and config.stage not in stages:
        typer.echo(f"{path}: stage '{config.stage}' cannot be used here (expected one of {list(stages)})", err=True)
        raise typer.Exit(code=EXIT_INVALID)
    return config


def _guard(fn: Callable[[], Any]) -> Any:
    """Runtime failures exit 1 with the message on stderr."""
    try:
        return fn()
    except typer.Exit:
        raise
    except Exception as e:  # noqa: BLE001
        logging.getLogger("fedrec_core").debug("Run failed", exc_info=True)
        typer.echo(f"Run failed: {e}", err=True)
        raise typer.Exit(code=EXIT_RUNTIME) from e


def _present_outcome(outcome) -> None:
    from fedrec_core.display import DataTable, PanelSection

    report = outcome.report
    rows = [{"metric": k, "value": v} for k, v in report["metrics"].items() if not isinstance(v, (dict, list))]
    DataTable.from_records(rows, title=f"{report['experiment']} ({report['config_hash']})").present()
    PanelSection("Outputs", str(outcome.run_dir)).present()


def _run_with_progress(config) -> Any:
    from rich.progress import Progress

    from fedrec_core.display import console
    from fedrec_core.pipeline import run_experiment

    if config.stage != "ctr-federated" or config.rounds.rounds == 0:
        return run_experiment(config)
    with Progress(console=console, transient=True) as progress:
        task = progress.add_task("Federated rounds", total=config.rounds.rounds)
        return run_experiment(config, on_round=lambda _record: progress.advance(task))


@app.command("run")
def run(
    config: Path = ConfigOption,
    seed: Optional[int] = SeedOption,
    threads: Optional[int] = ThreadsOption,
    out: Optional[str] = OutOption,
    debug: bool = DebugOption,
) -> None:
    """Execute the configured experiment end to end and write its report files."""
    _prepare(threads, debug)
    cfg = _load_config(config, seed, threads, out)
    _present_outcome(_guard(lambda: _run_with_progress(cfg)))


@app.command("ingest")
def ingest(
    data: Path = typer.Option(..., "--data", "-d", help="Directory holding ratings.dat, users.dat, movies.dat."),
    out: Optional[Path] = typer.Option(None, "--out", help="Write the event log as NDJSON."),
    item_properties: bool = typer.Option(False, "--item-properties", help="Add genre/year/title indicators."),
    user_properties: bool = typer.Option(False, "--user-properties", help="Add gender/age/occupation/zip indicators."),
    debug: bool = DebugOption,
) -> None:
    """Parse MovieLens 1M and summarise it; optionally export the indicator event log."""
    _prepare(None, debug)

    def _ingest() -> None:
        from fedrec_core.display import DataTable
        from fedrec_core.ingest import build_event_log, export_event_log, parse_movielens_dir

        dataset = parse_movielens_dir(data)
        DataTable.from_records(
            [{"field": k, "count": v} for k, v in dataset.summary().items()], title="MovieLens"
        ).present()
        if out is not None:
            log = build_event_log(dataset, item_properties=item_properties, user_properties=user_properties)
            export_event_log(log, out)
            DataTable.from_records(
                [{"indicator": n, "pairs": len(log.pairs(n))} for n in log.names()], title="Event log"
            ).present()
            typer.echo(str(out))

    _guard(_ingest)


@app.command("cco-build")
def cco_build(
    config: Path = ConfigOption,
    query_user: Optional[str] = typer.Option(None, "--user", help="Print recommendations for this user."),
    k: int = typer.Option(10, "--k", min=1, help="Recommendations per query."),
    seed: Optional[int] = SeedOption,
    out: Optional[str] = OutOption,
    debug: bool = DebugOption,
) -> None:
    """Fit CCO on the full dataset and write the similarity matrices as JSON lines."""
    _prepare(None, debug)
    cfg = _load_config(config, seed, None, out, stages=("cco",))
    if cfg.model != "cco":
        typer.echo("cco-build needs model 'cco'", err=True)
        raise typer.Exit(code=EXIT_INVALID)

    def _build() -> None:
        from fedrec_core.cco import save_similarity
        from fedrec_core.config import run_directory
        from fedrec_core.pipeline import fit_cco, load_dataset

        recommender = fit_cco(cfg, load_dataset(cfg))
        path = save_similarity(recommender.similarity, run_directory(cfg) / "similarity.jsonl")
        typer.echo(str(path))
        if query_user is not None:
            answer = recommender.answer_query({"user": query_user, "k": k, "exclude_seen": True})
            typer.echo(json.dumps(answer, indent=2))

    _guard(_build)


@app.command("cco-eval")
def cco_eval(
    config: Path = ConfigOption,
    seed: Optional[int] = SeedOption,
    threads: Optional[int] = ThreadsOption,
    out: Optional[str] = OutOption,
    debug: bool = DebugOption,
) -> None:
    """Leave-one-out HR@k / NDCG@k for PopRec or CCO."""
    _prepare(threads, debug)
    cfg = _load_config(config, seed, threads, out, stages=("cco",))
    _present_outcome(_guard(lambda: _run_with_progress(cfg)))


@app.command("ctr-train")
def ctr_train(
    config: Path = ConfigOption,
    seed: Optional[int] = SeedOption,
    threads: Optional[int] = ThreadsOption,
    out: Optional[str] = OutOption,
    debug: bool = DebugOption,
) -> None:
    """Centralized CTR training with test AUC and LogLoss."""
    _prepare(threads, debug)
    cfg = _load_config(config, seed, threads, out, stages=("ctr-central",))
    _present_outcome(_guard(lambda: _run_with_progress(cfg)))


@app.command("fed-train")
def fed_train(
    config: Path = ConfigOption,
    plan: Optional[List[str]] = typer.Option(
        None, "--plan", help="Parameter group to federate (repeatable): embedding, interaction, output or all."
    ),
    rounds: Optional[int] = typer.Option(None, "--rounds", min=0, help="Override the number of rounds."),
    seed: Optional[int] = SeedOption,
    threads: Optional[int] = ThreadsOption,
    out: Optional[str] = OutOption,
    debug: bool = DebugOption,
) -> None:
    """Simulated FedAvg training; writes history.csv and history.json."""
    _prepare(threads, debug)
    extra: Dict[str, Any] = {}
    if plan:
        from fedrec_core.config import GROUP_NAMES

        groups = list(GROUP_NAMES) if "all" in plan else list(plan)
        extra.setdefault("rounds", {})["federation_plan"] = groups
    if rounds is not None:
        extra.setdefault("rounds", {})["rounds"] = rounds
    cfg = _load_config(config, seed, threads, out, extra=extra, stages=("ctr-federated",))
    _present_outcome(_guard(lambda: _run_with_progress(cfg)))


@app.command("features-extract")
def features_extract(
    sensor: Path = typer.Argument(..., help="CSV with timestamp, acc_x..acc_z, gyro_x..gyro_z."),
    out: Path = typer.Option(Path("features.csv"), "--out", help="Output CSV (one 112-feature row per session)."),
    debug: bool = DebugOption,
) -> None:
    """Session windowing and the 112-dimensional handcrafted embedding."""
    _prepare(None, debug)

    def _extract() -> None:
        from fedrec_core import atomic_write_text
        from fedrec_core.sensor import embed_stream, load_sensor_csv

        timestamps, values = load_sensor_csv(sensor)
        frame = embed_stream(timestamps, values)
        atomic_write_text(out, frame.to_csv(index=False))
        typer.echo(f"{len(frame)} sessions -> {out}")

    _guard(_extract)


@app.command("report")
def report(
    paths: List[Path] = typer.Argument(..., help="report.json files or run directories."),
    with_baselines: bool = typer.Option(False, "--with-baselines", help="Append published reference rows."),
    out: Optional[Path] = typer.Option(None, "--out", help="Write the merged table as CSV."),
    debug: bool = DebugOption,
) -> None:
    """Merge run reports into one comparison table."""
    _prepare(None, debug)

    def _merge() -> None:
        from fedrec_core import atomic_write_text
        from fedrec_core.display import DataTable
        from fedrec_core.pipeline import merge_reports

        frame = merge_reports(paths, with_baselines=with_baselines)
        records = frame.where(frame.notna(), "").to_dict(orient="records")
        DataTable.from_records(records, title="Runs").present()
        if out is not None:
            atomic_write_text(out, frame.to_csv(index=False))
            typer.echo(str(out))

    _guard(_merge)


def main() -> None:
    app()


if __name__ == "__main__":
    main()
