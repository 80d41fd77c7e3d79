"""
Command Line Interface for Ambient Align
"""

import logging
import time
from pathlib import Path
from typing import Callable, Optional, Tuple

import click
from rich.console import Console
from rich.logging import RichHandler
from rich.panel import Panel
from rich.progress import Progress, SpinnerColumn, TextColumn
from rich.table import Table

from .. import pipeline
from ..config import RunConfig, load_config
from ..errors import ConfigError

console = Console()

EXIT_RUNTIME = 1
EXIT_USAGE = 2


def _configure_logging(verbose: bool, quiet: bool):
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, format="%(message)s", datefmt="[%X]",
                        handlers=[RichHandler(console=console, show_path=verbose)], force=True)


@click.group()
@click.option('--verbose', '-v', is_flag=True, help='Debug logging and full tracebacks')
@click.option('--quiet', '-q', is_flag=True, help='Only log warnings and errors')
@click.pass_context
def cli(ctx: click.Context, verbose: bool, quiet: bool):
    """Ambient Align - cross-modal alignment of exocentric video and ambient sensors."""
    ctx.ensure_object(dict)
    ctx.obj["verbose"] = verbose
    _configure_logging(verbose, quiet)


def run_options(f):
    """--config, --set and --output-dir, shared by every pipeline command."""
    f = click.option('--output-dir', '-o', help='Run directory (default: $AMBIENT_ALIGN_OUTPUT or ./runs)')(f)
    f = click.option('--set', 'overrides', multiple=True, metavar='KEY=VALUE',
                     help='Override a config entry, e.g. --set stage2.lambda_hard=2.5')(f)
    f = click.option('--config', '-c', 'config_path', type=click.Path(dir_okay=False),
                     help='JSON run configuration')(f)
    return f


def _execute(ctx: click.Context, command: str, config_path: Optional[str], overrides: Tuple[str, ...],
             output_dir: Optional[str], step: Callable[[RunConfig, Path], object],
             extra: Optional[dict] = None):
    """Load config, run one pipeline step under a spinner and record it in run.json."""
    started = time.time()
    try:
        config = load_config(config_path, overrides)
        root = config.resolve_output_dir(output_dir)
        with Progress(SpinnerColumn(), TextColumn("[progress.description]{task.description}"),
                      console=console, transient=True) as progress:
            progress.add_task(f"Running {command}...", total=None)
            result = step(config, root)
        pipeline.write_run_record(root, command, config, started, extra)
    except (ConfigError, FileNotFoundError) as e:
        console.print(f"[red]Error: {e}[/red]")
        ctx.exit(EXIT_USAGE)
    except Exception as e:
        if ctx.obj.get("verbose"):
            console.print_exception()
        console.print(f"[red]Error during {command}: {e}[/red]")
        ctx.exit(EXIT_RUNTIME)
    return config, root, result


def _key_value_table(title: str, rows) -> Table:
    table = Table(title=title, show_header=False, box=None)
    table.add_column("Property", style="cyan")
    table.add_column("Value", style="white")
    for key, value in rows:
        table.add_row(key, value)
    return table


def _warn_all(warnings):
    for warning in warnings:
        console.print(f"[yellow]⚠ {warning}[/yellow]")


@cli.command()
@run_options
@click.pass_context
def generate(ctx, config_path, overrides, output_dir):
    """Generate the synthetic video/sensor dataset."""
    config, root, dataset = _execute(ctx, "generate", config_path, overrides, output_dir, pipeline.generate)

    table = Table(show_header=True, header_style="bold magenta")
    table.add_column("Split", style="cyan")
    table.add_column("Windows", justify="right")
    for name, indices in dataset.splits.items():
        table.add_row(name, f"{len(indices):,}")
    console.print(Panel.fit(f"[bold green]Dataset written to {root / pipeline.DATASET_DIR}[/bold green]"))
    console.print(_key_value_table(None, [
        ("Config hash", config.config_hash()),
        ("Sources", str(dataset.scenario.num_sources)),
        ("Classes", str(dataset.num_classes)),
        ("Windows", f"{len(dataset):,}"),
    ]))
    console.print(table)
    _warn_all(dataset.warnings)


@cli.command()
@run_options
@click.pass_context
def stage1(ctx, config_path, overrides, output_dir):
    """Train spatial encoders with online clustering."""
    _, root, result = _execute(ctx, "stage1", config_path, overrides, output_dir, pipeline.stage1)
    console.print(Panel.fit("[bold green]Stage 1 complete[/bold green]"))
    console.print(_key_value_table(None, [
        ("Epochs", str(len(result.log))),
        ("Stopped", result.stopped_reason),
        ("Label change rate", f"{result.final_change_rate:.4f}"),
        ("Purity", f"{result.final_purity:.4f}"),
        ("Checkpoint", str(root / pipeline.STAGE1_CHECKPOINT)),
    ]))
    _warn_all(result.warnings)


@cli.command()
@run_options
@click.pass_context
def stage2(ctx, config_path, overrides, output_dir):
    """Train temporal encoders with the spatially-conditioned weighted contrastive loss."""
    _, root, result = _execute(ctx, "stage2", config_path, overrides, output_dir, pipeline.stage2)
    final = result.log.iloc[-1]
    console.print(Panel.fit("[bold green]Stage 2 complete[/bold green]"))
    console.print(_key_value_table(None, [
        ("Final loss", f"{final['loss']:.4f}"),
        ("Mean W easy / hard / false",
         f"{final['mean_W_easy']:.3f} / {final['mean_W_hard']:.3f} / {final['mean_W_false']:.3f}"),
        ("Checkpoint", str(root / pipeline.STAGE2_CHECKPOINT)),
    ]))


@cli.command()
@run_options
@click.option('--level', type=click.Choice(["window", "sequence"]), help='Probe granularity (default: config)')
@click.pass_context
def probe(ctx, config_path, overrides, output_dir, level):
    """Linear probe on the frozen sensor representation."""
    _, root, result = _execute(ctx, "probe", config_path, overrides, output_dir,
                               lambda config, root: pipeline.probe(config, root, level))

    table = Table(show_header=True, header_style="bold magenta")
    for column in ("Class", "Precision", "Recall", "F1", "Support"):
        table.add_column(column, justify="right")
    for c, p, r, f, s in zip(result.classes, result.precision, result.recall, result.f1, result.support):
        if s:
            table.add_row(str(c), f"{p:.3f}", f"{r:.3f}", f"{f:.3f}", str(s))
    console.print(Panel.fit(f"[bold green]Weighted F1 {result.weighted_f1:.4f}   mAP {result.mean_ap:.4f}"
                            f"[/bold green]"))
    console.print(table)
    console.print(f"[green]Results saved to: {root / pipeline.PROBE_RESULT}[/green]")
    _warn_all(result.warnings)


@cli.command()
@run_options
@click.option('--split', default="pretrain", help='Dataset split to analyze')
@click.option('--query', type=int, help='Window index for a phase-space export')
@click.option('--top-k', default=3, show_default=True, help='Classes listed at each end of the ranking')
@click.pass_context
def analyze(ctx, config_path, overrides, output_dir, split, query, top_k):
    """Adaptive weight statistics by negative category and by class."""
    _, root, analysis = _execute(
        ctx, "analyze", config_path, overrides, output_dir,
        lambda config, root: pipeline.analyze(config, root, split=split, query=query, top_k=top_k))

    summary = analysis.summary
    table = Table(show_header=True, header_style="bold magenta")
    for column in ("Category", "Mean W", "Median W", "Pairs"):
        table.add_column(column, justify="right")
    for name in ("easy", "hard", "false"):
        table.add_row(name, f"{summary[f'mean_W_{name}']:.3f}", f"{summary[f'median_W_{name}']:.3f}",
                      f"{summary[f'count_{name}']:,}")
    console.print(table)
    console.print(f"Best separated classes: {analysis.top_classes}")
    console.print(f"Least separated classes: {analysis.bottom_classes}")
    if query is not None:
        console.print(f"[green]Phase space saved to: {root / pipeline.PHASE_SPACE_TABLE}[/green]")


@cli.command()
@run_options
@click.option('--split', default="all", help='Dataset split to export')
@click.option('--path', type=click.Path(dir_okay=False), help='Output CSV (default: <run>/embeddings.csv)')
@click.pass_context
def export(ctx, config_path, overrides, output_dir, split, path):
    """Export spatial and temporal embeddings of both modalities."""
    _, _, written = _execute(
        ctx, "export", config_path, overrides, output_dir,
        lambda config, root: pipeline.export(config, root, split=split, path=Path(path) if path else None))
    console.print(f"[green]Embeddings saved to: {written}[/green]")


@cli.command()
@run_options
@click.option('--variant', 'variants', multiple=True, type=click.Choice(list(pipeline.ABLATION_VARIANTS)),
              help='Variant to run (repeatable; default: all)')
@click.pass_context
def ablate(ctx, config_path, overrides, output_dir, variants):
    """Stage 2 + probe for each weighting variant on one stage-1 checkpoint."""
    chosen = variants or tuple(pipeline.ABLATION_VARIANTS)
    _, root, table = _execute(ctx, "ablate", config_path, overrides, output_dir,
                              lambda config, root: pipeline.ablate(config, root, chosen),
                              extra={"variants": list(chosen)})

    rich_table = Table(show_header=True, header_style="bold magenta")
    for column in ("Variant", "Weighted F1", "mAP", "W hard - W false"):
        rich_table.add_column(column, justify="right")
    for row in table.itertuples(index=False):
        rich_table.add_row(row.variant, f"{row.weighted_f1:.4f}", f"{row.mAP:.4f}", f"{row.hard_minus_false:.3f}")
    console.print(rich_table)
    console.print(f"[green]Results saved to: {root / pipeline.ABLATION_TABLE}[/green]")


if __name__ == "__main__":
    cli()
