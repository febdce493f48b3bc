"""Console rendering for the stitchkit CLI."""

from contextlib import contextmanager
from pathlib import Path
from typing import Callable, Iterator, List, Sequence

from rich import box
from rich.console import Console
from rich.panel import Panel
from rich.progress import BarColumn, MofNCompleteColumn, Progress, TextColumn, TimeElapsedColumn
from rich.table import Table
from rich.theme import Theme

from ..align import AlignmentResult
from ..datakit import DatasetManifest
from ..evalkit import EvalReport
from ..reconstruct import TrainingTrace

# Custom theme for consistent styling
custom_theme = Theme(
    {
        "success": "green",
        "error": "bold red",
        "warning": "yellow",
        "info": "cyan",
        "primary": "blue",
        "secondary": "magenta",
        "accent": "bold cyan",
        "muted": "dim",
    }
)

console = Console(theme=custom_theme)

CORNER_NAMES = ("top-left", "top-right", "bottom-left", "bottom-right")


def show_error_tui(message: str, suggestion: str = "") -> None:
    """Show error message with optional suggestion."""
    error_content = f"[error]{message}[/error]"
    if suggestion:
        error_content += f"\n[dim]{suggestion}[/dim]"
    console.print(Panel(error_content, box=box.ROUNDED, border_style="error"))


def show_warning_tui(message: str) -> None:
    console.print(f"[warning]{message}[/warning]")


def show_outputs_tui(title: str, paths: Sequence[Path]) -> None:
    """List the files a command wrote."""
    lines = "\n".join(f"[info]{p}[/info]" for p in paths)
    console.print(Panel(lines or "[muted]nothing written[/muted]", title=title, box=box.ROUNDED, border_style="primary"))


def show_offsets_tui(result: AlignmentResult) -> None:
    """Corner offsets, canvas and losses of one alignment."""
    table = Table(title="Corner offsets (px)", box=box.ROUNDED)
    table.add_column("Corner", style="accent")
    table.add_column("dx", justify="right")
    table.add_column("dy", justify="right")
    for name, (dx, dy) in zip(CORNER_NAMES, result.offsets.values):
        table.add_row(name, f"{dx:+.3f}", f"{dy:+.3f}")
    console.print(table)

    w, h = result.canvas.size
    status = "[warning]degenerate overlap[/warning]" if result.degenerate else "[success]ok[/success]"
    console.print(
        Panel(
            f"canvas [primary]{w}x{h}[/primary] • loss [accent]{result.final_loss:.6f}[/accent]"
            f" (identity {result.identity_loss:.6f}) • {status}",
            box=box.ROUNDED,
            border_style="muted",
        )
    )


def show_manifest_tui(manifest: DatasetManifest) -> None:
    table = Table(title=f"Dataset ({len(manifest)} pairs)", box=box.ROUNDED)
    table.add_column("Id", style="accent", no_wrap=True)
    table.add_column("Overlap", style="info")
    table.add_column("Parallax", style="secondary")
    table.add_column("Ground truth", justify="center")
    for record in manifest.records:
        table.add_row(
            record.id,
            record.overlap_level or "-",
            record.parallax_level or "-",
            "[success]yes[/success]" if record.synthetic else "[muted]no[/muted]",
        )
    console.print(table)


def show_report_tui(report: EvalReport) -> None:
    """Bucket table of an evaluation report."""
    order = "higher is better" if report.higher_is_better else "lower is better"
    table = Table(title=f"{report.metric} ({order})", box=box.ROUNDED)
    table.add_column("Bucket", style="accent")
    table.add_column("Count", justify="right")
    table.add_column("Mean", justify="right", style="primary")
    for bucket in report.buckets:
        table.add_row(bucket.label, str(bucket.count), f"{bucket.mean:.4f}")
    table.add_row("[bold]average[/bold]", str(len(report.values)), f"[bold]{report.average:.4f}[/bold]")
    console.print(table)


def show_training_tui(trace: TrainingTrace) -> None:
    if not trace.records:
        show_warning_tui("No training iterations were run")
        return
    first, last = trace.records[0], trace.records[-1]
    table = Table(title=f"Training ({len(trace.records)} iterations)", box=box.ROUNDED)
    table.add_column("Loss", style="accent")
    table.add_column("First", justify="right")
    table.add_column("Last", justify="right", style="primary")
    for name in ("l_lr", "l_hr", "l_cs", "l_r"):
        table.add_row(name, f"{getattr(first, name):.6f}", f"{getattr(last, name):.6f}")
    console.print(table)


@contextmanager
def progress_tui(description: str, quiet: bool = False) -> Iterator[Callable[[int, int], None]]:
    """Progress bar driven by a ``(done, total)`` callback."""
    if quiet:
        yield lambda done, total: None
        return
    with Progress(
        TextColumn("[progress.description]{task.description}"),
        BarColumn(),
        MofNCompleteColumn(),
        TimeElapsedColumn(),
        console=console,
        transient=True,
    ) as progress:
        task = progress.add_task(f"[bold primary]{description}[/bold primary]", total=None)

        def update(done: int, total: int) -> None:
            progress.update(task, completed=done, total=total)

        yield update


def written_files(directory: Path, names: List[str]) -> List[Path]:
    return [Path(directory) / name for name in names if (Path(directory) / name).exists()]
