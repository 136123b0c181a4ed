import math
from typing import Any, Dict, List, Optional, Sequence

try:
    from rich.console import Console
    from rich.markup import escape
    from rich.panel import Panel
    from rich.table import Table
    RICH_AVAILABLE = True
except ImportError:
    RICH_AVAILABLE = False

from .metrics import METRIC_NAMES, MetricsReport

METRIC_LABELS = {"iou": "mIoU (%)", "dsc": "DSC (%)", "precision": "Precision (%)", "hd95": "HD95 (px)"}


def pm(mean: Optional[float], std: Optional[float], scale: float = 1.0, digits: int = 2) -> str:
    """'mean ± std', or '-' when the cell is empty."""
    if mean is None or (isinstance(mean, float) and math.isnan(mean)):
        return "-"
    return f"{mean * scale:.{digits}f} ± {std * scale:.{digits}f}"


def _metric_scale(name: str) -> float:
    return 1.0 if name == "hd95" else 100.0


class ReportGenerator:
    """Displays result tables in rich or plain text format."""

    def __init__(self, use_rich: bool = True):
        self.use_rich = use_rich and RICH_AVAILABLE
        self.console = Console() if self.use_rich else None

    def _table(self, title: str, columns: Sequence[str], rows: List[Sequence[str]],
               header_style: str = "bold magenta") -> None:
        if self.use_rich:
            table = Table(title=title, show_header=True, header_style=header_style)
            for i, column in enumerate(columns):
                table.add_column(column, style="cyan" if i == 0 else "white")
            for row in rows:
                table.add_row(*row)
            self.console.print(table)
            return
        widths = [max(len(str(c)), *(len(str(r[i])) for r in rows)) if rows else len(c)
                  for i, c in enumerate(columns)]
        print("\n" + title)
        print("=" * len(title))
        print("  ".join(str(c).ljust(w) for c, w in zip(columns, widths)))
        for row in rows:
            print("  ".join(str(v).ljust(w) for v, w in zip(row, widths)))

    def message(self, text: str, style: str = "green") -> None:
        if self.use_rich:
            self.console.print(f"[{style}]{escape(text)}[/{style}]")
        else:
            print(text)

    def display_errors(self, errors: Sequence[str], title: str = "Errors") -> None:
        if not errors:
            return
        if self.use_rich:
            self.console.print(Panel("\n".join(errors), title=title, border_style="red"))
        else:
            print(f"\n{title.upper()}:")
            for error in errors:
                print(f"  - {error}")

    def display_precision(self, table: List[Dict[str, Any]], mode: Optional[str] = None) -> None:
        """Pseudo-label precision against ground truth, one row per label kind."""
        rows = []
        for entry in table:
            fg, bg = entry["foreground"], entry["background"]
            rows.append([entry["strategy"], entry["label"],
                         pm(fg["mean"], fg["std"], 100.0), pm(bg["mean"], bg["std"], 100.0),
                         str(fg["undefined"] + bg["undefined"])])
        title = "Pseudo-label precision" + (f" (label mode {mode})" if mode else "")
        self._table(title, ["Strategy", "Pseudo label", "Foreground (%)", "Background (%)", "Empty"], rows)

    def display_metrics(self, report: MetricsReport, title: str = "Test metrics") -> None:
        summary = report.summary()
        rows = [[METRIC_LABELS[name], pm(summary[name]["mean"], summary[name]["std"], _metric_scale(name))]
                for name in METRIC_NAMES]
        rows.append(["Images", str(len(report.rows))])
        if report.undefined_precision:
            rows.append(["Empty predictions", str(report.undefined_precision)])
        self._table(title, ["Metric", "Value"], rows, header_style="bold blue")

    def display_ablation(self, rows: List[Dict[str, Any]], key: str = "mode", title: str = "Ablation") -> None:
        body = []
        for row in rows:
            label = row[key] if key != "value" else f"{row['param']}={row['value']:g}"
            body.append([str(label)] + [pm(row[f"{n}_mean"], row[f"{n}_std"], _metric_scale(n)) for n in METRIC_NAMES])
        self._table(title, [key.capitalize()] + [METRIC_LABELS[n] for n in METRIC_NAMES], body)

    def display_gradcheck(self, results: Dict[str, Any]) -> None:
        rows = []
        for check in results["checks"]:
            status = "ok" if check.passed else "FAIL"
            if self.use_rich:
                status = "[green]ok[/green]" if check.passed else "[bold red]FAIL[/bold red]"
            rows.append([check.name, f"{check.max_error:.2e}", f"{check.tolerance:.0e}",
                         str(check.instances), f"{check.seconds:.2f}s", status])
        self._table("Gradient check", ["Check", "Max rel. error", "Tolerance", "Instances", "Time", "Status"],
                    rows, header_style="bold green")
        self.display_errors(results.get("errors", []), title="Checks that could not run")
        if results["passed"]:
            self.message("All gradient checks passed.")
        else:
            self.message("Gradient check FAILED.", style="bold red")

    def display_training(self, history, checkpoint: Any) -> None:
        last = history.steps[-1] if history.steps else {}
        rows = [
            ["Steps", str(len(history.steps))],
            ["Final loss", f"{last['total']:.5f}" if last else "-"],
            ["Best epoch", str(history.best_epoch) if history.best_epoch is not None else "-"],
            ["Best test mIoU (%)", f"{history.best_miou * 100:.2f}" if history.best_miou is not None else "-"],
            ["Wall time", f"{history.wall_time:.1f}s"],
            ["Checkpoint", str(checkpoint)],
        ]
        self._table("Training summary", ["Field", "Value"], rows, header_style="bold blue")
