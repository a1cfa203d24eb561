"""
Console presentables for run summaries (rich tables and panels).
"""
from typing import Any, List, Mapping, Sequence

from rich.console import Console
from rich.panel import Panel
from rich.table import Table

# Shared console instance for all rich output
console = Console()


def _fmt(value: Any) -> str:
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


class PanelSection:
    """A titled block of text rendered as a rich Panel."""

    def __init__(self, title: str, body: str, style: str = "bold"):
        self.title = title
        self.body = body
        self.style = style

    def present(self) -> None:
        console.print(Panel(self.body, title=self.title, style=self.style))


class DataTable:
    """
    Tabular result display. Floats are rendered with four decimals, which is the
    precision the metric tables are compared at.
    """

    def __init__(self, columns: Sequence[str], rows: Sequence[Sequence[Any]], title: str = "", style: str = ""):
        self.columns = list(columns)
        self.rows = [list(r) for r in rows]
        self.title = title
        self.style = style

    @classmethod
    def from_records(cls, records: Sequence[Mapping[str, Any]], title: str = "") -> "DataTable":
        columns: List[str] = []
        for rec in records:
            for k in rec:
                if k not in columns:
                    columns.append(k)
        rows = [[rec.get(c, "") for c in columns] for rec in records]
        return cls(columns, rows, title=title)

    def present(self) -> None:
        table = Table(title=self.title or None)
        for col in self.columns:
            table.add_column(str(col))
        for row in self.rows:
            table.add_row(*[_fmt(c) for c in row])

        if self.style:
            console.print(Panel(table, style=self.style))
        else:
            console.print(table)
