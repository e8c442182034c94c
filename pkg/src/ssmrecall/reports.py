"""Delimited report tables: fixed schemas, writing, and re-reading."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

SCHEMAS: dict[str, list[tuple[str, type]]] = {
    "f1_by_length": [("length", int), ("n", int), ("mean_f1", float), ("median_f1", float)],
    "f1_by_source": [("source", str), ("length", int), ("n", int), ("mean_f1", float)],
    "omission_by_token": [
        ("rank", int), ("token_id", int), ("token", str), ("f_in", int), ("f_rec", int), ("omission_rate", float),
    ],
    "omission_by_category": [
        ("scheme", str), ("length", int), ("category", str), ("f_in", int), ("f_omitted", int),
        ("omission_rate", float), ("n_sequences", int),
    ],
    "ttests": [
        ("scheme", str), ("length", int), ("category_a", str), ("category_b", str), ("t_statistic", float),
        ("p_value", float), ("p_adjusted", float), ("significant", int),
    ],
    "position_errors": [("length", int), ("position", int), ("errors", int), ("n_records", int)],
    "perplexity_bins": [
        ("length", int), ("bin", int), ("n", int), ("mean_perplexity", float), ("mean_omission", float),
        ("spearman", float),
    ],
    "corpus_frequency": [("scheme", str), ("category", str), ("total", int), ("unique", int), ("ratio", float)],
    "numeric_deviation": [
        ("length", int), ("n_pairs", int), ("n_unpaired", int), ("mean_levenshtein", float),
        ("median_levenshtein", float), ("mean_ref_length", float), ("median_ref_length", float), ("mape", float),
    ],
    "repeated_tokens": [("length", int), ("n_samples", int), ("present_pct", float), ("repeat_mode", int)],
    "frequency_groups": [
        ("length", int), ("group", int), ("n_tokens", int), ("min_train_count", int), ("max_train_count", int),
        ("f_in", int), ("f_rec", int), ("omission_rate", float),
    ],
    "paired_gap": [
        ("length", int), ("n_pairs", int), ("variant_a", str), ("variant_b", str), ("mean_f1_a", float),
        ("mean_f1_b", float), ("gap", float),
    ],
}

# (series column or None, x column, y column) kept in the plot-data copies
PLOT_COLUMNS: dict[str, tuple[str | None, str, str]] = {
    "f1_by_length": (None, "length", "median_f1"),
    "f1_by_source": ("source", "length", "mean_f1"),
    "omission_by_token": (None, "token", "omission_rate"),
    "omission_by_category": ("length", "category", "omission_rate"),
    "ttests": ("length", "category_a", "t_statistic"),
    "position_errors": ("length", "position", "errors"),
    "perplexity_bins": ("length", "mean_perplexity", "mean_omission"),
    "corpus_frequency": ("scheme", "category", "ratio"),
    "numeric_deviation": (None, "length", "mape"),
    "repeated_tokens": (None, "length", "present_pct"),
    "frequency_groups": ("length", "group", "omission_rate"),
    "paired_gap": (None, "length", "gap"),
}


@dataclass
class Table:
    name: str
    rows: list[tuple] = field(default_factory=list)

    @property
    def columns(self) -> list[str]:
        return [c for c, _ in SCHEMAS[self.name]]

    def add(self, *values) -> None:
        schema = SCHEMAS[self.name]
        if len(values) != len(schema):
            raise ValueError(f"{self.name}: expected {len(schema)} values, got {len(values)}")
        row = []
        for (col, typ), v in zip(schema, values):
            if v is None and typ is float:
                v = math.nan
            row.append(typ(v))
        self.rows.append(tuple(row))

    def column(self, name: str) -> list:
        k = self.columns.index(name)
        return [r[k] for r in self.rows]

    def where(self, **match) -> list[dict]:
        out = []
        for r in self.rows:
            d = dict(zip(self.columns, r))
            if all(d[k] == v for k, v in match.items()):
                out.append(d)
        return out

    def same_as(self, other: Table) -> bool:
        if self.name != other.name or len(self.rows) != len(other.rows):
            return False
        for a, b in zip(self.rows, other.rows):
            for x, y in zip(a, b):
                if isinstance(x, float) and math.isnan(x):
                    if not (isinstance(y, float) and math.isnan(y)):
                        return False
                elif x != y:
                    return False
        return True


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def write_table(table: Table, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(table.columns)
        for r in table.rows:
            w.writerow([_fmt(v) for v in r])
    return path


def read_table(path, name: str | None = None) -> Table:
    path = Path(path)
    name = name or path.stem
    schema = SCHEMAS[name]
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != [c for c, _ in schema]:
        raise ValueError(f"{path}: header does not match the {name} schema")
    table = Table(name)
    for r in rows[1:]:
        table.rows.append(tuple(typ(v) for (_, typ), v in zip(schema, r)))
    return table


def write_plot_data(table: Table, path) -> Path:
    series, x, y = PLOT_COLUMNS[table.name]
    cols = [c for c in (series, x, y) if c is not None]
    idx = [table.columns.index(c) for c in cols]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in table.rows:
            w.writerow([_fmt(r[i]) for i in idx])
    return path


def emit_reports(tables: dict[str, Table], out_dir) -> list[Path]:
    """Write every schema's table (headers only when missing) plus its plot-data copy."""
    out_dir = Path(out_dir)
    written = []
    for name in SCHEMAS:
        table = tables.get(name, Table(name))
        written.append(write_table(table, out_dir / f"{name}.csv"))
        written.append(write_plot_data(table, out_dir / "plot_data" / f"{name}.csv"))
    return written
