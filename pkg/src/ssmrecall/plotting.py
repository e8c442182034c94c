"""Figures rendered from the report tables."""
from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .reports import Table  # noqa: E402

PNG_META = {"Software": None}


def publication_style():
    plt.rcParams.update({
        "figure.figsize": (5.0, 3.2),
        "figure.dpi": 100,
        "axes.spines.top": False,
        "axes.spines.right": False,
        "axes.grid": True,
        "grid.alpha": 0.3,
        "font.size": 9,
        "legend.fontsize": 7,
        "legend.frameon": False,
        "svg.hashsalt": "ssmrecall",
    })


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, metadata=PNG_META)
    plt.close(fig)
    return path


def _legend(ax) -> None:
    if ax.get_legend_handles_labels()[0]:
        ax.legend()


def _series(table: Table, key: str, x: str, y: str) -> dict:
    out = defaultdict(list)
    for row in table.where():
        out[row[key]].append((row[x], row[y]))
    return out


def plot_f1_by_length(table: Table, path: Path) -> Path:
    fig, ax = plt.subplots()
    ax.plot(table.column("length"), table.column("median_f1"), marker="o", label="median")
    ax.plot(table.column("length"), table.column("mean_f1"), marker="s", ls="--", label="mean")
    ax.set_xscale("log", base=2)
    ax.set_xlabel("sequence length (tokens)")
    ax.set_ylabel("ROUGE-1 F1")
    ax.set_ylim(0, 100)
    _legend(ax)
    return _save(fig, path)


def plot_position_errors(table: Table, path: Path) -> Path:
    lengths = sorted(set(table.column("length")))
    fig, axes = plt.subplots(1, max(len(lengths), 1), figsize=(2.2 * max(len(lengths), 1), 2.6), squeeze=False)
    for ax, L in zip(axes[0], lengths):
        rows = table.where(length=L)
        ax.bar([r["position"] for r in rows], [r["errors"] for r in rows], width=1.0)
        ax.set_title(f"length {L}")
        ax.set_xlabel("position")
    axes[0][0].set_ylabel("errors")
    return _save(fig, path)


def plot_f1_by_source(table: Table, path: Path) -> Path:
    fig, ax = plt.subplots()
    for src, pts in sorted(_series(table, "source", "length", "mean_f1").items()):
        pts.sort()
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=src)
    ax.set_xscale("log", base=2)
    ax.set_xlabel("sequence length (tokens)")
    ax.set_ylabel("mean ROUGE-1 F1")
    ax.set_ylim(0, 100)
    _legend(ax)
    return _save(fig, path)


def plot_category_omission(table: Table, path: Path, length: int | None = None) -> Path:
    fig, ax = plt.subplots()
    if table.rows:
        length = length or max(table.column("length"))
        rows = sorted(table.where(length=length), key=lambda r: -r["omission_rate"])
        labels = [f"{r['scheme']}:{r['category']}" for r in rows]
        ax.barh(labels[::-1], [100 * r["omission_rate"] for r in rows][::-1])
        ax.set_title(f"length {length}")
    ax.set_xlabel("omission rate (%)")
    return _save(fig, path)


def plot_perplexity(table: Table, path: Path) -> Path:
    fig, ax = plt.subplots()
    for L, pts in sorted(_series(table, "length", "mean_perplexity", "mean_omission").items()):
        ax.plot([p[0] for p in pts], [100 * p[1] for p in pts], marker="o", label=f"L={L}")
    ax.set_xlabel("input perplexity (decile mean)")
    ax.set_ylabel("omission rate (%)")
    _legend(ax)
    return _save(fig, path)


def plot_frequency_groups(table: Table, path: Path) -> Path:
    fig, ax = plt.subplots()
    for L, pts in sorted(_series(table, "length", "group", "omission_rate").items()):
        ax.plot([p[0] for p in pts], [100 * p[1] for p in pts], marker="o", label=f"L={L}")
    ax.set_xlabel("training-frequency decile (0 = rarest)")
    ax.set_ylabel("omission rate (%)")
    _legend(ax)
    return _save(fig, path)


def plot_corpus_frequency(table: Table, path: Path) -> Path:
    fig, ax = plt.subplots()
    rows = table.where()
    ax.barh([f"{r['scheme']}:{r['category']}" for r in rows][::-1], [r["ratio"] for r in rows][::-1])
    if rows and all(r["ratio"] > 0 for r in rows):
        ax.set_xscale("log")
    ax.set_xlabel("occurrences per distinct token")
    return _save(fig, path)


def plot_numeric_vs_text(source_table: Table, path: Path, numeric_source: str = "synthetic_numeric") -> Path:
    fig, ax = plt.subplots()
    per_len = defaultdict(lambda: [0.0, 0])
    numeric = []
    for r in source_table.where():
        if r["source"] == numeric_source:
            numeric.append((r["length"], r["mean_f1"]))
        elif r["source"] not in ("repeated_token",):
            acc = per_len[r["length"]]
            acc[0] += r["mean_f1"] * r["n"]
            acc[1] += r["n"]
    text = sorted((L, s / n) for L, (s, n) in per_len.items() if n)
    numeric.sort()
    ax.plot([p[0] for p in text], [p[1] for p in text], marker="o", label="natural text")
    ax.plot([p[0] for p in numeric], [p[1] for p in numeric], marker="s", label="random digits")
    ax.set_xscale("log", base=2)
    ax.set_ylim(0, 100)
    ax.set_xlabel("sequence length (tokens)")
    ax.set_ylabel("mean ROUGE-1 F1")
    _legend(ax)
    return _save(fig, path)


def plot_paired_gap(table: Table, path: Path) -> Path:
    fig, ax = plt.subplots()
    rows = table.where()
    if rows:
        a, b = rows[0]["variant_a"], rows[0]["variant_b"]
        ax.plot([r["length"] for r in rows], [r["mean_f1_a"] for r in rows], marker="o", label=a)
        ax.plot([r["length"] for r in rows], [r["mean_f1_b"] for r in rows], marker="s", label=b)
        ax.set_xscale("log", base=2)
        _legend(ax)
    ax.set_xlabel("sequence length (tokens)")
    ax.set_ylabel("mean ROUGE-1 F1")
    return _save(fig, path)


def render_figures(tables: dict[str, Table], out_dir) -> list[Path]:
    publication_style()
    out_dir = Path(out_dir)
    get = lambda name: tables.get(name, Table(name))  # noqa: E731
    paths = [
        plot_f1_by_length(get("f1_by_length"), out_dir / "f1_by_length.png"),
        plot_position_errors(get("position_errors"), out_dir / "position_errors.png"),
        plot_f1_by_source(get("f1_by_source"), out_dir / "f1_by_source.png"),
        plot_category_omission(get("omission_by_category"), out_dir / "omission_by_category.png"),
        plot_perplexity(get("perplexity_bins"), out_dir / "perplexity_omission.png"),
        plot_frequency_groups(get("frequency_groups"), out_dir / "frequency_groups.png"),
        plot_corpus_frequency(get("corpus_frequency"), out_dir / "corpus_frequency.png"),
        plot_numeric_vs_text(get("f1_by_source"), out_dir / "numeric_vs_text.png"),
        plot_paired_gap(get("paired_gap"), out_dir / "paired_gap.png"),
    ]
    return paths

