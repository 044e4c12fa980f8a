"""Static reporting: aligned-text/CSV result tables and vector plots.

Consumes record CSVs from a run directory and emits:
  - tables.txt / tables.csv: mean bit accuracy per (model tag, attack id)
  - sweep_<kind>.svg: parameter-sweep lines, one series per model tag
  - black_q_psnr.svg: bar chart of mean attacked-image PSNR under Black-Q
"""

from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .evaluate import ExperimentRecord, read_records  # noqa: E402


def aggregate(records: list[ExperimentRecord]) -> dict[tuple[str, str], dict]:
    """Mean metrics keyed by (model_tag, attack_id)."""
    acc: dict[tuple[str, str], list[ExperimentRecord]] = defaultdict(list)
    for r in records:
        acc[(r.model_tag, r.attack_id)].append(r)
    out = {}
    for key, rows in acc.items():
        n = len(rows)
        out[key] = {
            "bit_accuracy": sum(r.bit_accuracy for r in rows) / n,
            "psnr": sum(r.psnr for r in rows) / n,
            "ssim": sum(r.ssim for r in rows) / n,
            "perceptual": sum(r.perceptual for r in rows) / n,
            "count": n,
        }
    return out


def _sorted_unique(items):
    return sorted(set(items))


def render_tables(records: list[ExperimentRecord], run_dir: Path) -> None:
    agg = aggregate(records)
    models = _sorted_unique(m for m, _ in agg)
    attacks = _sorted_unique(a for _, a in agg)

    txt_path = run_dir / "tables.txt"
    csv_path = run_dir / "tables.csv"
    col_w = max(14, max((len(a) for a in attacks), default=14) + 2)
    with open(txt_path, "w") as f:
        f.write("Mean bit accuracy per model and attack\n")
        f.write("model".ljust(20) + "".join(a.rjust(col_w) for a in attacks) + "\n")
        for mtag in models:
            row = mtag.ljust(20)
            for a in attacks:
                cell = agg.get((mtag, a))
                row += (f"{cell['bit_accuracy']:.3f}" if cell else "-").rjust(col_w)
            f.write(row + "\n")
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["model_tag", "attack_id", "bit_accuracy", "psnr",
                         "ssim", "perceptual", "count"])
        for mtag in models:
            for a in attacks:
                cell = agg.get((mtag, a))
                if cell:
                    writer.writerow([
                        mtag, a, f"{cell['bit_accuracy']:.6f}",
                        f"{cell['psnr']:.4f}", f"{cell['ssim']:.6f}",
                        f"{cell['perceptual']:.6f}", cell["count"]])


def render_sweeps(records: list[ExperimentRecord], run_dir: Path) -> None:
    """One line plot per swept attack kind; ids look like 'jpeg@Q=30'."""
    sweeps: dict[str, dict[str, list[tuple[float, float]]]] = defaultdict(
        lambda: defaultdict(list))
    agg = aggregate(records)
    for (mtag, aid), cell in agg.items():
        if "@" not in aid:
            continue
        kind, _, rest = aid.partition("@")
        try:
            value = float(rest.partition("=")[2])
        except ValueError:
            continue
        sweeps[kind][mtag].append((value, cell["bit_accuracy"]))
    for kind, series in sweeps.items():
        fig, ax = plt.subplots(figsize=(5, 3.2))
        for mtag, points in sorted(series.items()):
            points.sort()
            ax.plot([p[0] for p in points], [p[1] for p in points],
                    marker="o", label=mtag)
        ax.set_xlabel(f"{kind} parameter")
        ax.set_ylabel("bit accuracy")
        ax.set_ylim(0.4, 1.02)
        ax.legend(fontsize=8)
        fig.tight_layout()
        fig.savefig(run_dir / f"sweep_{kind}.svg")
        plt.close(fig)


def render_black_q_psnr(records: list[ExperimentRecord], run_dir: Path) -> None:
    agg = aggregate(records)
    bars = {m: cell["psnr"] for (m, a), cell in agg.items() if a == "black_q"}
    if not bars:
        return
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    names = sorted(bars)
    ax.bar(names, [bars[n] for n in names])
    ax.set_ylabel("PSNR of Black-Q attacked image (dB)")
    ax.tick_params(axis="x", rotation=20)
    fig.tight_layout()
    fig.savefig(run_dir / "black_q_psnr.svg")
    plt.close(fig)


def report(run_dir) -> list[Path]:
    """Build all tables and plots from the record CSVs in a run directory."""
    run_dir = Path(run_dir)
    csv_files = sorted(run_dir.glob("records*.csv"))
    if not csv_files:
        raise IOError(f"no record CSVs found in {run_dir}")
    records: list[ExperimentRecord] = []
    for path in csv_files:
        records.extend(read_records(path))
    render_tables(records, run_dir)
    render_sweeps(records, run_dir)
    render_black_q_psnr(records, run_dir)
    return sorted(p for p in run_dir.iterdir()
                  if p.suffix in (".txt", ".csv", ".svg"))
