"""Delimited outputs and the figures rendered alongside them.

Every curve the harness reports is written as CSV (the machine-readable
record) and as a PNG next to it. Rendering uses the Agg backend so the
report path works headless.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

ABLATION_FIELDS = ("axis", "setting", "mean_tau", "modeled_sr", "param_count",
                   "fingerprint", "seed")


def write_misalignment_csv(path, rates) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["forward_index", "misalignment_rate"])
        for i, rate in enumerate(rates, start=1):
            writer.writerow([i, f"{rate:.6f}"])


def write_ablation_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=ABLATION_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in ABLATION_FIELDS})


def _new_axes(xlabel: str, ylabel: str, title: str):
    fig, ax = plt.subplots(figsize=(5.0, 3.2), dpi=120)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    return fig, ax


def render_misalignment_figure(path, rates) -> None:
    fig, ax = _new_axes("forward pass", "misalignment rate", "Draft-token misalignment by depth")
    xs = range(1, len(rates) + 1)
    ax.plot(xs, rates, marker="o")
    ax.set_xticks(list(xs))
    ax.set_ylim(0.0, 1.0)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def render_tau_histogram(path, histogram: dict[int, int]) -> None:
    fig, ax = _new_axes("tokens per cycle (tau)", "cycles", "Acceptance-length histogram")
    keys = sorted(histogram)
    ax.bar(keys, [histogram[k] for k in keys], width=0.8)
    ax.set_xticks(keys)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def render_training_curves(path, jsonl_path) -> None:
    by_pass: dict[int, list[float]] = {}
    with open(jsonl_path) as fh:
        for line in fh:
            record = json.loads(line)
            by_pass.setdefault(record["pass"], []).append(record["loss"])
    fig, ax = _new_axes("epoch", "masked loss", "Per-pass training loss")
    for n in sorted(by_pass):
        ax.plot(range(len(by_pass[n])), by_pass[n], marker=".", label=f"pass {n}")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def render_ablation_figure(path, axis: str, rows: list[dict]) -> None:
    fig, ax = _new_axes(axis, "mean tau", f"Ablation over {axis}")
    labels = [row["setting"] for row in rows]
    xs = range(len(rows))
    ax.bar(xs, [row["mean_tau"] for row in rows], width=0.6, label="mean tau")
    ax2 = ax.twinx()
    ax2.plot(xs, [row["modeled_sr"] for row in rows], color="C3", marker="o",
             label="modeled SR")
    ax2.set_ylabel("modeled SR")
    ax.set_xticks(list(xs))
    ax.set_xticklabels(labels)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def render_report_figures(out_dir, report) -> list[Path]:
    """Figures for one pipeline run: misalignment curve, tau histogram, and
    training curves when the log exists."""
    out = Path(out_dir)
    made = []
    mis_png = out / "misalignment.png"
    render_misalignment_figure(mis_png, report.misalignment)
    made.append(mis_png)
    tau_png = out / "tau_histogram.png"
    render_tau_histogram(tau_png, report.tau_histogram)
    made.append(tau_png)
    log = out / "training.jsonl"
    if log.exists():
        loss_png = out / "training_loss.png"
        render_training_curves(loss_png, log)
        made.append(loss_png)
    return made
