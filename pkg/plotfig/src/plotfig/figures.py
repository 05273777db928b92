"""Render sweep and diagnostic figures from metakernels output files.

This package is a pure consumer of the versioned CSV/JSON files: it reads
summary rows only, never mutates inputs, and computes nothing beyond axis
transforms.  Rendering is deterministic (fixed hash salt, no timestamps),
so re-rendering the same inputs reproduces the same image bytes.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

__all__ = [
    "FigureSpec",
    "SchemaError",
    "read_sweep_summary",
    "read_inverse_gap",
    "read_spectra",
    "render_sweeps",
    "render_diagnostics",
]

SWEEP_SCHEMA = "metakernels/sweep/v1"
INVERSE_SCHEMA = "metakernels/inverse-gap/v1"
SPECTRA_SCHEMA = "metakernels/spectra/v1"

matplotlib.rcParams["svg.hashsalt"] = "plotfig"


class SchemaError(ValueError):
    pass


@dataclass(frozen=True)
class FigureSpec:
    """Input directory, output directory and image format for one render."""

    input_dir: str
    output_dir: str
    image_format: str = "png"
    depth_sweep: str = "depth_sweep.csv"
    lrtau_sweep: str = "lrtau_sweep.csv"
    inverse_gap: str = "inverse_gap.csv"
    spectra: str = "spectra.json"

    def __post_init__(self):
        if self.image_format not in ("png", "svg"):
            raise ValueError(f"format must be png or svg, got {self.image_format!r}")

    def input_path(self, name: str) -> str:
        return os.path.join(self.input_dir, name)

    def output_path(self, stem: str) -> str:
        return os.path.join(self.output_dir, f"{stem}.{self.image_format}")


def _check_schema(found: str, expected: str, path):
    if found != expected:
        raise SchemaError(
            f"{path}: schema version mismatch: file carries {found!r}, "
            f"this renderer reads {expected!r}"
        )


def _read_pragma_csv(path, expected_schema):
    with open(path, encoding="utf-8") as fh:
        pragma = fh.readline().strip()
        if not pragma.startswith("# "):
            raise SchemaError(f"{path}: missing schema pragma line")
        fields = dict(part.split("=", 1) for part in pragma[2:].split() if "=" in part)
        _check_schema(fields.get("schema"), expected_schema, path)
        header = fh.readline().strip().split(",")
        rows = [dict(zip(header, line.strip().split(","))) for line in fh if line.strip()]
    return fields, rows


def read_sweep_summary(path):
    """Summary rows of a sweep file: (sweep kind, x values, means, ci halfwidths)."""
    fields, rows = _read_pragma_csv(path, SWEEP_SCHEMA)
    sweep = fields.get("sweep", "depth")
    key = "depth" if sweep == "depth" else "lrtau"
    summary = [r for r in rows if r["kind"] == "summary"]
    if not summary:
        raise SchemaError(f"{path}: no summary rows")
    xs = np.array([float(r[key]) for r in summary])
    means = np.array([float(r["mean_gap_l2"]) for r in summary])
    halves = np.array([float(r["ci95_gap_l2"]) for r in summary])
    order = np.argsort(xs)
    return sweep, xs[order], means[order], halves[order]


def read_inverse_gap(path):
    """Detail rows (depths, gaps) and the fitted log-log slope."""
    _, rows = _read_pragma_csv(path, INVERSE_SCHEMA)
    detail = [r for r in rows if r["kind"] == "detail"]
    summary = [r for r in rows if r["kind"] == "summary"]
    if not detail:
        raise SchemaError(f"{path}: no detail rows")
    if not summary:
        raise SchemaError(f"{path}: no summary rows")
    depths = np.array([float(r["depth"]) for r in detail])
    gaps = np.array([float(r["gap_op_norm"]) for r in detail])
    order = np.argsort(depths)
    slope = float(summary[0]["slope"])
    return depths[order], gaps[order], slope


def read_spectra(path):
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    _check_schema(doc.get("schema"), SPECTRA_SCHEMA, path)
    if not doc.get("reports"):
        raise SchemaError(f"{path}: empty depth list in spectra report")
    return doc["reports"]


def _save(fig, path):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    # strip volatile metadata so identical inputs give identical bytes
    metadata = {"Date": None} if path.endswith(".svg") else {"Software": "plotfig"}
    fig.savefig(path, dpi=120, metadata=metadata)
    plt.close(fig)


def _sweep_panel(ax, xs, means, halves, xlabel):
    finite = np.isfinite(halves)
    ax.plot(xs, means, marker="o", color="#1f5fa8", label="mean gap")
    if finite.any():
        ax.fill_between(xs, means - np.where(finite, halves, 0.0),
                        means + np.where(finite, halves, 0.0),
                        alpha=0.25, color="#1f5fa8", label="95% CI")
    ax.set_xlabel(xlabel)
    ax.set_ylabel("prediction gap (l2)")
    ax.grid(True, alpha=0.3)
    ax.legend()


def render_sweeps(spec: FigureSpec):
    """One panel per sweep: gap vs depth and gap vs inner-loop exponent."""
    written = []
    for name, stem, xlabel in (
        (spec.depth_sweep, "gap_vs_depth", "network depth L"),
        (spec.lrtau_sweep, "gap_vs_lrtau", "inner-loop exponent (rate x steps)"),
    ):
        path = spec.input_path(name)
        if not os.path.exists(path):
            continue
        sweep, xs, means, halves, = read_sweep_summary(path)
        fig, ax = plt.subplots(figsize=(5.0, 3.4), constrained_layout=True)
        _sweep_panel(ax, xs, means, halves, xlabel)
        ax.set_title(f"prediction gap vs {sweep}")
        out = spec.output_path(stem)
        _save(fig, out)
        written.append(out)
    if not written:
        raise SchemaError(f"no sweep files found under {spec.input_dir}")
    return written


def render_diagnostics(spec: FigureSpec):
    """Log-log inverse-gap line with its fitted slope, and grouped
    measured-vs-predicted spectra bars."""
    written = []
    inverse_path = spec.input_path(spec.inverse_gap)
    if os.path.exists(inverse_path):
        depths, gaps, slope = read_inverse_gap(inverse_path)
        fig, ax = plt.subplots(figsize=(5.0, 3.4), constrained_layout=True)
        ax.loglog(depths, gaps, marker="o", color="#a84e1f")
        ax.set_xlabel("network depth L")
        ax.set_ylabel("operator-norm gap of inverses")
        ax.set_title("kernel-inverse discrepancy")
        ax.grid(True, which="both", alpha=0.3)
        ax.annotate(f"fitted slope {slope:.2f}", xy=(0.05, 0.08),
                    xycoords="axes fraction")
        out = spec.output_path("inverse_gap")
        _save(fig, out)
        written.append(out)

    spectra_path = spec.input_path(spec.spectra)
    if os.path.exists(spectra_path):
        reports = read_spectra(spectra_path)
        quantities = ("ntk_largest", "ntk_bulk_mean", "nngp_largest")
        fig, axes = plt.subplots(1, len(quantities), figsize=(9.6, 3.2),
                                 constrained_layout=True)
        depths = [r["depth"] for r in reports]
        positions = np.arange(len(depths))
        for ax, quantity in zip(np.atleast_1d(axes), quantities):
            measured = [r[quantity]["measured"] for r in reports]
            predicted = [r[quantity]["predicted"] for r in reports]
            ax.bar(positions - 0.18, measured, width=0.36, label="measured",
                   color="#1f5fa8")
            ax.bar(positions + 0.18, predicted, width=0.36, label="predicted",
                   color="#a84e1f")
            ax.set_xticks(positions)
            ax.set_xticklabels([str(d) for d in depths])
            ax.set_xlabel("depth L")
            ax.set_title(quantity.replace("_", " "))
            ax.grid(True, axis="y", alpha=0.3)
        np.atleast_1d(axes)[0].legend()
        out = spec.output_path("spectra")
        _save(fig, out)
        written.append(out)

    if not written:
        raise SchemaError(f"no diagnostic files found under {spec.input_dir}")
    return written
