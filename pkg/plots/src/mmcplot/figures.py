"""Deterministic figure rendering from validated CSV rows.

Every figure is a pure function of the input rows and the figure spec: the
style is pinned, draw order is sorted, and the PNG metadata is fixed, so
rendering the same CSV twice produces byte-identical files.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .schema import COLUMNS_BY_KIND, read_rows

_STYLE = {
    "figure.dpi": 110,
    "savefig.dpi": 110,
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "svg.hashsalt": "mmcplot",
}
_PNG_METADATA = {"Software": "mmcplot"}

SAMPLER_ORDER = [
    "rwm",
    "mala",
    "hmc",
    "hmc_diag",
    "hmc_dense",
    "pd_rwm",
    "pd_mala_simple",
    "pd_mala_corrected",
    "chmc",
    "chmc_symmetric",
]


@dataclass(frozen=True)
class FigureSpec:
    """What to render: input CSVs, figure kind, output path."""

    inputs: tuple
    kind: str  # heatmap | ess_vs_sigma | rhat_vs_sigma | stepsize_vs_sigma
    output: Path

    def __post_init__(self):
        if self.kind not in COLUMNS_BY_KIND:
            raise ValueError(f"unknown figure kind {self.kind!r}")


def _sorted_samplers(rows):
    present = sorted({r["sampler"] for r in rows})
    return sorted(present, key=lambda s: (SAMPLER_ORDER.index(s) if s in SAMPLER_ORDER else 99, s))


def _save(fig, output: Path):
    output = Path(output)
    output.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(output, metadata=_PNG_METADATA if output.suffix == ".png" else None)
    plt.close(fig)


def render(spec: FigureSpec) -> Path:
    """Render one figure; returns the output path."""
    rows = []
    for path in spec.inputs:
        rows.extend(read_rows(path, spec.kind))
    with plt.rc_context(_STYLE):
        if spec.kind == "heatmap":
            fig = _heatmap_figure(rows)
        else:
            field, label, logy = {
                "ess_vs_sigma": ("min_ess_per_sec", "min bulk ESS / second", True),
                "rhat_vs_sigma": ("max_rhat", "max split R-hat", False),
                "stepsize_vs_sigma": ("adapted_eps", "adapted step size", True),
            }[spec.kind]
            fig = _sigma_panel_figure(rows, field, label, logy)
        _save(fig, spec.output)
    return Path(spec.output)


def _heatmap_figure(rows):
    """One panel per sampler; acceptance on a fixed [0, 1] color scale."""
    samplers = _sorted_samplers(rows)
    n_panels = max(len(samplers), 1)
    fig, axes = plt.subplots(
        1, n_panels, figsize=(3.1 * n_panels + 1.2, 3.0), squeeze=False, sharey=True
    )
    mappable = None
    for ax, sampler in zip(axes[0], samplers):
        cells = [r for r in rows if r["sampler"] == sampler]
        sigmas = sorted({float(r["sigma"]) for r in cells})
        epss = sorted({float(r["eps"]) for r in cells})
        grid = np.full((len(sigmas), len(epss)), np.nan)
        for r in cells:
            i = sigmas.index(float(r["sigma"]))
            j = epss.index(float(r["eps"]))
            grid[i, j] = float(r["mean_accept"])
        mappable = ax.pcolormesh(
            _log_edges(epss), _log_edges(sigmas), grid, vmin=0.0, vmax=1.0,
            cmap="viridis", shading="flat",
        )
        ax.set_xscale("log")
        ax.set_yscale("log")
        ax.set_title(sampler)
        ax.set_xlabel("step size")
    if samplers:
        axes[0][0].set_ylabel("noise scale")
    else:
        axes[0][0].set_xlabel("step size")
        axes[0][0].set_ylabel("noise scale")
    if mappable is not None:
        fig.colorbar(mappable, ax=[a for a in axes[0]], label="mean acceptance", fraction=0.046)
    else:
        fig.tight_layout()
    return fig


def _log_edges(values):
    """Cell edges for pcolormesh around log-spaced (or single) centers."""
    vals = np.asarray(values, dtype=float)
    if vals.size == 0:
        return np.array([0.1, 1.0])
    logs = np.log10(vals)
    if vals.size == 1:
        pad = 0.25
        return 10.0 ** np.array([logs[0] - pad, logs[0] + pad])
    mids = 0.5 * (logs[:-1] + logs[1:])
    first = logs[0] - (mids[0] - logs[0])
    last = logs[-1] + (logs[-1] - mids[-1])
    return 10.0 ** np.concatenate([[first], mids, [last]])


def _sigma_panel_figure(rows, field, label, logy):
    fig, ax = plt.subplots(figsize=(4.6, 3.2))
    for sampler in _sorted_samplers(rows):
        cells = [r for r in rows if r["sampler"] == sampler]
        sigmas = sorted({float(r["sigma"]) for r in cells})
        medians = [
            float(np.median([float(r[field]) for r in cells if float(r["sigma"]) == s]))
            for s in sigmas
        ]
        (line,) = ax.plot(sigmas, medians, marker="s", label=sampler)
        ax.plot(
            [float(r["sigma"]) for r in cells],
            [float(r[field]) for r in cells],
            marker="o",
            linestyle="none",
            markersize=3,
            alpha=0.45,
            color=line.get_color(),
        )
    ax.set_xscale("log")
    if logy:
        ax.set_yscale("log")
    if field == "max_rhat":
        ax.axhline(1.01, color="gray", linestyle="--", linewidth=0.8)
    ax.set_xlabel("noise scale")
    ax.set_ylabel(label)
    if rows:
        ax.legend()
    fig.tight_layout()
    return fig
