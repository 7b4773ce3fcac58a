"""BER curves from a sweep CSV as a standalone SVG."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .bench import read_csv  # noqa: E402
from .channel import BITS_PER_SYMBOL  # noqa: E402

# fixed ids and no timestamp keep the SVG bytes stable across runs
_RC = {"svg.hashsalt": "nfdetect", "svg.fonttype": "path"}


class EmptyPlotError(ValueError):
    pass


def _infer_axis(records) -> str:
    if len({r.alpha for r in records}) > 1 and len({r.snr_db for r in records}) == 1:
        return "alpha"
    return "snr"


def build_figure(records, axis: str | None = None, title: str | None = None):
    """One log-scale BER series per detector.

    Points with zero bit errors sit on a floor at ``1/(frames*bits)`` with an
    open marker and an annotation; failed points are left out. The caller
    owns the returned figure.
    """
    records = [r for r in records if not r.failed]
    if not records:
        raise EmptyPlotError("no completed BER rows to plot")
    axis = axis or _infer_axis(records)
    if axis not in ("snr", "alpha"):
        raise ValueError("axis must be 'snr' or 'alpha'")
    xkey = "snr_db" if axis == "snr" else "alpha"
    series = defaultdict(list)
    for r in records:
        series[r.detector].append(r)

    fig, ax = plt.subplots(figsize=(6.4, 4.8))
    for det, rows in series.items():
        rows.sort(key=lambda r: getattr(r, xkey))
        xs = [getattr(r, xkey) for r in rows]
        ys = [r.ber if r.bit_errors > 0 else zero_floor(r) for r in rows]
        (line,) = ax.plot(xs, ys, marker="o", label=det)
        for x, y, r in zip(xs, ys, rows):
            if r.bit_errors == 0:
                ax.plot([x], [y], marker="v", markersize=9, markerfacecolor="none", color=line.get_color())
                ax.annotate("0 errors", (x, y), textcoords="offset points", xytext=(4, -12), fontsize=7)
    ax.set_yscale("log")
    ax.set_xlabel("SNR (dB)" if axis == "snr" else "alpha")
    ax.set_ylabel("BER")
    first = records[0]
    meta = f"{first.n_tx}x{first.n_rx} QPSK, {first.family}, {first.frames} frames/point"
    if axis == "snr" and first.family == "sas":
        meta += f", alpha={first.alpha:g}"
    if axis == "alpha":
        meta += f", SNR={first.snr_db:g} dB"
    ax.set_title(title or meta, fontsize=9)
    ax.grid(True, which="both", alpha=0.3)
    ax.legend(fontsize=8)
    return fig


def zero_floor(record) -> float:
    return 1.0 / (record.frames * record.n_tx * BITS_PER_SYMBOL)


def emit_plot(csv_path, out_path, axis: str | None = None, title: str | None = None) -> Path:
    """Render a sweep CSV as a standalone SVG; see :func:`build_figure`."""
    records = read_csv(csv_path)
    if not any(not r.failed for r in records):
        raise EmptyPlotError(f"{csv_path}: no completed BER rows to plot")
    out = Path(out_path)
    with plt.rc_context(_RC):
        fig = build_figure(records, axis, title)
        try:
            fig.savefig(out, format="svg", metadata={"Date": None})
        finally:
            plt.close(fig)
    return out
