"""Convergence and velocity figures.

``convergence_svg`` writes a self-contained SVG by hand so that the plotted
coordinates can be read back exactly; the PNG variants use matplotlib.
"""

from __future__ import annotations

import math
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from swimcal.calib import write_atomic

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf"]
METHOD_LABELS = {
    "swim2real": "Proposer + line search",
    "swim2real_k1": "w/o line search",
    "warmstart": "Warm start",
    "random": "Random",
    "cmaes": "CMA-ES",
    "bayesopt": "BayesOpt",
}


def mean_curves(records):
    """Per-method mean best-so-far curve and per-seed final values (finished runs only)."""
    groups = {}
    for rec in records:
        if rec.aborted or not rec.curve:
            continue
        groups.setdefault(rec.method, []).append(rec)
    out = {}
    for method in sorted(groups):
        recs = groups[method]
        n = min(len(r.curve) for r in recs)
        curves = np.array([r.curve[:n] for r in recs], dtype=float)
        out[method] = (curves.mean(axis=0), [float(r.loss_best) for r in recs])
    return out


class AxisMap:
    """Affine data-to-pixel mapping used for every plotted point."""

    def __init__(self, n_evals, y_min, y_max, left=70.0, top=30.0, width=560.0, height=320.0):
        self.n = int(n_evals)
        y_min, y_max = float(y_min), float(y_max)
        if not y_max > y_min:
            y_max = y_min + (abs(y_min) if y_min else 1.0)
        self.y_min, self.y_max = y_min, y_max
        self.left, self.top, self.width, self.height = left, top, width, height

    def x(self, index):
        if self.n <= 1:
            return self.left + 0.5 * self.width
        return self.left + (index - 1) / (self.n - 1) * self.width

    def y(self, value):
        v = min(max(value, self.y_min), self.y_max) if math.isfinite(value) else self.y_max
        return self.top + (self.y_max - v) / (self.y_max - self.y_min) * self.height

    def y_inverse(self, py):
        return self.y_max - (py - self.top) / self.height * (self.y_max - self.y_min)


def convergence_svg(records, path, title="Best-so-far objective (mean over seeds)") -> Path:
    path = Path(path)
    curves = mean_curves(records)
    finite = [v for c, finals in curves.values() for v in list(c) + finals if math.isfinite(v)]
    y_min = min(finite) if finite else 0.0
    y_max = max(finite) if finite else 1.0
    y_min = min(y_min, 0.0)
    n = max((len(c) for c, _ in curves.values()), default=1)
    ax = AxisMap(n, y_min, y_max)
    W, H = ax.left + ax.width + 170, ax.top + ax.height + 60

    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W:g}" height="{H:g}" viewBox="0 0 {W:g} {H:g}">',
        f'<rect x="0" y="0" width="{W:g}" height="{H:g}" fill="white"/>',
        f'<text x="{ax.left:g}" y="18" font-family="sans-serif" font-size="13">{escape(title)}</text>',
        f'<g id="axes" data-n-evals="{ax.n}" data-y-min="{ax.y_min!r}" data-y-max="{ax.y_max!r}" '
        f'data-left="{ax.left:g}" data-top="{ax.top:g}" data-width="{ax.width:g}" data-height="{ax.height:g}">',
        f'<rect x="{ax.left:g}" y="{ax.top:g}" width="{ax.width:g}" height="{ax.height:g}" '
        'fill="none" stroke="#444" stroke-width="1"/>',
    ]
    for frac in np.linspace(0, 1, 5):
        v = ax.y_min + frac * (ax.y_max - ax.y_min)
        py = ax.y(v)
        parts.append(f'<line x1="{ax.left - 4:g}" y1="{py:.6f}" x2="{ax.left:g}" y2="{py:.6f}" stroke="#444"/>')
        parts.append(f'<text x="{ax.left - 6:g}" y="{py + 4:.6f}" text-anchor="end" font-family="sans-serif" '
                     f'font-size="10">{v:.3g}</text>')
    for i in sorted({1, n, *range(10, n + 1, 10)}):
        px = ax.x(i)
        parts.append(f'<text x="{px:.6f}" y="{ax.top + ax.height + 14:g}" text-anchor="middle" '
                     f'font-family="sans-serif" font-size="10">{i}</text>')
    parts.append(f'<text x="{ax.left + ax.width / 2:g}" y="{ax.top + ax.height + 32:g}" text-anchor="middle" '
                 'font-family="sans-serif" font-size="11">evaluation</text>')
    parts.append("</g>")

    for k, (method, (curve, finals)) in enumerate(curves.items()):
        color = PALETTE[k % len(PALETTE)]
        pts = " ".join(f"{ax.x(i):.6f},{ax.y(v):.6f}" for i, v in enumerate(curve, 1))
        parts.append(f'<polyline data-method="{escape(method)}" points="{pts}" fill="none" '
                     f'stroke="{color}" stroke-width="1.5"/>')
        for v in finals:
            parts.append(f'<circle data-method="{escape(method)}" cx="{ax.x(len(curve)):.6f}" cy="{ax.y(v):.6f}" '
                         f'r="3" fill="{color}" fill-opacity="0.6"/>')
        ly = ax.top + 14 + 16 * k
        lx = ax.left + ax.width + 12
        parts.append(f'<line x1="{lx:g}" y1="{ly - 4:g}" x2="{lx + 18:g}" y2="{ly - 4:g}" stroke="{color}" '
                     'stroke-width="2"/>')
        parts.append(f'<text x="{lx + 24:g}" y="{ly:g}" font-family="sans-serif" font-size="11">'
                     f'{escape(METHOD_LABELS.get(method, method))}</text>')
    parts.append("</svg>")
    write_atomic(path, "\n".join(parts) + "\n")
    return path


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def convergence_png(records, path, dpi=150) -> Path:
    plt = _pyplot()
    curves = mean_curves(records)
    fig, ax = plt.subplots(figsize=(6.4, 3.8))
    for k, (method, (curve, finals)) in enumerate(curves.items()):
        color = PALETTE[k % len(PALETTE)]
        x = np.arange(1, len(curve) + 1)
        ax.plot(x, np.where(np.isfinite(curve), curve * 1000.0, np.nan), color=color,
                label=METHOD_LABELS.get(method, method))
        f = np.asarray(finals) * 1000.0
        ax.scatter(np.full(f.size, len(curve)), f, color=color, s=14, alpha=0.6, zorder=3)
    ax.set_xlabel("evaluation")
    ax.set_ylabel("best-so-far marker error (mm)")
    ax.grid(alpha=0.3)
    if curves:
        ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=dpi)
    plt.close(fig)
    return Path(path)


def velocity_png(sweep: dict, path, dpi=150) -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6.4, 3.8))
    for k, (method, s) in enumerate(sorted(sweep.items())):
        f = [r["frequency_hz"] for r in s["rows"]]
        e = [r["abs_error_mm_s"] if math.isfinite(r["abs_error_mm_s"]) else np.nan for r in s["rows"]]
        label = f"{METHOD_LABELS.get(method, method)} (MAE {s['mae_mm_s']:.1f} mm/s)"
        ax.plot(f, e, marker="o", ms=3, color=PALETTE[k % len(PALETTE)], label=label)
    ax.set_xlabel("actuation frequency (Hz)")
    ax.set_ylabel("|v_sim - v_real| (mm/s)")
    ax.grid(alpha=0.3)
    if sweep:
        ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=dpi)
    plt.close(fig)
    return Path(path)
