"""Metrics, the copy-last-frame baseline and report generation."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .backbones import MetricBackbone
from .losses import feature_distance

logger = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
K1, K2 = 0.01, 0.03
COPY_LAST = "Copy-Last-Frame"
DECIMALS = 6

Predictor = Callable[[torch.Tensor, int], torch.Tensor]


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA, dtype=torch.float64) -> torch.Tensor:
    x = torch.arange(size, dtype=dtype) - (size - 1) / 2
    g = torch.exp(-x ** 2 / (2 * sigma ** 2))
    g = g / g.sum()
    return g[:, None] * g[None, :]


def ssim(x: torch.Tensor, y: torch.Tensor, data_range: float = 1.0) -> torch.Tensor:
    """Single-scale SSIM over valid (unpadded) 11x11 Gaussian windows.

    ``(3, H, W)`` gives a scalar, ``(B, 3, H, W)`` one value per sample;
    channels are scored separately and averaged.
    """
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    squeeze = x.dim() == 3
    x = torch.as_tensor(x).double()
    y = torch.as_tensor(y).double()
    if squeeze:
        x, y = x.unsqueeze(0), y.unsqueeze(0)
    b, c, h, w = x.shape
    win = gaussian_window().to(x.device).expand(c, 1, SSIM_WINDOW, SSIM_WINDOW)

    def filt(z):
        return F.conv2d(z, win, groups=c)

    mu_x, mu_y = filt(x), filt(y)
    sxx = filt(x * x) - mu_x ** 2
    syy = filt(y * y) - mu_y ** 2
    sxy = filt(x * y) - mu_x * mu_y
    c1, c2 = (K1 * data_range) ** 2, (K2 * data_range) ** 2
    smap = ((2 * mu_x * mu_y + c1) * (2 * sxy + c2)) / ((mu_x ** 2 + mu_y ** 2 + c1) * (sxx + syy + c2))
    val = smap.mean(dim=(1, 2, 3))
    return val[0] if squeeze else val


@torch.no_grad()
def perceptual_distance(x: torch.Tensor, y: torch.Tensor, metric: MetricBackbone) -> torch.Tensor:
    """Channel-weighted distance of unit-normalised features, summed over blocks."""
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    squeeze = x.dim() == 3
    if squeeze:
        x, y = x.unsqueeze(0), y.unsqueeze(0)
    d = feature_distance(metric(x), metric(y), metric.lin)
    return d[0] if squeeze else d


def copy_last_frame(clip: torch.Tensor, n_steps: int = 1) -> torch.Tensor:
    """Repeat the last input frame: ``(B, 3, T, H, W) -> (B, 3, n_steps, H, W)``."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    last = clip[..., -1:, :, :]
    reps = [1] * clip.dim()
    reps[-3] = n_steps
    return last.repeat(*reps)


# ---------------------------------------------------------------------------
# Records and reports
# ---------------------------------------------------------------------------

@dataclass
class EvalRecord:
    sample_id: str
    step: int
    ssim: float
    pdist: float
    motion: float
    method: str = ""

    def __post_init__(self):
        if self.step < 1:
            raise ValueError("step index starts at 1")
        if not all(math.isfinite(v) for v in (self.ssim, self.pdist, self.motion)):
            raise ValueError(f"non-finite metric in record {self.sample_id}@{self.step}")


@dataclass
class ReportTable:
    rows: list[dict] = field(default_factory=list)
    bins: list[dict] = field(default_factory=list)
    steps: list[dict] = field(default_factory=list)
    histogram: list[dict] = field(default_factory=list)


def _by_method(records: Iterable[EvalRecord]) -> dict[str, list[EvalRecord]]:
    out: dict[str, list[EvalRecord]] = {}
    for r in records:
        out.setdefault(r.method, []).append(r)
    return out


def summary_rows(records: Sequence[EvalRecord], step: int = 1) -> list[dict]:
    """Mean SSIM and mean distance (x100) per method at one horizon."""
    rows = []
    for method, recs in _by_method(r for r in records if r.step == step).items():
        rows.append({"method": method,
                     "ssim": float(np.mean([r.ssim for r in recs])),
                     "pdist_x100": 100.0 * float(np.mean([r.pdist for r in recs])),
                     "n": len(recs)})
    return rows


def step_curves(records: Sequence[EvalRecord]) -> list[dict]:
    rows = []
    for method, recs in _by_method(records).items():
        for step in sorted({r.step for r in recs}):
            sel = [r for r in recs if r.step == step]
            rows.append({"method": method, "step": step,
                         "ssim": float(np.mean([r.ssim for r in sel])),
                         "pdist": float(np.mean([r.pdist for r in sel])),
                         "n": len(sel)})
    return rows


def motion_binned_report(records: Sequence[EvalRecord], bin_width: float = 0.02, min_count: int = 2,
                         metric: str = "pdist", step: int = 1) -> list[dict]:
    """Per-motion-bin mean/median/quartiles of ``metric`` for each method.

    Bins are ``[k*w, (k+1)*w)`` in the sample's motion score, listed up to the
    last populated bin; empty bins get ``status='empty'``, bins with fewer than
    ``min_count`` samples ``'sparse'``. A closing ``'truncated'`` row per method
    marks the end of the axis.
    """
    recs = [r for r in records if r.step == step]
    if not recs:
        raise ValueError("no records to bin")
    if bin_width <= 0:
        raise ValueError("bin_width must be positive")
    rows = []
    for method, mrecs in _by_method(recs).items():
        idx = np.array([int(math.floor(r.motion / bin_width + 1e-9)) for r in mrecs])
        vals = np.array([getattr(r, metric) for r in mrecs], dtype=np.float64)
        motion = np.array([r.motion for r in mrecs])
        last = int(idx.max())
        for k in range(last + 1):
            sel = idx == k
            n = int(sel.sum())
            row = {"method": method, "bin_lo": k * bin_width, "bin_hi": (k + 1) * bin_width, "count": n}
            if n:
                v = vals[sel]
                row.update(mean=float(v.mean()), median=float(np.median(v)),
                           q1=float(np.quantile(v, 0.25)), q3=float(np.quantile(v, 0.75)),
                           motion_mean=float(motion[sel].mean()),
                           status="ok" if n >= min_count else "sparse")
            else:
                row.update(mean=None, median=None, q1=None, q3=None, motion_mean=None, status="empty")
            rows.append(row)
        rows.append({"method": method, "bin_lo": (last + 1) * bin_width, "bin_hi": None, "count": 0,
                     "mean": None, "median": None, "q1": None, "q3": None, "motion_mean": None,
                     "status": "truncated"})
    return rows


def score_histogram(records: Sequence[EvalRecord], step: int = 9, bins: int = 20,
                    metric: str = "pdist") -> list[dict]:
    sel = [r for r in records if r.step == step]
    if not sel:
        return []
    vals = np.array([getattr(r, metric) for r in sel])
    edges = np.linspace(0.0, max(float(vals.max()), 1e-12), bins + 1)
    rows = []
    for method, recs in _by_method(sel).items():
        counts, _ = np.histogram([getattr(r, metric) for r in recs], bins=edges)
        rows.extend({"method": method, "lo": float(edges[i]), "hi": float(edges[i + 1]), "count": int(c)}
                    for i, c in enumerate(counts))
    return rows


# ---------------------------------------------------------------------------
# Evaluation drivers
# ---------------------------------------------------------------------------

def copy_last_predictor(clip: torch.Tensor, n_steps: int) -> torch.Tensor:
    return copy_last_frame(clip, n_steps)


@torch.no_grad()
def multi_step_eval(predictors: Mapping[str, Predictor], inputs: torch.Tensor, targets: torch.Tensor,
                    metric: MetricBackbone, n_steps: int = 10, sample_ids: Sequence[str] | None = None,
                    batch_size: int = 16, include_copy_last: bool = True,
                    hist_step: int = 9) -> tuple[list[EvalRecord], ReportTable]:
    """Recursive evaluation of every predictor against ``targets``.

    ``inputs`` is ``(N, 3, 8, H, W)``, ``targets`` ``(N, 3, >=n_steps, H, W)``.
    A predictor maps ``(B, 3, 8, H, W)`` and a horizon to ``(B, 3, n, H, W)``.
    Each sample's motion score is the copy-last-frame distance at step 1.
    """
    n = inputs.shape[0]
    if targets.shape[2] < n_steps:
        raise ValueError(f"targets cover {targets.shape[2]} steps, {n_steps} requested")
    ids = list(sample_ids) if sample_ids is not None else [f"s{i:05d}" for i in range(n)]
    preds = dict(predictors)
    if include_copy_last:
        preds = {COPY_LAST: copy_last_predictor, **{k: v for k, v in preds.items() if k != COPY_LAST}}
    motion = torch.empty(n, dtype=torch.float64)
    for a in range(0, n, batch_size):
        x = inputs[a:a + batch_size]
        motion[a:a + batch_size] = perceptual_distance(x[:, :, -1], targets[a:a + batch_size, :, 0], metric).double()
    records: list[EvalRecord] = []
    for name, fn in preds.items():
        for a in range(0, n, batch_size):
            x = inputs[a:a + batch_size]
            y = targets[a:a + batch_size, :, :n_steps]
            p = fn(x, n_steps)
            for k in range(n_steps):
                s = ssim(p[:, :, k], y[:, :, k])
                d = perceptual_distance(p[:, :, k].to(y.dtype), y[:, :, k], metric)
                for i in range(x.shape[0]):
                    records.append(EvalRecord(ids[a + i], k + 1, float(s[i]), float(d[i]),
                                              float(motion[a + i]), name))
    table = ReportTable(rows=summary_rows(records, 1), steps=step_curves(records),
                        histogram=score_histogram(records, min(hist_step, n_steps)))
    try:
        table.bins = motion_binned_report(records)
    except ValueError:
        pass
    return records, table


def clips_with_horizon(clips, n_steps: int):
    """Keep clips whose target covers ``n_steps``; returns (kept, n_skipped)."""
    kept = [c for c in clips if len(c.target) >= n_steps]
    skipped = len(clips) - len(kept)
    if skipped:
        logger.warning("%d clip(s) shorter than 8+%d frames skipped", skipped, n_steps)
    return kept, skipped


# ---------------------------------------------------------------------------
# Writers
# ---------------------------------------------------------------------------

def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.{DECIMALS}f}"
    return str(v)


def write_csv(path: Path, rows: Sequence[dict], columns: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(columns)
        for r in rows:
            wr.writerow([_fmt(r.get(c)) for c in columns])


def format_table1(rows: Sequence[dict]) -> str:
    """Plain-text table: ``Method | SSIM | LPIPS (x100)`` with 3 and 2 decimals."""
    width = max([len("Method")] + [len(r["method"]) for r in rows])
    lines = [f"{'Method':<{width}}  {'SSIM':>6}  {'LPIPS (x100)':>12}"]
    for r in rows:
        lines.append(f"{r['method']:<{width}}  {r['ssim']:>6.3f}  {r['pdist_x100']:>12.2f}")
    return "\n".join(lines) + "\n"


def emit_reports(records: Sequence[EvalRecord], table: ReportTable, out_dir: str | Path,
                 plots: bool = True) -> list[Path]:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"cannot write reports to {out}: {exc}") from exc
    written = []
    recs = sorted(records, key=lambda r: (r.method, r.sample_id, r.step))
    p = out / "metrics.csv"
    write_csv(p, [asdict(r) for r in recs], ["method", "sample_id", "step", "ssim", "pdist", "motion"])
    written.append(p)
    p = out / "table1.csv"
    write_csv(p, table.rows, ["method", "ssim", "pdist_x100", "n"])
    written.append(p)
    p = out / "table1.txt"
    p.write_text(format_table1(table.rows))
    written.append(p)
    p = out / "fig4_bins.csv"
    write_csv(p, table.bins, ["method", "bin_lo", "bin_hi", "count", "mean", "median", "q1", "q3",
                              "motion_mean", "status"])
    written.append(p)
    p = out / "fig5_steps.csv"
    write_csv(p, table.steps, ["method", "step", "ssim", "pdist", "n"])
    written.append(p)
    p = out / "fig5_hist.csv"
    write_csv(p, table.histogram, ["method", "lo", "hi", "count"])
    written.append(p)
    p = out / "report.json"
    p.write_text(json.dumps({"table1": table.rows, "fig4_bins": table.bins, "fig5_steps": table.steps,
                             "fig5_hist": table.histogram}, indent=1, sort_keys=True))
    written.append(p)
    if plots:
        written.extend(_plots(table, out))
    return written


def _plots(table: ReportTable, out: Path) -> list[Path]:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = []
    methods = sorted({r["method"] for r in table.steps})
    if table.steps:
        fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
        for m in methods:
            rs = [r for r in table.steps if r["method"] == m]
            axes[0].plot([r["step"] for r in rs], [r["pdist"] for r in rs], marker="o", label=m)
            axes[1].plot([r["step"] for r in rs], [r["ssim"] for r in rs], marker="o", label=m)
        axes[0].set(xlabel="step", ylabel="perceptual distance")
        axes[1].set(xlabel="step", ylabel="SSIM")
        axes[0].legend(fontsize=7)
        fig.tight_layout()
        paths.append(out / "fig5_steps.png")
        fig.savefig(paths[-1], dpi=100)
        plt.close(fig)
    populated = [r for r in table.bins if r["status"] in ("ok", "sparse")]
    if populated:
        fig, ax = plt.subplots(figsize=(6, 3.5))
        for m in methods:
            rs = [r for r in populated if r["method"] == m]
            ax.errorbar([r["bin_lo"] + 0.5 * (r["bin_hi"] - r["bin_lo"]) for r in rs], [r["median"] for r in rs],
                        yerr=[[r["median"] - r["q1"] for r in rs], [r["q3"] - r["median"] for r in rs]],
                        fmt="o-", capsize=3, label=m)
        ax.set(xlabel="motion (copy-last distance)", ylabel="distance")
        ax.legend(fontsize=7)
        fig.tight_layout()
        paths.append(out / "fig4_bins.png")
        fig.savefig(paths[-1], dpi=100)
        plt.close(fig)
    return paths
