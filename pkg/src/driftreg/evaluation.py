"""Target registration error statistics, rank-sum test and report output."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import norm, rankdata

# Column order of the reference results table; unknown methods sort after these.
METHOD_ORDER = ("initial", "center", "knn", "cpd", "feat-cpd", "end-to-end")
EXACT_MAX = 8


@dataclass(frozen=True)
class TREStats:
    errors: np.ndarray
    mean: float
    std: float  # population standard deviation
    count: int

    @classmethod
    def from_errors(cls, errors):
        e = np.asarray(errors, dtype=np.float64)
        return cls(e, float(e.mean()), float(e.std()), len(e))


def target_registration_error(pairs, displacements):
    """``|fixed_i - (moving_i + d_i)|`` per landmark pair."""
    d = np.asarray(displacements, dtype=np.float64)
    if d.shape != pairs.moving.shape:
        raise ValueError(f"displacements shape {d.shape} does not match {pairs.moving.shape}")
    return TREStats.from_errors(np.linalg.norm(pairs.fixed - (pairs.moving + d), axis=1))


# -- Wilcoxon-Mann-Whitney ----------------------------------------------------

def _u_statistic(ranks, n):
    return ranks[:n].sum() - n * (n + 1) / 2.0


def _exact_p(ranks, n, m):
    """Two-sided p from the exact null distribution of the rank sum.

    Midranks are multiples of 1/2, so doubled ranks are integers and the
    distribution of the doubled rank sum over all ``C(n+m, n)`` splits is
    counted by dynamic programming.
    """
    r2 = np.rint(2 * ranks).astype(np.int64)
    top = int(r2.sum())
    # counts[k][s]: number of k-subsets with doubled rank sum s (float64 avoids overflow)
    counts = np.zeros((n + 1, top + 1))
    counts[0, 0] = 1.0
    for r in r2:
        counts[1:, r:] += counts[:-1, :top + 1 - r].copy()
    dist = counts[n]
    centre2 = n * (n + m + 1)
    observed = abs(int(r2[:n].sum()) - centre2)
    sums = np.arange(top + 1)
    return float(dist[np.abs(sums - centre2) >= observed].sum() / dist.sum())


def _normal_p(ranks, n, m):
    total = n + m
    u = _u_statistic(ranks, n)
    _, tie_counts = np.unique(ranks, return_counts=True)
    tie_term = (tie_counts ** 3 - tie_counts).sum() / (total * (total - 1))
    var = n * m / 12.0 * ((total + 1) - tie_term)
    if var <= 0:
        return 1.0
    z = (abs(u - n * m / 2.0) - 0.5) / math.sqrt(var)
    return float(2.0 * norm.sf(max(z, 0.0)))


def rank_sum_test(a, b, method="auto"):
    """Two-sided Wilcoxon rank-sum p-value with average ranks for ties.

    ``method="auto"`` enumerates exactly when ``min(n, m) <= 8`` and uses the
    tie- and continuity-corrected normal approximation otherwise.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if len(a) == 0 or len(b) == 0:
        raise ValueError("rank-sum test needs two non-empty samples")
    # order the samples canonically so p(a, b) == p(b, a) bit for bit
    if (len(a), tuple(np.sort(a))) > (len(b), tuple(np.sort(b))):
        a, b = b, a
    n, m = len(a), len(b)
    ranks = rankdata(np.concatenate([a, b]))
    if method == "auto":
        method = "exact" if min(n, m) <= EXACT_MAX else "normal"
    p = _exact_p(ranks, n, m) if method == "exact" else _normal_p(ranks, n, m)
    return float(min(max(p, np.nextafter(0.0, 1.0)), 1.0))


def format_p(p):
    return "<1e-4" if p < 1e-4 else f"{p:.1e}"


# -- reports ------------------------------------------------------------------

def _method_key(name):
    return (METHOD_ORDER.index(name) if name in METHOD_ORDER else len(METHOD_ORDER), name)


def results_csv(results):
    """CSV text for ``results``: dicts with ``case``, ``method`` and ``stats``."""
    rows = sorted(results, key=lambda r: (str(r["case"]), _method_key(r["method"])))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["case", "method", "mean_tre_mm", "std_tre_mm_population", "count"])
    for r in rows:
        s = r["stats"]
        writer.writerow([r["case"], r["method"], f"{s.mean:.6f}", f"{s.std:.6f}", s.count])
    return buf.getvalue()


def plot_results(results, path):
    """Per-method bar chart of mean TRE with the per-case means overlaid."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    methods = sorted({r["method"] for r in results}, key=_method_key)
    per_method = {m: [r["stats"].mean for r in results if r["method"] == m] for m in methods}
    with matplotlib.rc_context({"svg.hashsalt": "driftreg", "svg.fonttype": "path"}):
        fig, ax = plt.subplots(figsize=(6.4, 3.6))
        x = np.arange(len(methods))
        means = [np.mean(per_method[m]) for m in methods]
        ax.bar(x, means, color="0.75", edgecolor="k", width=0.6)
        for i, m in enumerate(methods):
            vals = per_method[m]
            ax.plot(np.full(len(vals), x[i]), vals, "k.", ms=4)
        ax.set_xticks(x)
        ax.set_xticklabels(methods)
        ax.set_ylabel("mean TRE (mm)")
        ax.spines["top"].set_visible(False)
        ax.spines["right"].set_visible(False)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)


def emit_report(results, out_dir, comparisons=None):
    """Write ``results.csv`` and ``results.svg`` (plus ``pvalues.csv`` when
    rank-sum comparisons are supplied as ``(method_a, method_b, p)``)."""
    if not results:
        raise ValueError("no results to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "results.csv").write_text(results_csv(results))
    plot_results(results, out / "results.svg")
    if comparisons:
        lines = ["method_a,method_b,p_value"] + [f"{a},{b},{p:.6e}" for a, b, p in comparisons]
        (out / "pvalues.csv").write_text("\n".join(lines) + "\n")
