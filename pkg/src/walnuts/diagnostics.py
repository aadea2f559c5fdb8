"""Chain diagnostics: ESS, index displacement, binned trends and summaries."""

import math
from dataclasses import dataclass

import numpy as np
import scipy.stats


def autocorrelation(x):
    """Normalized autocorrelation of a 1D series via FFT."""
    x = np.asarray(x, dtype=float)
    n = x.size
    x = x - x.mean()
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x, size)
    acov = np.fft.irfft(f * np.conj(f), size)[:n] / n
    if acov[0] <= 0:
        return np.ones(n)
    return acov / acov[0]


def ess(series, return_flag=False):
    """Effective sample size with Geyer's initial monotone sequence.

    The estimate is clipped to [1, N]. A constant series gives 1 and, with
    ``return_flag``, a True degenerate flag.
    """
    x = np.asarray(series, dtype=float).ravel()
    n = x.size
    if n < 10:
        raise ValueError("need at least 10 draws")
    if not np.all(np.isfinite(x)):
        raise ValueError("series must be finite")
    if np.ptp(x) == 0:
        return (1.0, True) if return_flag else 1.0
    rho = autocorrelation(x)
    pairs = rho[: n - n % 2].reshape(-1, 2).sum(axis=1)
    negative = np.nonzero(pairs < 0)[0]
    if negative.size:
        pairs = pairs[: negative[0]]
    pairs = np.minimum.accumulate(pairs)
    tau = -1.0 + 2.0 * pairs.sum()
    value = n / tau if tau > 0 else float(n)
    value = float(min(max(value, 1.0), n))
    return (value, False) if return_flag else value


def relative_displacement(stats):
    """|i| divided by the number of macro intervals in the orbit."""
    out = []
    for st in stats:
        span = (1 << st.m) - 1
        out.append(abs(st.i) / span if span > 0 else 0.0)
    return np.array(out, dtype=float)


def index_displacement_hist(stats, bins=20):
    """Histogram of the selected state's relative time distance from the
    initial state, on [0, 1].

    Returns:
        (counts, edges)
    """
    values = relative_displacement(stats)
    edges = np.linspace(0.0, 1.0, bins + 1)
    if values.size == 0:
        return np.zeros(bins, dtype=int), edges
    counts, _ = np.histogram(values, bins=edges)
    return counts, edges


@dataclass
class Trend:
    centers: np.ndarray
    means: np.ndarray
    counts: np.ndarray
    spearman: float


def binned_trend(x, y, bins=10):
    """Means of y over equal-count bins of x, plus Spearman's rank
    correlation of (x, y)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise ValueError("x and y must have equal lengths")
    keep = np.isfinite(x) & np.isfinite(y)
    x, y = x[keep], y[keep]
    if x.size < 2:
        return Trend(np.array([]), np.array([]), np.array([], dtype=int), math.nan)
    order = np.argsort(x, kind="stable")
    groups = np.array_split(order, min(bins, x.size))
    centers = np.array([x[g].mean() for g in groups])
    means = np.array([y[g].mean() for g in groups])
    counts = np.array([g.size for g in groups])
    rho = scipy.stats.spearmanr(x, y).statistic if np.ptp(x) > 0 and np.ptp(y) > 0 else math.nan
    return Trend(centers, means, counts, float(rho))


def matched_nuts_step(stats):
    """Fixed NUTS step that spends gradients at the same rate per unit of
    integration time as the given WALNUTS transitions."""
    ratios = [((1 << st.m) - 1) * st.h / st.grads for st in stats if st.grads > 0]
    return float(np.mean(ratios))


STATS_COLUMNS = ["iter", "i", "m", "envelope", "min_micro_step", "max_micro_step", "grads", "terminated_by"]


def stats_rows(stats, include_coord=False, start=0):
    rows = []
    for k, st in enumerate(stats):
        row = {
            "iter": start + k,
            "i": st.i,
            "m": st.m,
            "envelope": st.envelope,
            "min_micro_step": st.min_micro_step,
            "max_micro_step": st.max_micro_step,
            "grads": st.grads,
            "terminated_by": st.terminated_by,
        }
        if include_coord:
            row["min_omega"] = st.min_coord
            row["max_omega"] = st.max_coord
        rows.append(row)
    return rows


def summarize(draws, stats, names, chains=None):
    """Per-parameter summaries and cost totals for one or more chains.

    Args:
        draws: (n, dim) array, or a list of per-chain arrays.
        stats: Flat list of TransitionStats for all retained transitions.
        names: Parameter names.
        chains: Optional list of per-chain draw arrays used for ESS (summed
            across chains); defaults to treating ``draws`` as one chain.
    """
    if isinstance(draws, list):
        chains = draws
        draws = np.concatenate(draws, axis=0)
    chains = [draws] if chains is None else chains
    grads = int(sum(st.grads for st in stats))
    params = {}
    for k, name in enumerate(names):
        col = draws[:, k]
        value = sum(ess(c[:, k]) for c in chains) if min(len(c) for c in chains) >= 10 else math.nan
        params[name] = {
            "mean": float(col.mean()),
            "sd": float(col.std(ddof=1)) if col.size > 1 else 0.0,
            "q05": float(np.quantile(col, 0.05)),
            "q50": float(np.quantile(col, 0.5)),
            "q95": float(np.quantile(col, 0.95)),
            "min": float(col.min()),
            "max": float(col.max()),
            "ess": value,
        }
    sq_norm = sum(ess(np.sum(c**2, axis=1)) for c in chains) if min(len(c) for c in chains) >= 10 else math.nan
    terminations = {}
    for st in stats:
        terminations[st.terminated_by] = terminations.get(st.terminated_by, 0) + 1
    envelopes = np.array([st.envelope for st in stats])
    return {
        "draws": int(draws.shape[0]),
        "total_gradients": grads,
        "ess_sq_norm": sq_norm,
        "ess_sq_norm_per_1000_grads": 1000.0 * sq_norm / grads if grads else math.nan,
        "mean_envelope": float(envelopes.mean()) if envelopes.size else math.nan,
        "terminations": terminations,
        "divergent_fraction": terminations.get("divergent", 0) / len(stats) if stats else 0.0,
        "parameters": params,
    }
