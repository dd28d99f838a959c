"""Chain-quality statistics: rank-normalized bulk ESS and split R-hat.

Both statistics operate on rank-normalized draws (pooled fractional ranks
mapped through the inverse normal CDF with the 3/8 offset) and on chains
split in half, following the methodology the sampling literature has
converged on.  Rank normalization makes them invariant under strictly
monotone transformations of the quantity being diagnosed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.stats

Array = np.ndarray


def _split_chains(chains: Array) -> Array:
    """Split each chain in half, yielding twice as many half-length chains."""
    chains = np.atleast_2d(np.asarray(chains, dtype=float))
    n = chains.shape[1]
    half = n // 2
    return np.vstack([chains[:, :half], chains[:, n - half :]])


def _rank_normalize(chains: Array) -> Array:
    """Pooled fractional ranks (offset 3/8) through the inverse normal CDF."""
    flat = chains.ravel()
    ranks = scipy.stats.rankdata(flat, method="average")
    size = flat.shape[0]
    z = scipy.stats.norm.ppf((ranks - 0.375) / (size + 0.25))
    return z.reshape(chains.shape)


def _within_between(chains: Array) -> tuple[float, float, float]:
    """Within-chain variance W, between-chain variance B and var-plus."""
    m, n = chains.shape
    chain_means = chains.mean(axis=1)
    w = float(np.mean(chains.var(axis=1, ddof=1)))
    b = float(n * chain_means.var(ddof=1)) if m > 1 else 0.0
    var_plus = (n - 1) / n * w + b / n
    return w, b, var_plus


def _autocovariances(chains: Array) -> Array:
    """Per-chain autocovariance sequences via FFT, biased (divide by n)."""
    m, n = chains.shape
    centered = chains - chains.mean(axis=1, keepdims=True)
    size = 2 ** int(np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(centered, size, axis=1)
    acov = np.fft.irfft(f * np.conj(f), size, axis=1)[:, :n].real / n
    return acov


def bulk_ess(chains: Array) -> float:
    """Multi-chain effective sample size of rank-normalized split chains.

    Uses the combined autocorrelation estimate with Geyer's initial-monotone
    truncation.  Returns ``nan`` for degenerate (constant) input, and is
    capped at the total number of draws.
    """
    chains = np.atleast_2d(np.asarray(chains, dtype=float))
    if chains.shape[1] < 4:
        raise ValueError("need at least 4 draws per chain")
    split = _split_chains(chains)
    if np.allclose(split, split.ravel()[0]):
        return math.nan
    z = _rank_normalize(split)
    m, n = z.shape
    w, _, var_plus = _within_between(z)
    if var_plus <= 0:
        return math.nan
    acov = _autocovariances(z).mean(axis=0)
    rho = 1.0 - (w - acov) / var_plus
    rho[0] = 1.0

    # Geyer paired sums: truncate at the first negative pair, then force the
    # sequence to be non-increasing.
    max_pairs = (n - 1) // 2
    tau = 1.0  # contribution of rho_0 handled via pairing below
    prev = math.inf
    total = 0.0
    for k in range(max_pairs):
        pair = rho[2 * k] + rho[2 * k + 1]
        if pair < 0:
            break
        pair = min(pair, prev)
        prev = pair
        total += pair
    tau = max(-1.0 + 2.0 * total, 1.0 / math.log10(m * n + 10.0))
    ess = m * n / tau
    return float(min(ess, m * n))


def split_rhat(chains: Array) -> float:
    """Rank-normalized split R-hat; values above one indicate non-convergence.

    Degenerate input (all chains constant and identical) yields ``nan``;
    chains stuck at distinct constants yield ``inf``.
    """
    chains = np.atleast_2d(np.asarray(chains, dtype=float))
    if chains.shape[1] < 4:
        raise ValueError("need at least 4 draws per chain")
    split = _split_chains(chains)
    if np.allclose(split, split.ravel()[0]):
        return math.nan
    z = _rank_normalize(split)
    w, b, var_plus = _within_between(z)
    if w <= 0:
        return math.inf if b > 0 else math.nan
    return float(np.sqrt(var_plus / w))


def mcse_mean(chains: Array) -> float:
    """Monte Carlo standard error of the posterior-mean estimate."""
    chains = np.atleast_2d(np.asarray(chains, dtype=float))
    ess = bulk_ess(chains)
    if not np.isfinite(ess) or ess <= 0:
        return math.nan
    return float(chains.std(ddof=1)) / math.sqrt(ess)


@dataclass
class DiagnosticsReport:
    """Summary of a set of chains over named quantities of interest.

    ``quantities`` maps a name to per-quantity statistics; chain-level
    acceptance and solver effort live in ``chains``.  ``to_rows`` flattens
    the per-quantity part into CSV-friendly records.
    """

    quantities: dict = field(default_factory=dict)
    chains: dict = field(default_factory=dict)
    wall_seconds: float = math.nan

    @classmethod
    def from_traces(cls, traces, names=None, extract=None) -> "DiagnosticsReport":
        """Build a report from per-chain traces of equal length.

        ``extract`` maps a trace to a ``(n_draws, n_quantities)`` array and
        defaults to the stored latent draws; ``names`` labels the columns.
        """
        arrays = [
            np.asarray(extract(t) if extract is not None else t.thetas, dtype=float)
            for t in traces
        ]
        stacked = np.stack(arrays)  # (chains, draws, dims)
        n_q = stacked.shape[2]
        if names is None:
            names = [f"q{i}" for i in range(n_q)]
        wall = float(sum(t.warmup_seconds + t.main_seconds for t in traces))
        report = cls(wall_seconds=wall)
        for j, name in enumerate(names):
            draws = stacked[:, :, j]
            ess = bulk_ess(draws)
            report.quantities[name] = {
                "ess": ess,
                "rhat": split_rhat(draws),
                "mean": float(draws.mean()),
                "mcse": mcse_mean(draws),
                "ess_per_second": ess / wall if wall > 0 and np.isfinite(ess) else math.nan,
                "degenerate": not np.isfinite(ess),
            }
        accept = [t.mean_accept for t in traces]
        newton = [float(np.mean(t.newton_iters)) for t in traces]
        counts: dict = {}
        for t in traces:
            for reason, cnt in t.reason_counts().items():
                counts[reason] = counts.get(reason, 0) + cnt
        report.chains = {
            "accept_rate": accept,
            "mean_newton_iters": newton,
            "reject_reason_counts": counts,
            "adapted_eps": [t.adapted_eps for t in traces],
        }
        return report

    def min_ess(self) -> float:
        return min(q["ess"] for q in self.quantities.values())

    def max_rhat(self) -> float:
        return max(q["rhat"] for q in self.quantities.values())

    def min_ess_per_second(self) -> float:
        return min(q["ess_per_second"] for q in self.quantities.values())

    def to_rows(self, **keys) -> list[dict]:
        rows = []
        for name, stats in self.quantities.items():
            row = dict(keys)
            row["quantity"] = name
            row.update(stats)
            rows.append(row)
        return rows
