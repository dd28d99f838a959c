"""The versioned CSV contract this renderer accepts.

Column lists must match the producing harness exactly (names and order);
anything else is rejected with a diff so silent drift between the two
packages is impossible.
"""

from __future__ import annotations

import csv

SCHEMA_VERSION = 1

HEATMAP_COLUMNS = [
    "sampler",
    "sigma",
    "eps",
    "mean_accept",
    "n_chains",
    "n_samples",
    "reject_metropolis",
    "reject_nonreversible",
    "reject_solver_failed",
    "reject_divergent",
]
ESS_COLUMNS = [
    "model",
    "sampler",
    "sigma",
    "chain_set",
    "min_ess",
    "min_ess_per_sec",
    "max_rhat",
    "adapted_eps",
    "mean_accept",
    "n_chains",
    "n_main",
    "wall_seconds",
]

COLUMNS_BY_KIND = {
    "heatmap": HEATMAP_COLUMNS,
    "ess_vs_sigma": ESS_COLUMNS,
    "rhat_vs_sigma": ESS_COLUMNS,
    "stepsize_vs_sigma": ESS_COLUMNS,
}


class SchemaError(ValueError):
    """Input CSV header does not match the documented contract."""


def read_rows(path, kind: str) -> list[dict]:
    """Load and validate a CSV for the given figure kind.

    Raises :class:`SchemaError` with the column diff when the header does
    not match the version-1 contract exactly.
    """
    expected = COLUMNS_BY_KIND[kind]
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file, expected header {expected}")
        if header != expected:
            missing = [c for c in expected if c not in header]
            unexpected = [c for c in header if c not in expected]
            raise SchemaError(
                f"{path}: header does not match schema v{SCHEMA_VERSION} for "
                f"kind {kind!r}\n  missing: {missing}\n  unexpected: {unexpected}\n"
                f"  (column order must also match)"
            )
        return [dict(zip(expected, row)) for row in reader]
