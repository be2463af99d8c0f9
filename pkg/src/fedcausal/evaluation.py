"""Error metrics and posterior summaries for treatment-effect estimates."""

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np
from scipy import stats


def size_weighted_mean(values, sizes):
    """``sum(n_s * v_s) / sum(n_s)`` accumulated exactly and rounded once.

    Exact rational sums make the result independent of source order and equal
    to the correctly rounded weighted mean of the given floats.
    """
    values = [float(v) for v in values]
    sizes = [int(n) for n in sizes]
    if not values or len(values) != len(sizes):
        raise ValueError("need one size per value")
    den = sum(sizes)
    if den <= 0 or min(sizes) < 0:
        raise ValueError("source sizes must be non-negative with a positive total")
    return float(sum(Fraction(v) * n for v, n in zip(values, sizes)) / den)


def pehe(true_ite, est_ite):
    """Mean squared ITE error over all records and its square root.

    The denominator is the total record count, which equals ``m * n_s`` when the
    sources have equal sizes.
    """
    t = np.asarray(true_ite, dtype=np.float64).ravel()
    e = np.asarray(est_ite, dtype=np.float64).ravel()
    if t.shape != e.shape:
        raise ValueError(f"length mismatch: {t.size} true vs {e.size} estimated")
    if t.size == 0:
        raise ValueError("no records")
    v = float(np.mean((t - e) ** 2))
    return v, math.sqrt(v)


def ate_error(true_tau, est_tau):
    return abs(float(true_tau) - float(est_tau))


@dataclass
class PosteriorSummary:
    mean: float
    sd: float
    lower: float
    upper: float
    covered: bool
    hist_edges: list = field(default_factory=list)
    hist_counts: list = field(default_factory=list)


def posterior_report(samples=None, true_tau=None, mean=None, var=None, level=0.95, bins=20):
    """Central interval, coverage of ``true_tau`` and a histogram table.

    Pass either ``samples`` (at least two) or a ``mean``/``var`` pair describing
    a Gaussian posterior.
    """
    a = (1.0 - level) / 2.0
    if samples is not None:
        s = np.asarray(samples, dtype=np.float64).ravel()
        if s.size < 2:
            raise ValueError("need at least two samples")
        mu, sd = float(s.mean()), float(s.std(ddof=1))
        lo, hi = (float(q) for q in np.quantile(s, [a, 1.0 - a]))
        if sd == 0.0:
            counts, edges = np.array([s.size]), np.array([s[0], s[0]])
        else:
            counts, edges = np.histogram(s, bins=bins)
    else:
        if mean is None or var is None:
            raise ValueError("need samples or a mean/variance pair")
        mu, sd = float(mean), math.sqrt(max(float(var), 0.0))
        z = stats.norm.ppf(1.0 - a)
        lo, hi = mu - z * sd, mu + z * sd
        counts, edges = np.array([]), np.array([])
    covered = bool(true_tau is not None and lo <= true_tau <= hi)
    return PosteriorSummary(mu, sd, lo, hi, covered, edges.tolist(), counts.tolist())


@dataclass
class MetricReport:
    label: str
    pehe: float = None
    sqrt_pehe: float = None
    ate_error: float = None
    ate_estimate: float = None
    ate_true: float = None
    per_source: dict = field(default_factory=dict)
    posterior: PosteriorSummary = None

    def row(self):
        return {
            "label": self.label,
            "pehe": self.pehe,
            "sqrt_pehe": self.sqrt_pehe,
            "ate_error": self.ate_error,
            "ate_estimate": self.ate_estimate,
            "ate_true": self.ate_true,
        }


def report(label, true_ite, est_ite, est_ate=None, per_source=None, posterior=None):
    """Assemble a :class:`MetricReport`; ``est_ate`` defaults to the mean estimated ITE."""
    v, r = pehe(true_ite, est_ite)
    tau = float(np.mean(true_ite))
    ate = float(np.mean(est_ite)) if est_ate is None else float(est_ate)
    return MetricReport(label, v, r, ate_error(tau, ate), ate, tau, per_source or {}, posterior)


def write_reports_csv(path, reports):
    rows = [r.row() for r in reports]
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=list(rows[0]))
        wr.writeheader()
        for row in rows:
            wr.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def write_report_json(path, rep):
    d = asdict(rep)
    with open(path, "w") as fh:
        json.dump(d, fh, indent=2, sort_keys=True)


def write_histogram_csv(path, summary):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["bin_left", "count"])
        for e, c in zip(summary.hist_edges[:-1], summary.hist_counts):
            wr.writerow([repr(float(e)), int(c)])
