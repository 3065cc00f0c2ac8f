"""Segmentation overlap, group tests and longitudinal stability metrics."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import GeometryError, StatsError
from .volume import LabelVolume

GROUPS = ("CU", "MCI")


def dice(a: LabelVolume, b: LabelVolume, label: int) -> float:
    """Dice overlap of one label; 1.0 when neither volume contains it."""
    if not a.same_grid(b):
        raise GeometryError("dice needs both label volumes on the same grid")
    ma = np.asarray(a.data) == label
    mb = np.asarray(b.data) == label
    denom = int(ma.sum()) + int(mb.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(ma & mb)) / denom


# --- regularized incomplete beta and Student t ------------------------------

_BETA_EPS = 1e-15
_BETA_TINY = 1e-300
_BETA_MAXIT = 10000


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for I_x(a, b) (modified Lentz)."""
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c, d = 1.0, 1.0 - qab * x / qap
    if abs(d) < _BETA_TINY:
        d = _BETA_TINY
    d = 1.0 / d
    h = d
    for m in range(1, _BETA_MAXIT + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _BETA_TINY:
            d = _BETA_TINY
        c = 1.0 + aa / c
        if abs(c) < _BETA_TINY:
            c = _BETA_TINY
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _BETA_TINY:
            d = _BETA_TINY
        c = 1.0 + aa / c
        if abs(c) < _BETA_TINY:
            c = _BETA_TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _BETA_EPS:
            return h
    raise StatsError(f"incomplete beta failed to converge (a={a}, b={b}, x={x})")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta function I_x(a, b)."""
    if a <= 0 or b <= 0:
        raise ValueError("betainc needs a, b > 0")
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"x must lie in [0, 1], got {x}")
    if x == 0.0 or x == 1.0:
        return x
    log_front = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    front = math.exp(log_front)
    # the fraction converges fast on the side below the mean
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_sf_two_sided(t: float, df: float) -> float:
    """P(|T| >= |t|) for Student's t with ``df`` degrees of freedom."""
    if df <= 0:
        raise ValueError("degrees of freedom must be positive")
    if not math.isfinite(t):
        return 0.0
    return betainc(df / 2.0, 0.5, df / (df + t * t))


# --- AUC ----------------------------------------------------------------------


def midranks(x) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(len(x))
    i = 0
    while i < len(xs):
        j = i
        while j + 1 < len(xs) and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auc(cu, mci) -> float:
    """P(random CU value > random MCI value), ties counting one half."""
    cu = np.asarray(cu, dtype=np.float64)
    mci = np.asarray(mci, dtype=np.float64)
    if cu.size == 0 or mci.size == 0:
        raise StatsError("AUC needs at least one subject in each group")
    r = midranks(np.concatenate([cu, mci]))
    u = r[: cu.size].sum() - cu.size * (cu.size + 1) / 2.0
    return float(u / (cu.size * mci.size))


# --- GLM --------------------------------------------------------------------


@dataclass
class GroupTest:
    region: str
    beta_group: float
    p_value: float
    auc: float
    beta: tuple = ()
    t_stat: float = float("nan")
    df: int = 0


def ols(X: np.ndarray, y: np.ndarray):
    """Least-squares coefficients, residual variance and coefficient covariance."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, k = X.shape
    if n <= k:
        raise StatsError(f"need more observations ({n}) than coefficients ({k})")
    if np.linalg.matrix_rank(X) < k:
        raise StatsError("design matrix is rank deficient")
    q, r = np.linalg.qr(X)
    beta = np.linalg.solve(r, q.T @ y)
    resid = y - X @ beta
    df = n - k
    sigma2 = float(resid @ resid) / df
    rinv = np.linalg.inv(r)
    cov = sigma2 * (rinv @ rinv.T)
    return beta, sigma2, cov, df


def glm_group_test(table: "CohortTable", region: str) -> GroupTest:
    """OLS ``thickness ~ 1 + group(MCI=1) + age``; two-sided t test on the group term."""
    if region not in table.regions:
        raise StatsError(f"unknown region {region!r}")
    n = len(table.subject_ids)
    if n < 4:
        raise StatsError(f"group test needs at least 4 subjects, got {n}")
    g = np.array([GROUPS.index(s) for s in table.groups], dtype=np.float64)
    if g.min() == g.max():
        raise StatsError("both groups must be present")
    y = np.asarray(table.values[region], dtype=np.float64)
    X = np.column_stack([np.ones(n), g, np.asarray(table.ages, dtype=np.float64)])
    beta, _, cov, df = ols(X, y)
    se = math.sqrt(cov[1, 1])
    t = beta[1] / se if se > 0 else math.copysign(math.inf, beta[1]) if beta[1] else 0.0
    p = t_sf_two_sided(t, df)
    a = auc(y[g == 0], y[g == 1])
    return GroupTest(region, float(beta[1]), float(p), a, tuple(float(b) for b in beta), float(t), df)


# --- longitudinal -----------------------------------------------------------


def annualize(change: float, days) -> float:
    if days <= 0:
        raise StatsError(f"days between scans must be positive, got {days}")
    return change * 365 / days


@dataclass
class Stability:
    region: str
    sd: float | None
    abs_change_total: float
    mean_abs_change: float
    n_pairs: int


def longitudinal_stability(pairs: "PairTable", region: str) -> Stability:
    """Sample SD and summed magnitude of annualized thickness change.

    ``sd`` is ``None`` with fewer than two pairs.
    """
    if region not in pairs.regions:
        raise StatsError(f"unknown region {region!r}")
    t1, t2 = pairs.values[region]
    a = np.array([annualize(b - c, d) for c, b, d in zip(t1, t2, pairs.days)], dtype=np.float64)
    if a.size == 0:
        raise StatsError("no scan pairs")
    sd = float(np.std(a, ddof=1)) if a.size >= 2 else None
    total = float(np.sum(np.abs(a)))
    return Stability(region, sd, total, total / a.size, int(a.size))


# --- tables -----------------------------------------------------------------


def _finite(x: float, what: str) -> float:
    v = float(x)
    if not math.isfinite(v):
        raise StatsError(f"{what} must be finite, got {x!r}")
    return v


@dataclass
class CohortTable:
    subject_ids: list
    groups: list
    ages: list
    values: dict = field(default_factory=dict)  # region -> list of thickness

    def __post_init__(self):
        n = len(self.subject_ids)
        if len(set(self.subject_ids)) != n:
            raise StatsError("subject ids must be unique")
        if len(self.groups) != n or len(self.ages) != n:
            raise StatsError("cohort columns differ in length")
        for g in self.groups:
            if g not in GROUPS:
                raise StatsError(f"group must be one of {GROUPS}, got {g!r}")
        self.ages = [_finite(a, "age") for a in self.ages]
        if any(a <= 0 for a in self.ages):
            raise StatsError("ages must be positive")
        for r, vals in self.values.items():
            if len(vals) != n:
                raise StatsError(f"region {r!r} has {len(vals)} values for {n} subjects")
            self.values[r] = [_finite(v, f"{r} thickness") for v in vals]

    @property
    def regions(self) -> list:
        return list(self.values)


@dataclass
class PairTable:
    subject_ids: list
    days: list
    values: dict = field(default_factory=dict)  # region -> (scan1 list, scan2 list)

    def __post_init__(self):
        n = len(self.subject_ids)
        if len(self.days) != n:
            raise StatsError("pair columns differ in length")
        self.days = [int(d) for d in self.days]
        if any(d <= 0 for d in self.days):
            raise StatsError("days between scans must be positive")
        for r, (a, b) in self.values.items():
            if len(a) != n or len(b) != n:
                raise StatsError(f"region {r!r} pair columns do not match the subject count")
            self.values[r] = ([_finite(v, r) for v in a], [_finite(v, r) for v in b])

    @property
    def regions(self) -> list:
        return list(self.values)


def _read_rows(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise StatsError(f"{path}: missing header row")
        return list(reader.fieldnames), list(reader)


def _need(fields, required, path):
    missing = [c for c in required if c not in fields]
    if missing:
        raise StatsError(f"{path}: missing columns {missing}")


def read_cohort(path) -> CohortTable:
    fields, rows = _read_rows(path)
    _need(fields, ("subject_id", "group", "age"), path)
    regions = [f for f in fields if f not in ("subject_id", "group", "age")]
    if not regions:
        raise StatsError(f"{path}: no region columns")
    try:
        return CohortTable(
            [r["subject_id"] for r in rows],
            [r["group"] for r in rows],
            [float(r["age"]) for r in rows],
            {g: [float(r[g]) for r in rows] for g in regions},
        )
    except ValueError as exc:
        raise StatsError(f"{path}: {exc}") from exc


def write_cohort(table: CohortTable, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_id", "group", "age", *table.regions])
        for i, s in enumerate(table.subject_ids):
            w.writerow([s, table.groups[i], repr(table.ages[i]), *(repr(table.values[r][i]) for r in table.regions)])


def read_pairs(path) -> PairTable:
    fields, rows = _read_rows(path)
    _need(fields, ("subject_id", "days"), path)
    regions = []
    for f in fields:
        if f.endswith("_scan1"):
            base = f[: -len("_scan1")]
            _need(fields, (base + "_scan2",), path)
            regions.append(base)
    if not regions:
        raise StatsError(f"{path}: no <region>_scan1/<region>_scan2 column pairs")
    try:
        days = []
        for r in rows:
            d = float(r["days"])
            if d != int(d):
                raise StatsError(f"{path}: days must be an integer, got {r['days']!r}")
            days.append(int(d))
        return PairTable(
            [r["subject_id"] for r in rows],
            days,
            {g: ([float(r[g + "_scan1"]) for r in rows], [float(r[g + "_scan2"]) for r in rows]) for g in regions},
        )
    except ValueError as exc:
        raise StatsError(f"{path}: {exc}") from exc


def write_pairs(table: PairTable, path) -> None:
    cols = [c for r in table.regions for c in (r + "_scan1", r + "_scan2")]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_id", "days", *cols])
        for i, s in enumerate(table.subject_ids):
            vals = []
            for r in table.regions:
                a, b = table.values[r]
                vals += [repr(a[i]), repr(b[i])]
            w.writerow([s, table.days[i], *vals])


def write_group_csv(results, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["region", "beta_group", "p_value", "auc"])
        for r in results:
            w.writerow([r.region, repr(r.beta_group), repr(r.p_value), repr(r.auc)])


def write_stability_csv(results, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["region", "sd", "abs_change_total", "mean_abs_change"])
        for r in results:
            w.writerow([r.region, "" if r.sd is None else repr(r.sd), repr(r.abs_change_total), repr(r.mean_abs_change)])
