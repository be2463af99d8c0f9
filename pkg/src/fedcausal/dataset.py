"""Per-source data model: records with optional missing confounders, CSV I/O,
moment summaries and train/test/validation splits.

Arrays are stored column-wise inside :class:`SourceDataset`. Entries of ``u``
whose mask bit is 0 hold NaN internally and are never returned through
:meth:`SourceDataset.record`; the accessor yields :data:`ABSENT` instead.
"""

import csv
import math
from dataclasses import dataclass, field

import numpy as np


class _Absent:
    _inst = None

    def __new__(cls):
        if cls._inst is None:
            cls._inst = super().__new__(cls)
        return cls._inst

    def __repr__(self):
        return "ABSENT"

    def __bool__(self):
        return False


ABSENT = _Absent()


class DatasetError(ValueError):
    """Base error for schema and parse problems."""


class SchemaError(DatasetError):
    pass


class ParseError(DatasetError):
    def __init__(self, msg, line=None):
        self.line = line
        super().__init__(f"line {line}: {msg}" if line is not None else msg)


@dataclass(frozen=True)
class Record:
    """One unit. ``u`` may contain :data:`ABSENT` where ``r`` is 0."""

    w: int
    y: float
    x: tuple
    u: tuple = ()
    r: tuple = ()
    pk: str = None


def _as_rows(a, n):
    # reshape(0, -1) is ambiguous, so empty shards keep their column count from a 2-d input
    if a.ndim == 2 and a.shape[0] == n:
        return a
    if n == 0:
        return a.reshape(0, a.shape[-1] if a.ndim == 2 else 0)
    return a.reshape(n, -1)


@dataclass(eq=False)
class SourceDataset:
    """Private shard of one source.

    Parameters
    ----------
    source_id : int
    w : (n,) int array in {0, 1}
    y : (n,) float array
    x : (n, d_x) float array
    u : (n, d) float array, NaN where ``r == 0``
    r : (n, d) int array of observation bits
    pk : optional list of primary-key strings
    """

    source_id: int
    w: np.ndarray
    y: np.ndarray
    x: np.ndarray
    u: np.ndarray = None
    r: np.ndarray = None
    pk: list = None

    def __post_init__(self):
        self.w = np.asarray(self.w).astype(np.int64).reshape(-1)
        self.y = np.asarray(self.y, dtype=np.float64).reshape(-1)
        n = self.w.shape[0]
        self.x = _as_rows(np.asarray(self.x, dtype=np.float64), n)
        if self.u is None:
            self.u = np.zeros((n, 0))
        self.u = _as_rows(np.array(self.u, dtype=np.float64), n)
        d = self.u.shape[1]
        if self.r is None:
            self.r = (~np.isnan(self.u)).astype(np.int64)
        self.r = np.asarray(self.r).astype(np.int64).reshape(n, d)
        validate(self)
        # freeze the mask contract: unobserved cells carry no value
        self.u[self.r == 0] = np.nan
        for a in (self.w, self.y, self.x, self.u, self.r):
            a.setflags(write=False)

    @property
    def n(self):
        return self.w.shape[0]

    @property
    def dx(self):
        return self.x.shape[1]

    @property
    def d(self):
        return self.u.shape[1]

    def __len__(self):
        return self.n

    def record(self, i):
        u = tuple(float(v) if b else ABSENT for v, b in zip(self.u[i], self.r[i]))
        return Record(
            w=int(self.w[i]),
            y=float(self.y[i]),
            x=tuple(float(v) for v in self.x[i]),
            u=u,
            r=tuple(int(b) for b in self.r[i]),
            pk=None if self.pk is None else self.pk[i],
        )

    def records(self):
        return [self.record(i) for i in range(self.n)]

    def u_filled(self, fill=0.0):
        """Copy of ``u`` with unobserved cells replaced by ``fill``."""
        out = np.where(self.r == 1, self.u, fill)
        return np.nan_to_num(out, nan=fill)

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return SourceDataset(
            self.source_id,
            self.w[idx],
            self.y[idx],
            self.x[idx],
            self.u[idx],
            self.r[idx],
            None if self.pk is None else [self.pk[i] for i in idx],
        )

    @classmethod
    def from_records(cls, source_id, records):
        if not records:
            raise SchemaError("no records")
        dx = len(records[0].x)
        d = len(records[0].u)
        for rec in records:
            if len(rec.x) != dx or len(rec.u) != d:
                raise SchemaError("records disagree on dimensions")
        u = np.array(
            [[np.nan if v is ABSENT else v for v in rec.u] for rec in records],
            dtype=np.float64,
        ).reshape(len(records), d)
        r = np.array(
            [rec.r if rec.r else [1] * d for rec in records], dtype=np.int64
        ).reshape(len(records), d)
        pks = [rec.pk for rec in records]
        return cls(
            source_id,
            [rec.w for rec in records],
            [rec.y for rec in records],
            np.array([rec.x for rec in records], dtype=np.float64).reshape(len(records), dx),
            u,
            r,
            None if all(p is None for p in pks) else pks,
        )


def validate(ds):
    n = ds.w.shape[0]
    if ds.y.shape[0] != n or ds.x.shape[0] != n or ds.u.shape[0] != n:
        raise SchemaError("column lengths differ")
    if ds.r.shape != ds.u.shape:
        raise SchemaError("mask shape does not match u")
    if not np.all((ds.w == 0) | (ds.w == 1)):
        raise SchemaError("treatment must be 0 or 1")
    if not np.all((ds.r == 0) | (ds.r == 1)):
        raise SchemaError("mask entries must be 0 or 1")
    if np.any(np.isnan(ds.u) & (ds.r == 1)):
        raise SchemaError("u is missing where the mask says observed")
    if not np.all(np.isfinite(ds.y)) or not np.all(np.isfinite(ds.x)):
        raise SchemaError("y and x must be finite")
    if ds.pk is not None and len(ds.pk) != n:
        raise SchemaError("pk length differs")


@dataclass
class CsvSchema:
    """Column mapping for :func:`load_csv`. ``None`` fields are inferred from the header."""

    w: str = "w"
    y: str = "y"
    x: list = None
    u: list = None
    r: list = None
    pk: str = "pk"

    def resolve(self, header):
        def pick(prefix):
            cols = [h for h in header if h.startswith(prefix) and h[len(prefix):].isdigit()]
            return sorted(cols, key=lambda h: int(h[len(prefix):]))

        x = self.x if self.x is not None else pick("x")
        u = self.u if self.u is not None else pick("u")
        r = self.r if self.r is not None else pick("r")
        return x, u, r


def _num(cell, line, col):
    try:
        return float(cell)
    except ValueError:
        raise ParseError(f"column {col!r}: cannot parse {cell!r}", line) from None


def load_csv(path, schema=None, source_id=1):
    """Read a source shard from CSV.

    Empty ``u`` cells denote missing values. When explicit ``r`` columns are
    present they must agree with emptiness for observed cells; a missing
    ``u`` cell with ``r = 1`` is an error.
    """
    schema = schema or CsvSchema()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError("empty file") from None
        header = [h.strip() for h in header]
        xcols, ucols, rcols = schema.resolve(header)
        for c in [schema.w, schema.y, *xcols, *ucols, *rcols]:
            if c not in header:
                raise SchemaError(f"missing column {c!r}")
        if rcols and len(rcols) != len(ucols):
            raise SchemaError("r columns do not match u columns")
        pos = {h: i for i, h in enumerate(header)}
        has_pk = schema.pk in pos
        w, y, x, u, r, pk = [], [], [], [], [], []
        for line, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", line)
            wv = _num(row[pos[schema.w]], line, schema.w)
            if wv not in (0.0, 1.0):
                raise ParseError(f"treatment must be 0 or 1, got {row[pos[schema.w]]!r}", line)
            w.append(int(wv))
            y.append(_num(row[pos[schema.y]], line, schema.y))
            x.append([_num(row[pos[c]], line, c) for c in xcols])
            urow, rrow = [], []
            for j, c in enumerate(ucols):
                cell = row[pos[c]].strip()
                if rcols:
                    rb = _num(row[pos[rcols[j]]], line, rcols[j])
                    if rb not in (0.0, 1.0):
                        raise ParseError(f"mask {rcols[j]!r} must be 0 or 1", line)
                    rb = int(rb)
                else:
                    rb = 0 if cell == "" else 1
                if rb == 1:
                    if cell == "":
                        raise ParseError(f"column {c!r} empty but marked observed", line)
                    urow.append(_num(cell, line, c))
                else:
                    urow.append(np.nan)
                rrow.append(rb)
            u.append(urow)
            r.append(rrow)
            if has_pk:
                pk.append(row[pos[schema.pk]])
    n = len(w)
    if n == 0:
        raise SchemaError("no data rows")
    return SourceDataset(
        source_id,
        np.array(w),
        np.array(y),
        np.array(x, dtype=np.float64).reshape(n, len(xcols)),
        np.array(u, dtype=np.float64).reshape(n, len(ucols)),
        np.array(r, dtype=np.int64).reshape(n, len(ucols)),
        pk if has_pk else None,
    )


def save_csv(ds, path):
    """Write a shard using the default column naming; floats use ``repr`` so values round-trip."""
    header = ["w", "y"] + [f"x{j}" for j in range(ds.dx)]
    header += [f"u{j}" for j in range(ds.d)] + [f"r{j}" for j in range(ds.d)]
    if ds.pk is not None:
        header.append("pk")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        for i in range(ds.n):
            row = [str(int(ds.w[i])), repr(float(ds.y[i]))]
            row += [repr(float(v)) for v in ds.x[i]]
            row += [repr(float(v)) if b else "" for v, b in zip(ds.u[i], ds.r[i])]
            row += [str(int(b)) for b in ds.r[i]]
            if ds.pk is not None:
                row.append(ds.pk[i])
            wr.writerow(row)


def four_moments(v):
    """Mean, variance (denominator n), standardized skewness and kurtosis.

    A column with zero variance has skewness and kurtosis 0 by convention.
    Kurtosis is not excess kurtosis; a normal sample gives about 3.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise DatasetError("moments of an empty column")
    mean = v.mean()
    c = v - mean
    var = np.mean(c * c)
    if var <= 0.0:
        return np.array([mean, 0.0, 0.0, 0.0])
    sd = math.sqrt(var)
    skew = np.mean(c**3) / sd**3
    kurt = np.mean(c**4) / var**2
    return np.array([mean, var, skew, kurt])


@dataclass
class SourceMoments:
    """Four-moment summaries of one source.

    ``x_tilde`` is laid out as the four moments of x0, then of x1, and so on.
    ``y0_absent``/``y1_absent`` flag arms with no records, whose moments were
    filled from the pooled outcome.
    """

    x_tilde: np.ndarray
    y0_tilde: np.ndarray
    y1_tilde: np.ndarray
    w_tilde: np.ndarray
    y0_absent: bool = False
    y1_absent: bool = False

    def vector(self):
        return np.concatenate([self.x_tilde, self.y0_tilde, self.y1_tilde, self.w_tilde])


def compute_moments(ds):
    if ds.n == 0:
        raise DatasetError("empty dataset")
    x_tilde = np.concatenate([four_moments(ds.x[:, j]) for j in range(ds.dx)]) if ds.dx else np.zeros(0)
    pooled = four_moments(ds.y)
    arms = []
    for a in (0, 1):
        sel = ds.y[ds.w == a]
        arms.append((four_moments(sel), False) if sel.size else (pooled.copy(), True))
    return SourceMoments(
        x_tilde=x_tilde,
        y0_tilde=arms[0][0],
        y1_tilde=arms[1][0],
        w_tilde=four_moments(ds.w.astype(np.float64)),
        y0_absent=arms[0][1],
        y1_absent=arms[1][1],
    )


@dataclass
class DatasetSplit:
    train: np.ndarray
    test: np.ndarray
    validation: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


def split(ds_or_n, fractions=(0.05, 0.45, 0.40), seed=0, shuffle=True):
    """Disjoint train/test/validation indices.

    Each part gets ``floor(fraction * n)`` rows. If the fractions sum to one,
    rows lost to rounding go to the test part.
    """
    n = ds_or_n if isinstance(ds_or_n, (int, np.integer)) else len(ds_or_n)
    fr = tuple(float(f) for f in fractions)
    if len(fr) == 2:
        fr = fr + (0.0,)
    if len(fr) != 3 or any(not 0.0 <= f <= 1.0 for f in fr):
        raise DatasetError(f"fractions must lie in [0, 1], got {fractions}")
    if sum(fr) > 1.0 + 1e-9:
        raise DatasetError("fractions sum to more than 1")
    sizes = [int(math.floor(f * n + 1e-9)) for f in fr]
    if abs(sum(fr) - 1.0) < 1e-9:
        sizes[1] += n - sum(sizes)
    order = np.random.default_rng(seed).permutation(n) if shuffle else np.arange(n)
    a, b = sizes[0], sizes[0] + sizes[1]
    return DatasetSplit(
        np.sort(order[:a]), np.sort(order[a:b]), np.sort(order[b:b + sizes[2]])
    )
