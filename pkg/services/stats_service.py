# services/stats_service.py
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Sequence, Union

import numpy as np
import pandas as pd
from scipy import stats
from sklearn.linear_model import LinearRegression

from services.errors import InsufficientData
from services.path_sim_service import PathRecord

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

MIN_RECORDS = 100
MIN_BUCKET = 200
BUCKET_FIRST = 0.06
BUCKET_STEP = 0.07
BUCKET_HALF_WIDTH = 0.035
CDF_COLUMNS = ("fqT", "A", "A2", "A3")

Records = Union[Sequence[PathRecord], pd.DataFrame]


class TailFit(NamedTuple):
    slope: float
    r2: float
    reference: float
    ratio: float
    n: int


class MomentCheck(NamedTuple):
    skew: float
    excess_kurtosis: float
    n: int
    degenerate: bool


@dataclass(frozen=True)
class Bucket:
    """Conditioning cell on q_T / q0; center 0 is the liquidated set."""

    label: str
    center: float
    lo: float
    hi: float

    def mask(self, frame: pd.DataFrame) -> pd.Series:
        if self.center == 0.0:
            return frame["liquidated"].astype(bool)
        positive = ~frame["liquidated"].astype(bool)
        return positive & (frame["fqT"] >= self.lo) & (frame["fqT"] < self.hi)


def fq_buckets(n_positive: int = 14) -> List[Bucket]:
    """x = 0 plus cells centred on 0.06 + 0.07 j; positive cells tile (0, inf)."""
    out = [Bucket("x=0", 0.0, 0.0, 0.0)]
    for j in range(n_positive):
        center = BUCKET_FIRST + BUCKET_STEP * j
        lo = 0.0 if j == 0 else center - BUCKET_HALF_WIDTH
        hi = math.inf if j == n_positive - 1 else center + BUCKET_HALF_WIDTH
        out.append(Bucket(f"{center:.2f}", center, lo, hi))
    return out


@dataclass
class RunSummary:
    n_paths: int
    p_liquidated: float
    p_liquidated_se: float
    mean_fq_pos: float
    sd_fq_pos: float
    fq_pos_defined: bool
    n_no_trades: int
    means: Dict[str, float]
    cdf_tables: Dict[str, np.ndarray] = field(default_factory=dict)
    conditional_stats: pd.DataFrame = field(default_factory=pd.DataFrame)
    exp_tail: Optional[TailFit] = None

    def as_dict(self) -> Dict[str, object]:
        def _num(v: float) -> Optional[float]:
            return None if v is None or not math.isfinite(v) else float(v)

        return {
            "n_paths": self.n_paths,
            "p_liquidated": self.p_liquidated,
            "p_liquidated_se": self.p_liquidated_se,
            "mean_fq_pos": _num(self.mean_fq_pos),
            "sd_fq_pos": _num(self.sd_fq_pos),
            "fq_pos_defined": self.fq_pos_defined,
            "n_no_trades": self.n_no_trades,
            "means": {k: _num(v) for k, v in self.means.items()},
            "exp_tail": None if self.exp_tail is None else {k: _num(v) for k, v in self.exp_tail._asdict().items()},
            "conditional_stats": self.conditional_stats.replace({np.nan: None}).to_dict(orient="records"),
        }


def records_frame(records: Records) -> pd.DataFrame:
    """Records as a frame sorted by path index, so reductions ignore input order."""
    if isinstance(records, pd.DataFrame):
        frame = records.copy()
    else:
        frame = pd.DataFrame([r.as_row() for r in records])
    if frame.empty:
        return frame
    return frame.sort_values("path_index", kind="mergesort").reset_index(drop=True)


def ecdf(values: np.ndarray) -> np.ndarray:
    """(2, n) array of sorted values and F(x) = rank / n."""
    x = np.sort(np.asarray(values, dtype=float)[np.isfinite(values)])
    n = x.size
    return np.vstack([x, np.arange(1, n + 1) / max(n, 1)])


def sample_moments(values: np.ndarray) -> MomentCheck:
    v = np.asarray(values, dtype=float)
    v = v[np.isfinite(v)]
    if v.size < 3 or np.ptp(v) == 0.0:
        return MomentCheck(math.nan, math.nan, int(v.size), True)
    return MomentCheck(float(stats.skew(v)), float(stats.kurtosis(v, fisher=True)), int(v.size), False)


def _conditional_stats(frame: pd.DataFrame) -> pd.DataFrame:
    rows = []
    for bucket in fq_buckets():
        sub = frame[bucket.mask(frame)]
        row = {"bucket": bucket.label, "center": bucket.center, "n": int(len(sub))}
        for col in ("A2", "A3"):
            vals = sub[col].to_numpy(dtype=float)
            vals = vals[np.isfinite(vals)]
            mom = sample_moments(vals)
            row[f"{col}_mean"] = float(vals.mean()) if vals.size else math.nan
            row[f"{col}_sd"] = float(vals.std(ddof=1)) if vals.size > 1 else math.nan
            row[f"{col}_skew"] = mom.skew
            row[f"{col}_kurtosis"] = mom.excess_kurtosis
        rows.append(row)
    return pd.DataFrame(rows)


def summarize(records: Records) -> RunSummary:
    frame = records_frame(records)
    n = len(frame)
    if n < MIN_RECORDS:
        raise InsufficientData(f"need at least {MIN_RECORDS} records, got {n}")
    liquidated = frame["liquidated"].astype(bool)
    p = float(liquidated.mean())
    positive = frame.loc[~liquidated, "fqT"].to_numpy(dtype=float)
    defined = positive.size > 1
    mean_pos = float(positive.mean()) if positive.size else math.nan
    sd_pos = float(positive.std(ddof=1)) if defined else math.nan
    if not positive.size:
        logger.warning("⚠️ every path liquidated; E[q_T | q_T > 0] is undefined")

    cdf_tables = {col: ecdf(frame[col].to_numpy(dtype=float)) for col in CDF_COLUMNS}
    for col in ("A2", "A3"):
        cdf_tables[f"{col}|x=0"] = ecdf(frame.loc[liquidated, col].to_numpy(dtype=float))

    tail = None
    if positive.size >= MIN_RECORDS:
        tail = exponential_tail_check(positive)

    means = {col: float(np.nanmean(frame[col].to_numpy(dtype=float))) for col in ("A", "A1", "A2", "A3", "XT")}
    summary = RunSummary(
        n_paths=n,
        p_liquidated=p,
        p_liquidated_se=math.sqrt(p * (1.0 - p) / n),
        mean_fq_pos=mean_pos,
        sd_fq_pos=sd_pos,
        fq_pos_defined=defined,
        n_no_trades=int(frame["no_trades"].astype(bool).sum()) if "no_trades" in frame else 0,
        means=means,
        cdf_tables=cdf_tables,
        conditional_stats=_conditional_stats(frame),
        exp_tail=tail,
    )
    logger.info(f"✅ summary: n={n} p_liquidated={p:.4f} E[q_T|>0]={mean_pos:.4f}")
    return summary


def _positive_fq(records: Union[Records, np.ndarray]) -> np.ndarray:
    if isinstance(records, np.ndarray):
        values = records.astype(float)
    else:
        frame = records_frame(records)
        values = frame.loc[~frame["liquidated"].astype(bool), "fqT"].to_numpy(dtype=float)
    return values[np.isfinite(values) & (values > 0.0)]


def exponential_tail_check(records: Union[Records, np.ndarray]) -> TailFit:
    """Fit -log(survival) of the positive residual positions against x.

    An exponential law with mean m gives a line of slope 1/m through the origin;
    reference is 1/m from the sample mean.
    """
    x = np.sort(_positive_fq(records))
    n = x.size
    if n < MIN_RECORDS:
        raise InsufficientData(f"need at least {MIN_RECORDS} positive positions, got {n}")
    survival = (n - np.arange(n) - 0.5) / n
    lo, hi = np.quantile(x, [0.05, 0.95])
    keep = (x >= lo) & (x <= hi)
    X = x[keep].reshape(-1, 1)
    y = -np.log(survival[keep])
    model = LinearRegression().fit(X, y)
    slope = float(model.coef_[0])
    r2 = float(model.score(X, y))
    reference = 1.0 / float(x.mean())
    return TailFit(slope=slope, r2=r2, reference=reference, ratio=slope / reference, n=int(n))


def normality_moments(records: Union[Records, np.ndarray], bucket: Optional[Bucket] = None, column: str = "A2") -> MomentCheck:
    """Skewness and excess kurtosis of a column inside an fq bucket."""
    if isinstance(records, np.ndarray):
        values = records.astype(float)
    else:
        frame = records_frame(records)
        if bucket is not None:
            frame = frame[bucket.mask(frame)]
        values = frame[column].to_numpy(dtype=float)
    values = values[np.isfinite(values)]
    if values.size < MIN_BUCKET:
        raise InsufficientData(f"bucket needs at least {MIN_BUCKET} records, got {values.size}")
    check = sample_moments(values)
    if check.degenerate:
        logger.warning(f"⚠️ {column} sample is constant; moments are undefined")
    return check


def compare_baseline(records: Records, baseline_records: Records) -> pd.DataFrame:
    """Side-by-side moments of A, A2, A3 against the uniform-speed run."""
    frame = records_frame(records)
    base = records_frame(baseline_records)
    rows = []
    for col in ("A", "A2", "A3"):
        a = frame[col].to_numpy(dtype=float)
        b = base[col].to_numpy(dtype=float)
        row = {
            "statistic": col,
            "mean": float(np.nanmean(a)),
            "var": float(np.nanvar(a, ddof=1)),
            "median": float(np.nanmedian(a)),
            "baseline_mean": float(np.nanmean(b)),
            "baseline_var": float(np.nanvar(b, ddof=1)),
            "baseline_median": float(np.nanmedian(b)),
        }
        row["diff_mean"] = row["mean"] - row["baseline_mean"]
        row["diff_var"] = row["var"] - row["baseline_var"]
        rows.append(row)
    closed = frame.loc[frame["liquidated"].astype(bool), "A3"].to_numpy(dtype=float)
    closed_base = base.loc[base["liquidated"].astype(bool), "A3"].to_numpy(dtype=float)
    rows.append(
        {
            "statistic": "A3|x=0",
            "mean": float(np.nanmean(closed)) if closed.size else math.nan,
            "var": float(np.nanvar(closed, ddof=1)) if closed.size > 1 else math.nan,
            "median": float(np.nanmedian(closed)) if closed.size else math.nan,
            "baseline_mean": float(np.nanmean(closed_base)) if closed_base.size else math.nan,
            "baseline_var": float(np.nanvar(closed_base, ddof=1)) if closed_base.size > 1 else math.nan,
            "baseline_median": float(np.nanmedian(closed_base)) if closed_base.size else math.nan,
        }
    )
    rows[-1]["diff_mean"] = rows[-1]["mean"] - rows[-1]["baseline_mean"]
    rows[-1]["diff_var"] = rows[-1]["var"] - rows[-1]["baseline_var"]
    return pd.DataFrame(rows).set_index("statistic")


def qq_table(values: np.ndarray) -> pd.DataFrame:
    v = np.asarray(values, dtype=float)
    v = v[np.isfinite(v)]
    (theoretical, ordered), (slope, intercept, r) = stats.probplot(v, dist="norm")
    return pd.DataFrame({"normal_quantile": theoretical, "sample": ordered, "fit": intercept + slope * theoretical})


def figure_tables(summary: RunSummary) -> Dict[str, pd.DataFrame]:
    """One frame per figure: empirical CDFs and conditional moments per bucket."""
    tables = {
        f"cdf_{name.replace('|', '_given_').replace('=', '')}": pd.DataFrame({"x": arr[0], "F": arr[1]})
        for name, arr in summary.cdf_tables.items()
    }
    tables["conditional_moments"] = summary.conditional_stats.copy()
    return tables


def liquidation_probability_oracle(ell: float, T: float = 1.0) -> float:
    """P(W_T >= ell) for a standard Brownian motion."""
    return float(stats.norm.sf(ell / math.sqrt(T)))
