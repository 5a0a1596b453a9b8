"""Severity measures built from claims histories.

Two constructions coexist. The discrete measure buckets patients into
Mild / Moderate / Severe from their non-cardiovascular hospitalization
record: no such record means Mild, otherwise a yearly-average cost below a
threshold means Moderate and above it Severe. The continuous
preference-discounted measure starts from an auxiliary regression of log
non-cardiovascular hospitalization cost on demographics and fixed effects;
its residuals strip facility price levels and demographic cost gradients,
leaving variation attributable to underlying health. Diagnosis-frequency
weighted patient means of those residuals, standardized to the unit
interval, give each patient a continuous severity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Mapping, Sequence, Union

import numpy as np
import pandas as pd

from .estimation import ols
from .model import Facility, Severity


class SeverityCategory(Enum):
    MILD = "Mild"
    MODERATE = "Moderate"
    SEVERE = "Severe"


# Severity levels assigned to the discrete categories when no continuous
# measure is available (Mild patients have no usable records by definition).
DEFAULT_CATEGORY_THETA = {
    SeverityCategory.MILD: 0.10,
    SeverityCategory.MODERATE: 0.48,
    SeverityCategory.SEVERE: 0.72,
}


@dataclass(frozen=True)
class ClaimRecord:
    """One claim line: an ambulatory year or a hospitalization episode."""

    patient_id: str
    year: int
    record_type: str            # "ambulatory" | "inpatient"
    facility: Facility
    diagnosis_class: str        # "CVD" | "Other"
    diagnosis_code: str
    total_cost_rmb: float
    oop_cost_rmb: float

    def __post_init__(self):
        if self.record_type not in ("ambulatory", "inpatient"):
            raise ValueError(f"record_type must be ambulatory|inpatient, got {self.record_type!r}")
        if self.diagnosis_class not in ("CVD", "Other"):
            raise ValueError(f"diagnosis_class must be CVD|Other, got {self.diagnosis_class!r}")
        if not (self.total_cost_rmb > 0 and math.isfinite(self.total_cost_rmb)):
            raise ValueError(f"total_cost_rmb must be positive, got {self.total_cost_rmb!r}")
        if not (0.0 <= self.oop_cost_rmb <= self.total_cost_rmb):
            raise ValueError("oop_cost_rmb must lie in [0, total_cost_rmb]")


@dataclass(frozen=True)
class SeverityConfig:
    """Knobs for both severity constructions.

    ``moderate_threshold_rmb`` splits Moderate from Severe on yearly-average
    non-cardiovascular hospitalization cost. ``percentile`` picks the
    within-category severity level off the continuous measure.
    ``enrollment_years`` fixes the averaging denominator; left unset, each
    patient's count of distinct claim years stands in for it.
    ``eligible_diagnoses`` restricts which non-cardiovascular diagnoses
    enter (None admits all); ``frequency_weights`` overrides the in-sample
    diagnosis frequencies used to weight residuals.
    """

    moderate_threshold_rmb: float = 15000.0
    percentile: float = 0.99
    enrollment_years: Union[int, None] = None
    eligible_diagnoses: Union[frozenset, None] = None
    frequency_weights: Union[Mapping[str, float], None] = None

    def __post_init__(self):
        if not (self.moderate_threshold_rmb > 0):
            raise ValueError("moderate_threshold_rmb must be positive")
        if not (0.0 < self.percentile <= 1.0):
            raise ValueError(f"percentile must lie in (0, 1], got {self.percentile!r}")
        if self.enrollment_years is not None and self.enrollment_years < 1:
            raise ValueError("enrollment_years must be at least 1")
        if self.frequency_weights is not None:
            w = dict(self.frequency_weights)
            if any(v < 0 for v in w.values()) or sum(w.values()) <= 0:
                raise ValueError("frequency_weights must be nonnegative and sum positive")
            total = sum(w.values())
            object.__setattr__(self, "frequency_weights",
                               {k: v / total for k, v in w.items()})


def _eligible_noncvd(claims: Sequence[ClaimRecord], cfg: SeverityConfig):
    out = [c for c in claims
           if c.record_type == "inpatient" and c.diagnosis_class == "Other"]
    if cfg.eligible_diagnoses is not None:
        out = [c for c in out if c.diagnosis_code in cfg.eligible_diagnoses]
    return out


def classify_discrete(claims: Sequence[ClaimRecord],
                      cfg: SeverityConfig = SeverityConfig()) -> SeverityCategory:
    """Bucket one patient's claims into Mild / Moderate / Severe.

    No eligible non-cardiovascular hospitalization record means Mild.
    Otherwise the patient's total such cost, averaged over enrollment years
    (distinct claim years when the config leaves the denominator unset), is
    compared against the Moderate/Severe threshold.
    """
    eligible = _eligible_noncvd(claims, cfg)
    if not eligible:
        return SeverityCategory.MILD
    total = sum(c.total_cost_rmb for c in eligible)
    years = cfg.enrollment_years
    if years is None:
        years = len({c.year for c in claims})
    avg = total / years
    if avg < cfg.moderate_threshold_rmb:
        return SeverityCategory.MODERATE
    return SeverityCategory.SEVERE


def assign_theta(category, values: Sequence[float],
                 cfg: SeverityConfig = SeverityConfig()) -> Severity:
    """Severity level for a category from its members' continuous measures.

    Takes the configured percentile (99th by default) of the continuous
    severities observed within the category. A category with no continuous
    values falls back to the published Mild/Moderate/Severe levels; other
    category labels with no values are an error.
    """
    vals = np.asarray(list(values), dtype=float)
    if vals.size == 0:
        if category in DEFAULT_CATEGORY_THETA:
            return Severity(DEFAULT_CATEGORY_THETA[category])
        raise ValueError(f"no continuous severities for category {category!r} "
                         "and no fallback level defined")
    if np.any(~np.isfinite(vals)) or vals.min() < 0.0 or vals.max() > 1.0:
        raise ValueError("continuous severities must lie in [0, 1]")
    return Severity.from_unit_interval(float(np.quantile(vals, cfg.percentile)))


def aux_residuals(claims: Sequence[ClaimRecord], covariates: pd.DataFrame,
                  covariate_names: Sequence[str] = ("age", "male", "minority", "urban"),
                  cfg: SeverityConfig = SeverityConfig()) -> pd.DataFrame:
    """Residualize log non-cardiovascular hospitalization costs.

    Fits log cost on patient demographics plus year and facility dummies
    over the eligible records, and returns one row per record with the
    residual attached (columns: patient_id, year, facility, diagnosis_code,
    residual). The residual is the cost variation left after stripping
    facility price levels, time effects, and demographic gradients.

    ``covariates`` is indexed by patient_id (or carries a patient_id
    column) and must cover every patient with eligible records.
    """
    eligible = _eligible_noncvd(claims, cfg)
    if not eligible:
        raise ValueError("no eligible non-cardiovascular hospitalization records")
    cov = covariates
    if "patient_id" in getattr(cov, "columns", ()):
        cov = cov.set_index("patient_id")
    df = pd.DataFrame({
        "patient_id": [c.patient_id for c in eligible],
        "year": [c.year for c in eligible],
        "facility": [int(c.facility) for c in eligible],
        "diagnosis_code": [c.diagnosis_code for c in eligible],
        "log_cost": [math.log(c.total_cost_rmb) for c in eligible],
    })
    missing = set(df["patient_id"]) - set(cov.index)
    if missing:
        raise ValueError(f"covariates missing for patients: {sorted(missing)[:5]}")
    for name in covariate_names:
        df[name] = df["patient_id"].map(cov[name]).astype(float)
    k = 1 + len(covariate_names) + (df["year"].nunique() - 1) + (df["facility"].nunique() - 1)
    if len(df) <= k:
        raise ValueError(f"too few records ({len(df)}) for the auxiliary regression ({k} parameters)")
    fit = ols(df["log_cost"].to_numpy(), df, list(covariate_names),
              fe_groups=["year", "facility"], cluster="patient_id")
    out = df[["patient_id", "year", "facility", "diagnosis_code"]].copy()
    out["residual"] = fit.residuals
    return out


def preference_discounted_theta(residuals: pd.DataFrame,
                                cfg: SeverityConfig = SeverityConfig()) -> dict:
    """Continuous severity per patient from auxiliary-regression residuals.

    Each patient's residuals are averaged with diagnosis-frequency weights
    (in-sample record frequencies unless the config supplies weights), then
    the patient means are min-max standardized to [0, 1] and clamped inside
    the open interval. Patients with no residual records are simply absent
    from the result. Returns ``{patient_id: Severity}``.
    """
    required = {"patient_id", "diagnosis_code", "residual"}
    missing = required - set(residuals.columns)
    if missing:
        raise ValueError(f"residual table lacks columns: {sorted(missing)}")
    if len(residuals) == 0:
        raise ValueError("no residual records to build the continuous measure from")
    df = residuals.copy()
    if cfg.frequency_weights is not None:
        wmap = dict(cfg.frequency_weights)
        unknown = set(df["diagnosis_code"]) - set(wmap)
        if unknown:
            raise ValueError(f"frequency_weights missing diagnoses: {sorted(unknown)}")
    else:
        freq = df["diagnosis_code"].value_counts(normalize=True)
        wmap = freq.to_dict()
    df["weight"] = df["diagnosis_code"].map(wmap).astype(float)
    df["wres"] = df["weight"] * df["residual"]
    sums = df.groupby("patient_id")[["wres", "weight"]].sum()
    if (sums["weight"] <= 0).any():
        bad = sums.index[sums["weight"] <= 0].tolist()
        raise ValueError(f"zero total diagnosis weight for patients: {bad[:5]}")
    weighted = sums["wres"] / sums["weight"]
    lo, hi = float(weighted.min()), float(weighted.max())
    if hi <= lo:
        raise ValueError("all patients share one residual mean; the measure is degenerate")
    scaled = (weighted - lo) / (hi - lo)
    return {pid: Severity.from_unit_interval(float(v)) for pid, v in scaled.items()}
