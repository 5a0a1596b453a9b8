"""Tests for severity construction: discrete classification and the
preference-discounted continuous index."""

import numpy as np
import pandas as pd
import pytest

from carechoice.model import Facility
from carechoice.severity import (
    DEFAULT_CATEGORY_THETA,
    ClaimRecord,
    SeverityCategory,
    SeverityConfig,
    assign_theta,
    aux_residuals,
    classify_discrete,
    preference_discounted_theta,
)


def claim(pid="p1", year=2018, record_type="inpatient", facility=Facility.GENERAL,
          diagnosis_class="Other", diagnosis_code="digestive", total=10000.0,
          oop=4000.0) -> ClaimRecord:
    return ClaimRecord(patient_id=pid, year=year, record_type=record_type,
                       facility=facility, diagnosis_class=diagnosis_class,
                       diagnosis_code=diagnosis_code, total_cost_rmb=total,
                       oop_cost_rmb=oop)


class TestClaimRecord:
    def test_validates_record_type_and_class(self):
        with pytest.raises(ValueError):
            claim(record_type="er")
        with pytest.raises(ValueError):
            claim(diagnosis_class="Cardio")

    def test_validates_costs(self):
        with pytest.raises(ValueError):
            claim(total=0.0)
        with pytest.raises(ValueError):
            claim(total=100.0, oop=200.0)


class TestDiscreteClassification:
    def test_no_eligible_hospitalization_is_mild(self):
        assert classify_discrete([]) is SeverityCategory.MILD
        # cardiovascular admissions and ambulatory visits do not count
        records = [claim(diagnosis_class="CVD", total=90000.0),
                   claim(record_type="ambulatory", total=90000.0, oop=900.0)]
        assert classify_discrete(records) is SeverityCategory.MILD

    def test_threshold_splits_moderate_and_severe(self):
        below = [claim(total=14000.0)]
        above = [claim(total=16000.0)]
        assert classify_discrete(below) is SeverityCategory.MODERATE
        assert classify_discrete(above) is SeverityCategory.SEVERE

    def test_yearly_average_over_claim_years(self):
        # 24000 over two distinct years averages to 12000 per year
        records = [claim(year=2018, total=12000.0), claim(year=2019, total=12000.0)]
        assert classify_discrete(records) is SeverityCategory.MODERATE
        # same spending concentrated in one year exceeds the threshold
        records = [claim(year=2018, total=12000.0), claim(year=2018, total=12000.0)]
        assert classify_discrete(records) is SeverityCategory.SEVERE

    def test_enrollment_years_denominator(self):
        cfg = SeverityConfig(enrollment_years=3)
        records = [claim(year=2018, total=30000.0)]
        # 30000 / 3 enrollment years = 10000 < 15000
        assert classify_discrete(records, cfg) is SeverityCategory.MODERATE

    def test_custom_threshold(self):
        cfg = SeverityConfig(moderate_threshold_rmb=5000.0)
        assert classify_discrete([claim(total=6000.0)], cfg) is SeverityCategory.SEVERE


class TestAssignTheta:
    def test_percentile_of_observed_values(self):
        values = np.linspace(0.0, 1.0, 101)
        sev = assign_theta(SeverityCategory.MODERATE, values, SeverityConfig(percentile=0.5))
        assert sev.theta == pytest.approx(0.5)

    def test_default_levels_when_no_values(self):
        for cat, level in DEFAULT_CATEGORY_THETA.items():
            assert assign_theta(cat, []).theta == pytest.approx(level)

    def test_unknown_empty_category_is_an_error(self):
        with pytest.raises(ValueError):
            assign_theta("bin3", [])

    def test_values_outside_unit_interval_rejected(self):
        with pytest.raises(ValueError):
            assign_theta(SeverityCategory.MILD, [0.5, 1.4])


def synthetic_residual_data(n=400, seed=3):
    """Non-cardiovascular admissions whose log cost is severity plus noise."""
    rng = np.random.default_rng(seed)
    pids = [f"p{i:03d}" for i in range(n)]
    sev = rng.uniform(0.2, 1.0, n)  # latent severity driving costs
    claims = []
    diagnoses = ["digestive", "musculoskeletal", "renal", "respiratory"]
    for i, pid in enumerate(pids):
        for k in range(2):
            year = 2018 + k
            fac = Facility.GENERAL if i % 2 else Facility.TCM
            cost = 20000.0 * sev[i] * float(np.exp(rng.normal(0, 0.05)))
            claims.append(claim(pid=pid, year=year, facility=fac,
                                diagnosis_code=diagnoses[i % 4], total=cost,
                                oop=0.45 * cost))
    cov = pd.DataFrame({
        "patient_id": pids,
        "age": rng.normal(65, 10, n),
        "male": rng.integers(0, 2, n),
        "minority": rng.integers(0, 2, n),
        "urban": rng.integers(0, 2, n),
    })
    return claims, cov, sev


class TestContinuousIndex:
    def test_residuals_one_row_per_eligible_record(self):
        claims, cov, _ = synthetic_residual_data()
        res = aux_residuals(claims, cov)
        assert len(res) == len(claims)
        assert set(res.columns) == {"patient_id", "year", "facility",
                                    "diagnosis_code", "residual"}
        assert res["residual"].mean() == pytest.approx(0.0, abs=1e-10)

    def test_requires_eligible_records(self):
        cov = pd.DataFrame({"patient_id": ["p1"], "age": [60], "male": [1],
                            "minority": [0], "urban": [0]})
        with pytest.raises(ValueError):
            aux_residuals([claim(diagnosis_class="CVD")], cov)

    def test_requires_covariates_for_all_patients(self):
        claims, cov, _ = synthetic_residual_data(n=20)
        with pytest.raises(ValueError):
            aux_residuals(claims, cov.iloc[:10])

    def test_index_rank_correlates_with_latent_severity(self):
        claims, cov, sev = synthetic_residual_data()
        res = aux_residuals(claims, cov)
        index = preference_discounted_theta(res)
        pids = sorted(index)
        got = np.array([index[p].theta for p in pids])
        truth = sev[[int(p[1:]) for p in pids]]
        corr = np.corrcoef(got, truth)[0, 1]
        assert corr > 0.95

    def test_index_spans_unit_interval(self):
        claims, cov, _ = synthetic_residual_data()
        index = preference_discounted_theta(aux_residuals(claims, cov))
        values = np.array([s.theta for s in index.values()])
        assert values.min() == pytest.approx(1e-6)
        assert values.max() == pytest.approx(1 - 1e-6)
        assert np.all((values >= 1e-6) & (values <= 1 - 1e-6))

    def test_frequency_weights_change_the_average(self):
        res = pd.DataFrame({
            "patient_id": ["a", "a"],
            "year": [2018, 2018],
            "facility": [3, 3],
            "diagnosis_code": ["digestive", "renal"],
            "residual": [-1.0, 1.0],
        })
        # another patient anchors the min-max standardization
        res = pd.concat([res, pd.DataFrame({
            "patient_id": ["b", "c"], "year": [2018, 2018], "facility": [3, 3],
            "diagnosis_code": ["digestive", "digestive"], "residual": [-2.0, 2.0],
        })], ignore_index=True)
        even = preference_discounted_theta(
            res, SeverityConfig(frequency_weights={"digestive": 0.5, "renal": 0.5}))
        skewed = preference_discounted_theta(
            res, SeverityConfig(frequency_weights={"digestive": 0.9, "renal": 0.1}))
        assert skewed["a"].theta < even["a"].theta

    def test_degenerate_index_rejected(self):
        res = pd.DataFrame({
            "patient_id": ["a", "b"], "year": [2018, 2018], "facility": [3, 3],
            "diagnosis_code": ["digestive", "digestive"], "residual": [0.5, 0.5],
        })
        with pytest.raises(ValueError):
            preference_discounted_theta(res)
