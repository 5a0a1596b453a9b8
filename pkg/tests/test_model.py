"""Unit tests for the utility model: cost operations, utilities, variants."""

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from carechoice.model import (
    Baseline,
    BiasedBelief,
    CostParams,
    CurveSeries,
    Facility,
    InsurancePlan,
    PatientProfile,
    PreferenceParams,
    PresentBias,
    Salience,
    Severity,
    ambulatory_cost,
    benefit,
    choice_probability,
    demo_cost_params,
    gamma_for,
    inpatient_cost,
    log_choice_probability,
    prevention_value_rmb,
    travel_cost_for,
    utility_curve,
    utility_insured,
    utility_uninsured,
    utility_variant,
)


def published_cost_params() -> CostParams:
    return CostParams(alpha=0.882, beta=1.489, rho=-0.253, effectiveness=0.844,
                      s_mult={Facility.THC: 1.0, Facility.TCM: 4.816,
                              Facility.GENERAL: 9.836, Facility.NONLOCAL: 25.103},
                      p_ratio=0.7795, money_scale_rmb=6300.0)


def published_pref_params() -> PreferenceParams:
    return PreferenceParams(gamma_h=0.0225, gamma_l=-0.0166, t_b=0.1001,
                            t_h=0.4854, t_m=0.1166)


def make_profile(**overrides) -> PatientProfile:
    base = dict(patient_id="p0", theta=Severity(0.48), facility_choice=Facility.GENERAL,
                poor_household=False, distant=False, rural_hukou=False, minority=False,
                male=False, high_income=False, age=60.0, distance_km=5.0)
    base.update(overrides)
    return PatientProfile(**base)


class TestSeverity:
    def test_interior_value_kept(self):
        assert Severity(0.48).theta == 0.48

    def test_clamps_to_working_range(self):
        assert Severity(1e-9).theta == 1e-6
        assert Severity(1 - 1e-9).theta == 1 - 1e-6

    @pytest.mark.parametrize("bad", [0.0, 1.0, -0.2, 1.7])
    def test_rejects_outside_open_interval(self, bad):
        with pytest.raises(ValueError):
            Severity(bad)

    def test_from_unit_interval_accepts_endpoints(self):
        assert Severity.from_unit_interval(0.0).theta == 1e-6
        assert Severity.from_unit_interval(1.0).theta == 1 - 1e-6
        with pytest.raises(ValueError):
            Severity.from_unit_interval(1.2)

    @given(st.floats(min_value=1e-12, max_value=1.0, exclude_max=True))
    def test_clamp_idempotent(self, x):
        once = Severity(x).theta
        assert Severity(once).theta == once


class TestPatientProfile:
    def test_disadvantaged_is_poor_or_distant(self):
        assert make_profile(poor_household=True).disadvantaged
        assert make_profile(distant=True).disadvantaged
        assert not make_profile().disadvantaged

    def test_poor_and_high_income_exclusive(self):
        with pytest.raises(ValueError):
            make_profile(poor_household=True, high_income=True)

    def test_minority_implies_distant(self):
        with pytest.raises(ValueError):
            make_profile(minority=True, distant=False)
        make_profile(minority=True, distant=True)


class TestCostParams:
    def test_effectiveness_derived_from_rho(self):
        cp = CostParams(alpha=0.882, beta=1.489, rho=-0.253)
        assert cp.effectiveness == pytest.approx(math.exp(-0.253 / 1.489), abs=1e-12)

    def test_rho_derived_from_effectiveness(self):
        cp = CostParams(alpha=1.0, beta=1.5, effectiveness=0.85)
        assert cp.rho == pytest.approx(1.5 * math.log(0.85), abs=1e-12)

    def test_inconsistent_pair_rejected(self):
        with pytest.raises(ValueError):
            CostParams(alpha=0.882, beta=1.489, rho=-0.253, effectiveness=0.90)

    def test_consistent_pair_accepted(self):
        cp = CostParams(alpha=0.882, beta=1.489, rho=-0.253, effectiveness=0.844)
        assert cp.effectiveness == 0.844

    def test_needs_one_of_rho_or_effectiveness(self):
        with pytest.raises(ValueError):
            CostParams(alpha=1.0, beta=1.5)

    def test_reference_facility_multiple_must_be_one(self):
        with pytest.raises(ValueError):
            CostParams(alpha=1.0, beta=1.5, effectiveness=0.85,
                       s_mult={Facility.THC: 2.0})

    def test_elasticities_must_be_positive(self):
        with pytest.raises(ValueError):
            CostParams(alpha=-0.1, beta=1.5, effectiveness=0.85)
        with pytest.raises(ValueError):
            CostParams(alpha=1.0, beta=0.0, effectiveness=0.85)


class TestInsurancePlan:
    def test_rates_must_lie_in_unit_interval(self):
        with pytest.raises(ValueError):
            InsurancePlan(phi_pc=0.0, phi_hc_poor=0.15, phi_hc_regular=0.41)
        with pytest.raises(ValueError):
            InsurancePlan(phi_pc=0.35, phi_hc_poor=1.5, phi_hc_regular=0.41)

    def test_rate_dispatch_by_poverty(self):
        plan = InsurancePlan(phi_pc=0.35, phi_hc_poor=0.15, phi_hc_regular=0.41)
        assert plan.phi_hc(True) == 0.15
        assert plan.phi_hc(False) == 0.41
        assert plan.phi_hc_by_group == {"poor": 0.15, "regular": 0.41}

    def test_from_mapping_round_trip(self):
        plan = InsurancePlan.from_mapping(0.35, {"poor": 0.15, "regular": 0.41})
        assert plan == InsurancePlan(0.35, 0.15, 0.41)


class TestCostOperations:
    def test_ambulatory_cost_ceiling_at_max_severity(self):
        cp = published_cost_params()
        assert ambulatory_cost(1.0 - 1e-12, cp) == pytest.approx(0.7795, abs=1e-9)

    def test_ambulatory_cost_published_point(self):
        # exp(0.882 * ln 0.48) * 0.7795, frozen by independent evaluation
        cp = published_cost_params()
        assert ambulatory_cost(0.48, cp) == pytest.approx(0.40801007840703285, abs=1e-12)

    def test_inpatient_cost_effectiveness_discount(self):
        # theta -> 1 at the reference facility isolates lambda^beta
        cp = published_cost_params()
        with_amb = inpatient_cost(1.0 - 1e-12, cp, Facility.THC, used_ambulatory=True)
        without = inpatient_cost(1.0 - 1e-12, cp, Facility.THC, used_ambulatory=False)
        assert with_amb == pytest.approx(0.7768262687548975, abs=1e-9)
        assert without == pytest.approx(1.0, abs=1e-9)

    def test_inpatient_cost_scales_with_facility_multiple(self):
        cp = published_cost_params()
        base = inpatient_cost(0.5, cp, Facility.THC, False)
        assert inpatient_cost(0.5, cp, Facility.NONLOCAL, False) == pytest.approx(
            25.103 * base, rel=1e-12)

    def test_costs_increase_with_severity(self):
        cp = published_cost_params()
        grid = np.linspace(0.05, 0.95, 19)
        amb = [ambulatory_cost(t, cp) for t in grid]
        inp = [inpatient_cost(t, cp, Facility.TCM, False) for t in grid]
        assert all(a < b for a, b in zip(amb, amb[1:]))
        assert all(a < b for a, b in zip(inp, inp[1:]))


class TestUtilities:
    def test_uninsured_decomposition(self):
        cp = demo_cost_params()
        theta, gamma, travel = 0.4, 0.02, 0.03
        expect = (benefit(theta, cp, 1.0, gamma)
                  - (theta ** cp.alpha * cp.p_ratio + travel))
        assert utility_uninsured(theta, cp, Facility.THC, gamma, travel) == pytest.approx(
            expect, abs=1e-14)

    def test_benefit_is_avoided_cost_plus_prevention(self):
        cp = demo_cost_params()
        theta, s, gamma = 0.6, 4.0, -0.01
        avoided = s * theta ** cp.beta - s * (cp.effectiveness * theta) ** cp.beta
        assert benefit(theta, cp, s, gamma) == pytest.approx(
            avoided + gamma * (1 - theta), abs=1e-12)

    def test_insured_utility_poor_male_components(self):
        # hand-composed from the published parameters for one patient
        cp, pp = published_cost_params(), published_pref_params()
        plan = InsurancePlan(0.35, 0.15, 0.41)
        p = make_profile(poor_household=True, male=True)
        s, th, phi = 9.836, 0.48, 0.15
        expect = ((1 - 0.844 ** 1.489) * s * th ** 1.489
                  + (-0.0166) * (1 - th) * s / phi
                  - (0.35 / phi) * th ** 0.882 * 0.7795
                  - (0.1001 + 0.1166) / phi)
        assert utility_insured(p, cp, pp, plan) == pytest.approx(expect, rel=1e-9)

    def test_travel_components_add_up(self):
        pp = published_pref_params()
        assert travel_cost_for(make_profile(), pp) == pytest.approx(0.1001)
        assert travel_cost_for(make_profile(male=True), pp) == pytest.approx(0.2167)
        assert travel_cost_for(make_profile(high_income=True, male=True), pp) == (
            pytest.approx(0.1001 + 0.4854 + 0.1166))

    def test_gamma_dispatch(self):
        pp = published_pref_params()
        assert gamma_for(make_profile(), pp) == 0.0225
        assert gamma_for(make_profile(poor_household=True), pp) == -0.0166
        assert gamma_for(make_profile(distant=True), pp) == -0.0166

    def test_gamma_extension_terms(self):
        pp = PreferenceParams(gamma_h=0.0211, gamma_l=-0.0134, t_b=0.0989,
                              t_h=0.4512, t_m=0.1248, gamma_r=-0.0016,
                              gamma_m=-0.0369, rural_minority=True)
        p = make_profile(distant=True, rural_hukou=True, minority=True)
        assert gamma_for(p, pp) == pytest.approx(-0.0134 - 0.0016 - 0.0369)

    def test_extension_coefficients_require_flag(self):
        with pytest.raises(ValueError):
            PreferenceParams(gamma_h=0.02, gamma_l=-0.01, t_b=0.1, gamma_r=-0.002)

    def test_prevention_value_published_points(self):
        cp, pp = published_cost_params(), published_pref_params()
        regular = make_profile(facility_choice=Facility.GENERAL)
        poor = make_profile(poor_household=True, facility_choice=Facility.GENERAL)
        assert prevention_value_rmb(regular, cp, pp) == pytest.approx(725.01156, abs=1e-6)
        assert prevention_value_rmb(poor, cp, pp) == pytest.approx(-534.8974176, abs=1e-6)

    @given(st.floats(min_value=-30, max_value=30))
    def test_choice_probability_matches_logistic(self, v):
        sigma = choice_probability(v)
        assert 0.0 <= sigma <= 1.0
        assert sigma == pytest.approx(1 / (1 + math.exp(-min(max(v, -30), 30))), rel=1e-9)

    def test_log_choice_probability_consistent(self):
        v = np.array([-5.0, -0.5, 0.0, 2.0])
        d = np.array([1.0, 0.0, 1.0, 0.0])
        expect = d * np.log(choice_probability(v)) + (1 - d) * np.log(
            1 - choice_probability(v))
        np.testing.assert_allclose(log_choice_probability(v, d), expect, rtol=1e-12)

    def test_log_choice_probability_stable_in_tails(self):
        assert np.isfinite(log_choice_probability(np.array([-800.0]), np.array([1.0])))[0]
        assert np.isfinite(log_choice_probability(np.array([800.0]), np.array([0.0])))[0]


class TestBehavioralVariants:
    def grid(self):
        return np.linspace(1e-3, 1 - 1e-3, 1000)

    def test_neutral_parameters_reduce_to_baseline(self):
        cp = demo_cost_params()
        for variant in (PresentBias(1.0), Salience(1.0), BiasedBelief(cp.effectiveness)):
            for theta in self.grid():
                u0 = utility_variant(Baseline(), theta, cp, Facility.THC, 0.01, 0.02)
                u1 = utility_variant(variant, theta, cp, Facility.THC, 0.01, 0.02)
                assert abs(u1 - u0) <= 1e-12

    def test_present_bias_shrinks_positive_benefit(self):
        cp = demo_cost_params()
        theta = 0.7  # benefit bracket positive here at gamma=0
        u_full = utility_variant(Baseline(), theta, cp, Facility.THC, 0.0, 0.0)
        u_bias = utility_variant(PresentBias(0.6), theta, cp, Facility.THC, 0.0, 0.0)
        assert u_bias < u_full

    def test_biased_belief_changes_benefit_only(self):
        cp = demo_cost_params()
        theta, gamma, travel = 0.5, 0.0, 0.07
        u = utility_variant(BiasedBelief(0.6), theta, cp, Facility.THC, gamma, travel)
        believed = CostParams(alpha=cp.alpha, beta=cp.beta, effectiveness=0.6,
                              p_ratio=cp.p_ratio)
        expect = benefit(theta, believed, 1.0, gamma) - (
            theta ** cp.alpha * cp.p_ratio + travel)
        assert u == pytest.approx(expect, abs=1e-12)

    def test_variant_parameter_ranges(self):
        with pytest.raises(ValueError):
            PresentBias(0.0)
        with pytest.raises(ValueError):
            Salience(1.2)
        with pytest.raises(ValueError):
            BiasedBelief(1.0)


class TestUtilityCurves:
    def test_zero_crossing_of_breakeven_curve(self):
        # gamma=0: utility crosses zero where avoided cost equals price,
        # theta = (p_ratio / (1 - lambda^beta))^2 at alpha=1, beta=1.5
        from scipy.optimize import brentq

        cp = demo_cost_params()
        closed = (cp.p_ratio / (1 - cp.effectiveness ** cp.beta)) ** 2
        root = brentq(lambda t: utility_uninsured(t, cp, Facility.THC, 0.0, 0.0),
                      0.05, 0.9, xtol=1e-14)
        assert abs(utility_uninsured(root, cp, Facility.THC, 0.0, 0.0)) < 1e-10
        assert root == pytest.approx(closed, abs=1e-8)
        assert closed == pytest.approx(0.30767625159259443, abs=1e-12)

    def test_negative_weight_delays_adoption_threshold(self):
        from scipy.optimize import brentq

        cp = demo_cost_params()
        root = brentq(lambda t: utility_uninsured(t, cp, Facility.THC, -0.04, 0.0),
                      0.1, 0.9, xtol=1e-14)
        assert abs(utility_uninsured(root, cp, Facility.THC, -0.04, 0.0)) < 1e-10
        assert root == pytest.approx(0.5230960206979176, abs=1e-9)
        assert root > 0.30767625159259443

    def test_curve_rows_series_major(self):
        rows = utility_curve([0.2, 0.8], [CurveSeries("gamma", "a", gamma=0.0),
                                          CurveSeries("gamma", "b", gamma=0.12)])
        assert [r["label"] for r in rows] == ["a", "a", "b", "b"]
        assert rows[0]["theta"] == 0.2

    def test_ratio_series_scales_ambulatory_price(self):
        cp = demo_cost_params()
        rows = utility_curve([0.5], [CurveSeries("ratio", "r", gamma=0.0, ratio=1.2)])
        expect = (benefit(0.5, cp, 1.0, 0.0) - 1.2 * 0.5 ** cp.alpha * cp.p_ratio)
        assert rows[0]["utility"] == pytest.approx(expect, abs=1e-12)

    def test_grid_must_be_interior(self):
        with pytest.raises(ValueError):
            utility_curve([0.0, 0.5], [CurveSeries("gamma", "a")])

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError):
            CurveSeries("quadratic", "x")

    def test_single_point_grid(self):
        rows = utility_curve([0.5], [CurveSeries("gamma", "only")])
        assert len(rows) == 1
