"""Core model of the ambulatory-vs-inpatient care trade-off.

A patient with chronic-disease severity ``theta`` chooses whether to use
long-term ambulatory management. Using it costs money and travel time now but
discounts the severity that eventually shows up at hospitalization (by a
factor ``effectiveness``) and yields a prevention benefit ``gamma * (1 -
theta)`` from avoided secondary conditions. Skipping it saves the upfront
cost but means hospitalization arrives at full severity.

Everything in this module is a pure function of immutable parameter
containers. Money enters in two unit systems:

* normalized units, multiples of the maximum hospitalization cost at a
  township health center (the cheapest facility tier), used inside utilities;
* RMB, obtained by scaling with ``CostParams.money_scale_rmb``.

Scalar arguments named ``theta`` also accept numpy arrays; the closed forms
broadcast.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import IntEnum
from typing import Mapping, Sequence, Union

import numpy as np
from scipy.special import expit

THETA_EPS = 1e-6

# Tolerance for the redundancy check between the ambulatory-use coefficient
# of the inpatient cost regression and the effectiveness parameter.
EFFECTIVENESS_CONSISTENCY_TOL = 1e-3


class Facility(IntEnum):
    """Inpatient facility tiers, ordered by cost level."""

    THC = 1        # township health center, the normalization tier
    TCM = 2        # traditional-medicine county hospital
    GENERAL = 3    # general county hospital
    NONLOCAL = 4   # out-of-county facility


@dataclass(frozen=True)
class Severity:
    """Disease severity on the open unit interval.

    Values are clamped away from {0, 1} by ``THETA_EPS`` so that logs and
    power transforms stay finite downstream.
    """

    theta: float

    def __post_init__(self):
        th = float(self.theta)
        if not math.isfinite(th) or th <= 0.0 or th >= 1.0:
            raise ValueError(f"severity must lie strictly inside (0, 1), got {self.theta!r}")
        object.__setattr__(self, "theta", min(max(th, THETA_EPS), 1.0 - THETA_EPS))

    @classmethod
    def from_unit_interval(cls, x: float) -> "Severity":
        """Build a Severity from a value in the closed interval [0, 1].

        Endpoints are pulled inside by ``THETA_EPS``; anything outside [0, 1]
        is rejected.
        """
        x = float(x)
        if not math.isfinite(x) or x < 0.0 or x > 1.0:
            raise ValueError(f"expected a value in [0, 1], got {x!r}")
        return cls(min(max(x, THETA_EPS), 1.0 - THETA_EPS))


@dataclass(frozen=True)
class PatientProfile:
    """One patient's traits, severity, and (optionally) observed choice."""

    patient_id: str
    theta: Severity
    facility_choice: Facility
    poor_household: bool
    distant: bool
    rural_hukou: bool
    minority: bool
    male: bool
    high_income: bool
    age: float
    distance_km: float
    urban: bool = False
    used_ambulatory: Union[bool, None] = None  # None until simulated/observed

    def __post_init__(self):
        if self.poor_household and self.high_income:
            raise ValueError(f"{self.patient_id}: poor_household and high_income are exclusive")
        if self.minority and not self.distant:
            raise ValueError(f"{self.patient_id}: minority patients live in distant villages")
        if self.age < 0 or not math.isfinite(self.age):
            raise ValueError(f"{self.patient_id}: bad age {self.age!r}")
        if self.distance_km < 0 or not math.isfinite(self.distance_km):
            raise ValueError(f"{self.patient_id}: bad distance {self.distance_km!r}")

    @property
    def disadvantaged(self) -> bool:
        """Poor-household or distant-village patients face a care disutility."""
        return self.poor_household or self.distant


def _theta_value(theta):
    """Accept a Severity, float, or array and return the raw value(s)."""
    if isinstance(theta, Severity):
        return theta.theta
    return theta


@dataclass(frozen=True)
class CostParams:
    """Cost-technology parameters.

    ``alpha`` and ``beta`` are severity elasticities of ambulatory and
    inpatient cost. ``effectiveness`` is the severity discount from using
    ambulatory care, tied to the ambulatory-use coefficient ``rho`` of the
    inpatient cost regression by ``effectiveness = exp(rho / beta)``; when
    both are supplied they must agree to within
    ``EFFECTIVENESS_CONSISTENCY_TOL``. ``s_mult`` maps each facility tier to
    its cost multiple of the THC tier. ``p_ratio`` is the maximum ambulatory
    cost as a fraction of the maximum THC hospitalization cost, and
    ``money_scale_rmb`` converts normalized money into RMB.
    """

    alpha: float
    beta: float
    effectiveness: float = None
    rho: float = None
    s_mult: Mapping[Facility, float] = None
    p_ratio: float = 1.0
    money_scale_rmb: float = 1.0

    def __post_init__(self):
        if not (self.alpha > 0 and math.isfinite(self.alpha)):
            raise ValueError(f"alpha must be positive, got {self.alpha!r}")
        if not (self.beta > 0 and math.isfinite(self.beta)):
            raise ValueError(f"beta must be positive, got {self.beta!r}")
        if self.effectiveness is None and self.rho is None:
            raise ValueError("need effectiveness, rho, or both")
        if self.effectiveness is None:
            object.__setattr__(self, "effectiveness", math.exp(self.rho / self.beta))
        elif self.rho is None:
            object.__setattr__(self, "rho", self.beta * math.log(self.effectiveness))
        else:
            implied = math.exp(self.rho / self.beta)
            if abs(implied - self.effectiveness) > EFFECTIVENESS_CONSISTENCY_TOL:
                raise ValueError(
                    f"effectiveness {self.effectiveness} inconsistent with exp(rho/beta) "
                    f"= {implied:.6f} (tolerance {EFFECTIVENESS_CONSISTENCY_TOL})"
                )
        if not (0.0 < self.effectiveness < 1.0):
            raise ValueError(f"effectiveness must lie in (0, 1), got {self.effectiveness!r}")
        if self.s_mult is None:
            object.__setattr__(self, "s_mult", {f: 1.0 for f in Facility})
        smult = {Facility(k): float(v) for k, v in self.s_mult.items()}
        if Facility.THC not in smult or smult[Facility.THC] != 1.0:
            raise ValueError("s_mult must normalize the THC tier to exactly 1.0")
        for fac, s in smult.items():
            if s < 1.0 or not math.isfinite(s):
                raise ValueError(f"cost multiple for {fac.name} must be >= 1, got {s!r}")
        object.__setattr__(self, "s_mult", smult)
        if not (self.p_ratio > 0 and math.isfinite(self.p_ratio)):
            raise ValueError(f"p_ratio must be positive, got {self.p_ratio!r}")
        if not (self.money_scale_rmb > 0 and math.isfinite(self.money_scale_rmb)):
            raise ValueError(f"money_scale_rmb must be positive, got {self.money_scale_rmb!r}")

    def s(self, facility: Facility) -> float:
        """Cost multiple of the given facility tier relative to THC."""
        return self.s_mult[Facility(facility)]


@dataclass(frozen=True)
class PreferenceParams:
    """Preference parameters: prevention benefit and travel disutility.

    ``gamma_h`` applies to regular patients, ``gamma_l`` to disadvantaged
    ones (poor-household or distant-village). With ``rural_minority`` set,
    ``gamma_r`` and ``gamma_m`` add shifts for rural-hukou and minority
    patients; otherwise those shifts must be zero. Travel disutility is
    ``t_b`` plus ``t_h`` for high-income and ``t_m`` for male patients, in
    normalized money units.
    """

    gamma_h: float
    gamma_l: float
    t_b: float
    t_h: float = 0.0
    t_m: float = 0.0
    gamma_r: float = 0.0
    gamma_m: float = 0.0
    rural_minority: bool = False

    def __post_init__(self):
        for name in ("gamma_h", "gamma_l", "t_b", "t_h", "t_m", "gamma_r", "gamma_m"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if not self.rural_minority and (self.gamma_r != 0.0 or self.gamma_m != 0.0):
            raise ValueError("gamma_r / gamma_m require rural_minority=True")


@dataclass(frozen=True)
class InsurancePlan:
    """Coinsurance rates: the out-of-pocket share of each cost type.

    ``phi_pc`` applies to ambulatory care for everyone; hospitalization
    shares differ for poor households and regular patients.
    """

    phi_pc: float
    phi_hc_poor: float
    phi_hc_regular: float

    def __post_init__(self):
        for name in ("phi_pc", "phi_hc_poor", "phi_hc_regular"):
            v = getattr(self, name)
            if not (0.0 < v <= 1.0):
                raise ValueError(f"{name} must lie in (0, 1], got {v!r}")

    def phi_hc(self, poor_household: bool) -> float:
        return self.phi_hc_poor if poor_household else self.phi_hc_regular

    @property
    def phi_hc_by_group(self) -> dict:
        return {"poor": self.phi_hc_poor, "regular": self.phi_hc_regular}

    @classmethod
    def from_mapping(cls, phi_pc: float, phi_hc: Mapping[str, float]) -> "InsurancePlan":
        return cls(phi_pc=phi_pc, phi_hc_poor=phi_hc["poor"], phi_hc_regular=phi_hc["regular"])


@dataclass(frozen=True)
class Baseline:
    """Fully rational benchmark; reduces utility_variant to utility_uninsured."""


@dataclass(frozen=True)
class PresentBias:
    """Future benefits discounted by ``delta`` in (0, 1]; delta=1 is baseline."""

    delta: float

    def __post_init__(self):
        if not (0.0 < self.delta <= 1.0):
            raise ValueError(f"delta must lie in (0, 1], got {self.delta!r}")


@dataclass(frozen=True)
class Salience:
    """Severity perceived as ``mu * theta`` with ``mu`` in (0, 1]; mu=1 is baseline."""

    mu: float

    def __post_init__(self):
        if not (0.0 < self.mu <= 1.0):
            raise ValueError(f"mu must lie in (0, 1], got {self.mu!r}")


@dataclass(frozen=True)
class BiasedBelief:
    """Believed ambulatory effectiveness differs from the true parameter."""

    effectiveness: float

    def __post_init__(self):
        if not (0.0 < self.effectiveness < 1.0):
            raise ValueError(f"believed effectiveness must lie in (0, 1), got {self.effectiveness!r}")


BehavioralVariant = Union[Baseline, PresentBias, Salience, BiasedBelief]


# ---------------------------------------------------------------------------
# Cost and utility primitives
# ---------------------------------------------------------------------------


def ambulatory_cost(theta, cp: CostParams):
    """Yearly ambulatory management cost, in normalized money units.

    Increasing and strictly convex/concave in theta per ``alpha``; equals
    ``p_ratio`` at theta -> 1.
    """
    th = _theta_value(theta)
    return th ** cp.alpha * cp.p_ratio


def inpatient_cost(theta, cp: CostParams, facility: Facility, used_ambulatory: bool):
    """Hospitalization cost at the given facility tier, normalized units.

    Ambulatory use discounts the severity that arrives at hospitalization:
    the effective severity is ``effectiveness * theta``.
    """
    th = _theta_value(theta)
    eff = th * cp.effectiveness if used_ambulatory else th
    return cp.s(facility) * eff ** cp.beta


def gamma_for(profile: PatientProfile, pp: PreferenceParams) -> float:
    """Prevention-benefit coefficient for one patient.

    Disadvantaged patients get ``gamma_l``, others ``gamma_h``; under the
    rural/minority extension, ``gamma_r`` and ``gamma_m`` shifts stack on
    top for rural-hukou and minority patients.
    """
    g = pp.gamma_l if profile.disadvantaged else pp.gamma_h
    if pp.rural_minority:
        if profile.rural_hukou:
            g += pp.gamma_r
        if profile.minority:
            g += pp.gamma_m
    return g


def travel_cost_for(profile: PatientProfile, pp: PreferenceParams) -> float:
    """Per-patient travel disutility of ambulatory care, normalized units."""
    t = pp.t_b
    if profile.high_income:
        t += pp.t_h
    if profile.male:
        t += pp.t_m
    return t


def benefit(theta, cp: CostParams, s: float, gamma: float):
    """Gross benefit of ambulatory use: avoided hospitalization cost plus
    prevention value. Shared by the uninsured utility and its variants."""
    th = _theta_value(theta)
    return (1.0 - cp.effectiveness ** cp.beta) * s * th ** cp.beta + gamma * (1.0 - th)


def utility_uninsured(theta, cp: CostParams, facility: Facility, gamma: float, travel: float):
    """Net utility of ambulatory use with no insurance, normalized units.

    Benefit (avoided hospitalization cost plus prevention value) minus the
    upfront ambulatory price and travel disutility.
    """
    th = _theta_value(theta)
    return benefit(th, cp, cp.s(facility), gamma) - (th ** cp.alpha * cp.p_ratio + travel)


def insured_utility_terms(theta, s, gamma, travel, phi_pc, phi_hc, cp: CostParams):
    """Insured net utility from raw per-patient arrays (or scalars).

    The hospitalization-cost channel nets out the insurer's share: the
    avoided-cost term keeps its full weight, the prevention term and travel
    are grossed up by ``1 / phi_hc``, and the ambulatory price is weighted
    by the coinsurance ratio ``phi_pc / phi_hc``.
    """
    th = _theta_value(theta)
    avoided = (1.0 - cp.effectiveness ** cp.beta) * s * th ** cp.beta
    prevention = gamma * (1.0 - th) * s / phi_hc
    price = (phi_pc / phi_hc) * th ** cp.alpha * cp.p_ratio
    return avoided + prevention - price - travel / phi_hc


def utility_insured(profile: PatientProfile, cp: CostParams, pp: PreferenceParams,
                    plan: InsurancePlan, travel: float = None) -> float:
    """Insured net utility of ambulatory use for one patient.

    ``travel`` overrides the preference-implied travel disutility (used by
    travel-subsidy counterfactuals); by default it comes from
    ``travel_cost_for``.
    """
    if travel is None:
        travel = travel_cost_for(profile, pp)
    return float(insured_utility_terms(
        profile.theta.theta,
        cp.s(profile.facility_choice),
        gamma_for(profile, pp),
        travel,
        plan.phi_pc,
        plan.phi_hc(profile.poor_household),
        cp,
    ))


def choice_probability(v):
    """Probability of choosing ambulatory care given net utility ``v``.

    Logistic in ``v``; evaluated in the overflow-free branch form, so large
    |v| saturates monotonically instead of overflowing.
    """
    arr = expit(np.asarray(v, dtype=float))
    if np.ndim(v) == 0:
        return float(arr)
    return arr


def log_choice_probability(v, chose_ambulatory):
    """log P(choice) for outcome d in {0, 1}, stable in both tails."""
    v = np.asarray(v, dtype=float)
    d = np.asarray(chose_ambulatory, dtype=float)
    # log sigma(v) = -log(1 + e^{-v}); log(1 - sigma(v)) = -log(1 + e^{v})
    return -np.logaddexp(0.0, np.where(d > 0.5, -v, v))


def prevention_value_rmb(profile: PatientProfile, cp: CostParams, pp: PreferenceParams) -> float:
    """RMB value of avoided secondary conditions for one patient.

    ``gamma * (1 - theta)`` scaled by the patient's facility cost multiple
    and converted to RMB. Negative for patients whose gamma is negative:
    for them contact with the care system is itself a burden.
    """
    th = profile.theta.theta
    return gamma_for(profile, pp) * (1.0 - th) * cp.s(profile.facility_choice) * cp.money_scale_rmb


def utility_variant(variant: BehavioralVariant, theta, cp: CostParams, facility: Facility,
                    gamma: float, travel: float):
    """Uninsured net utility under a behavioral variant.

    PresentBias scales the whole benefit bracket by delta; Salience replaces
    theta with mu * theta everywhere; BiasedBelief swaps the believed
    effectiveness into the benefit term only (costs realize under the true
    parameter). Each reduces to the baseline at its neutral parameter.
    """
    s = cp.s(facility)
    th = _theta_value(theta)
    if isinstance(variant, Baseline):
        return utility_uninsured(th, cp, facility, gamma, travel)
    if isinstance(variant, PresentBias):
        return variant.delta * benefit(th, cp, s, gamma) - (th ** cp.alpha * cp.p_ratio + travel)
    if isinstance(variant, Salience):
        return utility_uninsured(th * variant.mu, cp, facility, gamma, travel)
    if isinstance(variant, BiasedBelief):
        believed = replace(cp, effectiveness=variant.effectiveness, rho=None)
        return benefit(th, believed, s, gamma) - (th ** cp.alpha * cp.p_ratio + travel)
    raise TypeError(f"unknown behavioral variant {variant!r}")


@dataclass(frozen=True)
class CurveSeries:
    """One utility-vs-severity series for plotting or tabulation.

    ``kind`` selects the functional form:

    * ``"gamma"``: uninsured utility at the given prevention coefficient;
    * ``"ratio"``: insured utility with ambulatory coinsurance scaled by
      ``ratio`` (hospitalization coinsurance left at 1);
    * ``"present_bias"`` / ``"salience"`` / ``"biased_belief"``: the
      behavioral variants, parameterized by ``value``.
    """

    kind: str
    label: str
    gamma: float = 0.0
    ratio: float = 1.0
    value: float = 1.0

    _KINDS = ("gamma", "ratio", "present_bias", "salience", "biased_belief")

    def __post_init__(self):
        if self.kind not in self._KINDS:
            raise ValueError(f"kind must be one of {self._KINDS}, got {self.kind!r}")


def demo_cost_params() -> CostParams:
    """Illustrative cost technology for utility curves: unit elasticity of
    ambulatory cost, inpatient elasticity 1.5, effectiveness 0.85, and an
    ambulatory price ceiling at 12% of the hospitalization ceiling."""
    return CostParams(alpha=1.0, beta=1.5, effectiveness=0.85, p_ratio=0.12)


def utility_curve(theta_grid: Sequence[float], series: Sequence[CurveSeries],
                  cp: CostParams = None) -> list:
    """Tabulate utility against severity for each configured series.

    Returns rows of ``{"label", "theta", "utility"}`` in series-major order.
    The grid must lie inside (0, 1); the THC tier and zero travel are used
    throughout so curves isolate the preference/perception channel.
    """
    if cp is None:
        cp = demo_cost_params()
    grid = [float(t) for t in theta_grid]
    for t in grid:
        if not (0.0 < t < 1.0):
            raise ValueError(f"theta grid values must lie in (0, 1), got {t!r}")
    rows = []
    for s in series:
        for t in grid:
            if s.kind == "gamma":
                u = utility_uninsured(t, cp, Facility.THC, s.gamma, 0.0)
            elif s.kind == "ratio":
                u = insured_utility_terms(t, 1.0, s.gamma, 0.0, s.ratio, 1.0, cp)
            elif s.kind == "present_bias":
                u = utility_variant(PresentBias(s.value), t, cp, Facility.THC, s.gamma, 0.0)
            elif s.kind == "salience":
                u = utility_variant(Salience(s.value), t, cp, Facility.THC, s.gamma, 0.0)
            else:
                u = utility_variant(BiasedBelief(s.value), t, cp, Facility.THC, s.gamma, 0.0)
            rows.append({"label": s.label, "theta": t, "utility": float(u)})
    return rows
