"""Synthetic populations, choices, and claims from known true parameters.

Everything here exists so the estimators can be validated by parameter
recovery: generate a population at chosen group shares, draw care choices
from the model's own probabilities, emit claims on the cost surfaces with
log-normal noise, and simulate a two-period cost-sharing reform for the
difference-in-differences analysis.

Randomness is organized in purpose-specific streams derived from one master
seed (population 0, choices 1, costs 2, shock 3; estimation owns bootstrap
4 and multistart 5), so adding or rerunning a stage never perturbs the
draws of another.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence, Union

import numpy as np
import pandas as pd

from .model import (
    CostParams,
    Facility,
    InsurancePlan,
    PatientProfile,
    PreferenceParams,
    Severity,
    choice_probability,
    gamma_for,
    insured_utility_terms,
    travel_cost_for,
)
from .severity import ClaimRecord

STREAM_IDS = {"population": 0, "choices": 1, "costs": 2, "shock": 3}


def seed_stream(seed: int, purpose: str) -> np.random.Generator:
    """Independent generator for one simulation stage of a master seed."""
    return np.random.default_rng(
        np.random.SeedSequence(entropy=seed, spawn_key=(STREAM_IDS[purpose],)))


@dataclass(frozen=True)
class GroupShares:
    """Population shares of the patient traits.

    ``disadvantaged`` pins the share of the poor-or-distant union; the
    overlap between poor and distant is then implied
    (P(both) = poor + distant - disadvantaged). Left unset, poor and
    distant are drawn independently. Minority patients are drawn among the
    distant (the minority share is unconditional), and high income among
    the non-poor.
    """

    poor_household: float
    distant: float
    male: float
    disadvantaged: Union[float, None] = None
    rural_hukou: float = 0.0
    minority: float = 0.0
    high_income: float = 0.0
    urban: float = 0.0

    def __post_init__(self):
        for name in ("poor_household", "distant", "male", "rural_hukou",
                     "minority", "high_income", "urban"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"group share {name} must lie in [0, 1], got {v!r}")
        if self.minority > self.distant:
            raise ValueError(
                f"minority share {self.minority} exceeds distant share {self.distant}; "
                "minority patients live in distant villages")
        if self.high_income > 1.0 - self.poor_household:
            raise ValueError("high_income share exceeds the non-poor share")
        if self.disadvantaged is not None:
            d = self.disadvantaged
            lo = max(self.poor_household, self.distant)
            hi = min(self.poor_household + self.distant, 1.0)
            if not (lo <= d <= hi):
                raise ValueError(
                    f"disadvantaged share {d} incompatible with poor {self.poor_household} "
                    f"and distant {self.distant}: must lie in [{lo:.3f}, {hi:.3f}]")


@dataclass(frozen=True)
class SeveritySpec:
    """Severity distribution: named categories at fixed levels, or a Beta law.

    ``kind="discrete"`` draws categories from ``mix`` and assigns the
    matching ``theta`` level. ``kind="beta"`` draws theta from
    Beta(``a``, ``b``) and leaves categories implicit.
    """

    kind: str = "discrete"
    mix: Mapping[str, float] = field(
        default_factory=lambda: {"Mild": 0.394, "Moderate": 0.465, "Severe": 0.141})
    theta: Mapping[str, float] = field(
        default_factory=lambda: {"Mild": 0.10, "Moderate": 0.48, "Severe": 0.72})
    a: float = 2.0
    b: float = 2.0

    def __post_init__(self):
        if self.kind not in ("discrete", "beta"):
            raise ValueError(f"severity kind must be discrete|beta, got {self.kind!r}")
        if self.kind == "discrete":
            if set(self.mix) != set(self.theta):
                raise ValueError("severity mix and theta must cover the same categories")
            total = sum(self.mix.values())
            if abs(total - 1.0) > 1e-9 or any(v < 0 for v in self.mix.values()):
                raise ValueError(f"severity mix must be a distribution, sums to {total}")
            for cat, th in self.theta.items():
                if not (0.0 < th < 1.0):
                    raise ValueError(f"severity level for {cat} must lie in (0,1), got {th!r}")
        else:
            if self.a <= 0 or self.b <= 0:
                raise ValueError("beta severity needs positive shape parameters")

    @property
    def categories(self) -> tuple:
        return tuple(sorted(self.mix))


@dataclass(frozen=True)
class NonCvdSpec:
    """How non-cardiovascular hospitalizations are emitted.

    Patients with severity at or above ``min_theta`` get
    ``records_per_year`` records costing ``scale_rmb * theta^loading``
    times a log-normal disturbance, split across ``diagnoses`` and
    facilities. These records feed the severity module only; they play no
    role in the structural cost regressions.
    """

    records_per_year: int = 1
    scale_rmb: float = 25000.0
    loading: float = 1.0
    noise_sd: float = 0.15
    oop_share: float = 0.45
    min_theta: float = 0.30
    diagnoses: Mapping[str, float] = field(
        default_factory=lambda: {"digestive": 0.30, "musculoskeletal": 0.20,
                                 "renal": 0.10, "respiratory": 0.40})
    facility_probs: Sequence[float] = (0.10, 0.10, 0.45, 0.35)

    def __post_init__(self):
        if self.records_per_year < 0:
            raise ValueError("records_per_year must be nonnegative")
        if self.scale_rmb <= 0:
            raise ValueError("scale_rmb must be positive")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be nonnegative")
        if not (0.0 <= self.oop_share <= 1.0):
            raise ValueError("oop_share must lie in [0, 1]")
        total = sum(self.diagnoses.values())
        if abs(total - 1.0) > 1e-9 or any(v < 0 for v in self.diagnoses.values()):
            raise ValueError("diagnoses must be a probability distribution")
        if len(self.facility_probs) != 4 or abs(sum(self.facility_probs) - 1.0) > 1e-9:
            raise ValueError("facility_probs must be 4 probabilities summing to 1")


@dataclass(frozen=True)
class PopulationConfig:
    """Everything the simulator needs: who, how sick, and at what prices.

    ``facility_choice_probs`` maps severity categories (or "all" for the
    Beta case) to distributions over the four facility tiers in enum order.
    """

    n_patients: int
    seed: int
    group_shares: GroupShares
    severity: SeveritySpec
    facility_choice_probs: Mapping[str, Sequence[float]]
    true_cost_params: CostParams
    true_pref_params: PreferenceParams
    plan: InsurancePlan
    cost_noise_sd: float = 0.25
    years: Sequence[int] = (2018, 2019)
    cvd_admissions_per_year: int = 1
    noncvd: NonCvdSpec = field(default_factory=NonCvdSpec)
    age_mean: float = 62.0
    age_sd: float = 11.0
    age_range: Sequence[float] = (35.0, 95.0)
    distance_log_mean: float = 1.6
    distance_log_sd: float = 0.6

    def __post_init__(self):
        if self.n_patients < 1:
            raise ValueError("n_patients must be positive")
        if self.cost_noise_sd < 0:
            raise ValueError("cost_noise_sd must be nonnegative")
        if self.cvd_admissions_per_year < 1:
            raise ValueError("cvd_admissions_per_year must be at least 1")
        if len(self.years) < 1:
            raise ValueError("need at least one claim year")
        keys = self.severity.categories if self.severity.kind == "discrete" else ("all",)
        for key in keys:
            if key not in self.facility_choice_probs:
                raise ValueError(f"facility_choice_probs missing entry for {key!r}")
            probs = self.facility_choice_probs[key]
            if len(probs) != 4 or abs(sum(probs) - 1.0) > 1e-9 or any(p < 0 for p in probs):
                raise ValueError(
                    f"facility_choice_probs[{key!r}] must be 4 probabilities summing to 1")


def _draw_categorical(rng: np.random.Generator, probs: np.ndarray, n: int) -> np.ndarray:
    """n draws from a categorical distribution, via one uniform vector."""
    cuts = np.cumsum(probs)
    cuts[-1] = 1.0  # guard against float drift at the top
    return np.searchsorted(cuts, rng.random(n), side="right")


def generate_population(cfg: PopulationConfig, seed: Union[int, None] = None) -> list:
    """Draw a patient population; deterministic given the (config, seed).

    ``seed`` overrides ``cfg.seed`` when given. The poor/distant overlap is
    tied down by the disadvantaged share when that is configured, minority
    status is drawn within the distant group, and high income within the
    non-poor group, so the logical constraints between flags hold by
    construction.
    """
    if seed is None:
        seed = cfg.seed
    rng = seed_stream(seed, "population")
    n = cfg.n_patients
    gs = cfg.group_shares

    if gs.disadvantaged is None:
        poor = rng.random(n) < gs.poor_household
        distant = rng.random(n) < gs.distant
    else:
        p_both = gs.poor_household + gs.distant - gs.disadvantaged
        cells = np.clip(np.array([
            p_both,                        # poor and distant
            gs.poor_household - p_both,    # poor only
            gs.distant - p_both,           # distant only
            1.0 - gs.disadvantaged,        # neither
        ]), 0.0, None)  # feasibility is validated; this absorbs float dust
        cell = _draw_categorical(rng, cells, n)
        poor = cell <= 1
        distant = (cell == 0) | (cell == 2)

    minority = np.zeros(n, dtype=bool)
    if gs.minority > 0:
        minority = distant & (rng.random(n) < gs.minority / gs.distant)
    high = np.zeros(n, dtype=bool)
    if gs.high_income > 0:
        high = ~poor & (rng.random(n) < gs.high_income / (1.0 - gs.poor_household))
    rural = rng.random(n) < gs.rural_hukou
    urban = rng.random(n) < gs.urban
    male = rng.random(n) < gs.male

    age = np.clip(rng.normal(cfg.age_mean, cfg.age_sd, n), *cfg.age_range)
    # Distant villages sit systematically farther out; cosmetic only.
    distance = np.exp(rng.normal(cfg.distance_log_mean + 0.8 * distant.astype(float),
                                 cfg.distance_log_sd, n))

    sev = cfg.severity
    if sev.kind == "discrete":
        cats = sev.categories
        probs = np.array([sev.mix[c] for c in cats])
        cat_idx = _draw_categorical(rng, probs, n)
        theta = np.array([sev.theta[cats[i]] for i in cat_idx])
        fac_keys = [cats[i] for i in cat_idx]
    else:
        theta = rng.beta(sev.a, sev.b, n)
        fac_keys = ["all"] * n
    fac_u = rng.random(n)
    facilities = np.empty(n, dtype=int)
    for key in set(fac_keys):
        mask = np.array([k == key for k in fac_keys])
        cuts = np.cumsum(np.asarray(cfg.facility_choice_probs[key], dtype=float))
        cuts[-1] = 1.0
        facilities[mask] = np.searchsorted(cuts, fac_u[mask], side="right") + 1

    width = max(6, len(str(n)))
    return [
        PatientProfile(
            patient_id=f"p{i:0{width}d}",
            theta=Severity.from_unit_interval(float(theta[i])),
            facility_choice=Facility(int(facilities[i])),
            poor_household=bool(poor[i]),
            distant=bool(distant[i]),
            rural_hukou=bool(rural[i]),
            minority=bool(minority[i]),
            male=bool(male[i]),
            high_income=bool(high[i]),
            age=float(age[i]),
            distance_km=float(distance[i]),
            urban=bool(urban[i]),
        )
        for i in range(n)
    ]


def _utilities(population: Sequence[PatientProfile], cp: CostParams,
               pp: PreferenceParams, plan: InsurancePlan) -> np.ndarray:
    theta = np.array([p.theta.theta for p in population])
    s = np.array([cp.s(p.facility_choice) for p in population])
    gamma = np.array([gamma_for(p, pp) for p in population])
    travel = np.array([travel_cost_for(p, pp) for p in population])
    phi_hc = np.array([plan.phi_hc(p.poor_household) for p in population])
    return insured_utility_terms(theta, s, gamma, travel, plan.phi_pc, phi_hc, cp)


def simulate_choices(population: Sequence[PatientProfile], cp: CostParams,
                     pp: PreferenceParams, plan: InsurancePlan, seed: int) -> list:
    """Draw each patient's ambulatory-use decision from the model.

    Returns a new population with ``used_ambulatory`` set; the input
    profiles are not mutated. Decisions are Bernoulli in the insured choice
    probability, equivalent to comparing net utility against a logistic
    taste shock.
    """
    rng = seed_stream(seed, "choices")
    sigma = choice_probability(_utilities(population, cp, pp, plan))
    draws = rng.random(len(population)) < sigma
    return [replace(p, used_ambulatory=bool(d)) for p, d in zip(population, draws)]


def simulate_costs(population: Sequence[PatientProfile], cp: CostParams,
                   plan: InsurancePlan, noise_sd: float, seed: int,
                   years: Sequence[int] = (2018, 2019),
                   cvd_admissions_per_year: int = 1,
                   noncvd: NonCvdSpec = NonCvdSpec()) -> list:
    """Emit claim records on the model's cost surfaces.

    Per patient-year: one ambulatory management record if the patient uses
    ambulatory care (cost ``money_scale * p_ratio * theta^alpha`` times a
    log-normal disturbance), the configured number of cardiovascular
    hospitalizations at the chosen facility (cost
    ``money_scale * s * (effective theta)^beta``, with the effectiveness
    discount applied for ambulatory users), and non-cardiovascular
    hospitalizations per ``noncvd``. Out-of-pocket amounts apply the plan's
    cost-sharing (the configured flat share for non-cardiovascular care).

    Choices must be simulated first; draws are deterministic given seed and
    independent of population order changes downstream.
    """
    if any(p.used_ambulatory is None for p in population):
        raise ValueError("simulate choices before costs: used_ambulatory missing")
    rng = seed_stream(seed, "costs")
    n = len(population)
    theta = np.array([p.theta.theta for p in population])
    s = np.array([cp.s(p.facility_choice) for p in population])
    used = np.array([p.used_ambulatory for p in population], dtype=bool)
    phi_hc = np.array([plan.phi_hc(p.poor_household) for p in population])

    amb_base = cp.money_scale_rmb * cp.p_ratio * theta ** cp.alpha
    eff_theta = np.where(used, cp.effectiveness * theta, theta)
    cvd_base = cp.money_scale_rmb * s * eff_theta ** cp.beta
    emit_noncvd = theta >= noncvd.min_theta
    non_base = noncvd.scale_rmb * theta ** noncvd.loading
    diag_names = sorted(noncvd.diagnoses)
    diag_probs = np.array([noncvd.diagnoses[d] for d in diag_names])

    records = []
    k_cvd = cvd_admissions_per_year
    k_non = noncvd.records_per_year
    for year in years:
        # Fixed draw layout per year: every patient consumes the same number
        # of variates whether or not a record is emitted, so one patient's
        # flags never shift another's draws.
        eps_amb = rng.normal(0.0, noise_sd, n)
        eps_cvd = rng.normal(0.0, noise_sd, (n, k_cvd))
        eps_non = rng.normal(0.0, noncvd.noise_sd, (n, max(k_non, 1)))
        u_diag = rng.random((n, max(k_non, 1)))
        u_fac = rng.random((n, max(k_non, 1)))
        diag_cuts = np.cumsum(diag_probs)
        diag_cuts[-1] = 1.0
        fac_cuts = np.cumsum(np.asarray(noncvd.facility_probs, dtype=float))
        fac_cuts[-1] = 1.0
        for i, p in enumerate(population):
            if used[i]:
                cost = float(amb_base[i] * math.exp(eps_amb[i]))
                records.append(ClaimRecord(
                    patient_id=p.patient_id, year=year, record_type="ambulatory",
                    facility=Facility.THC, diagnosis_class="CVD",
                    diagnosis_code="cvd_management", total_cost_rmb=cost,
                    oop_cost_rmb=plan.phi_pc * cost))
            for k in range(k_cvd):
                cost = float(cvd_base[i] * math.exp(eps_cvd[i, k]))
                records.append(ClaimRecord(
                    patient_id=p.patient_id, year=year, record_type="inpatient",
                    facility=p.facility_choice, diagnosis_class="CVD",
                    diagnosis_code="cvd_acute", total_cost_rmb=cost,
                    oop_cost_rmb=float(phi_hc[i]) * cost))
            if emit_noncvd[i]:
                for k in range(k_non):
                    cost = float(non_base[i] * math.exp(eps_non[i, k]))
                    diag = diag_names[int(np.searchsorted(diag_cuts, u_diag[i, k], side="right"))]
                    fac = Facility(int(np.searchsorted(fac_cuts, u_fac[i, k], side="right")) + 1)
                    records.append(ClaimRecord(
                        patient_id=p.patient_id, year=year, record_type="inpatient",
                        facility=fac, diagnosis_class="Other", diagnosis_code=diag,
                        total_cost_rmb=cost, oop_cost_rmb=noncvd.oop_share * cost))
    return records


def simulate_policy_shock(population: Sequence[PatientProfile], cp: CostParams,
                          pp: PreferenceParams, pre_plan: InsurancePlan,
                          post_plan: InsurancePlan, seed: int,
                          years: Sequence[int] = (2019, 2020),
                          severity_labels: Union[Mapping[str, str], None] = None
                          ) -> pd.DataFrame:
    """Two-period panel of choices around an insurance change.

    Period one draws choices under ``pre_plan``, period two independently
    under ``post_plan``; preferences and severities are held fixed, so the
    only systematic change across periods is the plan. Returns one row per
    patient-year with the columns the difference-in-differences analysis
    consumes (plus demographics); ``severity_labels`` optionally attaches a
    severity-category column for stratified specifications.
    """
    if len(years) != 2:
        raise ValueError("the policy-shock panel is two-period by construction")
    rng = seed_stream(seed, "shock")
    rows = []
    for period, (year, plan) in enumerate(zip(years, (pre_plan, post_plan))):
        sigma = choice_probability(_utilities(population, cp, pp, plan))
        draws = rng.random(len(population)) < sigma
        for p, d in zip(population, draws):
            row = {
                "patient_id": p.patient_id,
                "year": int(year),
                "post": period,
                "used_ambulatory": int(bool(d)),
                "disadvantaged": int(p.disadvantaged),
                "poor_household": int(p.poor_household),
                "distant": int(p.distant),
                "male": int(p.male),
                "high_income": int(p.high_income),
                "minority": int(p.minority),
                "rural_hukou": int(p.rural_hukou),
                "urban": int(p.urban),
                "age": float(p.age),
                "theta": p.theta.theta,
            }
            if severity_labels is not None:
                row["severity_category"] = severity_labels[p.patient_id]
            rows.append(row)
    return pd.DataFrame(rows)


def population_to_frame(population: Sequence[PatientProfile]) -> pd.DataFrame:
    """Patients table in the on-disk schema (severity stays out of it;
    estimation must reconstruct severity from claims)."""
    return pd.DataFrame([
        {
            "patient_id": p.patient_id,
            "age": p.age,
            "male": int(p.male),
            "minority": int(p.minority),
            "urban": int(p.urban),
            "rural_hukou": int(p.rural_hukou),
            "distance_km": p.distance_km,
            "low_income": int(p.poor_household),
            "poor_household": int(p.poor_household),
            "distant": int(p.distant),
            "disadvantaged": int(p.disadvantaged),
            "high_income": int(p.high_income),
            "facility_choice": int(p.facility_choice),
            "used_ambulatory": "" if p.used_ambulatory is None else int(p.used_ambulatory),
        }
        for p in population
    ])
