"""Policy counterfactuals: utilization, cost, welfare, and fiscal cost.

A scenario perturbs the insurance plan (cost-sharing rates) and/or travel
costs for a targeted subpopulation, holding preferences, severities, and
facility choices fixed. The engine recomputes each targeted patient's net
utility and choice probability under the new prices and aggregates three
metrics over the targeted group:

* use share: mean predicted probability (plus the observed-choice-weighted
  ratio, which needs baseline decisions and is reported for reference);
* expected healthcare cost: probability-weighted total cost across the
  use / no-use branches, in normalized units and RMB;
* welfare: mean of probability times net utility.

Absolute and percentage changes against the baseline are reported under
both percentage bases (baseline-denominated and counterfactual-denominated)
because the two conventions answer different questions and published
comparisons mix them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence, Union

import numpy as np

from .model import (
    CostParams,
    InsurancePlan,
    PatientProfile,
    PreferenceParams,
    choice_probability,
    gamma_for,
    insured_utility_terms,
    travel_cost_for,
)

# Named target groups a scenario can apply to.
TARGET_GROUPS: Mapping[str, Callable[[PatientProfile], bool]] = {
    "disadvantaged": lambda p: p.disadvantaged,
    "poor_household": lambda p: p.poor_household,
    "distant": lambda p: p.distant,
    "regular": lambda p: not p.disadvantaged,
    "all": lambda p: True,
}


@dataclass(frozen=True)
class PolicyScenario:
    """One policy experiment.

    ``phi_pc_delta`` shifts the ambulatory cost-sharing rate additively
    (e.g. -0.2), ``phi_hc_override`` replaces hospitalization cost-sharing
    per group (e.g. {"poor": 0.41} to remove the assistance discount), and
    ``travel_subsidy_rmb`` reimburses travel up to the subsidy. The policy
    applies to patients passing ``applies_to`` (a named group or a
    predicate); everyone else keeps baseline prices. Metrics aggregate over
    the same targeted group.
    """

    label: str
    phi_pc_delta: float = 0.0
    phi_hc_override: Union[Mapping[str, float], None] = None
    travel_subsidy_rmb: float = 0.0
    applies_to: Union[str, Callable[[PatientProfile], bool]] = "disadvantaged"

    def __post_init__(self):
        if self.travel_subsidy_rmb < 0:
            raise ValueError("travel_subsidy_rmb must be nonnegative")
        if self.phi_hc_override is not None:
            unknown = set(self.phi_hc_override) - {"poor", "regular"}
            if unknown:
                raise ValueError(f"phi_hc_override has unknown groups: {sorted(unknown)}")
            for grp, v in self.phi_hc_override.items():
                if not (0.0 < v <= 1.0):
                    raise ValueError(f"phi_hc_override[{grp!r}] must lie in (0, 1], got {v!r}")
        if isinstance(self.applies_to, str) and self.applies_to not in TARGET_GROUPS:
            raise ValueError(
                f"applies_to must be one of {sorted(TARGET_GROUPS)} or a predicate, "
                f"got {self.applies_to!r}")

    def targets(self, p: PatientProfile) -> bool:
        if isinstance(self.applies_to, str):
            return TARGET_GROUPS[self.applies_to](p)
        return self.applies_to(p)


@dataclass(frozen=True)
class ScenarioOutcome:
    """Aggregated metrics for one scenario over its targeted group.

    ``use_share`` is the mean predicted probability;
    ``use_share_paper_formula`` re-weights by baseline observed decisions
    (NaN when no decisions exist). ``diffs_vs_baseline`` maps each metric
    to its absolute change and percentage changes under both bases; it is
    None for the baseline outcome itself. ``fiscal_cost_rmb_per_head`` is
    None for scenarios with no subsidy-shaped component.
    """

    label: str
    n_targeted: int
    use_share: float
    use_share_paper_formula: float
    expected_cost_norm: float
    expected_cost_rmb: float
    welfare: float
    fiscal_cost_rmb_per_head: Union[float, None] = None
    diffs_vs_baseline: Union[dict, None] = None


def to_rmb(value_norm: float, money_scale_rmb: float) -> float:
    """Convert a normalized money amount into RMB."""
    return value_norm * money_scale_rmb


def utility_under(p: PatientProfile, cp: CostParams, pp: PreferenceParams,
                  plan: InsurancePlan, travel: Union[float, None] = None) -> float:
    """Insured net utility, optionally at an overridden travel cost."""
    if travel is None:
        travel = travel_cost_for(p, pp)
    return float(insured_utility_terms(
        p.theta.theta, cp.s(p.facility_choice), gamma_for(p, pp), travel,
        plan.phi_pc, plan.phi_hc(p.poor_household), cp))


def predicted_share(population: Sequence[PatientProfile], cp: CostParams,
                    pp: PreferenceParams, plan: InsurancePlan) -> tuple:
    """Mean predicted use probability and the observed-decision ratio.

    The second measure is sum(d * sigma) / sum(d * sigma + (1-d)(1-sigma)):
    predicted probability mass on the decisions actually taken,
    renormalized. It needs observed decisions, so it comes back NaN when
    any are missing.
    """
    if len(population) == 0:
        raise ValueError("empty population")
    sigma = np.array([choice_probability(utility_under(p, cp, pp, plan))
                      for p in population])
    mean_sigma = float(np.mean(sigma))
    d = np.array([np.nan if p.used_ambulatory is None else float(p.used_ambulatory)
                  for p in population])
    if np.isnan(d).any():
        return mean_sigma, float("nan")
    den = float(np.sum(d * sigma + (1.0 - d) * (1.0 - sigma)))
    paper = float(np.sum(d * sigma)) / den if den > 0 else float("nan")
    return mean_sigma, paper


def expected_cost(p: PatientProfile, cp: CostParams, pp: PreferenceParams,
                  plan: InsurancePlan) -> float:
    """Probability-weighted total healthcare cost, normalized units.

    With probability sigma the patient uses ambulatory care (discounted
    hospitalization plus the ambulatory bill); otherwise hospitalization
    arrives at full severity. Total cost, not out-of-pocket: cost-sharing
    moves choices, not the resource cost of the branches.
    """
    sigma = choice_probability(utility_under(p, cp, pp, plan))
    return _branch_cost(p.theta.theta, cp.s(p.facility_choice), sigma, cp)


def welfare(p: PatientProfile, cp: CostParams, pp: PreferenceParams,
            plan: InsurancePlan) -> float:
    """Choice-probability-weighted net utility, sigma * v."""
    v = utility_under(p, cp, pp, plan)
    return choice_probability(v) * v


def _branch_cost(theta, s, sigma, cp: CostParams):
    with_care = s * (cp.effectiveness * theta) ** cp.beta + theta ** cp.alpha * cp.p_ratio
    without = s * theta ** cp.beta
    return sigma * with_care + (1.0 - sigma) * without


def apply_scenario(plan: InsurancePlan, pp: PreferenceParams, scenario: PolicyScenario,
                   money_scale_rmb: float) -> tuple:
    """Scenario prices: the perturbed plan and a travel-cost adjuster.

    Returns ``(plan', adjust)`` where ``adjust`` maps a patient's baseline
    travel cost (normalized units) to its subsidized value, floored at
    zero. Raises when the shifted ambulatory cost-sharing leaves (0, 1].
    """
    phi_pc = plan.phi_pc + scenario.phi_pc_delta
    if phi_pc <= 0.0:
        raise ValueError(
            f"scenario {scenario.label!r}: ambulatory cost-sharing "
            f"{plan.phi_pc} + {scenario.phi_pc_delta} leaves (0, 1]")
    if phi_pc > 1.0:
        raise ValueError(
            f"scenario {scenario.label!r}: ambulatory cost-sharing rises above 1")
    override = scenario.phi_hc_override or {}
    new_plan = InsurancePlan(
        phi_pc=phi_pc,
        phi_hc_poor=override.get("poor", plan.phi_hc_poor),
        phi_hc_regular=override.get("regular", plan.phi_hc_regular),
    )
    reduction = scenario.travel_subsidy_rmb / money_scale_rmb

    def adjust(travel_norm: float) -> float:
        return max(travel_norm - reduction, 0.0)

    return new_plan, adjust


def _metrics(population, cp, pp, plan, scenario, plan_adjust, baseline_d, mask):
    """Share/cost/welfare aggregated over ``mask``.

    ``scenario`` None evaluates baseline prices for everyone; otherwise
    targeted patients get the scenario prices from ``plan_adjust``.
    """
    n = len(population)
    sigma = np.empty(n)
    v = np.empty(n)
    theta = np.array([p.theta.theta for p in population])
    s = np.array([cp.s(p.facility_choice) for p in population])
    for i, p in enumerate(population):
        if scenario is not None and scenario.targets(p):
            plan2, adjust = plan_adjust
            v[i] = utility_under(p, cp, pp, plan2, travel=adjust(travel_cost_for(p, pp)))
        else:
            v[i] = utility_under(p, cp, pp, plan)
        sigma[i] = choice_probability(v[i])
    cost = _branch_cost(theta, s, sigma, cp)

    d = baseline_d[mask]
    sg = sigma[mask]
    if np.isnan(d).any():
        paper = float("nan")
    else:
        den = float(np.sum(d * sg + (1.0 - d) * (1.0 - sg)))
        paper = float(np.sum(d * sg)) / den if den > 0 else float("nan")
    return {
        "n": int(mask.sum()),
        "use_share": float(np.mean(sg)),
        "use_share_paper_formula": paper,
        "expected_cost_norm": float(np.mean(cost[mask])),
        "welfare": float(np.mean((sigma * v)[mask])),
    }


def _diff_entry(base: float, cf: float) -> dict:
    change = cf - base
    return {
        "absolute": change,
        "pct_base_baseline": 100.0 * change / abs(base) if base != 0 else float("nan"),
        "pct_base_counterfactual": 100.0 * change / abs(cf) if cf != 0 else float("nan"),
    }


def fiscal_cost(population: Sequence[PatientProfile], cp: CostParams,
                pp: PreferenceParams, plan: InsurancePlan,
                scenario: PolicyScenario) -> float:
    """Government outlay per targeted head, RMB.

    A cost-sharing cut makes the insurer pick up the cut share of each
    user's ambulatory bill; a travel subsidy pays out to each user. Both
    are weighted by the post-policy use probability.
    """
    plan2, adjust = apply_scenario(plan, pp, scenario, cp.money_scale_rmb)
    targeted = [p for p in population if scenario.targets(p)]
    if not targeted:
        raise ValueError("no patients in the targeted group")
    total = 0.0
    for p in targeted:
        sigma = choice_probability(
            utility_under(p, cp, pp, plan2, travel=adjust(travel_cost_for(p, pp))))
        amb_rmb = p.theta.theta ** cp.alpha * cp.p_ratio * cp.money_scale_rmb
        total += sigma * (-scenario.phi_pc_delta * amb_rmb + scenario.travel_subsidy_rmb)
    return total / len(targeted)


def run_scenario(population: Sequence[PatientProfile], cp: CostParams,
                 pp: PreferenceParams, plan: InsurancePlan,
                 scenario: Union[PolicyScenario, None],
                 welfare_pct_denominator: Union[float, None] = None) -> ScenarioOutcome:
    """Evaluate one scenario against the baseline on its targeted group.

    ``scenario=None`` evaluates the baseline itself over the disadvantaged
    group; the outcome then carries no diffs. ``welfare_pct_denominator``
    optionally adds a custom-base percentage for the welfare change, since
    published welfare percentages follow no single documented base.
    """
    if len(population) == 0:
        raise ValueError("empty population")
    baseline_d = np.array([np.nan if p.used_ambulatory is None else float(p.used_ambulatory)
                           for p in population])
    targets = (lambda p: p.disadvantaged) if scenario is None else scenario.targets
    mask = np.array([targets(p) for p in population])
    if not mask.any():
        raise ValueError("no patients in the targeted group")

    base = _metrics(population, cp, pp, plan, None, None, baseline_d, mask)
    if scenario is None:
        return ScenarioOutcome(
            label="baseline",
            n_targeted=base["n"],
            use_share=base["use_share"],
            use_share_paper_formula=base["use_share_paper_formula"],
            expected_cost_norm=base["expected_cost_norm"],
            expected_cost_rmb=to_rmb(base["expected_cost_norm"], cp.money_scale_rmb),
            welfare=base["welfare"],
        )

    plan_adjust = apply_scenario(plan, pp, scenario, cp.money_scale_rmb)
    cf = _metrics(population, cp, pp, plan, scenario, plan_adjust, baseline_d, mask)
    diffs = {
        "use_share": _diff_entry(base["use_share"], cf["use_share"]),
        "expected_cost_norm": _diff_entry(base["expected_cost_norm"],
                                          cf["expected_cost_norm"]),
        "expected_cost_rmb": _diff_entry(
            to_rmb(base["expected_cost_norm"], cp.money_scale_rmb),
            to_rmb(cf["expected_cost_norm"], cp.money_scale_rmb)),
        "welfare": _diff_entry(base["welfare"], cf["welfare"]),
    }
    if welfare_pct_denominator is not None:
        change = cf["welfare"] - base["welfare"]
        diffs["welfare"]["pct_base_custom"] = 100.0 * change / abs(welfare_pct_denominator)

    has_subsidy_component = scenario.phi_pc_delta != 0.0 or scenario.travel_subsidy_rmb > 0.0
    fiscal = fiscal_cost(population, cp, pp, plan, scenario) if has_subsidy_component else None
    return ScenarioOutcome(
        label=scenario.label,
        n_targeted=cf["n"],
        use_share=cf["use_share"],
        use_share_paper_formula=cf["use_share_paper_formula"],
        expected_cost_norm=cf["expected_cost_norm"],
        expected_cost_rmb=to_rmb(cf["expected_cost_norm"], cp.money_scale_rmb),
        welfare=cf["welfare"],
        fiscal_cost_rmb_per_head=fiscal,
        diffs_vs_baseline=diffs,
    )
