"""Structural model of the trade-off between ambulatory and inpatient care.

The package simulates insured patients deciding whether to manage a chronic
condition through subsidized ambulatory care, estimates the model's cost and
preference parameters from claims data in two steps, and runs counterfactual
cost-sharing policies at fitted or published parameters.
"""

__version__ = "0.1.0"

from .model import (
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
    inpatient_cost,
    prevention_value_rmb,
    utility_curve,
    utility_insured,
    utility_uninsured,
    utility_variant,
)
from .severity import (
    ClaimRecord,
    SeverityCategory,
    SeverityConfig,
    assign_theta,
    aux_residuals,
    classify_discrete,
    preference_discounted_theta,
)
from .estimation import (
    LogitFit,
    RankDeficientError,
    RegressionResult,
    SeparationError,
    bootstrap_se,
    did_analysis,
    estimate_cost_params,
    fit_logit_mle,
    loglik_and_grad,
    ols,
    probit_fit,
)
from .synth import (
    GroupShares,
    NonCvdSpec,
    PopulationConfig,
    SeveritySpec,
    generate_population,
    seed_stream,
    simulate_choices,
    simulate_costs,
    simulate_policy_shock,
)
from .counterfactual import (
    PolicyScenario,
    ScenarioOutcome,
    expected_cost,
    fiscal_cost,
    predicted_share,
    run_scenario,
    to_rmb,
    welfare,
)

__all__ = [
    "__version__",
    "Baseline", "BiasedBelief", "CostParams", "CurveSeries", "Facility",
    "InsurancePlan", "PatientProfile", "PreferenceParams", "PresentBias",
    "Salience", "Severity", "ambulatory_cost", "benefit",
    "choice_probability", "demo_cost_params", "inpatient_cost",
    "prevention_value_rmb", "utility_curve", "utility_insured",
    "utility_uninsured", "utility_variant",
    "ClaimRecord", "SeverityCategory", "SeverityConfig", "assign_theta",
    "aux_residuals", "classify_discrete", "preference_discounted_theta",
    "LogitFit", "RankDeficientError", "RegressionResult", "SeparationError",
    "bootstrap_se", "did_analysis", "estimate_cost_params", "fit_logit_mle",
    "loglik_and_grad", "ols", "probit_fit",
    "GroupShares", "NonCvdSpec", "PopulationConfig", "SeveritySpec",
    "generate_population", "seed_stream", "simulate_choices",
    "simulate_costs", "simulate_policy_shock",
    "PolicyScenario", "ScenarioOutcome", "expected_cost", "fiscal_cost",
    "predicted_share", "run_scenario", "to_rmb", "welfare",
]
