"""Command-line pipeline: simulate, estimate, did, counterfactual, curves.

Every command computes its results fully before writing anything, writes
each file atomically, and finishes with a manifest recording inputs,
outputs, seeds, and digests. All errors exit nonzero with a message on
stderr and leave no partial files behind.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from collections import Counter, defaultdict
from dataclasses import asdict, replace

import numpy as np
import pandas as pd

from . import __version__
from .counterfactual import run_scenario
from .dataio import (
    ConfigError,
    RunManifest,
    atomic_write_text,
    claims_to_frame,
    cost_params_from_dict,
    cost_params_to_dict,
    frame_to_claims,
    load_bundled_json,
    load_json_file,
    plan_from_dict,
    plan_to_dict,
    population_config_from_dict,
    pref_params_from_dict,
    pref_params_to_dict,
    profiles_from_tables,
    read_claims_csv,
    read_patients_csv,
    scenario_from_dict,
    sha256_of_text,
    write_frame_csv,
    write_json,
)
from .estimation import bootstrap_se, did_analysis, estimate_cost_params, fit_logit_mle
from .model import CostParams, CurveSeries, InsurancePlan, utility_curve
from .severity import (
    SeverityConfig,
    assign_theta,
    aux_residuals,
    classify_discrete,
    preference_discounted_theta,
)
from .synth import (
    generate_population,
    population_to_frame,
    simulate_choices,
    simulate_costs,
    simulate_policy_shock,
)

SEVERITY_MEASURES = ("discrete", "pref", "mod-severe", "five-bin")


# ---------------------------------------------------------------------------
# Shared plumbing
# ---------------------------------------------------------------------------


class _OutputSet:
    """Collects rendered file contents, then writes them all atomically."""

    def __init__(self, out_dir: str):
        self.out_dir = out_dir
        self._files: dict = {}

    def add_json(self, name: str, obj):
        self._files[name] = json.dumps(obj, indent=2, sort_keys=True) + "\n"

    def add_frame(self, name: str, frame: pd.DataFrame):
        self._files[name] = frame.to_csv(index=False, lineterminator="\n")

    def flush(self, command: str, config_digest: str, seed, inputs: dict,
              snapshot: dict, summary: dict, t0: float):
        import os

        digests = {name: sha256_of_text(text) for name, text in sorted(self._files.items())}
        for name, text in sorted(self._files.items()):
            atomic_write_text(os.path.join(self.out_dir, name), text)
        manifest = RunManifest(
            command=command,
            config_digest=config_digest,
            master_seed=seed,
            artifact_version=__version__,
            inputs=inputs,
            outputs=digests,
            wall_clock_seconds=time.monotonic() - t0,
            parameter_snapshot=snapshot,
            summary=summary,
        )
        write_json(os.path.join(self.out_dir, "manifest.json"), manifest.to_dict())


def _digest_of_obj(obj) -> str:
    return sha256_of_text(json.dumps(obj, sort_keys=True, default=str))


def _regression_dict(res) -> dict:
    out = {
        "coefficients": dict(res.coefficients),
        "robust_se": dict(res.robust_se),
        "adj_r2": res.adj_r2,
        "n_obs": res.n_obs,
    }
    if res.loglik is not None:
        out["loglik"] = res.loglik
    if res.marginal_effects is not None:
        out["marginal_effects"] = dict(res.marginal_effects)
        out["marginal_se"] = dict(res.marginal_se)
    return out


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


def _severity_labels_for(population, category_theta: dict) -> dict:
    """Label each patient by matching its severity to a configured level."""
    by_level = {float(v): k for k, v in category_theta.items()}
    labels = {}
    for p in population:
        for level, name in by_level.items():
            if abs(p.theta.theta - level) < 1e-9:
                labels[p.patient_id] = name
                break
    return labels


def cmd_simulate(args) -> int:
    t0 = time.monotonic()
    raw = load_json_file(args.config)
    cfg = population_config_from_dict(raw)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)

    population = generate_population(cfg)
    population = simulate_choices(population, cfg.true_cost_params, cfg.true_pref_params,
                                  cfg.plan, seed=cfg.seed)
    records = simulate_costs(population, cfg.true_cost_params, cfg.plan, cfg.cost_noise_sd,
                             seed=cfg.seed, years=cfg.years,
                             cvd_admissions_per_year=cfg.cvd_admissions_per_year,
                             noncvd=cfg.noncvd)

    out = _OutputSet(args.out)
    patients = population_to_frame(population)
    out.add_frame("patients.csv", patients)
    out.add_frame("claims.csv", claims_to_frame(records))

    shock = raw.get("policy_shock")
    if shock is not None:
        post_plan = plan_from_dict(shock["post_plan"], context="policy_shock.post_plan")
        shock_years = tuple(int(y) for y in shock.get("years", (2019, 2020)))
        labels = None
        if cfg.severity.kind == "discrete":
            labels = _severity_labels_for(population, cfg.severity.theta)
        panel = simulate_policy_shock(population, cfg.true_cost_params, cfg.true_pref_params,
                                      pre_plan=cfg.plan, post_plan=post_plan, seed=cfg.seed,
                                      years=shock_years, severity_labels=labels)
        out.add_frame("panel.csv", panel)

    truth = {
        "seed": cfg.seed,
        "cost_params": cost_params_to_dict(cfg.true_cost_params),
        "pref_params": pref_params_to_dict(cfg.true_pref_params),
        "plan": plan_to_dict(cfg.plan),
        "severity_kind": cfg.severity.kind,
        "theta_by_patient": {p.patient_id: p.theta.theta for p in population},
    }
    if cfg.severity.kind == "discrete":
        truth["category_theta"] = dict(cfg.severity.theta)
    out.add_json("truth.json", truth)

    flags = ("poor_household", "distant", "disadvantaged", "male", "minority",
             "rural_hukou", "high_income", "urban")
    summary = {
        "n_patients": len(population),
        "n_claims": len(records),
        "realized_shares": {f: float(patients[f].mean()) for f in flags},
        "use_share": float(patients["used_ambulatory"].astype(float).mean()),
        "use_share_disadvantaged": float(
            patients.loc[patients["disadvantaged"] == 1, "used_ambulatory"].astype(float).mean()),
    }
    out.flush("simulate", _digest_of_obj(raw), cfg.seed,
              inputs={"config": args.config}, snapshot={
                  "cost_params": cost_params_to_dict(cfg.true_cost_params),
                  "pref_params": pref_params_to_dict(cfg.true_pref_params),
                  "plan": plan_to_dict(cfg.plan),
              }, summary=summary, t0=t0)
    return 0


# ---------------------------------------------------------------------------
# estimate
# ---------------------------------------------------------------------------


def _severity_config(overrides: dict) -> SeverityConfig:
    kwargs = {}
    for key in ("moderate_threshold_rmb", "percentile", "enrollment_years",
                "eligible_diagnoses", "frequency_weights"):
        if key in overrides:
            kwargs[key] = overrides[key]
    if "enrollment_years" in kwargs and kwargs["enrollment_years"] is not None:
        kwargs["enrollment_years"] = int(kwargs["enrollment_years"])
    if "eligible_diagnoses" in kwargs and kwargs["eligible_diagnoses"] is not None:
        kwargs["eligible_diagnoses"] = frozenset(kwargs["eligible_diagnoses"])
    return SeverityConfig(**kwargs)


def _continuous_index(records, patients: pd.DataFrame, cfg: SeverityConfig) -> dict:
    """Preference-discounted continuous severity for every measurable patient."""
    cov = patients[["patient_id", "age", "male", "minority", "urban"]]
    # constant demographics carry no information and would only break the
    # auxiliary regression's rank
    names = tuple(c for c in ("age", "male", "minority", "urban")
                  if patients[c].nunique() > 1)
    residuals = aux_residuals(records, cov, covariate_names=names, cfg=cfg)
    return {pid: sev.theta for pid, sev in preference_discounted_theta(residuals, cfg).items()}


def severity_thetas(measure: str, records, patients: pd.DataFrame,
                    category_theta: dict, cfg: SeverityConfig) -> tuple:
    """Per-patient severity under one measure.

    Returns ``(theta_by_patient, info)``. Depending on the measure, some
    patients carry no severity (Mild under mod-severe, or no usable
    hospitalization records under the continuous measures) and are simply
    absent from the mapping.
    """
    ids = [str(pid) for pid in patients["patient_id"]]
    if measure in ("discrete", "mod-severe"):
        by_patient = defaultdict(list)
        for rec in records:
            by_patient[rec.patient_id].append(rec)
        labels = {pid: classify_discrete(by_patient.get(pid, []), cfg).value for pid in ids}
        counts = Counter(labels.values())
        theta = {pid: float(category_theta[lab]) for pid, lab in labels.items()
                 if measure == "discrete" or lab != "Mild"}
        info = {"measure": measure, "category_counts": dict(sorted(counts.items())),
                "theta_by_category": {k: float(v) for k, v in category_theta.items()},
                "n_patients_used": len(theta)}
        return theta, info

    index = _continuous_index(records, patients, cfg)
    if measure == "pref":
        info = {"measure": measure, "n_patients_used": len(index),
                "n_patients_without_measure": len(ids) - len(index)}
        return index, info

    if measure == "five-bin":
        series = pd.Series(index, dtype=float)
        bins = pd.qcut(series, 5, labels=False, duplicates="drop")
        theta = {}
        bin_levels = {}
        for b in sorted(bins.unique()):
            members = series[bins == b]
            level = assign_theta(f"bin{int(b) + 1}", members.to_numpy(), cfg).theta
            bin_levels[f"bin{int(b) + 1}"] = level
            for pid in members.index:
                theta[pid] = level
        info = {"measure": measure, "theta_by_bin": bin_levels,
                "n_patients_used": len(theta),
                "n_patients_without_measure": len(ids) - len(theta)}
        return theta, info

    raise ConfigError(f"unknown severity measure {measure!r} "
                      f"(expected one of {SEVERITY_MEASURES})")


def _plan_from_claims(claims: pd.DataFrame, patients: pd.DataFrame) -> InsurancePlan:
    """Average observed cost-sharing rates out of the claims themselves."""
    share = claims["oop_cost_rmb"] / claims["total_cost_rmb"]
    amb = claims["record_type"] == "ambulatory"
    cvd_inp = (claims["record_type"] == "inpatient") & (claims["diagnosis_class"] == "CVD")
    if not amb.any() or not cvd_inp.any():
        raise ValueError("need both ambulatory and cardiovascular inpatient claims "
                         "to measure cost-sharing rates")
    poor = patients.set_index("patient_id")["poor_household"].astype(bool)
    is_poor = claims["patient_id"].map(poor).astype(bool)
    for group, mask in (("poor", cvd_inp & is_poor), ("regular", cvd_inp & ~is_poor)):
        if not mask.any():
            raise ValueError(f"no cardiovascular inpatient claims for {group} patients; "
                             "cannot measure their cost-sharing rate")
    return InsurancePlan(
        phi_pc=float(share[amb].mean()),
        phi_hc_poor=float(share[cvd_inp & is_poor].mean()),
        phi_hc_regular=float(share[cvd_inp & ~is_poor].mean()),
    )


def cmd_estimate(args) -> int:
    import os

    t0 = time.monotonic()
    overrides = load_json_file(args.config) if args.config else {}
    bundled = load_bundled_json("published_params.json")
    category_theta = overrides.get("category_theta", bundled["category_theta"])
    cfg = _severity_config(overrides)

    patients_path = os.path.join(args.data, "patients.csv")
    claims_path = os.path.join(args.data, "claims.csv")
    patients = read_patients_csv(patients_path)
    claims = read_claims_csv(claims_path)
    records = frame_to_claims(claims)

    theta_by_patient, severity_info = severity_thetas(
        args.severity, records, patients, category_theta, cfg)
    if not theta_by_patient:
        raise ValueError(f"severity measure {args.severity!r} assigned no severities")

    keep = claims["patient_id"].astype(str).isin(theta_by_patient)
    amb = claims[(claims["record_type"] == "ambulatory") & keep]
    inp = claims[(claims["record_type"] == "inpatient") & keep]
    cp, step1 = estimate_cost_params(amb, inp, theta_by_patient, patients)

    plan = _plan_from_claims(claims, patients)
    profiles = profiles_from_tables(patients, theta_by_patient)
    observed = [p for p in profiles if p.used_ambulatory is not None]
    if not observed:
        raise ValueError("no patients with observed ambulatory-use choices")
    fit = fit_logit_mle(observed, cp, plan, rural_minority=args.rural_minority,
                        seed=args.seed)
    if args.bootstrap > 0:
        fit = bootstrap_se(observed, cp, plan, fit, B=args.bootstrap, seed=args.seed)

    params_doc = {
        "cost_params": cost_params_to_dict(cp),
        "pref_params": pref_params_to_dict(fit.params),
        "plan": plan_to_dict(plan),
        "category_theta": {k: float(v) for k, v in category_theta.items()},
        "step1": {name: _regression_dict(res) for name, res in step1.items()},
        "step2": {
            "estimates": {name: float(val) for name, val in
                          zip(fit.param_names, fit.estimates)},
            "bootstrap_se": {k: float(v) for k, v in fit.bootstrap_se.items()},
            "n_bootstrap": fit.n_bootstrap,
            "loglik": fit.loglik,
            "converged": fit.converged,
            "grad_norm": fit.grad_norm,
            "n_obs": fit.n_obs,
        },
        "severity": severity_info,
    }
    out = _OutputSet(args.out)
    out.add_json("params.json", params_doc)
    out.flush("estimate", _digest_of_obj(overrides), args.seed,
              inputs={"patients": patients_path, "claims": claims_path,
                      "config": args.config or "(defaults)"},
              snapshot={"severity_measure": args.severity,
                        "rural_minority": args.rural_minority,
                        "bootstrap": args.bootstrap},
              summary={"alpha": cp.alpha, "beta": cp.beta, "effectiveness": cp.effectiveness,
                       "loglik": fit.loglik, "n_step2": fit.n_obs},
              t0=t0)
    return 0


# ---------------------------------------------------------------------------
# did
# ---------------------------------------------------------------------------


def cmd_did(args) -> int:
    import os

    t0 = time.monotonic()
    panel_path = os.path.join(args.data, "panel.csv")
    if not os.path.exists(panel_path):
        raise FileNotFoundError(
            f"{panel_path} not found; run simulate with a policy_shock section to produce "
            "a two-period panel")
    panel = pd.read_csv(panel_path)

    demographics = [c for c in ("male", "age", "high_income", "minority",
                                "rural_hukou", "urban") if c in panel.columns]
    has_severity = "severity_category" in panel.columns

    specs = {}
    basic = did_analysis(panel)
    specs["basic"] = _regression_dict(basic)
    controlled = did_analysis(panel, demographics=demographics,
                              severity_col="severity_category" if has_severity else None)
    specs["with_controls"] = _regression_dict(controlled)
    if has_severity:
        sub = panel[panel["severity_category"].isin(["Mild", "Moderate"])]
        specs["mild_moderate_only"] = _regression_dict(
            did_analysis(sub, demographics=demographics, severity_col="severity_category"))
    else:
        specs["mild_moderate_only"] = None

    doc = {
        "interaction_term": "disadvantaged_x_post",
        "specifications": specs,
        "interaction_ame": {
            name: (spec["marginal_effects"]["disadvantaged_x_post"]
                   if spec is not None else None)
            for name, spec in specs.items()
        },
    }
    out = _OutputSet(args.out)
    out.add_json("did.json", doc)
    out.flush("did", _digest_of_obj({"data": args.data}), None,
              inputs={"panel": panel_path},
              snapshot={"demographics": demographics,
                        "severity_controls": has_severity},
              summary={"interaction_ame": doc["interaction_ame"]}, t0=t0)
    return 0


# ---------------------------------------------------------------------------
# counterfactual
# ---------------------------------------------------------------------------


def _load_params_doc(path: str):
    if path is None or path == "published":
        return load_bundled_json("published_params.json"), "published"
    return load_json_file(path), path


def cmd_counterfactual(args) -> int:
    import os

    t0 = time.monotonic()
    params_raw, params_src = _load_params_doc(args.params)
    for key in ("cost_params", "pref_params", "plan"):
        if key not in params_raw:
            raise ConfigError(f"parameter file {params_src} lacks section {key!r}")
    cp = cost_params_from_dict(params_raw["cost_params"])
    pp = pref_params_from_dict(params_raw["pref_params"])
    plan = plan_from_dict(params_raw["plan"])
    category_theta = params_raw.get(
        "category_theta", load_bundled_json("published_params.json")["category_theta"])

    patients_path = os.path.join(args.data, "patients.csv")
    claims_path = os.path.join(args.data, "claims.csv")
    patients = read_patients_csv(patients_path)
    records = frame_to_claims(read_claims_csv(claims_path))
    cfg = SeverityConfig()
    theta_by_patient, severity_info = severity_thetas(
        args.severity, records, patients, category_theta, cfg)
    population = profiles_from_tables(patients, theta_by_patient)
    if not population:
        raise ValueError("no patients with severities to evaluate scenarios on")

    scen_raw = (load_json_file(args.scenario) if args.scenario
                else load_bundled_json("scenarios_default.json"))
    scenarios = [scenario_from_dict(s, context=f"scenarios[{i}]")
                 for i, s in enumerate(scen_raw.get("scenarios", []))]
    welfare_base = scen_raw.get("welfare_pct_denominator")

    baseline = run_scenario(population, cp, pp, plan, None)
    outcomes = [run_scenario(population, cp, pp, plan, s,
                             welfare_pct_denominator=welfare_base) for s in scenarios]

    rows = []
    metrics = ("use_share", "expected_cost_norm", "expected_cost_rmb", "welfare")
    for outcome in outcomes:
        for metric in metrics:
            diff = outcome.diffs_vs_baseline[metric]
            rows.append({
                "scenario": outcome.label,
                "metric": metric,
                "baseline": getattr(baseline, metric),
                "counterfactual": getattr(outcome, metric),
                "change": diff["absolute"],
                "pct_base_baseline": diff["pct_base_baseline"],
                "pct_base_counterfactual": diff["pct_base_counterfactual"],
            })
    table = pd.DataFrame(rows, columns=["scenario", "metric", "baseline", "counterfactual",
                                        "change", "pct_base_baseline",
                                        "pct_base_counterfactual"])

    doc = {
        "parameters_from": params_src,
        "severity": severity_info,
        "baseline": asdict(baseline),
        "scenarios": [asdict(o) for o in outcomes],
    }
    out = _OutputSet(args.out)
    out.add_json("counterfactual.json", doc)
    out.add_frame("counterfactual.csv", table)
    out.flush("counterfactual", _digest_of_obj(scen_raw), None,
              inputs={"patients": patients_path, "claims": claims_path,
                      "params": params_src,
                      "scenarios": args.scenario or "(bundled defaults)"},
              snapshot={"cost_params": cost_params_to_dict(cp),
                        "pref_params": pref_params_to_dict(pp),
                        "plan": plan_to_dict(plan)},
              summary={"baseline_use_share": baseline.use_share,
                       "scenario_use_shares": {o.label: o.use_share for o in outcomes}},
              t0=t0)
    return 0


# ---------------------------------------------------------------------------
# curves
# ---------------------------------------------------------------------------

FIGURE_DEFAULTS = {
    "grid": {"start": 0.01, "stop": 0.99, "num": 99},
    "series": [
        {"kind": "gamma", "label": "gamma=0.12", "gamma": 0.12},
        {"kind": "gamma", "label": "gamma=0", "gamma": 0.0},
        {"kind": "gamma", "label": "gamma=-0.04", "gamma": -0.04},
    ],
}


def cmd_curves(args) -> int:
    t0 = time.monotonic()
    raw = load_json_file(args.config) if args.config else FIGURE_DEFAULTS
    grid_spec = raw.get("grid", FIGURE_DEFAULTS["grid"])
    num = int(grid_spec.get("num", 99))
    if num < 1:
        raise ConfigError("config key grid.num: expected a positive integer")
    grid = np.linspace(float(grid_spec.get("start", 0.01)),
                       float(grid_spec.get("stop", 0.99)), num)
    series = []
    for i, s in enumerate(raw.get("series", [])):
        try:
            series.append(CurveSeries(
                kind=str(s.get("kind", "gamma")),
                label=str(s["label"]) if "label" in s else f"series{i}",
                gamma=float(s.get("gamma", 0.0)),
                ratio=float(s.get("ratio", 1.0)),
                value=float(s.get("value", 1.0)),
            ))
        except ValueError as exc:
            raise ConfigError(f"config key series[{i}]: {exc}")
    if not series:
        raise ConfigError("config key series: expected at least one entry")
    cp = (cost_params_from_dict(raw["cost_params"])
          if "cost_params" in raw else None)

    rows = utility_curve(grid, series, cp)
    frame = pd.DataFrame(rows, columns=["label", "theta", "utility"])
    out = _OutputSet(args.out)
    out.add_frame("curves.csv", frame)
    out.flush("curves", _digest_of_obj(raw), None,
              inputs={"config": args.config or "(figure defaults)"},
              snapshot={"n_series": len(series), "grid_points": num},
              summary={"labels": [s.label for s in series]}, t0=t0)
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="carechoice",
        description="Simulate, estimate, and run policy counterfactuals for the "
                    "ambulatory-vs-inpatient care choice model.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic claims dataset")
    p.add_argument("--config", required=True, help="population configuration JSON")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("estimate", help="run the two-step estimator on a dataset")
    p.add_argument("--data", required=True, help="directory with patients.csv and claims.csv")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", default=None, help="optional severity configuration JSON")
    p.add_argument("--severity", choices=SEVERITY_MEASURES, default="discrete",
                   help="severity measure used for both steps")
    p.add_argument("--bootstrap", type=int, default=0, metavar="B",
                   help="bootstrap replicates for choice-model standard errors")
    p.add_argument("--rural-minority", action="store_true",
                   help="add rural-residency and minority prevention coefficients")
    p.add_argument("--seed", type=int, default=0, help="seed for multistart and bootstrap")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("did", help="difference-in-differences on a two-period panel")
    p.add_argument("--data", required=True, help="directory with panel.csv")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_did)

    p = sub.add_parser("counterfactual", help="evaluate policy scenarios")
    p.add_argument("--data", required=True, help="directory with patients.csv and claims.csv")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--params", default=None,
                   help="params.json from estimate, or 'published' (default) for the "
                        "bundled published estimates")
    p.add_argument("--scenario", default=None,
                   help="scenario configuration JSON (default: bundled scenarios)")
    p.add_argument("--severity", choices=SEVERITY_MEASURES, default="discrete",
                   help="severity measure used to assign patient severities")
    p.set_defaults(func=cmd_counterfactual)

    p = sub.add_parser("curves", help="tabulate utility-vs-severity curves")
    p.add_argument("--config", default=None,
                   help="grid and series configuration JSON (default: the three-curve "
                        "prevention-weight figure)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_curves)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except BrokenPipeError:
        return 1
    except (ConfigError, ValueError, RuntimeError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
