"""On-disk formats: CSV schemas, JSON configs, and run manifests.

All writes are atomic (write to a temporary file, then rename into place),
so a failed command never leaves a partial file behind. CSV and JSON
rendering is deterministic: fixed column order, sorted JSON keys, repr
float formatting, newline line endings.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import dataclass, field
from importlib import resources
from typing import Mapping, Sequence, Union

import pandas as pd

from . import __version__
from .counterfactual import PolicyScenario
from .model import CostParams, Facility, InsurancePlan, PatientProfile, PreferenceParams, Severity
from .severity import ClaimRecord
from .synth import GroupShares, NonCvdSpec, PopulationConfig, SeveritySpec

PATIENT_COLUMNS = [
    "patient_id", "age", "male", "minority", "urban", "rural_hukou",
    "distance_km", "low_income", "poor_household", "distant", "disadvantaged",
    "high_income", "facility_choice", "used_ambulatory",
]
CLAIM_COLUMNS = [
    "patient_id", "year", "record_type", "facility_type", "diagnosis_class",
    "diagnosis_code", "total_cost_rmb", "oop_cost_rmb",
]

_FACILITY_NAMES = {f.name: f for f in Facility}


class ConfigError(ValueError):
    """Malformed configuration; the message names the key and expected type."""


# ---------------------------------------------------------------------------
# Atomic, deterministic writes
# ---------------------------------------------------------------------------


def atomic_write_text(path: str, text: str):
    """Write text atomically: no partial file is ever visible at ``path``."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", text=True)
    try:
        with os.fdopen(fd, "w", newline="\n") as handle:
            handle.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path: str, obj):
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_frame_csv(path: str, frame: pd.DataFrame):
    atomic_write_text(path, frame.to_csv(index=False, lineterminator="\n"))


def sha256_of_file(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def sha256_of_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# Patients and claims tables
# ---------------------------------------------------------------------------


def write_patients_csv(path: str, patients: pd.DataFrame):
    missing = set(PATIENT_COLUMNS) - set(patients.columns)
    if missing:
        raise ValueError(f"patients table lacks columns: {sorted(missing)}")
    write_frame_csv(path, patients[PATIENT_COLUMNS])


def read_patients_csv(path: str) -> pd.DataFrame:
    df = pd.read_csv(path)
    missing = set(PATIENT_COLUMNS) - set(df.columns)
    if missing:
        raise ValueError(f"{path}: missing columns: {sorted(missing)}")
    return df


def claims_to_frame(records: Sequence[ClaimRecord]) -> pd.DataFrame:
    return pd.DataFrame([
        {
            "patient_id": r.patient_id,
            "year": r.year,
            "record_type": r.record_type,
            "facility_type": int(r.facility),
            "diagnosis_class": r.diagnosis_class,
            "diagnosis_code": r.diagnosis_code,
            "total_cost_rmb": r.total_cost_rmb,
            "oop_cost_rmb": r.oop_cost_rmb,
        }
        for r in records
    ], columns=CLAIM_COLUMNS)


def frame_to_claims(frame: pd.DataFrame) -> list:
    missing = set(CLAIM_COLUMNS) - set(frame.columns)
    if missing:
        raise ValueError(f"claims table lacks columns: {sorted(missing)}")
    return [
        ClaimRecord(
            patient_id=str(row.patient_id),
            year=int(row.year),
            record_type=str(row.record_type),
            facility=Facility(int(row.facility_type)),
            diagnosis_class=str(row.diagnosis_class),
            diagnosis_code=str(row.diagnosis_code),
            total_cost_rmb=float(row.total_cost_rmb),
            oop_cost_rmb=float(row.oop_cost_rmb),
        )
        for row in frame.itertuples()
    ]


def write_claims_csv(path: str, records: Sequence[ClaimRecord]):
    write_frame_csv(path, claims_to_frame(records))


def read_claims_csv(path: str) -> pd.DataFrame:
    df = pd.read_csv(path)
    missing = set(CLAIM_COLUMNS) - set(df.columns)
    if missing:
        raise ValueError(f"{path}: missing columns: {sorted(missing)}")
    return df


def profiles_from_tables(patients: pd.DataFrame,
                         theta_by_patient: Mapping[str, object]) -> list:
    """Rebuild patient profiles from the patients table plus severities.

    Patients without a severity are skipped (some severity measures cover
    only patients with usable records). ``used_ambulatory`` may be missing
    (NaN) for populations whose choices are not simulated yet.
    """
    out = []
    for row in patients.itertuples():
        pid = str(row.patient_id)
        if pid not in theta_by_patient:
            continue
        th = theta_by_patient[pid]
        theta = th if isinstance(th, Severity) else Severity.from_unit_interval(float(th))
        used = row.used_ambulatory
        used_flag = None if pd.isna(used) or used == "" else bool(int(used))
        out.append(PatientProfile(
            patient_id=pid,
            theta=theta,
            facility_choice=Facility(int(row.facility_choice)),
            poor_household=bool(int(row.poor_household)),
            distant=bool(int(row.distant)),
            rural_hukou=bool(int(row.rural_hukou)),
            minority=bool(int(row.minority)),
            male=bool(int(row.male)),
            high_income=bool(int(row.high_income)),
            age=float(row.age),
            distance_km=float(row.distance_km),
            urban=bool(int(row.urban)),
            used_ambulatory=used_flag,
        ))
    return out


# ---------------------------------------------------------------------------
# Configuration parsing
# ---------------------------------------------------------------------------


def _expect(mapping: Mapping, key: str, kind, context: str, default=..., ):
    """Fetch ``mapping[key]`` checking its type; error messages name both."""
    kind_names = {
        "number": (int, float),
        "integer": int,
        "string": str,
        "mapping": dict,
        "sequence": (list, tuple),
        "boolean": bool,
    }
    if key not in mapping:
        if default is not ...:
            return default
        raise ConfigError(f"config key {context}.{key}: missing (expected {kind})")
    value = mapping[key]
    expected = kind_names[kind]
    if kind == "number" and isinstance(value, bool):
        raise ConfigError(f"config key {context}.{key}: expected number, got boolean")
    if kind == "integer" and isinstance(value, bool):
        raise ConfigError(f"config key {context}.{key}: expected integer, got boolean")
    if not isinstance(value, expected):
        raise ConfigError(
            f"config key {context}.{key}: expected {kind}, got {type(value).__name__}")
    return value


def cost_params_from_dict(d: Mapping, context: str = "cost_params") -> CostParams:
    s_mult_raw = _expect(d, "s_mult", "mapping", context, default=None)
    s_mult = None
    if s_mult_raw is not None:
        s_mult = {}
        for name, value in s_mult_raw.items():
            if name not in _FACILITY_NAMES:
                raise ConfigError(
                    f"config key {context}.s_mult: unknown facility {name!r} "
                    f"(expected one of {sorted(_FACILITY_NAMES)})")
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                raise ConfigError(f"config key {context}.s_mult.{name}: expected number")
            s_mult[_FACILITY_NAMES[name]] = float(value)
    try:
        return CostParams(
            alpha=float(_expect(d, "alpha", "number", context)),
            beta=float(_expect(d, "beta", "number", context)),
            effectiveness=d.get("effectiveness"),
            rho=d.get("rho"),
            s_mult=s_mult,
            p_ratio=float(_expect(d, "p_ratio", "number", context, default=1.0)),
            money_scale_rmb=float(_expect(d, "money_scale_rmb", "number", context, default=1.0)),
        )
    except ValueError as exc:
        raise ConfigError(f"config section {context}: {exc}")


def cost_params_to_dict(cp: CostParams) -> dict:
    return {
        "alpha": cp.alpha,
        "beta": cp.beta,
        "effectiveness": cp.effectiveness,
        "rho": cp.rho,
        "s_mult": {f.name: cp.s_mult[f] for f in sorted(cp.s_mult)},
        "p_ratio": cp.p_ratio,
        "money_scale_rmb": cp.money_scale_rmb,
    }


def pref_params_from_dict(d: Mapping, context: str = "pref_params") -> PreferenceParams:
    try:
        return PreferenceParams(
            gamma_h=float(_expect(d, "gamma_h", "number", context)),
            gamma_l=float(_expect(d, "gamma_l", "number", context)),
            t_b=float(_expect(d, "t_b", "number", context)),
            t_h=float(_expect(d, "t_h", "number", context, default=0.0)),
            t_m=float(_expect(d, "t_m", "number", context, default=0.0)),
            gamma_r=float(_expect(d, "gamma_r", "number", context, default=0.0)),
            gamma_m=float(_expect(d, "gamma_m", "number", context, default=0.0)),
            rural_minority=bool(_expect(d, "rural_minority", "boolean", context, default=False)),
        )
    except ValueError as exc:
        raise ConfigError(f"config section {context}: {exc}")


def pref_params_to_dict(pp: PreferenceParams) -> dict:
    return {
        "gamma_h": pp.gamma_h, "gamma_l": pp.gamma_l, "gamma_r": pp.gamma_r,
        "gamma_m": pp.gamma_m, "t_b": pp.t_b, "t_h": pp.t_h, "t_m": pp.t_m,
        "rural_minority": pp.rural_minority,
    }


def plan_from_dict(d: Mapping, context: str = "plan") -> InsurancePlan:
    phi_hc = _expect(d, "phi_hc", "mapping", context)
    for grp in ("poor", "regular"):
        if grp not in phi_hc:
            raise ConfigError(f"config key {context}.phi_hc.{grp}: missing (expected number)")
    try:
        return InsurancePlan(
            phi_pc=float(_expect(d, "phi_pc", "number", context)),
            phi_hc_poor=float(phi_hc["poor"]),
            phi_hc_regular=float(phi_hc["regular"]),
        )
    except ValueError as exc:
        raise ConfigError(f"config section {context}: {exc}")


def plan_to_dict(plan: InsurancePlan) -> dict:
    return {"phi_pc": plan.phi_pc,
            "phi_hc": {"poor": plan.phi_hc_poor, "regular": plan.phi_hc_regular}}


def population_config_from_dict(d: Mapping) -> PopulationConfig:
    gs_raw = _expect(d, "group_shares", "mapping", "config")
    try:
        shares = GroupShares(
            poor_household=float(_expect(gs_raw, "poor_household", "number", "group_shares")),
            distant=float(_expect(gs_raw, "distant", "number", "group_shares")),
            male=float(_expect(gs_raw, "male", "number", "group_shares")),
            disadvantaged=gs_raw.get("disadvantaged"),
            rural_hukou=float(_expect(gs_raw, "rural_hukou", "number", "group_shares", default=0.0)),
            minority=float(_expect(gs_raw, "minority", "number", "group_shares", default=0.0)),
            high_income=float(_expect(gs_raw, "high_income", "number", "group_shares", default=0.0)),
            urban=float(_expect(gs_raw, "urban", "number", "group_shares", default=0.0)),
        )
    except ValueError as exc:
        raise ConfigError(f"config section group_shares: {exc}")

    sev_raw = _expect(d, "severity", "mapping", "config")
    kind = _expect(sev_raw, "kind", "string", "severity", default="discrete")
    try:
        if kind == "discrete":
            severity = SeveritySpec(
                kind="discrete",
                mix=dict(_expect(sev_raw, "mix", "mapping", "severity")),
                theta=dict(_expect(sev_raw, "theta", "mapping", "severity")),
            )
        else:
            severity = SeveritySpec(
                kind=kind,
                a=float(_expect(sev_raw, "a", "number", "severity")),
                b=float(_expect(sev_raw, "b", "number", "severity")),
            )
    except ValueError as exc:
        raise ConfigError(f"config section severity: {exc}")

    age = _expect(d, "age", "mapping", "config", default={})
    distance = _expect(d, "distance", "mapping", "config", default={})
    noncvd_raw = _expect(d, "noncvd", "mapping", "config", default=None)
    if noncvd_raw is None:
        noncvd = NonCvdSpec()
    else:
        try:
            noncvd = NonCvdSpec(
                records_per_year=int(_expect(noncvd_raw, "records_per_year", "integer",
                                             "noncvd", default=1)),
                scale_rmb=float(_expect(noncvd_raw, "scale_rmb", "number", "noncvd",
                                        default=25000.0)),
                loading=float(_expect(noncvd_raw, "loading", "number", "noncvd", default=1.0)),
                noise_sd=float(_expect(noncvd_raw, "noise_sd", "number", "noncvd", default=0.15)),
                oop_share=float(_expect(noncvd_raw, "oop_share", "number", "noncvd", default=0.45)),
                min_theta=float(_expect(noncvd_raw, "min_theta", "number", "noncvd", default=0.30)),
                diagnoses=dict(_expect(noncvd_raw, "diagnoses", "mapping", "noncvd",
                                       default=NonCvdSpec().diagnoses)),
                facility_probs=tuple(_expect(noncvd_raw, "facility_probs", "sequence", "noncvd",
                                             default=NonCvdSpec().facility_probs)),
            )
        except ValueError as exc:
            raise ConfigError(f"config section noncvd: {exc}")

    fac_raw = _expect(d, "facility_choice_probs", "mapping", "config")
    facility_choice_probs = {k: tuple(float(x) for x in v) for k, v in fac_raw.items()}

    try:
        return PopulationConfig(
            n_patients=int(_expect(d, "n_patients", "integer", "config")),
            seed=int(_expect(d, "seed", "integer", "config", default=0)),
            group_shares=shares,
            severity=severity,
            facility_choice_probs=facility_choice_probs,
            true_cost_params=cost_params_from_dict(
                _expect(d, "cost_params", "mapping", "config")),
            true_pref_params=pref_params_from_dict(
                _expect(d, "pref_params", "mapping", "config")),
            plan=plan_from_dict(_expect(d, "plan", "mapping", "config")),
            cost_noise_sd=float(_expect(d, "cost_noise_sd", "number", "config", default=0.25)),
            years=tuple(int(y) for y in _expect(d, "years", "sequence", "config",
                                                default=(2018, 2019))),
            cvd_admissions_per_year=int(_expect(d, "cvd_admissions_per_year", "integer",
                                                "config", default=1)),
            noncvd=noncvd,
            age_mean=float(_expect(age, "mean", "number", "age", default=62.0)),
            age_sd=float(_expect(age, "sd", "number", "age", default=11.0)),
            age_range=(float(_expect(age, "min", "number", "age", default=35.0)),
                       float(_expect(age, "max", "number", "age", default=95.0))),
            distance_log_mean=float(_expect(distance, "log_mean", "number", "distance",
                                            default=1.6)),
            distance_log_sd=float(_expect(distance, "log_sd", "number", "distance",
                                          default=0.6)),
        )
    except ValueError as exc:
        raise ConfigError(f"config: {exc}")


def scenario_from_dict(d: Mapping, context: str = "scenario") -> PolicyScenario:
    try:
        return PolicyScenario(
            label=str(_expect(d, "label", "string", context)),
            phi_pc_delta=float(_expect(d, "phi_pc_delta", "number", context, default=0.0)),
            phi_hc_override=d.get("phi_hc_override"),
            travel_subsidy_rmb=float(_expect(d, "travel_subsidy_rmb", "number", context,
                                             default=0.0)),
            applies_to=str(_expect(d, "applies_to", "string", context,
                                   default="disadvantaged")),
        )
    except ValueError as exc:
        raise ConfigError(f"config section {context}: {exc}")


def load_json_file(path: str):
    try:
        with open(path, "r") as handle:
            return json.load(handle)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}")


def load_bundled_json(name: str):
    with resources.files("carechoice").joinpath("data", name).open("r") as handle:
        return json.load(handle)


def load_published_params() -> dict:
    """Bundled published estimates: cost params, preferences, and the plan.

    Returns ``{"cost_params": CostParams, "pref_params": PreferenceParams,
    "pref_params_rural_minority": PreferenceParams, "plan": InsurancePlan,
    "category_theta": {label: float}}``.
    """
    raw = load_bundled_json("published_params.json")
    return {
        "cost_params": cost_params_from_dict(raw["cost_params"]),
        "pref_params": pref_params_from_dict(raw["pref_params"]),
        "pref_params_rural_minority": pref_params_from_dict(raw["pref_params_rural_minority"]),
        "plan": plan_from_dict(raw["plan"]),
        "category_theta": {k: float(v) for k, v in raw["category_theta"].items()},
    }


# ---------------------------------------------------------------------------
# Run manifest
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RunManifest:
    """Provenance record written next to every command's outputs.

    ``outputs`` maps each written file to its content digest, so a rerun
    can be checked for reproducibility by comparing manifests (the wall
    clock is the one field expected to differ between identical runs).
    """

    command: str
    config_digest: str
    master_seed: Union[int, None]
    artifact_version: str
    inputs: dict
    outputs: dict
    wall_clock_seconds: float
    parameter_snapshot: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "command": self.command,
            "config_digest": self.config_digest,
            "master_seed": self.master_seed,
            "artifact_version": self.artifact_version,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "wall_clock_seconds": self.wall_clock_seconds,
            "parameter_snapshot": self.parameter_snapshot,
            "summary": self.summary,
        }


def write_manifest(out_dir: str, manifest: RunManifest):
    write_json(os.path.join(out_dir, "manifest.json"), manifest.to_dict())
