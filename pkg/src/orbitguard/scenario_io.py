"""Scenario files: a YAML document with sections for vehicle, catalog
overrides, deputies (initial state + policy), task, seed, and timing.

Catalog entries are overrides applied on top of the default catalog built
for the configured vehicle; only enabled/priority/params can be edited per
constraint, keyed by wire name.  Neural policy weights are referenced by
path, resolved relative to the scenario file.
"""

from __future__ import annotations

from dataclasses import fields as dc_fields
from pathlib import Path

import numpy as np
import yaml

from .constraints import ConstraintId, default_catalog
from .dynamics import (
    AttitudeState,
    FullState,
    ResourceState,
    TranslationalState,
    VehicleParams,
)
from .errors import OrbitGuardError, ScenarioError
from .mission import DeputySetup, Scenario, TaskKind, TaskSpec
from .policies import (
    ActionMode,
    ObservationFrame,
    PolicyKind,
    PolicySpec,
    load_weights,
)

_SCENARIO_KEYS = {"name", "seed", "duration", "dt", "filter_rate", "vehicle",
                  "catalog", "task", "deputies"}
_TASK_KEYS = {"kind", "point_count", "chief_radius", "dock_radius"}
_OVERRIDE_KEYS = {"enabled", "priority", "params"}
_STATE_KEYS = {"position", "velocity", "quaternion", "body_rate",
               "battery", "temperature", "fuel_used"}
_POLICY_KEYS = {"kind", "gains", "seed", "standoff", "weights",
                "action_mode", "observation_frame"}

_VEHICLE_FIELDS = {f.name for f in dc_fields(VehicleParams)}


def _need(doc, key, where):
    if key not in doc:
        raise ScenarioError(f"{where}: missing required key '{key}'")
    return doc[key]


def _mapping(value, where):
    if not isinstance(value, dict):
        raise ScenarioError(f"{where}: expected a mapping")
    return value


def _no_strays(doc, allowed, where):
    stray = set(doc) - allowed
    if stray:
        raise ScenarioError(f"{where}: unknown keys {sorted(stray)}")


def _enum(cls, value, where):
    try:
        return cls(value)
    except ValueError:
        good = ", ".join(m.value for m in cls)
        raise ScenarioError(
            f"{where}: {value!r} is not one of [{good}]") from None


def _vehicle(doc) -> VehicleParams:
    doc = _mapping(doc, "vehicle")
    _no_strays(doc, _VEHICLE_FIELDS, "vehicle")
    try:
        return VehicleParams(**doc)
    except OrbitGuardError as bad:
        raise ScenarioError(f"vehicle: {bad}") from None


def _catalog(doc, vehicle):
    doc = _mapping(doc, "catalog")
    out = []
    for spec in default_catalog(vehicle):
        if spec.id.wire_name in doc:
            entry = _mapping(doc[spec.id.wire_name],
                             f"catalog.{spec.id.wire_name}")
            _no_strays(entry, _OVERRIDE_KEYS, f"catalog.{spec.id.wire_name}")
            try:
                spec = spec.with_updates(**entry)
            except OrbitGuardError as bad:
                raise ScenarioError(
                    f"catalog.{spec.id.wire_name}: {bad}") from None
        out.append(spec)
    # names that match no constraint are typos, not extensions
    stray = set(doc) - {cid.wire_name for cid in ConstraintId}
    if stray:
        raise ScenarioError(f"catalog: unknown constraints {sorted(stray)}")
    return tuple(out)


def _task(doc) -> TaskSpec:
    doc = _mapping(doc, "task")
    _no_strays(doc, _TASK_KEYS, "task")
    kind = _enum(TaskKind, doc.get("kind", "None"), "task.kind")
    kw = {}
    for key in ("point_count", "chief_radius", "dock_radius"):
        if key in doc:
            kw[key] = doc[key]
    try:
        return TaskSpec(kind=kind, **kw)
    except TypeError as bad:
        raise ScenarioError(f"task: {bad}") from None


def _state(doc, where) -> FullState:
    doc = _mapping(doc, where)
    _no_strays(doc, _STATE_KEYS, where)
    try:
        tr = TranslationalState(
            position=np.asarray(_need(doc, "position", where), float),
            velocity=np.asarray(_need(doc, "velocity", where), float))
        att = AttitudeState.identity()
        if "quaternion" in doc or "body_rate" in doc:
            att = AttitudeState(
                quaternion=np.asarray(
                    doc.get("quaternion", (0.0, 0.0, 0.0, 1.0)), float),
                body_rate=np.asarray(doc.get("body_rate", (0.0,) * 3), float))
        res = ResourceState(
            battery=doc.get("battery", 0.9),
            temperature=doc.get("temperature", 290.0),
            fuel_used=doc.get("fuel_used", 0.0))
    except OrbitGuardError as bad:
        raise ScenarioError(f"{where}: {bad}") from None
    return FullState(translational=tr, attitude=att, resources=res)


def policy_from_dict(doc, where="policy", base_dir=None) -> PolicySpec:
    """Build a PolicySpec from a parsed document.

    Relative weight paths resolve against base_dir.  The gateway uses
    this directly when an operator swaps a deputy's policy mid run.
    """
    doc = _mapping(doc, where)
    base_dir = Path(base_dir) if base_dir is not None else Path(".")
    _no_strays(doc, _POLICY_KEYS, where)
    kind = _enum(PolicyKind, _need(doc, "kind", where), f"{where}.kind")
    kw = {}
    if "gains" in doc:
        kw["gains"] = tuple(doc["gains"])
    if "seed" in doc:
        kw["seed"] = int(doc["seed"])
    if "standoff" in doc:
        kw["standoff"] = float(doc["standoff"])
    if "action_mode" in doc:
        kw["action_mode"] = _enum(ActionMode, doc["action_mode"],
                                  f"{where}.action_mode")
    if "observation_frame" in doc:
        kw["observation_frame"] = _enum(ObservationFrame,
                                        doc["observation_frame"],
                                        f"{where}.observation_frame")
    if "weights" in doc:
        wpath = Path(doc["weights"])
        if not wpath.is_absolute():
            wpath = base_dir / wpath
        try:
            kw["weights"] = load_weights(wpath)
        except OSError as bad:
            raise ScenarioError(f"{where}.weights: {bad}") from None
        except OrbitGuardError as bad:
            raise ScenarioError(f"{where}.weights: {bad}") from None
    try:
        return PolicySpec(kind=kind, **kw)
    except OrbitGuardError as bad:
        raise ScenarioError(f"{where}: {bad}") from None


def scenario_from_dict(doc: dict, base_dir=None) -> Scenario:
    """Build a validated Scenario from a parsed document."""
    doc = _mapping(doc, "scenario")
    _no_strays(doc, _SCENARIO_KEYS, "scenario")
    base_dir = Path(base_dir) if base_dir is not None else Path(".")
    vehicle = _vehicle(doc["vehicle"]) if "vehicle" in doc else VehicleParams()
    catalog = _catalog(doc.get("catalog", {}), vehicle)
    task = _task(doc["task"]) if "task" in doc else TaskSpec()

    dep_docs = _need(doc, "deputies", "scenario")
    if not isinstance(dep_docs, list):
        raise ScenarioError("deputies: expected a list")
    deputies = []
    for i, dep in enumerate(dep_docs):
        dep = _mapping(dep, f"deputies[{i}]")
        _no_strays(dep, {"state", "policy"}, f"deputies[{i}]")
        deputies.append(DeputySetup(
            state=_state(_need(dep, "state", f"deputies[{i}]"),
                         f"deputies[{i}].state"),
            policy=policy_from_dict(_need(dep, "policy", f"deputies[{i}]"),
                                    f"deputies[{i}].policy", base_dir)))

    kw = {}
    for key in ("dt", "filter_rate"):
        if key in doc:
            kw[key] = float(doc[key])
    return Scenario(
        deputies=tuple(deputies),
        duration=float(_need(doc, "duration", "scenario")),
        catalog=catalog,
        seed=int(doc.get("seed", 0)),
        task=task,
        vehicle=vehicle,
        name=str(doc.get("name", "scenario")),
        **kw)


def load_scenario(path) -> Scenario:
    """Parse and validate one scenario file."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as bad:
        raise ScenarioError(f"{path}: {bad}") from None
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as bad:
        raise ScenarioError(f"{path}: {bad}") from None
    if doc is None:
        raise ScenarioError(f"{path}: empty scenario file")
    return scenario_from_dict(doc, base_dir=path.parent)
