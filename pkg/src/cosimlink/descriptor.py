"""Model descriptors and co-simulation scenarios.

A descriptor declares the variables one simulation unit exposes; a scenario
wires units together and fixes the run parameters.  Both are JSON documents;
parsing here is the single validation point, so everything downstream can
assume the invariants hold.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional, Union

_IDENTIFIER = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")
_U32_MAX = 2**32 - 1
_I32_MIN, _I32_MAX = -(2**31), 2**31 - 1


class DescriptorError(ValueError):
    """Raised for a malformed or invariant-violating descriptor document.

    ``path`` names the offending field, e.g. ``variables[3].causality``.
    """

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class ScenarioError(DescriptorError):
    """Raised for a malformed or inconsistent scenario document."""


class VariableType(Enum):
    REAL = "Real"
    INTEGER = "Integer"
    BOOLEAN = "Boolean"
    TEXT = "Text"


class Causality(Enum):
    INPUT = "input"
    OUTPUT = "output"
    PARAMETER = "parameter"


_START_CHECKS = {
    VariableType.REAL: lambda v: isinstance(v, (int, float)) and not isinstance(v, bool),
    VariableType.INTEGER: lambda v: isinstance(v, int) and not isinstance(v, bool)
    and _I32_MIN <= v <= _I32_MAX,
    VariableType.BOOLEAN: lambda v: isinstance(v, bool),
    VariableType.TEXT: lambda v: isinstance(v, str),
}


@dataclass(frozen=True)
class ScalarVariable:
    name: str
    value_reference: int
    var_type: VariableType
    causality: Causality
    start: Optional[Union[float, int, bool, str]] = None


@dataclass(frozen=True)
class ModelDescriptor:
    model_name: str
    instance_guid: str
    variables: tuple[ScalarVariable, ...]

    def variable(self, name: str) -> ScalarVariable:
        for var in self.variables:
            if var.name == name:
                return var
        raise KeyError(name)

    def by_reference(self, var_type: VariableType, value_reference: int) -> ScalarVariable:
        for var in self.variables:
            if var.var_type is var_type and var.value_reference == value_reference:
                return var
        raise KeyError((var_type, value_reference))

    def with_causality(self, causality: Causality) -> tuple[ScalarVariable, ...]:
        return tuple(v for v in self.variables if v.causality is causality)


@dataclass(frozen=True)
class UnitSpec:
    unit_name: str
    descriptor_path: str
    host: str
    port: int
    auth_token: str
    descriptor: ModelDescriptor

    @property
    def listen_address(self) -> tuple[str, int]:
        return (self.host, self.port)


@dataclass(frozen=True)
class Connection:
    """One resolved output-to-input coupling."""
    source_unit: str
    source_variable: ScalarVariable
    target_unit: str
    target_variable: ScalarVariable

    @property
    def var_type(self) -> VariableType:
        return self.source_variable.var_type

    @property
    def source_label(self) -> str:
        return f"{self.source_unit}.{self.source_variable.name}"

    @property
    def target_label(self) -> str:
        return f"{self.target_unit}.{self.target_variable.name}"


@dataclass(frozen=True)
class ScenarioConfig:
    units: tuple[UnitSpec, ...]
    connections: tuple[Connection, ...]
    step_size: float
    start_time: float
    end_time: float
    real_time: bool
    output_path: str

    @property
    def step_count(self) -> int:
        """Number of fixed steps, computed once by rounding (no drift)."""
        return round((self.end_time - self.start_time) / self.step_size)

    def unit(self, name: str) -> UnitSpec:
        for u in self.units:
            if u.unit_name == name:
                return u
        raise KeyError(name)


def _require(doc: dict, key: str, kind, path: str):
    if key not in doc:
        raise DescriptorError(f"{path}.{key}" if path else key, "missing required key")
    value = doc[key]
    if kind is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif kind is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif kind is bool:
        ok = isinstance(value, bool)
    else:
        ok = isinstance(value, kind)
    if not ok:
        want = kind.__name__ if hasattr(kind, "__name__") else str(kind)
        raise DescriptorError(f"{path}.{key}" if path else key,
                              f"expected {want}, got {type(doc[key]).__name__}")
    return value


def _load_json(text: str, error: type[DescriptorError]):
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise error("", f"malformed JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise error("", "top-level value must be an object")
    return doc


def _parse_variable(entry, index: int) -> ScalarVariable:
    path = f"variables[{index}]"
    if not isinstance(entry, dict):
        raise DescriptorError(path, "expected an object")
    name = _require(entry, "name", str, path)
    if not _IDENTIFIER.match(name):
        raise DescriptorError(f"{path}.name", f"{name!r} is not a valid identifier")
    vr = _require(entry, "value_reference", int, path)
    if not 0 <= vr <= _U32_MAX:
        raise DescriptorError(f"{path}.value_reference",
                              f"{vr} outside unsigned 32-bit range")
    type_word = _require(entry, "type", str, path)
    try:
        var_type = VariableType(type_word)
    except ValueError:
        raise DescriptorError(f"{path}.type", f"unknown type keyword {type_word!r}") from None
    causality_word = _require(entry, "causality", str, path)
    try:
        causality = Causality(causality_word)
    except ValueError:
        raise DescriptorError(f"{path}.causality",
                              f"unknown causality keyword {causality_word!r}") from None

    start = entry.get("start")
    if start is not None:
        if causality is Causality.OUTPUT:
            raise DescriptorError(f"{path}.start",
                                  "output variables may not declare a start value")
        if not _START_CHECKS[var_type](start):
            raise DescriptorError(
                f"{path}.start",
                f"{start!r} is not a valid {var_type.value} literal")
        if var_type is VariableType.REAL:
            start = float(start)

    unknown = set(entry) - {"name", "value_reference", "type", "causality", "start"}
    if unknown:
        raise DescriptorError(f"{path}.{sorted(unknown)[0]}", "unknown key")
    return ScalarVariable(name, vr, var_type, causality, start)


def parse_descriptor(text: str) -> ModelDescriptor:
    """Parse and fully validate one descriptor document.

    Total on the schema: every accepted document satisfies all descriptor
    invariants; every rejection is a :class:`DescriptorError` naming the
    offending field path.
    """
    doc = _load_json(text, DescriptorError)
    model_name = _require(doc, "model_name", str, "")
    if not _IDENTIFIER.match(model_name):
        raise DescriptorError("model_name", f"{model_name!r} is not a valid identifier")
    instance_guid = _require(doc, "instance_guid", str, "")
    raw_variables = _require(doc, "variables", list, "")
    if not raw_variables:
        raise DescriptorError("variables", "empty variable list")

    variables = tuple(_parse_variable(entry, i) for i, entry in enumerate(raw_variables))

    seen_names: dict[str, int] = {}
    seen_refs: dict[tuple[VariableType, int], int] = {}
    for i, var in enumerate(variables):
        if var.name in seen_names:
            raise DescriptorError(
                f"variables[{i}].name",
                f"duplicate name {var.name!r} (first declared at variables[{seen_names[var.name]}])")
        seen_names[var.name] = i
        key = (var.var_type, var.value_reference)
        if key in seen_refs:
            first = variables[seen_refs[key]]
            raise DescriptorError(
                f"variables[{i}].value_reference",
                f"duplicate ({var.var_type.value}, {var.value_reference}) shared by "
                f"{first.name!r} and {var.name!r}")
        seen_refs[key] = i

    return ModelDescriptor(model_name, instance_guid, variables)


def serialize_descriptor(descriptor: ModelDescriptor) -> str:
    """Inverse of :func:`parse_descriptor`: parse(serialize(d)) == d."""
    variables = []
    for var in descriptor.variables:
        entry = {
            "name": var.name,
            "value_reference": var.value_reference,
            "type": var.var_type.value,
            "causality": var.causality.value,
        }
        if var.start is not None:
            entry["start"] = var.start
        variables.append(entry)
    return json.dumps({
        "model_name": descriptor.model_name,
        "instance_guid": descriptor.instance_guid,
        "variables": variables,
    }, indent=2)


def _parse_listen(raw: str, path: str) -> tuple[str, int]:
    host, sep, port_text = raw.rpartition(":")
    if not sep or not host:
        raise ScenarioError(path, f"{raw!r} is not of the form host:port")
    try:
        port = int(port_text)
    except ValueError:
        raise ScenarioError(path, f"port {port_text!r} is not an integer") from None
    if not 1 <= port <= 65535:
        raise ScenarioError(path, f"port {port} outside 1..65535")
    return host, port


def _resolve_endpoint(raw: str, units: dict[str, UnitSpec], path: str
                      ) -> tuple[str, ScalarVariable]:
    unit_name, sep, var_name = raw.partition(".")
    if not sep:
        raise ScenarioError(path, f"{raw!r} is not of the form unit.variable")
    if unit_name not in units:
        raise ScenarioError(path, f"unknown unit {unit_name!r}")
    try:
        variable = units[unit_name].descriptor.variable(var_name)
    except KeyError:
        raise ScenarioError(
            path, f"unit {unit_name!r} declares no variable {var_name!r}") from None
    return unit_name, variable


def parse_scenario(text: str, descriptors: dict[str, ModelDescriptor]) -> ScenarioConfig:
    """Parse a scenario document and cross-validate it against its descriptors.

    ``descriptors`` maps unit name to the already-parsed descriptor of that
    unit.  Connection endpoints are resolved to concrete variables here;
    anything dangling, causality-crossed, or type-mismatched is rejected.
    """
    doc = _load_json(text, ScenarioError)

    raw_units = _require(doc, "units", list, "")
    if not raw_units:
        raise ScenarioError("units", "scenario declares no units")
    units: dict[str, UnitSpec] = {}
    ordered_units = []
    seen_listen: dict[tuple[str, int], str] = {}
    for i, entry in enumerate(raw_units):
        path = f"units[{i}]"
        if not isinstance(entry, dict):
            raise ScenarioError(path, "expected an object")
        unit_name = _require(entry, "unit_name", str, path)
        if not _IDENTIFIER.match(unit_name):
            raise ScenarioError(f"{path}.unit_name",
                                f"{unit_name!r} is not a valid identifier")
        if unit_name in units:
            raise ScenarioError(f"{path}.unit_name", f"duplicate unit {unit_name!r}")
        descriptor_path = _require(entry, "descriptor", str, path)
        host, port = _parse_listen(_require(entry, "listen", str, path), f"{path}.listen")
        if (host, port) in seen_listen:
            raise ScenarioError(
                f"{path}.listen",
                f"address {host}:{port} already used by unit {seen_listen[(host, port)]!r}")
        seen_listen[(host, port)] = unit_name
        token = _require(entry, "token", str, path)
        if unit_name not in descriptors:
            raise ScenarioError(f"{path}.unit_name",
                                f"no descriptor supplied for unit {unit_name!r}")
        unit = UnitSpec(unit_name, descriptor_path, host, port, token,
                        descriptors[unit_name])
        units[unit_name] = unit
        ordered_units.append(unit)

    raw_connections = _require(doc, "connections", list, "")
    connections = []
    for i, entry in enumerate(raw_connections):
        path = f"connections[{i}]"
        if not isinstance(entry, dict):
            raise ScenarioError(path, "expected an object")
        src_unit, src_var = _resolve_endpoint(
            _require(entry, "source", str, path), units, f"{path}.source")
        tgt_unit, tgt_var = _resolve_endpoint(
            _require(entry, "target", str, path), units, f"{path}.target")
        if src_var.causality is not Causality.OUTPUT:
            raise ScenarioError(
                f"{path}.source",
                f"{src_unit}.{src_var.name} is {src_var.causality.value}, not an output")
        if tgt_var.causality is not Causality.INPUT:
            raise ScenarioError(
                f"{path}.target",
                f"{tgt_unit}.{tgt_var.name} is {tgt_var.causality.value}, not an input")
        if src_var.var_type is not tgt_var.var_type:
            raise ScenarioError(
                path,
                f"type mismatch: {src_unit}.{src_var.name} is {src_var.var_type.value}, "
                f"{tgt_unit}.{tgt_var.name} is {tgt_var.var_type.value}")
        connections.append(Connection(src_unit, src_var, tgt_unit, tgt_var))

    step_size = _require(doc, "step_size", float, "")
    if step_size <= 0:
        raise ScenarioError("step_size", f"must be > 0, got {step_size}")
    start_time = _require(doc, "start_time", float, "")
    end_time = _require(doc, "end_time", float, "")
    if end_time <= start_time:
        raise ScenarioError(
            "end_time", f"must exceed start_time ({end_time} <= {start_time})")
    real_time = _require(doc, "real_time", bool, "")
    output_path = _require(doc, "output_path", str, "")

    return ScenarioConfig(tuple(ordered_units), tuple(connections),
                          step_size, start_time, end_time, real_time, output_path)


def load_descriptor(path) -> ModelDescriptor:
    return parse_descriptor(Path(path).read_text(encoding="utf-8"))


def load_scenario(path) -> ScenarioConfig:
    """Load a scenario file, reading unit descriptors relative to it."""
    scenario_path = Path(path)
    text = scenario_path.read_text(encoding="utf-8")
    doc = _load_json(text, ScenarioError)
    descriptors: dict[str, ModelDescriptor] = {}
    for i, entry in enumerate(doc.get("units") or []):
        if not isinstance(entry, dict):
            continue
        name = entry.get("unit_name")
        rel = entry.get("descriptor")
        if isinstance(name, str) and isinstance(rel, str):
            descriptor_file = scenario_path.parent / rel
            try:
                descriptors[name] = load_descriptor(descriptor_file)
            except OSError as exc:
                raise ScenarioError(f"units[{i}].descriptor",
                                    f"cannot read {descriptor_file}: {exc}") from None
    return parse_scenario(text, descriptors)
