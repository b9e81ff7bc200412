"""Simulation models served by backends.

Each model keeps per-type value stores keyed by value reference and exposes
the co-simulation lifecycle.  Lifecycle methods return a :class:`Status`
instead of raising; the serving layer forwards that status verbatim.

``run_reference_simulation`` executes a scenario against these models fully
in-process with the exact exchange ordering the distributed master uses, so
a networked run of the same scenario must reproduce it bit for bit.
"""

from __future__ import annotations

from importlib import resources
from typing import Optional, Sequence, Union

from .descriptor import (
    Causality,
    ModelDescriptor,
    ScenarioConfig,
    VariableType,
    parse_descriptor,
)
from .wire import Status

Value = Union[float, int, bool, str]

_TYPE_DEFAULTS = {
    VariableType.REAL: 0.0,
    VariableType.INTEGER: 0,
    VariableType.BOOLEAN: False,
    VariableType.TEXT: "",
}

_I32_WRAP = 2**32
_I32_HALF = 2**31


def _wrap_i32(value: int) -> int:
    # Keep arithmetic results encodable as a signed 32-bit integer.
    return (value + _I32_HALF) % _I32_WRAP - _I32_HALF


class VariableStoreModel:
    """Base model: stores driven by the descriptor, lifecycle all no-ops.

    Subclasses override :meth:`do_step` and read or write their variables
    through the named accessors.  Concrete models ship a packaged descriptor
    (``DESCRIPTOR_FILE``) used when none is given.
    """

    DESCRIPTOR_FILE: Optional[str] = None

    def __init__(self, descriptor: Optional[ModelDescriptor] = None):
        if descriptor is None:
            if self.DESCRIPTOR_FILE is None:
                raise TypeError(f"{type(self).__name__} has no packaged "
                                "descriptor; pass one explicitly")
            descriptor = parse_descriptor(
                packaged_descriptor_text(self.DESCRIPTOR_FILE))
        self.descriptor = descriptor
        self._stores: dict[VariableType, dict[int, Value]] = {
            t: {} for t in VariableType}
        for var in descriptor.variables:
            default = _TYPE_DEFAULTS[var.var_type]
            value = var.start if var.start is not None else default
            self._stores[var.var_type][var.value_reference] = value

    # -- lifecycle ---------------------------------------------------------

    def setup_experiment(self, start_time: float,
                         stop_time: Optional[float] = None,
                         tolerance: Optional[float] = None) -> Status:
        self.start_time = start_time
        self.stop_time = stop_time
        self.tolerance = tolerance
        return Status.OK

    def enter_initialization(self) -> Status:
        return Status.OK

    def exit_initialization(self) -> Status:
        return Status.OK

    def do_step(self, current_time: float, step_size: float) -> Status:
        raise NotImplementedError

    def terminate(self) -> Status:
        return Status.OK

    # -- value access ------------------------------------------------------

    def set_values(self, var_type: VariableType, vrs: Sequence[int],
                   values: Sequence[Value]) -> Status:
        store = self._stores[var_type]
        if any(vr not in store for vr in vrs):
            return Status.ERROR
        for vr, value in zip(vrs, values):
            store[vr] = value
        return Status.OK

    def get_values(self, var_type: VariableType,
                   vrs: Sequence[int]) -> tuple[Status, tuple[Value, ...]]:
        store = self._stores[var_type]
        if any(vr not in store for vr in vrs):
            return Status.ERROR, ()
        return Status.OK, tuple(store[vr] for vr in vrs)

    # -- named helpers for subclasses ---------------------------------------

    def _value(self, name: str) -> Value:
        var = self.descriptor.variable(name)
        return self._stores[var.var_type][var.value_reference]

    def _assign(self, name: str, value: Value) -> None:
        var = self.descriptor.variable(name)
        self._stores[var.var_type][var.value_reference] = value


class AdderModel(VariableStoreModel):
    """Combines each input pair into one output per variable type.

    Reals add, integers subtract, booleans conjoin, text concatenates.
    Outputs refresh during :meth:`do_step`, never lazily on read.
    """

    DESCRIPTOR_FILE = "demo1_adder.json"

    def do_step(self, current_time: float, step_size: float) -> Status:
        self._assign("real_c", self._value("real_a") + self._value("real_b"))
        self._assign("integer_c",
                     _wrap_i32(self._value("integer_a") - self._value("integer_b")))
        self._assign("boolean_c",
                     bool(self._value("boolean_a") and self._value("boolean_b")))
        self._assign("string_c", self._value("string_a") + self._value("string_b"))
        return Status.OK


class ControllerModel(VariableStoreModel):
    """PI speed controller with output saturation."""

    DESCRIPTOR_FILE = "demo2_controller.json"

    def __init__(self, descriptor: Optional[ModelDescriptor] = None):
        super().__init__(descriptor)
        self._integral = 0.0

    def do_step(self, current_time: float, step_size: float) -> Status:
        error = self._value("omega_ref") - self._value("omega_meas")
        self._integral += error * step_size
        command = self._value("kp") * error + self._value("ki") * self._integral
        limit = self._value("tau_max")
        self._assign("tau_cmd", min(max(command, -limit), limit))
        return Status.OK


class MotorModel(VariableStoreModel):
    """First-order torque actuator, explicit Euler."""

    DESCRIPTOR_FILE = "demo2_motor.json"

    def do_step(self, current_time: float, step_size: float) -> Status:
        tau = self._value("tau_mot")
        tau += step_size * (self._value("tau_cmd_in") - tau) / self._value("t_m")
        self._assign("tau_mot", tau)
        return Status.OK


class GeneratorModel(VariableStoreModel):
    """Rotating inertia with linear friction and load, explicit Euler."""

    DESCRIPTOR_FILE = "demo2_generator.json"

    def do_step(self, current_time: float, step_size: float) -> Status:
        omega = self._value("omega")
        drag = (self._value("b") + self._value("c")) * omega
        omega += step_size * (self._value("tau_in") - drag) / self._value("j")
        self._assign("omega", omega)
        return Status.OK


MODEL_REGISTRY: dict[str, type[VariableStoreModel]] = {
    "adder": AdderModel,
    "controller": ControllerModel,
    "motor": MotorModel,
    "generator": GeneratorModel,
}


def packaged_descriptor_text(filename: str) -> str:
    return resources.files("cosimlink").joinpath("fixtures", filename) \
        .read_text(encoding="utf-8")


def create_model(model_name: str) -> VariableStoreModel:
    """Instantiate a registered model with its packaged descriptor."""
    try:
        cls = MODEL_REGISTRY[model_name]
    except KeyError:
        raise ValueError(f"unknown model {model_name!r}; "
                         f"known: {', '.join(sorted(MODEL_REGISTRY))}") from None
    return cls()


def connected_output_labels(scenario: ScenarioConfig) -> list[str]:
    """Trajectory column labels: connection sources, first appearance order."""
    labels = []
    for conn in scenario.connections:
        if conn.source_label not in labels:
            labels.append(conn.source_label)
    return labels


def run_reference_simulation(
        scenario: ScenarioConfig,
        models: Optional[dict[str, VariableStoreModel]] = None,
) -> tuple[list[str], list[tuple[float, ...]]]:
    """Run a scenario entirely in-process against local model objects.

    Ordering mirrors the distributed master exactly: initial output
    propagation, then per step every unit advances in declaration order
    before connection values move, also in declaration order.  Returns the
    trajectory column labels and one row per step of
    ``(time, *connected_output_values)``.
    """
    if models is None:
        models = {unit.unit_name: create_model(unit.unit_name)
                  for unit in scenario.units}

    for unit in scenario.units:
        model = models[unit.unit_name]
        model.setup_experiment(scenario.start_time, scenario.end_time, None)
        model.enter_initialization()
        model.exit_initialization()

    def exchange() -> dict[str, Value]:
        latest: dict[str, Value] = {}
        for conn in scenario.connections:
            src, tgt = conn.source_variable, conn.target_variable
            status, values = models[conn.source_unit].get_values(
                src.var_type, [src.value_reference])
            if status is not Status.OK:
                raise RuntimeError(f"get {conn.source_label} returned {status.name}")
            latest[conn.source_label] = values[0]
            status = models[conn.target_unit].set_values(
                tgt.var_type, [tgt.value_reference], values)
            if status is not Status.OK:
                raise RuntimeError(f"set {conn.target_label} returned {status.name}")
        return latest

    exchange()

    labels = connected_output_labels(scenario)
    rows: list[tuple[float, ...]] = []
    for k in range(scenario.step_count):
        t_k = scenario.start_time + k * scenario.step_size
        for unit in scenario.units:
            status = models[unit.unit_name].do_step(t_k, scenario.step_size)
            if status is not Status.OK:
                raise RuntimeError(
                    f"step {k} of {unit.unit_name} returned {status.name}")
        latest = exchange()
        rows.append((t_k, *(latest[label] for label in labels)))

    for unit in scenario.units:
        models[unit.unit_name].terminate()
    return labels, rows
