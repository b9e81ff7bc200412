"""Fixed-step orchestration of proxy-backed simulation units.

The master owns the clock.  Every step: advance all units, then move each
connected output to its input.  Units therefore consume values their
neighbors produced one step earlier, which makes in-process and distributed
runs of the same scenario arithmetically identical.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Callable, Optional, Sequence

from .descriptor import (
    Causality,
    ScenarioConfig,
    UnitSpec,
    VariableType,
    parse_descriptor,
)
from .metrics import (
    TimingRecord,
    TimingReport,
    finalize_report,
    write_report_json,
    write_timing_csv,
)
from .models import Value, connected_output_labels, packaged_descriptor_text
from .proxy import (
    DEFAULT_ACCEPT_TIMEOUT,
    CallOutcome,
    InstanceState,
    ProxyInstance,
)
from .wire import (
    DEFAULT_CALL_TIMEOUT,
    DoStep,
    EnterInit,
    ExitInit,
    GetValues,
    MessageKind,
    SetupExperiment,
    SetValues,
    Status,
    Terminate,
    WireError,
)

log = logging.getLogger("cosimlink.master")


class RunMode(Enum):
    AS_FAST_AS_POSSIBLE = "fast"
    REAL_TIME = "real-time"


class SessionError(RuntimeError):
    """A lifecycle or data call came back unusable; names unit and call."""


_SET_KIND = {
    VariableType.REAL: MessageKind.SET_REAL,
    VariableType.INTEGER: MessageKind.SET_INT,
    VariableType.BOOLEAN: MessageKind.SET_BOOL,
    VariableType.TEXT: MessageKind.SET_STRING,
}
_GET_KIND = {
    VariableType.REAL: MessageKind.GET_REAL,
    VariableType.INTEGER: MessageKind.GET_INT,
    VariableType.BOOLEAN: MessageKind.GET_BOOL,
    VariableType.TEXT: MessageKind.GET_STRING,
}


@dataclass
class StepRecord:
    """One completed step: when it ran and what the outputs were.

    ``wall_duration`` covers the calls only; pacing sleep is accounted in
    the run-level timing records.
    """
    step_index: int
    time: float
    outputs: dict[str, Value]
    wall_duration: float = 0.0


@dataclass
class RunResult:
    labels: list[str]
    steps: list[StepRecord]
    records: list[TimingRecord]
    report: Optional[TimingReport]
    trajectory_path: Optional[Path] = None
    timing_path: Optional[Path] = None
    summary_path: Optional[Path] = None


def _checked(proxy: ProxyInstance, message) -> CallOutcome:
    outcome = proxy.forward_call(message)
    if outcome.status not in (Status.OK, Status.WARNING):
        raise SessionError(
            f"{message.kind.name} on unit {proxy.unit_name} "
            f"returned {outcome.status.name}")
    return outcome


def _push_starts(proxy: ProxyInstance, causality: Causality) -> None:
    groups: dict[VariableType, tuple[list[int], list[Value]]] = {}
    for var in proxy.descriptor.variables:
        if var.causality is causality and var.start is not None:
            vrs, values = groups.setdefault(var.var_type, ([], []))
            vrs.append(var.value_reference)
            values.append(var.start)
    for var_type, (vrs, values) in groups.items():
        _checked(proxy, SetValues(_SET_KIND[var_type], vrs, values))


class CoSimSession:
    """All units instantiated and in stepping mode, clock at step 0."""

    def __init__(self, scenario: ScenarioConfig, proxies: Sequence[ProxyInstance]):
        self.scenario = scenario
        self.units = list(proxies)
        self._by_name = {proxy.unit_name: proxy for proxy in self.units}
        self.step_index = 0
        self.output_labels = connected_output_labels(scenario)
        self._closed = False

    @property
    def current_time(self) -> float:
        return self.scenario.start_time + self.step_index * self.scenario.step_size

    def _propagate(self) -> dict[str, Value]:
        latest: dict[str, Value] = {}
        for conn in self.scenario.connections:
            source = self._by_name[conn.source_unit]
            outcome = _checked(source, GetValues(
                _GET_KIND[conn.var_type], (conn.source_variable.value_reference,)))
            latest[conn.source_label] = outcome.values[0]
            target = self._by_name[conn.target_unit]
            _checked(target, SetValues(
                _SET_KIND[conn.var_type], (conn.target_variable.value_reference,),
                (outcome.values[0],)))
        return latest

    def step_once(self) -> StepRecord:
        """Advance every unit one step, then exchange connected values."""
        if self.step_index >= self.scenario.step_count:
            raise SessionError("all scheduled steps already executed")
        began = time.monotonic()
        t_k = self.current_time
        for proxy in self.units:
            outcome = proxy.forward_call(
                DoStep(t_k, self.scenario.step_size))
            if outcome.status not in (Status.OK, Status.WARNING):
                raise SessionError(
                    f"do_step at step {self.step_index} on unit "
                    f"{proxy.unit_name} returned {outcome.status.name}")
        outputs = self._propagate()
        record = StepRecord(self.step_index, t_k, outputs,
                            time.monotonic() - began)
        self.step_index += 1
        return record

    def run(self, mode: RunMode, output_dir=None, label: str = "") -> RunResult:
        """Execute every remaining step, then terminate and free all units.

        In real-time mode the loop sleeps after step k until
        wall_start + (k+1) h; being past that deadline is recorded as an
        overrun and never skips work.  Per-step timing records span from the
        previous step's deadline mark, so pacing sleep is included and the
        recorded total can never undercut N h in real-time mode.
        """
        scenario = self.scenario
        records: list[TimingRecord] = []
        steps: list[StepRecord] = []
        cpu_start = time.process_time()
        wall_start = time.monotonic()
        prev_mark = wall_start
        try:
            for k in range(self.step_index, scenario.step_count):
                step = self.step_once()
                overrun = False
                if mode is RunMode.REAL_TIME:
                    deadline = wall_start + (k + 1) * scenario.step_size
                    now = time.monotonic()
                    if now < deadline:
                        time.sleep(deadline - now)
                    elif now > deadline:
                        overrun = True
                now = time.monotonic()
                records.append(TimingRecord(k, now - prev_mark, overrun))
                prev_mark = now
                steps.append(step)
        finally:
            self.shutdown()
        cpu_seconds = time.process_time() - cpu_start
        report = None
        if records:
            report = finalize_report(records, scenario.step_size, mode.value,
                                     label=label, cpu_seconds=cpu_seconds)
        result = RunResult(self.output_labels, steps, records, report)
        if output_dir is not None:
            _write_outputs(result, output_dir)
        return result

    def shutdown(self) -> None:
        """Terminate whatever still steps, then free everything.  Never raises."""
        if self._closed:
            return
        self._closed = True
        for proxy in self.units:
            if proxy.state is InstanceState.STEP_MODE:
                try:
                    proxy.forward_call(Terminate())
                except WireError:
                    pass
        for proxy in self.units:
            proxy.free()


def initialize_session(
        scenario: ScenarioConfig,
        accept_timeout: float = DEFAULT_ACCEPT_TIMEOUT,
        call_timeout: float = DEFAULT_CALL_TIMEOUT,
        on_unit_instantiating: Optional[Callable[[UnitSpec], None]] = None,
) -> CoSimSession:
    """Bring every unit to stepping mode, strictly in declaration order.

    Per unit: listen, wait for its backend, setup, push parameter starts,
    enter initialization, push input starts, exit.  After the last unit,
    one propagation seeds every connected input.  ``on_unit_instantiating``
    fires after the unit's port is bound but before the blocking wait, which
    is the moment to launch that unit's backend process.  On any failure all
    units created so far are freed.
    """
    proxies: list[ProxyInstance] = []
    try:
        for unit in scenario.units:
            proxy = ProxyInstance(unit.descriptor, unit.listen_address,
                                  unit.auth_token, accept_timeout, call_timeout,
                                  unit_name=unit.unit_name)
            proxies.append(proxy)
            proxy.listen()
            if on_unit_instantiating is not None:
                on_unit_instantiating(unit)
            proxy.instantiate()
            _checked(proxy, SetupExperiment(scenario.start_time,
                                            stop_time=scenario.end_time))
            _push_starts(proxy, Causality.PARAMETER)
            _checked(proxy, EnterInit())
            _push_starts(proxy, Causality.INPUT)
            _checked(proxy, ExitInit())
        session = CoSimSession(scenario, proxies)
        session._propagate()
        return session
    except BaseException:
        for proxy in proxies:
            proxy.free()
        raise


def scripted_run_demo1(
        listen_address: tuple[str, int],
        token: str,
        iterations: int = 1000,
        step_size: float = 0.01,
        mode: RunMode = RunMode.AS_FAST_AS_POSSIBLE,
        accept_timeout: float = DEFAULT_ACCEPT_TIMEOUT,
        call_timeout: float = DEFAULT_CALL_TIMEOUT,
        on_instantiating: Optional[Callable[[], None]] = None,
        output_dir=None,
        label: str = "demo1",
) -> RunResult:
    """Drive one adder unit through the fixed write/step/read pattern.

    Each iteration sets both real inputs to (1.0, 2.0), steps, and reads the
    sum back, insisting on exactly 3.0.  Iteration pacing and timing match
    :meth:`CoSimSession.run`.
    """
    descriptor = parse_descriptor(packaged_descriptor_text("demo1_adder.json"))
    proxy = ProxyInstance(descriptor, listen_address, token,
                          accept_timeout, call_timeout, unit_name="adder")
    records: list[TimingRecord] = []
    steps: list[StepRecord] = []
    cpu_start = time.process_time()
    try:
        proxy.listen()
        if on_instantiating is not None:
            on_instantiating()
        proxy.instantiate()
        _checked(proxy, SetupExperiment(0.0, stop_time=iterations * step_size))
        _checked(proxy, EnterInit())
        _checked(proxy, ExitInit())
        wall_start = time.monotonic()
        prev_mark = wall_start
        for k in range(iterations):
            began = time.monotonic()
            t_k = k * step_size
            _checked(proxy, SetValues(MessageKind.SET_REAL, (0, 1), (1.0, 2.0)))
            _checked(proxy, DoStep(t_k, step_size))
            total = _checked(proxy, GetValues(MessageKind.GET_REAL, (2,))).values[0]
            if total != 3.0:
                raise SessionError(f"iteration {k}: real_c = {total!r}, expected 3.0")
            work = time.monotonic() - began
            overrun = False
            if mode is RunMode.REAL_TIME:
                deadline = wall_start + (k + 1) * step_size
                now = time.monotonic()
                if now < deadline:
                    time.sleep(deadline - now)
                elif now > deadline:
                    overrun = True
            now = time.monotonic()
            records.append(TimingRecord(k, now - prev_mark, overrun))
            prev_mark = now
            steps.append(StepRecord(k, t_k, {"adder.real_c": total}, work))
        _checked(proxy, Terminate())
    finally:
        if proxy.state is InstanceState.STEP_MODE:
            try:
                proxy.forward_call(Terminate())
            except WireError:
                pass
        proxy.free()
    cpu_seconds = time.process_time() - cpu_start
    report = None
    if records:
        report = finalize_report(records, step_size, mode.value,
                                 label=label, cpu_seconds=cpu_seconds)
    result = RunResult(["adder.real_c"], steps, records, report)
    if output_dir is not None:
        _write_outputs(result, output_dir)
    return result


def _format_value(value: Value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return "%.17g" % value
    return str(value)


def write_trajectory_csv(path, labels: Sequence[str],
                         steps: Sequence[StepRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["step", "time", *labels])
        for record in steps:
            writer.writerow([record.step_index, "%.17g" % record.time,
                             *(_format_value(record.outputs[label])
                               for label in labels)])


def _write_outputs(result: RunResult, output_dir) -> None:
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    result.trajectory_path = out / "trajectory.csv"
    write_trajectory_csv(result.trajectory_path, result.labels, result.steps)
    result.timing_path = out / "timing.csv"
    write_timing_csv(result.timing_path, result.records)
    if result.report is not None:
        result.summary_path = out / "summary.json"
        write_report_json(result.summary_path, result.report)
