"""Operator entry points.

Five subcommands: ``master`` runs a scenario against already-started
backends, ``backend`` serves one model to a waiting proxy, ``demo1`` and
``demo2`` run the two bundled end-to-end demonstrations on loopback
(spawning their own backend processes), and ``report`` compares saved
timing summaries.

Exit codes: 0 success, 1 validation error, 2 runtime or protocol error,
3 authentication rejected.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import secrets
import shlex
import subprocess
import sys
import time
from typing import Optional, Sequence

from .backend import AuthenticationRejected, BackendConfig, connect_and_serve
from .descriptor import DescriptorError, ScenarioConfig, parse_scenario
from .master import (
    RunMode,
    RunResult,
    SessionError,
    initialize_session,
    scripted_run_demo1,
)
from .metrics import compare_runs, comparison_csv, format_report, load_report_json
from .models import MODEL_REGISTRY, create_model, packaged_descriptor_text
from .proxy import InstantiationError
from .wire import WireError

log = logging.getLogger("cosimlink.cli")

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2
EXIT_AUTH = 3

DEMO_BASE_PORT = 7001
TOKEN_ENV_VAR = "COSIM_TOKEN"

DEMO2_UNIT_NAMES = ("controller", "motor", "generator")
DEMO2_CONNECTIONS = (
    {"source": "controller.tau_cmd", "target": "motor.tau_cmd_in"},
    {"source": "motor.tau_mot", "target": "generator.tau_in"},
    {"source": "generator.omega", "target": "controller.omega_meas"},
)


class _Parser(argparse.ArgumentParser):
    # Usage problems are validation errors; argparse's default exit code is not.
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def _parse_address(raw: str) -> tuple[str, int]:
    host, sep, port_text = raw.rpartition(":")
    if not sep or not host:
        raise ValueError(f"{raw!r} is not of the form host:port")
    port = int(port_text)
    if not 1 <= port <= 65535:
        raise ValueError(f"port {port} outside 1..65535")
    return host, port


def _resolve_token(flag_value: Optional[str]) -> Optional[str]:
    if flag_value is not None:
        return flag_value
    return os.environ.get(TOKEN_ENV_VAR)


def demo2_scenario(step_size: float = 0.1, end_time: float = 50.0,
                   base_port: int = DEMO_BASE_PORT, token: str = "",
                   real_time: bool = False,
                   host: str = "127.0.0.1") -> ScenarioConfig:
    """The bundled three-unit closed-loop scenario, fully validated."""
    from .descriptor import parse_descriptor
    descriptors = {
        name: parse_descriptor(packaged_descriptor_text(f"demo2_{name}.json"))
        for name in DEMO2_UNIT_NAMES}
    doc = {
        "units": [
            {"unit_name": name, "descriptor": f"demo2_{name}.json",
             "listen": f"{host}:{base_port + i}", "token": token}
            for i, name in enumerate(DEMO2_UNIT_NAMES)],
        "connections": list(DEMO2_CONNECTIONS),
        "step_size": step_size,
        "start_time": 0.0,
        "end_time": end_time,
        "real_time": real_time,
        "output_path": "demo2_results",
    }
    return parse_scenario(json.dumps(doc), descriptors)


class _BackendProcesses:
    """Child backend processes a demo spawns and must always reap."""

    def __init__(self, token: str):
        self.token = token
        self.children: list[subprocess.Popen] = []

    def spawn(self, argv: list[str]):
        env = dict(os.environ)
        env[TOKEN_ENV_VAR] = self.token
        self.children.append(subprocess.Popen(argv, env=env))

    def default_argv(self, model: str, address: tuple[str, int],
                     delay_ms: int = 0) -> list[str]:
        argv = [sys.executable, "-m", "cosimlink", "backend",
                "--model", model,
                "--connect", f"{address[0]}:{address[1]}",
                "--name", model]
        if delay_ms:
            argv += ["--delay-ms", str(delay_ms)]
        return argv

    def reap(self) -> None:
        deadline = time.monotonic() + 10.0
        for child in self.children:
            try:
                child.wait(timeout=max(0.1, deadline - time.monotonic()))
            except subprocess.TimeoutExpired:
                child.kill()
                child.wait()


def _emit_result(result: RunResult, as_json: bool) -> None:
    if result.report is None:
        print("no steps executed")
        return
    if as_json:
        print(json.dumps(result.report.to_json_dict()))
    else:
        print(format_report(result.report))
    for path in (result.trajectory_path, result.timing_path,
                 result.summary_path):
        if path is not None:
            print(f"wrote {path}")


# -- subcommand handlers -----------------------------------------------------

def _cmd_master(args) -> int:
    from .descriptor import load_scenario
    scenario = load_scenario(args.scenario)
    if args.mode is not None:
        mode = RunMode(args.mode)
    else:
        mode = RunMode.REAL_TIME if scenario.real_time else RunMode.AS_FAST_AS_POSSIBLE
    session = initialize_session(scenario,
                                 accept_timeout=args.accept_timeout,
                                 call_timeout=args.call_timeout)
    output_dir = args.output or scenario.output_path or None
    result = session.run(mode, output_dir=output_dir, label=args.label)
    _emit_result(result, args.json)
    return EXIT_OK


def _cmd_backend(args) -> int:
    token = _resolve_token(args.token)
    if token is None:
        print(f"backend: no --token given and {TOKEN_ENV_VAR} is unset",
              file=sys.stderr)
        return EXIT_VALIDATION
    model = create_model(args.model)
    config = BackendConfig(
        proxy_address=_parse_address(args.connect),
        instance_name=args.name or args.model,
        auth_token=token,
        reply_delay_ms=args.delay_ms,
    )
    report = connect_and_serve(model, config)
    print(report.to_json())
    return EXIT_OK if report.clean_exit else EXIT_RUNTIME


def _cmd_demo1(args) -> int:
    token = _resolve_token(args.token) or secrets.token_hex(16)
    address = ("127.0.0.1", args.port)
    children = _BackendProcesses(token)

    def launch():
        if args.backend_cmd:
            children.spawn(shlex.split(args.backend_cmd))
        else:
            children.spawn(children.default_argv("adder", address))

    try:
        result = scripted_run_demo1(
            address, token,
            iterations=args.iterations,
            step_size=args.step_size,
            mode=RunMode(args.mode),
            accept_timeout=args.accept_timeout,
            on_instantiating=launch,
            output_dir=args.output,
            label=args.label or "demo1",
        )
    finally:
        children.reap()
    _emit_result(result, args.json)
    return EXIT_OK


def _cmd_demo2(args) -> int:
    token = _resolve_token(args.token) or secrets.token_hex(16)
    scenario = demo2_scenario(step_size=args.step_size, end_time=args.end_time,
                              base_port=args.base_port, token=token,
                              real_time=args.mode == "real-time")
    children = _BackendProcesses(token)

    def launch(unit):
        children.spawn(children.default_argv(
            unit.unit_name, unit.listen_address, delay_ms=args.delay_ms))

    try:
        session = initialize_session(scenario,
                                     accept_timeout=args.accept_timeout,
                                     on_unit_instantiating=launch)
        result = session.run(RunMode(args.mode), output_dir=args.output,
                             label=args.label or "demo2")
    finally:
        children.reap()
    _emit_result(result, args.json)
    return EXIT_OK


def _cmd_report(args) -> int:
    reports = [load_report_json(path) for path in args.paths]
    if len(reports) < 2:
        print("report: need at least two summary files to compare",
              file=sys.stderr)
        return EXIT_VALIDATION
    if args.csv:
        print(comparison_csv(reports), end="")
    else:
        print(compare_runs(reports))
    return EXIT_OK


# -- argument plumbing -------------------------------------------------------

def _add_mode_flag(parser, default: Optional[str]):
    parser.add_argument("--mode", choices=[m.value for m in RunMode],
                        default=default,
                        help="pacing: 'fast' runs flat out, 'real-time' "
                             "paces each step to the step size")


def _add_run_output_flags(parser):
    parser.add_argument("--output", metavar="DIR", default=None,
                        help="directory for trajectory.csv, timing.csv, "
                             "summary.json")
    parser.add_argument("--label", default="",
                        help="run label used in summaries and comparisons")
    parser.add_argument("--json", action="store_true",
                        help="print the timing summary as one JSON object")
    parser.add_argument("--accept-timeout", type=float, default=30.0,
                        metavar="S", help="seconds to wait for each backend")


def build_parser() -> _Parser:
    parser = _Parser(prog="cosimlink",
                     description="Distributed co-simulation over "
                                 "reverse TCP connections.")
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    p_master = sub.add_parser("master", help="orchestrate a scenario file")
    p_master.add_argument("scenario", help="scenario JSON path")
    _add_mode_flag(p_master, default=None)
    p_master.add_argument("--call-timeout", type=float, default=30.0,
                          metavar="S", help="per-call reply timeout")
    _add_run_output_flags(p_master)
    p_master.set_defaults(handler=_cmd_master)

    p_backend = sub.add_parser("backend", help="serve one model to a proxy")
    p_backend.add_argument("--model", required=True,
                           choices=sorted(MODEL_REGISTRY),
                           help="built-in model to serve")
    p_backend.add_argument("--connect", required=True, metavar="HOST:PORT",
                           help="proxy address to dial")
    p_backend.add_argument("--token", default=None,
                           help=f"shared secret (falls back to {TOKEN_ENV_VAR})")
    p_backend.add_argument("--name", default=None,
                           help="instance name (defaults to the model name)")
    p_backend.add_argument("--delay-ms", type=int, default=0, metavar="MS",
                           help="artificial delay before every reply")
    p_backend.set_defaults(handler=_cmd_backend)

    p_demo1 = sub.add_parser(
        "demo1", help="single adder unit, scripted write/step/read loop")
    p_demo1.add_argument("--iterations", type=int, default=1000,
                         help="number of write/step/read iterations")
    p_demo1.add_argument("--step-size", type=float, default=0.01, metavar="S")
    _add_mode_flag(p_demo1, default="fast")
    p_demo1.add_argument("--port", type=int, default=DEMO_BASE_PORT,
                         help="loopback port for the adder proxy")
    p_demo1.add_argument("--token", default=None,
                         help="shared secret (default: generated per run)")
    p_demo1.add_argument("--backend-cmd", default=None, metavar="CMD",
                         help="full backend command line to spawn instead of "
                              "the built-in adder backend; the token is "
                              f"passed in {TOKEN_ENV_VAR}")
    _add_run_output_flags(p_demo1)
    p_demo1.set_defaults(handler=_cmd_demo1)

    p_demo2 = sub.add_parser(
        "demo2", help="three-unit closed loop: controller, motor, generator")
    p_demo2.add_argument("--step-size", type=float, default=0.1, metavar="S")
    p_demo2.add_argument("--end-time", type=float, default=50.0, metavar="S")
    _add_mode_flag(p_demo2, default="fast")
    p_demo2.add_argument("--delay-ms", type=int, default=0, metavar="MS",
                         help="artificial reply delay for every backend")
    p_demo2.add_argument("--base-port", type=int, default=DEMO_BASE_PORT,
                         help="first of three consecutive loopback ports")
    p_demo2.add_argument("--token", default=None,
                         help="shared secret (default: generated per run)")
    _add_run_output_flags(p_demo2)
    p_demo2.set_defaults(handler=_cmd_demo2)

    p_report = sub.add_parser("report", help="compare saved timing summaries")
    p_report.add_argument("paths", nargs="+", metavar="SUMMARY_JSON")
    p_report.add_argument("--csv", action="store_true",
                          help="emit the comparison as CSV instead of a table")
    p_report.set_defaults(handler=_cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if os.environ.get("COSIM_VERBOSE") else logging.WARNING,
        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.handler(args)
    except AuthenticationRejected as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_AUTH
    except (DescriptorError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (InstantiationError, SessionError, WireError, ConnectionError,
            OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return EXIT_RUNTIME
