"""Deterministic V2V truck-platooning simulator and per-role safety harness.

The package is organized along the system it models:

* :mod:`platoonsim.protocol` - message types, wire codec, join handshake,
  role state machine;
* :mod:`platoonsim.vehicle` - longitudinal dynamics, forward sensor, CACC
  and leader driver models, per-role decision-and-control logic;
* :mod:`platoonsim.channel` - simulated V2V/I2V medium with latency,
  jitter, loss and congestion;
* :mod:`platoonsim.scenario` - scenario data model, the .scn file format
  and the simulation world;
* :mod:`platoonsim.assessment` - the four test modes (sensor,
  communication, open loop, closed loop) and trace metrics;
* :mod:`platoonsim.cli` - the ``platoonsim`` command-line front end.

Bundled example scenarios live under ``platoonsim/scenarios/``.
"""

from importlib import resources

from .assessment import (
    InputLog,
    OpenLoopResult,
    RunSettings,
    SafetyReport,
    Thresholds,
    Trace,
    derive_row_seed,
    evaluate_metrics,
    extract_input_log,
    run_closed_loop,
    run_comm_test,
    run_open_loop,
    run_sensor_test,
    string_stability_probe,
)
from .channel import Channel, ChannelConfig, NonAdjacentDestination, environment_modifier
from .protocol import (
    BROADCAST,
    INFRASTRUCTURE,
    ControlMessage,
    I2VAdvisory,
    JoinReason,
    JoinRequest,
    JoinResponse,
    MalformedMessage,
    ManagementKind,
    ManagementMessage,
    Message,
    PlatoonConfig,
    Role,
    RoleEvent,
    TrailingView,
    apply_platoon_update,
    decode_message,
    encode_message,
    handle_join_request,
    iter_decode,
    role_for_index,
    role_transition,
)
from .scenario import (
    EnvironmentConditions,
    RoleNotRealizable,
    Scenario,
    ScenarioEvent,
    ScenarioSyntaxError,
    ScenarioValidationError,
    World,
    fire_events,
    instantiate_for_role,
    parse_scenario,
    realizable_roles,
    serialize_scenario,
)
from .vehicle import (
    AccelCommand,
    ControllerGains,
    ControllerMode,
    FallbackParams,
    Measurement,
    NegativeGap,
    NoInput,
    TruckParams,
    TruckState,
    cacc_command,
    compute_thw,
    compute_ttc,
    dcl_step,
    fallback_policy,
    leader_driver_model,
    predict_first_contact,
    sensor_measure,
    step_dynamics,
)

__version__ = "0.1.0"


def bundled_scenario_path(name: str):
    """Filesystem path of a bundled scenario, e.g. 'traffic_jam_tail.scn'."""
    return resources.files("platoonsim") / "scenarios" / name


def load_bundled_scenario(name: str) -> Scenario:
    return parse_scenario(bundled_scenario_path(name).read_text())
