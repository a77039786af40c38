"""D-STR: distributed TDMA slot allocation for UAV formations, with a
slot-synchronous simulator, a greedy reference allocator and a sweep harness."""

__version__ = "0.1.0"

from .baseline import CentralSchedule, greedy_allocate  # noqa: E402
from .engine import RunResult, Scenario, Simulation, run, validate_allocation  # noqa: E402
from .protocol import ProtocolParams, UavState  # noqa: E402
from .topology import Formation, gen_hex_grid, gen_hex_rings, gen_single_hop  # noqa: E402

__all__ = [
    "CentralSchedule", "Formation", "ProtocolParams", "RunResult", "Scenario", "Simulation",
    "UavState", "gen_hex_grid", "gen_hex_rings", "gen_single_hop", "greedy_allocate", "run",
    "validate_allocation",
]
