"""Plans, offline dealing, live runs, event schedules and the network simulator."""

from .plan import MODES, PROTOCOLS, ExecutionPlan, PlanError, Policy, RangeBoundError, Step, build_plan
from .runtime import Metrics, PartyBundle, RunError, RunResult, deal, execute, load_bundle, master_seed, run, run_party, save_bundle
from .schedule import DEFAULT_NS_PER_MAC, CostModel, Event, EventProgram, Timeline, calibrate, schedule, simulate
