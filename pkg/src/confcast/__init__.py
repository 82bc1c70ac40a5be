"""Delay-bounded multi-party conferencing: tree packing, rate control, simulation."""

from .control import ControlParams, UtilityParams, quickstart_params, rate_update, utility, utility_deriv
from .cut import CriticalCut, critical_cut, subgradient
from .overlay import (
    OverlayLink,
    RateAllocation,
    ReceiverUnreachable,
    Session,
    SessionGraph,
    build_session_graph,
    map_routes,
    zero_allocation,
)
from .sim import (
    ConfigError,
    MetricsRow,
    OverheadConfig,
    OverheadEstimate,
    ScenarioEvent,
    SimParams,
    Simulation,
    estimate_overhead,
    mutualcast_max,
    run,
    simulcast_max,
)
from .treepack import Tree, TreeSet, min_min_cut, pack_trees, per_receiver_cut, tree_delay
from .underlay import (
    NoPathError,
    PhysLink,
    Route,
    UnderlayGraph,
    compute_route,
    link_load,
    loss_fraction,
    overlay_loss,
    overlay_prop_delay,
    overlay_queue_delay,
    price_step,
)

__version__ = "0.1.0"
