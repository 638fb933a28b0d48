"""Smart EV charging dispatch on LV distribution networks."""

from .grid import (Bus, Line, Network, NetworkError, Transformer,
                   aggregate_base_load, load_network, save_network)
from .powerflow import (ConvergenceError, CorrectionFactor, LinearGridMap,
                        PowerFlowSolution, build_linear_map,
                        calibrate_correction, solve_sweep)
from .tariff import StackedTariff, build_envelopes, load_prices, network_cost
from .fleet import (ChargeSchedule, ChargingPoint, EvSession, SessionProfile,
                    generate_sessions, soc_step, uncontrolled_schedule)
from .dispatch import (DispatchConfig, DispatchWindow, InfeasibleWindow,
                       assemble, run_rho, solve)
from .evaluate import (StakeholderMetrics, ValidationResult, ViolationCounts,
                       stakeholder_table, transformer_trace, validate)

__version__ = "0.1.0"
