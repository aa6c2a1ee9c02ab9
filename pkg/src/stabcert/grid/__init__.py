from .case import (IBR, Bus, CaseError, Generator, Line, Load, PowerSystemCase, case_from_dict,
                   case_to_dict, load_case, save_case)
from .powerflow import (OperatingPoint, PowerFlowError, branch_flows, make_ybus,
                        power_balance_residual, solve_power_flow)
from .tds import (FaultScenario, TopologyError, Trajectory, compute_tsi, load_fault,
                  max_angle_gap, run_tds, simulate_tsi, tsi_from_gap)

__all__ = [
    "IBR", "Bus", "CaseError", "Generator", "Line", "Load", "PowerSystemCase", "case_from_dict",
    "case_to_dict", "load_case", "save_case", "OperatingPoint", "PowerFlowError", "branch_flows",
    "make_ybus", "power_balance_residual", "solve_power_flow", "FaultScenario", "TopologyError",
    "Trajectory", "compute_tsi", "load_fault", "max_angle_gap", "run_tds", "simulate_tsi",
    "tsi_from_gap",
]
