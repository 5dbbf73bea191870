"""Block-coordinate moving horizon estimation for bearing-only SLAM."""

from .batch import JointArrivalCost, WindowEstimate, batch_cost, joint_correct, joint_predict, run_batch, solve_batch
from .bcd import (BlockArrivalCost, LandmarkSubproblemResult, bcd_correct_landmarks, bcd_correct_state, bcd_predict,
                  run_algorithm1, run_bcd, solve_landmark_subproblem, solve_state_subproblem)
from .dynamics import RobotParams, TimingConfig, WheelRates, f_dis, integrate_exact, integrate_jacobians
from .errors import BcdMheError, ConfigError, DegenerateGeometry, NumericalFailure, SolverFailure
from .estimator import EstimateHistory, EstimatorConfig, dead_reckoning
from .geometry import JointState, Landmark, LandmarkMap, Pose2, bearing_jacobians, bearing_of, rotation_matrix
from .nls import NlsProblem, ResidualBlock, SolveReport, SolverConfig, check_jacobians, solve
from .scenarios import ControlProfile, Environment, ScenarioParams, make_scenario
from .simulator import BearingScan, InertialDisplacement, NoiseConfig, SimulationLog, run_simulation
from .window import MeasurementWindow

__version__ = "0.1.0"
