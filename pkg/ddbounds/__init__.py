from __future__ import annotations

from importlib import metadata

from ddbounds.bounds import BoundsRecord
from ddbounds.bounds import GoalRecord
from ddbounds.bounds import QuantityOfInterest
from ddbounds.bounds import estimate
from ddbounds.bounds import extractor_qoi
from ddbounds.bounds import goal_bounds
from ddbounds.bounds import ihh2_bound
from ddbounds.bounds import kappa
from ddbounds.bounds import lower_bounds
from ddbounds.bounds import upper_bounds
from ddbounds.ddsolver import IterationFields
from ddbounds.ddsolver import SolverConfig
from ddbounds.ddsolver import project_directions
from ddbounds.ddsolver import solve_augmented
from ddbounds.ddsolver import solve_block
from ddbounds.ddsolver import solve_interface
from ddbounds.driver import AdaptivePlan
from ddbounds.driver import RunReport
from ddbounds.driver import StopPolicy
from ddbounds.driver import emit_reports
from ddbounds.driver import load_report
from ddbounds.driver import run_adaptive
from ddbounds.driver import run_global_benchmark
from ddbounds.fem import LoadSet
from ddbounds.fem import Material
from ddbounds.mesh import Mesh
from ddbounds.mesh import Partition
from ddbounds.mesh import Refinement
from ddbounds.mesh import StarPatch
from ddbounds.recovery import AdmissibleRecovery
from ddbounds.recovery import recover
from ddbounds.substructure import split_problem

__title__ = __name__
__version__ = metadata.version(__title__)

__all__ = (
    "AdaptivePlan",
    "AdmissibleRecovery",
    "BoundsRecord",
    "GoalRecord",
    "IterationFields",
    "LoadSet",
    "Material",
    "Mesh",
    "Partition",
    "QuantityOfInterest",
    "Refinement",
    "RunReport",
    "SolverConfig",
    "StarPatch",
    "StopPolicy",
    "emit_reports",
    "estimate",
    "extractor_qoi",
    "goal_bounds",
    "ihh2_bound",
    "kappa",
    "load_report",
    "lower_bounds",
    "project_directions",
    "recover",
    "run_adaptive",
    "run_global_benchmark",
    "solve_augmented",
    "solve_block",
    "solve_interface",
    "split_problem",
    "upper_bounds",
)
