"""A small MILP engine: model builder, LP relaxations, branch and bound."""
from .bnb import (
    STATUS_GAP,
    STATUS_INFEASIBLE,
    STATUS_NODES,
    STATUS_OPTIMAL,
    STATUS_TIME,
    STATUS_UNBOUNDED,
    MilpSolution,
    SolveOptions,
    branch_and_bound,
    relative_gap,
)
from .check import Violation, check_solution, sos2_ok
from .lp import LpResult, make_relaxation, solve_lp_relaxation
from .model import BINARY, CONTINUOUS, EQ, GE, LE, MilpModel, QuadCap

__all__ = [
    "BINARY", "CONTINUOUS", "EQ", "GE", "LE",
    "LpResult", "MilpModel", "MilpSolution", "QuadCap", "SolveOptions", "Violation",
    "STATUS_GAP", "STATUS_INFEASIBLE", "STATUS_NODES", "STATUS_OPTIMAL", "STATUS_TIME", "STATUS_UNBOUNDED",
    "branch_and_bound", "check_solution", "make_relaxation", "relative_gap", "solve_lp_relaxation", "sos2_ok",
]
