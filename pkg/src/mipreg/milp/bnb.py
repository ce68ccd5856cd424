"""Best-first branch and bound over binaries and sos2 sets with lazy cap cuts."""
from __future__ import annotations

import csv
import heapq
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .check import check_solution, sos2_excess
from .lp import INFEASIBLE, OPTIMAL, UNBOUNDED, make_relaxation
from .model import INT_TOL, SOS_TOL, MilpModel

log = logging.getLogger(__name__)

STATUS_OPTIMAL = "Optimal"
STATUS_GAP = "GapReached"
STATUS_TIME = "TimeLimit"
STATUS_NODES = "NodeLimit"
STATUS_INFEASIBLE = "Infeasible"
STATUS_UNBOUNDED = "Unbounded"

# heuristic(values) -> improved values or None
Heuristic = Callable[[np.ndarray], Optional[np.ndarray]]


@dataclass
class SolveOptions:
    gap_tolerance: float = 1e-4
    abs_gap_tolerance: float = 1e-9
    time_limit_s: float = math.inf
    node_limit: int | None = None
    heuristic: Heuristic | None = None
    # also offer every k-th node's LP point to the heuristic (0 = only incumbents and root)
    heuristic_node_interval: int = 0
    # cheap repair of every node LP point (same contract as heuristic)
    rounding: Heuristic | None = None
    initial_solutions: Sequence[np.ndarray] = ()
    seed: int = 0
    lp_backend: str = "highs"
    max_cut_rounds: int = 200
    # prune nodes whose bound is not below this value (no incumbent needed)
    cutoff: float = math.inf
    # quad caps are enforced by cuts up to this violation
    cap_tol: float = 1e-8
    node_log_path: str | None = None

    def __post_init__(self):
        if self.gap_tolerance < 0:
            raise ValueError("gap_tolerance must be >= 0")


@dataclass
class MilpSolution:
    status: str
    values: np.ndarray | None
    objective: float
    lower_bound: float
    gap: float
    node_count: int
    incumbents: list[tuple[np.ndarray, float]] = field(default_factory=list)
    cuts: list[tuple[np.ndarray, np.ndarray, float]] = field(default_factory=list)
    node_log: list[tuple[int, int, float, float]] = field(default_factory=list)
    wall_time_s: float = 0.0
    heuristic_calls: int = 0

    @property
    def has_solution(self) -> bool:
        return self.values is not None


def relative_gap(objective: float, lower_bound: float) -> float:
    if not math.isfinite(objective):
        return math.inf
    if not math.isfinite(lower_bound):
        return math.inf
    return max(0.0, (objective - lower_bound) / max(abs(objective), 1e-9))


@dataclass(order=True)
class _Node:
    bound: float
    neg_depth: int
    seq: int
    changes: tuple = field(compare=False, default=())
    depth: int = field(compare=False, default=0)


class BranchAndBound:
    def __init__(self, model: MilpModel, options: SolveOptions):
        model.validate()
        self.model = model
        self.opt = options
        self.relax = make_relaxation(model, options.lp_backend)
        self.root_lb = np.asarray(model.lb, dtype=float)
        self.root_ub = np.asarray(model.ub, dtype=float)
        self.binaries = model.binary_ids()
        self.floor = -math.inf if model.objective_floor is None else float(model.objective_floor)
        self.inc_x: np.ndarray | None = None
        self.inc_obj = math.inf
        self.incumbents: list[tuple[np.ndarray, float]] = []
        self.cuts: list[tuple[np.ndarray, np.ndarray, float]] = []
        self.node_log: list[tuple[int, int, float, float]] = []
        self.seq = 0
        self.nodes_done = 0
        self.pruned_bound = math.inf
        self.unresolved_bound = math.inf
        self.heuristic_calls = 0

    # -- helpers ----------------------------------------------------------
    def _prune_tol(self) -> float:
        if not math.isfinite(self.inc_obj):
            return 0.0
        return max(self.opt.gap_tolerance * max(abs(self.inc_obj), 1e-9), self.opt.abs_gap_tolerance)

    def _prune_level(self) -> float:
        return min(self.inc_obj - self._prune_tol(), self.opt.cutoff)

    def _bounds(self, changes):
        lb = self.root_lb.copy()
        ub = self.root_ub.copy()
        for var, lo, hi in changes:
            lb[var] = max(lb[var], lo)
            ub[var] = min(ub[var], hi)
        return lb, ub

    def _try_incumbent(self, x, source: str) -> bool:
        """Accept ``x`` if it is feasible and strictly better than the incumbent."""
        if x is None:
            return False
        x = np.asarray(x, dtype=float)
        if x.shape != (self.model.n_vars,):
            log.debug("rejected %s point with wrong shape %s", source, x.shape)
            return False
        obj = self.model.evaluate(x)
        if not obj < self.inc_obj - 1e-12:
            return False
        violations = check_solution(self.model, x, cap_tol=self.opt.cap_tol)
        if violations:
            log.debug("rejected %s point: %d violation(s), first %s", source, len(violations), violations[0])
            return False
        self.inc_x = x.copy()
        self.inc_obj = obj
        self.incumbents.append((self.inc_x, obj))
        log.debug("incumbent %.12g from %s", obj, source)
        return True

    def _call_heuristic(self, x, h=None, source="heuristic") -> bool:
        h = self.opt.heuristic if h is None else h
        if h is None or x is None:
            return False
        if source == "heuristic":
            self.heuristic_calls += 1
        try:
            y = h(np.array(x, dtype=float))
        except Exception:  # a failing heuristic must not abort the search
            log.exception("%s raised; ignoring", source)
            return False
        return y is not None and self._try_incumbent(y, source)

    def _fractional_binary(self, x):
        if not len(self.binaries):
            return None
        frac = np.abs(x[self.binaries] - np.round(x[self.binaries]))
        k = int(np.argmax(frac))
        if frac[k] <= INT_TOL:
            return None
        # most fractional = closest to 0.5; argmin of distance keeps the lowest id on ties
        dist = np.abs(x[self.binaries] - 0.5)
        dist[frac <= INT_TOL] = np.inf
        return int(self.binaries[int(np.argmin(dist))])

    def _violated_sos2(self, x):
        best, best_excess = None, SOS_TOL
        for k, ids in enumerate(self.model.sos2_sets):
            v = x[ids]
            nz = np.flatnonzero(np.abs(v) > SOS_TOL)
            if len(nz) <= 1 or (len(nz) == 2 and nz[1] - nz[0] == 1):
                continue
            e = sos2_excess(x, ids)
            if best is None or e > best_excess + 1e-15:
                best, best_excess = k, e
        return best

    def _sos2_children(self, x, k):
        ids = self.model.sos2_sets[k]
        w = np.abs(x[ids])
        nz = np.flatnonzero(w > SOS_TOL)
        lo, hi = int(nz[0]), int(nz[-1])
        centre = float((np.arange(len(ids)) * w).sum() / w.sum())
        # a violated set always spans hi - lo >= 2, so both children cut x off
        split = int(min(max(round(centre), lo + 1), hi - 1))
        left = tuple((int(i), 0.0, 0.0) for i in ids[split + 1:])
        right = tuple((int(i), 0.0, 0.0) for i in ids[:split])
        return left, right

    def _polish(self, x, lb, ub):
        """Fix binaries and sos2 supports at their rounded values and re-solve."""
        lb = lb.copy()
        ub = ub.copy()
        if len(self.binaries):
            r = np.round(x[self.binaries])
            lb[self.binaries] = r
            ub[self.binaries] = r
        for ids in self.model.sos2_sets:
            v = np.abs(x[ids])
            j = int(np.argmax(v[:-1] + v[1:]))
            zero = np.concatenate([ids[:j], ids[j + 2:]])
            ub[zero] = np.minimum(ub[zero], 0.0)
        if np.any(lb > ub):
            return None
        res = self.relax.solve(lb, ub)
        return res if res.status == OPTIMAL else None

    def _separate(self, x) -> int:
        new = []
        for cap in self.model.quad_caps:
            if cap.value(x) - cap.c > self.opt.cap_tol:
                new.append(cap.tangent_cut(x))
        if new:
            self.relax.add_cuts(new)
            self.cuts.extend(new)
        return len(new)

    # -- main loop --------------------------------------------------------
    def solve(self) -> MilpSolution:
        t0 = time.perf_counter()
        opt = self.opt
        for x in opt.initial_solutions:
            self._try_incumbent(x, "initial")
            # injected starts are usually good; let the heuristic polish each one
            self._call_heuristic(x)
        heap: list[_Node] = [_Node(-math.inf, 0, 0)]
        status = None
        root = True
        while heap:
            if time.perf_counter() - t0 > opt.time_limit_s:
                status = STATUS_TIME
                break
            if opt.node_limit is not None and self.nodes_done >= opt.node_limit:
                status = STATUS_NODES
                break
            node = heap[0]
            if node.bound >= self._prune_level():
                # every open node is within tolerance of the incumbent
                self.pruned_bound = min(self.pruned_bound, node.bound)
                heap = []
                break
            heapq.heappop(heap)
            outcome = self._process(node, heap, root)
            root = False
            if outcome == UNBOUNDED:
                return self._finish(STATUS_UNBOUNDED, heap, t0)
            self.nodes_done += 1
            lb_now = min([n.bound for n in heap] + [self.pruned_bound, self.unresolved_bound, self.inc_obj])
            self.node_log.append((self.nodes_done, node.depth, max(lb_now, self.floor), self.inc_obj))
        return self._finish(status, heap, t0)

    def _process(self, node: _Node, heap, root: bool):
        opt = self.opt
        lb, ub = self._bounds(node.changes)
        if np.any(lb > ub):
            return INFEASIBLE
        for _round in range(opt.max_cut_rounds + 1):
            res = self.relax.solve(lb, ub)
            if res.status == INFEASIBLE:
                return INFEASIBLE
            if res.status == UNBOUNDED:
                return UNBOUNDED
            x = res.x
            bound = max(res.objective, self.floor, node.bound)
            if opt.rounding is not None and bound < self._prune_level():
                if self._call_heuristic(x, opt.rounding, "rounding"):
                    self._call_heuristic(self.inc_x)
            if root or (opt.heuristic_node_interval and self.nodes_done % opt.heuristic_node_interval == 0):
                self._call_heuristic(x)
                root = False
            if bound >= self._prune_level():
                self.pruned_bound = min(self.pruned_bound, bound)
                return "pruned"
            var = self._fractional_binary(x)
            if var is not None:
                self._push(heap, node, bound, ((var, 0.0, 0.0),), ((var, 1.0, 1.0),))
                return "branched"
            k = self._violated_sos2(x)
            if k is not None:
                left, right = self._sos2_children(x, k)
                self._push(heap, node, bound, left, right)
                return "branched"
            polished = self._polish(x, lb, ub)
            if polished is None:
                # rounding broke feasibility; fall back to the tightest binary split
                var = self._closest_binary(x)
                if var is None:
                    return INFEASIBLE
                self._push(heap, node, bound, ((var, 0.0, 0.0),), ((var, 1.0, 1.0),))
                return "branched"
            if self._separate(polished.x) or self._separate(x):
                continue
            if self._try_incumbent(polished.x, "node"):
                self._call_heuristic(self.inc_x)
            return "integral"
        # cut loop did not converge: keep the bound honest but drop the node
        log.warning("cap separation did not converge at node depth %d", node.depth)
        self.unresolved_bound = min(self.unresolved_bound, bound)
        return "unresolved"

    def _closest_binary(self, x):
        if not len(self.binaries):
            return None
        frac = np.abs(x[self.binaries] - np.round(x[self.binaries]))
        if frac.max() <= 0.0:
            return None
        return int(self.binaries[int(np.argmax(frac))])

    def _push(self, heap, parent: _Node, bound, *children):
        for ch in children:
            self.seq += 1
            heapq.heappush(heap, _Node(bound, -(parent.depth + 1), self.seq, parent.changes + ch, parent.depth + 1))

    def _finish(self, status, heap, t0) -> MilpSolution:
        """``status`` is None when the tree was exhausted or pruned to tolerance."""
        open_bound = min([n.bound for n in heap], default=math.inf)
        if status == STATUS_UNBOUNDED:
            lb = -math.inf
        else:
            lb = min(open_bound, self.pruned_bound, self.unresolved_bound, self.inc_obj)
            lb = min(max(lb, self.floor), self.inc_obj)
        if status is None:
            if self.inc_x is None:
                status = STATUS_INFEASIBLE
            elif lb >= self.inc_obj - 1e-12 * max(1.0, abs(self.inc_obj)):
                status = STATUS_OPTIMAL
            elif (self.inc_obj - lb) <= self._prune_tol():
                status = STATUS_GAP
            else:
                # unresolved cut loops left a hole in the proof
                status = STATUS_NODES
        gap = relative_gap(self.inc_obj, lb)
        sol = MilpSolution(
            status=status,
            values=None if self.inc_x is None else self.inc_x.copy(),
            objective=self.inc_obj,
            lower_bound=lb,
            gap=gap,
            node_count=self.nodes_done,
            incumbents=list(self.incumbents),
            cuts=list(self.cuts),
            node_log=list(self.node_log),
            wall_time_s=time.perf_counter() - t0,
            heuristic_calls=self.heuristic_calls,
        )
        if self.opt.node_log_path:
            write_node_log(self.opt.node_log_path, sol.node_log)
        return sol


def branch_and_bound(model: MilpModel, options: SolveOptions | None = None) -> MilpSolution:
    """Solve ``model`` to ``options.gap_tolerance`` (relative) optimality."""
    return BranchAndBound(model, options or SolveOptions()).solve()


def write_node_log(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["node", "depth", "bound", "incumbent"])
        for node, depth, bound, inc in rows:
            w.writerow([node, depth, f"{bound:.12g}", f"{inc:.12g}"])
