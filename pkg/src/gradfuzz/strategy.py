"""Node and analysis selection: primary-target sets, loop-head detection,
the Monte Carlo walk from indirect pivots, and recovery from early
termination.

Primary targets live in four collections:

* loop_heads: one representative per input-size bucket of the repeated
  instructions detected along scanned paths,
* processed: open nodes whose sensitivity pass is done (ordered),
* untouched: open nodes not yet touched by any analysis and not sitting
  at a pivot location (same order),
* twins: untouched nodes sharing an execution id with a pivot but with a
  strictly smaller |branching value| (FIFO).

Only uncovered nodes are eligible anywhere.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

from .exec_tree import (
    EdgeLabel,
    ExecTree,
    TreeNode,
    is_indirectly_input_dependent,
    is_open,
)
from .generators import AnalysisKind, identify_typed_variables

_POW2_BUCKETS = [2 ** i for i in range(11)]


# --- orderings -----------------------------------------------------------

def _nearest_bucket(value: float) -> int:
    best = _POW2_BUCKETS[0]
    for w in _POW2_BUCKETS[1:]:
        if abs(value - w) < abs(value - best):
            best = w
    return best


def _center_distance(nbytes: int, max_bytes: int) -> int:
    center = _nearest_bucket(max_bytes / 2)
    return abs(center - _nearest_bucket(nbytes))


def order_su(p: TreeNode, q: TreeNode, max_bytes: int) -> bool:
    """Strict weak order on the processed/untouched sets: analyzed first,
    fewer sensitive bits first, input size near half the maximum first,
    then smaller reads, shallower depth, larger subtree."""
    if p.sensitivity_done != q.sensitivity_done:
        return p.sensitivity_done
    if len(p.sensitive_bits) != len(q.sensitive_bits):
        return len(p.sensitive_bits) < len(q.sensitive_bits)
    dp = _center_distance(p.nbytes, max_bytes)
    dq = _center_distance(q.nbytes, max_bytes)
    if dp != dq:
        return dp < dq
    if p.nbytes != q.nbytes:
        return p.nbytes < q.nbytes
    if p.depth != q.depth:
        return p.depth < q.depth
    return p.height > q.height


def order_iid(p: TreeNode, q: TreeNode, max_bytes: int) -> bool:
    """Strict weak order on a pivot partition class: closest to the
    minimum first, then the same center bias, reads, and depth."""
    if abs(p.value) != abs(q.value):
        return abs(p.value) < abs(q.value)
    dp = _center_distance(p.nbytes, max_bytes)
    dq = _center_distance(q.nbytes, max_bytes)
    if dp != dq:
        return dp < dq
    if p.nbytes != q.nbytes:
        return p.nbytes < q.nbytes
    return p.depth < q.depth


def _smallest(nodes: Sequence[TreeNode],
              before: Callable[[TreeNode, TreeNode], bool]) -> TreeNode:
    best = nodes[0]
    for node in nodes[1:]:
        if before(node, best):
            best = node
    return best


def _sorted_by(nodes: Sequence[TreeNode], before) -> list[TreeNode]:
    def cmp(a, b):
        if before(a, b):
            return -1
        if before(b, a):
            return 1
        return 0

    return sorted(nodes, key=functools.cmp_to_key(cmp))


def biased_index(length: int, rng) -> int:
    """Geometric pick: P(i) = 0.75 * 0.25^i, with the tail mass absorbed
    by the last index."""
    index = 0
    while index < length - 1 and rng.random() >= 0.75:
        index += 1
    return index


# --- loop detection ------------------------------------------------------

@dataclass
class LoopBoundary:
    entry: TreeNode
    exit: TreeNode
    successor: TreeNode


def detect_loops(path: Sequence[TreeNode]
                 ) -> tuple[list[LoopBoundary], dict[int, set[int]]]:
    """Find repetitions of instruction uids along a root path, scanning
    backwards so loop exits are seen first.

    Returns the loop boundaries (entry, exit, successor-of-exit) and a map
    from loop-head uid to the set of uids in its body.
    """
    loops: list[LoopBoundary] = []
    heads2bodies: dict[int, set[int]] = {}
    # stack entries: [exit node, successor node, loops index or None]
    stack: list[list] = []
    lookup: dict[int, int] = {}
    last = len(path) - 1
    for i in range(last, -1, -1):
        uid = path[i].id.uid
        j = min(i + 1, last)
        if uid not in lookup:
            lookup[uid] = len(stack)
            stack.append([path[i], path[j], None])
        else:
            k = lookup[uid]
            if stack[k][2] is None:
                stack[k][2] = len(loops)
                loops.append(LoopBoundary(path[i], stack[k][0], stack[k][1]))
            else:
                loops[stack[k][2]].entry = path[i]
            while len(stack) > k + 1:
                body_uid = stack[-1][0].id.uid
                heads2bodies.setdefault(stack[k][0].id.uid, set()).add(
                    body_uid)
                del lookup[body_uid]
                stack.pop()
    for loop in loops:
        body = heads2bodies.get(loop.exit.id.uid, set())
        while (loop.entry.parent is not None
               and (loop.entry.parent.id.uid == loop.exit.id.uid
                    or loop.entry.parent.id.uid in body)):
            loop.entry = loop.entry.parent
    return loops, heads2bodies


# --- replay generators for the Monte Carlo walk ---------------------------

class UniformStream:
    def __init__(self, rng):
        self.rng = rng

    def next(self) -> float:
        return self.rng.random()


class ReplayStream:
    """Cyclic stream of ``ones`` 1.0s then ``zeros`` 0.0s (or reversed)."""

    def __init__(self, ones: int, zeros: int, ones_first: bool):
        first, second = (1.0, 0.0) if ones_first else (0.0, 1.0)
        count_first = ones if ones_first else zeros
        total = ones + zeros
        self.sequence = [first] * count_first
        self.sequence += [second] * (total - count_first)
        self.position = 0

    def next(self) -> float:
        value = self.sequence[self.position]
        self.position = (self.position + 1) % len(self.sequence)
        return value


def direction_counts(path: Sequence[TreeNode], uid: int) -> tuple[int, int]:
    """(false-successor count, true-successor count) of ``uid`` along a
    path; the final node has no outgoing edge and is not counted."""
    n_false = n_true = 0
    for i in range(len(path) - 1):
        if path[i].id.uid == uid:
            if path[i + 1] is path[i].successor[True]:
                n_true += 1
            else:
                n_false += 1
    return n_false, n_true


def compute_direction_probability(
        class_prime_stats: Sequence[tuple[float, Optional[float]]],
        in_loop_body: bool = False) -> float:
    """Probability of moving to the false successor, from per-pivot
    (|branching value|, false-direction frequency) pairs ordered by
    |value| ascending.  Each frequency is extrapolated along the line
    towards a zero branching value; a loop-body instruction mixes in 0.5
    for variability, and the average is clamped to [0, 1]."""
    values: list[float] = []
    f0, fraction0 = class_prime_stats[0]
    for fi, fraction in class_prime_stats:
        if fraction is None or fraction0 is None:
            continue
        denominator = f0 - fi
        if denominator == 0:
            continue
        t = -fi / denominator
        values.append(fraction + t * (fraction0 - fraction))
    if not values and fraction0 is not None:
        values.append(fraction0)
    if in_loop_body:
        values.append(0.5)
    if not values:
        return 0.5
    return min(1.0, max(0.0, sum(values) / len(values)))


def class_prime_stats(class_prime: Sequence[TreeNode],
                      uid: int) -> list[tuple[float, Optional[float]]]:
    stats = []
    for pivot in class_prime:
        n_false, n_true = direction_counts(pivot.path(), uid)
        total = n_false + n_true
        stats.append((abs(pivot.value),
                      n_false / total if total else None))
    return stats


# --- recovery -------------------------------------------------------------

@dataclass
class RecoveryRecord:
    node: TreeNode
    recorded_at: int


# --- pivot store ------------------------------------------------------------

class PivotStore:
    """Uncovered indirectly-input-dependent nodes, partitioned by uid."""

    def __init__(self):
        self.pivots: list[TreeNode] = []

    def add(self, node: TreeNode) -> None:
        if node not in self.pivots:
            self.pivots.append(node)

    def prune(self) -> None:
        self.pivots = [n for n in self.pivots
                       if not n.covered and is_indirectly_input_dependent(n)]

    def classes(self) -> dict[int, list[TreeNode]]:
        grouped: dict[int, list[TreeNode]] = {}
        for node in self.pivots:
            grouped.setdefault(node.id.uid, []).append(node)
        return grouped

    def locations(self) -> set:
        return {n.id for n in self.pivots}

    def __len__(self) -> int:
        return len(self.pivots)


# --- the selection strategy --------------------------------------------------

@dataclass
class Selection:
    kind: AnalysisKind
    node: TreeNode
    goal_direction: Optional[bool]


class Strategy:
    def __init__(self, tree: ExecTree, rng):
        self.tree = tree
        self.rng = rng
        self.loop_heads: list[TreeNode] = []
        self.processed: list[TreeNode] = []
        self.untouched: list[TreeNode] = []
        self.twins: list[TreeNode] = []
        self.pivots = PivotStore()
        self.recovery_records: list[RecoveryRecord] = []
        self._loop_bodies: dict[TreeNode, set[int]] = {}

    # -- membership predicates -------------------------------------------

    def _eligible(self, node: TreeNode) -> bool:
        return not node.covered and is_open(node)

    def _processed_member(self, node: TreeNode) -> bool:
        return self._eligible(node) and node.sensitivity_done

    def _untouched_member(self, node: TreeNode,
                          pivot_locations: set) -> bool:
        return (self._eligible(node) and not node.sensitivity_done
                and node.id not in pivot_locations)

    def _twin_member(self, node: TreeNode) -> bool:
        if not self._eligible(node) or node.sensitivity_done:
            return False
        return any(node.id == pivot.id and abs(node.value) < abs(pivot.value)
                   for pivot in self.pivots.pivots)

    def prune_targets(self) -> None:
        """Re-check every collection against its membership predicate,
        dropping violators and admitting nodes that became eligible."""
        self.pivots.prune()
        self.loop_heads = [n for n in self.loop_heads if self._eligible(n)]
        self.processed = [n for n in self.tree.nodes
                          if self._processed_member(n)]
        locations = self.pivots.locations()
        self.untouched = [n for n in self.tree.nodes
                          if self._untouched_member(n, locations)]
        kept = [n for n in self.twins if self._twin_member(n)]
        known = set(id(n) for n in kept)
        for node in self.tree.nodes:
            if id(node) not in known and self._twin_member(node):
                kept.append(node)
        self.twins = kept

    def register_examined(self, nodes: Sequence[TreeNode]) -> None:
        """After a sensitivity pass: uncovered IID nodes become pivots."""
        for node in nodes:
            if not node.covered and is_indirectly_input_dependent(node):
                self.pivots.add(node)

    def record_failure(self, node: TreeNode, iteration: int) -> None:
        """A minimization ended without reaching its goal."""
        self.recovery_records.append(RecoveryRecord(node, iteration))

    # -- loop head detection -----------------------------------------------

    def _scan_loop_heads(self, node: TreeNode) -> None:
        path = node.path()
        loops, heads2bodies = detect_loops(path)
        self.detect_loop_heads(path, heads2bodies)
        node.loop_scanned = True

    def detect_loop_heads(self, path: Sequence[TreeNode],
                          heads2bodies: dict[int, set[int]]) -> list[TreeNode]:
        """Bucket open loop-head nodes by the nearest power of two of
        their read count; the smallest node per bucket joins the targets."""
        buckets: dict[int, list[TreeNode]] = {}
        for node in path:
            if not self._eligible(node):
                continue
            if node.id.uid not in heads2bodies:
                continue
            buckets.setdefault(_nearest_bucket(node.nbytes), []).append(node)
        inserted = []
        for w in sorted(buckets):
            nodes = buckets[w]
            best = min(nodes, key=lambda n: (n.nbytes, n.depth))
            if best not in self.loop_heads:
                self.loop_heads.append(best)
                inserted.append(best)
        return inserted

    # -- primary target selection -------------------------------------------

    def select_primary_target(self) -> Optional[TreeNode]:
        max_bytes = self.tree.max_nbytes
        while True:
            if self.loop_heads:
                index = self.rng.randrange(len(self.loop_heads))
                return self.loop_heads.pop(index)
            ordered = None
            for collection in (self.processed, self.untouched):
                if collection:
                    ordered = collection
                    break
            if ordered is not None:
                node = _smallest(
                    ordered, lambda a, b: order_su(a, b, max_bytes))
                if not node.loop_scanned:
                    self._scan_loop_heads(node)
                    continue
                ordered.remove(node)
                return node
            if self.twins:
                node = self.twins[0]
                if not node.loop_scanned:
                    self._scan_loop_heads(node)
                    continue
                self.twins.pop(0)
                return node
            return None

    # -- Monte Carlo walk ------------------------------------------------------

    def _pivot_loop_bodies(self, pivot: TreeNode) -> set[int]:
        if pivot not in self._loop_bodies:
            _, heads2bodies = detect_loops(pivot.path())
            bodies: set[int] = set()
            for body in heads2bodies.values():
                bodies |= body
            self._loop_bodies[pivot] = bodies
        return self._loop_bodies[pivot]

    def monte_carlo_select(self) -> Optional[TreeNode]:
        self.pivots.prune()
        classes = self.pivots.classes()
        if not classes:
            return None
        max_bytes = self.tree.max_nbytes
        uid = self.rng.choice(sorted(classes))
        members = _sorted_by(classes[uid],
                             lambda a, b: order_iid(a, b, max_bytes))
        pivot = members[biased_index(len(members), self.rng)]
        path = pivot.path()
        loops, _ = detect_loops(path)
        entries = sorted((loop.entry for loop in loops),
                         key=lambda n: -n.depth)
        if entries:
            k = entries[biased_index(len(entries), self.rng)].depth
        else:
            k = 0
        if self.tree.root is not None and self.tree.root.closed:
            return None
        while k < len(path) and path[k].closed:
            k += 1
        if k >= len(path):
            return None
        class_prime = [n for n in members if n.nbytes == pivot.nbytes]
        body_uids: set[int] = set()
        for member in class_prime:
            body_uids |= self._pivot_loop_bodies(member)
        domain: set[int] = set()
        for member in classes[uid]:
            domain.update(n.id.uid for n in member.path())
        probabilities: dict[int, float] = {}
        streams: dict[int, object] = {}
        uniform = UniformStream(self.rng)
        for walk_uid in sorted(domain):
            in_body = walk_uid in body_uids
            prob = compute_direction_probability(
                class_prime_stats(class_prime, walk_uid), in_body)
            probabilities[walk_uid] = prob
            if in_body:
                choice = self.rng.randrange(3)
                if choice == 0:
                    streams[walk_uid] = uniform
                else:
                    total = 0
                    for member in class_prime:
                        n_false, n_true = direction_counts(
                            member.path(), walk_uid)
                        total += n_false + n_true
                    ones = round(total * prob)
                    if total == 0:
                        streams[walk_uid] = uniform
                    else:
                        streams[walk_uid] = ReplayStream(
                            ones, total - ones, ones_first=(choice == 1))
            else:
                streams[walk_uid] = uniform
        node = path[k]
        while True:
            prob = probabilities.get(node.id.uid, 0.5)
            stream = streams.get(node.id.uid, uniform)
            direction = prob < stream.next()
            successor = node.successor[direction]
            if successor is not None and not successor.closed:
                node = successor
                continue
            if is_open(node):
                return node
            moved = False
            for b in (False, True):
                successor = node.successor[b]
                if successor is not None and not successor.closed:
                    node = successor
                    moved = True
                    break
            if not moved:
                return None

    # -- recovery ----------------------------------------------------------

    def recover_nodes(self) -> int:
        """Reopen failed-minimization nodes whose best triple has been
        refreshed since the failure; returns how many were reopened."""
        kept: list[RecoveryRecord] = []
        reopened = 0
        for record in self.recovery_records:
            node = record.node
            if node.covered:
                continue
            if record.recorded_at >= node.best_iter:
                kept.append(record)
                continue
            node.sensitivity_done = False
            node.bitshare_done = False
            node.minimization_done = False
            self.tree.reopen(node)
            reopened += 1
        self.recovery_records = kept
        if reopened:
            self.prune_targets()
        return reopened

    # -- analysis selection ----------------------------------------------------

    def _descend_for_sensitivity(self, node: TreeNode) -> TreeNode:
        while True:
            succ = [node.successor[False], node.successor[True]]
            same = [s is not None and s.nbytes == node.nbytes for s in succ]
            if same[0] and same[1]:
                node = succ[0] if succ[0].height >= succ[1].height else succ[1]
            elif same[0]:
                node = succ[0]
            elif same[1]:
                node = succ[1]
            else:
                return node

    def select_analysis(self) -> Optional[Selection]:
        """Pick the next (analysis, node) pair, trying recovery before
        giving up; None means the whole fuzzing loop terminates."""
        self.prune_targets()
        while True:
            node = self.select_primary_target()
            if node is None:
                node = self.monte_carlo_select()
            if node is not None:
                break
            if not self.recover_nodes():
                return None
        if not node.sensitivity_done:
            return Selection(AnalysisKind.SENSITIVITY,
                             self._descend_for_sensitivity(node), None)
        goal = False if node.label[False] == EdgeLabel.NOT_VISITED else True
        if not node.bitshare_done:
            return Selection(AnalysisKind.BITSHARE, node, goal)
        if not node.xor_flag and identify_typed_variables(
                node.best_input, node.best_tags, node.sensitive_bits):
            return Selection(AnalysisKind.TYPED_MINIMIZATION, node, goal)
        return Selection(AnalysisKind.MINIMIZATION, node, goal)
