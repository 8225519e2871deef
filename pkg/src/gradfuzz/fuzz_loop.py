"""Top-level fuzzing loop, test-suite collection, and the post-run
optimizer.

The run starts with the empty input.  Every later input comes from the
active analysis session; when a session deactivates (strategy finished,
budget exceeded, or its goal direction was observed) its flags are
stamped, the target sets are pruned, closedness is propagated, and the
strategy picks the next session.  A test is kept when it observed a new
(uid, direction) pair, or crashed, or is the initial empty input; kept
tests replay to exactly the recorded coverage.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .exec_tree import EdgeLabel, ExecTree
from .generators import (
    AnalysisKind,
    AnalysisSession,
    BinaryDescentSession,
    BitshareSession,
    BitshareStore,
    SensitivitySession,
    TypedDescentSession,
    identify_typed_variables,
)
from .minivm import Program, VmLimits
from .strategy import Selection, Strategy
from .target_abi import (
    ExecutionConfig,
    ExecutionResult,
    TerminationKind,
    TypeTag,
)

OPTIMIZER_SCALE = {"trace": 32, "stack": 4, "input": 4, "steps": 32}

_BOOTSTRAP = "bootstrap"
_OPTIMIZER = "optimizer"


@dataclass(frozen=True)
class FuzzBudget:
    max_executions: Optional[int] = None
    max_seconds: Optional[float] = None

    def __post_init__(self) -> None:
        if self.max_executions is None and self.max_seconds is None:
            raise ValueError("at least one budget bound must be set")


@dataclass
class FuzzOptions:
    limits: VmLimits = field(default_factory=VmLimits)
    fill_byte: int = 0
    seed: int = 0


@dataclass
class TestCase:
    input_bytes: bytes
    type_tags: tuple[TypeTag, ...]
    termination: TerminationKind
    newly_covered_uids: tuple[int, ...]
    iteration: int
    new_pairs: tuple[tuple[int, bool], ...]
    uid_pairs: tuple[tuple[int, bool], ...]
    id_pairs: tuple[tuple[int, int, bool], ...]
    extended_limits: bool = False


@dataclass
class TestSuite:
    tests: list[TestCase] = field(default_factory=list)
    coverage: dict[str, int] = field(default_factory=dict)

    def recompute_coverage(self) -> dict[str, int]:
        uid_pairs = set()
        id_pairs = set()
        for test in self.tests:
            uid_pairs.update(test.uid_pairs)
            id_pairs.update(test.id_pairs)
        uids = {u for u, _ in uid_pairs}
        ids = {(u, c) for u, c, _ in id_pairs}
        self.coverage = {
            "uids_discovered": len(uids),
            "uids_covered": sum(1 for u in uids
                                if (u, False) in uid_pairs
                                and (u, True) in uid_pairs),
            "execution_ids_discovered": len(ids),
            "execution_ids_covered": sum(
                1 for u, c in ids
                if (u, c, False) in id_pairs and (u, c, True) in id_pairs),
        }
        return self.coverage


@dataclass
class SessionLogEntry:
    kind: str
    uid: int
    ctx: int
    depth: int
    goal_direction: Optional[bool]
    executions: int
    calls: int
    achieved: bool
    descent_logs: list[list[float]] = field(default_factory=list)


class FuzzStats:
    def __init__(self, seed: int):
        self.seed = seed
        self.iterations = 0
        self.executions_by_kind = {
            _BOOTSTRAP: 0,
            AnalysisKind.SENSITIVITY.value: 0,
            AnalysisKind.BITSHARE.value: 0,
            AnalysisKind.TYPED_MINIMIZATION.value: 0,
            AnalysisKind.MINIMIZATION.value: 0,
            _OPTIMIZER: 0,
        }
        self.terminations = {kind.name: 0 for kind in TerminationKind}
        self.tree_nodes = 0
        self.coverage: dict[str, int] = {}
        self.sessions: list[SessionLogEntry] = []
        self.terminated_by_strategy = False

    @property
    def total_executions(self) -> int:
        return sum(self.executions_by_kind.values())

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "iterations": self.iterations,
            "executions": {"total": self.total_executions,
                           **self.executions_by_kind},
            "terminations": dict(self.terminations),
            "tree_nodes": self.tree_nodes,
            "coverage": dict(self.coverage),
            "terminated_by_strategy": self.terminated_by_strategy,
            "sessions": [
                {
                    "kind": s.kind, "uid": s.uid, "ctx": s.ctx,
                    "depth": s.depth, "goal_direction": s.goal_direction,
                    "executions": s.executions, "calls": s.calls,
                    "achieved": s.achieved,
                }
                for s in self.sessions
            ],
        }


class FuzzEngine:
    """Owns the tree, the strategy, the bitshare store, and the suite."""

    def __init__(self, program: Program, budget: FuzzBudget,
                 options: FuzzOptions, executor=None, rng=None):
        import random

        from .executors import LocalExecutor

        self.program = program
        self.budget = budget
        self.options = options
        self.executor = executor or LocalExecutor(program, options.limits)
        self.rng = rng or random.Random(options.seed)
        self.tree = ExecTree()
        self.strategy = Strategy(self.tree, self.rng)
        self.bitshare_store = BitshareStore()
        self.suite = TestSuite()
        self.stats = FuzzStats(options.seed)
        self.active: Optional[AnalysisSession] = None
        self.iteration = 0
        self._kept_inputs: set[bytes] = set()
        self._deadline = None

    # -- config helpers -----------------------------------------------------

    def _config(self, input_bytes: bytes,
                extended: bool = False) -> ExecutionConfig:
        limits = self.options.limits
        if not extended:
            return ExecutionConfig(limits.max_trace_length,
                                   limits.max_stack_size,
                                   limits.max_input_bytes,
                                   self.options.fill_byte, input_bytes)
        return ExecutionConfig(
            limits.max_trace_length * OPTIMIZER_SCALE["trace"],
            limits.max_stack_size * OPTIMIZER_SCALE["stack"],
            limits.max_input_bytes * OPTIMIZER_SCALE["input"],
            self.options.fill_byte, input_bytes)

    # -- main loop -----------------------------------------------------------

    def run(self) -> tuple[TestSuite, FuzzStats]:
        if self.budget.max_seconds is not None:
            self._deadline = time.monotonic() + self.budget.max_seconds
        self._execute_and_process(b"", _BOOTSTRAP)
        while self._within_budget():
            step = self._next_input()
            if step is None:
                self.stats.terminated_by_strategy = True
                break
            self._execute_and_process(step, self.active.kind.value)
        self.optimize_suite()
        self.suite.recompute_coverage()
        self.stats.coverage = self.tree.coverage_counts()
        self.stats.tree_nodes = len(self.tree.nodes)
        return self.suite, self.stats

    def _within_budget(self) -> bool:
        if (self.budget.max_executions is not None
                and self.stats.total_executions >= self.budget.max_executions):
            return False
        if self._deadline is not None and time.monotonic() >= self._deadline:
            return False
        return True

    def _next_input(self) -> Optional[bytes]:
        while True:
            if self.active is None:
                selection = self.strategy.select_analysis()
                if selection is None:
                    return None
                self.active = self._make_session(selection)
            step = self.active.next_input()
            if step is not None:
                return step
            self._finish_session(achieved=False)

    def _make_session(self, selection: Selection) -> AnalysisSession:
        node = selection.node
        if selection.kind == AnalysisKind.SENSITIVITY:
            return SensitivitySession(node)
        if selection.kind == AnalysisKind.BITSHARE:
            return BitshareSession(node, selection.goal_direction,
                                   self.bitshare_store)
        if selection.kind == AnalysisKind.TYPED_MINIMIZATION:
            variables = identify_typed_variables(
                node.best_input, node.best_tags, node.sensitive_bits)
            return TypedDescentSession(node, selection.goal_direction,
                                       self.rng, variables)
        return BinaryDescentSession(node, selection.goal_direction, self.rng)

    def _execute_and_process(self, input_bytes: bytes, kind: str) -> None:
        result = self.executor(self._config(input_bytes))
        iteration = self.iteration
        self.iteration += 1
        self.stats.iterations = self.iteration
        self.stats.executions_by_kind[kind] += 1
        self.stats.terminations[result.termination.name] += 1
        report = self.tree.map_trace(result, iteration)
        keep = (iteration == 0
                or result.termination == TerminationKind.CRASH
                or bool(report.new_pairs))
        if keep and result.bytes_read not in self._kept_inputs:
            self._kept_inputs.add(result.bytes_read)
            self.suite.tests.append(self._test_case(result, report,
                                                    iteration))
        if self.active is not None:
            self.active.feed(result)
            goal = self.active.goal_direction
            if (goal is not None
                    and self.active.node.label[goal] != EdgeLabel.NOT_VISITED):
                self._finish_session(achieved=True,
                                     achieving_input=input_bytes)

    def _test_case(self, result: ExecutionResult, report,
                   iteration: int, extended: bool = False) -> TestCase:
        uid_pairs = sorted({(r.id.uid, r.direction) for r in result.trace})
        id_pairs = sorted({(r.id.uid, r.id.ctx, r.direction)
                           for r in result.trace})
        return TestCase(
            input_bytes=result.bytes_read,
            type_tags=result.type_tags,
            termination=result.termination,
            newly_covered_uids=tuple(sorted(report.newly_covered_uids)),
            iteration=iteration,
            new_pairs=tuple(sorted(report.new_pairs)),
            uid_pairs=tuple(uid_pairs),
            id_pairs=tuple(id_pairs),
            extended_limits=extended,
        )

    def _finish_session(self, achieved: bool,
                        achieving_input: Optional[bytes] = None) -> None:
        session = self.active
        self.active = None
        stamp = self.iteration - 1  # iteration of the last execution
        node = session.node
        if session.kind == AnalysisKind.SENSITIVITY:
            examined = session.finish(stamp)
            self.strategy.register_examined(examined)
        elif session.kind == AnalysisKind.BITSHARE:
            node.bitshare_done = True
            node.bitshare_iter = stamp
        else:
            node.minimization_done = True
            node.minimization_iter = stamp
            if achieved and achieving_input is not None:
                self.bitshare_store.record(node.id.uid,
                                           session.goal_direction,
                                           achieving_input,
                                           node.sensitive_bits)
            elif not achieved:
                self.strategy.record_failure(node, stamp)
        self.strategy.prune_targets()
        self.tree.propagate_closed(node)
        self.stats.sessions.append(SessionLogEntry(
            kind=session.kind.value,
            uid=node.id.uid, ctx=node.id.ctx, depth=node.depth,
            goal_direction=session.goal_direction,
            executions=session.executions, calls=session.calls,
            achieved=achieved,
            descent_logs=getattr(session, "descent_logs", []),
        ))

    # -- optimizer ------------------------------------------------------------

    def optimize_suite(self) -> TestSuite:
        """Re-run boundary-violating tests with highly extended limits;
        keep re-reads that add coverage and differ from the original."""
        executor = self.executor.scaled(**OPTIMIZER_SCALE)
        for test in list(self.suite.tests):
            if test.termination != TerminationKind.BOUNDARY_CONDITION_VIOLATION:
                continue
            if test.extended_limits:
                continue
            result = executor(self._config(test.input_bytes, extended=True))
            iteration = self.iteration
            self.iteration += 1
            self.stats.iterations = self.iteration
            self.stats.executions_by_kind[_OPTIMIZER] += 1
            self.stats.terminations[result.termination.name] += 1
            report = self.tree.map_trace(result, iteration)
            if (report.new_pairs
                    and result.bytes_read != test.input_bytes
                    and result.bytes_read not in self._kept_inputs):
                self._kept_inputs.add(result.bytes_read)
                self.suite.tests.append(self._test_case(
                    result, report, iteration, extended=True))
        return self.suite


def run_fuzzing(program: Program, budget: FuzzBudget,
                options: Optional[FuzzOptions] = None,
                executor=None) -> tuple[TestSuite, FuzzStats]:
    engine = FuzzEngine(program, budget, options or FuzzOptions(),
                        executor=executor)
    return engine.run()


# --- suite persistence -------------------------------------------------------

_SUITE_DIR = "tests"
_MANIFEST = "manifest.json"
_STATS = "stats.json"


def _render_value(tag: TypeTag, raw: bytes) -> str:
    import struct

    if tag == TypeTag.BOOLEAN:
        return str(int(raw[0] != 0))
    if tag == TypeTag.FLOAT32:
        return repr(struct.unpack("<f", raw)[0])
    if tag == TypeTag.FLOAT64:
        return repr(struct.unpack("<d", raw)[0])
    if tag.is_untyped:
        return raw.hex()
    return str(int.from_bytes(raw, "little", signed=tag.is_signed))


def save_suite(outdir: "Path | str", suite: TestSuite, stats: FuzzStats,
               options: FuzzOptions) -> None:
    outdir = Path(outdir)
    tests_dir = outdir / _SUITE_DIR
    tests_dir.mkdir(parents=True, exist_ok=True)
    manifest_tests = []
    for index, test in enumerate(suite.tests):
        name = f"test_{index:06d}.txt"
        lines = []
        offset = 0
        for tag in test.type_tags:
            raw = test.input_bytes[offset:offset + tag.byte_width]
            lines.append(f"{tag.name} {_render_value(tag, raw)}")
            offset += tag.byte_width
        lines.append(f"raw: {test.input_bytes.hex()}")
        (tests_dir / name).write_text("\n".join(lines) + "\n",
                                      encoding="utf-8")
        manifest_tests.append({
            "file": f"{_SUITE_DIR}/{name}",
            "input": test.input_bytes.hex(),
            "termination": test.termination.name,
            "iteration": test.iteration,
            "extended_limits": test.extended_limits,
            "newly_covered_uids": list(test.newly_covered_uids),
            "new_pairs": [[u, d] for u, d in test.new_pairs],
            "uid_pairs": [[u, d] for u, d in test.uid_pairs],
            "id_pairs": [[u, c, d] for u, c, d in test.id_pairs],
        })
    manifest = {
        "format": 1,
        "seed": options.seed,
        "iterations": stats.iterations,
        "executions": {"total": stats.total_executions,
                       **stats.executions_by_kind},
        "fill_byte": options.fill_byte,
        "limits": {
            "max_trace_length": options.limits.max_trace_length,
            "max_stack_size": options.limits.max_stack_size,
            "max_input_bytes": options.limits.max_input_bytes,
            "step_budget": options.limits.step_budget,
        },
        "optimizer_scale": OPTIMIZER_SCALE,
        "coverage": suite.recompute_coverage(),
        "tests": manifest_tests,
    }
    (outdir / _MANIFEST).write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n",
        encoding="utf-8")
    (outdir / _STATS).write_text(
        json.dumps(stats.to_dict(), indent=2, sort_keys=True) + "\n",
        encoding="utf-8")


def load_manifest(outdir: "Path | str") -> dict:
    return json.loads((Path(outdir) / _MANIFEST).read_text(encoding="utf-8"))


def replay_suite(program: Program, outdir: "Path | str") -> tuple[bool, str]:
    """Re-execute every manifest test and verify terminations, observed
    pairs, and the coverage summary; (ok, first divergence)."""
    from .executors import LocalExecutor

    manifest = load_manifest(outdir)
    limits = VmLimits(**manifest["limits"])
    scale = manifest["optimizer_scale"]
    base = LocalExecutor(program, limits)
    extended = base.scaled(**scale)
    uid_pairs = set()
    id_pairs = set()
    for entry in manifest["tests"]:
        input_bytes = bytes.fromhex(entry["input"])
        if entry["extended_limits"]:
            config = ExecutionConfig(
                limits.max_trace_length * scale["trace"],
                limits.max_stack_size * scale["stack"],
                limits.max_input_bytes * scale["input"],
                manifest["fill_byte"], input_bytes)
            result = extended(config)
        else:
            config = ExecutionConfig(limits.max_trace_length,
                                     limits.max_stack_size,
                                     limits.max_input_bytes,
                                     manifest["fill_byte"], input_bytes)
            result = base(config)
        if result.termination.name != entry["termination"]:
            return False, (f"{entry['file']}: termination "
                           f"{result.termination.name} != "
                           f"{entry['termination']}")
        got_pairs = sorted({(r.id.uid, r.direction) for r in result.trace})
        want_pairs = sorted((u, bool(d)) for u, d in entry["uid_pairs"])
        if got_pairs != want_pairs:
            return False, f"{entry['file']}: observed uid pairs differ"
        if result.bytes_read != input_bytes:
            return False, f"{entry['file']}: bytes read differ"
        uid_pairs.update(got_pairs)
        id_pairs.update((r.id.uid, r.id.ctx, r.direction)
                        for r in result.trace)
    uids = {u for u, _ in uid_pairs}
    ids = {(u, c) for u, c, _ in id_pairs}
    recomputed = {
        "uids_discovered": len(uids),
        "uids_covered": sum(1 for u in uids if (u, False) in uid_pairs
                            and (u, True) in uid_pairs),
        "execution_ids_discovered": len(ids),
        "execution_ids_covered": sum(
            1 for u, c in ids
            if (u, c, False) in id_pairs and (u, c, True) in id_pairs),
    }
    if recomputed != manifest["coverage"]:
        return False, (f"coverage summary differs: {recomputed!r} != "
                       f"{manifest['coverage']!r}")
    return True, ""
