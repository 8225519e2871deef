"""Shared test drivers and oracles: execute programs, map traces, run
sessions, generate random wire messages, reference loop detection."""
from __future__ import annotations

import math

from gradfuzz.exec_tree import EdgeLabel, ExecTree, TreeNode
from gradfuzz.minivm import VmLimits, execute, parse_program
from gradfuzz.target_abi import (
    ConditionRecord,
    ExecutionConfig,
    ExecutionId,
    ExecutionResult,
    TerminationKind,
    TypeTag,
)

LIMITS = VmLimits(max_trace_length=1000, max_stack_size=64,
                  max_input_bytes=512, step_budget=200_000)


def config_for(data: bytes, fill: int = 0,
               limits: VmLimits = LIMITS) -> ExecutionConfig:
    return ExecutionConfig(limits.max_trace_length, limits.max_stack_size,
                           limits.max_input_bytes, fill, data)


class CountingExecutor:
    def __init__(self, program, limits: VmLimits = LIMITS, fill: int = 0):
        self.program = program
        self.limits = limits
        self.fill = fill
        self.count = 0

    def __call__(self, data: bytes):
        self.count += 1
        return execute(self.program, config_for(data, self.fill,
                                                self.limits), self.limits)


def bootstrap_tree(source: str, inputs=(b"",), fill: int = 0):
    """Parse, execute the given inputs, and map them into a fresh tree."""
    program = parse_program(source)
    tree = ExecTree()
    executor = CountingExecutor(program, fill=fill)
    for i, data in enumerate(inputs):
        tree.map_trace(executor(data), i)
    return program, tree, executor


def drive_session(session, executor, tree=None, stop_at_goal=True,
                  start_iteration=100):
    """Run a session to completion (or until its goal direction appears);
    returns 'achieved' or 'exhausted'."""
    iteration = start_iteration
    while True:
        data = session.next_input()
        if data is None:
            return "exhausted"
        result = executor(data)
        if tree is not None:
            tree.map_trace(result, iteration)
            iteration += 1
        session.feed(result)
        if (stop_at_goal and session.goal_direction is not None
                and session.node.label[session.goal_direction]
                != EdgeLabel.NOT_VISITED):
            return "achieved"


class ScriptedRng:
    """random.Random stand-in with queued sample()/random() results; other
    draws fall back to a seeded generator."""

    def __init__(self, samples=(), randoms=(), seed=0):
        import random

        self._samples = list(samples)
        self._randoms = list(randoms)
        self._fallback = random.Random(seed)

    def sample(self, population, k):
        if self._samples:
            chosen = self._samples.pop(0)
            assert len(chosen) == k
            return list(chosen)
        return self._fallback.sample(population, k)

    def random(self):
        if self._randoms:
            return self._randoms.pop(0)
        return self._fallback.random()

    def randint(self, a, b):
        return self._fallback.randint(a, b)

    def uniform(self, a, b):
        return self._fallback.uniform(a, b)

    def randrange(self, *args):
        return self._fallback.randrange(*args)

    def choice(self, seq):
        return self._fallback.choice(seq)


def chain_from_uids(uids, directions=None):
    """Build a parent-linked path of nodes from a uid sequence."""
    nodes = []
    parent = None
    for i, uid in enumerate(uids):
        node = TreeNode(ExecutionId(uid, 0), parent, i)
        node.best_trace = tuple(
            ConditionRecord(ExecutionId(uids[j], 0), True, 1.0, False, 1)
            for j in range(i + 1))
        if parent is not None:
            direction = True if directions is None else directions[i - 1]
            parent.successor[direction] = node
            parent.label[direction] = EdgeLabel.VISITED
        nodes.append(node)
        parent = node
    return nodes


def oracle_detect_loops(uids):
    """Independent index-based transcription of the backward loop scan."""
    frames = []   # dicts: uid, exit, succ, loop
    where = {}
    loops = []
    bodies = {}
    n = len(uids)
    for i in reversed(range(n)):
        uid = uids[i]
        succ = i + 1 if i + 1 < n else n - 1
        if uid not in where:
            where[uid] = len(frames)
            frames.append({"uid": uid, "exit": i, "succ": succ,
                           "loop": None})
        else:
            k = where[uid]
            frame = frames[k]
            if frame["loop"] is None:
                frame["loop"] = {"entry": i, "exit": frame["exit"],
                                 "succ": frame["succ"]}
                loops.append(frame["loop"])
            else:
                frame["loop"]["entry"] = i
            while len(frames) > k + 1:
                dropped = frames.pop()
                bodies.setdefault(frame["uid"], set()).add(dropped["uid"])
                del where[dropped["uid"]]
    for loop in loops:
        body = bodies.get(uids[loop["exit"]], set())
        entry = loop["entry"]
        while entry - 1 >= 0 and (uids[entry - 1] == uids[loop["exit"]]
                                  or uids[entry - 1] in body):
            entry -= 1
        loop["entry"] = entry
    return ([(l["entry"], l["exit"], l["succ"]) for l in loops], bodies)


def random_wire_config(rng):
    n = rng.randrange(0, 20)
    return ExecutionConfig(
        max_trace_length=rng.randrange(1, 10 ** 6),
        max_stack_size=rng.randrange(1, 10 ** 4),
        max_input_bytes=n + rng.randrange(0, 100),
        fill_byte=rng.choice((0, 85)),
        input_bytes=rng.randbytes(n),
    )


def random_wire_result(rng):
    widths = {1: (TypeTag.SINT8, TypeTag.UINT8, TypeTag.BOOLEAN,
                  TypeTag.UNTYPED8),
              2: (TypeTag.SINT16, TypeTag.UINT16),
              4: (TypeTag.FLOAT32, TypeTag.SINT32),
              8: (TypeTag.FLOAT64, TypeTag.UINT64)}
    tags = []
    data = bytearray()
    for _ in range(rng.randrange(0, 6)):
        width = rng.choice((1, 2, 4, 8))
        tags.append(rng.choice(widths[width]))
        data.extend(rng.randbytes(width))
    records = []
    nbytes = 0
    for _ in range(rng.randrange(0, 8)):
        nbytes += rng.randrange(0, 3)
        value = rng.choice((0.0, -1.5, 3.25, math.inf, -math.inf,
                            rng.uniform(-1e18, 1e18)))
        records.append(ConditionRecord(
            ExecutionId(rng.randrange(2 ** 32), rng.randrange(2 ** 32)),
            rng.random() < 0.5, value, rng.random() < 0.5, nbytes))
    return ExecutionResult(TerminationKind(rng.randrange(4)), bytes(data),
                           tuple(tags), tuple(records))
