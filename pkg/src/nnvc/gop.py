"""Hierarchical bidirectional coding order.

Within each intra period the midpoint is coded first from the two bounding
frames, then the midpoints of each half, and so on (breadth first). A sequence
whose length is not ``k * period + 1`` gets its final frame intra coded and the
leftover span split greedily into the largest power-of-two sub-periods, whose
boundaries are intra coded as well. A period of 1 codes every frame intra.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field


@dataclass(frozen=True)
class GopStep:
    target: int
    ref_prev: int
    ref_next: int
    intra_prev: int
    intra_next: int

    @property
    def distance(self) -> int:
        return (self.ref_next - self.ref_prev) // 2


@dataclass
class GopSchedule:
    num_frames: int
    intra_period: int
    intra_indices: list[int] = field(default_factory=list)
    steps: list[GopStep] = field(default_factory=list)
    # (frame index, "intra" | "inter") in bitstream order
    coding_order: list[tuple[int, str]] = field(default_factory=list)

    def step_for(self, target: int) -> GopStep:
        for s in self.steps:
            if s.target == target:
                return s
        raise KeyError(target)


def _is_power_of_two(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


def _hierarchical_steps(start: int, end: int) -> list[GopStep]:
    steps = []
    queue = deque([(start, end)])
    while queue:
        a, b = queue.popleft()
        if b - a < 2:
            continue
        t = (a + b) // 2
        steps.append(GopStep(t, a, b, start, end))
        queue.append((a, t))
        queue.append((t, b))
    return steps


def _segments(num_frames: int, period: int) -> list[tuple[int, int]]:
    last = num_frames - 1
    segs = [(p, p + period) for p in range(0, last - period + 1, period)]
    pos = segs[-1][1] if segs else 0
    while pos < last:
        size = 1 << ((last - pos).bit_length() - 1)
        segs.append((pos, pos + size))
        pos += size
    return segs


def build_gop_schedule(num_frames: int, intra_period: int = 8) -> GopSchedule:
    if num_frames < 1:
        raise ValueError("num_frames must be >= 1")
    if not _is_power_of_two(intra_period):
        raise ValueError(f"intra_period must be a power of two, got {intra_period}")
    sched = GopSchedule(num_frames, intra_period, intra_indices=[0], coding_order=[(0, "intra")])
    for a, b in _segments(num_frames, intra_period):
        sched.intra_indices.append(b)
        sched.coding_order.append((b, "intra"))
        for step in _hierarchical_steps(a, b):
            sched.steps.append(step)
            sched.coding_order.append((step.target, "inter"))
    return sched
