"""
Simulated clock and unreliable transport.

Time is integer milliseconds on a simpy Environment; events at the same
instant run in the order they were scheduled. The link follows a schedule of
Up/Down windows, and a seeded fault injector drops, delays and byte-flips
messages. Every random draw comes from numpy generators keyed by
(seed, stream), so a run replays exactly.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np
import simpy
from pydantic import BaseModel, ConfigDict, Field, model_validator

from config import get_logger
from errors import ContractError
from sync_agent import Exchange, LinkState

logger = get_logger("voting.simnet")


# ---------------------------------------------------------
# 1. CLOCK
# ---------------------------------------------------------
class SimClock:
    """Integer-millisecond view of a simpy Environment. `now` never decreases."""

    def __init__(self, env: Optional[simpy.Environment] = None):
        self.env = env or simpy.Environment()
        self._last_seen = 0

    @property
    def now(self) -> int:
        t = int(self.env.now)
        if t < self._last_seen:
            raise ContractError(f"clock went backwards: {t} < {self._last_seen}")
        self._last_seen = t
        return t

    def advance_to(self, at_ms: int) -> None:
        """Runs every scheduled event up to at_ms and stops there."""
        if at_ms < self.now:
            raise ContractError(f"cannot move clock back to {at_ms} from {self.now}")
        if at_ms > self.now:
            self.env.run(until=at_ms)

    def advance(self, ms: int) -> None:
        self.advance_to(self.now + ms)

    def timeout(self, ms: int) -> simpy.events.Timeout:
        if ms < 0:
            raise ContractError("negative delay")
        return self.env.timeout(ms)

    def process(self, generator) -> simpy.events.Process:
        return self.env.process(generator)

    def run(self, until: Optional[int] = None) -> None:
        self.env.run(until=until)


# ---------------------------------------------------------
# 2. LINK SCHEDULE AND FAULT PLAN
# ---------------------------------------------------------
class LinkWindow(BaseModel):
    model_config = ConfigDict(frozen=True)

    from_ms: int = Field(ge=0)
    to_ms: int = Field(gt=0, description="Exclusive end of the window")
    state: LinkState = LinkState.DOWN

    @model_validator(mode="after")
    def _ordered(self):
        if self.to_ms <= self.from_ms:
            raise ValueError("window must end after it starts")
        return self


class LinkSchedule(BaseModel):
    """Up/Down windows; the link is Up outside every window."""
    model_config = ConfigDict(frozen=True)

    windows: list[LinkWindow] = Field(default_factory=list)
    manual_override: bool = Field(default=False,
                                  description="Administrator-forced connectivity: Up regardless of windows")

    @model_validator(mode="after")
    def _non_overlapping(self):
        for a, b in zip(self.windows, self.windows[1:]):
            if b.from_ms < a.to_ms:
                raise ValueError("link windows must be ascending and non-overlapping")
        return self

    def state_at(self, at_ms: int) -> LinkState:
        if self.manual_override:
            return LinkState.UP
        for window in self.windows:
            if window.from_ms <= at_ms < window.to_ms:
                return window.state
        return LinkState.UP

    def next_up_at(self, at_ms: int) -> int:
        """Earliest time ≥ at_ms at which the link is Up."""
        t = at_ms
        for window in self.windows:
            if window.from_ms <= t < window.to_ms and window.state is LinkState.DOWN:
                t = window.to_ms
        return t


class CorruptionEvent(BaseModel):
    """Flips one byte of the first matching message sent at or after at_ms."""
    model_config = ConfigDict(frozen=True)

    at_ms: int = Field(ge=0)
    byte_offset: int = Field(description="Byte to flip; negative counts from the end")
    device: Optional[str] = Field(default=None, description="Hex device id; None matches any device")


class FaultPlan(BaseModel):
    model_config = ConfigDict(frozen=True)

    drop_probability: float = Field(default=0.0, ge=0.0, le=1.0)
    delay_min_ms: int = Field(default=0, ge=0)
    delay_max_ms: int = Field(default=0, ge=0)
    corruptions: list[CorruptionEvent] = Field(default_factory=list)
    seed: int = 0

    @model_validator(mode="after")
    def _delay_range(self):
        if self.delay_max_ms < self.delay_min_ms:
            raise ValueError("delay_max_ms must be ≥ delay_min_ms")
        return self


class FaultInjector:
    """Mutable fault state for one message stream: its rng and spent corruptions."""

    def __init__(self, plan: FaultPlan, stream: tuple[int, ...] = (0,)):
        self.plan = plan
        self.stream = tuple(stream)
        self.rng = np.random.default_rng([plan.seed, *self.stream])
        self._spent: set[int] = set()

    def draw_drop(self) -> bool:
        return self.plan.drop_probability > 0 and self.rng.random() < self.plan.drop_probability

    def draw_delay(self) -> int:
        if self.plan.delay_max_ms == self.plan.delay_min_ms:
            return self.plan.delay_min_ms
        return int(self.rng.integers(self.plan.delay_min_ms, self.plan.delay_max_ms + 1))

    def corrupt(self, data: bytes, at_ms: int, device_hex: Optional[str]) -> bytes:
        for i, event in enumerate(self.plan.corruptions):
            if i in self._spent or event.at_ms > at_ms or not data:
                continue
            if event.device is not None and event.device != device_hex:
                continue
            self._spent.add(i)
            offset = event.byte_offset % len(data)
            flipped = bytearray(data)
            flipped[offset] ^= 0xFF
            logger.info("Corrupting byte %d of a %d-byte message at %d ms", offset, len(data), at_ms)
            return bytes(flipped)
        return data


@dataclass(frozen=True)
class Delivered:
    data: bytes
    at_ms: int


@dataclass(frozen=True)
class Dropped:
    at_ms: int


@dataclass(frozen=True)
class LinkDown:
    at_ms: int


SendResult = Union[Delivered, Dropped, LinkDown]


def transport_send(schedule: LinkSchedule, plan: Union[FaultPlan, FaultInjector], clock: SimClock, data: bytes,
                   at_ms: Optional[int] = None, device_hex: Optional[str] = None) -> SendResult:
    """
    One message over the simulated link: LinkDown if the schedule says Down,
    else a drop roll, a delay draw, then any due corruption event.
    """
    injector = plan if isinstance(plan, FaultInjector) else FaultInjector(plan)
    sent_at = clock.now if at_ms is None else at_ms
    if schedule.state_at(sent_at) is LinkState.DOWN:
        return LinkDown(sent_at)
    if injector.draw_drop():
        return Dropped(sent_at)
    delay = injector.draw_delay()
    return Delivered(injector.corrupt(bytes(data), sent_at, device_hex), sent_at + delay)


# ---------------------------------------------------------
# 3. DEVICE TRANSPORT
# ---------------------------------------------------------
@dataclass(frozen=True)
class WireRecord:
    at_ms: int
    device_id: str
    direction: str   # "up" terminal → server, "down" server → terminal
    outcome: str     # Delivered | Dropped | LinkDown
    data: bytes


@dataclass
class WireTrace:
    records: list[WireRecord] = field(default_factory=list)

    def add(self, record: WireRecord) -> None:
        self.records.append(record)

    def shape(self) -> list[tuple]:
        """Everything an eavesdropper sees except payload contents."""
        return [(r.at_ms, r.device_id, r.direction, r.outcome, len(r.data)) for r in self.records]


class SimulatedTransport:
    """
    One terminal's link to the server. Requests and responses both cross the
    faulty link; the server handler is called with the delivery time.
    """

    def __init__(self, clock: SimClock, schedule: LinkSchedule, injector: FaultInjector, device_id: bytes,
                 handler: Callable[[bytes, int], Optional[bytes]], trace: Optional[WireTrace] = None):
        self.clock = clock
        self.schedule = schedule
        self.injector = injector
        self.device_hex = device_id.hex()
        self.handler = handler
        self.trace = trace

    def _record(self, at_ms: int, direction: str, result: SendResult, data: bytes) -> None:
        if self.trace is not None:
            self.trace.add(WireRecord(at_ms, self.device_hex, direction, type(result).__name__,
                                      result.data if isinstance(result, Delivered) else bytes(data)))

    def probe(self, at_ms: Optional[int] = None) -> LinkState:
        return self.schedule.state_at(self.clock.now if at_ms is None else at_ms)

    def request(self, payload: bytes, at_ms: Optional[int] = None) -> Exchange:
        sent_at = self.clock.now if at_ms is None else at_ms
        up = transport_send(self.schedule, self.injector, self.clock, payload, sent_at, self.device_hex)
        self._record(sent_at, "up", up, payload)
        if isinstance(up, LinkDown):
            return Exchange(None, 0, link_down=True)
        if isinstance(up, Dropped):
            return Exchange(None, 0)

        response = self.handler(up.data, up.at_ms)
        if response is None:
            return Exchange(None, up.at_ms - sent_at)
        down = transport_send(self.schedule, self.injector, self.clock, response, up.at_ms, self.device_hex)
        self._record(up.at_ms, "down", down, response)
        if not isinstance(down, Delivered):
            return Exchange(None, up.at_ms - sent_at)
        return Exchange(down.data, down.at_ms - sent_at)
