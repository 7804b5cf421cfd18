"""Activation-count-driven PRAC simulator with the Alert Back-Off protocol.

Time is measured in activations, not nanoseconds. Each rank carries one ABO
state; each row carries one activation counter. Counters are cleared by
``REF`` (end of a refresh epoch) and by the RFM passes of a recovery.
"""

from __future__ import annotations

import enum
import json
from collections import deque
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, NamedTuple, Union

PENDING_ACT_LIMIT = 64
# one row cycle of a DDR5-3200 device, used to turn the vendor window into activations
ROW_CYCLE_NS = 46


class DramError(ValueError):
    """Base class for simulator errors."""

    def __init__(self, message: str, step: int | None = None):
        self.step = step
        if step is not None:
            message = f"step {step}: {message}"
        super().__init__(message)


class InvalidConfig(DramError):
    pass


class AddressOutOfRange(DramError):
    pass


class StateViolation(DramError):
    pass


class TraceError(DramError):
    pass


@dataclass(frozen=True)
class DramConfig:
    ranks: int = 2
    banks_per_rank: int = 32
    rows_per_bank: int = 65536
    abo_threshold: int = 16
    abo_delay_acts: int = 4
    abo_recovery_refs: int = 4
    prerecovery_act_budget: int = 3
    refresh_window_acts: int = 8192
    abo_act_ns: int = 180  # documentation only; prerecovery_act_budget is what the model uses
    seed: int = 0

    def validate(self) -> "DramConfig":
        for name in ("ranks", "banks_per_rank", "rows_per_bank", "refresh_window_acts"):
            if getattr(self, name) < 1:
                raise InvalidConfig(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.abo_threshold < 1:
            raise InvalidConfig(f"abo_threshold must be >= 1, got {self.abo_threshold}")
        if not 1 <= self.abo_recovery_refs <= 4:
            raise InvalidConfig(f"abo_recovery_refs must be in 1..4, got {self.abo_recovery_refs}")
        if self.prerecovery_act_budget < 0:
            raise InvalidConfig("prerecovery_act_budget must be >= 0")
        if self.abo_delay_acts < 0:
            raise InvalidConfig("abo_delay_acts must be >= 0")
        return self

    @classmethod
    def from_dict(cls, data: dict) -> "DramConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise InvalidConfig(f"unknown DRAM config keys: {sorted(unknown)}")
        try:
            cfg = cls(**{k: int(v) for k, v in data.items()})
        except (TypeError, ValueError) as exc:
            raise InvalidConfig(str(exc)) from exc
        return cfg.validate()

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def budget_for_window(window_ns: int, row_cycle_ns: int = ROW_CYCLE_NS) -> int:
        """Activations that fit into a vendor pre-recovery window."""
        return window_ns // row_cycle_ns


class RowAddress(NamedTuple):
    rank: int
    bank: int
    row: int


@dataclass(frozen=True)
class Act:
    addr: RowAddress


@dataclass(frozen=True)
class Ref:
    pass


@dataclass(frozen=True)
class Rfm:
    pass


@dataclass(frozen=True)
class End:
    pass


TraceCommand = Union[Act, Ref, Rfm, End]
REF, RFM, END = Ref(), Rfm(), End()


def act(rank: int, bank: int, row: int) -> Act:
    return Act(RowAddress(rank, bank, row))


class AboPhase(enum.Enum):
    NORMAL = "normal"
    PRE_RECOVERY = "pre_recovery"
    RECOVERY = "recovery"
    DELAY = "delay"


@dataclass(frozen=True)
class AboState:
    phase: AboPhase = AboPhase.NORMAL
    remaining: int = 0


NORMAL = AboState()


@dataclass(frozen=True)
class AboAlert:
    step: int
    addr: RowAddress
    counter: int

    def to_dict(self) -> dict:
        return {"step": self.step, "rank": self.addr.rank, "bank": self.addr.bank,
                "row": self.addr.row, "counter_value": self.counter}


@dataclass
class SimReport:
    abo_alerts: list[AboAlert] = field(default_factory=list)
    total_activations: int = 0
    max_row_counter: int = 0
    per_row_histogram: dict[RowAddress, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "abo_alerts": [a.to_dict() for a in self.abo_alerts],
            "total_activations": self.total_activations,
            "max_row_counter": self.max_row_counter,
            "per_row_histogram": [
                {"rank": a.rank, "bank": a.bank, "row": a.row, "count": n}
                for a, n in sorted(self.per_row_histogram.items())
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


class Simulator:
    """PRAC device model driven one trace command at a time.

    With ``auto_recovery`` (the default) the memory controller services all
    recovery RFMs as soon as the pre-recovery budget runs out, so no
    activation is ever observed in the Recovery phase. With
    ``auto_recovery=False`` recovery waits for ``RFM`` trace commands and
    activations to a recovering rank are buffered until it completes.
    """

    def __init__(self, config: DramConfig | None = None, auto_recovery: bool = True):
        self.config = (config or DramConfig()).validate()
        self.auto_recovery = auto_recovery
        c = self.config
        self._counters = [[{} for _ in range(c.banks_per_rank)] for _ in range(c.ranks)]
        self._states = [NORMAL] * c.ranks
        self._pending: list[deque[RowAddress]] = [deque() for _ in range(c.ranks)]
        self.step_index = 0
        self.total_activations = 0
        self.max_row_counter = 0
        self.histogram: dict[RowAddress, int] = {}
        self.alerts: list[AboAlert] = []
        # (step, rank) per serviced RFM
        self.rfm_log: list[tuple[int, int]] = []

    def state(self, rank: int) -> AboState:
        return self._states[rank]

    def counter(self, addr: RowAddress) -> int:
        self._check(addr)
        return self._counters[addr.rank][addr.bank].get(addr.row, 0)

    def pending(self, rank: int) -> int:
        return len(self._pending[rank])

    def _check(self, addr: RowAddress) -> None:
        c = self.config
        if not (0 <= addr.rank < c.ranks and 0 <= addr.bank < c.banks_per_rank
                and 0 <= addr.row < c.rows_per_bank):
            raise AddressOutOfRange(f"{tuple(addr)} outside {c.ranks}x{c.banks_per_rank}x{c.rows_per_bank}",
                                    self.step_index)

    def step(self, cmd: TraceCommand) -> list[AboAlert]:
        events: list[AboAlert] = []
        if isinstance(cmd, Act):
            addr = RowAddress(*cmd.addr)
            self._check(addr)
            if self._states[addr.rank].phase is AboPhase.RECOVERY:
                queue = self._pending[addr.rank]
                if len(queue) >= PENDING_ACT_LIMIT:
                    raise TraceError("activation buffer overflow during recovery", self.step_index)
                queue.append(addr)
            else:
                self._activate(addr, events)
        elif isinstance(cmd, Ref):
            for bank_counters in self._counters:
                for counters in bank_counters:
                    counters.clear()
            self._states = [NORMAL] * self.config.ranks
            for rank in range(self.config.ranks):
                self._drain(rank, events)
        elif isinstance(cmd, Rfm):
            for rank in range(self.config.ranks):
                if self._states[rank].phase is AboPhase.RECOVERY:
                    self.rfm_service(rank)
                    self._drain(rank, events)
        elif not isinstance(cmd, End):
            raise TraceError(f"unknown command {cmd!r}", self.step_index)
        self.step_index += 1
        self.alerts.extend(events)
        return events

    def _activate(self, addr: RowAddress, events: list[AboAlert]) -> None:
        c = self.config
        counters = self._counters[addr.rank][addr.bank]
        value = counters.get(addr.row, 0) + 1
        counters[addr.row] = value
        self.total_activations += 1
        self.histogram[addr] = self.histogram.get(addr, 0) + 1
        if value > self.max_row_counter:
            self.max_row_counter = value

        state = self._states[addr.rank]
        if state.phase is AboPhase.NORMAL:
            if value >= c.abo_threshold:
                events.append(AboAlert(self.step_index, addr, value))
                if c.prerecovery_act_budget > 0:
                    self._states[addr.rank] = AboState(AboPhase.PRE_RECOVERY, c.prerecovery_act_budget)
                else:
                    self._enter_recovery(addr.rank)
        elif state.phase is AboPhase.PRE_RECOVERY:
            if state.remaining > 1:
                self._states[addr.rank] = AboState(AboPhase.PRE_RECOVERY, state.remaining - 1)
            else:
                self._enter_recovery(addr.rank)
        elif state.phase is AboPhase.DELAY:
            if state.remaining > 1:
                self._states[addr.rank] = AboState(AboPhase.DELAY, state.remaining - 1)
            else:
                self._states[addr.rank] = NORMAL

    def _enter_recovery(self, rank: int) -> None:
        self._states[rank] = AboState(AboPhase.RECOVERY, self.config.abo_recovery_refs)
        if self.auto_recovery:
            while self._states[rank].phase is AboPhase.RECOVERY:
                self.rfm_service(rank)

    def _drain(self, rank: int, events: list[AboAlert]) -> None:
        queue = self._pending[rank]
        while queue and self._states[rank].phase is not AboPhase.RECOVERY:
            self._activate(queue.popleft(), events)

    def rfm_service(self, rank: int) -> list[RowAddress]:
        """One RFM pass: refresh the highest-counter row of every bank of ``rank``."""
        state = self._states[rank]
        if state.phase is not AboPhase.RECOVERY:
            raise StateViolation(f"rank {rank} is not in recovery ({state.phase.value})", self.step_index)
        refreshed = []
        for bank, counters in enumerate(self._counters[rank]):
            best_row, best_val = 0, 0
            for row, val in counters.items():
                if val > best_val or (val == best_val and row < best_row):
                    best_row, best_val = row, val
            if best_row in counters:
                counters[best_row] = 0
            refreshed.append(RowAddress(rank, bank, best_row))
        self.rfm_log.append((self.step_index, rank))
        if state.remaining > 1:
            self._states[rank] = AboState(AboPhase.RECOVERY, state.remaining - 1)
        elif self.config.abo_delay_acts > 0:
            self._states[rank] = AboState(AboPhase.DELAY, self.config.abo_delay_acts)
        else:
            self._states[rank] = NORMAL
        return refreshed

    def report(self) -> SimReport:
        return SimReport(list(self.alerts), self.total_activations, self.max_row_counter,
                         dict(self.histogram))


def run_trace(config: DramConfig | Simulator, trace: Iterable[TraceCommand]) -> SimReport:
    sim = config if isinstance(config, Simulator) else Simulator(config)
    ended = False
    for cmd in trace:
        if ended:
            raise TraceError("command after END", sim.step_index)
        sim.step(cmd)
        ended = isinstance(cmd, End)
    if not ended:
        raise TraceError("trace is not terminated by END", sim.step_index)
    return sim.report()


def parse_trace(text: str) -> list[TraceCommand]:
    """Parse the line-oriented trace format (``ACT r b row``, ``REF``, ``RFM``, ``END``)."""
    cmds: list[TraceCommand] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        op = parts[0].upper()
        if op == "ACT":
            if len(parts) != 4:
                raise TraceError(f"line {lineno}: ACT needs rank, bank and row")
            try:
                cmds.append(act(*(int(p) for p in parts[1:])))
            except ValueError as exc:
                raise TraceError(f"line {lineno}: {exc}") from exc
        elif op in ("REF", "RFM", "END") and len(parts) == 1:
            cmds.append({"REF": REF, "RFM": RFM, "END": END}[op])
        else:
            raise TraceError(f"line {lineno}: cannot parse {line!r}")
    return cmds


def format_trace(cmds: Iterable[TraceCommand]) -> str:
    lines = []
    for cmd in cmds:
        if isinstance(cmd, Act):
            lines.append(f"ACT {cmd.addr[0]} {cmd.addr[1]} {cmd.addr[2]}")
        else:
            lines.append(type(cmd).__name__.upper())
    return "\n".join(lines) + "\n"


def load_trace(path: str | Path) -> list[TraceCommand]:
    return parse_trace(Path(path).read_text(encoding="utf-8"))
