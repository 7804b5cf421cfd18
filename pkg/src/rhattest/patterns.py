"""Deterministic benign and hammering trace generation plus MCE injection plans.

Benign traffic picks rows uniformly from a random working set, never
activating a row more than ``benign_row_cap`` times per refresh epoch. The
hammering kinds embed one contiguous burst inside such background traffic.
Every generated scenario is simulated once so its label agrees with what the
verifier's heuristic will see.
"""

from __future__ import annotations

import enum
import json
import random
from dataclasses import dataclass, replace
from pathlib import Path

from .dram import (END, REF, Act, DramConfig, RowAddress, Simulator, TraceCommand,
                   format_trace, parse_trace, run_trace)

ALERT_LIMIT = 3
MCE_LIMIT = 3
LINE_BYTES = 8192


class InfeasibleParams(ValueError):
    pass


class PatternKind(str, enum.Enum):
    BENIGN = "benign"
    DOUBLE_SIDED = "double_sided"
    MANY_SIDED = "many_sided"
    ECC_TEMPLATING = "ecc_templating"


class Label(str, enum.Enum):
    BENIGN = "benign"
    MALICIOUS = "malicious"


@dataclass(frozen=True)
class PatternParams:
    kind: PatternKind = PatternKind.BENIGN
    length: int = 2000
    victim: RowAddress | None = None
    hammer_reps: int = 200
    aggressor_count: int = 2
    benign_row_cap: int = 8
    working_set: int = 1024
    injected_mce_count: int = 0
    seed: int = 0

    @classmethod
    def from_dict(cls, data: dict) -> "PatternParams":
        data = dict(data)
        if "kind" in data:
            data["kind"] = PatternKind(data["kind"])
        if data.get("victim") is not None:
            data["victim"] = RowAddress(*data["victim"])
        return cls(**data)


@dataclass(frozen=True)
class MceInjection:
    at_step: int
    error_type: str
    address: int

    def to_dict(self) -> dict:
        return {"at_step": self.at_step, "error_type": self.error_type, "address": self.address}


@dataclass
class Scenario:
    trace: list[TraceCommand]
    mce_events: list[MceInjection]
    label: Label
    kind: PatternKind = PatternKind.BENIGN
    seed: int = 0
    expected_alerts: int = 0

    def to_dict(self, trace_file: str | None = None) -> dict:
        out = {
            "label": self.label.value,
            "kind": self.kind.value,
            "seed": self.seed,
            "expected_alerts": self.expected_alerts,
            "mce_events": [m.to_dict() for m in self.mce_events],
        }
        if trace_file is None:
            out["commands"] = format_trace(self.trace).splitlines()
        else:
            out["trace_file"] = trace_file
        return out

    def to_json(self, trace_file: str | None = None) -> str:
        return json.dumps(self.to_dict(trace_file), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict, base_dir: Path | None = None) -> "Scenario":
        if "commands" in data:
            trace = parse_trace("\n".join(data["commands"]))
        elif "trace_file" in data:
            path = Path(data["trace_file"])
            if base_dir is not None and not path.is_absolute():
                path = base_dir / path
            trace = parse_trace(path.read_text(encoding="utf-8"))
        else:
            raise ValueError("scenario needs either 'commands' or 'trace_file'")
        mces = [MceInjection(int(m["at_step"]), str(m["error_type"]), int(m["address"]))
                for m in data.get("mce_events", [])]
        return cls(trace, mces, Label(data["label"]), PatternKind(data.get("kind", "benign")),
                   int(data.get("seed", 0)), int(data.get("expected_alerts", 0)))


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    return Scenario.from_dict(json.loads(path.read_text(encoding="utf-8")), path.parent)


def physical_address(addr: RowAddress, dram: DramConfig, column: int = 0) -> int:
    flat = (addr.rank * dram.banks_per_rank + addr.bank) * dram.rows_per_bank + addr.row
    return flat * LINE_BYTES + column * 64


class _Builder:
    """Accumulates activations and inserts REF at every epoch boundary."""

    def __init__(self, dram: DramConfig):
        self.dram = dram
        self.cmds: list[TraceCommand] = []
        self.epoch = 0
        self.epoch_acts = 0
        self.epoch_counts: dict[RowAddress, int] = {}

    def rolls_over(self) -> bool:
        return self.epoch_acts == self.dram.refresh_window_acts

    def act(self, addr: RowAddress) -> None:
        if self.rolls_over():
            self.cmds.append(REF)
            self.epoch += 1
            self.epoch_acts = 0
            self.epoch_counts = {}
        self.cmds.append(Act(addr))
        self.epoch_acts += 1
        self.epoch_counts[addr] = self.epoch_counts.get(addr, 0) + 1


class _Background:
    """Uniform choice over a working set, honouring the per-epoch row cap."""

    def __init__(self, rng: random.Random, dram: DramConfig, size: int, cap: int,
                 exclude: frozenset[RowAddress] = frozenset()):
        total = dram.ranks * dram.banks_per_rank * dram.rows_per_bank - len(exclude)
        size = min(size, total)
        rows: set[RowAddress] = set()
        while len(rows) < size:
            addr = RowAddress(rng.randrange(dram.ranks), rng.randrange(dram.banks_per_rank),
                              rng.randrange(dram.rows_per_bank))
            if addr not in exclude:
                rows.add(addr)
        self.rows = sorted(rows)
        self.rng = rng
        self.cap = cap
        self._epoch = -1
        self._available: list[RowAddress] = []
        self._counts: dict[RowAddress, int] = {}

    def emit(self, builder: _Builder, n: int) -> None:
        for _ in range(n):
            epoch = builder.epoch + 1 if builder.rolls_over() else builder.epoch
            if epoch != self._epoch:
                self._epoch = epoch
                self._available = list(self.rows)
                self._counts = {}
            if not self._available:
                raise InfeasibleParams(
                    f"working set of {len(self.rows)} rows with cap {self.cap} cannot fill a refresh epoch")
            i = self.rng.randrange(len(self._available))
            addr = self._available[i]
            count = self._counts.get(addr, 0) + 1
            self._counts[addr] = count
            if count >= self.cap:
                self._available[i] = self._available[-1]
                self._available.pop()
            builder.act(addr)


def _aggressors(victim: RowAddress, count: int, dram: DramConfig) -> list[RowAddress]:
    """Rows at odd distances around the victim, nearest first."""
    rows = dram.rows_per_bank
    # boundary victims shift inward so that victim +/- 1 both exist
    centre = min(max(victim.row, 1), rows - 2) if rows >= 3 else victim.row
    picked: list[int] = []
    for offset in range(1, rows, 2):
        for row in (centre - offset, centre + offset):
            if 0 <= row < rows and len(picked) < count:
                picked.append(row)
        if len(picked) == count:
            return [RowAddress(victim.rank, victim.bank, r) for r in picked]
    raise InfeasibleParams(f"bank of {rows} rows cannot host {count} aggressors")


def _mce_plan(rng: random.Random, count: int, trace_len: int, dram: DramConfig,
              near: list[RowAddress], error_type: str) -> list[MceInjection]:
    steps = sorted(rng.randrange(trace_len) for _ in range(count))
    out = []
    for step in steps:
        if near:
            addr = near[rng.randrange(len(near))]
        else:
            addr = RowAddress(rng.randrange(dram.ranks), rng.randrange(dram.banks_per_rank),
                              rng.randrange(dram.rows_per_bank))
        out.append(MceInjection(step, error_type, physical_address(addr, dram, rng.randrange(128))))
    return out


def generate(params: PatternParams, dram: DramConfig | None = None) -> Scenario:
    """Build a labelled scenario; deterministic in ``(params, dram)``."""
    dram = (dram or DramConfig()).validate()
    if params.length < 1:
        raise InfeasibleParams("length must be >= 1")
    if params.benign_row_cap >= dram.abo_threshold:
        raise InfeasibleParams(
            f"benign_row_cap {params.benign_row_cap} must stay below abo_threshold {dram.abo_threshold}")
    if params.benign_row_cap < 1:
        raise InfeasibleParams("benign_row_cap must be >= 1")
    rng = random.Random((params.seed << 64) ^ dram.seed)
    victim = params.victim
    if victim is None:
        victim = RowAddress(rng.randrange(dram.ranks), rng.randrange(dram.banks_per_rank),
                            rng.randrange(dram.rows_per_bank))
    else:
        victim = RowAddress(*victim)

    builder = _Builder(dram)
    kind = params.kind
    near: list[RowAddress] = []
    if kind is PatternKind.BENIGN:
        if params.injected_mce_count >= MCE_LIMIT:
            raise InfeasibleParams(f"benign scenarios carry at most {MCE_LIMIT - 1} MCEs")
        _Background(rng, dram, params.working_set, params.benign_row_cap).emit(builder, params.length)
        error_type = "CE"
    elif kind in (PatternKind.DOUBLE_SIDED, PatternKind.MANY_SIDED):
        count = 2 if kind is PatternKind.DOUBLE_SIDED else params.aggressor_count
        if count < 2:
            raise InfeasibleParams("hammering needs at least two aggressors")
        if params.hammer_reps < 1:
            raise InfeasibleParams("hammer_reps must be >= 1")
        aggressors = _aggressors(victim, count, dram)
        burst = params.hammer_reps * count
        if burst > params.length:
            raise InfeasibleParams(f"burst of {burst} activations exceeds length {params.length}")
        exclude = frozenset(aggressors) | {victim}
        background = _Background(rng, dram, params.working_set, params.benign_row_cap, exclude)
        lead = rng.randrange(params.length - burst + 1)
        background.emit(builder, lead)
        for _ in range(params.hammer_reps):
            for a in aggressors:
                builder.act(a)
        background.emit(builder, params.length - burst - lead)
        near = [victim]
        error_type = "CE"
    elif kind is PatternKind.ECC_TEMPLATING:
        _template(rng, dram, params, builder)
        error_type = "CE"
    else:  # pragma: no cover - enum is closed
        raise InfeasibleParams(f"unknown kind {kind}")

    trace = builder.cmds + [END]
    mces = _mce_plan(rng, params.injected_mce_count, len(trace), dram, near, error_type)
    alerts = len(run_trace(Simulator(dram), trace).abo_alerts)
    malicious = alerts >= ALERT_LIMIT or len(mces) >= MCE_LIMIT
    if kind is PatternKind.BENIGN:
        if malicious:
            raise InfeasibleParams(f"benign trace produced {alerts} alerts")
        label = Label.BENIGN
    else:
        if not malicious:
            raise InfeasibleParams(
                f"{kind.value} scenario yields {alerts} alerts and {len(mces)} MCEs; "
                f"needs >= {ALERT_LIMIT} alerts or >= {MCE_LIMIT} MCEs")
        label = Label.MALICIOUS
    return Scenario(trace, mces, label, kind, params.seed, alerts)


def _template(rng: random.Random, dram: DramConfig, params: PatternParams, builder: _Builder) -> None:
    """Short double-sided bursts over many victims, each aggressor kept under the cap."""
    if dram.rows_per_bank < 3:
        raise InfeasibleParams("templating needs at least three rows per bank")
    cap = params.benign_row_cap
    remaining = params.length
    stalls = 0
    while remaining > 0:
        victim = RowAddress(rng.randrange(dram.ranks), rng.randrange(dram.banks_per_rank),
                            rng.randrange(1, dram.rows_per_bank - 1))
        pair = [victim._replace(row=victim.row - 1), victim._replace(row=victim.row + 1)]
        progressed = False
        for _ in range(cap):
            for a in pair:
                if remaining == 0:
                    return
                if not builder.rolls_over() and builder.epoch_counts.get(a, 0) >= cap:
                    continue
                builder.act(a)
                remaining -= 1
                progressed = True
        stalls = 0 if progressed else stalls + 1
        if stalls > 1000:
            raise InfeasibleParams("geometry too small for templating under the row cap")


def default_params(kind: PatternKind, seed: int, rng: random.Random | None = None) -> PatternParams:
    """Evaluation defaults per kind; MCE counts are drawn from ``rng``."""
    rng = rng or random.Random(seed)
    if kind is PatternKind.BENIGN:
        return PatternParams(kind, length=2000, injected_mce_count=rng.randrange(MCE_LIMIT), seed=seed)
    if kind is PatternKind.DOUBLE_SIDED:
        return PatternParams(kind, length=2000, hammer_reps=200,
                             injected_mce_count=rng.randrange(MCE_LIMIT), seed=seed)
    if kind is PatternKind.MANY_SIDED:
        return PatternParams(kind, length=2000, hammer_reps=100, aggressor_count=4,
                             injected_mce_count=rng.randrange(MCE_LIMIT), seed=seed)
    return PatternParams(kind, length=2000, injected_mce_count=MCE_LIMIT + rng.randrange(3), seed=seed)


def with_seed(params: PatternParams, seed: int) -> PatternParams:
    return replace(params, seed=seed)
