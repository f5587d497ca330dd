"""Group offload/prefetch simulator with peak resident-byte accounting.

Each tick consumes the set of groups the router activated that step:

1. activated groups that are offloaded are loaded synchronously (miss);
   activated groups that arrived by prefetch and are still waiting count a hit;
2. idle counters and the EMA activity score are updated;
3. resident groups idle for ``s_idle`` steps are written to the backing store;
4. the ``lookahead_l`` offloaded groups with the highest activity score
   (at least ``prefetch_min_score``, not evicted this tick) are prefetched;
   a prefetched group stays pinned until it is used or its score decays
   below ``prefetch_min_score``.

Prefetch is modeled as finishing before the next step: its bytes are
charged, its latency is not.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import NumericsError
from .quantization import encode_fp16, quantize_group

DEFAULT_S_IDLE = 10
DEFAULT_EMA_RATE = 0.1
DEFAULT_LOOKAHEAD = 2
DEFAULT_PREFETCH_MIN_SCORE = 0.05


@dataclass(frozen=True)
class MemoryConfig:
    s_idle: int = DEFAULT_S_IDLE
    ema_rate: float = DEFAULT_EMA_RATE
    lookahead_l: int = DEFAULT_LOOKAHEAD
    prefetch_min_score: float = DEFAULT_PREFETCH_MIN_SCORE

    def __post_init__(self):
        if self.s_idle < 1:
            raise NumericsError("s_idle must be >= 1")
        if not 0.0 < self.ema_rate <= 1.0:
            raise NumericsError("ema_rate must be in (0, 1]")
        if self.lookahead_l < 0:
            raise NumericsError("lookahead_l must be >= 0")


class GroupStore:
    """Directory of per-group payload files standing in for NVMe."""

    def __init__(self, root, payloads: list[bytes]):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._payloads = list(payloads)
        self.writes = 0
        self.reads = 0

    def _path(self, g: int) -> Path:
        return self.root / f"group_{g:04d}.bin"

    def write(self, g: int) -> None:
        self._path(g).write_bytes(self._payloads[g])
        self.writes += 1

    def read(self, g: int) -> bytes:
        data = self._path(g).read_bytes()
        if data != self._payloads[g]:
            raise NumericsError(f"group {g} payload corrupted in backing store")
        self.reads += 1
        return data


def group_payload(gp, g: int) -> bytes:
    """FP16 base followed by the group's INT4 residual block."""
    bits, _ = encode_fp16(gp.bases[g])
    parts = [bits.astype("<u2").tobytes()]
    vals = [
        np.concatenate([gp.residuals[i].a.ravel(), gp.residuals[i].b.ravel()])
        for i in gp.assignment.groups[g]
        if gp.residuals[i] is not None
    ]
    if vals:
        parts.append(quantize_group(np.concatenate(vals)).to_bytes())
    return b"".join(parts)


@dataclass
class MemoryLedger:
    bytes_of_group: list[int]
    resident: set[int] = field(default_factory=set)
    offloaded: set[int] = field(default_factory=set)
    idle_steps: np.ndarray = None
    activity_score: np.ndarray = None
    prefetched: set[int] = field(default_factory=set)
    peak_resident_bytes: int = 0
    prefetch_hits: int = 0
    prefetch_misses: int = 0
    bytes_loaded: int = 0
    bytes_offloaded: int = 0
    steps: int = 0
    store: GroupStore | None = None

    @classmethod
    def all_resident(cls, bytes_of_group, store: GroupStore | None = None) -> MemoryLedger:
        n = len(bytes_of_group)
        led = cls(
            [int(b) for b in bytes_of_group],
            resident=set(range(n)),
            idle_steps=np.zeros(n, dtype=np.int64),
            activity_score=np.zeros(n),
            store=store,
        )
        led.peak_resident_bytes = led.resident_bytes()
        return led

    @property
    def groups(self) -> int:
        return len(self.bytes_of_group)

    def resident_bytes(self) -> int:
        return sum(self.bytes_of_group[g] for g in self.resident)

    def offloaded_bytes(self) -> int:
        return sum(self.bytes_of_group[g] for g in self.offloaded)

    def _note_peak(self) -> None:
        self.peak_resident_bytes = max(self.peak_resident_bytes, self.resident_bytes())

    def _load(self, g: int) -> None:
        if self.store is not None:
            self.store.read(g)
        self.offloaded.discard(g)
        self.resident.add(g)
        self.bytes_loaded += self.bytes_of_group[g]

    def _evict(self, g: int) -> None:
        if self.store is not None:
            self.store.write(g)
        self.resident.discard(g)
        self.offloaded.add(g)
        self.prefetched.discard(g)
        self.bytes_offloaded += self.bytes_of_group[g]

    @property
    def hit_rate(self) -> float:
        n = self.prefetch_hits + self.prefetch_misses
        return self.prefetch_hits / n if n else 0.0

    def to_dict(self) -> dict:
        return {
            "groups": self.groups,
            "steps": self.steps,
            "bytes_of_group": list(self.bytes_of_group),
            "resident": sorted(self.resident),
            "offloaded": sorted(self.offloaded),
            "resident_bytes": self.resident_bytes(),
            "peak_resident_bytes": self.peak_resident_bytes,
            "prefetch_hits": self.prefetch_hits,
            "prefetch_misses": self.prefetch_misses,
            "hit_rate": self.hit_rate,
            "bytes_loaded": self.bytes_loaded,
            "bytes_offloaded": self.bytes_offloaded,
        }


def tick(ledger: MemoryLedger, activated, cfg: MemoryConfig = MemoryConfig()) -> MemoryLedger:
    """Advance the ledger by one step (mutates and returns it)."""
    active = sorted({int(g) for g in activated})
    for g in active:
        if not 0 <= g < ledger.groups:
            raise NumericsError(f"group {g} out of range")
    ledger.steps += 1
    for g in active:
        if g in ledger.offloaded:
            ledger.prefetch_misses += 1
            ledger._load(g)
        elif g in ledger.prefetched:
            ledger.prefetch_hits += 1
        ledger.prefetched.discard(g)
    ledger._note_peak()

    ind = np.zeros(ledger.groups)
    ind[active] = 1.0
    ledger.idle_steps = np.where(ind > 0, 0, ledger.idle_steps + 1)
    ledger.activity_score = (1.0 - cfg.ema_rate) * ledger.activity_score + cfg.ema_rate * ind

    # a prefetch whose prediction has decayed away is no longer pinned
    for g in sorted(ledger.prefetched):
        if ledger.activity_score[g] < cfg.prefetch_min_score:
            ledger.prefetched.discard(g)
    evicted = [
        g
        for g in sorted(ledger.resident)
        if ledger.idle_steps[g] >= cfg.s_idle and g not in ledger.prefetched
    ]
    for g in evicted:
        ledger._evict(g)

    if cfg.lookahead_l > 0:
        cands = [
            g
            for g in ledger.offloaded
            if g not in evicted and ledger.activity_score[g] >= cfg.prefetch_min_score
        ]
        cands.sort(key=lambda g: (-ledger.activity_score[g], g))
        for g in cands[: cfg.lookahead_l]:
            ledger._load(g)
            ledger.prefetched.add(g)
    ledger._note_peak()
    return ledger


def peak_memory(ledger: MemoryLedger) -> int:
    return ledger.peak_resident_bytes


def run_trace(bytes_of_group, trace, cfg: MemoryConfig = MemoryConfig(), store: GroupStore | None = None) -> MemoryLedger:
    ledger = MemoryLedger.all_resident(bytes_of_group, store)
    for activated in trace:
        tick(ledger, activated, cfg)
    return ledger


def load_trace(path) -> list[list[int]]:
    """JSON-lines trace; each line is ``{"groups": [...]}`` or a bare list."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise NumericsError(f"{path}:{lineno}: invalid JSON") from exc
            groups = rec.get("groups") if isinstance(rec, dict) else rec
            if not isinstance(groups, list):
                raise NumericsError(f"{path}:{lineno}: expected a list of group ids")
            out.append([int(g) for g in groups])
    return out
