"""Slotted uplink resource allocation under four policies.

``fug``     predictive fast uplink grant with feedback correction, margin wait,
            a reserved fallback pool and random exploration.
``genie``   perfect knowledge of activity and class; strict priority, FCFS.
``random``  resources handed to uniformly drawn devices regardless of state.
``gbra``    grant-based random access: preamble contention, backoff, a fixed
            handshake and then FCFS data grants.

A device holds at most one resource at a time and transmits its packets in
FIFO order. A granted packet occupies its resource for ``tx_slots``
consecutive slots; transmissions are never pre-empted.
"""

from __future__ import annotations

import csv
import heapq
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .metrics import db_to_linear, sample_fading, throughput_report, transmit_slots
from .traffic import ALARM, DATA, TrafficTrace

POLICIES = ("fug", "genie", "random", "gbra")

PATH_NONE, PATH_SCHEDULED, PATH_EXPLORATION, PATH_FALLBACK = 0, 1, 2, 3
PATH_NAMES = ("none", "scheduled", "exploration", "fallback")

EVENTS = ("grant", "collision", "backoff", "margin_wait", "ra_fallback", "exploration")

# per-slot counters kept by every run
SLOT_FIELDS = ("granted", "reserved_used", "exploration", "ongoing", "unused",
               "ra_attempts", "collisions", "margin_waits")

_EPS = 1e-9


@dataclass(frozen=True)
class SchedulerConfig:
    resources: int = 10
    policy: str = "fug"
    exploration_rate: float = 0.1
    reserved_fraction: float = 0.1
    margin_slots: int = 20
    preambles: int = 54
    backoff_window: int = 20
    handshake_slots: int = 4
    snr_db: float = 10.0
    symbols_per_slot: int = 15000
    seed: int = 0

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise ValueError(f"unknown policy {self.policy!r}; expected one of {POLICIES}")
        if self.resources < 1:
            raise ValueError("resources must be >= 1")
        if not 0.0 <= self.exploration_rate <= 1.0:
            raise ValueError("exploration_rate must be in [0, 1]")
        if not 0.0 <= self.reserved_fraction < 1.0:
            raise ValueError("reserved_fraction must be in [0, 1)")
        if self.margin_slots < 0 or self.handshake_slots < 0:
            raise ValueError("margin_slots and handshake_slots must be >= 0")
        if self.preambles < 1 or self.backoff_window < 1:
            raise ValueError("preambles and backoff_window must be >= 1")

    @property
    def reserved(self) -> int:
        """Resources held back for the fallback access procedure."""
        if self.policy != "fug":
            return 0
        return min(self.resources, reserved_count(self.resources, self.reserved_fraction))

    @property
    def snr(self) -> float:
        return db_to_linear(self.snr_db)


def reserved_count(resources: int, fraction: float) -> int:
    return int(math.ceil(fraction * resources - _EPS))


def exploration_budget(unused: int, rate: float) -> int:
    return int(math.floor(rate * unused + _EPS))


@dataclass
class Predictions:
    """Predicted activity: one entry per (slot, device) the BS expects a packet.

    ``cls`` is the priority the BS attaches to the entry.
    """

    slot: np.ndarray
    device: np.ndarray
    cls: np.ndarray

    def __post_init__(self):
        self.slot = np.asarray(self.slot, dtype=np.int64)
        self.device = np.asarray(self.device, dtype=np.int64)
        self.cls = np.asarray(self.cls, dtype=np.uint8)
        if not (self.slot.shape == self.device.shape == self.cls.shape):
            raise ValueError("prediction arrays differ in length")
        order = np.lexsort((self.device, self.slot))
        self.slot, self.device, self.cls = self.slot[order], self.device[order], self.cls[order]

    def __len__(self):
        return len(self.slot)

    @classmethod
    def perfect(cls, trace: TrafficTrace) -> "Predictions":
        a = trace.arrivals
        return cls(a.slot.copy(), a.device.copy(), a.cls.copy())

    @classmethod
    def surrogate(cls, trace: TrafficTrace, miss_rate: float, false_active_ratio: float,
                  rng: np.random.Generator, device_labels=None) -> "Predictions":
        """Predictions with a given error profile, derived from the true arrivals.

        Each packet is predicted at its ready slot with probability
        ``1 - miss_rate``. ``false_active_ratio`` times the packet count extra
        entries land on uniformly drawn (slot, device) cells. When
        ``device_labels`` (classifier output per device, 1 = alarm-capable)
        is given, an entry is flagged alarm only if the packet is an alarm and
        the device is labelled alarm-capable.
        """
        if not (0.0 <= miss_rate <= 1.0 and false_active_ratio >= 0.0):
            raise ValueError("miss_rate must be in [0, 1] and false_active_ratio >= 0")
        a = trace.arrivals
        keep = rng.random(len(a)) >= miss_rate
        pcls = a.cls.copy()
        if device_labels is not None:
            labels = np.asarray(device_labels).astype(bool)
            pcls = np.where(labels[a.device], pcls, DATA).astype(np.uint8)
        n_false = int(rng.poisson(false_active_ratio * len(a))) if len(a) else 0
        fs = rng.integers(0, trace.n_slots, n_false)
        fd = rng.integers(0, trace.n_devices, n_false)
        return cls(np.concatenate([a.slot[keep], fs]), np.concatenate([a.device[keep], fd]),
                   np.concatenate([pcls[keep], np.zeros(n_false, dtype=np.uint8)]))


@dataclass
class PacketTable:
    ready: np.ndarray
    device: np.ndarray
    cls: np.ndarray
    nbytes: np.ndarray
    h_sq: np.ndarray
    tx_slots: np.ndarray
    grant_slot: np.ndarray
    path: np.ndarray
    overhead: np.ndarray

    @property
    def n(self) -> int:
        return len(self.ready)

    def delay_slots(self, n_slots: int) -> np.ndarray:
        """Access delay per packet; packets never granted are censored at run end."""
        end = np.where(self.grant_slot >= 0, self.grant_slot, n_slots)
        return end - self.ready


@dataclass
class AllocationLog:
    policy: str
    config: SchedulerConfig
    n_slots: int
    slot_duration: float
    snr: float
    symbols_per_slot: int
    packets: PacketTable
    slots: dict                 # name -> per-slot int array, see SLOT_FIELDS
    events: list                # (slot, device, resource, event)
    corrections: list = field(default_factory=list)   # (slot, device) flipped active -> silent
    false_active: int = 0
    false_silent: int = 0

    @property
    def collisions(self) -> int:
        return int(self.slots["collisions"].sum())

    def delays_ms(self) -> np.ndarray:
        return self.packets.delay_slots(self.n_slots) * (self.slot_duration * 1e3)

    def total_bytes(self) -> float:
        return throughput_report(self)

    def summary(self, seed=None) -> dict:
        d = self.delays_ms()
        return {
            "policy": self.policy,
            "resources": self.config.resources,
            "seed": self.config.seed if seed is None else seed,
            "total_bytes": self.total_bytes(),
            "mean_delay_ms": float(d.mean()) if d.size else 0.0,
            "max_delay_ms": float(d.max()) if d.size else 0.0,
            "collisions": self.collisions,
        }

    def check_conservation(self) -> bool:
        s = self.slots
        total = s["granted"] + s["reserved_used"] + s["exploration"] + s["ongoing"] + s["unused"]
        return bool(np.all(total == self.config.resources))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["slot", "device_id", "resource", "event"])
            w.writerows(self.events)


SUMMARY_FIELDS = ("policy", "resources", "seed", "total_bytes", "mean_delay_ms", "max_delay_ms", "collisions")


def write_summary(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in SUMMARY_FIELDS})


# -- per-slot decision rules --------------------------------------------------


def allocate_genie(candidates, n_free: int) -> list:
    """Devices to grant from ``(cls, ready, device)`` candidates: alarms first, then FCFS."""
    order = sorted(candidates, key=lambda c: (0 if c[0] == ALARM else 1, c[1], c[2]))
    return [c[2] for c in order[:max(n_free, 0)]]


def allocate_fug(predicted, config: SchedulerConfig, busy=()) -> list:
    """Predictive grant order for ``(device, cls, predicted_slot)`` entries.

    At most ``R - ceil(a*R)`` devices are returned; alarms first, then by
    predicted slot and device id. Devices in ``busy`` are skipped.
    """
    capacity = config.resources - reserved_count(config.resources, config.reserved_fraction)
    busy = set(busy)
    out = []
    for d, c, s in sorted(predicted, key=lambda e: (0 if e[1] == ALARM else 1, e[2], e[0])):
        if len(out) >= capacity:
            break
        if d in busy or d in out:
            continue
        out.append(d)
    return out


def allocate_random(n_devices: int, n_free: int, rng: np.random.Generator) -> np.ndarray:
    """``n_free`` devices drawn uniformly without replacement."""
    n = min(max(n_free, 0), n_devices)
    return rng.choice(n_devices, size=n, replace=False)


def allocate_gbra(contenders, preambles: int, backoff_window: int, rng: np.random.Generator):
    """One contention round. Returns (succeeded devices, [(device, backoff_slots)])."""
    contenders = list(contenders)
    if not contenders:
        return [], []
    picks = rng.integers(0, preambles, len(contenders))
    counts = np.bincount(picks, minlength=preambles)
    ok = counts[picks] == 1
    won = [d for d, k in zip(contenders, ok) if k]
    lost = [d for d, k in zip(contenders, ok) if not k]
    backoffs = rng.integers(1, backoff_window + 1, len(lost))
    return won, list(zip(lost, (int(b) for b in backoffs)))


@dataclass
class Feedback:
    corrections: list       # (slot, device) whose stored activity flips to silent
    margin_deadlines: dict  # device -> slot at which it falls back to random access


def feedback_correct(slot: int, granted, uncovered, config: SchedulerConfig) -> Feedback:
    """Resolve one slot's predictive grants against what the devices actually did.

    ``granted`` holds ``(device, used)`` pairs; an unused grant means the
    prediction was a false active and the stored bit is corrected. Devices in
    ``uncovered`` had traffic nobody predicted and start a margin wait.
    """
    corrections = [(slot, d) for d, used in granted if not used]
    deadlines = {d: slot + config.margin_slots for d in uncovered}
    return Feedback(corrections, deadlines)


# -- simulation ---------------------------------------------------------------


class _Run:
    def __init__(self, trace: TrafficTrace, config: SchedulerConfig, predictions: Predictions | None):
        self.trace = trace
        self.cfg = config
        self.R = config.resources
        self.D = trace.n_devices
        self.T = trace.n_slots
        a = trace.arrivals
        n = len(a)
        seq = np.random.SeedSequence([config.seed, trace.config.seed, 0xFAD])
        fade_seed, policy_seed = seq.spawn(2)
        h_sq = sample_fading(np.random.default_rng(fade_seed), n)
        self.packets = PacketTable(
            ready=a.slot.astype(np.int64), device=a.device.astype(np.int64), cls=a.cls.astype(np.uint8),
            nbytes=a.nbytes.astype(np.int64), h_sq=h_sq,
            tx_slots=transmit_slots(a.nbytes, config.snr, h_sq, config.symbols_per_slot),
            grant_slot=np.full(n, -1, dtype=np.int64), path=np.zeros(n, dtype=np.uint8),
            overhead=np.zeros(n, dtype=np.int64))
        self.rng = np.random.default_rng(policy_seed)
        self.queues = [deque() for _ in range(self.D)]
        self.dev_free = np.zeros(self.D, dtype=np.int64)
        self.res_free = np.zeros(self.R, dtype=np.int64)
        self.free_events = []      # (slot, device)
        self.next_arrival = 0
        self.events = []
        self.slots = {k: np.zeros(self.T, dtype=np.int64) for k in SLOT_FIELDS}
        self.slots["unused"][:] = self.R
        self.corrections = []
        self.false_active = 0
        self.false_silent = 0
        self.waiting = set()       # devices whose head packet may be granted now

        pol = config.policy
        if pol == "fug":
            if predictions is None:
                raise ValueError("the fug policy needs predictions")
            p = predictions
            if len(p) and (p.slot.min() < 0 or p.slot.max() >= self.T or p.device.min() < 0
                           or p.device.max() >= self.D):
                raise ValueError("predictions are not aligned with the trace slots/devices")
            self.pred = p
            self.next_pred = 0
            self.pred_heap = []
            self.pred_live = 0
            self.consumed = np.zeros(len(p), dtype=bool)
            self.dev_entries = [deque() for _ in range(self.D)]
            self.margin_heap = []
            self.fallback_heap = []
            self.n_res = config.reserved
            self.pool = np.arange(self.R - self.n_res)
            self.reserve = np.arange(self.R - self.n_res, self.R)
            self.perm = self.rng.permutation(self.D)
            self.ptr = 0
            self.idle_explore = min(exploration_budget(self.R - self.n_res, config.exploration_rate), self.D)
            self.slots["exploration"][:] = self.idle_explore
            self.slots["unused"][:] = self.R - self.idle_explore
        elif pol == "genie":
            self.heap = []
        elif pol == "gbra":
            self.attempts = []
            self.connecting = []
            self.connected = []

    # common plumbing

    def _admit(self, t):
        a = self.packets
        i = self.next_arrival
        while i < a.n and a.ready[i] <= t:
            d = int(a.device[i])
            q = self.queues[d]
            q.append(i)
            if len(q) == 1:
                if self.dev_free[d] <= t:
                    self._eligible(t, d)
                else:
                    heapq.heappush(self.free_events, (int(self.dev_free[d]), d))
            i += 1
        self.next_arrival = i
        while self.free_events and self.free_events[0][0] <= t:
            _, d = heapq.heappop(self.free_events)
            if self.queues[d]:
                self._eligible(t, d)

    def _grant(self, t, d, r, path, overhead=0):
        pid = self.queues[d].popleft()
        a = self.packets
        a.grant_slot[pid] = t
        a.path[pid] = path
        a.overhead[pid] = overhead
        dur = int(a.tx_slots[pid])
        self.dev_free[d] = t + dur
        self.res_free[r] = t + dur
        self.waiting.discard(d)
        if self.queues[d]:
            heapq.heappush(self.free_events, (t + dur, d))
        self.events.append((t, d, int(r), "exploration" if path == PATH_EXPLORATION else "grant"))
        return pid

    def _head(self, d):
        q = self.queues[d]
        return q[0] if q else -1

    def run(self) -> AllocationLog:
        step = getattr(self, "_step_" + self.cfg.policy)
        t = 0
        fug = self.cfg.policy == "fug"
        while t < self.T:
            if fug:
                self._load_predictions(t)
            self._admit(t)
            step(t)
            nxt = t + 1
            if self._idle(nxt):
                nxt = max(nxt, min(self._next_input(), self.T))
                if self.cfg.policy == "fug" and nxt > t + 1:
                    self.ptr = (self.ptr + self.idle_explore * (nxt - t - 1)) % self.D
            t = nxt
        cfg = self.cfg
        return AllocationLog(cfg.policy, cfg, self.T, self.trace.config.slot_duration, cfg.snr,
                             cfg.symbols_per_slot, self.packets, self.slots, self.events,
                             self.corrections, self.false_active, self.false_silent)

    def _idle(self, t):
        if self.waiting or self.free_events or (self.res_free > t).any():
            return False
        pol = self.cfg.policy
        if pol == "genie":
            return not self.heap
        if pol == "gbra":
            return not (self.attempts or self.connecting or self.connected)
        if pol == "fug":
            return self.pred_live == 0 and not self.margin_heap and not self.fallback_heap
        return True

    def _next_input(self):
        nxt = self.T
        if self.next_arrival < self.packets.n:
            nxt = int(self.packets.ready[self.next_arrival])
        if self.cfg.policy == "fug" and self.next_pred < len(self.pred):
            nxt = min(nxt, int(self.pred.slot[self.next_pred]))
        return nxt

    def _free_resources(self, t, pool=None):
        idx = np.arange(self.R) if pool is None else pool
        return [int(r) for r in idx[self.res_free[idx] <= t]]

    def _eligible(self, t, d):
        getattr(self, "_eligible_" + self.cfg.policy)(t, d)

    # genie

    def _eligible_genie(self, t, d):
        pid = self._head(d)
        heapq.heappush(self.heap, (0 if self.packets.cls[pid] == ALARM else 1, int(self.packets.ready[pid]), d, pid))

    def _step_genie(self, t):
        free = self._free_resources(t)
        ongoing = self.R - len(free)
        n = 0
        while free and self.heap:
            _, _, d, pid = heapq.heappop(self.heap)
            if self._head(d) != pid or self.dev_free[d] > t:
                continue
            self._grant(t, d, free.pop(0), PATH_SCHEDULED)
            n += 1
        self._record(t, granted=n, ongoing=ongoing, unused=len(free))

    # random

    def _eligible_random(self, t, d):
        self.waiting.add(d)

    def _step_random(self, t):
        free = self._free_resources(t)
        ongoing = self.R - len(free)
        n = len(free)
        # the draw only matters when someone has traffic; idle slots skip it
        if self.waiting and free:
            for d in allocate_random(self.D, len(free), self.rng):
                d = int(d)
                r = free.pop(0)
                if d in self.waiting:
                    self._grant(t, d, r, PATH_SCHEDULED)
        self._record(t, granted=n - len(free), ongoing=ongoing, unused=len(free))

    # grant-based random access

    def _eligible_gbra(self, t, d):
        heapq.heappush(self.attempts, (t, d, self._head(d)))

    def _step_gbra(self, t):
        cfg = self.cfg
        contenders = []
        while self.attempts and self.attempts[0][0] <= t:
            _, d, pid = heapq.heappop(self.attempts)
            if self._head(d) == pid:
                contenders.append((d, pid))
        n_coll = 0
        if contenders:
            pid_of = dict(contenders)
            won, lost = allocate_gbra([d for d, _ in contenders], cfg.preambles, cfg.backoff_window, self.rng)
            for d in won:
                pid = pid_of[d]
                heapq.heappush(self.connecting, (t + cfg.handshake_slots, int(self.packets.ready[pid]), d, pid))
            for d, b in lost:
                self.events.append((t, d, -1, "collision"))
                self.events.append((t, d, -1, "backoff"))
                heapq.heappush(self.attempts, (t + b, d, pid_of[d]))
            n_coll = len(lost)
        while self.connecting and self.connecting[0][0] <= t:
            ct, ready, d, pid = heapq.heappop(self.connecting)
            heapq.heappush(self.connected, (ready, d, pid, ct))
        free = self._free_resources(t)
        ongoing = self.R - len(free)
        n = 0
        deferred = []
        while free and self.connected:
            ready, d, pid, ct = heapq.heappop(self.connected)
            if self.dev_free[d] > t:
                deferred.append((ready, d, pid, ct))
                continue
            self._grant(t, d, free.pop(0), PATH_SCHEDULED, overhead=ct - ready)
            n += 1
        for item in deferred:
            heapq.heappush(self.connected, item)
        self._record(t, granted=n, ongoing=ongoing, unused=len(free),
                     ra_attempts=len(contenders), collisions=n_coll)

    # predictive fast uplink grant

    def _eligible_fug(self, t, d):
        self.waiting.add(d)
        if not self.dev_entries[d]:
            pid = self._head(d)
            fb = feedback_correct(t, (), (d,), self.cfg)
            heapq.heappush(self.margin_heap, (fb.margin_deadlines[d], d, pid))
            self.false_silent += 1
            self.events.append((t, d, -1, "margin_wait"))
            self.slots["margin_waits"][t] += 1

    def _load_predictions(self, t):
        p = self.pred
        j = self.next_pred
        while j < len(p) and p.slot[j] <= t:
            d = int(p.device[j])
            heapq.heappush(self.pred_heap, (0 if p.cls[j] == ALARM else 1, int(p.slot[j]), d, j))
            self.dev_entries[d].append(j)
            self.pred_live += 1
            j += 1
        self.next_pred = j

    def _consume(self, d, eid=None):
        entries = self.dev_entries[d]
        if not entries:
            return
        if eid is None:
            eid = entries.popleft()
        else:
            entries.remove(eid)
        self.consumed[eid] = True
        self.pred_live -= 1

    def _step_fug(self, t):
        cfg = self.cfg
        free = self._free_resources(t, self.pool)
        free_res = self._free_resources(t, self.reserve)
        ongoing = self.R - len(free) - len(free_res)
        served = set()

        # predictive grants, alarm class first then FCFS on the predicted slot
        n_pred = 0
        deferred = []
        outcomes = []
        while free and self.pred_heap:
            item = heapq.heappop(self.pred_heap)
            _, _, d, eid = item
            if self.consumed[eid]:
                continue
            if self.dev_free[d] > t or d in served:
                deferred.append(item)
                continue
            r = free.pop(0)
            self._consume(d, eid)
            served.add(d)
            n_pred += 1
            if d in self.waiting:
                self._grant(t, d, r, PATH_SCHEDULED)
                outcomes.append((d, True))
            else:
                self.events.append((t, d, r, "grant"))
                outcomes.append((d, False))
        for item in deferred:
            heapq.heappush(self.pred_heap, item)
        fb = feedback_correct(t, outcomes, (), cfg)
        self.corrections.extend(fb.corrections)
        self.false_active += len(fb.corrections)

        # margin expiry: unpredicted traffic falls back to the reserved pool
        while self.margin_heap and self.margin_heap[0][0] <= t:
            _, d, pid = heapq.heappop(self.margin_heap)
            if self._head(d) == pid and d not in served:
                self.events.append((t, d, -1, "ra_fallback"))
                heapq.heappush(self.fallback_heap, (t + cfg.handshake_slots, int(self.packets.ready[pid]), d, pid))

        n_res = 0
        deferred = []
        while free_res and self.fallback_heap and self.fallback_heap[0][0] <= t:
            item = heapq.heappop(self.fallback_heap)
            ct, ready, d, pid = item
            if self._head(d) != pid:
                continue
            if self.dev_free[d] > t or d in served:
                deferred.append(item)
                continue
            self._grant(t, d, free_res.pop(0), PATH_FALLBACK, overhead=cfg.handshake_slots)
            self._consume(d)
            served.add(d)
            n_res += 1
        for item in deferred:
            heapq.heappush(self.fallback_heap, item)

        # exploration of devices nobody predicted
        budget = exploration_budget(len(free), cfg.exploration_rate)
        n_exp = 0
        tries = 0
        while n_exp < budget and tries < self.D:
            d = int(self.perm[self.ptr])
            self.ptr = (self.ptr + 1) % self.D
            tries += 1
            if d in served or self.dev_free[d] > t:
                continue
            r = free.pop(0)
            served.add(d)
            n_exp += 1
            if d in self.waiting:
                self._grant(t, d, r, PATH_EXPLORATION)
                self._consume(d)
        self._record(t, granted=n_pred, reserved_used=n_res, exploration=n_exp, ongoing=ongoing,
                     unused=len(free) + len(free_res))

    def _record(self, t, **values):
        for k in SLOT_FIELDS:
            self.slots[k][t] = values.get(k, 0) if k != "margin_waits" else self.slots[k][t]


def run_policy(trace: TrafficTrace, config: SchedulerConfig, predictions: Predictions | None = None) -> AllocationLog:
    """Simulate one policy over the whole trace; deterministic given the seeds."""
    return _Run(trace, config, predictions).run()
