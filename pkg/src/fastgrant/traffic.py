"""Coupled Markov-modulated Poisson traffic (CMMPP and its M-process extension).

Every device runs a two-state Markov chain (data / alarm). Its transition
matrix is a convex combination of a coordinated matrix ``P_C`` and an
uncoordinated matrix ``P_U``, weighted by how strongly the active background
processes reach the device in space and time. Packets arrive as a Poisson
process whose rate follows the chain state.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from ._io import save_npz

log = logging.getLogger(__name__)

DATA, ALARM = 0, 1
STATE_NAMES = ("data", "alarm")
UNCOORDINATED, COORDINATED = "uncoordinated", "coordinated"

# simulated slots per vectorized block; bounds memory at chunk*devices*processes
_CHUNK = 1000


@dataclass(frozen=True)
class BackgroundProcess:
    """Spatio-temporal event driving nearby devices into the alarm state.

    Positions and spreads in meters, times in seconds. The process is active
    on the half-open window ``[t_start, t_start + tau)``.
    """

    mu_x: float
    mu_y: float
    sigma_x: float
    sigma_y: float
    t_start: float
    tau: float

    def __post_init__(self):
        if not (self.sigma_x > 0 and self.sigma_y > 0):
            raise ValueError("process spread must be positive")
        if not self.tau > 0:
            raise ValueError("process duration must be positive")

    def active(self, t: float) -> bool:
        return self.t_start <= t < self.t_start + self.tau


@dataclass(frozen=True)
class StateMatrices:
    """Coordinated/uncoordinated transition matrices and state vectors.

    Rows index the current state (data, alarm). The defaults keep data
    absorbing under ``P_U`` and make ``P_C`` fire an alarm and fall back.
    """

    P_C: tuple = ((0.1, 0.9), (0.9, 0.1))
    P_U: tuple = ((1.0, 0.0), (0.9, 0.1))
    pi_C: tuple = (0.5, 0.5)
    pi_U: tuple = (1.0, 0.0)

    def __post_init__(self):
        for name in ("P_C", "P_U"):
            m = np.asarray(getattr(self, name), dtype=float)
            if m.shape != (2, 2):
                raise ValueError(f"{name} must be 2x2")
            if (m < 0).any() or (m > 1).any() or np.abs(m.sum(axis=1) - 1).max() > 1e-12:
                raise ValueError(f"{name} must be row-stochastic")
        for name in ("pi_C", "pi_U"):
            v = np.asarray(getattr(self, name), dtype=float)
            if v.shape != (2,) or (v < 0).any() or abs(v.sum() - 1) > 1e-12:
                raise ValueError(f"{name} must be a probability vector of length 2")

    @property
    def coordinated(self) -> np.ndarray:
        return np.asarray(self.P_C, dtype=float)

    @property
    def uncoordinated(self) -> np.ndarray:
        return np.asarray(self.P_U, dtype=float)


@dataclass(frozen=True)
class TrafficConfig:
    device_count: int = 1000
    area: float = 1000.0
    run_time: float = 60.0
    slot_duration: float = 1e-3
    lambda_data: float = 1.0 / 3600.0
    lambda_alarm: float = 1.0
    data_packet_bytes: int = 100
    alarm_packet_bytes: int = 1000
    processes: tuple = ()
    matrices: StateMatrices = field(default_factory=StateMatrices)
    coordinated_threshold: float = 0.05
    startup: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.device_count < 0:
            raise ValueError("device_count must be non-negative")
        if not self.slot_duration > 0:
            raise ValueError("slot_duration must be positive")
        if not self.lambda_data > 0:
            raise ValueError("lambda_data must be positive")
        if self.lambda_alarm < self.lambda_data:
            raise ValueError("lambda_alarm must be at least lambda_data")
        if not self.area > 0 or not self.run_time > 0:
            raise ValueError("area and run_time must be positive")
        object.__setattr__(self, "processes", tuple(self.processes))

    @property
    def n_slots(self) -> int:
        return int(round(self.run_time / self.slot_duration))

    def packet_bytes(self, state: int) -> int:
        return self.alarm_packet_bytes if state == ALARM else self.data_packet_bytes


def random_processes(count: int, area: float, run_time: float, rng: np.random.Generator) -> tuple:
    """Draw ``count`` processes with uniform epicenters, spreads and windows.

    Processes are drawn one after another, so the first ``k`` processes of a
    larger draw equal a draw of ``k`` from the same generator state.
    """
    out = []
    for _ in range(count):
        mu_x, mu_y = rng.uniform(0.1 * area, 0.9 * area, size=2)
        sx, sy = rng.uniform(0.05 * area, 0.12 * area, size=2)
        t_start = rng.uniform(0.0, 0.6 * run_time)
        tau = rng.uniform(0.1 * run_time, 0.3 * run_time)
        out.append(BackgroundProcess(float(mu_x), float(mu_y), float(sx), float(sy), float(t_start), float(tau)))
    return tuple(out)


def scenario(processes: int = 1, seed: int = 0, **overrides) -> TrafficConfig:
    """Default scenario config with ``processes`` randomly placed events."""
    base = TrafficConfig(seed=seed, **overrides)
    rng = np.random.default_rng([seed, 0xBAC])
    procs = random_processes(processes, base.area, base.run_time, rng)
    return replace(base, processes=procs)


# -- elementary operations ----------------------------------------------------


def spatial_weight(process: BackgroundProcess, x, y):
    """Unnormalized Gaussian footprint of ``process`` at (x, y), in (0, 1]."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise ValueError("coordinates must be finite")
    dx = (x - process.mu_x) / process.sigma_x
    dy = (y - process.mu_y) / process.sigma_y
    w = np.exp(-0.5 * (dx * dx + dy * dy))
    return float(w) if w.ndim == 0 else w


def temporal_sample(process: BackgroundProcess, t: float, rng: np.random.Generator) -> float:
    if t < 0:
        raise ValueError("time must be non-negative")
    if not process.active(t):
        return 0.0
    return float(rng.random())


def combined_theta(weights_and_samples: Iterable[tuple]) -> float:
    """Alarm probability from M independent processes, 1 - prod(1 - delta*theta)."""
    # accumulated as a + p(1 - a), which equals the product form and keeps M=1 exact
    alarm = 0.0
    for delta, theta in weights_and_samples:
        p = delta * theta
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"component product {p} outside [0, 1]")
        alarm += p * (1.0 - alarm)
    return alarm


def transition_matrix(theta: float, matrices: StateMatrices) -> np.ndarray:
    if not 0.0 <= theta <= 1.0:
        raise ValueError(f"theta {theta} outside [0, 1]")
    return theta * matrices.coordinated + (1.0 - theta) * matrices.uncoordinated


def state_vector(theta: float, matrices: StateMatrices) -> np.ndarray:
    if not 0.0 <= theta <= 1.0:
        raise ValueError(f"theta {theta} outside [0, 1]")
    return theta * np.asarray(matrices.pi_C) + (1.0 - theta) * np.asarray(matrices.pi_U)


@dataclass
class DeviceDescriptor:
    id: int
    x: float
    y: float
    class_label: str = UNCOORDINATED
    state: int = DATA


def step_device(device: DeviceDescriptor, P: np.ndarray, rng: np.random.Generator) -> int:
    """Advance one device by one Markov step and return its new state."""
    row = np.asarray(P, dtype=float)[device.state]
    new = ALARM if rng.random() < row[ALARM] else DATA
    device.state = new
    return new


def generate_arrivals(state: int, lambda_data: float, lambda_alarm: float, slot_duration: float,
                      rng: np.random.Generator) -> tuple[int, int]:
    """Poisson packet count for one slot; the packet class is the state."""
    lam = lambda_alarm if state == ALARM else lambda_data
    return int(rng.poisson(lam * slot_duration)), state


# -- full simulation ----------------------------------------------------------


@dataclass
class Arrivals:
    """Packet arrivals sorted by (slot, device); one entry per packet."""

    slot: np.ndarray
    device: np.ndarray
    cls: np.ndarray
    nbytes: np.ndarray

    def __len__(self):
        return len(self.slot)


@dataclass
class TrafficTrace:
    config: TrafficConfig
    x: np.ndarray
    y: np.ndarray
    coordinated: np.ndarray     # ground-truth class label (alarm-capable)
    states: np.ndarray          # (n_slots, n_devices) uint8
    arrivals: Arrivals
    weights: np.ndarray         # (n_devices, n_processes) spatial weights

    @property
    def n_slots(self) -> int:
        return self.states.shape[0]

    @property
    def n_devices(self) -> int:
        return self.x.shape[0]

    def device(self, i: int, slot: int = 0) -> DeviceDescriptor:
        return DeviceDescriptor(i, float(self.x[i]), float(self.y[i]),
                                COORDINATED if self.coordinated[i] else UNCOORDINATED,
                                int(self.states[slot, i]))

    def counts(self) -> np.ndarray:
        """Arrival counts per (slot, device) as a dense int array."""
        out = np.zeros(self.states.shape, dtype=np.int32)
        np.add.at(out, (self.arrivals.slot, self.arrivals.device), 1)
        return out

    def activity(self, device: int) -> np.ndarray:
        """Binary activity of one device: 1 iff at least one arrival in the slot."""
        bits = np.zeros(self.n_slots, dtype=np.uint8)
        bits[self.arrivals.slot[self.arrivals.device == device]] = 1
        return bits

    def arrivals_per_slot(self) -> np.ndarray:
        return np.bincount(self.arrivals.slot, minlength=self.n_slots)

    def peak_concurrent_demand(self) -> int:
        """Largest number of packets that become ready in the same slot."""
        if len(self.arrivals) == 0:
            return 0
        return int(self.arrivals_per_slot().max())

    def alarm_packets(self) -> int:
        return int((self.arrivals.cls == ALARM).sum())

    def write_csv(self, path) -> None:
        """Sparse export: one row per (slot, device) with at least one arrival."""
        a = self.arrivals
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["slot", "device_id", "state", "arrivals", "class", "bytes"])
            i = 0
            n = len(a)
            while i < n:
                j = i
                while j + 1 < n and a.slot[j + 1] == a.slot[i] and a.device[j + 1] == a.device[i]:
                    j += 1
                s, d = int(a.slot[i]), int(a.device[i])
                cls = int(a.cls[i])
                w.writerow([s, d, STATE_NAMES[int(self.states[s, d])], j - i + 1, STATE_NAMES[cls],
                            int(a.nbytes[i:j + 1].sum())])
                i = j + 1

    def save(self, path) -> None:
        c = self.config
        procs = np.array([[p.mu_x, p.mu_y, p.sigma_x, p.sigma_y, p.t_start, p.tau] for p in c.processes],
                         dtype=float).reshape(-1, 6)
        save_npz(
            path, x=self.x, y=self.y, coordinated=self.coordinated, states=self.states,
            a_slot=self.arrivals.slot, a_device=self.arrivals.device, a_cls=self.arrivals.cls,
            a_bytes=self.arrivals.nbytes, weights=self.weights, processes=procs,
            scalars=np.array([c.device_count, c.area, c.run_time, c.slot_duration, c.lambda_data,
                              c.lambda_alarm, c.data_packet_bytes, c.alarm_packet_bytes,
                              c.coordinated_threshold, float(c.startup), c.seed], dtype=float),
            matrices=np.array([c.matrices.P_C, c.matrices.P_U], dtype=float),
            pis=np.array([c.matrices.pi_C, c.matrices.pi_U], dtype=float),
        )

    @classmethod
    def load(cls, path) -> "TrafficTrace":
        z = np.load(path)
        s = z["scalars"]
        procs = tuple(BackgroundProcess(*map(float, row)) for row in z["processes"])
        m = z["matrices"]
        pis = z["pis"]
        matrices = StateMatrices(tuple(map(tuple, m[0])), tuple(map(tuple, m[1])),
                                 tuple(pis[0]), tuple(pis[1]))
        config = TrafficConfig(int(s[0]), s[1], s[2], s[3], s[4], s[5], int(s[6]), int(s[7]), procs,
                               matrices, s[8], bool(s[9]), int(s[10]))
        return cls(config, z["x"], z["y"], z["coordinated"], z["states"],
                   Arrivals(z["a_slot"], z["a_device"], z["a_cls"], z["a_bytes"]), z["weights"])


def _theta_block(weights: np.ndarray, theta_proc: np.ndarray) -> np.ndarray:
    """theta_n for a block of slots: (slots, M) x (devices, M) -> (slots, devices)."""
    if theta_proc.shape[1] == 0:
        return np.zeros((theta_proc.shape[0], weights.shape[0]))
    no_alarm = np.ones((theta_proc.shape[0], weights.shape[0]))
    for m in range(theta_proc.shape[1]):
        no_alarm *= 1.0 - theta_proc[:, m:m + 1] * weights[None, :, m]
    return 1.0 - no_alarm


def simulate(config: TrafficConfig) -> TrafficTrace:
    """Run the slotted CMMPP / M-CMMPP model.

    Random streams for positions, each process' temporal samples, the Markov
    steps and the arrivals are independent children of the config seed, so
    adding processes leaves the layout and the existing processes' draws
    unchanged.
    """
    cfg = config
    D, T, M = cfg.device_count, cfg.n_slots, len(cfg.processes)
    root = np.random.SeedSequence(cfg.seed)
    pos_ss, init_ss, step_ss, arr_ss, proc_ss = root.spawn(5)
    pos_rng = np.random.default_rng(pos_ss)
    x = pos_rng.uniform(0.0, cfg.area, size=D)
    y = pos_rng.uniform(0.0, cfg.area, size=D)

    weights = np.zeros((D, M))
    for m, p in enumerate(cfg.processes):
        weights[:, m] = spatial_weight(p, x, y)
    coordinated = weights.max(axis=1) > cfg.coordinated_threshold if M else np.zeros(D, dtype=bool)

    # per-process temporal samples, one independent stream per process index
    theta_proc = np.zeros((T, M))
    proc_children = proc_ss.spawn(max(M, 1))
    t_axis = np.arange(T) * cfg.slot_duration
    for m, p in enumerate(cfg.processes):
        inside = (t_axis >= p.t_start) & (t_axis < p.t_start + p.tau)
        draws = np.random.default_rng(proc_children[m]).random(T)
        theta_proc[:, m] = np.where(inside, draws, 0.0)

    Pc, Pu = cfg.matrices.coordinated, cfg.matrices.uncoordinated
    states = np.zeros((T, D), dtype=np.uint8)
    step_rng = np.random.default_rng(step_ss)
    arr_rng = np.random.default_rng(arr_ss)

    if D and T:
        theta0 = _theta_block(weights, theta_proc[:1])[0]
        p_alarm0 = theta0 * cfg.matrices.pi_C[ALARM] + (1 - theta0) * cfg.matrices.pi_U[ALARM]
        s = np.random.default_rng(init_ss).random(D) < p_alarm0
    else:
        s = np.zeros(D, dtype=bool)

    data_absorbing = Pu[DATA, ALARM] == 0.0
    slot_list, dev_list, cls_list = [], [], []
    lam_d = cfg.lambda_data * cfg.slot_duration
    lam_a = cfg.lambda_alarm * cfg.slot_duration

    for start in range(0, T, _CHUNK):
        stop = min(T, start + _CHUNK)
        tp = theta_proc[start:stop]
        any_active = tp.any(axis=1)
        th = _theta_block(weights, tp)
        p01 = th * Pc[DATA, ALARM] + (1 - th) * Pu[DATA, ALARM]
        p10 = th * Pc[ALARM, DATA] + (1 - th) * Pu[ALARM, DATA]
        u = step_rng.random((stop - start, D))
        block = states[start:stop]
        for k in range(stop - start):
            t = start + k
            if t > 0 and not (data_absorbing and not any_active[k] and not s.any()):
                s = np.where(s, u[k] >= p10[k], u[k] < p01[k])
            block[k] = s

        # Poisson arrivals per cell; data cells handled by superposition since
        # their rate is tiny and identical
        flat = block.reshape(-1)
        data_idx = np.flatnonzero(flat == DATA)
        n_data = arr_rng.poisson(lam_d * data_idx.size) if data_idx.size else 0
        if n_data:
            picks = data_idx[arr_rng.integers(0, data_idx.size, size=n_data)]
            slot_list.append(picks // D + start)
            dev_list.append(picks % D)
            cls_list.append(np.zeros(picks.size, dtype=np.uint8))
        alarm_idx = np.flatnonzero(flat == ALARM)
        if alarm_idx.size:
            counts = arr_rng.poisson(lam_a, size=alarm_idx.size)
            picks = np.repeat(alarm_idx, counts)
            slot_list.append(picks // D + start)
            dev_list.append(picks % D)
            cls_list.append(np.ones(picks.size, dtype=np.uint8))

    if cfg.startup and D and T:
        # startup burst: every device reports once in slot 0, in its slot-0 state
        slot_list.append(np.zeros(D, dtype=np.int64))
        dev_list.append(np.arange(D))
        cls_list.append(states[0].astype(np.uint8))

    if slot_list:
        a_slot = np.concatenate(slot_list).astype(np.int64)
        a_dev = np.concatenate(dev_list).astype(np.int64)
        a_cls = np.concatenate(cls_list).astype(np.uint8)
    else:
        a_slot = np.zeros(0, dtype=np.int64)
        a_dev = np.zeros(0, dtype=np.int64)
        a_cls = np.zeros(0, dtype=np.uint8)
    order = np.lexsort((a_dev, a_slot))
    a_slot, a_dev, a_cls = a_slot[order], a_dev[order], a_cls[order]
    a_bytes = np.where(a_cls == ALARM, cfg.alarm_packet_bytes, cfg.data_packet_bytes).astype(np.int64)

    log.debug("simulated %d slots x %d devices, %d packets (%d alarm)", T, D, a_slot.size, int(a_cls.sum()))
    return TrafficTrace(cfg, x, y, coordinated, states, Arrivals(a_slot, a_dev, a_cls, a_bytes), weights)


def phase_sets(trace: TrafficTrace) -> dict:
    """Device groups behind the startup/data/alarm/silent scatter panels.

    startup: devices transmitting in slot 0; data / alarm: devices with at
    least one data / alarm packet after slot 0; silent: devices that raised
    an alarm and then had no further arrivals after their last alarm slot
    for at least the final tenth of the run.
    """
    a = trace.arrivals
    later = a.slot > 0
    startup = np.unique(a.device[a.slot == 0])
    data = np.unique(a.device[later & (a.cls == DATA)])
    alarm = np.unique(a.device[later & (a.cls == ALARM)])
    last = np.full(trace.n_devices, -1)
    np.maximum.at(last, a.device, a.slot)
    tail = trace.n_slots - max(1, trace.n_slots // 10)
    silent = np.array([d for d in alarm if last[d] < tail], dtype=np.int64)
    return {"startup": startup, "data": data, "alarm": alarm, "silent": silent}


def alarm_slot_fraction(trace: TrafficTrace, devices: Sequence[int] | np.ndarray) -> float:
    """Fraction of (slot, device) cells in the alarm state for the given devices."""
    devices = np.asarray(devices)
    if devices.size == 0:
        return 0.0
    return float(trace.states[:, devices].mean())


def distance_to(trace: TrafficTrace, process: BackgroundProcess) -> np.ndarray:
    return np.hypot(trace.x - process.mu_x, trace.y - process.mu_y)
