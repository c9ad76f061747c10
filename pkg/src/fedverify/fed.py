"""Federated round loop: selection, local SGD, robust aggregation, history."""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import nn
from .data import Dataset, Partition
from .errors import ConfigError, FormatError, LookupFailure, NumericError

AGGREGATORS = ("fedavg", "krum", "median")
HISTORY_MAGIC = b"VFHL1"
CHECKPOINT_MAGIC = b"VFCK1"

# stream tags for keyed RNGs; every random draw is a pure function of (seed, round, tag, ...)
TAG_SELECT = 1
TAG_LOCAL = 2
TAG_INIT = 3
TAG_REPLAY_SELECT = 4
TAG_REPLAY_LOCAL = 5


@dataclass(frozen=True)
class FLConfig:
    n_total: int = 100
    n_select: int = 10
    local_epochs: int = 3
    batch_size: int = 10
    local_lr: float = 0.1
    global_lr: float = 1.0
    total_rounds: int = 60
    aggregation: str = "fedavg"
    krum_f: int = 1
    seed: int = 0
    momentum: float = 0.0  # heavy-ball coefficient for local SGD; 0 is plain SGD
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.n_total < 1:
            raise ConfigError("n_total must be at least 1")
        if not 1 <= self.n_select <= self.n_total:
            raise ConfigError(f"n_select must be in [1, {self.n_total}], got {self.n_select}")
        if self.local_epochs < 0 or self.batch_size < 1:
            raise ConfigError("local_epochs must be >= 0 and batch_size >= 1")
        if self.local_lr < 0 or self.global_lr < 0:
            raise ConfigError("learning rates must be non-negative")
        if self.total_rounds < 1:
            raise ConfigError("total_rounds must be positive")
        agg = self.aggregation.lower()
        if agg not in AGGREGATORS:
            raise ConfigError(f"unknown aggregation {self.aggregation!r}")
        object.__setattr__(self, "aggregation", agg)
        if self.krum_f < 0:
            raise ConfigError("krum_f must be non-negative")
        if not 0.0 <= self.momentum < 1.0 or self.weight_decay < 0:
            raise ConfigError("momentum must be in [0, 1) and weight_decay >= 0")
        if agg == "krum" and self.n_select < 2 * self.krum_f + 3:
            raise ConfigError(
                f"krum needs n_select >= 2*f+3; got n_select={self.n_select}, f={self.krum_f}"
            )


# --- selection -------------------------------------------------------------


def round_rng(seed: int, round_index: int, tag: int, *extra: int) -> np.random.Generator:
    return np.random.default_rng([seed, round_index, tag, *extra])


def select_participants(
    n_total: int,
    n_select: int,
    rng: np.random.Generator,
    forced=None,
    excluded=(),
) -> np.ndarray:
    """Uniform draw without replacement, returned in ascending order.

    ``forced`` is always included; the rest of the slots are drawn from the
    remaining pool.  ``excluded`` participants are never drawn.
    """
    if not 1 <= n_select <= n_total:
        raise ConfigError(f"n_select must be in [1, {n_total}]")
    excluded = set(int(e) for e in excluded)
    if forced is not None and forced in excluded:
        raise ConfigError(f"participant {forced} is both forced and excluded")
    pool = np.array([i for i in range(n_total) if i not in excluded and i != forced], dtype=np.int64)
    slots = n_select - (forced is not None)
    slots = min(slots, len(pool))
    if slots + (forced is not None) == 0:
        raise ConfigError("empty federation: no participant left to select")
    chosen = rng.choice(pool, size=slots, replace=False) if slots else np.zeros(0, np.int64)
    if forced is not None:
        chosen = np.append(chosen, forced)
    return np.sort(chosen.astype(np.int64))


# --- local training --------------------------------------------------------


def local_train(
    spec: nn.ModelSpec,
    global_params: np.ndarray,
    data: Dataset,
    cfg: FLConfig,
    rng: np.random.Generator,
    epochs: int | None = None,
    lr: float | None = None,
    extra_grad=None,
) -> np.ndarray:
    """Minibatch SGD from ``global_params``; returns the local model minus the global one.

    ``extra_grad(w)`` adds a regulariser gradient to every step.
    """
    if len(data) == 0:
        raise ConfigError("participant has no data")
    epochs = cfg.local_epochs if epochs is None else epochs
    lr = cfg.local_lr if lr is None else lr
    w = np.array(global_params, dtype=np.float64, copy=True)
    n = len(data)
    bs = min(cfg.batch_size, n)
    velocity = np.zeros_like(w) if cfg.momentum else None
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, bs):
            idx = order[start : start + bs]
            _, g = nn.loss_and_grad(spec, w, data.x[idx], data.y[idx])
            if extra_grad is not None:
                g = g + extra_grad(w)
            if cfg.weight_decay:
                g = g + cfg.weight_decay * w
            if velocity is not None:
                velocity = cfg.momentum * velocity + g
                g = velocity
            w = nn.sgd_step(w, g, lr)
    return w - global_params


# --- aggregation -----------------------------------------------------------


def _stack(deltas) -> np.ndarray:
    arr = np.asarray(deltas, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise ConfigError("need a non-empty (m, P) stack of deltas")
    return arr


def mean_delta(deltas) -> np.ndarray:
    """Mean of deltas, summed strictly in the given (participant) order."""
    arr = _stack(deltas)
    if np.all(arr == arr[0]):
        return arr[0].copy()  # m*d/m is not always d in floating point
    acc = np.zeros(arr.shape[1])
    for row in arr:
        acc = acc + row
    return acc / arr.shape[0]


def krum_select(deltas, f: int) -> int:
    """Index of the Krum winner; ties go to the lowest index."""
    arr = _stack(deltas)
    m = arr.shape[0]
    if m < 2 * f + 3:
        raise ConfigError(f"krum needs at least 2f+3={2 * f + 3} deltas, got {m}")
    k = m - f - 2
    d2 = np.array([[float(((arr[i] - arr[j]) ** 2).sum()) for j in range(m)] for i in range(m)])
    scores = []
    for i in range(m):
        others = np.sort(np.delete(d2[i], i))
        scores.append(float(others[:k].sum()))
    return int(np.argmin(scores))  # argmin returns the first minimum


def median_delta(deltas) -> np.ndarray:
    return np.median(_stack(deltas), axis=0)


def combine(deltas, aggregation: str, krum_f: int = 1) -> np.ndarray:
    if aggregation == "fedavg":
        return mean_delta(deltas)
    if aggregation == "krum":
        return np.array(_stack(deltas)[krum_select(deltas, krum_f)])
    if aggregation == "median":
        return median_delta(deltas)
    raise ConfigError(f"unknown aggregation {aggregation!r}")


def _check_global(global_params, deltas):
    g = np.asarray(global_params, dtype=np.float64)
    arr = _stack(deltas)
    if arr.shape[1] != g.shape[0]:
        raise ConfigError(f"delta length {arr.shape[1]} does not match model length {g.shape[0]}")
    return g, arr


def aggregate_fedavg(global_params, deltas, global_lr: float = 1.0) -> np.ndarray:
    g, arr = _check_global(global_params, deltas)
    return g + global_lr * mean_delta(arr)


def aggregate_krum(global_params, deltas, f: int, global_lr: float = 1.0) -> np.ndarray:
    g, arr = _check_global(global_params, deltas)
    return g + global_lr * arr[krum_select(arr, f)]


def aggregate_median(global_params, deltas, global_lr: float = 1.0) -> np.ndarray:
    g, arr = _check_global(global_params, deltas)
    return g + global_lr * median_delta(arr)


# --- history and checkpoints -----------------------------------------------


@dataclass
class RoundRecord:
    round_index: int
    params: np.ndarray  # w_t, before aggregation
    selected: np.ndarray
    deltas: np.ndarray  # rows follow `selected`

    def delta_of(self, participant: int) -> np.ndarray | None:
        hit = np.flatnonzero(self.selected == participant)
        return self.deltas[hit[0]] if len(hit) else None


@dataclass
class RoundHistory:
    records: list[RoundRecord] = field(default_factory=list)

    def append(self, record: RoundRecord) -> None:
        if self.records and record.round_index != self.records[-1].round_index + 1:
            raise ConfigError("history rounds must be appended consecutively")
        self.records.append(record)

    def __len__(self):
        return len(self.records)

    def record(self, round_index: int) -> RoundRecord:
        if not self.records:
            raise LookupFailure(f"round {round_index} not in history (empty)")
        pos = round_index - self.records[0].round_index
        if not 0 <= pos < len(self.records):
            raise LookupFailure(f"round {round_index} not in history")
        return self.records[pos]

    def params_at(self, round_index: int) -> np.ndarray:
        return self.record(round_index).params

    def omega(self, participant: int, before: int | None = None) -> list[int]:
        """Rounds in which ``participant`` uploaded a delta."""
        return [
            r.round_index
            for r in self.records
            if participant in r.selected and (before is None or r.round_index < before)
        ]

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        p = self.records[0].params.shape[0] if self.records else 0
        buf.write(HISTORY_MAGIC + struct.pack("<I", p))
        for r in self.records:
            m = len(r.selected)
            buf.write(struct.pack("<II", r.round_index, m))
            buf.write(np.asarray(r.selected, dtype="<u4").tobytes())
            buf.write(np.asarray(r.params, dtype="<f8").tobytes())
            buf.write(np.asarray(r.deltas, dtype="<f8").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "RoundHistory":
        if raw[:5] != HISTORY_MAGIC:
            raise FormatError("not a history log (bad magic)", offset=0)
        if len(raw) < 9:
            raise FormatError("truncated history header", offset=len(raw))
        (p,) = struct.unpack("<I", raw[5:9])
        off = 9
        hist = cls()
        while off < len(raw):
            if off + 8 > len(raw):
                raise FormatError("truncated round header", offset=off)
            t, m = struct.unpack("<II", raw[off : off + 8])
            off += 8
            need = 4 * m + 8 * p + 8 * m * p
            if off + need > len(raw):
                raise FormatError(f"truncated record for round {t}", offset=off)
            sel = np.frombuffer(raw, "<u4", m, off).astype(np.int64)
            off += 4 * m
            params = np.frombuffer(raw, "<f8", p, off).copy()
            off += 8 * p
            deltas = np.frombuffer(raw, "<f8", m * p, off).reshape(m, p).copy()
            off += 8 * m * p
            hist.append(RoundRecord(t, params, sel, deltas))
        return hist

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "RoundHistory":
        return cls.from_bytes(Path(path).read_bytes())


class CheckpointStore:
    """Global-model snapshots kept every ``every`` rounds (round 0 always)."""

    def __init__(self, every: int = 1):
        if every < 1:
            raise ConfigError("checkpoint interval must be >= 1")
        self.every = every
        self._blobs: dict[int, bytes] = {}

    def wants(self, round_index: int) -> bool:
        return round_index % self.every == 0

    def store(self, round_index: int, params: np.ndarray, force: bool = False) -> bool:
        if not (force or self.wants(round_index)):
            return False
        body = np.asarray(params, dtype="<f8").tobytes()
        self._blobs[round_index] = struct.pack("<Q", len(body)) + body
        return True

    def fetch(self, round_index: int) -> np.ndarray:
        blob = self._blobs.get(round_index)
        if blob is None:
            raise LookupFailure(f"no checkpoint stored for round {round_index}")
        (size,) = struct.unpack("<Q", blob[:8])
        return np.frombuffer(blob, "<f8", size // 8, 8).copy()

    def rounds(self) -> list[int]:
        return sorted(self._blobs)

    def __len__(self):
        return len(self._blobs)

    def nbytes(self) -> int:
        return sum(len(b) for b in self._blobs.values())

    def to_bytes(self) -> bytes:
        out = [CHECKPOINT_MAGIC, struct.pack("<I", len(self._blobs))]
        for t in self.rounds():
            out.append(struct.pack("<I", t))
            out.append(self._blobs[t])
        return b"".join(out)

    @classmethod
    def from_bytes(cls, raw: bytes, every: int = 1) -> "CheckpointStore":
        if raw[:5] != CHECKPOINT_MAGIC:
            raise FormatError("not a checkpoint file (bad magic)", offset=0)
        store = cls(every)
        (count,) = struct.unpack("<I", raw[5:9])
        off = 9
        for _ in range(count):
            if off + 12 > len(raw):
                raise FormatError("truncated checkpoint header", offset=off)
            t, size = struct.unpack("<IQ", raw[off : off + 12])
            if off + 12 + size > len(raw):
                raise FormatError(f"truncated checkpoint for round {t}", offset=off)
            store._blobs[t] = raw[off + 4 : off + 12 + size]
            off += 12 + size
        return store


# --- the round loop --------------------------------------------------------


class RoundHooks:
    """Extension points of one round; the base class changes nothing."""

    def selection_rule(self, round_index: int):
        """Return (forced participant or None, excluded participants)."""
        return None, ()

    def local_update(self, round_index, participant, global_params, delta):
        return delta

    def transform(self, round_index, selected, deltas, global_params):
        return deltas

    def post_aggregate(self, round_index, new_params, old_params):
        return new_params


@dataclass
class FLState:
    round_index: int
    params: np.ndarray
    history: RoundHistory = field(default_factory=RoundHistory)
    checkpoints: CheckpointStore | None = None
    tracked: tuple[int, ...] = ()
    loss_history: dict = field(default_factory=dict)

    def snapshot_losses(self, spec, clients):
        for p in self.tracked:
            d = clients[p]
            self.loss_history.setdefault(p, []).append(
                nn.per_sample_losses(spec, self.params, d.x, d.y)
            )


def split_clients(dataset: Dataset, partition: Partition) -> list[Dataset]:
    return [dataset.subset(partition.indices(i)) for i in range(partition.n)]


def init_state(spec, cfg: FLConfig, params=None, checkpoints=None, tracked=()) -> FLState:
    if params is None:
        params = nn.init_params(spec, round_rng(cfg.seed, 0, TAG_INIT))
    state = FLState(0, np.array(params, dtype=np.float64), checkpoints=checkpoints,
                    tracked=tuple(tracked))
    if checkpoints is not None:
        checkpoints.store(0, state.params, force=True)
    return state


def run_round(
    state: FLState,
    spec: nn.ModelSpec,
    clients: list[Dataset],
    cfg: FLConfig,
    hooks: RoundHooks | None = None,
    select_tag: int = TAG_SELECT,
    local_tag: int = TAG_LOCAL,
) -> FLState:
    """Run round ``state.round_index`` in place and return the state."""
    hooks = hooks or RoundHooks()
    t = state.round_index
    if t >= cfg.total_rounds:
        raise ConfigError(f"round {t} is past total_rounds={cfg.total_rounds}")
    if len(clients) != cfg.n_total:
        raise ConfigError(f"{len(clients)} client datasets for n_total={cfg.n_total}")
    forced, excluded = hooks.selection_rule(t)
    selected = select_participants(
        cfg.n_total, cfg.n_select, round_rng(cfg.seed, t, select_tag), forced, excluded
    )
    w = state.params
    deltas = []
    for p in selected:
        try:
            delta = local_train(spec, w, clients[p], cfg, round_rng(cfg.seed, t, local_tag, int(p)))
            delta = hooks.local_update(t, int(p), w, delta)
            nn.ensure_finite(delta, "local update")
        except NumericError as exc:
            raise NumericError(
                f"round {t}, participant {p}: {exc}", layer=exc.layer, round_index=t,
                participant=int(p),
            ) from exc
        deltas.append(delta)
    deltas = np.vstack(deltas)
    recorded = deltas.copy()
    deltas = np.asarray(hooks.transform(t, selected, deltas, w), dtype=np.float64)
    new = w + cfg.global_lr * combine(deltas, cfg.aggregation, cfg.krum_f)
    new = hooks.post_aggregate(t, new, w)
    try:
        nn.ensure_finite(new, "global model")
    except NumericError as exc:
        raise NumericError(f"round {t}: {exc}", round_index=t) from exc
    state.history.append(RoundRecord(t, w.copy(), selected, recorded))
    state.params = new
    state.round_index = t + 1
    if state.checkpoints is not None:
        state.checkpoints.store(t + 1, new)
    state.snapshot_losses(spec, clients)
    return state


def run_federation(spec, clients, cfg: FLConfig, rounds: int | None = None, hooks=None,
                   params=None, checkpoints=None) -> FLState:
    """Plain FL for ``rounds`` rounds (default: all)."""
    state = init_state(spec, cfg, params, checkpoints)
    for _ in range(cfg.total_rounds if rounds is None else rounds):
        run_round(state, spec, clients, cfg, hooks)
    return state


def with_seed(cfg: FLConfig, seed: int) -> FLConfig:
    return replace(cfg, seed=seed)
