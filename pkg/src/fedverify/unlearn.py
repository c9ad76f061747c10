"""Unlearning methods, each expressed as hooks on the round loop after t_u.

Retraining methods (RT, RTB) pause the main loop at t_u, replay the
federation without the leaver and hand back the replayed model.  The
gradient-subtraction family (CGS, GGS, IGS) adds a correction term after
aggregation over several rounds.  DP and S2U rewrite the uploaded deltas of
round t_u only.  NF and NT do nothing beyond the selection policy.
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import fed, nn
from .errors import ConfigError, LookupFailure

METHODS = ("NF", "NT", "RT", "RTB", "CGS", "GGS", "IGS", "DP", "S2U")
TAG_DP = 21


@dataclass(frozen=True)
class UnlearnConfig:
    method: str = "RT"
    lam: float = 0.01
    alpha: float = 0.1
    beta: float = 1.0
    epsilon: float = 0.1
    dp_noise_std: float | None = 0.2  # None: ||delta|| / (epsilon * sqrt(P))
    breakpoint_round: int | None = None  # None: T_enabled
    unlearn_rounds: int | None = None  # None: |Omega| capped at t_leave - t_u
    ggs_decay: float = 0.5

    def __post_init__(self):
        m = self.method.upper()
        if m not in METHODS:
            raise ConfigError(f"unknown unlearning method {self.method!r}")
        object.__setattr__(self, "method", m)
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError("alpha must be in (0, 1)")
        if self.beta < 1.0:
            raise ConfigError("beta must be >= 1")
        if self.lam < 0:
            raise ConfigError("lambda must be non-negative")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be positive")
        if self.dp_noise_std is not None and self.dp_noise_std < 0:
            raise ConfigError("dp_noise_std must be non-negative")
        if self.unlearn_rounds is not None and self.unlearn_rounds < 1:
            raise ConfigError("unlearn_rounds must be >= 1")
        if not 0.0 < self.ggs_decay <= 1.0:
            raise ConfigError("ggs_decay must be in (0, 1]")


# --- pure transformations --------------------------------------------------


def leaver_deltas(history: fed.RoundHistory, leaver: int, before: int) -> tuple[list[int], np.ndarray]:
    omega = history.omega(leaver, before=before)
    if not omega:
        return [], np.zeros((0, 0))
    return omega, np.vstack([history.record(t).delta_of(leaver) for t in omega])


def igs_term(stored: np.ndarray, lam: float, rounds: int) -> np.ndarray:
    """Per-round correction: -lam * sum(stored deltas) / rounds."""
    return -lam * stored.sum(axis=0) / rounds


def others_mean(selected, deltas, leaver) -> np.ndarray | None:
    keep = [i for i, p in enumerate(selected) if p != leaver]
    if not keep:
        return None
    return fed.mean_delta(np.asarray(deltas)[keep])


def cgs_term(stored, historical_norms, current_norm: float, lam: float, rounds: int) -> np.ndarray:
    """IGS term with each stored delta rescaled by current/historical others-norm."""
    total = np.zeros(stored.shape[1])
    for d, h in zip(stored, historical_norms):
        ratio = current_norm / h if h > 0 else 1.0
        total = total + ratio * d
    return -lam * total / rounds


@dataclass
class Generator:
    ema: np.ndarray
    scales: np.ndarray  # one per layer slice (weights and bias of a layer share it)

    def output(self, spec: nn.ModelSpec) -> np.ndarray:
        out = self.ema.copy()
        for s, (ws, bs) in zip(self.scales, spec.layer_slices()):
            out[ws.start : bs.stop] *= s
        return out


def fit_generator(spec: nn.ModelSpec, stored: np.ndarray, decay: float = 0.5) -> Generator:
    """EMA over all but the latest delta, then per-layer least-squares scale to the latest."""
    if len(stored) == 0:
        raise ConfigError("generator needs at least one stored delta")
    target = stored[-1]
    source = stored[:-1] if len(stored) > 1 else stored
    ema = source[0].copy()
    for d in source[1:]:
        ema = decay * d + (1.0 - decay) * ema
    scales = []
    for ws, bs in spec.layer_slices():
        e = ema[ws.start : bs.stop]
        denom = float(e @ e)
        scales.append(float(e @ target[ws.start : bs.stop]) / denom if denom > 0 else 1.0)
    return Generator(ema, np.array(scales))


def unlearn_dp(delta, epsilon: float, noise_std: float | None, rng: np.random.Generator) -> np.ndarray:
    """exp(epsilon) * delta plus isotropic Gaussian noise."""
    if epsilon <= 0:
        raise ConfigError("epsilon must be positive")
    delta = np.asarray(delta, dtype=np.float64)
    if noise_std is None:
        noise_std = float(np.linalg.norm(delta)) / (epsilon * math.sqrt(delta.size))
    out = math.exp(epsilon) * delta
    if noise_std > 0:
        out = out + rng.normal(0.0, noise_std, size=delta.shape)
    return out


def unlearn_s2u(deltas, selected, leaver, alpha, beta, w_enabled, w_current) -> np.ndarray:
    """Shrink the leaver's delta by alpha; point everyone else back at w_enabled."""
    if not 0.0 < alpha < 1.0 and alpha != 1.0:
        raise ConfigError("alpha must be in (0, 1]")
    if beta < 1.0:
        raise ConfigError("beta must be >= 1")
    selected = list(int(s) for s in selected)
    if leaver not in selected:
        raise ConfigError(f"leaver {leaver} is not in the selected set")
    out = np.array(deltas, dtype=np.float64, copy=True)
    pull = beta * (np.asarray(w_enabled) - np.asarray(w_current))
    for i, p in enumerate(selected):
        out[i] = alpha * out[i] if p == leaver else pull
    return out


def replay(
    spec: nn.ModelSpec,
    clients,
    cfg: fed.FLConfig,
    leaver: int,
    start_round: int,
    stop_round: int,
    start_params: np.ndarray,
) -> fed.FLState:
    """Run rounds [start_round, stop_round) without the leaver."""
    if cfg.n_total - 1 < 1:
        raise ConfigError("empty federation: the only participant is leaving")

    class _Exclude(fed.RoundHooks):
        def selection_rule(self, t):
            return None, (leaver,)

    state = fed.FLState(start_round, np.array(start_params, dtype=np.float64))
    state.history = fed.RoundHistory()
    hooks = _Exclude()
    for _ in range(start_round, stop_round):
        fed.run_round(state, spec, clients, cfg, hooks, fed.TAG_REPLAY_SELECT, fed.TAG_REPLAY_LOCAL)
    return state


def unlearn_rt(spec, clients, cfg, leaver, t_u, w0) -> fed.FLState:
    """Retrain from w0 for t_u rounds with the leaver never selected."""
    return replay(spec, clients, cfg, leaver, 0, t_u, w0)


def unlearn_rtb(spec, clients, cfg, leaver, t_u, breakpoint, checkpoints: fed.CheckpointStore):
    """Retrain from the checkpoint at ``breakpoint`` up to t_u without the leaver."""
    w_b = checkpoints.fetch(breakpoint)
    if breakpoint >= t_u:
        warnings.warn("breakpoint is not before t_u; nothing to retrain", stacklevel=2)
        state = fed.FLState(breakpoint, w_b)
        return state
    return replay(spec, clients, cfg, leaver, breakpoint, t_u, w_b)


# --- hook objects used by the mechanism ------------------------------------


@dataclass
class UnlearnContext:
    spec: nn.ModelSpec
    clients: list
    cfg: fed.FLConfig
    leaver: int
    t_u: int
    t_leave: int
    t_enabled: int
    history: fed.RoundHistory
    checkpoints: fed.CheckpointStore | None
    w0: np.ndarray


@dataclass
class Unlearner:
    """Base: natural forgetting (leaver simply stops being selected)."""

    config: UnlearnConfig
    leaver_at_tu: bool = False  # leaver still uploads in round t_u (its delta gets transformed)
    keeps_leaver: bool = False  # leaver never leaves (NT)
    seconds: float = 0.0
    touched_rounds: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    ctx: UnlearnContext | None = None  # set by begin() at round t_u

    def begin(self, ctx: UnlearnContext, state: fed.FLState) -> None:
        self.ctx = ctx

    def start(self, ctx: UnlearnContext, state: fed.FLState) -> None:
        """``begin`` with its wall-clock added to ``seconds``."""
        self._timed(self.begin, ctx, state)

    def transform(self, t, selected, deltas, w):
        return deltas

    def post_aggregate(self, t, new, old):
        return new

    def storage_bytes(self) -> int:
        return 0

    def _timed(self, fn, *args):
        start = time.perf_counter()
        out = fn(*args)
        self.seconds += time.perf_counter() - start
        return out


class NaturalUnlearner(Unlearner):
    pass


def _default_rounds(cfg: UnlearnConfig, omega, t_u, t_leave) -> int:
    if cfg.unlearn_rounds is not None:
        return cfg.unlearn_rounds
    return max(1, min(len(omega), t_leave - t_u))


class RetrainUnlearner(Unlearner):
    def __init__(self, config, breakpoint=None):
        super().__init__(config)
        self.breakpoint = breakpoint

    def begin(self, ctx, state):
        super().begin(ctx, state)
        if self.breakpoint is None:
            replayed = unlearn_rt(ctx.spec, ctx.clients, ctx.cfg, ctx.leaver, ctx.t_u, ctx.w0)
        else:
            if ctx.checkpoints is None:
                raise LookupFailure("RTB needs stored checkpoints")
            replayed = unlearn_rtb(ctx.spec, ctx.clients, ctx.cfg, ctx.leaver, ctx.t_u,
                                   self.breakpoint, ctx.checkpoints)
        state.params = replayed.params
        self.touched_rounds = list(range(self.breakpoint or 0, ctx.t_u))

    def storage_bytes(self) -> int:
        if self.breakpoint is None:
            return self.ctx.w0.nbytes
        return self.ctx.checkpoints.nbytes()


class SubtractionUnlearner(Unlearner):
    """Shared plumbing for CGS/GGS/IGS: spread a correction over R rounds."""

    def begin(self, ctx, state):
        super().begin(ctx, state)
        self.omega, self.stored = leaver_deltas(ctx.history, ctx.leaver, ctx.t_u)
        self.rounds = _default_rounds(self.config, self.omega, ctx.t_u, ctx.t_leave)
        if not self.omega:
            self.warnings.append("leaver never uploaded before t_u; subtraction skipped")
        self.prepare()

    def prepare(self):
        pass

    def active(self, t) -> bool:
        if self.ctx is None:
            return False
        return bool(self.omega) and self.ctx.t_u <= t < self.ctx.t_u + self.rounds

    def term(self, t) -> np.ndarray:
        raise NotImplementedError

    def post_aggregate(self, t, new, old):
        if not self.active(t):
            return new
        self.touched_rounds.append(t)
        return new + self._timed(self.term, t)

    def storage_bytes(self) -> int:
        return self.stored.nbytes if len(self.omega) else 0


class IGSUnlearner(SubtractionUnlearner):
    def prepare(self):
        if self.omega:
            self._term = igs_term(self.stored, self.config.lam, self.rounds)

    def term(self, t):
        return self._term


class CGSUnlearner(SubtractionUnlearner):
    def prepare(self):
        self.hist_norms = []
        for r in self.omega:
            rec = self.ctx.history.record(r)
            m = others_mean(rec.selected, rec.deltas, self.ctx.leaver)
            self.hist_norms.append(0.0 if m is None else float(np.linalg.norm(m)))
        self._current = None

    def transform(self, t, selected, deltas, w):
        if self.active(t):
            m = self._timed(others_mean, selected, deltas, self.ctx.leaver)
            self._current = 0.0 if m is None else float(np.linalg.norm(m))
        return deltas

    def term(self, t):
        if self._current is None or self._current == 0.0:
            # no usable calibration this round: raw deltas
            return igs_term(self.stored, self.config.lam, self.rounds)
        return cgs_term(self.stored, self.hist_norms, self._current, self.config.lam, self.rounds)

    def storage_bytes(self) -> int:
        return super().storage_bytes() + 8 * len(self.omega)


class GGSUnlearner(SubtractionUnlearner):
    def prepare(self):
        if self.omega:
            self.generator = fit_generator(self.ctx.spec, self.stored, self.config.ggs_decay)
            g = self.generator.output(self.ctx.spec)
            self._term = -self.config.lam * len(self.omega) * g / self.rounds

    def term(self, t):
        return self._term

    def storage_bytes(self) -> int:
        # the generator replaces the stored deltas
        return self.generator.ema.nbytes + self.generator.scales.nbytes if self.omega else 0


class OneStepUnlearner(Unlearner):
    def __init__(self, config):
        super().__init__(config, leaver_at_tu=True)

    def transform(self, t, selected, deltas, w):
        if self.ctx is None or t != self.ctx.t_u:
            return deltas
        self.touched_rounds.append(t)
        return self._timed(self.apply, selected, deltas, w)


class DPUnlearner(OneStepUnlearner):
    def apply(self, selected, deltas, w):
        out = np.array(deltas, copy=True)
        pos = list(selected).index(self.ctx.leaver)
        rng = fed.round_rng(self.ctx.cfg.seed, self.ctx.t_u, TAG_DP)
        out[pos] = unlearn_dp(out[pos], self.config.epsilon, self.config.dp_noise_std, rng)
        return out


class S2UUnlearner(OneStepUnlearner):
    def begin(self, ctx, state):
        super().begin(ctx, state)
        if ctx.checkpoints is None:
            raise LookupFailure(f"S2U needs the checkpoint at T_enabled={ctx.t_enabled}")
        self.w_enabled = ctx.checkpoints.fetch(ctx.t_enabled)

    def apply(self, selected, deltas, w):
        c = self.config
        return unlearn_s2u(deltas, selected, self.ctx.leaver, c.alpha, c.beta, self.w_enabled, w)

    def storage_bytes(self) -> int:
        return self.w_enabled.nbytes


def make_unlearner(config: UnlearnConfig, t_enabled: int) -> Unlearner:
    m = config.method
    if m == "NF":
        return NaturalUnlearner(config)
    if m == "NT":
        return NaturalUnlearner(config, keeps_leaver=True)
    if m == "RT":
        return RetrainUnlearner(config)
    if m == "RTB":
        bp = t_enabled if config.breakpoint_round is None else config.breakpoint_round
        return RetrainUnlearner(config, breakpoint=bp)
    if m == "IGS":
        return IGSUnlearner(config)
    if m == "CGS":
        return CGSUnlearner(config)
    if m == "GGS":
        return GGSUnlearner(config)
    if m == "DP":
        return DPUnlearner(config)
    return S2UUnlearner(config)
