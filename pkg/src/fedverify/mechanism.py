"""Mark, unlearn, check, leave: the full pipeline around one leaving participant."""

from __future__ import annotations

import dataclasses
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import data as ds
from . import fed, nn, unlearn, verify
from .config import ExperimentConfig, Timeline
from .errors import ConfigError, MarkingInfeasible

TAG_MARK = 41
SWEEP_AXES = ("marking_round", "trigger_size", "transparency", "n_select", "dirichlet_alpha")


# --- T_enabled detection ---------------------------------------------------


def aggregate_norms(history: fed.RoundHistory, final_params=None) -> np.ndarray:
    """Norm of the global step taken in each recorded round."""
    ws = [r.params for r in history.records]
    if final_params is not None:
        ws.append(final_params)
    return np.array([np.linalg.norm(b - a) for a, b in zip(ws[:-1], ws[1:])])


def estimate_enabled_round(norms, window: int, tol: float, fallback: int) -> int:
    """First 1-based round r >= window whose trailing ``window`` step norms all sit
    below tol * (first step norm).  Falls back with a warning if none does."""
    norms = np.asarray(norms, dtype=np.float64)
    if window < 1:
        raise ConfigError("window must be >= 1")
    if len(norms) < window:
        raise ConfigError(f"need at least {window} rounds of history")
    ref = tol * norms[0]
    for r in range(window, len(norms) + 1):
        if norms[r - window : r].max() < ref:
            return r
    warnings.warn("aggregated updates never stabilised; using the configured T_enabled",
                  stacklevel=2)
    return fallback


# --- experiment log --------------------------------------------------------


@dataclass
class ExperimentLog:
    config: dict
    rounds: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    costs: dict = field(default_factory=dict)  # wall-clock; kept apart so logs stay reproducible
    status: str = "ok"

    def add_event(self, round_index: int, kind: str, **info) -> None:
        rec = self.rounds[round_index]
        if any(e["kind"] == kind for e in rec["events"]):
            raise ConfigError(f"duplicate {kind} event in round {round_index}")
        rec["events"].append({"kind": kind, **info})

    def series(self, where: str, metric: str) -> np.ndarray:
        return np.array([r[where].get(metric, np.nan) if r.get(where) else np.nan
                         for r in self.rounds])


# --- data setup ------------------------------------------------------------


def build_data(cfg: ExperimentConfig):
    d = cfg.data
    if d.source == "synthetic":
        train, test = ds.gen_synthetic_split(
            d.class_count, d.feature_dim, d.per_class, d.test_per_class, d.cluster_spread,
            d.rare_cluster_fraction, cfg.seed, rare_clusters_per_class=d.rare_clusters_per_class,
            rare_shift=d.rare_shift,
        )
    elif d.source == "idx":
        if not (d.train_images and d.train_labels):
            raise ConfigError("idx source needs train_images and train_labels")
        train = ds.load_idx(d.train_images, d.train_labels, d.downscale)
        if d.test_images and d.test_labels:
            test = ds.load_idx(d.test_images, d.test_labels, d.downscale)
        else:
            train, test = _holdout_split(train, cfg.seed)
    else:
        if not d.blob:
            raise ConfigError("blob source needs a blob path")
        train = ds.load_dataset(d.blob)
        test = ds.load_dataset(d.test_blob) if d.test_blob else None
        if test is None:
            train, test = _holdout_split(train, cfg.seed)
    if d.partition == "iid":
        part = ds.partition_iid(train, cfg.fl.n_total, cfg.seed)
    else:
        part = ds.partition_dirichlet(train, cfg.fl.n_total, d.dirichlet_alpha, cfg.seed)
    return train, test, part


def _holdout_split(dataset, seed, frac=0.2):
    order = np.random.default_rng([seed, 13]).permutation(len(dataset))
    cut = int(len(dataset) * frac)
    return dataset.subset(np.sort(order[cut:])), dataset.subset(np.sort(order[:cut]))


def model_spec(cfg: ExperimentConfig, train: ds.Dataset) -> nn.ModelSpec:
    sizes = (train.feature_dim, *cfg.model.hidden, train.class_count)
    return nn.ModelSpec(sizes, cfg.model.activation, param_cap=cfg.model.param_cap)


# --- the round hooks that implement the protocol ---------------------------


class MechanismHooks(fed.RoundHooks):
    def __init__(self, cfg: ExperimentConfig, spec, clients, holdout, unlearner, state):
        self.cfg = cfg
        self.tl = cfg.timeline
        self.spec = spec
        self.clients = clients
        self.holdout = holdout
        self.unlearner = unlearner
        self.state = state
        self.leaver = cfg.leaver
        self.outcome: verify.MarkingOutcome | None = None
        self.marking_error: str | None = None
        self.marking_seconds = 0.0
        self.attack_target = None
        self.events = []  # (round, kind, info)

    def selection_rule(self, t):
        tl, u = self.tl, self.unlearner
        if t < tl.t_m:
            return None, ()
        if t < tl.t_u:
            return self.leaver, ()
        if u.keeps_leaver:
            return (self.leaver, ()) if t <= tl.t_leave else (None, ())
        if t == tl.t_u and u.leaver_at_tu:
            return self.leaver, ()
        return None, (self.leaver,)

    def local_update(self, t, p, w, delta):
        if p != self.leaver or t < self.tl.t_m:
            return delta
        if t == self.tl.t_m:
            return self._mark(t, w, delta)
        if self.outcome is None:
            return delta
        out = self.outcome
        rng = fed.round_rng(self.cfg.seed, t, fed.TAG_LOCAL, p)
        return fed.local_train(self.spec, w, out.local_data, self.cfg.fl, rng,
                               extra_grad=out.penalty)

    def _mark(self, t, w, delta):
        mc = self.cfg.marking
        local = w + delta
        history = None
        if mc.kind == "FM":
            rows = self.state.loss_history.get(self.leaver, [])
            history = np.vstack(rows) if rows else np.zeros((0, len(self.clients[self.leaver])))
        start = time.perf_counter()
        try:
            self.outcome = verify.mark(
                mc, self.spec, local, self.clients[self.leaver],
                fed.round_rng(self.cfg.seed, t, TAG_MARK), reference=w,
                loss_history=history, holdout=self.holdout,
            )
        except MarkingInfeasible as exc:
            self.marking_error = str(exc)
            raise
        finally:
            self.marking_seconds += time.perf_counter() - start
        self.events.append((t, "marking", {"marker_kind": mc.kind, "markers": len(self.outcome.marker_set)}))
        return self.outcome.marked_delta

    def transform(self, t, selected, deltas, w):
        at = self.cfg.attack
        if at.enabled and t == at.replay_round:
            others = [i for i, p in enumerate(selected) if p != self.leaver]
            if others:
                i = others[0]
                captured = self.state.history.params_at(at.capture_round)
                boost = self.cfg.fl.n_select if at.boost is None else at.boost
                deltas = np.array(deltas, copy=True)
                deltas[i] = boost * (captured - w)
                self.attack_target = int(selected[i])
                self.events.append((t, "attack", {"attacker": int(selected[i]),
                                                  "capture_round": at.capture_round}))
        return self.unlearner.transform(t, selected, deltas, w)

    def post_aggregate(self, t, new, old):
        return self.unlearner.post_aggregate(t, new, old)


# --- readings --------------------------------------------------------------


MARKER_EXTRA = ("accuracy", "loss", "kl")
LEAVING_METRICS = ("accuracy", "loss", "kl")


def _marker_reading(cfg, spec, params, markers, loss_window):
    out = {}
    metric = markers.bound_metric
    if metric == "loss_variance":
        out[metric] = verify.loss_variance(loss_window)
    else:
        out[metric] = verify.check_metric(spec, params, markers, metric)
    if markers.kind != "ME":
        for m in MARKER_EXTRA:
            out.setdefault(m, verify.check_metric(spec, params, markers, m))
        if cfg.check.record_influence:
            out["influence"] = verify.check_metric(spec, params, markers, "influence",
                                                   damping=cfg.check.damping)
    return out


def _leaving_reading(cfg, spec, params, leaving):
    out = {m: verify.check_metric(spec, params, leaving, m) for m in LEAVING_METRICS}
    if cfg.check.record_influence:
        out["influence"] = verify.check_metric(spec, params, leaving, "influence",
                                               damping=cfg.check.damping)
    return out


def _fmt_round(v):
    return {k: float(x) for k, x in v.items()}


# --- main entry ------------------------------------------------------------


def run_experiment(cfg: ExperimentConfig) -> ExperimentLog:
    tl = cfg.timeline
    train, test, part = build_data(cfg)
    spec = model_spec(cfg, train)
    clients = fed.split_clients(train, part)
    leaver = cfg.leaver
    log = ExperimentLog(config=cfg.to_dict())

    w0 = nn.init_params(spec, fed.round_rng(cfg.seed, 0, fed.TAG_INIT))
    store = fed.CheckpointStore(every=1)
    state = fed.init_state(spec, cfg.fl, w0, checkpoints=store, tracked=(leaver,))
    unl = unlearn.make_unlearner(cfg.unlearn, tl.T_enabled)
    hooks = MechanismHooks(cfg, spec, clients, test, unl, state)
    t_enabled = tl.T_enabled

    round_seconds = []
    trajectory = []  # global model after each round, before any restart at the next one
    w_before = None
    for t in range(tl.T_total):
        log.rounds.append({"round": t, "events": []})
        if cfg.detect.enabled and t == tl.t_m and len(state.history) >= cfg.detect.window:
            t_enabled = min(
                estimate_enabled_round(aggregate_norms(state.history, state.params),
                                       cfg.detect.window, cfg.detect.tol, tl.T_enabled),
                tl.t_m,
            )
            log.add_event(t, "enabled_detected", T_enabled=int(t_enabled))
        if t == tl.t_u:
            w_before = state.params.copy()
            ctx = unlearn.UnlearnContext(spec, clients, cfg.fl, leaver, tl.t_u, tl.t_leave,
                                         t_enabled, state.history, store, w0)
            unl.start(ctx, state)
        start = time.perf_counter()
        try:
            fed.run_round(state, spec, clients, cfg.fl, hooks)
        except MarkingInfeasible as exc:
            log.add_event(t, "marking_failed", reason=str(exc))
            log.status = "marking_infeasible"
            log.summary = {"status": log.status, "verify_decision": None,
                           "marking_error": str(exc)}
            return log
        round_seconds.append(time.perf_counter() - start)
        trajectory.append(state.params.copy())
        log.rounds[t]["selected"] = [int(p) for p in state.history.records[-1].selected]
        if t == tl.t_u:
            log.add_event(t, "unlearning", method=cfg.unlearn.method)
        if t == tl.t_leave:
            log.add_event(t, "leave")
    for t, kind, info in hooks.events:
        log.add_event(t, kind, **info)

    _record_readings(cfg, spec, log, trajectory, hooks, clients[leaver], train, test)
    _summarise(cfg, spec, log, trajectory, hooks, unl, w_before, clients, train, test, store,
               t_enabled)
    normal = [s for t, s in enumerate(round_seconds) if t > tl.t_u]
    base = float(np.median(normal)) if normal else float(np.median(round_seconds))
    log.costs = {
        "method": cfg.unlearn.method,
        "unlearn_seconds": unl.seconds,
        "marking_seconds": hooks.marking_seconds,
        "normal_round_seconds": base,
        "unlearning_round_seconds": base + unl.seconds,
        "round_overhead_ratio": (base + unl.seconds) / base if base > 0 else float("nan"),
        "checking_seconds_per_round": log.costs.get("checking_seconds_per_round", 0.0),
    }
    return log


def _record_readings(cfg, spec, log, trajectory, hooks, leaving_local, train, test):
    tl = cfg.timeline
    markers = hooks.outcome.marker_set
    # the leaver's own data, labels as it contributed them from marking onwards
    leaving = hooks.outcome.local_data if hooks.outcome.local_data is not None else leaving_local
    leaving_orig = leaving_local
    fm_rows = None
    if markers.kind == "FM":
        fm_rows = np.vstack([nn.per_sample_losses(spec, w, markers.x, markers.labels)
                             for w in trajectory])
    spent = 0.0
    for t, w in enumerate(trajectory):
        rec = log.rounds[t]
        rec["global"] = {"test_accuracy": nn.accuracy(spec, w, test.x, test.y),
                         "test_loss": float(nn.per_sample_losses(spec, w, test.x, test.y).mean())}
        start = time.perf_counter()
        window = None
        if fm_rows is not None:
            window = fm_rows[max(0, t - cfg.marking.fm_window + 1) : t + 1]
        rec["marker"] = _fmt_round(_marker_reading(cfg, spec, w, markers, window))
        rec["leaving"] = _fmt_round(_leaving_reading(cfg, spec, w, leaving))
        if t >= tl.t_m:
            spent += time.perf_counter() - start
        rec["leaving_original"] = _fmt_round(
            {m: verify.check_metric(spec, w, leaving_orig, m) for m in ("accuracy", "loss")}
        )
    log.costs["checking_seconds_per_round"] = spent / max(1, tl.T_total - tl.t_m)


def _baseline(cfg, series):
    tl = cfg.timeline
    if cfg.marking.kind == "BN":
        stop = min(tl.t_m + cfg.check.bn_window, tl.t_u)
        return verify.median_window(series[tl.t_m : stop])
    return float(series[tl.t_m])


def _current(cfg, series, t):
    if cfg.marking.kind == "BN":
        lo = max(cfg.timeline.t_u, t - cfg.check.bn_window + 1)
        return verify.median_window(series[lo : t + 1])
    return float(series[t])


def _summarise(cfg, spec, log, trajectory, hooks, unl, w_before, clients, train, test, store,
               t_enabled):
    from . import reporting

    tl = cfg.timeline
    markers = hooks.outcome.marker_set
    metric = markers.bound_metric
    series = log.series("marker", metric)
    baseline = _baseline(cfg, series)
    delta = cfg.check.thresholds.get(metric, verify.default_threshold(metric, baseline))
    at_tu = _current(cfg, series, tl.t_u)
    diff = verify.metric_diff(baseline, at_tu)
    t_check = min(tl.t_leave, tl.T_total - 1)
    at_leave = _current(cfg, series, t_check)
    gain_leave = verify.signed_gain(metric, baseline, at_leave)
    decision = verify.verify_decision(gain_leave, delta)

    # rebound after unlearning took hold: the replay attack's signature
    gains = [verify.signed_gain(metric, baseline, _current(cfg, series, t))
             for t in range(tl.t_u, t_check + 1)]
    flagged, flag_round, reached = False, None, False
    for t, g in zip(range(tl.t_u, t_check + 1), gains):
        if g >= delta:
            reached = True
        elif reached and g < cfg.check.rebound_fraction * delta:
            flagged, flag_round = True, t
            break
    if flagged:
        decision = "distrust"

    w = cfg.check.correlation_window
    lo, hi = max(0, tl.t_u - w), min(tl.T_total - 1, tl.t_u + w)
    pair = "loss" if metric in ("loss", "loss_variance", "bit_match_rate") else "accuracy"
    if markers.kind == "ME":
        corr = None
    else:
        corr = verify.correlation_report(log.series("marker", pair)[lo : hi + 1],
                                         log.series("leaving", pair)[lo : hi + 1])

    dist = reporting.param_distance(w_before, trajectory[tl.t_u])
    leaver_data = clients[cfg.leaver]
    members = _member_pool(clients, cfg.leaver)
    mia = reporting.membership_inference(spec, trajectory[-1], members, test, leaver_data)

    final = trajectory[-1]
    log.summary = {
        "status": "ok",
        "method": cfg.unlearn.method,
        "marker_kind": markers.kind,
        "metric": metric,
        "markers": len(markers),
        "T_enabled": int(t_enabled),
        "pre_marking": float(series[tl.t_m - 1]) if tl.t_m > 0 else None,
        "baseline": baseline,
        "at_t_u": at_tu,
        "metric_diff": diff,
        "at_leave": at_leave,
        "gain_at_leave": gain_leave,
        "threshold": float(delta),
        "verify_decision": decision,
        "attack_flag": flagged,
        "attack_flag_round": flag_round,
        "correlation_r": None if corr is None or not corr.defined else corr.r,
        "correlation_window": [lo, hi],
        "distance_euclidean": dist.euclidean,
        "distance_cosine": dist.cosine,
        "membership_ratio": mia.inferred_member_ratio,
        "leaving_final": {
            "accuracy": nn.accuracy(spec, final, leaver_data.x, leaver_data.y),
            "loss": float(nn.per_sample_losses(spec, final, leaver_data.x, leaver_data.y).mean()),
        },
        "test_accuracy_final": nn.accuracy(spec, final, test.x, test.y),
        "storage_bytes": int(unl.storage_bytes()),
        "unlearn_touched_rounds": [int(r) for r in unl.touched_rounds],
        "marker_set": markers.to_json(),
    }


def _member_pool(clients, leaver):
    pool = None
    for i, c in enumerate(clients):
        if i == leaver:
            continue
        pool = c if pool is None else pool.concat(c)
    return pool


# --- sweeps ----------------------------------------------------------------


def shifted_timeline(tl: Timeline, t_m: int) -> Timeline:
    """Move marking to ``t_m`` keeping the marking and checking spans where they fit."""
    span_mu = tl.t_u - tl.t_m
    span_ul = tl.t_leave - tl.t_u
    room = tl.T_total - t_m
    t_u = t_m + min(span_mu, max(1, room // 2))
    t_leave = min(t_u + span_ul, tl.T_total)
    return Timeline(min(tl.T_enabled, t_m), t_m, t_u, t_leave, tl.T_total)


def apply_axis(cfg: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    r = dataclasses.replace
    if axis == "marking_round":
        return r(cfg, timeline=shifted_timeline(cfg.timeline, int(value)))
    if axis == "trigger_size":
        trig = r(cfg.marking.trigger, size=int(value))
        return r(cfg, marking=r(cfg.marking, trigger=trig))
    if axis == "transparency":
        trig = r(cfg.marking.trigger, transparency=float(value))
        return r(cfg, marking=r(cfg.marking, trigger=trig))
    if axis == "n_select":
        return r(cfg, fl=r(cfg.fl, n_select=int(value)))
    if axis == "dirichlet_alpha":
        return r(cfg, data=r(cfg.data, partition="dirichlet", dirichlet_alpha=float(value)))
    raise ConfigError(f"unknown sweep axis {axis!r}; choose from {', '.join(SWEEP_AXES)}")


def sweep(cfg: ExperimentConfig, axis: str, values) -> list[ExperimentLog]:
    values = list(values)
    if not values:
        raise ConfigError("sweep needs at least one value")
    return [run_experiment(apply_axis(cfg, axis, v)) for v in values]
