"""Markers the leaver plants in the global model, and the metrics that read them back."""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import fed, nn
from .data import Dataset, TriggerSpec, apply_trigger
from .errors import CapabilityError, ConfigError, MarkingInfeasible

KINDS = ("EM", "FM", "BN", "ME", "BF")
METRICS = ("accuracy", "loss", "loss_variance", "kl", "influence", "bit_match_rate")
BOUND_METRIC = {
    "EM": "loss",
    "FM": "loss_variance",
    "BN": "accuracy",
    "ME": "bit_match_rate",
    "BF": "accuracy",
}
# metrics that unlearning pushes upward; the rest fall
RISING = ("loss", "loss_variance")


# --- marker containers -----------------------------------------------------


def _b64(a: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(a, dtype="<f8").tobytes()).decode("ascii")


def _unb64(s: str, shape) -> np.ndarray:
    return np.frombuffer(base64.b64decode(s), dtype="<f8").reshape(shape).copy()


@dataclass(eq=False)
class MarkerSet:
    kind: str
    x: np.ndarray | None = None
    labels: np.ndarray | None = None
    indices: np.ndarray | None = None  # positions in the leaver's local data, when applicable
    bits: np.ndarray | None = None
    projection_seed: int | None = None
    bound_metric: str = ""

    def __post_init__(self):
        kind = self.kind.upper()
        if kind not in KINDS:
            raise ConfigError(f"unknown marker kind {self.kind!r}")
        self.kind = kind
        expected = BOUND_METRIC[kind]
        if self.bound_metric and self.bound_metric != expected:
            raise ConfigError(f"{kind} markers are checked with {expected}, not {self.bound_metric}")
        self.bound_metric = expected
        if kind == "ME":
            if self.bits is None or len(self.bits) == 0 or self.projection_seed is None:
                raise ConfigError("ME markers need bits and a projection seed")
            self.bits = np.asarray(self.bits, dtype=np.int64)
        else:
            if self.x is None or self.labels is None or len(self.labels) == 0:
                raise ConfigError(f"{kind} marker set is empty")
            self.x = np.asarray(self.x, dtype=np.float64)
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.x.shape[0] != self.labels.shape[0]:
                raise ConfigError("marker inputs and labels differ in length")

    def __len__(self):
        return len(self.bits) if self.kind == "ME" else len(self.labels)

    def to_json(self) -> str:
        d = {"kind": self.kind, "bound_metric": self.bound_metric}
        if self.kind == "ME":
            d["bits"] = "".join(str(int(b)) for b in self.bits)
            d["bits_hex"] = f"{int(d['bits'], 2):0{(len(self.bits) + 3) // 4}x}"
            d["projection_seed"] = int(self.projection_seed)
        else:
            d["shape"] = list(self.x.shape)
            d["x"] = _b64(self.x)
            d["labels"] = [int(v) for v in self.labels]
        if self.indices is not None:
            d["indices"] = [int(v) for v in self.indices]
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MarkerSet":
        d = json.loads(text)
        idx = np.asarray(d["indices"], dtype=np.int64) if "indices" in d else None
        if d["kind"] == "ME":
            bits = np.array([int(c) for c in d["bits"]], dtype=np.int64)
            return cls("ME", bits=bits, projection_seed=d["projection_seed"], indices=idx)
        return cls(
            d["kind"],
            x=_unb64(d["x"], d["shape"]),
            labels=np.asarray(d["labels"], dtype=np.int64),
            indices=idx,
        )


@dataclass(eq=False)
class MarkingOutcome:
    marked_params: np.ndarray  # the leaver's fine-tuned local model
    marked_delta: np.ndarray  # what it uploads: marked_params - w_t
    marker_set: MarkerSet
    local_data: Dataset  # what the leaver trains on while it stays
    penalty: object = None  # extra gradient for later local training (ME)
    info: dict = field(default_factory=dict)
    baseline_metric: float | None = None


@dataclass(frozen=True)
class MarkConfig:
    kind: str = "EM"
    ft_iters: int = 300
    ft_lr: float = 0.3
    kappa: float = 0.4
    fm_ratio: float = 0.1
    fm_window: int = 3
    trigger: TriggerSpec = TriggerSpec()
    bn_eval_count: int = 100
    bit_count: int = 64
    projection_seed: int = 1234
    penalty_weight: float = 4.0
    gamma: float = 0.01
    pgd_steps: int = 20
    pgd_budget: float = 0.1  # fraction of the feature range
    pgd_step: float | None = None  # None: 2.5 * budget / steps
    bf_restarts: int = 3
    bf_min_markers: int = 3

    def __post_init__(self):
        kind = self.kind.upper()
        if kind not in KINDS:
            raise ConfigError(f"unknown marker kind {self.kind!r}")
        object.__setattr__(self, "kind", kind)
        if self.ft_iters < 0 or self.ft_lr < 0:
            raise ConfigError("ft_iters and ft_lr must be non-negative")
        if not 0.0 < self.kappa <= 1.0:
            raise ConfigError("kappa must be in (0, 1]")
        if not 0.0 < self.fm_ratio <= 1.0:
            raise ConfigError("fm_ratio must be in (0, 1]")
        if self.fm_window < 2:
            raise ConfigError("fm_window must be at least 2")
        if not 0.0 <= self.gamma < 0.1:
            raise ConfigError("gamma must be in [0, 0.1)")
        if self.bit_count < 1 or self.penalty_weight < 0:
            raise ConfigError("bit_count must be positive and penalty_weight non-negative")


# --- marking helpers -------------------------------------------------------


def finetune(spec, params, x, y, iters, lr, extra_grad=None, weights=None) -> np.ndarray:
    """Full-batch gradient descent; ``weights`` optionally reweights samples."""
    w = np.array(params, dtype=np.float64, copy=True)
    for _ in range(iters):
        if weights is None:
            _, g = nn.loss_and_grad(spec, w, x, y)
        else:
            g = np.zeros_like(w)
            for grp in np.unique(weights):
                sel = weights == grp
                _, gg = nn.loss_and_grad(spec, w, x[sel], y[sel])
                g += grp * sel.mean() * gg
            g /= float((weights * 1.0).mean())
        if extra_grad is not None:
            g = g + extra_grad(w)
        w = nn.sgd_step(w, g, lr)
    return w


def _outcome(kind, w_t, marked, markers, local_data, penalty=None, **info):
    return MarkingOutcome(marked, marked - w_t, markers, local_data, penalty, info)


def mark_em(spec, local_params, local_data: Dataset, kappa, ft_iters, rng=None,
            ft_lr=0.1, reference=None) -> MarkingOutcome:
    """Relabel the leaver's hardest samples of one class and memorise the wrong labels.

    ``reference`` is the model the upload is measured against (default:
    ``local_params``).
    """
    n = len(local_data)
    k = math.ceil(kappa * n)
    if k < 1:
        raise MarkingInfeasible("kappa selects no samples")
    losses = nn.per_sample_losses(spec, local_params, local_data.x, local_data.y)
    top = np.argsort(-losses, kind="stable")[:k]
    counts = np.bincount(local_data.y[top], minlength=local_data.class_count)
    major = int(np.argmax(counts))
    idx = np.sort(top[local_data.y[top] == major])
    if len(idx) < 2:
        raise MarkingInfeasible(
            f"majority class among the top-{k} loss samples has {len(idx)} sample(s); need 2"
        )
    probs = nn.softmax_probs(nn.forward(spec, local_params, local_data.x[idx]))
    votes = np.bincount(probs.argmax(axis=1), minlength=local_data.class_count).astype(float)
    # ties broken by mean probability; the original class is never a valid target
    score = votes + probs.mean(axis=0)
    score[major] = -np.inf
    target = int(np.argmax(score))
    y_new = local_data.y.copy()
    y_new[idx] = target
    marked_data = local_data.with_labels(y_new)
    marked = finetune(spec, local_params, marked_data.x, marked_data.y, ft_iters, ft_lr)
    markers = MarkerSet("EM", x=local_data.x[idx], labels=np.full(len(idx), target), indices=idx)
    ref = local_params if reference is None else reference
    return _outcome("EM", ref, marked, markers, marked_data, original_class=major,
                    target_class=target)


def loss_variance(loss_rows) -> float:
    """Mean over samples of the per-sample loss variance across rounds (rows)."""
    rows = np.asarray(loss_rows, dtype=np.float64)
    if rows.ndim == 1:
        return float(rows.var())
    return float(rows.var(axis=0).mean())


def mark_fm(spec, local_params, loss_history, local_data: Dataset, ratio, ft_iters,
            ft_lr=0.1, window=3, reference=None) -> MarkingOutcome:
    """Pick the samples whose loss swings most across recent rounds and pin them down."""
    hist = np.asarray(loss_history, dtype=np.float64)
    if hist.ndim != 2 or hist.shape[0] < 3 or hist.shape[1] != len(local_data):
        raise MarkingInfeasible("FM marking needs at least 3 rounds of per-sample loss history")
    var = hist[-window:].var(axis=0)
    k = max(1, int(round(ratio * len(local_data))))
    order = np.argsort(-var, kind="stable")
    idx = np.sort(order[:k][var[order[:k]] > 0])
    if len(idx) == 0:
        raise MarkingInfeasible("no sample has non-zero loss variance")
    weights = np.ones(len(local_data))
    weights[idx] = max(1.0, len(local_data) / len(idx))
    marked = finetune(spec, local_params, local_data.x, local_data.y, ft_iters, ft_lr,
                      weights=weights)
    markers = MarkerSet("FM", x=local_data.x[idx], labels=local_data.y[idx], indices=idx)
    train = local_data.concat(local_data.subset(np.repeat(idx, max(1, int(weights[idx[0]]) - 1))))
    ref = local_params if reference is None else reference
    return _outcome("FM", ref, marked, markers, train, pre_variance=float(var[idx].mean()))


def poison(local_data: Dataset, trigger: TriggerSpec, ratio: float, rng) -> tuple[Dataset, np.ndarray]:
    if local_data.image_shape is None:
        raise CapabilityError("backdoor marking needs image-shaped data")
    n = len(local_data)
    count = int(round(ratio * n))
    idx = np.sort(rng.choice(n, size=count, replace=False)) if count else np.zeros(0, np.int64)
    x = np.array(local_data.x, copy=True)
    y = local_data.y.copy()
    if count:
        x[idx] = apply_trigger(x[idx], trigger, local_data.image_shape)
        y[idx] = trigger.target_class
    return Dataset(x, y, local_data.class_count, local_data.image_shape), idx


def bn_markers(holdout: Dataset, trigger: TriggerSpec, count: int, rng) -> MarkerSet:
    """Triggered held-out samples from non-target classes, labelled with the target."""
    if holdout.image_shape is None:
        raise CapabilityError("backdoor markers need image-shaped data")
    pool = np.flatnonzero(holdout.y != trigger.target_class)
    if len(pool) == 0:
        raise MarkingInfeasible("held-out pool has no non-target samples")
    pick = rng.choice(pool, size=min(count, len(pool)), replace=False)
    x = apply_trigger(holdout.x[np.sort(pick)], trigger, holdout.image_shape)
    return MarkerSet("BN", x=x, labels=np.full(len(pick), trigger.target_class))


def mark_bn(spec, local_params, local_data: Dataset, trigger: TriggerSpec, poison_ratio,
            ft_iters, rng, holdout: Dataset | None = None, eval_count=100, ft_lr=0.1,
            reference=None) -> MarkingOutcome:
    """Backdoor the leaver's model with a trigger patch."""
    poisoned, idx = poison(local_data, trigger, poison_ratio, rng)
    marked = finetune(spec, local_params, poisoned.x, poisoned.y, ft_iters, ft_lr)
    markers = bn_markers(holdout if holdout is not None else local_data, trigger, eval_count, rng)
    ref = local_params if reference is None else reference
    return _outcome("BN", ref, marked, markers, poisoned, poisoned_indices=idx.tolist())


def first_layer_slice(spec: nn.ModelSpec) -> slice:
    return spec.layer_slices()[0][0]


def projection(spec: nn.ModelSpec, bit_count: int, seed: int) -> np.ndarray:
    size = first_layer_slice(spec).stop - first_layer_slice(spec).start
    if size < bit_count:
        raise ConfigError(f"embedding layer has {size} weights, fewer than {bit_count} bits")
    # unit-variance rows: z = X theta stays O(|theta|) whatever the layer width
    return np.random.default_rng([seed, 31]).normal(0.0, 1.0 / np.sqrt(size), size=(bit_count, size))


def extract_bits(spec: nn.ModelSpec, params, bit_count: int, seed: int) -> np.ndarray:
    theta = np.asarray(params)[first_layer_slice(spec)]
    return (projection(spec, bit_count, seed) @ theta > 0).astype(np.int64)


def bit_match_rate(spec, params, marker: MarkerSet) -> float:
    got = extract_bits(spec, params, len(marker.bits), marker.projection_seed)
    return float((got == marker.bits).mean())


def me_penalty(spec, bits, seed, weight):
    """Gradient of weight * mean BCE(sigmoid(X theta), bits) wrt the flat parameters."""
    X = projection(spec, len(bits), seed)
    sl = first_layer_slice(spec)
    b = np.asarray(bits, dtype=np.float64)

    def grad(w):
        z = X @ w[sl]
        s = 0.5 * (1.0 + np.tanh(0.5 * z))
        g = np.zeros_like(w)
        g[sl] = weight * (X.T @ (s - b)) / len(b)
        return g

    return grad


def mark_me(spec, local_params, bit_count, projection_seed, penalty_weight, ft_iters,
            local_data: Dataset | None = None, ft_lr=0.1, rng=None, reference=None,
            max_extra_iters=2000) -> MarkingOutcome:
    """Embed owner bits into the first-layer weights through a BCE penalty."""
    rng = rng if rng is not None else np.random.default_rng([projection_seed, 32])
    bits = rng.integers(0, 2, size=bit_count)
    grad = me_penalty(spec, bits, projection_seed, penalty_weight)
    marker = MarkerSet("ME", bits=bits, projection_seed=projection_seed)
    w = np.array(local_params, dtype=np.float64, copy=True)
    if local_data is not None:
        w = finetune(spec, w, local_data.x, local_data.y, ft_iters, ft_lr, extra_grad=grad)
    # keep going on the penalty alone until every bit reads back
    extra = 0
    while bit_match_rate(spec, w, marker) < 1.0 and extra < max_extra_iters:
        w = nn.sgd_step(w, grad(w), ft_lr)
        extra += 1
    ref = local_params if reference is None else reference
    return _outcome("ME", ref, w, marker, local_data, penalty=grad, extra_iters=extra)


def top2_gap(probs: np.ndarray) -> np.ndarray:
    p = np.sort(np.atleast_2d(probs), axis=1)
    return p[:, -1] - p[:, -2]


GAP_TOL = 1e-15  # absorbs rounding: 0.505 - 0.495 is 0.01 + 9e-18 in binary


def near_boundary(probs: np.ndarray, gamma: float) -> np.ndarray:
    """Rows whose top-two probability gap is at most ``gamma``."""
    return top2_gap(probs) <= gamma + GAP_TOL


def _margin(spec, params, x, y):
    p = nn.softmax_probs(nn.forward(spec, params, x))
    others = p.copy()
    others[np.arange(len(y)), y] = -np.inf
    return p[np.arange(len(y)), y] - others.max(axis=1), p


def pgd_boundary(spec, params, x, y, gamma, steps, step, budget, rng, restarts=1, bisect=40):
    """L-inf PGD that climbs the loss; on crossing the boundary, bisect for a gap <= gamma."""
    found_x, found_y = [], []
    for r in range(restarts):
        start = x if r == 0 else np.clip(x + rng.uniform(-budget, budget, size=x.shape),
                                          x - budget, x + budget)
        cur = start.copy()
        m_prev, _ = _margin(spec, params, cur, y)
        done = np.zeros(len(y), dtype=bool)
        for _ in range(steps):
            g = nn.input_gradient(spec, params, cur, y)
            nxt = np.clip(cur + step * np.sign(g), x - budget, x + budget)
            m_next, _ = _margin(spec, params, nxt, y)
            crossed = (~done) & (m_prev > 0) & (m_next <= 0)
            for i in np.flatnonzero(crossed):
                lo, hi = cur[i], nxt[i]
                for _ in range(bisect):
                    mid = 0.5 * (lo + hi)
                    mm, pp = _margin(spec, params, mid[None], y[i : i + 1])
                    if near_boundary(pp, gamma)[0]:
                        found_x.append(mid)
                        found_y.append(y[i])
                        break
                    if mm[0] > 0:
                        lo = mid
                    else:
                        hi = mid
                done[i] = True
            cur, m_prev = nxt, m_next
            if done.all():
                break
    if not found_x:
        return np.zeros((0, x.shape[1])), np.zeros(0, np.int64)
    return np.vstack(found_x), np.asarray(found_y, dtype=np.int64)


def mark_bf(spec, local_params, local_data: Dataset, gamma, ft_iters, rng, pgd_steps=20,
            pgd_budget=0.1, pgd_step=None, restarts=3, min_markers=3, ft_lr=0.1,
            reference=None) -> MarkingOutcome:
    """Find near-boundary points around local samples and make the model robust on them."""
    if not 0.0 <= gamma < 0.1:
        raise ConfigError("gamma must be in [0, 0.1)")
    span = float(local_data.x.max() - local_data.x.min()) or 1.0
    budget = pgd_budget * span
    step = 2.5 * budget / pgd_steps if pgd_step is None else pgd_step
    preds = nn.forward(spec, local_params, local_data.x).argmax(axis=1)
    ok = preds == local_data.y  # start from correctly classified points
    xs, ys = pgd_boundary(spec, local_params, local_data.x[ok], local_data.y[ok], gamma,
                          pgd_steps, step, budget, rng, restarts)
    if len(ys) < min_markers:
        raise MarkingInfeasible(
            f"boundary search found {len(ys)} marker(s), fewer than the minimum {min_markers}"
        )
    gaps = top2_gap(nn.softmax_probs(nn.forward(spec, local_params, xs)))
    markers = MarkerSet("BF", x=xs, labels=ys)
    train = local_data.concat(Dataset(xs, ys, local_data.class_count, local_data.image_shape))
    marked = finetune(spec, local_params, train.x, train.y, ft_iters, ft_lr)
    ref = local_params if reference is None else reference
    return _outcome("BF", ref, marked, markers, train, creation_gaps=gaps.tolist())


def mark(cfg: MarkConfig, spec, local_params, local_data: Dataset, rng, reference=None,
         loss_history=None, holdout=None) -> MarkingOutcome:
    k = cfg.kind
    if k == "EM":
        return mark_em(spec, local_params, local_data, cfg.kappa, cfg.ft_iters, rng, cfg.ft_lr,
                       reference)
    if k == "FM":
        return mark_fm(spec, local_params, loss_history, local_data, cfg.fm_ratio, cfg.ft_iters,
                       cfg.ft_lr, cfg.fm_window, reference)
    if k == "BN":
        return mark_bn(spec, local_params, local_data, cfg.trigger, cfg.trigger.poison_ratio,
                       cfg.ft_iters, rng, holdout, cfg.bn_eval_count, cfg.ft_lr, reference)
    if k == "ME":
        return mark_me(spec, local_params, cfg.bit_count, cfg.projection_seed, cfg.penalty_weight,
                       cfg.ft_iters, local_data, cfg.ft_lr, rng, reference)
    return mark_bf(spec, local_params, local_data, cfg.gamma, cfg.ft_iters, rng, cfg.pgd_steps,
                   cfg.pgd_budget, cfg.pgd_step, cfg.bf_restarts, cfg.bf_min_markers, cfg.ft_lr,
                   reference)


# --- checking metrics ------------------------------------------------------


def kl_to_uniform(probs: np.ndarray) -> float:
    """Mean over rows of KL(p || uniform) = sum_c p_c log(C p_c)."""
    p = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    c = p.shape[1]
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) + math.log(c)), 0.0)
    return float(max(terms.sum(axis=1).mean(), 0.0))


def kl_from_logits(logits: np.ndarray) -> float:
    logp = nn.log_softmax(np.atleast_2d(logits))
    p = np.exp(logp)
    c = logp.shape[1]
    return float(max((p * (logp + math.log(c))).sum(axis=1).mean(), 0.0))


def cg_solve(matvec, b: np.ndarray, tol: float = 1e-10, max_iter: int | None = None):
    """Conjugate gradients on a block of right-hand sides (columns), solved in lockstep.

    Returns (solution, converged).  Non-positive curvature on any column stops
    early with converged=False.
    """
    b = np.asarray(b, dtype=np.float64)
    single = b.ndim == 1
    B = b[:, None] if single else b
    x = np.zeros_like(B)
    r = B.copy()
    p = r.copy()
    rs = (r * r).sum(axis=0)
    bnorm = np.sqrt((B * B).sum(axis=0))
    bnorm[bnorm == 0] = 1.0
    max_iter = max_iter or 10 * B.shape[0]
    converged = False
    for _ in range(max_iter):
        if np.all(np.sqrt(rs) <= tol * bnorm):
            converged = True
            break
        ap = matvec(p)
        curv = (p * ap).sum(axis=0)
        live = np.sqrt(rs) > tol * bnorm
        if np.any(curv[live] <= 0):
            break
        alpha = np.where(live, rs / np.where(curv > 0, curv, 1.0), 0.0)
        x += alpha * p
        r -= alpha * ap
        rs_new = (r * r).sum(axis=0)
        p = r + np.where(live, rs_new / np.where(rs > 0, rs, 1.0), 0.0) * p
        rs = rs_new
    else:
        converged = bool(np.all(np.sqrt(rs) <= tol * bnorm))
    return (x[:, 0] if single else x), converged


def self_influence(hvp, grads: np.ndarray, damping: float, dense=None, tol=1e-10, max_iter=None):
    """Mean of -g_i^T (H + damping I)^{-1} g_i over the rows of ``grads``.

    ``hvp(V)`` multiplies the undamped Hessian into a (P, k) block.  If CG
    meets non-positive curvature and ``dense()`` is given, the dense matrix
    is solved directly instead.
    """
    G = np.atleast_2d(grads).T
    sol, ok = cg_solve(lambda V: hvp(V) + damping * V, G, tol, max_iter)
    if not ok and dense is not None:
        h = dense()
        sol = np.linalg.solve(h + damping * np.eye(h.shape[0]), G)
    return float(-(G * sol).sum(axis=0).mean())


def influence(spec, params, x, y, damping=0.01, tol=1e-6, max_iter=None,
              curvature="gauss_newton") -> float:
    """Mean Koh-Liang self-influence of (x, y) under the curvature of their own loss.

    ``curvature="gauss_newton"`` (default) uses the PSD Gauss-Newton matrix so
    the damped solve is well posed; ``"hessian"`` uses exact Hessian-vector
    products and falls back to a dense solve if CG meets negative curvature.
    """
    x = np.atleast_2d(x)
    y = np.atleast_1d(y)
    grads = np.vstack([nn.loss_and_grad(spec, params, x[i : i + 1], y[i : i + 1])[1]
                       for i in range(len(y))])
    if curvature == "gauss_newton":
        prod, dense = nn.gauss_newton_vector_product, None
    elif curvature == "hessian":
        prod, dense = nn.hessian_vector_product, (lambda: nn.hessian(spec, params, x, y))
    else:
        raise ConfigError(f"unknown curvature {curvature!r}")
    return self_influence(
        lambda V: prod(spec, params, x, y, V),
        grads,
        damping,
        dense=dense,
        tol=tol,
        max_iter=max_iter or 500,
    )


def check_metric(spec, params, target, metric: str, loss_window=None, damping=0.01) -> float:
    """Evaluate ``metric`` on a MarkerSet or a Dataset."""
    if metric not in METRICS:
        raise ConfigError(f"unknown metric {metric!r}")
    if isinstance(target, MarkerSet):
        if metric == "bit_match_rate":
            if target.kind != "ME":
                raise ConfigError("bit_match_rate applies only to ME markers")
            return bit_match_rate(spec, params, target)
        if target.kind == "ME":
            raise ConfigError(f"ME markers are checked with bit_match_rate, not {metric}")
        x, y = target.x, target.labels
    else:
        if metric == "bit_match_rate":
            raise ConfigError("bit_match_rate needs an ME marker set")
        x, y = target.x, target.y
    if len(y) == 0:
        raise ConfigError("cannot evaluate a metric on an empty set")
    if metric == "accuracy":
        return nn.accuracy(spec, params, x, y)
    if metric == "loss":
        return float(nn.per_sample_losses(spec, params, x, y).mean())
    if metric == "loss_variance":
        if loss_window is not None:
            return loss_variance(loss_window)
        return loss_variance(nn.per_sample_losses(spec, params, x, y))
    if metric == "kl":
        return kl_from_logits(nn.forward(spec, params, x))
    return influence(spec, params, x, y, damping)


# --- diffs and decisions ---------------------------------------------------


def median_window(values) -> float:
    return float(np.median(np.asarray(values, dtype=np.float64)))


def metric_diff(baseline: float, current: float, baseline_kind=None, current_kind=None) -> float:
    if baseline_kind is not None and current_kind is not None and baseline_kind != current_kind:
        raise ConfigError(f"cannot diff {baseline_kind} against {current_kind}")
    return abs(float(baseline) - float(current))


def signed_gain(metric: str, baseline: float, current: float) -> float:
    """How far unlearning moved the metric in its expected direction."""
    if metric in RISING:
        return float(current) - float(baseline)
    if metric == "influence":
        return abs(float(current) - float(baseline))
    return float(baseline) - float(current)


DEFAULT_THRESHOLDS = {
    "accuracy": 0.2,
    "loss": 0.5,
    "kl": 0.5,
    "bit_match_rate": 0.2,
}


def default_threshold(metric: str, baseline: float) -> float:
    if metric in DEFAULT_THRESHOLDS:
        return DEFAULT_THRESHOLDS[metric]
    if metric == "loss_variance":
        return max(2.0 * abs(baseline), 1e-12)
    if metric == "influence":
        return max(0.5 * abs(baseline), 1e-12)
    raise ConfigError(f"unknown metric {metric!r}")


def verify_decision(diff: float, threshold: float) -> str:
    if threshold <= 0:
        raise ConfigError("threshold must be positive")
    return "assured_privacy" if diff >= threshold else "distrust"


@dataclass(frozen=True)
class CorrelationReport:
    r: float | None
    n: int
    defined: bool


def correlation_report(marker_series, leaving_series) -> CorrelationReport:
    a = np.asarray(marker_series, dtype=np.float64)
    b = np.asarray(leaving_series, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ConfigError("series must be 1-D and of equal length")
    if len(a) < 3:
        raise ConfigError("need at least 3 points for a correlation")
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        return CorrelationReport(None, len(a), False)
    r = float(np.corrcoef(a, b)[0, 1])
    return CorrelationReport(max(-1.0, min(1.0, r)), len(a), True)
