"""Diagnostics and file emitters: parameter distance, membership inference, CSV/JSON."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn
from .data import Dataset
from .errors import ConfigError, FedVerifyError


@dataclass(frozen=True)
class DistanceReport:
    euclidean: float
    cosine: float | None  # None when either vector is zero

    @property
    def cosine01(self) -> float | None:
        return None if self.cosine is None else 0.5 * (self.cosine + 1.0)


def param_distance(w1, w2) -> DistanceReport:
    a = np.asarray(w1, dtype=np.float64)
    b = np.asarray(w2, dtype=np.float64)
    if a.shape != b.shape:
        raise ConfigError(f"cannot compare parameter vectors of shapes {a.shape} and {b.shape}")
    eu = float(np.linalg.norm(a - b))
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0 or nb == 0:
        return DistanceReport(eu, None)
    cos = float(a @ b) / (na * nb)
    if eu == 0:
        cos = 1.0
    return DistanceReport(eu, max(-1.0, min(1.0, cos)))


@dataclass(frozen=True)
class MembershipReport:
    inferred_member_ratio: float
    threshold: float
    attack: str = "confidence_threshold"
    degenerate: bool = False


def true_label_confidence(spec, params, dataset: Dataset) -> np.ndarray:
    p = nn.softmax_probs(nn.forward(spec, params, dataset.x))
    return p[np.arange(len(dataset)), dataset.y]


def fit_threshold(member_conf, nonmember_conf) -> tuple[float, bool]:
    """Threshold tau maximising TPR - FPR for the rule 'member iff conf >= tau'.

    Ties in the objective go to the largest tau.
    """
    m = np.asarray(member_conf, dtype=np.float64)
    n = np.asarray(nonmember_conf, dtype=np.float64)
    cands = np.unique(np.concatenate([m, n]))
    if len(cands) == 1:
        return float(cands[0]), True
    ms, ns = np.sort(m), np.sort(n)
    tpr = 1.0 - np.searchsorted(ms, cands, side="left") / len(ms)
    fpr = 1.0 - np.searchsorted(ns, cands, side="left") / len(ns)
    score = tpr - fpr
    best = np.flatnonzero(score == score.max())[-1]
    return float(cands[best]), bool(score.max() <= 0)


def membership_inference(spec, params, member_set: Dataset, nonmember_set: Dataset,
                         leaving_set: Dataset) -> MembershipReport:
    for name, d in (("member", member_set), ("nonmember", nonmember_set), ("leaving", leaving_set)):
        if d is None or len(d) == 0:
            raise ConfigError(f"{name} set is empty")
    tau, degenerate = fit_threshold(true_label_confidence(spec, params, member_set),
                                    true_label_confidence(spec, params, nonmember_set))
    ratio = float((true_label_confidence(spec, params, leaving_set) >= tau).mean())
    return MembershipReport(ratio, tau, degenerate=degenerate)


# --- formatting ------------------------------------------------------------


def fmt(v) -> str:
    """Six significant digits for floats; everything else via str()."""
    if isinstance(v, bool) or v is None:
        return "" if v is None else str(v).lower()
    if isinstance(v, (float, np.floating)):
        if math.isnan(v):
            return "nan"
        return f"{float(v):.6g}"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def round6(obj):
    """Recursively round floats to 6 significant digits (stable through JSON)."""
    if isinstance(obj, dict):
        return {str(k): round6(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [round6(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        if math.isnan(f) or math.isinf(f):
            return None
        return float(f"{f:.6g}")
    return obj


def dumps(obj) -> str:
    return json.dumps(round6(obj), sort_keys=True, separators=(",", ":"))


def write_text(path, text: str) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    except OSError as exc:
        raise FedVerifyError(f"cannot write {path}: {exc}") from exc


def csv_text(rows: list[dict], columns: list[str] | None = None) -> str:
    if columns is None:
        columns = []
        for r in rows:
            for k in r:
                if k not in columns:
                    columns.append(k)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([fmt(r.get(c)) for c in columns])
    return buf.getvalue()


def parse_csv(text: str) -> tuple[list[str], list[dict]]:
    reader = csv.reader(io.StringIO(text))
    rows = list(reader)
    if not rows:
        return [], []
    header = rows[0]
    out = []
    for r in rows[1:]:
        rec = {}
        for k, v in zip(header, r):
            rec[k] = _parse_cell(v)
        out.append(rec)
    return header, out


def _parse_cell(v: str):
    if v == "":
        return None
    if v in ("true", "false"):
        return v == "true"
    try:
        return int(v)
    except ValueError:
        pass
    try:
        return float(v)
    except ValueError:
        return v


# --- log emitters ----------------------------------------------------------

ROUND_COLUMNS_HEAD = ["round", "events", "test_accuracy", "test_loss"]


def flatten_round(rec: dict) -> dict:
    out = {"round": rec["round"], "events": ";".join(e["kind"] for e in rec.get("events", []))}
    g = rec.get("global", {})
    out["test_accuracy"] = g.get("test_accuracy")
    out["test_loss"] = g.get("test_loss")
    for where in ("marker", "leaving", "leaving_original"):
        for k in sorted(rec.get(where, {}) or {}):
            out[f"{where}_{k}"] = rec[where][k]
    return out


def log_csv(log) -> str:
    rows = [flatten_round(r) for r in log.rounds]
    cols = list(ROUND_COLUMNS_HEAD)
    for r in rows:
        for k in r:
            if k not in cols:
                cols.append(k)
    return csv_text(rows, cols)


def log_jsonl(log) -> str:
    return "".join(dumps(r) + "\n" for r in log.rounds)


def summary_json(log) -> str:
    body = {"config": log.config, "summary": log.summary, "status": log.status}
    return json.dumps(round6(body), sort_keys=True, indent=2) + "\n"


def emit(log, fmt_name: str, path) -> None:
    if fmt_name == "csv":
        write_text(path, log_csv(log))
    elif fmt_name == "jsonl":
        write_text(path, log_jsonl(log))
    elif fmt_name == "summary_json":
        write_text(path, summary_json(log))
    else:
        raise ConfigError(f"unknown format {fmt_name!r}")


def emit_all(log, out_dir, stem: str = "experiment") -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "jsonl": out / f"{stem}.jsonl",
        "summary_json": out / f"{stem}.summary.json",
        "csv": out / f"{stem}.csv",
    }
    for k, p in paths.items():
        emit(log, k, p)
    costs = out / f"{stem}.costs.json"
    write_text(costs, json.dumps(round6(log.costs), sort_keys=True, indent=2) + "\n")
    paths["costs"] = costs
    return paths


def load_log(summary_path):
    """Read back a summary JSON and its sibling JSONL, if present."""
    from .mechanism import ExperimentLog

    p = Path(summary_path)
    try:
        body = json.loads(p.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read log {p}: {exc}") from exc
    log = ExperimentLog(config=body.get("config", {}), summary=body.get("summary", {}),
                        status=body.get("status", "ok"))
    stem = p.name[: -len(".summary.json")] if p.name.endswith(".summary.json") else p.stem
    jl = p.with_name(stem + ".jsonl")
    if jl.exists():
        log.rounds = [json.loads(line) for line in jl.read_text(encoding="utf-8").splitlines()
                      if line.strip()]
    return log


def sweep_rows(axis: str, values, logs) -> list[dict]:
    rows = []
    for v, lg in zip(values, logs):
        s = lg.summary
        rows.append({
            axis: v,
            "status": lg.status,
            "metric": s.get("metric"),
            "baseline": s.get("baseline"),
            "at_t_u": s.get("at_t_u"),
            "metric_diff": s.get("metric_diff"),
            "verify_decision": s.get("verify_decision"),
        })
    return rows
