"""Verification protocols, matcher runs, EER/DET, cross-distance analysis and reports."""

from __future__ import annotations

import csv
import json
import logging
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path
from typing import Sequence

import numpy as np

from . import fusion
from .errors import InputError, ParameterError, RunError

log = logging.getLogger(__name__)

# counts reported for the UBIPr frontal subset, shown next to ours for comparison
REFERENCE_COUNTS = {"genuine": 4290, "impostor": 439480}
SCORE_COLUMNS = ("enrol_id", "test_id", "label", "enrol_dist", "test_dist", "matcher", "score", "flag")


@dataclass(frozen=True)
class Pair:
    enrol_id: str
    test_id: str
    genuine: bool
    enrol_dist: str
    test_dist: str
    enrol_user: tuple = ()
    test_user: tuple = ()

    @property
    def label(self) -> str:
        return "genuine" if self.genuine else "impostor"


@dataclass
class Protocol:
    pairs: list
    diagnostics: list

    def counts(self) -> dict:
        n_gen = sum(p.genuine for p in self.pairs)
        return {"genuine": n_gen, "impostor": len(self.pairs) - n_gen}


def _by_user(annotations):
    users = defaultdict(list)
    for a in annotations:
        users[a.user].append(a)
    return {u: sorted(v, key=lambda a: (a.session, a.image_path)) for u, v in sorted(users.items())}


def _tag_key(tag):
    digits = "".join(ch for ch in tag if ch.isdigit())
    return (int(digits) if digits else 0, tag)


def generate_protocol(annotations, genuine: str = "all_pairs", cells: str = "all") -> Protocol:
    """Genuine and impostor trials, each (subject, eye) being one user.

    Genuine (``all_pairs``): every unordered pair of a user's images, ordered
    by (session, distance, path). Genuine (``first_vs_second``): per distance
    cell (i, j), the user's first image at Di against its second at Dj.
    Impostor: per cell (i, j), each user's first image at Di against every
    other user's second image at Dj. ``cells="upper"`` keeps only i <= j.
    "First"/"second" are positions after sorting by (session, path).
    """
    if genuine not in ("all_pairs", "first_vs_second"):
        raise ParameterError(f"unknown genuine mode {genuine!r}")
    if cells not in ("all", "upper"):
        raise ParameterError(f"unknown cell mode {cells!r}")
    users = _by_user(annotations)
    tags = sorted({a.distance_tag for a in annotations}, key=_tag_key)
    cell_list = [(di, dj) for i, di in enumerate(tags) for j, dj in enumerate(tags) if cells == "all" or i <= j]
    slots = {u: defaultdict(list) for u in users}
    for u, anns in users.items():
        for a in anns:
            slots[u][a.distance_tag].append(a)

    pairs, diagnostics = [], []

    def add(a, b, gen):
        pairs.append(Pair(a.image_id, b.image_id, gen, a.distance_tag, b.distance_tag, a.user, b.user))

    for u, anns in users.items():
        if genuine == "all_pairs":
            ordered = sorted(anns, key=lambda a: (a.session, _tag_key(a.distance_tag), a.image_path))
            for a, b in combinations(ordered, 2):
                add(a, b, True)
        else:
            for di, dj in cell_list:
                first, second = slots[u].get(di, []), slots[u].get(dj, [])
                if not first or len(second) < 2:
                    diagnostics.append(f"user {'/'.join(u)}: no first/second image for genuine cell {di}-{dj}")
                    continue
                add(first[0], second[1], True)

    for di, dj in cell_list:
        for u in users:
            enrol = slots[u].get(di, [])
            if not enrol:
                diagnostics.append(f"user {'/'.join(u)}: no enrolment image at {di}")
                continue
            for v in users:
                if v == u:
                    continue
                test = slots[v].get(dj, [])
                if len(test) < 2:
                    diagnostics.append(f"user {'/'.join(v)}: no second image at {dj}")
                    continue
                add(enrol[0], test[1], False)
    # one diagnostic per distinct problem
    diagnostics = list(dict.fromkeys(diagnostics))
    return Protocol(pairs, diagnostics)


# ---------------------------------------------------------------------------
# score sets


@dataclass
class ScoreSet:
    matcher_id: str
    pairs: list
    scores: np.ndarray
    flags: list  # "" for usable scores, otherwise "degenerate" or "error"

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if len(self.pairs) != len(self.scores) or len(self.flags) != len(self.scores):
            raise InputError("pairs, scores and flags must have equal length")
        ok = self.valid_mask()
        if not np.all(np.isfinite(self.scores[ok])):
            raise InputError(f"{self.matcher_id}: non-finite unflagged score")

    def valid_mask(self) -> np.ndarray:
        return np.array([f == "" for f in self.flags], dtype=bool)

    def labels(self) -> np.ndarray:
        return np.array([p.genuine for p in self.pairs], dtype=bool)

    def genuine(self) -> np.ndarray:
        return self.scores[self.valid_mask() & self.labels()]

    def impostor(self) -> np.ndarray:
        return self.scores[self.valid_mask() & ~self.labels()]

    def flag_counts(self) -> dict:
        out = defaultdict(int)
        for f in self.flags:
            if f:
                out[f] += 1
        return dict(sorted(out.items()))

    def subset(self, mask) -> "ScoreSet":
        idx = np.flatnonzero(mask)
        return ScoreSet(self.matcher_id, [self.pairs[i] for i in idx], self.scores[idx], [self.flags[i] for i in idx])


def _score_chunk(matcher, store, chunk):
    out = []
    for p in chunk:
        a, b = store.get(p.enrol_id), store.get(p.test_id)
        if a is None or b is None:
            out.append((np.nan, "error"))
            continue
        score, flag = matcher.compare(a, b)
        out.append((float(score), flag))
    return out


_WORKER = {}


def _worker_init(matcher, store):
    _WORKER["matcher"], _WORKER["store"] = matcher, store


def _worker_run(chunk):
    return _score_chunk(_WORKER["matcher"], _WORKER["store"], chunk)


def run_matcher(protocol: Protocol, matcher, store: dict, workers: int = 1, chunk_size: int = 256,
                max_failure: float = 0.10) -> ScoreSet:
    """Score every protocol pair; results are keyed by pair order, independent of ``workers``.

    Missing descriptors flag the pair as ``error``; more than ``max_failure``
    of such pairs aborts the run.
    """
    pairs = list(protocol.pairs)
    chunks = [pairs[i:i + chunk_size] for i in range(0, len(pairs), chunk_size)]
    if workers > 1 and len(chunks) > 1:
        with ProcessPoolExecutor(workers, initializer=_worker_init, initargs=(matcher, store)) as pool:
            results = [r for part in pool.map(_worker_run, chunks) for r in part]
    else:
        results = [r for c in chunks for r in _score_chunk(matcher, store, c)]
    scores = np.array([r[0] for r in results], dtype=np.float64)
    flags = [r[1] for r in results]
    n_err = flags.count("error")
    if pairs and n_err / len(pairs) > max_failure:
        raise RunError(f"{matcher.name}: {n_err}/{len(pairs)} pairs failed")
    if n_err:
        log.warning("%s: %d pair(s) without descriptors", matcher.name, n_err)
    return ScoreSet(matcher.name, pairs, scores, flags)


# ---------------------------------------------------------------------------
# metrics


def _split(scores):
    if isinstance(scores, ScoreSet):
        return scores.genuine(), scores.impostor()
    gen, imp = scores
    return np.asarray(gen, dtype=np.float64), np.asarray(imp, dtype=np.float64)


def error_rates(gen, imp):
    """Thresholds (all distinct scores, ascending) with FAR = P(imp >= t) and FRR = P(gen < t)."""
    gen, imp = np.sort(gen), np.sort(imp)
    if gen.size == 0 or imp.size == 0:
        raise InputError("error rates need at least one genuine and one impostor score")
    thr = np.unique(np.concatenate([gen, imp]))
    far = (imp.size - np.searchsorted(imp, thr, side="left")) / imp.size
    frr = np.searchsorted(gen, thr, side="left") / gen.size
    return thr, far, frr


def eer(scores) -> float:
    """Equal error rate: mean of FAR and FRR at the threshold minimising |FAR - FRR| (lowest on ties).

    Accepts a :class:`ScoreSet` or a ``(genuine, impostor)`` tuple.
    """
    _, far, frr = error_rates(*_split(scores))
    i = int(np.argmin(np.abs(far - frr)))
    return float((far[i] + frr[i]) / 2)


def det_curve(scores) -> np.ndarray:
    """(FAR, FRR) staircase over every distinct threshold plus one above all scores."""
    _, far, frr = error_rates(*_split(scores))
    return np.column_stack([np.append(far, 0.0), np.append(frr, 1.0)])


def _eer_or_none(sub: ScoreSet):
    g, i = sub.genuine(), sub.impostor()
    if g.size == 0 or i.size == 0:
        return None
    return eer((g, i))


def cross_distance_matrix(s: ScoreSet, tags=None) -> dict:
    """EER per (enrol distance, test distance) cell and pooled by distance gap.

    Cells without genuine or impostor scores are ``None`` (absent), never 0.
    """
    if tags is None:
        tags = sorted({p.enrol_dist for p in s.pairs} | {p.test_dist for p in s.pairs}, key=_tag_key)
    pos = {t: i for i, t in enumerate(tags)}
    ei = np.array([pos.get(p.enrol_dist, -1) for p in s.pairs])
    ti = np.array([pos.get(p.test_dist, -1) for p in s.pairs])
    matrix = [[_eer_or_none(s.subset((ei == i) & (ti == j))) for j in range(len(tags))] for i in range(len(tags))]
    known = (ei >= 0) & (ti >= 0)
    gap = np.abs(ei - ti)
    by_gap = {int(d): _eer_or_none(s.subset(known & (gap == d))) for d in range(len(tags))}
    return {"tags": list(tags), "matrix": matrix, "by_gap": by_gap}


# ---------------------------------------------------------------------------
# fusion over score sets


def user_folds(pairs, n_folds: int = 2) -> np.ndarray:
    """Fold index of every pair, assigned through its enrolment user."""
    users = sorted({p.enrol_user for p in pairs} | {p.test_user for p in pairs})
    fold_of = {u: i % n_folds for i, u in enumerate(users)}
    return np.array([fold_of[p.enrol_user] for p in pairs], dtype=np.int64)


def _aligned(scoresets: Sequence[ScoreSet]):
    ref = scoresets[0].pairs
    for s in scoresets[1:]:
        if len(s.pairs) != len(ref) or any(a != b for a, b in zip(s.pairs, ref)):
            raise InputError(f"score sets {scoresets[0].matcher_id} and {s.matcher_id} cover different pairs")
    matrix = np.column_stack([s.scores for s in scoresets])
    valid = np.logical_and.reduce([s.valid_mask() for s in scoresets])
    return ref, matrix, valid


def fuse_cross_validated(scoresets: Sequence[ScoreSet], n_folds: int = 2) -> ScoreSet:
    """Fused scores where each fold is scored by weights trained on the other folds' users."""
    pairs, matrix, valid = _aligned(scoresets)
    labels = np.array([p.genuine for p in pairs], dtype=bool)
    folds = user_folds(pairs, n_folds)
    fused = np.full(len(pairs), np.nan)
    ids = [s.matcher_id for s in scoresets]
    for f in range(n_folds):
        train_mask = valid & (folds != f)
        test_mask = valid & (folds == f)
        if not test_mask.any():
            continue
        model = fusion.train(matrix[train_mask], labels[train_mask], ids)
        fused[test_mask] = fusion.apply(model, matrix[test_mask])
    flags = ["" if v else "degenerate" for v in valid]
    return ScoreSet("+".join(ids), list(pairs), fused, flags)


def train_fusion(scoresets: Sequence[ScoreSet]) -> fusion.FusionModel:
    pairs, matrix, valid = _aligned(scoresets)
    labels = np.array([p.genuine for p in pairs], dtype=bool)
    return fusion.train(matrix[valid], labels[valid], [s.matcher_id for s in scoresets])


# ---------------------------------------------------------------------------
# files and reports


def write_scores(path, s: ScoreSet) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SCORE_COLUMNS)
        for p, sc, fl in zip(s.pairs, s.scores, s.flags):
            w.writerow([p.enrol_id, p.test_id, p.label, p.enrol_dist, p.test_dist, s.matcher_id,
                        "" if not np.isfinite(sc) else repr(float(sc)), fl])


def read_scores(path, users=None) -> ScoreSet:
    """Read a scores CSV; ``users`` maps image id to user for fold assignment."""
    users = users or {}
    pairs, scores, flags, matcher = [], [], [], None
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in SCORE_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise InputError(f"{path}: missing column(s) {', '.join(missing)}")
        for row in reader:
            matcher = matcher or row["matcher"]
            if row["label"] not in ("genuine", "impostor"):
                raise InputError(f"{path}: bad label {row['label']!r}")
            pairs.append(Pair(row["enrol_id"], row["test_id"], row["label"] == "genuine", row["enrol_dist"],
                              row["test_dist"], users.get(row["enrol_id"], (row["enrol_id"],)),
                              users.get(row["test_id"], (row["test_id"],))))
            scores.append(float(row["score"]) if row["score"] else np.nan)
            flags.append(row["flag"])
    if matcher is None:
        raise InputError(f"{path}: no scores")
    return ScoreSet(matcher, pairs, np.asarray(scores), flags)


def relative_variation(value: float, best: float):
    """Percent change relative to ``best``; None when ``best`` is 0."""
    return None if best == 0 else 100.0 * (value - best) / best


def summarise(s: ScoreSet, with_det: bool = True) -> dict:
    g, i = s.genuine(), s.impostor()
    out = {
        "eer": eer(s),
        "n_genuine": int(g.size),
        "n_impostor": int(i.size),
        "mean_genuine": float(g.mean()),
        "mean_impostor": float(i.mean()),
        "flagged": s.flag_counts(),
        "cross_distance": cross_distance_matrix(s),
    }
    if with_det:
        out["det"] = det_curve(s).tolist()
    return out


def build_report(individual: Sequence[ScoreSet], fused: Sequence[ScoreSet] = (), config: dict | None = None,
                 protocol: Protocol | None = None) -> dict:
    """Machine-readable results: per-matcher and fused EERs, DET points, cross-distance views."""
    matchers = {s.matcher_id: summarise(s) for s in individual}
    best_id = min(matchers, key=lambda k: matchers[k]["eer"]) if matchers else None
    best = matchers[best_id]["eer"] if best_id else None
    fusions = {}
    for s in fused:
        entry = summarise(s)
        entry["variation_pct"] = relative_variation(entry["eer"], best) if best is not None else None
        fusions[s.matcher_id] = entry
    report = {
        "config": config or {},
        "matchers": matchers,
        "best_individual": {"matcher": best_id, "eer": best},
        "fusion": fusions,
    }
    if protocol is not None:
        report["protocol"] = {"counts": protocol.counts(), "reference_counts": REFERENCE_COUNTS,
                              "diagnostics": protocol.diagnostics}
    return report


def emit_report(report: dict, out_dir, formats=("json", "csv")) -> list:
    """Write report.json, report.csv (one row per system) and det_<system>.csv files."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if "json" in formats:
        path = out / "report.json"
        path.write_text(json.dumps(report, indent=2, sort_keys=True, allow_nan=False))
        written.append(path)
    if "csv" in formats:
        path = out / "report.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["system", "kind", "eer", "variation_pct", "n_genuine", "n_impostor", "flagged"])
            for kind in ("matchers", "fusion"):
                for name, e in report.get(kind, {}).items():
                    var = e.get("variation_pct")
                    w.writerow([name, "individual" if kind == "matchers" else "fusion", repr(e["eer"]),
                                "" if var is None else repr(var), e["n_genuine"], e["n_impostor"],
                                sum(e["flagged"].values())])
        written.append(path)
        for kind in ("matchers", "fusion"):
            for name, e in report.get(kind, {}).items():
                if "det" not in e:
                    continue
                path = out / f"det_{name.replace('+', '_')}.csv"
                with open(path, "w", newline="") as fh:
                    w = csv.writer(fh)
                    w.writerow(["far", "frr"])
                    w.writerows([repr(a), repr(b)] for a, b in e["det"])
                written.append(path)
    return written
