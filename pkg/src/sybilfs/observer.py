"""Adversary simulations and leakage analysis.

Everything here consumes only OS-visible material: the observation log,
the lineage event log, and per-image call transcripts. Nothing imports
the translation tables, block states, or the actual-image flag; tests
enforce that boundary.

Provided attacks and metrics: the random-guess attack and its empirical
success rate, the lineage-history anonymity curve P(r) = 1/M(r) with
M = |union of shuffle participant sets|, the extinct-lineage audit an OS
would run to rule initial images out, the continuous-observation window
audit, and a histogram mutual-information estimator (Miller-Madow bias
corrected) for delay-vs-label timing leakage.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .util import derive_seed


class ObserverError(Exception):
    pass


# -- random guess attack ----------------------------------------------------

def random_guess_attack(k: int, library_n, trials: int = 100_000,
                        seed: int = 0) -> float:
    """Empirical success rate of guessing the protected stream.

    The attacker picks one of k images uniformly; success means hitting
    the actual image, or a sybil whose replayed secret coincides with the
    actual one among library_n plausible secrets (library_n may be None
    or inf for an unbounded secret set).
    """
    if trials < 10_000:
        raise ObserverError("need at least 1e4 trials")
    rng = np.random.default_rng(derive_seed(seed, "guess-attack"))
    picked_actual = rng.integers(0, k, size=trials) == 0
    if library_n is None or library_n == math.inf:
        coincide = np.zeros(trials, dtype=bool)
    else:
        actual_secret = rng.integers(0, library_n, size=trials)
        replayed = rng.integers(0, library_n, size=trials)
        coincide = replayed == actual_secret
    return float(np.mean(picked_actual | (~picked_actual & coincide)))


def guess_formula(k: int, library_n) -> float:
    if library_n is None or library_n == math.inf:
        return 1.0 / k
    return 1.0 / k + (k - 1) / k * (1.0 / library_n)


# -- anonymity across shuffling rounds ------------------------------------------

@dataclass(slots=True)
class AnonymityReport:
    r: int                        # shuffle rounds walked back
    participants: list            # S_i of the r-th round (empty at r=0)
    m: int                        # |union of S_1..S_r|
    p: float                      # 1/m


def anonymity_curve(events, image_name: str) -> list[AnonymityReport]:
    """P(r) for one image by backward lineage-graph traversal.

    Walking back from the image, every shuffle whose products intersect
    the probable-ancestor frontier counts as one round and contributes
    its participant set; forks reveal ancestry exactly and only move the
    frontier. P(0) = 1 and P never increases with r.
    """
    frontier = {image_name}
    union: set = set()
    reports = [AnonymityReport(0, [], 1, 1.0)]
    for ev in reversed(list(events)):
        products = set(ev.products)
        if not (frontier & products):
            continue
        if ev.kind == "shuffle":
            union |= set(ev.participants)
            frontier = (frontier - products) | set(ev.participants)
            m = max(1, len(union))
            reports.append(AnonymityReport(
                len(reports), sorted(ev.participants), m, 1.0 / m))
        elif ev.kind == "fork":
            frontier = (frontier - products) | set(ev.participants)
    return reports


# -- extinct lineage audit ---------------------------------------------------------

@dataclass(slots=True)
class AuditVerdict:
    passed: bool
    k: int
    events_checked: int
    first_violation: dict | None = None


def extinct_lineage_audit(events) -> AuditVerdict:
    """Adversarial replay of the lineage log.

    Tracks, for every living image, the set of initial images it could
    stem from. The defense must keep every initial lineage alive and at
    least K images living at every historical prefix; any prefix where
    that fails would let the OS narrow the candidate set.
    """
    events = list(events)
    if not events or events[0].kind != "init":
        raise ObserverError("log must start with an init event")
    initials = list(events[0].products)
    k = len(initials)
    living = set(initials)
    origins = {v: frozenset([v]) for v in initials}

    def alive_lineages() -> int:
        u: set = set()
        for v in living:
            u |= origins[v]
        return len(u)

    for idx, ev in enumerate(events[1:], start=1):
        if ev.kind == "fork":
            src = ev.participants[0]
            base = origins[src]
            living.discard(src)
            for p in ev.products:
                origins[p] = base
                living.add(p)
        elif ev.kind == "shuffle":
            merged: frozenset = frozenset().union(
                *(origins[v] for v in ev.participants))
            living -= set(ev.participants)
            for p in ev.products:
                origins[p] = merged
                living.add(p)
        elif ev.kind == "retire":
            living -= set(ev.participants)
        elif ev.kind == "init":
            raise ObserverError("duplicate init event")
        alive = alive_lineages()
        if alive < k or len(living) < k:
            return AuditVerdict(False, k, idx, {
                "event_index": idx, "kind": ev.kind, "time": ev.time,
                "alive_lineages": alive, "living_images": len(living)})
    return AuditVerdict(True, k, len(events))


def observation_windows(events, end_time: int) -> dict[str, int]:
    """How long each disk name stayed continuously observable."""
    born: dict[str, int] = {}
    windows: dict[str, int] = {}
    for ev in events:
        for v in ev.participants:
            if v in born:
                windows[v] = ev.time - born.pop(v)
        for v in ev.products:
            born[v] = ev.time
    for v, t0 in born.items():
        windows[v] = end_time - t0
    return windows


# -- timing mutual information ---------------------------------------------------------

def _bin_indices(values, bins: int):
    arr = np.asarray(values, dtype=float)
    uniq = np.unique(arr)
    if len(uniq) <= bins:
        return np.searchsorted(uniq, arr), len(uniq)
    lo, hi = float(arr.min()), float(arr.max())
    if hi == lo:
        return np.zeros(len(arr), dtype=int), 1
    idx = ((arr - lo) / (hi - lo) * bins).astype(int)
    return np.minimum(idx, bins - 1), bins


def mutual_information(xs, ys, bins: int = 32,
                       min_samples: int = 1000) -> float:
    """Histogram MI estimate in bits, Miller-Madow corrected, clamped
    non-negative. Symmetric in its arguments."""
    if len(xs) != len(ys):
        raise ObserverError("inputs must be paired")
    n = len(xs)
    if n < min_samples:
        raise ObserverError(f"need >= {min_samples} paired samples, got {n}")
    ix, nx = _bin_indices(xs, bins)
    iy, ny = _bin_indices(ys, bins)
    joint = np.zeros((nx, ny))
    np.add.at(joint, (ix, iy), 1.0)
    pxy = joint / n
    px = pxy.sum(axis=1, keepdims=True)
    py = pxy.sum(axis=0, keepdims=True)
    mask = pxy > 0
    mi = float(np.sum(pxy[mask] * np.log2(pxy[mask] / (px @ py)[mask])))
    mx = int(np.count_nonzero(px))
    my = int(np.count_nonzero(py))
    mxy = int(np.count_nonzero(pxy))
    mi += ((mx - 1) + (my - 1) - (mxy - 1)) / (2.0 * n * math.log(2))
    return max(0.0, mi)


# -- observation log ingestion -------------------------------------------------------------

def load_observation_lines(lines) -> list[dict]:
    records = []
    for line in lines:
        line = line.strip()
        if line:
            records.append(json.loads(line))
    return records


def metadata_delays(records) -> list[tuple[str, float]]:
    """(image, reported delay) pairs for metadata-class accesses."""
    out = []
    for r in records:
        if r.get("c") in ("metadata", "mixed") and r.get("d") is not None:
            out.append((r["img"], float(r["d"])))
    return out
