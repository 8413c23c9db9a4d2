"""Evaluation: ROI clipping, Chamfer distance (hash-accelerated with a
brute-force twin), ROUGE-L for text, and the evaluation report.

Chamfer convention: the sum of the two directed mean nearest-neighbour
distances, in metres.  Clouds are ROI-clipped before comparison; an empty
cloud is an error, never a silent zero.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np


class EmptyCloudError(ValueError):
    pass


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class Roi:
    """Closed intervals in metres; boundary points are kept."""

    x: tuple
    y: tuple
    z: tuple

    def contains(self, points: np.ndarray) -> np.ndarray:
        return ((points[:, 0] >= self.x[0]) & (points[:, 0] <= self.x[1])
                & (points[:, 1] >= self.y[0]) & (points[:, 1] <= self.y[1])
                & (points[:, 2] >= self.z[0]) & (points[:, 2] <= self.z[1]))


def default_roi(extent: float) -> Roi:
    """Planar bounds at 80% of the world extent, height band [-3, 5] m."""
    r = 0.8 * extent
    return Roi(x=(-r, r), y=(-r, r), z=(-3.0, 5.0))


def full_roi() -> Roi:
    inf = float("inf")
    return Roi(x=(-inf, inf), y=(-inf, inf), z=(-inf, inf))


def roi_filter(points: np.ndarray, roi: Roi) -> np.ndarray:
    if points.ndim != 2 or points.shape[1] != 3:
        raise MetricsError(f"expected (N,3) points, got {points.shape}")
    return points[roi.contains(points)]


# --------------------------------------------------------------------------
# chamfer distance
# --------------------------------------------------------------------------

class SpatialHash:
    """Uniform-grid index over a point cloud for exact nearest neighbours."""

    def __init__(self, points: np.ndarray, cell: float | None = None,
                 target_per_cell: float = 16.0):
        if points.shape[0] == 0:
            raise EmptyCloudError("cannot index an empty cloud")
        self.points = points
        lo = points.min(axis=0)
        hi = points.max(axis=0)
        if cell is None:
            span = float(np.max(hi - lo))
            n_cells = max(np.cbrt(points.shape[0] / target_per_cell), 1.0)
            cell = max(span / n_cells, 1e-6)
        self.cell = cell
        self.origin = lo
        coords = np.floor((points - lo) / cell).astype(np.int64)
        self.max_coord = coords.max(axis=0)
        buckets: dict = {}
        for i, key in enumerate(map(tuple, coords)):
            buckets.setdefault(key, []).append(i)
        self.buckets = {k: np.asarray(v) for k, v in buckets.items()}

    def _shell_cells(self, center, r):
        """Cells at Chebyshev radius r around center, clipped to the occupied
        bounding box, each yielded exactly once."""
        cx, cy, cz = center
        mx, my, mz = (int(v) for v in self.max_coord)

        def xr(a, b):
            return range(max(a, 0), min(b, mx) + 1)

        def yr(a, b):
            return range(max(a, 0), min(b, my) + 1)

        def zr(a, b):
            return range(max(a, 0), min(b, mz) + 1)

        if r == 0:
            if 0 <= cx <= mx and 0 <= cy <= my and 0 <= cz <= mz:
                yield (cx, cy, cz)
            return
        for z in (cz - r, cz + r):                      # top and bottom faces
            if 0 <= z <= mz:
                for x in xr(cx - r, cx + r):
                    for y in yr(cy - r, cy + r):
                        yield (x, y, z)
        for y in (cy - r, cy + r):                      # front and back strips
            if 0 <= y <= my:
                for x in xr(cx - r, cx + r):
                    for z in zr(cz - r + 1, cz + r - 1):
                        yield (x, y, z)
        for x in (cx - r, cx + r):                      # remaining side columns
            if 0 <= x <= mx:
                for y in yr(cy - r + 1, cy + r - 1):
                    for z in zr(cz - r + 1, cz + r - 1):
                        yield (x, y, z)

    def nearest_distances(self, queries: np.ndarray) -> np.ndarray:
        """Exact nearest-neighbour distance for each query point.

        Queries sharing a grid cell are processed together; shells are
        expanded until every query in the group is provably settled.
        """
        if queries.ndim != 2 or queries.shape[1] != 3:
            raise MetricsError("queries must be (N,3)")
        out = np.empty(queries.shape[0], dtype=np.float64)
        coords = np.floor((queries - self.origin) / self.cell).astype(np.int64)
        groups: dict = {}
        for i, key in enumerate(map(tuple, coords)):
            groups.setdefault(key, []).append(i)
        for center, qlist in groups.items():
            qidx = np.asarray(qlist)
            qs = queries[qidx]
            coord = np.asarray(center)
            # closest possible occupied cell is the box clamp of this cell
            k_start = int(np.max(np.maximum(
                np.maximum(-coord, coord - self.max_coord), 0)))
            r_last = int(np.max(np.maximum(coord, self.max_coord - coord)))
            best_sq = np.full(qidx.shape[0], np.inf)
            worst = np.inf
            for r in range(k_start, r_last + 1):
                # points in unvisited cells are at least (r - 1) * cell away
                if worst < np.inf and (r - 1) * self.cell > math.sqrt(worst):
                    break
                idx = []
                for cellkey in self._shell_cells(center, r):
                    hit = self.buckets.get(cellkey)
                    if hit is not None:
                        idx.append(hit)
                if idx:
                    cand = self.points[np.concatenate(idx)]
                    chunk = max(1, 2_000_000 // cand.shape[0])
                    for s in range(0, qs.shape[0], chunk):
                        d = qs[s:s + chunk, None, :] - cand[None, :, :]
                        sq = d[..., 0] ** 2 + d[..., 1] ** 2 + d[..., 2] ** 2
                        best_sq[s:s + chunk] = np.minimum(best_sq[s:s + chunk],
                                                          sq.min(axis=1))
                    worst = float(best_sq.max())
            out[qidx] = np.sqrt(best_sq)
        return out

    def nearest_distance(self, query: np.ndarray) -> float:
        return float(self.nearest_distances(query[None, :])[0])


def _check_clouds(p: np.ndarray, q: np.ndarray) -> None:
    for name, cloud in (("first", p), ("second", q)):
        if cloud.ndim != 2 or cloud.shape[1] != 3:
            raise MetricsError(f"{name} cloud must be (N,3)")
        if cloud.shape[0] == 0:
            raise EmptyCloudError(f"{name} cloud is empty")


def _directed_brute(p: np.ndarray, q: np.ndarray, chunk: int = 512) -> float:
    total = 0.0
    for start in range(0, p.shape[0], chunk):
        block = p[start:start + chunk]
        d = block[:, None, :] - q[None, :, :]
        sq = (d ** 2).sum(axis=-1)
        total += np.sqrt(sq.min(axis=1)).sum()
    return total / p.shape[0]


def chamfer_brute(p: np.ndarray, q: np.ndarray) -> float:
    """O(|P| |Q|) oracle: sum of both directed mean NN distances."""
    _check_clouds(p, q)
    return _directed_brute(p, q) + _directed_brute(q, p)


def _directed_hash(p: np.ndarray, q: np.ndarray) -> float:
    return float(SpatialHash(q).nearest_distances(p).mean())


def chamfer(p: np.ndarray, q: np.ndarray) -> float:
    """Spatial-hash accelerated Chamfer distance (exact nearest neighbours)."""
    _check_clouds(p, q)
    return _directed_hash(p, q) + _directed_hash(q, p)


# --------------------------------------------------------------------------
# text metrics
# --------------------------------------------------------------------------

def _lcs_len(a: list, b: list) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0] * (len(b) + 1)
        for j, y in enumerate(b, 1):
            cur[j] = prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1])
        prev = cur
    return prev[-1]


def rouge_l(candidate: str, reference: str) -> float:
    """ROUGE-L F1 (beta = 1) over whitespace tokens."""
    ref = reference.split()
    cand = candidate.split()
    if not ref:
        warnings.warn("empty reference in rouge_l; returning 0")
        return 0.0
    if not cand:
        return 0.0
    lcs = _lcs_len(cand, ref)
    if lcs == 0:
        return 0.0
    precision = lcs / len(cand)
    recall = lcs / len(ref)
    return 2.0 * precision * recall / (precision + recall)


# --------------------------------------------------------------------------
# evaluation report
# --------------------------------------------------------------------------

@dataclass
class EvalReport:
    config_digest: str
    stage: int
    n_frames: int
    chamfer_by_horizon: dict = field(default_factory=dict)
    qa_accuracy: float | None = None
    rouge_mean: float | None = None

    def to_csv(self) -> str:
        lines = ["metric,value"]
        lines.append(f"config_digest,{self.config_digest}")
        lines.append(f"stage,{self.stage}")
        lines.append(f"eval_frames,{self.n_frames}")
        for h in sorted(self.chamfer_by_horizon):
            lines.append(f"chamfer_{h}s,{self.chamfer_by_horizon[h]:.6f}")
        if self.qa_accuracy is not None:
            lines.append(f"qa_accuracy,{self.qa_accuracy:.6f}")
        if self.rouge_mean is not None:
            lines.append(f"rouge_l,{self.rouge_mean:.6f}")
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        rows = [("config", self.config_digest), ("stage", str(self.stage)),
                ("frames", str(self.n_frames))]
        for h in sorted(self.chamfer_by_horizon):
            rows.append((f"chamfer @ {h}s", f"{self.chamfer_by_horizon[h]:.4f} m"))
        if self.qa_accuracy is not None:
            rows.append(("qa accuracy", f"{self.qa_accuracy:.4f}"))
        if self.rouge_mean is not None:
            rows.append(("rouge-l", f"{self.rouge_mean:.4f}"))
        width = max(len(k) for k, _v in rows)
        body = "\n".join(f"{k.ljust(width)}  {v}" for k, v in rows)
        return body + "\n"


def evaluate(checkpoint_path, dataset_path, roi: str = "default",
             csv_path=None) -> EvalReport:
    """Load a checkpoint + dataset and score what the stage supports."""
    from .training import evaluate_checkpoint   # local import: trainer drives the model
    report = evaluate_checkpoint(checkpoint_path, dataset_path, roi)
    if csv_path is not None:
        with open(csv_path, "w", encoding="utf-8") as fh:
            fh.write(report.to_csv())
    return report
