"""Image superpixels, LiDAR superpoints, ground removal and density clustering."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .geom import FrameSequence, PairSet, PointCloud

UNLABELED = 65535
NOISE = -1


@dataclass
class LabelMap:
    """Dense raster of segment ids 0..num_segments-1; ``unlabeled`` marks holes."""

    ids: np.ndarray
    num_segments: int
    unlabeled: int = UNLABELED

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.ids.ndim != 2:
            raise ValueError("label map must be 2-D")

    @property
    def height(self) -> int:
        return self.ids.shape[0]

    @property
    def width(self) -> int:
        return self.ids.shape[1]

    @classmethod
    def from_raw(cls, raw: np.ndarray, unlabeled: int | None = UNLABELED) -> "LabelMap":
        """Relabel arbitrary ids to a contiguous range (in increasing raw order)."""
        raw = np.asarray(raw, dtype=np.int64)
        hole = np.zeros(raw.shape, bool) if unlabeled is None else raw == unlabeled
        vals, inv = np.unique(raw[~hole], return_inverse=True)
        ids = np.full(raw.shape, UNLABELED, dtype=np.int64)
        ids[~hole] = inv
        return cls(ids, len(vals))

    def segment_sizes(self) -> np.ndarray:
        flat = self.ids[self.ids != self.unlabeled]
        return np.bincount(flat, minlength=self.num_segments)


# --- PGM label maps -----------------------------------------------------------

def save_labelmap(lm: LabelMap, path) -> None:
    if lm.num_segments >= UNLABELED:
        raise ValueError("too many segments for a 16-bit label map")
    header = f"P5\n{lm.width} {lm.height}\n65535\n".encode("ascii")
    Path(path).write_bytes(header + lm.ids.astype(">u2").tobytes())


def _pnm_header(data: bytes, magic: bytes):
    """Parse a binary PNM header; returns (width, height, maxval, payload offset)."""
    if not data.startswith(magic):
        raise ValueError(f"not a {magic.decode()} file")
    fields, pos = [], len(magic)
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated header")
        try:
            fields.append(int(data[start:pos]))
        except ValueError:
            raise ValueError(f"malformed header field {data[start:pos]!r}") from None
    # exactly one whitespace byte separates header from payload
    return fields[0], fields[1], fields[2], pos + 1


def load_labelmap(path) -> LabelMap:
    data = Path(path).read_bytes()
    w, h, maxval, off = _pnm_header(data, b"P5")
    if maxval != 65535:
        raise ValueError(f"label maps must use maxval 65535, got {maxval}")
    need = 2 * w * h
    if len(data) - off < need:
        raise ValueError(f"truncated payload: {len(data) - off} of {need} bytes")
    raw = np.frombuffer(data, dtype=">u2", count=w * h, offset=off).reshape(h, w)
    return LabelMap.from_raw(raw.astype(np.int64))


# --- point cloud binary ------------------------------------------------------

PC_MAGIC = b"SEALPC1\n"


def save_pointcloud(cloud: PointCloud, path) -> None:
    n, l = len(cloud), cloud.num_features
    parts = [
        PC_MAGIC,
        struct.pack("<II", n, l),
        cloud.positions.astype("<f4").tobytes(),
        cloud.features.astype("<f4").tobytes(),
    ]
    if cloud.labels is not None:
        parts += [b"\x01", cloud.labels.astype("<u2").tobytes()]
    else:
        parts.append(b"\x00")
    Path(path).write_bytes(b"".join(parts))


def load_pointcloud(path, timestamp: int = 0) -> PointCloud:
    data = Path(path).read_bytes()
    if not data.startswith(PC_MAGIC):
        raise ValueError("bad point cloud magic")
    off = len(PC_MAGIC)
    if len(data) < off + 8:
        raise ValueError("truncated point cloud header")
    n, l = struct.unpack_from("<II", data, off)
    off += 8
    need = 4 * n * 3 + 4 * n * l + 1
    if len(data) < off + need:
        raise ValueError("truncated point cloud payload")
    pos = np.frombuffer(data, "<f4", n * 3, off).reshape(n, 3).astype(np.float64)
    off += 12 * n
    feat = np.frombuffer(data, "<f4", n * l, off).reshape(n, l).astype(np.float64)
    off += 4 * n * l
    labels = None
    if data[off] == 1:
        off += 1
        if len(data) < off + 2 * n:
            raise ValueError("truncated label block")
        labels = np.frombuffer(data, "<u2", n, off).astype(np.int64)
    return PointCloud(pos, feat, labels, timestamp)


# --- SLIC ----------------------------------------------------------------------

def _seed_grid(h: int, w: int, n_segments: int):
    ny = max(1, min(h, int(round(np.sqrt(n_segments * h / w)))))
    nx = max(1, min(w, int(round(n_segments / ny))))
    ys = (np.arange(ny) + 0.5) * h / ny
    xs = (np.arange(nx) + 0.5) * w / nx
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([yy.ravel(), xx.ravel()], axis=1)


def slic(image, n_segments=150, compactness=0.2, iters=10, seed=0) -> LabelMap:
    """SLIC superpixels on an RGB image (uint8 or float in [0, 1]).

    Distance between a pixel and a cluster centre is
    ``d_rgb + (compactness / S) * d_xy`` with ``S = sqrt(H*W / n_segments)``.
    Seeds start on a regular grid and are nudged to the lowest-gradient pixel
    of their 3x3 neighbourhood; ``seed`` breaks ties in that nudge.
    """
    img = np.asarray(image)
    if img.size == 0:
        raise ValueError("empty image")
    img = img.astype(np.float64)
    if np.issubdtype(np.asarray(image).dtype, np.integer):
        img = img / 255.0
    h, w = img.shape[:2]
    if n_segments < 1:
        raise ValueError("n_segments must be >= 1")
    if n_segments > h * w:
        raise ValueError("more segments requested than pixels")
    step = np.sqrt(h * w / n_segments)

    centres = _seed_grid(h, w, n_segments)
    rng = np.random.default_rng(seed)
    gy, gx = np.gradient(img, axis=(0, 1))
    grad = (gy ** 2 + gx ** 2).sum(axis=2)
    grad = grad + rng.uniform(0, 1e-12, grad.shape)
    pos = []
    for cy, cx in centres:
        y0, x0 = int(cy), int(cx)
        ya, yb = max(0, y0 - 1), min(h, y0 + 2)
        xa, xb = max(0, x0 - 1), min(w, x0 + 2)
        win = grad[ya:yb, xa:xb]
        dy, dx = np.unravel_index(np.argmin(win), win.shape)
        pos.append((ya + dy, xa + dx))
    pos = np.array(pos, dtype=np.float64)
    colors = img[pos[:, 0].astype(int), pos[:, 1].astype(int)]

    yy, xx = np.mgrid[0:h, 0:w]
    k = len(pos)
    weight = compactness / step
    radius = int(np.ceil(step))
    labels = np.zeros((h, w), dtype=np.int64)
    for _ in range(iters):
        best = np.full((h, w), np.inf)
        for c in range(k):
            cy, cx = pos[c]
            ya, yb = max(0, int(cy) - radius), min(h, int(cy) + radius + 1)
            xa, xb = max(0, int(cx) - radius), min(w, int(cx) + radius + 1)
            patch = img[ya:yb, xa:xb]
            dc = np.sqrt(((patch - colors[c]) ** 2).sum(axis=2))
            ds = np.hypot(yy[ya:yb, xa:xb] - cy, xx[ya:yb, xa:xb] - cx)
            d = dc + weight * ds
            sub = best[ya:yb, xa:xb]
            better = d < sub
            sub[better] = d[better]
            labels[ya:yb, xa:xb][better] = c
        # pixels no window reached (only possible for tiny n) keep label 0
        flat = labels.ravel()
        cnt = np.bincount(flat, minlength=k).astype(np.float64)
        alive = cnt > 0
        for ch in range(img.shape[2]):
            s = np.bincount(flat, img[..., ch].ravel(), minlength=k)
            colors[alive, ch] = s[alive] / cnt[alive]
        pos[alive, 0] = np.bincount(flat, yy.ravel(), minlength=k)[alive] / cnt[alive]
        pos[alive, 1] = np.bincount(flat, xx.ravel(), minlength=k)[alive] / cnt[alive]

    labels = enforce_connectivity(labels, min_size=max(1, int(step * step / 4)))
    return LabelMap.from_raw(labels, unlabeled=None)


def enforce_connectivity(labels: np.ndarray, min_size: int) -> np.ndarray:
    """Split segments into 4-connected components and absorb small fragments.

    Every component keeps its own id if it has at least ``min_size`` pixels
    (or is the largest piece of its segment); smaller fragments take the id of
    the nearest surviving pixel.
    """
    labels = np.asarray(labels)
    out = np.full(labels.shape, -1, dtype=np.int64)
    nxt = 0
    for seg, sl in enumerate(ndimage.find_objects(labels + 1)):
        if sl is None:
            continue
        comp, n = ndimage.label(labels[sl] == seg)
        if n == 0:
            continue
        sizes = np.bincount(comp.ravel())[1:]
        biggest = int(np.argmax(sizes))
        region = out[sl]
        for j in range(n):
            if sizes[j] >= min_size or j == biggest:
                region[comp == j + 1] = nxt
                nxt += 1
    holes = out < 0
    if holes.any():
        _, (iy, ix) = ndimage.distance_transform_edt(holes, return_indices=True)
        out = out[iy, ix]
    return out


# --- superpoints -------------------------------------------------------------

@dataclass
class SuperpointAssignment:
    """Per-point superpoint id (``-1`` = unmatched).

    ``source_ids[s]`` is the label-map id that superpoint ``s`` came from.
    """

    ids: np.ndarray
    num_superpoints: int
    source_ids: np.ndarray

    def members(self, s: int) -> np.ndarray:
        return np.flatnonzero(self.ids == s)


def superpoints_from_pairs(pairs: PairSet, n_points: int, min_pair_count: int = 1) -> SuperpointAssignment:
    ids = np.full(n_points, -1, dtype=np.int64)
    if len(pairs) == 0:
        return SuperpointAssignment(ids, 0, np.zeros(0, dtype=np.int64))
    if pairs.point_index.max() >= n_points:
        raise ValueError("pair index beyond point count")
    sp, counts = np.unique(pairs.superpixels, return_counts=True)
    keep = sp[counts >= min_pair_count]
    remap = np.searchsorted(keep, pairs.superpixels)
    remap = np.minimum(remap, max(len(keep) - 1, 0))
    ok = len(keep) > 0
    hit = (keep[remap] == pairs.superpixels) if ok else np.zeros(len(pairs), bool)
    ids[pairs.point_index[hit]] = remap[hit]
    return SuperpointAssignment(ids, len(keep), keep.astype(np.int64))


# --- ground removal ----------------------------------------------------------

@dataclass
class PlaneModel:
    normal: np.ndarray
    offset: float
    inlier_mask: np.ndarray

    def residuals(self, points: np.ndarray) -> np.ndarray:
        return np.abs(np.asarray(points) @ self.normal + self.offset)


def _fit_plane_lsq(points: np.ndarray):
    c = points.mean(axis=0)
    _, _, vt = np.linalg.svd(points - c, full_matrices=False)
    n = vt[-1]
    n = n / np.linalg.norm(n)
    return n, -float(n @ c)


def ransac_plane(points, iters=100, inlier_threshold=0.1, seed=0) -> PlaneModel:
    """Dominant plane by 3-point RANSAC followed by a least-squares refit.

    Hypotheses are ranked by inlier count, ties by mean inlier residual.  The
    returned mask is recomputed against the refitted plane.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n_pts = len(pts)
    if n_pts < 3:
        raise ValueError("RANSAC needs at least 3 points")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(iters):
        a, b, c = pts[rng.choice(n_pts, 3, replace=False)]
        normal = np.cross(b - a, c - a)
        norm = np.linalg.norm(normal)
        if norm < 1e-12:
            continue
        normal = normal / norm
        res = np.abs((pts - a) @ normal)
        mask = res <= inlier_threshold
        score = (int(mask.sum()), -float(res[mask].mean()))
        if best is None or score > best[0]:
            best = (score, mask)
    if best is None:
        raise ValueError("degenerate input: every sample was collinear")
    inliers = pts[best[1]]
    if len(inliers) >= 3:
        normal, offset = _fit_plane_lsq(inliers)
    else:
        a, b, c = inliers
        normal = np.cross(b - a, c - a)
        normal /= np.linalg.norm(normal)
        offset = -float(normal @ a)
    if normal[2] < 0:
        normal, offset = -normal, -offset
    mask = np.abs(pts @ normal + offset) <= inlier_threshold
    return PlaneModel(normal, offset, mask)


# --- density clustering ------------------------------------------------------

@dataclass
class SegmentLabels:
    ids: np.ndarray
    num_segments: int

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)

    def __len__(self):
        return len(self.ids)

    def present(self) -> np.ndarray:
        return np.unique(self.ids[self.ids != NOISE])


def cluster(points, eps=0.5, min_pts=5) -> SegmentLabels:
    """DBSCAN with closed eps-balls (``dist <= eps``, the point itself counts).

    Cores form clusters through core-core adjacency.  A border point joins the
    cluster of its lowest-index core neighbour.  Cluster ids are numbered by the
    smallest point index they contain.
    """
    if eps <= 0 or min_pts < 1:
        raise ValueError("need eps > 0 and min_pts >= 1")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(pts)
    ids = np.full(n, NOISE, dtype=np.int64)
    if n == 0:
        return SegmentLabels(ids, 0)
    tree = cKDTree(pts)
    pairs = tree.query_pairs(eps, output_type="ndarray")
    deg = np.ones(n, dtype=np.int64)
    np.add.at(deg, pairs[:, 0], 1)
    np.add.at(deg, pairs[:, 1], 1)
    core = deg >= min_pts
    if not core.any():
        return SegmentLabels(ids, 0)

    both = core[pairs[:, 0]] & core[pairs[:, 1]]
    cc = pairs[both]
    graph = coo_matrix((np.ones(len(cc)), (cc[:, 0], cc[:, 1])), shape=(n, n))
    _, comp = connected_components(graph, directed=False)
    core_idx = np.flatnonzero(core)
    # renumber components by first core index
    order = {}
    for i in core_idx:
        order.setdefault(comp[i], len(order))
    ids[core_idx] = [order[comp[i]] for i in core_idx]

    # border points: lowest-index core neighbour
    first_core = np.full(n, n, dtype=np.int64)
    for a, b in ((0, 1), (1, 0)):
        m = core[pairs[:, b]] & ~core[pairs[:, a]]
        np.minimum.at(first_core, pairs[m, a], pairs[m, b])
    border = (~core) & (first_core < n)
    ids[border] = ids[first_core[border]]
    # renumber so cluster ids follow the smallest member index
    seen = {}
    for i in np.flatnonzero(ids != NOISE):
        seen.setdefault(ids[i], len(seen))
    lut = np.array([seen[k] for k in range(len(seen))], dtype=np.int64)
    ids[ids != NOISE] = lut[ids[ids != NOISE]]
    return SegmentLabels(ids, len(seen))


def segment_views(seq: FrameSequence, aggregated: SegmentLabels) -> list[SegmentLabels]:
    """Split labels of an aggregated cloud back onto the individual frames."""
    if len(aggregated) != seq.total_points:
        raise ValueError(f"{len(aggregated)} labels for {seq.total_points} aggregated points")
    return [
        SegmentLabels(aggregated.ids[seq.offsets[k]:seq.offsets[k + 1]].copy(), aggregated.num_segments)
        for k in range(len(seq.frames))
    ]


def remove_ground_and_cluster(points, ground_threshold=0.1, ransac_iters=100, eps=0.5, min_pts=5, seed=0):
    """RANSAC ground removal then DBSCAN; ground points come back as NOISE."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    ids = np.full(len(pts), NOISE, dtype=np.int64)
    if len(pts) < 3:
        return SegmentLabels(ids, 0), None
    plane = ransac_plane(pts, ransac_iters, ground_threshold, seed)
    rest = np.flatnonzero(~plane.inlier_mask)
    seg = cluster(pts[rest], eps, min_pts)
    ids[rest] = seg.ids
    return SegmentLabels(ids, seg.num_segments), plane
