"""Contrastive objectives: superpixel-driven cross-modal loss, symmetric
temporal superpoint consistency and the point-to-segment regulariser."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .nn import Tensor
from .partition import NOISE, SegmentLabels


@dataclass
class LossConfig:
    temperature: float = 0.07
    w_vfm: float = 1.0
    w_tmp: float = 1.0
    w_p2s: float = 1.0
    temporal_offset: int = 1

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if min(self.w_vfm, self.w_tmp, self.w_p2s) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.temporal_offset < 1:
            raise ValueError("temporal offset must be >= 1")


def info_nce(q, k, tau: float) -> Tensor:
    """Mean over anchors i of ``-log softmax_j(<q_i, k_j> / tau)[i]``."""
    q, k = nn.as_tensor(q), nn.as_tensor(k)
    if tau <= 0:
        raise ValueError("temperature must be positive")
    m = q.shape[0]
    if m == 0:
        raise ValueError("info_nce needs at least one pair")
    if k.shape[0] != m:
        raise ValueError(f"{m} anchors but {k.shape[0]} keys")
    logits = nn.scale(nn.matmul(q, nn.transpose(k)), 1.0 / tau)
    return nn.cross_entropy(logits, np.arange(m))


def _segment_contrast(points, targets, point_groups, num_groups, tau) -> Tensor:
    """Every point scores against all target rows; the positive is its own
    group.  Per-point terms are averaged inside each group, then over groups."""
    logits = nn.scale(nn.matmul(points, nn.transpose(targets)), 1.0 / tau)
    per_point = nn.add(nn.logsumexp(logits), nn.scale(nn.pick(logits, point_groups), -1.0))
    per_group = nn.pool_by_group(nn.reshape(per_point, (-1, 1)), point_groups, num_groups, "mean")
    return nn.mean_all(per_group)


def _compact(ids: np.ndarray, keep: np.ndarray):
    """Rows whose id is in ``keep`` and their position within ``keep``."""
    rows = np.flatnonzero(np.isin(ids, keep))
    return rows, np.searchsorted(keep, ids[rows])


def pooled_pairs(point_feats, pixel_feats, point_groups, pixel_groups):
    """Mean-pool pixel rows into Q and point rows into K by shared group id.

    ``point_groups`` / ``pixel_groups`` give each row's superpixel id, ``-1``
    for rows outside every superpixel.  Only ids present on both sides are
    kept, in increasing id order.
    """
    point_groups = np.asarray(point_groups, dtype=np.int64)
    pixel_groups = np.asarray(pixel_groups, dtype=np.int64)
    ids = np.intersect1d(point_groups[point_groups >= 0], pixel_groups[pixel_groups >= 0])
    if len(ids) == 0:
        raise ValueError("no superpixel has both points and pixels")
    prow, pg = _compact(point_groups, ids)
    xrow, xg = _compact(pixel_groups, ids)
    k = nn.pool_by_group(nn.take_rows(point_feats, prow), pg, len(ids), "mean")
    q = nn.pool_by_group(nn.take_rows(pixel_feats, xrow), xg, len(ids), "mean")
    return q, k


def loss_vfm(point_feats, pixel_feats, point_groups, pixel_groups, tau: float) -> Tensor:
    """Cross-modal contrast between superpixel (Q) and superpoint (K) embeddings,
    both re-normalised after pooling."""
    q, k = pooled_pairs(point_feats, pixel_feats, point_groups, pixel_groups)
    return info_nce(nn.l2_normalize(q), nn.l2_normalize(k), tau)


def _directional(src, src_seg, dst, dst_seg, shared, tau):
    srow, sg = _compact(src_seg, shared)
    drow, dg = _compact(dst_seg, shared)
    targets = nn.pool_by_group(nn.take_rows(dst, drow), dg, len(shared), "mean")
    return _segment_contrast(nn.take_rows(src, srow), targets, sg, len(shared), tau)


def shared_segments(seg_a: SegmentLabels, seg_b: SegmentLabels) -> np.ndarray:
    return np.intersect1d(seg_a.present(), seg_b.present())


def loss_temporal(feats_t, feats_tn, seg_t: SegmentLabels, seg_tn: SegmentLabels, tau: float) -> Tensor:
    """Symmetric temporal consistency: L(t -> t+n) + L(t+n -> t).

    Points of one frame are pulled toward the mean embedding of their segment
    in the other frame.  Segments seen in only one frame are ignored.
    """
    shared = shared_segments(seg_t, seg_tn)
    if len(shared) == 0:
        raise ValueError("the two frames share no segment")
    fwd = _directional(feats_t, seg_t.ids, feats_tn, seg_tn.ids, shared, tau)
    bwd = _directional(feats_tn, seg_tn.ids, feats_t, seg_t.ids, shared, tau)
    return nn.add(fwd, bwd)


def loss_p2s(feats, seg: SegmentLabels, tau: float) -> Tensor:
    """Point-to-segment regulariser against max-pooled segment features."""
    present = seg.present()
    if len(present) == 0:
        raise ValueError("no segments")
    rows, g = _compact(seg.ids, present)
    pts = nn.take_rows(feats, rows)
    centres = nn.pool_by_group(pts, g, len(present), "max")
    return _segment_contrast(pts, centres, g, len(present), tau)


def total_loss(cfg: LossConfig, parts: dict) -> Tensor:
    """Weighted sum of whichever of ``vfm``, ``tmp``, ``p2s`` are present."""
    weights = {"vfm": cfg.w_vfm, "tmp": cfg.w_tmp, "p2s": cfg.w_p2s}
    out = Tensor(0.0)
    for key, w in weights.items():
        part = parts.get(key)
        if part is None or w == 0:
            continue
        out = nn.add(out, nn.scale(part, w))
    return out


__all__ = [
    "LossConfig", "info_nce", "pooled_pairs", "loss_vfm", "loss_temporal", "loss_p2s", "total_loss",
    "shared_segments", "NOISE",
]
