"""Rigid transforms, pinhole intrinsics and the LiDAR-to-pixel projection chain.

Conventions
-----------
* Ego frame: x forward, y left, z up.
* Camera frame: x right, y down, z along the optical axis.
* Pixel (u, v): u grows along the image width, v along the height, origin at
  the top-left corner of the top-left pixel.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

EPS_DEPTH = 1e-6


@dataclass(frozen=True)
class RigidTransform:
    """Maps x -> rotation @ x + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_yaw(cls, yaw: float, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls(rot_z(yaw), translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def is_valid(self, tol: float = 1e-9) -> bool:
        r = self.rotation
        return bool(
            np.allclose(r.T @ r, np.eye(3), atol=tol, rtol=0)
            and abs(np.linalg.det(r) - 1.0) <= tol
            and np.all(np.isfinite(self.translation))
        )


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Transform equivalent to applying ``b`` first, then ``a``."""
    return RigidTransform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def rot_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


# Rotation taking ego-frame vectors (x fwd, y left, z up) into a forward-looking
# camera frame (x right, y down, z fwd).
EGO_TO_CAMERA_AXES = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class CalibrationChain:
    """lidar -> ego(t_l) -> global -> ego(t_c) -> camera -> pixels."""

    intrinsics: CameraIntrinsics
    lidar_to_ego_tl: RigidTransform
    ego_tl_to_global: RigidTransform
    global_to_ego_tc: RigidTransform
    ego_tc_to_camera: RigidTransform

    def __post_init__(self):
        for name in self.transform_names():
            if not getattr(self, name).is_valid():
                raise ValueError(f"{name} is not a proper rigid transform")

    @staticmethod
    def transform_names() -> tuple[str, ...]:
        return ("lidar_to_ego_tl", "ego_tl_to_global", "global_to_ego_tc", "ego_tc_to_camera")

    @classmethod
    def simple(cls, intrinsics: CameraIntrinsics, lidar_to_camera: RigidTransform | None = None):
        """Chain whose only non-identity link is the final ego->camera transform."""
        ident = RigidTransform.identity()
        return cls(intrinsics, ident, ident, ident, lidar_to_camera or ident)

    def lidar_to_camera(self) -> RigidTransform:
        t = compose(self.ego_tl_to_global, self.lidar_to_ego_tl)
        t = compose(self.global_to_ego_tc, t)
        return compose(self.ego_tc_to_camera, t)

    def world_to_camera(self) -> RigidTransform:
        return compose(self.ego_tc_to_camera, self.global_to_ego_tc)


def project_points(chain: CalibrationChain, points: np.ndarray):
    """Vectorised projection.

    Returns ``(uv, depth, valid)``: continuous pixel coordinates (N x 2), camera
    depth (N,) and the in-view mask (N,).  Entries of ``uv`` where ``valid`` is
    False are meaningless.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    cam = chain.lidar_to_camera().apply(points)
    z = cam[:, 2]
    k = chain.intrinsics
    with np.errstate(divide="ignore", invalid="ignore"):
        pix = cam @ k.matrix.T
        uv = pix[:, :2] / z[:, None]
    valid = z > EPS_DEPTH
    valid &= (uv[:, 0] >= 0) & (uv[:, 0] < k.width) & (uv[:, 1] >= 0) & (uv[:, 1] < k.height)
    return uv, z, valid


def project_point(chain: CalibrationChain, p):
    """Project one point; ``None`` when behind the camera or outside the image."""
    uv, z, valid = project_points(chain, np.asarray(p, dtype=np.float64).reshape(1, 3))
    if not valid[0]:
        return None
    return float(uv[0, 0]), float(uv[0, 1]), float(z[0])


@dataclass
class PointCloud:
    positions: np.ndarray
    features: np.ndarray
    labels: np.ndarray | None = None
    timestamp: int = 0
    # Simulator-side extras; not part of the on-disk format.
    instances: np.ndarray | None = None
    rings: np.ndarray | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        feats = np.asarray(self.features, dtype=np.float64)
        if n == 0:
            self.features = feats.reshape(0, feats.shape[-1] if feats.ndim == 2 else 1)
        else:
            self.features = feats.reshape(n, -1)
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("point positions must be finite")
        for name in ("labels", "instances", "rings"):
            arr = getattr(self, name)
            if arr is not None:
                arr = np.asarray(arr).astype(np.int64).reshape(n)
                setattr(self, name, arr)

    def __len__(self):
        return len(self.positions)

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    def subset(self, index) -> "PointCloud":
        pick = lambda a: None if a is None else a[index]
        return PointCloud(
            self.positions[index], self.features[index], pick(self.labels),
            self.timestamp, pick(self.instances), pick(self.rings),
        )

    def with_positions(self, positions: np.ndarray) -> "PointCloud":
        return PointCloud(positions, self.features, self.labels, self.timestamp, self.instances, self.rings)


@dataclass
class FrameSequence:
    frames: list[PointCloud]
    ego_poses: list[RigidTransform]
    offsets: np.ndarray = field(init=False)

    def __post_init__(self):
        if len(self.frames) != len(self.ego_poses):
            raise ValueError(f"{len(self.ego_poses)} poses for {len(self.frames)} frames")
        sizes = np.array([len(f) for f in self.frames], dtype=np.int64)
        self.offsets = np.concatenate([[0], np.cumsum(sizes)])

    @property
    def total_points(self) -> int:
        return int(self.offsets[-1])


def aggregate_frames(seq: FrameSequence):
    """Concatenate all frames in the global frame.

    Returns ``(cloud, index_map)`` where ``index_map[j] = (frame, local_index)``
    for aggregated point ``j``.
    """
    if len(seq.frames) != len(seq.ego_poses):
        raise ValueError("pose count does not match frame count")
    positions, features, labels, instances = [], [], [], []
    index_map = np.zeros((seq.total_points, 2), dtype=np.int64)
    has_labels = all(f.labels is not None for f in seq.frames)
    has_inst = all(f.instances is not None for f in seq.frames)
    for k, (frame, pose) in enumerate(zip(seq.frames, seq.ego_poses)):
        positions.append(pose.apply(frame.positions))
        features.append(frame.features)
        lo, hi = seq.offsets[k], seq.offsets[k + 1]
        index_map[lo:hi, 0] = k
        index_map[lo:hi, 1] = np.arange(hi - lo)
        if has_labels:
            labels.append(frame.labels)
        if has_inst:
            instances.append(frame.instances)
    n_feat = seq.frames[0].num_features if seq.frames else 0
    cloud = PointCloud(
        np.concatenate(positions) if positions else np.zeros((0, 3)),
        np.concatenate(features) if features else np.zeros((0, n_feat)),
        np.concatenate(labels) if has_labels and labels else None,
        seq.frames[0].timestamp if seq.frames else 0,
        np.concatenate(instances) if has_inst and instances else None,
    )
    return cloud, index_map


@dataclass
class PairSet:
    """Point/pixel correspondences for one camera.

    ``pixels`` holds integer (u, v) = (column, row); ``superpixels`` the label
    map id found at that pixel.
    """

    point_index: np.ndarray
    pixels: np.ndarray
    superpixels: np.ndarray

    def __post_init__(self):
        self.point_index = np.asarray(self.point_index, dtype=np.int64).reshape(-1)
        self.pixels = np.asarray(self.pixels, dtype=np.int64).reshape(-1, 2)
        self.superpixels = np.asarray(self.superpixels, dtype=np.int64).reshape(-1)
        if not (len(self.point_index) == len(self.pixels) == len(self.superpixels)):
            raise ValueError("pair arrays differ in length")

    def __len__(self):
        return len(self.point_index)

    @classmethod
    def empty(cls) -> "PairSet":
        return cls(np.zeros(0), np.zeros((0, 2)), np.zeros(0))

    def subset(self, index) -> "PairSet":
        return PairSet(self.point_index[index], self.pixels[index], self.superpixels[index])


def build_pairs(cloud: PointCloud, chain: CalibrationChain, labelmap) -> PairSet:
    k = chain.intrinsics
    if (labelmap.width, labelmap.height) != (k.width, k.height):
        raise ValueError(
            f"label map is {labelmap.width}x{labelmap.height}, "
            f"intrinsics expect {k.width}x{k.height}"
        )
    uv, _, valid = project_points(chain, cloud.positions)
    idx = np.flatnonzero(valid)
    pix = np.floor(uv[idx]).astype(np.int64)
    # floor() of a value just below width can round up in float64
    pix[:, 0] = np.minimum(pix[:, 0], k.width - 1)
    pix[:, 1] = np.minimum(pix[:, 1], k.height - 1)
    sp = labelmap.ids[pix[:, 1], pix[:, 0]].astype(np.int64)
    keep = sp != labelmap.unlabeled
    return PairSet(idx[keep], pix[keep], sp[keep])


# --- calibration file -------------------------------------------------------

def _floats(text: str, count: int, what: str) -> np.ndarray:
    vals = np.array([float(x) for x in text.split()])
    if vals.size != count:
        raise ValueError(f"{what}: expected {count} values, got {vals.size}")
    return vals


def load_calibration(path) -> CalibrationChain:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",), comment_prefixes=("#",))
    with open(path) as fh:
        parser.read_file(fh)
    if "intrinsics" not in parser:
        raise ValueError("calibration file lacks an [intrinsics] section")
    s = parser["intrinsics"]
    intr = CameraIntrinsics(
        float(s["fx"]), float(s["fy"]), float(s["cx"]), float(s["cy"]),
        int(s["width"]), int(s["height"]),
    )
    transforms = {}
    for name in CalibrationChain.transform_names():
        key = f"extrinsic.{name}"
        if key in parser:
            sec = parser[key]
            r = _floats(sec["r"], 9, f"{key}.r").reshape(3, 3)
            t = _floats(sec["t"], 3, f"{key}.t")
            transforms[name] = RigidTransform(r, t)
        else:
            transforms[name] = RigidTransform.identity()
    return CalibrationChain(intr, **transforms)


def save_calibration(chain: CalibrationChain, path) -> None:
    k = chain.intrinsics
    lines = [
        "# camera calibration",
        "[intrinsics]",
        f"fx = {k.fx!r}", f"fy = {k.fy!r}", f"cx = {k.cx!r}", f"cy = {k.cy!r}",
        f"width = {k.width}", f"height = {k.height}",
    ]
    for name in CalibrationChain.transform_names():
        t = getattr(chain, name)
        lines += [
            "",
            f"[extrinsic.{name}]",
            "r = " + " ".join(repr(float(x)) for x in t.rotation.ravel()),
            "t = " + " ".join(repr(float(x)) for x in t.translation),
        ]
    Path(path).write_text("\n".join(lines) + "\n")
