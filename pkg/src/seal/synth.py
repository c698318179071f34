"""Deterministic synthetic driving scenes.

A scene is a flat ground plane (z = 0) populated with axis-aligned boxes
(vehicles, walls) and vertical cylinders (poles).  The ego vehicle follows a
list of poses; a spinning LiDAR and pinhole cameras observe the scene by ray
casting against the analytic geometry.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .geom import (
    EGO_TO_CAMERA_AXES, CalibrationChain, CameraIntrinsics, PairSet, PointCloud,
    RigidTransform, compose, rot_z,
)
from .partition import UNLABELED, LabelMap

CLASSES = ("ground", "vehicle", "pole", "wall")
GROUND, VEHICLE, POLE, WALL = range(4)
PALETTE = np.array([
    [0.42, 0.40, 0.36],
    [0.80, 0.18, 0.12],
    [0.92, 0.80, 0.20],
    [0.30, 0.45, 0.80],
])
SKY = np.array([0.62, 0.78, 0.95])
# mean reflectivity per class; deliberately overlapping
REFLECTIVITY = np.array([0.30, 0.55, 0.45, 0.40])

LIDAR_HEIGHT = 1.8
ELEVATION_RANGE = (-25.0, 3.0)


# --- scene description -----------------------------------------------------

@dataclass
class SceneObject:
    kind: str  # "box" | "cylinder"
    class_id: int
    instance: int
    lo: np.ndarray  # AABB min corner
    hi: np.ndarray  # AABB max corner

    @property
    def centre(self):
        return 0.5 * (self.lo + self.hi)

    @property
    def radius(self):
        return 0.5 * (self.hi[0] - self.lo[0])

    def overlaps(self, other: "SceneObject", margin: float = 0.0) -> bool:
        return bool(np.all(self.lo[:2] - margin < other.hi[:2]) and np.all(other.lo[:2] - margin < self.hi[:2]))


def default_trajectory(ticks=10, speed=1.5, yaw_rate=0.0, start=(-6.0, 0.0)):
    poses, x, y, yaw = [], start[0], start[1], 0.0
    for _ in range(ticks):
        poses.append(RigidTransform.from_yaw(yaw, (x, y, 0.0)))
        x += speed * math.cos(yaw)
        y += speed * math.sin(yaw)
        yaw += yaw_rate
    return poses


@dataclass
class SceneSpec:
    seed: int = 0
    extent: float = 40.0
    vehicles: int = 6
    poles: int = 6
    walls: int = 3
    trajectory: list = field(default_factory=default_trajectory)
    num_classes: int = 4

    def __post_init__(self):
        if self.extent <= 0:
            raise ValueError("extent must be positive")
        if len(self.trajectory) < 2:
            raise ValueError("trajectory needs at least two poses")
        if min(self.vehicles, self.poles, self.walls) < 0:
            raise ValueError("object counts must be non-negative")


@dataclass
class Scene:
    spec: SceneSpec
    objects: list

    def instance_class(self) -> np.ndarray:
        """class id indexed by instance id (0 = ground)."""
        out = np.zeros(len(self.objects) + 1, dtype=np.int64)
        for o in self.objects:
            out[o.instance] = o.class_id
        return out


def _path_clearance(spec: SceneSpec, obj: SceneObject, clearance: float) -> bool:
    for pose in spec.trajectory:
        p = pose.translation[:2]
        near = np.clip(p, obj.lo[:2], obj.hi[:2])
        if np.linalg.norm(p - near) < clearance:
            return False
    # also keep the segments between poses clear
    for a, b in zip(spec.trajectory[:-1], spec.trajectory[1:]):
        for s in np.linspace(0, 1, 5):
            p = (1 - s) * a.translation[:2] + s * b.translation[:2]
            near = np.clip(p, obj.lo[:2], obj.hi[:2])
            if np.linalg.norm(p - near) < clearance:
                return False
    return True


def gen_scene(spec: SceneSpec, max_tries: int = 500, clearance: float = 3.0) -> Scene:
    rng = np.random.default_rng(spec.seed)
    half = spec.extent / 2
    objects: list[SceneObject] = []
    plan = [VEHICLE] * spec.vehicles + [POLE] * spec.poles + [WALL] * spec.walls
    for cls in plan:
        for _ in range(max_tries):
            cx, cy = rng.uniform(-half, half, 2)
            if cls == VEHICLE:
                dims = np.array([rng.uniform(3.5, 5.0), rng.uniform(1.7, 2.1), rng.uniform(1.4, 1.9)])
                if rng.random() < 0.5:
                    dims[[0, 1]] = dims[[1, 0]]
                kind = "box"
            elif cls == POLE:
                r = rng.uniform(0.12, 0.25)
                dims = np.array([2 * r, 2 * r, rng.uniform(3.5, 5.0)])
                kind = "cylinder"
            else:
                length, thick = rng.uniform(6.0, 14.0), rng.uniform(0.3, 0.6)
                dims = np.array([length, thick, rng.uniform(2.5, 3.5)])
                if rng.random() < 0.5:
                    dims[[0, 1]] = dims[[1, 0]]
                kind = "box"
            lo = np.array([cx - dims[0] / 2, cy - dims[1] / 2, 0.0])
            obj = SceneObject(kind, cls, len(objects) + 1, lo, lo + dims)
            if any(obj.overlaps(o, 0.5) for o in objects):
                continue
            if not _path_clearance(spec, obj, clearance):
                continue
            objects.append(obj)
            break
        else:
            raise RuntimeError(f"could not place a {CLASSES[cls]} after {max_tries} tries")
    return Scene(spec, objects)


# --- ray casting ------------------------------------------------------------

def _safe(d):
    return np.where(np.abs(d) < 1e-300, np.where(d < 0, -1e-300, 1e-300), d)


def ray_box(origins, dirs, lo, hi):
    """Entry distance of each ray into an AABB (inf when missed or behind)."""
    inv = 1.0 / _safe(dirs)
    t1 = (lo - origins) * inv
    t2 = (hi - origins) * inv
    tn = np.minimum(t1, t2).max(axis=1)
    tf = np.maximum(t1, t2).min(axis=1)
    hit = (tn <= tf) & (tn > 1e-9)
    return np.where(hit, tn, np.inf)


def ray_cylinder(origins, dirs, cx, cy, radius, z0, z1):
    ox, oy = origins[:, 0] - cx, origins[:, 1] - cy
    dx, dy = dirs[:, 0], dirs[:, 1]
    a = dx * dx + dy * dy
    b = 2 * (ox * dx + oy * dy)
    c = ox * ox + oy * oy - radius * radius
    disc = b * b - 4 * a * c
    with np.errstate(invalid="ignore", divide="ignore"):
        t_side = (-b - np.sqrt(disc)) / (2 * a)
    z = origins[:, 2] + t_side * dirs[:, 2]
    side_ok = (disc >= 0) & (a > 1e-300) & (t_side > 1e-9) & (z >= z0) & (z <= z1)
    t = np.where(side_ok, t_side, np.inf)
    # top cap
    with np.errstate(invalid="ignore", divide="ignore"):
        t_cap = (z1 - origins[:, 2]) / _safe(dirs[:, 2])
    px = ox + t_cap * dx
    py = oy + t_cap * dy
    cap_ok = (t_cap > 1e-9) & (px * px + py * py <= radius * radius) & (origins[:, 2] > z1)
    return np.minimum(t, np.where(cap_ok, t_cap, np.inf))


def cast_rays(scene: Scene, origins, dirs, max_range=np.inf):
    """First hit along each ray: ``(distance, class, instance)``.

    Misses get distance ``inf``, class ``-1`` and instance ``-1``.
    """
    origins = np.broadcast_to(np.asarray(origins, dtype=np.float64), dirs.shape)
    n = len(dirs)
    best = np.full(n, np.inf)
    inst = np.full(n, -1, dtype=np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_ground = -origins[:, 2] / _safe(dirs[:, 2])
    g = (dirs[:, 2] < 0) & (t_ground > 1e-9)
    best[g] = t_ground[g]
    inst[g] = 0
    for obj in scene.objects:
        if obj.kind == "box":
            t = ray_box(origins, dirs, obj.lo, obj.hi)
        else:
            c = obj.centre
            t = ray_cylinder(origins, dirs, c[0], c[1], obj.radius, obj.lo[2], obj.hi[2])
        closer = t < best
        best[closer] = t[closer]
        inst[closer] = obj.instance
    miss = ~(best <= max_range)
    best[miss] = np.inf
    inst[miss] = -1
    cls = np.where(inst >= 0, scene.instance_class()[np.maximum(inst, 0)], -1)
    return best, cls, inst


# --- sensors ---------------------------------------------------------------

def lidar_mount() -> RigidTransform:
    return RigidTransform(np.eye(3), (0.0, 0.0, LIDAR_HEIGHT))


def beam_directions(beams: int, azimuth_steps: int):
    if beams == 1:
        elev = np.array([math.radians(-10.0)])
    else:
        elev = np.radians(np.linspace(*ELEVATION_RANGE, beams))
    az = 2 * np.pi * np.arange(azimuth_steps) / azimuth_steps
    e, a = np.meshgrid(elev, az, indexing="ij")
    dirs = np.stack([np.cos(e) * np.cos(a), np.cos(e) * np.sin(a), np.sin(e)], axis=-1)
    rings = np.repeat(np.arange(beams), azimuth_steps)
    return dirs.reshape(-1, 3), rings


def simulate_lidar(scene: Scene, ego_pose: RigidTransform, beams=16, azimuth_steps=360,
                   max_range=50.0, timestamp=0, intensity_noise=0.08) -> PointCloud:
    """Spinning LiDAR at ``ego_pose``; points are returned in the sensor frame.

    The single feature channel is a noisy per-class reflectivity.
    """
    if beams < 1:
        raise ValueError("need at least one beam")
    sensor = compose(ego_pose, lidar_mount())
    dirs, rings = beam_directions(beams, azimuth_steps)
    world_dirs = dirs @ sensor.rotation.T
    t, cls, inst = cast_rays(scene, sensor.translation, world_dirs, max_range)
    hit = np.isfinite(t)
    pts = dirs[hit] * t[hit, None]
    rng = np.random.default_rng([scene.spec.seed, timestamp, 7])
    refl = REFLECTIVITY[cls[hit]] + intensity_noise * rng.standard_normal(hit.sum())
    return PointCloud(pts, refl[:, None], cls[hit], timestamp, inst[hit], rings[hit])


@dataclass
class CameraMount:
    yaw: float  # heading of the optical axis in the ego frame
    position: tuple = (0.0, 0.0, LIDAR_HEIGHT)

    def ego_to_camera(self) -> RigidTransform:
        r = EGO_TO_CAMERA_AXES @ rot_z(-self.yaw)
        return RigidTransform(r, -r @ np.asarray(self.position, dtype=np.float64))


def default_rig(width=416, height=224, n_cameras=2):
    """Cameras co-located with the LiDAR, evenly spread in yaw, 90 deg HFOV."""
    intr = CameraIntrinsics(width / 2, width / 2, width / 2, height / 2, width, height)
    mounts = [CameraMount(2 * math.pi * k / n_cameras) for k in range(n_cameras)]
    return intr, mounts


def camera_chain(intr: CameraIntrinsics, mount: CameraMount, pose_tl: RigidTransform,
                 pose_tc: RigidTransform | None = None) -> CalibrationChain:
    pose_tc = pose_tl if pose_tc is None else pose_tc
    return CalibrationChain(intr, lidar_mount(), pose_tl, pose_tc.inverse(), mount.ego_to_camera())


@dataclass
class CameraView:
    image: np.ndarray  # H x W x 3 uint8
    labelmap: LabelMap  # ground-truth instance segments
    instances: np.ndarray  # H x W, -1 for sky
    classes: np.ndarray  # H x W, -1 for sky
    depth: np.ndarray


def instance_segments(instances: np.ndarray) -> LabelMap:
    """Connected components (4-neighbour) of an instance raster; -1 is a hole."""
    out = np.full(instances.shape, -1, dtype=np.int64)
    nxt = 0
    for inst, sl in enumerate(ndimage.find_objects(instances + 1)):
        if sl is None:
            continue
        comp, n = ndimage.label(instances[sl] == inst)
        region = out[sl]
        for j in range(1, n + 1):
            region[comp == j] = nxt
            nxt += 1
    out[out < 0] = UNLABELED
    return LabelMap(out, nxt)


def render_camera(scene: Scene, chain: CalibrationChain) -> CameraView:
    k = chain.intrinsics
    cam_to_world = chain.world_to_camera().inverse()
    vv, uu = np.mgrid[0:k.height, 0:k.width]
    d = np.stack([(uu + 0.5 - k.cx) / k.fx, (vv + 0.5 - k.cy) / k.fy, np.ones(uu.shape)], axis=-1)
    d = d.reshape(-1, 3)
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    t, cls, inst = cast_rays(scene, cam_to_world.translation, d @ cam_to_world.rotation.T)
    shade = 1.0 / (1.0 + 0.015 * np.where(np.isfinite(t), t, 0.0))
    tint = 1.0 + 0.12 * np.sin(1.7 * np.maximum(inst, 0) + 0.3)
    col = PALETTE[np.maximum(cls, 0)] * (shade * np.where(inst > 0, tint, 1.0))[:, None]
    col[cls < 0] = SKY
    img = np.clip(np.round(col * 255), 0, 255).astype(np.uint8).reshape(k.height, k.width, 3)
    inst_img = inst.reshape(k.height, k.width)
    return CameraView(
        img, instance_segments(inst_img), inst_img,
        cls.reshape(k.height, k.width), t.reshape(k.height, k.width),
    )


# --- augmentation ------------------------------------------------------------

def cuboid_pair_floor(n_pairs: int, base: int = 1024) -> int:
    """Pairs a cuboid drop must retain.

    ``base`` when there are at least ``base`` pairs; below that the floor is
    scaled to 75% of what is available (same ratio as the crop rule).
    """
    return base if n_pairs >= base else int(math.ceil(0.75 * n_pairs))


def crop_ok(kept: int, n_pairs: int, base: int = 1024) -> bool:
    return kept >= base or kept >= 0.75 * n_pairs


@dataclass
class CloudAugment:
    cloud: PointCloud
    pairs: list  # PairSet per camera
    kept: np.ndarray  # original index of each surviving point
    rotation: np.ndarray  # 3x3 applied to positions (rotation and flips)


def augment_cloud(cloud: PointCloud, pair_sets, rng, rotate=True, p_flip=0.5, p_drop=1.0,
                  max_tries=10, base_floor=1024) -> CloudAugment:
    """Rotate about z, flip x/y, then drop a random cuboid.

    The cuboid is re-drawn while it would leave fewer pairs than
    :func:`cuboid_pair_floor`; after ``max_tries`` failures nothing is dropped.
    """
    r = rot_z(rng.uniform(0, 2 * np.pi)) if rotate else np.eye(3)
    flip = np.diag([-1.0 if rng.random() < p_flip else 1.0,
                    -1.0 if rng.random() < p_flip else 1.0, 1.0])
    r = flip @ r
    pos = cloud.positions @ r.T
    keep = np.ones(len(cloud), bool)
    total = sum(len(p) for p in pair_sets)
    if len(cloud) and rng.random() < p_drop:
        floor = cuboid_pair_floor(total, base_floor)
        span = pos.max(axis=0) - pos.min(axis=0)
        for _ in range(max_tries):
            centre = pos[rng.integers(len(pos))]
            half = 0.5 * rng.uniform(0, 0.1, 3) * span
            inside = np.all(np.abs(pos - centre) <= half, axis=1)
            kept_pairs = sum(int((~inside[p.point_index]).sum()) for p in pair_sets)
            if kept_pairs >= floor:
                keep = ~inside
                break
    kept = np.flatnonzero(keep)
    remap = np.full(len(cloud), -1, dtype=np.int64)
    remap[kept] = np.arange(len(kept))
    new_pairs = []
    for p in pair_sets:
        ok = keep[p.point_index]
        new_pairs.append(PairSet(remap[p.point_index[ok]], p.pixels[ok], p.superpixels[ok]))
    out = cloud.subset(kept).with_positions(pos[kept])
    return CloudAugment(out, new_pairs, kept, r)


@dataclass
class ImageAugment:
    image: np.ndarray
    labelmap: LabelMap | None
    pairs: PairSet
    flipped: bool
    crop: tuple  # x0, y0, width, height in source pixels


def _resample(arr, x0, y0, cw, ch, out_w, out_h):
    xs = x0 + np.floor((np.arange(out_w) + 0.5) * cw / out_w).astype(int)
    ys = y0 + np.floor((np.arange(out_h) + 0.5) * ch / out_h).astype(int)
    return arr[ys[:, None], xs[None, :]]


def augment_image(image, labelmap, pairs: PairSet, rng, p_flip=0.5, crop=True,
                  out_size=None, max_tries=10, base_floor=1024) -> ImageAugment:
    """Horizontal flip then crop-and-resize (nearest neighbour).

    The crop covers at least 30% of the image with aspect ratio in
    [14:9, 17:9] and is re-drawn while it keeps fewer pairs than
    :func:`crop_ok` allows; after ``max_tries`` failures the full frame is used.
    """
    h, w = image.shape[:2]
    out_w, out_h = out_size if out_size is not None else (w, h)
    pix = pairs.pixels.copy()
    flipped = rng.random() < p_flip
    if flipped:
        image = image[:, ::-1]
        labelmap = None if labelmap is None else LabelMap(labelmap.ids[:, ::-1], labelmap.num_segments)
        pix[:, 0] = w - 1 - pix[:, 0]
    box = (0, 0, w, h)
    if crop:
        for _ in range(max_tries):
            area = rng.uniform(0.3, 1.0) * w * h
            aspect = rng.uniform(14 / 9, 17 / 9)
            cw = int(min(w, round(math.sqrt(area * aspect))))
            ch = int(min(h, round(math.sqrt(area / aspect))))
            x0 = int(rng.integers(0, w - cw + 1))
            y0 = int(rng.integers(0, h - ch + 1))
            inside = (pix[:, 0] >= x0) & (pix[:, 0] < x0 + cw) & (pix[:, 1] >= y0) & (pix[:, 1] < y0 + ch)
            if crop_ok(int(inside.sum()), len(pairs), base_floor):
                box = (x0, y0, cw, ch)
                break
    x0, y0, cw, ch = box
    image = _resample(image, x0, y0, cw, ch, out_w, out_h)
    inside = (pix[:, 0] >= x0) & (pix[:, 0] < x0 + cw) & (pix[:, 1] >= y0) & (pix[:, 1] < y0 + ch)
    nu = np.floor((pix[:, 0] - x0 + 0.5) * out_w / cw).astype(np.int64)
    nv = np.floor((pix[:, 1] - y0 + 0.5) * out_h / ch).astype(np.int64)
    nu, nv = np.clip(nu, 0, out_w - 1), np.clip(nv, 0, out_h - 1)
    sp = pairs.superpixels.copy()
    if labelmap is not None:
        labelmap = LabelMap(_resample(labelmap.ids, x0, y0, cw, ch, out_w, out_h), labelmap.num_segments)
        sp = labelmap.ids[nv, nu]
        inside &= sp != labelmap.unlabeled
    new = PairSet(pairs.point_index[inside], np.stack([nu, nv], 1)[inside], sp[inside])
    return ImageAugment(np.ascontiguousarray(image), labelmap, new, flipped, box)


@dataclass
class AugmentedPair:
    cloud: PointCloud
    image: np.ndarray
    pairs: PairSet
    labelmap: LabelMap | None
    kept: np.ndarray


def augment_pair(cloud, image, pairs, seed, labelmap=None, rotate=True, p_flip=0.5,
                 p_drop=1.0, p_img_flip=0.5, crop=True, out_size=None) -> AugmentedPair:
    """Point-cloud then image augmentation for a single camera."""
    rng = np.random.default_rng(seed)
    ca = augment_cloud(cloud, [pairs], rng, rotate, p_flip, p_drop)
    ia = augment_image(image, labelmap, ca.pairs[0], rng, p_img_flip, crop, out_size)
    return AugmentedPair(ca.cloud, ia.image, ia.pairs, ia.labelmap, ca.kept)


# --- corruptions ---------------------------------------------------------------

CORRUPTIONS = ("beam-drop", "jitter", "point-drop")
JITTER_SIGMA = {0: 0.0, 1: 0.02, 2: 0.05, 3: 0.10}
DROP_FRACTION = {1: 0.10, 2: 0.30, 3: 0.50}
BEAM_KEEP = {1: 0.75, 2: 0.50, 3: 0.25}


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    level: int

    def __post_init__(self):
        if self.kind not in CORRUPTIONS:
            raise ValueError(f"unknown corruption {self.kind!r}")
        if self.level not in (1, 2, 3) and not (self.kind == "jitter" and self.level == 0):
            raise ValueError(f"severity must be 1..3, got {self.level}")

    @classmethod
    def parse(cls, text: str) -> "CorruptionSpec":
        kind, _, level = text.partition(":")
        return cls(kind, int(level))

    def __str__(self):
        return f"{self.kind}:{self.level}"


def corrupt(cloud: PointCloud, spec: CorruptionSpec, seed: int) -> PointCloud:
    rng = np.random.default_rng([seed, CORRUPTIONS.index(spec.kind), spec.level])
    if spec.kind == "jitter":
        noise = rng.normal(0, 1, cloud.positions.shape) * JITTER_SIGMA[spec.level]
        return cloud.with_positions(cloud.positions + noise)
    if spec.kind == "point-drop":
        n_drop = int(round(DROP_FRACTION[spec.level] * len(cloud)))
        keep = np.sort(rng.permutation(len(cloud))[n_drop:])
        return cloud.subset(keep)
    if cloud.rings is None:
        raise ValueError("beam-drop needs ring indices")
    rings = np.unique(cloud.rings)
    kept_rings = rings[rng.random(len(rings)) < BEAM_KEEP[spec.level]]
    return cloud.subset(np.flatnonzero(np.isin(cloud.rings, kept_rings)))


# --- files -------------------------------------------------------------------

def save_ppm(image: np.ndarray, path) -> None:
    img = np.asarray(image, dtype=np.uint8)
    h, w = img.shape[:2]
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def load_ppm(path) -> np.ndarray:
    from .partition import _pnm_header

    data = Path(path).read_bytes()
    w, h, maxval, off = _pnm_header(data, b"P6")
    if maxval != 255:
        raise ValueError("only 8-bit PPM supported")
    if len(data) - off < 3 * w * h:
        raise ValueError("truncated PPM payload")
    return np.frombuffer(data, np.uint8, 3 * w * h, off).reshape(h, w, 3).copy()


def save_scene_spec(spec: SceneSpec, path) -> None:
    lines = [
        f"seed={spec.seed}", f"extent={spec.extent!r}", f"vehicles={spec.vehicles}",
        f"poles={spec.poles}", f"walls={spec.walls}", f"num_classes={spec.num_classes}",
        f"ticks={len(spec.trajectory)}",
    ]
    for k, pose in enumerate(spec.trajectory):
        yaw = math.atan2(pose.rotation[1, 0], pose.rotation[0, 0])
        x, y, z = (float(v) for v in pose.translation)
        lines.append(f"pose.{k}={yaw!r} {x!r} {y!r} {z!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_scene_spec(path) -> SceneSpec:
    kv = {}
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            key, _, val = line.partition("=")
            kv[key.strip()] = val.strip()
    poses = []
    for k in range(int(kv["ticks"])):
        yaw, x, y, z = (float(v) for v in kv[f"pose.{k}"].split())
        poses.append(RigidTransform.from_yaw(yaw, (x, y, z)))
    return SceneSpec(
        int(kv["seed"]), float(kv["extent"]), int(kv["vehicles"]), int(kv["poles"]),
        int(kv["walls"]), poses, int(kv["num_classes"]),
    )
