"""Pretraining, probing and robustness flows over the synthetic world."""

from __future__ import annotations

import configparser
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import nn, objectives, synth
from .evaluation import (
    ConvergenceLog, ProbeConfig, ProbeResult, linear_probe, miou, robustness_scores,
    ConfusionMatrix,
)
from .geom import FrameSequence, PairSet, build_pairs
from .objectives import LossConfig
from .partition import (
    LabelMap, SegmentLabels, load_labelmap, remove_ground_and_cluster, segment_views, slic,
    superpoints_from_pairs,
)

log = logging.getLogger(__name__)


class NumericAbort(RuntimeError):
    """Raised when the training loss stops being finite."""


# --- configuration ----------------------------------------------------------------

@dataclass
class DataConfig:
    n_scenes: int = 8
    ticks: int = 10
    cameras: int = 2
    beams: int = 16
    azimuth_steps: int = 360
    width: int = 416
    height: int = 224
    max_range: float = 50.0
    vehicles: int = 6
    poles: int = 6
    walls: int = 3
    probe_scenes: int = 4
    probe_points: int = 4000
    augment: bool = True


@dataclass
class ModelConfig:
    hidden: int = 64
    channels: int = 32
    dim: int = 16
    stride: int = 4
    neighbors: int = 16
    image_warmup_steps: int = 150


@dataclass
class SuperpixelConfig:
    source: str = "gt"  # gt | slic | mask-dir
    slic_segments: int = 150
    compactness: float = 0.2
    mask_dir: str | None = None
    min_pair_count: int = 1

    def __post_init__(self):
        if self.source not in ("gt", "slic", "mask-dir"):
            raise ValueError(f"unknown superpixel source {self.source!r}")


@dataclass
class ClusterConfig:
    eps: float = 0.5
    min_pts: int = 5
    ground_threshold: float = 0.1
    ransac_iters: int = 100


@dataclass
class PretrainConfig:
    epochs: int = 10
    batch: int = 4
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    dampening: float = 0.1
    max_steps: int | None = None
    seed: int = 0
    deterministic: bool = True
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    superpixel: SuperpixelConfig = field(default_factory=SuperpixelConfig)
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)

    def __post_init__(self):
        if self.epochs < 1 or self.batch < 1:
            raise ValueError("epochs and batch must be >= 1")
        if self.superpixel.source == "mask-dir":
            if not self.superpixel.mask_dir or not Path(self.superpixel.mask_dir).is_dir():
                raise ValueError(f"mask directory {self.superpixel.mask_dir!r} does not exist")

    @property
    def offset(self) -> int:
        return self.loss.temporal_offset


# section -> (attribute on PretrainConfig or None for top level, key aliases)
_SECTIONS = {
    "data": "data",
    "model": "model",
    "loss": "loss",
    "superpixel": "superpixel",
    "cluster": "cluster",
    "probe": "probe",
    "optimizer": None,
}
_OPTIMIZER_KEYS = {"epochs", "batch", "lr", "momentum", "weight_decay", "dampening", "max_steps", "seed"}


def _coerce(value: str, like):
    if isinstance(like, bool):
        return value.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    if value.strip().lower() in ("", "none"):
        return None
    return value.strip()


def load_config(path, base: PretrainConfig | None = None) -> PretrainConfig:
    """Read an INI-style run config.  Unknown sections or keys are errors."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    with open(path) as fh:
        parser.read_file(fh)
    cfg = base or PretrainConfig()
    top = {}
    subs = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ValueError(f"unknown config section [{section}]")
        attr = _SECTIONS[section]
        if attr is None:
            for key, val in parser[section].items():
                if key not in _OPTIMIZER_KEYS:
                    raise ValueError(f"unknown key {key!r} in [optimizer]")
                cur = getattr(cfg, key)
                top[key] = _coerce(val, cur if cur is not None else 0)
            continue
        obj = getattr(cfg, attr)
        names = {f.name for f in fields(obj)}
        upd = {}
        for key, val in parser[section].items():
            if key not in names:
                raise ValueError(f"unknown key {key!r} in [{section}]")
            cur = getattr(obj, key)
            upd[key] = _coerce(val, cur if cur is not None else "")
        subs[attr] = replace(obj, **upd)
    return replace(cfg, **top, **subs)


# --- synthetic world ----------------------------------------------------------

class SyntheticWorld:
    """Lazily rendered scenes; every product is cached and seed-deterministic."""

    def __init__(self, data: DataConfig, seed: int, superpixel: SuperpixelConfig | None = None,
                 cluster: ClusterConfig | None = None, offset: int = 1, scene_seed_base: int = 0):
        self.data = data
        self.seed = seed
        self.superpixel = superpixel or SuperpixelConfig()
        self.cluster_cfg = cluster or ClusterConfig()
        self.offset = offset
        self.intrinsics, self.mounts = synth.default_rig(data.width, data.height, data.cameras)
        self.specs = []
        for s in range(data.n_scenes):
            rng = np.random.default_rng([seed, scene_seed_base, s])
            traj = synth.default_trajectory(
                data.ticks, speed=rng.uniform(1.0, 2.0), yaw_rate=rng.uniform(-0.05, 0.05),
                start=(rng.uniform(-8, -4), rng.uniform(-2, 2)),
            )
            self.specs.append(synth.SceneSpec(
                int(rng.integers(2 ** 31)), 40.0, data.vehicles, data.poles, data.walls, traj,
            ))
        self._scenes, self._frames, self._views, self._sp, self._segs = {}, {}, {}, {}, {}

    def scene(self, s):
        if s not in self._scenes:
            self._scenes[s] = synth.gen_scene(self.specs[s])
        return self._scenes[s]

    def pose(self, s, t):
        return self.specs[s].trajectory[t]

    def frame(self, s, t):
        if (s, t) not in self._frames:
            d = self.data
            self._frames[(s, t)] = synth.simulate_lidar(
                self.scene(s), self.pose(s, t), d.beams, d.azimuth_steps, d.max_range, timestamp=t,
            )
        return self._frames[(s, t)]

    def chain(self, s, t, c):
        return synth.camera_chain(self.intrinsics, self.mounts[c], self.pose(s, t))

    def view(self, s, t, c):
        if (s, t, c) not in self._views:
            self._views[(s, t, c)] = synth.render_camera(self.scene(s), self.chain(s, t, c))
        return self._views[(s, t, c)]

    def superpixels(self, s, t, c) -> LabelMap:
        key = (s, t, c)
        if key not in self._sp:
            sp = self.superpixel
            if sp.source == "gt":
                lm = self.view(s, t, c).labelmap
            elif sp.source == "slic":
                lm = slic(self.view(s, t, c).image, sp.slic_segments, sp.compactness, seed=self.seed)
            else:
                lm = load_labelmap(Path(sp.mask_dir) / mask_name(s, t, c))
                if (lm.width, lm.height) != (self.data.width, self.data.height):
                    raise ValueError(f"mask {mask_name(s, t, c)} has the wrong size")
            self._sp[key] = lm
        return self._sp[key]

    def sequence(self, s, t) -> FrameSequence:
        ticks = [t, t + self.offset]
        return FrameSequence([self.frame(s, k) for k in ticks], [self.pose(s, k) for k in ticks])

    def segments(self, s, t):
        """Shared-id segments for frames t and t + offset."""
        if (s, t) not in self._segs:
            seq = self.sequence(s, t)
            pts = np.concatenate([p.apply(f.positions) for f, p in zip(seq.frames, seq.ego_poses)])
            c = self.cluster_cfg
            labels, _ = remove_ground_and_cluster(
                pts, c.ground_threshold, c.ransac_iters, c.eps, c.min_pts, seed=self.seed,
            )
            self._segs[(s, t)] = segment_views(seq, labels)
        return self._segs[(s, t)]

    def pair_items(self):
        return [(s, t) for s in range(self.data.n_scenes) for t in range(self.data.ticks - self.offset)]


def mask_name(s, t, c) -> str:
    return f"scene{s:03d}_t{t:03d}_cam{c}.pgm"


# --- steps ------------------------------------------------------------------

@dataclass
class CameraBundle:
    image: np.ndarray
    labelmap: LabelMap
    pairs: PairSet


@dataclass
class StepBundle:
    scene: int
    tick: int
    cloud_t: object
    cloud_tn: object
    seg_t: SegmentLabels
    seg_tn: SegmentLabels
    cameras: list

    @property
    def n_pairs(self):
        return sum(len(c.pairs) for c in self.cameras)

    def check(self):
        for cam in self.cameras:
            p = cam.pairs
            if len(p):
                assert p.point_index.max() < len(self.cloud_t)
                h, w = cam.labelmap.ids.shape
                assert np.all((p.pixels >= 0) & (p.pixels < [w, h]))
                assert np.all(cam.labelmap.ids[p.pixels[:, 1], p.pixels[:, 0]] == p.superpixels)
        assert len(self.seg_t) == len(self.cloud_t) and len(self.seg_tn) == len(self.cloud_tn)


def prepare_step(world: SyntheticWorld, s: int, t: int, rng=None, augment: bool | None = None) -> StepBundle:
    augment = world.data.augment if augment is None else augment
    cloud_t, cloud_tn = world.frame(s, t), world.frame(s, t + world.offset)
    seg_t, seg_tn = world.segments(s, t)
    cams = []
    for c in range(world.data.cameras):
        view = world.view(s, t, c)
        lm = world.superpixels(s, t, c)
        cams.append(CameraBundle(view.image, lm, build_pairs(cloud_t, world.chain(s, t, c), lm)))
    if augment:
        rng = rng if rng is not None else np.random.default_rng()
        ca = synth.augment_cloud(cloud_t, [c.pairs for c in cams], rng)
        cloud_t = ca.cloud
        seg_t = SegmentLabels(seg_t.ids[ca.kept], seg_t.num_segments)
        cloud_tn = cloud_tn.with_positions(cloud_tn.positions @ ca.rotation.T)
        new = []
        for cam, pairs in zip(cams, ca.pairs):
            ia = synth.augment_image(cam.image, cam.labelmap, pairs, rng)
            new.append(CameraBundle(ia.image, ia.labelmap, ia.pairs))
        cams = new
    return StepBundle(s, t, cloud_t, cloud_tn, seg_t, seg_tn, cams)


# --- model ---------------------------------------------------------------

def warm_start_image_encoder(encoder: nn.ImageEncoder, images, steps=150, pixels=256, lr=0.05,
                             tau=0.1, seed=0) -> float:
    """Pixel-level contrastive warm-up standing in for a pretrained 2D backbone.

    Two views of the same sampled pixels differ in brightness and in the
    (flipped, cropped) normalised coordinates; InfoNCE matches them.  The
    encoder ends frozen.  Returns the last loss (nan when ``steps`` is 0).
    """
    rng = np.random.default_rng([seed, 303])
    imgs = [np.asarray(im, dtype=np.float64) / 255.0 for im in images]
    encoder.unfreeze()
    opt = nn.SGD(encoder.parameters(), lr, max(steps, 1), 0.9, 1e-4, 0.1)

    def view(img, yy, xx):
        h, w = img.shape[:2]
        rgb = img[yy, xx] * rng.uniform(0.7, 1.3)
        x, y = xx / w, yy / h
        if rng.random() < 0.5:
            x = 1.0 - x
        s = rng.uniform(0.6, 1.0)
        x = (x - rng.uniform(0, 1 - s)) / s
        y = (y - rng.uniform(0, 1 - s)) / s
        return nn.Tensor(np.column_stack([rgb, x, y]))

    last = float("nan")
    for _ in range(steps):
        img = imgs[rng.integers(len(imgs))]
        yy = rng.integers(0, img.shape[0], pixels)
        xx = rng.integers(0, img.shape[1], pixels)
        a = nn.l2_normalize(encoder(view(img, yy, xx)))
        b = nn.l2_normalize(encoder(view(img, yy, xx)))
        loss = objectives.info_nce(a, b, tau)
        opt.zero_grad()
        loss.backward()
        opt.step()
        last = float(loss.data)
    encoder.freeze()
    return last


class SealModel(nn.Module):
    def __init__(self, n_features=1, cfg: ModelConfig | None = None, seed=0):
        cfg = cfg or ModelConfig()
        rng = np.random.default_rng([seed, 17])
        self.point_encoder = nn.PointEncoder(n_features, cfg.hidden, cfg.channels, rng, neighbors=cfg.neighbors)
        self.point_head = nn.PointHead(cfg.channels, cfg.dim, rng)
        self.image_encoder = nn.ImageEncoder(cfg.hidden, cfg.channels, cfg.stride, rng)
        self.image_head = nn.ImageHead(cfg.channels, cfg.dim, cfg.stride, rng)
        # the 2D branch stays fixed; only its projection head is trained
        self.image_encoder.freeze()

    def trainable(self):
        return [p for p in self.parameters() if p.requires_grad]

    def point_features(self, cloud):
        return self.point_head(self.point_encoder.encode(cloud.positions, cloud.features))

    def pixel_features(self, image):
        grid = self.image_encoder.encode(image)
        h, w = image.shape[:2]
        out = self.image_head(grid)
        hh, ww = out.shape[:2]
        if (hh, ww) != (h, w):
            raise ValueError(f"image size {w}x{h} is not a multiple of the stride")
        return nn.reshape(out, (h * w, out.shape[2]))


def step_losses(model: SealModel, bundles, loss_cfg: LossConfig, min_pair_count: int = 1) -> dict:
    """Loss terms for a batch; absent keys mean the term had no valid input."""
    tau = loss_cfg.temperature
    qs, ks, tmp, p2s = [], [], [], []
    for b in bundles:
        f_t = model.point_features(b.cloud_t)
        if loss_cfg.w_vfm > 0:
            for cam in b.cameras:
                sp = superpoints_from_pairs(cam.pairs, len(b.cloud_t), min_pair_count)
                if sp.num_superpoints == 0:
                    continue
                lut = np.full(cam.labelmap.num_segments + 1, -1, dtype=np.int64)
                lut[sp.source_ids] = np.arange(sp.num_superpoints)
                lm_ids = cam.labelmap.ids.ravel()
                pix_groups = np.where(lm_ids == cam.labelmap.unlabeled, -1, lut[np.minimum(lm_ids, len(lut) - 1)])
                pix = model.pixel_features(cam.image)
                q, k = objectives.pooled_pairs(f_t, pix, sp.ids, pix_groups)
                qs.append(q)
                ks.append(k)
        if loss_cfg.w_tmp > 0 and len(objectives.shared_segments(b.seg_t, b.seg_tn)):
            f_tn = model.point_features(b.cloud_tn)
            tmp.append(objectives.loss_temporal(f_t, f_tn, b.seg_t, b.seg_tn, tau))
        if loss_cfg.w_p2s > 0 and len(b.seg_t.present()):
            p2s.append(objectives.loss_p2s(f_t, b.seg_t, tau))
    parts = {}
    if qs:
        q = nn.l2_normalize(nn.concat(qs))
        k = nn.l2_normalize(nn.concat(ks))
        parts["vfm"] = objectives.info_nce(q, k, tau)
    if tmp:
        parts["tmp"] = nn.scale(_sum(tmp), 1.0 / len(tmp))
    if p2s:
        parts["p2s"] = nn.scale(_sum(p2s), 1.0 / len(p2s))
    return parts


def _sum(ts):
    out = ts[0]
    for t in ts[1:]:
        out = nn.add(out, t)
    return out


# --- pretraining -----------------------------------------------------------

@dataclass
class PretrainResult:
    model: SealModel
    log: ConvergenceLog
    steps: int
    skipped: int
    checkpoint: Path | None = None


def _batches(world, cfg, epoch):
    items = world.pair_items()
    order = np.random.default_rng([cfg.seed, 101, epoch]).permutation(len(items))
    for i in range(0, len(order), cfg.batch):
        yield [items[j] for j in order[i:i + cfg.batch]]


def total_steps(world, cfg) -> int:
    per_epoch = math.ceil(len(world.pair_items()) / cfg.batch)
    steps = per_epoch * cfg.epochs
    return steps if cfg.max_steps is None else min(steps, cfg.max_steps)


def make_world(cfg: PretrainConfig, scene_seed_base: int = 0) -> SyntheticWorld:
    return SyntheticWorld(cfg.data, cfg.seed, cfg.superpixel, cfg.cluster, cfg.offset, scene_seed_base)


def pretrain(cfg: PretrainConfig, out_dir=None, world: SyntheticWorld | None = None) -> PretrainResult:
    """Optimise the joint objective; writes ``checkpoint.bin`` each epoch and
    ``convergence.csv`` at the end when ``out_dir`` is given."""
    world = world or make_world(cfg)
    model = SealModel(world.frame(0, 0).num_features, cfg.model, cfg.seed)
    images = [world.view(s, 0, c).image for s in range(world.data.n_scenes) for c in range(world.data.cameras)]
    warm = warm_start_image_encoder(model.image_encoder, images, cfg.model.image_warmup_steps, seed=cfg.seed)
    log.info("image encoder warm-up loss %.4f", warm)
    n_total = total_steps(world, cfg)
    opt = nn.SGD(model.trainable(), cfg.lr, max(n_total, 1), cfg.momentum, cfg.weight_decay, cfg.dampening)
    conv = ConvergenceLog()
    out = Path(out_dir) if out_dir is not None else None
    ckpt = out / "checkpoint.bin" if out is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        nn.save_checkpoint(model.state_dict(), ckpt)

    def prepare(batch_idx, batch, epoch):
        return [
            prepare_step(world, s, t, np.random.default_rng([cfg.seed, epoch, batch_idx, i]))
            for i, (s, t) in enumerate(batch)
        ]

    skipped = 0
    pool = None if cfg.deterministic else ThreadPoolExecutor(max_workers=1)
    try:
        for epoch in range(cfg.epochs):
            if opt.step_count >= n_total:
                break
            batches = list(_batches(world, cfg, epoch))
            pending = None
            for bi, batch in enumerate(batches):
                if opt.step_count >= n_total:
                    break
                if pool is None:
                    bundles = prepare(bi, batch, epoch)
                else:
                    # one-deep producer/consumer queue; bundles depend only on
                    # (seed, epoch, batch) so ordering stays deterministic
                    fut = pending or pool.submit(prepare, bi, batch, epoch)
                    if bi + 1 < len(batches):
                        pending = pool.submit(prepare, bi + 1, batches[bi + 1], epoch)
                    bundles = fut.result()
                parts = step_losses(model, bundles, cfg.loss, cfg.superpixel.min_pair_count)
                active = {k: v for k, v in parts.items()
                          if {"vfm": cfg.loss.w_vfm, "tmp": cfg.loss.w_tmp, "p2s": cfg.loss.w_p2s}[k] > 0}
                if not active:
                    skipped += 1
                    log.info("skipping batch %d of epoch %d: no pairs and no shared segments", bi, epoch)
                    continue
                loss = objectives.total_loss(cfg.loss, parts)
                value = float(loss.data)
                if not math.isfinite(value):
                    raise NumericAbort(f"non-finite loss {value} at step {opt.step_count}")
                opt.zero_grad()
                loss.backward()
                step = opt.step_count
                lr = opt.step()
                conv.append(step, value, lr, **{k: float(v.data) for k, v in parts.items()})
                log.debug("step %d loss %.5f lr %.5f", step, value, lr)
            if ckpt is not None:
                nn.save_checkpoint(model.state_dict(), ckpt)
    finally:
        if pool is not None:
            pool.shutdown()
    if out is not None:
        conv.save(out / "convergence.csv")
    return PretrainResult(model, conv, opt.step_count, skipped, ckpt)


def evaluate_loss(model, world, cfg: PretrainConfig, items=None) -> float:
    """Total objective on un-augmented bundles (fixed evaluation set)."""
    items = items if items is not None else world.pair_items()
    total = 0.0
    for i in range(0, len(items), cfg.batch):
        bundles = [prepare_step(world, s, t, augment=False) for s, t in items[i:i + cfg.batch]]
        parts = step_losses(model, bundles, cfg.loss, cfg.superpixel.min_pair_count)
        total += float(objectives.total_loss(cfg.loss, parts).data) * len(bundles)
    return total / len(items)


def load_model(path, cfg: PretrainConfig, n_features=1) -> SealModel:
    model = SealModel(n_features, cfg.model, cfg.seed)
    try:
        model.load_state_dict(nn.load_checkpoint(path))
    except ValueError as exc:
        raise ValueError(f"checkpoint does not match the model: {exc}") from None
    return model


# --- probing -------------------------------------------------------------------

@dataclass
class ProbeData:
    """Probe samples as ``(positions, features, rows)`` per cloud.

    Clouds are kept whole so the encoder sees full neighbourhoods; ``rows``
    picks the labelled subsample.
    """
    train: list
    train_y: np.ndarray
    val_clouds: list  # held-out clouds, corrupted on demand
    val_index: list

    def val_samples(self, corruption=None, seed=0):
        samples, ys = [], []
        for k, (cloud, idx) in enumerate(zip(self.val_clouds, self.val_index)):
            if corruption is not None:
                n_before = len(cloud)
                cloud = synth.corrupt(cloud, corruption, seed + k)
                # point-preserving corruptions keep the clean subsample
                idx = self.val_index[k] if len(cloud) == n_before else np.arange(len(cloud))
                if len(cloud) != n_before and len(idx) > len(self.val_index[k]):
                    idx = np.sort(np.random.default_rng([seed, k]).choice(
                        len(cloud), len(self.val_index[k]), replace=False))
            samples.append((cloud.positions, cloud.features, idx))
            ys.append(cloud.labels[idx])
        return samples, np.concatenate(ys)


def probe_data(cfg: PretrainConfig) -> ProbeData:
    """Held-out scenes: first half trains the probe, second half validates."""
    d = replace(cfg.data, n_scenes=cfg.data.probe_scenes)
    world = SyntheticWorld(d, cfg.seed, scene_seed_base=1)
    rng = np.random.default_rng([cfg.seed, 202])
    n_train = max(1, d.n_scenes // 2)
    per = max(1, d.probe_points // (d.n_scenes * 2))
    tx, ty, vc, vi = [], [], [], []
    for s in range(d.n_scenes):
        for t in (0, d.ticks - 1):
            cloud = world.frame(s, t)
            idx = np.sort(rng.choice(len(cloud), min(per, len(cloud)), replace=False))
            if s < n_train:
                tx.append((cloud.positions, cloud.features, idx))
                ty.append(cloud.labels[idx])
            else:
                vc.append(cloud)
                vi.append(idx)
    return ProbeData(tx, np.concatenate(ty), vc, vi)


def probe(model: SealModel, cfg: PretrainConfig, data: ProbeData | None = None) -> ProbeResult:
    data = data or probe_data(cfg)
    vx, vy = data.val_samples()
    enc = model.point_encoder
    enc.freeze()
    return linear_probe(enc, data.train, data.train_y, vx, vy, len(synth.CLASSES), cfg.probe)


def corrupted_mious(model, cfg, corruptions, data: ProbeData | None = None):
    """Clean and per-corruption validation mIoU with one probe head."""
    data = data or probe_data(cfg)
    res = probe(model, cfg, data)
    out = []
    for spec in corruptions:
        vx, vy = data.val_samples(spec, cfg.seed)
        pred = res.predict(model.point_encoder.embed(vx))
        out.append(miou(ConfusionMatrix(len(synth.CLASSES)).update(vy, pred))[1])
    return res.miou, np.array(out)


def default_corruptions():
    return [synth.CorruptionSpec(k, lvl) for k in synth.CORRUPTIONS for lvl in (1, 2, 3)]


def evaluate_robustness(model, cfg, corruptions=None, baseline=None, data=None):
    """``baseline`` holds the reference model's per-corruption mIoUs."""
    if baseline is None:
        raise ValueError("a baseline (random-init) evaluation is required")
    corruptions = corruptions or default_corruptions()
    clean, per = corrupted_mious(model, cfg, corruptions, data)
    return robustness_scores(per, baseline, clean, [str(c) for c in corruptions])
