import math

import numpy as np
import pytest

from seal import synth
from seal.geom import PairSet, RigidTransform, build_pairs, project_points
from seal.synth import CorruptionSpec, SceneSpec


def small_rig():
    return synth.default_rig(160, 96, 2)


def aabb_overlap(a, b):
    return bool(np.all(a.lo[:2] < b.hi[:2]) and np.all(b.lo[:2] < a.hi[:2]))


def slab_oracle(o, d, lo, hi):
    """Scalar slab method for a single ray."""
    tmin, tmax = -math.inf, math.inf
    for ax in range(3):
        if d[ax] == 0:
            if not lo[ax] <= o[ax] <= hi[ax]:
                return math.inf
            continue
        t1, t2 = (lo[ax] - o[ax]) / d[ax], (hi[ax] - o[ax]) / d[ax]
        tmin, tmax = max(tmin, min(t1, t2)), min(tmax, max(t1, t2))
    if tmin > tmax or tmin <= 0:
        return math.inf
    return tmin


def test_gen_scene_deterministic_and_non_overlapping():
    for seed in range(10):
        a, b = synth.gen_scene(SceneSpec(seed=seed)), synth.gen_scene(SceneSpec(seed=seed))
        assert len(a.objects) == 15
        for x, y in zip(a.objects, b.objects):
            assert np.array_equal(x.lo, y.lo) and np.array_equal(x.hi, y.hi) and x.class_id == y.class_id
        overlaps = sum(aabb_overlap(p, q) for i, p in enumerate(a.objects) for q in a.objects[i + 1:])
        assert overlaps == 0


def test_empty_scene_is_ground_only():
    scene = synth.gen_scene(SceneSpec(vehicles=0, poles=0, walls=0))
    assert scene.objects == []
    pose = scene.spec.trajectory[0]
    cloud = synth.simulate_lidar(scene, pose, beams=8, azimuth_steps=90)
    assert len(cloud) > 0
    assert np.all(cloud.labels == synth.GROUND)
    world = synth.compose(pose, synth.lidar_mount()).apply(cloud.positions)
    assert np.allclose(world[:, 2], 0.0, atol=1e-9)
    intr, mounts = small_rig()
    view = synth.render_camera(scene, synth.camera_chain(intr, mounts[0], pose))
    assert view.labelmap.num_segments == 1


def test_max_range_zero_gives_empty_cloud():
    scene = synth.gen_scene(SceneSpec(seed=1))
    cloud = synth.simulate_lidar(scene, scene.spec.trajectory[0], beams=4, azimuth_steps=30, max_range=0.0)
    assert len(cloud) == 0
    with pytest.raises(ValueError):
        synth.simulate_lidar(scene, scene.spec.trajectory[0], beams=0)


def test_ray_box_matches_slab_oracle(rng):
    lo, hi = np.array([2.0, -1.0, 0.0]), np.array([4.5, 1.5, 1.8])
    origins = rng.uniform(-5, 0, (500, 3))
    targets = rng.uniform(lo - 1.0, hi + 1.0, (500, 3))
    dirs = targets - origins
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    got = synth.ray_box(origins, dirs, lo, hi)
    expect = np.array([slab_oracle(o, d, lo, hi) for o, d in zip(origins, dirs)])
    assert np.array_equal(np.isinf(got), np.isinf(expect))
    fin = np.isfinite(expect)
    assert fin.sum() > 10
    assert np.allclose(got[fin], expect[fin], atol=1e-9, rtol=0)


def test_lidar_box_distances_match_oracle():
    box = synth.SceneObject("box", synth.VEHICLE, 1, np.array([5.0, -1.0, 0.0]), np.array([9.0, 1.0, 1.6]))
    scene = synth.Scene(SceneSpec(vehicles=0, poles=0, walls=0), [box])
    pose = RigidTransform.identity()
    cloud = synth.simulate_lidar(scene, pose, beams=16, azimuth_steps=720, max_range=100)
    hits = cloud.instances == 1
    assert hits.sum() > 20
    origin = np.array([0.0, 0.0, synth.LIDAR_HEIGHT])
    for p in cloud.positions[hits]:
        d = p / np.linalg.norm(p)
        assert abs(slab_oracle(origin, d, box.lo, box.hi) - np.linalg.norm(p)) < 1e-9


def test_box_in_view_gives_several_segments():
    box = synth.SceneObject("box", synth.VEHICLE, 1, np.array([6.0, -1.0, 0.0]), np.array([9.0, 1.0, 1.6]))
    scene = synth.Scene(SceneSpec(vehicles=0, poles=0, walls=0), [box])
    intr, mounts = small_rig()
    view = synth.render_camera(scene, synth.camera_chain(intr, mounts[0], RigidTransform.identity()))
    assert view.labelmap.num_segments >= 2
    assert (view.instances == 1).any()


def cross_modal_agreement(seed, tick=0, cam=0):
    scene = synth.gen_scene(SceneSpec(seed=seed))
    pose = scene.spec.trajectory[tick]
    cloud = synth.simulate_lidar(scene, pose, beams=16, azimuth_steps=360)
    intr, mounts = synth.default_rig()
    view = synth.render_camera(scene, synth.camera_chain(intr, mounts[cam], pose))
    uv, _, valid = project_points(synth.camera_chain(intr, mounts[cam], pose), cloud.positions)
    pix = np.minimum(np.floor(uv[valid]).astype(int), [intr.width - 1, intr.height - 1])
    seen = view.instances[pix[:, 1], pix[:, 0]]
    agree = seen == cloud.instances[valid]
    return agree, pix, view.instances


def near_boundary(inst, u, v):
    patch = inst[max(v - 1, 0):v + 2, max(u - 1, 0):u + 2]
    return bool(np.any(patch != inst[v, u]))


def test_cross_modal_consistency():
    total, good = 0, 0
    for seed in range(4):
        for cam in range(2):
            agree, pix, inst = cross_modal_agreement(seed, cam=cam)
            total += len(agree)
            good += int(agree.sum())
            for u, v in pix[~agree]:
                assert near_boundary(inst, u, v)
    assert total > 1000
    assert good / total >= 0.99


def test_renders_reproducible():
    scene = synth.gen_scene(SceneSpec(seed=3))
    intr, mounts = small_rig()
    chain = synth.camera_chain(intr, mounts[1], scene.spec.trajectory[2])
    a, b = synth.render_camera(scene, chain), synth.render_camera(scene, chain)
    assert np.array_equal(a.image, b.image) and np.array_equal(a.labelmap.ids, b.labelmap.ids)
    ca = synth.simulate_lidar(scene, scene.spec.trajectory[2], timestamp=2)
    cb = synth.simulate_lidar(scene, scene.spec.trajectory[2], timestamp=2)
    assert np.array_equal(ca.positions, cb.positions) and np.array_equal(ca.features, cb.features)


# ---- augmentation

@pytest.fixture(scope="module")
def frame():
    scene = synth.gen_scene(SceneSpec(seed=5))
    pose = scene.spec.trajectory[0]
    cloud = synth.simulate_lidar(scene, pose, beams=32, azimuth_steps=720)
    intr, mounts = synth.default_rig()
    chain = synth.camera_chain(intr, mounts[0], pose)
    view = synth.render_camera(scene, chain)
    return cloud, view, build_pairs(cloud, chain, view.labelmap)


def pairs_valid(aug):
    h, w = aug.image.shape[:2]
    p = aug.pairs
    return (np.all((p.pixels[:, 0] >= 0) & (p.pixels[:, 0] < w) & (p.pixels[:, 1] >= 0) & (p.pixels[:, 1] < h))
            and np.all((p.point_index >= 0) & (p.point_index < len(aug.cloud))))


def test_augment_floors_hold(frame):
    # Floors: cuboid drop keeps >= 1024 pairs, crop keeps >= 1024 or 75%.
    # When a frame has fewer than 1024 pairs the cuboid floor is scaled to
    # 75% of the available pairs, matching the crop ratio.
    cloud, view, pairs = frame
    n = len(pairs)
    assert n > 1024
    for seed in range(100):
        ca = synth.augment_cloud(cloud, [pairs], np.random.default_rng(seed))
        assert len(ca.pairs[0]) >= synth.cuboid_pair_floor(n)
        aug = synth.augment_pair(cloud, view.image, pairs, seed)
        after_drop = len(synth.augment_cloud(cloud, [pairs], np.random.default_rng(seed)).pairs[0])
        assert len(aug.pairs) >= min(1024, math.ceil(0.75 * after_drop))
        assert pairs_valid(aug)


def test_augment_floor_scaled_for_small_pair_sets(frame):
    cloud, view, pairs = frame
    few = pairs.subset(np.arange(300))
    assert synth.cuboid_pair_floor(300) == 225
    for seed in range(100):
        aug = synth.augment_pair(cloud, view.image, few, seed)
        assert len(aug.pairs) >= math.ceil(0.75 * 225) - 1  # crop applies 75% to what the drop kept
        assert pairs_valid(aug)


def test_identity_augmentation(frame):
    cloud, view, pairs = frame
    aug = synth.augment_pair(cloud, view.image, pairs, 0, view.labelmap, rotate=False, p_flip=0,
                             p_drop=0, p_img_flip=0, crop=False)
    assert np.array_equal(aug.cloud.positions, cloud.positions)
    assert np.array_equal(aug.image, view.image)
    assert np.array_equal(aug.pairs.point_index, pairs.point_index)
    assert np.array_equal(aug.pairs.pixels, pairs.pixels)
    assert np.array_equal(aug.pairs.superpixels, pairs.superpixels)


def test_rotation_is_isometry(frame):
    cloud, _, pairs = frame
    for seed in range(10):
        ca = synth.augment_cloud(cloud, [pairs], np.random.default_rng(seed), p_drop=0)
        assert np.allclose(np.linalg.norm(ca.cloud.positions[:, :2], axis=1),
                           np.linalg.norm(cloud.positions[:, :2], axis=1), atol=1e-9, rtol=0)
        assert np.array_equal(ca.cloud.positions[:, 2], cloud.positions[:, 2])


def test_augment_pairs_keep_point_image_link(frame):
    cloud, view, pairs = frame
    for seed in range(10):
        aug = synth.augment_pair(cloud, view.image, pairs, seed, view.labelmap)
        # every surviving pair still points at a labelled pixel carrying its superpixel
        ids = aug.labelmap.ids[aug.pairs.pixels[:, 1], aug.pairs.pixels[:, 0]]
        assert np.array_equal(ids, aug.pairs.superpixels)
        # and at a point that survived the drop
        assert np.all(np.isin(aug.kept[aug.pairs.point_index], pairs.point_index))


# ---- corruptions

@pytest.fixture(scope="module")
def cloud1000():
    rng = np.random.default_rng(0)
    return synth.PointCloud(rng.normal(size=(1000, 3)), rng.random((1000, 1)),
                            rng.integers(0, 4, 1000), rings=rng.integers(0, 16, 1000))


def test_point_drop_counts(cloud1000):
    for level, left in ((1, 900), (2, 700), (3, 500)):
        assert len(synth.corrupt(cloud1000, CorruptionSpec("point-drop", level), 0)) == left


def test_jitter(cloud1000):
    same = synth.corrupt(cloud1000, CorruptionSpec("jitter", 0), 4)
    assert np.array_equal(same.positions, cloud1000.positions)
    for level, sigma in ((1, 0.02), (2, 0.05), (3, 0.10)):
        d = synth.corrupt(cloud1000, CorruptionSpec("jitter", level), 4).positions - cloud1000.positions
        assert abs(d.std() - sigma) < 0.1 * sigma


def test_beam_drop_removes_whole_rings(cloud1000):
    out = synth.corrupt(cloud1000, CorruptionSpec("beam-drop", 2), 1)
    for r in np.unique(cloud1000.rings):
        n = (out.rings == r).sum()
        assert n in (0, (cloud1000.rings == r).sum())
    single = cloud1000.subset(np.flatnonzero(cloud1000.rings == 3))
    for seed in range(10):
        n = len(synth.corrupt(single, CorruptionSpec("beam-drop", 3), seed))
        assert n in (0, len(single))


def test_corruption_deterministic_and_validated(cloud1000):
    for kind in synth.CORRUPTIONS:
        a = synth.corrupt(cloud1000, CorruptionSpec(kind, 2), 9)
        b = synth.corrupt(cloud1000, CorruptionSpec(kind, 2), 9)
        assert np.array_equal(a.positions, b.positions)
    with pytest.raises(ValueError):
        CorruptionSpec("snow", 1)
    with pytest.raises(ValueError):
        CorruptionSpec("point-drop", 4)
    assert str(CorruptionSpec.parse("jitter:3")) == "jitter:3"


def test_scene_spec_round_trip(tmp_path):
    spec = SceneSpec(seed=7, trajectory=synth.default_trajectory(4, yaw_rate=0.1))
    synth.save_scene_spec(spec, tmp_path / "scene.cfg")
    back = synth.load_scene_spec(tmp_path / "scene.cfg")
    assert (back.seed, back.extent, back.vehicles, back.poles, back.walls) == (7, 40.0, 6, 6, 3)
    for a, b in zip(spec.trajectory, back.trajectory):
        assert np.allclose(a.rotation, b.rotation, atol=1e-12) and np.allclose(a.translation, b.translation, atol=1e-12)


def test_ppm_round_trip(tmp_path, rng):
    img = rng.integers(0, 256, (5, 7, 3)).astype(np.uint8)
    synth.save_ppm(img, tmp_path / "a.ppm")
    assert np.array_equal(synth.load_ppm(tmp_path / "a.ppm"), img)
