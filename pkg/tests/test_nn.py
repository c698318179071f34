import numpy as np
import pytest

from seal import nn
from seal.nn import Tensor

from gradcheck import check

TOL = 1e-6
N_INSTANCES = 20


def _weights(rng, shape):
    return rng.normal(size=shape)


# each entry: (name, builder factory taking rng -> (build, arrays))
def _cases():
    def matmul(rng):
        w = _weights(rng, (4, 2))
        return (lambda a, b: nn.sum_all(nn.mul(nn.matmul(a, b), Tensor(w)))), [rng.normal(size=(4, 3)), rng.normal(size=(3, 2))]

    def add_bcast(rng):
        w = _weights(rng, (5, 3))
        return (lambda a, b: nn.sum_all(nn.mul(nn.add(a, b), Tensor(w)))), [rng.normal(size=(5, 3)), rng.normal(size=3)]

    def mul(rng):
        return (lambda a, b: nn.sum_all(nn.mul(a, b))), [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))]

    def scale(rng):
        w = _weights(rng, (3, 3))
        return (lambda a: nn.sum_all(nn.mul(nn.scale(a, -2.5), Tensor(w)))), [rng.normal(size=(3, 3))]

    def relu(rng):
        w = _weights(rng, (6, 2))
        x = rng.normal(size=(6, 2))
        x[np.abs(x) < 1e-3] = 0.5  # stay away from the kink
        return (lambda a: nn.sum_all(nn.mul(nn.relu(a), Tensor(w)))), [x]

    def exp(rng):
        w = _weights(rng, (3, 2))
        return (lambda a: nn.sum_all(nn.mul(nn.exp(a), Tensor(w)))), [rng.normal(size=(3, 2))]

    def log(rng):
        w = _weights(rng, (3, 2))
        return (lambda a: nn.sum_all(nn.mul(nn.log(a), Tensor(w)))), [rng.uniform(0.5, 3, (3, 2))]

    def transpose(rng):
        w = _weights(rng, (2, 3))
        return (lambda a: nn.sum_all(nn.mul(nn.transpose(a), Tensor(w)))), [rng.normal(size=(3, 2))]

    def reshape(rng):
        w = _weights(rng, (2, 6))
        return (lambda a: nn.sum_all(nn.mul(nn.reshape(a, (2, 6)), Tensor(w)))), [rng.normal(size=(3, 4))]

    def concat(rng):
        w = _weights(rng, (5, 2))
        return (lambda a, b: nn.sum_all(nn.mul(nn.concat([a, b]), Tensor(w)))), [rng.normal(size=(2, 2)), rng.normal(size=(3, 2))]

    def concat_cols(rng):
        w = _weights(rng, (2, 5))
        return (lambda a, b: nn.sum_all(nn.mul(nn.concat([a, b], axis=1), Tensor(w)))), [rng.normal(size=(2, 2)), rng.normal(size=(2, 3))]

    def mean_all(rng):
        return (lambda a: nn.mean_all(nn.mul(a, a))), [rng.normal(size=(4, 3))]

    def take_rows(rng):
        idx = rng.integers(0, 4, 7)
        w = _weights(rng, (7, 3))
        return (lambda a: nn.sum_all(nn.mul(nn.take_rows(a, idx), Tensor(w)))), [rng.normal(size=(4, 3))]

    def pick(rng):
        cols = rng.integers(0, 3, 5)
        w = _weights(rng, 5)
        return (lambda a: nn.sum_all(nn.mul(nn.pick(a, cols), Tensor(w)))), [rng.normal(size=(5, 3))]

    def logsumexp(rng):
        w = _weights(rng, 4)
        return (lambda a: nn.sum_all(nn.mul(nn.logsumexp(a), Tensor(w)))), [rng.normal(0, 3, (4, 5))]

    def l2_normalize(rng):
        w = _weights(rng, (4, 3))
        return (lambda a: nn.sum_all(nn.mul(nn.l2_normalize(a), Tensor(w)))), [rng.normal(size=(4, 3))]

    def pool_mean(rng):
        g = np.concatenate([np.arange(3), rng.integers(0, 3, 5)])
        w = _weights(rng, (3, 2))
        return (lambda a: nn.sum_all(nn.mul(nn.pool_by_group(a, g, 3, "mean"), Tensor(w)))), [rng.normal(size=(8, 2))]

    def pool_max(rng):
        g = np.concatenate([np.arange(3), rng.integers(0, 3, 5)])
        w = _weights(rng, (3, 2))
        return (lambda a: nn.sum_all(nn.mul(nn.pool_by_group(a, g, 3, "max"), Tensor(w)))), [rng.normal(size=(8, 2))]

    def gather_max(rng):
        idx = rng.integers(0, 6, (6, 3))
        w = _weights(rng, (6, 2))
        return (lambda a: nn.sum_all(nn.mul(nn.gather_max(a, idx), Tensor(w)))), [rng.normal(size=(6, 2))]

    def upsample(rng):
        w = _weights(rng, (8, 12, 2))
        return (lambda a: nn.sum_all(nn.mul(nn.bilinear_upsample(a, 4), Tensor(w)))), [rng.normal(size=(2, 3, 2))]

    def cross_entropy(rng):
        t = rng.integers(0, 4, 6)
        return (lambda a: nn.cross_entropy(a, t)), [rng.normal(size=(6, 4))]

    def composite(rng):
        t = rng.integers(0, 3, 5)

        def build(x, w1, w2):
            h = nn.relu(nn.matmul(x, w1))
            return nn.cross_entropy(nn.matmul(nn.l2_normalize(h), w2), t)
        return build, [rng.normal(size=(5, 4)), rng.normal(size=(4, 6)), rng.normal(size=(6, 3))]

    return {k: v for k, v in locals().items() if callable(v)}


CASES = _cases()


@pytest.mark.parametrize("name", sorted(CASES))
def test_gradients_match_finite_differences(name):
    for i in range(N_INSTANCES):
        rng = np.random.default_rng([7, i])
        build, arrays = CASES[name](rng)
        err = check(build, arrays)
        assert err < TOL, f"{name} instance {i}: relative error {err:.2e}"


def test_forward_examples():
    a = np.arange(9.0).reshape(3, 3)
    assert np.array_equal(nn.matmul(np.eye(3), a).data, a)
    assert np.array_equal(nn.relu(-np.array([1.0, 2.0])).data, [0.0, 0.0])
    assert np.allclose(nn.l2_normalize([[3.0, 4.0]]).data, [[0.6, 0.8]], atol=0)
    u = nn.l2_normalize(np.random.default_rng(0).normal(size=(4, 5))).data
    assert np.allclose(nn.l2_normalize(u).data, u, atol=1e-12, rtol=0)
    z = nn.l2_normalize(np.zeros((1, 3))).data
    assert np.all(np.isfinite(z))


def test_shape_errors():
    with pytest.raises(ValueError):
        nn.matmul(np.zeros((2, 3)), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        nn.pool_by_group(np.zeros((3, 2)), [0, 2, 2], 3)
    with pytest.raises(ValueError):
        nn.pool_by_group(np.zeros((3, 2)), [0, 1], 2)
    with pytest.raises(ValueError):
        nn.bilinear_upsample(np.zeros((2, 2, 1)), 0)


def test_pool_by_group_loop_oracle(rng):
    for _ in range(10):
        g = np.concatenate([np.arange(4), rng.integers(0, 4, 20)])
        x = rng.normal(size=(24, 3))
        mean = nn.pool_by_group(x, g, 4, "mean").data
        mx = nn.pool_by_group(x, g, 4, "max").data
        for k in range(4):
            assert np.allclose(mean[k], x[g == k].mean(0), atol=1e-12)
            assert np.array_equal(mx[k], x[g == k].max(0))
    x = rng.normal(size=(5, 2))
    assert np.allclose(nn.pool_by_group(x, np.zeros(5, int), 1).data, x.mean(0, keepdims=True))
    assert np.array_equal(nn.pool_by_group(x, np.arange(5), 5).data, x)


def test_pool_max_tie_goes_to_first_index():
    x = Tensor(np.array([[1.0], [1.0], [0.0]]), requires_grad=True)
    nn.sum_all(nn.pool_by_group(x, [0, 0, 0], 1, "max")).backward()
    assert x.grad.ravel().tolist() == [1.0, 0.0, 0.0]
    y = Tensor(np.array([[2.0], [2.0]]), requires_grad=True)
    nn.sum_all(nn.gather_max(y, np.array([[1, 0]]))).backward()
    assert y.grad.ravel().tolist() == [0.0, 1.0]


def test_pool_mean_idempotent_on_group_constant(rng):
    g = np.concatenate([np.arange(3), rng.integers(0, 3, 9)])
    means = nn.pool_by_group(rng.normal(size=(12, 2)), g, 3).data
    spread = means[g]
    again = nn.pool_by_group(spread, g, 3).data
    assert np.allclose(again, means, atol=1e-12)


def test_bilinear_upsample_examples(rng):
    const = np.full((3, 4, 2), 1.5)
    assert np.allclose(nn.bilinear_upsample(const, 4).data, 1.5, atol=1e-12)
    x = rng.normal(size=(3, 4, 2))
    assert np.array_equal(nn.bilinear_upsample(x, 1).data, x)
    ramp = np.array([[0.0, 1.0], [2.0, 3.0]])[..., None]
    out = nn.bilinear_upsample(ramp, 2).data[..., 0]
    # source coordinate of output i is (i + 0.5)/2 - 0.5, clamped to [0, 1]
    src = np.clip((np.arange(4) + 0.5) / 2 - 0.5, 0, 1)
    expect = np.array([[2 * sy + sx for sx in src] for sy in src])
    assert np.allclose(out, expect, atol=1e-12)


def test_linear_ramp_preserved_in_interior():
    ramp = np.add.outer(np.arange(5.0), 2 * np.arange(6.0))[..., None]
    out = nn.bilinear_upsample(ramp, 4).data[..., 0]
    ys, xs = (np.arange(20) + 0.5) / 4 - 0.5, (np.arange(24) + 0.5) / 4 - 0.5
    inner_y = (ys >= 0) & (ys <= 4)
    inner_x = (xs >= 0) & (xs <= 5)
    expect = np.add.outer(ys, 2 * xs)
    assert np.allclose(out[np.ix_(inner_y, inner_x)], expect[np.ix_(inner_y, inner_x)], atol=1e-12)


def test_backward_accumulates_and_visits_once():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = nn.mul(x, x)
    z = nn.add(y, y)  # shared subexpression
    nn.sum_all(z).backward()
    assert x.grad.tolist() == [8.0]
    nn.sum_all(nn.scale(x, 3.0)).backward()
    assert x.grad.tolist() == [11.0]


def test_heads_unit_norm(rng):
    head = nn.PointHead(8, 4, rng)
    out = head(Tensor(rng.normal(size=(10, 8)))).data
    assert np.allclose(np.linalg.norm(out, axis=1), 1, atol=1e-9)
    ih = nn.ImageHead(8, 64, 4, rng)  # paper-size head dimension
    out = ih(Tensor(rng.normal(size=(3, 5, 8)))).data
    assert out.shape == (12, 20, 64)
    assert np.allclose(np.linalg.norm(out, axis=2), 1, atol=1e-9)


def test_encoder_shapes(rng):
    enc = nn.PointEncoder(2, 16, 8, rng, neighbors=4)
    pos, feat = rng.normal(size=(30, 3)), rng.random((30, 2))
    out = enc.encode(pos, feat)
    assert out.shape == (30, 8)
    emb = enc.embed([(pos, feat, None), (pos[:10], feat[:10], np.array([1, 3]))])
    assert emb.shape == (32, 8)
    assert np.allclose(emb[:30], out.data, atol=1e-12)
    img = nn.ImageEncoder(16, 8, 4, rng)
    assert img.encode(rng.integers(0, 256, (24, 40, 3)).astype(np.uint8)).shape == (6, 10, 8)


def test_cosine_lr():
    assert nn.cosine_lr(0, 10, 0.5) == 0.5
    assert nn.cosine_lr(10, 10, 0.5) == 0.0 or abs(nn.cosine_lr(10, 10, 0.5)) < 1e-17
    assert abs(nn.cosine_lr(5, 10, 0.5) - 0.25) < 1e-15
    with pytest.raises(ValueError):
        nn.cosine_lr(11, 10, 0.5)


def test_sgd_examples():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = nn.SGD([p], 0.1, 10, momentum=0.9, weight_decay=0.0, dampening=0.1)
    opt.step([np.zeros(2)])
    assert p.data.tolist() == [1.0, -2.0]
    q = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = nn.SGD([q], 0.1, 10, momentum=0.9, weight_decay=0.0, dampening=0.0)
    opt.step([np.array([0.5, 1.0])])
    assert np.allclose(q.data, [1.0 - 0.05, -2.0 - 0.1], atol=1e-15)
    with pytest.raises(ValueError):
        opt.step([np.zeros(3)])


def test_sgd_hand_unrolled():
    theta, lr0, m, wd, d, total = 1.5, 0.2, 0.9, 1e-4, 0.1, 5
    grads = [0.3, -0.7, 0.2]
    p = Tensor(np.array([theta]), requires_grad=True)
    opt = nn.SGD([p], lr0, total, m, wd, d)
    buf = 0.0
    for k, g in enumerate(grads):
        opt.step([np.array([g])])
        gg = g + wd * theta
        buf = m * buf + (1 - d) * gg
        theta = theta - lr0 * 0.5 * (1 + np.cos(np.pi * k / total)) * buf
    assert abs(p.data[0] - theta) < 1e-15


def test_checkpoint_round_trip(tmp_path, rng):
    model = nn.MLP(3, 5, 2, rng)
    nn.save_checkpoint(model.state_dict(), tmp_path / "c.bin")
    raw = (tmp_path / "c.bin").read_bytes()
    assert raw.startswith(b"SEALCK1\n")
    other = nn.MLP(3, 5, 2, np.random.default_rng(99))
    other.load_state_dict(nn.load_checkpoint(tmp_path / "c.bin"))
    for (k, a), (_, b) in zip(sorted(model.named_parameters()), sorted(other.named_parameters())):
        assert np.array_equal(a.data, b.data), k
    with pytest.raises(ValueError):
        nn.MLP(3, 4, 2, rng).load_state_dict(nn.load_checkpoint(tmp_path / "c.bin"))
    (tmp_path / "t.bin").write_bytes(raw[:30])
    with pytest.raises(ValueError):
        nn.load_checkpoint(tmp_path / "t.bin")
