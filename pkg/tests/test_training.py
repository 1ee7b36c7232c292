import math

import numpy as np
import pytest

from objreid.errors import ConfigError, DataError
from objreid.training import (FileFeatures, HeadParams, ReferenceEncoder,
                              TrainConfig, _forward_cache, cosine_lr,
                              head_backward, head_forward, read_checkpoint,
                              read_features, supcon_loss, train, triplet_loss,
                              write_checkpoint, write_features)


def small_params(rng, in_dim=8, hidden=8, out_dim=8):
    return HeadParams.init(in_dim, hidden, out_dim, rng)


# ---------------------------------------------------------------------------
# head forward / backward

def test_head_selects_unit_basis():
    # one positive hidden unit routed to one output coordinate
    in_dim, hidden, out = 4, 3, 5
    p = HeadParams(w1=np.zeros((in_dim, hidden)), b1=np.zeros(hidden),
                   w2=np.zeros((hidden, out)), b2=np.zeros(out))
    p.w1[0, 1] = 1.0       # hidden unit 1 reads input 0
    p.w2[1, 2] = 1.0       # output coord 2 reads hidden unit 1
    z = head_forward(np.array([3.0, 0, 0, 0]), p)
    expected = np.zeros(out)
    expected[2] = 1.0
    assert np.allclose(z, expected)


def test_head_output_unit_norm():
    rng = np.random.default_rng(0)
    p = small_params(rng, 16, 12, 6)
    h = rng.standard_normal((40, 16))
    z = head_forward(h, p)
    assert np.allclose(np.linalg.norm(z, axis=1), 1.0, atol=1e-6)


def test_head_zero_input_guarded():
    p = HeadParams(w1=np.zeros((4, 3)), b1=np.zeros(3),
                   w2=np.zeros((3, 2)), b2=np.zeros(2))
    z = head_forward(np.zeros(4), p)
    assert np.all(np.isfinite(z))


def fd_param_grad(h, params, g, name, step=1e-5):
    """Central differences of L = sum(g * z) w.r.t. one parameter tensor."""
    base = getattr(params, name)
    num = np.zeros_like(base)
    it = np.nditer(base, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = base[idx]
        base[idx] = orig + step
        zp = head_forward(h, params)
        base[idx] = orig - step
        zm = head_forward(h, params)
        base[idx] = orig
        num[idx] = ((zp - zm) * g).sum() / (2 * step)
        it.iternext()
    return num


def test_head_jacobian_matches_finite_differences():
    rng = np.random.default_rng(1)
    params = small_params(rng)
    h = rng.standard_normal((5, 8))
    g = rng.standard_normal((5, 8))
    z, cache = _forward_cache(h, params)
    grads, dh = head_backward(cache, g)
    for name in ("w1", "b1", "w2", "b2"):
        num = fd_param_grad(h, params, g, name)
        ana = getattr(grads, name)
        rel = np.abs(num - ana) / np.maximum(1e-8, np.abs(num) + np.abs(ana))
        assert rel.max() < 1e-5, name
    # input gradient as well
    num_h = np.zeros_like(h)
    step = 1e-5
    for i in range(h.shape[0]):
        for j in range(h.shape[1]):
            hp, hm = h.copy(), h.copy()
            hp[i, j] += step
            hm[i, j] -= step
            num_h[i, j] = ((head_forward(hp, params) - head_forward(hm, params)) * g).sum() / (2 * step)
    rel = np.abs(num_h - dh) / np.maximum(1e-8, np.abs(num_h) + np.abs(dh))
    assert rel.max() < 1e-5


# ---------------------------------------------------------------------------
# supcon loss

def unit_rows(rng, n, d):
    z = rng.standard_normal((n, d))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def test_supcon_two_identical_zero():
    z = np.tile([[1.0, 0.0, 0.0]], (2, 1))
    loss, _ = supcon_loss(z, [7, 7], 1.0)
    assert loss == 0.0


def test_supcon_three_identical_log2():
    z = np.tile([[0.0, 1.0, 0.0]], (3, 1))
    loss, _ = supcon_loss(z, [4, 4, 4], 1.0)
    assert abs(loss - math.log(2.0)) < 1e-12


def test_supcon_gradient_finite_differences():
    rng = np.random.default_rng(2)
    z = unit_rows(rng, 16, 8)
    labels = rng.integers(0, 4, 16)
    _, grad = supcon_loss(z, labels, 0.07)
    step = 1e-5
    num = np.zeros_like(z)
    for i in range(16):
        for j in range(8):
            zp, zm = z.copy(), z.copy()
            zp[i, j] += step
            zm[i, j] -= step
            num[i, j] = (supcon_loss(zp, labels, 0.07)[0]
                         - supcon_loss(zm, labels, 0.07)[0]) / (2 * step)
    rel = np.abs(num - grad) / np.maximum(1e-8, np.abs(num) + np.abs(grad))
    assert rel.max() < 1e-5


def test_supcon_nonnegative_on_unit_embeddings():
    # each anchor term is logsumexp(denominator) - s_ip >= 0 because the
    # denominator includes the positive term itself
    rng = np.random.default_rng(3)
    for _ in range(20):
        z = unit_rows(rng, 12, 6)
        labels = rng.integers(0, 3, 12)
        loss, _ = supcon_loss(z, labels, 0.5)
        assert loss >= -1e-12


def test_supcon_permutation_invariance():
    rng = np.random.default_rng(4)
    z = unit_rows(rng, 10, 5)
    labels = rng.integers(0, 3, 10)
    l0, g0 = supcon_loss(z, labels, 0.2)
    perm = rng.permutation(10)
    l1, g1 = supcon_loss(z[perm], labels[perm], 0.2)
    assert abs(l0 - l1) < 1e-12
    assert np.allclose(g0[perm], g1, atol=1e-12)


def test_supcon_rotation_invariance():
    rng = np.random.default_rng(5)
    z = unit_rows(rng, 10, 5)
    labels = rng.integers(0, 3, 10)
    q, _ = np.linalg.qr(rng.standard_normal((5, 5)))
    l0, _ = supcon_loss(z, labels, 0.2)
    l1, _ = supcon_loss(z @ q, labels, 0.2)
    assert abs(l0 - l1) < 1e-10


def test_supcon_no_log_variant_differs():
    rng = np.random.default_rng(6)
    z = unit_rows(rng, 8, 4)
    labels = np.array([0, 0, 1, 1, 2, 2, 3, 3])
    with_log, _ = supcon_loss(z, labels, 0.5, apply_log=True)
    without, _ = supcon_loss(z, labels, 0.5, apply_log=False)
    assert with_log != without


def test_supcon_bad_tau():
    with pytest.raises(ConfigError):
        supcon_loss(np.eye(3), [0, 0, 1], 0.0)


# ---------------------------------------------------------------------------
# triplet loss

def test_triplet_zero_when_anchor_equals_positive():
    a = np.array([1.0, 0.0])
    n = np.array([0.0, 1.0])
    loss, grads = triplet_loss(a, a, n, margin=0.3)  # ||a-n|| = sqrt2 > margin
    assert loss == 0.0
    assert all(np.all(g == 0) for g in grads)


def test_triplet_anchor_equals_negative():
    a = np.array([1.0, 0.0])
    p = np.array([0.0, 1.0])
    loss, _ = triplet_loss(a, p, a, margin=0.3)
    assert abs(loss - (math.sqrt(2) + 0.3)) < 1e-12


def test_triplet_gradient_finite_differences():
    rng = np.random.default_rng(7)
    a, p, n = rng.standard_normal((3, 6))
    loss, (da, dp, dn) = triplet_loss(a, p, n, margin=0.5)
    if loss <= 1e-3:  # stay away from the kink
        a = a + 1.0
        loss, (da, dp, dn) = triplet_loss(a, p, n, margin=0.5)
    step = 1e-5
    for vec, grad in ((a, da), (p, dp), (n, dn)):
        num = np.zeros_like(vec)
        for j in range(vec.size):
            vp, vm = vec.copy(), vec.copy()
            vp[j] += step
            vm[j] -= step
            args = [a, p, n]
            args[[id(a), id(p), id(n)].index(id(vec))] = vp
            lp = triplet_loss(*args, margin=0.5)[0]
            args[[id(a), id(p), id(n)].index(id(vec))] = vm
            lm = triplet_loss(*args, margin=0.5)[0]
            num[j] = (lp - lm) / (2 * step)
        rel = np.abs(num - grad) / np.maximum(1e-8, np.abs(num) + np.abs(grad))
        assert rel.max() < 1e-5


# ---------------------------------------------------------------------------
# schedule

def test_cosine_lr_endpoints():
    assert cosine_lr(0, 100, 0.01, 0.001) == 0.01
    assert abs(cosine_lr(100, 100, 0.01, 0.001) - 0.001) < 1e-15
    assert abs(cosine_lr(50, 100, 0.01, 0.001) - 0.0055) < 1e-15
    assert cosine_lr(150, 100, 0.01, 0.001) == 0.001


# ---------------------------------------------------------------------------
# training loop

def separable_data(rng, n_instances=6, views=8, dim=32):
    bases = unit_rows(rng, n_instances, dim)
    h, labels = [], []
    for i in range(n_instances):
        for _ in range(views):
            h.append(bases[i] + 0.05 * rng.standard_normal(dim))
            labels.append(i)
    return np.array(h), np.array(labels)


def test_train_stops_after_patience_with_constant_metric():
    rng = np.random.default_rng(8)
    h, labels = separable_data(rng)
    cfg = TrainConfig(epochs_max=500, patience=10, instances_per_batch=3,
                      views_per_instance=2, hidden_dim=16, embed_dim=8, seed=0)
    _, history = train(h, labels, h[:8], labels[:8], cfg, lambda z: 0.5)
    # first epoch improves over -inf, then exactly `patience` non-improving
    assert len(history) == 11


def test_train_history_length_is_best_epoch_plus_patience():
    rng = np.random.default_rng(9)
    h, labels = separable_data(rng)
    maps = iter([0.1, 0.4, 0.3] + [0.2] * 50)
    cfg = TrainConfig(epochs_max=500, patience=5, instances_per_batch=3,
                      views_per_instance=2, hidden_dim=16, embed_dim=8, seed=0)
    _, history = train(h, labels, h[:8], labels[:8], cfg,
                       lambda z: next(maps))
    assert len(history) == 2 + 5  # best at epoch 2


def test_train_deterministic():
    rng = np.random.default_rng(10)
    h, labels = separable_data(rng)
    cfg = TrainConfig(epochs_max=5, patience=10, instances_per_batch=3,
                      views_per_instance=2, hidden_dim=16, embed_dim=8, seed=3)

    def run():
        return train(h, labels, h[:8], labels[:8], cfg,
                     lambda z: float(z.sum()))

    p1, h1 = run()
    p2, h2 = run()
    assert all(np.array_equal(getattr(p1, n), getattr(p2, n))
               for n in ("w1", "b1", "w2", "b2"))
    assert h1 == h2


def test_train_few_views_sampled_with_replacement():
    rng = np.random.default_rng(11)
    h, labels = separable_data(rng, n_instances=3, views=2)
    cfg = TrainConfig(epochs_max=3, patience=10, instances_per_batch=2,
                      views_per_instance=4, hidden_dim=8, embed_dim=4, seed=0)
    _, history = train(h, labels, h, labels, cfg, lambda z: 0.0)
    assert len(history) == 3


def test_train_triplet_mode_runs():
    rng = np.random.default_rng(12)
    h, labels = separable_data(rng)
    cfg = TrainConfig(epochs_max=3, patience=10, loss="triplet",
                      instances_per_batch=3, views_per_instance=2,
                      hidden_dim=16, embed_dim=8, seed=0)
    _, history = train(h, labels, h[:8], labels[:8], cfg, lambda z: 0.0)
    assert len(history) == 3
    assert all(row["train_loss"] >= 0 for row in history)


def test_train_empty_val_rejected():
    rng = np.random.default_rng(13)
    h, labels = separable_data(rng)
    cfg = TrainConfig(hidden_dim=8, embed_dim=4)
    with pytest.raises(ConfigError):
        train(h, labels, np.empty((0, h.shape[1])), np.empty(0), cfg, lambda z: 0.0)


# ---------------------------------------------------------------------------
# file formats

def test_features_roundtrip(tmp_path):
    rng = np.random.default_rng(14)
    m = rng.standard_normal((12, 16)).astype(np.float32)
    ids = [f"obs{i:03d}" for i in range(12)]
    path = tmp_path / "features.bin"
    write_features(path, m, ids)
    m2, ids2 = read_features(path)
    assert np.array_equal(m, m2) and ids == ids2
    ff = FileFeatures.load(path)
    assert np.array_equal(ff.get("obs003"), m[3])
    assert np.array_equal(ff.for_ids(["obs005", "obs001"]), m[[5, 1]])
    with pytest.raises(DataError):
        ff.get("missing")


def test_features_exact_byte_layout(tmp_path):
    import struct
    m = np.array([[1.5, -2.0], [0.25, 8.0]], dtype=np.float32)
    path = tmp_path / "two.bin"
    write_features(path, m, ["a", "b"])
    raw = path.read_bytes()
    assert raw[:4] == b"CLVR"
    version, count, dim = struct.unpack("<III", raw[4:16])
    assert (version, count, dim) == (1, 2, 2)
    assert np.array_equal(np.frombuffer(raw[16:], dtype="<f4").reshape(2, 2), m)
    import json
    recs = [json.loads(l) for l in open(str(path) + ".rows.jsonl")]
    assert recs == [{"row": 0, "obs_id": "a"}, {"row": 1, "obs_id": "b"}]


def test_features_bad_magic(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(DataError):
        read_features(path)


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(15)
    p = HeadParams.init(16, 8, 4, rng)
    path = tmp_path / "ck.bin"
    write_checkpoint(path, p, state={"epoch": 3, "best_map": 0.5})
    p2, state = read_checkpoint(path)
    assert state == {"epoch": 3, "best_map": 0.5}
    for n in ("w1", "b1", "w2", "b2"):
        assert np.array_equal(getattr(p, n), getattr(p2, n))


def test_reference_encoder_deterministic():
    rng = np.random.default_rng(16)
    img = rng.integers(0, 256, (224, 224, 3), dtype=np.int64).astype(np.uint8)
    e1 = ReferenceEncoder(dim=64, seed=1)
    e2 = ReferenceEncoder(dim=64, seed=1)
    assert np.array_equal(e1.encode(img), e2.encode(img))
    assert e1.encode(img).shape == (64,)
