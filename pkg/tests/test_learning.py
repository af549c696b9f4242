import numpy as np
import pytest

from mixfed.learning import (
    CoverageStats,
    Dataset,
    Fragment,
    FragmentBuffer,
    MlpClassifier,
    ModelVector,
    RangeOutOfBounds,
    TooFewSamples,
    dirichlet_partition,
    evaluate,
    flatten,
    fragment_fedavg,
    fragment_model,
    local_train,
    make_mixture_task,
    mnist_cnn_shape_spec,
    reassemble,
)


def rng(seed=0):
    return np.random.default_rng(seed)


# -- partitioning -------------------------------------------------------------

def test_partition_disjoint_and_covering():
    train, _ = make_mixture_task(rng(1), n_train=1200)
    parts = dirichlet_partition(train, 6, alpha=10.0, rng=rng(2))
    assert sum(len(p) for p in parts) == len(train)
    seen = np.concatenate([p.x for p in parts])
    assert seen.shape[0] == train.x.shape[0]


def test_partition_concentration_limit():
    """alpha -> infinity gives per-node class proportions near the global."""
    train, _ = make_mixture_task(rng(1), n_train=12000, n_classes=4)
    parts = dirichlet_partition(train, 6, alpha=1e6, rng=rng(2))
    global_props = np.bincount(train.y, minlength=4) / len(train)
    for p in parts:
        props = np.bincount(p.y, minlength=4) / len(p)
        assert np.abs(props - global_props).max() < 0.01


def test_partition_deterministic():
    train, _ = make_mixture_task(rng(1), n_train=600)
    a = dirichlet_partition(train, 4, 10.0, rng(7))
    b = dirichlet_partition(train, 4, 10.0, rng(7))
    for pa, pb in zip(a, b):
        assert np.array_equal(pa.x, pb.x) and np.array_equal(pa.y, pb.y)


def test_partition_too_few_samples():
    data = Dataset(np.zeros((3, 2)), np.array([0, 0, 1]))
    with pytest.raises(TooFewSamples):
        dirichlet_partition(data, 10, 10.0, rng(0))


# -- model & training ----------------------------------------------------------

def test_tau_zero_rejected():
    model = MlpClassifier(4, 8, 2)
    w = model.init(rng(0))
    data = Dataset(np.zeros((10, 4)), np.zeros(10, dtype=int))
    with pytest.raises(ValueError):
        local_train(model, w, data, tau=0, eta=0.1, rng=rng(1))


def test_gradient_matches_finite_differences():
    model = MlpClassifier(5, 7, 3)
    w = model.init(rng(3))
    x = rng(4).normal(size=(12, 5))
    y = rng(5).integers(0, 3, size=12)
    _, grad = model.loss_and_grad(w, x, y)
    eps = 1e-5
    coords = rng(6).choice(w.dim, size=10, replace=False)
    for i in coords:
        wp, wm = w.copy(), w.copy()
        wp.values[i] += eps
        wm.values[i] -= eps
        num = (model.loss(wp, x, y) - model.loss(wm, x, y)) / (2 * eps)
        assert abs(num - grad[i]) / max(abs(num), 1e-8) < 1e-4


def test_local_training_learns_separable_task():
    train, test = make_mixture_task(rng(10), n_classes=2, n_train=2000, n_test=500)
    model = MlpClassifier(train.x.shape[1], 16, 2)
    w = model.init(rng(11))
    w = local_train(model, w, train, tau=200, eta=0.2, rng=rng(12))
    assert evaluate(model, w, test)["accuracy"] > 0.9


def test_random_weights_chance_level():
    accs = []
    for seed in range(8):
        train, test = make_mixture_task(rng(seed), n_classes=2, n_test=4000)
        model = MlpClassifier(train.x.shape[1], 16, 2)
        w = model.init(rng(100 + seed))
        accs.append(evaluate(model, w, test)["accuracy"])
    assert abs(np.mean(accs) - 0.5) < 0.05


def test_perfect_separator_accuracy_one():
    x = np.array([[1.0, 0.0], [-1.0, 0.0]] * 50)
    y = np.array([0, 1] * 50)
    model = MlpClassifier(2, 4, 2)
    w = model.init(rng(0))
    w = local_train(model, w, Dataset(x, y), tau=300, eta=0.5, rng=rng(1))
    assert evaluate(model, w, Dataset(x, y))["accuracy"] == 1.0


# -- fragments -----------------------------------------------------------------

def test_fragment_arithmetic_1000_elements():
    w = ModelVector(np.arange(1000, dtype=np.float64), [(1000,)])
    frags = fragment_model(w, frag_bytes=512, epoch=3)
    assert len(frags) == 8
    sizes = [f.end - f.start for f in frags]
    assert sizes == [128] * 7 + [104]
    assert all(f.epoch == 3 for f in frags)


def test_fragment_single_when_small():
    w = ModelVector(np.zeros(128), [(128,)])
    frags = fragment_model(w, 512, epoch=0)
    assert len(frags) == 1
    assert (frags[0].start, frags[0].end) == (0, 128)


def test_fragment_reassembly_bitwise():
    vals = rng(3).normal(size=777).astype("<f4").astype(np.float64)
    w = ModelVector(vals, [(777,)])
    frags = fragment_model(w, 512, epoch=1)
    back = reassemble(frags, w.shapes)
    assert np.array_equal(back.values, w.values)


def test_fragment_wire_roundtrip():
    f = Fragment(7, 10, 13, np.array([1.5, -2.0, 3.25], dtype="<f4").tobytes())
    raw = f.to_bytes()
    assert len(raw) == 12 + 12
    g = Fragment.from_bytes(raw)
    assert g == f
    assert np.allclose(g.array(), [1.5, -2.0, 3.25])


def test_mnist_cnn_shape_spec_flattens():
    shapes = mnist_cnn_shape_spec()
    tensors = [np.zeros(s) for s in shapes]
    w = flatten(tensors)
    assert w.dim == sum(int(np.prod(s)) for s in shapes)
    frags = fragment_model(w, 512, epoch=0)
    assert reassemble(frags, w.shapes).dim == w.dim


# -- aggregation ----------------------------------------------------------------

def test_fedavg_empty_contribution_is_identity():
    w = ModelVector(rng(1).normal(size=32), [(32,)])
    out, c = fragment_fedavg(w, [])
    assert np.array_equal(out.values, w.values)
    assert (c == 1).all()


def test_fedavg_hand_computed_example():
    """W=[2,4] plus one fragment [0,2) of [4,0]: a=[6,4], c=[2,2] -> [3,2]."""
    w = ModelVector(np.array([2.0, 4.0]), [(2,)])
    frag = Fragment(0, 0, 2, np.array([4.0, 0.0], dtype="<f4").tobytes())
    out, c = fragment_fedavg(w, [frag])
    assert np.allclose(out.values, [3.0, 2.0])
    assert c.tolist() == [2, 2]


@pytest.mark.parametrize("n_nodes,dim", [(3, 17), (4, 64), (5, 40)])
def test_fedavg_equals_brute_force_mean(n_nodes, dim):
    """Full coverage makes fragment averaging equal the plain mean."""
    r = rng(n_nodes * 100 + dim)
    models = [r.normal(size=dim) for _ in range(n_nodes)]
    quantized = [m.astype("<f4").astype(np.float64) for m in models]
    own = ModelVector(quantized[0].copy(), [(dim,)])
    frags = []
    for peer_vals in quantized[1:]:
        frags.extend(fragment_model(ModelVector(peer_vals, [(dim,)]), 36, epoch=0))
    out, c = fragment_fedavg(own, frags)
    oracle = np.mean(np.stack(quantized), axis=0)
    assert np.abs(out.values - oracle).max() < 1e-12
    assert (c == n_nodes).all()


def test_fedavg_fallback_is_bitwise():
    w = ModelVector(rng(2).normal(size=50), [(50,)])
    frag = Fragment(0, 0, 10, np.zeros(10, dtype="<f4").tobytes())
    out, _ = fragment_fedavg(w, [frag])
    assert np.array_equal(out.values[10:], w.values[10:])


def test_fedavg_permutation_invariant():
    r = rng(9)
    w = ModelVector(r.normal(size=30), [(30,)])
    frags = [
        Fragment(0, 0, 15, r.normal(size=15).astype("<f4").tobytes()),
        Fragment(0, 15, 30, r.normal(size=15).astype("<f4").tobytes()),
        Fragment(0, 0, 30, r.normal(size=30).astype("<f4").tobytes()),
    ]
    a, _ = fragment_fedavg(w, frags)
    b, _ = fragment_fedavg(w, frags[::-1])
    assert np.array_equal(a.values, b.values)


def test_fedavg_range_out_of_bounds():
    w = ModelVector(np.zeros(4), [(4,)])
    bad = Fragment(0, 2, 6, np.zeros(4, dtype="<f4").tobytes())
    with pytest.raises(RangeOutOfBounds):
        fragment_fedavg(w, [bad])


# -- buffer ----------------------------------------------------------------------

def test_buffer_dedups_identical_content():
    buf = FragmentBuffer()
    f = Fragment(1, 0, 4, np.ones(4, dtype="<f4").tobytes())
    g = Fragment(1, 0, 4, np.ones(4, dtype="<f4").tobytes())
    assert buf.add(f) is True
    assert buf.add(g) is False
    assert buf.count(1) == 1
    assert buf.duplicates == 1


def test_buffer_separates_epochs():
    buf = FragmentBuffer()
    payload = np.ones(4, dtype="<f4").tobytes()
    buf.add(Fragment(1, 0, 4, payload))
    buf.add(Fragment(2, 0, 4, payload))
    assert buf.count(1) == 1 and buf.count(2) == 1
    buf.drop_epochs_before(2)
    assert buf.count(1) == 0 and buf.count(2) == 1


def test_duplicate_delivery_does_not_double_count():
    buf = FragmentBuffer()
    w = ModelVector(np.array([2.0, 4.0]), [(2,)])
    frag = Fragment(0, 0, 2, np.array([4.0, 0.0], dtype="<f4").tobytes())
    buf.add(frag)
    buf.add(Fragment.from_bytes(frag.to_bytes()))  # same content, re-delivered
    out, c = fragment_fedavg(w, buf.epoch_fragments(0))
    assert c.tolist() == [2, 2]
    assert np.allclose(out.values, [3.0, 2.0])


def test_coverage_stats():
    c = np.array([1, 1, 2, 3, 4])
    stats = CoverageStats.from_counts(5, c)
    assert stats.epoch == 5
    assert stats.covered_fraction == pytest.approx(3 / 5)
    assert stats.mean_contributors == pytest.approx(3.0)
