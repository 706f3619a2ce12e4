import numpy as np
import pytest

from graphopt import tensor as T
from graphopt.tensor import ParamStore, Tensor, adam_step, grad_check


def test_matmul_identity_and_grad():
    x = Tensor(np.arange(9.0).reshape(3, 3), requires_grad=True)
    out = T.matmul(Tensor(np.eye(3)), x)
    assert np.array_equal(out.data, x.data)
    T.sum_all(out).backward()
    assert np.array_equal(x.grad, np.ones((3, 3)))


def test_softmax_uniform():
    out = T.softmax(Tensor([[0.0, 0.0, 0.0]]))
    assert np.allclose(out.data, [[1 / 3, 1 / 3, 1 / 3]])


def test_softmax_rows_sum_to_one(rng):
    x = Tensor(rng.normal(size=(20, 7)) * 5)
    rows = T.softmax(x).data.sum(axis=1)
    assert np.all(np.abs(rows - 1.0) < 1e-12)


def test_attention_weights_rows_sum_to_one(rng):
    q = Tensor(rng.normal(size=(4, 6)))
    k = Tensor(rng.normal(size=(5, 6)))
    scores = T.scale(T.matmul(q, T.transpose(k)), 1 / np.sqrt(6))
    weights = T.softmax(scores)
    assert np.all(np.abs(weights.data.sum(axis=1) - 1.0) < 1e-12)


def test_layer_norm_constant_row_is_zero():
    out = T.layer_norm(Tensor([[3.0, 3.0, 3.0, 3.0]]), Tensor(np.ones(4)),
                       Tensor(np.zeros(4)), eps=1e-5)
    assert np.array_equal(out.data, np.zeros((1, 4)))


def test_layer_norm_standardizes(rng):
    # rows scaled up so eps barely biases the variance
    x = Tensor(rng.normal(size=(6, 32)) * 10)
    out = T.layer_norm(x, Tensor(np.ones(32)), Tensor(np.zeros(32)))
    assert np.all(np.abs(out.data.mean(axis=1)) < 1e-10)
    assert np.all(np.abs(out.data.var(axis=1) - 1.0) < 1e-6)


def test_segment_max_forward_and_empty():
    vals = Tensor([[1.0, 5.0], [3.0, 2.0], [0.0, 9.0]])
    out = T.segment_max(vals, [0, 0, 2], 3)
    assert np.array_equal(out.data, [[3.0, 5.0], [0.0, 0.0], [0.0, 9.0]])


def test_segment_max_backward_first_index_ties():
    vals = Tensor([[2.0], [2.0]], requires_grad=True)
    out = T.segment_max(vals, [0, 0], 1)
    T.sum_all(out).backward()
    assert np.array_equal(vals.grad, [[1.0], [0.0]])


def test_sigmoid_gradient_precise():
    err = grad_check(lambda x: T.sum_all(T.sigmoid(x)), [np.array([0.5])])
    assert err < 1e-6


def test_stop_gradient_blocks():
    x = Tensor(np.ones(3), requires_grad=True)
    out = T.sum_all(T.stop_gradient(T.scale(x, 2.0)))
    out.backward()
    assert x.grad is None


def test_take_per_row():
    x = Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
    out = T.take_per_row(x, [1, 0])
    assert np.array_equal(out.data, [2.0, 3.0])
    T.sum_all(out).backward()
    assert np.array_equal(x.grad, [[0, 1], [1, 0]])


def test_clip_and_minimum():
    x = Tensor([0.5, 1.5], requires_grad=True)
    out = T.sum_all(T.clip(x, 0.8, 1.2))
    out.backward()
    assert np.array_equal(x.grad, [0.0, 0.0])
    a = Tensor([1.0, 5.0], requires_grad=True)
    b = Tensor([2.0, 4.0], requires_grad=True)
    T.sum_all(T.minimum(a, b)).backward()
    assert np.array_equal(a.grad, [1.0, 0.0])
    assert np.array_equal(b.grad, [0.0, 1.0])


def _away_from_kinks(rng, shape, margin=1e-3):
    x = rng.normal(size=shape)
    x = np.where(np.abs(x) < margin, x + np.sign(x + 1e-9) * margin, x)
    return x


PRIMITIVES = [
    ("matmul", lambda a, b: T.sum_all(T.matmul(a, b)), [(3, 4), (4, 2)]),
    ("add", lambda a, b: T.sum_all(T.mul(T.add(a, b), T.add(a, b))), [(3, 4), (4,)]),
    ("mul", lambda a, b: T.sum_all(T.mul(a, b)), [(3, 4), (3, 4)]),
    ("relu", lambda a: T.sum_all(T.mul(T.relu(a), T.relu(a))), [(4, 4)]),
    ("sigmoid", lambda a: T.sum_all(T.sigmoid(a)), [(4, 4)]),
    ("softmax", lambda a: T.sum_all(T.mul(T.softmax(a), T.softmax(a))), [(3, 5)]),
    ("log_softmax", lambda a: T.sum_all(T.mul(T.log_softmax(a), T.log_softmax(a))),
     [(3, 5)]),
    ("concat", lambda a, b: T.sum_all(T.mul(T.concat([a, b], axis=1),
                                            T.concat([a, b], axis=1))), [(3, 2), (3, 3)]),
    ("slice", lambda a: T.sum_all(T.mul(T.slice_axis(a, 1, 1, 3),
                                        T.slice_axis(a, 1, 1, 3))), [(3, 5)]),
    ("gather", lambda a: T.sum_all(T.mul(T.gather_rows(a, [0, 2, 2]),
                                         T.gather_rows(a, [0, 2, 2]))), [(4, 3)]),
    ("mean_rows", lambda a: T.sum_all(T.mul(T.mean_rows(a), T.mean_rows(a))), [(5, 3)]),
    ("layer_norm", lambda x, g, b: T.sum_all(
        T.mul(T.layer_norm(x, g, b), T.layer_norm(x, g, b))), [(3, 6), (6,), (6,)]),
    ("attention", lambda q, k, v: T.sum_all(T.scaled_dot_attention(q, k, v)),
     [(3, 4), (5, 4), (5, 2)]),
    ("exp", lambda a: T.sum_all(T.exp(a)), [(3, 3)]),
    ("log", lambda a: T.sum_all(T.log(T.add(T.mul(a, a), Tensor(np.ones((3, 3)))))),
     [(3, 3)]),
    ("transpose", lambda a: T.sum_all(T.mul(T.transpose(a), T.transpose(a))), [(3, 5)]),
    ("sum_axis", lambda a: T.sum_all(T.mul(T.sum_axis(a), T.sum_axis(a))), [(4, 3)]),
]


@pytest.mark.parametrize("name,fn,shapes", PRIMITIVES, ids=[p[0] for p in PRIMITIVES])
def test_primitive_grad_checks(name, fn, shapes, rng):
    worst = 0.0
    for _ in range(5):
        inputs = [_away_from_kinks(rng, s) for s in shapes]
        worst = max(worst, grad_check(fn, inputs))
    assert worst < 1e-3, f"{name}: max rel err {worst}"


def test_segment_max_grad_away_from_ties(rng):
    seg = np.array([0, 0, 1, 1, 1, 3])

    def fn(a):
        return T.sum_all(T.mul(T.segment_max(a, seg, 4), T.segment_max(a, seg, 4)))

    for _ in range(5):
        # distinct values, no ties within segments
        x = rng.permutation(np.arange(6 * 3, dtype=float) + 1).reshape(6, 3) / 5.0
        assert grad_check(fn, [x]) < 1e-3


class TestAdam:
    def test_zero_gradient_no_move(self):
        store = ParamStore()
        p = store.add("w", [1.0, 2.0])
        store.adam_step(lr=0.1)
        assert np.array_equal(p.data, [1.0, 2.0])

    def test_single_step_magnitude(self):
        # g=1 at t=1: bias-corrected m/sqrt(v) = 1, so the move is ~lr
        store = ParamStore()
        p = store.add("w", [1.0])
        p.grad = np.array([1.0])
        store.adam_step(lr=0.1)
        assert p.data[0] == pytest.approx(1.0 - 0.1, abs=1e-6)
        assert p.grad is None  # cleared

    def test_constant_gradient_monotone(self):
        store = ParamStore()
        p = store.add("w", [5.0])
        prev = 5.0
        for _ in range(10):
            p.grad = np.array([1.0])
            store.adam_step(lr=0.05)
            assert p.data[0] < prev
            prev = p.data[0]

    def test_module_level_wrapper(self):
        store = ParamStore()
        p = store.add("w", [1.0])
        p.grad = np.array([1.0])
        adam_step(store, {"lr": 0.5})
        assert p.data[0] == pytest.approx(0.5, abs=1e-6)


def test_param_store_roundtrip(tmp_path, rng):
    store = ParamStore()
    store.add("a/w", rng.normal(size=(3, 4)))
    store.add("b", rng.normal(size=7))
    path = tmp_path / "ckpt.npz"
    store.save(path)
    other = ParamStore()
    other.load(path)
    for name in store.names():
        assert np.array_equal(store[name].data, other[name].data)


def test_param_store_clone_independent():
    store = ParamStore()
    store.add("w", [1.0])
    other = store.clone()
    other["w"].data[0] = 9.0
    assert store["w"].data[0] == 1.0


def test_backward_accumulates_over_reuse():
    x = Tensor([2.0], requires_grad=True)
    y = T.add(T.mul(x, x), x)  # x^2 + x -> grad 2x + 1 = 5
    T.sum_all(y).backward()
    assert x.grad[0] == pytest.approx(5.0)
