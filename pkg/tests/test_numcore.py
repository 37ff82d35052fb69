import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from plugcompat.errors import ContainerError, ContractError, DegenerateInputError, DimensionError
from plugcompat.numcore import (
    DiffGraph,
    Tensor,
    concat,
    container,
    cosine,
    cross_entropy,
    embedding,
    exp,
    finite_diff_check,
    gelu,
    l2_normalize,
    layer_norm,
    log,
    matmul,
    relu,
    row_norms,
    softmax,
    softmax_rows,
    tanh,
)
from plugcompat.numcore.optim import SGD, Adam, cosine_lr


def check(forward, params, tol=1e-6):
    graph = DiffGraph(forward, params, trainable=set(params))
    for name in params:
        report = finite_diff_check(graph, name, tolerance=tol)
        assert report.passed, (name, report)


def test_matmul_identity_and_selection():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(matmul(a, Tensor(np.eye(2))).data, a.data)
    assert matmul(Tensor([[1.0, 0.0]]), Tensor([[2.0], [5.0]])).data.tolist() == [[2.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 2\)"):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2))))


def test_matmul_sum_gradient_is_ones_times_bt():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    ta = Tensor(a, requires_grad=True)
    matmul(ta, Tensor(b)).sum().backward()
    assert np.allclose(ta.grad, np.ones((3, 2)) @ b.T)
    graph = DiffGraph(lambda p: matmul(p["a"], p["b"]).sum(), {"a": a, "b": b}, {"a", "b"})
    assert finite_diff_check(graph, "a", h=1e-6).passed


def test_softmax_rows_examples():
    out = softmax_rows(Tensor([[0.0, 0.0], [1.0, 3.0], [1000.0, 0.0]])).data
    assert np.allclose(out[0], [0.5, 0.5])
    assert np.allclose(out[1], [0.11920, 0.88080], atol=1e-5)
    assert out[2, 0] == 1.0 and out[2, 1] < 1e-300 + 1e-12
    assert np.all(np.isfinite(out))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-1e3, 1e3)))
def test_softmax_rows_sum_to_one(x):
    out = softmax_rows(Tensor(x)).data
    assert np.all(out >= 0)
    assert np.allclose(out.sum(axis=1), 1.0, atol=1e-12, rtol=0)


def test_softmax_rows_rejects_non_matrix():
    with pytest.raises(DimensionError):
        softmax_rows(Tensor(np.zeros(3)))


def test_layer_norm_examples():
    g, b = Tensor(np.ones(2)), Tensor(np.zeros(2))
    assert np.allclose(layer_norm(Tensor([[3.0, 3.0]]), g, b).data, 0.0)
    out = layer_norm(Tensor([[1.0, -1.0]]), g, b).data
    assert np.allclose(out, [[1.0, -1.0]], atol=1e-5)
    assert np.allclose(out, np.array([[1.0, -1.0]]) / math.sqrt(1.0 + 1e-5), atol=1e-15)


def test_layer_norm_rejects_single_feature():
    with pytest.raises(DimensionError):
        layer_norm(Tensor([[1.0]]), Tensor([1.0]), Tensor([0.0]))


def test_cosine_examples():
    assert cosine(Tensor([1.0, 0.0]), Tensor([1.0, 0.0])) == 1.0
    assert cosine(Tensor([1.0, 0.0]), Tensor([0.0, 1.0])) == 0.0
    assert cosine(Tensor([1.0, 1.0]), Tensor([1.0, 0.0])) == pytest.approx(1 / math.sqrt(2), abs=1e-5)
    with pytest.raises(DegenerateInputError):
        cosine(Tensor([0.0, 0.0]), Tensor([1.0, 0.0]))


def test_l2_normalize_zero_row_raises():
    with pytest.raises(DegenerateInputError):
        l2_normalize(Tensor([[0.0, 0.0]]))


def test_cross_entropy_examples():
    assert float(cross_entropy(Tensor([[0.3, 0.3]]), [0])) == pytest.approx(math.log(2))
    assert float(cross_entropy(Tensor([[10.0, -10.0]]), [0])) == pytest.approx(2.06e-9, rel=1e-2)
    with pytest.raises(IndexError):
        cross_entropy(Tensor([[0.0, 1.0]]), [2])


@pytest.mark.parametrize("seed", range(20))
def test_elementary_gradients(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(3, 4))
    w = rng.normal(size=(4, 5))
    g = 1.0 + 0.1 * rng.normal(size=4)
    b = 0.1 * rng.normal(size=4)
    check(lambda p: (softmax(matmul(p["x"], p["w"])) * Tensor(rng_weights(seed, (3, 5)))).sum(), {"x": x, "w": w})
    check(lambda p: (layer_norm(p["x"], p["g"], p["b"]) * Tensor(rng_weights(seed, (3, 4)))).sum(),
          {"x": x, "g": g, "b": b})
    check(lambda p: cross_entropy(matmul(p["x"], p["w"]), [0, 2, 4]), {"x": x, "w": w})
    check(lambda p: (gelu(p["x"]) * tanh(p["x"]) + exp(p["x"] * 0.1)).sum(), {"x": x})
    check(lambda p: (l2_normalize(p["x"]) * Tensor(rng_weights(seed, (3, 4)))).sum(), {"x": x})
    check(lambda p: row_norms(p["x"]).mean() + log(p["x"] * p["x"] + 1.0).mean(), {"x": x})
    check(lambda p: (relu(p["x"] + 0.05) * p["x"]).sum(), {"x": x})


def rng_weights(seed, shape):
    return np.random.default_rng(1000 + seed).normal(size=shape)


def test_indexing_concat_embedding_gradients():
    rng = np.random.default_rng(3)
    table = rng.normal(size=(6, 3))
    other = rng.normal(size=(2, 3))
    ids = np.array([[1, 4, 1]])

    def fwd(p):
        e = embedding(p["table"], ids)[0]
        h = concat([p["other"], e], axis=0)
        return (h[1:4] * h[1:4]).sum()

    check(fwd, {"table": table, "other": other})


def test_linear_graph_is_exact():
    a = np.random.default_rng(0).normal(size=(4, 3))
    c = np.random.default_rng(1).normal(size=(4, 3))
    graph = DiffGraph(lambda p: (p["a"] * Tensor(c)).sum(), {"a": a}, {"a"})
    assert finite_diff_check(graph, "a").max_rel_error < 1e-9


def test_corrupted_gradient_fails():
    x = np.random.default_rng(0).normal(size=(3, 3))
    graph = DiffGraph(lambda p: (tanh(p["x"]) * p["x"]).sum(), {"x": x}, {"x"})
    _, grads = graph.gradients()
    assert finite_diff_check(graph, "x").passed
    assert not finite_diff_check(graph, "x", analytic=grads["x"] * 1.1).passed


def test_non_scalar_output_is_contract_error():
    graph = DiffGraph(lambda p: p["x"] * 2.0, {"x": np.ones(3)}, {"x"})
    with pytest.raises(ContractError):
        graph.gradients()
    with pytest.raises(ContractError):
        finite_diff_check(graph, "x")


def test_frozen_slots_get_no_gradient():
    graph = DiffGraph(lambda p: (p["x"] * p["y"]).sum(), {"x": np.ones(2), "y": np.ones(2)}, {"x"})
    _, grads = graph.gradients()
    assert set(grads) == {"x"}


def test_backward_is_deterministic():
    rng = np.random.default_rng(7)
    x, w = rng.normal(size=(5, 6)), rng.normal(size=(6, 6))

    def run():
        t = Tensor(x, requires_grad=True)
        h = t
        for _ in range(3):
            h = gelu(matmul(h, Tensor(w))) + h
        (h * h).mean().backward()
        return t.grad

    assert run().tobytes() == run().tobytes()


# -- container ----------------------------------------------------------------


names = st.text(alphabet=st.characters(min_codepoint=33, max_codepoint=0x2FF), min_size=1, max_size=12)
shapes = st.lists(st.integers(0, 4), min_size=0, max_size=3).map(tuple)


@settings(max_examples=50, deadline=None)
@given(st.dictionaries(names, shapes, max_size=4), st.integers(0, 2**32 - 1))
def test_container_round_trip(spec, seed):
    rng = np.random.default_rng(seed)
    tensors = {k: rng.normal(size=s) for k, s in spec.items()}
    blob = container.dumps(tensors)
    back = container.loads(blob)
    assert set(back) == set(tensors)
    for k in tensors:
        assert back[k].shape == tensors[k].shape
        assert back[k].tobytes() == tensors[k].tobytes()
    assert container.dumps(back) == blob


def test_container_layout():
    blob = container.dumps({"b": np.array([1.5]), "a": np.zeros((2, 1))})
    assert blob[:4] == b"PCMP"
    assert int.from_bytes(blob[4:8], "little") == 1
    assert int.from_bytes(blob[8:12], "little") == 2
    # sorted order: "a" first
    assert int.from_bytes(blob[12:16], "little") == 1 and blob[16:17] == b"a"


def test_container_rejects_garbage(tmp_path):
    with pytest.raises(ContainerError):
        container.loads(b"NOPE" + bytes(8))
    with pytest.raises(ContainerError):
        container.loads(container.dumps({"x": np.ones(4)})[:-3])
    p = tmp_path / "t.pcmp"
    container.save(p, {"x": np.arange(3.0)})
    assert container.load(p)["x"].tolist() == [0.0, 1.0, 2.0]


# -- optimisers -------------------------------------------------------------------


def test_cosine_lr_endpoints():
    assert cosine_lr(2e-3, 0, 100) == pytest.approx(2e-3)
    assert cosine_lr(2e-3, 100, 100) == pytest.approx(0.0, abs=1e-18)
    assert cosine_lr(2e-3, 50, 100) == pytest.approx(1e-3)


def test_sgd_and_adam_minimise_quadratic():
    for make in (lambda p: SGD(p, 0.1, total_steps=200), lambda p: Adam(p, 0.05, total_steps=400)):
        params = {"x": np.array([3.0, -2.0])}
        opt = make(params)
        for _ in range(opt.total_steps):
            opt.step({"x": 2 * params["x"]})
        assert np.all(np.abs(params["x"]) < 0.05)
