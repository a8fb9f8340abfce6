import numpy as np
import pytest

from core.errors import (
    DegenerateRowError, EmptySelectionError, RankError, ShapeError, VocabularyIndexError,
)
from core.ndcore import (
    AdamState, Graph, Tensor, adam_step, backward, bce_with_logits, cross_entropy,
    embedding_lookup, finite_difference_check, gather_rows, gelu, get_default_dtype, getitem,
    is_grad_enabled, layer_norm, masked_softmax, matmul, mse, no_grad, precision, reshape,
    scatter_rows, tanh, tensor_mean, tensor_sum, transpose, warmup_lr,
)


def leaf(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


def test_add_broadcast_accumulates_over_batch():
    a = Tensor(np.ones((2, 3)), requires_grad=True)
    b = Tensor(np.zeros(3), requires_grad=True)
    backward(tensor_sum(a + b))
    assert np.array_equal(b.grad, np.full(3, 2.0))
    assert np.array_equal(a.grad, np.ones((2, 3)))


def test_reused_tensor_accumulates_gradient():
    x = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    backward(tensor_sum(x * x))
    assert np.allclose(x.grad, 2 * x.data)


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeError) as exc:
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    assert "(2, 3)" in str(exc.value)


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(RankError):
        backward(x * 2.0)


def test_graph_is_topologically_ordered():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    y = gelu(matmul(x, x))
    loss = tensor_sum(tanh(y) + y)
    graph = Graph.from_root(loss)
    seen = set()
    for node in graph:
        for parent in node._parents:
            if parent.requires_grad:
                assert id(parent) in seen
        seen.add(id(node))
    assert graph.nodes[-1] is loss


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        assert not is_grad_enabled()
        y = x * 3.0
    assert not y.requires_grad
    assert is_grad_enabled()


def test_precision_is_restored():
    assert get_default_dtype() == np.float32
    with precision(np.float64):
        assert get_default_dtype() == np.float64
    assert get_default_dtype() == np.float32


def test_masked_softmax_zeroes_masked_entries_exactly():
    logits = Tensor(np.array([[1.0, 2.0, 3.0], [0.5, 0.5, 9.0]]))
    mask = np.array([[True, False, True], [True, True, False]])
    probs = masked_softmax(logits, mask).data
    assert probs[0, 1] == 0.0
    assert probs[1, 2] == 0.0
    assert np.allclose(probs.sum(axis=-1), 1.0)


def test_masked_softmax_rejects_active_row_without_keys():
    mask = np.array([[True, True], [False, False]])
    with pytest.raises(DegenerateRowError):
        masked_softmax(Tensor(np.zeros((2, 2))), mask)


def test_masked_softmax_inactive_row_is_zero():
    mask = np.array([[True, False], [False, False]])
    probs = masked_softmax(Tensor(np.zeros((2, 2))), mask, query_active=np.array([True, False])).data
    assert np.array_equal(probs[1], np.zeros(2))


def test_cross_entropy_empty_mask():
    with pytest.raises(EmptySelectionError):
        cross_entropy(Tensor(np.zeros((2, 4))), np.zeros(2, dtype=int), np.zeros(2, dtype=bool))


def test_cross_entropy_matches_manual_value(float64):
    logits = np.array([[2.0, 0.0, -1.0], [0.1, 0.2, 0.3]])
    loss = cross_entropy(Tensor(logits), np.array([0, 2]), np.array([True, True])).item()
    log_probs = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    assert loss == pytest.approx(-(log_probs[0, 0] + log_probs[1, 2]) / 2)


def test_embedding_index_out_of_range():
    table = Tensor(np.zeros((5, 3)))
    with pytest.raises(VocabularyIndexError):
        embedding_lookup(table, np.array([1, 5]))
    with pytest.raises(IndexError):
        embedding_lookup(table, np.array([-1]))


def test_scatter_rows_rejects_duplicate_positions():
    base = Tensor(np.zeros((1, 4, 2)))
    with pytest.raises(ShapeError):
        scatter_rows(base, np.array([0, 0]), np.array([1, 1]), Tensor(np.ones((2, 2))))


GRADIENT_CASES = {
    "matmul": lambda r: ([leaf(r, 3, 4), leaf(r, 4, 2)], lambda a, b: tensor_sum(matmul(a, b) * matmul(a, b))),
    "batched_matmul": lambda r: ([leaf(r, 2, 3, 4), leaf(r, 4, 2)], lambda a, b: tensor_sum(tanh(matmul(a, b)))),
    "gelu": lambda r: ([leaf(r, 4, 3)], lambda x: tensor_sum(gelu(x) * gelu(x))),
    "tanh": lambda r: ([leaf(r, 5)], lambda x: tensor_sum(tanh(x) * x)),
    "layer_norm": lambda r: (
        [leaf(r, 3, 6), leaf(r, 6), leaf(r, 6)],
        lambda x, g, b: tensor_sum(layer_norm(x, g, b) * Tensor(np.linspace(-1.0, 1.0, 18).reshape(3, 6))),
    ),
    "masked_softmax": lambda r: (
        [leaf(r, 2, 4, 4)],
        lambda x: tensor_sum(masked_softmax(x, np.tril(np.ones((4, 4), dtype=bool)))
                           * Tensor(np.linspace(-1.0, 1.0, 32).reshape(2, 4, 4))),
    ),
    "mse": lambda r: ([leaf(r, 3, 2)], lambda x: mse(tanh(x), np.full((3, 2), 0.3))),
    "bce": lambda r: ([leaf(r, 4, 1)], lambda x: bce_with_logits(x, np.array([[1.0], [0.0], [1.0], [0.0]]))),
    "cross_entropy": lambda r: (
        [leaf(r, 2, 3, 5)],
        lambda x: cross_entropy(x, np.array([[1, 2, 3], [4, 0, 1]]), np.array([[True, False, True], [True, True, False]])),
    ),
    "embedding": lambda r: ([leaf(r, 6, 3)], lambda t: tensor_sum(gelu(embedding_lookup(t, np.array([[0, 2, 2], [5, 1, 0]]))))),
    "gather_scatter": lambda r: (
        [leaf(r, 2, 4, 3), leaf(r, 2, 3)],
        lambda x, v: tensor_sum(tanh(scatter_rows(x, np.array([0, 1]), np.array([3, 0]), v))
                                * gather_rows(x, np.array([1, 1, 0]), np.array([0, 2, 2])).sum()),
    ),
    "getitem_reshape_transpose": lambda r: (
        [leaf(r, 2, 3, 4)],
        lambda x: tensor_mean(gelu(transpose(reshape(getitem(x, (slice(None), slice(0, 2))), (2, 8)), (1, 0)))),
    ),
}


@pytest.mark.parametrize("name", sorted(GRADIENT_CASES))
def test_gradients_match_finite_differences_float64(float64, name):
    rng = np.random.default_rng(7)
    tensors, fn = GRADIENT_CASES[name](rng)
    err = finite_difference_check(lambda: fn(*tensors), tensors)
    assert err < 1e-6


@pytest.mark.parametrize("name", ["matmul", "gelu"])
def test_gradients_float32(name):
    rng = np.random.default_rng(3)
    if name == "matmul":
        a, b = leaf(rng, 4, 5), leaf(rng, 5, 3)
        tensors, fn = [a, b], lambda: tensor_sum(matmul(a, b))
    else:
        x = leaf(rng, 16)
        tensors, fn = [x], lambda: tensor_sum(gelu(x))
    assert tensors[0].dtype == np.float32
    assert finite_difference_check(fn, tensors) < 1e-3


def test_masked_softmax_ignores_row_shift(float64):
    rng = np.random.default_rng(5)
    logits = rng.normal(size=(3, 6))
    mask = rng.random((3, 6)) < 0.6
    mask[:, 0] = True
    base = masked_softmax(Tensor(logits), mask).data
    shifted = masked_softmax(Tensor(logits + np.array([[3.0], [-7.5], [40.0]])), mask).data
    assert np.allclose(base, shifted, atol=1e-6)
    assert np.allclose(base.sum(axis=-1), 1.0, atol=1e-6)
    assert np.all(base[~mask] == 0.0)


def run_seeded_step(seed):
    rng = np.random.default_rng(seed)
    x, w = leaf(rng, 4, 6), leaf(rng, 6, 5)
    g, b = leaf(rng, 5), leaf(rng, 5)
    h = layer_norm(gelu(matmul(x, w)), g, b)
    probs = masked_softmax(h, np.tril(np.ones((4, 5), dtype=bool)))
    loss = tensor_sum(probs * h)
    backward(loss)
    return loss.data, [t.grad for t in (x, w, g, b)]


def test_seeded_forward_backward_is_bit_identical():
    loss_a, grads_a = run_seeded_step(11)
    loss_b, grads_b = run_seeded_step(11)
    assert loss_a.tobytes() == loss_b.tobytes()
    for ga, gb in zip(grads_a, grads_b):
        assert ga.tobytes() == gb.tobytes()


def test_cross_entropy_of_uniform_logits_is_log_vocab(float64):
    vocab_size = 37
    loss = cross_entropy(Tensor(np.zeros((3, vocab_size))), np.array([0, 5, 36]), np.ones(3, dtype=bool))
    assert abs(loss.item() - np.log(vocab_size)) < 1e-6


def test_cross_entropy_of_confident_logits_is_near_zero(float64):
    targets = np.array([2, 0, 4])
    logits = np.full((3, 5), -30.0)
    logits[np.arange(3), targets] = 30.0
    loss = cross_entropy(Tensor(logits), targets, np.ones(3, dtype=bool))
    assert 0.0 <= loss.item() < 1e-20


def test_bce_at_zero_logit_is_log_two(float64):
    loss = bce_with_logits(Tensor(np.zeros((1, 1))), np.ones((1, 1)))
    assert loss.item() == pytest.approx(np.log(2.0), abs=1e-12)


def test_adam_first_step_moves_by_learning_rate():
    param = Tensor(np.array([1.0, -1.0]), requires_grad=True)
    state = AdamState()
    adam_step({"w": param}, {"w": np.array([0.5, -2.0])}, state, lr=0.1)
    assert state.step == 1
    assert np.allclose(param.data, [0.9, -0.9], atol=1e-5)


def test_adam_rejects_gradient_shape_mismatch():
    param = Tensor(np.zeros(3), requires_grad=True)
    with pytest.raises(ShapeError):
        adam_step({"w": param}, {"w": np.zeros(2)}, AdamState(), lr=0.1)


def test_warmup_schedule():
    assert warmup_lr(0, 1e-3, 100) == pytest.approx(1e-5)
    assert warmup_lr(99, 1e-3, 100) == pytest.approx(1e-3)
    assert warmup_lr(5000, 1e-3, 100) == pytest.approx(1e-3)
    assert warmup_lr(0, 1e-3, 0) == pytest.approx(1e-3)


def test_perfect_action_terms_are_near_zero(float64):
    targets = np.array([[0.0, 1.0], [-1.0, 0.0]])
    grip = np.array([[1.0], [0.0]])
    logits = Tensor(np.where(grip > 0, 30.0, -30.0))
    loss = mse(Tensor(targets), targets) + bce_with_logits(logits, grip)
    assert 0.0 <= loss.item() <= 1e-9
