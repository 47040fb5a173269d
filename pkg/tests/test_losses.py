import math

import numpy as np
import pytest

import oracles
from uniprompt import diffcore as dc
from uniprompt import losses as L


def unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def const(x):
    return dc.constant(x)


def test_similarity_examples():
    assert L.similarity(const([1.0, 0.0]), const([1.0, 0.0]), 0.07).item() == pytest.approx(1 / 0.07, abs=1e-12)
    assert L.similarity(const([1.0, 0.0]), const([0.0, 1.0]), 0.07).item() == 0.0


def test_similarity_rejects_non_unit():
    with pytest.raises(ValueError):
        L.similarity(const([2.0, 0.0]), const([1.0, 0.0]))


def test_positive_set():
    assert L.positive_set([3, 5, 3, 7], 0) == {0, 2}
    assert L.positive_set([3, 5, 3, 7], 3) == {3}


def test_b2_identical_pairs_give_ln2():
    v = np.array([[1.0, 0.0], [0.0, 1.0]])
    batch = L.TrainBatch(const(v), np.array([0, 1]), T_m=const(v), T_p=const(v))
    parts = L.stage2_loss(batch)
    # equal paired logits -> uniform over two pairs
    assert abs(parts.mi2t.item() - math.log(2)) <= 1e-12
    assert abs(parts.pi2t.item() - math.log(2)) <= 1e-12


def test_b2_same_image_distinct_classes_t2i_is_ln2():
    V = np.array([[1.0, 0.0], [1.0, 0.0]])
    T = np.array([[0.6, 0.8], [0.0, 1.0]])
    batch = L.TrainBatch(const(V), np.array([0, 1]), T_m=const(T), T_p=const(T))
    parts = L.stage2_loss(batch)
    assert abs(parts.mt2i.item() - math.log(2)) <= 1e-12
    assert abs(parts.pt2i.item() - math.log(2)) <= 1e-12


def test_total_is_sum_of_parts():
    rng = np.random.default_rng(0)
    V, Tm, Tp = (unit_rows(rng, 6, 5) for _ in range(3))
    y = np.array([0, 0, 1, 1, 2, 2])
    p = L.stage2_loss(L.TrainBatch(const(V), y, T_m=const(Tm), T_p=const(Tp)))
    assert abs(p.total.item() - (p.mi2t.item() + p.mt2i.item() + p.pi2t.item() + p.pt2i.item())) <= 1e-12


@pytest.mark.parametrize("seed", range(20))
def test_stage2_matches_reference(seed):
    rng = np.random.default_rng(seed)
    B = int(rng.integers(2, 9))
    y = rng.integers(0, 3, size=B)
    V, Tm, Tp = (unit_rows(rng, B, 4) for _ in range(3))
    tau = 0.07
    p = L.stage2_loss(L.TrainBatch(const(V), y, T_m=const(Tm), T_p=const(Tp)))
    Vl, Tml, Tpl, yl = V.tolist(), Tm.tolist(), Tp.tolist(), y.tolist()
    assert abs(p.mi2t.item() - oracles.i2t_diagonal(Vl, Tml, tau)) <= 1e-12 * max(1, p.mi2t.item())
    assert abs(p.pi2t.item() - oracles.i2t_diagonal(Vl, Tpl, tau)) <= 1e-12 * max(1, p.pi2t.item())
    assert abs(p.mt2i.item() - oracles.t2i_per_class(Vl, Tml, yl, tau)) <= 1e-12 * max(1, p.mt2i.item())
    assert abs(p.pt2i.item() - oracles.t2i_per_class(Vl, Tpl, yl, tau)) <= 1e-12 * max(1, p.pt2i.item())
    cross = L.stage2_loss(L.TrainBatch(const(V), y, T_m=const(Tm), T_p=const(Tp)),
                          L.LossConfig(i2t_denominator="cross"))
    assert abs(cross.mi2t.item() - oracles.i2t_cross(Vl, Tml, tau)) <= 1e-12 * max(1, cross.mi2t.item())


@pytest.mark.parametrize("seed", range(10))
def test_stage1_matches_reference(seed):
    rng = np.random.default_rng(100 + seed)
    y = np.repeat(rng.choice(10, size=3, replace=False), 2)
    rng.shuffle(y)
    V, T = unit_rows(rng, 6, 5), unit_rows(rng, 6, 5)
    i2t, t2i = L.stage1_components(L.TrainBatch(const(V), y, T_identity=const(T)))
    ri2t, rt2i = oracles.stage1_reference(V.tolist(), T.tolist(), y.tolist(), 0.07)
    assert abs(i2t.item() - ri2t) <= 1e-12 * max(1, ri2t)
    assert abs(t2i.item() - rt2i) <= 1e-12 * max(1, rt2i)


def test_stage1_grid_reduces_to_representatives():
    rng = np.random.default_rng(3)
    y = np.array([4, 4, 9, 9])
    V, T = unit_rows(rng, 4, 3), unit_rows(rng, 4, 3)
    classes, first = np.unique(y, return_index=True)
    grid = np.concatenate([T[first] for _ in range(4)])
    a = L.stage1_components(L.TrainBatch(const(V), y, T_identity=const(T)))[0].item()
    b = L.stage1_components(L.TrainBatch(const(V), y, T_identity=const(T), T_grid=const(grid)))[0].item()
    assert abs(a - b) <= 1e-12


def test_t2i_weights_form_class_average():
    y = np.array([0, 0, 0, 1, 2, 2])
    W = L.class_weights(y)
    # one unit of weight per class
    assert W.sum() == pytest.approx(1.0, abs=1e-15)
    assert np.all(W[y[:, None] != y[None, :]] == 0)


def test_softmax_columns_sum_to_one():
    rng = np.random.default_rng(4)
    S = L.similarity_matrix(const(unit_rows(rng, 7, 4)), const(unit_rows(rng, 7, 4)), 0.07).data
    P = np.exp(S - S.max(axis=0)) / np.exp(S - S.max(axis=0)).sum(axis=0)
    assert np.all(np.abs(P.sum(axis=0) - 1) <= 1e-12)


def test_losses_non_negative_and_shift_invariant():
    rng = np.random.default_rng(5)
    for _ in range(50):
        B = int(rng.integers(2, 8))
        y = rng.integers(0, 3, size=B)
        S = rng.normal(size=(B, B)) * 5
        d = rng.normal(size=B) * 5
        for f, x in ((lambda s: L.t2i_from_logits(const(s), y), S),
                     (lambda s: L.cross_i2t_from_logits(const(s)), S),
                     (lambda s: L.diagonal_i2t_from_logits(const(s)), d)):
            base = f(x).item()
            assert base >= 0
            assert abs(f(x + 3.25).item() - base) <= 1e-9


def test_deterministic():
    rng = np.random.default_rng(6)
    args = (const(unit_rows(rng, 4, 3)), np.array([0, 1, 0, 1]))
    T = const(unit_rows(rng, 4, 3))
    a = L.stage2_loss(L.TrainBatch(*args, T_m=T, T_p=T)).total.item()
    b = L.stage2_loss(L.TrainBatch(*args, T_m=T, T_p=T)).total.item()
    assert a == b


def test_degenerate_batches():
    v = const(np.array([[1.0, 0.0]]))
    with pytest.raises(L.DegenerateBatchError):
        L.stage2_loss(L.TrainBatch(v, np.array([0]), T_m=v, T_p=v))
    v2 = const(np.eye(2))
    with pytest.raises(L.DegenerateBatchError):
        L.stage1_components(L.TrainBatch(v2, np.array([1, 1]), T_identity=v2))


def test_non_unit_embeddings_rejected():
    V = const(np.array([[1.0, 0.0], [0.0, 2.0]]))
    with pytest.raises(ValueError):
        L.stage2_loss(L.TrainBatch(V, np.array([0, 1]), T_m=V, T_p=V))


def test_config_validation():
    with pytest.raises(ValueError):
        L.LossConfig(temperature=0).validate()
    with pytest.raises(ValueError):
        L.LossConfig(i2t_denominator="rows").validate()


def test_loss_gradients_match_finite_diff():
    rng = np.random.default_rng(7)
    y = np.array([0, 0, 1, 2, 2])
    A = dc.Tensor(rng.normal(size=(5, 4)), requires_grad=True)
    Bt = dc.Tensor(rng.normal(size=(5, 4)), requires_grad=True)

    def f():
        V, T = dc.l2_normalize(A), dc.l2_normalize(Bt)
        return L.stage2_loss(L.TrainBatch(V, y, T_m=T, T_p=V)).total + L.stage1_loss(
            L.TrainBatch(V, y, T_identity=T))

    g = dc.backward(f())
    fd = dc.finite_diff(f, [A, Bt])
    for p in (A, Bt):
        assert dc.max_rel_error(g[p], fd[p]) < 1e-4
