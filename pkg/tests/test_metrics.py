import numpy as np
import pytest

from granet.errors import ContractError, DimensionError
from granet.metrics import ConfusionMatrix, accumulate, report


def test_hand_two_class_example():
    rep = report(ConfusionMatrix(2, [[2, 1], [0, 3]]))
    assert rep.precision.tolist() == [1.0, 0.75]
    assert rep.recall.tolist() == [2 / 3, 1.0]
    # F1 by hand: 2*1*(2/3)/(1+2/3) = 0.8; 2*0.75*1/1.75 = 6/7
    np.testing.assert_allclose(rep.f1, [0.8, 6 / 7], rtol=0, atol=1e-15)
    assert rep.oa == 5 / 6
    np.testing.assert_allclose(rep.avg_f1, (0.8 + 6 / 7) / 2, rtol=0, atol=1e-15)


def test_perfect_diagonal():
    rep = report(ConfusionMatrix(3, np.diag([4, 1, 7])))
    assert np.all(rep.precision == 1) and np.all(rep.recall == 1) and np.all(rep.f1 == 1)
    assert rep.oa == 1.0 and rep.avg_f1 == 1.0


def test_absent_class_dropped_from_average():
    counts = np.zeros((3, 3), dtype=int)
    counts[0, 0], counts[1, 1], counts[0, 1] = 3, 2, 1
    rep = report(ConfusionMatrix(3, counts))
    assert rep.present.tolist() == [True, True, False]
    assert rep.avg_f1 == pytest.approx(rep.f1[:2].mean(), abs=1e-15)
    assert report(ConfusionMatrix(3, counts), drop_absent=False).avg_f1 == pytest.approx(rep.f1.sum() / 3)


def test_zero_denominators_give_zero():
    rep = report(ConfusionMatrix(2, [[0, 3], [0, 1]]))
    assert rep.precision[0] == 0.0 and rep.recall[0] == 0.0 and rep.f1[0] == 0.0


def test_accumulate_cases():
    cm = ConfusionMatrix(3)
    accumulate(cm, [], [])
    assert cm.total == 0
    accumulate(cm, [0], [1])
    assert cm.counts[0, 1] == 1 and cm.total == 1
    with pytest.raises(ContractError):
        accumulate(cm, [3], [0])
    with pytest.raises(ContractError):
        accumulate(cm, [0], [-1])
    with pytest.raises(DimensionError):
        accumulate(cm, [0, 1], [0])


def test_accumulation_order_independent_and_merge():
    rng = np.random.default_rng(0)
    t = rng.integers(0, 4, 200)
    p = rng.integers(0, 4, 200)
    perm = rng.permutation(200)
    a = ConfusionMatrix(4).accumulate(t, p)
    b = ConfusionMatrix(4).accumulate(t[perm], p[perm])
    assert a == b
    halves = ConfusionMatrix(4).accumulate(t[:90], p[:90]).merge(ConfusionMatrix(4).accumulate(t[90:], p[90:]))
    assert halves == a


def test_relabeling_permutes_measures():
    rng = np.random.default_rng(1)
    t = rng.integers(0, 4, 300)
    p = np.where(rng.uniform(size=300) < 0.7, t, rng.integers(0, 4, 300))
    perm = np.array([2, 0, 3, 1])
    a = report(ConfusionMatrix(4).accumulate(t, p))
    b = report(ConfusionMatrix(4).accumulate(perm[t], perm[p]))
    np.testing.assert_allclose(b.f1[perm], a.f1, atol=1e-15)
    np.testing.assert_allclose(b.precision[perm], a.precision, atol=1e-15)
    assert a.oa == b.oa
    assert a.avg_f1 == pytest.approx(b.avg_f1, abs=1e-15)


def test_empty_matrix_rejected():
    with pytest.raises(ContractError):
        report(ConfusionMatrix(2))


def test_csv_layout():
    text = report(ConfusionMatrix(2, [[2, 1], [0, 3]]), ["a", "b"]).to_csv()
    assert text.splitlines() == [
        "class,precision,recall,f1",
        "a,1.0000,0.6667,0.8000",
        "b,0.7500,1.0000,0.8571",
        "OA,0.8333,,",
        "AvgF1,0.8286,,",
    ]
