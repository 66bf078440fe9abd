import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cycletrans import tensor as T
from cycletrans.losses import (Classifier, KernelBank, LossWeights, cross_entropy, loss_aln,
                               loss_id, loss_metric, loss_mmd, loss_rec, loss_sep, loss_total,
                               mmd_unclamped)
from cycletrans.params import ParameterStore
from cycletrans.tensor import Tensor, grad_check, precision


def _p(x):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True, dtype=np.float64)


# ----------------------------------------------------------- cross-entropy

def test_cross_entropy_uniform():
    for n in (2, 5, 32):
        assert abs(cross_entropy(Tensor(np.zeros((3, n))), [0, 1, 1]).item() - math.log(n)) < 1e-6


def test_cross_entropy_saturated():
    assert cross_entropy(Tensor([[60.0, 0.0]]), [0]).item() < 1e-6


def test_cross_entropy_hand_logits():
    with precision(np.float64):
        got = cross_entropy(Tensor([[1.0, 0.0], [0.0, 1.0]]), [0, 1]).item()
    assert abs(got - (-math.log(math.e / (math.e + 1)))) < 1e-12


def test_cross_entropy_label_range():
    with pytest.raises(ValueError):
        cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


def test_classifier_has_no_bias_and_bn_modes(rng):
    store = ParameterStore()
    clf = Classifier.register(store, 4, 3, rng)
    assert set(store.ids()) == {"classifier.bn_gamma", "classifier.bn_beta", "classifier.weight"}
    x = Tensor(rng.normal(size=(6, 4)) * 3 + 1)
    clf(x, training=True)
    assert not np.allclose(clf.running_mean, 0)
    eval_out = clf(x, training=False).data
    inv = 1 / np.sqrt(clf.running_var + clf.eps)
    ref = ((x.data - clf.running_mean) * inv) @ clf.weight.data
    np.testing.assert_allclose(eval_out, ref, rtol=1e-5)
    with pytest.raises(ValueError):
        loss_id(x, [0] * 6, Classifier.register(ParameterStore(), 4, 1, rng))


# ------------------------------------------------------------------ metric

def test_metric_single_identity_is_zero(rng):
    assert loss_metric(Tensor(rng.normal(size=(4, 3))), [1, 1, 1, 1]).item() == 0.0


def test_metric_hand_cases():
    f = Tensor([[0.0, 0.0], [3.0, 4.0]])
    assert loss_metric(f, [0, 1], margin=0.5).item() == 0.0
    assert abs(loss_metric(f, [0, 1], margin=6.0).item() - 0.5) < 1e-6


def test_metric_pooled_centres():
    with precision(np.float64):
        f = Tensor([[0.0], [2.0], [10.0]])
        # centre of identity 0 is 1, so each of its samples sits 1 away; identity 1 is a singleton
        # ordered pairs (0,2),(2,0): 3 - 10 + 1 + 0 < 0;  (1,2),(2,1): 3 - 8 + 1 + 0 < 0
        assert loss_metric(f, [0, 0, 1], margin=3.0).item() == 0.0
        # margin 8: pair (1,2) gives 8 - 8 + 1 = 1 twice, pair (0,2) gives 8 - 10 + 1 < 0
        assert abs(loss_metric(f, [0, 0, 1], margin=8.0).item() - 2 / 9) < 1e-12


@given(st.integers(0, 10_000))
def test_metric_translation_invariant(seed):
    rng = np.random.default_rng(seed)
    with precision(np.float64):
        f = rng.normal(size=(6, 3))
        labels = [0, 0, 1, 1, 2, 2]
        shift = rng.normal(size=(1, 3)) * 10
        a = loss_metric(Tensor(f), labels, 2.0).item()
        b = loss_metric(Tensor(f + shift), labels, 2.0).item()
        assert abs(a - b) < 1e-9 and a >= 0


def test_metric_needs_two():
    with pytest.raises(ValueError):
        loss_metric(Tensor(np.ones((1, 2))), [0])


# -------------------------------------------------------------- separation

def test_sep_examples():
    assert loss_sep(Tensor(np.random.default_rng(0).normal(size=(2, 4)))).item() == 0.0
    assert abs(loss_sep(Tensor([[1.0, 0.0], [0.0, 1.0], [5.0, 5.0]])).item()) < 1e-7
    assert abs(loss_sep(Tensor([[0.6, 0.8], [0.6, 0.8], [1.0, 0.0]])).item() - 1 / 9) < 1e-6


def test_sep_excludes_last_pattern():
    a = Tensor([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]])
    assert abs(loss_sep(a).item()) < 1e-7


def test_sep_zero_row_contributes_nothing():
    assert loss_sep(Tensor([[0.0, 0.0], [1.0, 0.0], [1.0, 0.0]])).item() == 0.0


@given(st.integers(0, 10_000))
def test_sep_scale_invariant(seed):
    rng = np.random.default_rng(seed)
    with precision(np.float64):
        f = rng.normal(size=(4, 3))
        g = f * rng.uniform(0.1, 10, size=(4, 1))
        assert abs(loss_sep(Tensor(f)).item() - loss_sep(Tensor(g)).item()) < 1e-9


def test_sep_batched_is_mean(rng):
    f = rng.normal(size=(3, 4, 5))
    per = [loss_sep(Tensor(f[i])).item() for i in range(3)]
    assert abs(loss_sep(Tensor(f)).item() - np.mean(per)) < 1e-6
    with pytest.raises(ValueError):
        loss_sep(Tensor(np.ones((1, 3))))


# --------------------------------------------------------------------- MMD

def test_mmd_examples(rng):
    x = Tensor(rng.normal(size=(5, 3)))
    assert loss_mmd(x, x).item() == 0.0
    p = Tensor([[1.0, 2.0]])
    assert loss_mmd(p, p).item() == 0.0
    with precision(np.float64):
        for t in (1.0, 3.0, 50.0):
            got = loss_mmd(Tensor([[0.0]]), Tensor([[t]]), KernelBank([1.0])).item()
            assert abs(got - (2 - 2 * math.exp(-t * t / 2))) < 1e-12


@given(st.integers(0, 10_000))
def test_mmd_self_unclamped_zero(seed):
    rng = np.random.default_rng(seed)
    with precision(np.float64):
        x = Tensor(rng.normal(size=(rng.integers(1, 6), 3)))
        assert abs(mmd_unclamped(x, x, KernelBank.from_median(x.data)).item()) < 1e-7


def test_kernel_bank_from_median():
    feats = np.array([[0.0], [1.0], [3.0]])  # pairwise distances 1, 2, 3 -> median 2
    kb = KernelBank.from_median(feats)
    np.testing.assert_allclose(kb.bandwidths, [0.5, 1.0, 2.0, 4.0, 8.0])
    assert KernelBank.from_median(np.zeros((3, 2))).bandwidths[2] == 1.0
    with pytest.raises(ValueError):
        KernelBank([0.0])


def test_mmd_needs_both_sets():
    with pytest.raises(ValueError):
        mmd_unclamped(Tensor(np.zeros((0, 2))), Tensor(np.ones((1, 2))), KernelBank())


# ------------------------------------------------------- reconstruction

def test_rec_examples():
    a = np.arange(4.0).reshape(2, 2)
    assert loss_rec(Tensor(a), Tensor(a)).item() == 0.0
    assert abs(loss_rec(Tensor(a + 1), Tensor(a)).item() - 1.0) < 1e-7
    b = a.copy()
    b[0, 1] += 2
    assert abs(loss_rec(Tensor(b), Tensor(a)).item() - 0.5) < 1e-7
    with pytest.raises(T.DimensionError):
        loss_rec(Tensor(a), Tensor(a.T[:1]))


def test_aln_examples():
    a = np.arange(4.0).reshape(2, 2)
    assert loss_aln(Tensor(a), Tensor(a)).item() == 0.0
    assert abs(loss_aln(Tensor(a + 1), Tensor(a)).item() - 0.5) < 1e-7
    for t in (0.5, 3.0):
        assert abs(loss_aln(Tensor(a + t), Tensor(a)).item() - 0.5 * t) < 1e-6
    with pytest.raises(T.DimensionError):
        loss_aln(Tensor(a), Tensor(a[:1]))


# ------------------------------------------------------------------- total

def _ones():
    return {n: Tensor(1.0) for n in ("L_id", "L_me", "L_sep", "L_MMD", "L_rec", "L_aln")}


def test_total_examples():
    assert abs(loss_total(_ones(), LossWeights(0, 0, 0, 0)).item() - 2.0) < 1e-7
    assert abs(loss_total(_ones(), LossWeights.from_lambdas((0.2, 1.0, 0.1, 0.1))).item() - 3.4) < 1e-6
    zeros = {k: Tensor(0.0) for k in _ones()}
    assert loss_total(zeros, LossWeights()).item() == 0.0


def test_total_names_nonfinite_component():
    comps = _ones()
    comps["L_MMD"] = Tensor.__new__(Tensor)
    comps["L_MMD"].data = np.array(np.nan)
    with pytest.raises(T.NonFiniteError, match="L_MMD"):
        loss_total(comps, LossWeights())


def test_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(-0.1, 1, 1, 1)


# -------------------------------------------------------- gradient checks

@pytest.mark.parametrize("seed", range(3))
def test_loss_gradients(seed):
    rng = np.random.default_rng(seed)
    with precision(np.float64):
        f = _p(rng.normal(size=(3, 4)))
        labels = [0, 0, 1]
        kb = KernelBank([0.7, 1.5])
        pats = _p(rng.normal(size=(3, 3, 4)))
        target = Tensor(rng.normal(size=(3, 3, 4)))
        store = ParameterStore()
        clf = Classifier.register(store, 4, 2, rng)
        clf.weight.data[...] = rng.normal(size=(4, 2))
        checks = {
            "id": (lambda: loss_id(f, labels, clf), f),
            "metric": (lambda: loss_metric(f, labels, 3.0), f),
            "sep": (lambda: loss_sep(pats), pats),
            "mmd": (lambda: loss_mmd(T.take(f, [0, 1]), T.take(f, [2]), kb), f),
            "rec": (lambda: loss_rec(pats, target), pats),
            "aln": (lambda: loss_aln(pats, target), pats),
        }
        for name, (fn, param) in checks.items():
            assert grad_check(fn, param, 1e-5) < 1e-3, name
