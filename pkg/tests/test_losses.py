from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _oracles import central_difference, relative_error
from badsad import diffcore as dc
from badsad.errors import ConfigurationError, UsageError
from badsad.losses import (
    BatchEmbeddings,
    LossWeights,
    alignment_loss,
    concentration_loss,
    deepsad_loss,
    total_loss,
)

NO_EPS = LossWeights(eps_inv=0.0)


def val(t):
    return float(t.data)


def test_deepsad_point_at_center():
    assert val(deepsad_loss(BatchEmbeddings(z_u=np.array([[1.0, 2.0]])), [1.0, 2.0], NO_EPS)) == 0.0


def test_deepsad_single_abnormal():
    emb = BatchEmbeddings(z_la=np.array([[1.0, 1.0]]))
    assert val(deepsad_loss(emb, [0.0, 0.0], NO_EPS)) == 0.5


def test_deepsad_unlabeled_plus_normal():
    emb = BatchEmbeddings(z_u=np.array([[2.0, 0.0]]), z_ln=np.array([[1.0, 0.0]]))
    assert val(deepsad_loss(emb, [0.0, 0.0], LossWeights())) == 2.5


def test_deepsad_eps_only_guards_reciprocal():
    w = LossWeights(eps_inv=0.5)
    assert val(deepsad_loss(BatchEmbeddings(z_ln=np.array([[1.0]])), [0.0], w)) == 1.0
    assert val(deepsad_loss(BatchEmbeddings(z_la=np.array([[1.0]])), [0.0], w)) == pytest.approx(1 / 1.5, rel=1e-15)
    # abnormal point exactly at c stays finite
    assert np.isfinite(val(deepsad_loss(BatchEmbeddings(z_la=np.array([[0.0]])), [0.0], LossWeights())))


def test_deepsad_poison_routing():
    z = np.array([[3.0]])
    base = BatchEmbeddings(z_u=np.array([[1.0]]), z_p=z)
    w = LossWeights(eta=2.0)
    assert val(deepsad_loss(base, [0.0], w, "labeled_normal")) == pytest.approx((1 + 2 * 9) / 2)
    assert val(deepsad_loss(base, [0.0], w, "unlabeled")) == pytest.approx((1 + 9) / 2)
    assert val(deepsad_loss(base, [0.0], w, "none")) == 1.0


def test_deepsad_errors():
    with pytest.raises(UsageError):
        deepsad_loss(BatchEmbeddings(), [0.0], LossWeights())
    with pytest.raises(ConfigurationError):
        deepsad_loss(BatchEmbeddings(z_u=np.ones((1, 1))), [0.0], LossWeights(), "elsewhere")


def test_deepsad_matches_loop_oracle():
    rng = np.random.default_rng(0)
    zu, zn, za = rng.standard_normal((5, 3)), rng.standard_normal((2, 3)), rng.standard_normal((4, 3))
    c = rng.standard_normal(3)
    w = LossWeights(eta=1.7, eps_inv=1e-3)
    total = 0.0
    for z in zu:
        total += sum((z - c) ** 2)
    for z in zn:
        total += w.eta * sum((z - c) ** 2)
    for z in za:
        total += w.eta / (sum((z - c) ** 2) + w.eps_inv)
    expected = total / 11
    got = val(deepsad_loss(BatchEmbeddings(zu, zn, za), c, w))
    assert abs(got - expected) <= 1e-12 * abs(expected)


def test_alignment_examples():
    n = np.array([[1.0, 0.0]])
    assert val(alignment_loss(n, n, -n, 2.0)) == 0.0
    assert val(alignment_loss(n, -n, n, 2.0)) == 4.0
    assert val(alignment_loss(n, n, np.array([[0.0, 1.0]]), 2.0)) == 1.0


def test_alignment_uses_group_means():
    z_ln = np.array([[1.0, 0.0], [1.0, 0.2], [1.0, -0.2]])
    z_p = np.array([[2.0, 0.0]])
    z_la = np.array([[0.0, 1.0], [0.0, 3.0]])
    # n-bar = (1, 0), p-bar along it, a-bar orthogonal
    assert val(alignment_loss(z_ln, z_p, z_la, 0.5)) == pytest.approx(0.0)
    assert val(alignment_loss(z_ln, z_p, z_la, 1.5)) == pytest.approx(0.5)


def test_alignment_empty_group():
    with pytest.raises(UsageError, match="poisoned"):
        alignment_loss(np.ones((1, 2)), np.zeros((0, 2)), np.ones((1, 2)))


def test_concentration_examples():
    assert val(concentration_loss(np.array([[1.0, 2.0]]), [1.0, 2.0], np.array([[3.0, 3.0]]), [3.0, 3.0])) == 0.0
    assert val(concentration_loss(np.array([[3.0, 0.0]]), [0.0, 0.0], np.array([[0.0, 4.0]]), [0.0, 0.0])) == 25.0
    with pytest.raises(UsageError):
        concentration_loss(np.ones((1, 2)), [0.0, 0.0], np.zeros((0, 2)), [0.0, 0.0])


def test_concentration_matches_loop_oracle():
    rng = np.random.default_rng(1)
    zp, za = rng.standard_normal((6, 4)), rng.standard_normal((3, 4))
    cp, ca = rng.standard_normal(4), rng.standard_normal(4)
    sp = sum(sum((zp[i, k] - cp[k]) ** 2 for k in range(4)) for i in range(6)) / 6
    sa = sum(sum((za[i, k] - ca[k]) ** 2 for k in range(4)) for i in range(3)) / 3
    assert abs(val(concentration_loss(zp, cp, za, ca)) - (sp + sa)) <= 1e-10


def centers_for(rng, d=3):
    return SimpleNamespace(c=rng.standard_normal(d), c_p=rng.standard_normal(d), c_a=rng.standard_normal(d))


def random_emb(rng, d=3):
    return BatchEmbeddings(*(rng.standard_normal((k, d)) for k in (4, 2, 3, 2)))


def test_total_reduces_to_deepsad():
    rng = np.random.default_rng(2)
    emb, centers = random_emb(rng), centers_for(rng)
    w = LossWeights(alpha=0.0, beta=0.0)
    parts = total_loss(emb, centers, w)
    assert val(parts.total) == val(deepsad_loss(emb, centers.c, w))


def test_total_linearity_example():
    # deepsad term (6.25 + 1 + 1/4) / 3 = 2.5, alignment term 4
    emb = BatchEmbeddings(
        z_u=np.array([[2.5, 0.0]]), z_ln=np.array([[1.0, 0.0]]), z_la=np.array([[2.0, 0.0]]), z_p=np.array([[-1.0, 0.0]])
    )
    centers = SimpleNamespace(c=np.zeros(2), c_p=np.array([-1.0, 0.0]), c_a=np.array([2.0, 0.0]))
    w = LossWeights(alpha=1.0, beta=0.0, eps_inv=0.0)
    parts = total_loss(emb, centers, w, treat_poison_as="none")
    assert val(parts.deepsad) == pytest.approx(2.5, rel=1e-9) and val(parts.alignment) == 4.0
    assert val(parts.total) == pytest.approx(6.5, rel=1e-9)


@given(seed=st.integers(0, 2**31), alpha=st.floats(0, 10), beta=st.floats(0, 10))
@settings(max_examples=50, deadline=None)
def test_linearity_audit(seed, alpha, beta):
    rng = np.random.default_rng(seed)
    emb, centers = random_emb(rng), centers_for(rng)
    full = total_loss(emb, centers, LossWeights(alpha=alpha, beta=beta))
    zero = total_loss(emb, centers, LossWeights(alpha=0.0, beta=0.0))
    expected = alpha * val(full.alignment) + beta * val(full.concentration)
    diff = val(full.total) - val(zero.total)
    assert abs(diff - expected) <= 1e-9 * max(1.0, abs(val(full.total)))


@given(seed=st.integers(0, 2**31), margin=st.floats(0, 5))
@settings(max_examples=50, deadline=None)
def test_bounds(seed, margin):
    rng = np.random.default_rng(seed)
    emb, centers = random_emb(rng), centers_for(rng)
    da = val(alignment_loss(emb.z_ln, emb.z_p, emb.z_la, margin))
    assert 0.0 <= da <= 2.0 + margin + 1e-12
    assert val(deepsad_loss(emb, centers.c, LossWeights())) >= 0
    assert val(concentration_loss(emb.z_p, centers.c_p, emb.z_la, centers.c_a)) >= 0
    da_pairs = val(alignment_loss(emb.z_ln, emb.z_p, emb.z_la, margin, pairing="all_pairs"))
    assert 0.0 <= da_pairs <= 2.0 + margin + 1e-12


@given(seed=st.integers(0, 2**31), k=st.floats(0.1, 10))
@settings(max_examples=50, deadline=None)
def test_scale_behaviour(seed, k):
    rng = np.random.default_rng(seed)
    emb, centers = random_emb(rng), centers_for(rng)
    scaled = BatchEmbeddings(*(getattr(emb, f) * k for f in ("z_u", "z_ln", "z_la", "z_p")))
    sc = SimpleNamespace(c=centers.c * k, c_p=centers.c_p * k, c_a=centers.c_a * k)
    a0 = val(alignment_loss(emb.z_ln, emb.z_p, emb.z_la))
    assert val(alignment_loss(scaled.z_ln, scaled.z_p, scaled.z_la)) == pytest.approx(a0, rel=1e-9, abs=1e-12)
    c0 = val(concentration_loss(emb.z_p, centers.c_p, emb.z_la, centers.c_a))
    assert val(concentration_loss(scaled.z_p, sc.c_p, scaled.z_la, sc.c_a)) == pytest.approx(k * k * c0, rel=1e-9)
    pos = BatchEmbeddings(z_u=emb.z_u, z_ln=emb.z_ln)
    pos_s = BatchEmbeddings(z_u=scaled.z_u, z_ln=scaled.z_ln)
    d0 = val(deepsad_loss(pos, centers.c, LossWeights()))
    assert val(deepsad_loss(pos_s, sc.c, LossWeights())) == pytest.approx(k * k * d0, rel=1e-9)


def test_weights_validation():
    with pytest.raises(ConfigurationError):
        LossWeights(eta=0.0)
    with pytest.raises(ConfigurationError):
        LossWeights(alpha=-1.0)
    with pytest.raises(ConfigurationError):
        LossWeights(margin=float("nan"))
    with pytest.raises(ConfigurationError):
        LossWeights(pairing="median")


@given(seed=st.integers(0, 2**31))
@settings(max_examples=20, deadline=None)
def test_total_gradient_through_toy_encoder(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((11, 3))
    w1, w2 = rng.standard_normal((3, 5)), rng.standard_normal((5, 4))
    centers = centers_for(rng, 4)
    weights = LossWeights(alpha=1.5, beta=0.7, margin=2.0, eps_inv=1e-3)

    def build(w1, w2):
        z = dc.dense(dc.leaky_relu(dc.dense(dc.Tensor(x), w1), 0.1), w2)
        emb = BatchEmbeddings(z[:4], z[4:6], z[6:9], z[9:])
        return total_loss(emb, centers, weights).total

    leaves = [dc.Parameter(w1.copy(), name="w1"), dc.Parameter(w2.copy(), name="w2")]
    with dc.Tape():
        dc.backward(build(*leaves))
    fd1 = central_difference(lambda a: val(build(dc.Tensor(a), dc.Tensor(w2))), w1)
    fd2 = central_difference(lambda a: val(build(dc.Tensor(w1), dc.Tensor(a))), w2)
    assert relative_error(leaves[0].grad, fd1) < 1e-5
    assert relative_error(leaves[1].grad, fd2) < 1e-5
