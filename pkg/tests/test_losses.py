"""Loss values against independent oracles, plus analytic-gradient checks."""

import math

import numpy as np
import pytest

from affield.grids import EmbedGrid, KernelSpec, LabelGrid, ProbGrid, one_hot
from affield.losses import (
    HyperParams,
    affinity_loss,
    combined_objective,
    contrastive_loss,
    kl_bernoulli,
    multiscale_aaf,
    softmax_chain,
    unary_ce,
)
from affield.minimax import TERM_EDGE, TERM_NONEDGE, SimplexWeights


def softmax(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def random_instance(rng, h, w, c):
    labels = LabelGrid(rng.integers(0, c, size=(h, w)), c)
    logits = rng.normal(0.0, 1.5, size=(h, w, c))
    return logits, ProbGrid(softmax(logits)), labels


# --- kl_bernoulli ------------------------------------------------------------


def test_kl_identical_is_zero():
    assert kl_bernoulli(0.8, 0.8) == 0.0


def test_kl_saturated_vs_half():
    assert abs(kl_bernoulli(1.0, 0.5, eps=1e-6) - math.log(2)) < 1e-4


def test_kl_symmetric_around_half():
    assert kl_bernoulli(0.5, 0.4) == pytest.approx(kl_bernoulli(0.5, 0.6), abs=1e-15)


def test_kl_is_asymmetric_in_general():
    assert kl_bernoulli(0.9, 0.2) != pytest.approx(kl_bernoulli(0.2, 0.9))


def test_kl_nonnegative_and_vectorized():
    rng = np.random.default_rng(11)
    p = rng.random(100)
    q = rng.random(100)
    out = kl_bernoulli(p, q)
    assert out.shape == (100,)
    assert (out >= 0).all()
    for idx in (0, 17, 99):
        assert out[idx] == pytest.approx(kl_bernoulli(float(p[idx]), float(q[idx])))


def test_kl_rejects_bad_eps():
    with pytest.raises(ValueError):
        kl_bernoulli(0.5, 0.5, eps=0.0)
    with pytest.raises(ValueError):
        kl_bernoulli(0.5, 0.5, eps=0.01)


# --- unary_ce ----------------------------------------------------------------


def test_unary_uniform_two_classes_is_ln2():
    pred = ProbGrid(np.full((4, 4, 2), 0.5))
    gt = LabelGrid(np.zeros((4, 4), dtype=int), 2)
    value, _ = unary_ce(pred, gt)
    assert value.total == pytest.approx(math.log(2), abs=1e-12)


def test_unary_perfect_prediction_is_zero():
    gt = LabelGrid(np.array([[0, 1], [2, 0]]), 3)
    value, _ = unary_ce(one_hot(gt), gt)
    assert value.total == pytest.approx(0.0, abs=1e-12)


def test_unary_matches_per_pixel_sum():
    rng = np.random.default_rng(5)
    _, pred, gt = random_instance(rng, 4, 4, 3)
    expected = 0.0
    for y in range(4):
        for x in range(4):
            expected -= math.log(pred.probs[y, x, gt.labels[y, x]])
    expected /= 16
    value, _ = unary_ce(pred, gt)
    assert value.total == pytest.approx(expected, abs=1e-12)


def test_unary_logit_gradient_formula():
    rng = np.random.default_rng(6)
    _, pred, gt = random_instance(rng, 3, 5, 3)
    _, grad = unary_ce(pred, gt)
    onehot = one_hot(gt).probs
    np.testing.assert_allclose(grad.array, (pred.probs - onehot) / 15, atol=1e-15)


def test_unary_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    logits, _, gt = random_instance(rng, 3, 3, 3)
    _, grad = unary_ce(ProbGrid(softmax(logits)), gt)
    fd = _fd_logits(lambda p: unary_ce(p, gt)[0].total, logits)
    _assert_close_grad(grad.array, fd)


def test_unary_rejects_shape_mismatch():
    pred = ProbGrid(np.full((2, 2, 2), 0.5))
    with pytest.raises(ValueError):
        unary_ce(pred, LabelGrid(np.zeros((2, 3), dtype=int), 2))
    with pytest.raises(ValueError):
        unary_ce(pred, LabelGrid(np.zeros((2, 2), dtype=int), 3))


# --- affinity_loss -----------------------------------------------------------


def oracle_affinity(pred: ProbGrid, gt: LabelGrid, k: int, hp: HyperParams):
    """Direct double loop over pixels, window offsets, and class channels."""
    h, w, c = pred.probs.shape
    flat = pred.probs.reshape(-1, c)
    lab = gt.labels.reshape(-1)
    r = k // 2
    sums = np.zeros((c, 2))
    counts = np.zeros((c, 2), dtype=int)

    def clamp(v):
        return min(max(v, hp.kl_eps), 1.0 - hp.kl_eps)

    for cy in range(h):
        for cx in range(w):
            for dy in range(-r, r + 1):
                for dx in range(-r, r + 1):
                    if dy == 0 and dx == 0:
                        continue
                    ny, nx = cy + dy, cx + dx
                    if not (0 <= ny < h and 0 <= nx < w):
                        continue
                    i = cy * w + cx
                    j = ny * w + nx
                    for cls in range(c):
                        q = clamp(flat[i, cls])  # center
                        p = clamp(flat[j, cls])  # neighbor
                        kl = p * math.log(p / q) + (1 - p) * math.log((1 - p) / (1 - q))
                        if (lab[i] == cls) == (lab[j] == cls):
                            sums[cls, TERM_NONEDGE] += kl
                            counts[cls, TERM_NONEDGE] += 1
                        else:
                            counts[cls, TERM_EDGE] += 1
                            if hp.margin - kl > 0:
                                sums[cls, TERM_EDGE] += hp.margin - kl
    means = np.zeros_like(sums)
    np.divide(sums, counts, out=means, where=counts > 0)
    return means.sum() / c, means, counts


def test_affinity_matches_brute_force_oracle():
    rng = np.random.default_rng(12)
    hp = HyperParams()
    for trial in range(8):
        h = int(rng.integers(2, 7))
        w = int(rng.integers(2, 7))
        c = int(rng.integers(2, 4))
        k = int(rng.choice([3, 5]))
        _, pred, gt = random_instance(rng, h, w, c)
        value, _ = affinity_loss(pred, gt, k, hp)
        total, means, counts = oracle_affinity(pred, gt, k, hp)
        assert value.total == pytest.approx(total, abs=1e-10), f"trial {trial}"
        np.testing.assert_allclose(value.per_class_per_kernel[:, 0, :], means, atol=1e-10)
        np.testing.assert_array_equal(value.valid_pair_counts[:, 0, :], counts)


def test_affinity_5x5_two_class_fixture():
    # The frozen value comes from oracle_affinity on this exact instance.
    rng = np.random.default_rng(42)
    _, pred, gt = random_instance(rng, 5, 5, 2)
    value, _ = affinity_loss(pred, gt, 3)
    expected, _, _ = oracle_affinity(pred, gt, 3, HyperParams())
    assert value.total == pytest.approx(expected, abs=1e-10)
    assert value.total == pytest.approx(3.006182119459908, abs=1e-9)


def test_affinity_perfect_confident_prediction_is_zero():
    # One-hot predictions: same-label pairs have KL 0, cross-label pairs
    # have KL far above the margin, so both terms vanish.
    gt = LabelGrid(np.array([[0, 0, 1], [0, 1, 1], [1, 1, 1]]), 2)
    value, grad = affinity_loss(one_hot(gt), gt, 3)
    assert value.total == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_allclose(grad.array, 0.0, atol=1e-12)


def test_affinity_uniform_prediction_edge_mean_is_margin():
    # Identical predictions across a boundary sit at the hinge top: every
    # edge pair contributes exactly the margin.
    hp = HyperParams(margin=3.0)
    pred = ProbGrid(np.full((3, 3, 2), 0.5))
    gt = LabelGrid(np.array([[0, 0, 0], [0, 1, 0], [0, 0, 0]]), 2)
    value, _ = affinity_loss(pred, gt, 3, hp)
    table = value.per_class_per_kernel[:, 0, :]
    np.testing.assert_allclose(table[:, TERM_EDGE], 3.0, atol=1e-12)
    np.testing.assert_allclose(table[:, TERM_NONEDGE], 0.0, atol=1e-12)


def test_affinity_hinge_subgradient_zero_at_kink():
    # Two pixels with mirrored probabilities have direction-symmetric KL;
    # setting the margin to exactly that KL lands every edge pair on the
    # kink, which by convention contributes nothing in value or gradient.
    a = 0.81
    pred = ProbGrid(np.array([[[a, 1 - a], [1 - a, a]]]))
    gt = LabelGrid(np.array([[0, 1]]), 2)
    d = kl_bernoulli(a, 1 - a)
    value, grad = affinity_loss(pred, gt, 3, HyperParams(margin=d))
    assert value.total == 0.0
    np.testing.assert_array_equal(grad.array, 0.0)


def test_affinity_single_pixel_grid_has_no_pairs():
    pred = ProbGrid(np.array([[[0.7, 0.3]]]))
    gt = LabelGrid(np.array([[0]]), 2)
    value, grad = affinity_loss(pred, gt, 3)
    assert value.total == 0.0
    assert value.valid_pair_counts.sum() == 0
    np.testing.assert_array_equal(grad.array, 0.0)


def test_affinity_term_means_bounded():
    rng = np.random.default_rng(13)
    hp = HyperParams()
    for _ in range(10):
        _, pred, gt = random_instance(rng, 5, 5, 3)
        value, _ = affinity_loss(pred, gt, 3, hp)
        table = value.per_class_per_kernel
        assert (table >= 0).all()
        assert (table[:, :, TERM_EDGE] <= hp.margin + 1e-12).all()


def test_affinity_permutation_equivariance():
    rng = np.random.default_rng(14)
    _, pred, gt = random_instance(rng, 5, 5, 3)
    perm = np.array([2, 0, 1])  # new label of old class c is perm[c]
    inv = np.argsort(perm)
    pred_p = ProbGrid(pred.probs[:, :, inv])
    gt_p = LabelGrid(perm[gt.labels], 3)
    v, _ = affinity_loss(pred, gt, 3)
    v_p, _ = affinity_loss(pred_p, gt_p, 3)
    assert v_p.total == pytest.approx(v.total, abs=1e-12)
    np.testing.assert_allclose(
        v_p.per_class_per_kernel[perm], v.per_class_per_kernel, atol=1e-12
    )


def test_affinity_translation_invariance():
    # Content far from the border contributes identically after a one-pixel
    # shift; background pairs are constant either way.
    rng = np.random.default_rng(15)
    h = w = 10
    labels = np.zeros((h, w), dtype=int)
    probs = np.full((h, w, 2), 0.5)
    block_labels = rng.integers(0, 2, size=(4, 4))
    block_probs = softmax(rng.normal(size=(4, 4, 2)))

    def build(oy, ox):
        lab = labels.copy()
        prb = probs.copy()
        lab[oy:oy + 4, ox:ox + 4] = block_labels
        prb[oy:oy + 4, ox:ox + 4] = block_probs
        return ProbGrid(prb), LabelGrid(lab, 2)

    v0, _ = affinity_loss(*build(3, 3), 3)
    v1, _ = affinity_loss(*build(4, 3), 3)
    v2, _ = affinity_loss(*build(3, 4), 3)
    assert v1.total == pytest.approx(v0.total, abs=1e-12)
    assert v2.total == pytest.approx(v0.total, abs=1e-12)


def test_affinity_gradient_matches_finite_differences():
    rng = np.random.default_rng(16)
    for _ in range(3):
        logits, pred, gt = random_instance(rng, 4, 4, 3)
        _, grad_probs = affinity_loss(pred, gt, 3)
        analytic = softmax_chain(pred.probs, grad_probs.array)
        fd = _fd_logits(lambda p: affinity_loss(p, gt, 3)[0].total, logits)
        _assert_close_grad(analytic, fd)


# --- contrastive_loss --------------------------------------------------------


def oracle_contrastive(emb: EmbedGrid, gt: LabelGrid, k: int, hp: HyperParams):
    flat = emb.vectors.reshape(-1, emb.dim)
    lab = gt.labels.reshape(-1)
    h, w = gt.labels.shape
    r = k // 2
    sums = np.zeros(2)
    counts = np.zeros(2, dtype=int)
    for cy in range(h):
        for cx in range(w):
            for dy in range(-r, r + 1):
                for dx in range(-r, r + 1):
                    if dy == 0 and dx == 0:
                        continue
                    ny, nx = cy + dy, cx + dx
                    if not (0 <= ny < h and 0 <= nx < w):
                        continue
                    i, j = cy * w + cx, ny * w + nx
                    d2 = float(((flat[j] - flat[i]) ** 2).sum())
                    if lab[i] == lab[j]:
                        sums[0] += d2
                        counts[0] += 1
                    else:
                        counts[1] += 1
                        if hp.contrastive_margin - d2 > 0:
                            sums[1] += hp.contrastive_margin - d2
    means = np.zeros(2)
    np.divide(sums, counts, out=means, where=counts > 0)
    return means.sum(), means


def test_contrastive_matches_brute_force_oracle():
    rng = np.random.default_rng(17)
    hp = HyperParams()
    for _ in range(5):
        emb = EmbedGrid.from_raw(rng.normal(size=(4, 4, 4)))
        gt = LabelGrid(rng.integers(0, 3, size=(4, 4)), 3)
        value, _ = contrastive_loss(emb, gt, 3, hp)
        total, means = oracle_contrastive(emb, gt, 3, hp)
        assert value.total == pytest.approx(total, abs=1e-10)
        np.testing.assert_allclose(value.per_class_per_kernel[0, 0], means, atol=1e-10)


def test_contrastive_identical_same_label_pair_is_zero():
    raw = np.tile([2.0, 0.0, 0.0], (1, 2, 1))
    emb = EmbedGrid.from_raw(raw)
    gt = LabelGrid(np.zeros((1, 2), dtype=int), 2)
    value, _ = contrastive_loss(emb, gt, 3)
    assert value.total == 0.0


def test_contrastive_identical_cross_label_pair_hits_margin():
    raw = np.tile([2.0, 0.0, 0.0], (1, 2, 1))
    emb = EmbedGrid.from_raw(raw)
    gt = LabelGrid(np.array([[0, 1]]), 2)
    value, _ = contrastive_loss(emb, gt, 3, HyperParams(contrastive_margin=0.2))
    assert value.total == pytest.approx(0.2, abs=1e-15)


def test_contrastive_gradient_matches_finite_differences():
    rng = np.random.default_rng(18)
    raw = rng.normal(size=(3, 3, 4))
    gt = LabelGrid(rng.integers(0, 2, size=(3, 3)), 2)
    _, grad = contrastive_loss(EmbedGrid.from_raw(raw), gt, 3)

    def loss_at(r):
        value, _ = contrastive_loss(EmbedGrid.from_raw(r), gt, 3)
        return value.total

    fd = np.zeros_like(raw)
    step = 1e-6
    flat = raw.reshape(-1)
    out = fd.reshape(-1)
    for idx in range(flat.size):
        orig = flat[idx]
        flat[idx] = orig + step
        up = loss_at(raw)
        flat[idx] = orig - step
        down = loss_at(raw)
        flat[idx] = orig
        out[idx] = (up - down) / (2 * step)
    _assert_close_grad(grad.array, fd, tol=1e-4)


def test_contrastive_dead_pixel_gets_zero_gradient():
    raw = np.zeros((1, 3, 4))
    raw[0, 0] = [1.0, 0.0, 0.0, 0.0]
    raw[0, 2] = [0.0, 1.0, 0.0, 0.0]
    emb = EmbedGrid.from_raw(raw)
    # Same-label pairs keep the attraction term active so the live pixels
    # receive gradient while the dead pixel stays pinned at zero.
    gt = LabelGrid(np.zeros((1, 3), dtype=int), 2)
    value, grad = contrastive_loss(emb, gt, 3)
    assert value.total > 0
    np.testing.assert_array_equal(grad.array[0, 1], 0.0)
    assert np.abs(grad.array[0, 0]).max() > 0


# --- multiscale_aaf ----------------------------------------------------------


def test_multiscale_one_hot_weights_select_single_kernel():
    rng = np.random.default_rng(19)
    _, pred, gt = random_instance(rng, 5, 5, 2)
    ks = KernelSpec((3, 5))
    # A logit gap of 800 underflows the other weight to exactly zero.
    logits = np.zeros((2, 2, 2))
    logits[:, :, 0] = 800.0
    w = SimplexWeights(ks.sizes, logits)
    value, _, _ = multiscale_aaf(pred, gt, ks, w)
    single, _ = affinity_loss(pred, gt, 3)
    expected = single.per_class_per_kernel[:, 0, :].sum()
    assert value.total == pytest.approx(expected, abs=1e-12)
    np.testing.assert_allclose(
        value.per_class_per_kernel[:, 0, :], single.per_class_per_kernel[:, 0, :]
    )


def test_multiscale_uniform_weights_average_kernels():
    rng = np.random.default_rng(20)
    _, pred, gt = random_instance(rng, 6, 6, 2)
    ks = KernelSpec((3, 5))
    w = SimplexWeights.uniform(2, ks.sizes)
    value, _, _ = multiscale_aaf(pred, gt, ks, w)
    v3, _ = affinity_loss(pred, gt, 3)
    v5, _ = affinity_loss(pred, gt, 5)
    expected = 0.5 * (
        v3.per_class_per_kernel[:, 0, :] + v5.per_class_per_kernel[:, 0, :]
    ).sum()
    assert value.total == pytest.approx(expected, abs=1e-12)


def test_multiscale_matches_weighted_recombination():
    rng = np.random.default_rng(21)
    for _ in range(5):
        _, pred, gt = random_instance(rng, 6, 6, 2)
        ks = KernelSpec((3, 5))
        w = SimplexWeights(ks.sizes, rng.normal(0.0, 1.0, size=(2, 2, 2)))
        value, _, grad_w = multiscale_aaf(pred, gt, ks, w)
        singles = [affinity_loss(pred, gt, k)[0] for k in ks.sizes]
        expected = 0.0
        wk = w.weights
        for c in range(2):
            for t in range(2):
                for k_idx in range(len(ks)):
                    expected += (
                        wk[c, t, k_idx]
                        * singles[k_idx].per_class_per_kernel[c, 0, t]
                    )
        assert value.total == pytest.approx(expected, abs=1e-12)
        # The objective is linear in the weights, so the weight gradient is
        # exactly the per-(class, kernel, term) mean table.
        for c in range(2):
            for t in range(2):
                for k_idx in range(len(ks)):
                    assert grad_w.array[c, t, k_idx] == pytest.approx(
                        singles[k_idx].per_class_per_kernel[c, 0, t], abs=1e-12
                    )


def test_multiscale_rejects_mismatched_weights():
    rng = np.random.default_rng(22)
    _, pred, gt = random_instance(rng, 4, 4, 2)
    ks = KernelSpec((3, 5))
    with pytest.raises(ValueError):
        multiscale_aaf(pred, gt, ks, SimplexWeights.uniform(3, ks.sizes))
    with pytest.raises(ValueError):
        multiscale_aaf(pred, gt, ks, SimplexWeights.uniform(2, (3, 7)))


def test_multiscale_gradient_matches_finite_differences():
    rng = np.random.default_rng(23)
    logits, pred, gt = random_instance(rng, 4, 4, 2)
    ks = KernelSpec((3, 5))
    w = SimplexWeights(ks.sizes, rng.normal(0.0, 0.5, size=(2, 2, 2)))
    _, grad_probs, _ = multiscale_aaf(pred, gt, ks, w)
    analytic = softmax_chain(pred.probs, grad_probs.array)
    fd = _fd_logits(lambda p: multiscale_aaf(p, gt, ks, w)[0].total, logits)
    _assert_close_grad(analytic, fd)


# --- combined_objective ------------------------------------------------------


def test_combined_lambda_zero_equals_unary():
    rng = np.random.default_rng(24)
    _, pred, gt = random_instance(rng, 4, 4, 2)
    ks = KernelSpec((3, 5))
    w = SimplexWeights.uniform(2, ks.sizes)
    hp = HyperParams(lambda_=0.0)
    value, grad, _ = combined_objective(pred, gt, ks, w, hp)
    u_value, u_grad = unary_ce(pred, gt, hp)
    assert value.total == pytest.approx(u_value.total, abs=1e-15)
    np.testing.assert_allclose(grad.array, u_grad.array, atol=1e-15)


def test_combined_perfect_prediction_is_zero():
    gt = LabelGrid(np.array([[0, 0, 1], [0, 1, 1], [1, 1, 1]]), 2)
    ks = KernelSpec((3, 5))
    w = SimplexWeights.uniform(2, ks.sizes)
    value, _, _ = combined_objective(one_hot(gt), gt, ks, w)
    assert value.total == pytest.approx(0.0, abs=1e-9)


def test_combined_recombines_unary_and_aaf():
    rng = np.random.default_rng(25)
    _, pred, gt = random_instance(rng, 5, 5, 3)
    ks = KernelSpec((3, 5))
    w = SimplexWeights(ks.sizes, rng.normal(size=(3, 2, 2)))
    hp = HyperParams(lambda_=0.7)
    value, _, grad_w = combined_objective(pred, gt, ks, w, hp)
    u_value, _ = unary_ce(pred, gt, hp)
    a_value, _, a_grad_w = multiscale_aaf(pred, gt, ks, w, hp)
    assert value.total == pytest.approx(u_value.total + 0.7 * a_value.total, abs=1e-12)
    np.testing.assert_allclose(grad_w.array, 0.7 * a_grad_w.array, atol=1e-15)
    assert value.components == {"unary": u_value.total, "aaf": a_value.total}


def test_combined_gradient_matches_finite_differences():
    rng = np.random.default_rng(26)
    logits, pred, gt = random_instance(rng, 4, 4, 3)
    ks = KernelSpec((3, 5))
    w = SimplexWeights(ks.sizes, rng.normal(0.0, 0.5, size=(3, 2, 2)))
    _, grad, _ = combined_objective(pred, gt, ks, w)
    fd = _fd_logits(
        lambda p: combined_objective(p, gt, ks, w)[0].total, logits
    )
    _assert_close_grad(grad.array, fd)


# --- hyperparameter validation ----------------------------------------------


def test_hyperparams_validate():
    with pytest.raises(ValueError):
        HyperParams(lambda_=-1.0)
    with pytest.raises(ValueError):
        HyperParams(margin=0.0)
    with pytest.raises(ValueError):
        HyperParams(contrastive_margin=-0.2)
    with pytest.raises(ValueError):
        HyperParams(kl_eps=0.5)


# --- helpers -----------------------------------------------------------------


def _fd_logits(loss_of_probs, logits, step=1e-5):
    """Central differences of loss(softmax(logits)) over every logit."""
    fd = np.zeros_like(logits)
    flat = logits.reshape(-1)
    out = fd.reshape(-1)
    for idx in range(flat.size):
        orig = flat[idx]
        flat[idx] = orig + step
        up = loss_of_probs(ProbGrid(softmax(logits)))
        flat[idx] = orig - step
        down = loss_of_probs(ProbGrid(softmax(logits)))
        flat[idx] = orig
        out[idx] = (up - down) / (2 * step)
    return fd


def _assert_close_grad(analytic, fd, tol=1e-5):
    denom = np.maximum(1e-6, np.maximum(np.abs(analytic), np.abs(fd)))
    rel = np.abs(analytic - fd) / denom
    assert rel.max() < tol, f"max relative gradient error {rel.max():.3e}"
