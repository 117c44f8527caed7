import numpy as np
import pytest

from sptlab import ops
from sptlab.objectives import (ObjectiveConfig, ObjectiveError, PairBatch, byol_loss,
                               nt_xent, pair_loss, supcon, vicreg)
from sptlab.rng import RandomSource

from helpers import ref_byol, ref_nt_xent, ref_supcon, ref_vicreg


def random_pair(n, d, seed):
    rng = RandomSource(seed)
    return rng.child("z1").normal((n, d)), rng.child("z2").normal((n, d))


class TestNTXent:
    def test_orthogonal_pairs_closed_form(self):
        # two pairs on orthogonal axes, tau=1: every anchor sees positive
        # similarity 1 and two zero negatives -> loss = -log(e/(e+2))
        z1 = np.array([[1.0, 0.0], [0.0, 1.0]])
        z2 = np.array([[1.0, 0.0], [0.0, 1.0]])
        loss, _, _ = nt_xent(z1, z2, 1.0)
        expected = -np.log(np.e / (np.e + 2.0))
        np.testing.assert_allclose(loss, expected, atol=1e-12)
        np.testing.assert_allclose(loss, 0.5514, atol=5e-5)
        np.testing.assert_allclose(loss, ref_nt_xent(z1, z2, 1.0), atol=1e-12)

    def test_identical_embeddings_log_2n_minus_1(self):
        z = np.tile([[0.3, -0.7, 0.1]], (2, 1))
        loss, _, _ = nt_xent(z, z.copy(), 1.0)
        np.testing.assert_allclose(loss, np.log(3.0), atol=1e-12)

    def test_single_pair_rejected(self):
        with pytest.raises(ObjectiveError):
            nt_xent(np.ones((1, 3)), np.ones((1, 3)), 0.5)

    def test_zero_norm_row_rejected(self):
        z1 = np.array([[0.0, 0.0], [1.0, 0.0]])
        with pytest.raises(ValueError, match="zero-norm"):
            nt_xent(z1, np.ones((2, 2)), 0.5)

    def test_matches_reference_on_random_batches(self):
        for seed in range(25):
            n = 2 + seed % 15
            z1, z2 = random_pair(n, 6, seed)
            loss, _, _ = nt_xent(z1, z2, 0.3)
            np.testing.assert_allclose(loss, ref_nt_xent(z1, z2, 0.3), atol=1e-10)

    def test_scale_invariance(self):
        # all row-normalized losses ignore positive per-row rescaling
        z1, z2 = random_pair(5, 4, 42)
        labels = np.array([0, 1, 0, 2, 1])
        scales = RandomSource(43).uniform(0.1, 10.0, size=(5, 1))
        pairs = [
            (nt_xent(z1, z2, 0.5)[0], nt_xent(z1 * scales, z2 * scales[::-1], 0.5)[0]),
            (supcon(z1, z2, labels, 0.5)[0],
             supcon(z1 * scales, z2 * scales[::-1], labels, 0.5)[0]),
            (byol_loss(z1, z2)[0], byol_loss(z1 * scales, z2 * scales[::-1])[0]),
        ]
        for a, b in pairs:
            np.testing.assert_allclose(a, b, atol=1e-8)

    def test_gradient_check(self):
        z1, z2 = random_pair(4, 8, 7)
        _, dz1, dz2 = nt_xent(z1, z2, 0.5)
        numeric = ops.fd_gradients(
            lambda a: nt_xent(a["z1"], a["z2"], 0.5)[0], {"z1": z1, "z2": z2})
        errs = ops.max_relative_error({"z1": dz1, "z2": dz2}, numeric)
        assert max(errs.values()) < 1e-4


class TestVICReg:
    def test_zero_loss_construction(self):
        # paired rows equal, per-dim unbiased variance = gamma^2 - eps exactly,
        # and orthogonal +-1 column patterns so the off-diagonal covariance is 0
        gamma, eps = 1.0, 1e-4
        target = np.sqrt(gamma**2 - eps)
        a = np.array([1.0, 1.0, -1.0, -1.0])
        b = np.array([1.0, -1.0, 1.0, -1.0])
        scale = target / np.sqrt(4.0 / 3.0)
        z = np.stack([a * scale, b * scale], axis=1)
        loss, _, _ = vicreg(z, z.copy(), gamma=gamma, eps=eps)
        np.testing.assert_allclose(loss, 0.0, atol=1e-12)

    def test_constant_rows_variance_hinge(self):
        # all rows one constant vector: invariance and covariance vanish,
        # variance hinge is gamma - sqrt(eps) = 0.99 per dim -> 25 * 0.99
        z = np.tile([[0.5, -1.0, 2.0]], (4, 1))
        loss, _, _ = vicreg(z, z.copy(), invariance=25.0, variance=25.0,
                            covariance=1.0, gamma=1.0, eps=1e-4)
        np.testing.assert_allclose(loss, 24.75, atol=1e-12)

    def test_matches_reference_on_random_batches(self):
        for seed in range(25):
            n = 2 + seed % 15
            z1, z2 = random_pair(n, 5, 100 + seed)
            loss, _, _ = vicreg(z1, z2)
            np.testing.assert_allclose(loss, ref_vicreg(z1, z2), atol=1e-10)

    def test_single_row_rejected(self):
        with pytest.raises(ObjectiveError):
            vicreg(np.ones((1, 3)), np.ones((1, 3)))

    def test_gradient_check(self):
        z1, z2 = random_pair(4, 8, 17)
        _, dz1, dz2 = vicreg(z1, z2)
        numeric = ops.fd_gradients(
            lambda a: vicreg(a["z1"], a["z2"])[0], {"z1": z1, "z2": z2})
        errs = ops.max_relative_error({"z1": dz1, "z2": dz2}, numeric)
        assert max(errs.values()) < 1e-4


class TestBYOL:
    def test_parallel_rows_zero_loss(self):
        p = np.array([[2.0, 0.0], [0.0, 3.0]])
        z = np.array([[5.0, 0.0], [0.0, 1.0]])
        loss, _ = byol_loss(p, z)
        np.testing.assert_allclose(loss, 0.0, atol=1e-12)

    def test_orthogonal_rows(self):
        p = np.array([[1.0, 0.0], [0.0, 1.0]])
        z = np.array([[0.0, 1.0], [1.0, 0.0]])
        loss, _ = byol_loss(p, z)
        np.testing.assert_allclose(loss, 2.0, atol=1e-12)

    def test_antiparallel_rows(self):
        p = np.array([[1.0, 1.0], [2.0, 0.0]])
        loss, _ = byol_loss(p, -p)
        np.testing.assert_allclose(loss, 4.0, atol=1e-12)

    def test_matches_reference(self):
        p, z = random_pair(7, 5, 55)
        loss, _ = byol_loss(p, z)
        np.testing.assert_allclose(loss, ref_byol(p, z), atol=1e-10)

    def test_gradient_flows_into_predictions_only(self):
        p, z = random_pair(4, 6, 56)
        _, dp = byol_loss(p, z)
        numeric = ops.fd_gradients(lambda a: byol_loss(a["p"], z)[0], {"p": p})
        errs = ops.max_relative_error({"p": dp}, numeric)
        assert max(errs.values()) < 1e-4


class TestSupCon:
    def test_distinct_labels_reduce_to_nt_xent(self):
        z1, z2 = random_pair(5, 4, 77)
        labels = np.arange(5)
        loss_sc, d1_sc, d2_sc = supcon(z1, z2, labels, 0.4)
        loss_nt, d1_nt, d2_nt = nt_xent(z1, z2, 0.4)
        np.testing.assert_allclose(loss_sc, loss_nt, atol=1e-12)
        np.testing.assert_allclose(d1_sc, d1_nt, atol=1e-12)
        np.testing.assert_allclose(d2_sc, d2_nt, atol=1e-12)

    def test_identical_same_label_embeddings(self):
        # N=2, one label, all four embeddings identical: uniform softmax over
        # three positives -> loss = log 3
        z = np.tile([[0.2, 0.9]], (2, 1))
        loss, _, _ = supcon(z, z.copy(), np.array([1, 1]), 1.0)
        np.testing.assert_allclose(loss, np.log(3.0), atol=1e-12)

    def test_matches_reference_on_random_batches(self):
        for seed in range(25):
            n = 2 + seed % 15
            z1, z2 = random_pair(n, 6, 200 + seed)
            labels = RandomSource(300 + seed).integers(0, 3, size=n)
            loss, _, _ = supcon(z1, z2, labels, 0.3)
            np.testing.assert_allclose(loss, ref_supcon(z1, z2, labels, 0.3), atol=1e-10)

    def test_gradient_check(self):
        z1, z2 = random_pair(4, 8, 78)
        labels = np.array([0, 1, 0, 2])
        _, dz1, dz2 = supcon(z1, z2, labels, 0.5)
        numeric = ops.fd_gradients(
            lambda a: supcon(a["z1"], a["z2"], labels, 0.5)[0], {"z1": z1, "z2": z2})
        errs = ops.max_relative_error({"z1": dz1, "z2": dz2}, numeric)
        assert max(errs.values()) < 1e-4


class TestBatchProperties:
    def test_permutation_equivariance(self):
        z1, z2 = random_pair(6, 5, 88)
        labels = np.array([0, 1, 2, 0, 1, 2])
        perm = RandomSource(89).permutation(6)
        for fn in (lambda a, b, l: nt_xent(a, b, 0.3),
                   lambda a, b, l: vicreg(a, b),
                   lambda a, b, l: supcon(a, b, l, 0.3)):
            loss, d1, d2 = fn(z1, z2, labels)
            loss_p, d1_p, d2_p = fn(z1[perm], z2[perm], labels[perm])
            np.testing.assert_allclose(loss, loss_p, atol=1e-10)
            np.testing.assert_allclose(d1[perm], d1_p, atol=1e-10)
            np.testing.assert_allclose(d2[perm], d2_p, atol=1e-10)

    def test_dispatch(self):
        z1, z2 = random_pair(4, 6, 90)
        labels = np.array([0, 0, 1, 1])
        loss, grads = pair_loss(PairBatch(z1, z2), ObjectiveConfig(name="simclr", temperature=0.2))
        assert set(grads) == {"z1", "z2"}
        loss_s, _ = pair_loss(PairBatch(z1, z2, labels=labels),
                              ObjectiveConfig(name="supcon", temperature=0.2))
        assert loss_s > 0
        p1, p2 = random_pair(4, 6, 91)
        loss_b, grads_b = pair_loss(PairBatch(z1, z2, p1=p1, p2=p2),
                                    ObjectiveConfig(name="byol"))
        assert set(grads_b) == {"p1", "p2"}
        expected = 0.5 * (byol_loss(p1, z2)[0] + byol_loss(p2, z1)[0])
        np.testing.assert_allclose(loss_b, expected, atol=1e-12)

    def test_supcon_requires_labels(self):
        z1, z2 = random_pair(3, 4, 92)
        with pytest.raises(ObjectiveError, match="labels"):
            pair_loss(PairBatch(z1, z2), ObjectiveConfig(name="supcon"))

    def test_config_validation(self):
        with pytest.raises(ObjectiveError):
            ObjectiveConfig(name="other").validate()
        with pytest.raises(ObjectiveError):
            ObjectiveConfig(temperature=0.0).validate()
        with pytest.raises(ObjectiveError):
            ObjectiveConfig(byol_momentum=1.0).validate()
