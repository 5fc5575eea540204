import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from loss_oracle import (
    oracle_average,
    oracle_contrastive,
    oracle_mixup,
    oracle_sharpen,
    oracle_total,
)

from stainssl.errors import InvalidInputError
from stainssl.losses import (
    SslHyperParams,
    average_predictions,
    contrastive_loss,
    contrastive_terms,
    mixup,
    sharpen,
    total_loss,
)


def t64(x):
    return torch.tensor(x, dtype=torch.float64)


def rand_simplex(rng, n_classes):
    p = rng.uniform(0.0, 1.0, size=n_classes)
    if p.sum() == 0:
        p[0] = 1.0
    return p / p.sum()


class TestContrastive:
    def test_margin_cancels_negative_distance(self):
        out = contrastive_loss(t64([0, 0]), t64([0, 0]), t64([37, 0]), 37.0)
        assert float(out) == 0.0

    def test_direct_evaluation(self):
        out = contrastive_loss(t64([0, 0]), t64([0, 0]), t64([10, 0]), 37.0)
        assert float(out) == pytest.approx(27.0, abs=1e-12)

    def test_coincident_negative_and_anchor(self):
        out = contrastive_loss(t64([1, 0]), t64([0, 0]), t64([0, 0]), 0.0)
        assert float(out) == 0.0

    def test_always_non_negative(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            d = rng.integers(1, 8)
            args = [t64(rng.normal(size=d)) for _ in range(3)]
            assert float(contrastive_loss(*args, rng.uniform(0, 5))) >= 0.0

    def test_equals_margin_when_all_coincide(self):
        v = t64([1.5, -2.0, 3.0])
        assert float(contrastive_loss(v, v.clone(), v.clone(), 4.5)) == 4.5

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(InvalidInputError):
            contrastive_loss(t64([1, 2]), t64([1, 2, 3]), t64([1, 2]), 1.0)

    def test_batch_terms_shift_by_one(self):
        rng = np.random.default_rng(1)
        f_h = t64(rng.normal(size=(5, 3)))
        f_e = t64(rng.normal(size=(5, 3)))
        terms = contrastive_terms(f_h, f_e, 2.0)
        for i in range(5):
            ref = contrastive_loss(f_h[i], f_e[i], f_e[(i + 1) % 5], 2.0)
            assert float(terms[i]) == pytest.approx(float(ref), abs=1e-12)


class TestAverage:
    def test_single_prediction_identity(self):
        p = t64([[0.3, 0.7]])
        assert torch.equal(average_predictions(p), p[0])

    def test_symmetric_pair(self):
        out = average_predictions(t64([[1, 0], [0, 1]]))
        assert torch.allclose(out, t64([0.5, 0.5]))

    def test_arithmetic_mean(self):
        out = average_predictions(t64([[0.8, 0.2], [0.6, 0.4]]))
        assert torch.allclose(out, t64([0.7, 0.3]))

    def test_empty_rejected(self):
        with pytest.raises(InvalidInputError):
            average_predictions([])


class TestSharpen:
    def test_temperature_one_is_identity(self):
        y = t64([0.2, 0.5, 0.3])
        assert torch.allclose(sharpen(y, 1.0), y)

    def test_uniform_fixed_point(self):
        y = t64([0.5, 0.5])
        assert torch.allclose(sharpen(y, 0.31), y)

    def test_hand_evaluation(self):
        out = sharpen(t64([0.8, 0.2]), 0.5)
        assert torch.allclose(out, t64([0.64, 0.04]) / 0.68)
        assert float(out[0]) == pytest.approx(0.9412, abs=1e-4)

    def test_zero_entries_stay_zero(self):
        out = sharpen(t64([0.0, 1.0]), 0.5)
        assert torch.equal(out, t64([0.0, 1.0]))

    @settings(max_examples=200, deadline=None)
    @given(
        st.integers(2, 10),
        st.floats(0.05, 0.99),
        st.integers(0, 2**31 - 1),
    )
    def test_simplex_argmax_entropy(self, n_classes, temperature, seed):
        y = rand_simplex(np.random.default_rng(seed), n_classes)
        out = sharpen(t64(y), temperature).numpy()
        assert abs(out.sum() - 1.0) < 1e-9
        assert np.all(out >= 0)
        assert int(np.argmax(out)) == int(np.argmax(y))
        ent_in = -np.sum(y * np.log(np.maximum(y, 1e-300)))
        ent_out = -np.sum(out * np.log(np.maximum(out, 1e-300)))
        assert ent_out <= ent_in + 1e-9


class TestMixup:
    def test_lambda_prime_definition(self):
        x, y, labeled = mixup(t64([1.0]), t64([0.0]), t64([1, 0]), t64([0, 1]), 0.3)
        assert float(x[0]) == pytest.approx(0.7)
        assert torch.allclose(y, t64([0.7, 0.3]))
        assert labeled is True

    def test_midpoint(self):
        x, y, _ = mixup(t64([1.0]), t64([0.0]), t64([1, 0]), t64([0, 1]), 0.5)
        assert float(x[0]) == pytest.approx(0.5)

    def test_identical_points(self):
        xi = t64([[0.2, 0.4], [0.6, 0.8]])
        yi = t64([0.0, 1.0])
        x, y, _ = mixup(xi, xi.clone(), yi, yi.clone(), 0.123)
        assert torch.allclose(x, xi)
        assert torch.allclose(y, yi)

    def test_unlabeled_flag_follows_x_i(self):
        _, _, labeled = mixup(t64([1.0]), t64([0.0]), t64([1]), t64([0]), 0.9, i_is_labeled=False)
        assert labeled is False

    def test_shape_mismatch_rejected(self):
        with pytest.raises(InvalidInputError):
            mixup(t64([1.0, 2.0]), t64([1.0]), t64([1]), t64([0]), 0.5)

    def test_beta_draw_properties(self):
        rng = np.random.default_rng(2)
        for _ in range(2000):
            lam_raw = float(rng.beta(2.0, 2.0))
            y_i = t64(rand_simplex(rng, 3))
            y_j = t64(rand_simplex(rng, 3))
            _, y, _ = mixup(t64([0.0]), t64([1.0]), y_i, y_j, lam_raw)
            lam = max(lam_raw, 1 - lam_raw)
            assert 0.5 <= lam <= 1.0
            assert abs(float(y.sum()) - 1.0) < 1e-9
            assert torch.all(y >= torch.minimum(y_i, y_j) - 1e-12)


class TestTotalLoss:
    def test_perfect_prediction_is_zero(self):
        preds = t64([[1.0, 0.0]])
        total, parts = total_loss(preds, preds.clone(), None, None, None, SslHyperParams())
        assert float(total) == 0.0
        assert parts["ce"] == 0.0

    def test_l2_hand_value(self):
        params = SslHyperParams(lambda_unlabeled=1.0, lambda_contrastive=0.0)
        total, parts = total_loss(
            t64([[1.0, 0.0]]),
            t64([[1.0, 0.0]]),
            t64([[0.5, 0.5]]),
            t64([[1.0, 0.0]]),
            None,
            params,
        )
        assert parts["l2"] == pytest.approx(0.25, abs=1e-12)
        assert float(total) == pytest.approx(0.25, abs=1e-12)

    def test_empty_labeled_rejected(self):
        with pytest.raises(InvalidInputError):
            total_loss(t64([]), t64([]), None, None, None, SslHyperParams())

    def test_empty_unlabeled_term_is_zero(self):
        total, parts = total_loss(
            t64([[0.9, 0.1]]), t64([[1.0, 0.0]]), None, None, None, SslHyperParams()
        )
        assert parts["l2"] == 0.0

    def test_positively_homogeneous_in_weights(self):
        rng = np.random.default_rng(3)
        preds_l = t64([rand_simplex(rng, 4) for _ in range(3)])
        targets_l = t64([rand_simplex(rng, 4) for _ in range(3)])
        preds_u = t64([rand_simplex(rng, 4) for _ in range(5)])
        targets_u = t64([rand_simplex(rng, 4) for _ in range(5)])
        ct = t64(rng.uniform(0, 3, size=8))
        p1 = SslHyperParams(lambda_unlabeled=2.0, lambda_contrastive=0.3)
        p2 = SslHyperParams(lambda_unlabeled=4.0, lambda_contrastive=0.6)
        _, parts1 = total_loss(preds_l, targets_l, preds_u, targets_u, ct, p1)
        _, parts2 = total_loss(preds_l, targets_l, preds_u, targets_u, ct, p2)
        assert parts2["l2"] == pytest.approx(2 * parts1["l2"], rel=1e-12)
        assert parts2["contrastive"] == pytest.approx(2 * parts1["contrastive"], rel=1e-12)
        assert parts1["ce"] == parts2["ce"]


class TestOracleEquivalence:
    """Vectorized implementations against the straight-line scalar oracle."""

    def test_contrastive_matches_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(500):
            d = int(rng.integers(1, 10))
            fh, fe, fk = (rng.normal(size=d) for _ in range(3))
            m = float(rng.uniform(0, 10))
            ref = oracle_contrastive(fh.tolist(), fe.tolist(), fk.tolist(), m)
            got = float(contrastive_loss(t64(fh), t64(fe), t64(fk), m))
            assert abs(got - ref) < 1e-10

    def test_sharpen_matches_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(500):
            y = rand_simplex(rng, int(rng.integers(2, 11)))
            temperature = float(rng.uniform(0.1, 3.0))
            ref = oracle_sharpen(y.tolist(), temperature)
            got = sharpen(t64(y), temperature).tolist()
            assert max(abs(a - b) for a, b in zip(got, ref)) < 1e-10

    def test_average_matches_oracle(self):
        rng = np.random.default_rng(6)
        for _ in range(500):
            k = int(rng.integers(1, 6))
            n_classes = int(rng.integers(2, 8))
            preds = [rand_simplex(rng, n_classes) for _ in range(k)]
            ref = oracle_average([p.tolist() for p in preds])
            got = average_predictions(t64(np.stack(preds))).tolist()
            assert max(abs(a - b) for a, b in zip(got, ref)) < 1e-10

    def test_mixup_matches_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(500):
            n = int(rng.integers(1, 20))
            n_classes = int(rng.integers(2, 6))
            x_i, x_j = rng.normal(size=n), rng.normal(size=n)
            y_i, y_j = rand_simplex(rng, n_classes), rand_simplex(rng, n_classes)
            lam = float(rng.beta(2.0, 2.0))
            ref_x, ref_y, _ = oracle_mixup(x_i.tolist(), x_j.tolist(), y_i.tolist(), y_j.tolist(), lam)
            got_x, got_y, _ = mixup(t64(x_i), t64(x_j), t64(y_i), t64(y_j), lam)
            assert max(abs(a - b) for a, b in zip(got_x.tolist(), ref_x)) < 1e-10
            assert max(abs(a - b) for a, b in zip(got_y.tolist(), ref_y)) < 1e-10

    def test_total_matches_oracle(self):
        rng = np.random.default_rng(8)
        for _ in range(300):
            n_classes = int(rng.integers(2, 6))
            n_l = int(rng.integers(1, 6))
            n_u = int(rng.integers(0, 6))
            n_ct = int(rng.integers(0, 8))
            labeled = [
                (rand_simplex(rng, n_classes), rand_simplex(rng, n_classes))
                for _ in range(n_l)
            ]
            unlabeled = [
                (rand_simplex(rng, n_classes), rand_simplex(rng, n_classes))
                for _ in range(n_u)
            ]
            ct = rng.uniform(0, 5, size=n_ct)
            params = SslHyperParams(
                lambda_unlabeled=float(rng.uniform(0, 10)),
                lambda_contrastive=float(rng.uniform(0, 1)),
            )
            ref = oracle_total(
                [(p.tolist(), t.tolist()) for p, t in labeled],
                [(p.tolist(), t.tolist()) for p, t in unlabeled],
                ct.tolist(),
                params.lambda_unlabeled,
                params.lambda_contrastive,
            )
            got, _ = total_loss(
                t64(np.stack([p for p, _ in labeled])),
                t64(np.stack([t for _, t in labeled])),
                t64(np.stack([p for p, _ in unlabeled])) if n_u else None,
                t64(np.stack([t for _, t in unlabeled])) if n_u else None,
                t64(ct) if n_ct else None,
                params,
            )
            assert abs(float(got) - ref) < 1e-10


def central_diff(fn, x: torch.Tensor, step=1e-5):
    grad = torch.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for idx in range(flat.numel()):
        orig = float(flat[idx])
        flat[idx] = orig + step
        hi = float(fn())
        flat[idx] = orig - step
        lo = float(fn())
        flat[idx] = orig
        gflat[idx] = (hi - lo) / (2 * step)
    return grad


def rel_err(a: torch.Tensor, b: torch.Tensor) -> float:
    denom = max(float(a.abs().max()), float(b.abs().max()), 1e-8)
    return float((a - b).abs().max()) / denom


class TestGradients:
    def test_contrastive_gradients_match_finite_differences(self):
        rng = np.random.default_rng(9)
        checked = 0
        while checked < 20:
            f_h = t64(rng.normal(size=4)).requires_grad_(True)
            f_e = t64(rng.normal(size=4)).requires_grad_(True)
            f_k = t64(rng.normal(size=4)).requires_grad_(True)
            m = float(rng.uniform(0.5, 3.0))
            with torch.no_grad():
                gap = float(contrastive_loss(f_h, f_e, f_k, m))
            if abs(gap) < 1e-3:  # hinge kink neighborhood
                continue
            loss = contrastive_loss(f_h, f_e, f_k, m)
            loss.backward()
            for v in (f_h, f_e, f_k):
                num = central_diff(lambda: contrastive_loss(f_h.detach(), f_e.detach(), f_k.detach(), m), v.data)
                assert rel_err(v.grad, num) < 1e-4
            checked += 1

    def test_cross_entropy_and_l2_gradients(self):
        rng = np.random.default_rng(10)
        params = SslHyperParams(lambda_unlabeled=3.0, lambda_contrastive=0.0)
        preds_l = t64(np.stack([rand_simplex(rng, 4) * 0.9 + 0.025 for _ in range(3)]))
        targets_l = t64(np.stack([rand_simplex(rng, 4) for _ in range(3)]))
        preds_u = t64(np.stack([rand_simplex(rng, 4) for _ in range(4)]))
        targets_u = t64(np.stack([rand_simplex(rng, 4) for _ in range(4)]))
        for leaf in ("labeled", "unlabeled"):
            pl = preds_l.clone().requires_grad_(leaf == "labeled")
            pu = preds_u.clone().requires_grad_(leaf == "unlabeled")
            loss, _ = total_loss(pl, targets_l, pu, targets_u, None, params)
            loss.backward()
            var = pl if leaf == "labeled" else pu
            num = central_diff(
                lambda: total_loss(pl.detach(), targets_l, pu.detach(), targets_u, None, params)[0],
                var.data,
            )
            assert rel_err(var.grad, num) < 1e-4
