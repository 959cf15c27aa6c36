"""Loss terms against independent float64 oracles, plus gradient checks."""

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from anatomy_cbir.networks import AnatomyCodec, init_he_
from anatomy_cbir.objectives import (
    CE_EPS,
    LossWeights,
    cross_entropy_loss,
    dice_loss,
    forward_batch,
    reconstruction_loss,
    reconstruction_terms,
    residual_loss,
    segmentation_loss,
    ssim,
    total_loss,
)
from anatomy_cbir.quantizer import discrimination_loss, latent_loss, quantize
from oracles import (
    cross_entropy_oracle,
    dice_oracle,
    finite_diff_grad,
    rel_err,
    reconstruction_oracle,
    residual_oracle,
    ssim_oracle,
    total_oracle,
)

ORACLE_TOL = 1e-9
GRAD_TOL = 1e-4


def rand_probs(n_classes=3, h=6, w=6, seed=0, batch=None):
    """Random (C+1,H,W) simplex tensor, float64."""
    g = np.random.default_rng(seed)
    shape = (batch, n_classes + 1, h, w) if batch else (n_classes + 1, h, w)
    raw = g.uniform(0.05, 1.0, size=shape)
    probs = raw / raw.sum(axis=-3, keepdims=True)
    return torch.from_numpy(probs)


def rand_labels(n_classes=3, h=6, w=6, seed=1, batch=None, empty_classes=()):
    g = np.random.default_rng(seed)
    shape = (batch, n_classes, h, w) if batch else (n_classes, h, w)
    y = (g.uniform(size=shape) < 0.3).astype(np.float64)
    for k in empty_classes:
        y[..., k, :, :] = 0.0
    return torch.from_numpy(y)


def rand_image(h=8, w=8, seed=2):
    g = np.random.default_rng(seed)
    return torch.from_numpy(g.uniform(0.0, 1.0, size=(h, w)))


def rand_mask(h=8, w=8, seed=3):
    g = np.random.default_rng(seed)
    m = np.zeros((h, w))
    m[2 : h - 3, 2 : w - 3] = 1.0
    return torch.from_numpy(m)


class TestDiceLoss:
    @pytest.mark.parametrize("seed", range(5))
    def test_matches_oracle(self, seed):
        probs = rand_probs(seed=seed)
        y = rand_labels(seed=seed + 100)
        got = float(dice_loss(probs, y))
        want = dice_oracle(probs.numpy(), y.numpy())
        assert rel_err(got, want) < ORACLE_TOL

    def test_matches_oracle_with_empty_class(self):
        probs = rand_probs(seed=7)
        y = rand_labels(seed=8, empty_classes=(1,))
        got = float(dice_loss(probs, y))
        want = dice_oracle(probs.numpy(), y.numpy())
        assert rel_err(got, want) < ORACLE_TOL

    def test_perfect_prediction_scores_zero(self):
        y = rand_labels(seed=4)
        bg = (1.0 - y.sum(dim=0, keepdim=True)).clamp(0.0, 1.0)
        probs = torch.cat([y, bg], dim=0)
        assert float(dice_loss(probs, y)) == pytest.approx(0.0, abs=1e-12)

    def test_all_empty_labels_score_zero(self):
        y = torch.zeros((3, 6, 6), dtype=torch.float64)
        probs = torch.zeros((4, 6, 6), dtype=torch.float64)
        probs[3] = 1.0
        assert float(dice_loss(probs, y)) == pytest.approx(0.0, abs=1e-12)

    def test_batched_is_mean_of_singles(self):
        probs = rand_probs(seed=10, batch=3)
        y = rand_labels(seed=11, batch=3)
        singles = [float(dice_loss(probs[i], y[i])) for i in range(3)]
        assert float(dice_loss(probs, y)) == pytest.approx(np.mean(singles), rel=1e-12)

    @given(seed=st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_bounded_zero_one(self, seed):
        probs = rand_probs(seed=seed)
        y = rand_labels(seed=seed + 1)
        val = float(dice_loss(probs, y))
        assert 0.0 <= val < 1.0

    def test_rejects_channel_mismatch(self):
        with pytest.raises(ValueError):
            dice_loss(torch.rand(3, 6, 6), torch.rand(3, 6, 6))

    def test_gradient_matches_finite_differences(self):
        probs = rand_probs(h=5, w=5, seed=20).requires_grad_(True)
        y = rand_labels(h=5, w=5, seed=21)
        dice_loss(probs, y).backward()

        def f(p):
            return dice_oracle(p, y.numpy())

        fd = finite_diff_grad(f, probs.detach().numpy())
        assert rel_err(probs.grad.numpy(), fd) < GRAD_TOL


class TestCrossEntropyLoss:
    @pytest.mark.parametrize("seed", range(5))
    def test_matches_oracle(self, seed):
        probs = rand_probs(seed=seed)
        y = rand_labels(seed=seed + 50)
        got = float(cross_entropy_loss(probs, y))
        want = cross_entropy_oracle(probs.numpy(), y.numpy())
        assert rel_err(got, want) < ORACLE_TOL

    def test_uniform_prediction_is_log_num_channels(self):
        probs = torch.full((4, 6, 6), 0.25, dtype=torch.float64)
        y = rand_labels(seed=5)
        y = (y / y.sum(dim=0, keepdim=True).clamp_min(1.0)).clamp(0.0, 1.0)
        got = float(cross_entropy_loss(probs, y))
        assert got == pytest.approx(np.log(4.0), rel=1e-12)

    def test_zero_probabilities_stay_finite(self):
        probs = torch.zeros((4, 4, 4), dtype=torch.float64)
        probs[0] = 1.0
        y = torch.zeros((3, 4, 4), dtype=torch.float64)
        y[1] = 1.0
        got = float(cross_entropy_loss(probs, y))
        assert np.isfinite(got)
        assert got == pytest.approx(-np.log(CE_EPS), rel=1e-9)

    def test_gradient_matches_finite_differences(self):
        probs = rand_probs(h=5, w=5, seed=30).requires_grad_(True)
        y = rand_labels(h=5, w=5, seed=31)
        cross_entropy_loss(probs, y).backward()

        def f(p):
            return cross_entropy_oracle(p, y.numpy())

        fd = finite_diff_grad(f, probs.detach().numpy())
        assert rel_err(probs.grad.numpy(), fd) < GRAD_TOL

    def test_segmentation_loss_is_sum_of_parts(self):
        probs = rand_probs(seed=40)
        y = rand_labels(seed=41)
        total, dice, entropy = segmentation_loss(probs, y)
        assert float(total) == pytest.approx(float(dice) + float(entropy), rel=1e-12)
        assert float(dice) == pytest.approx(float(dice_loss(probs, y)), rel=1e-12)
        assert float(entropy) == pytest.approx(float(cross_entropy_loss(probs, y)), rel=1e-12)


class TestSsim:
    @pytest.mark.parametrize("size", [(8, 8), (11, 11), (16, 12)])
    def test_matches_oracle(self, size):
        a = rand_image(*size, seed=1)
        b = rand_image(*size, seed=2)
        got = float(ssim(a, b))
        want = ssim_oracle(a.numpy(), b.numpy())
        assert rel_err(got, want) < ORACLE_TOL

    def test_identical_images_score_one(self):
        a = rand_image(12, 12, seed=3)
        assert float(ssim(a, a)) == pytest.approx(1.0, abs=1e-12)

    def test_constant_images_analytic_value(self):
        c1, c2 = 0.3, 0.7
        a = torch.full((12, 12), c1, dtype=torch.float64)
        b = torch.full((12, 12), c2, dtype=torch.float64)
        want = (2 * c1 * c2 + 0.01**2) / (c1**2 + c2**2 + 0.01**2)
        assert float(ssim(a, b)) == pytest.approx(want, rel=1e-9)

    @given(seed=st.integers(0, 10_000))
    @settings(max_examples=25, deadline=None)
    def test_symmetric_and_bounded(self, seed):
        a = rand_image(9, 9, seed=seed)
        b = rand_image(9, 9, seed=seed + 1)
        ab, ba = float(ssim(a, b)), float(ssim(b, a))
        assert ab == pytest.approx(ba, abs=1e-12)
        assert -1.0 - 1e-9 <= ab <= 1.0 + 1e-9

    def test_window_shrinks_for_small_images(self):
        a = rand_image(6, 6, seed=5)
        b = rand_image(6, 6, seed=6)
        got = float(ssim(a, b))
        want = ssim_oracle(a.numpy(), b.numpy(), window=11)
        assert rel_err(got, want) < ORACLE_TOL

    def test_rejects_mismatched_shapes(self):
        with pytest.raises(ValueError):
            ssim(torch.rand(8, 8), torch.rand(9, 9))

    def test_gradient_matches_finite_differences(self):
        a = rand_image(8, 8, seed=7).requires_grad_(True)
        b = rand_image(8, 8, seed=8)
        ssim(a, b).backward()

        def f(av):
            return ssim_oracle(av, b.numpy())

        fd = finite_diff_grad(f, a.detach().numpy())
        assert rel_err(a.grad.numpy(), fd) < GRAD_TOL


class TestReconstructionLoss:
    def test_matches_oracle(self):
        x = rand_image(seed=1)
        xm = rand_image(seed=2)
        xp = rand_image(seed=3)
        m = rand_mask(seed=4)
        got_minus, got_plus = reconstruction_terms(x, xm, xp, m)
        want_minus, want_plus = reconstruction_oracle(
            x.numpy(), xm.numpy(), xp.numpy(), m.numpy()
        )
        assert rel_err(float(got_minus), want_minus) < ORACLE_TOL
        assert rel_err(float(got_plus), want_plus) < ORACLE_TOL
        total = float(reconstruction_loss(x, xm, xp, m))
        assert rel_err(total, want_minus + want_plus) < ORACLE_TOL

    def test_residual_matches_oracle(self):
        xm = rand_image(seed=5)
        xp = rand_image(seed=6)
        m = rand_mask(seed=7)
        got = float(residual_loss(xm, xp, m))
        want = residual_oracle(xm.numpy(), xp.numpy(), m.numpy())
        assert rel_err(got, want) < ORACLE_TOL

    def test_residual_zero_for_equal_reconstructions(self):
        xm = rand_image(seed=8)
        assert float(residual_loss(xm, xm.clone(), rand_mask(seed=9))) == 0.0

    def test_normal_term_ignores_masked_region(self):
        """Editing the pseudo-normal reconstruction strictly inside the
        abnormal region must not move its loss term, nor the residual."""
        x = rand_image(seed=10)
        xp = rand_image(seed=11)
        m = rand_mask(seed=12)
        xm = rand_image(seed=13)
        edited = xm + 5.0 * m * rand_image(seed=14)
        base_minus, base_plus = reconstruction_terms(x, xm, xp, m)
        edit_minus, edit_plus = reconstruction_terms(x, edited, xp, m)
        assert float(base_minus) == float(edit_minus)
        assert float(base_plus) == float(edit_plus)
        assert float(residual_loss(edited, xp, m)) == float(residual_loss(xm, xp, m))

    def test_empty_mask_reduces_to_whole_image(self):
        x = rand_image(seed=15)
        xm = rand_image(seed=16)
        xp = rand_image(seed=17)
        zero = torch.zeros_like(x)
        rec_minus, _ = reconstruction_terms(x, xm, xp, zero)
        want = float((xm - x).square().mean() + (1.0 - ssim(xm, x)))
        assert float(rec_minus) == pytest.approx(want, rel=1e-12)

    def test_rejects_shape_mismatch(self):
        with pytest.raises(ValueError):
            reconstruction_terms(
                rand_image(8, 8), rand_image(8, 8), rand_image(6, 6), rand_mask()
            )
        with pytest.raises(ValueError):
            residual_loss(rand_image(8, 8), rand_image(8, 8), rand_mask(6, 6))

    def test_gradients_match_finite_differences(self):
        x = rand_image(seed=20)
        m = rand_mask(seed=21)
        xp0 = rand_image(seed=22)
        xm = rand_image(seed=23).requires_grad_(True)
        xp = xp0.clone().requires_grad_(True)
        reconstruction_loss(x, xm, xp, m).backward()

        def f_minus(v):
            r_minus, _ = reconstruction_oracle(x.numpy(), v, xp0.numpy(), m.numpy())
            return r_minus

        def f_plus(v):
            _, r_plus = reconstruction_oracle(
                x.numpy(), xm.detach().numpy(), v, m.numpy()
            )
            return r_plus

        fd_minus = finite_diff_grad(f_minus, xm.detach().numpy())
        fd_plus = finite_diff_grad(f_plus, xp.detach().numpy())
        assert rel_err(xm.grad.numpy(), fd_minus) < GRAD_TOL
        assert rel_err(xp.grad.numpy(), fd_plus) < GRAD_TOL

    def test_residual_gradient_matches_finite_differences(self):
        # keep the two reconstructions well apart so |.| is smooth at every pixel
        xm = (rand_image(seed=24) + 1.0).requires_grad_(True)
        xp = rand_image(seed=25)
        m = rand_mask(seed=26)
        residual_loss(xm, xp, m).backward()

        def f(v):
            return residual_oracle(v, xp.numpy(), m.numpy())

        fd = finite_diff_grad(f, xm.detach().numpy())
        assert rel_err(xm.grad.numpy(), fd) < GRAD_TOL


class TestLatentAndHingeGradients:
    """Finite differences against the surrogate autograd actually sees:
    code assignments (and the straight-through copy) held fixed."""

    def _setup(self, seed=0):
        torch.manual_seed(seed)
        from anatomy_cbir.quantizer import Codebook

        book = Codebook(16, 4)
        book.weight.data = torch.randn(16, 4, dtype=torch.float64) * 0.5
        g = torch.Generator().manual_seed(seed + 1)
        z = torch.randn(4, 3, 3, generator=g, dtype=torch.float64)
        return book, z

    def test_latent_gradient_wrt_encoder_output(self):
        book, z0 = self._setup(seed=2)
        z = z0.clone().requires_grad_(True)
        res = quantize(z, book)
        latent_loss(z, res, 0.25).backward()
        z_q = res.z_q.detach().numpy()

        def f(v):
            # commitment term only: the codebook term sees sg[z_e]
            return 0.25 * float(((v - z_q) ** 2).mean())

        fd = finite_diff_grad(f, z0.numpy())
        assert rel_err(z.grad.numpy(), fd) < GRAD_TOL

    def test_latent_gradient_wrt_codebook(self):
        book, z0 = self._setup(seed=3)
        res = quantize(z0, book)
        latent_loss(z0, res, 0.25).backward()
        idx = res.indices.detach().numpy()
        w0 = book.weight.detach().numpy().copy()

        def f(wv):
            picked = wv[idx.reshape(-1)].reshape(3, 3, 4).transpose(2, 0, 1)
            return float(((picked - z0.numpy()) ** 2).mean())

        fd = finite_diff_grad(f, w0)
        assert rel_err(book.weight.grad.numpy(), fd) < GRAD_TOL

    def test_hinge_gradient_in_active_region(self):
        book, z0 = self._setup(seed=4)
        z = (0.3 * z0.clone()).requires_grad_(True)  # commitment well below pi
        res = quantize(z, book)
        pi = float(res.commitment_sq.detach()) + 1.0
        discrimination_loss(z, res, pi).backward()
        z_q = res.z_q.detach().numpy()

        def f(v):
            return max(pi - float(((v - z_q) ** 2).mean()), 0.0)

        fd = finite_diff_grad(f, z.detach().numpy())
        assert rel_err(z.grad.numpy(), fd) < GRAD_TOL

    def test_hinge_gradient_wrt_codebook(self):
        """The hinge carries no stop-gradient: the selected rows are pushed
        away from lesion-free content (frozen-assignment surrogate)."""
        book, z0 = self._setup(seed=6)
        z = 0.3 * z0  # commitment well below pi: hinge active
        res = quantize(z, book)
        pi = float(res.commitment_sq.detach()) + 1.0
        discrimination_loss(z, res, pi).backward()
        idx = res.indices.detach().numpy()
        w0 = book.weight.detach().numpy().copy()
        z_np = z.numpy()

        def f(wv):
            picked = wv[idx.reshape(-1)].reshape(3, 3, 4).transpose(2, 0, 1)
            return max(pi - float(((z_np - picked) ** 2).mean()), 0.0)

        fd = finite_diff_grad(f, w0)
        assert rel_err(book.weight.grad.numpy(), fd) < GRAD_TOL

    def test_hinge_gradient_vanishes_when_inactive(self):
        book, z0 = self._setup(seed=5)
        z = z0.clone().requires_grad_(True)
        res = quantize(z, book)
        pi = 0.5 * float(res.commitment_sq.detach())  # already past the margin
        discrimination_loss(z, res, pi).backward()
        assert torch.all(z.grad == 0)
        assert book.weight.grad is None or torch.all(book.weight.grad == 0)


class TestTotalLoss:
    def test_weighted_sum_example(self):
        report = total_loss(
            lat=1.0, dis=2.0, seg=3.0, rec=4.0, res=5.0, weights=LossWeights()
        )
        assert float(report.total) == pytest.approx(
            total_oracle(1, 2, 3, 4, 5, 1.0, 1.0, 1.0e4, 1.0), rel=1e-12
        )
        assert float(report.total) == pytest.approx(40011.0, rel=1e-12)

    def test_custom_weights(self):
        w = LossWeights(lambda_dis=2.0, lambda_seg=0.5, lambda_rec=3.0, lambda_res=7.0)
        report = total_loss(lat=1.0, dis=1.0, seg=1.0, rec=1.0, res=1.0, weights=w)
        assert float(report.total) == pytest.approx(1 + 2 + 0.5 + 3 + 7, rel=1e-12)

    def test_report_to_dict_detaches(self):
        lat = torch.tensor(1.0, requires_grad=True)
        report = total_loss(lat=lat, dis=0.1, seg=0.1, rec=0.1, res=0.1,
                            weights=LossWeights())
        d = report.to_dict()
        assert set(d) == {"lat", "dis", "seg", "rec", "res", "total",
                          "dice", "entropy", "rec_minus", "rec_plus"}
        assert all(isinstance(v, float) for v in d.values())

    def test_weights_reject_nonpositive(self):
        with pytest.raises(ValueError):
            LossWeights(lambda_rec=0.0)
        with pytest.raises(ValueError):
            LossWeights(pi=-1.0)

    def test_weights_round_trip(self):
        w = LossWeights(lambda_rec=123.0, pi=4.5)
        assert LossWeights.from_dict(w.to_dict()) == w


@pytest.fixture(scope="module")
def batch(phantom_set_64):
    from anatomy_cbir.trainer import _collate

    torch.manual_seed(99)
    model = AnatomyCodec(image_size=64, num_codes=32, code_dim=16)
    init_he_(model)
    # jitter the zero-initialized heads so both decoder trunks carry signal
    model.seg_decoder.core.head.weight.data.normal_(0.0, 0.05)
    model.image_decoder.core.head.weight.data.normal_(0.0, 0.05)
    picked = [s for s in phantom_set_64 if s.is_abnormal][:2]
    picked += [s for s in phantom_set_64 if not s.is_abnormal][:2]
    x, y, mask, flags = _collate(picked, 64)
    return model, x, y, mask, flags


class TestForwardBatch:

    def test_all_parameter_groups_receive_gradients(self, batch):
        model, x, y, mask, flags = batch
        model.zero_grad(set_to_none=True)
        out = forward_batch(model, x, y, mask, flags, LossWeights())
        out.report.total.backward()
        silent = [
            name
            for name, p in model.named_parameters()
            if p.grad is None or not bool(p.grad.abs().sum() > 0)
        ]
        assert silent == []

    def test_pseudo_normal_ignores_abnormal_code_path(self, batch):
        """The normal-path reconstruction must be fully isolated from the
        abnormal codebook, the abnormal encoder head and the mask decoder."""
        model, x, y, mask, flags = batch
        out = forward_batch(model, x, y, mask, flags, LossWeights())
        grads = torch.autograd.grad(
            out.x_hat_minus.sum(),
            [model.book_abnormal.weight, out.z_e_plus]
            + list(model.seg_decoder.parameters()),
            retain_graph=True,
            allow_unused=True,
        )
        assert all(g is None for g in grads)

    def test_total_is_weighted_sum_of_reported_terms(self, batch):
        model, x, y, mask, flags = batch
        w = LossWeights()
        out = forward_batch(model, x, y, mask, flags, w)
        r = out.report.to_dict()
        want = (r["lat"] + w.lambda_dis * r["dis"] + w.lambda_seg * r["seg"]
                + w.lambda_rec * r["rec"] + w.lambda_res * r["res"])
        assert r["total"] == pytest.approx(want, rel=1e-6)

    def test_hinge_applies_only_to_normal_slices(self, batch):
        """With every slice flagged abnormal the hinge term must vanish; with
        every slice flagged normal the abnormal-path pull must vanish."""
        model, x, y, mask, flags = batch
        all_abn = torch.ones_like(flags)
        all_norm = torch.zeros_like(flags)
        out_abn = forward_batch(model, x, y, mask, all_abn, LossWeights()).report.to_dict()
        out_norm = forward_batch(model, x, y, mask, all_norm, LossWeights()).report.to_dict()
        assert out_abn["dis"] == 0.0
        # normal-path latent is identical either way; the difference is the
        # abnormal-path pull, present only for abnormal slices
        assert out_abn["lat"] > out_norm["lat"]
        assert out_norm["dis"] >= 0.0

    def test_outputs_have_matching_shapes(self, batch):
        model, x, y, mask, flags = batch
        out = forward_batch(model, x, y, mask, flags, LossWeights())
        assert out.x_hat_minus.shape == x.shape
        assert out.x_hat_plus.shape == x.shape
        assert out.seg_logits.shape == (x.shape[0], model.num_classes + 1, *x.shape[-2:])
        grid = model.code_grid
        assert out.z_e_minus.shape == (x.shape[0], model.code_dim, grid, grid)
        assert out.indices_plus.shape == (x.shape[0], grid, grid)
