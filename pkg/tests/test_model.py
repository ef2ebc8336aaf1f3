import warnings

import numpy as np
import pytest

from abstain import model as M
from abstain.diffmath import cosine, grad_check, softmax
from abstain.errors import ConfigHashMismatch, ConfigHashWarning, FormatError

from .conftest import unit_rows


@pytest.fixture(scope="module")
def full_params():
    return M.init_params(64, seed=3)


class TestInit:
    def test_shapes(self, full_params):
        assert {k: v.shape for k, v in full_params.items()} == M.param_shapes(64)
        assert full_params["proj.W1"].shape == (512, 64)
        assert full_params["proj.W2"].shape == (256, 512)
        assert full_params["energy.W2"].shape == (1, 256)
        assert full_params["softmax.W2"].shape == (2, 256)

    def test_deterministic(self):
        a, b = M.init_params(16, 9), M.init_params(16, 9)
        assert all(np.array_equal(a[k], b[k]) for k in a)
        c = M.init_params(16, 10)
        assert not np.array_equal(a["proj.W1"], c["proj.W1"])

    def test_zero_biases(self, full_params):
        for k, v in full_params.items():
            if ".b" in k:
                assert not v.any()

    def test_weight_std(self, full_params):
        for k, v in full_params.items():
            if ".W" in k:
                target = np.sqrt(2.0 / v.shape[1])
                assert abs(v.std() / target - 1.0) < 0.10, k

    def test_all_finite(self, full_params):
        assert all(np.all(np.isfinite(v)) for v in full_params.values())


class TestForward:
    def test_unit_norm(self, full_params):
        z = M.project(full_params, unit_rows(np.random.default_rng(0), 100, 64))
        assert np.max(np.abs(np.linalg.norm(z, axis=1) - 1.0)) <= 1e-6

    def test_purity(self, full_params):
        x = unit_rows(np.random.default_rng(1), 4, 64)
        before = M.copy_params(full_params)
        z1, z2 = M.project(full_params, x), M.project(full_params, x)
        assert np.array_equal(z1, z2)
        assert np.array_equal(M.energy(full_params, z1), M.energy(full_params, z1))
        assert all(np.array_equal(before[k], full_params[k]) for k in before)

    def test_batch_matches_single(self, full_params):
        x = unit_rows(np.random.default_rng(2), 3, 64)
        z = M.project(full_params, x)
        np.testing.assert_allclose(M.project(full_params, x[1]), z[1], atol=1e-15)
        assert M.energy(full_params, z[1]) == pytest.approx(M.energy(full_params, z)[1], abs=1e-12)

    def test_zero_energy_head(self, full_params):
        p = M.copy_params(full_params)
        for k in p:
            if k.startswith("energy."):
                p[k][...] = 0.0
        z = M.project(p, unit_rows(np.random.default_rng(3), 5, 64))
        assert np.all(M.energy(p, z) == 0.0)

    def test_softmax_of_zero_logits(self):
        np.testing.assert_allclose(softmax(np.zeros(2)), [0.5, 0.5], atol=1e-15)

    def test_softmax_shift_invariance(self, full_params):
        z = M.project(full_params, unit_rows(np.random.default_rng(4), 6, 64))
        logits = M.softmax_logits(full_params, z)
        np.testing.assert_allclose(softmax(logits + 37.5), softmax(logits), atol=1e-12)

    def test_ood_probability_range(self, full_params):
        z = M.project(full_params, unit_rows(np.random.default_rng(5), 20, 64))
        p = M.ood_probability(full_params, z)
        assert np.all((p > 0) & (p < 1))


def cos_pair_grad(params, xa, xp):
    za, ca = M.project_forward(params, xa)
    zp, cp = M.project_forward(params, xp)
    ga = M.project_backward(params, ca, zp)
    gp = M.project_backward(params, cp, za)
    return {k: ga[k] + gp[k] for k in ga}


class TestProjectorGradient:
    def test_small_model_all_weights(self):
        rng = np.random.default_rng(6)
        p = M.init_params(5, seed=2, hidden=7, latent=4)
        for k in p:
            p[k] += 0.1 * rng.standard_normal(p[k].shape)
        xa, xp = unit_rows(rng, 2, 5)
        g = cos_pair_grad(p, xa, xp)
        f = lambda _: float(cosine(M.project(p, xa), M.project(p, xp)))
        for k in ("proj.W1", "proj.b1", "proj.W2", "proj.b2"):
            assert grad_check(f, p[k], g[k]) < 1e-4, k

    def test_full_size_sampled_coordinates(self):
        rng = np.random.default_rng(7)
        p = M.init_params(16, seed=4)
        p["proj.b1"] += 0.1 * rng.standard_normal(512)
        xa, xp = unit_rows(rng, 2, 16)
        g = cos_pair_grad(p, xa, xp)
        f = lambda _: float(cosine(M.project(p, xa), M.project(p, xp)))
        for k in ("proj.W1", "proj.b1", "proj.W2", "proj.b2"):
            assert grad_check(f, p[k], g[k], eps=1e-5, coords=60, seed=1) < 1e-4, k

    @pytest.mark.parametrize("head,width", [("energy", 1), ("softmax", 2)])
    def test_head_backward(self, head, width):
        rng = np.random.default_rng(8)
        p = M.init_params(5, seed=2, hidden=7, latent=4)
        for k in p:
            p[k] += 0.1 * rng.standard_normal(p[k].shape)
        z = unit_rows(rng, 6, 4)
        w = rng.standard_normal((6, width))
        out, cache = M.head_forward(p, head, z)
        grads, dz = M.head_backward(p, head, cache, w)
        f = lambda _: float(np.sum(M.head_forward(p, head, z)[0] * w))
        for k in grads:
            assert grad_check(f, p[k], grads[k]) < 1e-4, k
        assert grad_check(f, z, dz) < 1e-4


def sample_checkpoint(seed=0):
    p = M.init_params(8, seed, hidden=6, latent=4)
    m = {k: np.full_like(v, 0.25) for k, v in p.items() if k.startswith("proj.")}
    v = {k: np.full_like(x, 1e-3) for k, x in m.items()}
    return M.Checkpoint(p, m, v, step=17, epoch=3, val_loss=0.1 + 0.2, config_hash="abc123", seed=seed, meta={"head": "ebm"})


class TestCheckpoint:
    def test_save_load_save_identical(self, tmp_path):
        M.save_checkpoint(sample_checkpoint(), tmp_path / "a.ckpt")
        back = M.load_checkpoint(tmp_path / "a.ckpt")
        M.save_checkpoint(back, tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_metadata_round_trip(self, tmp_path):
        ck = sample_checkpoint()
        M.save_checkpoint(ck, tmp_path / "a.ckpt")
        back = M.load_checkpoint(tmp_path / "a.ckpt")
        assert back.val_loss == ck.val_loss
        assert (back.step, back.epoch, back.config_hash, back.seed, back.meta) == (17, 3, "abc123", 0, {"head": "ebm"})
        assert list(back.params) == list(ck.params)
        assert all(np.array_equal(back.moments_m[k], ck.moments_m[k]) for k in ck.moments_m)

    def test_probe_batch_forward(self, tmp_path):
        ck = sample_checkpoint(5)
        M.save_checkpoint(ck, tmp_path / "a.ckpt")
        back = M.load_checkpoint(tmp_path / "a.ckpt")
        x = unit_rows(np.random.default_rng(0), 10, 8)
        z0, z1 = M.project(ck.params, x), M.project(back.params, x)
        assert np.array_equal(z0, z1)
        assert np.array_equal(M.energy(ck.params, z0), M.energy(back.params, z1))
        assert np.array_equal(M.softmax_logits(ck.params, z0), M.softmax_logits(back.params, z1))

    @pytest.mark.parametrize("cut", [1, 9, 100, 5])
    def test_truncated(self, tmp_path, cut):
        M.save_checkpoint(sample_checkpoint(), tmp_path / "a.ckpt")
        data = (tmp_path / "a.ckpt").read_bytes()
        (tmp_path / "t.ckpt").write_bytes(data[: len(data) - cut] if cut != 5 else data[:5])
        with pytest.raises(FormatError):
            M.load_checkpoint(tmp_path / "t.ckpt")

    def test_bad_magic(self, tmp_path):
        M.save_checkpoint(sample_checkpoint(), tmp_path / "a.ckpt")
        data = (tmp_path / "a.ckpt").read_bytes()
        (tmp_path / "b.ckpt").write_bytes(b"EMB1" + data[4:])
        with pytest.raises(FormatError):
            M.load_checkpoint(tmp_path / "b.ckpt")

    def test_hash_mismatch(self, tmp_path):
        M.save_checkpoint(sample_checkpoint(), tmp_path / "a.ckpt")
        with pytest.warns(ConfigHashWarning):
            M.load_checkpoint(tmp_path / "a.ckpt", expect_hash="other")
        with pytest.raises(ConfigHashMismatch):
            M.load_checkpoint(tmp_path / "a.ckpt", expect_hash="other", strict=True)
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            M.load_checkpoint(tmp_path / "a.ckpt", expect_hash="abc123", strict=True)
