"""Stage-2 latent diffusion: schedules, conditioning, denoiser, sampling."""

import numpy as np
import pytest

from spiraldiff.autodiff import Tensor
from spiraldiff.config import Stage2Config
from spiraldiff.latent_diffusion import (
    BETA_MAX,
    BETA_MIN,
    ConditioningBundle,
    NoiseSchedule,
    align_audio_to_motion,
    denoiser_predict,
    encode_conditions,
    forward_diffuse,
    generate_animation,
    huber_mean,
    init_stage2_params,
    latent_targets,
    load_stage2_checkpoint,
    make_noise_schedule,
    one_hot_style,
    sample,
    save_stage2_checkpoint,
    stage1_fingerprint,
    stage2_loss,
    train_stage2,
)
from spiraldiff.motion import AudioFeatures
from spiraldiff.motion_autoencoder import Stage1Checkpoint
from spiraldiff.rng import named_rng

from conftest import LEAN_STAGE2

TINY = Stage2Config(
    steps=10, embed_dim=32, layers=2, heads=4, ff_mult=2,
    audio_backend="conv", conv_layers=2, conv_width=3,
)


def tiny_params(seed=30, latent_h=2, latent_c=4, n_subjects=2, audio_channels=3):
    rng = np.random.default_rng(seed)
    return init_stage2_params(TINY, latent_h, latent_c, n_subjects, audio_channels, rng)


def tiny_bundle(t=6, audio_channels=3, step=1, seed=31):
    rng = np.random.default_rng(seed)
    return ConditioningBundle(
        audio=rng.standard_normal((t, audio_channels)),
        style=np.array([1.0, 0.0]),
        step=step,
    )


class TestNoiseSchedule:
    def test_unscaled_two_step_endpoints(self):
        sch = make_noise_schedule(2, "linear-unscaled")
        assert np.array_equal(sch.betas, np.array([BETA_MIN, BETA_MAX]))
        want = [1.0, 1.0 - 1e-4, (1.0 - 1e-4) * (1.0 - 0.02)]
        assert np.allclose(sch.alpha_bars, want, rtol=0, atol=1e-15)

    def test_scaled_matches_unscaled_at_reference_length(self):
        a = make_noise_schedule(1000, "linear")
        b = make_noise_schedule(1000, "linear-unscaled")
        assert np.allclose(a.betas, b.betas, rtol=0, atol=1e-15)

    def test_scaled_preserves_total_noise_at_short_lengths(self):
        # the point of rescaling: ~full signal destruction regardless of N
        for n in (10, 50, 200):
            sch = make_noise_schedule(n, "linear")
            assert sch.alpha_bars[-1] < 1e-3, n

    def test_default_fifty_step_schedule(self):
        sch = make_noise_schedule(50)
        assert sch.n_steps == 50
        assert sch.alpha_bars.shape == (51,)
        assert sch.alpha_bars[0] == 1.0
        assert np.all(np.diff(sch.alpha_bars) < 0)
        assert np.all((sch.betas > 0) & (sch.betas < 1))
        assert np.all(np.diff(sch.betas) >= 0)
        assert np.array_equal(sch.alphas, 1.0 - sch.betas)

    def test_closed_form_alpha_bar(self):
        sch = make_noise_schedule(5, "linear-unscaled")
        assert np.allclose(
            sch.alpha_bars[1:], np.cumprod(1.0 - sch.betas), rtol=0, atol=1e-16
        )

    def test_rejects_bad_arguments(self):
        with pytest.raises(ValueError):
            make_noise_schedule(1)
        with pytest.raises(ValueError):
            make_noise_schedule(10, "cosine")
        with pytest.raises(ValueError):
            NoiseSchedule(betas=np.array([0.5, 0.2]))  # decreasing
        with pytest.raises(ValueError):
            NoiseSchedule(betas=np.array([0.0, 0.5]))  # outside (0, 1)


class TestForwardDiffuse:
    def test_exact_mixing_formula(self):
        sch = make_noise_schedule(4, "linear-unscaled")
        rng = np.random.default_rng(32)
        z0 = rng.standard_normal((3, 2, 2))
        eps = rng.standard_normal(z0.shape)
        for n in (1, 2, 4):
            z_n, used = forward_diffuse(z0, n, sch, noise=eps)
            ab = sch.alpha_bars[n]
            assert np.array_equal(used, eps)
            assert np.allclose(
                z_n, np.sqrt(ab) * z0 + np.sqrt(1 - ab) * eps, atol=1e-15
            )

    def test_rng_path_is_deterministic(self):
        sch = make_noise_schedule(4)
        z0 = np.ones((2, 2, 2))
        a, na = forward_diffuse(z0, 2, sch, rng=np.random.default_rng(1))
        b, nb = forward_diffuse(z0, 2, sch, rng=np.random.default_rng(1))
        assert np.array_equal(a, b)
        assert np.array_equal(na, nb)

    def test_terminal_step_is_nearly_pure_noise(self):
        sch = make_noise_schedule(50)
        rng = np.random.default_rng(33)
        z0 = np.full((40, 5, 10), 7.0)  # strong signal
        z_n, _ = forward_diffuse(z0, 50, sch, rng=rng)
        assert abs(z_n.mean()) < 0.1
        assert abs(z_n.std() - 1.0) < 0.1

    def test_step_bounds(self):
        sch = make_noise_schedule(4)
        z0 = np.zeros((1, 1, 1))
        for bad in (0, 5, -1):
            with pytest.raises(ValueError):
                forward_diffuse(z0, bad, sch, noise=np.zeros_like(z0))
        with pytest.raises(ValueError):
            forward_diffuse(z0, 1, sch)  # no rng, no noise
        with pytest.raises(ValueError):
            forward_diffuse(z0, 1, sch, noise=np.zeros((2, 1, 1)))


class TestAlignAudio:
    def test_equal_length_passthrough_is_same_object(self):
        x = np.ones((5, 2))
        assert align_audio_to_motion(x, 5) is x

    def test_upsample_ramp(self):
        x = np.array([[0.0], [1.0]])
        out = align_audio_to_motion(x, 3)
        assert np.allclose(out[:, 0], [0.0, 0.5, 1.0], atol=1e-15)

    def test_downsample_keeps_endpoints(self):
        x = np.linspace(0, 9, 10)[:, None]
        out = align_audio_to_motion(x, 4)
        assert np.allclose(out[:, 0], [0.0, 3.0, 6.0, 9.0], atol=1e-12)

    def test_validation(self):
        with pytest.raises(ValueError):
            align_audio_to_motion(np.zeros(5), 3)
        with pytest.raises(ValueError):
            align_audio_to_motion(np.zeros((5, 2)), 0)


class TestConditioning:
    def test_bundle_validation(self):
        with pytest.raises(ValueError):
            ConditioningBundle(audio=np.zeros((3, 2)), style=np.array([0.5, 0.4]))
        with pytest.raises(ValueError):
            ConditioningBundle(audio=np.zeros((3, 2)), style=np.array([-0.1, 1.1]))
        with pytest.raises(ValueError):
            ConditioningBundle(audio=np.zeros(3), style=np.array([1.0]))
        with pytest.raises(ValueError):
            ConditioningBundle(audio=np.zeros((3, 2)), style=np.array([1.0]), step=0)
        b = tiny_bundle().with_step(4)
        assert b.step == 4

    def test_one_hot_style(self):
        assert one_hot_style(1, 3).tolist() == [0.0, 1.0, 0.0]
        with pytest.raises(ValueError):
            one_hot_style(3, 3)

    def test_style_moves_query_only(self):
        params = tiny_params()
        z = np.random.default_rng(34).standard_normal((6, 2, 4))
        a = tiny_bundle()
        b = ConditioningBundle(audio=a.audio, style=np.array([0.0, 1.0]), step=1)
        qa, kva = encode_conditions(z, a, params, TINY)
        qb, kvb = encode_conditions(z, b, params, TINY)
        assert not np.allclose(qa.value, qb.value)
        assert np.array_equal(kva.value, kvb.value)

    def test_step_moves_kv_only(self):
        params = tiny_params()
        z = np.random.default_rng(35).standard_normal((6, 2, 4))
        a = tiny_bundle(step=1)
        b = tiny_bundle(step=9)
        qa, kva = encode_conditions(z, a, params, TINY)
        qb, kvb = encode_conditions(z, b, params, TINY)
        assert np.array_equal(qa.value, qb.value)
        assert not np.allclose(kva.value, kvb.value)

    def test_audio_moves_kv_only(self):
        params = tiny_params()
        z = np.random.default_rng(36).standard_normal((6, 2, 4))
        a = tiny_bundle(seed=40)
        b = tiny_bundle(seed=41)
        qa, kva = encode_conditions(z, a, params, TINY)
        qb, kvb = encode_conditions(z, b, params, TINY)
        assert np.array_equal(qa.value, qb.value)
        assert not np.allclose(kva.value, kvb.value)

    def test_validation_errors(self):
        params = tiny_params()
        z = np.zeros((4, 2, 4))
        with pytest.raises(ValueError, match="no denoising step"):
            encode_conditions(z, tiny_bundle(step=None), params, TINY)
        with pytest.raises(ValueError, match="outside the"):
            encode_conditions(z, tiny_bundle(step=11), params, TINY)
        with pytest.raises(ValueError, match="style vector"):
            bundle = ConditioningBundle(
                audio=np.zeros((4, 3)), style=np.array([0.5, 0.25, 0.25]), step=1
            )
            encode_conditions(z, bundle, params, TINY)
        with pytest.raises(ValueError, match="features per frame"):
            encode_conditions(np.zeros((4, 3, 3)), tiny_bundle(), params, TINY)


class TestDenoiser:
    def test_plain_in_plain_out_and_shape(self):
        params = tiny_params()
        z = np.random.default_rng(37).standard_normal((6, 2, 4))
        out = denoiser_predict(z, tiny_bundle(), params, TINY)
        assert isinstance(out, np.ndarray)
        assert out.shape == (6, 2, 4)
        out_t = denoiser_predict(Tensor(z), tiny_bundle(), params, TINY)
        assert isinstance(out_t, Tensor)
        assert np.array_equal(out_t.value, out)

    def test_causal_in_noisy_latents(self):
        # perturbing frame t must leave predictions before t untouched
        params = tiny_params()
        rng = np.random.default_rng(38)
        z = rng.standard_normal((8, 2, 4))
        bundle = tiny_bundle(t=8)
        base = denoiser_predict(z, bundle, params, TINY)
        for t0 in (2, 5, 7):
            z2 = z.copy()
            z2[t0] += 1.0
            out = denoiser_predict(z2, bundle, params, TINY)
            assert np.array_equal(out[:t0], base[:t0]), t0
            assert not np.allclose(out[t0], base[t0])

    def test_causal_in_audio(self):
        params = tiny_params()
        rng = np.random.default_rng(39)
        z = rng.standard_normal((8, 2, 4))
        bundle = tiny_bundle(t=8)
        base = denoiser_predict(z, bundle, params, TINY)
        for t0 in (3, 6):
            audio = bundle.audio.copy()
            audio[t0] += 1.0
            out = denoiser_predict(
                z, ConditioningBundle(audio=audio, style=bundle.style, step=1), params, TINY
            )
            assert np.array_equal(out[:t0], base[:t0]), t0

    def test_alignment_is_strict_one_to_one(self):
        # width-1 conv, single layer: audio frame t reaches output frame t only
        cfg = Stage2Config(
            steps=10, embed_dim=32, layers=1, heads=4, ff_mult=2,
            audio_backend="conv", conv_layers=1, conv_width=1,
        )
        rng = np.random.default_rng(42)
        params = init_stage2_params(cfg, 2, 4, 2, 3, rng)
        z = rng.standard_normal((8, 2, 4))
        bundle = tiny_bundle(t=8)
        base = denoiser_predict(z, bundle, params, cfg)
        t0 = 4
        audio = bundle.audio.copy()
        audio[t0] += 1.0
        out = denoiser_predict(
            z, ConditioningBundle(audio=audio, style=bundle.style, step=1), params, cfg
        )
        changed = np.nonzero(np.any(out != base, axis=(1, 2)))[0]
        assert changed.tolist() == [t0]


class TestHuberAndLoss:
    def test_hand_computed_fixture(self):
        # delta 1: |e| = 0.5 -> 0.125 (quadratic), |e| = 2 -> 1.5 (linear)
        val = huber_mean(Tensor(np.array([0.5, 2.0])), 1.0)
        assert val.item() == pytest.approx(0.8125)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(43)
        x0 = rng.standard_normal(20) * 2.0
        x0 = x0[np.abs(np.abs(x0) - 1.0) > 1e-3]  # stay off the seam
        leaf = Tensor(x0, requires_grad=True)
        huber_mean(leaf, 1.0).backward()
        eps = 1e-6
        for i in range(x0.size):
            xp, xm = x0.copy(), x0.copy()
            xp[i] += eps
            xm[i] -= eps
            fd = (huber_mean(Tensor(xp), 1.0).item() - huber_mean(Tensor(xm), 1.0).item()) / (2 * eps)
            assert abs(fd - leaf.grad[i]) < 1e-4

    def test_velocity_term_vanishes_for_constant_offset(self):
        # integer-valued latents offset by an exact constant: frame
        # differences match bit for bit, so the velocity Huber is exactly 0
        cfg = Stage2Config(huber_delta=1.0)
        rng = np.random.default_rng(44)
        z0 = rng.integers(-3, 4, size=(5, 2, 3)).astype(np.float64)
        z0_hat = z0 + 3.0
        total, comps = stage2_loss(Tensor(z0_hat), Tensor(z0), cfg)
        assert comps["velocity"] == 0.0
        assert comps["recon"] == pytest.approx(2.5)  # linear tail at |e| = 3
        assert comps["total"] == pytest.approx(2.5)

    def test_single_frame_has_zero_velocity(self):
        cfg = Stage2Config()
        total, comps = stage2_loss(
            Tensor(np.ones((1, 2, 2))), Tensor(np.zeros((1, 2, 2))), cfg
        )
        assert comps["velocity"] == 0.0
        assert comps["recon"] == pytest.approx(0.5)

    def test_loss_weights(self):
        cfg = Stage2Config(lambda_rec=2.0, lambda_vel=3.0)
        rng = np.random.default_rng(45)
        z0 = rng.standard_normal((4, 2, 2))
        z0_hat = rng.standard_normal((4, 2, 2))
        total, comps = stage2_loss(Tensor(z0_hat), Tensor(z0), cfg)
        assert comps["total"] == pytest.approx(
            2.0 * comps["recon"] + 3.0 * comps["velocity"]
        )


class TestSampler:
    def test_reproducible_per_seed(self):
        params = tiny_params()
        sch = make_noise_schedule(6)
        bundle = tiny_bundle()
        a = sample(bundle, sch, params, TINY, (2, 4), rng=np.random.default_rng(50))
        b = sample(bundle, sch, params, TINY, (2, 4), rng=np.random.default_rng(50))
        c = sample(bundle, sch, params, TINY, (2, 4), rng=np.random.default_rng(51))
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)
        assert a.shape == (6, 2, 4)

    def test_deterministic_flag_removes_rng_dependence(self):
        params = tiny_params()
        sch = make_noise_schedule(6)
        bundle = tiny_bundle()
        z_init = np.random.default_rng(52).standard_normal((6, 2, 4))
        a = sample(
            bundle, sch, params, TINY, (2, 4),
            rng=np.random.default_rng(1), deterministic=True, initial_noise=z_init,
        )
        b = sample(
            bundle, sch, params, TINY, (2, 4),
            rng=np.random.default_rng(999), deterministic=True, initial_noise=z_init,
        )
        assert np.array_equal(a, b)

    def test_single_step_schedule_is_one_denoiser_call(self):
        params = tiny_params()
        sch = NoiseSchedule(betas=np.array([0.5]))
        bundle = tiny_bundle()
        z_init = np.random.default_rng(53).standard_normal((6, 2, 4))
        out = sample(bundle, sch, params, TINY, (2, 4), initial_noise=z_init)
        want = denoiser_predict(z_init, bundle.with_step(1), params, TINY)
        assert np.array_equal(out, want)

    def test_frame_count_and_validation(self):
        params = tiny_params()
        sch = make_noise_schedule(4)
        bundle = tiny_bundle(t=6)
        out = sample(
            bundle, sch, params, TINY, (2, 4), rng=np.random.default_rng(54), t_frames=9
        )
        assert out.shape == (9, 2, 4)
        with pytest.raises(ValueError):
            sample(bundle, sch, params, TINY, (2, 4))  # no rng, no noise
        with pytest.raises(ValueError):
            sample(bundle, sch, params, TINY, (2, 4), initial_noise=np.zeros((6, 1, 4)))


class TestTraining:
    def test_loss_curve_decreases(self, stage2_ckpt):
        curve = stage2_ckpt.loss_curve
        assert curve.shape == (10, 3)
        assert curve[-1, 0] < curve[0, 0] * 0.8

    def test_checkpoint_pins_stage1(self, stage1_ckpt, stage2_ckpt):
        assert stage2_ckpt.stage1_hash == stage1_fingerprint(stage1_ckpt.params)
        assert stage2_ckpt.pyramid_hash == stage1_ckpt.pyramid_hash

    def test_deterministic_given_seed(self, corpus, pyramid, stage1_ckpt):
        cfg = Stage2Config(epochs=2, lr=1e-3, **LEAN_STAGE2)
        a = train_stage2(corpus, stage1_ckpt, pyramid, cfg, seed=13)
        b = train_stage2(corpus, stage1_ckpt, pyramid, cfg, seed=13)
        for k in a.params:
            assert np.array_equal(a.params[k].value, b.params[k].value), k

    def test_pyramid_mismatch_rejected(self, corpus, stage1_ckpt):
        from spiraldiff.pyramid import build_pyramid

        other = build_pyramid(corpus.base_mesh, 4, (0.5, 0.5, 0.5), 9, dilation=1)
        cfg = Stage2Config(epochs=1, **LEAN_STAGE2)
        with pytest.raises(ValueError, match="pyramid"):
            train_stage2(corpus, stage1_ckpt, other, cfg, seed=13)

    def test_latent_targets_cover_train_split(self, corpus, pyramid, stage1_ckpt):
        items = latent_targets(corpus, stage1_ckpt, pyramid, "train")
        assert len(items) == 4
        z0, audio, style = items[0]
        assert z0.shape == (30, stage1_ckpt.config.latent_h, stage1_ckpt.config.latent_c)
        assert audio.shape == (30, 8)
        assert audio.dtype == np.float64
        assert style.tolist() == [1.0, 0.0]


class TestFingerprint:
    def test_sensitive_to_values_not_order(self, stage1_ckpt):
        params = stage1_ckpt.params
        fp = stage1_fingerprint(params)
        reordered = dict(reversed(list(params.items())))
        assert stage1_fingerprint(reordered) == fp
        bumped = dict(params)
        bumped["dec.out.W"] = Tensor(params["dec.out.W"].value + 1e-3)
        assert stage1_fingerprint(bumped) != fp


class TestCheckpointIO:
    def test_round_trip(self, stage2_ckpt, tmp_path):
        path = tmp_path / "stage2.bin"
        save_stage2_checkpoint(path, stage2_ckpt)
        back = load_stage2_checkpoint(path)
        assert back.config == stage2_ckpt.config
        assert back.pyramid_hash == stage2_ckpt.pyramid_hash
        assert back.stage1_hash == stage2_ckpt.stage1_hash
        assert back.seed == stage2_ckpt.seed
        assert np.array_equal(back.loss_curve, stage2_ckpt.loss_curve)
        assert np.array_equal(back.schedule.betas, stage2_ckpt.schedule.betas)
        for k in stage2_ckpt.params:
            want = stage2_ckpt.params[k].value.astype(np.float32).astype(np.float64)
            assert np.array_equal(back.params[k].value, want), k


class TestGenerateAnimation:
    def test_shapes_and_reproducibility(self, corpus, pyramid, stage1_ckpt, stage2_ckpt):
        s = corpus.samples[0]
        out = generate_animation(
            s.audio, 0, s.template, stage1_ckpt, stage2_ckpt, pyramid, seed=60
        )
        assert out.motion.data.shape == (30, 162, 3)
        assert out.faces.data.shape == (30, 162, 3)
        assert out.latents.shape == (30, 8, 16)
        assert out.faces.frame_rate == out.motion.frame_rate == 25.0
        assert np.array_equal(out.faces.data, s.template.vertices[None] + out.motion.data)
        again = generate_animation(
            s.audio, 0, s.template, stage1_ckpt, stage2_ckpt, pyramid, seed=60
        )
        assert np.array_equal(out.motion.data, again.motion.data)
        other = generate_animation(
            s.audio, 0, s.template, stage1_ckpt, stage2_ckpt, pyramid, seed=61
        )
        assert not np.array_equal(out.motion.data, other.motion.data)

    def test_style_index_equals_one_hot_vector(self, corpus, pyramid, stage1_ckpt, stage2_ckpt):
        s = corpus.samples[2]
        a = generate_animation(
            s.audio, 1, s.template, stage1_ckpt, stage2_ckpt, pyramid, seed=62
        )
        b = generate_animation(
            s.audio, np.array([0.0, 1.0]), s.template, stage1_ckpt, stage2_ckpt,
            pyramid, seed=62,
        )
        assert np.array_equal(a.motion.data, b.motion.data)

    def test_snap_codebook_lands_on_codebook_rows(self, corpus, pyramid, stage1_ckpt, stage2_ckpt):
        s = corpus.samples[0]
        out = generate_animation(
            s.audio, 0, s.template, stage1_ckpt, stage2_ckpt, pyramid, seed=63,
            snap_codebook=True,
        )
        codes = stage1_ckpt.params["codebook"].value
        flat = out.latents.reshape(-1, codes.shape[1])
        rows = {tuple(r) for r in codes.tolist()}
        assert all(tuple(r) in rows for r in flat.tolist())

    def test_checkpoint_cross_validation(self, corpus, pyramid, stage1_ckpt, stage2_ckpt):
        s = corpus.samples[0]
        tampered = Stage1Checkpoint(
            params={
                k: (Tensor(v.value + 1e-3) if k == "dec.out.W" else v)
                for k, v in stage1_ckpt.params.items()
            },
            config=stage1_ckpt.config,
            pyramid_hash=stage1_ckpt.pyramid_hash,
            seed=stage1_ckpt.seed,
            loss_curve=stage1_ckpt.loss_curve,
        )
        with pytest.raises(ValueError, match="first-stage weights"):
            generate_animation(
                s.audio, 0, s.template, tampered, stage2_ckpt, pyramid, seed=64
            )

    def test_template_vertex_count_checked(self, corpus, pyramid, stage1_ckpt, stage2_ckpt):
        from spiraldiff.mesh_graph import icosphere
        from spiraldiff.motion import FaceTemplate

        s = corpus.samples[0]
        small = FaceTemplate(mesh=icosphere(1))
        with pytest.raises(ValueError):
            generate_animation(
                s.audio, 0, small, stage1_ckpt, stage2_ckpt, pyramid, seed=65
            )
