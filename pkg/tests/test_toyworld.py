"""Toy scene generator, toy denoiser, and analytic sampler oracles."""

from __future__ import annotations

import math
from dataclasses import replace

import numpy as np
import pytest

from sarekit.conditioning import HashTextEncoder, render_caption
from sarekit.datasets import LABEL_FAKE, LABEL_REAL, load_manifest
from sarekit.errors import ParameterError, TrainingError
from sarekit.schedule import ddim_sample_loop, forward_noise, timesteps_for_strength
from sarekit.schedule import inference_to_training_steps
from sarekit.toyworld import (
    AnalyticGaussianDenoiser,
    AvgPool2xCodec,
    ConstantOracleDenoiser,
    IdentityCodec,
    SceneFactors,
    caption_for_entry,
    denoiser_t_profile,
    gen_scene,
    load_toy_denoiser,
    make_dataset,
    sample_factors,
    save_toy_denoiser,
    train_toy_denoiser,
)


# ---------------------------------------------------------------------------
# scene rendering


def _fixed_factors(**overrides):
    base = dict(shape="circle", color="blue", position=(0.5, 0.5), size=0.2, detail=None)
    base.update(overrides)
    return SceneFactors(**base)


def test_gen_scene_bitwise_deterministic():
    factors = _fixed_factors()
    a = gen_scene(factors, rng_seed=42)
    b = gen_scene(factors, rng_seed=42)
    assert np.array_equal(a, b)
    assert a.shape == (3, 64, 64)
    assert a.dtype == np.float32


def test_gen_scene_resolution_parameter():
    img = gen_scene(_fixed_factors(), rng_seed=1, resolution=32)
    assert img.shape == (3, 32, 32)


def test_gen_scene_range_clamped():
    rng = np.random.default_rng(5)
    img = gen_scene(sample_factors(rng, real=True), rng_seed=9)
    assert float(img.min()) >= 0.0
    assert float(img.max()) <= 1.0


def test_fake_scene_background_is_flat_real_is_textured():
    rng = np.random.default_rng(3)
    detail = sample_factors(rng, real=True).detail
    fake = gen_scene(_fixed_factors(), rng_seed=7)
    real = gen_scene(_fixed_factors(detail=detail), rng_seed=7)
    fake_corner = fake[:, :4, :4]
    real_corner = real[:, :4, :4]
    assert np.unique(fake_corner).size == 1
    assert float(real_corner.std()) > 0.01
    assert not np.array_equal(fake, real)


def test_sample_factors_real_flag_controls_detail():
    rng = np.random.default_rng(0)
    real = sample_factors(rng, real=True)
    fake = sample_factors(rng, real=False)
    assert real.detail is not None
    assert 3 <= real.detail.occluder_count <= 6
    assert 0.04 <= real.detail.hue_jitter <= 0.12
    assert fake.detail is None


def test_scene_factors_validation():
    with pytest.raises(ParameterError, match="shape"):
        _fixed_factors(shape="hexagon")
    with pytest.raises(ParameterError, match="color"):
        _fixed_factors(color="taupe")
    with pytest.raises(ParameterError, match="size"):
        _fixed_factors(size=0.6)


# ---------------------------------------------------------------------------
# dataset assembly


def test_make_dataset_layout_and_integrity(tmp_path):
    ds = make_dataset(n_real=3, n_fake=4, fidelity=1.0, rng_seed=11, out_dir=tmp_path / "d")
    entries = ds.manifest.entries
    assert len(entries) == 7
    assert sum(1 for e in entries if e.label == LABEL_REAL) == 3
    assert sum(1 for e in entries if e.label == LABEL_FAKE) == 4
    assert len({e.digest for e in entries}) == 7

    loaded = load_manifest(tmp_path / "d" / "manifest.jsonl")
    assert [e.digest for e in loaded.entries] == [e.digest for e in entries]

    from sarekit.images import image_digest, load_image

    for e in entries:
        img = load_image(e.path)
        assert image_digest(img) == e.digest, "manifest digest must match the on-disk pixels"


def test_make_dataset_captions_describe_true_factors_at_full_fidelity(tmp_path):
    ds = make_dataset(n_real=2, n_fake=2, fidelity=1.0, rng_seed=4, out_dir=tmp_path)
    for e in ds.manifest.entries:
        cap = ds.captions[e.digest]
        factors = ds.scene_factors[e.digest]
        assert cap.text == render_caption(factors.caption_factors())
        assert cap.image_digest == e.digest
    sidecars = list(tmp_path.glob("captions.*.jsonl"))
    assert len(sidecars) == 1
    assert (tmp_path / "factors.json").exists()


def test_make_dataset_deterministic_across_directories(tmp_path):
    a = make_dataset(2, 2, 1.0, rng_seed=8, out_dir=tmp_path / "a")
    b = make_dataset(2, 2, 1.0, rng_seed=8, out_dir=tmp_path / "b")
    assert [e.digest for e in a.manifest.entries] == [e.digest for e in b.manifest.entries]
    c = make_dataset(2, 2, 1.0, rng_seed=9, out_dir=tmp_path / "c")
    assert [e.digest for e in a.manifest.entries] != [e.digest for e in c.manifest.entries]


def test_make_dataset_fake_only(tmp_path):
    ds = make_dataset(n_real=0, n_fake=5, fidelity=1.0, rng_seed=0, out_dir=tmp_path)
    assert all(e.label == LABEL_FAKE for e in ds.manifest.entries)


def test_make_dataset_rejects_negative_counts(tmp_path):
    with pytest.raises(ParameterError, match="nonnegative"):
        make_dataset(-1, 2, 1.0, 0, tmp_path)


def test_caption_for_entry_lookup(tmp_path):
    ds = make_dataset(1, 1, 1.0, rng_seed=2, out_dir=tmp_path)
    digest = ds.manifest.entries[0].digest
    assert caption_for_entry(ds, digest) == ds.captions[digest]
    with pytest.raises(ParameterError, match="no caption"):
        caption_for_entry(ds, "f" * 64)


# ---------------------------------------------------------------------------
# analytic denoisers


def _bayes_posterior_mean(z_t: float, ab: float, mu0: float, sigma0: float) -> float:
    """Numerical-integration posterior mean under z0 ~ N(mu0, sigma0^2),
    z_t | z0 ~ N(sqrt(ab) z0, 1 - ab)."""
    grid = np.linspace(mu0 - 12 * sigma0, mu0 + 12 * sigma0, 40001)
    log_w = -0.5 * ((grid - mu0) / sigma0) ** 2
    log_w += -0.5 * ((z_t - math.sqrt(ab) * grid) ** 2) / (1.0 - ab)
    w = np.exp(log_w - log_w.max())
    return float(np.trapezoid(grid * w, grid) / np.trapezoid(w, grid))


@pytest.mark.parametrize("t", [100, 500, 900])
@pytest.mark.parametrize("z_t", [-0.7, 0.3, 1.4])
def test_analytic_posterior_mean_matches_numerical_bayes(schedule, t, z_t):
    mu0, sigma0 = 0.4, 0.3
    den = AnalyticGaussianDenoiser(np.array(mu0), sigma0, schedule)
    closed = float(den.posterior_mean(np.array(z_t), t))
    numeric = _bayes_posterior_mean(z_t, schedule.alpha_bar[t], mu0, sigma0)
    assert closed == pytest.approx(numeric, rel=1e-6)


def test_analytic_noise_prediction_consistent_with_posterior_mean(schedule, rng):
    den = AnalyticGaussianDenoiser(np.full((3, 4, 4), 0.5), 0.25, schedule)
    z_t = rng.standard_normal((3, 4, 4))
    for t in (50, 400, 950):
        ab = schedule.alpha_bar[t]
        recon = np.sqrt(ab) * den.posterior_mean(z_t, t) + np.sqrt(1 - ab) * den.predict_noise(z_t, t, None)
        np.testing.assert_allclose(recon, z_t, atol=1e-12)


def test_analytic_small_sigma_limit_pins_posterior_to_mu0(schedule, rng):
    mu0 = np.full((2, 2), 0.37)
    den = AnalyticGaussianDenoiser(mu0, 1e-8, schedule)
    z_t = rng.standard_normal((2, 2)) * 3.0
    post = den.posterior_mean(z_t, 500)
    np.testing.assert_allclose(post, mu0, atol=1e-8)


def test_analytic_rejects_nonpositive_sigma(schedule):
    with pytest.raises(ParameterError, match="sigma0"):
        AnalyticGaussianDenoiser(np.zeros(3), 0.0, schedule)


def test_analytic_zero_noise_at_t0(schedule):
    den = AnalyticGaussianDenoiser(np.zeros(3), 0.5, schedule)
    assert np.array_equal(den.predict_noise(np.ones(3), 0, None), np.zeros(3))


def test_constant_oracle_loop_recovers_target(schedule, rng):
    z0 = rng.uniform(0.0, 1.0, (3, 8, 8))
    den = ConstantOracleDenoiser(z0, schedule)
    T, inf_steps = timesteps_for_strength(0.5, 10)
    steps = inference_to_training_steps(inf_steps, schedule.t_max, 10)
    eps = rng.standard_normal(z0.shape)
    z_T = forward_noise(z0, steps[0], eps, schedule)
    cond = HashTextEncoder().embed("anything")
    from sarekit.schedule import GuidanceSpec

    out = ddim_sample_loop(z_T, den, cond, None, GuidanceSpec(scale=1.0, use_null=False), steps, schedule)
    rel = float(np.linalg.norm(out - z0) / np.linalg.norm(z0))
    assert rel < 1e-10


def test_denoiser_t_profile_orders_by_remaining_signal(schedule):
    mu0, sigma0 = 0.5, 0.3
    rng = np.random.default_rng(17)
    den = AnalyticGaussianDenoiser(np.full((3, 8, 8), mu0), sigma0, schedule)
    samples = [(mu0 + sigma0 * rng.standard_normal((3, 8, 8)), None) for _ in range(40)]
    profile = denoiser_t_profile(den, samples, schedule, timesteps=[50, 300, 800], rng_seed=5)
    assert list(profile) == [50, 300, 800]
    assert profile[50] < profile[300] < profile[800]


# ---------------------------------------------------------------------------
# codecs


def test_identity_codec_copies(rng):
    codec = IdentityCodec()
    img = rng.uniform(0, 1, (3, 6, 6)).astype(np.float32)
    lat = codec.encode(img)
    assert np.array_equal(lat, img)
    lat[0, 0, 0] = -5.0
    assert img[0, 0, 0] != -5.0
    assert codec.downscale_factor == 1
    assert codec.identifier() == "identity"


def test_avgpool_codec_halves_and_repeats(rng):
    codec = AvgPool2xCodec()
    img = rng.uniform(0, 1, (3, 8, 10)).astype(np.float32)
    lat = codec.encode(img)
    assert lat.shape == (3, 4, 5)
    assert lat[1, 0, 0] == pytest.approx(img[1, :2, :2].mean(), abs=1e-7)
    up = codec.decode(lat)
    assert up.shape == (3, 8, 10)
    assert np.array_equal(up[:, ::2, ::2], lat)
    # pooling a nearest-upsampled latent gives the latent back exactly
    assert np.array_equal(codec.encode(up), lat)
    assert codec.downscale_factor == 2


def test_avgpool_codec_rejects_odd_dims():
    with pytest.raises(ParameterError, match="even"):
        AvgPool2xCodec().encode(np.zeros((3, 7, 8), dtype=np.float32))


# ---------------------------------------------------------------------------
# trained toy denoiser


@pytest.fixture(scope="module")
def tiny_training_run(tmp_path_factory, schedule):
    enc = HashTextEncoder()
    rng = np.random.default_rng(13)
    samples = []
    for _ in range(12):
        factors = sample_factors(rng, real=False)
        img = gen_scene(factors, int(rng.integers(2**31)), resolution=16)
        samples.append((img, enc.embed(render_caption(factors.caption_factors()))))
    backend, trace = train_toy_denoiser(
        samples, schedule, epochs=8, rng_seed=0, null_condition=enc.null_embedding(),
        batch_size=4, width=8,
    )
    return samples, backend, trace


def test_training_trace_shape(tiny_training_run):
    samples, backend, trace = tiny_training_run
    assert len(trace) == 8 * math.ceil(len(samples) / 4)
    epochs = [e for e, _, _ in trace]
    assert epochs == sorted(epochs)
    assert all(np.isfinite(loss) for _, _, loss in trace)


def test_training_reduces_loss(tiny_training_run):
    _, _, trace = tiny_training_run
    losses = [loss for _, _, loss in trace]
    q = len(losses) // 4
    assert np.mean(losses[-q:]) < np.mean(losses[:q])


def test_trained_identifier_encodes_recipe(tiny_training_run):
    _, backend, _ = tiny_training_run
    assert backend.identifier() == "toyunet-w8-e8-b4-s0-n12"


def test_backend_batch_matches_single(tiny_training_run, rng):
    samples, backend, _ = tiny_training_run
    _, cond = samples[0]
    z = rng.standard_normal((2, 3, 16, 16)).astype(np.float32)
    batched = backend.predict_noise(z, 200, cond)
    assert batched.shape == z.shape
    for i in range(2):
        single = backend.predict_noise(z[i], 200, cond)
        np.testing.assert_allclose(single, batched[i], atol=1e-6)


def test_untrained_model_predicts_zero_noise(schedule):
    from sarekit.toyworld import ToyDenoiser, ToyDenoiserBackend
    import torch

    torch.manual_seed(0)
    backend = ToyDenoiserBackend(ToyDenoiser(width=8), schedule.t_max, "fresh")
    z = np.random.default_rng(0).standard_normal((3, 16, 16)).astype(np.float32)
    cond = HashTextEncoder().embed("a red circle")
    assert np.array_equal(backend.predict_noise(z, 500, cond), np.zeros_like(z))


def test_save_load_round_trip_bitwise(tiny_training_run, tmp_path, rng):
    samples, backend, _ = tiny_training_run
    save_toy_denoiser(backend, tmp_path / "ckpt")
    loaded = load_toy_denoiser(tmp_path / "ckpt")
    assert loaded.identifier() == backend.identifier()
    z = rng.standard_normal((3, 16, 16)).astype(np.float32)
    _, cond = samples[0]
    assert np.array_equal(loaded.predict_noise(z, 333, cond), backend.predict_noise(z, 333, cond))


def test_load_rejects_trailing_bytes(tiny_training_run, tmp_path):
    _, backend, _ = tiny_training_run
    save_toy_denoiser(backend, tmp_path / "ckpt")
    blob = (tmp_path / "ckpt" / "weights.bin").read_bytes()
    (tmp_path / "ckpt" / "weights.bin").write_bytes(blob + b"\x00\x00\x00\x00")
    with pytest.raises(ParameterError, match="trailing"):
        load_toy_denoiser(tmp_path / "ckpt")


def test_load_rejects_wrong_kind(tmp_path):
    (tmp_path / "model.json").write_text('{"kind": "something-else"}', encoding="utf-8")
    with pytest.raises(ParameterError, match="toy denoiser"):
        load_toy_denoiser(tmp_path)


def test_training_rejects_empty_set(schedule):
    enc = HashTextEncoder()
    with pytest.raises(TrainingError, match="empty"):
        train_toy_denoiser([], schedule, epochs=1, rng_seed=0, null_condition=enc.null_embedding())


def test_training_raises_on_nonfinite_loss(schedule):
    enc = HashTextEncoder()
    bad = np.full((3, 16, 16), np.nan, dtype=np.float32)
    samples = [(bad, enc.embed("a red circle"))]
    with pytest.raises(TrainingError, match="non-finite"):
        train_toy_denoiser(samples, schedule, epochs=1, rng_seed=0, null_condition=enc.null_embedding())
