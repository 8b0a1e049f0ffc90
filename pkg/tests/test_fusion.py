"""Fusion math vs reference, augmentation pairing, detector training."""

import math

import numpy as np
import pytest
import torch

from sarekit.errors import ParameterError, ShapeError, TrainingError
from sarekit.fusion import (
    AugmentationPolicy,
    ClassifierHead,
    ConvEncoder,
    CrossAttentionFusion,
    DetectorModel,
    FeatureSequence,
    FusionWeights,
    TrainConfig,
    attention_maps,
    augment,
    augment_pair,
    build_detector,
    center_crop,
    classify,
    cross_attention_fuse,
    detector_scores,
    extract_features,
    load_checkpoint,
    save_checkpoint,
    save_loss_trace,
    train_detector,
)


def _features(seed, positions, dim, origin):
    data = np.random.default_rng(seed).standard_normal((positions, dim)).astype(np.float32)
    return FeatureSequence(data, origin)


def _weights(seed, d_x=12, d_s=10, dim=16, heads=4, residual=False):
    rng = np.random.default_rng(seed)
    return FusionWeights(
        w_q=rng.standard_normal((d_x, dim)).astype(np.float32) * 0.3,
        w_k=rng.standard_normal((d_s, dim)).astype(np.float32) * 0.3,
        w_v=rng.standard_normal((d_s, dim)).astype(np.float32) * 0.3,
        w_out=rng.standard_normal((dim, dim)).astype(np.float32) * 0.3,
        head_count=heads,
        residual=residual,
    )


# --- reference op ------------------------------------------------------------


def test_attention_rows_sum_to_one():
    f_x = _features(0, 5, 12, "image")
    f_s = _features(1, 7, 10, "sare")
    attn = attention_maps(f_x, f_s, _weights(2))
    assert attn.shape == (4, 5, 7)
    np.testing.assert_allclose(attn.sum(axis=-1), 1.0, atol=1e-6)
    assert np.all(attn >= 0)


def test_fuse_output_shape_and_origin():
    out = cross_attention_fuse(_features(0, 5, 12, "image"), _features(1, 7, 10, "sare"), _weights(2))
    assert out.origin == "fused"
    assert out.data.shape == (5, 16)  # one position per query


def test_fuse_rejects_dim_mismatch():
    with pytest.raises(ShapeError):
        cross_attention_fuse(_features(0, 5, 11, "image"), _features(1, 7, 10, "sare"), _weights(2))
    with pytest.raises(ShapeError):
        cross_attention_fuse(_features(0, 5, 12, "image"), _features(1, 7, 11, "sare"), _weights(2))


def test_constant_value_rows_collapse_attention():
    # rows summing to 1 means identical key/value rows force every fused row
    # to the same projected value, whatever the queries say
    f_x = _features(3, 4, 12, "image")
    s0 = np.random.default_rng(4).standard_normal(10).astype(np.float32)
    f_s = FeatureSequence(np.tile(s0, (6, 1)), "sare")
    w = _weights(5)
    out = cross_attention_fuse(f_x, f_s, w).data
    expected = np.broadcast_to((s0 @ w.w_v) @ w.w_out, out.shape)
    np.testing.assert_allclose(out, expected, atol=1e-6)


def test_fuse_joint_key_value_permutation_invariance():
    f_x = _features(0, 5, 12, "image")
    f_s = _features(1, 7, 10, "sare")
    w = _weights(2)
    base = cross_attention_fuse(f_x, f_s, w).data
    perm = np.random.default_rng(3).permutation(7)
    permuted = cross_attention_fuse(f_x, FeatureSequence(f_s.data[perm], "sare"), w).data
    np.testing.assert_allclose(permuted, base, atol=1e-6)


def test_fuse_query_permutation_equivariance():
    f_x = _features(0, 5, 12, "image")
    f_s = _features(1, 7, 10, "sare")
    w = _weights(2)
    base = cross_attention_fuse(f_x, f_s, w).data
    perm = np.random.default_rng(4).permutation(5)
    permuted = cross_attention_fuse(FeatureSequence(f_x.data[perm], "image"), f_s, w).data
    np.testing.assert_allclose(permuted, base[perm], atol=1e-6)


def test_single_key_attends_fully():
    # with one key the attention is forced to 1, so output = v @ w_out
    f_x = _features(0, 3, 12, "image")
    f_s = _features(1, 1, 10, "sare")
    w = _weights(2)
    out = cross_attention_fuse(f_x, f_s, w).data
    expected = np.broadcast_to((f_s.data @ w.w_v) @ w.w_out, out.shape)
    np.testing.assert_allclose(out, expected, atol=1e-6)


def test_residual_adds_projected_query():
    f_x = _features(0, 4, 12, "image")
    f_s = _features(1, 5, 10, "sare")
    plain = cross_attention_fuse(f_x, f_s, _weights(2, residual=False)).data
    res = cross_attention_fuse(f_x, f_s, _weights(2, residual=True)).data
    np.testing.assert_allclose(res - plain, f_x.data @ _weights(2).w_q, atol=1e-6)


def test_feature_sequence_and_weights_validation():
    with pytest.raises(ShapeError):
        FeatureSequence(np.zeros((0, 4), dtype=np.float32), "image")
    with pytest.raises(ParameterError):
        FeatureSequence(np.full((2, 2), np.nan, dtype=np.float32), "image")
    with pytest.raises(ParameterError):
        FeatureSequence(np.zeros((2, 2), dtype=np.float32), "latent")
    with pytest.raises(ParameterError):
        _weights(0, dim=16, heads=3)  # 16 % 3 != 0
    with pytest.raises(ShapeError):
        FusionWeights(
            w_q=np.zeros((4, 8)), w_k=np.zeros((4, 8)), w_v=np.zeros((4, 8)),
            w_out=np.zeros((8, 6)), head_count=2,
        )


def test_classify_hand_computed():
    feats = FeatureSequence(np.array([[1.0, 3.0], [3.0, 5.0]], dtype=np.float32), "fused")
    head = ClassifierHead(weight=np.array([1.0, 0.0]), bias=-1.0)
    # mean-pool -> (2, 4); logit = 2 - 1 = 1
    assert classify(feats, head) == pytest.approx(1 / (1 + math.exp(-1.0)), abs=1e-7)
    with pytest.raises(ShapeError):
        classify(feats, ClassifierHead(weight=np.array([1.0, 0.0, 0.0]), bias=0.0))


# --- torch block vs reference -------------------------------------------------


def test_torch_fusion_matches_reference():
    torch.manual_seed(0)
    block = CrossAttentionFusion(d_x=12, d_s=10, dim=16, head_count=4)
    f_x = _features(10, 5, 12, "image")
    f_s = _features(11, 7, 10, "sare")
    with torch.no_grad():
        got = block(
            torch.from_numpy(f_x.data).unsqueeze(0), torch.from_numpy(f_s.data).unsqueeze(0)
        )[0].numpy()
    want = cross_attention_fuse(f_x, f_s, block.export_weights()).data
    np.testing.assert_allclose(got, want, atol=1e-5)


def test_torch_fusion_residual_matches_reference():
    torch.manual_seed(1)
    block = CrossAttentionFusion(d_x=6, d_s=6, dim=8, head_count=2, residual=True)
    f_x = _features(12, 3, 6, "image")
    f_s = _features(13, 4, 6, "sare")
    with torch.no_grad():
        got = block(
            torch.from_numpy(f_x.data).unsqueeze(0), torch.from_numpy(f_s.data).unsqueeze(0)
        )[0].numpy()
    want = cross_attention_fuse(f_x, f_s, block.export_weights()).data
    np.testing.assert_allclose(got, want, atol=1e-5)


def test_fusion_gradients_match_finite_differences():
    # 64-bit gradient check on a (2 queries, 3 keys, d=4) instance
    torch.manual_seed(3)
    block = CrossAttentionFusion(d_x=4, d_s=4, dim=4, head_count=2).double()
    f_x = torch.randn(1, 2, 4, dtype=torch.float64)
    f_s = torch.randn(1, 3, 4, dtype=torch.float64)
    coeffs = torch.randn(1, 2, 4, dtype=torch.float64)

    def loss_value():
        return (block(f_x, f_s) * coeffs).sum()

    loss = loss_value()
    loss.backward()
    h = 1e-6
    worst = 0.0
    for param in block.parameters():
        grad = param.grad.clone()
        flat = param.data.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            with torch.no_grad():
                up = loss_value().item()
            flat[i] = orig - h
            with torch.no_grad():
                down = loss_value().item()
            flat[i] = orig
            fd = (up - down) / (2 * h)
            g = grad.view(-1)[i].item()
            denom = max(abs(fd), abs(g), 1e-8)
            worst = max(worst, abs(fd - g) / denom)
    assert worst < 1e-4


def test_fusion_zero_semantic_features_give_zero_output():
    # only the difference-map stream feeds V: zero it and the fused output
    # must vanish identically (all projections are bias-free)
    torch.manual_seed(4)
    block = CrossAttentionFusion(d_x=8, d_s=8, dim=8, head_count=2)
    f_x = torch.randn(2, 5, 8)
    out = block(f_x, torch.zeros(2, 6, 8))
    assert torch.all(out == 0)


# --- encoders / detector -------------------------------------------------------


def test_conv_encoder_position_grid():
    enc = ConvEncoder(out_dim=16, width=8)
    out = enc(torch.zeros(2, 3, 224, 224))
    assert out.shape == (2, 49, 16)  # 7x7 grid
    assert enc(torch.zeros(1, 3, 64, 64)).shape == (1, 4, 16)


def test_detector_batch_independence():
    model = build_detector(input_size=32, image_dim=16, semantic_dim=16,
                           fusion_dim=16, head_count=4, width=8, seed=0)
    model.eval()
    rng = np.random.default_rng(0)
    imgs = rng.random((3, 3, 32, 32)).astype(np.float32)
    maps = rng.random((3, 3, 32, 32)).astype(np.float32)
    with torch.no_grad():
        batch = model(torch.from_numpy(imgs), torch.from_numpy(maps)).numpy()
        single = np.array([
            model(torch.from_numpy(imgs[i : i + 1]), torch.from_numpy(maps[i : i + 1])).item()
            for i in range(3)
        ])
    np.testing.assert_allclose(batch, single, atol=1e-5)


def test_fresh_detector_outputs_half():
    model = build_detector(input_size=32, image_dim=16, semantic_dim=16,
                           fusion_dim=16, head_count=4, width=8, seed=1)
    model.eval()
    rng = np.random.default_rng(1)
    with torch.no_grad():
        p = model(
            torch.from_numpy(rng.random((2, 3, 32, 32)).astype(np.float32)),
            torch.from_numpy(rng.random((2, 3, 32, 32)).astype(np.float32)),
        )
    assert torch.all(p == 0.5)


def test_freeze_flags_control_trainable_params():
    model = build_detector(input_size=32, image_dim=16, semantic_dim=16,
                           fusion_dim=16, head_count=4, width=8)
    assert all(not p.requires_grad for p in model.image_encoder.parameters())
    assert all(p.requires_grad for p in model.semantic_encoder.parameters())
    assert all(p.requires_grad for p in model.fusion.parameters())
    spec = model.arch_spec()
    assert spec["frozen"] == {"image_encoder": True, "semantic_encoder": False}


def test_extract_features_shapes(toy_small):
    from sarekit.images import load_image

    model = build_detector(input_size=64, image_dim=16, semantic_dim=16,
                           fusion_dim=16, head_count=4, width=8)
    img = load_image(toy_small.manifest.entries[0].path)
    f_x, f_s = extract_features(img, np.abs(img - 0.5), model)
    assert f_x.origin == "image" and f_s.origin == "sare"
    assert f_x.positions == f_s.positions == 4
    assert f_x.dim == 16


# --- augmentation --------------------------------------------------------------


def _policy(**kw):
    base = dict(crop_size=24, flip_p=0.5, noise_p=0.5, noise_sigma=(0.0, 0.1),
                blur_p=0.5, blur_kernel=3, blur_sigma=(0.1, 1.0),
                rotate_p=0.5, rotate_degrees=(-10.0, 10.0))
    base.update(kw)
    return AugmentationPolicy(**base)


def test_augment_pair_shares_geometry_exactly():
    # run with photometric steps disabled and identical inputs: both streams
    # must come out bitwise identical under crop/flip/rotate
    img = np.random.default_rng(0).random((3, 32, 32)).astype(np.float32)
    policy = _policy(noise_p=0.0, blur_p=0.0, flip_p=1.0, rotate_p=1.0)
    for seed in range(5):
        a_img, a_pair, trace = augment_pair(img, img.copy(), policy, seed)
        np.testing.assert_array_equal(a_img, a_pair)
        assert trace.flipped and trace.angle is not None
        assert a_img.shape == (3, 24, 24)


def test_augment_photometric_touches_image_only():
    img = np.random.default_rng(1).random((3, 32, 32)).astype(np.float32)
    policy = _policy(flip_p=0.0, rotate_p=0.0, noise_p=1.0, blur_p=1.0)
    a_img, a_pair, trace = augment_pair(img, img.copy(), policy, 0)
    y, x, s = trace.crop_y, trace.crop_x, trace.crop_size
    np.testing.assert_array_equal(a_pair, img[:, y : y + s, x : x + s])
    assert not np.array_equal(a_img, a_pair)  # noise/blur hit the image stream
    assert trace.noise_sigma is not None and trace.blur_sigma is not None
    assert policy.noise_sigma[0] <= trace.noise_sigma <= policy.noise_sigma[1]


def test_augment_deterministic_per_seed():
    img = np.random.default_rng(2).random((3, 32, 32)).astype(np.float32)
    policy = _policy()
    a1 = augment(img, policy, rng_seed=7)
    a2 = augment(img, policy, rng_seed=7)
    np.testing.assert_array_equal(a1, a2)
    outs = [augment(img, policy, rng_seed=s) for s in range(6)]
    assert any(not np.array_equal(outs[0], o) for o in outs[1:])


def test_augment_eval_mode_is_center_crop():
    img = np.random.default_rng(3).random((3, 32, 32)).astype(np.float32)
    out, pair, trace = augment_pair(img, img.copy(), _policy(), rng_seed=5, train=False)
    np.testing.assert_array_equal(out, center_crop(img, 24))
    np.testing.assert_array_equal(pair, center_crop(img, 24))
    assert not trace.flipped
    assert trace.noise_sigma is None and trace.blur_sigma is None and trace.angle is None
    assert (trace.crop_y, trace.crop_x) == (4, 4)


def test_augment_noise_variance_oracle():
    # forced noise at a pinned sigma on a mid-gray image: the empirical std
    # of the perturbation must sit within Monte-Carlo error of sigma
    sigma = 0.07
    img = np.full((3, 40, 40), 0.5, dtype=np.float32)
    policy = _policy(crop_size=32, flip_p=0.0, blur_p=0.0, rotate_p=0.0,
                     noise_p=1.0, noise_sigma=(sigma, sigma))
    stds = []
    for seed in range(4):
        out, _, trace = augment_pair(img, None, policy, seed)
        assert trace.noise_sigma == pytest.approx(sigma)
        stds.append(float(np.std(out - 0.5)))
    n = 4 * 3 * 32 * 32
    se = sigma / math.sqrt(2 * n)
    assert np.mean(stds) == pytest.approx(sigma, abs=6 * se)


def test_augment_rejects_undersized_and_mismatched():
    img = np.zeros((3, 16, 16), dtype=np.float32)
    with pytest.raises(ParameterError):
        augment_pair(img, None, _policy(crop_size=24), 0)
    with pytest.raises(ShapeError):
        augment_pair(np.zeros((3, 32, 32), dtype=np.float32),
                     np.zeros((3, 16, 16), dtype=np.float32), _policy(), 0)
    with pytest.raises(ParameterError):
        _policy(blur_kernel=4)
    with pytest.raises(ParameterError):
        _policy(flip_p=1.5)
    with pytest.raises(ParameterError):
        center_crop(img, 24)


# --- training -------------------------------------------------------------------


def _toy_training_set(n_per_class=6, size=24):
    """Trivially separable: fake pairs carry a flat difference map."""
    rng = np.random.default_rng(0)
    samples = []
    for i in range(n_per_class):
        img = rng.random((3, size, size)).astype(np.float32)
        samples.append((img, np.zeros((3, size, size), dtype=np.float32), 0))
        img = rng.random((3, size, size)).astype(np.float32)
        samples.append((img, np.full((3, size, size), 0.4, dtype=np.float32), 1))
    return samples


def _small_model(size=16, seed=0):
    return build_detector(input_size=size, image_dim=16, semantic_dim=16,
                          fusion_dim=16, head_count=4, width=8, seed=seed)


def test_train_detector_requires_both_classes():
    samples = [s for s in _toy_training_set() if s[2] == 1]
    config = TrainConfig(batch_size=4, epochs=1, augmentation=_policy(crop_size=16))
    with pytest.raises(TrainingError):
        train_detector(samples, config, _small_model())
    with pytest.raises(TrainingError):
        train_detector([], config, _small_model())


def test_train_detector_initial_loss_is_ln2():
    # zero-initialized head -> every logit 0 -> BCE = ln 2 on the first step
    samples = _toy_training_set()
    config = TrainConfig(batch_size=4, epochs=1, learning_rate=1e-4,
                         augmentation=_policy(crop_size=16, noise_p=0.0), seed=0)
    _, trace = train_detector(samples, config, _small_model())
    assert trace[0][2] == pytest.approx(math.log(2), abs=1e-6)


def test_train_detector_learns_separable_toy_set():
    samples = _toy_training_set()
    config = TrainConfig(batch_size=12, epochs=25, learning_rate=5e-3,
                         augmentation=_policy(crop_size=16, noise_p=0.0, blur_p=0.0),
                         seed=0)
    model, trace = train_detector(samples, config, _small_model())
    assert trace[-1][2] < 0.25 < trace[0][2]
    scores = detector_scores(model, [(img, sare) for img, sare, _ in samples])
    labels = np.array([lbl for _, _, lbl in samples])
    assert np.mean((scores >= 0.5) == (labels == 1)) >= 0.9


def test_train_detector_surfaces_non_finite_loss():
    samples = _toy_training_set()
    img, sare, _ = samples[0]
    bad = np.full_like(sare, np.nan)
    samples[0] = (img, bad, 0)
    config = TrainConfig(batch_size=12, epochs=1, augmentation=_policy(crop_size=16))
    with pytest.raises(TrainingError, match="non-finite"):
        train_detector(samples, config, _small_model())


def test_train_config_validation():
    with pytest.raises(ParameterError):
        TrainConfig(batch_size=0)
    with pytest.raises(ParameterError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ParameterError):
        TrainConfig(epochs=0)


def test_save_loss_trace_round_trips_floats(tmp_path):
    trace = [(0, 0, 0.6931471824645996), (0, 1, 1 / 3)]
    path = tmp_path / "loss.csv"
    save_loss_trace(trace, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "epoch,step,loss"
    for (epoch, step, loss), line in zip(trace, lines[1:]):
        e, s, l = line.split(",")
        assert (int(e), int(s), float(l)) == (epoch, step, loss)


# --- persistence -----------------------------------------------------------------


def test_checkpoint_round_trip_bitwise(tmp_path):
    model = _small_model(seed=3)
    with torch.no_grad():  # give the zero head a signal so the test is not vacuous
        model.head.weight.fill_(0.25)
        model.head.bias.fill_(-0.1)
    save_checkpoint(model, tmp_path / "ckpt", TrainConfig(batch_size=4, epochs=1))
    loaded = load_checkpoint(tmp_path / "ckpt")
    orig, back = model.state_dict(), loaded.state_dict()
    assert orig.keys() == back.keys()
    for name in orig:
        assert torch.equal(orig[name], back[name]), name
    rng = np.random.default_rng(0)
    pair = [(rng.random((3, 16, 16)).astype(np.float32),
             rng.random((3, 16, 16)).astype(np.float32))]
    np.testing.assert_array_equal(detector_scores(model, pair), detector_scores(loaded, pair))
    assert loaded.input_size == model.input_size


def test_checkpoint_metadata_contents(tmp_path):
    import json

    model = _small_model()
    save_checkpoint(model, tmp_path / "ckpt")
    meta = json.loads((tmp_path / "ckpt" / "model.json").read_text())
    assert meta["format"] == 1
    assert meta["architecture"]["fusion"]["head_count"] == 4
    assert meta["training"] is None
    total = sum(int(np.prod(p["shape"])) for p in meta["parameters"])
    assert (tmp_path / "ckpt" / "weights.bin").stat().st_size == total * 4


def test_checkpoint_rejects_corrupt_weights(tmp_path):
    model = _small_model()
    save_checkpoint(model, tmp_path / "ckpt")
    blob = (tmp_path / "ckpt" / "weights.bin").read_bytes()
    (tmp_path / "ckpt" / "weights.bin").write_bytes(blob + b"\x00" * 4)
    with pytest.raises(ParameterError, match="trailing"):
        load_checkpoint(tmp_path / "ckpt")
    (tmp_path / "ckpt" / "weights.bin").write_bytes(blob[:-8])
    with pytest.raises(ParameterError, match="truncated"):
        load_checkpoint(tmp_path / "ckpt")
