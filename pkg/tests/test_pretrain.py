import numpy as np
import pytest

from msm_mae.frontend import NormStats
from msm_mae.model import DecoderConfig, EncoderConfig, build_model, init_params, mae_forward, no_decay
from msm_mae.patches import Grid, PatchConfig, patchify, random_mask_plan
from msm_mae.pretrain import (CheckpointError, NumericError, OptimizerState, TrainConfig, adamw_step,
                              checkpoint_roundtrip, conditioned_params, desk_grad_check, grad_check, load_checkpoint,
                              loss_and_grads, lr_at, masked_mse, masked_mse_and_grad, overfit_one_batch, pretrain,
                              sample_plans, save_checkpoint, tonal_batch, train_step, write_metrics_csv)


# -- loss -------------------------------------------------------------------------

def test_mse_examples():
    t = np.random.default_rng(0).standard_normal((5, 4))
    plan = random_mask_plan(5, 0.6, 0)
    assert masked_mse(t, t, plan) == 0.0
    allm = np.ones(5, dtype=bool)
    assert masked_mse_and_grad(t + 1, t, allm)[0] == pytest.approx(1.0)
    pred = np.array([[0.0, 0.0], [3.0, -1.0]])
    assert masked_mse_and_grad(pred, np.zeros((2, 2)), np.array([False, True]))[0] == 5.0


def test_mse_needs_a_masked_token():
    with pytest.raises(ValueError):
        masked_mse_and_grad(np.zeros((2, 2)), np.zeros((2, 2)), np.zeros(2, dtype=bool))


def test_normalized_target_affine_invariance():
    rng = np.random.default_rng(1)
    pred, target = rng.standard_normal((2, 6, 8)), rng.standard_normal((2, 6, 8))
    mask = rng.random((2, 6)) < 0.5
    mask[:, 0] = True
    scale = rng.uniform(0.5, 3, (2, 6, 1))
    shift = rng.standard_normal((2, 6, 1))
    a = masked_mse_and_grad(pred, target, mask, True)[0]
    b = masked_mse_and_grad(pred, target * scale + shift, mask, True)[0]
    assert a == pytest.approx(b, rel=1e-5)
    assert masked_mse_and_grad(pred, target, mask)[0] != pytest.approx(
        masked_mse_and_grad(pred, target * scale + shift, mask)[0], rel=1e-3)


def test_loss_ignores_visible_predictions_but_visible_pixels_matter():
    params = build_model(96, PatchConfig(), dtype=np.float64)
    spec = np.random.default_rng(2).standard_normal((1, 80, 96))
    tokens, _ = patchify(spec, params.patch)
    plans = sample_plans(30, 1, 0.75, 0, 0)
    vis = np.stack([p.visible for p in plans])
    mask = np.stack([p.mask_vector() for p in plans])
    pred, _ = mae_forward(params, tokens, vis)
    base, dpred = masked_mse_and_grad(pred, tokens, mask)
    assert np.all(dpred[0, plans[0].visible] == 0.0)
    pred2 = pred.copy()
    pred2[0, plans[0].visible] += 5.0
    assert masked_mse_and_grad(pred2, tokens, mask)[0] == base
    _, _, dtokens = loss_and_grads(params, tokens, plans)
    assert np.all(np.abs(dtokens[0, plans[0].visible]).sum(axis=1) > 0)


# -- schedule / optimizer ----------------------------------------------------------

def test_lr_schedule_examples():
    cfg = TrainConfig()
    spe = 50
    assert lr_at(0, spe, cfg) == 0.0
    assert lr_at(5 * spe, spe, cfg) == pytest.approx(3e-4)
    assert lr_at(10 * spe, spe, cfg) == pytest.approx(6e-4)
    assert lr_at(100 * spe - 1, spe, cfg) <= 1e-8
    lrs = [lr_at(s, spe, cfg) for s in range(10 * spe, 100 * spe)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_zero_lr_leaves_params_untouched():
    params = build_model(96, PatchConfig())
    before = {k: v.copy() for k, v in params.tensors.items()}
    cfg = TrainConfig(epochs=2, warmup_epochs=1)
    opt = OptimizerState.zeros_like(params)
    train_step(np.ones((2, 80, 96), dtype=np.float32) * np.arange(96), params, opt, cfg, 10)  # step 0: lr = 0
    for k in before:
        assert np.array_equal(before[k], params[k])
    assert opt.step == 1


def test_weight_decay_skips_norms_biases_and_mask_token():
    params = build_model(96, PatchConfig(), dtype=np.float64)
    for t in params.tensors.values():
        t[...] = 1.0
    grads = {k: np.zeros_like(v) for k, v in params.tensors.items()}
    adamw_step(params, grads, OptimizerState.zeros_like(params), 0.1, TrainConfig())
    for k, t in params.tensors.items():
        if no_decay(k):
            assert np.all(t == 1.0), k
        else:
            np.testing.assert_allclose(t, 1.0 - 0.1 * 0.05)


# -- gradients ----------------------------------------------------------------------

def test_patch_embed_gradients_are_near_exact():
    params = conditioned_params(init_params(EncoderConfig(8, 0, 2, 1), DecoderConfig(8, 0, 2, 1),
                                            PatchConfig(4, 4), Grid(2, 2), 0, np.float64))
    tokens, _ = patchify(np.random.default_rng(0).standard_normal((1, 8, 8)), params.patch)
    plans = sample_plans(4, 1, 0.5, 0, 0)
    rep = grad_check(params, tokens, plans, names=["patch_embed.w", "patch_embed.b"], n_samples=60, eps=1e-4)
    assert rep.max_rel_err < 1e-7


@pytest.mark.parametrize("depth", [1, 2])
def test_desk_grad_check(depth):
    rep = desk_grad_check(depth=depth, n_samples=200)
    assert rep.n_checked == 200
    assert rep.max_rel_err < 1e-5, rep.worst


def test_grad_check_requires_float64():
    params = build_model(96, PatchConfig())
    with pytest.raises(ValueError):
        grad_check(params, np.zeros((1, 30, 256)), sample_plans(30, 1, 0.75, 0, 0))


# -- training ------------------------------------------------------------------------

def test_overfit_one_batch():
    losses = overfit_one_batch(build_model(96, PatchConfig(), seed=0), tonal_batch())
    assert losses[-1] < 0.1 * losses[0]


def _tiny_corpus():
    return np.random.default_rng(5).standard_normal((8, 80, 96)).astype(np.float32)


def test_training_is_bit_reproducible():
    cfg = TrainConfig(epochs=2, warmup_epochs=1, batch_size=4, seed=3)
    runs = [pretrain(_tiny_corpus(), build_model(96, PatchConfig(), seed=1), cfg) for _ in range(2)]
    assert [r.masked_mse for r in runs[0][2]] == [r.masked_mse for r in runs[1][2]]
    for k in runs[0][0].tensors:
        assert np.array_equal(runs[0][0][k], runs[1][0][k])


def test_epoch_callback_and_metrics_csv(tmp_path):
    seen = []
    cfg = TrainConfig(epochs=3, warmup_epochs=1, batch_size=4)
    _, opt, reps = pretrain(_tiny_corpus(), build_model(96, PatchConfig()), cfg,
                            on_epoch=lambda e, p, o: seen.append((e, o.step)))
    assert seen == [(0, 2), (1, 4), (2, 6)] and opt.step == 6
    write_metrics_csv(tmp_path / "m.csv", reps)
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "step,epoch,loss,lr" and len(lines) == 7


def test_non_finite_loss_raises():
    params = build_model(96, PatchConfig())
    params["dec_pred.b"][...] = np.nan
    with pytest.raises(NumericError):
        train_step(_tiny_corpus()[:2], params, OptimizerState.zeros_like(params), TrainConfig(), 10)


def test_corpus_smaller_than_batch():
    with pytest.raises(ValueError):
        pretrain(_tiny_corpus()[:2], build_model(96, PatchConfig()), TrainConfig(batch_size=4))


# -- checkpoints ------------------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path):
    params = build_model(96, PatchConfig(), seed=4)
    opt = OptimizerState.zeros_like(params)
    train_step(_tiny_corpus()[:2], params, opt, TrainConfig(epochs=2, warmup_epochs=0), 10)
    p2, o2 = checkpoint_roundtrip(params, opt, tmp_path / "c.msmm")
    for k in params.tensors:
        assert np.array_equal(params[k], p2[k])
        assert np.array_equal(opt.m[k], o2.m[k]) and np.array_equal(opt.v[k], o2.v[k])
    assert o2.step == opt.step
    assert np.array_equal(params.enc_pos, p2.enc_pos)


def test_checkpoint_norm_stats(tmp_path):
    params = build_model(96, PatchConfig())
    save_checkpoint(tmp_path / "c.msmm", params, norm=NormStats(-6.5, 4.25))
    _, opt, norm = load_checkpoint(tmp_path / "c.msmm", params)
    assert opt is None and norm == NormStats(-6.5, 4.25)


def test_checkpoint_errors(tmp_path):
    params = build_model(208, PatchConfig(16, 16))
    path = tmp_path / "c.msmm"
    save_checkpoint(path, params)
    data = bytearray(path.read_bytes())
    data[:4] = b"XXXX"
    (tmp_path / "bad.msmm").write_bytes(bytes(data))
    with pytest.raises(CheckpointError, match="not a checkpoint"):
        load_checkpoint(tmp_path / "bad.msmm", params)
    with pytest.raises(CheckpointError, match="patch_embed.w"):
        load_checkpoint(path, build_model(208, PatchConfig(16, 8)))
    with pytest.raises(CheckpointError, match="missing"):
        load_checkpoint(path, build_model(208, PatchConfig(), enc=EncoderConfig(64, 3, 4, 4)))
    with pytest.raises(CheckpointError, match="unknown"):
        load_checkpoint(path, build_model(208, PatchConfig(), enc=EncoderConfig(64, 1, 4, 4)))
