import dataclasses

import numpy as np
import pytest
import torch

from c2gan import trainer as T
from c2gan.nets import NetConfig
from c2gan.pipeline import CycleToggles, collate, run_cycles
from c2gan.synthdata import make_dataset


@pytest.fixture
def cfg(tiny_cfg):
    return T.TrainConfig(epochs_total=3, decay_start_epoch=1, batch_size=4, net=tiny_cfg,
                         checkpoint_every=1, seed=11)


@pytest.fixture(scope="module")
def data():
    return make_dataset(8, seed=21)


def snapshot(module):
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def changed(before, module):
    after = module.state_dict()
    return any(not torch.equal(before[k], after[k]) for k in before)


def test_lr_schedule_constant_then_linear_decay():
    cfg = T.TrainConfig(epochs_total=200, decay_start_epoch=100)
    assert T.lr_schedule(0, cfg) == 2e-4
    assert T.lr_schedule(99, cfg) == 2e-4
    assert T.lr_schedule(150, cfg) == pytest.approx(1e-4)
    assert T.lr_schedule(200, cfg) == 0.0
    with pytest.raises(ValueError):
        T.lr_schedule(201, cfg)
    with pytest.raises(ValueError):
        T.lr_schedule(-1, cfg)


def test_lr_schedule_continuous_non_increasing_one_knee():
    cfg = T.TrainConfig(epochs_total=40, decay_start_epoch=20)
    xs = np.linspace(0, 40, 4001)
    lrs = np.array([T.lr_schedule(x, cfg) for x in xs])
    assert np.all(np.diff(lrs) <= 1e-18)
    assert np.max(np.abs(np.diff(lrs))) < 1e-6  # no jumps
    slopes = np.round(np.diff(lrs) / np.diff(xs), 12)
    assert len(set(slopes.tolist())) == 2


def test_config_validation():
    with pytest.raises(ValueError):
        T.TrainConfig(epochs_total=10, decay_start_epoch=11)
    with pytest.raises(ValueError):
        T.TrainConfig(base_lr=0)
    with pytest.raises(ValueError):
        T.TrainConfig(discriminator_mode="both")


def test_config_dict_round_trip(cfg):
    assert T.TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_one_step_updates_every_active_network(cfg, batch):
    nets = T.build_networks(cfg.net, seed=1)
    opts = T.build_optimizers(nets, cfg)
    before = {n: snapshot(getattr(nets, n)) for n in ("G_i", "G_g", "D_i", "D_g")}
    losses = T.train_step(batch, nets, opts, cfg)
    assert set(losses) == set(T.LossBundle.NAMES)
    for n in before:
        assert changed(before[n], getattr(nets, n)), n


def test_guidance_networks_frozen_when_guidance_cycles_off(cfg, batch):
    cfg = dataclasses.replace(cfg, toggles=CycleToggles(True, False, False))
    nets = T.build_networks(cfg.net, seed=1)
    opts = T.build_optimizers(nets, cfg)
    g, d = snapshot(nets.G_g), snapshot(nets.D_g)
    T.train_step(batch, nets, opts, cfg)
    assert not changed(g, nets.G_g) and not changed(d, nets.D_g)
    assert opts["G_g"].state == {} and opts["D_g"].state == {}


def test_step_returns_losses_from_before_the_update(cfg, batch):
    nets = T.build_networks(cfg.net, seed=1)
    expected = T.forward_losses(nets, batch, cfg).as_floats()
    got = T.train_step(batch, nets, T.build_optimizers(nets, cfg), cfg)
    assert got == pytest.approx(expected, rel=1e-6, abs=1e-7)


def test_update_isolation(cfg, batch):
    """Each network's gradient comes only from the objective terms it minimizes."""
    nets = T.build_networks(cfg.net, seed=1)
    bundle = T.forward_losses(nets, batch, cfg)
    groups = nets.param_groups()
    grads = T.compute_gradients(bundle, groups, True, T.image_objective(bundle, cfg))
    image_terms = (bundle.img_gan_g + 10 * bundle.ic + 10 * bundle.pixel + 10 * bundle.gc)
    via_i = torch.autograd.grad(image_terms, groups["G_i"], retain_graph=True)
    via_g = torch.autograd.grad(bundle.total_g, groups["G_g"], retain_graph=True)
    via_d = torch.autograd.grad(bundle.total_d, groups["D_i"] + groups["D_g"], retain_graph=True)
    for a, b in zip(grads["G_i"], via_i):
        assert torch.allclose(a, b, rtol=1e-4, atol=1e-7)
    for a, b in zip(grads["G_g"], via_g):
        assert torch.equal(a, b)
    for a, b in zip(grads["D_i"] + grads["D_g"], via_d):
        assert torch.equal(a, b)
    g_from_d = torch.autograd.grad(bundle.total_d, groups["G_i"] + groups["G_g"],
                                   allow_unused=True, retain_graph=True)
    assert all(g is None for g in g_from_d)


def test_coupled_guidance_adversarial_variant_uses_total_g(cfg, batch):
    cfg = dataclasses.replace(cfg, guid_gan_trains_g_i=True)
    nets = T.build_networks(cfg.net, seed=1)
    bundle = T.forward_losses(nets, batch, cfg)
    assert T.image_objective(bundle, cfg) is bundle.total_g
    groups = nets.param_groups()
    grads = T.compute_gradients(bundle, groups, True, T.image_objective(bundle, cfg))
    via = torch.autograd.grad(bundle.total_g, groups["G_i"], retain_graph=True)
    assert all(torch.equal(a, b) for a, b in zip(grads["G_i"], via))
    # the guidance adversarial term does reach G_i in this variant
    extra = torch.autograd.grad(bundle.guid_gan_g, groups["G_i"], allow_unused=True)
    assert any(g is not None and g.abs().sum() > 0 for g in extra)


def test_discriminator_step_leaves_generators_untouched(cfg, batch):
    nets = T.build_networks(cfg.net, seed=1)
    opts = T.build_optimizers(nets, cfg)
    bundle = T.forward_losses(nets, batch, cfg)
    groups = nets.param_groups()
    grads = T.compute_gradients(bundle, groups, True, T.image_objective(bundle, cfg))
    g_before = snapshot(nets.G_i)
    for p, g in zip(groups["D_i"], grads["D_i"]):
        p.grad = g
    opts["D_i"].step()
    assert not changed(g_before, nets.G_i)


def test_first_steps_deterministic(cfg, data):
    def run():
        torch.manual_seed(0)
        nets = T.build_networks(cfg.net, seed=cfg.seed)
        opts = T.build_optimizers(nets, cfg)
        b = collate(data.pairs[:4])
        return [T.train_step(b, nets, opts, cfg) for _ in range(10)]
    assert run() == run()


def test_fit_history_length_and_csv(cfg, data, tmp_path):
    r = T.fit(data, cfg, run_dir=tmp_path)
    assert len(r.history) == cfg.epochs_total * int(np.ceil(len(data) / cfg.batch_size))
    rows = T.read_loss_csv(tmp_path / "losses.csv")
    assert list(rows[0]) == list(T.HISTORY_COLUMNS)
    assert rows == r.history
    assert [p.name for p in r.checkpoints] == ["epoch_0001.ckpt", "epoch_0002.ckpt", "epoch_0003.ckpt"]
    assert (tmp_path / "checkpoints" / "last.ckpt").exists()


def test_fit_csv_bitwise_reproducible(cfg, data, tmp_path):
    T.fit(data, cfg, run_dir=tmp_path / "a")
    T.fit(data, cfg, run_dir=tmp_path / "b")
    assert (tmp_path / "a" / "losses.csv").read_bytes() == (tmp_path / "b" / "losses.csv").read_bytes()


def test_resume_reproduces_uninterrupted_run(cfg, data, tmp_path):
    full = T.fit(data, cfg, run_dir=tmp_path / "full")
    resumed = T.fit(data, cfg, run_dir=tmp_path / "resumed",
                    resume=tmp_path / "full" / "checkpoints" / "epoch_0001.ckpt")
    assert resumed.history == full.history
    assert ((tmp_path / "full" / "losses.csv").read_bytes()
            == (tmp_path / "resumed" / "losses.csv").read_bytes())


def test_resume_rejects_different_config(cfg, data, tmp_path):
    T.fit(data, dataclasses.replace(cfg, epochs_total=1, decay_start_epoch=1), run_dir=tmp_path)
    with pytest.raises(T.CheckpointError):
        T.fit(data, cfg, resume=tmp_path / "checkpoints" / "last.ckpt")


def test_fit_rejects_empty_and_mismatched_data(cfg, data):
    with pytest.raises(ValueError):
        T.fit(data.subset(0), cfg)
    with pytest.raises(ValueError, match="K="):
        T.fit(data, dataclasses.replace(cfg, net=dataclasses.replace(cfg.net, num_keypoints=4)))


def test_checkpoint_round_trip_is_bitwise(cfg, data, tmp_path, batch):
    r = T.fit(data, dataclasses.replace(cfg, epochs_total=1, decay_start_epoch=1), run_dir=tmp_path)
    path = r.checkpoints[-1]
    nets, _ = T.load_networks(path)
    with torch.no_grad():
        a = run_cycles(r.nets.G_i, r.nets.G_g, batch)
        b = run_cycles(nets.G_i, nets.G_g, batch)
    for f in ("gen_y", "rec_x", "gen_guid_y", "gen_guid_x"):
        assert torch.equal(getattr(a, f), getattr(b, f))
    state = T.load_checkpoint(path)
    again = T.save_checkpoint(state, tmp_path / "again.ckpt")
    assert again.read_bytes() == path.read_bytes()


def test_checkpoint_guards(cfg, data, tmp_path):
    r = T.fit(data, dataclasses.replace(cfg, epochs_total=1, decay_start_epoch=1), run_dir=tmp_path)
    path = r.checkpoints[-1]
    with pytest.raises(T.CheckpointError, match="NetConfig"):
        T.load_checkpoint(path, dataclasses.replace(cfg.net, num_keypoints=4))
    blob = path.read_bytes()
    trunc = tmp_path / "trunc.ckpt"
    trunc.write_bytes(blob[:len(blob) // 2])
    with pytest.raises(T.CheckpointError, match="corrupt"):
        T.load_checkpoint(trunc)
    wrong = tmp_path / "ver.ckpt"
    head = len(T.CHECKPOINT_MAGIC)
    wrong.write_bytes(blob[:head] + (99).to_bytes(4, "little") + blob[head + 4:])
    with pytest.raises(T.CheckpointError, match="schema_version"):
        T.load_checkpoint(wrong)
    junk = tmp_path / "junk.ckpt"
    junk.write_bytes(b"hello")
    with pytest.raises(T.CheckpointError):
        T.load_checkpoint(junk)
    with pytest.raises(T.CheckpointError):
        T.load_checkpoint(tmp_path / "missing.ckpt")


def test_non_finite_loss_aborts_with_term_name(cfg, data, tmp_path):
    # finite components whose weighted sum overflows float32
    cfg = dataclasses.replace(cfg, weights=T.LossWeights(w_pixel=3e38, w_img_cyc=3e38, w_guid_cyc=3e38))
    nets = T.build_networks(cfg.net, seed=1)
    opts = T.build_optimizers(nets, cfg)
    with pytest.raises(FloatingPointError, match="total_g"):
        T.train_step(collate(data.pairs[:2]), nets, opts, cfg)
    b = collate(data.pairs[:2])
    b.image_y[0, 0, 0, 0] = float("nan")
    with pytest.raises(FloatingPointError):
        T.train_step(b, nets, opts, cfg)


def test_non_sharing_optimizes_both_copies(cfg, batch):
    cfg = dataclasses.replace(cfg, share_generators=False)
    nets = T.build_networks(cfg.net, share_generators=False, seed=1)
    opts = T.build_optimizers(nets, cfg)
    rec = snapshot(nets.G_i_rec)
    T.train_step(batch, nets, opts, cfg)
    assert changed(rec, nets.G_i_rec)


def test_sample_grid_layout(cfg, batch):
    nets = T.build_networks(cfg.net, seed=1)
    grid = T.sample_grid(nets, batch)
    assert grid.shape == (2 * 64, 5 * 64, 3) and grid.dtype == np.uint8


def test_epoch_order_keyed_to_seed_and_epoch():
    a = T.epoch_order(50, 1, 0)
    assert np.array_equal(a, T.epoch_order(50, 1, 0))
    assert not np.array_equal(a, T.epoch_order(50, 1, 1))
    assert sorted(a) == list(range(50))


def test_total_g_trends_down_on_tiny_task():
    data = make_dataset(16, seed=4)
    cfg = T.TrainConfig(epochs_total=12, decay_start_epoch=6, batch_size=4,
                        net=NetConfig(base_filters=8, unet_depth=5, patch_layers=2))
    hist = T.fit(data, cfg).history
    tail = max(1, len(hist) // 10)
    first = np.median([h["total_g"] for h in hist[:tail]])
    last = np.median([h["total_g"] for h in hist[-tail:]])
    assert last < first
