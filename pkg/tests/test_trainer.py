import json
import math

import numpy as np
import pytest
import torch
from scipy import stats

import caae.trainer as trainer
from caae.data import Batch, FaceDataset
from caae.networks import GROUPS, NetworkConfig
from caae.objectives import LossWeights
from caae.trainer import (CheckpointError, CorruptCheckpointError, NonFiniteLossError, PriorSpec,
                          TrainConfig, adam_update, init_state, load_checkpoint, read_log,
                          sample_prior, save_checkpoint, train, train_step)

MINI = NetworkConfig(image_size=16, channels=1, latent_dim=8, base_filters=8, num_scales=2)


def mini_config(**kw):
    kw.setdefault("batch_size", 8)
    kw.setdefault("epochs", 1)
    return TrainConfig(network=MINI, **kw)


@pytest.fixture(scope="module")
def mini_data():
    return FaceDataset.synthetic(40, 16, 0, channels=1)


@pytest.fixture
def batch(mini_data):
    return Batch(mini_data.images[:8], mini_data.labels[:8])


def test_default_config_mirrors_recipe():
    c = TrainConfig()
    assert (c.weights.lam, c.weights.gamma, c.batch_size, c.learning_rate, c.beta1, c.beta2, c.epochs) == \
        (100.0, 10.0, 100, 0.0002, 0.5, 0.999, 50)


def test_config_validation_collects_errors():
    bad = TrainConfig(network=NetworkConfig(latent_dim=1), learning_rate=0, beta1=1.0, batch_size=0, epochs=0)
    assert len(bad.validate()) == 5
    with pytest.raises(ValueError):
        bad.check()


def test_config_dict_round_trip():
    c = mini_config(ablate_dz=True, weights=LossWeights(3, 4))
    assert TrainConfig.from_dict(json.loads(json.dumps(c.to_dict()))) == c


# --- prior ------------------------------------------------------------------

def test_prior_bounds_and_determinism():
    spec = PriorSpec(16)
    g1, g2 = torch.Generator().manual_seed(4), torch.Generator().manual_seed(4)
    a, b = sample_prior(spec, 50, g1), sample_prior(spec, 50, g2)
    assert torch.equal(a, b)
    assert a.shape == (50, 16)
    assert torch.all((a >= -1) & (a <= 1))
    assert not torch.equal(sample_prior(spec, 50, g1), a)  # rng advanced


def test_prior_is_uniform():
    z = sample_prior(PriorSpec(8), 10_000, torch.Generator().manual_seed(0), torch.float64).numpy()
    assert np.all(np.abs(z.mean(axis=0)) < 0.05)
    crit = stats.kstwo.ppf(0.99, len(z))
    for j in range(z.shape[1]):
        assert stats.kstest(z[:, j], stats.uniform(loc=-1, scale=2).cdf).statistic < crit


def test_prior_rejects_other_distributions():
    with pytest.raises(ValueError):
        PriorSpec(4, distribution="normal")


# --- ADAM -------------------------------------------------------------------

def test_adam_scalar_hand_computed():
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    w, m, v = 0.5, 0.0, 0.0
    p = {"w": torch.tensor(w, dtype=torch.float64)}
    mt = {"w": torch.tensor(0.0, dtype=torch.float64)}
    vt = {"w": torch.tensor(0.0, dtype=torch.float64)}
    for t, g in enumerate([0.2, -0.1, 0.05], start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w = w - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        p, mt, vt = adam_update(p, {"w": torch.tensor(g, dtype=torch.float64)}, mt, vt, t, lr, b1, b2, eps)
        assert abs(float(p["w"]) - w) < 1e-12
        assert abs(float(mt["w"]) - m) < 1e-12 and abs(float(vt["w"]) - v) < 1e-12


# --- train_step -------------------------------------------------------------

def _changed(a, b, group):
    return any(not torch.equal(a.group(group)[k], b.group(group)[k]) for k in a.group(group))


def test_step_updates_every_block(batch):
    cfg = mini_config()
    s0 = init_state(cfg)
    s1, rep = train_step(s0, batch, cfg)
    assert s1.step == 1
    for g in GROUPS:
        assert _changed(s0.params, s1.params, g), g
    assert all(math.isfinite(v) for v in rep.as_dict().values())
    assert rep.dz_loss > 0 and rep.dimg_loss > 0 and rep.e_adv > 0 and rep.g_adv > 0


def test_step_leaves_input_state_untouched(batch):
    cfg = mini_config()
    s0 = init_state(cfg)
    snapshot = {k: v.clone() for k, v in s0.params.named_arrays()}
    rng_before = s0.rng.get_state().clone()
    train_step(s0, batch, cfg)
    for k, v in s0.params.named_arrays():
        assert torch.equal(v, snapshot[k]), k
    assert torch.equal(rng_before, s0.rng.get_state())


def test_step_deterministic(batch):
    cfg = mini_config()
    s0 = init_state(cfg)
    a, ra = train_step(s0, batch, cfg)
    b, rb = train_step(s0, batch, cfg)
    assert ra == rb
    for (k, va), (_, vb) in zip(a.params.named_arrays(), b.params.named_arrays()):
        assert torch.equal(va, vb), k
    assert torch.equal(a.rng.get_state(), b.rng.get_state())


def test_update_order_and_group_isolation(batch, monkeypatch):
    calls = []
    real = trainer.adam_update

    def spy(params, grads, *a, **kw):
        calls.append(tuple(sorted(params)))
        return real(params, grads, *a, **kw)

    monkeypatch.setattr(trainer, "adam_update", spy)
    cfg = mini_config()
    s0 = init_state(cfg)
    train_step(s0, batch, cfg)
    expected = [tuple(sorted(s0.params.group(g))) for g in ("dimg", "dz", "enc", "gen")]
    assert calls == expected


def test_discriminator_updates_do_not_touch_encoder_generator(batch, monkeypatch):
    # turn the E/G update into a no-op; whatever E/G change remains would come from the D updates
    cfg = mini_config()
    s0 = init_state(cfg)
    eg_keys = {tuple(sorted(s0.params.enc)), tuple(sorted(s0.params.gen))}
    real = trainer.adam_update

    def skip_eg(params, grads, m, v, *a, **kw):
        if tuple(sorted(params)) in eg_keys:
            return params, m, v
        return real(params, grads, m, v, *a, **kw)

    monkeypatch.setattr(trainer, "adam_update", skip_eg)
    s1, _ = train_step(s0, batch, cfg)
    assert _changed(s0.params, s1.params, "dimg") and _changed(s0.params, s1.params, "dz")
    assert not _changed(s0.params, s1.params, "enc") and not _changed(s0.params, s1.params, "gen")


def test_ablations_freeze_discriminators(batch):
    cfg = mini_config(ablate_dz=True, ablate_dimg=True, weights=LossWeights(1.0, 0.0))
    s0 = init_state(cfg)
    s1, rep = train_step(s0, batch, cfg)
    assert not _changed(s0.params, s1.params, "dz")
    assert not _changed(s0.params, s1.params, "dimg")
    assert _changed(s0.params, s1.params, "enc") and _changed(s0.params, s1.params, "gen")
    assert rep.e_adv == rep.g_adv == rep.dz_loss == rep.dimg_loss == 0
    assert rep.eg_total == pytest.approx(rep.recon)


def test_non_finite_loss_aborts(batch):
    cfg = mini_config(ablate_dz=True, ablate_dimg=True)
    bad = Batch(batch.images.copy(), batch.labels)
    bad.images[0, 0, 0, 0] = np.nan
    with pytest.raises(NonFiniteLossError, match="recon"):
        train_step(init_state(cfg), bad, cfg)
    with pytest.raises(NonFiniteLossError, match="dimg_loss"):
        train_step(init_state(mini_config()), bad, mini_config())


# --- checkpoints ------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path, batch):
    cfg = mini_config()
    s, _ = train_step(init_state(cfg), batch, cfg)
    path = save_checkpoint(s, cfg, tmp_path / "a.ckpt")
    r, rcfg = load_checkpoint(path)
    assert rcfg == cfg and r.step == s.step and r.params.updates == 1
    for (k, va), (_, vb) in zip(s.params.named_arrays(), r.params.named_arrays()):
        assert va.dtype == vb.dtype and torch.equal(va, vb), k
    for g in GROUPS:
        for k in s.adam_m[g]:
            assert torch.equal(s.adam_m[g][k], r.adam_m[g][k])
            assert torch.equal(s.adam_v[g][k], r.adam_v[g][k])
    assert torch.equal(s.rng.get_state(), r.rng.get_state())
    assert not (tmp_path / "a.ckpt.tmp").exists()


def test_checkpoint_header(tmp_path):
    cfg = mini_config()
    path = save_checkpoint(init_state(cfg), cfg, tmp_path / "a.ckpt")
    blob = path.read_bytes()
    n = int.from_bytes(blob[8:16], "little")
    header = json.loads(blob[16:16 + n])
    assert header["format_version"] == trainer.FORMAT_VERSION
    assert header["step"] == 0 and header["config"] == cfg.to_dict()


def test_checkpoint_config_mismatch_names_field(tmp_path):
    cfg = mini_config()
    path = save_checkpoint(init_state(cfg), cfg, tmp_path / "a.ckpt")
    other = NetworkConfig(image_size=16, channels=1, latent_dim=16, base_filters=8, num_scales=2)
    with pytest.raises(CheckpointError, match="latent_dim"):
        load_checkpoint(path, other)


def test_truncated_checkpoint_is_corrupt(tmp_path):
    cfg = mini_config()
    path = save_checkpoint(init_state(cfg), cfg, tmp_path / "a.ckpt")
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) - 100])
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(path)
    path.write_bytes(blob[:10])
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(path)


def test_flipped_byte_is_corrupt(tmp_path):
    cfg = mini_config()
    path = save_checkpoint(init_state(cfg), cfg, tmp_path / "a.ckpt")
    blob = bytearray(path.read_bytes())
    blob[-50] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(path)


def test_version_mismatch(tmp_path, monkeypatch):
    cfg = mini_config()
    monkeypatch.setattr(trainer, "FORMAT_VERSION", 99)
    path = save_checkpoint(init_state(cfg), cfg, tmp_path / "a.ckpt")
    monkeypatch.setattr(trainer, "FORMAT_VERSION", 1)
    with pytest.raises(CheckpointError, match="format_version"):
        load_checkpoint(path)


# --- run loop ---------------------------------------------------------------

def test_train_step_count_and_layout(tmp_path):
    ds = FaceDataset.synthetic(250, 16, 1, channels=1)
    cfg = TrainConfig(network=MINI, batch_size=100, epochs=2, checkpoint_every=3)
    state = train(ds, cfg, tmp_path / "run")
    rows = read_log(tmp_path / "run" / "log.csv")
    assert [r["step"] for r in rows] == [1, 2, 3, 4]
    assert [r["epoch"] for r in rows] == [0, 0, 1, 1]
    assert list(rows[0]) == list(trainer.LOG_COLUMNS)
    assert state.step == 4
    assert json.loads((tmp_path / "run" / "config.json").read_text()) == cfg.to_dict()
    ckpts = sorted(p.name for p in (tmp_path / "run" / "checkpoints").iterdir())
    assert ckpts == ["final.ckpt", "step_0000003.ckpt", "step_0000004.ckpt"]


def test_train_refuses_overwrite(tmp_path, mini_data):
    cfg = mini_config()
    train(mini_data, cfg, tmp_path / "run", max_steps=1)
    with pytest.raises(FileExistsError):
        train(mini_data, cfg, tmp_path / "run")
    train(mini_data, cfg, tmp_path / "run", overwrite=True, max_steps=1)


def test_train_rejects_bad_inputs(tmp_path, mini_data):
    with pytest.raises(ValueError):
        train(mini_data, mini_config(batch_size=100), tmp_path / "a")
    with pytest.raises(ValueError):
        train(FaceDataset.synthetic(10, 32, 0, channels=1), mini_config(), tmp_path / "b")


def _strip(rows):
    return [{k: v for k, v in r.items() if k != "wall_time"} for r in rows]


def test_resume_matches_uninterrupted(tmp_path, mini_data):
    cfg = mini_config(epochs=2, checkpoint_every=2)
    train(mini_data, cfg, tmp_path / "full")
    full = _strip(read_log(tmp_path / "full" / "log.csv"))
    train(mini_data, cfg, tmp_path / "part", max_steps=3)
    assert len(read_log(tmp_path / "part" / "log.csv")) == 3
    ck = tmp_path / "part" / "checkpoints" / "step_0000002.ckpt"
    train(mini_data, cfg, tmp_path / "part", resume=ck)
    resumed = _strip(read_log(tmp_path / "part" / "log.csv"))
    assert resumed == full
    a, _ = load_checkpoint(tmp_path / "full" / "checkpoints" / "final.ckpt")
    b, _ = load_checkpoint(tmp_path / "part" / "checkpoints" / "final.ckpt")
    for (k, va), (_, vb) in zip(a.params.named_arrays(), b.params.named_arrays()):
        assert torch.equal(va, vb), k
