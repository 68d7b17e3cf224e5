import numpy as np
import pytest
import torch

from caae.data import bin_to_label
from caae.networks import (NetworkConfig, count_parameters, dimg_first_stage, discriminate_img,
                           discriminate_z, encode, generate, init_params)

CFG64 = NetworkConfig(image_size=64, channels=3, latent_dim=64, base_filters=8, num_scales=4)


@pytest.fixture(scope="module")
def params64():
    return init_params(CFG64, 0)


def labels(bins):
    return torch.as_tensor(np.stack([bin_to_label(b) for b in bins]))


def rand_images(n, cfg=CFG64, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand((n, cfg.image_size, cfg.image_size, cfg.channels), generator=g) * 2 - 1


def test_config_validation_lists_everything():
    errs = NetworkConfig(image_size=60, channels=2, latent_dim=1, base_filters=4, num_scales=4).validate()
    assert len(errs) == 4
    assert NetworkConfig().validate() == []
    assert NetworkConfig(image_size=128).validate() == []
    with pytest.raises(ValueError):
        NetworkConfig(image_size=32, num_scales=4).check()  # bottleneck 2 < 4


def test_encode_shape_and_range(params64):
    z = encode(params64, rand_images(4))
    assert z.shape == (4, 64)
    assert torch.all(z.abs() < 1)


def test_encode_zero_input_at_init(params64):
    z = encode(params64, torch.zeros(2, 64, 64, 3))
    assert torch.isfinite(z).all()
    assert torch.all(z.abs() < 1)


def test_encode_deterministic(params64):
    x = rand_images(3)
    assert torch.equal(encode(params64, x), encode(params64, x))


def test_encode_shape_mismatch(params64):
    with pytest.raises(ValueError):
        encode(params64, torch.zeros(2, 32, 32, 3))
    with pytest.raises(ValueError):
        encode(params64, torch.zeros(2, 64, 64, 1))


def test_generate_shape_range_determinism(params64):
    z = torch.rand(4, 64) * 2 - 1
    l = labels([0, 3, 6, 9])
    out = generate(params64, z, l)
    assert out.shape == (4, 64, 64, 3)
    assert torch.all(out.abs() < 1)
    assert torch.equal(out, generate(params64, z, l))


def test_generate_label_changes_output(params64):
    z = torch.rand(1, 64) * 2 - 1
    a = generate(params64, z, labels([0]))
    b = generate(params64, z, labels([9]))
    assert not torch.equal(a, b)


def test_generate_batch_mismatch(params64):
    with pytest.raises(ValueError):
        generate(params64, torch.zeros(3, 64), labels([0, 1]))
    with pytest.raises(ValueError):
        generate(params64, torch.zeros(2, 63), labels([0, 1]))


def test_discriminate_z(params64):
    p, logits = discriminate_z(params64, torch.rand(8, 64) * 2 - 1)
    assert p.shape == (8,) and torch.all((p > 0) & (p < 1))
    assert torch.allclose(p, torch.sigmoid(logits))
    assert torch.sigmoid(torch.tensor(0.0)) == 0.5


def test_discriminate_z_no_cross_sample_coupling(params64):
    z = torch.rand(5, 64) * 2 - 1
    z[3] = z[1]
    p, _ = discriminate_z(params64, z)
    assert p[1] == p[3]


def test_discriminate_img(params64):
    x = rand_images(4)
    p, logits = discriminate_img(params64, x, labels([1, 2, 3, 4]))
    assert p.shape == (4,) and torch.all((p > 0) & (p < 1))
    assert torch.isfinite(logits).all()


def test_dimg_label_injection_shape(params64):
    h = dimg_first_stage(params64, rand_images(4), labels([0, 1, 2, 3]))
    assert h.shape == (4, 8 + 10, 32, 32)
    # the last ten channels are the tiled label
    assert torch.all(h[0, 8:, :, :] == labels([0])[0][:, None, None])


def test_dimg_label_changes_logits(params64):
    x = rand_images(1)
    _, a = discriminate_img(params64, x, labels([0]))
    _, b = discriminate_img(params64, x, labels([9]))
    assert a != b


def test_dimg_training_mode_updates_running_stats():
    p = init_params(CFG64, 1)
    before = p.buffers["bn1.mean"].clone()
    discriminate_img(p, rand_images(4), labels([0, 1, 2, 3]), training=True)
    assert not torch.equal(before, p.buffers["bn1.mean"])
    after = p.buffers["bn1.mean"].clone()
    discriminate_img(p, rand_images(4), labels([0, 1, 2, 3]), training=False)
    assert torch.equal(after, p.buffers["bn1.mean"])


def test_no_batch_norm_without_flag():
    cfg = NetworkConfig(image_size=16, channels=1, latent_dim=4, base_filters=8, num_scales=2,
                        use_batchnorm_dimg=False)
    p = init_params(cfg, 0)
    assert p.buffers == {}
    assert discriminate_img(p, torch.zeros(2, 16, 16, 1), labels([0, 1]))[0].shape == (2,)


def test_permuting_batch_permutes_outputs(params64):
    x = rand_images(5)
    perm = torch.tensor([4, 2, 0, 3, 1])
    l = labels([0, 2, 4, 6, 8])
    z = encode(params64, x)
    assert torch.allclose(encode(params64, x[perm]), z[perm], atol=1e-6)
    assert torch.allclose(generate(params64, z[perm], l[perm]), generate(params64, z, l)[perm], atol=1e-6)
    assert torch.allclose(discriminate_z(params64, z[perm])[1], discriminate_z(params64, z)[1][perm], atol=1e-6)


def test_init_deterministic_and_seed_dependent():
    a, b, c = init_params(CFG64, 5), init_params(CFG64, 5), init_params(CFG64, 6)
    for (ka, va), (_, vb), (_, vc) in zip(a.named_arrays(), b.named_arrays(), c.named_arrays()):
        assert torch.equal(va, vb), ka
    assert any(not torch.equal(va, vc) for (_, va), (_, vc) in zip(a.named_arrays(), c.named_arrays()))


@pytest.mark.parametrize("cfg", [NetworkConfig(), CFG64, NetworkConfig(image_size=128)])
def test_init_values_finite_and_small(cfg):
    p = init_params(cfg, 0)
    for name, v in p.named_arrays():
        assert torch.isfinite(v).all(), name
        if name.endswith(".w"):
            assert v.abs().max() < 1, name
        if name.endswith(".b") and not name.startswith("dimg/bn"):
            assert torch.all(v == 0), name


def test_params_dtype_conversion():
    p = init_params(NetworkConfig(image_size=16, latent_dim=4, base_filters=8, num_scales=2), 0)
    q = p.to(torch.float64)
    assert q.dtype == torch.float64
    assert encode(q, torch.zeros(1, 16, 16, 3)).dtype == torch.float64
    assert count_parameters(q) == count_parameters(p)
