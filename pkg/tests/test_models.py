import pytest
import torch

from hourglass.config import ModelConfig
from hourglass.exceptions import ConfigError
from hourglass.geometry import POSE_RANGES
from hourglass.models import (Decoder, Discriminator, Encoder, GeneratorInterface, build_networks, freeze,
                              parameter_count, sample_latent)

SYN = POSE_RANGES["synthetic"]
CFG = ModelConfig(latent_dim=16)


@pytest.fixture(scope="module")
def nets():
    return build_networks(CFG, SYN, seed=0)


def test_decoder_shapes_and_range(nets):
    dec = nets[0]
    gen = torch.Generator().manual_seed(0)
    z = sample_latent(gen, 3, CFG.latent_dim)
    poses = torch.tensor([[0.0, 20.0, 1.0], [90.0, 30.0, 1.2], [200.0, 45.0, 1.5]])
    out = dec(z, poses)
    assert out.shape == (3, 3, CFG.resolution, CFG.resolution)
    assert torch.isfinite(out).all() and out.abs().max() <= 1.0


def test_decoder_satisfies_generator_protocol(nets):
    assert isinstance(nets[0], GeneratorInterface)


def test_decoder_rejects_wrong_latent(nets):
    with pytest.raises(ConfigError):
        nets[0](torch.zeros(2, CFG.latent_dim + 1), torch.zeros(2, 3))


def test_decoder_pose_changes_output(nets):
    z = torch.full((2, CFG.latent_dim), 0.5)
    out = nets[0](z, torch.tensor([[10.0, 30.0, 1.2], [100.0, 30.0, 1.2]]))
    assert (out[0] - out[1]).abs().mean() > 0


def test_encoder_outputs_within_pose_range(nets):
    enc = nets[1]
    out_z, poses = enc(torch.rand(4, 3, 32, 32) * 2 - 1)
    assert out_z.shape == (4, CFG.latent_dim) and out_z.abs().max() <= 1
    assert (poses[:, 1] >= SYN.elevation_min).all() and (poses[:, 1] <= SYN.elevation_max).all()
    assert (poses[:, 2] >= SYN.scale_min).all() and (poses[:, 2] <= SYN.scale_max).all()


def test_encoder_rejects_wrong_resolution(nets):
    with pytest.raises(ValueError):
        nets[1](torch.zeros(1, 3, 16, 16))


def test_discriminator_logit_shape(nets):
    logit = nets[2](torch.zeros(5, 3, 32, 32))
    assert logit.shape == (5,)


def test_build_networks_seeded():
    a = build_networks(CFG, SYN, seed=4)
    b = build_networks(CFG, SYN, seed=4)
    c = build_networks(CFG, SYN, seed=5)
    for m1, m2 in zip(a, b):
        assert all(torch.equal(p, q) for p, q in zip(m1.parameters(), m2.parameters()))
    assert not torch.equal(next(a[0].parameters()), next(c[0].parameters()))


def test_build_networks_leaves_global_rng_alone():
    torch.manual_seed(123)
    expected = torch.rand(3)
    torch.manual_seed(123)
    build_networks(CFG, SYN, seed=0)
    assert torch.equal(torch.rand(3), expected)


def test_freeze_and_parameter_count(nets):
    dec = Decoder(CFG, SYN)
    assert parameter_count(dec) == sum(p.numel() for p in dec.parameters())
    freeze(dec)
    assert all(not p.requires_grad for p in dec.parameters())


@pytest.mark.parametrize("resolution,n_3d_up", [(64, 2), (32, 1), (128, 2)])
def test_other_resolutions(resolution, n_3d_up):
    cfg = ModelConfig(resolution=resolution, latent_dim=8, n_3d_up=n_3d_up)
    dec, enc, disc = Decoder(cfg, SYN), Encoder(cfg, SYN), Discriminator(cfg)
    img = dec(torch.rand(1, 8), torch.tensor([[0.0, 20.0, 1.0]]))
    assert img.shape == (1, 3, resolution, resolution)
    assert enc(img)[0].shape == (1, 8) and disc(img).shape == (1,)


def test_bad_resolution_rejected():
    with pytest.raises(ConfigError):
        _ = ModelConfig(resolution=48).n_2d_up
