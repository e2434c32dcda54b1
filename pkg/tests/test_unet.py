import pytest
import torch

from app.config import UNetConfig
from app.nets.unet import UNet, count_params, pixel_shuffle_up, softmax_head, unet_forward
from app.train.losses import cross_entropy


def test_shapes_per_scale():
    cfg = UNetConfig(scales=3, base_channels=4)
    out = unet_forward(UNet(cfg), torch.randn(2, 3, 32, 32))
    assert out.logits.shape == (2, 3, 32, 32)
    assert [tuple(f.shape[1:]) for f in out.enc_feats] == [(4, 32, 32), (8, 16, 16), (16, 8, 8)]
    assert [tuple(f.shape[1:]) for f in out.dec_feats] == [(4, 32, 32), (8, 16, 16), (16, 8, 8)]


def test_spatial_size_must_divide():
    model = UNet(UNetConfig(scales=4, base_channels=2))
    with pytest.raises(ValueError, match="divisible"):
        model(torch.randn(1, 3, 36, 36))
    with pytest.raises(ValueError):
        model(torch.randn(3, 32, 32))


def test_golden_parameter_count():
    assert count_params(UNet(UNetConfig(scales=4, base_channels=8))) == 122483


def test_zero_head_gives_uniform_softmax():
    model = UNet(UNetConfig(scales=2, base_channels=4)).eval()
    with torch.no_grad():
        model.head.weight.zero_()
        probs = softmax_head(model(torch.rand(1, 3, 16, 16)).logits)
    torch.testing.assert_close(probs, torch.full_like(probs, 1 / 3))


def test_init_is_seeded():
    cfg = UNetConfig(scales=2, base_channels=4)
    a, b, c = UNet(cfg, seed=1), UNet(cfg, seed=1), UNet(cfg, seed=2)
    for (_, pa), (_, pb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert torch.equal(pa, pb)
    assert not torch.equal(a.encoders[0][0].weight, c.encoders[0][0].weight)
    assert torch.count_nonzero(a.head.bias) == 0


def test_eval_forward_is_deterministic():
    model = UNet(UNetConfig(scales=3, base_channels=4)).eval()
    x = torch.rand(2, 3, 16, 16)
    with torch.no_grad():
        assert torch.equal(model(x).logits, model(x).logits)


def test_skip_hook_sees_every_scale():
    seen = []

    def hook(j, f):
        seen.append((j, f.shape[1]))
        return f * 0

    model = UNet(UNetConfig(scales=3, base_channels=2)).eval()
    x = torch.rand(1, 3, 16, 16)
    out = model(x, skip_hook=hook)
    assert seen == [(1, 2), (2, 4), (3, 8)]
    assert torch.count_nonzero(out.enc_feats[0]) == 0


def test_skip_hook_leaves_the_encoder_chain_alone():
    model = UNet(UNetConfig(scales=3, base_channels=2)).eval()
    x = torch.rand(1, 3, 16, 16)

    def zero_first(j, f):
        return f * 0 if j == 1 else f

    with torch.no_grad():
        plain = model(x)
        hooked = model(x, skip_hook=zero_first)
    assert torch.equal(hooked.enc_feats[1], plain.enc_feats[1])
    assert torch.equal(hooked.enc_feats[2], plain.enc_feats[2])
    assert not torch.equal(hooked.logits, plain.logits)


def test_pixel_shuffle_layout():
    feat = torch.arange(4.0).view(1, 4, 1, 1)
    assert pixel_shuffle_up(feat, 2).tolist() == [[[[0.0, 1.0], [2.0, 3.0]]]]
    assert pixel_shuffle_up(feat, 1) is feat
    assert pixel_shuffle_up(torch.zeros(2, 32, 4, 4), 4).shape == (2, 2, 16, 16)
    with pytest.raises(ValueError):
        pixel_shuffle_up(torch.zeros(1, 6, 2, 2), 2)
    with pytest.raises(ValueError):
        pixel_shuffle_up(feat, 0)


def test_backbone_gradients_match_finite_differences(grad_check):
    torch.manual_seed(0)
    model = UNet(UNetConfig(scales=3, base_channels=4), seed=3).double().eval()
    x = torch.rand(2, 3, 16, 16, dtype=torch.float64)
    target = torch.randint(0, 3, (2, 16, 16))

    err = grad_check(lambda: cross_entropy(model(x).logits, target), model.parameters())
    assert err < 1e-4
