import pytest
import torch
import torch.nn as nn

from nlbench import backbone
from nlbench.backbone import (BARLOW_HEAD, SIMCLR_HEAD, CheckpointError, CheckpointMeta, EncoderSpec, FreezePolicy,
                              HeadSpec)

SLIM = EncoderSpec.for_architecture("resnet10-w16", 32)


def test_default_encoder_feature_dim():
    enc = backbone.build_encoder(EncoderSpec(), init_seed=0).eval()
    with torch.no_grad():
        out = enc(torch.randn(2, 3, 224, 224))
    assert out.shape == (2, 512)


def test_same_seed_same_parameters():
    a = backbone.build_encoder(SLIM, 3).state_dict()
    b = backbone.build_encoder(SLIM, 3).state_dict()
    c = backbone.build_encoder(SLIM, 4).state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)
    assert not torch.equal(a["conv1.weight"], c["conv1.weight"])


def test_build_encoder_leaves_global_rng_alone():
    torch.manual_seed(0)
    expected = torch.rand(1)
    torch.manual_seed(0)
    backbone.build_encoder(SLIM, 9)
    assert torch.equal(torch.rand(1), expected)


@pytest.mark.parametrize("kwargs", [dict(input_size=17), dict(architecture="vgg"), dict(feature_dim=128)])
def test_bad_specs(kwargs):
    with pytest.raises(ValueError):
        EncoderSpec(**kwargs)


def test_torchvision_names_load():
    from torchvision.models import resnet18

    tv = resnet18(weights=None).state_dict()
    meta = CheckpointMeta("imagenet", "external", 0, 0, EncoderSpec())
    ckpt = backbone.import_external_state({"module." + k: v for k, v in tv.items()}, meta)
    enc = ckpt.build_encoder()
    assert torch.equal(enc.state_dict()["layer4.1.conv2.weight"], tv["layer4.1.conv2.weight"])
    with pytest.raises(CheckpointError):
        backbone.import_external_state({k: v for k, v in tv.items() if k != "bn1.bias"}, meta)


def test_forward_matches_torchvision():
    from torchvision.models import resnet18

    tv = resnet18(weights=None).eval()
    enc = backbone.build_encoder(EncoderSpec(), 0)
    enc.load_state_dict({k: v for k, v in tv.state_dict().items() if not k.startswith("fc.")})
    enc.eval()
    x = torch.randn(2, 3, 64, 64)
    tv.fc = nn.Identity()
    with torch.no_grad():
        torch.testing.assert_close(enc(x), tv(x))


def test_heads():
    enc = backbone.build_encoder(SLIM, 0)
    x = torch.randn(4, 3, 32, 32)
    assert backbone.attach_head(enc, HeadSpec("linear", 3))(x).shape == (4, 3)
    big = backbone.build_encoder(EncoderSpec("resnet18", 64, 512), 0)
    proj = backbone.attach_head(big, SIMCLR_HEAD)
    dims = [(m.in_features, m.out_features) for m in proj.head if isinstance(m, nn.Linear)]
    assert dims == [(512, 512), (512, 128)]
    barlow = backbone.attach_head(big, BARLOW_HEAD)
    assert barlow(torch.randn(2, 3, 64, 64)).shape == (2, 8192)


def test_head_shares_encoder():
    enc = backbone.build_encoder(SLIM, 0)
    model = backbone.attach_head(enc, HeadSpec("linear", 3))
    assert model.encoder is enc
    with torch.no_grad():
        enc.conv1.weight.zero_()
    assert model.encoder.conv1.weight.abs().sum() == 0


def test_puzzle_head():
    enc = backbone.build_encoder(SLIM, 0)
    model = backbone.attach_head(enc, HeadSpec("puzzle", 1000))
    assert model.head.in_features == 9 * enc.feature_dim
    assert model(torch.randn(2, 9, 3, 32, 32)).shape == (2, 1000)


def test_head_dimension_mismatch():
    enc = backbone.build_encoder(SLIM, 0)
    with pytest.raises(ValueError):
        backbone.attach_head(enc, HeadSpec("linear", 3, in_dim=512))
    with pytest.raises(ValueError):
        backbone.attach_head(enc, nn.Linear(64, 3))


def test_checkpoint_round_trip(tmp_path):
    enc = backbone.build_encoder(SLIM, 5)
    model = backbone.attach_head(enc, HeadSpec("linear", 3))
    meta = CheckpointMeta("simclr", "synthetic", 30, 5, SLIM, extra={"losses": [1.5, 1.2]})
    path = backbone.save_checkpoint(model, meta, tmp_path)
    assert path.name == "simclr_synthetic_5_30.ckpt"
    ckpt = backbone.load_checkpoint(path, expected_spec=SLIM)
    assert ckpt.meta.extra == {"losses": [1.5, 1.2]} and ckpt.meta.spec == SLIM
    for k, v in enc.state_dict().items():
        assert torch.equal(ckpt.state[k], v)
    for k, v in model.head.state_dict().items():
        assert torch.equal(ckpt.head_state()[k], v)
    rebuilt = ckpt.build_encoder()
    diff = max((a - b).abs().max().item() for a, b in zip(rebuilt.state_dict().values(), enc.state_dict().values()))
    assert diff == 0


def test_checkpoint_loads_at_other_input_size(tmp_path):
    small = EncoderSpec("resnet18", 64, 512)
    enc = backbone.build_encoder(small, 2)
    path = backbone.save_checkpoint(enc, CheckpointMeta("jigsaw", "synthetic", 1, 2, small), tmp_path)
    large = EncoderSpec("resnet18", 224, 512)
    ckpt = backbone.load_checkpoint(path, expected_spec=large)
    target = backbone.build_encoder(large, 9)
    backbone.load_encoder_state(target, ckpt)
    for k, v in enc.state_dict().items():
        assert torch.equal(target.state_dict()[k], v)
    assert target.eval()(torch.zeros(1, 3, 224, 224)).shape == (1, 512)


def test_checkpoint_spec_mismatch(tmp_path):
    enc = backbone.build_encoder(SLIM, 0)
    path = backbone.save_checkpoint(enc, CheckpointMeta("rotation", "d", 1, 0, SLIM), tmp_path)
    wide = EncoderSpec.for_architecture("resnet18-w16", 32)
    with pytest.raises(CheckpointError):
        backbone.load_checkpoint(path, expected_spec=wide)
    with pytest.raises(CheckpointError):
        backbone.load_encoder_state(backbone.build_encoder(wide, 0), backbone.load_checkpoint(path))


def test_corrupt_checkpoint(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"\x00\x01garbage")
    with pytest.raises(CheckpointError):
        backbone.load_checkpoint(p)


def _conv_names(model):
    return [n for n, c in model.encoder.conv_layers() if c.weight.requires_grad]


def test_freeze_two_trainable_convs():
    model = backbone.attach_head(backbone.build_encoder(EncoderSpec(), 0), HeadSpec("linear", 3))
    convs = model.encoder.conv_layers()
    assert len(convs) == 20  # 17 main-path convolutions plus 3 shortcut projections
    backbone.apply_freeze(model, FreezePolicy("frozen"))
    assert _conv_names(model) == ["layer4.1.conv1", "layer4.1.conv2"]
    assert backbone.trainable_conv_count(model) == 2
    assert all(p.requires_grad for p in model.head.parameters())


def test_plastic_all_trainable():
    model = backbone.attach_head(backbone.build_encoder(SLIM, 0), HeadSpec("linear", 3))
    backbone.apply_freeze(model, FreezePolicy("frozen"))
    backbone.apply_freeze(model, FreezePolicy("plastic"))
    total = sum(p.numel() for p in model.parameters())
    assert sum(p.numel() for p in model.parameters() if p.requires_grad) == total


def test_frozen_parameters_do_not_drift():
    spec = EncoderSpec.for_architecture("resnet18-w8", 32)
    model = backbone.attach_head(backbone.build_encoder(spec, 0), HeadSpec("linear", 3))
    backbone.apply_freeze(model, FreezePolicy("frozen"))
    before = {k: v.clone() for k, v in model.state_dict().items()}
    opt = torch.optim.SGD(model.parameters(), lr=0.1, momentum=0.9, weight_decay=1e-4)
    backbone.set_train_mode(model)
    loss = nn.functional.cross_entropy(model(torch.randn(8, 3, 32, 32)), torch.arange(8) % 3)
    loss.backward()
    opt.step()
    after = model.state_dict()
    for k in before:
        if k.startswith(("head.", "encoder.layer4.1.conv", "encoder.layer4.1.bn")):
            continue
        assert torch.equal(before[k], after[k]), k
    # frozen batch norms keep their running statistics too
    assert torch.equal(before["encoder.bn1.running_mean"], after["encoder.bn1.running_mean"])
    assert torch.equal(before["encoder.layer4.0.conv2.weight"], after["encoder.layer4.0.conv2.weight"])
    assert not torch.equal(before["head.weight"], after["head.weight"])
    assert not torch.equal(before["encoder.layer4.1.conv2.weight"], after["encoder.layer4.1.conv2.weight"])


def test_freeze_needs_residual_encoder():
    with pytest.raises(ValueError):
        backbone.apply_freeze(nn.Sequential(nn.Linear(2, 2)), FreezePolicy("frozen"))


def test_inference_deterministic():
    enc = backbone.build_encoder(SLIM, 1).eval()
    x = torch.randn(3, 3, 32, 32)
    with torch.no_grad():
        assert torch.equal(enc(x), enc(x))
