import numpy as np
import pytest
import torch

import fd
import oracles
from pfml.masking import MaskConfig
from pfml.network.layers import (
    ENCODER_PRESETS,
    ClassifierHead,
    ConvLayer,
    EncoderConfig,
    FrameEncoder,
    MultiHeadSelfAttention,
    PositionalEncoder,
    ProjectionHead,
    Transformer,
    TransformerBlock,
    TransformerConfig,
)
from pfml.network.model import Backbone, Classifier, PretrainModel, parameter_digest
from pfml.pretrain import masked_prediction_loss
from pfml.finetune import weighted_ce

TINY_ENC = EncoderConfig((ConvLayer(3, 4, 2, 1), ConvLayer(4, 3, 2, 1)), pool=4, dropout=0.0)
TINY_TR = TransformerConfig(num_blocks=2, dim=4, heads=2, ff_dim=6, dropout=0.0, pos_kernel=3, pos_groups=2)


@pytest.fixture(autouse=True)
def _double():
    torch.manual_seed(0)
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


def test_speech_encoder_lengths():
    enc = ENCODER_PRESETS["speech"]
    assert enc.lengths(480) == [96, 24, 12, 6, 1]
    want, n = [], 480
    for l in enc.layers:
        n = oracles.conv_len(n, l.kernel, l.stride, l.padding)
        want.append(n)
    assert want == [96, 24, 12, 6]
    out = FrameEncoder(1, 480, enc).eval()(torch.randn(2, 3, 1, 480))
    assert out.shape == (2, 3, 128)


def test_eeg_encoder_lengths():
    enc = ENCODER_PRESETS["eeg"]
    assert enc.lengths(400) == [80, 16, 5, 1]
    assert FrameEncoder(2, 400, enc).eval()(torch.randn(1, 14, 2, 400)).shape == (1, 14, 128)


def test_encoder_rejects_bad_geometry():
    with pytest.raises(ValueError, match="layer 0"):
        EncoderConfig((ConvLayer(4, 20, 5, 0),)).lengths(10)
    with pytest.raises(ValueError, match="time steps"):
        FrameEncoder(1, 64, EncoderConfig((ConvLayer(4, 4, 2, 1),), pool=None))
    enc = FrameEncoder(1, 480, ENCODER_PRESETS["speech"])
    with pytest.raises(ValueError, match="layer 0"):
        enc(torch.randn(1, 1, 1, 479))


def test_transformer_config_checks():
    with pytest.raises(ValueError):
        TransformerConfig(dim=10, heads=4)


def test_grad_encoder():
    enc = FrameEncoder(2, 16, TINY_ENC)
    x = torch.randn(2, 2, 16, requires_grad=True)
    fd.check(lambda: fd.projected(enc(x)), [x, *enc.parameters()])


def test_grad_positional_encoder():
    pos = PositionalEncoder(4, kernel=3, groups=2)
    z = torch.randn(2, 5, 4, requires_grad=True)
    fd.check(lambda: fd.projected(pos(z)), [z, *pos.parameters()])


def test_grad_attention_block():
    block = TransformerBlock(TINY_TR)
    x = torch.randn(2, 5, 4, requires_grad=True)
    fd.check(lambda: fd.projected(block(x)), [x, *block.parameters()])


def test_grad_heads():
    proj = ProjectionHead(4, 3)
    cls = ClassifierHead(4, 3, hidden=5)
    probe = ClassifierHead(4, 3)
    y = torch.randn(6, 4, requires_grad=True)
    for head in (proj, cls, probe):
        fd.check(lambda: fd.projected(head(y)), [y, *head.parameters()])


def test_grad_masked_losses():
    pred = torch.randn(2, 6, 3, requires_grad=True)
    tgt = torch.randn(2, 6, 3)
    masked = np.random.default_rng(0).random((2, 6)) < 0.5
    masked[0, 0] = True
    for kind in ("mse", "l1"):
        fd.check(lambda: masked_prediction_loss(pred, tgt, masked, kind), [pred])


def test_grad_weighted_ce():
    logits = torch.randn(7, 3, requires_grad=True)
    labels = torch.tensor([0, 1, 2, 2, 1, 0, 0])
    fd.check(lambda: weighted_ce(logits, labels, [3, 2, 2], from_logits=True), [logits])
    probs_param = torch.randn(7, 3, requires_grad=True)
    fd.check(lambda: weighted_ce(torch.softmax(probs_param, -1), labels, [3, 2, 2]), [probs_param])


def test_grad_whole_pretrain_model():
    bb = Backbone(2, 16, TINY_ENC, TINY_TR, MaskConfig(p_m=0.3, l_m=2, mask_type="learnable_token"))
    model = PretrainModel(bb, 5)
    frames = torch.randn(2, 6, 2, 16)
    tgt = torch.randn(2, 6, 5)
    masked = np.zeros((2, 6), bool)
    masked[:, 2:4] = True
    fd.check(lambda: masked_prediction_loss(model(frames, masked)["pred"], tgt, masked),
             list(model.parameters()))


def test_attention_weights_are_distributions():
    attn = MultiHeadSelfAttention(8, 2)
    _, w = attn(torch.randn(3, 7, 8), return_weights=True)
    assert w.shape == (3, 2, 7, 7)
    assert torch.all(w >= 0)
    torch.testing.assert_close(w.sum(-1), torch.ones(3, 2, 7))


def test_attention_permutation_equivariant():
    attn = MultiHeadSelfAttention(8, 2)
    x = torch.randn(1, 6, 8)
    perm = torch.randperm(6)
    torch.testing.assert_close(attn(x)[:, perm], attn(x[:, perm]))


def test_transformer_reports_nonfinite_block():
    tr = Transformer(TINY_TR)
    with torch.no_grad():
        tr.blocks[1].ff2.bias.fill_(float("nan"))
    with pytest.raises(FloatingPointError, match="block 1"):
        tr(torch.randn(1, 3, 4))


def test_backbone_shapes_and_mask_locations():
    frames = torch.randn(2, 6, 2, 16)
    masked = np.zeros((2, 6), bool)
    masked[:, 1] = True
    for loc in ("embeddings", "inputs"):
        bb = Backbone(2, 16, TINY_ENC, TINY_TR, MaskConfig(mask_location=loc)).eval()
        out = bb(frames, masked)
        assert out["z"].shape == (2, 6, 4) and out["y"].shape == (2, 6, 4)
        # the unmasked embedding is returned, masking only changes y
        if loc == "embeddings":
            torch.testing.assert_close(out["z"], bb(frames)["z"])
        assert not torch.allclose(out["y"], bb(frames)["y"])
    with pytest.raises(ValueError):
        Backbone(2, 16, TINY_ENC, TINY_TR)(frames, masked)


def test_input_projection_when_dims_differ():
    tr = TransformerConfig(num_blocks=1, dim=8, heads=2, ff_dim=8, dropout=0, pos_kernel=3, pos_groups=2)
    bb = Backbone(2, 16, TINY_ENC, tr)
    assert bb.input_proj is not None
    assert bb(torch.randn(1, 3, 2, 16))["y"].shape == (1, 3, 8)


def test_classifier_pooling():
    bb = Backbone(2, 16, TINY_ENC, TINY_TR).eval()
    frames = torch.randn(3, 5, 2, 16)
    assert Classifier(bb, 4, hidden=6)(frames).shape == (3, 4)
    assert Classifier(bb, 4, pooling="frame")(frames).shape == (3, 5, 4)
    probs = ClassifierHead(4, 3).probabilities(torch.randn(2, 4))
    torch.testing.assert_close(probs.sum(-1), torch.ones(2))
    with pytest.raises(ValueError):
        Classifier(bb, 4, pooling="max")


def test_head_init_statistics():
    torch.manual_seed(3)
    head = ProjectionHead(128, 256)
    w = head.weight.detach()
    assert abs(w.mean().item()) < 1e-3
    assert 0.015 < w.std().item() < 0.02
    assert torch.all(head.bias == 0) and w.abs().max() <= 0.04


def test_parameter_digest_tracks_changes():
    bb = Backbone(2, 16, TINY_ENC, TINY_TR)
    d = parameter_digest(bb)
    assert d == parameter_digest(bb)
    with torch.no_grad():
        bb.pos.norm.bias.add_(1e-3)
    assert d != parameter_digest(bb)
