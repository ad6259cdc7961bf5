import pytest
import torch

from trangcn.config import ArchConfig
from trangcn.core import init_params
from trangcn.errors import ConfigError
from trangcn.model import TranGCN, build_model, num_tokens


@pytest.mark.parametrize("size", [(64, 32), (128, 64), (256, 128)])
@pytest.mark.parametrize("tokens", ["rawp", "cnn", "keypoint"])
def test_full_model_shapes(size, tokens):
    arch = ArchConfig(image_size=size, tokens=tokens, num_classes=5)
    model = build_model(arch, init_params(arch, 0, torch.float64))
    out = model(torch.rand(2, 3, *size, dtype=torch.float64))
    b = out.branches
    assert b.pose.S.shape == (2, 18, size[0] // 32, size[1] // 32)
    assert b.conv.full.shape == (2, 64, size[0] // 16, size[1] // 16)
    assert b.encoder.sequence.shape == (2, num_tokens(arch) + 1, arch.d_model)
    assert out.graph.h_node.shape == (2, 18, 1 + arch.d_res + arch.d_trans)
    assert out.graph.adjacency_hat.shape == (2, 18, 18)
    assert out.fused.f_final.shape == (2, arch.final_dim)
    assert out.fused.logits.shape == (2, 5)
    assert model.embedding(b, kind="combined").shape == (2, arch.embed_dim)


@pytest.mark.parametrize("variant", ["baseline", "gcm"])
def test_ablation_wiring(variant):
    model = TranGCN(ArchConfig(variant=variant))
    assert model.transformer is None
    assert (model.pose is None) == (variant == "baseline")
    out = model(torch.rand(1, 3, 64, 32))
    assert out.fused.logits.shape == (1, 8)
    with pytest.raises(ValueError):
        model.embedding(out.branches, kind="combined")


def test_float64_params_keep_precision():
    arch = ArchConfig(variant="baseline")
    params = init_params(arch, 0, torch.float64)
    model = build_model(arch, params)
    assert next(model.parameters()).dtype == torch.float64
    assert torch.equal(dict(model.named_parameters())["conv.embed.weight"], params["conv.embed.weight"])


def test_invalid_variant():
    with pytest.raises(ConfigError, match="baseline,gcm,tran_gcn"):
        TranGCN(ArchConfig(variant="resnet"))
