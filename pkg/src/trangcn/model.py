"""Full model wiring for the three ablation variants.

``baseline``  conv branch -> global embedding -> linear head
``gcm``       pose + conv branches fused by the graph module (no transformer)
``tran_gcn``  pose + conv + transformer branches fused by the graph module
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn
from torch.func import functional_call

from .config import ArchConfig
from .conv import ConvBranch, ConvFeatures
from .core import ParamStore
from .gcm import FusedFeature, GraphModule, PersonGraph
from .losses import combine_features
from .pose import PoseBranch, PoseMaps
from .transformer import EncoderOutput, TransformerBranch


@dataclass
class BranchOutputs:
    pose: PoseMaps | None
    conv: ConvFeatures
    encoder: EncoderOutput | None
    conv_embedding: torch.Tensor


@dataclass
class ModelOutput:
    branches: BranchOutputs
    graph: PersonGraph | None
    fused: FusedFeature


class BaselineHead(nn.Module):
    def __init__(self, embed_dim: int, final_dim: int, num_classes: int):
        super().__init__()
        self.fusion = nn.Linear(embed_dim, final_dim)
        self.classifier = nn.Linear(final_dim, num_classes)

    def forward(self, embedding: torch.Tensor) -> FusedFeature:
        f_final = self.fusion(F.layer_norm(embedding, embedding.shape[-1:]))
        return FusedFeature(f_final, self.classifier(f_final))


class Combiner(nn.Module):
    """Projects pose and transformer summaries to the conv embedding width for summation."""

    def __init__(self, num_keypoints: int, num_limbs: int, d_model: int, embed_dim: int):
        super().__init__()
        self.pose_proj = nn.Linear(num_keypoints + num_limbs, embed_dim)
        self.trans_proj = nn.Linear(d_model, embed_dim)

    def forward(self, branches: BranchOutputs) -> torch.Tensor:
        pose = branches.pose
        f_pose = self.pose_proj(torch.cat([pose.keypoints[..., 2], pose.pafs], dim=-1))
        f_trans = self.trans_proj(branches.encoder.cls_embedding)
        return combine_features(f_pose, f_trans, branches.conv_embedding)


def num_tokens(arch: ArchConfig) -> int:
    rows, cols = arch.image_size
    if arch.tokens == "rawp":
        return (rows // arch.patch_size) * (cols // arch.patch_size)
    if arch.tokens == "cnn":
        s = 16 * arch.stage4_stride
        return (rows // s) * (cols // s)
    return arch.num_keypoints


class TranGCN(nn.Module):
    def __init__(self, arch: ArchConfig):
        super().__init__()
        arch.validate()
        self.arch = arch
        self.variant = arch.variant
        self.conv = ConvBranch(arch.stem_channels, arch.conv_channels, arch.blocks_per_stage,
                               arch.stage4_stride, arch.embed_dim)
        self.pose = None
        self.transformer = None
        self.gcm = None
        self.head = None
        self.combiner = None
        if arch.variant == "baseline":
            self.head = BaselineHead(arch.embed_dim, arch.final_dim, arch.num_classes)
            return
        self.pose = PoseBranch(arch.num_keypoints, arch.pose_channels, arch.pose_hidden)
        trans_dim = None
        if arch.variant == "tran_gcn":
            self.transformer = TransformerBranch(
                arch.tokens, num_tokens(arch), arch.d_model, arch.heads, arch.depth, arch.ffn_mult,
                patch_size=arch.patch_size, feature_dim=self.conv.feature_dim, early_dim=self.conv.early_dim,
                window=arch.kp_window, kp_threshold=arch.kp_threshold)
            self.combiner = Combiner(arch.num_keypoints, self.pose.num_limbs, arch.d_model, arch.embed_dim)
            trans_dim = arch.d_model
        self.gcm = GraphModule(arch.num_keypoints, self.conv.feature_dim, trans_dim,
                               node_conf_dim=arch.node_conf_dim, d_res=arch.d_res, d_trans=arch.d_trans,
                               gcn_dims=arch.gcn_dims, final_dim=arch.final_dim, num_classes=arch.num_classes,
                               aggregate=arch.aggregate)

    @property
    def pose_grid(self) -> tuple[int, int]:
        rows, cols = self.arch.image_size
        return rows // 32, cols // 32

    def pose_forward(self, images: torch.Tensor) -> PoseMaps:
        return self.pose(images)

    def transformer_forward(self, images, conv: ConvFeatures, pose: PoseMaps | None) -> EncoderOutput:
        keypoints = pose.keypoints if pose is not None else None
        seq = self.transformer.tokenize(images, conv, keypoints, self.pose_grid)
        return self.transformer.encode(seq)

    def branches(self, images: torch.Tensor) -> BranchOutputs:
        conv = self.conv(images)
        pose = self.pose(images) if self.pose is not None else None
        encoder = self.transformer_forward(images, conv, pose) if self.transformer is not None else None
        return BranchOutputs(pose, conv, encoder, self.conv.global_embed(conv))

    def fuse(self, b: BranchOutputs) -> tuple[PersonGraph | None, FusedFeature]:
        if self.head is not None:
            return None, self.head(b.conv_embedding)
        return self.gcm(b.pose.S, b.pose.affinity, b.pose.keypoints, b.conv.full, b.encoder, self.pose_grid)

    def embedding(self, b: BranchOutputs, fused: FusedFeature | None = None, kind: str = "final") -> torch.Tensor:
        if kind == "combined":
            if self.combiner is None:
                raise ValueError("the combined embedding needs all three branches (variant tran_gcn)")
            return self.combiner(b)
        if fused is None:
            fused = self.fuse(b)[1]
        return fused.f_final

    def forward(self, images: torch.Tensor) -> ModelOutput:
        b = self.branches(images)
        graph, fused = self.fuse(b)
        return ModelOutput(b, graph, fused)

    @torch.no_grad()
    def embed(self, images: torch.Tensor, kind: str = "final", batch_size: int = 64) -> torch.Tensor:
        out = []
        for i in range(0, images.shape[0], batch_size):
            b = self.branches(images[i:i + batch_size])
            out.append(self.embedding(b, kind=kind))
        return torch.cat(out)


def build_model(arch: ArchConfig, params: ParamStore | None = None) -> TranGCN:
    model = TranGCN(arch)
    if params is not None:
        model.to(next(iter(params.values())).dtype)
        params.load_into(model)
    return model


def call_with(model: nn.Module, params: ParamStore, method: str, *args, **kwargs):
    """Run ``model.<method>`` with tensors taken from ``params``."""
    fn = getattr(type(model), method)

    class _Bound(nn.Module):
        def __init__(self):
            super().__init__()
            self.inner = model

        def forward(self, *a, **kw):
            return fn(self.inner, *a, **kw)

    wrapper = _Bound()
    return functional_call(wrapper, {f"inner.{k}": v for k, v in params.items()}, args, kwargs)
