"""Graph convolutional fusion over the K-keypoint person graph.

Nodes carry ``[confidence | conv feature | transformer feature]`` sampled at the
keypoints; edges carry the normalized limb affinities. Propagation uses the
symmetric normalized adjacency with self loops.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ContractError, ShapeError
from .transformer import EncoderOutput, scaled_index

# sampling order for node-confidence neighbors: center, 4-neighborhood, corners
_NEIGHBOR_OFFSETS = ((0, 0), (-1, 0), (1, 0), (0, -1), (0, 1), (-1, -1), (-1, 1), (1, -1), (1, 1))


@dataclass
class PersonGraph:
    h_node: torch.Tensor         # (..., K, j + d_res + d_trans)
    h_edge: torch.Tensor         # (..., K, K)
    adjacency_hat: torch.Tensor  # (..., K, K)


@dataclass
class FusedFeature:
    f_final: torch.Tensor  # (..., D_final)
    logits: torch.Tensor   # (..., C)

    @property
    def probabilities(self) -> torch.Tensor:
        return self.logits.softmax(dim=-1)


def minmax_normalize(x: torch.Tensor, dim, mask: torch.Tensor | None = None) -> torch.Tensor:
    """``(x - min) / (max - min)`` over ``dim``; a constant slice maps to zeros.

    With ``mask``, min and max only range over the masked entries.
    """
    if mask is None:
        lo = x.amin(dim=dim, keepdim=True)
        hi = x.amax(dim=dim, keepdim=True)
    else:
        big = torch.finfo(x.dtype).max
        lo = torch.where(mask, x, x.new_tensor(big)).amin(dim=dim, keepdim=True)
        hi = torch.where(mask, x, x.new_tensor(-big)).amax(dim=dim, keepdim=True)
    span = hi - lo
    degenerate = span <= 0
    safe = torch.where(degenerate, torch.ones_like(span), span)
    return torch.where(degenerate, torch.zeros_like(x), (x - lo) / safe)


def init_node_confidence(S: torch.Tensor, keypoints: torch.Tensor, j: int = 1) -> torch.Tensor:
    """Sample each keypoint's own map at its peak and ``j - 1`` neighbors, min-max over the K nodes."""
    if not 1 <= j <= len(_NEIGHBOR_OFFSETS):
        raise ShapeError(f"node confidence width j must be in [1, {len(_NEIGHBOR_OFFSETS)}], got {j}")
    *lead, k, a0, a1 = S.shape
    x = keypoints[..., 0].detach().long()
    y = keypoints[..., 1].detach().long()
    flat = S.reshape(*lead, k, a0 * a1)
    cols = []
    for dx, dy in _NEIGHBOR_OFFSETS[:j]:
        idx = (x + dx).clamp(0, a0 - 1) * a1 + (y + dy).clamp(0, a1 - 1)
        cols.append(flat.gather(-1, idx.unsqueeze(-1)))
    return minmax_normalize(torch.cat(cols, dim=-1), dim=-2)


def init_edge_affinity(affinity: torch.Tensor) -> torch.Tensor:
    """Min-max normalize the off-diagonal affinities; diagonal stays zero."""
    if not torch.allclose(affinity, affinity.transpose(-1, -2), atol=1e-9, rtol=1e-6):
        raise ContractError("affinity matrix must be symmetric")
    k = affinity.shape[-1]
    off = ~torch.eye(k, dtype=torch.bool, device=affinity.device)
    if k < 2:
        return torch.zeros_like(affinity)
    normed = minmax_normalize(affinity, dim=(-1, -2), mask=off.expand(affinity.shape))
    return torch.where(off, normed, torch.zeros_like(normed))


def normalized_adjacency(h_edge: torch.Tensor) -> torch.Tensor:
    """D^-1/2 (H_edge + I) D^-1/2."""
    k = h_edge.shape[-1]
    a = h_edge + torch.eye(k, dtype=h_edge.dtype, device=h_edge.device)
    d_inv_sqrt = a.sum(dim=-1).rsqrt()
    return d_inv_sqrt[..., :, None] * a * d_inv_sqrt[..., None, :]


def build_graph(h_s: torch.Tensor, h_res: torch.Tensor, h_trans: torch.Tensor,
                h_edge_norm: torch.Tensor) -> PersonGraph:
    k = h_s.shape[-2]
    if h_res.shape[-2] != k or h_trans.shape[-2] != k or h_edge_norm.shape[-2:] != (k, k):
        raise ShapeError(f"node inputs are not K-row aligned: h_s {tuple(h_s.shape)}, h_res {tuple(h_res.shape)}, "
                         f"h_trans {tuple(h_trans.shape)}, h_edge {tuple(h_edge_norm.shape)}")
    h_node = torch.cat([h_s, h_res, h_trans], dim=-1)
    return PersonGraph(h_node, h_edge_norm, normalized_adjacency(h_edge_norm))


def gcn_layer(h: torch.Tensor, adjacency_hat: torch.Tensor, weight: torch.Tensor) -> torch.Tensor:
    """ReLU(Â H W)."""
    if weight.dim() != 2 or weight.shape[0] != h.shape[-1]:
        raise ShapeError(f"layer weight {tuple(weight.shape)} does not accept {h.shape[-1]}-dim node features")
    return torch.relu(adjacency_hat @ h @ weight)


def aggregate(node_features: torch.Tensor, mode: str = "mean") -> torch.Tensor:
    if mode == "mean":
        return node_features.mean(dim=-2)
    if mode == "max":
        return node_features.amax(dim=-2)
    raise ValueError(f"unknown aggregation {mode!r}")


def sample_feature_map(fmap: torch.Tensor, keypoints: torch.Tensor, pose_grid: tuple[int, int]) -> torch.Tensor:
    """(B, C, F0, F1) sampled at each keypoint's cell -> (B, K, C)."""
    b, c, f0, f1 = fmap.shape
    cx = scaled_index(keypoints[..., 0].detach(), pose_grid[0], f0)
    cy = scaled_index(keypoints[..., 1].detach(), pose_grid[1], f1)
    flat = fmap.reshape(b, c, f0 * f1).transpose(1, 2)  # (B, F0*F1, C)
    idx = (cx * f1 + cy).unsqueeze(-1).expand(-1, -1, c)
    return flat.gather(1, idx)


def select_keypoint_tokens(encoder_out: EncoderOutput, keypoints: torch.Tensor,
                           pose_grid: tuple[int, int]) -> torch.Tensor:
    """Each keypoint's own output token, or the nearest patch token for grid tokenizations."""
    seq = encoder_out.sequence
    k = keypoints.shape[-2]
    if encoder_out.grid is None:
        if seq.shape[-2] - 1 != k:
            raise ShapeError(f"keypoint tokens expected {k + 1} rows, got {seq.shape[-2]}")
        return seq[..., :k, :]
    g0, g1 = encoder_out.grid
    cx = scaled_index(keypoints[..., 0].detach(), pose_grid[0], g0)
    cy = scaled_index(keypoints[..., 1].detach(), pose_grid[1], g1)
    idx = (cx * g1 + cy).unsqueeze(-1).expand(-1, -1, seq.shape[-1])
    return seq.gather(1, idx)


def _standardize(x: torch.Tensor) -> torch.Tensor:
    return F.layer_norm(x, x.shape[-1:])


class GraphModule(nn.Module):
    def __init__(self, num_keypoints: int, feature_dim: int, trans_dim: int | None, *, node_conf_dim: int = 1,
                 d_res: int = 32, d_trans: int = 32, gcn_dims=(64, 64), final_dim: int = 64,
                 num_classes: int = 8, aggregate: str = "mean"):
        super().__init__()
        self.num_keypoints = num_keypoints
        self.node_conf_dim = node_conf_dim
        self.d_trans = d_trans
        self.aggregate_mode = aggregate
        self.conv_proj = nn.Linear(feature_dim, d_res)
        # without a transformer branch the d_trans columns are zero-filled
        self.trans_proj = nn.Linear(trans_dim, d_trans) if trans_dim is not None else None
        dims = (node_conf_dim + d_res + d_trans, *gcn_dims)
        self.gcn_weights = nn.ParameterList(
            nn.Parameter(torch.zeros(d_in, d_out)) for d_in, d_out in zip(dims[:-1], dims[1:]))
        self.fusion = nn.Linear(2 * dims[-1], final_dim)
        self.classifier = nn.Linear(final_dim, num_classes)

    @property
    def node_dim(self) -> int:
        return self.gcn_weights[0].shape[0]

    def project_branch_features(self, full: torch.Tensor | None, encoder_out: EncoderOutput | None,
                                keypoints: torch.Tensor, pose_grid: tuple[int, int]):
        if full is None:
            raise ContractError("conv branch output is missing")
        # branch features arrive at unrelated scales; standardize each node vector first
        h_res = self.conv_proj(_standardize(sample_feature_map(full, keypoints, pose_grid)))
        if self.trans_proj is None:
            h_trans = h_res.new_zeros(*h_res.shape[:-1], self.d_trans)
        else:
            if encoder_out is None:
                raise ContractError("transformer branch output is missing")
            h_trans = self.trans_proj(_standardize(select_keypoint_tokens(encoder_out, keypoints, pose_grid)))
        return h_res, h_trans

    def gcn_layer(self, graph_or_h, layer_index: int, adjacency_hat: torch.Tensor | None = None) -> torch.Tensor:
        if isinstance(graph_or_h, PersonGraph):
            h, adjacency_hat = graph_or_h.h_node, graph_or_h.adjacency_hat
        else:
            h = graph_or_h
        return gcn_layer(h, adjacency_hat, self.gcn_weights[layer_index])

    def propagate(self, graph: PersonGraph) -> torch.Tensor:
        h = graph.h_node
        for i in range(len(self.gcn_weights)):
            h = self.gcn_layer(h, i, graph.adjacency_hat)
        return h

    def fuse_and_classify(self, h_agg: torch.Tensor, final_nodes: torch.Tensor) -> FusedFeature:
        f_final = self.fusion(torch.cat([h_agg, final_nodes.mean(dim=-2)], dim=-1))
        return FusedFeature(f_final, self.classifier(f_final))

    def forward(self, S, affinity, keypoints, full, encoder_out, pose_grid) -> tuple[PersonGraph, FusedFeature]:
        h_s = init_node_confidence(S, keypoints, self.node_conf_dim)
        h_edge = init_edge_affinity(affinity)
        h_res, h_trans = self.project_branch_features(full, encoder_out, keypoints, pose_grid)
        graph = build_graph(h_s, h_res, h_trans, h_edge)
        final_nodes = self.propagate(graph)
        return graph, self.fuse_and_classify(aggregate(final_nodes, self.aggregate_mode), final_nodes)
