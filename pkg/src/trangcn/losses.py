"""Branch losses and the combined representation.

All distances are squared Euclidean. Batched inputs are averaged over the
leading dimension.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import ContractError, ShapeError


@dataclass
class PoseTargets:
    gt_S: torch.Tensor         # (B, K, a0, a1)
    gt_affinity: torch.Tensor  # (B, N_limbs)


@dataclass
class TripletBatch:
    anchors: torch.Tensor
    positives: torch.Tensor
    negatives: torch.Tensor
    margin: float

    def __post_init__(self):
        if not (self.anchors.shape == self.positives.shape == self.negatives.shape):
            raise ShapeError("anchors, positives and negatives must have matching shapes")
        if self.margin <= 0:
            raise ContractError(f"margin must be > 0, got {self.margin}")


def _sqdist(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return (a - b).pow(2).sum(dim=-1)


def pose_loss(S: torch.Tensor, pafs: torch.Tensor, targets: PoseTargets) -> torch.Tensor:
    """(1/K) sum_limbs |L - L_gt|^2 + (1/K) sum_k |S_k - S_k_gt|^2, averaged over the batch."""
    if S.shape != targets.gt_S.shape:
        raise ShapeError(f"confidence maps {tuple(S.shape)} vs targets {tuple(targets.gt_S.shape)}")
    if pafs.shape != targets.gt_affinity.shape:
        raise ShapeError(f"limb scores {tuple(pafs.shape)} vs targets {tuple(targets.gt_affinity.shape)}")
    n_kp = S.shape[-3]
    limb_term = (pafs - targets.gt_affinity).pow(2).sum(dim=-1) / n_kp
    conf_term = (S - targets.gt_S).pow(2).flatten(-3).sum(dim=-1) / n_kp
    return (limb_term + conf_term).mean()


def contrastive_loss(feats: torch.Tensor, pos_feats: torch.Tensor, neg_feats: torch.Tensor,
                     y: torch.Tensor, margin: float, form: str = "literal") -> torch.Tensor:
    """Pairwise contrastive loss.

    ``form="literal"`` evaluates, per sample,
    ``y * max(0, margin - |F - F_pos|^2) + (1 - y) * |F - F_neg|^2``.
    ``form="conventional"`` pulls positives in and hinges negatives:
    ``y * |F - F_pos|^2 + (1 - y) * max(0, margin - |F - F_neg|^2)``.
    """
    y = torch.as_tensor(y, dtype=feats.dtype, device=feats.device)
    if not torch.all((y == 0) | (y == 1)):
        raise ContractError("contrastive labels must be 0 or 1")
    if not (feats.shape == pos_feats.shape == neg_feats.shape) or y.shape != feats.shape[:-1]:
        raise ShapeError("contrastive inputs are not aligned")
    d_pos = _sqdist(feats, pos_feats)
    d_neg = _sqdist(feats, neg_feats)
    if form == "literal":
        per = y * torch.clamp(margin - d_pos, min=0) + (1 - y) * d_neg
    elif form == "conventional":
        per = y * d_pos + (1 - y) * torch.clamp(margin - d_neg, min=0)
    else:
        raise ValueError(f"unknown contrastive form {form!r}")
    return per.mean()


def triplet_loss(batch: TripletBatch) -> torch.Tensor:
    d_ap = _sqdist(batch.anchors, batch.positives)
    d_an = _sqdist(batch.anchors, batch.negatives)
    return torch.clamp(d_ap - d_an + batch.margin, min=0).mean()


def combine_features(f_pose: torch.Tensor, f_trans: torch.Tensor, f_res: torch.Tensor) -> torch.Tensor:
    if not (f_pose.shape == f_trans.shape == f_res.shape):
        raise ShapeError(f"branch features differ in shape: {tuple(f_pose.shape)}, "
                         f"{tuple(f_trans.shape)}, {tuple(f_res.shape)}")
    return f_pose + f_trans + f_res


def id_classification_loss(logits: torch.Tensor, label) -> torch.Tensor:
    label = torch.as_tensor(label, device=logits.device).long()
    c = logits.shape[-1]
    if torch.any((label < 0) | (label >= c)):
        raise ContractError(f"class label out of range [0, {c})")
    logp = logits.log_softmax(dim=-1)
    return -logp.gather(-1, label.unsqueeze(-1)).squeeze(-1).mean()
