"""Pose branch: keypoint confidence maps and per-limb affinity scores.

A single-stage, shared-backbone variant of the OpenPose heads. The backbone
downsamples by 32; the confidence head and the limb head each see the
backbone features plus the other head's output for one cross-feed round.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .errors import ShapeError
from .layers import check_image, conv3x3, normalize_image, pointwise_mlp

# COCO-18 keypoint order used by OpenPose
KEYPOINT_NAMES = (
    "nose", "neck", "r_shoulder", "r_elbow", "r_wrist", "l_shoulder", "l_elbow", "l_wrist",
    "r_hip", "r_knee", "r_ankle", "l_hip", "l_knee", "l_ankle", "r_eye", "l_eye", "r_ear", "l_ear",
)

COCO_LIMBS = (
    (1, 2), (1, 5), (2, 3), (3, 4), (5, 6), (6, 7), (1, 8), (8, 9), (9, 10), (1, 11),
    (11, 12), (12, 13), (1, 0), (0, 14), (14, 16), (0, 15), (15, 17), (2, 16), (5, 17),
)


def default_topology(num_keypoints: int) -> tuple[tuple[int, int], ...]:
    """The 19-limb OpenPose list for K=18, otherwise a simple chain."""
    if num_keypoints == 18:
        return COCO_LIMBS
    return tuple((i, i + 1) for i in range(num_keypoints - 1))


def validate_topology(topology, num_keypoints: int) -> None:
    seen = set()
    for i, j in topology:
        if not (0 <= i < num_keypoints and 0 <= j < num_keypoints) or i == j:
            raise ShapeError(f"limb ({i}, {j}) is not a valid pair for K={num_keypoints}")
        key = (min(i, j), max(i, j))
        if key in seen:
            raise ShapeError(f"duplicate limb {key}")
        seen.add(key)


@dataclass
class PoseMaps:
    S: torch.Tensor          # (B, K, a0, a1) confidence maps in [0, 1]
    limb_fields: torch.Tensor  # (B, N_limbs, a0, a1) spatial limb scores in [0, 1]
    pafs: torch.Tensor       # (B, N_limbs) per-limb affinity scalars in [0, 1]
    affinity: torch.Tensor   # (B, K, K) symmetric, zero diagonal
    keypoints: torch.Tensor  # (B, K, 3) as (x, y, confidence)


def extract_keypoints(S: torch.Tensor) -> torch.Tensor:
    """Global maximum of each confidence channel.

    ``x`` and ``y`` index the map's first and second spatial axes. Ties go to the
    smallest row-major index. The confidence entry stays differentiable w.r.t. ``S``.
    """
    *lead, a0, a1 = S.shape
    flat = S.reshape(*lead, a0 * a1)
    # torch.argmax returns the first maximal index
    idx = flat.argmax(dim=-1, keepdim=True)
    conf = flat.gather(-1, idx).squeeze(-1)
    idx = idx.squeeze(-1)
    x = torch.div(idx, a1, rounding_mode="floor").to(S.dtype)
    y = (idx % a1).to(S.dtype)
    return torch.stack([x, y, conf], dim=-1)


def _limb_basis(topology, num_keypoints: int, dtype, device=None) -> torch.Tensor:
    basis = torch.zeros(len(topology), num_keypoints, num_keypoints, dtype=dtype, device=device)
    for n, (i, j) in enumerate(topology):
        basis[n, i, j] = 1.0
        basis[n, j, i] = 1.0
    return basis


def build_affinity_matrix(pafs: torch.Tensor, topology, num_keypoints: int = 18) -> torch.Tensor:
    """Scatter per-limb scores into a symmetric K x K matrix."""
    topology = tuple(topology)
    if pafs.shape[-1] != len(topology):
        raise ShapeError(f"got {pafs.shape[-1]} limb scores for a topology of {len(topology)} limbs")
    validate_topology(topology, num_keypoints)
    basis = _limb_basis(topology, num_keypoints, pafs.dtype, pafs.device)
    if not topology:
        return pafs.new_zeros(*pafs.shape[:-1], num_keypoints, num_keypoints)
    return torch.einsum("...n,nij->...ij", pafs, basis)


class PoseBranch(nn.Module):
    def __init__(self, num_keypoints: int = 18, channels=(8, 16, 32, 32, 64), hidden: int = 64,
                 topology=None):
        super().__init__()
        self.num_keypoints = num_keypoints
        self.topology = tuple(topology) if topology is not None else default_topology(num_keypoints)
        validate_topology(self.topology, num_keypoints)
        self.num_limbs = len(self.topology)
        layers = []
        c_in = 3
        for c in channels:
            layers += [conv3x3(c_in, c, stride=2), nn.ReLU()]
            c_in = c
        self.backbone = nn.Sequential(*layers)
        self.feature_dim = c_in
        self.confidence_head = pointwise_mlp(c_in + self.num_limbs, hidden, num_keypoints)
        self.affinity_head = pointwise_mlp(c_in + num_keypoints, hidden, self.num_limbs)
        self.register_buffer("limb_basis", _limb_basis(self.topology, num_keypoints, torch.float32),
                             persistent=False)

    def extract_pose_features(self, images: torch.Tensor) -> torch.Tensor:
        check_image(images, 32)
        return self.backbone(normalize_image(images))

    def predict_maps(self, f_pe: torch.Tensor) -> PoseMaps:
        if f_pe.dim() != 4 or f_pe.shape[1] != self.feature_dim:
            raise ShapeError(f"expected pose features with {self.feature_dim} channels, got {tuple(f_pe.shape)}")
        b, _, a0, a1 = f_pe.shape
        # first limb estimate from the features alone, then one cross-feed round
        no_conf = f_pe.new_zeros(b, self.num_keypoints, a0, a1)
        limb0 = torch.sigmoid(self.affinity_head(torch.cat([f_pe, no_conf], 1)))
        S = torch.sigmoid(self.confidence_head(torch.cat([f_pe, limb0], 1)))
        if S.shape[1] != self.num_keypoints:
            raise ShapeError(f"confidence head produced {S.shape[1]} channels, expected K={self.num_keypoints}")
        limb_logits = self.affinity_head(torch.cat([f_pe, S], 1))
        pafs = torch.sigmoid(limb_logits.mean(dim=(2, 3)))
        affinity = torch.einsum("bn,nij->bij", pafs, self.limb_basis.to(pafs.dtype))
        return PoseMaps(S=S, limb_fields=torch.sigmoid(limb_logits), pafs=pafs,
                        affinity=affinity, keypoints=extract_keypoints(S))

    def forward(self, images: torch.Tensor) -> PoseMaps:
        return self.predict_maps(self.extract_pose_features(images))
