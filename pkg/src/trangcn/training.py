"""Stagewise training: each branch with its own loss, then the fusion head.

Stage order is pose (``pose_loss``), conv (``contrastive_loss`` on sampled
pairs), transformer (``triplet_loss`` on sampled triplets) and finally the
graph module and classifier (``id_classification_loss``). Stages whose branch
is absent from the variant are skipped. Optimization is plain SGD.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .config import ArchConfig, TrainConfig, to_flat
from .conv import ConvFeatures
from .core import ParamStore, init_params, save_checkpoint
from .data import Dataset, DatasetSplit
from .errors import ContractError, DivergenceError
from .losses import PoseTargets, TripletBatch, contrastive_loss, id_classification_loss, pose_loss, triplet_loss
from .metrics import MetricsReport, RetrievalRun, evaluate
from .model import BranchOutputs, TranGCN, build_model
from .pose import PoseMaps
from .transformer import EncoderOutput

log = logging.getLogger(__name__)

STAGES = ("pose", "conv", "transformer", "joint")


@dataclass
class TrainRecord:
    stage: str
    epoch: int
    loss_name: str
    value: float


@dataclass
class TrainLog:
    records: list[TrainRecord] = field(default_factory=list)

    def add(self, stage: str, epoch: int, loss_name: str, value: float) -> None:
        self.records.append(TrainRecord(stage, epoch, loss_name, float(value)))

    def losses(self, stage: str, loss_name: str | None = None) -> list[float]:
        return [r.value for r in self.records if r.stage == stage and (loss_name is None or r.loss_name == loss_name)]

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["stage", "epoch", "loss_name", "value"])
            for r in self.records:
                w.writerow([r.stage, r.epoch, r.loss_name, repr(r.value)])
        return path

    def __eq__(self, other):
        return isinstance(other, TrainLog) and self.records == other.records


# -- sampling ------------------------------------------------------------------------

def _ids(split) -> np.ndarray:
    return np.asarray(split.ids if isinstance(split, DatasetSplit) else split, dtype=np.int64)


def _anchor_pool(ids: np.ndarray) -> tuple[np.ndarray, dict[int, np.ndarray]]:
    if len(np.unique(ids)) < 2:
        raise ContractError("sampling needs at least two identities")
    by_id = {int(i): np.flatnonzero(ids == i) for i in np.unique(ids)}
    pool = np.concatenate([v for v in by_id.values() if len(v) >= 2]) if any(
        len(v) >= 2 for v in by_id.values()) else np.empty(0, dtype=np.int64)
    if pool.size == 0:
        raise ContractError("no identity has two images, so no positive pair exists")
    return np.sort(pool), by_id


def sample_triplets(split, batch_size: int, rng: np.random.Generator | int):
    """Uniform anchors, a different image of the same identity, an image of another identity."""
    rng = np.random.default_rng(rng)
    ids = _ids(split)
    pool, by_id = _anchor_pool(ids)
    anchors = rng.choice(pool, size=batch_size)
    positives = np.empty(batch_size, dtype=np.int64)
    negatives = np.empty(batch_size, dtype=np.int64)
    for n, a in enumerate(anchors):
        same = by_id[int(ids[a])]
        same = same[same != a]
        positives[n] = same[rng.integers(len(same))]
        others = np.flatnonzero(ids != ids[a])
        negatives[n] = others[rng.integers(len(others))]
    return anchors, positives, negatives


def sample_pairs(split, batch_size: int, rng: np.random.Generator | int):
    """Triplet indices plus a uniform 0/1 similarity label per anchor."""
    rng = np.random.default_rng(rng)
    a, p, n = sample_triplets(split, batch_size, rng)
    y = rng.integers(0, 2, size=batch_size)
    return a, p, n, y


# -- helpers -----------------------------------------------------------------------------

def _take_pose(p: PoseMaps | None, idx) -> PoseMaps | None:
    if p is None:
        return None
    return PoseMaps(*(getattr(p, f.name)[idx] for f in fields(PoseMaps)))


def _take(b: BranchOutputs, idx) -> BranchOutputs:
    enc = None
    if b.encoder is not None:
        enc = EncoderOutput(b.encoder.sequence[idx], b.encoder.grid)
    return BranchOutputs(_take_pose(b.pose, idx), ConvFeatures(b.conv.full[idx], b.conv.early[idx]), enc,
                         b.conv_embedding[idx])


@torch.no_grad()
def _cache_branches(model: TranGCN, images: torch.Tensor, batch_size: int = 64) -> BranchOutputs:
    parts = [model.branches(images[i:i + batch_size]) for i in range(0, len(images), batch_size)]

    def cat(getter):
        vals = [getter(p) for p in parts]
        return None if vals[0] is None else torch.cat(vals)

    pose = None
    if parts[0].pose is not None:
        pose = PoseMaps(*(cat(lambda p, n=f.name: getattr(p.pose, n)) for f in fields(PoseMaps)))
    enc = None
    if parts[0].encoder is not None:
        enc = EncoderOutput(cat(lambda p: p.encoder.sequence), parts[0].encoder.grid)
    conv = ConvFeatures(cat(lambda p: p.conv.full), cat(lambda p: p.conv.early))
    return BranchOutputs(pose, conv, enc, cat(lambda p: p.conv_embedding))


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for s in range(0, n, batch_size):
        yield perm[s:s + batch_size]


def _check(loss: torch.Tensor, stage: str, epoch: int) -> float:
    v = float(loss.detach())
    if not math.isfinite(v):
        raise DivergenceError(stage, epoch)
    return v


def _sgd_step(params: list[torch.nn.Parameter], loss: torch.Tensor, lr: float) -> None:
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    with torch.no_grad():
        for p, g in zip(params, grads):
            if g is not None:
                p.sub_(lr * g)


def default_arch(data: Dataset, **overrides) -> ArchConfig:
    size = tuple(data.train.images.shape[1:3]) if data.train.images is not None else (128, 64)
    return ArchConfig(image_size=size, num_classes=data.num_train_ids, **overrides)


# -- the stagewise schedule -------------------------------------------------------------

def train_stagewise(config: TrainConfig, data: Dataset, arch: ArchConfig | None = None, *,
                    checkpoint_dir: str | Path | None = None,
                    on_epoch: Callable[[str, int, TranGCN], None] | None = None) -> tuple[ParamStore, TrainLog]:
    config.validate()
    arch = (arch or default_arch(data)).validate()
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    params = init_params(arch, config.seed)
    model = build_model(arch, params)
    tlog = TrainLog()
    train = data.train
    if len(train) == 0:
        raise ContractError("training split is empty")
    images = train.tensor(arch.image_size)
    labels = torch.as_tensor(train.ids)

    def maybe_checkpoint(stage: str, epoch: int):
        if on_epoch is not None:
            on_epoch(stage, epoch, model)
        if checkpoint_dir and config.checkpoint_every and epoch % config.checkpoint_every == 0:
            save_checkpoint(Path(checkpoint_dir) / f"{stage}_{epoch:04d}.ckpt", ParamStore.from_module(model, config.seed),
                            to_flat(arch))

    # stage 1: pose branch against the rendered targets
    if model.pose is not None and config.pose_epochs:
        if train.gt_S is None:
            log.warning("no pose targets available; skipping the pose stage")
        else:
            gt_S = torch.from_numpy(train.gt_S).float()
            gt_aff = torch.from_numpy(train.gt_affinity).float()
            trainable = list(model.pose.parameters())
            for epoch in range(1, config.pose_epochs + 1):
                total = 0.0
                for idx in _batches(len(train), config.batch_size, rng):
                    maps = model.pose(images[idx])
                    loss = pose_loss(maps.S, maps.pafs, PoseTargets(gt_S[idx], gt_aff[idx]))
                    total += _check(loss, "pose", epoch) * len(idx)
                    _sgd_step(trainable, loss, config.pose_lr)
                tlog.add("pose", epoch, "pose_loss", total / len(train))
                maybe_checkpoint("pose", epoch)

    # stage 2: conv branch with the contrastive loss over sampled pairs
    if config.conv_epochs:
        trainable = list(model.conv.parameters())
        n_batches = max(1, math.ceil(len(train) / config.batch_size))
        for epoch in range(1, config.conv_epochs + 1):
            total = 0.0
            for _ in range(n_batches):
                a, p, n, y = sample_pairs(train, config.batch_size, rng)
                emb = model.conv.global_embed(model.conv(images[np.concatenate([a, p, n])]))
                fa, fp, fn = emb.split(len(a))
                loss = contrastive_loss(fa, fp, fn, torch.as_tensor(y), config.contrastive_margin,
                                        config.contrastive_form)
                total += _check(loss, "conv", epoch)
                _sgd_step(trainable, loss, config.conv_lr)
            tlog.add("conv", epoch, "contrastive_loss", total / n_batches)
            maybe_checkpoint("conv", epoch)

    # stage 3: transformer branch with the triplet loss; upstream branches are frozen
    if model.transformer is not None and config.trans_epochs:
        with torch.no_grad():
            conv_cache = model.conv(images)
            pose_cache = model.pose(images)
        trainable = list(model.transformer.parameters())
        n_batches = max(1, math.ceil(len(train) / config.batch_size))
        for epoch in range(1, config.trans_epochs + 1):
            total = 0.0
            for _ in range(n_batches):
                a, p, n = sample_triplets(train, config.batch_size, rng)
                idx = np.concatenate([a, p, n])
                conv = ConvFeatures(conv_cache.full[idx], conv_cache.early[idx])
                cls = model.transformer_forward(images[idx], conv, _take_pose(pose_cache, idx)).cls_embedding
                fa, fp, fn = cls.split(len(a))
                loss = triplet_loss(TripletBatch(fa, fp, fn, config.triplet_margin))
                total += _check(loss, "transformer", epoch)
                _sgd_step(trainable, loss, config.trans_lr)
            tlog.add("transformer", epoch, "triplet_loss", total / n_batches)
            maybe_checkpoint("transformer", epoch)

    # stage 4: graph module / head with identity classification
    if config.joint_epochs:
        head = model.head if model.head is not None else model.gcm
        trainable = list(head.parameters())
        if config.embedding == "combined" and model.combiner is not None:
            trainable += list(model.combiner.parameters())
        if config.unfreeze:
            trainable = list(model.parameters())
        cache = None if config.unfreeze else _cache_branches(model, images)
        for epoch in range(1, config.joint_epochs + 1):
            total = 0.0
            for idx in _batches(len(train), config.batch_size, rng):
                b = model.branches(images[idx]) if cache is None else _take(cache, idx)
                _, fused = model.fuse(b)
                loss = id_classification_loss(fused.logits, labels[idx])
                extra = config.joint_loss or config.embedding == "combined"
                if extra and len(np.unique(train.ids[idx])) >= 2:
                    emb = model.embedding(b, fused, config.embedding)
                    loss = loss + _batch_triplet(emb, train.ids[idx], config.triplet_margin, rng)
                total += _check(loss, "joint", epoch) * len(idx)
                _sgd_step(trainable, loss, config.joint_lr)
            tlog.add("joint", epoch, "id_loss", total / len(train))
            maybe_checkpoint("joint", epoch)

    return ParamStore.from_module(model, config.seed), tlog


def _batch_triplet(emb: torch.Tensor, ids: np.ndarray, margin: float, rng) -> torch.Tensor:
    try:
        a, p, n = sample_triplets(ids, len(ids), rng)
    except ContractError:
        return emb.sum() * 0
    return triplet_loss(TripletBatch(emb[a], emb[p], emb[n], margin))


# -- evaluation ------------------------------------------------------------------------------

def evaluate_model(model: TranGCN, data: Dataset, kind: str = "final", distance: str = "euclidean",
                   cam_filter: bool = True) -> MetricsReport:
    model.eval()
    size = model.arch.image_size
    q = model.embed(data.query.tensor(size).to(next(model.parameters()).dtype), kind)
    g = model.embed(data.gallery.tensor(size).to(next(model.parameters()).dtype), kind)
    run = RetrievalRun(q.double().numpy(), g.double().numpy(), data.query.ids, data.gallery.ids,
                       data.query.cams, data.gallery.cams, distance=distance, cam_filter=cam_filter)
    return evaluate(run)


def train_and_evaluate(config: TrainConfig, data: Dataset, arch: ArchConfig | None = None):
    arch = arch or default_arch(data)
    params, tlog = train_stagewise(config, data, arch)
    model = build_model(arch, params)
    return params, tlog, evaluate_model(model, data, config.embedding)
