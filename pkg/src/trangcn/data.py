"""Dataset ingestion and the synthetic person generator.

Two sources produce the same ``Dataset`` triple of train / query / gallery splits:

* ``load_market_dir`` reads a Market-1501 style tree (``bounding_box_train``,
  ``query``, ``bounding_box_test``) whose file names start with ``<pid>_c<cam>``.
* ``generate_synthetic`` renders stick-figure persons whose identity is carried
  by limb colors, torso texture and skeleton proportions, together with pose
  targets for the pose branch.
"""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import ConfigError, IngestionError
from .pose import COCO_LIMBS

log = logging.getLogger(__name__)

MARKET_PATTERN = re.compile(r"^(-?\d+)_c(\d+)")
MARKET_SUBDIRS = {"train": "bounding_box_train", "query": "query", "gallery": "bounding_box_test"}
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
ROLES = ("train", "query", "gallery")


@dataclass
class DatasetSplit:
    role: str
    ids: np.ndarray
    cams: np.ndarray
    images: np.ndarray | None = None          # (N, rows, cols, 3) uint8
    paths: list[str] | None = None
    gt_S: np.ndarray | None = None            # (N, K, rows/32, cols/32)
    gt_affinity: np.ndarray | None = None     # (N, N_limbs)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def items(self) -> list[tuple]:
        source = self.paths if self.paths is not None else list(self.images)
        return list(zip(source, self.ids.tolist(), self.cams.tolist()))

    def load_images(self, size: tuple[int, int]) -> np.ndarray:
        if self.images is not None and self.images.shape[1:3] == tuple(size):
            return self.images
        if self.paths is None:
            raise IngestionError(f"{self.role} split has neither images of size {size} nor paths")
        return np.stack([read_image(p, size) for p in self.paths])

    def tensor(self, size: tuple[int, int] | None = None) -> torch.Tensor:
        """Images as a float32 (N, 3, rows, cols) tensor in [0, 1]."""
        arr = self.images if size is None else self.load_images(size)
        return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).float().div_(255.0)


@dataclass
class Dataset:
    train: DatasetSplit
    query: DatasetSplit
    gallery: DatasetSplit
    info: dict = field(default_factory=dict)

    def splits(self):
        return self.train, self.query, self.gallery

    @property
    def num_train_ids(self) -> int:
        return int(len(np.unique(self.train.ids)))


def read_image(path: str | Path, size: tuple[int, int]) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("RGB")
        if im.size != (size[1], size[0]):
            im = im.resize((size[1], size[0]), Image.BILINEAR)
        return np.asarray(im, dtype=np.uint8)


# -- Market-1501 ---------------------------------------------------------------

def parse_market_name(name: str) -> tuple[int, int] | None:
    m = MARKET_PATTERN.match(name)
    if m is None:
        return None
    return int(m.group(1)), int(m.group(2))


def load_market_dir(root: str | Path) -> Dataset:
    """Parse a Market-1501 root into train / query / gallery splits.

    Junk images (pid -1) are dropped, distractors (pid 0) are kept in the gallery
    only, and train identities are remapped onto ``0..n-1``. Unparsable names are
    skipped with a warning; counts are recorded in ``Dataset.info``.
    """
    root = Path(root)
    if not root.is_dir():
        raise IngestionError(f"dataset root {root} does not exist")
    info = {"skipped_unparsable": 0, "junk": 0, "distractors_dropped": 0}
    splits = {}
    for role in ROLES:
        sub = root / MARKET_SUBDIRS[role]
        if not sub.is_dir():
            raise IngestionError(f"missing subdirectory {MARKET_SUBDIRS[role]}/ in {root}")
        paths, ids, cams = [], [], []
        for p in sorted(set(sub.iterdir())):
            if p.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            parsed = parse_market_name(p.name)
            if parsed is None or parsed[1] < 1:
                log.warning("skipping %s: file name does not match <pid>_c<cam>", p)
                info["skipped_unparsable"] += 1
                continue
            pid, cam = parsed
            if pid == -1:
                info["junk"] += 1
                continue
            if pid == 0 and role != "gallery":
                info["distractors_dropped"] += 1
                continue
            paths.append(str(p))
            ids.append(pid)
            cams.append(cam)
        splits[role] = DatasetSplit(role, np.asarray(ids, dtype=np.int64), np.asarray(cams, dtype=np.int64),
                                    paths=paths)
    train = splits["train"]
    if len(train) == 0:
        raise IngestionError(f"no usable training images under {root / MARKET_SUBDIRS['train']}")
    uniq = np.unique(train.ids)
    info["train_id_map"] = {int(orig): i for i, orig in enumerate(uniq)}
    train.ids = np.searchsorted(uniq, train.ids).astype(np.int64)
    return Dataset(train, splits["query"], splits["gallery"], info)


# -- synthetic persons -----------------------------------------------------------

# standing template, (row, col) as fractions of the image
_TEMPLATE = np.array([
    (0.12, 0.50), (0.22, 0.50), (0.23, 0.34), (0.38, 0.28), (0.52, 0.26), (0.23, 0.66), (0.38, 0.72),
    (0.52, 0.74), (0.52, 0.41), (0.72, 0.40), (0.92, 0.39), (0.52, 0.59), (0.72, 0.60), (0.92, 0.61),
    (0.10, 0.45), (0.10, 0.55), (0.11, 0.40), (0.11, 0.60),
])
_ARM_JOINTS = {3: 2, 4: 2, 6: 5, 7: 5}     # joint -> shoulder it hangs from
_LEG_JOINTS = {9: 8, 10: 8, 12: 11, 13: 11}  # joint -> hip
_TORSO = (2, 5, 11, 8)

PRESETS = {
    # no jitter, no occlusion, no translation
    "easy": dict(jitter=0.0, translate=0.0, brightness=0.0, occlusion=0.0, bg_noise=0.08, shared_appearance=1),
    "default": dict(jitter=0.8, translate=2.0, brightness=0.1, occlusion=0.2, bg_noise=0.12, shared_appearance=1),
    # identities come in pairs that share colors and texture and differ only in skeleton
    "pose": dict(jitter=0.3, translate=0.0, brightness=0.05, occlusion=0.0, bg_noise=0.08, shared_appearance=2),
}

# the pose-dependent ablation benchmark: 16 ids x 16 images at 64x32, preset "pose"
POSE_BENCHMARK = dict(num_ids=16, imgs_per_id=16, size=(64, 32), preset="pose")


@dataclass(frozen=True)
class SyntheticPerson:
    identity: int
    joints: np.ndarray        # (K, 2) in pixels, (row, col)
    limb_colors: np.ndarray   # (N_limbs, 3) in [0, 1]
    torso_color: np.ndarray   # (3,)
    torso_texture: int
    thickness: float


def make_person(identity: int, seed: int, size: tuple[int, int], shared_appearance: int = 1) -> SyntheticPerson:
    rows, cols = size
    shape_rng = np.random.default_rng([seed, identity, 0])
    look_rng = np.random.default_rng([seed, identity // shared_appearance, 1])

    frac = _TEMPLATE.copy()
    shoulder = shape_rng.uniform(0.65, 1.35)
    hip = shape_rng.uniform(0.6, 1.4)
    torso = shape_rng.uniform(0.85, 1.2)
    leg = shape_rng.uniform(0.8, 1.1)
    arm_out = shape_rng.uniform(-0.12, 0.12)
    leg_out = shape_rng.uniform(-0.08, 0.1)
    for j in (2, 5):
        frac[j, 1] = 0.5 + (frac[j, 1] - 0.5) * shoulder
    for j in (8, 11):
        frac[j, 1] = 0.5 + (frac[j, 1] - 0.5) * hip
        frac[j, 0] = 0.22 + (frac[j, 0] - 0.22) * torso
    for j, s in _ARM_JOINTS.items():
        side = -1 if s == 2 else 1
        frac[j] = frac[s] + (_TEMPLATE[j] - _TEMPLATE[s]) + (0.0, side * arm_out * (1 if j in (4, 7) else 0.5))
    for j, h in _LEG_JOINTS.items():
        side = -1 if h == 8 else 1
        frac[j] = frac[h] + (_TEMPLATE[j] - _TEMPLATE[h]) * (leg, 1.0) + (0.0, side * leg_out)
    frac[:, 0] = np.clip(frac[:, 0], 0.04, 0.97)
    frac[:, 1] = np.clip(frac[:, 1], 0.04, 0.96)
    joints = frac * (rows, cols)

    upper, lower, skin = look_rng.uniform(0.05, 0.95, size=(3, 3))
    colors = np.empty((len(COCO_LIMBS), 3))
    for n, (i, j) in enumerate(COCO_LIMBS):
        base = lower if {i, j} & {8, 9, 10, 11, 12, 13} else (skin if {i, j} & {0, 14, 15, 16, 17} else upper)
        colors[n] = np.clip(base + look_rng.normal(0, 0.08, 3), 0, 1)
    return SyntheticPerson(identity, joints, colors, np.clip(upper * 0.8 + 0.1, 0, 1),
                           int(look_rng.integers(4)), max(1.6, rows / 24))


def _segment_distance(pr, pc, a, b):
    ab = b - a
    denom = max(float(ab @ ab), 1e-9)
    t = np.clip(((pr - a[0]) * ab[0] + (pc - a[1]) * ab[1]) / denom, 0.0, 1.0)
    return np.hypot(pr - (a[0] + t * ab[0]), pc - (a[1] + t * ab[1]))


def _inside_quad(pr, pc, quad):
    """Points inside a convex quadrilateral given in order."""
    sign = None
    inside = np.ones_like(pr, dtype=bool)
    for k in range(4):
        a, b = quad[k], quad[(k + 1) % 4]
        cross = (b[0] - a[0]) * (pc - a[1]) - (b[1] - a[1]) * (pr - a[0])
        if sign is None:
            sign = np.sign(np.sum(cross)) or 1.0
        inside &= cross * sign >= 0
    return inside


def _texture(kind: int, pr, pc):
    if kind == 1:
        return np.where((pr.astype(int) // 2) % 2 == 0, 1.0, 0.55)
    if kind == 2:
        return np.where((pc.astype(int) // 2) % 2 == 0, 1.0, 0.55)
    if kind == 3:
        return np.where(((pr.astype(int) // 2) + (pc.astype(int) // 2)) % 2 == 0, 1.0, 0.55)
    return np.ones_like(pr)


def render(person: SyntheticPerson, size: tuple[int, int], rng: np.random.Generator, jitter=0.0,
           translate=0.0, brightness=0.0, occlusion=0.0, bg_noise=0.1):
    """Draw one image; returns (uint8 image, joints (K, 2), occluder box or None)."""
    rows, cols = size
    pr, pc = np.meshgrid(np.arange(rows) + 0.5, np.arange(cols) + 0.5, indexing="ij")
    joints = person.joints + rng.normal(0, 1, person.joints.shape) * jitter
    joints = joints + rng.uniform(-translate, translate, 2)
    joints[:, 0] = np.clip(joints[:, 0], 0, rows - 1e-3)
    joints[:, 1] = np.clip(joints[:, 1], 0, cols - 1e-3)

    base = rng.uniform(0.3, 0.6)
    img = np.clip(base + rng.normal(0, bg_noise, (rows, cols, 3)), 0, 1)
    torso = _inside_quad(pr, pc, joints[list(_TORSO)])
    img[torso] = person.torso_color * _texture(person.torso_texture, pr[torso], pc[torso])[:, None]
    for n, (i, j) in enumerate(COCO_LIMBS):
        mask = _segment_distance(pr, pc, joints[i], joints[j]) <= person.thickness / 2
        img[mask] = person.limb_colors[n]
    head = np.hypot(pr - joints[0, 0], pc - joints[0, 1]) <= rows / 22
    img[head] = person.limb_colors[12]
    img = np.clip(img * (1 + rng.uniform(-brightness, brightness)), 0, 1)

    box = None
    if occlusion > 0 and rng.uniform() < occlusion:
        h = int(rng.integers(rows // 5, rows // 2 + 1))
        w = int(rng.integers(cols // 3, cols + 1))
        r0 = int(rng.integers(0, rows - h + 1))
        c0 = int(rng.integers(0, cols - w + 1))
        box = (r0, c0, r0 + h, c0 + w)
        img[r0:r0 + h, c0:c0 + w] = rng.uniform(0.2, 0.8, 3)
    return np.round(img * 255).astype(np.uint8), joints, box


def pose_targets(joints: np.ndarray, box, size: tuple[int, int], sigma: float = 1.0):
    """Gaussian confidence targets on the stride-32 grid and per-limb visibility targets."""
    a0, a1 = size[0] // 32, size[1] // 32
    cells = np.stack([np.clip(np.floor(joints[:, 0] / 32), 0, a0 - 1),
                      np.clip(np.floor(joints[:, 1] / 32), 0, a1 - 1)], axis=1)
    g0, g1 = np.meshgrid(np.arange(a0), np.arange(a1), indexing="ij")
    d2 = (g0[None] - cells[:, 0, None, None]) ** 2 + (g1[None] - cells[:, 1, None, None]) ** 2
    gt_S = np.exp(-d2 / (2 * sigma ** 2)).astype(np.float32)
    gt_aff = np.ones(len(COCO_LIMBS), dtype=np.float32)
    if box is not None:
        r0, c0, r1, c1 = box
        for n, (i, j) in enumerate(COCO_LIMBS):
            mid = (joints[i] + joints[j]) / 2
            if r0 <= mid[0] < r1 and c0 <= mid[1] < c1:
                gt_aff[n] = 0.0
    return gt_S, gt_aff


def split_roles(imgs_per_id: int) -> list[str]:
    """Per identity: first half train, one query, the rest gallery."""
    n_train = imgs_per_id // 2
    return ["train"] * n_train + ["query"] + ["gallery"] * (imgs_per_id - n_train - 1)


def generate_synthetic(num_ids: int, imgs_per_id: int, size: tuple[int, int] = (64, 32), seed: int = 0,
                       preset: str = "default", **overrides) -> Dataset:
    if num_ids < 2:
        raise ConfigError("num_ids", f"need at least 2 identities, got {num_ids}")
    if imgs_per_id < 3:
        # one train, one query and at least one gallery image
        raise ConfigError("imgs_per_id", f"need at least 3 images per identity, got {imgs_per_id}")
    if preset not in PRESETS:
        raise ConfigError("preset", f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    if any(s % 32 or s <= 0 for s in size):
        raise ConfigError("size", f"image size must be a positive multiple of 32, got {size}")
    params = dict(PRESETS[preset])
    unknown = set(overrides) - set(params)
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown generator option")
    params.update({k: v for k, v in overrides.items() if v is not None})
    shared = int(params.pop("shared_appearance"))

    roles = split_roles(imgs_per_id)
    buckets = {r: {"images": [], "ids": [], "cams": [], "S": [], "aff": []} for r in ROLES}
    for pid in range(num_ids):
        person = make_person(pid, seed, size, shared)
        for k in range(imgs_per_id):
            rng = np.random.default_rng([seed, pid, k, 2])
            img, joints, box = render(person, size, rng, **params)
            gt_S, gt_aff = pose_targets(joints, box, size)
            b = buckets[roles[k]]
            b["images"].append(img)
            b["ids"].append(pid)
            b["cams"].append(k % 2 + 1)
            b["S"].append(gt_S)
            b["aff"].append(gt_aff)
    splits = {}
    for role, b in buckets.items():
        splits[role] = DatasetSplit(role, np.asarray(b["ids"], dtype=np.int64), np.asarray(b["cams"], dtype=np.int64),
                                    images=np.stack(b["images"]), gt_S=np.stack(b["S"]),
                                    gt_affinity=np.stack(b["aff"]))
    info = {"num_ids": num_ids, "imgs_per_id": imgs_per_id, "size": f"{size[0]}x{size[1]}", "seed": seed,
            "preset": preset, **{k: params[k] for k in sorted(params)}, "shared_appearance": shared}
    return Dataset(splits["train"], splits["query"], splits["gallery"], info)


# -- export / import -----------------------------------------------------------------

def image_name(pid: int, cam: int, index: int) -> str:
    return f"{pid:04d}_c{cam}_{index:05d}.png"


def export_dataset(ds: Dataset, root: str | Path) -> Path:
    """One directory per split with PNGs, ``manifest.txt`` and keypoint-target arrays."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    lines = [f"{k} = {ds.info[k]}" for k in sorted(ds.info)]
    (root / "dataset.txt").write_text("\n".join(lines) + "\n")
    for split in ds.splits():
        d = root / split.role
        d.mkdir(exist_ok=True)
        names = []
        for idx, (img, pid, cam) in enumerate(zip(split.images, split.ids, split.cams)):
            name = image_name(int(pid), int(cam), idx)
            Image.fromarray(img).save(d / name, format="PNG")
            names.append(f"{name} {int(pid)} {int(cam)}")
        (d / "manifest.txt").write_text("\n".join(names) + "\n")
        if split.gt_S is not None:
            np.save(d / "targets_S.npy", split.gt_S)
            np.save(d / "targets_affinity.npy", split.gt_affinity)
    return root


def read_manifest(split_dir: Path) -> tuple[list[str], np.ndarray, np.ndarray]:
    names, ids, cams = [], [], []
    for line in (split_dir / "manifest.txt").read_text().splitlines():
        if not line.strip():
            continue
        name, pid, cam = line.split()
        names.append(name)
        ids.append(int(pid))
        cams.append(int(cam))
    return names, np.asarray(ids, dtype=np.int64), np.asarray(cams, dtype=np.int64)


def load_dataset_dir(root: str | Path, size: tuple[int, int] | None = None) -> Dataset:
    """Load an exported dataset, or fall back to the Market-1501 layout."""
    root = Path(root)
    if not root.is_dir():
        raise IngestionError(f"dataset directory {root} does not exist")
    if not (root / "train" / "manifest.txt").exists():
        ds = load_market_dir(root)
        if size is not None:
            for split in ds.splits():
                split.images = split.load_images(size)
        return ds
    info = {}
    if (root / "dataset.txt").exists():
        for line in (root / "dataset.txt").read_text().splitlines():
            if "=" in line:
                k, v = line.split("=", 1)
                info[k.strip()] = v.strip()
    splits = {}
    for role in ROLES:
        d = root / role
        if not (d / "manifest.txt").exists():
            raise IngestionError(f"missing {role}/manifest.txt in {root}")
        names, ids, cams = read_manifest(d)
        paths = [str(d / n) for n in names]
        first = read_image(paths[0], size or Image.open(paths[0]).size[::-1]) if paths else None
        shape = size or (first.shape[:2] if first is not None else (64, 32))
        images = np.stack([read_image(p, shape) for p in paths]) if paths else np.zeros((0, *shape, 3), np.uint8)
        split = DatasetSplit(role, ids, cams, images=images, paths=paths)
        if (d / "targets_S.npy").exists():
            split.gt_S = np.load(d / "targets_S.npy")
            split.gt_affinity = np.load(d / "targets_affinity.npy")
        splits[role] = split
    return Dataset(splits["train"], splits["query"], splits["gallery"], info)


def with_images(ds: Dataset, size: tuple[int, int]) -> Dataset:
    return replace(ds, **{s.role: replace(s, images=s.load_images(size)) for s in ds.splits()})
