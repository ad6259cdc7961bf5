"""Command-line entry points: generate, train, eval, retrieve, ablate.

Every command resolves its settings from defaults, then ``--config FILE``
(flat ``key = value`` text), then explicit flags and ``--set key=value``.
``run_manifest.json`` is written to the output directory before anything
else and gains artifact checksums once the command finishes.

Exit status: 0 success, 2 usage or config error, 3 data error, 4 divergence.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .config import VARIANTS, TOKEN_MODES, ArchConfig, TrainConfig, config_hash, from_flat, read_config_file, to_flat
from .core import load_checkpoint, save_checkpoint
from .data import (IMAGE_SUFFIXES, POSE_BENCHMARK, PRESETS, DatasetSplit, export_dataset, generate_synthetic,
                   load_dataset_dir, parse_market_name, read_image, read_manifest)
from .errors import ConfigError, ContractError, DivergenceError, IngestionError, NumericError, ShapeError
from .metrics import pairwise_distance
from .model import build_model
from .training import default_arch, evaluate_model, train_stagewise

log = logging.getLogger("trangcn")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4
METRICS_FIELDS = ("variant", "seed", "rank1", "rank5", "rank10", "mAP")

_ARCH_KEYS = {f.name for f in fields(ArchConfig)}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)}


class UsageError(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    config_path: str | None
    config_hash: str
    seed: int
    out_dir: str
    config: dict
    artifacts: dict[str, str] = field(default_factory=dict)

    def write(self, out_dir: Path) -> Path:
        path = out_dir / "run_manifest.json"
        path.write_text(json.dumps(asdict(self), indent=1, sort_keys=True) + "\n")
        return path


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def parse_size(text: str) -> tuple[int, int]:
    try:
        rows, cols = (int(p) for p in str(text).lower().split("x"))
    except ValueError:
        raise ConfigError("size", f"expected ROWSxCOLS, got {text!r}") from None
    return rows, cols


def _int_list(text: str, key: str) -> list[int]:
    try:
        return [int(p) for p in str(text).split(",") if p.strip()]
    except ValueError:
        raise ConfigError(key, f"expected comma-separated integers, got {text!r}") from None


def _str_list(text: str) -> list[str]:
    return [p.strip() for p in str(text).split(",") if p.strip()]


# -- settings ----------------------------------------------------------------------------

# per-command keys and their defaults; model and training keys are accepted everywhere they apply
COMMAND_KEYS = {
    "generate": {"ids": 8, "per_id": 16, "size": "64x32", "seed": 0, "preset": "default"},
    "train": {"data": None, "size": None, "seed": 0},
    "eval": {"checkpoint": None, "data": None, "distance": "euclidean", "cam_filter": True},
    "retrieve": {"checkpoint": None, "query": None, "gallery": None, "k": 5, "distance": "euclidean"},
    "ablate": {"data": None, "benchmark": "pose", "data_seed": 0, "variants": ",".join(VARIANTS),
               "token_modes": "keypoint", "seeds": "0,1,2", "size": None},
}
_USES_MODEL_KEYS = {"train", "ablate"}


def resolve_settings(command: str, args: argparse.Namespace) -> tuple[dict, str | None]:
    """Defaults < config file < flags. Returns the resolved flat mapping and the config path."""
    allowed = dict(COMMAND_KEYS[command])
    model_keys = (_ARCH_KEYS | _TRAIN_KEYS) - {"seed"} if command in _USES_MODEL_KEYS else set()
    values: dict = dict(allowed)
    file_values = read_config_file(args.config) if args.config else {}
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(item, "expected --set key=value")
        k, v = item.split("=", 1)
        overrides[k.strip().replace("-", "_")] = v.strip()
    flags = {k: v for k, v in vars(args).items() if (k in allowed or k in model_keys) and v is not None}
    for source in (file_values, overrides, flags):
        for k, v in source.items():
            if k not in allowed and k not in model_keys:
                raise ConfigError(k, f"unknown setting for '{command}'")
            values[k] = v
    if "seed" in values:
        values["seed"] = _int_list(values["seed"], "seed")[0] if isinstance(values["seed"], str) else values["seed"]
    if "cam_filter" in values and isinstance(values["cam_filter"], str):
        values["cam_filter"] = values["cam_filter"].lower() in ("1", "true", "yes", "on")
    return values, args.config


def split_model_settings(values: dict) -> tuple[dict, dict]:
    arch = {k: v for k, v in values.items() if k in _ARCH_KEYS}
    train = {k: v for k, v in values.items() if k in _TRAIN_KEYS}
    return arch, train


def _output_dir(args: argparse.Namespace, command: str) -> Path:
    if args.out:
        return Path(args.out)
    root = os.environ.get("TRANGCN_OUT")
    if root:
        return Path(root) / command
    raise UsageError("--out is required (or set TRANGCN_OUT)")


def arch_from_manifest(manifest: dict) -> ArchConfig:
    raw = manifest.get("arch") or {}
    known = {k: tuple(v) if isinstance(v, list) else v for k, v in raw.items() if k in _ARCH_KEYS}
    return from_flat(ArchConfig, known).validate()


def _load_model(checkpoint: str):
    if not checkpoint:
        raise UsageError("--checkpoint is required")
    if not Path(checkpoint).is_file():
        raise IngestionError(f"checkpoint {checkpoint} does not exist")
    _, manifest = load_checkpoint(checkpoint)
    arch = arch_from_manifest(manifest)
    expected = {k: tuple(v.shape) for k, v in build_model(arch).state_dict().items()}
    params, _ = load_checkpoint(checkpoint, expected)
    model = build_model(arch, params)
    model.eval()
    extra = manifest.get("extra") or {}
    return model, arch, extra


# -- commands ----------------------------------------------------------------------------

def cmd_generate(values: dict, out: Path) -> list[Path]:
    size = parse_size(values["size"])
    if values["preset"] not in PRESETS:
        raise ConfigError("preset", f"must be one of {{{','.join(sorted(PRESETS))}}}, got {values['preset']!r}")
    ds = generate_synthetic(int(values["ids"]), int(values["per_id"]), size, int(values["seed"]), values["preset"])
    export_dataset(ds, out)
    return sorted(p for p in out.rglob("*") if p.is_file() and p.name != "run_manifest.json")


def _load_data(values: dict, size=None):
    if not values.get("data"):
        raise UsageError("--data is required")
    return load_dataset_dir(values["data"], size)


def _train_one(values: dict, data, variant=None, tokens=None, seed=None, checkpoint_dir=None):
    arch_kw, train_kw = split_model_settings(values)
    if variant is not None:
        arch_kw["variant"] = variant
    if tokens is not None:
        arch_kw["tokens"] = tokens
    train_kw["seed"] = int(values["seed"] if seed is None else seed)
    base = default_arch(data)
    arch = from_flat(ArchConfig, {**to_flat(base), **arch_kw}).validate()
    config = from_flat(TrainConfig, train_kw).validate()
    params, tlog = train_stagewise(config, data, arch, checkpoint_dir=checkpoint_dir)
    return arch, config, params, tlog


def cmd_train(values: dict, out: Path) -> list[Path]:
    size = parse_size(values["size"]) if values.get("size") else None
    data = _load_data(values, size)
    ckpt_dir = out / "checkpoints"
    arch, config, params, tlog = _train_one(values, data, checkpoint_dir=ckpt_dir)
    ckpt = save_checkpoint(out / "model.ckpt", params, to_flat(arch), {"train": to_flat(config)})
    log_csv = tlog.to_csv(out / "train_log.csv")
    log.info("trained %s: %d parameter tensors, %d log rows", arch.variant, len(params), len(tlog.records))
    extra = sorted(ckpt_dir.glob("*.ckpt")) if ckpt_dir.exists() else []
    return [ckpt, log_csv, *extra]


def cmd_eval(values: dict, out: Path) -> list[Path]:
    model, arch, extra = _load_model(values["checkpoint"])
    data = _load_data(values, arch.image_size)
    kind = (extra.get("train") or {}).get("embedding", "final")
    report = evaluate_model(model, data, kind, values["distance"], bool(values["cam_filter"]))
    for key, val in report.as_dict().items():
        log.info("%s = %s", key, val)
    return list(report.write(out))


def _gallery_split(gallery: str, size) -> DatasetSplit:
    d = Path(gallery)
    if not d.is_dir():
        raise IngestionError(f"gallery directory {d} does not exist")
    if (d / "manifest.txt").exists():
        names, ids, cams = read_manifest(d)
        paths = [str(d / n) for n in names]
    else:
        paths, ids, cams = [], [], []
        for p in sorted(d.iterdir()):
            parsed = parse_market_name(p.name) if p.suffix.lower() in IMAGE_SUFFIXES else None
            if parsed is None:
                continue
            paths.append(str(p))
            ids.append(parsed[0])
            cams.append(parsed[1])
        ids, cams = np.asarray(ids, dtype=np.int64), np.asarray(cams, dtype=np.int64)
    if not paths:
        raise IngestionError(f"no gallery images found in {d}")
    return DatasetSplit("gallery", ids, cams, np.stack([read_image(p, size) for p in paths]), paths)


def _bordered(img: np.ndarray, color, width: int = 2) -> np.ndarray:
    out = np.empty((img.shape[0] + 2 * width, img.shape[1] + 2 * width, 3), dtype=np.uint8)
    out[:] = color
    out[width:-width, width:-width] = img
    return out


def retrieval_grid(query: np.ndarray, panels: list[np.ndarray], matches: list[bool | None],
                   gap: int = 4) -> np.ndarray:
    """Query on the left, ranked panels to the right with green (match) / red (miss) borders."""
    colors = {True: (0, 200, 0), False: (220, 0, 0), None: (128, 128, 128)}
    tiles = [_bordered(query, (255, 255, 255))] + [_bordered(p, colors[m]) for p, m in zip(panels, matches)]
    h, w = tiles[0].shape[:2]
    canvas = np.full((h, len(tiles) * w + (len(tiles) - 1) * gap + gap, 3), 255, dtype=np.uint8)
    x = 0
    for i, t in enumerate(tiles):
        canvas[:, x:x + w] = t
        x += w + (2 * gap if i == 0 else gap)
    return canvas


def cmd_retrieve(values: dict, out: Path) -> list[Path]:
    from PIL import Image

    model, arch, extra = _load_model(values["checkpoint"])
    if not values.get("query") or not values.get("gallery"):
        raise UsageError("--query and --gallery are required")
    qpath = Path(values["query"])
    if not qpath.is_file():
        raise IngestionError(f"query image {qpath} does not exist")
    k = int(values["k"])
    if k < 1:
        raise ConfigError("k", f"must be >= 1, got {k}")
    parsed = parse_market_name(qpath.name)
    q_id = parsed[0] if parsed else None
    gallery = _gallery_split(values["gallery"], arch.image_size)
    q_img = read_image(qpath, arch.image_size)

    kind = (extra.get("train") or {}).get("embedding", "final")
    dtype = next(model.parameters()).dtype
    to_t = lambda a: torch.from_numpy(np.ascontiguousarray(a.transpose(0, 3, 1, 2))).to(dtype).div_(255.0)
    # one image per forward pass so an image's embedding never depends on its batch
    q_emb = model.embed(to_t(q_img[None]), kind, batch_size=1).double().numpy()
    g_emb = model.embed(to_t(gallery.images), kind, batch_size=1).double().numpy()
    dist = pairwise_distance(q_emb, g_emb, values["distance"])[0]
    order = np.argsort(dist, kind="stable")[:k]

    lines, panels, matches = ["rank,path,distance,match"], [], []
    for r, g in enumerate(order, 1):
        match = None if q_id is None else bool(gallery.ids[g] == q_id)
        matches.append(match)
        panels.append(gallery.images[g])
        flag = "unknown" if match is None else str(match).lower()
        lines.append(f"{r},{gallery.paths[g]},{float(dist[g])!r},{flag}")
    ranking = out / "ranking.txt"
    ranking.write_text("\n".join(lines) + "\n")
    grid = out / "retrieval.png"
    Image.fromarray(retrieval_grid(q_img, panels, matches)).save(grid, format="PNG")
    return [ranking, grid]


def _ablation_rows(variants, token_modes):
    rows = []
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError("variants", f"must be drawn from {{{','.join(VARIANTS)}}}, got {v!r}")
        if v == "tran_gcn" and len(token_modes) > 1:
            rows += [(f"tran_gcn:{t}", v, t) for t in token_modes]
        else:
            rows.append((v, v, token_modes[0] if v == "tran_gcn" else None))
    return rows


def write_ablation_chart(path: Path, table: list[dict]) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    metrics = ("rank1", "rank5", "rank10", "mAP")
    x = np.arange(len(metrics))
    width = 0.8 / max(1, len(table))
    fig, ax = plt.subplots(figsize=(6, 3.5), dpi=100)
    for i, row in enumerate(table):
        ax.bar(x + i * width - 0.4 + width / 2, [100 * row[m] for m in metrics], width, label=row["variant"])
    ax.set_xticks(x, ["Rank-1", "Rank-5", "Rank-10", "mAP"])
    ax.set_ylabel("%")
    ax.set_ylim(0, 100)
    ax.legend(fontsize=8)
    fig.tight_layout()
    # fixed metadata keeps the file byte-stable between reruns
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)
    return path


def cmd_ablate(values: dict, out: Path) -> list[Path]:
    if values.get("data"):
        size = parse_size(values["size"]) if values.get("size") else None
        data = load_dataset_dir(values["data"], size)
    else:
        if values["benchmark"] != "pose":
            raise ConfigError("benchmark", f"only the 'pose' benchmark is built in, got {values['benchmark']!r}")
        data = generate_synthetic(seed=int(values["data_seed"]), **POSE_BENCHMARK)
    variants = _str_list(values["variants"])
    token_modes = _str_list(values["token_modes"])
    for t in token_modes:
        if t not in TOKEN_MODES:
            raise ConfigError("token_modes", f"must be drawn from {{{','.join(TOKEN_MODES)}}}, got {t!r}")
    seeds = _int_list(values["seeds"], "seeds")
    if not variants or not token_modes or not seeds:
        raise ConfigError("variants", "need at least one variant, token mode and seed")

    runs = []
    for label, variant, tokens in _ablation_rows(variants, token_modes):
        for seed in seeds:
            arch, config, params, _ = _train_one(values, data, variant, tokens, seed)
            model = build_model(arch, params)
            rep = evaluate_model(model, data, config.embedding).as_dict()
            log.info("%s seed %d: rank1 %.4f mAP %.4f", label, seed, rep["rank1"], rep["mAP"])
            runs.append({"variant": label, "seed": seed, **{k: rep[k] for k in METRICS_FIELDS[2:]}})

    runs_csv = out / "ablation_runs.csv"
    with open(runs_csv, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_FIELDS)
        for r in runs:
            w.writerow([r["variant"], r["seed"], *(repr(float(r[k])) for k in METRICS_FIELDS[2:])])

    table = []
    for label in dict.fromkeys(r["variant"] for r in runs):
        mine = [r for r in runs if r["variant"] == label]
        table.append({"variant": label, **{k: float(np.mean([r[k] for r in mine])) for k in METRICS_FIELDS[2:]}})
    table_csv = out / "ablation_table.csv"
    with open(table_csv, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "rank1", "rank5", "rank10", "mAP"])
        for row in table:
            w.writerow([row["variant"], *(repr(row[k]) for k in ("rank1", "rank5", "rank10", "mAP"))])

    header = f"{'Method':<18}{'Rank-1':>8}{'Rank-5':>8}{'Rank-10':>9}{'mAP':>8}"
    body = [f"{r['variant']:<18}{100 * r['rank1']:>8.1f}{100 * r['rank5']:>8.1f}{100 * r['rank10']:>9.1f}"
            f"{100 * r['mAP']:>8.1f}" for r in table]
    summary = out / "ablation_table.txt"
    summary.write_text("\n".join([f"mean over seeds {','.join(map(str, seeds))}", header, *body]) + "\n")
    chart = write_ablation_chart(out / "ablation.png", table)
    return [runs_csv, table_csv, summary, chart]


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "retrieve": cmd_retrieve,
            "ablate": cmd_ablate}


# -- argument parsing --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trangcn", description="Pose/conv/transformer re-id experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", metavar="FILE", help="flat 'key = value' settings file")
        p.add_argument("--out", metavar="DIR", help="output directory (default: $TRANGCN_OUT/<command>)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any setting; repeatable")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
        return p

    variant_kw = dict(choices=VARIANTS, metavar="{" + ",".join(VARIANTS) + "}")
    tokens_kw = dict(choices=TOKEN_MODES, metavar="{" + ",".join(TOKEN_MODES) + "}")

    p = common(sub.add_parser("generate", help="render a synthetic dataset"))
    p.add_argument("--ids", type=int)
    p.add_argument("--per-id", dest="per_id", type=int)
    p.add_argument("--size", help="ROWSxCOLS, multiples of 32")
    p.add_argument("--seed", type=int)
    p.add_argument("--preset", choices=sorted(PRESETS))

    p = common(sub.add_parser("train", help="stagewise training"))
    p.add_argument("--data", metavar="DIR")
    p.add_argument("--variant", **variant_kw)
    p.add_argument("--tokens", **tokens_kw)
    p.add_argument("--size", help="resize images to ROWSxCOLS")
    p.add_argument("--seed", type=int)

    p = common(sub.add_parser("eval", help="CMC / mAP of a checkpoint"))
    p.add_argument("--checkpoint", metavar="FILE")
    p.add_argument("--data", metavar="DIR")
    p.add_argument("--distance", choices=("euclidean", "cosine"))
    p.add_argument("--no-cam-filter", dest="cam_filter", action="store_const", const=False)

    p = common(sub.add_parser("retrieve", help="rank a gallery for one query image"))
    p.add_argument("--checkpoint", metavar="FILE")
    p.add_argument("--query", metavar="IMAGE")
    p.add_argument("--gallery", metavar="DIR")
    p.add_argument("--k", type=int)
    p.add_argument("--distance", choices=("euclidean", "cosine"))

    p = common(sub.add_parser("ablate", help="variant / token-mode sweep"))
    p.add_argument("--data", metavar="DIR", help="dataset directory (default: the built-in pose benchmark)")
    p.add_argument("--data-seed", dest="data_seed", type=int)
    p.add_argument("--variants", help="comma list from {" + ",".join(VARIANTS) + "}")
    p.add_argument("--token-modes", dest="token_modes", help="comma list from {" + ",".join(TOKEN_MODES) + "}")
    p.add_argument("--seeds", help="comma list of training seeds")
    p.add_argument("--size", help="resize images to ROWSxCOLS")
    return parser


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        values, config_path = resolve_settings(args.command, args)
        out = _output_dir(args, args.command)
        out.mkdir(parents=True, exist_ok=True)
        seed = int(values.get("seed", values.get("data_seed", 0)) or 0)
        manifest = RunManifest(args.command, config_path, config_hash(values), seed, str(out),
                               {k: values[k] for k in sorted(values)})
        manifest.write(out)
        artifacts = COMMANDS[args.command](values, out)
        manifest.artifacts = {str(Path(p).relative_to(out)): sha256_file(p) for p in sorted(artifacts)}
        manifest.write(out)
    except (UsageError, ConfigError) as exc:
        parser.print_usage(sys.stderr)
        print(f"trangcn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (IngestionError, ShapeError, ContractError, FileNotFoundError) as exc:
        print(f"trangcn: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DivergenceError, NumericError) as exc:
        print(f"trangcn: numeric divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def main(argv: list[str] | None = None) -> None:
    sys.exit(run(argv))
