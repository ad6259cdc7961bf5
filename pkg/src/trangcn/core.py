"""Parameter containers, deterministic initialization, gradient checking, checkpoints."""
from __future__ import annotations

import json
import math
import zipfile
from collections.abc import Callable, Iterator, Mapping
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError, NumericError, ShapeError

_DTYPES = {"float32": ("<f4", torch.float32), "float64": ("<f8", torch.float64)}
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


class ParamStore(Mapping):
    """Named tensors, iterated in lexicographic order.

    Stores behave as values: mutating methods return new stores, and
    ``copy`` detaches and clones every tensor.
    """

    def __init__(self, tensors: Mapping[str, torch.Tensor], seed: int = 0):
        self._tensors = {k: tensors[k] for k in sorted(tensors)}
        self.seed = seed

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def __repr__(self) -> str:
        return f"ParamStore({len(self)} tensors, seed={self.seed})"

    def copy(self) -> "ParamStore":
        return ParamStore({k: v.detach().clone() for k, v in self.items()}, self.seed)

    def replace(self, **updates: torch.Tensor) -> "ParamStore":
        merged = dict(self._tensors)
        merged.update(updates)
        return ParamStore(merged, self.seed)

    def subset(self, prefix: str) -> "ParamStore":
        return ParamStore({k: v for k, v in self.items() if k.startswith(prefix)}, self.seed)

    def to(self, dtype: torch.dtype) -> "ParamStore":
        return ParamStore({k: v.detach().to(dtype) for k, v in self.items()}, self.seed)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: tuple(v.shape) for k, v in self.items()}

    def num_elements(self) -> int:
        return sum(v.numel() for v in self.values())

    def equal(self, other: "ParamStore") -> bool:
        """Bit-exact comparison of names, shapes, dtypes and values."""
        if list(self) != list(other):
            return False
        return all(
            a.dtype == b.dtype and a.shape == b.shape and torch.equal(a, b)
            for a, b in zip(self.values(), other.values())
        )

    @classmethod
    def from_module(cls, module: torch.nn.Module, seed: int = 0) -> "ParamStore":
        return cls({k: v.detach().clone() for k, v in module.named_parameters()}, seed)

    def load_into(self, module: torch.nn.Module) -> torch.nn.Module:
        expected = dict(module.named_parameters())
        if set(expected) != set(self):
            missing = sorted(set(expected) - set(self))
            extra = sorted(set(self) - set(expected))
            raise ShapeError(f"parameter names differ: missing={missing[:5]} unexpected={extra[:5]}")
        with torch.no_grad():
            for name, p in expected.items():
                src = self[name]
                if tuple(src.shape) != tuple(p.shape):
                    raise ShapeError(f"{name}: expected shape {tuple(p.shape)}, got {tuple(src.shape)}")
                p.copy_(src)
        return module


def xavier_bound(shape: tuple[int, ...]) -> float:
    """Uniform bound sqrt(6 / (fan_in + fan_out)) for a weight of ``shape``."""
    if len(shape) == 1:
        fan_in, fan_out = 1, shape[0]
    else:
        receptive = math.prod(shape[2:]) if len(shape) > 2 else 1
        fan_out, fan_in = shape[0] * receptive, shape[1] * receptive
    return math.sqrt(6.0 / (fan_in + fan_out))


def init_tensors(shapes: Mapping[str, tuple[int, ...]], seed: int,
                 dtype: torch.dtype = torch.float32) -> dict[str, torch.Tensor]:
    """Biases zero, norm gains one, everything else Xavier-uniform.

    Draws happen in lexicographic name order from a single seeded generator,
    so identical shapes and seed give identical tensors.
    """
    if seed < 0:
        raise ConfigError("seed", f"must be >= 0, got {seed}")
    gen = torch.Generator().manual_seed(seed)
    out = {}
    for name in sorted(shapes):
        shape = tuple(shapes[name])
        if not shape or any(s <= 0 for s in shape):
            raise ConfigError(name, f"invalid shape {shape}")
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "bias":
            out[name] = torch.zeros(shape, dtype=dtype)
        elif leaf == "weight" and len(shape) == 1:
            out[name] = torch.ones(shape, dtype=dtype)
        else:
            b = xavier_bound(shape)
            out[name] = (torch.rand(shape, generator=gen, dtype=torch.float64) * 2 - 1).mul_(b).to(dtype)
    return out


def init_params(arch_config, seed: int, dtype: torch.dtype = torch.float32) -> ParamStore:
    """Deterministically initialize every parameter of the model described by ``arch_config``."""
    from .model import TranGCN

    model = TranGCN(arch_config)
    shapes = {k: tuple(v.shape) for k, v in model.named_parameters()}
    return ParamStore(init_tensors(shapes, seed, dtype), seed)


# -- gradients -----------------------------------------------------------------

LossFn = Callable[[ParamStore], "torch.Tensor | float"]


def _scalar(value) -> float:
    v = float(value.detach() if isinstance(value, torch.Tensor) else value)
    if not math.isfinite(v):
        raise NumericError(f"loss is not finite ({v})")
    return v


def finite_diff_grad(loss_fn: LossFn, params: ParamStore, eps: float = 1e-5) -> dict[str, torch.Tensor]:
    """Central-difference gradient of ``loss_fn`` w.r.t. every element of ``params``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = {k: v.detach().clone() for k, v in params.items()}
    _scalar(loss_fn(ParamStore(base, params.seed)))
    grads = {}
    with torch.no_grad():
        for name, tensor in base.items():
            g = torch.zeros_like(tensor, dtype=torch.float64)
            flat = tensor.view(-1)
            gflat = g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                f_plus = _scalar(loss_fn(ParamStore(base, params.seed)))
                flat[i] = orig - eps
                f_minus = _scalar(loss_fn(ParamStore(base, params.seed)))
                flat[i] = orig
                gflat[i] = (f_plus - f_minus) / (2 * eps)
            grads[name] = g
    return grads


def analytic_grad(loss_fn: LossFn, params: ParamStore) -> dict[str, torch.Tensor]:
    leaves = {k: v.detach().clone().requires_grad_(True) for k, v in params.items()}
    loss = loss_fn(ParamStore(leaves, params.seed))
    _scalar(loss)
    names = list(leaves)
    grads = torch.autograd.grad(loss, [leaves[n] for n in names], allow_unused=True)
    return {n: (torch.zeros_like(leaves[n]) if g is None else g.detach()) for n, g in zip(names, grads)}


@dataclass(frozen=True)
class GradCheckReport:
    path: str
    max_rel_error: float
    passed: bool


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor, floor: float = 1e-5) -> float:
    a = analytic.double()
    n = numeric.double()
    denom = torch.clamp(torch.maximum(a.abs(), n.abs()), min=floor)
    return float(((a - n).abs() / denom).max()) if a.numel() else 0.0


def grad_check(loss_fn: LossFn, params: ParamStore, eps: float = 1e-5,
               tol: float = 1e-4) -> list[GradCheckReport]:
    """Compare autograd against central differences, one report per parameter."""
    params = params.to(torch.float64)
    analytic = analytic_grad(loss_fn, params)
    numeric = finite_diff_grad(loss_fn, params, eps)
    reports = []
    for name in params:
        err = relative_error(analytic[name], numeric[name])
        reports.append(GradCheckReport(name, err, err < tol))
    return reports


# -- checkpoints -----------------------------------------------------------------

def _dtype_name(t: torch.Tensor) -> str:
    for name, (_, td) in _DTYPES.items():
        if t.dtype == td:
            return name
    raise ShapeError(f"unsupported dtype {t.dtype}")


def _write_entry(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def save_checkpoint(path: str | Path, params: ParamStore, arch: Mapping | None = None,
                    extra: Mapping | None = None) -> Path:
    """Write a single archive: ``manifest.json`` plus one raw little-endian payload per tensor."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, t in params.items():
        entries.append({"path": name, "shape": list(t.shape), "dtype": _dtype_name(t)})
    manifest = {"format": "trangcn-ckpt/1", "seed": params.seed, "params": entries,
                "arch": dict(arch) if arch else None, "extra": dict(extra) if extra else None}
    with zipfile.ZipFile(path, "w") as zf:
        _write_entry(zf, "manifest.json", json.dumps(manifest, indent=1, sort_keys=True).encode())
        for entry in entries:
            t = params[entry["path"]].detach().contiguous()
            np_dtype = _DTYPES[entry["dtype"]][0]
            _write_entry(zf, f"params/{entry['path']}.bin", t.numpy().astype(np_dtype).tobytes(order="C"))
    return path


def load_checkpoint(path: str | Path,
                    expected_shapes: Mapping[str, tuple[int, ...]] | None = None) -> tuple[ParamStore, dict]:
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        tensors = {}
        for entry in manifest["params"]:
            np_dtype, torch_dtype = _DTYPES[entry["dtype"]]
            raw = zf.read(f"params/{entry['path']}.bin")
            arr = np.frombuffer(raw, dtype=np_dtype).reshape(entry["shape"])
            tensors[entry["path"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="))).to(torch_dtype)
    store = ParamStore(tensors, manifest["seed"])
    if expected_shapes is not None:
        got = store.shapes()
        if set(got) != set(expected_shapes):
            diff = sorted(set(got) ^ set(expected_shapes))
            raise ShapeError(f"checkpoint parameters do not match the architecture: {diff[:5]}")
        for name, shape in expected_shapes.items():
            if tuple(shape) != got[name]:
                raise ShapeError(f"{name}: architecture expects {tuple(shape)}, checkpoint has {got[name]}")
    return store, manifest
