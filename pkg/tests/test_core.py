import math

import pytest
import torch

from trangcn.config import ArchConfig
from trangcn.core import (ParamStore, finite_diff_grad, grad_check, init_params, init_tensors, load_checkpoint,
                          relative_error, save_checkpoint, xavier_bound)
from trangcn.errors import ConfigError, NumericError, ShapeError


def test_init_is_deterministic():
    a = init_params(ArchConfig(), seed=7)
    b = init_params(ArchConfig(), seed=7)
    assert a.equal(b)
    assert not a.equal(init_params(ArchConfig(), seed=8))


def test_names_are_lexicographic():
    store = init_params(ArchConfig(variant="gcm"), seed=0)
    assert list(store) == sorted(store)


def test_zero_dim_layer_is_rejected():
    with pytest.raises(ConfigError) as exc:
        init_params(ArchConfig(d_res=0), seed=0)
    assert exc.value.key == "d_res"
    with pytest.raises(ConfigError):
        init_tensors({"fc.weight": (4, 0)}, seed=0)


def test_biases_zero_and_weights_bounded():
    store = init_params(ArchConfig(), seed=3)
    for name, t in store.items():
        if name.endswith(".bias"):
            assert torch.count_nonzero(t) == 0, name
        elif name.endswith(".weight") and t.dim() == 1:
            assert torch.all(t == 1), name
        else:
            assert t.abs().max() <= xavier_bound(tuple(t.shape)) + 1e-7, name


def test_xavier_bound_conv_fans():
    # 3x3 conv 4 -> 8: fan_in 36, fan_out 72
    assert xavier_bound((8, 4, 3, 3)) == pytest.approx(math.sqrt(6 / 108))


def test_finite_diff_square():
    params = ParamStore({"x": torch.tensor([3.0, -1.0], dtype=torch.float64)})
    g = finite_diff_grad(lambda p: (p["x"] ** 2).sum(), params, eps=1e-5)
    assert torch.allclose(g["x"], torch.tensor([6.0, -2.0], dtype=torch.float64), atol=1e-8, rtol=0)


def test_finite_diff_constant_loss():
    params = ParamStore({"a": torch.randn(3, dtype=torch.float64), "b": torch.randn(2, 2, dtype=torch.float64)})
    g = finite_diff_grad(lambda p: torch.tensor(4.0, dtype=torch.float64), params)
    assert all(torch.count_nonzero(v) == 0 for v in g.values())


def test_finite_diff_nan_raises():
    params = ParamStore({"x": torch.ones(2, dtype=torch.float64)})
    with pytest.raises(NumericError):
        finite_diff_grad(lambda p: p["x"].sum() * float("nan"), params)


def test_grad_check_reports_each_parameter():
    params = ParamStore({"w": torch.randn(3, 2, dtype=torch.float64), "v": torch.randn(2, dtype=torch.float64)})
    reports = grad_check(lambda p: torch.tanh(p["w"] @ p["v"]).pow(2).sum(), params)
    assert [r.path for r in reports] == ["v", "w"]
    assert all(r.passed and r.max_rel_error < 1e-4 for r in reports)


def test_grad_check_flags_wrong_gradient():
    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            return x.pow(2).sum()

        @staticmethod
        def backward(ctx, g):
            return g * torch.ones(3, dtype=torch.float64)

    params = ParamStore({"x": torch.tensor([1.0, 2.0, 3.0], dtype=torch.float64)})
    (report,) = grad_check(lambda p: Wrong.apply(p["x"]), params)
    assert not report.passed


def test_relative_error_floor():
    assert relative_error(torch.tensor([0.0]), torch.tensor([1e-7])) == pytest.approx(1e-2)


@pytest.mark.parametrize("dtype", [torch.float32, torch.float64])
def test_checkpoint_round_trip(tmp_path, dtype):
    store = init_params(ArchConfig(), seed=5, dtype=dtype)
    path = save_checkpoint(tmp_path / "m.ckpt", store, {"variant": "tran_gcn"})
    loaded, manifest = load_checkpoint(path, store.shapes())
    assert loaded.equal(store)
    assert loaded.seed == 5
    assert manifest["arch"]["variant"] == "tran_gcn"


def test_checkpoint_bytes_are_stable(tmp_path):
    store = init_params(ArchConfig(variant="baseline"), seed=1)
    a = save_checkpoint(tmp_path / "a.ckpt", store).read_bytes()
    b = save_checkpoint(tmp_path / "b.ckpt", store).read_bytes()
    assert a == b


def test_checkpoint_shape_mismatch(tmp_path):
    store = init_params(ArchConfig(variant="baseline"), seed=1)
    path = save_checkpoint(tmp_path / "m.ckpt", store)
    shapes = dict(store.shapes())
    name = next(iter(shapes))
    shapes[name] = (1,)
    with pytest.raises(ShapeError):
        load_checkpoint(path, shapes)


def test_store_is_a_value():
    store = ParamStore({"b": torch.zeros(2), "a": torch.ones(1)}, seed=2)
    assert list(store) == ["a", "b"]
    copy = store.copy()
    copy["a"].add_(1)
    assert store["a"].item() == 1.0
    assert store.replace(a=torch.zeros(1))["a"].item() == 0.0
    assert store.num_elements() == 3
