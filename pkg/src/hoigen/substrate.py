"""Numeric core shared by every model component.

Tensors are plain ``torch.Tensor`` objects (float32 for training, float64
inside gradient checks). This module adds what the rest of the package
relies on beyond raw torch:

* shape-checked, finiteness-checked wrappers for the core operations,
* deterministic, name-keyed parameter initialisation (:class:`ParameterStore`),
* a central finite-difference gradient checker (:func:`gradcheck`),
* the manifest + little-endian float32 blob checkpoint format.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an op."""


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


def _shape(x: torch.Tensor) -> tuple:
    return tuple(x.shape)


def _finite(op: str, out: torch.Tensor) -> torch.Tensor:
    if not torch.isfinite(out).all():
        raise NonFiniteError(f"{op}: produced non-finite values (shape {_shape(out)})")
    return out


def _axis(op: str, x: torch.Tensor, axis: int) -> int:
    if not -x.dim() <= axis < x.dim():
        raise ShapeError(f"{op}: axis {axis} out of range for shape {_shape(x)}")
    return axis


# ---------------------------------------------------------------------------
# core ops
# ---------------------------------------------------------------------------

def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() < 1 or b.dim() < 1 or a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise ShapeError(f"matmul: incompatible shapes {_shape(a)} and {_shape(b)}")
    try:
        out = torch.matmul(a, b)
    except RuntimeError as exc:
        raise ShapeError(f"matmul: incompatible shapes {_shape(a)} and {_shape(b)}") from exc
    return _finite("matmul", out)


def _broadcast(op: str, a: torch.Tensor, b: torch.Tensor) -> None:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError as exc:
        raise ShapeError(f"{op}: shapes {_shape(a)} and {_shape(b)} do not broadcast") from exc


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _broadcast("add", a, b)
    return _finite("add", a + b)


def mul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _broadcast("mul", a, b)
    return _finite("mul", a * b)


def concat(tensors: Sequence[torch.Tensor], axis: int = -1) -> torch.Tensor:
    if not tensors:
        raise ShapeError("concat: empty tensor list")
    ref = tensors[0]
    ax = _axis("concat", ref, axis) % ref.dim()
    for t in tensors[1:]:
        if t.dim() != ref.dim() or any(
            t.shape[d] != ref.shape[d] for d in range(ref.dim()) if d != ax
        ):
            raise ShapeError(
                f"concat: shapes {_shape(ref)} and {_shape(t)} differ off axis {axis}"
            )
    return torch.cat(list(tensors), dim=ax)


def softmax(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    return _finite("softmax", torch.softmax(x, dim=_axis("softmax", x, axis)))


def mean(x: torch.Tensor, axis: int | None = None, keepdim: bool = False) -> torch.Tensor:
    if axis is None:
        return x.mean()
    return x.mean(dim=_axis("mean", x, axis), keepdim=keepdim)


def sum(x: torch.Tensor, axis: int | None = None, keepdim: bool = False) -> torch.Tensor:  # noqa: A001
    if axis is None:
        return x.sum()
    return x.sum(dim=_axis("sum", x, axis), keepdim=keepdim)


def layer_norm(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    if weight.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise ShapeError(
            f"layer_norm: input {_shape(x)} vs weight {_shape(weight)} / bias {_shape(bias)}"
        )
    return _finite("layer_norm", F.layer_norm(x, x.shape[-1:], weight, bias, eps))


def gelu(x: torch.Tensor) -> torch.Tensor:
    return F.gelu(x)


def silu(x: torch.Tensor) -> torch.Tensor:
    return F.silu(x)


def linear(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input {_shape(x)} vs weight {_shape(weight)}")
    return _finite("linear", F.linear(x, weight, bias))


def topk(x: torch.Tensor, k: int, axis: int = -1) -> tuple[torch.Tensor, torch.Tensor]:
    """Largest ``k`` entries along ``axis``; ties resolve to the lowest index.

    The indices carry no gradient; the values are a differentiable gather.
    """
    ax = _axis("topk", x, axis)
    if not 1 <= k <= x.shape[ax]:
        raise ShapeError(f"topk: k={k} invalid for shape {_shape(x)} along axis {axis}")
    with torch.no_grad():
        # stable descending sort keeps equal elements in index order
        order = torch.sort(x.detach(), dim=ax, descending=True, stable=True).indices
        idx = order.narrow(ax, 0, k)
    return torch.gather(x, ax, idx), idx


def gather(x: torch.Tensor, indices: torch.Tensor, axis: int = -1) -> torch.Tensor:
    return torch.gather(x, _axis("gather", x, axis), indices)


def max_pool(x: torch.Tensor, axis: int) -> torch.Tensor:
    return x.max(dim=_axis("max_pool", x, axis)).values


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def _name_seed(seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


class ParameterStore:
    """Named view over a module's tensors with seeded initialisation.

    Every tensor is drawn from its own generator keyed on ``(seed, name)``,
    so initial values do not depend on construction order.

    Rules: ``nn.Linear`` weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)) with
    zero bias; ``nn.LayerNorm`` ones/zeros; ``nn.Embedding`` ~ N(0, 1);
    any other parameter with two or more dims ~ N(0, 0.02²), else zeros.
    """

    def __init__(self, module: nn.Module, seed: int):
        self.module = module
        self.seed = int(seed) & 0xFFFF_FFFF_FFFF_FFFF

    def named(self) -> dict[str, torch.Tensor]:
        return dict(self.module.state_dict())

    def __len__(self) -> int:
        return len(self.named())

    def _gen(self, name: str) -> torch.Generator:
        return torch.Generator().manual_seed(_name_seed(self.seed, name))

    @torch.no_grad()
    def initialize(self) -> "ParameterStore":
        done: set[str] = set()
        for mod_name, mod in self.module.named_modules():
            prefix = f"{mod_name}." if mod_name else ""
            if isinstance(mod, nn.Linear):
                bound = 1.0 / np.sqrt(mod.in_features)
                w = torch.rand(mod.weight.shape, generator=self._gen(prefix + "weight"), dtype=torch.float64)
                mod.weight.copy_((w * 2 - 1) * bound)
                done.add(prefix + "weight")
                if mod.bias is not None:
                    mod.bias.zero_()
                    done.add(prefix + "bias")
            elif isinstance(mod, nn.LayerNorm):
                if mod.weight is not None:
                    mod.weight.fill_(1.0)
                    mod.bias.zero_()
                    done.update({prefix + "weight", prefix + "bias"})
            elif isinstance(mod, nn.Embedding):
                w = torch.randn(mod.weight.shape, generator=self._gen(prefix + "weight"), dtype=torch.float64)
                mod.weight.copy_(w)
                done.add(prefix + "weight")
        for name, p in self.module.named_parameters():
            if name in done:
                continue
            if p.dim() >= 2:
                p.copy_(0.02 * torch.randn(p.shape, generator=self._gen(name), dtype=torch.float64))
            else:
                p.zero_()
        return self


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradcheckReport:
    max_rel_error: float
    tol: float
    n_coords: int
    analytic: np.ndarray
    numeric: np.ndarray

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} max_rel_error={self.max_rel_error:.3e} tol={self.tol:.1e} coords={self.n_coords}"


def gradcheck(
    f: Callable[[torch.Tensor], torch.Tensor],
    x: torch.Tensor,
    step: float = 1e-3,
    tol: float = 1e-4,
    coords: int | Iterable[int] | None = None,
    seed: int = 0,
) -> GradcheckReport:
    """Compare reverse-mode gradients of scalar ``f`` at ``x`` with central differences.

    ``x`` is promoted to float64; ``f`` must keep the computation in the
    dtype it receives. The error is ``max_i |a_i - n_i| / max(|a|_inf, |n|_inf)``,
    i.e. relative to the gradient's own scale, so coordinates with tiny
    gradients do not dominate through truncation error.

    ``coords`` restricts the check to a random subset (an int) or to the
    given flat indices.
    """
    x64 = x.detach().to(torch.float64).clone().requires_grad_(True)
    y = f(x64)
    if y.numel() != 1:
        raise ShapeError(f"gradcheck: f must return a scalar, got shape {_shape(y)}")
    if not torch.isfinite(y).all():
        raise NonFiniteError("gradcheck: f(x) is not finite")
    (grad,) = torch.autograd.grad(y, x64, allow_unused=True)
    if grad is None:
        grad = torch.zeros_like(x64)
    analytic = grad.detach().reshape(-1).numpy().copy()

    n = x64.numel()
    if coords is None:
        idx = np.arange(n)
    elif isinstance(coords, int):
        rng = np.random.default_rng(seed)
        idx = np.sort(rng.choice(n, size=min(coords, n), replace=False))
    else:
        idx = np.asarray(list(coords), dtype=np.int64)

    base = x64.detach().reshape(-1).clone()
    numeric = np.zeros(len(idx))
    with torch.no_grad():
        for j, i in enumerate(idx):
            vals = []
            for sign in (1.0, -1.0):
                xp = base.clone()
                xp[i] += sign * step
                v = f(xp.reshape(x64.shape))
                if not torch.isfinite(v).all():
                    raise NonFiniteError(f"gradcheck: f not finite at coordinate {int(i)}")
                vals.append(float(v))
            numeric[j] = (vals[0] - vals[1]) / (2.0 * step)

    a = analytic[idx]
    scale = max(np.abs(a).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    err = float(np.abs(a - numeric).max(initial=0.0) / scale) if scale > 0 else 0.0
    return GradcheckReport(err, tol, len(idx), a, numeric)


def param_gradcheck(
    module: nn.Module,
    loss_fn: Callable[[nn.Module], torch.Tensor],
    names: Sequence[str] | None = None,
    coords: int | None = 64,
    step: float = 1e-3,
    tol: float = 1e-4,
    seed: int = 0,
) -> GradcheckReport:
    """Gradcheck ``loss_fn(module)`` with respect to a flat vector of parameters.

    The module is evaluated in float64 via ``torch.func.functional_call``;
    the caller's module is left untouched.
    """
    import copy

    mod = copy.deepcopy(module).double()
    params = dict(mod.named_parameters())
    if names is None:
        names = [n for n, p in params.items() if p.requires_grad]
    shapes = [params[n].shape for n in names]
    sizes = [params[n].numel() for n in names]
    flat0 = torch.cat([params[n].detach().reshape(-1) for n in names])
    wrapper = _LossWrapper(mod, loss_fn)

    def f(flat: torch.Tensor) -> torch.Tensor:
        parts = torch.split(flat, sizes)
        override = {f"mod.{n}": p.reshape(s) for n, p, s in zip(names, parts, shapes)}
        return torch.func.functional_call(wrapper, override, (), strict=False)

    return gradcheck(f, flat0, step=step, tol=tol, coords=coords, seed=seed)


class _LossWrapper(nn.Module):
    def __init__(self, mod: nn.Module, loss_fn: Callable[[nn.Module], torch.Tensor]):
        super().__init__()
        self.mod = mod
        self.loss_fn = loss_fn

    def forward(self) -> torch.Tensor:
        return self.loss_fn(self.mod)


# ---------------------------------------------------------------------------
# checkpoint files
# ---------------------------------------------------------------------------

def save_tensors(prefix: str | Path, tensors: Mapping[str, torch.Tensor]) -> None:
    """Write ``<prefix>.manifest.json`` and ``<prefix>.weights.bin``.

    Values are stored as little-endian float32 in manifest order.
    """
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    chunks = []
    for name, t in tensors.items():
        arr = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    with open(f"{prefix}.weights.bin", "wb") as fh:
        for c in chunks:
            fh.write(c)
    with open(f"{prefix}.manifest.json", "w") as fh:
        json.dump({"dtype": "float32", "byteorder": "little", "tensors": entries}, fh, indent=1)


def load_tensors(prefix: str | Path) -> dict[str, torch.Tensor]:
    prefix = Path(prefix)
    manifest_path = Path(f"{prefix}.manifest.json")
    blob_path = Path(f"{prefix}.weights.bin")
    for p in (manifest_path, blob_path):
        if not p.exists():
            raise FileNotFoundError(f"checkpoint file missing: {p}")
    manifest = json.loads(manifest_path.read_text())
    blob = blob_path.read_bytes()
    out = {}
    for e in manifest["tensors"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=e["offset"]).reshape(e["shape"])
        out[e["name"]] = torch.from_numpy(arr.astype(np.float32))
    return out
