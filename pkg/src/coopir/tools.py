"""Restoration tool library.

Each tool is a small parameterized classical operator written once against
the primitive surface shared by ``grad.Tape`` and ``grad.Eval``; the same
code therefore serves plan search (forward only) and co-training (taped).
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .core import load_arrays, save_arrays
from .degrade import KINDS, DegradationKind
from .grad import EVAL, Param

MAGIC_PARAMS = b"OPPAR1"
MAX_TOOL_PARAMS = 64


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    r = size // 2
    y, x = np.mgrid[-r : r + 1, -r : r + 1]
    k = np.exp(-(x * x + y * y) / (2.0 * sigma * sigma))
    return k / k.sum()


def _kernel(ops, p, shape):
    n = shape[0] * shape[1]
    return ops.reshape(ops.take(p, index=slice(0, n)), shape=shape)


def _filter_blend(shape):
    """clamp(blend(x, conv(x, k), alpha)); params = kernel then alpha."""
    n = shape[0] * shape[1]

    def apply(ops, x, p):
        y = ops.conv2d_same(x, _kernel(ops, p, shape))
        return ops.clamp01(ops.blend(x, y, ops.take(p, index=n)))

    return apply


def _unsharp(ops, x, p):
    """x + a * (x - conv(x, k)), blended with the input."""
    low = ops.conv2d_same(x, _kernel(ops, p, (5, 5)))
    sharp = ops.add(x, ops.mul(ops.take(p, index=25), ops.sub(x, low)))
    return ops.clamp01(ops.blend(x, sharp, ops.take(p, index=26)))


def _dehaze(ops, x, p):
    """Invert I = J t + A (1 - t) for a learned scalar airlight and transmission."""
    airlight = ops.take(p, index=0)
    t = ops.sigmoid(ops.take(p, index=1))
    gain = ops.div(1.0, t)
    offset = ops.scale(ops.div(ops.mul(airlight, ops.sub(1.0, t)), t), c=-1.0)
    return ops.clamp01(ops.affine(x, gain, offset))


def _lowlight(ops, x, p):
    """gain * (x + eps)^gamma with gamma = 1 / (1 + softplus(raw)) < 1."""
    gamma = ops.div(1.0, ops.add(1.0, ops.softplus(ops.take(p, index=0))))
    lifted = ops.mul(ops.take(p, index=1), ops.power_eps(x, gamma))
    return ops.clamp01(ops.blend(x, lifted, ops.take(p, index=2)))


# softplus(r) = 1 gives gamma 0.5
_GAMMA_RAW_HALF = math.log(math.e - 1.0)


@dataclass
class ToolSpec:
    name: str
    target: DegradationKind
    param: Param
    apply: Callable

    def __post_init__(self):
        if self.param.value.ndim != 1 or self.param.value.size > MAX_TOOL_PARAMS:
            raise ValueError(f"{self.name}: tools take a flat vector of <= {MAX_TOOL_PARAMS} params")


def _tool(name, target, init, apply) -> ToolSpec:
    return ToolSpec(name, DegradationKind(target), Param(name, np.asarray(init, dtype=np.float64)), apply)


def _all_tools() -> list[ToolSpec]:
    sharpen = np.array([[0.0, -0.25, 0.0], [-0.25, 2.0, -0.25], [0.0, -0.25, 0.0]])
    tools = [
        _tool(f"denoise_{lvl}", "noise", [*gaussian_kernel(5, s).ravel(), 2.0], _filter_blend((5, 5)))
        for lvl, s in (("weak", 0.8), ("mid", 1.2), ("strong", 2.0))
    ]
    tools += [
        # streaks run near-vertical, so the low-pass runs across them
        _tool("derain", "rain", [*np.full(9, 1.0 / 9.0), 1.0], _filter_blend((1, 9))),
        _tool("dehaze", "haze", [0.9, math.log(0.6 / 0.4)], _dehaze),
        _tool("defocus_deblur", "defocus_blur", [*gaussian_kernel(5, 1.5).ravel(), 1.0, 1.0], _unsharp),
        _tool("motion_deblur", "motion_blur", [*gaussian_kernel(5, 1.0).ravel(), 1.0, 1.0], _unsharp),
        _tool("dejpeg", "jpeg", [*gaussian_kernel(3, 0.8).ravel(), 1.0], _filter_blend((3, 3))),
        _tool("sr_sharpen", "low_resolution", [*sharpen.ravel(), 1.0], _filter_blend((3, 3))),
        _tool("lowlight_correct", "low_light", [_GAMMA_RAW_HALF, 1.1, 2.0], _lowlight),
    ]
    return tools


STUDY_TOOLS = ("denoise_strong", "derain", "dehaze", "defocus_deblur")


class ToolRegistry:
    """Ordered tool set; a tool's id is its index in ``tools``."""

    def __init__(self, tools: list[ToolSpec]):
        names = [t.name for t in tools]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate tool names in {names}")
        self.tools = list(tools)
        self._index = {t.name: i for i, t in enumerate(self.tools)}
        self.by_target: dict[DegradationKind, list[int]] = {}
        for i, t in enumerate(self.tools):
            self.by_target.setdefault(t.target, []).append(i)

    def __len__(self) -> int:
        return len(self.tools)

    def __getitem__(self, tool_id: int) -> ToolSpec:
        if not 0 <= tool_id < len(self.tools):
            raise KeyError(f"unknown tool id {tool_id}")
        return self.tools[tool_id]

    @property
    def names(self) -> list[str]:
        return [t.name for t in self.tools]

    def index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise KeyError(f"unknown tool {name!r}; registry has {self.names}") from None

    def params(self) -> list[Param]:
        return [t.param for t in self.tools]

    def copy(self) -> ToolRegistry:
        return copy.deepcopy(self)


def default_registry() -> ToolRegistry:
    reg = ToolRegistry(_all_tools())
    assert set(reg.by_target) == set(KINDS)
    return reg


def study_registry() -> ToolRegistry:
    """The four-tool registry of the exhaustive study (noise, rain, haze, blur)."""
    tools = {t.name: t for t in _all_tools()}
    return ToolRegistry([tools[n] for n in STUDY_TOOLS])


REGISTRIES = {"default": default_registry, "study": study_registry}


def make_registry(name: str) -> ToolRegistry:
    try:
        return REGISTRIES[name]()
    except KeyError:
        raise KeyError(f"unknown registry {name!r}; choose from {sorted(REGISTRIES)}") from None


def apply_tool(registry: ToolRegistry, tool_id: int, img: np.ndarray) -> np.ndarray:
    tool = registry[tool_id]
    return tool.apply(EVAL, img, tool.param.value)


def tape_tool(tape, registry: ToolRegistry, tool_id: int, x):
    tool = registry[tool_id]
    return tool.apply(tape, x, tape.param(tool.param))


def serialize_params(registry: ToolRegistry, path) -> None:
    save_arrays(path, MAGIC_PARAMS, {t.name: t.param.value for t in registry.tools})


def load_params(registry: ToolRegistry, path) -> ToolRegistry:
    """Load a checkpoint into ``registry`` in place (and return it)."""
    arrays = load_arrays(path, MAGIC_PARAMS)
    unknown = sorted(set(arrays) - set(registry.names))
    if unknown:
        raise KeyError(f"{path}: unknown tool names {unknown}")
    missing = [n for n in registry.names if n not in arrays]
    if missing:
        raise KeyError(f"{path}: missing tools {missing}")
    for tool in registry.tools:
        arr = arrays[tool.name]
        if arr.shape != tool.param.value.shape:
            raise ValueError(
                f"{path}: {tool.name} has {arr.size} values, expected {tool.param.value.size}"
            )
    for tool in registry.tools:
        tool.param.value = arrays[tool.name].copy()
        tool.param.zero_grad()
    return registry
