"""Declarative architecture descriptions and the preset registry.

Loss-role convention for loss-branch-split (LBS) presets:

* ``MBR*-#B``: within each pair of same-architecture branches the first is a
  classification (CLS) branch and the second a metric (METRIC) branch.
* ``MBR*-#G``: even group indices are CLS, odd group indices are METRIC.
* ``MBR*-2x2G``: each branch holds one CLS group followed by one METRIC group.

Non-LBS twins (``R50-*``, ``Hybrid-*``, ``R50``, ``BoT``) put both losses on
every unit (role BOTH).
"""
from __future__ import annotations

import re
from dataclasses import asdict, dataclass, replace

from .layers import ATTN, CONV

R50 = "R50"
BOT = "BOT"
HYBRID = "HYBRID"  # first half of the groups convolutional, second half MHSA

CLS = "CLS"
METRIC = "METRIC"
BOTH = "BOTH"

BLOCKS = (R50, BOT, HYBRID)
ROLES = (CLS, METRIC, BOTH)

VERI776_CAMERAS = 20
VERI776_VIEWS = 8


class UnknownPresetError(KeyError):
    def __init__(self, name: str):
        super().__init__(name)
        self.name = name

    def __str__(self) -> str:
        return f"unknown preset {self.name!r}; valid presets: {', '.join(preset_names())}"


@dataclass(frozen=True)
class BranchSpec:
    block: str = R50
    groups: int = 1
    roles: tuple[str, ...] = (BOTH,)

    def __post_init__(self):
        object.__setattr__(self, "roles", tuple(self.roles))
        if self.block not in BLOCKS:
            raise ValueError(f"unknown block {self.block!r}")
        if self.groups < 1:
            raise ValueError("groups must be >= 1")
        if len(self.roles) != self.groups:
            raise ValueError(f"need one loss role per group, got {len(self.roles)} for G={self.groups}")
        for r in self.roles:
            if r not in ROLES:
                raise ValueError(f"unknown loss role {r!r}")
        if self.block == HYBRID and self.groups % 2:
            raise ValueError("HYBRID branches need an even number of groups")

    @property
    def kinds(self) -> tuple[str, ...]:
        """Spatial-mixer kind for every group."""
        if self.block == R50:
            return (CONV,) * self.groups
        if self.block == BOT:
            return (ATTN,) * self.groups
        half = self.groups // 2
        return (CONV,) * half + (ATTN,) * half

    @property
    def has_attention(self) -> bool:
        return self.block in (BOT, HYBRID)


@dataclass(frozen=True)
class ArchitectureSpec:
    name: str
    branches: tuple[BranchSpec, ...]
    embed_dim_D: int = 2048
    lai: tuple[int, int] | None = None  # (n_cam, n_view)
    stride_last_stage: int = 1
    backbone: str = "resnet50_ibn_a"
    input_size: tuple[int, int] = (256, 256)
    heads: int = 4

    def __post_init__(self):
        object.__setattr__(self, "branches", tuple(self.branches))
        object.__setattr__(self, "input_size", tuple(self.input_size))
        if self.lai is not None:
            object.__setattr__(self, "lai", tuple(int(v) for v in self.lai))
        if not self.branches:
            raise ValueError("an architecture needs at least one branch")
        if len(self.input_size) != 2 or any(v < 16 or v % 16 for v in self.input_size):
            raise ValueError(f"input size must be two multiples of 16, got {self.input_size}")
        if self.stride_last_stage != 1:
            raise ValueError("the last stage must use stride 1")
        for b in self.branches:
            if self.embed_dim_D % b.groups:
                raise ValueError(f"D={self.embed_dim_D} not divisible by G={b.groups}")
        if self.lai is not None:
            n_cam, n_view = self.lai
            if n_cam < 1 or n_view < 1:
                raise ValueError("LAI needs n_cam >= 1 and n_view >= 1")

    # -- derived shapes -------------------------------------------------
    @property
    def unit_dims(self) -> list[int]:
        return [self.embed_dim_D // b.groups for b in self.branches for _ in range(b.groups)]

    @property
    def unit_roles(self) -> list[str]:
        return [r for b in self.branches for r in b.roles]

    @property
    def n_units(self) -> int:
        return sum(b.groups for b in self.branches)

    @property
    def global_dim(self) -> int:
        return self.embed_dim_D * len(self.branches)

    @property
    def fl3_slice_dim(self) -> int:
        """Channels of the stage-3 map seen by one group (max G over branches)."""
        return 1024 // max(b.groups for b in self.branches)

    @property
    def has_attention(self) -> bool:
        return any(b.has_attention for b in self.branches)

    @property
    def is_lbs(self) -> bool:
        return BOTH not in self.unit_roles

    # -- (de)serialisation -----------------------------------------------
    def to_dict(self) -> dict:
        d = asdict(self)
        d["branches"] = [dict(block=b.block, groups=b.groups, roles=list(b.roles)) for b in self.branches]
        d["lai"] = list(self.lai) if self.lai is not None else None
        d["input_size"] = list(self.input_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureSpec":
        d = dict(d)
        d["branches"] = tuple(BranchSpec(b["block"], b["groups"], tuple(b["roles"])) for b in d["branches"])
        return cls(**d)


def _lbs_groups(groups: int) -> tuple[str, ...]:
    return tuple(CLS if g % 2 == 0 else METRIC for g in range(groups))


def _pairs(block: str, n: int) -> list[BranchSpec]:
    return [BranchSpec(block, 1, (CLS if i % 2 == 0 else METRIC,)) for i in range(n)]


def _both(block: str, groups: int = 1) -> BranchSpec:
    return BranchSpec(block, groups, (BOTH,) * groups)


_BASE_PRESETS: dict[str, tuple[BranchSpec, ...]] = {
    "R50": (_both(R50),),
    "BoT": (_both(BOT),),
    "R50-2B": (_both(R50), _both(R50)),
    "R50-4B": (_both(R50),) * 4,
    "R50-2G": (_both(R50, 2),),
    "R50-4G": (_both(R50, 4),),
    "R50-2x2G": (_both(R50, 2), _both(R50, 2)),
    "MBR_R50-2B": tuple(_pairs(R50, 2)),
    "MBR_R50-4B": tuple(_pairs(R50, 4)),
    "MBR_R50-2G": (BranchSpec(R50, 2, _lbs_groups(2)),),
    "MBR_R50-4G": (BranchSpec(R50, 4, _lbs_groups(4)),),
    "MBR_R50-2x2G": (BranchSpec(R50, 2, _lbs_groups(2)), BranchSpec(R50, 2, _lbs_groups(2))),
    "Hybrid-4G": (_both(HYBRID, 4),),
    "Hybrid-2x2G": (_both(R50, 2), _both(BOT, 2)),
    "Hybrid-4B": (_both(R50), _both(R50), _both(BOT), _both(BOT)),
    "MBR-4G": (BranchSpec(HYBRID, 4, _lbs_groups(4)),),
    "MBR-2x2G": (BranchSpec(R50, 2, _lbs_groups(2)), BranchSpec(BOT, 2, _lbs_groups(2))),
    "MBR-4B": tuple(_pairs(R50, 2) + _pairs(BOT, 2)),
}

LAI_SUFFIX = "-LAI"


def preset_names(with_lai: bool = False) -> list[str]:
    names = list(_BASE_PRESETS)
    if with_lai:
        names += [n + LAI_SUFFIX for n in _BASE_PRESETS]
    return names


def get_preset(
    name: str,
    n_cams: int | None = None,
    n_views: int | None = None,
    **overrides,
) -> ArchitectureSpec:
    """Look up a preset by name. A ``-LAI`` suffix enables side embeddings and
    then requires the camera count (views default to 1 when absent)."""
    base = name[: -len(LAI_SUFFIX)] if name.endswith(LAI_SUFFIX) else name
    if base not in _BASE_PRESETS:
        raise UnknownPresetError(name)
    lai = None
    if name.endswith(LAI_SUFFIX):
        if n_cams is None:
            raise ValueError(f"preset {name!r} needs camera metadata (n_cams) for LAI")
        lai = (n_cams, n_views or 1)
    spec = ArchitectureSpec(name=name, branches=_BASE_PRESETS[base], lai=lai)
    return replace(spec, **overrides) if overrides else spec


def lbs_twin(name: str) -> str | None:
    """Name of the non-LBS twin of an LBS preset (same branches, BOTH roles)."""
    m = re.fullmatch(r"MBR_R50-(\w+)", name)
    if m:
        return f"R50-{m.group(1)}"
    m = re.fullmatch(r"MBR-(\w+)", name)
    if m:
        return f"Hybrid-{m.group(1)}"
    return None


__all__ = [
    "ArchitectureSpec",
    "BOT",
    "BOTH",
    "BranchSpec",
    "CLS",
    "HYBRID",
    "LAI_SUFFIX",
    "METRIC",
    "R50",
    "UnknownPresetError",
    "VERI776_CAMERAS",
    "VERI776_VIEWS",
    "get_preset",
    "lbs_twin",
    "preset_names",
]
