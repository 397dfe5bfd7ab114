"""Parameter, MAC and dimension audit of the architecture presets.

Two independent counts are produced per preset: an empirical one (weight
enumeration and a forward-hook layer walk) and an analytic one computed from
the ArchitectureSpec alone. Both are compared against the expected-size table
shipped in ``expected_sizes.json``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from functools import lru_cache
from importlib import resources

import torch
import torch.nn as nn

from .model.layers import ATTN, MHSA
from .model.network import MBRModel, build_model
from .model.presets import LAI_SUFFIX, ArchitectureSpec, get_preset, lbs_twin

# layers that carry no multiply-accumulates in the audit convention
ZERO_COST = (
    nn.BatchNorm1d,
    nn.BatchNorm2d,
    nn.InstanceNorm2d,
    nn.ReLU,
    nn.MaxPool2d,
    nn.AdaptiveAvgPool2d,
    nn.Identity,
    nn.Dropout,
)


@lru_cache(maxsize=1)
def expected_table() -> dict:
    text = resources.files("mbr_reid").joinpath("expected_sizes.json").read_text()
    return json.loads(text)


def expected_row(preset: str) -> dict:
    """Expected sizes for ``preset``; LBS presets share their twin's row."""
    base = preset.removesuffix(LAI_SUFFIX)
    base = lbs_twin(base) or base
    for row in expected_table()["rows"]:
        if row["preset"] == base:
            return row
    raise KeyError(f"no expected sizes for preset {preset!r}")


def table_presets() -> list[str]:
    return [r["preset"] for r in expected_table()["rows"]]


# ---------------------------------------------------------------------------
# empirical counts


def count_params(model: MBRModel, scope: str = "audit") -> int:
    """``audit``: trunk and branch stages only; ``full``: every parameter."""
    if scope == "audit":
        return sum(p.numel() for p in model.audit_parameters())
    if scope == "full":
        return sum(p.numel() for p in model.parameters())
    raise ValueError(f"unknown scope {scope!r}; use 'audit' or 'full'")


def _conv_macs(m: nn.Conv2d, out: torch.Tensor) -> int:
    kh, kw = m.kernel_size
    return out[0].numel() * (m.in_channels // m.groups) * kh * kw


def estimate_flops(model: nn.Module, input_size=(256, 256)) -> int:
    """Multiply-accumulates of one image through the audited network.

    Convolutions and linear maps are counted from their shapes, MHSA adds its
    attention products. Norms, activations and pooling count zero. Any other
    leaf layer raises, naming the layer.
    """
    for name, m in model.named_modules():
        leaf = next(m.children(), None) is None
        if isinstance(m, (nn.ModuleList, nn.ModuleDict, nn.Sequential)):
            continue
        if leaf and not isinstance(m, (nn.Conv2d, nn.Linear) + ZERO_COST):
            raise TypeError(f"no MAC rule for layer {name or '<root>'} ({type(m).__name__})")

    total = 0

    def hook(m, inputs, out):
        nonlocal total
        if isinstance(m, nn.Conv2d):
            total += _conv_macs(m, out)
        elif isinstance(m, nn.Linear):
            total += out[0].numel() * m.in_features
        elif isinstance(m, MHSA):
            x = inputs[0]
            total += m.attention_macs(x.shape[-2] * x.shape[-1])

    handles = [
        m.register_forward_hook(hook)
        for m in model.modules()
        if isinstance(m, (nn.Conv2d, nn.Linear, MHSA))
    ]
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            x = torch.zeros(1, 3, *input_size)
            if isinstance(model, MBRModel):
                model(x, with_logits=False)
            else:
                model(x)
    finally:
        for h in handles:
            h.remove()
        model.train(was_training)
    return total


# ---------------------------------------------------------------------------
# analytic counts from the ArchitectureSpec alone

_TRUNK_LAYERS = ((64, 3, 1), (128, 4, 2), (256, 6, 2))  # planes, blocks, stride


def _bottleneck(cin: int, mid: int, cout: int, hw: int, kinds, downsample: bool, heads: int):
    """(params, macs) of one bottleneck at output resolution hw x hw."""
    g = len(kinds)
    n = hw * hw
    w = mid // g
    params = cin * mid // g + mid * cout // g + 2 * (mid + mid + cout)
    macs = n * (cin * mid // g + mid * cout // g)
    for kind in kinds:
        if kind == ATTN:
            params += 3 * (w * w + w) + w * 2 * hw
            macs += 3 * n * w * w + 3 * n * n * w
        else:
            params += 9 * w * w
            macs += 9 * n * w * w
    if downsample:
        params += cin * cout // g + 2 * cout
        macs += n * cin * cout // g
    return params, macs


def _trunk(size: int) -> tuple[int, int]:
    hw = size // 2
    params = 3 * 64 * 49 + 2 * 64
    macs = hw * hw * 3 * 64 * 49
    hw //= 2  # max pool
    cin = 64
    for planes, blocks, stride in _TRUNK_LAYERS:
        hw_out = hw // stride
        for b in range(blocks):
            p = planes
            # conv2 carries the stride, conv1 runs at the input resolution
            params += cin * p + 9 * p * p + p * 4 * p + 2 * (p + p + 4 * p)
            macs += hw * hw * cin * p if b == 0 else hw_out * hw_out * cin * p
            macs += hw_out * hw_out * (9 * p * p + p * 4 * p)
            if b == 0:
                params += cin * 4 * p + 2 * 4 * p
                macs += hw_out * hw_out * cin * 4 * p
            cin = 4 * p
        hw = hw_out
    return params, macs


def analytic_counts(spec: ArchitectureSpec) -> tuple[int, int]:
    """(audit-scope params, MACs) derived from layer shapes, no model built."""
    h, w = spec.input_size
    if h != w:
        raise ValueError("analytic counts assume square inputs")
    params, macs = _trunk(h)
    hw = h // 16
    for branch in spec.branches:
        for i in range(3):
            p, m = _bottleneck(1024 if i == 0 else 2048, 512, 2048, hw, branch.kinds, i == 0, spec.heads)
            params += p
            macs += m
    return params, macs


def lai_param_count(n_units: int, unit_dim: int, n_cam: int, n_view: int) -> int:
    return n_units * unit_dim * n_cam * n_view


# ---------------------------------------------------------------------------
# report


@dataclass
class AuditRow:
    preset: str
    measured_params: int
    analytic_params: int
    expected_params_m: float
    measured_flops: int
    analytic_flops: int
    expected_flops_g: float
    dim_fl3_slice: int
    expected_fl3_slice: int
    dim_fg: int
    expected_fg: int
    params_tol: float = 0.02
    flops_tol: float = 0.05

    @property
    def params_dev(self) -> float:
        return abs(self.measured_params / 1e6 - self.expected_params_m) / self.expected_params_m

    @property
    def flops_dev(self) -> float:
        return abs(self.measured_flops / 1e9 - self.expected_flops_g) / self.expected_flops_g

    @property
    def pass_params(self) -> bool:
        return self.params_dev <= self.params_tol

    @property
    def pass_flops(self) -> bool:
        return self.flops_dev <= self.flops_tol

    @property
    def pass_dims(self) -> bool:
        return self.dim_fl3_slice == self.expected_fl3_slice and self.dim_fg == self.expected_fg

    @property
    def analytic_agrees(self) -> bool:
        return self.analytic_params == self.measured_params and self.analytic_flops == self.measured_flops

    @property
    def passed(self) -> bool:
        return self.pass_params and self.pass_flops and self.pass_dims

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(
            params_dev=self.params_dev,
            flops_dev=self.flops_dev,
            pass_params=self.pass_params,
            pass_flops=self.pass_flops,
            pass_dims=self.pass_dims,
            analytic_agrees=self.analytic_agrees,
            passed=self.passed,
        )
        return d


@dataclass
class AuditReport:
    rows: list[AuditRow]

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.rows)

    def to_json(self) -> str:
        return json.dumps({"passed": self.passed, "rows": [r.to_dict() for r in self.rows]}, indent=2)

    def to_table(self) -> str:
        head = f"{'preset':<14}{'params(M)':>10}{'exp':>7}{'dev':>7}  {'MACs(G)':>8}{'exp':>6}{'dev':>7}  {'slice':>5}{'f_g':>6}  status"
        lines = [head, "-" * len(head)]
        for r in self.rows:
            flags = []
            if not r.pass_params:
                flags.append("params")
            if not r.pass_flops:
                flags.append("flops")
            if not r.pass_dims:
                flags.append("dims")
            status = "ok" if not flags else "FAIL " + ",".join(flags)
            lines.append(
                f"{r.preset:<14}{r.measured_params / 1e6:>10.3f}{r.expected_params_m:>7.1f}{100 * r.params_dev:>6.1f}%"
                f"  {r.measured_flops / 1e9:>8.3f}{r.expected_flops_g:>6.1f}{100 * r.flops_dev:>6.1f}%"
                f"  {r.dim_fl3_slice:>5}{r.dim_fg:>6}  {status}"
            )
        return "\n".join(lines)


def audit_model(model: MBRModel, expected: dict, label: str | None = None) -> AuditRow:
    spec = model.spec
    tol = expected_table()["tolerance"]
    a_params, a_flops = analytic_counts(spec)
    return AuditRow(
        preset=label or spec.name,
        measured_params=count_params(model, "audit"),
        analytic_params=a_params,
        expected_params_m=expected["params"],
        measured_flops=estimate_flops(model, spec.input_size),
        analytic_flops=a_flops,
        expected_flops_g=expected["flops"],
        dim_fl3_slice=spec.fl3_slice_dim,
        expected_fl3_slice=expected["dim_fl3_slice"],
        dim_fg=spec.global_dim,
        expected_fg=expected["dim_fg"],
        params_tol=tol["params"],
        flops_tol=tol["flops"],
    )


def audit_all(presets: list[str] | str = "all", backbone: str = "resnet50_ibn_a") -> AuditReport:
    """One row per preset. ``"all"`` means every row of the expected table."""
    names = table_presets() if presets == "all" else list(presets)
    rows = []
    for name in names:
        expected = expected_row(name)  # raises for presets without a row
        spec = get_preset(name.removesuffix(LAI_SUFFIX), backbone=backbone)
        model = build_model(spec, pretrained=False, seed=0)
        rows.append(audit_model(model, expected, label=name))
    return AuditReport(rows)
