"""MBR network: shared ResNet50(-IBN) stages 1-3, one stage 4 per branch,
per-unit embeddings, optional side embeddings (LAI) and BN-neck classifiers."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import torch
import torch.nn as nn
import torchvision

from .layers import IBN, MHSA, gap, init_weights, l2_normalize, make_stage
from .presets import BOTH, CLS, ArchitectureSpec

log = logging.getLogger(__name__)

BACKBONES = ("resnet50_ibn_a", "resnet50")
SHARED_CHANNELS = 1024
MID_CHANNELS = 512


@dataclass
class EmbeddingBundle:
    """Output of one forward pass.

    ``units`` are the per-unit embeddings (after LAI, before normalisation),
    ``roles`` their loss roles, ``logits`` the classifier output for CLS/BOTH
    units (None elsewhere or when not requested) and ``global_`` the
    concatenation of the L2-normalised units.
    """

    units: list[torch.Tensor]
    roles: list[str]
    global_: torch.Tensor
    logits: list[torch.Tensor | None] = field(default_factory=list)

    def __iter__(self):
        return iter(zip(self.units, self.roles, self.logits or [None] * len(self.units)))


def assemble(units: Sequence[torch.Tensor], eps: float = 1e-12) -> torch.Tensor:
    """L2-normalise each unit and concatenate them in order."""
    if not units:
        raise ValueError("assemble needs at least one unit")
    for u in units:
        if u.shape[-1] == 0:
            raise ValueError("empty unit embedding")
    return torch.cat([l2_normalize(u, eps) for u in units], dim=-1)


class LAITable(nn.Module):
    """Zero-initialised side embeddings A[unit, :, camera, view]."""

    def __init__(self, n_units: int, unit_dim: int, n_cam: int, n_view: int):
        super().__init__()
        self.n_units, self.unit_dim, self.n_cam, self.n_view = n_units, unit_dim, n_cam, n_view
        self.A = nn.Parameter(torch.zeros(n_units, unit_dim, n_cam, n_view))

    def select(self, cam_ids: torch.Tensor, view_ids: torch.Tensor | None = None) -> torch.Tensor:
        """Side embeddings for a batch, shape (B, n_units, unit_dim)."""
        cam_ids = torch.as_tensor(cam_ids, dtype=torch.long, device=self.A.device)
        if view_ids is None:
            view_ids = torch.zeros_like(cam_ids)
        view_ids = torch.as_tensor(view_ids, dtype=torch.long, device=self.A.device)
        if cam_ids.numel() and (cam_ids.min() < 0 or cam_ids.max() >= self.n_cam):
            raise ValueError(f"camera id out of range [0, {self.n_cam})")
        if view_ids.numel() and (view_ids.min() < 0 or view_ids.max() >= self.n_view):
            raise ValueError(f"view id out of range [0, {self.n_view})")
        return self.A[:, :, cam_ids, view_ids].permute(2, 0, 1)


def apply_lai(
    units: Sequence[torch.Tensor],
    cam_ids: torch.Tensor,
    view_ids: torch.Tensor | None,
    table: LAITable,
) -> list[torch.Tensor]:
    """unit_n <- unit_n + A[n, :, cam, view] for every sample in the batch."""
    if len(units) != table.n_units:
        raise ValueError(f"LAI table has {table.n_units} units, got {len(units)}")
    side = table.select(cam_ids, view_ids)
    return [u + side[:, n, : u.shape[-1]] for n, u in enumerate(units)]


class BNNeckHead(nn.Module):
    """BatchNorm1d neck (frozen shift) followed by a bias-free classifier."""

    def __init__(self, dim: int, n_classes: int):
        super().__init__()
        self.bn = nn.BatchNorm1d(dim)
        self.bn.bias.requires_grad_(False)
        self.fc = nn.Linear(dim, n_classes, bias=False)
        nn.init.ones_(self.bn.weight)
        nn.init.zeros_(self.bn.bias)
        nn.init.normal_(self.fc.weight, std=0.001)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc(self.bn(x))


class Branch(nn.Module):
    """Private stage 4 of one branch; returns ``groups`` unit embeddings."""

    def __init__(self, kinds: Sequence[str], heads: int = 4, resolution=(16, 16)):
        super().__init__()
        self.groups = len(kinds)
        self.stage = make_stage(kinds, SHARED_CHANNELS, MID_CHANNELS, 2048, 3, resolution, heads)

    def forward(self, f_l3: torch.Tensor) -> list[torch.Tensor]:
        emb = gap(self.stage(f_l3))
        return list(emb.chunk(self.groups, dim=1))


def _resnet50(backbone: str) -> torchvision.models.ResNet:
    net = torchvision.models.resnet50(weights=None)
    if backbone == "resnet50_ibn_a":
        for layer in (net.layer1, net.layer2, net.layer3):
            for block in layer:
                block.bn1 = IBN(block.bn1.num_features)
        for m in net.modules():
            if isinstance(m, nn.InstanceNorm2d) and m.affine:
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
    elif backbone != "resnet50":
        raise ValueError(f"unknown backbone {backbone!r}; choose from {BACKBONES}")
    return net


class SharedTrunk(nn.Module):
    """ResNet50 stem plus stages 1-3, shared by every branch."""

    def __init__(self, backbone: str = "resnet50_ibn_a"):
        super().__init__()
        net = _resnet50(backbone)
        self.conv1, self.bn1, self.relu, self.maxpool = net.conv1, net.bn1, net.relu, net.maxpool
        self.layer1, self.layer2, self.layer3 = net.layer1, net.layer2, net.layer3

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.maxpool(self.relu(self.bn1(self.conv1(x))))
        return self.layer3(self.layer2(self.layer1(x)))


class MBRModel(nn.Module):
    def __init__(self, spec: ArchitectureSpec, n_classes: int = 0):
        super().__init__()
        self.spec = spec
        self.n_classes = n_classes
        h, w = spec.input_size
        resolution = (h // 16, w // 16)
        self.shared = SharedTrunk(spec.backbone)
        self.branches = nn.ModuleList(Branch(b.kinds, spec.heads, resolution) for b in spec.branches)
        self.heads = nn.ModuleList()
        self.head_index: list[int | None] = []
        for dim, role in zip(spec.unit_dims, spec.unit_roles):
            if role in (CLS, BOTH) and n_classes > 0:
                self.head_index.append(len(self.heads))
                self.heads.append(BNNeckHead(dim, n_classes))
            else:
                self.head_index.append(None)
        if spec.lai is not None:
            n_cam, n_view = spec.lai
            dims = set(spec.unit_dims)
            if len(dims) != 1:
                raise ValueError("LAI needs equal unit dims across branches")
            self.lai = LAITable(spec.n_units, dims.pop(), n_cam, n_view)
        else:
            self.lai = None

    # -- pieces -----------------------------------------------------------
    def forward_shared(self, x: torch.Tensor) -> torch.Tensor:
        """Stage-3 feature map f_L3 in NCHW layout, (B, 1024, H/16, W/16)."""
        if x.dim() != 4 or x.shape[1] != 3 or tuple(x.shape[-2:]) != tuple(self.spec.input_size):
            raise ValueError(
                f"expected images of shape (B, 3, {self.spec.input_size[0]}, {self.spec.input_size[1]}), "
                f"got {tuple(x.shape)}"
            )
        return self.shared(x)

    def branch_forward(self, f_l3: torch.Tensor, index: int) -> list[torch.Tensor]:
        return self.branches[index](f_l3)

    def stage4_parameters(self, index: int):
        return self.branches[index].parameters()

    # -- full pass --------------------------------------------------------
    def forward(
        self,
        x: torch.Tensor,
        cam_ids: torch.Tensor | None = None,
        view_ids: torch.Tensor | None = None,
        with_logits: bool | None = None,
    ) -> EmbeddingBundle:
        f_l3 = self.forward_shared(x)
        units: list[torch.Tensor] = []
        for branch in self.branches:
            units.extend(branch(f_l3))
        if self.lai is not None and cam_ids is not None:
            units = apply_lai(units, cam_ids, view_ids, self.lai)
        if with_logits is None:
            with_logits = self.training
        logits: list[torch.Tensor | None] = []
        for u, hi in zip(units, self.head_index):
            logits.append(self.heads[hi](u) if (with_logits and hi is not None) else None)
        return EmbeddingBundle(units=units, roles=list(self.spec.unit_roles), global_=assemble(units), logits=logits)

    # -- parameter groups --------------------------------------------------
    def audit_parameters(self):
        """Backbone and branch weights (no heads, no LAI table)."""
        yield from self.shared.parameters()
        yield from self.branches.parameters()

    def set_shared_trainable(self, trainable: bool) -> None:
        for p in self.shared.parameters():
            p.requires_grad_(trainable)


def build_model(
    spec: ArchitectureSpec,
    pretrained: bool | str = False,
    n_classes: int = 0,
    seed: int | None = None,
) -> MBRModel:
    """Instantiate ``spec``. ``pretrained`` may be True (torchvision ImageNet
    weights, plain ResNet50 only) or a path to a ResNet50/ResNet50-IBN-a
    state dict. MHSA layers always start from random initialisation."""
    if spec.lai is not None and (spec.lai[0] is None or spec.lai[1] is None):
        raise ValueError("LAI requested without camera/view metadata config")
    if seed is not None:
        torch.manual_seed(seed)
    model = MBRModel(spec, n_classes)
    init_weights(model.branches)
    if pretrained:
        state = _fetch_pretrained(spec.backbone, pretrained)
        load_backbone_weights(model, state)
    return model


def _fetch_pretrained(backbone: str, source: bool | str) -> dict:
    if isinstance(source, str):
        state = torch.load(source, map_location="cpu", weights_only=True)
        return state.get("state_dict", state)
    if backbone != "resnet50":
        raise ValueError(
            "ImageNet IBN-a weights are not bundled; pass a state-dict path or use backbone='resnet50'"
        )
    weights = torchvision.models.ResNet50_Weights.IMAGENET1K_V1
    return weights.get_state_dict(progress=False)


def load_backbone_weights(model: MBRModel, state: dict) -> list[str]:
    """Copy torchvision-style ResNet50 weights into the trunk and every branch.

    Grouped convolutions take the leading input-channel slice of the full
    kernel; MHSA parameters (and the norm that follows them) are left at their
    random initialisation. Returns the list of skipped target keys.
    """
    state = {k.removeprefix("module."): v for k, v in state.items()}
    skipped = []
    trunk = model.shared.state_dict()
    for key in trunk:
        if key in state and state[key].shape == trunk[key].shape:
            trunk[key] = state[key]
        else:
            skipped.append(f"shared.{key}")
    model.shared.load_state_dict(trunk)

    for bi, branch in enumerate(model.branches):
        target = branch.stage.state_dict()
        for key in target:
            src_key = "layer4." + _branch_to_resnet_key(key)
            attn_block = _inside_attention(branch.stage, key) or _follows_attention(branch.stage, key)
            if src_key not in state or attn_block:
                skipped.append(f"branches.{bi}.stage.{key}")
                continue
            target[key] = _fit(state[src_key], target[key])
        branch.stage.load_state_dict(target)
    if skipped:
        log.info("pretrained load skipped %d tensors", len(skipped))
    return skipped


def _branch_to_resnet_key(key: str) -> str:
    # "0.conv2.conv.weight" -> "0.conv2.weight"; per-group parts map to the full kernel
    parts = key.split(".")
    if len(parts) > 2 and parts[1] == "conv2":
        return ".".join([parts[0], "conv2", parts[-1]])
    return key


def _inside_attention(root: nn.Module, key: str) -> bool:
    mod = root
    for p in key.split(".")[:-1]:
        mod = mod[int(p)] if p.isdigit() else getattr(mod, p)
        if isinstance(mod, MHSA):
            return True
    return False


def _follows_attention(stage: nn.Module, key: str) -> bool:
    parts = key.split(".")
    if parts[1] != "bn2":
        return False
    mixer = stage[int(parts[0])].conv2
    return mixer.parts is not None and any(isinstance(p, MHSA) for p in mixer.parts)


def _fit(src: torch.Tensor, dst: torch.Tensor) -> torch.Tensor:
    if src.shape == dst.shape:
        return src.clone()
    if src.dim() == 4:
        return src[: dst.shape[0], : dst.shape[1]].clone()
    return src[: dst.shape[0]].clone()


__all__ = [
    "BNNeckHead",
    "Branch",
    "EmbeddingBundle",
    "LAITable",
    "MBRModel",
    "SharedTrunk",
    "apply_lai",
    "assemble",
    "build_model",
    "load_backbone_weights",
]
