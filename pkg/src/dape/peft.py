"""Adjustable norm-tuning and the depth-wise visual adapter.

Stage I swaps every normalization site of the U-Net blocks for an
:class:`AdjustableNorm`, which adds a learnable residual ``gamma0 * z`` to the
usual affine-normalized output. Stage II inserts a :class:`VisualAdapter`
right after the cross-attention of the selected blocks. Both are exact
identities when freshly injected (``gamma0 = 0``, ``W_up = 0``).
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import ChannelNorm, list_attention_blocks
from .errors import ShapeError, StateError, ValidationError

STAGES = ("stage1", "stage2", "one_stage")

# (sub-module, attribute) of every normalization site inside a U-Net block
NORM_SITES = (
    ("resnet", "norm1"),
    ("resnet", "norm2"),
    ("self_attn", "norm"),
    ("cross_attn", "norm"),
    ("temporal_attn", "norm"),
)

ACTIVATIONS = {"gelu": F.gelu, "silu": F.silu, "relu": F.relu}


class AdjustableNorm(ChannelNorm):
    """gamma * Norm(z) + beta + gamma0 * z."""

    def __init__(self, channels, kind="group", groups=8, eps=1e-5, per_channel=False):
        super().__init__(channels, kind, groups, eps)
        self.gamma0 = nn.Parameter(torch.zeros(channels if per_channel else ()))

    @classmethod
    def from_norm(cls, norm, per_channel=False):
        new = cls(norm.channels, norm.kind, norm.groups, norm.eps, per_channel)
        new = new.to(dtype=norm.gamma.dtype, device=norm.gamma.device)
        with torch.no_grad():
            new.gamma.copy_(norm.gamma)
            new.beta.copy_(norm.beta)
            new.gamma0.zero_()
        return new

    def forward(self, z):
        g0 = self.gamma0
        if g0.ndim:
            g0 = g0.view(1, -1, *([1] * (z.ndim - 2)))
        return self.normalize(z, self.gamma, self.beta) + g0 * z


def adjustable_norm_forward(state, z):
    if z.shape[1] != state.channels:
        raise ShapeError(f"norm site has {state.channels} channels, input has {z.shape[1]}")
    return state(z)


class VisualAdapter(nn.Module):
    """Bottleneck adapter with a residual depth-wise 5x5 convolution.

    z_norm = w0 * LN(z0)
    z_down = W_down z_norm
    f      = z_down + dwconv5x5(z_down)
    z      = z0 + W_up act(f)

    Projections act per pixel (1x1 convolutions). ``W_up`` starts at zero.
    """

    def __init__(self, channels, ratio=4, kernel_size=5, activation="gelu", eps=1e-5):
        super().__init__()
        if ratio <= 0:
            raise ValidationError("bottleneck ratio must be a positive integer")
        if activation not in ACTIVATIONS:
            raise ValidationError(f"unknown activation {activation!r}")
        hidden = max(1, channels // ratio)
        self.channels = channels
        self.hidden = hidden
        self.activation = activation
        self.ln = ChannelNorm(channels, "layer", eps=eps)
        self.w0 = nn.Parameter(torch.ones(()))
        self.down = nn.Conv2d(channels, hidden, 1)
        self.dw = nn.Conv2d(hidden, hidden, kernel_size, padding=kernel_size // 2, groups=hidden, bias=False)
        self.up = nn.Conv2d(hidden, channels, 1)
        nn.init.zeros_(self.up.weight)
        nn.init.zeros_(self.up.bias)

    def pre_activation(self, z0):
        z_down = self.down(self.w0 * self.ln(z0))
        return z_down + self.dw(z_down)

    def forward(self, z0):
        if z0.shape[1] != self.channels:
            raise ShapeError(f"adapter expects {self.channels} channels, got {z0.shape[1]}")
        return z0 + self.up(ACTIVATIONS[self.activation](self.pre_activation(z0)))


def adapter_forward(state, z0):
    return state(z0)


@dataclass(frozen=True)
class PlacementSpec:
    indices: frozenset = frozenset({5})

    def __post_init__(self):
        idx = frozenset(int(i) for i in self.indices)
        bad = sorted(i for i in idx if not 1 <= i <= 7)
        if bad:
            raise ValidationError(f"placement indices must lie in 1..7, got {bad}")
        object.__setattr__(self, "indices", idx)

    @classmethod
    def parse(cls, text):
        """Parse ``"5"``, ``"1-7"``, ``"1,2,6,7"`` or ``"3-5"`` (empty string -> no adapters)."""
        idx = set()
        for part in filter(None, (p.strip() for p in str(text).split(","))):
            try:
                if "-" in part:
                    lo, hi = (int(x) for x in part.split("-", 1))
                    idx.update(range(lo, hi + 1))
                else:
                    idx.add(int(part))
            except ValueError:
                raise ValidationError(f"bad placement token {part!r}") from None
        return cls(frozenset(idx))

    @property
    def label(self):
        return ",".join(str(i) for i in sorted(self.indices)) or "none"


# --------------------------------------------------------------------------
# injection
# --------------------------------------------------------------------------

def norm_sites(model):
    """Named normalization sites of the seven blocks, in traversal order."""
    sites = []
    for handle in list_attention_blocks(model):
        for sub, attr in NORM_SITES:
            sites.append((f"{handle.name}.{sub}.{attr}", getattr(getattr(handle.block, sub), attr)))
    return sites


def inject_norm_tuning(model, per_channel=False):
    if getattr(model, "norm_injected", False):
        raise StateError("norm tuning already injected")
    replaced = 0
    for handle in list_attention_blocks(model):
        for sub, attr in NORM_SITES:
            parent = getattr(handle.block, sub)
            setattr(parent, attr, AdjustableNorm.from_norm(getattr(parent, attr), per_channel))
            replaced += 1
    model.norm_injected = True
    model.norm_site_count = replaced
    return model


def inject_adapters(model, placement=None, ratio=4, activation="gelu", seed=None):
    placement = placement if placement is not None else PlacementSpec()
    if not isinstance(placement, PlacementSpec):
        placement = PlacementSpec(frozenset(placement))
    if getattr(model, "adapters_injected", False):
        raise StateError("adapters already injected")
    seed = model.config.seed if seed is None else seed
    param = next(model.parameters())
    for handle in list_attention_blocks(model):
        if handle.index not in placement.indices:
            continue
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed * 1000 + 100 + handle.index)
            adapter = VisualAdapter(handle.block.cross_attn.norm.channels, ratio, activation=activation)
        handle.block.adapter = adapter.to(dtype=param.dtype, device=param.device)
    model.adapters_injected = True
    model.placement = placement
    return model


def adapters(model):
    return [(h.index, h.block.adapter) for h in list_attention_blocks(model) if h.block.adapter is not None]


def _norm_parameters(model):
    out = {}
    for name, site in norm_sites(model):
        if isinstance(site, AdjustableNorm):
            for pname, p in site.named_parameters():
                out[f"{name}.{pname}"] = p
    return out


def _adapter_parameters(model):
    out = {}
    for handle in list_attention_blocks(model):
        if handle.block.adapter is not None:
            for pname, p in handle.block.adapter.named_parameters():
                out[f"{handle.name}.adapter.{pname}"] = p
    return out


def trainable_parameters(model, stage):
    """Named parameters optimized in ``stage`` (stage1, stage2 or one_stage)."""
    if stage not in STAGES:
        raise ValidationError(f"stage must be one of {STAGES}, got {stage!r}")
    params = {}
    if stage in ("stage1", "one_stage"):
        if not getattr(model, "norm_injected", False):
            raise StateError(f"{stage} needs norm tuning injected first")
        params.update(_norm_parameters(model))
    if stage in ("stage2", "one_stage"):
        if not getattr(model, "adapters_injected", False):
            raise StateError(f"{stage} needs adapters injected first")
        params.update(_adapter_parameters(model))
    return params


def freeze_for_stage(model, stage):
    params = trainable_parameters(model, stage)
    keep = {id(p) for p in params.values()}
    for p in model.parameters():
        p.requires_grad_(id(p) in keep)
    return params


def backbone_parameters(model):
    peft = {id(p) for p in _norm_parameters(model).values()}
    peft |= {id(p) for p in _adapter_parameters(model).values()}
    return {n: p for n, p in model.named_parameters() if id(p) not in peft}


def tensor_hash(named):
    """SHA-256 over names, dtypes, shapes and raw bytes, in sorted name order."""
    h = hashlib.sha256()
    for name in sorted(named):
        t = named[name].detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


# --------------------------------------------------------------------------
# checkpoint
# --------------------------------------------------------------------------

CHECKPOINT_FORMAT = "dape-peft/1"


def peft_state_refs(model):
    named = {}
    if getattr(model, "norm_injected", False):
        named.update(_norm_parameters(model))
    named.update(_adapter_parameters(model))
    return named


def peft_state(model):
    return {k: v.detach().cpu().clone() for k, v in sorted(peft_state_refs(model).items())}


def save_peft_checkpoint(model, path, config_hash=""):
    """Write only the PEFT tensors; backbone weights are never stored."""
    placement = getattr(model, "placement", None)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "tensors": peft_state(model),
        "placement": sorted(placement.indices) if placement else [],
        "norm_injected": bool(getattr(model, "norm_injected", False)),
        "backbone": model.config.to_dict(),
        "config_hash": config_hash,
    }
    torch.save(payload, path)
    return payload


def load_peft_checkpoint(model, path, per_channel=False, ratio=4, activation="gelu"):
    """Inject whatever the checkpoint needs into a freshly built model and load its tensors."""
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValidationError(f"{path}: not a PEFT checkpoint")
    if payload.get("backbone") != model.config.to_dict():
        raise ValidationError(f"{path}: checkpoint was trained on a different backbone config")
    tensors = payload["tensors"]
    if payload["norm_injected"] and not getattr(model, "norm_injected", False):
        per_channel = any(k.endswith("gamma0") and v.ndim == 1 for k, v in tensors.items()) or per_channel
        inject_norm_tuning(model, per_channel=per_channel)
    if not getattr(model, "adapters_injected", False):
        inject_adapters(model, PlacementSpec(frozenset(payload["placement"])), ratio, activation)
    target = peft_state_refs(model)
    missing = set(target) ^ set(tensors)
    if missing:
        raise ValidationError(f"{path}: checkpoint/model mismatch on {sorted(missing)[:5]}")
    with torch.no_grad():
        for name, t in tensors.items():
            target[name].copy_(t)
    return payload

