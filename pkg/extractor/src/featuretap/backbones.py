"""Backbone registry and forward-hook plumbing.

Each supported backbone exposes three semantic levels (C2, C3, C4) whose
feature maps sit at 1/4, 1/8, and 1/16 of the input resolution. Where an
architecture produces several maps at one level (EfficientNet-B5's two
stride-16 stages), each is emitted as its own scale and downstream
assembly concatenates them.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import torch
from torch import nn
from torchvision import models as tv_models

from .errors import BackboneError


@dataclass(frozen=True)
class TapPoint:
    level: str  # C2 | C3 | C4
    module: str  # dotted path inside the model
    ratio: int  # input size / feature size
    channels: int


@dataclass(frozen=True)
class BackboneSpec:
    name: str
    builder: str  # torchvision constructor name
    taps: tuple[TapPoint, ...]


# vgg19 tap indices are the last ReLU before each pooling stage at the
# matching resolution (features.17/26/35 for 1/4, 1/8, 1/16).
BACKBONES: dict[str, BackboneSpec] = {
    "resnet18": BackboneSpec(
        name="resnet18",
        builder="resnet18",
        taps=(
            TapPoint("C2", "layer1", 4, 64),
            TapPoint("C3", "layer2", 8, 128),
            TapPoint("C4", "layer3", 16, 256),
        ),
    ),
    "wide_resnet50_2": BackboneSpec(
        name="wide_resnet50_2",
        builder="wide_resnet50_2",
        taps=(
            TapPoint("C2", "layer1", 4, 256),
            TapPoint("C3", "layer2", 8, 512),
            TapPoint("C4", "layer3", 16, 1024),
        ),
    ),
    "vgg19": BackboneSpec(
        name="vgg19",
        builder="vgg19",
        taps=(
            TapPoint("C2", "features.17", 4, 256),
            TapPoint("C3", "features.26", 8, 512),
            TapPoint("C4", "features.35", 16, 512),
        ),
    ),
    "efficientnet_b5": BackboneSpec(
        name="efficientnet_b5",
        builder="efficientnet_b5",
        taps=(
            TapPoint("C2", "features.2", 4, 40),
            TapPoint("C3", "features.3", 8, 64),
            TapPoint("C4", "features.4", 16, 128),
            TapPoint("C4", "features.5", 16, 176),
        ),
    ),
}


def backbone_spec(name: str) -> BackboneSpec:
    try:
        return BACKBONES[name]
    except KeyError:
        raise BackboneError(
            f"unknown backbone {name!r}; supported: {', '.join(sorted(BACKBONES))}"
        ) from None


def build_backbone(name: str, pretrained: bool, device: str = "cpu") -> nn.Module:
    """Construct the frozen torchvision model for a registry entry."""
    spec = backbone_spec(name)
    builder = getattr(tv_models, spec.builder)
    weights = "DEFAULT" if pretrained else None
    model = builder(weights=weights)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model.to(device)


def weight_fingerprint(model: nn.Module) -> str:
    """SHA-256 over the state dict in name order; pins weight provenance."""
    digest = hashlib.sha256()
    state = model.state_dict()
    for key in sorted(state):
        digest.update(key.encode("utf-8"))
        tensor = state[key].detach().cpu().contiguous()
        digest.update(str(tuple(tensor.shape)).encode("ascii"))
        digest.update(tensor.numpy().tobytes())
    return digest.hexdigest()


class FeatureTapper:
    """Registers forward hooks on a backbone's tap points once, then yields
    the tapped activations for each batch in registry order."""

    def __init__(self, model: nn.Module, spec: BackboneSpec):
        self.model = model
        self.spec = spec
        self._captured: dict[str, torch.Tensor] = {}
        modules = dict(model.named_modules())
        for tap in spec.taps:
            if tap.module not in modules:
                raise BackboneError(
                    f"{spec.name}: tap module {tap.module!r} not found in model"
                )
            modules[tap.module].register_forward_hook(self._capture(tap.module))

    def _capture(self, name: str):
        def hook(_module, _inputs, output):
            self._captured[name] = output

        return hook

    def __call__(self, batch: torch.Tensor) -> list[torch.Tensor]:
        """Run one batch; returns one (N, C, h, w) tensor per tap point."""
        if batch.ndim != 4:
            raise BackboneError(f"expected a (N, 3, H, W) batch, got {tuple(batch.shape)}")
        size = batch.shape[-2:]
        self._captured.clear()
        with torch.no_grad():
            self.model(batch)
        outputs = []
        for tap in self.spec.taps:
            got = self._captured.get(tap.module)
            if got is None:
                raise BackboneError(f"{self.spec.name}: tap {tap.module!r} never fired")
            want = (size[0] // tap.ratio, size[1] // tap.ratio)
            if tuple(got.shape[-2:]) != want or got.shape[1] != tap.channels:
                raise BackboneError(
                    f"{self.spec.name}: tap {tap.module!r} produced "
                    f"{tuple(got.shape[1:])}, expected ({tap.channels}, {want[0]}, {want[1]})"
                )
            outputs.append(got)
        return outputs
