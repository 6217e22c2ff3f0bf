"""Codec configuration: channel grouping, quality-level schedule, widths."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

NUM_SCALES = 3  # three downsampling blocks, three synthesis stages


@dataclass(frozen=True)
class ChannelGroupConfig:
    """Partition of each layer's latent channels into bitstream groups.

    Groups across layers form one flat level order: decoding level L keeps the
    first L groups, base layer first, then enhancement layers in order.
    """

    groups: tuple = ((4, 4), (2, 2, 4), (8,))

    def __post_init__(self) -> None:
        if len(self.groups) != NUM_SCALES:
            raise ValueError(f"need {NUM_SCALES} layers of groups, got {len(self.groups)}")
        for layer in self.groups:
            if not layer:
                raise ValueError("every layer needs at least one group")
            for g in layer:
                if not 1 <= g <= 255:
                    raise ValueError(f"group size {g} outside [1, 255]")

    @property
    def n_levels(self) -> int:
        return sum(len(layer) for layer in self.groups)

    def layer_channels(self, layer: int) -> int:
        return sum(self.groups[layer])

    def flat_sizes(self) -> list:
        return [g for layer in self.groups for g in layer]

    def level_map(self) -> list:
        """(layer, channel_start, channel_stop) for each level, in level order."""
        out = []
        for li, layer in enumerate(self.groups):
            edge = 0
            for g in layer:
                out.append((li, edge, edge + g))
                edge += g
        return out

    def groups_in_layer_at(self, level: int, layer: int) -> int:
        """How many of `layer`'s groups are included when decoding `level` levels."""
        before = sum(len(l) for l in self.groups[:layer])
        return max(0, min(level - before, len(self.groups[layer])))

    def channels_at(self, level: int, layer: int) -> int:
        """Decoded channel count of `layer` at a decode level."""
        k = self.groups_in_layer_at(level, layer)
        return sum(self.groups[layer][:k])

    @classmethod
    def parse(cls, text: str) -> "ChannelGroupConfig":
        """Parse '4,4/2,2,4/8' into ((4,4),(2,2,4),(8,))."""
        try:
            layers = tuple(tuple(int(tok) for tok in part.split(",")) for part in text.split("/"))
        except ValueError:
            raise ValueError(f"cannot parse group spec {text!r}") from None
        return cls(layers)

    def format(self) -> str:
        return "/".join(",".join(str(g) for g in layer) for layer in self.groups)


def default_lambdas(n_levels: int, lo: float = 0.5, hi: float = 10.0) -> tuple:
    """Geometric ramp of the distortion weight across decode levels."""
    if n_levels == 1:
        return (hi,)
    return tuple(lo * (hi / lo) ** (i / (n_levels - 1)) for i in range(n_levels))


@dataclass(frozen=True)
class ModelConfig:
    """Widths and grouping of the three-scale codec."""

    enc_channels: tuple = (16, 32, 32)
    dec_channels: tuple = (32, 16, 16)
    latent_channels: tuple = (8, 8, 8)
    groups: ChannelGroupConfig = field(default_factory=ChannelGroupConfig)
    lambdas: Optional[tuple] = None

    def __post_init__(self) -> None:
        for name in ("enc_channels", "dec_channels", "latent_channels"):
            if len(getattr(self, name)) != NUM_SCALES:
                raise ValueError(f"{name} must list {NUM_SCALES} widths")
        for layer in range(NUM_SCALES):
            want = self.latent_channels[layer]
            got = self.groups.layer_channels(layer)
            if want != got:
                raise ValueError(
                    f"layer {layer} groups sum to {got} channels, expected {want}")
        if self.lambdas is not None and len(self.lambdas) != self.groups.n_levels:
            raise ValueError("need one lambda per decode level")

    @property
    def n_levels(self) -> int:
        return self.groups.n_levels

    def lambda_at(self, level: int) -> float:
        lams = self.lambdas or default_lambdas(self.n_levels)
        return lams[level - 1]

    def to_dict(self) -> dict:
        return {
            "enc_channels": list(self.enc_channels),
            "dec_channels": list(self.dec_channels),
            "latent_channels": list(self.latent_channels),
            "groups": self.groups.format(),
            "lambdas": list(self.lambdas) if self.lambdas is not None else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            enc_channels=tuple(d["enc_channels"]),
            dec_channels=tuple(d["dec_channels"]),
            latent_channels=tuple(d["latent_channels"]),
            groups=ChannelGroupConfig.parse(d["groups"]),
            lambdas=tuple(d["lambdas"]) if d.get("lambdas") else None,
        )
