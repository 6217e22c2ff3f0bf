"""Parameter container for the scalable codec network.

The network is a three-scale sparse autoencoder.  The analysis side
downsamples the occupancy grid three times and projects the coarsest features
to a small base latent; the two intermediate encoder feature maps feed the
enhancement latents.  The synthesis side upsamples three times; each stage
predicts per-voxel occupancy and keeps the top-K candidates.  Enhancement
latents are mixed back in between stages through linear fusion layers.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .config import ModelConfig
from .entropy import FactorizedDensity
from .sparse import KernelWeights


class CodecModel:
    """Holds every learned parameter; the pipelines live in `codec`."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        e0, e1, e2 = config.enc_channels
        d2, d1, d0 = config.dec_channels
        m0, m1, m2 = config.latent_channels

        def k(name, c_in, c_out):
            return KernelWeights(name, c_in, c_out, rng=rng)

        self.kernels = {}
        for kw in (
            # analysis: stride 1 conv then stride-2 downsample, three times
            k("enc0a", 1, e0), k("enc0b", e0, e0),
            k("enc1a", e0, e1), k("enc1b", e1, e1),
            k("enc2a", e1, e2), k("enc2b", e2, e2),
            k("enc_proj", e2, m0),          # base latent head (linear)
            # synthesis stage at the coarsest scale
            k("up2", m0, d2), k("dec2", d2, d2), k("cls2", d2, 1),
            # enhancement layer 1: align encoder features to kept voxels, mix
            k("align1", e1, e1), k("mix1", e1 + d2, m1), k("fuse1", d2 + m1, d2),
            # middle synthesis stage
            k("up1", d2, d1), k("dec1", d1, d1), k("cls1", d1, 1),
            # enhancement layer 2
            k("align2", e0, e0), k("mix2", e0 + d1, m2), k("fuse2", d1 + m2, d1),
            # finest synthesis stage
            k("up0", d1, d0), k("dec0", d0, d0), k("cls0", d0, 1),
        ):
            self.kernels[kw.name] = kw

        # The latent half of each fusion kernel starts at zero so that, at
        # initialization, decoding an enhancement layer reproduces the coarser
        # reconstruction exactly; the residual branch only moves off zero when
        # training finds it useful.  This keeps early-training quality from
        # regressing as more of the bitstream is consumed.
        self.kernels["fuse1"].weight.data[:, d2:, :] = 0.0
        self.kernels["fuse2"].weight.data[:, d1:, :] = 0.0

        self.densities = [
            FactorizedDensity(f"density{i}", config.latent_channels[i])
            for i in range(3)
        ]

    def params(self) -> list:
        out = []
        for kw in self.kernels.values():
            out.extend(kw.params())
        for den in self.densities:
            out.extend(den.params())
        return out

    def num_params(self) -> int:
        return sum(p.data.size for p in self.params())

    def all_finite(self) -> bool:
        return all(np.isfinite(p.data).all() for p in self.params())

    def snap_float32(self) -> "CodecModel":
        """Copy with every parameter rounded to its float32 representation.

        Encoding and decoding run on snapped parameters so that a freshly
        trained model and the same model reloaded from a checkpoint produce
        byte-identical bitstreams.
        """
        other = self.copy()
        for p in other.params():
            p.data[...] = p.data.astype(np.float32).astype(np.float64)
        return other

    def copy(self) -> "CodecModel":
        other = CodecModel(self.config)
        mine = {p.name: p for p in self.params()}
        for p in other.params():
            p.data = mine[p.name].data.copy()
        return other

    def param_hash(self) -> bytes:
        """8-byte digest of the float32 parameter values, in registry order."""
        h = hashlib.sha256()
        for p in self.params():
            h.update(p.name.encode())
            h.update(np.asarray(p.data.shape, dtype="<i8").tobytes())
            h.update(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
        return h.digest()[:8]


def tiny_config() -> ModelConfig:
    """A minimal-width configuration used by gradient checks and fast tests."""
    from .config import ChannelGroupConfig

    return ModelConfig(
        enc_channels=(2, 2, 2),
        dec_channels=(2, 2, 2),
        latent_channels=(2, 2, 2),
        groups=ChannelGroupConfig(((1, 1), (2,), (2,))),
    )
