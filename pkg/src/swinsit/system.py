"""End-to-end transmission system: encoder, channel, receiver chain, decoder.

Variants:

* ``full``        : SNR-aware modules on both sides, pilot-based ML channel
                    estimation (optionally DnCNN-refined) and zero-forcing
                    equalization at the receiver.
* ``no_ceac``     : SNR-aware modules kept, estimation/equalization dropped;
                    the decoder sees the raw faded, noisy symbols.
* ``snr_unaware`` : neither SNR-aware modules nor estimation/equalization.

During training, gradients flow through the channel into the encoder; the
fading coefficient, noise draws, and the (frozen) estimate refiner are
treated as constants of the realization.
"""

import torch
import torch.nn as nn

from .channel import sample_rayleigh, snr_to_noise_var, transmit, make_pilots
from .ceac import ml_estimate, refine_estimates, equalize
from .codec import StageConfig, SwinEncoder, SwinDecoder
from .snr_adapt import SnrAwareModule

__all__ = ["SwinSIT", "VARIANTS"]

VARIANTS = ("full", "no_ceac", "snr_unaware")


class SwinSIT(nn.Module):
    def __init__(
        self,
        cfg: StageConfig,
        image_size=(32, 32),
        variant="full",
        refiner=None,
        pilot_len=64,
        pilot_seed=0,
        snr_midpoint=7.0,
        snr_halfwidth=6.0,
        estimate_grid=8,
    ):
        super().__init__()
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}, expected one of {VARIANTS}")
        self.cfg = cfg
        self.image_size = tuple(image_size)
        self.variant = variant
        self.pilot_len = pilot_len
        self.estimate_grid = estimate_grid
        snr_aware = variant != "snr_unaware"

        def make_snr_module():
            if not snr_aware:
                return None
            return SnrAwareModule(
                cfg.channels[-1], snr_midpoint=snr_midpoint, snr_halfwidth=snr_halfwidth
            )

        self.encoder = SwinEncoder(cfg, make_snr_module())
        self.decoder = SwinDecoder(cfg, make_snr_module())
        self.use_equalization = variant == "full"
        self.refiner = None
        if self.use_equalization and refiner is not None:
            self.attach_refiner(refiner)
        self.register_buffer(
            "pilots", make_pilots(pilot_len, seed=pilot_seed), persistent=False
        )

    def attach_refiner(self, refiner):
        """Attach a trained estimate denoiser; it stays frozen from here on."""
        self.refiner = refiner
        for p in self.refiner.parameters():
            p.requires_grad_(False)
        self.refiner.eval()

    def train(self, mode=True):
        # the refiner is trained separately and stays frozen (eval-mode
        # batch norm) even while the codec trains
        super().train(mode)
        if self.refiner is not None:
            self.refiner.eval()
        return self

    @property
    def num_symbols(self):
        return self.cfg.num_symbols(self.image_size)

    def estimate_channel(self, h, sigma2, generator=None):
        """Pilot pass over the same realization, ML estimate, optional refine."""
        pilots = self.pilots.to(h.dtype)
        received = transmit(
            pilots.unsqueeze(0).expand(h.shape[0], -1),
            h.unsqueeze(1),
            sigma2.unsqueeze(1),
            generator,
        )
        h_est = ml_estimate(pilots, received)
        if self.refiner is not None:
            with torch.no_grad():
                h_est = refine_estimates(h_est, self.refiner, self.estimate_grid)
        return h_est.detach()

    def forward(self, images, snr_db, generator=None, h=None, sigma2=None):
        """Full round trip; returns (reconstruction, info dict).

        ``h`` / ``sigma2`` override the per-item fading draw and noise
        variance (e.g. sigma2=0 for a noiseless sanity run); by default the
        fading coefficient is drawn per batch item and sigma2 follows the
        per-item SNR.
        """
        batch = images.shape[0]
        rdtype = images.dtype
        cdtype = torch.complex128 if rdtype == torch.float64 else torch.complex64
        snr = torch.as_tensor(snr_db, dtype=rdtype)
        if snr.dim() == 0:
            snr = snr.expand(batch)

        symbols = self.encoder(images, snr)

        if h is None:
            h = sample_rayleigh((batch,), generator, dtype=cdtype)
        else:
            h = torch.as_tensor(h, dtype=cdtype)
            if h.dim() == 0:
                h = h.expand(batch)
        if sigma2 is None:
            sigma2 = snr_to_noise_var(snr)
        else:
            sigma2 = torch.as_tensor(sigma2, dtype=rdtype)
            if sigma2.dim() == 0:
                sigma2 = sigma2.expand(batch)

        received = transmit(symbols, h.unsqueeze(1), sigma2.unsqueeze(1), generator)

        info = {"h": h.detach(), "sigma2": sigma2.detach()}
        if self.use_equalization:
            h_est = self.estimate_channel(h, sigma2, generator)
            received = equalize(received, h_est.unsqueeze(1))
            info["h_est"] = h_est

        recon = self.decoder(received, snr, self.image_size)
        return recon, info
