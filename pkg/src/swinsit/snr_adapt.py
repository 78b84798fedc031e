"""SNR-aware semantic map enhancement.

Two phases, both conditioned on the SNR fed back from the receiver:

* Phase I pushes the token map through a chain of 8 dense layers acting on
  the channel dimension; after each of the first 7 layers the activations
  are gated elementwise by a (0,1) vector produced by a dedicated 3-layer
  SNR mapper. The 8th layer maps back to the input channel count and its
  output is added to the module input (residual fusion).
* Phase II is an SNR-adaptive squeeze-and-excitation: global-average-pool
  the phase-one map, concatenate the SNR, run a 2-layer excitation network,
  and rescale each channel by the resulting (0,1) factor.

The SNR enters in dB and is standardized by the training-range midpoint and
half-width before touching any dense layer.
"""

import torch
import torch.nn as nn
import torch.nn.functional as F

__all__ = ["SnrMapper", "Excitation", "SnrAwareModule", "global_pool", "rescale"]

NUM_MAPPERS = 7


def global_pool(tokens):
    """Per-channel mean over all spatial positions: [B, l, C] -> [B, C]."""
    if tokens.dim() != 3:
        raise ValueError("expected a [B, tokens, channels] map")
    return tokens.mean(dim=1)


def rescale(tokens, factors):
    """Channel-wise product: tokens [B, l, C] scaled by factors [B, C]."""
    if tokens.shape[-1] != factors.shape[-1]:
        raise ValueError(
            f"channel mismatch: map has {tokens.shape[-1]}, factors {factors.shape[-1]}"
        )
    return tokens * factors.unsqueeze(1)


class SnrMapper(nn.Module):
    """Three dense layers mapping the scalar SNR to an M-dim gate in (0,1)^M."""

    def __init__(self, out_dim):
        super().__init__()
        hidden = max(out_dim // 2, 1)
        self.fc1 = nn.Linear(1, hidden)
        self.fc2 = nn.Linear(hidden, hidden)
        self.fc3 = nn.Linear(hidden, out_dim)

    def forward(self, snr):
        v = F.relu(self.fc1(snr))
        v = F.relu(self.fc2(v))
        return torch.sigmoid(self.fc3(v))


class Excitation(nn.Module):
    """Two dense layers turning (SNR, pooled map) context into channel scales."""

    def __init__(self, channels, hidden=None):
        super().__init__()
        self.channels = channels
        hidden = hidden or max(channels // 4, 4)
        self.fc1 = nn.Linear(channels + 1, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def forward(self, context):
        if context.shape[-1] != self.channels + 1:
            raise ValueError(
                f"context length {context.shape[-1]} != channels+1 = {self.channels + 1}"
            )
        return torch.sigmoid(self.fc2(F.relu(self.fc1(context))))


class SnrAwareModule(nn.Module):
    def __init__(self, channels, inner_dim=None, snr_midpoint=7.0, snr_halfwidth=6.0):
        super().__init__()
        self.channels = channels
        m = inner_dim or channels
        self.snr_midpoint = snr_midpoint
        self.snr_halfwidth = snr_halfwidth
        self.mappers = nn.ModuleList(SnrMapper(m) for _ in range(NUM_MAPPERS))
        # 8 dense layers in total: C -> M, six M -> M, M -> C
        self.fc_in = nn.Linear(channels, m)
        self.fc_mid = nn.ModuleList(nn.Linear(m, m) for _ in range(NUM_MAPPERS - 1))
        self.fc_out = nn.Linear(m, channels)
        self.excitation = Excitation(channels)

    def _standardize(self, snr_db, batch, dtype, device):
        snr = torch.as_tensor(snr_db, dtype=dtype, device=device)
        if snr.dim() == 0:
            snr = snr.expand(batch)
        if snr.shape != (batch,):
            raise ValueError(f"snr_db must be scalar or [batch], got {tuple(snr.shape)}")
        return ((snr - self.snr_midpoint) / self.snr_halfwidth).unsqueeze(1)

    def phase_one(self, tokens, snr_db):
        """Mapper-gated dense chain, fused residually into the input map."""
        if tokens.shape[-1] != self.channels:
            raise ValueError(
                f"map has {tokens.shape[-1]} channels, module built for {self.channels}"
            )
        snr = self._standardize(snr_db, tokens.shape[0], tokens.dtype, tokens.device)
        x = self.fc_in(tokens)
        for j, mapper in enumerate(self.mappers):
            x = x * mapper(snr).unsqueeze(1)
            x = self.fc_mid[j](x) if j < len(self.fc_mid) else self.fc_out(x)
        return tokens + x

    def excite(self, context):
        return self.excitation(context)

    def forward(self, tokens, snr_db):
        enhanced = self.phase_one(tokens, snr_db)
        snr = self._standardize(snr_db, tokens.shape[0], tokens.dtype, tokens.device)
        context = torch.cat([snr, global_pool(enhanced)], dim=1)
        return rescale(enhanced, self.excite(context))
