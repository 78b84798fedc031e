"""Rayleigh slow-fading channel with AWGN, SNR bookkeeping, and pilot blocks.

Conventions, pinned for reproducibility:

* Symbol power is normalized to 1, so SNR_linear = 1 / sigma2 and
  sigma2 = 10^(-SNR_dB / 10).
* sigma2 is the total variance of one complex noise sample; each real
  component carries sigma2 / 2.
* One fading coefficient h per transmitted block (slow fading), drawn with
  E[|h|^2] = 1.
* All randomness flows through explicit ``torch.Generator`` objects, so a
  seed reproduces the channel trace bit-exactly on a fixed platform.
"""

import math

import torch

__all__ = [
    "seeded_generator",
    "snr_to_noise_var",
    "sample_rayleigh",
    "transmit",
    "make_pilots",
]


def seeded_generator(seed):
    """Fresh CPU generator for an independent, reproducible random stream."""
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


def snr_to_noise_var(snr_db):
    """Noise variance sigma^2 = 10^(-SNR_dB/10) under unit symbol power."""
    if torch.is_tensor(snr_db):
        return torch.pow(10.0, -snr_db / 10.0)
    return 10.0 ** (-float(snr_db) / 10.0)


def sample_rayleigh(shape=(), generator=None, dtype=torch.complex64):
    """Draw fading coefficients h = (a + jb)/sqrt(2), a,b ~ N(0,1).

    |h| is Rayleigh distributed and E[|h|^2] = 1.
    """
    if isinstance(shape, int):
        shape = (shape,)
    rdtype = torch.float64 if dtype == torch.complex128 else torch.float32
    a = torch.randn(shape, generator=generator, dtype=rdtype)
    b = torch.randn(shape, generator=generator, dtype=rdtype)
    return torch.complex(a, b) / math.sqrt(2.0)


def transmit(y, h, sigma2, generator=None):
    """Channel law y_hat = h*y + w with w ~ CN(0, sigma2) i.i.d. per symbol.

    ``h`` and ``sigma2`` broadcast against ``y``; gradients flow through
    ``y`` only (h and the noise draw are constants of the realization).
    """
    y = torch.as_tensor(y)
    if not y.is_complex():
        raise TypeError("transmit expects complex symbols")
    sigma2 = torch.as_tensor(sigma2, dtype=y.real.dtype)
    if (sigma2 < 0).any():
        raise ValueError("sigma2 must be nonnegative")
    h = torch.as_tensor(h)
    faded = h * y
    # sigma2/2 per real dimension
    std = torch.sqrt(sigma2 / 2.0)
    rdtype = y.real.dtype
    wr = torch.randn(y.shape, generator=generator, dtype=rdtype)
    wi = torch.randn(y.shape, generator=generator, dtype=rdtype)
    w = torch.complex(wr, wi) * std
    return faded + w


def make_pilots(length, seed=0, dtype=torch.complex64):
    """Deterministic unit-magnitude QPSK pilot block, |y_p,i| = 1.

    The same (length, seed) pair always yields the same block, which both
    ends of the link are assumed to know.
    """
    if length < 1:
        raise ValueError("pilot length must be >= 1")
    g = seeded_generator(seed)
    quadrant = torch.randint(0, 4, (int(length),), generator=g)
    angles = math.pi / 4.0 + quadrant.to(torch.float64) * (math.pi / 2.0)
    pilots = torch.complex(torch.cos(angles), torch.sin(angles))
    return pilots.to(dtype)
