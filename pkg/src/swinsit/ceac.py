"""Channel estimation and compensation.

Pilot-based maximum-likelihood estimation of the fading coefficient,
optional refinement of batched estimates by a residual denoising CNN, and
zero-forcing equalization of the received symbols.

The denoiser sees scalar estimates arranged into square [G, G, 2] grids
(real and imaginary planes), batched across images/time; it is trained on
synthetic (true, noisy-ML) grid pairs and then frozen.
"""

import copy

import torch
import torch.nn as nn

from .channel import sample_rayleigh, seeded_generator, snr_to_noise_var, transmit, make_pilots

__all__ = [
    "ml_estimate",
    "build_estimate_grid",
    "unpack_estimate_grid",
    "DnCNN",
    "dncnn_loss",
    "equalize",
    "refine_estimates",
    "synth_estimate_pairs",
    "train_refiner",
    "estimator_mse_table",
]

DEEP_FADE_FLOOR = 1e-8


def ml_estimate(pilots, received):
    """ML channel estimate h = (y_p^H y_r) / (y_p^H y_p).

    ``pilots`` is the known [L] block; ``received`` is [..., L] and the
    estimate is computed along its last axis.
    """
    if pilots.shape[-1] != received.shape[-1]:
        raise ValueError("pilot and received lengths differ")
    energy = (pilots.conj() * pilots).sum().real
    if float(energy) <= 0:
        raise ValueError("pilot block has zero power")
    return (pilots.conj() * received).sum(dim=-1) / energy


def build_estimate_grid(estimates, grid_size):
    """Pack G^2 complex estimates row-major into a [G, G, 2] real grid."""
    estimates = torch.as_tensor(estimates)
    if estimates.numel() != grid_size * grid_size:
        raise ValueError(
            f"need {grid_size * grid_size} estimates, got {estimates.numel()}"
        )
    flat = estimates.reshape(grid_size, grid_size)
    return torch.stack([flat.real, flat.imag], dim=-1)


def unpack_estimate_grid(grid):
    """Inverse of :func:`build_estimate_grid`: [G, G, 2] -> [G^2] complex."""
    return torch.complex(grid[..., 0], grid[..., 1]).reshape(-1)


def dncnn_loss(refined, clean):
    """Half the squared Frobenius distance between two estimate grids."""
    if refined.shape != clean.shape:
        raise ValueError(
            f"shape mismatch: {tuple(refined.shape)} vs {tuple(clean.shape)}"
        )
    return 0.5 * ((refined - clean) ** 2).sum()


class DnCNN(nn.Module):
    """Residual denoiser for estimate grids.

    Three layer types: first conv+ReLU, middle conv+BatchNorm+ReLU, last
    plain conv. The network predicts the noise component, which is
    subtracted from the input; a zero final layer therefore gives an exact
    identity map.
    """

    def __init__(self, channels=2, features=32, depth=8):
        super().__init__()
        if depth < 2:
            raise ValueError("depth must be >= 2")
        layers = [nn.Conv2d(channels, features, 3, padding=1), nn.ReLU(inplace=True)]
        for _ in range(depth - 2):
            layers += [
                nn.Conv2d(features, features, 3, padding=1, bias=False),
                nn.BatchNorm2d(features),
                nn.ReLU(inplace=True),
            ]
        layers.append(nn.Conv2d(features, channels, 3, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, grids):
        # accepts [B, G, G, 2] (channels-last grids) or a single [G, G, 2]
        single = grids.dim() == 3
        if single:
            grids = grids.unsqueeze(0)
        x = grids.permute(0, 3, 1, 2)
        out = x - self.net(x)
        out = out.permute(0, 2, 3, 1)
        return out.squeeze(0) if single else out


def equalize(received, h_est):
    """Zero-forcing compensation: y_eq = conj(h)/|h|^2 * y_hat.

    Rejects estimates in a deep fade (|h| < 1e-8), where inversion would
    explode.
    """
    h_est = torch.as_tensor(h_est)
    mag2 = h_est.real**2 + h_est.imag**2
    if (mag2 < DEEP_FADE_FLOOR**2).any():
        raise ValueError("estimated |h| below the deep-fade floor 1e-8")
    return received * (h_est.conj() / mag2)


def refine_estimates(h_batch, refiner, grid_size=8):
    """Denoise a batch of scalar estimates through [G, G] grid packing.

    The batch is padded (by repeating the last estimate) up to a whole
    number of grids; only the original entries are returned.
    """
    n = h_batch.numel()
    per = grid_size * grid_size
    pad = (-n) % per
    flat = torch.cat([h_batch.reshape(-1), h_batch.reshape(-1)[-1:].expand(pad)])
    grids = torch.stack(
        [flat.real, flat.imag], dim=-1
    ).reshape(-1, grid_size, grid_size, 2)
    out = refiner(grids)
    refined = torch.complex(out[..., 0], out[..., 1]).reshape(-1)[:n]
    return refined.reshape(h_batch.shape)


def synth_estimate_pairs(num_grids, grid_size, est_noise_var, generator=None):
    """Synthetic (clean, noisy) grid pairs for refiner training.

    Each cell holds an independent h ~ CN(0, 1); the noisy grid adds the
    ML-estimation error, complex Gaussian with variance ``est_noise_var``
    (a scalar or a [num_grids] tensor, e.g. sigma^2/||y_p||^2 per grid).
    """
    g = grid_size
    h = sample_rayleigh((num_grids, g, g), generator)
    var = torch.as_tensor(est_noise_var, dtype=torch.float32).reshape(-1, 1, 1)
    err = sample_rayleigh((num_grids, g, g), generator) * torch.sqrt(var)
    noisy = h + err
    clean_grids = torch.stack([h.real, h.imag], dim=-1)
    noisy_grids = torch.stack([noisy.real, noisy.imag], dim=-1)
    return clean_grids, noisy_grids


def train_refiner(
    clean,
    noisy,
    epochs=30,
    batch_size=64,
    lr=1e-3,
    val_fraction=0.1,
    seed=0,
    patience=5,
):
    """Train a DnCNN on (clean, noisy) grids with the Frobenius loss.

    Tracks validation MSE each epoch, keeps the best state, and stops early
    once it fails to improve for ``patience`` epochs; the returned model
    never does worse than its best validation checkpoint.
    """
    torch.manual_seed(seed)
    model = DnCNN()
    n_val = max(1, int(len(clean) * val_fraction))
    val_clean, val_noisy = clean[:n_val], noisy[:n_val]
    tr_clean, tr_noisy = clean[n_val:], noisy[n_val:]
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    g = seeded_generator(seed)
    best_state, best_mse, stale = None, float("inf"), 0
    history = []
    for epoch in range(epochs):
        model.train()
        perm = torch.randperm(len(tr_clean), generator=g)
        for start in range(0, len(perm), batch_size):
            idx = perm[start : start + batch_size]
            opt.zero_grad()
            loss = dncnn_loss(model(tr_noisy[idx]), tr_clean[idx])
            loss.backward()
            opt.step()
        model.eval()
        with torch.no_grad():
            val_mse = float(((model(val_noisy) - val_clean) ** 2).mean())
        history.append(val_mse)
        if val_mse < best_mse:
            best_mse, stale = val_mse, 0
            best_state = copy.deepcopy(model.state_dict())
        else:
            stale += 1
            if stale >= patience:
                break
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return model, history


def estimator_mse_table(
    snr_grid, trials=10000, pilot_len=64, refiner=None, grid_size=8, seed=0
):
    """Monte-Carlo MSE of the ML estimator (and its refinement) per SNR.

    Returns one dict per SNR with the empirical ML MSE, the theoretical
    sigma^2/||y_p||^2, and the refined MSE when a denoiser is supplied.
    """
    pilots = make_pilots(pilot_len, seed=seed)
    rows = []
    for snr_db in snr_grid:
        g = seeded_generator(hash((seed, float(snr_db))) & 0x7FFFFFFF)
        sigma2 = snr_to_noise_var(float(snr_db))
        h = sample_rayleigh((trials,), g)
        received = transmit(pilots.unsqueeze(0).expand(trials, -1), h.unsqueeze(1), sigma2, g)
        h_ml = ml_estimate(pilots, received)
        row = {
            "snr_db": float(snr_db),
            "sigma2": sigma2,
            "mse_ml": float((h_ml - h).abs().pow(2).mean()),
            "mse_theory": sigma2 / pilot_len,
        }
        if refiner is not None:
            with torch.no_grad():
                h_dn = refine_estimates(h_ml, refiner, grid_size)
            row["mse_refined"] = float((h_dn - h).abs().pow(2).mean())
        rows.append(row)
    return rows
