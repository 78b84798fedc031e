"""Result export: stable-schema CSV files and the figure-style line plots.

CSV is the contract (header row, comma-delimited, UTF-8, '.' decimal);
plots are conveniences rendered from the same rows.
"""

import csv
import os
from dataclasses import asdict

from .training import ResultRow

__all__ = ["CSV_FIELDS", "write_csv", "read_csv", "plot_rows", "export_report"]

CSV_FIELDS = [
    "snr_db",
    "rate",
    "psnr_db",
    "ms_ssim",
    "ms_ssim_db",
    "mse",
    "variant",
    "seed",
    "sparsity",
    "bits",
]


def _row_dict(row):
    d = asdict(row) if isinstance(row, ResultRow) else dict(row)
    return {k: ("" if d.get(k) is None else d.get(k)) for k in CSV_FIELDS}


def write_csv(rows, path):
    rows = list(rows)
    if not rows:
        raise ValueError("refusing to write an empty result set")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow(_row_dict(row))
    return path


def read_csv(path):
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            rows.append(
                ResultRow(
                    snr_db=float(rec["snr_db"]),
                    rate=float(rec["rate"]),
                    psnr_db=float(rec["psnr_db"]),
                    ms_ssim=float(rec["ms_ssim"]),
                    ms_ssim_db=float(rec["ms_ssim_db"]),
                    mse=float(rec["mse"]),
                    variant=rec["variant"],
                    seed=int(rec["seed"]),
                    sparsity=float(rec["sparsity"]) if rec["sparsity"] else None,
                    bits=int(rec["bits"]) if rec["bits"] else None,
                )
            )
    return rows


def _mean_curves(rows, metric, x_field="snr_db"):
    curves = {}
    for row in rows:
        d = asdict(row)
        key = d["variant"]
        if d.get("sparsity") is not None:
            key = f"{key} s={d['sparsity']}" + (
                f" int{d['bits']}" if d.get("bits") else ""
            )
        curves.setdefault(key, {}).setdefault(d[x_field], []).append(d[metric])
    out = {}
    for key, by_x in curves.items():
        xs = sorted(by_x)
        out[key] = (xs, [sum(by_x[x]) / len(by_x[x]) for x in xs])
    return out


def plot_rows(rows, path, metric="psnr_db", x_field="snr_db", x_label="SNR (dB)"):
    """One line per variant, averaged over seeds, saved as a raster image."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = list(rows)
    if not rows:
        raise ValueError("no rows to plot")
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, (xs, ys) in sorted(_mean_curves(rows, metric, x_field).items()):
        ax.plot(xs, ys, marker="o", label=label)
    ax.set_xlabel(x_label)
    ax.set_ylabel({"psnr_db": "PSNR (dB)", "ms_ssim_db": "MS-SSIM (dB)"}.get(metric, metric))
    ax.grid(True, alpha=0.4)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def export_report(rows, out_dir, name, metrics=("psnr_db", "ms_ssim_db"), x_field="snr_db", x_label="SNR (dB)"):
    """Write <name>.csv plus one plot per metric into ``out_dir``."""
    rows = list(rows)
    if not rows:
        raise ValueError("refusing to export an empty result set")
    os.makedirs(out_dir, exist_ok=True)
    paths = [write_csv(rows, os.path.join(out_dir, f"{name}.csv"))]
    for metric in metrics:
        paths.append(
            plot_rows(
                rows,
                os.path.join(out_dir, f"{name}_{metric}.png"),
                metric=metric,
                x_field=x_field,
                x_label=x_label,
            )
        )
    return paths
