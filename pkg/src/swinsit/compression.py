"""Joint pruning and quantization of trained models.

Three steps, applied to the dense (``nn.Linear``) layers that dominate the
parameter count: magnitude pruning against a sparsity-derived threshold
(plus fine-tuning), per-tensor affine integer quantization of the remaining
weights, and EMA-calibrated clamped quantization of layer activations,
followed by straight-through-estimator fine-tuning. Quantization is
simulated numerically (fake-quant semantics): integer payloads are exact,
arithmetic stays float.

Biases and normalization parameters are never pruned or quantized.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

__all__ = [
    "prune_accounting",
    "threshold_from_sparsity",
    "prune_weights",
    "quantize_weights",
    "dequantize_weights",
    "ActivationRangeState",
    "update_activation_range",
    "quantize_activations",
    "clamp",
    "QuantizedLinear",
    "wrap_linears",
    "calibrate",
    "compress",
    "CompressedModel",
    "extract_compressed",
    "apply_compressed",
    "report_model_stats",
    "save_compressed",
    "load_compressed",
]


# ---------------------------------------------------------------------------
# pruning


def prune_accounting(total, sparsity):
    """Pruned/remaining connection counts for a sparsity ratio.

    The pruned count is round(total * s); together with the remainder it
    always partitions the total.
    """
    if not (0.0 <= sparsity < 1.0):
        raise ValueError("sparsity must lie in [0, 1)")
    if total < 1:
        raise ValueError("need at least one connection")
    pruned = int(round(total * float(sparsity)))
    return pruned, total - pruned


def _flatten_magnitudes(weights):
    if torch.is_tensor(weights):
        weights = [weights]
    mags = [w.detach().abs().reshape(-1) for w in weights]
    if not mags or sum(m.numel() for m in mags) == 0:
        raise ValueError("no weights to prune")
    return torch.cat(mags)


def threshold_from_sparsity(weights, sparsity):
    """Magnitude threshold gamma pruning a ``sparsity`` fraction of connections.

    gamma is the k-th smallest |w| (k = round(s * N)), so pruning everything
    with |w| <= gamma removes exactly k connections when magnitudes are
    distinct. s = 0 yields gamma = 0: only exact zeros fall.
    """
    mags = _flatten_magnitudes(weights)
    k, _ = prune_accounting(mags.numel(), sparsity)
    if k == 0:
        return 0.0
    return float(torch.kthvalue(mags, k).values)


def prune_weights(weights, gamma):
    """Zero all entries with |w| <= gamma; returns (pruned, keep_mask)."""
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    mask = weights.abs() > gamma
    return weights * mask, mask


# ---------------------------------------------------------------------------
# weight quantization


@dataclass
class WeightQuant:
    """Per-tensor affine integer code: w ~= q / alpha + w_min.

    ``alpha`` is None for a degenerate constant tensor, which is stored as
    offset only.
    """

    codes: torch.Tensor
    alpha: float
    w_min: float
    bits: int

    def dequantize(self):
        return dequantize_weights(self)


def _int_dtype(bits):
    if bits <= 8:
        return torch.uint8
    if bits <= 16:
        return torch.int32  # uint16 is not a torch dtype; int32 holds it
    return torch.int64


def quantize_weights(weights, bits):
    """Affine map of the tensor's dynamic range onto [0, 2^bits - 1]."""
    if bits < 2:
        raise ValueError("need at least 2 bits")
    w = weights.detach()
    w_min = float(w.min())
    w_max = float(w.max())
    levels = (1 << bits) - 1
    if w_max == w_min:
        codes = torch.zeros_like(w, dtype=_int_dtype(bits))
        return WeightQuant(codes=codes, alpha=None, w_min=w_min, bits=bits)
    alpha = levels / (w_max - w_min)
    codes = torch.round(alpha * (w - w_min)).clamp(0, levels)
    return WeightQuant(codes=codes.to(_int_dtype(bits)), alpha=alpha, w_min=w_min, bits=bits)


def dequantize_weights(q: WeightQuant):
    if q.alpha is None:
        return torch.full_like(q.codes, q.w_min, dtype=torch.float32)
    return q.codes.to(torch.float32) / q.alpha + q.w_min


# ---------------------------------------------------------------------------
# activation quantization


@dataclass
class ActivationRangeState:
    """EMA-smoothed activation extremes for one layer.

    The first observed batch initializes the extremes directly; afterwards
    a_min <- (1-beta)*a_min + beta*min(batch) and likewise for a_max.
    """

    a_min: float = None
    a_max: float = None

    @property
    def calibrated(self):
        return self.a_min is not None and self.a_max > self.a_min

    def alpha(self, bits):
        if not self.calibrated:
            raise ValueError("activation range has not been calibrated")
        return ((1 << bits) - 1) / (self.a_max - self.a_min)


def update_activation_range(state, batch, beta):
    """One EMA step of the activation range on a batch of activations."""
    if not (0.0 <= beta <= 1.0):
        raise ValueError("beta must lie in [0, 1]")
    batch = torch.as_tensor(batch)
    if batch.numel() == 0:
        raise ValueError("empty activation batch")
    lo = float(batch.min())
    hi = float(batch.max())
    if state.a_min is None:
        state.a_min, state.a_max = lo, hi
    else:
        state.a_min = (1.0 - beta) * state.a_min + beta * lo
        state.a_max = (1.0 - beta) * state.a_max + beta * hi
    return state


def clamp(x, lo, hi):
    """Elementwise min(max(x, lo), hi); tolerates +-inf sentinels."""
    if torch.is_tensor(x):
        return torch.minimum(
            torch.maximum(x, torch.as_tensor(lo, dtype=x.dtype)),
            torch.as_tensor(hi, dtype=x.dtype),
        )
    return min(max(x, lo), hi)


def quantize_activations(acts, state, bits):
    """Clamped affine activation codes in [0, T], T = 2^bits - 1.

    The affine map sends a_min to 0 and a_max to T; outliers beyond the
    calibrated range saturate at the clamp bounds.
    """
    if not state.calibrated:
        raise ValueError("activation range has not been calibrated")
    levels = (1 << bits) - 1
    alpha = state.alpha(bits)
    codes = torch.round(alpha * (torch.as_tensor(acts) - state.a_min))
    return clamp(codes, 0, levels).to(torch.int32)


# ---------------------------------------------------------------------------
# straight-through fake quantization


class _FakeQuantSTE(torch.autograd.Function):
    """Quantize-dequantize with identity gradient inside the clamp region."""

    @staticmethod
    def forward(ctx, x, alpha, offset, levels):
        codes = torch.round(alpha * (x - offset))
        inside = (codes >= 0) & (codes <= levels)
        ctx.save_for_backward(inside)
        codes = codes.clamp(0, levels)
        return codes / alpha + offset

    @staticmethod
    def backward(ctx, grad):
        (inside,) = ctx.saved_tensors
        return grad * inside, None, None, None


def fake_quantize(x, alpha, offset, bits):
    return _FakeQuantSTE.apply(x, alpha, offset, (1 << bits) - 1)


class QuantizedLinear(nn.Module):
    """Linear layer with a pruning mask and simulated integer arithmetic.

    Stages are enabled progressively: mask only (after pruning), plus
    weight fake-quant (after step 2), plus activation fake-quant on the
    layer output (after calibration). ``calibrating`` mode records output
    extremes instead of quantizing them.
    """

    def __init__(self, linear: nn.Linear):
        super().__init__()
        self.in_features = linear.in_features
        self.out_features = linear.out_features
        self.weight = linear.weight
        self.bias = linear.bias
        self.register_buffer("mask", torch.ones_like(linear.weight, dtype=torch.bool))
        self.bits = None
        self.w_alpha = None
        self.w_min = None
        self.act_state = ActivationRangeState()
        self.act_enabled = False
        self.calibrating = False
        self.calib_beta = 0.9
        self._calib_started = False

    def set_mask(self, mask):
        self.mask.copy_(mask)

    def apply_mask_(self):
        """Force masked weight entries to exactly zero, in place."""
        with torch.no_grad():
            self.weight.mul_(self.mask)

    def enable_weight_quant(self, bits):
        kept = self.weight.detach()[self.mask]
        self.bits = bits
        if kept.numel() == 0:
            # fully pruned layer: offset-only degenerate code
            self.w_alpha = None
            self.w_min = 0.0
            return
        w_min = float(kept.min())
        w_max = float(kept.max())
        if w_max == w_min:
            self.w_alpha = None
            self.w_min = w_min
        else:
            self.w_alpha = ((1 << bits) - 1) / (w_max - w_min)
            self.w_min = w_min

    def effective_weight(self):
        w = self.weight
        if self.bits is not None and self.w_alpha is not None:
            w = fake_quantize(w, self.w_alpha, self.w_min, self.bits)
        return w * self.mask

    def forward(self, x):
        y = F.linear(x, self.effective_weight(), self.bias)
        if self.calibrating:
            with torch.no_grad():
                beta = self.calib_beta if self._calib_started else 1.0
                update_activation_range(self.act_state, y.detach(), beta)
                self._calib_started = True
        elif self.act_enabled and self.act_state.calibrated:
            alpha = self.act_state.alpha(self.bits)
            y = fake_quantize(y, alpha, self.act_state.a_min, self.bits)
        return y


def wrap_linears(model):
    """Swap every nn.Linear for a QuantizedLinear; returns {name: module}."""
    wrapped = {}
    for name, module in list(model.named_modules()):
        for child_name, child in list(module.named_children()):
            if isinstance(child, nn.Linear) and not isinstance(child, QuantizedLinear):
                q = QuantizedLinear(child)
                setattr(module, child_name, q)
                full = f"{name}.{child_name}" if name else child_name
                wrapped[full] = q
    return wrapped


def _quantized_layers(model):
    return {n: m for n, m in model.named_modules() if isinstance(m, QuantizedLinear)}


def calibrate(model, calib_batches, beta=0.9, forward=None):
    """Refresh per-layer activation ranges over the calibration batches.

    ``forward`` runs the model on one batch (defaults to ``model(batch)``);
    layer ranges initialize to the first batch's extremes and then track
    later batches by EMA. Returns {layer_name: ActivationRangeState}.
    """
    layers = _quantized_layers(model)
    if not layers:
        raise ValueError("model has no QuantizedLinear layers to calibrate")
    batches = list(calib_batches)
    if not batches:
        raise ValueError("calibration data is empty")
    for layer in layers.values():
        layer.calibrating = True
        layer.calib_beta = beta
        layer._calib_started = False
        layer.act_state = ActivationRangeState()
    was_training = model.training
    model.eval()
    with torch.no_grad():
        for batch in batches:
            if forward is None:
                model(batch)
            else:
                forward(model, batch)
    for layer in layers.values():
        layer.calibrating = False
    if was_training:
        model.train()
    return {name: layer.act_state for name, layer in layers.items()}


# ---------------------------------------------------------------------------
# whole-model compression


@dataclass
class CompressedModel:
    """Integer weight payloads plus everything needed to rebuild the model."""

    sparsity: float
    bits: int
    quants: dict = field(default_factory=dict)  # name -> WeightQuant
    masks: dict = field(default_factory=dict)  # name -> bool tensor
    act_ranges: dict = field(default_factory=dict)  # name -> (a_min, a_max)
    extra_state: dict = field(default_factory=dict)  # non-dense params, fp32
    stats: dict = field(default_factory=dict)


def compress(
    model,
    sparsity,
    bits,
    calib_batches,
    forward=None,
    finetune=None,
    ste_finetune=None,
    beta=0.9,
):
    """Run the three-step pruning/quantization pipeline on ``model`` in place.

    Step 1 prunes dense weights at the sparsity-derived threshold and calls
    ``finetune(model)`` if given (masks stay enforced). Step 2 quantizes the
    remaining weights per tensor. Step 3 calibrates activation ranges on
    ``calib_batches`` and enables activation quantization, after which
    ``ste_finetune(model)`` may adapt weights through the straight-through
    estimator. Returns the extracted :class:`CompressedModel`.
    """
    wrap_linears(model)
    layers = _quantized_layers(model)
    if not layers:
        raise ValueError("model has no dense layers to compress")

    # step 1: prune
    gamma = threshold_from_sparsity([m.weight for m in layers.values()], sparsity)
    for layer in layers.values():
        _, mask = prune_weights(layer.weight.detach(), gamma)
        layer.set_mask(mask)
        layer.apply_mask_()
    if finetune is not None:
        finetune(model)
        for layer in layers.values():
            layer.apply_mask_()

    # step 2: quantize remaining weights
    for layer in layers.values():
        layer.enable_weight_quant(bits)

    # step 3: calibrate, then quantize activations
    calibrate(model, calib_batches, beta=beta, forward=forward)
    for layer in layers.values():
        layer.act_enabled = True
    if ste_finetune is not None:
        ste_finetune(model)
        for layer in layers.values():
            layer.apply_mask_()

    return extract_compressed(model, sparsity, bits)


def extract_compressed(model, sparsity, bits):
    """Snapshot a wrapped model into integer payloads + metadata."""
    layers = _quantized_layers(model)
    cm = CompressedModel(sparsity=sparsity, bits=bits)
    quantized_names = set()
    for name, layer in layers.items():
        q = quantize_weights_masked(layer)
        cm.quants[name] = q
        cm.masks[name] = layer.mask.detach().clone()
        if layer.act_state.calibrated:
            cm.act_ranges[name] = (layer.act_state.a_min, layer.act_state.a_max)
        quantized_names.add(f"{name}.weight")
    for pname, p in model.named_parameters():
        if pname not in quantized_names:
            cm.extra_state[pname] = p.detach().clone()
    for bname, b in model.named_buffers():
        if not bname.endswith(".mask"):
            cm.extra_state[bname] = b.detach().clone()
    cm.stats = report_model_stats(cm, model)
    return cm


def quantize_weights_masked(layer: QuantizedLinear):
    """Quantize a wrapped layer's weights using its frozen qparams."""
    w = layer.weight.detach()
    levels = (1 << layer.bits) - 1
    if layer.w_alpha is None:
        codes = torch.zeros_like(w, dtype=_int_dtype(layer.bits))
        return WeightQuant(codes=codes, alpha=None, w_min=layer.w_min, bits=layer.bits)
    codes = torch.round(layer.w_alpha * (w - layer.w_min)).clamp(0, levels)
    return WeightQuant(
        codes=codes.to(_int_dtype(layer.bits)),
        alpha=layer.w_alpha,
        w_min=layer.w_min,
        bits=layer.bits,
    )


def apply_compressed(cm: CompressedModel, model):
    """Load a CompressedModel into a freshly built architecture twin.

    Dense layers are wrapped, given the stored masks/qparams/ranges, and
    their weights set to the dequantized grid values, so the rebuilt model
    reproduces the compressed forward pass exactly.
    """
    wrap_linears(model)
    layers = _quantized_layers(model)
    if set(layers) != set(cm.quants):
        missing = set(cm.quants) ^ set(layers)
        raise ValueError(f"architecture mismatch on layers: {sorted(missing)}")
    with torch.no_grad():
        for name, layer in layers.items():
            q = cm.quants[name]
            layer.set_mask(cm.masks[name])
            layer.bits = q.bits
            layer.w_alpha = q.alpha
            layer.w_min = q.w_min
            layer.weight.copy_(q.dequantize() * cm.masks[name])
            if name in cm.act_ranges:
                a_min, a_max = cm.act_ranges[name]
                layer.act_state = ActivationRangeState(a_min=a_min, a_max=a_max)
                layer.act_enabled = True
        state = {k: v for k, v in cm.extra_state.items()}
        model.load_state_dict(state, strict=False)
    model.eval()
    return model


# ---------------------------------------------------------------------------
# accounting


def report_model_stats(target, reference_model=None):
    """Parameter and payload accounting (Table-style model comparison).

    For a plain module: total parameter count and dense-FP32 byte size. For
    a CompressedModel: pruned/remaining splits over the prunable scope,
    payload bytes for dense FP32, sparse-pruned, and integer formats, with
    masks and per-tensor metadata reported separately.
    """
    if isinstance(target, nn.Module):
        total = sum(p.numel() for p in target.parameters())
        prunable = sum(
            m.weight.numel()
            for m in target.modules()
            if isinstance(m, (nn.Linear, QuantizedLinear))
        )
        return {
            "total_params": total,
            "prunable_params": prunable,
            "fp32_bytes": 4 * total,
        }
    cm = target
    prunable = sum(m.numel() for m in cm.masks.values())
    remaining = int(sum(int(m.sum()) for m in cm.masks.values()))
    pruned = prunable - remaining
    value_bytes = math.ceil(cm.bits / 8)
    meta_bytes = sum(16 for _ in cm.quants)  # alpha + w_min as float64 each
    extra = int(sum(t.numel() for t in cm.extra_state.values()))
    stats = {
        "sparsity": cm.sparsity,
        "bits": cm.bits,
        "prunable_params": prunable,
        "pruned_params": pruned,
        "remaining_params": remaining,
        "dense_fp32_payload_bytes": 4 * prunable,
        "pruned_fp32_payload_bytes": 4 * remaining,
        "quantized_payload_bytes": value_bytes * remaining,
        "mask_bytes": math.ceil(prunable / 8),
        "tensor_metadata_bytes": meta_bytes,
        "extra_params": extra,
        "extra_fp32_bytes": 4 * extra,
    }
    if reference_model is not None:
        stats["total_params"] = sum(p.numel() for p in reference_model.parameters())
    return stats


# ---------------------------------------------------------------------------
# serialization


def save_compressed(cm: CompressedModel, path):
    """Write the integer payloads and metadata to a single .npz archive."""
    arrays = {}
    meta = {
        "sparsity": cm.sparsity,
        "bits": cm.bits,
        "stats": cm.stats,
        "layers": {},
    }
    for name, q in cm.quants.items():
        arrays[f"codes/{name}"] = q.codes.numpy()
        arrays[f"mask/{name}"] = cm.masks[name].numpy()
        meta["layers"][name] = {
            "alpha": q.alpha,
            "w_min": q.w_min,
            "bits": q.bits,
            "act_range": cm.act_ranges.get(name),
        }
    for name, t in cm.extra_state.items():
        arrays[f"extra/{name}"] = t.numpy()
    arrays["meta.json"] = np.frombuffer(
        json.dumps(meta).encode("utf-8"), dtype=np.uint8
    )
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_compressed(path):
    with np.load(path) as archive:
        meta = json.loads(bytes(archive["meta.json"]).decode("utf-8"))
        cm = CompressedModel(sparsity=meta["sparsity"], bits=meta["bits"])
        cm.stats = meta["stats"]
        for name, layer_meta in meta["layers"].items():
            codes = torch.from_numpy(archive[f"codes/{name}"])
            cm.quants[name] = WeightQuant(
                codes=codes,
                alpha=layer_meta["alpha"],
                w_min=layer_meta["w_min"],
                bits=layer_meta["bits"],
            )
            cm.masks[name] = torch.from_numpy(archive[f"mask/{name}"])
            if layer_meta["act_range"] is not None:
                cm.act_ranges[name] = tuple(layer_meta["act_range"])
        for key in archive.files:
            if key.startswith("extra/"):
                cm.extra_state[key[len("extra/") :]] = torch.from_numpy(
                    archive[key].copy()
                )
    return cm
