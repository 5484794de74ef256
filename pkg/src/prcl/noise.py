"""Noise injection for layout plans, the first-order loss model, scale
quantization and the storage-side quadratic model.

Noise enters pre-layer: site i perturbs the tensor entering unit i.  Every
random draw comes from a stream keyed by ``(seed, trial, kind, index)`` where
kind is 0 for activation sites and 1 for parameter layers, so two plans
simulated with the same seed see the same underlying uniform draws scaled by
their own levels.
"""
from __future__ import annotations

import csv
import io
import json
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import HVP_STEP, Tensor, hvp
from .data import Dataset
from .layout import LayoutPlan, QuantLevel
from .network import Network

SCHEMA_VERSION = 1
NOISE_KINDS = ("uniform", "scale_quant", "directional_lossless", "none")
INT32_MAX = 2 ** 31 - 1


class QuantizationSaturation(OverflowError):
    pass


@dataclass(frozen=True)
class NoiseModel:
    """How levels turn into perturbations.

    ``activation="per_sample"`` redraws activation noise per element, sample
    and trial; ``"frozen"`` draws one tensor per site and trial and applies it
    to every sample.
    """

    kind: str = "uniform"
    param_noise: str = "per_trial_frozen"
    activation: str = "per_sample"

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ValueError(f"noise kind must be one of {NOISE_KINDS}")
        if self.param_noise not in ("per_trial_frozen", "none"):
            raise ValueError("param_noise must be per_trial_frozen or none")
        if self.activation not in ("per_sample", "frozen"):
            raise ValueError("activation must be per_sample or frozen")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class NoiseReport:
    baseline_loss: float
    trial_losses: list[float]
    seed: int
    provenance: str = ""
    model: dict = field(default_factory=dict)
    # attribution[t][i]: Δloss of trial t with only unit i noised
    attribution: list[list[float]] | None = None

    def __post_init__(self):
        if len(self.trial_losses) < 1:
            raise ValueError("a report needs at least one trial")

    @property
    def trials(self) -> int:
        return len(self.trial_losses)

    @property
    def deltas(self) -> list[float]:
        return [v - self.baseline_loss for v in self.trial_losses]

    @property
    def mean_delta(self) -> float:
        return math.fsum(self.deltas) / self.trials

    @property
    def std_delta(self) -> float:
        if self.trials < 2:
            return 0.0
        mu = self.mean_delta
        return math.sqrt(math.fsum((d - mu) ** 2 for d in self.deltas) / (self.trials - 1))

    @property
    def mean_attribution(self) -> list[float] | None:
        if not self.attribution:
            return None
        cols = zip(*self.attribution)
        return [math.fsum(c) / self.trials for c in cols]

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "baseline_loss": self.baseline_loss,
            "trial_losses": list(self.trial_losses),
            "delta_mean": self.mean_delta,
            "delta_std": self.std_delta,
            "seed": self.seed,
            "provenance": self.provenance,
            "model": dict(self.model),
            "attribution": self.attribution,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseReport":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported report schema {d.get('schema_version')}")
        return cls(d["baseline_loss"], list(d["trial_losses"]), d["seed"], d.get("provenance", ""),
                   d.get("model", {}), d.get("attribution"))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["provenance", "trial", "seed", "baseline_loss", "noisy_loss", "delta_loss"])
        for t, (v, d) in enumerate(zip(self.trial_losses, self.deltas)):
            w.writerow([self.provenance, t, self.seed, repr(self.baseline_loss), repr(v), repr(d)])
        return buf.getvalue()


# ---------------------------------------------------------------------------
# noise construction


def _uniform(seed: int, trial: int, kind: int, index: int, shapes) -> list[np.ndarray]:
    rng = np.random.default_rng([seed, trial, kind, index])
    return [rng.uniform(-1.0, 1.0, size=s) for s in shapes]


def _grid(x: np.ndarray, q: float) -> np.ndarray:
    return np.rint(x / (2.0 * q)) * (2.0 * q)


def _lossy(prev: QuantLevel, cur: QuantLevel) -> bool:
    """Whether converting a value held at ``prev`` into ``cur`` loses information."""
    if cur.max_error > prev.max_error:
        return True
    return cur.max_error < prev.max_error and not cur.lossless_upconvert


def active_sites(plan: LayoutPlan, model: NoiseModel) -> list[bool]:
    """Sites that receive activation noise under ``model``."""
    lv = plan.levels
    if model.kind == "none":
        return [False] * len(lv)
    if model.kind == "directional_lossless":
        # the input arrives already held at the first unit's level
        return [False] + [_lossy(lv[i - 1], lv[i]) and lv[i].max_error > 0 for i in range(1, len(lv))]
    return [v.max_error > 0 for v in lv]


def _check_plan(net: Network, plan: LayoutPlan) -> None:
    if len(plan) != net.n_units:
        raise ValueError(f"plan covers {len(plan)} units, network has {net.n_units} (layers plus loss)")


def _perturbed_params(net: Network, plan: LayoutPlan, model: NoiseModel, seed: int, trial: int,
                      storage_level: QuantLevel | None, units: set[int] | None) -> list[list[np.ndarray]]:
    out = [list(ps) for ps in net.params]
    if model.param_noise == "none" or model.kind == "none":
        return out
    for i in net.param_layers:
        if units is not None and i not in units:
            continue
        lv = plan.param_level(i)
        if lv is None or lv.max_error == 0:
            continue
        if storage_level is not None and lv.id == storage_level.id:
            # requantizing at the storage level is lossless
            continue
        if model.kind == "scale_quant":
            out[i] = [_grid(p, lv.max_error) for p in net.params[i]]
        else:
            draws = _uniform(seed, trial, 1, i, [p.shape for p in net.params[i]])
            out[i] = [p + lv.max_error * u for p, u in zip(net.params[i], draws)]
    return out


def _activation_perturb(net: Network, data: Dataset, plan: LayoutPlan, model: NoiseModel,
                        seed: int, trial: int, units: set[int] | None):
    active = active_sites(plan, model)
    shapes = net.site_shapes()
    lead = data.m if model.activation == "per_sample" else 1
    eps: dict[int, np.ndarray] = {}
    grid: dict[int, float] = {}
    for i, on in enumerate(active):
        if not on or (units is not None and i not in units):
            continue
        q = plan.levels[i].max_error
        if model.kind == "scale_quant":
            grid[i] = q
        else:
            # row j belongs to sample j of the evaluation set
            eps[i] = q * _uniform(seed, trial, 0, i, [(lead, *shapes[i])])[0]
    if not eps and not grid:
        return None

    def perturb(i: int, h: Tensor) -> Tensor:
        if i in eps:
            return ad.add(h, Tensor._wrap(eps[i]))
        if i in grid:
            return Tensor._wrap(_grid(h.data, grid[i]))
        return h

    return perturb


def _noisy_loss(net, data, plan, model, seed, trial, storage_level, units=None) -> float:
    params = _perturbed_params(net, plan, model, seed, trial, storage_level, units)
    perturb = _activation_perturb(net, data, plan, model, seed, trial, units)
    return net.loss(data, params, perturb)


def simulate(net: Network, eval_set: Dataset, plan: LayoutPlan, model: NoiseModel = NoiseModel(),
             trials: int = 20, seed: int = 0, storage_level: QuantLevel | None = None,
             attribution: bool = False, workers: int = 1) -> NoiseReport:
    """Mean loss over ``eval_set`` under the plan's noise, once per trial.

    Parameters are perturbed once per trial; activations per the model.
    Results do not depend on ``workers``.
    """
    if trials < 1:
        raise ValueError("trials must be at least 1")
    _check_plan(net, plan)
    baseline = net.loss(eval_set)

    def one(t: int):
        total = _noisy_loss(net, eval_set, plan, model, seed, t, storage_level)
        attr = None
        if attribution:
            attr = [_noisy_loss(net, eval_set, plan, model, seed, t, storage_level, {i}) - baseline
                    for i in range(net.n_units)]
        return total, attr

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            results = list(ex.map(one, range(trials)))
    else:
        results = [one(t) for t in range(trials)]
    return NoiseReport(baseline, [r[0] for r in results], seed, plan.provenance, model.to_dict(),
                       [r[1] for r in results] if attribution else None)


# ---------------------------------------------------------------------------
# deterministic noise and the first-order model


def _site_noise(net: Network, m: int, eps: Sequence[np.ndarray | None]) -> list[np.ndarray | None]:
    if len(eps) != net.n_units:
        raise ValueError(f"need one activation perturbation per site ({net.n_units}), got {len(eps)}")
    shapes = net.site_shapes()
    out = []
    for i, e in enumerate(eps):
        if e is None:
            out.append(None)
            continue
        e = np.asarray(e, dtype=np.float64)
        try:
            out.append(np.broadcast_to(e, (m, *shapes[i])))
        except ValueError:
            raise ValueError(f"site {i + 1}: perturbation shape {e.shape} does not fit {(m, *shapes[i])}") from None
    return out


def _param_noise(net: Network, delta: Sequence[Sequence[np.ndarray] | None] | None) -> list[list[np.ndarray] | None]:
    if delta is None:
        return [None] * net.n_layers
    if len(delta) != net.n_layers:
        raise ValueError(f"need one parameter perturbation entry per layer ({net.n_layers}), got {len(delta)}")
    out = []
    for i, d in enumerate(delta):
        if d is None or not net.params[i]:
            out.append(None)
            continue
        if len(d) != len(net.params[i]) or any(np.shape(a) != p.shape for a, p in zip(d, net.params[i])):
            raise ValueError(f"layer {i + 1}: parameter perturbation shapes do not match")
        out.append([np.asarray(a, dtype=np.float64) for a in d])
    return out


def simulate_fixed(net: Network, eval_set: Dataset, eps: Sequence[np.ndarray | None],
                   delta: Sequence[Sequence[np.ndarray] | None] | None = None) -> float:
    """f(w + δ; h + ε) − f(w) for given perturbation tensors.

    ``eps[i]`` perturbs site i and broadcasts against (m, *site_shape);
    ``delta[i]`` lists additive changes to layer i's parameters.
    """
    e = _site_noise(net, eval_set.m, eps)
    d = _param_noise(net, delta)
    params = [ps if di is None else [p + a for p, a in zip(ps, di)] for ps, di in zip(net.params, d)]

    def perturb(i, h):
        return h if e[i] is None else ad.add(h, Tensor._wrap(np.ascontiguousarray(e[i])))

    return net.loss(eval_set, params, perturb) - net.loss(eval_set)


def predict_first_order(net: Network, eval_set: Dataset, eps: Sequence[np.ndarray | None],
                        delta: Sequence[Sequence[np.ndarray] | None] | None = None) -> float:
    """(1/m) Σ_samples Σ_i ⟨∂ℓ/∂h_i, ε_i⟩ + ⟨∂ℓ/∂w_i, δ_i⟩ at the clean point."""
    m = eval_set.m
    e = _site_noise(net, m, eps)
    d = _param_noise(net, delta)
    _, pg, sg = net.gradients(eval_set, reduction="sum")
    terms = []
    for g, ei in zip(sg, e):
        if ei is not None:
            terms.append(float(np.vdot(g, ei)))
    for gs, di in zip(pg, d):
        if di is not None:
            terms.extend(float(np.vdot(g, a)) for g, a in zip(gs, di))
    return math.fsum(terms) / m


# ---------------------------------------------------------------------------
# scale quantization and storage


def quantize_scale(x, scale: float) -> tuple[np.ndarray, np.ndarray]:
    """Round x/scale to the nearest integer (ties to even); return (q, q·scale)."""
    if not scale > 0:
        raise ValueError("scale must be positive")
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    r = np.rint(x / scale)
    if np.any(np.abs(r) > INT32_MAX):
        raise QuantizationSaturation(f"|x/scale| exceeds the int32 range (max {np.abs(x).max() / scale:.3g})")
    q = r.astype(np.int32)
    return q, q.astype(np.float64) * scale


def storage_eval(net: Network, eval_set: Dataset, delta, step: float = HVP_STEP,
                 grad_norm_threshold: float = 1e-3) -> dict:
    """Measured f(w+δ) − f(w) next to ½ δᵀHδ (HVP by gradient differences).

    ``delta`` is a flat vector over all parameters or a per-layer list of
    parameter perturbations.  Also returns the linear term ∇f·δ, which the
    quadratic model assumes is negligible.
    """
    gn = net.meta.get("grad_norm")
    if gn is None or gn > grad_norm_threshold:
        warnings.warn(f"checkpoint gradient norm {gn} is not below {grad_norm_threshold}; "
                      "the quadratic model assumes a stationary point", RuntimeWarning, stacklevel=2)
    w = net.flat_params()
    if isinstance(delta, np.ndarray) and delta.ndim == 1:
        flat = np.asarray(delta, dtype=np.float64)
    else:
        d = _param_noise(net, delta)
        parts = [di[k].ravel() if di is not None else np.zeros(p.size)
                 for di, ps in zip(d, net.params) for k, p in enumerate(ps)]
        flat = np.concatenate(parts) if parts else np.zeros(0)
    if flat.shape != w.shape:
        raise ValueError(f"delta has {flat.size} entries, network has {w.size} parameters")
    base = net.loss(eval_set)
    measured = net.loss(eval_set, net.unflatten(w + flat)) - base
    if not np.any(flat):
        return {"measured": measured, "quadratic": 0.0, "linear": 0.0}
    hv = hvp(None, w, flat, step, grad_fn=lambda p: net.flat_grad(eval_set, p))
    g = net.flat_grad(eval_set)
    return {"measured": measured, "quadratic": 0.5 * float(flat @ hv), "linear": float(g @ flat)}
