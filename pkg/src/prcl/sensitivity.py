"""Per-unit sensitivity statistics: input-gradient norms, parameter-gradient
norms and Hutchinson estimates of per-layer Hessian traces.

A *unit* is a layer or the final loss; unit i (1-based) owns the noise site
entering it.  Only layers carry parameters, so the loss unit never has a
parameter norm or a trace.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import HVP_STEP, hvp
from .data import Dataset
from .network import Network

SCHEMA_VERSION = 1
AGGREGATES = ("norm-of-sum", "sum-of-norms")


@dataclass
class UnitSensitivity:
    layer_index: int
    kind: str
    param_count: int = 0
    input_grad_norm: float | None = None
    param_grad_norm: float | None = None
    hessian_trace: float | None = None
    hessian_trace_se: float | None = None
    has_params: bool = True


@dataclass
class SensitivityProfile:
    records: list[UnitSensitivity]
    sample_count: int
    dataset_id: str = ""
    seed: int | None = None
    aggregate: str = "norm-of-sum"
    probes: int | None = None

    def __len__(self) -> int:
        return len(self.records)

    @property
    def input_norms(self) -> list[float]:
        return [_need(r.input_grad_norm, "input_grad_norm", r) for r in self.records]

    @property
    def param_norms(self) -> list[float | None]:
        return [r.param_grad_norm for r in self.records]

    @property
    def traces(self) -> list[float | None]:
        return [r.hessian_trace for r in self.records]

    def merge(self, other: "SensitivityProfile") -> "SensitivityProfile":
        """Combine fields filled by different profile passes over the same net."""
        if len(self) != len(other):
            raise ValueError("profiles cover different numbers of units")
        recs = []
        for a, b in zip(self.records, other.records):
            d = asdict(a)
            for k, v in asdict(b).items():
                if d.get(k) is None and v is not None:
                    d[k] = v
            recs.append(UnitSensitivity(**d))
        return SensitivityProfile(recs, self.sample_count, self.dataset_id,
                                  self.seed if self.seed is not None else other.seed,
                                  self.aggregate, self.probes or other.probes)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "sample_count": self.sample_count,
            "dataset_id": self.dataset_id,
            "seed": self.seed,
            "aggregate": self.aggregate,
            "probes": self.probes,
            "records": [asdict(r) for r in self.records],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "SensitivityProfile":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported profile schema {d.get('schema_version')}")
        return cls([UnitSensitivity(**r) for r in d["records"]], d["sample_count"],
                   d.get("dataset_id", ""), d.get("seed"), d.get("aggregate", "norm-of-sum"),
                   d.get("probes"))

    @classmethod
    def from_norms(cls, input_norms=None, param_norms=None, traces=None, m: int = 1) -> "SensitivityProfile":
        """Profile from raw per-unit statistics, mostly for planning by hand."""
        cols = [c for c in (input_norms, param_norms, traces) if c is not None]
        if not cols:
            raise ValueError("need at least one statistic")
        n = len(cols[0])
        recs = []
        for i in range(n):
            # an explicit None in a parameter statistic marks a parameter-free unit
            free = any(c is not None and c[i] is None for c in (param_norms, traces))
            recs.append(UnitSensitivity(
                i + 1, "layer", has_params=not free,
                input_grad_norm=None if input_norms is None else float(input_norms[i]),
                param_grad_norm=None if param_norms is None or param_norms[i] is None else float(param_norms[i]),
                hessian_trace=None if traces is None or traces[i] is None else float(traces[i]),
            ))
        return cls(recs, m)


def _need(v, name, rec):
    if v is None:
        raise ValueError(f"unit {rec.layer_index} has no {name}")
    return v


def _empty_profile(net: Network, calib: Dataset, **kw) -> SensitivityProfile:
    recs = []
    for i in range(net.n_units):
        kind = net.layers[i].kind if i < net.n_layers else "loss"
        pc = net.layer_param_count(i)
        recs.append(UnitSensitivity(i + 1, kind, pc, has_params=pc > 0))
    return SensitivityProfile(recs, calib.m, calib.id, **kw)


def canonical_sum(rows: np.ndarray) -> np.ndarray:
    """Column sums that do not depend on the order of the rows."""
    flat = rows.reshape(rows.shape[0], -1)
    return np.sort(flat, axis=0).sum(axis=0)


def input_gradient_profile(net: Network, calib: Dataset, aggregate: str = "norm-of-sum") -> SensitivityProfile:
    """‖Σ_j ∂ℓ_j/∂h‖₂ for the tensor h entering every unit.

    The sum runs over calibration samples without the 1/m factor.
    ``aggregate="sum-of-norms"`` gives Σ_j ‖∂ℓ_j/∂h‖₂ instead (an ablation;
    it cannot cancel across samples).
    """
    if aggregate not in AGGREGATES:
        raise ValueError(f"aggregate must be one of {AGGREGATES}")
    if calib.m < 1:
        raise ValueError("calibration set is empty")
    prof = _empty_profile(net, calib, aggregate=aggregate)
    _, _, site_grads = net.gradients(calib, reduction="sum")
    for rec, g in zip(prof.records, site_grads):
        if aggregate == "norm-of-sum":
            rec.input_grad_norm = float(np.linalg.norm(canonical_sum(g)))
        else:
            per = np.sqrt((g.reshape(g.shape[0], -1) ** 2).sum(axis=1))
            rec.input_grad_norm = math.fsum(per)
    return prof


def param_gradient_profile(net: Network, calib: Dataset, aggregate: str = "norm-of-sum") -> SensitivityProfile:
    """‖Σ_j ∂ℓ_j/∂w_i‖₂ over each layer's parameters; absent for param-free units."""
    if aggregate not in AGGREGATES:
        raise ValueError(f"aggregate must be one of {AGGREGATES}")
    if calib.m < 1:
        raise ValueError("calibration set is empty")
    prof = _empty_profile(net, calib, aggregate=aggregate)
    if aggregate == "norm-of-sum":
        _, pg, _ = net.gradients(calib, reduction="sum")
        for i in net.param_layers:
            prof.records[i].param_grad_norm = float(
                math.sqrt(math.fsum(float((g ** 2).sum()) for g in pg[i])))
        return prof
    sums = {i: [] for i in net.param_layers}
    for j in range(calib.m):
        _, pg, _ = net.gradients(calib.subset([j]), reduction="sum")
        for i in net.param_layers:
            sums[i].append(math.sqrt(math.fsum(float((g ** 2).sum()) for g in pg[i])))
    for i, vals in sums.items():
        prof.records[i].param_grad_norm = math.fsum(vals)
    return prof


def rademacher(seed: int, layer: int, probe: int, n: int) -> np.ndarray:
    """±1 probe vector; the stream depends only on (seed, layer, probe)."""
    rng = np.random.default_rng([seed, layer, probe])
    return rng.integers(0, 2, size=n).astype(np.float64) * 2.0 - 1.0


def hutchinson_trace(matvec, n: int, probes: int, seed: int, layer: int = 0,
                     workers: int = 1) -> tuple[float, float, np.ndarray]:
    """Mean and standard error of vᵀ(Hv) over Rademacher probes."""
    if probes < 1:
        raise ValueError("probes must be at least 1")

    def one(p):
        v = rademacher(seed, layer, p, n)
        return float(v @ matvec(v))

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            samples = np.array(list(ex.map(one, range(probes))))
    else:
        samples = np.array([one(p) for p in range(probes)])
    mean = math.fsum(samples) / probes
    se = float(samples.std(ddof=1) / math.sqrt(probes)) if probes > 1 else float("nan")
    return mean, se, samples


def hessian_trace_profile(net: Network, calib: Dataset, probes: int = 200, seed: int = 0,
                          step: float = HVP_STEP, workers: int = 1) -> SensitivityProfile:
    """Hutchinson estimate of tr(∂²f/∂w_i²) for each parameter-bearing layer.

    f is the mean loss over ``calib``; the Hessian-vector product perturbs only
    layer i's parameters.
    """
    if probes < 1:
        raise ValueError("probes must be at least 1")
    prof = _empty_profile(net, calib, seed=seed, probes=probes)
    for i in net.param_layers:
        w = net.flat_params(i)

        def matvec(v, i=i, w=w):
            return hvp(None, w, v, step, grad_fn=lambda p: net.flat_grad(calib, p, layer=i))

        mean, se, _ = hutchinson_trace(matvec, w.size, probes, seed, layer=i, workers=workers)
        prof.records[i].hessian_trace = mean
        prof.records[i].hessian_trace_se = se
    return prof


def full_profile(net: Network, calib: Dataset, probes: int | None = None, seed: int = 0,
                 aggregate: str = "norm-of-sum", workers: int = 1) -> SensitivityProfile:
    prof = input_gradient_profile(net, calib, aggregate).merge(param_gradient_profile(net, calib, aggregate))
    if probes:
        prof = prof.merge(hessian_trace_profile(net, calib, probes, seed, workers=workers))
    prof.seed = seed
    return prof
