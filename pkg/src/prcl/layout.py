"""Assign quantization levels to network units.

Levels are characterized by the largest elementwise error they may introduce.
Every planner pairs the coarsest levels with the least sensitive units; they
differ only in which statistic measures sensitivity.  Ties between equally
sensitive units go to the lower unit index, ties between equal-error levels to
the level declared first.
"""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Iterable, Sequence

import numpy as np

from .sensitivity import SensitivityProfile

SCHEMA_VERSION = 1
MAX_ASSIGNMENTS = 10 ** 6


class LayoutError(ValueError):
    pass


@dataclass(frozen=True)
class QuantLevel:
    id: str
    max_error: float
    # converting a value from any coarser level into this one is exact
    lossless_upconvert: bool = True

    def __post_init__(self):
        if not (self.max_error >= 0 and math.isfinite(self.max_error)):
            raise ValueError(f"level {self.id}: max_error must be finite and >= 0")
        if self.max_error == 0 and self.id != "exact":
            raise ValueError(f"level {self.id}: only the 'exact' level may have max_error 0")

    def to_dict(self) -> dict:
        return {"id": self.id, "max_error": self.max_error, "lossless_upconvert": self.lossless_upconvert}


EXACT = QuantLevel("exact", 0.0)
PAPER_LEVELS = (
    QuantLevel("sigma1", 1e-3),
    QuantLevel("sigma2", 1e-5),
    QuantLevel("sigma3", 1e-7),
    QuantLevel("sigma4", 1e-10),
)


@dataclass
class QuantLevelSet:
    """A multiset of levels: ``entries`` pairs each distinct level with its count."""

    entries: list[tuple[QuantLevel, int]]

    def __post_init__(self):
        ids = [lv.id for lv, _ in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("level ids must be unique within a set")
        if any(c < 0 for _, c in self.entries):
            raise ValueError("multiplicities must be non-negative")

    @classmethod
    def of(cls, levels: Iterable[QuantLevel]) -> "QuantLevelSet":
        counts: dict[str, list] = {}
        for lv in levels:
            if lv.id in counts:
                if counts[lv.id][0] != lv:
                    raise ValueError(f"two different levels share id {lv.id!r}")
                counts[lv.id][1] += 1
            else:
                counts[lv.id] = [lv, 1]
        return cls([(lv, c) for lv, c in counts.values()])

    @classmethod
    def from_errors(cls, errors: Iterable[float]) -> "QuantLevelSet":
        """Levels named by their max error, e.g. ``[1e-3, 1e-5, 1e-5]``."""
        return cls.of(QuantLevel(f"q{float(e)!r}" if e else "exact", float(e)) for e in errors)

    @classmethod
    def partition(cls, levels: Sequence[QuantLevel], n: int,
                  sizes: Sequence[int] | None = None) -> "QuantLevelSet":
        """Split n units into one group per level, as equal as possible.

        Groups are ordered coarse to fine; when n is not divisible the coarser
        groups get the extra unit.
        """
        ordered = sorted(levels, key=lambda lv: -lv.max_error)
        if sizes is None:
            k = len(ordered)
            sizes = [n // k + (1 if g < n % k else 0) for g in range(k)]
        if len(sizes) != len(ordered) or sum(sizes) != n:
            raise LayoutError(f"group sizes {list(sizes)} do not cover {n} units")
        return cls([(lv, int(s)) for lv, s in zip(ordered, sizes)])

    @property
    def size(self) -> int:
        return sum(c for _, c in self.entries)

    def distinct(self) -> list[QuantLevel]:
        """Distinct levels, coarsest first (declaration order among equals)."""
        order = sorted(range(len(self.entries)), key=lambda k: (-self.entries[k][0].max_error, k))
        return [self.entries[k][0] for k in order]

    def counts(self) -> list[int]:
        by_id = {lv.id: c for lv, c in self.entries}
        return [by_id[lv.id] for lv in self.distinct()]

    def expanded(self) -> list[QuantLevel]:
        """Every level repeated by its multiplicity, coarsest first."""
        return [lv for lv, c in zip(self.distinct(), self.counts()) for _ in range(c)]

    def apportion(self, n: int) -> "QuantLevelSet":
        """Rescale multiplicities to total n by largest remainders."""
        total = self.size
        if total == 0:
            raise LayoutError("cannot rescale an empty level set")
        lvls, cnts = self.distinct(), self.counts()
        quotas = [c * n / total for c in cnts]
        base = [math.floor(q) for q in quotas]
        order = sorted(range(len(lvls)), key=lambda k: (-(quotas[k] - base[k]), k))
        for k in order[: n - sum(base)]:
            base[k] += 1
        return QuantLevelSet([(lv, b) for lv, b in zip(lvls, base)])

    def to_dict(self) -> dict:
        return {"levels": [dict(lv.to_dict(), count=c) for lv, c in self.entries]}

    @classmethod
    def from_dict(cls, d: dict) -> "QuantLevelSet":
        return cls([(QuantLevel(e["id"], float(e["max_error"]), bool(e.get("lossless_upconvert", True))),
                     int(e["count"])) for e in d["levels"]])


@dataclass
class LayoutPlan:
    """Level per unit.  ``levels[i]`` applies to the tensor entering unit i and,
    in shared mode, to the unit's parameters.  Split mode keeps a separate
    ``param_levels`` (``None`` for parameter-free units)."""

    levels: list[QuantLevel]
    mode: str = "shared"
    provenance: str = ""
    param_levels: list[QuantLevel | None] | None = None
    # units whose level was copied from a neighbour instead of drawn from the set
    inherited: tuple[int, ...] = ()
    notes: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.mode not in ("shared", "split"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == "split" and self.param_levels is None:
            raise ValueError("split plans need param_levels")

    def __len__(self) -> int:
        return len(self.levels)

    def activation_level(self, unit: int) -> QuantLevel:
        return self.levels[unit]

    def param_level(self, unit: int) -> QuantLevel | None:
        return self.param_levels[unit] if self.mode == "split" else self.levels[unit]

    def ids(self) -> list[str]:
        return [lv.id for lv in self.levels]

    def to_dict(self, has_params: Sequence[bool] | None = None) -> dict:
        n = len(self.levels)
        has_params = [True] * n if has_params is None else list(has_params)
        rows = []
        for i, lv in enumerate(self.levels):
            base = {"layer_index": i + 1, "paper_index": n - i}
            if self.mode == "shared":
                rows.append(dict(base, level_id=lv.id, applies_to="both" if has_params[i] else "activation"))
            else:
                rows.append(dict(base, level_id=lv.id, applies_to="activation"))
                pl = self.param_levels[i]
                if pl is not None:
                    rows.append(dict(base, level_id=pl.id, applies_to="params"))
        used = {lv.id: lv for lv in self.levels}
        used.update({lv.id: lv for lv in (self.param_levels or []) if lv is not None})
        return {
            "schema_version": SCHEMA_VERSION,
            "mode": self.mode,
            "provenance": self.provenance,
            "inherited": [i + 1 for i in self.inherited],
            "notes": list(self.notes),
            "levels": [used[k].to_dict() for k in sorted(used)],
            "assignment": rows,
        }

    def to_json(self, has_params=None) -> str:
        return json.dumps(self.to_dict(has_params), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "LayoutPlan":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported plan schema {d.get('schema_version')}")
        table = {e["id"]: QuantLevel(e["id"], float(e["max_error"]), bool(e.get("lossless_upconvert", True)))
                 for e in d["levels"]}
        n = max(r["layer_index"] for r in d["assignment"])
        act: list = [None] * n
        par: list = [None] * n
        for r in d["assignment"]:
            i = r["layer_index"] - 1
            if r["applies_to"] in ("both", "activation"):
                act[i] = table[r["level_id"]]
            if r["applies_to"] in ("both", "params"):
                par[i] = table[r["level_id"]]
        mode = d["mode"]
        return cls(act, mode, d.get("provenance", ""), par if mode == "split" else None,
                   tuple(i - 1 for i in d.get("inherited", [])), list(d.get("notes", [])))


def check_consumes(assigned: Sequence[QuantLevel], levels: QuantLevelSet) -> None:
    """Raise unless ``assigned`` uses every level exactly its multiplicity."""
    want = Counter({lv.id: c for lv, c in levels.entries if c})
    got = Counter(lv.id for lv in assigned)
    if want != got:
        raise LayoutError(f"assignment uses {dict(got)}, level set holds {dict(want)}")


def _pair(keys: Sequence[float], levels: QuantLevelSet) -> list[QuantLevel]:
    """Coarsest level to the smallest key; ties by position."""
    n = len(keys)
    if levels.size != n:
        raise LayoutError(f"level set holds {levels.size} levels for {n} units")
    order = sorted(range(n), key=lambda i: (keys[i], i))
    out: list = [None] * n
    for unit, lv in zip(order, levels.expanded()):
        out[unit] = lv
    return out


def plan_gradient(profile: SensitivityProfile, levels: QuantLevelSet) -> LayoutPlan:
    """Coarse levels to units whose incoming-activation gradient norm is small."""
    return LayoutPlan(_pair(profile.input_norms, levels), "shared", "gradient")


def bound_value(profile: SensitivityProfile, plan: LayoutPlan) -> float:
    """(1/m) Σ_i ‖Σ_j ∂ℓ/∂h_i‖ · max_error(level_i) over the activation levels."""
    norms = profile.input_norms
    if len(norms) != len(plan):
        raise LayoutError(f"plan covers {len(plan)} units, profile {len(norms)}")
    return math.fsum(n * lv.max_error for n, lv in zip(norms, plan.levels)) / profile.sample_count


def _check_upconvert(levels: QuantLevelSet) -> None:
    lv = levels.distinct()
    for a in range(len(lv)):
        for b in range(len(lv)):
            coarse, fine = lv[a], lv[b]
            if fine.max_error < coarse.max_error and not fine.lossless_upconvert:
                raise LayoutError(
                    f"converting {coarse.id} (max error {coarse.max_error:g}) into {fine.id} "
                    f"(max error {fine.max_error:g}) is lossy; precision cannot rise monotonically without error")


def plan_trivial(levels: QuantLevelSet, n_layers: int) -> LayoutPlan:
    """Precision rises monotonically from input to output: coarsest level first."""
    if levels.size != n_layers:
        raise LayoutError(f"level set holds {levels.size} levels for {n_layers} units")
    _check_upconvert(levels)
    return LayoutPlan(levels.expanded(), "shared", "trivial")


def _has_params(profile: SensitivityProfile) -> list[bool]:
    return [r.has_params for r in profile.records]


def plan_storage_aware(input_profile: SensitivityProfile, param_profile: SensitivityProfile,
                       levels: QuantLevelSet, mode: str = "shared",
                       param_levels: QuantLevelSet | None = None) -> LayoutPlan:
    """Planner for a model that was already quantized for storage.

    ``shared``: one level per unit, ranked by input-gradient norm plus
    parameter-gradient norm.  ``split``: activations ranked by input norm,
    parameters ranked separately by parameter norm, each drawing from its own
    copy of the level set.  Parameter-free units get no parameter level, so the
    parameter copy is rescaled to the number of parameter-bearing units unless
    ``param_levels`` is given.
    """
    ins = input_profile.input_norms
    pns = param_profile.param_norms
    if len(ins) != len(pns):
        raise LayoutError("profiles cover different numbers of units")
    if mode == "shared":
        keys = [a + (b or 0.0) for a, b in zip(ins, pns)]
        return LayoutPlan(_pair(keys, levels), "shared", "storage_aware")
    if mode != "split":
        raise LayoutError(f"mode must be shared or split, not {mode!r}")
    act = _pair(ins, levels)
    owners = [i for i, hp in enumerate(_has_params(param_profile)) if hp]
    for i in owners:
        if pns[i] is None:
            raise LayoutError(f"unit {i + 1} has parameters but no parameter-gradient norm")
    notes = ["split mode: parameters and activations each consume their own copy of the level set"]
    if param_levels is None:
        if not owners:
            raise LayoutError("no parameter-bearing units to assign")
        param_levels = levels if levels.size == len(owners) else levels.apportion(len(owners))
        if param_levels is not levels:
            notes.append(f"parameter level set rescaled from {levels.size} to {len(owners)} units")
    sub = _pair([pns[i] for i in owners], param_levels)
    par: list = [None] * len(ins)
    for i, lv in zip(owners, sub):
        par[i] = lv
    return LayoutPlan(act, "split", "storage_aware", par, notes=notes)


def plan_hessian_baseline(profile: SensitivityProfile, levels: QuantLevelSet) -> LayoutPlan:
    """Rank parameter-bearing units by Hessian trace; parameter-free units copy
    the level of the nearest preceding parameter-bearing unit (or the nearest
    following one when none precedes)."""
    hp = _has_params(profile)
    owners = [i for i, h in enumerate(hp) if h]
    if not owners:
        raise LayoutError("no parameter-bearing units")
    missing = [i + 1 for i in owners if profile.records[i].hessian_trace is None]
    if missing:
        raise LayoutError(f"missing Hessian traces for units {missing}")
    sub = _pair([profile.records[i].hessian_trace for i in owners], levels)
    out: list = [None] * len(hp)
    for i, lv in zip(owners, sub):
        out[i] = lv
    inherited = []
    for i in range(len(hp)):
        if out[i] is None:
            prev = [j for j in owners if j < i]
            src = prev[-1] if prev else min(owners, key=lambda j: (j - i))
            out[i] = out[src]
            inherited.append(i)
    return LayoutPlan(out, "shared", "hessian_baseline", inherited=tuple(inherited))


@lru_cache(maxsize=64)
def _multiset_perms(counts: tuple[int, ...]) -> np.ndarray:
    """All distinct arrangements of a multiset of level indices, in lexicographic order."""
    if sum(counts) == 0:
        return np.zeros((1, 0), dtype=np.int16)
    blocks = []
    for k, c in enumerate(counts):
        if c:
            sub = _multiset_perms(counts[:k] + (c - 1,) + counts[k + 1:])
            head = np.full((sub.shape[0], 1), k, dtype=np.int16)
            blocks.append(np.hstack([head, sub]))
    return np.vstack(blocks)


def count_assignments(levels: QuantLevelSet) -> int:
    n = math.factorial(levels.size)
    for c in levels.counts():
        n //= math.factorial(c)
    return n


def enumerate_assignments(levels: QuantLevelSet) -> tuple[list[QuantLevel], np.ndarray]:
    """(distinct levels, rows of indices into them), one row per distinct assignment."""
    n = count_assignments(levels)
    if n > MAX_ASSIGNMENTS:
        raise LayoutError(f"{n} assignments exceed the brute-force limit of {MAX_ASSIGNMENTS}; use plan_gradient")
    return levels.distinct(), _multiset_perms(tuple(levels.counts()))


def plan_bruteforce(profile: SensitivityProfile, levels: QuantLevelSet, objective: str = "bound",
                    simulate: Callable[[LayoutPlan], float] | None = None) -> tuple[LayoutPlan, float]:
    """Exhaustive search over every distinct assignment.

    ``objective="bound"`` minimizes :func:`bound_value`;
    ``objective="simulated_loss"`` minimizes ``simulate(plan)``.  Ties resolve to
    the lexicographically first assignment (levels indexed coarsest first).
    """
    n = len(profile)
    if levels.size != n:
        raise LayoutError(f"level set holds {levels.size} levels for {n} units")
    distinct, rows = enumerate_assignments(levels)

    def make(row) -> LayoutPlan:
        return LayoutPlan([distinct[k] for k in row], "shared", f"bruteforce:{objective}")

    if objective == "bound":
        norms = np.array(profile.input_norms)
        q = np.array([lv.max_error for lv in distinct])
        approx = (q[rows] * norms).sum(axis=1)
        # rescore near-minimal rows exactly; the first in row order wins ties
        lo = approx.min()
        cand = np.flatnonzero(approx <= lo + 1e-9 * abs(lo) + 1e-300)
        best = None
        for r in cand:
            plan = make(rows[r])
            v = bound_value(profile, plan)
            if best is None or v < best[1]:
                best = (plan, v)
        return best
    if objective == "simulated_loss":
        if simulate is None:
            raise LayoutError("objective simulated_loss needs a simulate callable")
        best = None
        for row in rows:
            plan = make(row)
            v = float(simulate(plan))
            if best is None or v < best[1]:
                best = (plan, v)
        return best
    raise LayoutError(f"unknown objective {objective!r}")


def random_plans(levels: QuantLevelSet, n_units: int, k: int, seed: int) -> list[LayoutPlan]:
    """k uniformly shuffled shared-mode assignments (a null control)."""
    if levels.size != n_units:
        raise LayoutError(f"level set holds {levels.size} levels for {n_units} units")
    base = levels.expanded()
    out = []
    for r in range(k):
        rng = np.random.default_rng([seed, r])
        perm = rng.permutation(n_units)
        out.append(LayoutPlan([base[j] for j in perm], "shared", f"random_{r}"))
    return out
