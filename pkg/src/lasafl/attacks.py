"""Byzantine update generators.

The attacker sees every benign update of the round (full-knowledge threat
model) and returns one crafted update per malicious client, in the order of
``AttackContext.malicious_ids``. Randomness comes from substreams keyed by
client id, so results do not depend on generation order.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .update import LayeredUpdate, UpdateBatch

ATTACK_KINDS = (
    "random",
    "noise",
    "signflip",
    "minmax",
    "minsum",
    "tailored_trmean",
    "lie",
    "byzmean",
)


@dataclass(frozen=True)
class AttackSpec:
    kind: str
    sigma: float = 0.5
    z: float = 0.5
    base: str = "lie"
    stealthy: bool = False
    trim: int | None = None
    lie_population: str = "benign"

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack {self.kind!r}; expected one of {ATTACK_KINDS}")
        if self.base not in ATTACK_KINDS or self.base == "byzmean":
            raise ValueError(f"invalid byzmean base attack {self.base!r}")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.lie_population not in ("benign", "all"):
            raise ValueError("lie_population must be 'benign' or 'all'")


@dataclass(frozen=True)
class AttackContext:
    """What the attacker knows in one round.

    ``own`` holds the honest updates the malicious clients would have sent
    (same order as ``malicious_ids``); noise and sign-flip need it.
    """

    benign: UpdateBatch
    malicious_ids: tuple[int, ...]
    seed: int = 0
    own: UpdateBatch | None = None

    def __post_init__(self):
        ids = tuple(self.malicious_ids)
        object.__setattr__(self, "malicious_ids", ids)
        if not ids:
            raise ValueError("attack context needs at least one malicious client")
        if set(ids) & set(self.benign.client_ids):
            raise ValueError("malicious ids overlap benign ids")
        if self.own is not None and tuple(self.own.client_ids) != ids:
            raise ValueError("own updates must be keyed by the malicious ids in order")

    @property
    def f(self) -> int:
        return len(self.malicious_ids)

    @property
    def layout(self):
        return self.benign.layout

    def client_rng(self, client_id: int) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=(int(client_id),)))

    def own_updates(self) -> np.ndarray:
        if self.own is None:
            raise ValueError("this attack needs the malicious clients' honest updates")
        return self.own.matrix()


def _wrap(rows, layout) -> list[LayeredUpdate]:
    return [LayeredUpdate(r, layout) for r in rows]


def _copies(vec: np.ndarray, ctx: AttackContext) -> list[LayeredUpdate]:
    u = LayeredUpdate(vec, ctx.layout)
    return [u] * ctx.f


def attack_random(ctx: AttackContext, sigma: float = 0.5) -> list[LayeredUpdate]:
    d = ctx.benign.dim
    return _wrap((ctx.client_rng(c).normal(0.0, sigma, d) for c in ctx.malicious_ids), ctx.layout)


def attack_noise(ctx: AttackContext, sigma: float = 0.5) -> list[LayeredUpdate]:
    own = ctx.own_updates()
    d = own.shape[1]
    rows = [own[i] + ctx.client_rng(c).normal(0.0, sigma, d) for i, c in enumerate(ctx.malicious_ids)]
    return _wrap(rows, ctx.layout)


def attack_signflip(ctx: AttackContext) -> list[LayeredUpdate]:
    return _wrap(-ctx.own_updates(), ctx.layout)


def perturbation_direction(benign: np.ndarray) -> np.ndarray:
    """Unit vector along the negative coordinate-wise std of benign updates."""
    std = benign.std(axis=0)
    norm = np.linalg.norm(std)
    if norm == 0.0:
        return np.zeros_like(std)
    return -std / norm


def _pairwise_dists(points: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - points[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def minmax_bound(benign: np.ndarray) -> float:
    return float(_pairwise_dists(benign).max())


def minsum_bound(benign: np.ndarray, stealthy: bool = False) -> float:
    totals = _pairwise_dists(benign).sum(axis=1)
    return float(totals.min() if stealthy else totals.max())


def _search_gamma(feasible, lo: float = 0.0, hi: float = 200.0, iters: int = 60) -> float:
    if feasible(hi):
        return hi
    if not feasible(lo):
        return lo
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if feasible(mid):
            lo = mid
        else:
            hi = mid
    return lo


def _optimise_around_mean(benign: np.ndarray, objective, bound: float) -> np.ndarray:
    mu = benign.mean(axis=0)
    p = perturbation_direction(benign)
    if bound == 0.0 or not np.any(p):
        return mu
    gamma = _search_gamma(lambda g: objective(mu + g * p) <= bound)
    return mu + gamma * p


def minmax_vector(benign: np.ndarray) -> np.ndarray:
    bound = minmax_bound(benign)
    return _optimise_around_mean(
        benign, lambda b: float(np.linalg.norm(benign - b, axis=1).max()), bound
    )


def minsum_vector(benign: np.ndarray, stealthy: bool = False) -> np.ndarray:
    bound = minsum_bound(benign, stealthy)
    return _optimise_around_mean(
        benign, lambda b: float(np.linalg.norm(benign - b, axis=1).sum()), bound
    )


def attack_minmax(ctx: AttackContext) -> list[LayeredUpdate]:
    benign = ctx.benign.matrix()
    if benign.shape[0] < 2:
        raise ValueError("min-max needs at least two benign updates")
    return _copies(minmax_vector(benign), ctx)


def attack_minsum(ctx: AttackContext, stealthy: bool = False) -> list[LayeredUpdate]:
    benign = ctx.benign.matrix()
    if benign.shape[0] < 2:
        raise ValueError("min-sum needs at least two benign updates")
    return _copies(minsum_vector(benign, stealthy), ctx)


TRMEAN_SCALES = tuple(1.0 + 0.5 * i for i in range(9))


def _trmean(points: np.ndarray, b: int) -> np.ndarray:
    ordered = np.sort(points, axis=0)
    return ordered[b:points.shape[0] - b].mean(axis=0)


def tailored_trmean_candidate(benign: np.ndarray, s: float) -> np.ndarray:
    """Per coordinate, the benign extreme opposite the mean's sign, with its
    offset from the mean stretched by ``s``."""
    mean = benign.mean(axis=0)
    extreme = np.where(mean > 0, benign.min(axis=0), benign.max(axis=0))
    return mean + s * (extreme - mean)


def tailored_trmean_objective(benign: np.ndarray, malicious: np.ndarray, f: int, b: int) -> float:
    allp = np.vstack([benign, np.repeat(malicious[None, :], f, axis=0)])
    return float(np.linalg.norm(allp.mean(axis=0) - _trmean(allp, b)))


def tailored_trmean_vector(benign: np.ndarray, f: int, b: int) -> tuple[np.ndarray, float]:
    """Return the crafted vector and the chosen scale."""
    if 2 * b >= benign.shape[0] + f:
        raise ValueError("trim count too large for the number of updates")
    best_s, best_obj, best_vec = None, -np.inf, None
    for s in TRMEAN_SCALES:
        vec = tailored_trmean_candidate(benign, s)
        obj = tailored_trmean_objective(benign, vec, f, b)
        if obj > best_obj:  # strict: ties keep the smaller scale
            best_s, best_obj, best_vec = s, obj, vec
    return best_vec, best_s


def attack_tailored_trmean(ctx: AttackContext, trim: int | None = None) -> list[LayeredUpdate]:
    b = ctx.f if trim is None else int(trim)
    vec, _ = tailored_trmean_vector(ctx.benign.matrix(), ctx.f, b)
    return _copies(vec, ctx)


def lie_vector(points: np.ndarray, z: float) -> np.ndarray:
    return points.mean(axis=0) - z * points.std(axis=0)


def attack_lie(ctx: AttackContext, z: float = 0.5, population: str = "benign") -> list[LayeredUpdate]:
    points = ctx.benign.matrix()
    if population == "all":
        points = np.vstack([points, ctx.own_updates()])
    return _copies(lie_vector(points, z), ctx)


def byzmean_second_group(group1_mean: np.ndarray, benign: np.ndarray, f: int) -> np.ndarray:
    """Update for the compensating group so that the mean of all submissions
    equals ``group1_mean``."""
    m1 = f // 2
    m2 = f - m1
    n = benign.shape[0] + f
    return ((n - m1) * group1_mean - benign.sum(axis=0)) / m2


def attack_byzmean(ctx: AttackContext, base: AttackSpec) -> list[LayeredUpdate]:
    if ctx.f < 2:
        raise ValueError("ByzMean needs at least two malicious clients")
    m1 = ctx.f // 2
    ids1 = ctx.malicious_ids[:m1]
    own1 = ctx.own.subset(range(m1)) if ctx.own is not None else None
    sub = replace(ctx, malicious_ids=ids1, own=own1)
    group1 = generate(sub, base)
    g1 = np.mean([u.values for u in group1], axis=0)
    vec2 = byzmean_second_group(g1, ctx.benign.matrix(), ctx.f)
    u2 = LayeredUpdate(vec2, ctx.layout)
    return list(group1) + [u2] * (ctx.f - m1)


def generate(ctx: AttackContext, spec: AttackSpec) -> list[LayeredUpdate]:
    """Dispatch on ``spec.kind``."""
    kind = spec.kind
    if kind == "random":
        return attack_random(ctx, spec.sigma)
    if kind == "noise":
        return attack_noise(ctx, spec.sigma)
    if kind == "signflip":
        return attack_signflip(ctx)
    if kind == "minmax":
        return attack_minmax(ctx)
    if kind == "minsum":
        return attack_minsum(ctx, spec.stealthy)
    if kind == "tailored_trmean":
        return attack_tailored_trmean(ctx, spec.trim)
    if kind == "lie":
        return attack_lie(ctx, spec.z, spec.lie_population)
    if kind == "byzmean":
        return attack_byzmean(ctx, replace(spec, kind=spec.base))
    raise ValueError(f"unknown attack {kind!r}")
