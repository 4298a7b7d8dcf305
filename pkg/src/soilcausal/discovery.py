"""Constraint- and score-based structure learning over tabular data.

Three learners share one vocabulary: ``pc`` prunes a complete graph with
conditional-independence tests, ``ges`` grows and prunes a DAG greedily
under a Gaussian BIC, and ``gies`` extends the greedy search with
interventional scores, an edge-turning phase, and orientations forced by
which nodes each treatment manipulated.

All three canonicalize to name-sorted column order internally, so the
result is bit-identical under any permutation of the input columns.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .graphs import (
    Cpdag,
    Dag,
    consistent_extension,
    meek_closure,
    v_structures,
)
from .stats import (
    GLOBAL_WARNINGS,
    GaussianSuffStat,
    WarningCounter,
    bic_local_stat,
    fisher_z_test,
    partial_correlation,
    suff_stat,
)

_GAIN_TOL = 1e-9
_MAX_SWEEPS = 50
_ORACLE_TOL = 1e-9


@dataclass(frozen=True)
class DiscoveryConfig:
    alpha: float = 0.05
    max_cond_size: int = 3
    max_parents: int = 5
    use_interventions: bool = False

    def __post_init__(self) -> None:
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError("alpha must lie in (0, 1)")
        if self.max_cond_size < 0:
            raise ConfigError("max_cond_size must be >= 0")
        if self.max_parents < 1:
            raise ConfigError("max_parents must be >= 1")


# ---------------------------------------------------------------------------
# PC
# ---------------------------------------------------------------------------


def _pc_core(names, indep, max_cond_size):
    """Edge pruning with level-frozen adjacencies and batched removals,
    then collider orientation and closure.  ``indep(i, j, S)`` answers the
    test for the name-indexed columns."""
    d = len(names)
    adj = [set(range(d)) - {k} for k in range(d)]
    sepset: dict[tuple[int, int], frozenset] = {}
    tests = 0

    for level in range(max_cond_size + 1):
        frozen = [sorted(a) for a in adj]
        candidates = [
            (i, j) for i in range(d) for j in frozen[i] if i < j
        ]
        testable = False
        removals = []
        for i, j in candidates:
            seen = set()
            found = None
            for side, other in ((i, j), (j, i)):
                pool = [k for k in frozen[side] if k != other]
                if len(pool) < level:
                    continue
                testable = True
                for S in itertools.combinations(pool, level):
                    if S in seen:
                        continue
                    seen.add(S)
                    tests += 1
                    if indep(i, j, S):
                        found = frozenset(S)
                        break
                if found is not None:
                    break
            if found is not None:
                sepset[(i, j)] = found
                removals.append((i, j))
        for i, j in removals:
            adj[i].discard(j)
            adj[j].discard(i)
        if not testable:
            break

    # v-structures: a - c - b with a, b non-adjacent and c outside their
    # separating set.  Proposals applied in sorted order; an orientation is
    # skipped rather than allowed to contradict an earlier one or close a
    # directed cycle.
    proposals = []
    for c in range(d):
        for a, b in itertools.combinations(sorted(adj[c]), 2):
            if b in adj[a]:
                continue
            if c not in sepset.get((min(a, b), max(a, b)), frozenset()):
                proposals.append((a, c))
                proposals.append((b, c))
    directed: set[tuple[int, int]] = set()
    children: dict[int, set[int]] = {k: set() for k in range(d)}

    def reaches(src, dst):
        stack, hit = [src], {src}
        while stack:
            u = stack.pop()
            if u == dst:
                return True
            for v in children[u]:
                if v not in hit:
                    hit.add(v)
                    stack.append(v)
        return False

    for x, y in sorted(set(proposals)):
        if (y, x) in directed or reaches(y, x):
            continue
        directed.add((x, y))
        children[x].add(y)

    directed_named = frozenset((names[x], names[y]) for x, y in directed)
    skeleton = {(min(i, j), max(i, j)) for i in range(d) for j in adj[i]}
    undirected_named = frozenset(
        (names[i], names[j])
        for i, j in skeleton
        if (i, j) not in directed and (j, i) not in directed
    )
    sep_named = {
        (names[i], names[j]): tuple(sorted(names[k] for k in S))
        for (i, j), S in sepset.items()
    }
    pat = Cpdag(
        tuple(names),
        directed_named,
        undirected_named,
        meta={"sepsets": sep_named, "ci_tests": tests},
    )
    out = meek_closure(pat)
    out.meta.update(pat.meta)
    return out


def pc(
    table,
    config: DiscoveryConfig | None = None,
    columns=None,
    warn: WarningCounter = GLOBAL_WARNINGS,
) -> Cpdag:
    """PC over Fisher-z tests on the table's Gaussian statistic."""
    cfg = config or DiscoveryConfig()
    names = tuple(sorted(columns if columns is not None else table.names))
    stat = suff_stat(table, names)

    def indep(i, j, S):
        return fisher_z_test(i, j, S, stat, alpha=cfg.alpha, warn=warn).independent

    return _pc_core(names, indep, cfg.max_cond_size)


def pc_oracle(
    cov: np.ndarray,
    names,
    config: DiscoveryConfig | None = None,
    tol: float = _ORACLE_TOL,
    warn: WarningCounter = GLOBAL_WARNINGS,
) -> Cpdag:
    """PC with tests answered exactly from a model covariance matrix."""
    cfg = config or DiscoveryConfig()
    names = tuple(names)
    cov = np.asarray(cov, dtype=np.float64)
    if cov.shape != (len(names), len(names)):
        raise ConfigError("covariance shape does not match the name list")
    order = sorted(range(len(names)), key=lambda k: names[k])
    sorted_names = tuple(names[k] for k in order)
    cov = cov[np.ix_(order, order)]
    # Degenerate (zero-variance) columns carry no signal; give them unit
    # variance so the precision stays finite, their correlations are 0.
    dead = np.diag(cov) <= 0.0
    if dead.any():
        warn.singular_fallbacks += int(dead.sum())
        cov = cov.copy()
        for k in np.flatnonzero(dead):
            cov[k, k] = 1.0
    stat = GaussianSuffStat(
        n=2, mean=np.zeros(len(names)), cov=cov, columns=sorted_names
    )

    def indep(i, j, S):
        return abs(partial_correlation(i, j, S, stat, warn=warn)) < tol

    return _pc_core(sorted_names, indep, cfg.max_cond_size)


# ---------------------------------------------------------------------------
# greedy BIC search (observational and interventional)
# ---------------------------------------------------------------------------


class _Scorer:
    """Cached local scores; one sufficient statistic per scored node.

    For observational search every node shares one statistic.  With
    interventions, node i's statistic is computed on the rows where i was
    NOT manipulated; a node manipulated everywhere scores 0 and is noted.
    """

    def __init__(self, stats, warn: WarningCounter):
        self.stats = stats
        self.warn = warn
        self.cache: dict[tuple[int, frozenset], float] = {}

    def local(self, y: int, parents: frozenset) -> float:
        key = (y, parents)
        got = self.cache.get(key)
        if got is None:
            st = self.stats[y]
            got = 0.0 if st is None else bic_local_stat(y, parents, st, warn=self.warn)
            self.cache[key] = got
        return got


_NEIGHBOR_SET_CAP = 3  # largest T/H subset tried per insert/delete candidate


def _essential_pattern(dag: Dag, intervened: frozenset) -> Cpdag:
    """Class pattern of ``dag`` that additionally keeps the orientation of
    every edge touching an intervened node (those are pinned by the
    interventional score, not just by colliders)."""
    forced = set()
    for a, c, b in v_structures(dag):
        forced.add((a, c))
        forced.add((b, c))
    for x, y in dag.edges:
        if x in intervened or y in intervened:
            forced.add((x, y))
    und = frozenset(
        (min(a, b), max(a, b))
        for a, b in dag.edges
        if (a, b) not in forced
    )
    return meek_closure(Cpdag(dag.nodes, frozenset(forced), und))


class _State:
    """Mutable view of the current equivalence-class pattern, indexed over
    0..d-1 in name-sorted order.  ``pa`` holds directed in-neighbors only,
    ``und`` the undirected neighborhoods, ``adj`` their union."""

    def __init__(self, names, intervened_names):
        self.names = tuple(names)
        self.index = {n: k for k, n in enumerate(self.names)}
        self.intervened = frozenset(
            self.index[n] for n in intervened_names if n in self.index
        )
        d = len(self.names)
        self.pa = [set() for _ in range(d)]
        self.und = [set() for _ in range(d)]
        self.adj = [set() for _ in range(d)]

    def load(self, pattern: Cpdag):
        for s in (*self.pa, *self.und, *self.adj):
            s.clear()
        for a, b in pattern.directed:
            i, j = self.index[a], self.index[b]
            self.pa[j].add(i)
            self.adj[i].add(j)
            self.adj[j].add(i)
        for a, b in pattern.undirected:
            i, j = self.index[a], self.index[b]
            self.und[i].add(j)
            self.und[j].add(i)
            self.adj[i].add(j)
            self.adj[j].add(i)

    def pattern(self) -> Cpdag:
        directed = frozenset(
            (self.names[i], self.names[j])
            for j in range(len(self.names))
            for i in self.pa[j]
        )
        undirected = frozenset(
            (self.names[min(i, j)], self.names[max(i, j)])
            for i in range(len(self.names))
            for j in self.und[i]
            if i < j
        )
        return Cpdag(self.names, directed, undirected)

    def complete(self, directed, undirected) -> Cpdag:
        """Orient a PDAG into a class member, then re-project to the
        (interventional) pattern of that member's class."""
        named_dir = frozenset(
            (self.names[i], self.names[j]) for i, j in directed
        )
        named_und = frozenset(
            (self.names[min(i, j)], self.names[max(i, j)]) for i, j in undirected
        )
        ext = consistent_extension(Cpdag(self.names, named_dir, named_und))
        inter = frozenset(self.names[k] for k in self.intervened)
        return _essential_pattern(ext, inter)

    def edge_sets(self):
        directed = {(i, j) for j in range(len(self.names)) for i in self.pa[j]}
        undirected = {
            (min(i, j), max(i, j))
            for i in range(len(self.names))
            for j in self.und[i]
        }
        return directed, undirected


def _is_clique(nodes, adj) -> bool:
    members = sorted(nodes)
    return all(
        b in adj[a] for a, b in itertools.combinations(members, 2)
    )


def _blocked_semidirected(st: _State, src: int, dst: int, block) -> bool:
    """True when every semi-directed path src ~> dst (following directed
    edges forward and undirected edges either way) hits ``block``."""
    if src in block:
        return True
    stack, seen = [src], {src}
    while stack:
        u = stack.pop()
        if u == dst:
            return False
        for v in itertools.chain(st.und[u], (w for w in range(len(st.names)) if u in st.pa[w])):
            if v not in seen and v not in block:
                seen.add(v)
                stack.append(v)
    return True


def _subsets(pool, cap):
    pool = sorted(pool)
    for size in range(0, min(len(pool), cap) + 1):
        yield from itertools.combinations(pool, size)


def _insert_candidates(st: _State, sc: _Scorer, max_parents):
    """Valid single-edge insertions, Chickering-style: Insert(x, y, T)."""
    d = len(st.names)
    best = None
    for y in range(d):
        pa_y = frozenset(st.pa[y])
        for x in range(d):
            if x == y or x in st.adj[y]:
                continue
            na = frozenset(n for n in st.und[y] if n in st.adj[x])
            t_pool = [n for n in st.und[y] if n not in st.adj[x] and n != x]
            for t in _subsets(t_pool, _NEIGHBOR_SET_CAP):
                base = na | set(t)
                scored = pa_y | base
                if len(scored) + 1 > max_parents:
                    continue
                gain = sc.local(y, scored | {x}) - sc.local(y, scored)
                if gain <= _GAIN_TOL:
                    continue
                cand = (-gain, x, y, t)
                if best is not None and cand >= best[0]:
                    continue
                if not _is_clique(base, st.adj):
                    continue
                if not _blocked_semidirected(st, y, x, base):
                    continue
                best = (cand, x, y, t)
    return best


def _delete_candidates(st: _State, sc: _Scorer):
    """Valid single-edge deletions: Delete(x, y, H)."""
    d = len(st.names)
    best = None
    pairs = []
    for y in range(d):
        for x in st.pa[y]:
            pairs.append((x, y))
        for x in st.und[y]:
            pairs.append((x, y))  # both roles of an undirected edge appear
    for x, y in sorted(pairs):
        pa_y = frozenset(st.pa[y])
        na = frozenset(n for n in st.und[y] if n in st.adj[x])
        for h in _subsets(na, _NEIGHBOR_SET_CAP):
            keep = na - set(h)
            scored = (pa_y | keep) - {x}
            gain = sc.local(y, scored) - sc.local(y, scored | {x})
            if gain <= _GAIN_TOL:
                continue
            cand = (-gain, x, y, h)
            if best is not None and cand >= best[0]:
                continue
            if not _is_clique(keep, st.adj):
                continue
            best = (cand, x, y, h)
    return best


def _apply_insert(st: _State, x, y, t):
    directed, undirected = st.edge_sets()
    directed.add((x, y))
    for n in t:
        undirected.discard((min(n, y), max(n, y)))
        directed.add((n, y))
    return st.complete(directed, undirected)


def _apply_delete(st: _State, x, y, h):
    directed, undirected = st.edge_sets()
    directed.discard((x, y))
    undirected.discard((min(x, y), max(x, y)))
    for n in h:
        if (min(n, y), max(n, y)) in undirected:
            undirected.discard((min(n, y), max(n, y)))
            directed.add((y, n))
        if (min(n, x), max(n, x)) in undirected:
            undirected.discard((min(n, x), max(n, x)))
            directed.add((x, n))
    return st.complete(directed, undirected)


def _forward_phase(st: _State, sc, cfg) -> bool:
    changed = False
    while True:
        got = _insert_candidates(st, sc, cfg.max_parents)
        if got is None:
            return changed
        _, x, y, t = got
        st.load(_apply_insert(st, x, y, t))
        changed = True


def _backward_phase(st: _State, sc) -> bool:
    changed = False
    while True:
        got = _delete_candidates(st, sc)
        if got is None:
            return changed
        _, x, y, h = got
        st.load(_apply_delete(st, x, y, h))
        changed = True


def _turning_phase(st: _State, sc, cfg) -> bool:
    """Reverse directed edges of a class representative whenever the swap
    strictly improves the (interventional) score and keeps acyclicity."""
    changed = False
    while True:
        inter = frozenset(st.names[k] for k in st.intervened)
        ext = consistent_extension(st.pattern())
        idx = st.index
        pa = {n: set() for n in ext.nodes}
        ch = {n: set() for n in ext.nodes}
        for a, b in ext.edges:
            pa[b].add(a)
            ch[a].add(b)

        def reaches(a, b, skip):
            stack, seen = [a], {a}
            while stack:
                u = stack.pop()
                if u == b:
                    return True
                for v in ch[u]:
                    if (u, v) != skip and v not in seen:
                        seen.add(v)
                        stack.append(v)
            return False

        best = None
        for a, b in sorted(ext.edges):
            if len(pa[a]) + 1 > cfg.max_parents:
                continue
            if reaches(a, b, skip=(a, b)):
                continue
            i, j = idx[a], idx[b]
            pa_b = frozenset(idx[p] for p in pa[b])
            pa_a = frozenset(idx[p] for p in pa[a])
            gain = (
                sc.local(j, pa_b - {i})
                + sc.local(i, pa_a | {j})
                - sc.local(j, pa_b)
                - sc.local(i, pa_a)
            )
            if gain > _GAIN_TOL:
                cand = (-gain, a, b)
                if best is None or cand < best:
                    best = cand
        if best is None:
            return changed
        _, a, b = best
        edges = (ext.edges - {(a, b)}) | {(b, a)}
        st.load(_essential_pattern(Dag(ext.nodes, edges), inter))
        changed = True


def _greedy_search(names, sc, cfg, intervened, turning):
    st = _State(names, intervened)
    sweeps = 0
    for sweeps in range(1, _MAX_SWEEPS + 1):
        before = st.edge_sets()
        moved = _forward_phase(st, sc, cfg)
        moved |= _backward_phase(st, sc)
        if turning:
            moved |= _turning_phase(st, sc, cfg)
        if not turning or not moved or st.edge_sets() == before:
            break
    return st.pattern(), sweeps


def ges(
    table,
    config: DiscoveryConfig | None = None,
    columns=None,
    warn: WarningCounter = GLOBAL_WARNINGS,
) -> Cpdag:
    """Greedy DAG-space grow/prune under the Gaussian BIC, reported as the
    pattern of the final graph's equivalence class."""
    cfg = config or DiscoveryConfig()
    names = tuple(sorted(columns if columns is not None else table.names))
    stat = suff_stat(table, names)
    sc = _Scorer([stat] * len(names), warn)
    out, sweeps = _greedy_search(names, sc, cfg, frozenset(), turning=False)
    out.meta["sweeps"] = sweeps
    return out


def per_row_targets(table, intervention_targets) -> list[frozenset]:
    """Expand a treatment -> intervened-nodes mapping to one set per row."""
    mapping = {
        str(t): frozenset(nodes) for t, nodes in (intervention_targets or {}).items()
    }
    unknown = sorted(
        n for s in mapping.values() for n in s if n not in set(table.names)
    )
    if unknown:
        raise ConfigError(f"intervention targets name unknown columns {unknown}")
    return [mapping.get(t, frozenset()) for t in table.treatment]


def gies(
    table,
    config: DiscoveryConfig | None = None,
    intervention_targets=None,
    columns=None,
    warn: WarningCounter = GLOBAL_WARNINGS,
) -> Cpdag:
    """Greedy search under per-node interventional scores with a turning
    phase, iterated to a fixed point.  Without any interventions this is
    exactly ``ges``."""
    cfg = config or DiscoveryConfig()
    if cfg.use_interventions and intervention_targets is None:
        raise ConfigError(
            "use_interventions=True needs a treatment -> manipulated-columns "
            "mapping; pass {} when no rows were manipulated"
        )
    rows = per_row_targets(table, intervention_targets)
    intervened = frozenset().union(*rows) if rows else frozenset()
    if not cfg.use_interventions or not intervened:
        return ges(table, cfg, columns=columns, warn=warn)

    names = tuple(sorted(columns if columns is not None else table.names))
    matrix = table.matrix(names)
    stats: list[GaussianSuffStat | None] = []
    for k, name in enumerate(names):
        mask = np.fromiter((name not in s for s in rows), dtype=bool, count=len(rows))
        if int(mask.sum()) < 2:
            warn.empty_interventional += 1
            stats.append(None)
        elif mask.all():
            stats.append(suff_stat((matrix, names)))
        else:
            stats.append(suff_stat((matrix[mask], names)))
    sc = _Scorer(stats, warn)
    out, sweeps = _greedy_search(names, sc, cfg, intervened, turning=True)
    out.meta["sweeps"] = sweeps
    out.meta["intervened"] = tuple(sorted(intervened))
    return out
