"""Exact band-merging scheme for stretch sequences.

Indices with large stretches are "bad"; the scheme repeatedly merges pairs of
bad bands (together with everything between them) into worse bands whose
label grows, until no admissible pair remains in the window.  All decisions
are made with big-integer power comparisons: a pair (i, j) in distinct bands
is admissible exactly when

    1 + D(i, j) < s ** (min(label_i, label_j) - 1)

where D counts the bands strictly between, and the merged label is

    label_i + label_j - floor(log_s(1 + D) / d_inv).

No floating point enters the merge path, so merge order is reproducible
bit-for-bit.  On top of the engine sit the structural notions used by the
renormalization argument: band enumeration, l segments, regular / very
regular spacing (with constructive repair by raising stretch values at
maximal generators), simple bands, weight bounds, and per-merge (m, r, q)
diagnostics.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations
from typing import Iterator, NamedTuple, Optional, Sequence

import numpy as np

from .environment import INF, StretchSequence

_LABEL_CAP = 1 << 30          # clamp for vectorized label arithmetic
_BIGKEY = 1 << 62             # sentinel for scan keys
_POW_LEN = 128
_POW_CLAMP = 1 << 62


class BandError(ValueError):
    pass


class WindowTooSmallError(BandError):
    pass


@dataclass(frozen=True)
class MergeParams:
    """Scale s >= 32 and discount denominator d_inv >= 12 (discount 1/d_inv)."""

    s: int
    d_inv: int = 12

    def __post_init__(self):
        if self.s < 32:
            raise BandError("scale s must be >= 32")
        if self.d_inv < 12:
            raise BandError("d_inv must be >= 12 (discount strictly below 1/11)")

    @property
    def near_limit(self) -> int:
        """Short-range merge threshold (12 s)^2 used by the index search."""
        return (12 * self.s) ** 2

    def power(self, m: int) -> int:
        return self.s ** m


def flat_label_scale(n: int, params: MergeParams) -> int:
    """floor(n / (2 - 1/d_inv)), the thin-strip label scale for label n."""
    return (n * params.d_inv) // (2 * params.d_inv - 1)


def _pow_table(s: int) -> np.ndarray:
    tab = np.empty(_POW_LEN, dtype=np.int64)
    v = 1
    for m in range(_POW_LEN):
        tab[m] = min(v, _POW_CLAMP)
        if v < _POW_CLAMP:
            v *= s
    return tab


_POW_CACHE: dict[int, np.ndarray] = {}


def _powers(s: int) -> np.ndarray:
    if s not in _POW_CACHE:
        _POW_CACHE[s] = _pow_table(s)
    return _POW_CACHE[s]


class MergeNode:
    """One band in the merge forest: a leaf singleton or a merge of two."""

    __slots__ = ("lo", "hi", "label", "k", "i", "j", "d", "left", "right", "inner")

    def __init__(self, lo, hi, label, k=0, i=0, j=0, d=-1, left=-1, right=-1, inner=()):
        self.lo = lo
        self.hi = hi
        self.label = label
        self.k = k
        self.i = i
        self.j = j
        self.d = d
        self.left = left
        self.right = right
        self.inner = inner

    @property
    def is_leaf(self) -> bool:
        return self.left < 0

    def __repr__(self):
        kind = "leaf" if self.is_leaf else f"merge(k={self.k}, D={self.d})"
        return f"MergeNode[{self.lo},{self.hi}] label={self.label} {kind}"


class MergeEvent(NamedTuple):
    k: int
    i: int
    j: int
    d: int
    new_label: float
    lo: int
    hi: int
    node: int


def _ordkey(i: int) -> int:
    """Scan order 0, -1, 1, -2, 2, ...: negative indices precede positive."""
    return 2 * i if i >= 0 else -2 * i - 1


def _ord_decode(key: int) -> int:
    return key // 2 if key % 2 == 0 else -(key + 1) // 2


class BandPartition:
    """Snapshot of the band structure after some number of merge steps."""

    __slots__ = ("params", "lo", "hi", "starts", "ends", "labels", "node_ids",
                 "nodes", "events", "step", "terminal", "source")

    def __init__(self, params, lo, hi, starts, ends, labels, node_ids,
                 nodes, events, step, terminal, source):
        self.params = params
        self.lo = lo
        self.hi = hi
        self.starts = np.asarray(starts, dtype=np.int64)
        self.ends = np.asarray(ends, dtype=np.int64)
        self.labels = tuple(labels)
        self.node_ids = tuple(node_ids)
        self.nodes = nodes
        self.events = tuple(events)
        self.step = step
        self.terminal = terminal
        self.source = source

    @property
    def n_bands(self) -> int:
        return self.starts.size

    def position_of(self, index: int) -> int:
        if not self.lo <= index <= self.hi:
            raise BandError(f"index {index} outside window [{self.lo}, {self.hi}]")
        pos = int(np.searchsorted(self.starts, index, side="right")) - 1
        return pos

    def origin_position(self) -> int:
        return self.position_of(0)

    def interval(self, pos: int) -> tuple[int, int]:
        return int(self.starts[pos]), int(self.ends[pos])

    def label_at(self, pos: int) -> float:
        return self.labels[pos]

    def censored(self, pos: int) -> bool:
        return self.starts[pos] == self.lo or self.ends[pos] == self.hi

    def position_of_enum(self, m: int) -> int:
        pos = self.origin_position() + m
        if not 0 <= pos < self.n_bands:
            raise BandError(f"band B_{m} outside window")
        return pos

    def enum_of_position(self, pos: int) -> int:
        return pos - self.origin_position()

    def node_at(self, pos: int) -> Optional[MergeNode]:
        nid = self.node_ids[pos]
        return None if nid is None else self.nodes[nid]

    def inner_band(self, code: int) -> "InnerBand":
        """Resolve an inner-band code: >=0 is a node id, <0 an implicit
        label-1 singleton swallowed without a materialized node."""
        if code >= 0:
            node = self.nodes[code]
            return InnerBand(node.lo, node.hi, node.label, node.is_leaf, code)
        x = self.lo + (-code - 1)
        return InnerBand(x, x, int(self.source.values[x - self.lo]), True, code)

    def clamped_labels(self) -> np.ndarray:
        return np.fromiter(
            (int(l) if l != INF else _LABEL_CAP for l in self.labels),
            np.int64, self.n_bands)

    def same_intervals(self, other: "BandPartition") -> bool:
        return (np.array_equal(self.starts, other.starts)
                and np.array_equal(self.ends, other.ends))

    def same_bands(self, other: "BandPartition") -> bool:
        return self.same_intervals(other) and self.labels == other.labels


class BandInfo(NamedTuple):
    m: int
    lo: int
    hi: int
    label: float
    censored: bool


class InnerBand(NamedTuple):
    lo: int
    hi: int
    label: float
    leaf: bool
    code: int


def enumerate_bands(p: BandPartition) -> list[BandInfo]:
    """Bands indexed by enumeration distance: B_0 contains the origin."""
    pos0 = p.origin_position()
    out = []
    for pos in range(p.n_bands):
        lo, hi = p.interval(pos)
        out.append(BandInfo(pos - pos0, lo, hi, p.labels[pos], p.censored(pos)))
    return out


# ---------------------------------------------------------------------------
# merge engine


class _Engine:
    def __init__(self, params: MergeParams, seq: StretchSequence):
        if not seq.is_integral:
            raise BandError("band engine requires integral stretches")
        self.params = params
        self.seq = seq
        self.lo, self.hi = seq.window
        vals = seq.values
        self.values = vals
        self.total_bands = vals.size
        self.k = 1
        self.nodes: list[MergeNode] = []
        self.events: list[MergeEvent] = []
        # candidates: interior bands of label >= 2, sorted by position
        big = np.flatnonzero(vals >= 2.0) + self.lo
        self.c_start: list[int] = []
        self.c_end: list[int] = []
        self.c_label: list[float] = []
        self.c_clamped: list[int] = []
        self.c_rank: list[int] = []
        self.c_node: list[int] = []
        self.boundary: list[tuple[int, int, float, int]] = []
        for x in big.tolist():
            lab = INF if math.isinf(vals[x - self.lo]) else int(vals[x - self.lo])
            nid = self._new_leaf(x, lab)
            if x == self.lo or x == self.hi:
                self.boundary.append((x, x, lab, nid))
            else:
                self.c_start.append(x)
                self.c_end.append(x)
                self.c_label.append(lab)
                self.c_clamped.append(_LABEL_CAP if lab == INF else int(lab))
                self.c_rank.append(x - self.lo)
                self.c_node.append(nid)
        self.label_hist: dict[int, int] = {}
        for c in self.c_clamped:
            self.label_hist[c] = self.label_hist.get(c, 0) + 1
        self.inf_swallowed: list[int] = []

    @classmethod
    def from_partition(cls, p: BandPartition) -> "_Engine":
        eng = cls.__new__(cls)
        eng.params = p.params
        eng.seq = p.source
        eng.lo, eng.hi = p.lo, p.hi
        eng.values = p.source.values
        eng.total_bands = p.n_bands
        eng.k = p.step
        eng.nodes = list(p.nodes)
        eng.events = list(p.events)
        eng.c_start, eng.c_end, eng.c_label, eng.c_rank, eng.c_node = [], [], [], [], []
        eng.c_clamped = []
        eng.boundary = []
        for pos in range(p.n_bands):
            lab = p.labels[pos]
            if lab < 2:
                continue
            lo, hi = p.interval(pos)
            nid = p.node_ids[pos]
            if nid is None:
                nid = eng._new_leaf(lo, lab)
            if p.censored(pos):
                eng.boundary.append((lo, hi, lab, nid))
            else:
                eng.c_start.append(lo)
                eng.c_end.append(hi)
                eng.c_label.append(lab)
                eng.c_clamped.append(_LABEL_CAP if lab == INF else int(lab))
                eng.c_rank.append(pos)
                eng.c_node.append(nid)
        eng.label_hist = {}
        for c in eng.c_clamped:
            eng.label_hist[c] = eng.label_hist.get(c, 0) + 1
        eng.inf_swallowed = []
        return eng

    def _new_leaf(self, x: int, label: float | None = None) -> int:
        if label is None:
            v = self.values[x - self.lo]
            label = INF if math.isinf(v) else int(v)
        self.nodes.append(MergeNode(x, x, label))
        return len(self.nodes) - 1

    def _discount(self, one_plus_d: int) -> int:
        base = self.params.s ** self.params.d_inv
        t, x = 0, base
        while x <= one_plus_d:
            t += 1
            x *= base
        return t

    def _valid_pairs(self, rank: np.ndarray, lab: np.ndarray) -> np.ndarray:
        """All unordered admissible band pairs as an array of index pairs.

        A pair is admissible iff |rank difference| < s^(min(label)-1), so
        pairs with a small minimum label are confined to a rank window while
        pairs of two sufficiently large labels are admissible at any distance
        within the window.
        """
        s = self.params.s
        hi_thr = 2
        while s ** (hi_thr - 1) <= self.total_bands:
            hi_thr += 1
        hist = self.label_hist
        n_high = sum(c for l, c in hist.items() if l >= hi_thr)
        chunks = []
        if n_high >= 2:
            high = (lab >= hi_thr).nonzero()[0]
            ha, hb = np.triu_indices(n_high, k=1)
            pair = np.empty((ha.size, 2), dtype=np.int64)
            pair[:, 0] = high[ha]
            pair[:, 1] = high[hb]
            chunks.append(pair)
        for level in range(2, hi_thr):
            n_src = hist.get(level, 0)
            if n_src == 0:
                continue
            n_tgt = sum(c for l, c in hist.items() if l >= level)
            if n_tgt < 2 and n_src == n_tgt:
                continue
            src = (lab == level).nonzero()[0]
            tgt = (lab >= level).nonzero()[0]
            span = s ** (level - 1)
            tgt_ranks = rank[tgt]
            src_ranks = rank[src]
            lo = tgt_ranks.searchsorted(src_ranks - (span - 1))
            hi = tgt_ranks.searchsorted(src_ranks + span, side="left")
            counts = hi - lo
            total = int(counts.sum())
            if total == 0:
                continue
            a_rep = np.repeat(src, counts)
            offsets = np.arange(total) - np.repeat(counts.cumsum() - counts, counts)
            b_flat = tgt[np.repeat(lo, counts) + offsets]
            keep = a_rep != b_flat
            # same-level pairs appear in both orientations: keep one
            keep &= (lab[b_flat] > level) | (a_rep < b_flat)
            total = int(keep.sum())
            if total == 0:
                continue
            pair = np.empty((total, 2), dtype=np.int64)
            pair[:, 0] = a_rep[keep]
            pair[:, 1] = b_flat[keep]
            chunks.append(pair)
        if not chunks:
            return np.empty((0, 2), dtype=np.int64)
        if len(chunks) == 1:
            return chunks[0]
        return np.concatenate(chunks, axis=0)

    @staticmethod
    def _index_key(start, end, floor_abs):
        """Smallest scan key of an index in [start, end] with |index| >= floor_abs."""
        m = np.maximum(floor_abs, 0)
        ml = np.maximum(m, 1)
        r_lo = np.maximum(start, m)
        key_r = np.where(r_lo <= end, 2 * r_lo, _BIGKEY)
        l_hi = np.minimum(end, -ml)
        key_l = np.where(l_hi >= start, -2 * l_hi - 1, _BIGKEY)
        return np.minimum(key_r, key_l)

    def _outward_order(self) -> list[int]:
        """Candidate indices ordered by the scan key of their closest index
        to zero (ties resolved left-first, matching |i+0.1| order)."""
        import bisect
        B = len(self.c_start)
        pr = bisect.bisect_left(self.c_end, 0)
        pl = pr - 1
        order = []
        while pl >= 0 or pr < B:
            if pl < 0:
                order.append(pr)
                pr += 1
                continue
            if pr >= B:
                order.append(pl)
                pl -= 1
                continue
            kl = -2 * self.c_end[pl] - 1 if self.c_end[pl] < 0 else 0
            kr = 2 * self.c_start[pr] if self.c_start[pr] > 0 else 0
            if kl <= kr:
                order.append(pl)
                pl -= 1
            else:
                order.append(pr)
                pr += 1
        return order

    def _minabs(self, t: int) -> int:
        s0, e0 = self.c_start[t], self.c_end[t]
        if s0 <= 0 <= e0:
            return 0
        return min(abs(s0), abs(e0))

    def _pair_key(self, t: int, floor_abs: int) -> int:
        """Smallest scan key of an index of band t with |index| >= floor_abs."""
        s0, e0 = self.c_start[t], self.c_end[t]
        key = _BIGKEY
        r_lo = max(s0, floor_abs)
        if r_lo <= e0:
            key = 2 * r_lo
        l_hi = min(e0, -max(floor_abs, 1))
        if l_hi >= s0:
            key = min(key, -2 * l_hi - 1)
        return key

    def find(self):
        """Locate the next merging indices, or None at the local fixpoint.

        Scans i by increasing |i+0.1| for the first index with an admissible
        partner j, |j| <= |i|; prefers the pair as-is when the bands are
        within (12 s)^2 of each other and otherwise hunts for a nearby
        short-range pair before falling back.

        This is a lazy outward sweep with monotone early exit; it delegates
        to the vectorized :meth:`_find_full` when the chosen pair is not
        short-range (the only case where better candidates enter).
        """
        B = len(self.c_start)
        if B < 2:
            return None
        s = self.params.s
        hi_thr = 2
        while s ** (hi_thr - 1) <= self.total_bands:
            hi_thr += 1
        # rank window for pairs with a given minimum label, clamped to "all"
        win = [0, 0] + [s ** (m - 1) for m in range(2, hi_thr)]
        win += [self.total_bands + 1]
        clamped = self.c_clamped
        ranks = self.c_rank
        order = self._outward_order()
        mabs = [self._minabs(t) for t in order]

        best_key = _BIGKEY
        best_band = -1
        for oi, a in enumerate(order):
            ka = mabs[oi] * 2 - 1 if mabs[oi] else 0
            if ka >= best_key:
                break
            la = clamped[a]
            ra = ranks[a]
            wa = win[min(la, hi_thr)]
            sa, ea = self.c_start[a], self.c_end[a]
            amax = max(abs(sa), abs(ea))
            for oj, b in enumerate(order):
                mb = mabs[oj]
                if 2 * mb - 1 >= best_key or mb > amax:
                    break
                if b == a:
                    continue
                m = min(la, clamped[b])
                if abs(ra - ranks[b]) >= win[min(m, hi_thr)]:
                    continue
                key = self._pair_key(a, mb)
                if key < best_key:
                    best_key = key
                    best_band = a
                break
        if best_band < 0:
            return None
        ai = best_band
        i_star = _ord_decode(best_key)
        cap = abs(i_star)

        # nearest admissible j over A*'s partners: band distance first,
        # then scan order -- close bands must combine first
        la = clamped[ai]
        ra = ranks[ai]
        best_j = None
        wa = win[min(la, hi_thr)]
        for side in (-1, 1):
            t = ai + side
            while 0 <= t < B:
                dr = abs(ranks[t] - ra)
                if dr >= wa:
                    break
                if best_j is not None and dr - 1 > best_j[0]:
                    break
                m = min(la, clamped[t])
                if dr < win[min(m, hi_thr)] and self._minabs(t) <= cap:
                    cand = (dr - 1, self._pair_key(t, 0), t)
                    if best_j is None or cand < best_j:
                        best_j = cand
                    break
                t += side
        if best_j is None:
            return None
        d_ab, jkey, bj = best_j
        j_star = _ord_decode(jkey)
        if 1 + d_ab < self.params.near_limit:
            return i_star, j_star, ai, bj
        return self._find_full()

    def _find_full(self):
        """Vectorized full search, including the short-range candidate hunt."""
        B = len(self.c_start)
        if B < 2:
            return None
        start = np.fromiter(self.c_start, np.int64, B)
        end = np.fromiter(self.c_end, np.int64, B)
        rank = np.fromiter(self.c_rank, np.int64, B)
        lab = np.fromiter(self.c_clamped, np.int64, B)
        pairs = self._valid_pairs(rank, lab)
        if pairs.size == 0:
            return None
        pa, pb = pairs[:, 0], pairs[:, 1]

        minabs = np.where((start <= 0) & (end >= 0), 0,
                          np.minimum(np.abs(start), np.abs(end)))
        # scan key for i drawn from either side of each pair
        key_ab = self._index_key(start[pa], end[pa], minabs[pb])
        key_ba = self._index_key(start[pb], end[pb], minabs[pa])
        key = np.minimum(key_ab, key_ba)
        t = int(np.argmin(key))
        if key[t] >= _BIGKEY:
            return None
        ikey = int(min(key_ab[t], key_ba[t]))
        ai = int(pa[t]) if key_ab[t] <= key_ba[t] else int(pb[t])
        i_star = _ord_decode(ikey)
        cap = abs(i_star)

        # nearest admissible j with |j| <= |i*| over A*'s partners; band
        # distance first, then scan order -- close bands must combine first
        partner_mask = (pa == ai) | (pb == ai)
        partners = np.where(pa[partner_mask] == ai,
                            pb[partner_mask], pa[partner_mask])
        jr = np.maximum(start[partners], 0)
        jkey_r = np.where((jr <= end[partners]) & (jr <= cap), 2 * jr, _BIGKEY)
        jl = np.minimum(end[partners], -1)
        jkey_l = np.where((jl >= start[partners]) & (-jl <= cap), -2 * jl - 1, _BIGKEY)
        jkey = np.minimum(jkey_r, jkey_l)
        dpart = np.abs(rank[partners] - rank[ai]) - 1
        order_key = np.where(jkey >= _BIGKEY, _BIGKEY,
                             dpart * (1 << 31) + jkey)
        w = int(np.argmin(order_key))
        if order_key[w] >= _BIGKEY:      # defensive; key construction implies a j exists
            return None
        bj = int(partners[w])
        j_star = _ord_decode(int(jkey[w]))

        near = self.params.near_limit
        d_ab = abs(int(rank[ai]) - int(rank[bj])) - 1
        if 1 + d_ab < near:
            return i_star, j_star, ai, bj

        # hunt for a short-range pair close to i or j
        dpair = np.abs(rank[pa] - rank[pb]) - 1
        close_pair = (1 + dpair) < near
        ra, rb = int(rank[ai]), int(rank[bj])

        def near_anchor(u):
            return (u == ai or u == bj
                    or abs(int(rank[u]) - ra) < near
                    or abs(int(rank[u]) - rb) < near)

        bestkey = self._index_key(start, end, np.zeros(B, dtype=np.int64))
        best = None
        for idx in np.flatnonzero(close_pair).tolist():
            u, v = int(pa[idx]), int(pb[idx])
            for jj, ii in ((u, v), (v, u)):
                if not near_anchor(jj):
                    continue
                cand = (int(bestkey[jj]), int(dpair[idx]), int(bestkey[ii]), ii, jj)
                if best is None or cand < best:
                    best = cand
        if best is not None:
            jkey0, _, ikey0, v, u = best
            return _ord_decode(ikey0), _ord_decode(jkey0), v, u
        return i_star, j_star, ai, bj

    def _collect_inner(self, l: int, r: int) -> tuple[list[int], bool]:
        """Inner band ids, left to right; swallowed label-1 singletons are
        encoded as negative window-relative codes instead of real nodes."""
        ids: list[int] = []
        has_inf = False
        cursor = self.c_end[l] + 1
        for t in range(l + 1, r):
            ids.extend(range(-(cursor - self.lo) - 1,
                             -(self.c_start[t] - self.lo) - 1, -1))
            if self.c_label[t] == INF:
                has_inf = True
            ids.append(self.c_node[t])
            cursor = self.c_end[t] + 1
        ids.extend(range(-(cursor - self.lo) - 1,
                         -(self.c_start[r] - self.lo) - 1, -1))
        return ids, has_inf

    def merge(self, i: int, j: int, a: int, b: int) -> None:
        l, r = (a, b) if self.c_start[a] < self.c_start[b] else (b, a)
        d = self.c_rank[r] - self.c_rank[l] - 1
        disc = self._discount(1 + d)
        lab_l, lab_r = self.c_label[l], self.c_label[r]
        inner, has_inf = self._collect_inner(l, r)
        if lab_l == INF or lab_r == INF:
            new_label: float = INF
        else:
            new_label = lab_l + lab_r - disc
        if has_inf and new_label != INF:
            # swallowing the pinned band keeps the merged label infinite;
            # the label-update formula only sees the two finite partners
            new_label = INF
            self.inf_swallowed.append(self.k)
        lo, hi = self.c_start[l], self.c_end[r]
        node = MergeNode(lo, hi, new_label, k=self.k + 1, i=i, j=j, d=d,
                         left=self.c_node[l], right=self.c_node[r], inner=tuple(inner))
        self.nodes.append(node)
        nid = len(self.nodes) - 1
        self.events.append(MergeEvent(self.k, i, j, d, new_label, lo, hi, nid))

        hist = self.label_hist
        for t in range(l, r + 1):
            c = self.c_clamped[t]
            hist[c] -= 1
            if not hist[c]:
                del hist[c]
        new_clamped = _LABEL_CAP if new_label == INF else int(new_label)
        hist[new_clamped] = hist.get(new_clamped, 0) + 1
        drop = self.c_rank[r] - self.c_rank[l]
        self.c_start[l:r + 1] = [lo]
        self.c_end[l:r + 1] = [hi]
        self.c_label[l:r + 1] = [new_label]
        self.c_clamped[l:r + 1] = [_LABEL_CAP if new_label == INF else int(new_label)]
        self.c_node[l:r + 1] = [nid]
        self.c_rank[l + 1:r + 1] = []
        for t in range(l + 1, len(self.c_rank)):
            self.c_rank[t] -= drop
        self.total_bands -= drop
        self.k += 1

    def candidate_containing(self, index: int) -> int:
        import bisect
        pos = bisect.bisect_right(self.c_start, index) - 1
        if pos < 0 or self.c_end[pos] < index:
            raise BandError(f"index {index} not inside a mergeable band")
        return pos

    def run(self, max_steps: Optional[int]) -> bool:
        steps = 0
        limit = max_steps if max_steps is not None else self.total_bands + 1
        while steps < limit:
            found = self.find()
            if found is None:
                return True
            self.merge(*found)
            steps += 1
        return self.find() is None

    def snapshot(self, terminal: bool) -> BandPartition:
        explicit = sorted(
            [(self.c_start[t], self.c_end[t], self.c_label[t], self.c_node[t])
             for t in range(len(self.c_start))] + self.boundary)
        starts, ends, labels, node_ids = [], [], [], []
        cursor = self.lo
        vals = self.values

        def push_singletons(upto):
            for x in range(cursor, upto):
                starts.append(x)
                ends.append(x)
                labels.append(int(vals[x - self.lo]))
                node_ids.append(None)

        for (s0, e0, lab, nid) in explicit:
            push_singletons(s0)
            starts.append(s0)
            ends.append(e0)
            labels.append(lab)
            node_ids.append(nid)
            cursor = e0 + 1
        push_singletons(self.hi + 1)
        cursor = self.hi + 1
        part = BandPartition(self.params, self.lo, self.hi, starts, ends, labels,
                             node_ids, self.nodes, self.events, self.k, terminal,
                             self.seq)
        if part.n_bands != self.total_bands:
            raise BandError("internal band count mismatch")
        return part


# ---------------------------------------------------------------------------
# partition-level operations


def init_bands(seq: StretchSequence, params: MergeParams) -> BandPartition:
    """Step-1 partition: every index its own band, labelled by its stretch."""
    return _Engine(params, seq).snapshot(terminal=False)


def run_to_fixpoint(seq: StretchSequence, params: MergeParams,
                    max_steps: Optional[int] = None) -> BandPartition:
    eng = _Engine(params, seq)
    terminal = eng.run(max_steps)
    return eng.snapshot(terminal)


def merge_step(p: BandPartition) -> BandPartition:
    eng = _Engine.from_partition(p)
    found = eng.find()
    if found is None:
        return BandPartition(p.params, p.lo, p.hi, p.starts, p.ends, p.labels,
                             p.node_ids, p.nodes, p.events, p.step, True, p.source)
    eng.merge(*found)
    return eng.snapshot(eng.find() is None)


def find_merging_indices(p: BandPartition) -> Optional[tuple[int, int]]:
    found = _Engine.from_partition(p).find()
    return None if found is None else (found[0], found[1])


def count_between(p: BandPartition, i: int, j: int) -> int:
    pi, pj = p.position_of(i), p.position_of(j)
    if pi == pj:
        raise BandError("indices lie in the same band")
    return abs(pi - pj) - 1


def candidate_valid(p: BandPartition, i: int, j: int) -> bool:
    pi, pj = p.position_of(i), p.position_of(j)
    if pi == pj:
        return False
    if p.censored(pi) or p.censored(pj):
        return False
    la, lb = p.labels[pi], p.labels[pj]
    m = min(la, lb)
    if m == INF or m < 2:
        return False
    return 1 + abs(pi - pj) - 1 < p.params.power(int(m) - 1)


def replay(seq: StretchSequence, params: MergeParams,
           events: Sequence[MergeEvent]) -> BandPartition:
    """Re-apply a recorded merge history without searching."""
    eng = _Engine(params, seq)
    for ev in events:
        a = eng.candidate_containing(ev.i)
        b = eng.candidate_containing(ev.j)
        eng.merge(ev.i, ev.j, a, b)
    return eng.snapshot(eng.find() is None)


# ---------------------------------------------------------------------------
# segments and regularity


class Segment(NamedTuple):
    left_pos: int
    right_pos: int
    lo: int            # first index strictly inside (lo > hi means empty)
    hi: int
    band_span: int     # number of bands strictly between
    interior: bool


@dataclass
class SegmentList:
    segments: list[Segment]
    boundary_limited: bool

    def __iter__(self):
        return iter(self.segments)

    def __len__(self):
        return len(self.segments)


def segments(p: BandPartition, l: int) -> SegmentList:
    """Open intervals strictly between consecutive bands of label >= l."""
    labs = p.clamped_labels()
    pos = np.flatnonzero(labs >= l)
    segs = []
    for a, b in zip(pos[:-1], pos[1:]):
        a, b = int(a), int(b)
        segs.append(Segment(a, b, int(p.ends[a]) + 1, int(p.starts[b]) - 1,
                            b - a - 1, not (p.censored(a) or p.censored(b))))
    return SegmentList(segs, boundary_limited=pos.size < 2)


@dataclass
class RegularityReport:
    ok: bool
    upper_factor: int
    max_level: int
    upper_violations: list[tuple[int, int, int, int]]  # (l, pos_left, pos_right, dist)
    lower_violations: list[tuple[int, int, int, int]]


def is_regular(p: BandPartition, upper_factor: int = 12) -> RegularityReport:
    """Check the per-level spacing window on interior neighbouring bands.

    The lower bound s^(l-1) can only fail through a bug (such bands would
    have merged); upper-bound violations are what regularisation repairs.
    """
    labs = p.clamped_labels()
    interior = np.ones(p.n_bands, dtype=bool)
    interior[0] = p.starts[0] != p.lo
    interior[-1] = p.ends[-1] != p.hi
    upper, lower = [], []
    max_level = 1
    l = 2
    while True:
        pos = np.flatnonzero((labs >= l) & interior)
        if pos.size < 2:
            break
        max_level = l
        span = p.params.power(l - 1)
        for a, b in zip(pos[:-1], pos[1:]):
            dist = int(b - a)
            if dist < span:
                lower.append((l, int(a), int(b), dist))
            elif dist >= upper_factor * span:
                upper.append((l, int(a), int(b), dist))
        l += 1
    return RegularityReport(not upper and not lower, upper_factor, max_level,
                            upper, lower)


# ---------------------------------------------------------------------------
# generators


def _generator_leaves(nodes: list[MergeNode], nid: int) -> list[int]:
    node = nodes[nid]
    if node.is_leaf:
        return [node.lo]
    return _generator_leaves(nodes, node.left) + _generator_leaves(nodes, node.right)


def generators(p: BandPartition, m: int) -> list[int]:
    """1-generators of band B_m: endpoints of the merge-partner chain."""
    pos = p.position_of_enum(m)
    node = p.node_at(pos)
    if node is None:
        return [int(p.starts[pos])]
    nid = p.node_ids[pos]
    return sorted(_generator_leaves(p.nodes, nid))


def _maximal_leaves(nodes: list[MergeNode], nid: int) -> list[int]:
    node = nodes[nid]
    if node.is_leaf:
        return [node.lo]
    ll = nodes[node.left].label
    rl = nodes[node.right].label
    out: list[int] = []
    if ll >= rl:
        out += _maximal_leaves(nodes, node.left)
    if rl >= ll:
        out += _maximal_leaves(nodes, node.right)
    return out


def maximal_generator(p: BandPartition, m: int) -> int:
    """Smallest generator whose containing band always had the larger label."""
    pos = p.position_of_enum(m)
    nid = p.node_ids[pos]
    if nid is None:
        return int(p.starts[pos])
    return min(_maximal_leaves(p.nodes, nid))


@dataclass
class GeneratorBound:
    log_sum: int
    weight: float
    ok: bool


def generator_log_bound(p: BandPartition, m: int) -> GeneratorBound:
    """Exact audit of sum floor(log2(gap+1)) <= (3 log2(s)/(2 d) + 1/2) * weight."""
    gens = generators(p, m)
    weight = sum(p.source[i] for i in gens)
    lhs = sum((g2 - g1 + 1).bit_length() - 1 for g1, g2 in zip(gens[:-1], gens[1:]))
    if math.isinf(weight):
        return GeneratorBound(lhs, weight, True)
    w = int(weight)
    # lhs <= w*(3*log2(s)*d_inv + 1)/2  <=>  2^(2*lhs - w) <= s^(3*w*d_inv)
    e = 2 * lhs - w
    ok = e <= 0 or 2 ** e <= p.params.s ** (3 * w * p.params.d_inv)
    return GeneratorBound(lhs, weight, ok)


def raise_maximal_generator(p: BandPartition, m: int) -> StretchSequence:
    """Increment the stretch at B_m's maximal generator by one.

    Requires every band of strictly larger label to sit at enumeration
    distance >= s^label; under that condition the re-merged structure is
    unchanged and only B_m's label rises by one.
    """
    pos = p.position_of_enum(m)
    label = p.labels[pos]
    if label == INF:
        raise BandError("cannot raise an infinite-label band")
    span = p.params.power(int(label))
    labs = p.clamped_labels()
    others = np.flatnonzero(labs > int(label))
    for o in others.tolist():
        if abs(o - pos) < span:
            raise BandError(
                f"band of label {p.labels[o]} at enumeration distance "
                f"{abs(o - pos)} < s^{label}")
    g = maximal_generator(p, m)
    return p.source.with_value(g, p.source[g] + 1)


# ---------------------------------------------------------------------------
# regularisation


def _promotion_targets(gap: int, stride: int) -> list[int]:
    count = gap // stride - 1
    return [stride * (t + 1) for t in range(count)]


def make_regular(seq: StretchSequence, params: MergeParams,
                 upper_factor: int = 6,
                 max_steps: Optional[int] = None) -> StretchSequence:
    """Raise stretches until neighbouring label->=l bands sit within
    [s^(l-1), upper_factor*s^(l-1)) for every level, without changing any band.

    Works level by level: a too-wide level-l gap is split by promoting
    label-(l-1) bands between the pair, one raise of the maximal generator
    each.  Band intervals are re-verified after every level.
    """
    part = run_to_fixpoint(seq, params, max_steps)
    if not part.terminal:
        raise BandError("merge did not reach a fixpoint within budget")
    base = part
    level = 2
    while True:
        labs = part.clamped_labels()
        interior = np.ones(part.n_bands, dtype=bool)
        interior[0] = part.starts[0] != part.lo
        interior[-1] = part.ends[-1] != part.hi
        pos = np.flatnonzero((labs >= level) & interior)
        if pos.size < 2:
            break
        span = params.power(level - 1)
        stride = (5 * span) // 2
        lower_pos = np.flatnonzero((labs == level - 1) & interior)
        changed = False
        vals = np.array(part.source.values)
        for a, b in zip(pos[:-1].tolist(), pos[1:].tolist()):
            gap = b - a
            if gap < upper_factor * span:
                continue
            placed = [a, b]
            for off in _promotion_targets(gap, stride):
                target = a + off
                cands = lower_pos[(lower_pos > a) & (lower_pos < b)]
                if cands.size == 0:
                    raise WindowTooSmallError(
                        f"window too small to regularize level {level}")
                order = np.argsort(np.abs(cands - target))
                chosen = None
                for c in cands[order].tolist():
                    if abs(c - target) > span:
                        break
                    if all(abs(c - q) >= span for q in placed):
                        chosen = c
                        break
                if chosen is None:
                    raise WindowTooSmallError(
                        f"window too small to regularize level {level}")
                placed.append(chosen)
                g = min(_maximal_leaves(part.nodes, part.node_ids[chosen])) \
                    if part.node_ids[chosen] is not None else int(part.starts[chosen])
                vals[g - part.lo] += 1
                changed = True
        if changed:
            new_seq = StretchSequence(part.lo, vals)
            new_part = run_to_fixpoint(new_seq, params, max_steps)
            if not new_part.same_intervals(base):
                raise BandError("regularisation altered the band structure")
            part = new_part
        level += 1
    return part.source


# ---------------------------------------------------------------------------
# very regular bands


@dataclass
class VRFailure:
    node: Optional[int]
    reason: str
    fixable: bool


@dataclass
class VRDecomposition:
    q: int
    left_label: float
    right_label: float
    separator_count: int


@dataclass
class VRReport:
    ok: bool
    failures: list[VRFailure]
    decompositions: dict[int, VRDecomposition]


def _split_by(members: list[int], labels: list[float], level: int):
    """Split member lists at entries of label >= level; yields the gaps."""
    run: list[int] = []
    for idx, lab in zip(members, labels):
        if lab >= level:
            yield run
            run = []
        else:
            run.append(idx)
    yield run


def very_regular_report(p: BandPartition) -> VRReport:
    nodes = p.nodes
    params = p.params
    failures: list[VRFailure] = []
    decomps: dict[int, VRDecomposition] = {}
    memo: dict[int, bool] = {}

    def check_segment(members: list[int], q: int, owner: int) -> bool:
        if q == 1:
            if members:
                failures.append(VRFailure(owner, "nonempty 1 segment", False))
                return False
            return True
        width = len(members) + 1
        span = params.power(q - 1)
        if width < span:
            failures.append(VRFailure(
                owner, f"{q} segment too narrow: width {width} < {span}", False))
            return False
        ok = True
        if width >= 12 * span:
            failures.append(VRFailure(
                owner, f"{q} segment too wide: width {width} >= {12 * span}", True))
            ok = False
        labs = [p.inner_band(w).label for w in members]
        for sub in _split_by(members, labs, q - 1):
            ok &= check_segment(sub, q - 1, owner)
        return ok

    def check_band(nid: int) -> bool:
        if nid in memo:
            return memo[nid]
        node = nodes[nid]
        if node.is_leaf:
            memo[nid] = True
            return True
        ok = check_band(node.left) & check_band(node.right)
        for w in node.inner:
            if w >= 0:
                ok &= check_band(w)
        labs = [p.inner_band(w).label for w in node.inner]
        if any(l == INF for l in labs):
            failures.append(VRFailure(nid, "infinite label inside merge interior", False))
            memo[nid] = False
            return False
        q = max((int(l) for l in labs), default=1)
        sep_count = sum(1 for l in labs if int(l) == q) if node.inner else 0
        if q == 1:
            if len(node.inner) + 1 > 12 * params.s:
                failures.append(VRFailure(
                    nid, f"{len(node.inner)} label-1 bands between partners "
                         f"exceeds 12s", True))
                ok = False
        else:
            if sep_count + 1 > 12 * params.s:
                failures.append(VRFailure(nid, "too many separator bands", True))
                ok = False
            for seg in _split_by(list(node.inner), labs, q):
                ok &= check_segment(seg, q, nid)
        decomps[nid] = VRDecomposition(q, nodes[node.left].label,
                                       nodes[node.right].label, sep_count)
        memo[nid] = ok
        return ok

    all_ok = True
    for pos in range(p.n_bands):
        nid = p.node_ids[pos]
        if nid is not None and not p.censored(pos):
            all_ok &= check_band(nid)
    return VRReport(all_ok, failures, decomps)


def is_very_regular(p: BandPartition) -> VRReport:
    return very_regular_report(p)


def _gap_capacity(params: MergeParams, q: int) -> int:
    if q == 1:
        return 12 * params.s - 1
    return (12 * params.s - 1) + 12 * params.s * (12 * params.power(q - 1) - 2)


def _plan_vr_promotions(p: BandPartition) -> dict[int, int]:
    """Promotion plan index -> new stretch value repairing sparse interiors."""
    nodes = p.nodes
    params = p.params
    promos: dict[int, int] = {}

    def plan_span(members: list[int], labels: list[int], level: int) -> None:
        if level <= 1:
            return
        span = params.power(level - 1)
        stride = (5 * span) // 2
        seps = [-1] + [t for t, l in enumerate(labels) if l >= level] + [len(members)]
        new_seps = []
        for a, b in zip(seps[:-1], seps[1:]):
            gap = b - a
            if gap < 12 * span:
                continue
            placed = [a, b] + new_seps
            for off in _promotion_targets(gap, stride):
                target = a + off
                order = sorted(range(len(members)),
                               key=lambda t: abs(t - target))
                chosen = None
                for t in order:
                    if abs(t - target) > span:
                        break
                    if labels[t] >= level or not p.inner_band(members[t]).leaf:
                        continue
                    if all(abs(t - q0) >= span for q0 in placed):
                        chosen = t
                        break
                if chosen is None:
                    raise BandError(
                        "very-regularisation blocked: no promotable band "
                        f"near rank {target} for level {level}")
                labels[chosen] = level
                promos[p.inner_band(members[chosen]).lo] = level
                placed.append(chosen)
                new_seps.append(chosen)
        all_seps = sorted(set(s for s in seps[1:-1] + new_seps))
        cuts = [-1] + all_seps + [len(members)]
        for a, b in zip(cuts[:-1], cuts[1:]):
            sub = list(range(a + 1, b))
            plan_span([members[t] for t in sub], [labels[t] for t in sub],
                      level - 1)

    def walk(nid: int) -> None:
        node = nodes[nid]
        if node.is_leaf:
            return
        walk(node.left)
        walk(node.right)
        for w in node.inner:
            if w >= 0:
                walk(w)
        labs = [p.inner_band(w).label for w in node.inner]
        if any(l == INF for l in labs):
            raise BandError("cannot repair a merge interior holding the pinned band")
        labels = [int(l) for l in labs]
        q = max(labels, default=1)
        while _gap_capacity(params, q) < len(node.inner):
            q += 1
        plan_span(list(node.inner), labels, q)

    for pos in range(p.n_bands):
        nid = p.node_ids[pos]
        if nid is not None and not p.censored(pos):
            walk(nid)
    return promos


def make_very_regular(seq: StretchSequence, params: MergeParams,
                      max_rounds: int = 6,
                      max_steps: Optional[int] = None) -> StretchSequence:
    """Raise swallowed stretches until every merge interior decomposes into
    properly spaced label-q separators and very regular q segments.

    Promotions only touch bands that are strictly inside some merge gap, so
    the final band intervals and final labels are provably unchanged; both
    are re-verified by re-running the engine after every round.
    """
    part = run_to_fixpoint(seq, params, max_steps)
    if not part.terminal:
        raise BandError("merge did not reach a fixpoint within budget")
    reg = is_regular(part)
    if reg.upper_violations or reg.lower_violations:
        raise BandError("make_very_regular requires a regular input sequence")
    for _ in range(max_rounds):
        report = very_regular_report(part)
        if report.ok:
            return part.source
        if any(not f.fixable for f in report.failures):
            bad = next(f for f in report.failures if not f.fixable)
            raise BandError(f"unrepairable very-regularity failure: {bad.reason}")
        promos = _plan_vr_promotions(part)
        if not promos:
            raise BandError("very-regularity violated but no promotion found")
        vals = np.array(part.source.values)
        for idx, lab in promos.items():
            if vals[idx - part.lo] >= lab:
                raise BandError("promotion would not raise the stretch")
            vals[idx - part.lo] = lab
        new_seq = StretchSequence(part.lo, vals)
        new_part = run_to_fixpoint(new_seq, params, max_steps)
        if not new_part.same_bands(part):
            raise BandError("very-regularisation altered bands or labels")
        part = new_part
    raise BandError("very-regularisation did not converge")


# ---------------------------------------------------------------------------
# simple bands, weights, diagnostics


def _node_simple(nodes: list[MergeNode], nid: int, near: int) -> bool:
    node = nodes[nid]
    if node.is_leaf:
        return True
    if 1 + node.d >= near:
        return False
    return _node_simple(nodes, node.left, near) and _node_simple(nodes, node.right, near)


def is_simple(p: BandPartition, m: int) -> bool:
    """True when every merge in the band's history was short-range."""
    pos = p.position_of_enum(m)
    nid = p.node_ids[pos]
    if nid is None:
        return True
    return _node_simple(p.nodes, nid, p.params.near_limit)


class BandWeight(NamedTuple):
    total: float
    general_bound_ok: Optional[bool]
    simple_bound_ok: Optional[bool]


def band_weight(p: BandPartition, m: int) -> BandWeight:
    """Total stretch over the band, with the label-driven upper bounds."""
    pos = p.position_of_enum(m)
    lo, hi = p.interval(pos)
    label = p.labels[pos]
    vals = p.source.values[lo - p.lo: hi - p.lo + 1]
    total = float(np.sum(vals))
    if math.isinf(total) or label == INF:
        return BandWeight(INF, None, None)
    l = int(label)
    w = int(total)
    general_ok = w <= p.params.power(l - 1)
    simple_ok = None
    if l >= 2 and is_simple(p, m):
        simple_ok = 2 * w <= 2 * l + (13 * p.params.s) ** 2 * (l - 2)
    return BandWeight(total, general_ok, simple_ok)


@dataclass(frozen=True)
class BandDiagnostics:
    m: int
    r: int
    q: int
    sigma: int
    flat_n: int


def q_diagnostics(p: BandPartition, event: MergeEvent | int) -> BandDiagnostics:
    """(m, r, q, sigma, flat(n)) for one merge of a very regular band.

    Verifies m + r = n for q <= 8, the discounted identity with
    sigma in {-1, 0, 1}, q <= flat(n), and for m >= 4, q >= 3 the two
    extra scale inequalities used by the drilling decomposition.
    """
    nid = event.node if isinstance(event, MergeEvent) else int(event)
    node = p.nodes[nid]
    if node.is_leaf:
        raise BandError("not a merge event")
    report = very_regular_report(p)
    if nid not in report.decompositions:
        raise BandError("decomposition unavailable: band not reachable from partition")
    if not report.ok and any(f.node == nid for f in report.failures):
        raise BandError("decomposition unavailable: band is not very regular")
    dec = report.decompositions[nid]
    mm, rr = dec.left_label, dec.right_label
    if mm == INF or rr == INF or node.label == INF:
        raise BandError("diagnostics undefined for infinite labels")
    mm, rr, n = int(mm), int(rr), int(node.label)
    q = dec.q
    params = p.params
    fn = flat_label_scale(n, params)
    sigma = mm + rr - (q // params.d_inv) - n
    if q <= 8 and mm + rr != n:
        raise BandError(f"m+r != n for q={q}: {mm}+{rr} != {n}")
    if sigma not in (-1, 0, 1):
        raise BandError(f"sigma {sigma} outside {{-1,0,1}}")
    if q > fn:
        raise BandError(f"q={q} exceeds flat(n)={fn}")
    if min(mm, rr) >= 4 and q >= 3:
        fm, fr = flat_label_scale(mm, params), flat_label_scale(rr, params)
        if fm + fr - (-(-q // 2)) > fn - 2:
            raise BandError("flat(m)+flat(r)-ceil(q/2) > flat(n)-2")
        big_m = max(fm, q - 1)
        if big_m + fr - q > fn - 3:
            raise BandError("max(flat(m),q-1)+flat(r)-q > flat(n)-3")
    return BandDiagnostics(mm, rr, q, sigma, fn)


# ---------------------------------------------------------------------------
# counting and statistics


def ordered_compositions(total: int) -> Iterator[tuple[int, ...]]:
    """All ordered tuples of positive integers summing to ``total``."""
    if not 1 <= total <= 20:
        raise BandError("composition enumeration supports 1 <= S <= 20")
    for k in range(total):
        for cuts in combinations(range(1, total), k):
            bounds = (0,) + cuts + (total,)
            yield tuple(b - a for a, b in zip(bounds[:-1], bounds[1:]))


def compositions_count(total: int) -> tuple[int, int]:
    """Closed form 2^(S-1) next to a brute-force enumeration count."""
    if not 1 <= total <= 20:
        raise BandError("composition enumeration supports 1 <= S <= 20")
    enumerated = sum(1 for _ in ordered_compositions(total))
    return 2 ** (total - 1), enumerated


def compositions_count_upto(total: int) -> tuple[int, int]:
    """Bound 2^S - 1 next to the enumeration of sums <= total."""
    enumerated = sum(compositions_count(s)[1] for s in range(1, total + 1))
    return 2 ** total - 1, enumerated


@dataclass
class DecayTable:
    levels: np.ndarray
    freqs: np.ndarray
    windows: int
    budget_exhausted: int

    def fitted_ratio(self) -> float:
        """Geometric decay ratio across the observed (freq > 0) range."""
        observed = np.flatnonzero(self.freqs > 0)
        if observed.size < 2:
            return 0.0
        lo, hi = observed[0], observed[-1]
        return float((self.freqs[hi] / self.freqs[lo]) ** (1.0 / (hi - lo)))


def label_decay_statistics(q: float, params: MergeParams, windows: int,
                           stream: np.random.Generator,
                           half_width: int = 200,
                           max_steps: Optional[int] = None) -> DecayTable:
    """Frequency, over sampled environments, that the origin ever lies in a
    band of label >= l.  Labels only grow along containment, so this is the
    distribution of the terminal label of the band containing 0.
    """
    width = 2 * half_width + 1
    counts: dict[int, int] = {}
    exhausted = 0
    for _ in range(windows):
        vals = stream.geometric(p=1.0 - q, size=width).astype(np.float64)
        if np.count_nonzero(vals >= 2.0) >= 2:
            seq = StretchSequence(-half_width, vals)
            part = run_to_fixpoint(seq, params, max_steps)
            if not part.terminal:
                exhausted += 1
            label = int(part.labels[part.origin_position()])
        else:
            label = int(vals[half_width])
        counts[label] = counts.get(label, 0) + 1
    top = max(counts)
    freqs = np.zeros(top + 1)
    for lab, c in counts.items():
        freqs[1: lab + 1] += c
    freqs /= windows
    return DecayTable(np.arange(top + 1), freqs, windows, exhausted)
