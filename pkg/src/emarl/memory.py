"""Episodic buffer: embedding keys to best-seen returns, with desirability
bookkeeping, nearest-neighbor recall in normalized key space, trajectory-
driven construction, LRU eviction, and full re-keying after embedder updates.

The brute-force scan is the reference lookup; a kd-tree with a pending list
accelerates large buffers and must return identical results (candidate
distances are always recomputed with the same arithmetic the scan uses).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

SIGMA_FLOOR = 1e-6
STATS_REFRESH_EVERY = 1000   # inserts between stat recomputations
_BRUTE_SIZE = 2048           # below this, skip the tree entirely
_REBUILD_PENDING = 256       # pending inserts that trigger a tree rebuild
_TIE_RTOL = 1e-9
_TIE_ATOL = 1e-15


def compute_delta(capacity: int, embed_dim: int, sigma_y: float = 1.0) -> float:
    """Match threshold sized so `capacity` cells of side 2*3*sigma tile the
    normalized key range: delta = (6*sigma)^k / capacity."""
    if capacity < 1 or embed_dim < 1 or sigma_y <= 0:
        raise ValueError("capacity, embed_dim must be >= 1 and sigma_y > 0")
    return (2.0 * 3.0 * sigma_y) ** embed_dim / capacity


@dataclass
class RecordView:
    slot: int
    x: np.ndarray
    y: np.ndarray
    h: float
    state: np.ndarray
    t_norm: float
    xi: int
    n_call: int
    n_xi: int
    last_recalled: int


@dataclass
class RecallResult:
    h: float
    xi: int
    n_call: int
    n_xi: int
    distance: float
    slot: int


class EpisodicBuffer:
    def __init__(self, capacity: int, embed_dim: int, state_dim: int,
                 use_index: bool = True):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.embed_dim = embed_dim
        self.state_dim = state_dim
        self.use_index = use_index
        cap = capacity + 1  # insert-then-evict needs one spare row
        self.x = np.zeros((cap, embed_dim))
        self.y = np.zeros((cap, embed_dim))
        self.h = np.zeros(cap)
        self.s = np.zeros((cap, state_dim))
        self.t_norm = np.zeros(cap)
        self.xi = np.zeros(cap, dtype=np.int64)
        self.n_call = np.zeros(cap, dtype=np.int64)
        self.n_xi = np.zeros(cap, dtype=np.int64)
        self.last_recalled = np.zeros(cap, dtype=np.int64)
        self.insert_idx = np.zeros(cap, dtype=np.int64)
        self.size = 0
        self.mu = np.zeros(embed_dim)
        self.sigma = np.ones(embed_dim)
        self._clock = 0
        self._insert_clock = 0
        self._inserts_since_stats = 0
        self._tree = None
        self._tree_slots = None
        self._tree_live = None
        self._slot_to_tree = np.full(cap, -1, dtype=np.int64)
        self._pending: list[int] = []

    def __len__(self) -> int:
        return self.size

    # -- normalization and stats ------------------------------------------

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mu) / self.sigma

    def _refresh_stats(self) -> None:
        if self.size > 0:
            self.mu = self.x[:self.size].mean(axis=0)
            self.sigma = np.maximum(self.x[:self.size].std(axis=0), SIGMA_FLOOR)
            self.y[:self.size] = (self.x[:self.size] - self.mu) / self.sigma
        else:
            self.mu = np.zeros(self.embed_dim)
            self.sigma = np.ones(self.embed_dim)
        self._inserts_since_stats = 0
        self._invalidate_index()

    # -- index plumbing ----------------------------------------------------

    def _invalidate_index(self) -> None:
        self._tree = None
        self._tree_slots = None
        self._tree_live = None
        self._slot_to_tree[:] = -1
        self._pending = []

    def _rebuild_tree(self) -> None:
        self._tree = cKDTree(self.y[:self.size].copy())
        self._tree_slots = np.arange(self.size)
        self._tree_live = np.ones(self.size, dtype=bool)
        self._slot_to_tree[:] = -1
        self._slot_to_tree[:self.size] = np.arange(self.size)
        self._pending = []

    def _mark_key_changed(self, slot: int) -> None:
        te = self._slot_to_tree[slot]
        if te >= 0:
            self._tree_live[te] = False
            self._slot_to_tree[slot] = -1
        if slot not in self._pending:
            self._pending.append(slot)

    def _drop_slot_from_index(self, slot: int) -> None:
        te = self._slot_to_tree[slot]
        if te >= 0:
            self._tree_live[te] = False
            self._slot_to_tree[slot] = -1
        if slot in self._pending:
            self._pending.remove(slot)

    def _move_slot_in_index(self, src: int, dst: int) -> None:
        te = self._slot_to_tree[src]
        if te >= 0:
            self._tree_slots[te] = dst
            self._slot_to_tree[dst] = te
            self._slot_to_tree[src] = -1
        if src in self._pending:
            self._pending[self._pending.index(src)] = dst

    # -- nearest neighbor ----------------------------------------------------

    def _row_distance(self, slot: int, q: np.ndarray) -> float:
        d = self.y[slot] - q
        return float(np.sqrt(np.sum(d * d)))

    def _distances(self, slots: np.ndarray, q: np.ndarray) -> np.ndarray:
        diff = self.y[slots] - q
        return np.sqrt(np.sum(diff * diff, axis=1))

    def _select_best(self, slots: np.ndarray, q: np.ndarray):
        """Argmin by distance over candidate slots, ties to lowest insertion index."""
        d = self._distances(slots, q)
        best = np.min(d)
        ties = slots[d == best]
        if ties.size > 1:
            winner = int(ties[np.argmin(self.insert_idx[ties])])
        else:
            winner = int(ties[0])
        return winner, self._row_distance(winner, q)

    def _nn_brute(self, q: np.ndarray):
        return self._select_best(np.arange(self.size), q)

    def _tree_candidates(self, q: np.ndarray) -> np.ndarray:
        """All live tree slots whose distance could reach the live minimum
        (including exact ties)."""
        n_tree = self._tree.n
        k = 2
        while True:
            k_eff = min(k, n_tree)
            d, idx = self._tree.query(q, k=k_eff)
            d = np.atleast_1d(d)
            idx = np.atleast_1d(idx)
            live = self._tree_live[idx]
            if live.any():
                d_best = float(d[live][0])
                radius = d_best * (1.0 + _TIE_RTOL) + _TIE_ATOL
                if radius < float(d[-1]) or k_eff == n_tree:
                    ball = np.asarray(self._tree.query_ball_point(q, radius),
                                      dtype=np.int64)
                    if ball.size == 0:
                        return np.empty(0, dtype=np.int64)
                    return self._tree_slots[ball[self._tree_live[ball]]]
            if k_eff == n_tree:
                return np.empty(0, dtype=np.int64)
            k *= 4

    def nearest_neighbor(self, q: np.ndarray):
        """Global nearest record in normalized key space: (RecordView, distance)
        or None on an empty buffer."""
        if self.size == 0:
            return None
        q = np.asarray(q, dtype=np.float64)
        slot, dist = self._nn_query(q)
        return self.record(slot), dist

    def _nn_query(self, q: np.ndarray):
        if not self.use_index or self.size <= _BRUTE_SIZE:
            return self._nn_brute(q)
        if self._tree is None or len(self._pending) > _REBUILD_PENDING:
            self._rebuild_tree()
        cands = self._tree_candidates(q)
        if self._pending:
            cands = np.concatenate([cands, np.asarray(self._pending, dtype=np.int64)])
        if cands.size == 0:
            return self._nn_brute(q)
        return self._select_best(cands, q)

    def _nn_batch_brute(self, Q: np.ndarray, slots, dists) -> None:
        nq = Q.shape[0]
        if self.size > 4096:
            for r in range(nq):
                slots[r], dists[r] = self._nn_brute(Q[r])
            return
        allslots = np.arange(self.size)
        for lo in range(0, nq, 512):
            hi = min(lo + 512, nq)
            d = np.sqrt(np.sum((Q[lo:hi, None, :] - self.y[None, :self.size, :]) ** 2,
                               axis=2))
            best = d.min(axis=1)
            tie_counts = (d == best[:, None]).sum(axis=1)
            first = d.argmin(axis=1)
            for r in range(lo, hi):
                if tie_counts[r - lo] > 1:
                    ties = allslots[d[r - lo] == best[r - lo]]
                    w = int(ties[np.argmin(self.insert_idx[ties])])
                else:
                    w = int(first[r - lo])
                slots[r] = w
                dists[r] = self._row_distance(w, Q[r])

    def _nn_query_batch(self, Q: np.ndarray):
        """Vectorized lookup; each row resolves exactly like _nn_query."""
        nq = Q.shape[0]
        slots = np.full(nq, -1, dtype=np.int64)
        dists = np.full(nq, np.inf)
        if self.size == 0 or nq == 0:
            return slots, dists
        if not self.use_index or self.size <= _BRUTE_SIZE:
            self._nn_batch_brute(Q, slots, dists)
            return slots, dists
        if self._tree is None or len(self._pending) > _REBUILD_PENDING:
            self._rebuild_tree()
        kq = min(2, self._tree.n)
        dt, it = self._tree.query(Q, k=kq)
        if kq == 1:
            dt = dt[:, None]
            it = it[:, None]
        pend = np.asarray(self._pending, dtype=np.int64)
        if pend.size:
            dp = np.sqrt(np.sum((Q[:, None, :] - self.y[None, pend, :]) ** 2, axis=2))
            dp_min = dp.min(axis=1)
        else:
            dp = None
            dp_min = np.full(nq, np.inf)
        d1 = dt[:, 0]
        margin = d1 * (1.0 + _TIE_RTOL) + _TIE_ATOL
        # Fast rows: the tree's first hit is live, beats the k-th returned
        # distance by more than float slack, and beats every pending record.
        fast = (self._tree_live[it[:, 0]] & (margin < dt[:, -1]) & (margin < dp_min))
        if fast.any():
            fslots = self._tree_slots[it[fast, 0]]
            slots[fast] = fslots
            diff = self.y[fslots] - Q[fast]
            dists[fast] = np.sqrt(np.sum(diff * diff, axis=1))
        # Pending rows: a pending record beats the tree's reported best.
        done = fast.copy()
        if pend.size:
            pmargin = dp_min * (1.0 + _TIE_RTOL) + _TIE_ATOL
            prow = ~done & (pmargin < d1)
            for r in np.flatnonzero(prow):
                row_d = dp[r]
                best = np.min(row_d)
                ties = pend[row_d == best]
                if ties.size > 1:
                    w = int(ties[np.argmin(self.insert_idx[ties])])
                else:
                    w = int(ties[0])
                slots[r] = w
                dists[r] = self._row_distance(w, Q[r])
            done |= prow
        for r in np.flatnonzero(~done):
            slots[r], dists[r] = self._nn_query(Q[r])
        return slots, dists

    # -- record access -----------------------------------------------------

    def record(self, slot: int) -> RecordView:
        if not (0 <= slot < self.size):
            raise IndexError("slot out of range")
        return RecordView(
            slot=slot, x=self.x[slot].copy(), y=self.y[slot].copy(),
            h=float(self.h[slot]), state=self.s[slot].copy(),
            t_norm=float(self.t_norm[slot]), xi=int(self.xi[slot]),
            n_call=int(self.n_call[slot]), n_xi=int(self.n_xi[slot]),
            last_recalled=int(self.last_recalled[slot]),
        )

    def training_view(self, idx: np.ndarray):
        idx = np.asarray(idx)
        if np.any(idx >= self.size):
            raise IndexError("index past live records")
        return self.s[idx].copy(), self.h[idx].copy(), self.t_norm[idx].copy()

    # -- mutation ----------------------------------------------------------

    def _touch(self, slot: int) -> None:
        self._clock += 1
        self.last_recalled[slot] = self._clock

    def _insert(self, x, y, h, state, t_norm, xi) -> None:
        slot = self.size
        self.x[slot] = x
        self.y[slot] = y
        self.h[slot] = h
        self.s[slot] = state
        self.t_norm[slot] = t_norm
        self.xi[slot] = xi
        self.n_call[slot] = 1
        self.n_xi[slot] = xi
        self.insert_idx[slot] = self._insert_clock
        self._insert_clock += 1
        self.size += 1
        self._touch(slot)
        self._pending.append(slot)
        self.evict_if_full()
        self._inserts_since_stats += 1
        if self._inserts_since_stats >= STATS_REFRESH_EVERY:
            self._refresh_stats()

    def evict_if_full(self) -> None:
        """Drop the least-recently-touched record once size exceeds capacity."""
        if self.size <= self.capacity:
            return
        evictee = int(np.argmin(self.last_recalled[:self.size]))
        last = self.size - 1
        self._drop_slot_from_index(evictee)
        if evictee != last:
            for arr in (self.x, self.y, self.h, self.s, self.t_norm, self.xi,
                        self.n_call, self.n_xi, self.last_recalled, self.insert_idx):
                arr[evictee] = arr[last]
            self._move_slot_in_index(last, evictee)
        self.size -= 1

    def ec_update(self, x: np.ndarray, ret: float, delta: float, *,
                  state=None, t_norm: float = 0.0, xi: int = 0) -> None:
        """Best-return update: raise the matched record's H to max(H, ret),
        or insert a new record when nothing lies within delta."""
        if not np.isfinite(ret):
            raise ValueError("return must be finite")
        x = np.asarray(x, dtype=np.float64)
        q = self.normalize(x)
        hit = None
        if self.size > 0:
            slot, dist = self._nn_query(q)
            if dist < delta:
                hit = slot
        if hit is None:
            if state is None:
                state = np.zeros(self.state_dim)
            self._insert(x, q, ret, state, t_norm, xi)
        else:
            self.h[hit] = max(self.h[hit], ret)
            self.n_call[hit] += 1
            self._touch(hit)

    def construct_from_trajectory(self, states: np.ndarray, rewards: np.ndarray,
                                  desirable: int, delta: float, gamma: float,
                                  embedder, t_max: int) -> None:
        """Walk a finished episode backward, folding each visited state into
        the buffer under discounted-return bookkeeping.

        states holds s_0..s_T (the terminal state is not memorized); rewards
        holds r_0..r_{T-1}. Within delta: counters advance, and a desirable
        episode converts an undesirable record (key, state, timestep, and H
        replaced); otherwise H ratchets up. Outside delta: insert.
        """
        states = np.asarray(states, dtype=np.float64)
        rewards = np.asarray(rewards, dtype=np.float64)
        n_steps = rewards.shape[0]
        if states.shape[0] != n_steps + 1:
            raise ValueError("need one more state than rewards")
        t_all = np.arange(n_steps) / t_max
        # Keys do not depend on buffer state, so embed every step upfront;
        # normalization happens per step because stats may refresh mid-loop.
        x_all = embedder.embed(states[:n_steps], t_all) if n_steps else None
        ret = 0.0
        for t in range(n_steps - 1, -1, -1):
            ret = rewards[t] + gamma * ret
            x = x_all[t]
            q = self.normalize(x)
            hit = None
            if self.size > 0:
                slot, dist = self._nn_query(q)
                if dist < delta:
                    hit = slot
            if hit is None:
                self._insert(x, q, ret, states[t], t_all[t], desirable)
                continue
            self.n_call[hit] += 1
            if desirable:
                self.n_xi[hit] += 1
            if desirable and self.xi[hit] == 0:
                # Convert the record: desirability flips once, and the fresher
                # desirable observation replaces key, state, timestep, return.
                self.xi[hit] = 1
                self.x[hit] = x
                self.y[hit] = q
                self.s[hit] = states[t]
                self.t_norm[hit] = t_all[t]
                self.h[hit] = ret
                self._mark_key_changed(hit)
            else:
                self.h[hit] = max(self.h[hit], ret)
            self._touch(hit)

    def recall(self, state: np.ndarray, t_norm: float, embedder, delta: float):
        """Look up the record for a state; None when nothing is within delta."""
        if self.size == 0:
            return None
        x = embedder.embed(np.asarray(state, dtype=np.float64)[None, :],
                           np.array([t_norm]))[0]
        q = self.normalize(x)
        slot, dist = self._nn_query(q)
        if dist >= delta:
            return None
        self._touch(slot)
        return RecallResult(h=float(self.h[slot]), xi=int(self.xi[slot]),
                            n_call=int(self.n_call[slot]), n_xi=int(self.n_xi[slot]),
                            distance=dist, slot=slot)

    def recall_batch(self, states: np.ndarray, t_norm: np.ndarray, embedder,
                     delta: float):
        """Vectorized recall. Returns (hit, h, xi, n_call, n_xi) arrays; rows
        are touched in order, matching repeated single recalls."""
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        nq = states.shape[0]
        hit = np.zeros(nq, dtype=bool)
        h = np.zeros(nq)
        xi = np.zeros(nq, dtype=np.int64)
        n_call = np.zeros(nq, dtype=np.int64)
        n_xi = np.zeros(nq, dtype=np.int64)
        if self.size == 0 or nq == 0:
            return hit, h, xi, n_call, n_xi
        x = embedder.embed(states, np.asarray(t_norm, dtype=np.float64))
        Q = (x - self.mu) / self.sigma
        slots, dists = self._nn_query_batch(Q)
        for r in range(nq):
            if slots[r] >= 0 and dists[r] < delta:
                s = int(slots[r])
                hit[r] = True
                h[r] = self.h[s]
                xi[r] = self.xi[s]
                n_call[r] = self.n_call[s]
                n_xi[r] = self.n_xi[s]
                self._touch(s)
        return hit, h, xi, n_call, n_xi

    def rekey_all(self, embedder) -> None:
        """Recompute every key with the current embedder, then stats and
        normalized keys."""
        if self.size > 0:
            self.x[:self.size] = embedder.embed(self.s[:self.size],
                                                self.t_norm[:self.size])
        self._refresh_stats()

    # -- serialization -------------------------------------------------------

    def save(self, path) -> None:
        n = self.size
        np.savez(
            path, x=self.x[:n], y=self.y[:n], h=self.h[:n], s=self.s[:n],
            t_norm=self.t_norm[:n], xi=self.xi[:n], n_call=self.n_call[:n],
            n_xi=self.n_xi[:n], last_recalled=self.last_recalled[:n],
            insert_idx=self.insert_idx[:n], mu=self.mu, sigma=self.sigma,
            meta=np.array([self.capacity, self.embed_dim, self.state_dim,
                           self._clock, self._insert_clock,
                           self._inserts_since_stats], dtype=np.int64),
        )

    @classmethod
    def load(cls, path, use_index: bool = True) -> "EpisodicBuffer":
        data = np.load(path)
        meta = data["meta"]
        buf = cls(int(meta[0]), int(meta[1]), int(meta[2]), use_index=use_index)
        n = data["x"].shape[0]
        buf.size = n
        for name in ("x", "y", "h", "s", "t_norm", "xi", "n_call", "n_xi",
                     "last_recalled", "insert_idx"):
            getattr(buf, name)[:n] = data[name]
        buf.mu = data["mu"]
        buf.sigma = data["sigma"]
        buf._clock = int(meta[3])
        buf._insert_clock = int(meta[4])
        buf._inserts_since_stats = int(meta[5])
        return buf
