"""Episode storage: stacked rollout batches and a FIFO replay buffer."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class EpisodeBatch:
    """A stack of complete episodes.

    ``theta``/``qoi`` are zero-padded on the right to the widest model's
    dimension; slice with the episode's own model dimension before use.
    ``non_ig`` holds the information-independent stage rewards collected at
    rollout time, one column per reward slot ``0..N`` (column ``N`` is the
    terminal slot).
    """

    m: np.ndarray             # (n,) int64 model indices
    theta: np.ndarray         # (n, max_theta_dim)
    qoi: np.ndarray | None    # (n, max_qoi_dim) or None
    designs: np.ndarray       # (n, N, design_dim)
    observations: np.ndarray  # (n, N, obs_dim)
    non_ig: np.ndarray        # (n, N + 1)

    def __post_init__(self):
        self.m = np.asarray(self.m, dtype=np.int64)
        n = self.m.shape[0]
        horizon = self.designs.shape[1]
        if self.designs.shape[0] != n or self.observations.shape[:2] != (n, horizon):
            raise ValueError("inconsistent episode counts or horizons")
        if self.theta.shape[0] != n or (self.qoi is not None and self.qoi.shape[0] != n):
            raise ValueError("sample arrays must match the episode count")
        if self.non_ig.shape != (n, horizon + 1):
            raise ValueError("non_ig must have one column per reward slot 0..N")

    def __len__(self):
        return self.m.shape[0]

    @property
    def horizon(self):
        return self.designs.shape[1]

    def subset(self, idx) -> "EpisodeBatch":
        return EpisodeBatch(
            m=self.m[idx],
            theta=self.theta[idx],
            qoi=None if self.qoi is None else self.qoi[idx],
            designs=self.designs[idx],
            observations=self.observations[idx],
            non_ig=self.non_ig[idx],
        )

    @staticmethod
    def concatenate(batches) -> "EpisodeBatch":
        has_qoi = batches[0].qoi is not None
        return EpisodeBatch(
            m=np.concatenate([b.m for b in batches]),
            theta=np.concatenate([b.theta for b in batches]),
            qoi=np.concatenate([b.qoi for b in batches]) if has_qoi else None,
            designs=np.concatenate([b.designs for b in batches]),
            observations=np.concatenate([b.observations for b in batches]),
            non_ig=np.concatenate([b.non_ig for b in batches]),
        )


class ReplayBuffer:
    """Fixed-capacity FIFO episode store with uniform sampling.

    Storage grows geometrically up to ``capacity``; once full, new episodes
    overwrite the oldest ones in insertion order.
    """

    def __init__(self, capacity):
        self.capacity = int(capacity)
        if self.capacity < 1:
            raise ValueError("capacity must be positive")
        self._arrays = None     # dict of preallocated arrays
        self._alloc = 0
        self._size = 0
        self._ptr = 0           # next write slot once the ring is full

    def __len__(self):
        return self._size

    def _ensure_alloc(self, batch: EpisodeBatch, needed):
        if self._arrays is None:
            self._alloc = min(self.capacity, max(needed, 1024))
            self._arrays = {
                "m": np.empty(self._alloc, dtype=np.int64),
                "theta": np.empty((self._alloc,) + batch.theta.shape[1:]),
                "qoi": None if batch.qoi is None
                       else np.empty((self._alloc,) + batch.qoi.shape[1:]),
                "designs": np.empty((self._alloc,) + batch.designs.shape[1:]),
                "observations": np.empty((self._alloc,) + batch.observations.shape[1:]),
                "non_ig": np.empty((self._alloc,) + batch.non_ig.shape[1:]),
            }
        elif needed > self._alloc and self._alloc < self.capacity:
            new_alloc = min(self.capacity, max(2 * self._alloc, needed))
            for key, arr in self._arrays.items():
                if arr is None:
                    continue
                grown = np.empty((new_alloc,) + arr.shape[1:], dtype=arr.dtype)
                grown[:self._size] = arr[:self._size]
                self._arrays[key] = grown
            self._alloc = new_alloc

    def _write(self, batch: EpisodeBatch, rows):
        parts = {"m": batch.m, "theta": batch.theta, "qoi": batch.qoi,
                 "designs": batch.designs, "observations": batch.observations,
                 "non_ig": batch.non_ig}
        for key, arr in self._arrays.items():
            if arr is not None:
                arr[rows] = parts[key]

    def add(self, batch: EpisodeBatch):
        n = len(batch)
        if n > self.capacity:          # only the newest episodes survive anyway
            batch = batch.subset(np.arange(n - self.capacity, n))
            n = self.capacity
        self._ensure_alloc(batch, min(self.capacity, self._size + n))
        if self._size < self.capacity:
            take = min(n, self._alloc - self._size)
            self._write(batch.subset(np.arange(take)), slice(self._size, self._size + take))
            self._size += take
            if take < n:               # buffer just filled; wrap the rest
                self._ptr = 0
                self.add(batch.subset(np.arange(take, n)))
        else:
            rows = (self._ptr + np.arange(n)) % self.capacity
            self._write(batch, rows)
            self._ptr = int((self._ptr + n) % self.capacity)

    def sample(self, n, rng: np.random.Generator) -> EpisodeBatch:
        """Uniform sample of ``n`` distinct stored episodes."""
        if n > self._size:
            raise ValueError(f"requested {n} episodes but buffer holds {self._size}")
        idx = rng.choice(self._size, size=n, replace=False)
        a = self._arrays
        return EpisodeBatch(
            m=a["m"][idx], theta=a["theta"][idx],
            qoi=None if a["qoi"] is None else a["qoi"][idx],
            designs=a["designs"][idx], observations=a["observations"][idx],
            non_ig=a["non_ig"][idx],
        )

    # -- checkpoint support ---------------------------------------------------

    @property
    def position(self):
        """Next ring write slot (meaningful once the buffer is full)."""
        return self._ptr

    def stored_batch(self) -> EpisodeBatch | None:
        """All stored episodes in slot order, or None when empty."""
        if self._size == 0:
            return None
        a = self._arrays
        idx = np.arange(self._size)
        return EpisodeBatch(
            m=a["m"][idx].copy(), theta=a["theta"][idx].copy(),
            qoi=None if a["qoi"] is None else a["qoi"][idx].copy(),
            designs=a["designs"][idx].copy(),
            observations=a["observations"][idx].copy(),
            non_ig=a["non_ig"][idx].copy(),
        )

    def restore(self, batch: EpisodeBatch, position):
        """Reload slot-ordered contents previously taken from ``stored_batch``."""
        if len(self) != 0:
            raise ValueError("can only restore into an empty buffer")
        if len(batch) > self.capacity:
            raise ValueError("stored episodes exceed buffer capacity")
        self._ensure_alloc(batch, len(batch))
        self._write(batch, slice(0, len(batch)))
        self._size = len(batch)
        self._ptr = int(position)
