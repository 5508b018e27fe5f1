"""Station-level exponential-decay accumulator memories.

Each station keeps two accumulators: a vector ``a`` (decay-weighted sum of
incoming update terms) and a scalar ``b`` (decay-weighted event mass,
initialized to 1).  The station representation is the ratio ``a / b``, an
exponentially weighted average of past event information: recent trips count
more, frequent neighbors count more.  Both accumulators are multiplied by
``exp(-decay_rate * dt)`` whenever time advances, so a batch of events can be
folded in with O(1) work per station regardless of history length.

Every event contributes one incidence to each of its endpoints: the origin
receives the destination's representation (role flag +1) and vice versa
(role flag -1).  A self-loop therefore contributes both incidences to the
same station.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import DegenerateNormalizer, NodeNotEndpoint, TimeRegression
from .events import EventBatch, NodeCatalog, TransactionEvent

#: Default decay rate: one-hour half-life.
DEFAULT_DECAY_RATE = math.log(2.0) / 3600.0


@dataclass(frozen=True)
class DecayConfig:
    """Decay rate (1/seconds) and station memory dimension."""

    decay_rate: float = DEFAULT_DECAY_RATE
    dim: int = 256

    def __post_init__(self):
        if self.decay_rate <= 0:
            raise ValueError("decay_rate must be positive")
        if self.dim < 1:
            raise ValueError("dim must be >= 1")

    @classmethod
    def from_half_life(cls, half_life: float, dim: int) -> "DecayConfig":
        return cls(decay_rate=math.log(2.0) / half_life, dim=dim)

    def factor(self, dt: float, weighted: bool = True) -> float:
        """Decay factor for a time advance of ``dt`` seconds."""
        if dt < 0:
            raise TimeRegression(f"negative time advance {dt}")
        return math.exp(-self.decay_rate * dt) if weighted else 1.0


@dataclass
class StationMemory:
    """Accumulator pair for one station.

    Invariants: ``b > 0`` always (it starts at 1 and decay only multiplies
    it by a positive factor), and ``a`` stays finite elementwise.
    """

    a: np.ndarray
    b: float
    last_update: float

    @classmethod
    def fresh(cls, dim: int, t: float = 0.0) -> "StationMemory":
        return cls(a=np.zeros(dim), b=1.0, last_update=t)


@dataclass
class StationMessage:
    """Decay-weighted batch aggregate for one station: vector p, mass q.

    ``q == 0`` implies ``p`` is the zero vector (an idle station).
    """

    p: np.ndarray
    q: float


@dataclass
class StationMessages:
    """Batch messages for all stations at once: p is (N, d_s), q is (N,)."""

    p: np.ndarray
    q: np.ndarray

    def node(self, i: int) -> StationMessage:
        return StationMessage(p=self.p[i], q=float(self.q[i]))

    @property
    def total_mass(self) -> float:
        return float(self.q.sum())


def event_representation(event: TransactionEvent, for_node: int, reps: np.ndarray,
                         catalog: NodeCatalog, include_features: bool = True,
                         include_role: bool = True) -> np.ndarray:
    """Representation of an event as seen from one of its endpoints.

    Returns ``[r_other ; F_other ; role]`` where ``other`` is the opposite
    endpoint, ``r_other`` its stored representation, ``F_other`` its feature
    row, and role is +1 when ``for_node`` is the origin, -1 when it is the
    destination.  For a self-loop, the origin role takes precedence.
    """
    if for_node == event.origin:
        other, role = event.destination, 1.0
    elif for_node == event.destination:
        other, role = event.origin, -1.0
    else:
        raise NodeNotEndpoint(
            f"node {for_node} is not an endpoint of ({event.origin}, {event.destination})"
        )
    parts = [reps[other]]
    if include_features:
        parts.append(catalog.features[other])
    if include_role:
        parts.append(np.array([role]))
    return np.concatenate(parts)


def message_dim(cfg: DecayConfig, catalog: NodeCatalog, include_features: bool = True,
                include_role: bool = True) -> int:
    return cfg.dim + (catalog.feature_dim if include_features else 0) + (1 if include_role else 0)


def aggregate_messages(batch: EventBatch, reps: np.ndarray, catalog: NodeCatalog,
                       cfg: DecayConfig, include_features: bool = True,
                       include_role: bool = True, weighted: bool = True) -> StationMessages:
    """Fold a batch of events into per-station messages.

    For station i, ``p_i`` sums ``w_k * s_k`` over the batch incidences
    touching i (both endpoints of every event), with weight
    ``w_k = exp(-decay_rate * (window_end - t_k))``, and ``q_i`` sums the
    weights alone.  Untouched stations get (p=0, q=0).  With
    ``weighted=False`` every weight is 1 (plain sums).
    """
    n = reps.shape[0]
    d_s = message_dim(cfg, catalog, include_features, include_role)
    p = np.zeros((n, d_s))
    q = np.zeros(n)
    if not batch.events:
        return StationMessages(p=p, q=q)

    origins = np.fromiter((ev.origin for ev in batch.events), dtype=int, count=len(batch))
    dests = np.fromiter((ev.destination for ev in batch.events), dtype=int, count=len(batch))
    times = np.fromiter((ev.timestamp for ev in batch.events), dtype=float, count=len(batch))
    if weighted:
        w = np.exp(-cfg.decay_rate * (batch.window_end - times))
    else:
        w = np.ones(len(times))

    def incidence_block(others: np.ndarray, role: float) -> np.ndarray:
        parts = [reps[others]]
        if include_features:
            parts.append(catalog.features[others])
        if include_role:
            parts.append(np.full((len(others), 1), role))
        return np.concatenate(parts, axis=1)

    # Origin-side incidences see the destination; destination-side see the origin.
    np.add.at(p, origins, w[:, None] * incidence_block(dests, 1.0))
    np.add.at(p, dests, w[:, None] * incidence_block(origins, -1.0))
    q += np.bincount(origins, weights=w, minlength=n)
    q += np.bincount(dests, weights=w, minlength=n)
    return StationMessages(p=p, q=q)


def update_station_memory(mem: StationMemory, msg: StationMessage, t: float,
                          update_mlp: Callable[[np.ndarray], np.ndarray],
                          cfg: DecayConfig, weighted: bool = True) -> StationMemory:
    """Advance one station memory to time ``t`` and fold in a batch message.

    ``a' = exp(-decay_rate * dt) * a + update_mlp(p)`` and
    ``b' = exp(-decay_rate * dt) * b + q``.  When ``q == 0`` the update term
    is suppressed entirely: an idle station must only decay, and feeding the
    zero message through the map would leak its learned bias into every idle
    station each batch.
    """
    if t < mem.last_update:
        raise TimeRegression(f"update time {t} precedes last update {mem.last_update}")
    decay = cfg.factor(t - mem.last_update, weighted)
    a = decay * mem.a
    if msg.q > 0.0:
        a = a + np.asarray(update_mlp(msg.p), dtype=float)
    b = decay * mem.b + msg.q
    return StationMemory(a=a, b=b, last_update=t)


def read_representation(mem: StationMemory) -> np.ndarray:
    """Current representation ``a / b`` of a station memory."""
    if mem.b <= 0.0:
        raise DegenerateNormalizer(f"normalizer b={mem.b} must be positive")
    return mem.a / mem.b


def pack_events(events: Sequence[TransactionEvent]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Event list as (origins, destinations, timestamps) arrays."""
    count = len(events)
    origins = np.fromiter((ev.origin for ev in events), dtype=int, count=count)
    dests = np.fromiter((ev.destination for ev in events), dtype=int, count=count)
    times = np.fromiter((ev.timestamp for ev in events), dtype=float, count=count)
    return origins, dests, times


def oracle_representation_packed(node: int, packed, t: float, frozen_reps: np.ndarray,
                                 cfg: DecayConfig,
                                 initial_mass_time: float | None = None) -> np.ndarray:
    """:func:`oracle_representation` over pre-packed event arrays."""
    origins, dests, times = packed
    upto = times <= t
    num = np.zeros(frozen_reps.shape[1])
    den = 0.0
    for mine, other in ((origins, dests), (dests, origins)):
        keep = upto & (mine == node)
        if keep.any():
            w = np.exp(-cfg.decay_rate * (t - times[keep]))
            num += w @ frozen_reps[other[keep]]
            den += float(w.sum())
    if initial_mass_time is not None:
        den += math.exp(-cfg.decay_rate * (t - initial_mass_time))
    elif den == 0.0:
        return num
    return num / den


def oracle_representation(node: int, events: Sequence[TransactionEvent], t: float,
                          frozen_reps: np.ndarray, cfg: DecayConfig,
                          initial_mass_time: float | None = None) -> np.ndarray:
    """Brute-force closed form of the decayed representation.

    Evaluates ``sum_k w_k * r_other(k) / sum_k w_k`` with
    ``w_k = exp(-decay_rate * (t - t_k))`` over every history incidence
    touching ``node`` (both endpoints of each event; a self-loop contributes
    two incidences), holding neighbor representations frozen.  A node with
    no history reads as the zero vector.

    With ``initial_mass_time`` given, a unit of weight decayed from that
    time is added to the denominator, mirroring the online accumulators'
    b=1 initialization; without it, this is the pure weighted mean.
    """
    return oracle_representation_packed(node, pack_events(events), t, frozen_reps, cfg,
                                        initial_mass_time)
