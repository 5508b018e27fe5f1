"""Per-step pipeline: messages, memory updates, relations, fusion, prediction.

One step consumes one event batch and advances the whole memory bank to the
batch's end time.  The bank entering a step is treated as a constant:
gradients reach every parameter through the current window (the update maps
feed the freshly updated memories, which feed fusion and the output head),
but do not flow backwards across windows.  The single exception is the first
step after a reset, where the trainable initial cluster/area memories are
still live on the tape; that is what makes them trainable at all.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionMismatch, TimeRegression, VersionMismatch
from .events import EventBatch, NodeCatalog
from .memory import DEFAULT_DECAY_RATE, DecayConfig, aggregate_messages
from .multilevel import (AttentionWeights, LevelState, RelationTensors, compute_relations,
                         fuse, project_area_message, project_cluster_messages,
                         update_level_memories)


@dataclass(frozen=True)
class HyperParams:
    """All structural and ablation knobs.

    ``rel_dim`` defaults to dim/heads, ``n_clusters`` to ceil(sqrt(n)), and
    ``feat_dim`` to n (one-hot node features).
    """

    n: int
    dim: int = 256
    msg_dim: int = 256
    heads: int = 8
    rel_dim: int | None = None
    n_clusters: int | None = None
    feat_dim: int | None = None
    tau: float = 1800.0
    decay_rate: float = DEFAULT_DECAY_RATE
    cap: int = 200_000
    relation_scale: bool = False
    no_multilevel: bool = False
    no_weighted_update: bool = False
    mse_loss: bool = False

    def __post_init__(self):
        if self.rel_dim is None:
            object.__setattr__(self, "rel_dim", max(1, self.dim // self.heads))
        if self.n_clusters is None:
            object.__setattr__(self, "n_clusters", math.ceil(math.sqrt(self.n)))
        if self.feat_dim is None:
            object.__setattr__(self, "feat_dim", self.n)
        if self.n < 1 or self.dim < 1 or self.heads < 1 or self.n_clusters < 1:
            raise ValueError("n, dim, heads, n_clusters must all be >= 1")
        if self.msg_dim % self.heads != 0:
            raise ValueError(f"msg_dim {self.msg_dim} must be divisible by heads {self.heads}")
        if self.tau <= 0 or self.decay_rate <= 0 or self.cap < 1:
            raise ValueError("tau and decay_rate must be positive, cap >= 1")

    @property
    def station_msg_dim(self) -> int:
        """d_s: event representations are [r_other ; F_other ; role]."""
        return self.dim + self.feat_dim + 1

    @property
    def decay_config(self) -> DecayConfig:
        return DecayConfig(decay_rate=self.decay_rate, dim=self.dim)

    @property
    def weighted(self) -> bool:
        return not self.no_weighted_update


@dataclass
class Mlp:
    """One hidden rectifier layer: x -> W2 relu(W1 x + b1) + b2, rows as samples."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def __call__(self, x: Tensor) -> Tensor:
        hidden = ad.relu(ad.add(ad.matmul(x, ad.transpose(self.w1)), self.b1))
        return ad.add(ad.matmul(hidden, ad.transpose(self.w2)), self.b2)

    def tensors(self) -> Iterator[tuple[str, Tensor]]:
        yield "w1", self.w1
        yield "b1", self.b1
        yield "w2", self.w2
        yield "b2", self.b2


@dataclass
class ModelParams:
    """Every trainable array of the model."""

    attention: AttentionWeights
    w_c3: list[Tensor]
    w_g3: list[Tensor]
    station_mlp: Mlp
    cluster_mlp: Mlp
    area_mlp: Mlp
    output_mlp: Mlp
    cluster_mem0: Tensor
    area_mem0: Tensor

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = []
        for group, tensors in (("w_c1", self.attention.w_c1), ("w_c2", self.attention.w_c2),
                               ("w_g1", self.attention.w_g1), ("w_g2", self.attention.w_g2),
                               ("w_c3", self.w_c3), ("w_g3", self.w_g3)):
            out.extend((f"{group}.{h}", t) for h, t in enumerate(tensors))
        for group, mlp in (("station_mlp", self.station_mlp), ("cluster_mlp", self.cluster_mlp),
                           ("area_mlp", self.area_mlp), ("output_mlp", self.output_mlp)):
            out.extend((f"{group}.{name}", t) for name, t in mlp.tensors())
        out.append(("cluster_mem0", self.cluster_mem0))
        out.append(("area_mem0", self.area_mem0))
        return out

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named_tensors()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_tensors()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, t in self.named_tensors():
            if name not in state:
                raise VersionMismatch(f"missing array {name!r} in state")
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise VersionMismatch(
                    f"array {name!r} has shape {arr.shape}, expected {t.data.shape}"
                )
            t.data = arr.copy()


def _param(rng: np.random.Generator | None, shape: tuple[int, ...], fan_in: int,
           name: str) -> Tensor:
    if rng is None:
        data = np.zeros(shape)
    else:
        bound = 1.0 / math.sqrt(fan_in)
        data = rng.uniform(-bound, bound, size=shape)
    return Tensor(data, requires_grad=True, name=name)


def _mlp(rng, in_dim: int, hidden: int, out_dim: int, name: str) -> Mlp:
    return Mlp(
        w1=_param(rng, (hidden, in_dim), in_dim, f"{name}.w1"),
        b1=Tensor(np.zeros(hidden), requires_grad=True, name=f"{name}.b1"),
        w2=_param(rng, (out_dim, hidden), hidden, f"{name}.w2"),
        b2=Tensor(np.zeros(out_dim), requires_grad=True, name=f"{name}.b2"),
    )


def _build_params(hyper: HyperParams, rng: np.random.Generator | None) -> ModelParams:
    h, d, d_rel, d_msg = hyper.heads, hyper.dim, hyper.rel_dim, hyper.msg_dim
    d_s = hyper.station_msg_dim
    head_out = d_msg // h

    def head_list(shape, fan_in, name):
        return [_param(rng, shape, fan_in, f"{name}.{i}") for i in range(h)]

    return ModelParams(
        attention=AttentionWeights(
            w_c1=head_list((d_rel, d), d, "w_c1"),
            w_c2=head_list((d_rel, d), d, "w_c2"),
            w_g1=head_list((d_rel, d), d, "w_g1"),
            w_g2=head_list((d_rel, d), d, "w_g2"),
        ),
        w_c3=head_list((head_out, d_s), d_s, "w_c3"),
        w_g3=head_list((head_out, d_msg), d_msg, "w_g3"),
        station_mlp=_mlp(rng, d_s, d, d, "station_mlp"),
        cluster_mlp=_mlp(rng, d_msg, d, d, "cluster_mlp"),
        area_mlp=_mlp(rng, d_msg, d, d, "area_mlp"),
        output_mlp=_mlp(rng, 6 * d, d, 1, "output_mlp"),
        cluster_mem0=_param(rng, (hyper.n_clusters, d), d, "cluster_mem0"),
        area_mem0=_param(rng, (1, d), d, "area_mem0"),
    )


def init_params(hyper: HyperParams, seed: int) -> ModelParams:
    """Seeded parameter initialization: uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)),
    biases zero.  Deterministic given the seed."""
    return _build_params(hyper, np.random.default_rng(seed))


def empty_params(hyper: HyperParams) -> ModelParams:
    """All-zero parameter arrays with the right shapes (checkpoint loading)."""
    return _build_params(hyper, None)


class MemoryBank:
    """The model's entire evolving state: station accumulators plus level memories.

    Station memories start at (a=0, b=1); cluster and area memories start at
    the trainable initial arrays, which stay live on the tape for exactly one
    step after a reset.
    """

    def __init__(self, station_a: np.ndarray, station_b: np.ndarray, levels: LevelState,
                 last_update: float):
        self.station_a = station_a
        self.station_b = station_b
        self.levels = levels
        self.last_update = last_update

    @classmethod
    def initial(cls, params: ModelParams, hyper: HyperParams, t0: float) -> "MemoryBank":
        return cls(
            station_a=np.zeros((hyper.n, hyper.dim)),
            station_b=np.ones(hyper.n),
            levels=LevelState(cluster_mem=params.cluster_mem0, area_mem=params.area_mem0,
                              last_update=t0),
            last_update=t0,
        )

    def station_reps(self) -> np.ndarray:
        return self.station_a / self.station_b[:, None]


@dataclass
class StepResult:
    z: Tensor                          # (N, 3d) fused representations
    relations: RelationTensors | None  # None under no_multilevel


def step(bank: MemoryBank, batch: EventBatch, params: ModelParams, hyper: HyperParams,
         catalog: NodeCatalog) -> StepResult:
    """Advance the bank through one batch and return fused representations.

    Order: event representations and station messages from the pre-update
    representations; station memory update; relations from the pre-update
    representations; cluster/area message projection and memory update;
    cross-level fusion.  The bank is mutated in place and left detached from
    the returned tape.
    """
    if batch.window_start < bank.last_update - 1e-9:
        raise TimeRegression(
            f"batch starts at {batch.window_start}, bank already at {bank.last_update}"
        )
    if catalog.n != hyper.n or catalog.feature_dim != hyper.feat_dim:
        raise DimensionMismatch(
            f"catalog ({catalog.n} nodes, {catalog.feature_dim} features) does not match "
            f"hyperparameters ({hyper.n}, {hyper.feat_dim})"
        )
    t = batch.window_end
    cfg = hyper.decay_config
    reps_prev = bank.station_reps()

    msgs = aggregate_messages(batch, reps_prev, catalog, cfg, weighted=hyper.weighted)
    decay = cfg.factor(t - bank.last_update, hyper.weighted)

    mlp_out = params.station_mlp(ad.constant(msgs.p))
    active = np.broadcast_to((msgs.q > 0.0)[:, None].astype(float), mlp_out.data.shape)
    a_new = ad.add(ad.scale(ad.constant(bank.station_a), decay),
                   ad.mul(mlp_out, ad.constant(active)))
    b_new = decay * bank.station_b + msgs.q
    inv_b = np.broadcast_to((1.0 / b_new)[:, None], a_new.data.shape)
    r_new = ad.mul(a_new, ad.constant(inv_b))

    if hyper.no_multilevel:
        zeros = ad.constant(np.zeros((hyper.n, 2 * hyper.dim)))
        z = ad.concat([r_new, zeros], axis=1)
        relations = None
        new_levels = bank.levels
    else:
        relations = compute_relations(
            ad.constant(reps_prev), bank.levels.cluster_mem, bank.levels.area_mem,
            params.attention, scale_logits=hyper.relation_scale,
        )
        cluster_msgs = project_cluster_messages(relations, msgs, params.w_c3)
        area_msg = project_area_message(relations, cluster_msgs, params.w_g3)
        new_levels = update_level_memories(
            bank.levels, cluster_msgs, area_msg, t, params.cluster_mlp, params.area_mlp,
            cfg, weighted=hyper.weighted, suppress_update=(len(batch) == 0),
        )
        z = fuse(r_new, new_levels, relations)

    bank.station_a = a_new.data
    bank.station_b = b_new
    bank.levels = new_levels.detached() if new_levels is not bank.levels else new_levels
    bank.last_update = t
    return StepResult(z=z, relations=relations)


_PAIR_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _pair_selectors(n: int) -> tuple[np.ndarray, np.ndarray]:
    """0/1 matrices mapping node rows to the N^2 ordered-pair rows (i*N + j)."""
    if n not in _PAIR_CACHE:
        left = np.zeros((n * n, n))
        right = np.zeros((n * n, n))
        for i in range(n):
            for j in range(n):
                left[i * n + j, i] = 1.0
                right[i * n + j, j] = 1.0
        _PAIR_CACHE[n] = (left, right)
    return _PAIR_CACHE[n]


@dataclass
class Prediction:
    """Clamped OD matrix for reporting plus the raw pairwise head output."""

    matrix: np.ndarray  # (N, N), elementwise max(raw, 0)
    raw: Tensor         # (N^2, 1) on the tape, for the loss


def predict_od(z: Tensor, params: ModelParams) -> Prediction:
    """Evaluate the pairwise output head densely on all ordered node pairs."""
    n = z.data.shape[0]
    left, right = _pair_selectors(n)
    pairs = ad.concat([ad.matmul(ad.constant(left), z), ad.matmul(ad.constant(right), z)],
                      axis=1)
    raw = params.output_mlp(pairs)
    return Prediction(matrix=np.maximum(raw.data, 0.0).reshape(n, n), raw=raw)


def od_loss(raw, truth: np.ndarray, mse_loss: bool = False):
    """Masked squared error over all N^2 cells.

    A cell counts fully when its true demand is positive.  A zero-demand
    cell counts only if the raw prediction is positive: predicting at or
    below zero for a pair that saw no demand costs nothing.  With
    ``mse_loss`` every cell counts (the plain mean squared error).

    Accepts the raw prediction as a tape tensor (returns a scalar tensor;
    the mask is a constant, so the masked region gets exactly zero gradient)
    or as a plain array (returns a float).
    """
    if isinstance(raw, Tensor):
        raw_data = raw.data
        y = np.asarray(truth, dtype=float).reshape(raw_data.shape)
        mask = np.ones_like(y) if mse_loss else np.where(y > 0.0, 1.0, raw_data > 0.0)
        diff = ad.add(ad.constant(y), ad.scale(raw, -1.0))
        return ad.mean(ad.mul(ad.square(diff), ad.constant(mask)))
    raw_arr = np.asarray(raw, dtype=float)
    y = np.asarray(truth, dtype=float).reshape(raw_arr.shape)
    mask = np.ones_like(y) if mse_loss else np.where(y > 0.0, 1.0, raw_arr > 0.0)
    return float(np.mean(mask * (y - raw_arr) ** 2))
