"""Dynamic-capacity mixture-of-experts layer.

A linear router scores every routable slot, softmax turns the scores into a
probability vector, and a Top-P rule activates the smallest set of experts
whose probability mass reaches the threshold — so easy tokens get one expert
and ambiguous ones get several.  Three expert roles exist:

* ``routed``  — gated feed-forward experts selected per token,
* ``null``    — routable slots with no parameters whose output is identically
  zero (activating one means "do nothing with this share of the mass"),
* ``shared``  — experts applied to every token unconditionally, outside
  routing.

Two selection modes are provided.  ``deterministic`` takes the descending-
probability prefix; ``sampled`` draws experts without replacement until the
drawn original probability mass reaches P.  Training forwards wrap each
routed contribution in the hybrid straight-through estimator from
:mod:`dyncapmoe.estimator`; gate probabilities are never renormalized after
selection.
"""

from __future__ import annotations

import dataclasses
import enum
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import estimator as est

__all__ = [
    "ExpertRole",
    "MoEConfig",
    "RouterState",
    "ExpertActivation",
    "RoutingDecision",
    "ExpertParams",
    "DynamicCapacityMoE",
    "gated_ffn",
    "select_top_p_deterministic",
    "select_top_p_sampled",
]


class ExpertRole(enum.Enum):
    ROUTED = "routed"
    NULL = "null"
    SHARED = "shared"


_ROUTING_MODES = ("deterministic", "sampled")


@dataclasses.dataclass(frozen=True)
class MoEConfig:
    """Static layer configuration.

    ``n_routed`` counts parameterized routed experts; ``n_null`` adds
    parameter-free routable slots after them.  ``shared_hidden`` defaults to
    one eighth of ``expert_hidden`` (never below 1).
    """

    d_model: int
    n_routed: int
    expert_hidden: int
    n_null: int = 0
    n_shared: int = 0
    shared_hidden: int | None = None
    top_p: float = 0.7
    routing_mode: str = "deterministic"
    seed: int = 0

    def __post_init__(self):
        if self.d_model < 1 or self.n_routed < 1 or self.expert_hidden < 1:
            raise ValueError("d_model, n_routed and expert_hidden must be positive")
        if self.n_null < 0 or self.n_shared < 0:
            raise ValueError("n_null and n_shared must be non-negative")
        if self.shared_hidden is None:
            object.__setattr__(self, "shared_hidden", max(1, self.expert_hidden // 8))
        if self.shared_hidden < 1:
            raise ValueError("shared_hidden must be positive")
        if not 0.0 < self.top_p <= 1.0:
            raise ValueError("top_p must lie in (0, 1]")
        if self.routing_mode not in _ROUTING_MODES:
            raise ValueError(f"routing_mode must be one of {_ROUTING_MODES}")

    @property
    def n_slots(self) -> int:
        """Routable slots: routed experts plus null slots."""
        return self.n_routed + self.n_null

    def role_of_slot(self, slot: int) -> ExpertRole:
        if not 0 <= slot < self.n_slots:
            raise IndexError(f"slot {slot} out of range for {self.n_slots} routable slots")
        return ExpertRole.ROUTED if slot < self.n_routed else ExpertRole.NULL


@dataclasses.dataclass(frozen=True)
class RouterState:
    """Per-token routing tape nodes: logits ``z = W_r x`` and ``p = softmax(z)``."""

    logits: ad.Tensor
    probs: ad.Tensor

    @property
    def argmax_slot(self) -> int:
        # ties resolve to the lowest index (np.argmax convention)
        return int(np.argmax(self.logits.data))


@dataclasses.dataclass(frozen=True)
class ExpertActivation:
    """One activated slot: its gate, rank in selection order and, in train
    mode, the estimator draw (``bern`` stays None at inference)."""

    index: int
    role: ExpertRole
    gate_prob: float
    rank: int
    is_argmax: bool
    bern: int | None = None
    forward_scale: float = 1.0


@dataclasses.dataclass(frozen=True)
class RoutingDecision:
    """Outcome of selection for a single token.

    ``active``/``per_expert`` cover routable slots in selection order
    (``k == len(active)``); ``shared`` lists the always-on experts with
    sentinel rank -1 so analytics can log them alongside.
    """

    active: tuple[int, ...]
    k: int
    per_expert: tuple[ExpertActivation, ...]
    shared: tuple[ExpertActivation, ...] = ()

    def __post_init__(self):
        if self.k != len(self.active) or self.k != len(self.per_expert):
            raise ValueError("k must equal the number of activated routable slots")
        if self.k < 1:
            raise ValueError("at least one routable slot must be active")
        if len(set(self.active)) != self.k:
            raise ValueError("active slots must be unique")

    def gate_mass(self) -> float:
        """Sum of raw gate probabilities over the active routable slots."""
        return float(sum(e.gate_prob for e in self.per_expert))


def _check_probs(p: np.ndarray, top_p: float) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size < 1:
        raise ValueError("probability vector must be 1-D and non-empty")
    if not 0.0 < top_p <= 1.0:
        raise ValueError("top_p must lie in (0, 1]")
    if abs(float(p.sum()) - 1.0) > 1e-9:
        raise ValueError("probabilities must sum to 1")
    return p


def _decision_from_order(order: Sequence[int], k: int, p: np.ndarray,
                         argmax_slot: int, n_routed: int) -> RoutingDecision:
    entries = []
    for rank, slot in enumerate(order[:k]):
        role = ExpertRole.ROUTED if slot < n_routed else ExpertRole.NULL
        entries.append(ExpertActivation(
            index=int(slot), role=role, gate_prob=float(p[slot]),
            rank=rank, is_argmax=(slot == argmax_slot)))
    return RoutingDecision(active=tuple(int(s) for s in order[:k]), k=k,
                           per_expert=tuple(entries))


def select_top_p_deterministic(p: np.ndarray, top_p: float,
                               argmax_slot: int | None = None,
                               n_routed: int | None = None) -> RoutingDecision:
    """Minimal descending-probability prefix with cumulative mass >= top_p.

    Ties sort stably, lower index first.  If rounding leaves the full sum
    short of ``top_p`` (only possible at top_p == 1), every slot activates.
    """
    p = _check_probs(p, top_p)
    order = np.argsort(-p, kind="stable")
    csum = np.cumsum(p[order])
    reach = np.nonzero(csum >= top_p)[0]
    k = int(reach[0]) + 1 if reach.size else p.size
    if argmax_slot is None:
        argmax_slot = int(np.argmax(p))
    if n_routed is None:
        n_routed = p.size
    return _decision_from_order(order.tolist(), k, p, argmax_slot, n_routed)


def select_top_p_sampled(p: np.ndarray, top_p: float, rng: np.random.Generator,
                         argmax_slot: int | None = None,
                         n_routed: int | None = None) -> RoutingDecision:
    """Draw slots without replacement (renormalized remaining mass) until the
    ORIGINAL probabilities of the drawn slots sum to >= top_p.

    Zero-probability slots are never drawn while positive mass remains; one
    uniform variate is consumed per draw (inverse-CDF over the remainder).
    """
    p = _check_probs(p, top_p)
    remaining = list(range(p.size))
    drawn: list[int] = []
    mass = 0.0
    while remaining:
        weights = p[remaining]
        total = float(weights.sum())
        if total <= 0.0:
            break  # only zero-probability slots left; mass cannot grow
        cdf = np.cumsum(weights) / total
        j = int(np.searchsorted(cdf, rng.random(), side="right"))
        j = min(j, len(remaining) - 1)
        slot = remaining.pop(j)
        drawn.append(slot)
        mass += float(p[slot])
        if mass >= top_p:
            break
    if argmax_slot is None:
        argmax_slot = int(np.argmax(p))
    if n_routed is None:
        n_routed = p.size
    return _decision_from_order(drawn, len(drawn), p, argmax_slot, n_routed)


@dataclasses.dataclass(frozen=True)
class ExpertParams:
    """Gated feed-forward expert: d_model -> hidden -> d_model."""

    w_gate: ad.Tensor
    w_up: ad.Tensor
    w_down: ad.Tensor


def gated_ffn(x: ad.Tensor, params: ExpertParams) -> ad.Tensor:
    """W_down @ (silu(W_gate @ x) * (W_up @ x))."""
    gate = ad.silu(ad.matmul(params.w_gate, x))
    up = ad.matmul(params.w_up, x)
    return ad.matmul(params.w_down, ad.mul(gate, up))


def _init_expert(d_model: int, hidden: int, seed_key: list) -> ExpertParams:
    return ExpertParams(
        w_gate=ad.seeded_normal((hidden, d_model), seed_key + [0], std=d_model ** -0.5,
                                requires_grad=True),
        w_up=ad.seeded_normal((hidden, d_model), seed_key + [1], std=d_model ** -0.5,
                              requires_grad=True),
        w_down=ad.seeded_normal((d_model, hidden), seed_key + [2], std=hidden ** -0.5,
                                requires_grad=True),
    )


class DynamicCapacityMoE:
    """The MoE layer: router weight, routed/shared expert banks, null slots.

    Routable slot indices 0..n_routed-1 are parameterized experts and
    n_routed..n_slots-1 are null slots.  ``expert_forward`` additionally
    accepts n_slots..n_slots+n_shared-1 for the shared experts.
    """

    def __init__(self, config: MoEConfig):
        self.config = config
        base = [config.seed, 1013]  # constant stream tag separating init from runtime draws
        self.router = ad.seeded_normal((config.n_slots, config.d_model), base + [0],
                                       std=config.d_model ** -0.5, requires_grad=True)
        self.routed = [_init_expert(config.d_model, config.expert_hidden, base + [1 + i])
                       for i in range(config.n_routed)]
        self.shared = [_init_expert(config.d_model, config.shared_hidden,
                                    base + [1 + config.n_routed + s])
                       for s in range(config.n_shared)]

    # ---------------------------------------------------------------- params

    def parameters(self) -> dict[str, ad.Tensor]:
        out = {"router": self.router}
        for i, e in enumerate(self.routed):
            out.update({f"routed{i}.w_gate": e.w_gate, f"routed{i}.w_up": e.w_up,
                        f"routed{i}.w_down": e.w_down})
        for s, e in enumerate(self.shared):
            out.update({f"shared{s}.w_gate": e.w_gate, f"shared{s}.w_up": e.w_up,
                        f"shared{s}.w_down": e.w_down})
        return out

    # --------------------------------------------------------------- routing

    def route(self, x: ad.Tensor) -> RouterState:
        if x.data.shape != (self.config.d_model,):
            raise ad.ShapeError(f"token must have shape ({self.config.d_model},), "
                                f"got {x.data.shape}")
        logits = ad.matmul(self.router, x)
        return RouterState(logits=logits, probs=ad.softmax(logits))

    def _select(self, state: RouterState, rng: np.random.Generator | None) -> RoutingDecision:
        p = state.probs.data
        if self.config.routing_mode == "deterministic":
            return select_top_p_deterministic(p, self.config.top_p, state.argmax_slot,
                                              self.config.n_routed)
        if rng is None:
            raise ValueError("sampled routing requires an rng")
        return select_top_p_sampled(p, self.config.top_p, rng, state.argmax_slot,
                                    self.config.n_routed)

    # -------------------------------------------------------------- forwards

    def expert_forward(self, x: ad.Tensor, index: int) -> ad.Tensor:
        cfg = self.config
        if 0 <= index < cfg.n_routed:
            return gated_ffn(x, self.routed[index])
        if cfg.n_routed <= index < cfg.n_slots:
            return ad.zeros((cfg.d_model,))  # null slot: constant zero, no tape
        if cfg.n_slots <= index < cfg.n_slots + cfg.n_shared:
            return gated_ffn(x, self.shared[index - cfg.n_slots])
        raise IndexError(f"expert index {index} out of range")

    def _shared_entries(self) -> tuple[ExpertActivation, ...]:
        return tuple(ExpertActivation(
            index=self.config.n_slots + s, role=ExpertRole.SHARED, gate_prob=1.0,
            rank=-1, is_argmax=False) for s in range(self.config.n_shared))

    def _accumulate(self, terms: list[ad.Tensor]) -> ad.Tensor:
        if not terms:
            return ad.zeros((self.config.d_model,))
        y = terms[0]
        for t in terms[1:]:
            y = ad.add(y, t)
        return y

    def forward_infer(self, x: ad.Tensor) -> tuple[ad.Tensor, RoutingDecision]:
        """y = sum over active slots of p_i * Expert_i(x), plus shared experts.

        Gates are the raw softmax probabilities; null slots contribute zero
        and are skipped outright.
        """
        state = self.route(x)
        decision = self._select(state, None)
        terms = []
        for entry in decision.per_expert:
            if entry.role is ExpertRole.NULL:
                continue
            gate = ad.index(state.probs, entry.index)
            terms.append(ad.mul(gate, self.expert_forward(x, entry.index)))
        for s in range(self.config.n_shared):
            terms.append(self.expert_forward(x, self.config.n_slots + s))
        decision = dataclasses.replace(decision, shared=self._shared_entries())
        return self._accumulate(terms), decision

    def forward_train(self, x: ad.Tensor,
                      rng: np.random.Generator) -> tuple[ad.Tensor, RoutingDecision]:
        """Training forward: estimator-wrapped routed contributions.

        For every activated slot D (null slots included, keeping the rng
        stream aligned with the decision record): draw B ~ Bernoulli(5/8),
        set delta = [D == argmax z], and add apply_estimator(p_D * E_D(x)).
        Shared experts are added plainly.  Selection follows
        ``config.routing_mode``; sampled draws consume the same rng first.
        """
        state = self.route(x)
        decision = self._select(state, rng)
        entries = []
        terms = []
        for entry in decision.per_expert:
            bern = int(rng.random() < est.BERNOULLI_P)
            scale = est.hybrid_scale(int(entry.is_argmax), bern)
            entries.append(dataclasses.replace(entry, bern=bern, forward_scale=scale))
            if entry.role is ExpertRole.NULL:
                continue  # o is identically zero: no term, no gradient
            gate = ad.index(state.probs, entry.index)
            o = ad.mul(gate, self.expert_forward(x, entry.index))
            terms.append(est.apply_estimator(o, int(entry.is_argmax), bern))
        for s in range(self.config.n_shared):
            terms.append(self.expert_forward(x, self.config.n_slots + s))
        decision = dataclasses.replace(decision, per_expert=tuple(entries),
                                       shared=self._shared_entries())
        return self._accumulate(terms), decision

    def forward_frozen(self, x: ad.Tensor,
                       frozen: RoutingDecision) -> tuple[ad.Tensor, bool]:
        """Replay a recorded decision with its forward scales as constants.

        Gate probabilities stay live on the tape; the discrete choices
        (active set, delta, B — hence each slot's scale) are pinned, so the
        graph is the smooth branch of the objective and its backward pass is
        the true derivative.  This is what finite-difference checks compare
        against — unlike ``forward_train``, whose estimator deliberately
        routes gradients at 2x regardless of the forward scale.

        The returned flag reports whether a live re-selection at the current
        parameters would still make the same choices (argmax slot and, in
        deterministic mode, the same active set); finite-difference checks
        skip coordinates where it flips.
        """
        state = self.route(x)
        matches = all(e.is_argmax == (e.index == state.argmax_slot)
                      for e in frozen.per_expert)
        if self.config.routing_mode == "deterministic":
            live = self._select(state, None)
            matches = matches and live.active == frozen.active
        terms = []
        for entry in frozen.per_expert:
            if entry.role is ExpertRole.NULL:
                continue
            gate = ad.index(state.probs, entry.index)
            o = ad.mul(gate, self.expert_forward(x, entry.index))
            terms.append(ad.scale(o, entry.forward_scale))
        for s in range(self.config.n_shared):
            terms.append(self.expert_forward(x, self.config.n_slots + s))
        return self._accumulate(terms), matches

    # ----------------------------------------------------------------- batch

    def layer_apply(self, tokens, mode: str = "infer",
                    step: int = 0) -> tuple[list[ad.Tensor], list[RoutingDecision]]:
        """Route every token independently; per-token rng streams are keyed
        (seed, step, token_index) so logging is order-independent."""
        if mode not in ("infer", "train"):
            raise ValueError("mode must be 'infer' or 'train'")
        xs = [t if isinstance(t, ad.Tensor) else ad.Tensor(t) for t in tokens]
        if not xs:
            raise ValueError("token batch must be non-empty")
        outputs, decisions = [], []
        for t, x in enumerate(xs):
            if mode == "infer":
                y, d = self.forward_infer(x)
            else:
                rng = np.random.default_rng([self.config.seed, step, t])
                y, d = self.forward_train(x, rng)
            outputs.append(y)
            decisions.append(d)
        return outputs, decisions
