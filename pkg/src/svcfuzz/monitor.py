"""Campaign monitor: coverage/digest tracking factors, species-discovery
style saturation estimators, and the on/off campaign switch.

The tracking factors treat each execution's coverage digest as one observed
"species".  A digest seen exactly once is a singleton, exactly twice a
doubleton; the derived estimators bound what further fuzzing can still
discover:

* discovery rate  ``f1 / n``
* coverage upper bound  ``U(n) = C / (C + (n-1) f1^2 / (2 n f2))``
* extrapolated coverage  ``S(n+m) = S(n) + Q0 [1 - (1 - Q1/(n Q0 + Q1))^m]``

The switch turns off once both signals fall below their thresholds after a
warm-up, and turns back on when replay inconsistencies or version evolution
invalidate what has been learned.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from .tracing import digest_hex


class UndefinedEstimate(ArithmeticError):
    """Raised when an estimator's precondition (n >= 1, C >= 1) fails."""


@dataclass
class CampaignStats:
    """Incrementally maintained tracking factors for one target App."""

    s_hat: int  # total blocks in the target App
    n: int = 0  # executions ingested
    f1: int = 0  # digests observed exactly once
    f2: int = 0  # digests observed exactly twice
    c_stored: int = 0  # stored seeds with distinct digests
    _freq: dict = field(default_factory=dict, repr=False)
    _digest_blocks: dict = field(default_factory=dict, repr=False)
    _covered: set = field(default_factory=set, repr=False)
    _ns_count: dict = field(default_factory=dict, repr=False)
    _blocks_with_ns: int = 0

    @property
    def s_n(self) -> int:
        return len(self._covered)

    @property
    def q0(self) -> int:
        return self.s_hat - self.s_n

    @property
    def q1(self) -> int:
        """Covered blocks all of whose covering digests are singletons."""
        return self.s_n - self._blocks_with_ns

    @property
    def c(self) -> int:
        return self.c_stored

    def distinct_digests(self) -> int:
        return len(self._freq)

    def to_json(self) -> dict:
        return {
            "n": self.n, "s_hat": self.s_hat, "s_n": self.s_n,
            "f1": self.f1, "f2": self.f2, "q0": self.q0, "q1": self.q1, "c": self.c,
        }


def ingest_execution(stats: CampaignStats, digest: int, probe_set, stored_distinct: int | None = None) -> CampaignStats:
    """Fold one execution (its digest and target-App block set) into the stats.

    ``stored_distinct`` is the store's current distinct-digest count; when
    omitted, first-wins storage is assumed and C equals the number of
    distinct digests observed.
    """
    stats.n += 1
    freq = stats._freq.get(digest, 0)
    stats._freq[digest] = freq + 1
    if freq == 0:
        blocks = frozenset(probe_set)
        stats._digest_blocks[digest] = blocks
        stats.f1 += 1
        stats._covered.update(blocks)
    elif freq == 1:
        stats.f1 -= 1
        stats.f2 += 1
        for block in stats._digest_blocks[digest]:
            count = stats._ns_count.get(block, 0)
            stats._ns_count[block] = count + 1
            if count == 0:
                stats._blocks_with_ns += 1
    elif freq == 2:
        stats.f2 -= 1
    stats.c_stored = stored_distinct if stored_distinct is not None else len(stats._freq)
    return stats


def discovery_rate(stats: CampaignStats) -> float:
    """Fraction of executions that exposed a still-unique digest: f1/n."""
    if stats.n < 1:
        raise UndefinedEstimate("discovery rate needs n >= 1")
    return stats.f1 / stats.n


def upper_bound_U(stats: CampaignStats) -> float:
    """Upper bound on the fraction of discoverable behavior already stored.

    With no doubletons the singleton term degrades to the bias-corrected
    form (n-1) f1 (f1-1) / (2n).
    """
    if stats.n < 1:
        raise UndefinedEstimate("upper bound needs n >= 1")
    if stats.c < 1:
        raise UndefinedEstimate("upper bound needs C >= 1")
    n, f1, f2, c = stats.n, stats.f1, stats.f2, stats.c
    if f2 > 0:
        term = (n - 1) * f1 * f1 / (2 * n * f2)
    else:
        term = (n - 1) * f1 * (f1 - 1) / (2 * n)
    return c / (c + term)


def extrapolate_S(stats: CampaignStats, m: int) -> float:
    """Expected covered-block count after m further executions."""
    if stats.n < 1:
        raise UndefinedEstimate("extrapolation needs n >= 1")
    if m < 0:
        raise ValueError("m must be non-negative")
    s_n, q0, q1 = stats.s_n, stats.q0, stats.q1
    if m == 0 or q0 == 0 or q1 == 0:
        return float(s_n)
    return s_n + q0 * (1.0 - (1.0 - q1 / (stats.n * q0 + q1)) ** m)


@dataclass(frozen=True)
class SwitchPolicy:
    t1: float = 0.01  # discovery-rate floor
    t2: float = 0.005  # (U - extrapolated coverage fraction) floor
    m_star: int | None = None  # extrapolation horizon; None = one campaign length (n)
    n_min: int = 200  # warm-up before saturation may trigger


@dataclass(frozen=True)
class Transition:
    state: str  # "on" | "off"
    reason: str  # "user" | "version_evolution" | "inconsistency" | "saturation" | "budget"
    at_n: int


_ON_ONLY = {"version_evolution", "inconsistency"}
_OFF_ONLY = {"saturation", "budget"}


class Switch:
    """Campaign on/off switch with an append-only transition history."""

    def __init__(self):
        self.state = "on"
        self.history: list[Transition] = []

    def is_on(self) -> bool:
        return self.state == "on"

    def turn(self, state: str, reason: str, at_n: int = 0) -> Transition | None:
        if reason in _ON_ONLY and state != "on":
            raise ValueError(f"reason {reason!r} may only turn the switch on")
        if reason in _OFF_ONLY and state != "off":
            raise ValueError(f"reason {reason!r} may only turn the switch off")
        if self.state == state:
            return None
        self.state = state
        transition = Transition(state, reason, at_n)
        self.history.append(transition)
        return transition


def decide(stats: CampaignStats, policy: SwitchPolicy, switch: Switch) -> Transition | None:
    """Turn the switch off once saturation is evident (warm-up guarded)."""
    if not switch.is_on() or stats.n < max(policy.n_min, 1):
        return None
    if discovery_rate(stats) < policy.t1:
        return switch.turn("off", "saturation", stats.n)
    if stats.c >= 1 and stats.s_hat > 0:
        m = policy.m_star if policy.m_star is not None else stats.n
        gap = upper_bound_U(stats) - extrapolate_S(stats, m) / stats.s_hat
        if gap < policy.t2:
            return switch.turn("off", "saturation", stats.n)
    return None


class Monitor:
    """Consumes the ordered execution-event stream and drives the switch."""

    def __init__(self, s_hat: int, policy: SwitchPolicy | None = None, enabled: bool = True):
        self.stats = CampaignStats(s_hat)
        self.policy = policy or SwitchPolicy()
        self.switch = Switch()
        self.enabled = enabled
        self.snapshots: list[dict] = []

    def ingest(self, digest: int, probe_set, stored_distinct: int | None = None) -> Transition | None:
        ingest_execution(self.stats, digest, probe_set, stored_distinct)
        if not self.enabled:
            return None
        return decide(self.stats, self.policy, self.switch)

    def on_version_event(self, event=None) -> Transition | None:
        return self.switch.turn("on", "version_evolution", self.stats.n)

    def on_inconsistency(self, report=None) -> Transition | None:
        return self.switch.turn("on", "inconsistency", self.stats.n)

    def on_user(self, state: str) -> Transition | None:
        return self.switch.turn(state, "user", self.stats.n)

    def snapshot(self) -> dict:
        snap = self.stats.to_json()
        snap["switch"] = self.switch.state
        self.snapshots.append(snap)
        return snap

    def describe(self) -> dict:
        doc = self.stats.to_json()
        doc["digests"] = sorted(digest_hex(d) for d in self.stats._freq)
        return doc
