"""Exact discrete information theory over small joint tables.

A :class:`DiscreteWorld` is a joint distribution over a question ``Q``, an
answer ``A``, an optional early-retrieval variable (the *prefix*) and a list
of evidence variables that rounds of retrieval can reveal. Everything is in
nats and computed by marginalising the full table, so results are exact up
to floating point.

The potential ``V_t = H(A | Q, H_t)`` tracks the answer uncertainty left
after ``t`` rounds; its per-round drop is a conditional mutual information.
:func:`compare_policies` measures how much answer information an evidence
selection policy gathers in expectation, with and without first observing
the prefix variable.
"""

from __future__ import annotations

import json
import math
from collections.abc import Callable, Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SUM_TOL = 1e-9
TIE_TOL = 1e-12


class WorldError(ValueError):
    pass


def _names(v: str | Iterable[str]) -> tuple[str, ...]:
    return (v,) if isinstance(v, str) else tuple(v)


def entropy(p: np.ndarray) -> float:
    """Shannon entropy (nats) of a probability array of any shape."""
    flat = np.asarray(p, dtype=float).ravel()
    nz = flat[flat > 0]
    return float(-(nz * np.log(nz)).sum())


@dataclass
class DiscreteWorld:
    names: list[str]
    joint: np.ndarray
    question: str = "Q"
    answer: str = "A"
    evidence: list[str] = field(default_factory=list)
    prefix: str | None = None
    budgets: list[float] | None = None
    rounds: int | None = None
    name: str = ""
    subfamily: str = ""

    def __post_init__(self):
        self.joint = np.asarray(self.joint, dtype=float)
        if len(set(self.names)) != len(self.names):
            raise WorldError("duplicate variable names")
        if self.joint.ndim != len(self.names):
            raise WorldError(f"joint has {self.joint.ndim} axes for {len(self.names)} variables")
        if (self.joint < 0).any():
            raise WorldError("negative probability in joint table")
        total = float(self.joint.sum())
        if abs(total - 1.0) > SUM_TOL:
            raise WorldError(f"joint probabilities sum to {total!r}, not 1")
        self._axis = {n: i for i, n in enumerate(self.names)}
        for v in (self.question, self.answer, *self.evidence, *([self.prefix] if self.prefix else [])):
            self.axis(v)
        if self.states(self.answer) < 2:
            raise WorldError("answer alphabet needs at least 2 values")
        if self.budgets is None:
            self.budgets = [1.0] * len(self.evidence)
        if len(self.budgets) != len(self.evidence):
            raise WorldError("one budget per evidence variable required")
        if self.rounds is None:
            self.rounds = len(self.evidence)

    def axis(self, name: str) -> int:
        try:
            return self._axis[name]
        except KeyError:
            raise WorldError(f"unknown variable {name!r}") from None

    def states(self, name: str) -> int:
        return self.joint.shape[self.axis(name)]

    @property
    def size(self) -> int:
        return int(self.joint.size)

    def marginal(self, names: Sequence[str]) -> np.ndarray:
        """Joint marginal over ``names`` with axes in that order."""
        axes = [self.axis(n) for n in names]
        if len(set(axes)) != len(axes):
            raise WorldError("repeated variable in marginal")
        drop = tuple(i for i in range(self.joint.ndim) if i not in axes)
        m = self.joint.sum(axis=drop) if drop else self.joint
        kept = sorted(axes)
        return np.transpose(m, [kept.index(a) for a in axes])

    def slice(self, observed: Mapping[str, int]) -> tuple[np.ndarray, list[str]]:
        """Unnormalised table restricted to ``observed`` values, with remaining names."""
        idx = tuple(observed[n] if n in observed else slice(None) for n in self.names)
        rest = [n for n in self.names if n not in observed]
        return self.joint[idx], rest

    def conditional(self, target: Sequence[str], observed: Mapping[str, int]) -> tuple[np.ndarray, float]:
        """``p(target | observed)`` and ``p(observed)``."""
        sub, rest = self.slice(observed)
        mass = float(sub.sum())
        if mass <= 0:
            return np.zeros([self.states(t) for t in target]), 0.0
        drop = tuple(i for i, n in enumerate(rest) if n not in target)
        m = sub.sum(axis=drop) if drop else sub
        kept = [n for n in rest if n in target]
        m = np.transpose(m, [kept.index(t) for t in target])
        return m / mass, mass

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "subfamily": self.subfamily,
            "variables": [[n, self.states(n)] for n in self.names],
            "question": self.question,
            "answer": self.answer,
            "prefix": self.prefix,
            "evidence": list(self.evidence),
            "budgets": list(self.budgets),
            "rounds": self.rounds,
            "joint": [float(x) for x in self.joint.ravel()],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DiscreteWorld":
        try:
            names = [v[0] for v in d["variables"]]
            shape = [int(v[1]) for v in d["variables"]]
            flat = np.asarray(d["joint"], dtype=float)
        except (KeyError, TypeError, IndexError) as exc:
            raise WorldError(f"malformed world description: {exc!r}") from None
        if flat.size != math.prod(shape):
            raise WorldError(f"joint has {flat.size} entries, expected {math.prod(shape)}")
        return cls(names=names, joint=flat.reshape(shape), question=d.get("question", "Q"),
                   answer=d.get("answer", "A"), evidence=list(d.get("evidence", [])),
                   prefix=d.get("prefix"), budgets=d.get("budgets"), rounds=d.get("rounds"),
                   name=d.get("name", ""), subfamily=d.get("subfamily", ""))


def load_world(path: str | Path) -> DiscreteWorld:
    with open(path, encoding="utf-8") as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise WorldError(f"{path}: invalid JSON ({exc.msg})") from None
    world = DiscreteWorld.from_dict(d)
    if not world.name:
        world.name = Path(path).stem
    return world


def load_family(path: str | Path) -> list[DiscreteWorld]:
    """Load every ``*.json`` world in a directory (or a single file)."""
    p = Path(path)
    files = sorted(p.glob("*.json")) if p.is_dir() else [p]
    return [load_world(f) for f in files]


def conditional_entropy(world: DiscreteWorld, target: str | Iterable[str],
                        given: str | Iterable[str] = ()) -> float:
    """``H(target | given)`` in nats."""
    t, g = _names(target), _names(given)
    joint = world.marginal(list(dict.fromkeys(t + g)))
    return entropy(joint) - (entropy(world.marginal(list(g))) if g else 0.0)


def mutual_information(world: DiscreteWorld, target: str | Iterable[str],
                       evidence: str | Iterable[str], given: str | Iterable[str] = ()) -> float:
    """``I(target; evidence | given) = H(target | given) - H(target | given, evidence)``."""
    g, e = _names(given), _names(evidence)
    return conditional_entropy(world, target, g) - conditional_entropy(world, target, g + e)


@dataclass
class PotentialTrace:
    values: list[float]
    gains: list[float]
    history: list[str]
    prefix: list[str] = field(default_factory=list)

    @property
    def total_gain(self) -> float:
        return math.fsum(self.gains)

    def to_dict(self) -> dict:
        return {"values": self.values, "gains": self.gains, "history": self.history,
                "prefix": self.prefix}


def potential_trace(world: DiscreteWorld, history: Sequence[str],
                    prefix: Sequence[str] = ()) -> PotentialTrace:
    """Potentials ``V_0..V_T`` and per-round gains for an evidence history.

    ``V_t = H(A | Q, prefix, P_1..P_t)``; each gain is computed directly as
    ``I(A; P_t | Q, prefix, P_1..P_{t-1})``.
    """
    base = [world.question, *prefix]
    values = [conditional_entropy(world, world.answer, base)]
    gains = []
    for t, var in enumerate(history, start=1):
        before = base + list(history[:t - 1])
        gains.append(mutual_information(world, world.answer, var, before))
        values.append(conditional_entropy(world, world.answer, base + list(history[:t])))
    return PotentialTrace(values, gains, list(history), list(prefix))


def efficiency_ratio(trace: PotentialTrace, budget: float) -> float:
    """Information gained per unit of retrieval budget, ``(V_0 - V_T) / B``."""
    if budget <= 0:
        raise ValueError("budget must be positive")
    return (trace.values[0] - trace.values[-1]) / budget


def fano_bound(world: DiscreteWorld, history: Sequence[str], prefix: Sequence[str] = (),
               alphabet_size: float | None = None) -> float:
    """``(H(A|Q) - I(A; H_T | Q) + 1) / ln|A|`` with ``H_T`` = prefix + history."""
    n = alphabet_size if alphabet_size is not None else world.states(world.answer)
    if n <= 1:
        raise ValueError("alphabet size must exceed 1")
    h = conditional_entropy(world, world.answer, world.question)
    info = mutual_information(world, world.answer, [*prefix, *history], world.question)
    return (h - info + 1.0) / math.log(n)


def bayes_error(world: DiscreteWorld, observed: Sequence[str]) -> float:
    """Minimal error of guessing ``A`` from ``observed`` (MAP rule)."""
    m = world.marginal([world.answer, *observed])
    best = m.max(axis=0) if m.ndim > 1 else m.max()
    return float(1.0 - np.sum(best))


# ---------------------------------------------------------------------------
# evidence selection policies

Choice = str | Mapping[str, float]
Selector = Callable[[DiscreteWorld, Mapping[str, int], Sequence[str]], Choice]


def pointwise_gain(world: DiscreteWorld, observed: Mapping[str, int], candidate: str) -> float:
    """``I(A; candidate | observed values)`` at the realised observation."""
    pa, _ = world.conditional([world.answer], observed)
    h = entropy(pa)
    pv, _ = world.conditional([candidate], observed)
    rest = 0.0
    for v, w in enumerate(pv):
        if w > 0:
            post, _ = world.conditional([world.answer], {**observed, candidate: v})
            rest += w * entropy(post)
    return h - rest


def greedy_information(world: DiscreteWorld, observed: Mapping[str, int],
                       available: Sequence[str]) -> str:
    """Pick the evidence with the largest expected answer information; first wins ties."""
    gains = [pointwise_gain(world, observed, c) for c in available]
    top = max(gains)
    return next(c for c, g in zip(available, gains) if g >= top - TIE_TOL)


def fixed_order(world: DiscreteWorld, observed: Mapping[str, int], available: Sequence[str]) -> str:
    return available[0]


def uniform_random(world: DiscreteWorld, observed: Mapping[str, int],
                   available: Sequence[str]) -> dict[str, float]:
    return {c: 1.0 / len(available) for c in available}


@dataclass
class EvidencePolicy:
    name: str
    rounds: int
    grounded: bool
    select: Selector = greedy_information
    budget_per_round: float = 1.0

    @property
    def budget(self) -> float:
        return self.rounds * self.budget_per_round


@dataclass
class PolicyOutcome:
    name: str
    expected_gain: float  # I(A; everything observed | Q), in expectation
    in_loop_gain: float  # part gathered by the retrieval rounds
    expected_final_entropy: float

    def to_dict(self) -> dict:
        return {"name": self.name, "expected_gain": self.expected_gain,
                "in_loop_gain": self.in_loop_gain,
                "expected_final_entropy": self.expected_final_entropy}


@dataclass
class ComparisonReport:
    world: str
    grounded: PolicyOutcome
    ungrounded: PolicyOutcome
    method: str
    prefix_information: float  # I(A; prefix | Q)

    @property
    def advantage(self) -> float:
        return self.grounded.expected_gain - self.ungrounded.expected_gain

    def to_dict(self) -> dict:
        return {"world": self.world, "method": self.method,
                "prefix_information": self.prefix_information, "advantage": self.advantage,
                "grounded": self.grounded.to_dict(), "ungrounded": self.ungrounded.to_dict()}


def _choices(choice: Choice) -> list[tuple[str, float]]:
    if isinstance(choice, str):
        return [(choice, 1.0)]
    return [(c, w) for c, w in choice.items() if w > 0]


def _expected_leaf_entropy(world: DiscreteWorld, policy: EvidencePolicy, observed: dict[str, int],
                           available: list[str], rounds_left: int) -> float:
    if rounds_left == 0 or not available:
        pa, _ = world.conditional([world.answer], observed)
        return entropy(pa)
    total = 0.0
    for var, w in _choices(policy.select(world, observed, available)):
        pv, _ = world.conditional([var], observed)
        rest = [a for a in available if a != var]
        for v, pw in enumerate(pv):
            if pw > 0:
                total += w * pw * _expected_leaf_entropy(world, policy, {**observed, var: v},
                                                         rest, rounds_left - 1)
    return total


def _enumerate_outcome(world: DiscreteWorld, policy: EvidencePolicy) -> PolicyOutcome:
    q = world.question
    start_h = conditional_entropy(world, world.answer, q)
    use_prefix = policy.grounded and world.prefix is not None
    roots: list[tuple[dict[str, int], float]] = []
    for qv, pq in enumerate(world.marginal([q])):
        if pq <= 0:
            continue
        if use_prefix:
            pp, _ = world.conditional([world.prefix], {q: qv})
            roots += [({q: qv, world.prefix: v}, pq * w) for v, w in enumerate(pp) if w > 0]
        else:
            roots.append(({q: qv}, pq))
    after_prefix = 0.0
    leaf = 0.0
    for obs, w in roots:
        pa, _ = world.conditional([world.answer], obs)
        after_prefix += w * entropy(pa)
        leaf += w * _expected_leaf_entropy(world, policy, obs, list(world.evidence), policy.rounds)
    return PolicyOutcome(policy.name, start_h - leaf, after_prefix - leaf, leaf)


def _sample_outcome(world: DiscreteWorld, policy: EvidencePolicy, trials: int,
                    rng: np.random.Generator) -> PolicyOutcome:
    q = world.question
    start_h = conditional_entropy(world, world.answer, q)
    flat = world.joint.ravel()
    draws = rng.choice(flat.size, size=trials, p=flat / flat.sum())
    use_prefix = policy.grounded and world.prefix is not None
    after_prefix = leaf = 0.0
    for d in draws:
        x = dict(zip(world.names, np.unravel_index(d, world.joint.shape)))
        obs = {q: int(x[q])}
        if use_prefix:
            obs[world.prefix] = int(x[world.prefix])
        pa, _ = world.conditional([world.answer], obs)
        after_prefix += entropy(pa)
        available = list(world.evidence)
        for _ in range(policy.rounds):
            if not available:
                break
            options = _choices(policy.select(world, obs, available))
            names, weights = zip(*options)
            var = names[rng.choice(len(names), p=np.asarray(weights) / sum(weights))]
            obs[var] = int(x[var])
            available.remove(var)
        pa, _ = world.conditional([world.answer], obs)
        leaf += entropy(pa)
    after_prefix /= trials
    leaf /= trials
    return PolicyOutcome(policy.name, start_h - leaf, after_prefix - leaf, leaf)


def compare_policies(world: DiscreteWorld, grounded: EvidencePolicy, ungrounded: EvidencePolicy,
                     trials: int | None = None, *, enumeration_limit: int = 1 << 16,
                     seed: int = 0) -> ComparisonReport:
    """Expected answer information gathered by a grounded-first policy vs an ungrounded one.

    Exact enumeration is used when the joint has at most ``enumeration_limit``
    cells or ``trials`` is None; otherwise ``trials`` Monte Carlo draws.
    """
    if grounded.rounds != ungrounded.rounds or not math.isclose(grounded.budget, ungrounded.budget):
        raise ValueError(
            f"budget mismatch: {grounded.name} has {grounded.budget}, {ungrounded.name} has {ungrounded.budget}")
    prefix_info = (mutual_information(world, world.answer, world.prefix, world.question)
                   if world.prefix else 0.0)
    if trials is None or world.size <= enumeration_limit:
        g, u = _enumerate_outcome(world, grounded), _enumerate_outcome(world, ungrounded)
        method = "enumeration"
    else:
        rng = np.random.default_rng(seed)
        g, u = _sample_outcome(world, grounded, trials, rng), _sample_outcome(world, ungrounded, trials, rng)
        method = f"sampling({trials})"
    return ComparisonReport(world.name, g, u, method, prefix_info)


def default_policies(world: DiscreteWorld) -> tuple[EvidencePolicy, EvidencePolicy]:
    rounds = world.rounds or len(world.evidence)
    return (EvidencePolicy("grounded-first", rounds, grounded=True),
            EvidencePolicy("ungrounded", rounds, grounded=False))


# ---------------------------------------------------------------------------
# world constructors


def random_world(rng: np.random.Generator, n_evidence: int = 2, max_states: int = 4,
                 with_prefix: bool = False, concentration: float = 1.0) -> DiscreteWorld:
    names = ["Q", "A"] + (["P0"] if with_prefix else []) + [f"E{i}" for i in range(1, n_evidence + 1)]
    shape = [int(rng.integers(2, max_states + 1)) for _ in names]
    joint = rng.dirichlet([concentration] * math.prod(shape)).reshape(shape)
    return DiscreteWorld(names, joint, evidence=[n for n in names if n.startswith("E")],
                         prefix="P0" if with_prefix else None, name="random")


def pointer_world(n_evidence: int = 2, answer_states: int = 4, q_states: int = 2, rounds: int = 1,
                  pointer_bias: float = 0.7, answer_bias: float = 0.55, prefix: str = "pointer",
                  name: str = "", subfamily: str = "") -> DiscreteWorld:
    """Multi-hop toy: a hidden pointer ``Z`` says which evidence holds the answer.

    ``E_Z`` equals ``A``; the other evidence variables are uniform noise. ``Z``
    leans towards ``Q mod n`` with ``pointer_bias`` and ``A`` leans towards
    ``Z mod |A|`` with ``answer_bias``. The prefix variable is ``Z`` itself
    (``prefix="pointer"``), independent noise (``"noise"``) or a constant
    (``"none"``).
    """
    n, na, nq = n_evidence, answer_states, q_states
    pz_q = np.full((nq, n), (1 - pointer_bias) / max(n - 1, 1))
    for qv in range(nq):
        pz_q[qv, qv % n] = pointer_bias
    if n == 1:
        pz_q[:] = 1.0
    pa_z = np.full((n, na), (1 - answer_bias) / (na - 1))
    for z in range(n):
        pa_z[z, z % na] = answer_bias
    n_prefix = {"pointer": n, "noise": 2, "none": 1}[prefix]
    shape = [nq, na, n_prefix] + [na] * n
    joint = np.zeros(shape)
    for qv in range(nq):
        for z in range(n):
            for a in range(na):
                base = pz_q[qv, z] * pa_z[z, a] / nq
                if base == 0:
                    continue
                for pv in range(n_prefix):
                    if prefix == "pointer":
                        if pv != z:
                            continue
                        w = base
                    else:
                        w = base / n_prefix
                    # E_z = a; the others uniform
                    idx_lists = [[a] if j == z else list(range(na)) for j in range(n)]
                    noise = 1.0 / na ** (n - 1)
                    for es in np.ndindex(*[len(l) for l in idx_lists]):
                        e_vals = tuple(idx_lists[j][es[j]] for j in range(n))
                        joint[(qv, a, pv) + e_vals] += w * noise
    names = ["Q", "A", "P0"] + [f"E{i}" for i in range(1, n + 1)]
    return DiscreteWorld(names, joint / joint.sum(), evidence=names[3:], prefix="P0",
                         rounds=rounds, name=name, subfamily=subfamily)


def q_independent_world(n_evidence: int = 2, answer_states: int = 3, q_states: int = 2,
                        rounds: int = 1, name: str = "", subfamily: str = "") -> DiscreteWorld:
    """Evidence and answer independent of ``Q``; the prefix carries nothing."""
    w = pointer_world(n_evidence, answer_states, 1, rounds, pointer_bias=1.0 / n_evidence,
                      answer_bias=1.0 / answer_states if answer_states > 1 else 1.0,
                      prefix="noise")
    # replicate across question values
    joint = np.repeat(w.joint, q_states, axis=0) / q_states
    return DiscreteWorld(w.names, joint, evidence=w.evidence, prefix="P0", rounds=rounds,
                         name=name, subfamily=subfamily)


# ---------------------------------------------------------------------------
# invariant suite


@dataclass
class Check:
    world: str
    name: str
    ok: bool
    detail: str = ""


def check_world(world: DiscreteWorld, tol: float = 1e-12) -> list[Check]:
    """Run the chain-rule, monotonicity, Fano and dominance checks on one world."""
    out = []
    history = list(world.evidence)
    trace = potential_trace(world, history)
    direct = mutual_information(world, world.answer, history, world.question)
    out.append(Check(world.name, "chain_rule", abs(trace.total_gain - direct) <= tol,
                     f"sum gains {trace.total_gain!r} vs I {direct!r}"))
    mono = all(b <= a + tol for a, b in zip(trace.values, trace.values[1:]))
    out.append(Check(world.name, "monotone_potential", mono, f"V = {trace.values}"))
    observed = [world.question] + history
    pe = bayes_error(world, observed)
    fb = fano_bound(world, history)
    out.append(Check(world.name, "fano_bound", fb >= pe - tol, f"bound {fb:.6f} vs Pe {pe:.6f}"))
    if world.prefix is not None:
        g, u = default_policies(world)
        rep = compare_policies(world, g, u)
        out.append(Check(world.name, "grounded_dominance", rep.advantage >= -tol,
                         f"advantage {rep.advantage:.6g}"))
        if world.subfamily == "q_correlated":
            out.append(Check(world.name, "strict_improvement",
                             rep.prefix_information > 1e-9 and rep.advantage > 1e-9,
                             f"advantage {rep.advantage:.6g}, I(A;P0|Q) {rep.prefix_information:.6g}"))
    return out


def bundled_family_path() -> Path:
    from importlib import resources
    return Path(str(resources.files("ekarag").joinpath("data/worlds")))


def bundled_family_worlds() -> list[DiscreteWorld]:
    """Constructors behind the bundled world files."""
    worlds = [
        pointer_world(2, 4, 2, 1, name="pointer_n2_t1", subfamily="q_correlated"),
        pointer_world(3, 4, 2, 1, name="pointer_n3_t1", subfamily="q_correlated"),
        pointer_world(3, 4, 3, 2, pointer_bias=0.6, name="pointer_n3_t2", subfamily="q_correlated"),
        pointer_world(2, 3, 2, 1, pointer_bias=0.9, answer_bias=0.6, name="pointer_n2_t1_sharp",
                      subfamily="q_correlated"),
        pointer_world(2, 4, 2, 2, name="pointer_n2_t2", subfamily="q_correlated"),
        pointer_world(2, 4, 2, 1, prefix="noise", name="noise_prefix_n2", subfamily="adversarial"),
        pointer_world(3, 4, 2, 2, prefix="noise", name="noise_prefix_n3", subfamily="adversarial"),
        q_independent_world(2, 3, 2, 1, name="q_independent_n2", subfamily="q_independent"),
    ]
    return worlds
