"""Rules, rule well-formedness, reactant/modifier/product classification, and
expansion of a rule-based system into a finite stochastic reaction network.

A rule rewrites an aligned left pattern into a right pattern through creation,
unbinding, deletion, modification and binding steps.  Expansion instantiates
every rule over every combination of reachable species, producing mass-action
reactions ``a -> a'`` whose propensity is ``k * prod_i C(x_i, a_i)``; rules
carrying a closed-form rate law turn into single reactions evaluating that law
on the state.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import expr as rexpr
from . import kappa
from .kappa import (
    Agent,
    Expression,
    KappaError,
    Signature,
    Site,
    Species,
    WILDCARD,
)


class RuleError(KappaError):
    pass


class ExpandError(KappaError):
    pass


class CapExceeded(ExpandError):
    def __init__(self, kind: str, cap: int):
        self.kind = kind
        self.cap = cap
        super().__init__(f"expansion exceeded {kind} cap ({cap}); network may be infinite")


@dataclass(frozen=True)
class Rule:
    name: str
    lhs: Expression
    rhs: Expression
    rate: float | rexpr.RateExpr
    origin: str = "user"

    @property
    def closed(self) -> bool:
        return not isinstance(self.rate, float)

    def reversed(self) -> "Rule":
        return Rule(self.name + "_inv", self.rhs, self.lhs, self.rate, self.origin)


# --- rule well-formedness ------------------------------------------------------

Port = tuple[int, str]  # (slot, site name)


@dataclass(frozen=True)
class SetInternal:
    slot: int
    site: str
    old: str
    new: str


@dataclass(frozen=True)
class Unbind:
    a: Port
    b: Port


@dataclass(frozen=True)
class UnbindWildcard:
    port: Port


@dataclass(frozen=True)
class Bind:
    a: Port
    b: Port


@dataclass
class EditScript:
    """Per-slot alignment of a rule plus the operations deriving rhs from lhs.

    Slots number the aligned agents; `lhs_of` / `rhs_of` give the agent index
    on each side (None for created / deleted agents).
    """

    lhs_of: list[int | None]
    rhs_of: list[int | None]
    created: list[int] = field(default_factory=list)  # slots
    deleted: list[int] = field(default_factory=list)
    modifications: list[SetInternal] = field(default_factory=list)
    unbindings: list[Unbind] = field(default_factory=list)
    wildcard_unbindings: list[UnbindWildcard] = field(default_factory=list)
    bindings: list[Bind] = field(default_factory=list)

    def summary(self) -> list[str]:
        out = []
        for s in self.created:
            out.append(f"create slot {s}")
        for s in self.deleted:
            out.append(f"delete slot {s}")
        for m in self.modifications:
            out.append(f"modify {m.slot}.{m.site}: {m.old}->{m.new}")
        for u in self.unbindings:
            out.append(f"unbind {u.a[0]}.{u.a[1]}--{u.b[0]}.{u.b[1]}")
        for w in self.wildcard_unbindings:
            out.append(f"unbind wildcard {w.port[0]}.{w.port[1]}")
        for b in self.bindings:
            out.append(f"bind {b.a[0]}.{b.a[1]}--{b.b[0]}.{b.b[1]}")
        return out or ["no-op"]


def _align(lhs: list[Agent], rhs: list[Agent]) -> list[tuple[int | None, int | None]]:
    """Pair agents across the rule by name and documented site set, first-come
    first-served; leftovers pair by name alone; the rest are created/deleted."""
    def groups(agents, exact):
        table: dict[object, list[int]] = {}
        for i, a in enumerate(agents):
            key = (a.name, frozenset(s.name for s in a.sites)) if exact else a.name
            table.setdefault(key, []).append(i)
        return table

    matched_l: set[int] = set()
    matched_r: set[int] = set()
    pairs: list[tuple[int, int]] = []
    for exact in (True, False):
        gl = groups(lhs, exact)
        gr = groups(rhs, exact)
        for key, lids in gl.items():
            rids = gr.get(key, [])
            li = [i for i in lids if i not in matched_l]
            ri = [j for j in rids if j not in matched_r]
            for i, j in zip(li, ri):
                pairs.append((i, j))
                matched_l.add(i)
                matched_r.add(j)
    slots: list[tuple[int | None, int | None]] = sorted(pairs)
    slots += [(i, None) for i in range(len(lhs)) if i not in matched_l]
    slots += [(None, j) for j in range(len(rhs)) if j not in matched_r]
    return slots


def validate_rule(rule: Rule, sig: Signature) -> EditScript:
    """Check Def.-style well-formedness and return the proving edit script.

    Created agents must document their full interface with concrete internal
    states; deleted agents must document their full interface and hold no
    wildcard bond (label bonds are removed by implied unbinding steps, so the
    rewrite never leaves a dangling bond in a mixture).
    """
    kappa.pattern_check(rule.lhs, sig)
    kappa.pattern_check(rule.rhs, sig)
    lhs = kappa.normalize(rule.lhs).concrete()
    rhs = kappa.normalize(rule.rhs).concrete()
    slots = _align(lhs, rhs)
    script = EditScript([l for l, _ in slots], [r for _, r in slots])

    def err(msg: str) -> RuleError:
        return RuleError(f"rule {rule.name!r}: {msg}")

    l_bonds: set[frozenset[Port]] = set()
    r_bonds: set[frozenset[Port]] = set()
    for side, agents, idx_of, bonds in (
        ("lhs", lhs, script.lhs_of, l_bonds),
        ("rhs", rhs, script.rhs_of, r_bonds),
    ):
        slot_of = {agent_idx: slot for slot, agent_idx in enumerate(idx_of) if agent_idx is not None}
        for (i, sa), (j, sb) in kappa._bond_map(agents).items():
            bonds.add(frozenset({(slot_of[i], sa), (slot_of[j], sb)}))

    for slot, (li, ri) in enumerate(slots):
        if li is None:
            a = rhs[ri]
            asig = sig.agent(a.name)
            documented = {s.name for s in a.sites}
            if documented != set(asig.sites):
                raise err(f"created agent {a.name!r} has incomplete interface")
            for s in a.sites:
                if s.name in asig.internal_sites and s.internal is None:
                    raise err(f"created agent {a.name!r} lacks internal state on {s.name!r}")
                if s.binding == WILDCARD:
                    raise err(f"created agent {a.name!r} carries a wildcard bond")
            script.created.append(slot)
        elif ri is None:
            a = lhs[li]
            asig = sig.agent(a.name)
            if {s.name for s in a.sites} != set(asig.sites):
                raise err(
                    f"agent {a.name!r} deleted with incomplete interface; "
                    "deletion requires all sites documented"
                )
            for s in a.sites:
                if s.binding == WILDCARD:
                    raise err(f"agent {a.name!r} deleted while bound through a wildcard")
            script.deleted.append(slot)
        else:
            la, ra = lhs[li], rhs[ri]
            if {s.name for s in la.sites} != {s.name for s in ra.sites}:
                raise err(f"agent {la.name!r} documents different sites on the two sides")
            for s in la.sites:
                t = ra.site(s.name)
                if (s.internal is None) != (t.internal is None):
                    raise err(f"internal state of {la.name}.{s.name} appears on only one side")
                if s.internal is not None and s.internal != t.internal:
                    script.modifications.append(SetInternal(slot, s.name, s.internal, t.internal))
                if t.binding == WILDCARD and s.binding != WILDCARD:
                    raise err(f"wildcard bond introduced on {la.name}.{s.name}")
                if s.binding == WILDCARD and t.binding != WILDCARD:
                    script.wildcard_unbindings.append(UnbindWildcard((slot, s.name)))

    for pair in sorted(l_bonds - r_bonds, key=sorted):
        a, b = sorted(pair)
        script.unbindings.append(Unbind(a, b))
    for pair in sorted(r_bonds - l_bonds, key=sorted):
        a, b = sorted(pair)
        script.bindings.append(Bind(a, b))
    return script


class Classification(Enum):
    REACTANT = "reactant"
    MODIFIER = "modifier"
    PRODUCT = "product"
    ABSENT = "absent"
    NET_CONSUMER = "net-consumer"
    NET_PRODUCER = "net-producer"


def classify_species(rule: Rule, sp: Species) -> Classification:
    """Occurrence-count classification of `sp` within a rule.

    Unequal nonzero counts get the net-consumer/net-producer refinement; those
    species are excluded from every reduction pattern.
    """
    nl = kappa.occurrence_count(sp, rule.lhs)
    nr = kappa.occurrence_count(sp, rule.rhs)
    if nl == 0 and nr == 0:
        return Classification.ABSENT
    if nl == nr:
        return Classification.MODIFIER
    if nr == 0:
        return Classification.REACTANT
    if nl == 0:
        return Classification.PRODUCT
    return Classification.NET_CONSUMER if nl > nr else Classification.NET_PRODUCER


# --- rule canonical keys ----------------------------------------------------------


def _iface_color(a: Agent | None) -> str:
    if a is None:
        return "-"
    return f"{a.name}({';'.join(sorted(kappa._site_color(s) for s in a.sites))})"


def rule_key(rule: Rule, sig: Signature) -> str:
    """Canonical text of a rule's joint rewrite (both sides, shared agent
    alignment).  Two rules are the same rewrite iff their keys are equal."""
    from . import canon

    script = validate_rule(rule, sig)
    lhs = kappa.normalize(rule.lhs).concrete()
    rhs = kappa.normalize(rule.rhs).concrete()
    n = len(script.lhs_of)
    colors = []
    for slot in range(n):
        la = lhs[script.lhs_of[slot]] if script.lhs_of[slot] is not None else None
        ra = rhs[script.rhs_of[slot]] if script.rhs_of[slot] is not None else None
        colors.append(f"{_iface_color(la)}>>{_iface_color(ra)}")
    edges: list[canon.Edge] = []
    for tag, agents, idx_of in (("L", lhs, script.lhs_of), ("R", rhs, script.rhs_of)):
        slot_of = {ai: s for s, ai in enumerate(idx_of) if ai is not None}
        for (i, sa), (j, sb) in kappa._bond_map(agents).items():
            a, b = sorted([(slot_of[i], sa), (slot_of[j], sb)])
            edges.append((a, b, tag))
    edges = sorted(set(edges))
    order = canon.canonical_order(colors, edges)

    def side_text(agents, idx_of) -> str:
        chosen = [idx_of[slot] for slot in order if idx_of[slot] is not None]
        picked = [agents[i] for i in chosen]
        remap = {old: new for new, old in enumerate(chosen)}
        bonds = {
            (remap[a], sa): (remap[b], sb)
            for (a, sa), (b, sb) in kappa._bond_map(agents).items()
        }
        text, _ = kappa._render_ordered(picked, bonds, 1)
        return text

    return f"{side_text(lhs, script.lhs_of)} -> {side_text(rhs, script.rhs_of)}"


# --- systems -------------------------------------------------------------------


@dataclass
class Observable:
    name: str
    pattern: Expression | None = None
    closed: rexpr.RateExpr | None = None


@dataclass
class KappaSystem:
    signature: Signature
    rules: list[Rule]
    init: dict[Species, int]
    observables: list[Observable]
    constants: dict[str, float] = field(default_factory=dict)

    def init_count(self, sp: Species) -> int:
        return self.init.get(sp, 0)


# --- reaction networks ------------------------------------------------------------


@dataclass(frozen=True)
class MassAction:
    k: float


@dataclass(frozen=True)
class Closed:
    expr: rexpr.RateExpr


RateLaw = MassAction | Closed


@dataclass
class Reaction:
    consume: dict[int, int]
    produce: dict[int, int]
    law: RateLaw
    source_rule: str

    def stoich(self) -> dict[int, int]:
        out = dict(self.produce)
        for i, a in self.consume.items():
            out[i] = out.get(i, 0) - a
        return {i: v for i, v in out.items() if v != 0}


@dataclass
class NetObservable:
    name: str
    weights: np.ndarray | None = None  # embedding counts per species
    closed: rexpr.RateExpr | None = None


@dataclass
class ReactionNetwork:
    species: list[Species]
    reactions: list[Reaction]
    init_state: np.ndarray
    observables: list[NetObservable]
    constants: dict[str, float]

    def index_of(self, key: str) -> int | None:
        return self._index.get(key)

    def __post_init__(self):
        self._index = {sp.key: i for i, sp in enumerate(self.species)}

    def species_env(self, x) -> dict[str, float]:
        return {sp.key: float(x[i]) for i, sp in enumerate(self.species)}

    def propensity(self, j: int, x) -> float:
        """Mass-action: k * prod C(x_i, a_i); closed laws evaluate their
        expression, gated to 0 when consumption exceeds availability."""
        rx = self.reactions[j]
        for i, a in rx.consume.items():
            if x[i] < a:
                return 0.0
        if isinstance(rx.law, MassAction):
            value = rx.law.k
            for i, a in rx.consume.items():
                value *= math.comb(int(x[i]), a)
            return value
        return rexpr.evaluate(rx.law.expr, _ZeroDefault(self.species_env(x)), self.constants)

    def observable_values(self, x) -> dict[str, float]:
        out = {}
        for obs in self.observables:
            if obs.weights is not None:
                out[obs.name] = float(np.dot(obs.weights, x))
            else:
                out[obs.name] = rexpr.evaluate(obs.closed, _ZeroDefault(self.species_env(x)), self.constants)
        return out


class _ZeroDefault(dict):
    """Species environment where unreachable species count as zero."""

    def __init__(self, base):
        super().__init__(base)

    def __missing__(self, key):
        return 0.0


def ode_rhs(net: ReactionNetwork, z: np.ndarray, volume: float = 1.0) -> np.ndarray:
    """Deterministic rate: dz_i/dt = sum_j nu_ij c_j prod z^a with
    c_j = k_j * V^(|a_j| - 1); closed laws are evaluated on z as-is."""
    dz = np.zeros(len(net.species))
    env = None
    for rx in net.reactions:
        if isinstance(rx.law, MassAction):
            arity = sum(rx.consume.values())
            flux = rx.law.k * volume ** (arity - 1)
            for i, a in rx.consume.items():
                flux *= z[i] ** a
        else:
            if env is None:
                env = _ZeroDefault({sp.key: float(z[i]) for i, sp in enumerate(net.species)})
            flux = rexpr.evaluate(rx.law.expr, env, net.constants)
        for i, v in rx.stoich().items():
            dz[i] += v * flux
    return dz


# --- expansion ------------------------------------------------------------------


def expand(sys: KappaSystem, max_species: int = 1000, max_reactions: int = 5000) -> ReactionNetwork:
    """Expand a rule-based system into its reaction network.

    Breadth-first over species discovery: seed species are the initial
    mixture's components; each rule is instantiated over every multiset of
    species jointly admitting an embedding of its left pattern, with newly
    produced species enqueued, until a fixpoint (or a cap) is reached.

    The reaction rate constant is ``k_rule * eps / prod_i a_i!`` where ``eps``
    counts the lhs embeddings into the disjoint union of the consumed copies
    that realize this reaction's products, so the propensity equals rule rate
    times embedding count on heterogeneous reactants while keeping the
    binomial form on symmetric ones.
    """
    if max_species <= 0 or max_reactions <= 0:
        raise ValueError("expansion caps must be positive")
    sig = sys.signature
    species: list[Species] = []
    index: dict[str, int] = {}

    def register(sp: Species) -> int:
        if sp.key in index:
            return index[sp.key]
        if len(species) >= max_species:
            raise CapExceeded("species", max_species)
        index[sp.key] = len(species)
        species.append(sp)
        return index[sp.key]

    for sp in sys.init:
        register(sp)

    plans = []
    for rule in sys.rules:
        script = validate_rule(rule, sig)
        comps = kappa.components(rule.lhs)
        if rule.closed:
            for c in comps:
                try:
                    kappa.mixture_check(c, sig)
                except KappaError:
                    raise ExpandError(
                        f"rule {rule.name!r}: closed-form rate requires fully "
                        "specified (species) reactants"
                    )
        plans.append((rule, script, comps))

    reactions: list[Reaction] = []
    seen: set[tuple] = set()

    def add_reaction(rx: Reaction) -> None:
        sig_key = (
            rx.source_rule,
            tuple(sorted(rx.consume.items())),
            tuple(sorted(rx.produce.items())),
        )
        if sig_key in seen:
            return
        if len(reactions) >= max_reactions:
            raise CapExceeded("reactions", max_reactions)
        seen.add(sig_key)
        reactions.append(rx)

    changed = True
    while changed:
        changed = False
        before_r, before_s = len(reactions), len(species)
        for rule, script, comps in plans:
            _instantiate(rule, script, comps, sig, species, register, add_reaction)
        if len(reactions) != before_r or len(species) != before_s:
            changed = True

    init_state = np.zeros(len(species), dtype=np.int64)
    for sp, count in sys.init.items():
        init_state[index[sp.key]] = count

    observables = []
    for obs in sys.observables:
        if obs.closed is not None:
            observables.append(NetObservable(obs.name, closed=obs.closed))
        else:
            weights = np.array(
                [len(kappa.embeddings(obs.pattern, sp.expr)) for sp in species],
                dtype=np.int64,
            )
            observables.append(NetObservable(obs.name, weights=weights))

    return ReactionNetwork(species, reactions, init_state, observables, dict(sys.constants))


def _instantiate(rule, script, comps, sig, species, register, add_reaction) -> None:
    m = len(comps)
    if m == 0:
        products = _apply(rule, script, [], {}, sig)
        produce = _count_keys(products, register)
        law = Closed(rule.rate) if rule.closed else MassAction(rule.rate)
        add_reaction(Reaction({}, produce, law, rule.name))
        return

    candidates: list[list[int]] = []
    for c in comps:
        candidates.append([i for i, sp in enumerate(species) if kappa.embeddings(c, sp.expr)])
    pool = sorted(set(itertools.chain.from_iterable(candidates)))
    if any(not c for c in candidates):
        return

    lhs_norm = kappa.normalize(rule.lhs)
    for size in range(1, m + 1):
        for combo in itertools.combinations_with_replacement(pool, size):
            union, ranges = _disjoint_union([species[i] for i in combo], sig)
            embs = kappa.embeddings(lhs_norm, union)
            covered = [e for e in embs if _covers(e, ranges)]
            if not covered:
                continue
            consume: dict[int, int] = {}
            for i in combo:
                consume[i] = consume.get(i, 0) + 1
            union_agents = union.concrete()
            if rule.closed:
                products = _apply(rule, script, covered[0], union_agents, sig)
                produce = _count_keys(products, register)
                add_reaction(Reaction(consume, produce, Closed(rule.rate), rule.name))
                continue
            groups: dict[tuple, int] = {}
            for e in covered:
                products = _apply(rule, script, e, union_agents, sig)
                produce = _count_keys(products, register)
                key = tuple(sorted(produce.items()))
                groups[key] = groups.get(key, 0) + 1
            denom = 1
            for a in consume.values():
                denom *= math.factorial(a)
            for key, eps in sorted(groups.items()):
                k_rx = rule.rate * eps / denom
                add_reaction(Reaction(consume, dict(key), MassAction(k_rx), rule.name))


def _covers(embedding: tuple[int, ...], ranges: list[tuple[int, int]]) -> bool:
    used = set(embedding)
    return all(any(lo <= v < hi for v in used) for lo, hi in ranges)


def _disjoint_union(copies: list[Species], sig: Signature) -> tuple[Expression, list[tuple[int, int]]]:
    agents: list[Agent | None] = []
    ranges = []
    offset = 0
    for sp in copies:
        part = sp.expr.concrete()
        relabeled = []
        for a in part:
            sites = tuple(
                Site(s.name, s.internal, s.binding + offset if isinstance(s.binding, int) else s.binding)
                for s in a.sites
            )
            relabeled.append(Agent(a.name, sites))
        ranges.append((len(agents), len(agents) + len(part)))
        agents.extend(relabeled)
        offset += 1 + max(
            (s.binding for a in part for s in a.sites if isinstance(s.binding, int)),
            default=0,
        )
    return Expression(tuple(agents)), ranges


def _count_keys(product_keys: list, register) -> dict[int, int]:
    out: dict[int, int] = {}
    for key, sp in product_keys:
        idx = register(sp)
        out[idx] = out.get(idx, 0) + 1
    return out


def _apply(rule: Rule, script: EditScript, embedding, agents: list[Agent], sig: Signature):
    """Rewrite the matched union of species under the rule's edit script and
    return the canonicalized product components as (key, Species) pairs."""
    rhs = kappa.normalize(rule.rhs).concrete()
    # mutable working copies; bonds held in a symmetric partner map
    work: list[dict] = []
    partner: dict[Port, Port] = {}
    for a in agents:
        work.append({"name": a.name, "alive": True, "sites": {s.name: [s.internal] for s in a.sites}})
    for (i, sa), (j, sb) in kappa._bond_map(agents).items():
        partner[(i, sa)] = (j, sb)

    def agent_of_slot(slot: int) -> int:
        li = script.lhs_of[slot]
        return embedding[li]

    def free(port: Port) -> None:
        other = partner.pop(port, None)
        if other is not None:
            partner.pop(other, None)

    for u in script.unbindings:
        free((agent_of_slot(u.a[0]), u.a[1]))
    for w in script.wildcard_unbindings:
        free((agent_of_slot(w.port[0]), w.port[1]))
    for mod in script.modifications:
        work[agent_of_slot(mod.slot)]["sites"][mod.site][0] = mod.new
    for slot in script.deleted:
        idx = agent_of_slot(slot)
        for site in work[idx]["sites"]:
            free((idx, site))
        work[idx]["alive"] = False

    created_at: dict[int, int] = {}
    for slot in script.created:
        ra = rhs[script.rhs_of[slot]]
        idx = len(work)
        created_at[slot] = idx
        work.append({"name": ra.name, "alive": True, "sites": {s.name: [s.internal] for s in ra.sites}})

    def port_of(p: Port) -> Port:
        slot, site = p
        if slot in created_at:
            return (created_at[slot], site)
        return (agent_of_slot(slot), site)

    for b in script.bindings:
        pa, pb = port_of(b.a), port_of(b.b)
        partner[pa] = pb
        partner[pb] = pa

    out_agents: list[Agent] = []
    renum: dict[frozenset, int] = {}
    keep = [i for i, w in enumerate(work) if w["alive"]]
    label = 1
    for old in keep:
        w = work[old]
        sites = []
        for site, (internal,) in w["sites"].items():
            other = partner.get((old, site))
            binding = None
            if other is not None:
                pair = frozenset({(old, site), other})
                if pair not in renum:
                    renum[pair] = label
                    label += 1
                binding = renum[pair]
            sites.append(Site(site, internal, binding))
        out_agents.append(Agent(w["name"], tuple(sites)))
    result = Expression(tuple(out_agents))
    products = []
    for comp in kappa.components(result):
        sp = kappa.canonicalize_species(comp, sig)
        products.append((sp.key, sp))
    return products
