"""Static inspection of the rule-set and application of the five reduction
patterns, in the fixed pass order: modifier elimination (ME) and similar rule
composition (SRC) are exact and run before and after each approximate pass
(fast dimerization, then generalized enzymatic catalysis).

Every applied step is recorded with the checks that licensed it; candidates
failing a check are skipped and logged, never guessed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from . import expr as rexpr
from . import kappa, model
from .expr import BinOp, Const, Num, RateExpr, SpeciesVar, Sqrt
from .kappa import Expression, KappaError, Species
from .semantics import KappaSystem, Observable, Rule, rule_key, validate_rule


@dataclass
class ReductionConfig:
    enzyme_copy_threshold: int = 10
    enable_src: bool = True
    enable_me: bool = True
    enable_dimer: bool = True
    enable_enzymatic: bool = True
    max_passes: int = 50

    def __post_init__(self):
        if self.enzyme_copy_threshold < 1:
            raise ValueError("enzyme_copy_threshold must be >= 1")


@dataclass
class ReductionStep:
    kind: str  # SRC | ME | FastDimer | Enzymatic | GeneralizedEnzymatic
    removed_rules: list[str] = field(default_factory=list)
    added_rules: list[str] = field(default_factory=list)
    removed_species: list[str] = field(default_factory=list)
    introduced_constants: dict[str, float] = field(default_factory=dict)
    justification: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "removed_rules": self.removed_rules,
            "added_rules": self.added_rules,
            "removed_species": self.removed_species,
            "introduced_constants": self.introduced_constants,
            "justification": self.justification,
        }


@dataclass
class ReductionReport:
    steps: list[ReductionStep] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)
    rules_before: int = 0
    rules_after: int = 0
    agents_before: int = 0
    agents_after: int = 0

    def to_json(self) -> dict:
        return {
            "rules_before": self.rules_before,
            "rules_after": self.rules_after,
            "agents_before": self.agents_before,
            "agents_after": self.agents_after,
            "steps": [s.to_json() for s in self.steps],
            "notes": self.notes,
        }

    def to_text(self) -> str:
        lines = [
            f"rules: {self.rules_before} -> {self.rules_after}",
            f"agents: {self.agents_before} -> {self.agents_after}",
        ]
        for i, s in enumerate(self.steps, 1):
            lines.append(f"step {i}: {s.kind}")
            if s.removed_rules:
                lines.append(f"  removed rules: {', '.join(s.removed_rules)}")
            if s.added_rules:
                lines.append(f"  added rules: {', '.join(s.added_rules)}")
            if s.removed_species:
                lines.append(f"  removed species: {'; '.join(s.removed_species)}")
            for name, value in s.introduced_constants.items():
                lines.append(f"  constant {name} = {value!r}")
            for check, detail in s.justification.items():
                lines.append(f"  check {check}: {detail}")
        for note in self.notes:
            lines.append(f"note: {note}")
        return "\n".join(lines) + "\n"


# --- shared helpers ---------------------------------------------------------------


def _species_component(comp: Expression, sig) -> Species | None:
    try:
        return kappa.canonicalize_species(comp, sig)
    except KappaError:
        return None


def _side_occurrences(side: Expression, sig) -> list[tuple[Expression, Species | None]]:
    return [(c, _species_component(c, sig)) for c in kappa.components(side)]


def _occ(side_occurrences, key: str) -> int:
    return sum(1 for _, sp in side_occurrences if sp is not None and sp.key == key)


class _RuleView:
    """Cached per-rule component/species decomposition."""

    def __init__(self, rule: Rule, sig):
        self.rule = rule
        self.lhs = _side_occurrences(rule.lhs, sig)
        self.rhs = _side_occurrences(rule.rhs, sig)
        self.rate_vars = rexpr.species_vars(rule.rate) if rule.closed else set()

    def occ_lhs(self, key: str) -> int:
        return _occ(self.lhs, key)

    def occ_rhs(self, key: str) -> int:
        return _occ(self.rhs, key)

    def mentions(self, key: str) -> bool:
        return self.occ_lhs(key) > 0 or self.occ_rhs(key) > 0 or key in self.rate_vars


def _views(sys: KappaSystem) -> list[_RuleView]:
    return [_RuleView(r, sys.signature) for r in sys.rules]


def _species_universe(sys: KappaSystem, views: list[_RuleView]) -> list[Species]:
    """All species mentioned by the system, in first-mention order."""
    seen: dict[str, Species] = {}
    for sp in sys.init:
        seen.setdefault(sp.key, sp)
    for view in views:
        for _, sp in view.lhs + view.rhs:
            if sp is not None:
                seen.setdefault(sp.key, sp)
    return list(seen.values())


def _observable_touches(sys: KappaSystem, sp: Species) -> bool:
    for obs in sys.observables:
        if obs.pattern is not None and kappa.embeddings(obs.pattern, sp.expr):
            return True
        if obs.closed is not None and sp.key in rexpr.species_vars(obs.closed):
            return True
    return False


def _partial_component_embeds(views: list[_RuleView], sp: Species) -> bool:
    """True when some rule component that is not `sp` itself can match inside
    `sp`; such a rule could touch sp-copies despite an Absent classification."""
    for view in views:
        for comp, comp_sp in view.lhs + view.rhs:
            if comp_sp is not None and comp_sp.key == sp.key:
                continue
            if kappa.embeddings(comp, sp.expr):
                return True
    return False


def _species_rule_rate(view: _RuleView) -> float:
    """Reaction-level rate constant of a rule whose lhs components are all
    species: rule rate times the automorphism count of each component."""
    k = view.rule.rate
    for _, sp in view.lhs:
        k *= kappa.automorphisms(sp)
    return k


def _concat_components(comps: list[Expression]) -> Expression:
    agents: list = []
    label = 0
    for c in comps:
        part = c.concrete()
        shift = label
        out = []
        for a in part:
            sites = tuple(
                kappa.Site(s.name, s.internal, s.binding + shift if isinstance(s.binding, int) else s.binding)
                for s in a.sites
            )
            out.append(kappa.Agent(a.name, sites))
        label += 1 + max(
            (s.binding for a in part for s in a.sites if isinstance(s.binding, int)),
            default=0,
        )
        agents.extend(out)
    return Expression(tuple(agents))


def _remove_components(side: Expression, sig, key: str, count: int, append: list[Expression]) -> Expression:
    kept: list[Expression] = []
    left = count
    for c in kappa.components(side):
        sp = _species_component(c, sig)
        if left > 0 and sp is not None and sp.key == key:
            left -= 1
            continue
        kept.append(c)
    assert left == 0, "component removal miscounted"
    return _concat_components(kept + append)


def _note(notes: list[str], message: str) -> None:
    if message not in notes:
        notes.append(message)


def _fresh_constant(constants: dict[str, float], base: str) -> str:
    if base not in constants:
        return base
    i = 2
    while f"{base}_{i}" in constants:
        i += 1
    return f"{base}_{i}"


def _sum_rates(rates: list[float | RateExpr]) -> float | RateExpr:
    if all(isinstance(r, float) for r in rates):
        return float(sum(rates))
    total: RateExpr | None = None
    for r in rates:
        node = Num(r) if isinstance(r, float) else r
        total = node if total is None else BinOp("+", total, node)
    return total


# --- similar rule composition ------------------------------------------------------


def similar_rule_composition(sys: KappaSystem) -> tuple[KappaSystem, list[ReductionStep]]:
    """Merge rules that perform the same joint rewrite, summing their rates.

    Exact: the merged rule generates the same reactions with summed rate
    constants, leaving the CTMC unchanged.
    """
    keys = [rule_key(r, sys.signature) for r in sys.rules]
    groups: dict[str, list[int]] = {}
    for i, key in enumerate(keys):
        groups.setdefault(key, []).append(i)

    steps: list[ReductionStep] = []
    emitted: set[str] = set()
    rules: list[Rule] = []
    for i, rule in enumerate(sys.rules):
        key = keys[i]
        if key in emitted:
            continue
        emitted.add(key)
        members = groups[key]
        if len(members) == 1:
            rules.append(rule)
            continue
        rate = _sum_rates([sys.rules[j].rate for j in members])
        merged = Rule(rule.name, rule.lhs, rule.rhs, rate, origin="SRC")
        rules.append(merged)
        steps.append(
            ReductionStep(
                kind="SRC",
                removed_rules=[sys.rules[j].name for j in members[1:]],
                added_rules=[merged.name],
                justification={
                    "same_rewrite": key,
                    "summed_rates": [sys.rules[j].rate if not sys.rules[j].closed else rexpr.to_text(sys.rules[j].rate) for j in members],
                },
            )
        )
    out = KappaSystem(sys.signature, rules, dict(sys.init), list(sys.observables), dict(sys.constants))
    return out, steps


# --- modifier elimination ------------------------------------------------------------


def modifier_elimination(sys: KappaSystem, max_passes: int = 50) -> tuple[KappaSystem, list[ReductionStep]]:
    """Remove species that appear only as modifiers, folding their constant
    copy number into the affected rates.

    For a rule where the species occurs m times on each side the exact factor
    is C(n0, m) * |Aut|^m (the binomial and the automorphism count are what
    the eliminated copies contributed to the propensity); closed-form rates
    have the species variable substituted by n0.  Rules whose rate drops to
    zero, and rules left with no effect, are pruned.
    """
    steps: list[ReductionStep] = []
    current = sys
    for _ in range(max_passes):
        step = _eliminate_one_modifier(current)
        if step is None:
            break
        current, record = step
        steps.append(record)
    return current, steps


def _eliminate_one_modifier(sys: KappaSystem):
    views = _views(sys)
    for sp in _species_universe(sys, views):
        occs = [(v.occ_lhs(sp.key), v.occ_rhs(sp.key)) for v in views]
        if not all(nl == nr for nl, nr in occs):
            continue
        if not any(nl > 0 for nl, _ in occs):
            continue
        if _observable_touches(sys, sp):
            continue
        if _partial_component_embeds(views, sp):
            continue

        n0 = sys.init_count(sp)
        aut = kappa.automorphisms(sp)
        pool_pattern: list[Expression] = []
        new_rules: list[Rule] = []
        dead: list[str] = []
        modified: dict[str, object] = {}
        for view, (m, _) in zip(views, occs):
            rule = view.rule
            rate = rule.rate
            if rule.closed and sp.key in view.rate_vars:
                rate = rexpr.substitute(rate, {sp.key: Num(float(n0))})
                modified[rule.name] = f"substituted #{{{sp.key}}} = {n0}"
            if m == 0:
                new_rules.append(Rule(rule.name, rule.lhs, rule.rhs, rate, rule.origin) if rate is not rule.rate else rule)
                continue
            if rule.closed:
                if n0 < m:
                    dead.append(rule.name)
                    continue
            else:
                factor = math.comb(n0, m) * aut**m
                if factor == 0:
                    dead.append(rule.name)
                    continue
                rate = rate * factor
                modified[rule.name] = f"rate x C({n0},{m}) * {aut}^{m}"
            lhs = _remove_components(rule.lhs, sys.signature, sp.key, m, pool_pattern)
            rhs = _remove_components(rule.rhs, sys.signature, sp.key, m, pool_pattern)
            if not lhs.agents and not rhs.agents:
                dead.append(rule.name)
                modified.pop(rule.name, None)
                continue
            new_rules.append(Rule(rule.name, lhs, rhs, rate, "ME"))

        init = {s: c for s, c in sys.init.items() if s.key != sp.key}
        out = KappaSystem(sys.signature, new_rules, init, list(sys.observables), dict(sys.constants))
        record = ReductionStep(
            kind="ME",
            removed_rules=dead,
            removed_species=[sp.key],
            justification={
                "modifier_everywhere": True,
                "not_an_observable": True,
                "no_partial_match": True,
                "initial_count": n0,
                "automorphisms": aut,
                "modified_rules": modified,
            },
        )
        return out, record
    return None


# --- fast dimerization ---------------------------------------------------------------


@dataclass
class DimerCandidate:
    monomer: Species
    dimer: Species
    fwd: Rule
    rev: Rule
    k_fwd: float  # reaction-level constants (automorphism-folded)
    k_rev: float

    @property
    def equilibrium_constant(self) -> float:
        # large-count balance of the expanded CTMC: (k_fwd/2) x_M^2 = k_rev x_M2
        return self.k_fwd / (2.0 * self.k_rev)


def detect_dimerization(sys: KappaSystem) -> tuple[list[DimerCandidate], list[str]]:
    """Reversible M + M <-> M2 pairs passing the interference checks:
    the dimer is produced nowhere else, never consumed except by the
    unbinding rule, and the monomer is a modifier nowhere else."""
    views = _views(sys)
    notes: list[str] = []
    out: list[DimerCandidate] = []
    claimed: set[str] = set()
    keys = {r.name: rule_key(r, sys.signature) for r in sys.rules}
    for i, view in enumerate(views):
        rule = view.rule
        if rule.name in claimed or rule.closed:
            continue
        if len(view.lhs) != 2 or len(view.rhs) != 1:
            continue
        (c1, sp1), (c2, sp2) = view.lhs
        complex_sp = view.rhs[0][1]
        if sp1 is None or sp2 is None or complex_sp is None or sp1.key != sp2.key:
            continue
        script = validate_rule(rule, sys.signature)
        if script.created or script.deleted or script.modifications or script.unbindings or not script.bindings:
            continue
        monomer, dimer = sp1, complex_sp
        inverse_key = rule_key(rule.reversed(), sys.signature)
        rev = next(
            (v.rule for v in views if v.rule.name not in claimed and not v.rule.closed
             and v.rule.name != rule.name and keys[v.rule.name] == inverse_key),
            None,
        )
        if rev is None:
            continue
        ok = True
        for other in views:
            if other.rule.name in (rule.name, rev.name):
                continue
            if other.occ_rhs(dimer.key) > other.occ_lhs(dimer.key):
                _note(notes, f"dimer candidate {monomer.key}: {dimer.key} produced by rule {other.rule.name!r}")
                ok = False
            if other.occ_lhs(dimer.key) > other.occ_rhs(dimer.key):
                _note(notes, f"dimer candidate {monomer.key}: {dimer.key} consumed by rule {other.rule.name!r}")
                ok = False
            nl, nr = other.occ_lhs(monomer.key), other.occ_rhs(monomer.key)
            if nl == nr and nl > 0:
                _note(notes, f"dimer candidate {monomer.key}: monomer is a modifier in rule {other.rule.name!r}")
                ok = False
        if not ok:
            continue
        k_fwd = _species_rule_rate(view)
        k_rev = rev.rate * kappa.automorphisms(dimer)
        out.append(DimerCandidate(monomer, dimer, rule, rev, k_fwd, k_rev))
        claimed.update({rule.name, rev.name})
    return out, notes


def dimer_partition(m_total: float, k_eq: float) -> tuple[float, float]:
    """Equilibrium split of a monomer/dimer pool: returns (x_M, x_M2) with
    x_M + 2 x_M2 = M_T and K x_M^2 = x_M2.

    Uses the rationalized root 2 M_T / (sqrt(8 K M_T + 1) + 1), which is the
    stated closed form rewritten for numerical stability at small K M_T.
    """
    if m_total < 0:
        raise ValueError("total concentration must be non-negative")
    if k_eq <= 0:
        raise ValueError("equilibrium constant must be positive")
    x_m = 2.0 * m_total / (math.sqrt(8.0 * k_eq * m_total + 1.0) + 1.0)
    return x_m, (m_total - x_m) / 2.0


def _partition_exprs(pool_key: str, k_name: str) -> tuple[RateExpr, RateExpr]:
    pool = SpeciesVar(pool_key)
    root = Sqrt(BinOp("+", rexpr.mul(Num(8.0), Const(k_name), pool), Num(1.0)))
    x_m = rexpr.div(rexpr.mul(Num(2.0), pool), BinOp("+", root, Num(1.0)))
    x_m2 = rexpr.div(BinOp("-", pool, x_m), Num(2.0))
    return x_m, x_m2


def fast_dimerization_reduce(
    sys: KappaSystem, cfg: ReductionConfig
) -> tuple[KappaSystem, list[ReductionStep], list[str]]:
    """Eliminate fast dimerization pairs, pooling monomer and dimer into a
    total-count species and substituting the equilibrium partition into every
    rate law and observable that mentioned them."""
    steps: list[ReductionStep] = []
    notes: list[str] = []
    current = sys
    for _ in range(cfg.max_passes):
        candidates, det_notes = detect_dimerization(current)
        notes.extend(n for n in det_notes if n not in notes)
        applied = False
        for cand in candidates:
            result = _apply_dimer(current, cand, cfg, notes)
            if result is not None:
                current, step = result
                steps.append(step)
                applied = True
                break
        if not applied:
            break
    return current, steps, notes


def _apply_dimer(sys: KappaSystem, cand: DimerCandidate, cfg: ReductionConfig, notes: list[str]):
    views = _views(sys)
    m_key, d_key = cand.monomer.key, cand.dimer.key

    groups, _ = detect_enzymatic(sys, cfg)
    for group in groups:
        touched = {group.enzyme.key} | {b.complex.key for b in group.branches}
        for b in group.branches:
            touched.update(s.key for s in b.substrates)
        if m_key in touched or d_key in touched:
            _note(notes, f"dimer candidate {m_key}: overlaps enzymatic pattern around {group.enzyme.key}; skipped")
            return None

    for view in views:
        if view.rule.name in (cand.fwd.name, cand.rev.name):
            continue
        if not view.mentions(m_key) and not view.mentions(d_key):
            continue
        if not view.rule.closed and any(sp is None for _, sp in view.lhs):
            _note(notes, f"dimer candidate {m_key}: rule {view.rule.name!r} has partially specified reactants; skipped")
            return None
    for obs in sys.observables:
        if obs.pattern is None:
            continue
        for target in (cand.monomer, cand.dimer):
            if kappa.embeddings(obs.pattern, target.expr) and kappa.expression_key(obs.pattern) != target.key:
                _note(notes, f"dimer candidate {m_key}: observable {obs.name!r} partially matches {target.key}; skipped")
                return None

    base = cand.monomer.expr.agents[0].name + "_T"
    pool_name = base
    i = 2
    while pool_name in sys.signature.agents:
        pool_name = f"{base}{i}"
        i += 1
    agents = dict(sys.signature.agents)
    agents[pool_name] = kappa.AgentSig(pool_name, (), {})
    sig = kappa.Signature(agents)
    pool_sp = kappa.canonicalize_species(
        Expression((kappa.Agent(pool_name, ()),)), sig
    )
    pool_comp = pool_sp.expr

    constants = dict(sys.constants)
    k_name = _fresh_constant(constants, f"K_{pool_name}")
    constants[k_name] = cand.equilibrium_constant
    x_m, x_m2 = _partition_exprs(pool_sp.key, k_name)

    new_rules: list[Rule] = []
    converted: dict[str, str] = {}
    for view in views:
        rule = view.rule
        if rule.name in (cand.fwd.name, cand.rev.name):
            continue
        a_m, a_d = view.occ_lhs(m_key), view.occ_lhs(d_key)
        r_m, r_d = view.occ_rhs(m_key), view.occ_rhs(d_key)
        if not (a_m or a_d or r_m or r_d or {m_key, d_key} & view.rate_vars):
            new_rules.append(rule)
            continue
        lhs = _remove_components(rule.lhs, sys.signature, m_key, a_m, [])
        lhs = _remove_components(lhs, sys.signature, d_key, a_d, [pool_comp] * (a_m + 2 * a_d))
        rhs = _remove_components(rule.rhs, sys.signature, m_key, r_m, [])
        rhs = _remove_components(rhs, sys.signature, d_key, r_d, [pool_comp] * (r_m + 2 * r_d))
        if rule.closed:
            rate = rexpr.substitute(rule.rate, {m_key: x_m, d_key: x_m2})
        else:
            # closed form of the reaction propensity: pooled species enter
            # through the equilibrium partition (large-count monomial form),
            # the remaining reactants keep their exact binomial factors
            factors: list[RateExpr] = [Num(_species_rule_rate(view))]
            for _ in range(a_m):
                factors.append(x_m)
            for _ in range(a_d):
                factors.append(x_m2)
            if a_m > 1:
                factors.append(Num(1.0 / math.factorial(a_m)))
            if a_d > 1:
                factors.append(Num(1.0 / math.factorial(a_d)))
            counts: dict[str, int] = {}
            for _, sp in view.lhs:
                if sp.key not in (m_key, d_key):
                    counts[sp.key] = counts.get(sp.key, 0) + 1
            for key, count in counts.items():
                var = SpeciesVar(key)
                for j in range(count):
                    factors.append(var if j == 0 else BinOp("-", var, Num(float(j))))
                if count > 1:
                    factors.append(Num(1.0 / math.factorial(count)))
            rate = rexpr.mul(*factors) if len(factors) > 1 else factors[0]
        converted[rule.name] = "rate partitioned over pool"
        new_rules.append(Rule(rule.name, lhs, rhs, rate, "FastDimer"))

    observables: list[Observable] = []
    for obs in sys.observables:
        if obs.closed is not None:
            observables.append(Observable(obs.name, closed=rexpr.substitute(obs.closed, {m_key: x_m, d_key: x_m2})))
            continue
        okey = kappa.expression_key(obs.pattern)
        if okey in (m_key, d_key):
            target = cand.monomer if okey == m_key else cand.dimer
            part = x_m if okey == m_key else x_m2
            weight = len(kappa.embeddings(obs.pattern, target.expr))
            closed = part if weight == 1 else rexpr.mul(Num(float(weight)), part)
            observables.append(Observable(obs.name, closed=closed))
        else:
            observables.append(obs)

    pool_init = sys.init_count(cand.monomer) + 2 * sys.init_count(cand.dimer)
    init = {sp: c for sp, c in sys.init.items() if sp.key not in (m_key, d_key)}
    init[pool_sp] = pool_init

    out = KappaSystem(sig, new_rules, init, observables, constants)
    step = ReductionStep(
        kind="FastDimer",
        removed_rules=[cand.fwd.name, cand.rev.name],
        removed_species=[m_key, d_key],
        introduced_constants={k_name: cand.equilibrium_constant},
        justification={
            "monomer": m_key,
            "dimer": d_key,
            "pool_species": pool_sp.key,
            "pool_init": pool_init,
            "dimer_not_produced_elsewhere": True,
            "dimer_not_consumed_elsewhere": True,
            "monomer_not_a_modifier_elsewhere": True,
            "converted_rules": converted,
        },
    )
    return out, step


# --- generalized enzymatic catalysis ---------------------------------------------------


@dataclass
class EnzymeBranch:
    bind: Rule
    unbind: Rule
    produce: Rule
    substrates: list[Species]  # with multiplicity
    complex: Species
    products: list[Species]  # with multiplicity
    catalytic: bool  # complex persists through the production rule
    k_bind: float
    k_unbind: float
    k_cat: float

    def binding_constant(self) -> float:
        denom = 1.0
        counts: dict[str, int] = {}
        for s in self.substrates:
            counts[s.key] = counts.get(s.key, 0) + 1
        for c in counts.values():
            denom *= math.factorial(c)
        return self.k_bind / (denom * (self.k_unbind + self.k_cat))


@dataclass
class EnzymeGroup:
    enzyme: Species
    branches: list[EnzymeBranch]
    checks: dict


def detect_enzymatic(sys: KappaSystem, cfg: ReductionConfig) -> tuple[list[EnzymeGroup], list[str]]:
    """Find groups of binding/unbinding/production rule triples sharing one
    low-copy enzyme species.

    A branch is e + S_1 + ... + S_m <-> C ; C -> e + P... (dissociative) or
    C -> C + P... (catalytic).  The group is accepted when the enzyme is not
    an observable, starts below the copy-number threshold, and neither the
    enzyme nor any complex appears in a rule outside the group; complexes must
    also start empty and not be observables."""
    views = _views(sys)
    keys = {v.rule.name: rule_key(v.rule, sys.signature) for v in views}
    notes: list[str] = []
    groups: list[EnzymeGroup] = []
    claimed: set[str] = set()

    for seed in views:
        if seed.rule.name in claimed or seed.rule.closed:
            continue
        if len(seed.lhs) < 1 or len(seed.rhs) != 1 or seed.rhs[0][1] is None:
            continue
        candidates = []
        for _, sp in seed.lhs:
            if sp is not None and sp.key not in {c.key for c in candidates}:
                candidates.append(sp)
        for enzyme in candidates:
            group = _try_enzyme_group(sys, views, keys, enzyme, claimed, cfg, notes)
            if group is not None:
                groups.append(group)
                for b in group.branches:
                    claimed.update({b.bind.name, b.unbind.name, b.produce.name})
                break
    return groups, notes


def _try_enzyme_group(sys, views, keys, enzyme, claimed, cfg, notes):
    e_key = enzyme.key
    branches: list[EnzymeBranch] = []
    members: set[str] = set()
    for view in views:
        rule = view.rule
        if rule.name in claimed or rule.name in members or rule.closed:
            continue
        if len(view.rhs) != 1 or view.rhs[0][1] is None:
            continue
        if view.occ_lhs(e_key) != 1 or any(sp is None for _, sp in view.lhs):
            continue
        script = validate_rule(rule, sys.signature)
        if script.created or script.deleted or script.modifications or script.unbindings or not script.bindings:
            continue
        complex_sp = view.rhs[0][1]
        inverse = rule_key(rule.reversed(), sys.signature)
        unbind = next(
            (v.rule for v in views
             if v.rule.name not in claimed and v.rule.name not in members
             and v.rule.name != rule.name and not v.rule.closed
             and keys[v.rule.name] == inverse),
            None,
        )
        if unbind is None:
            continue
        produce = None
        catalytic = False
        products: list[Species] = []
        for v2 in views:
            r2 = v2.rule
            if r2.name in claimed or r2.name in members or r2.closed or r2.name in (rule.name, unbind.name):
                continue
            if len(v2.lhs) != 1 or v2.lhs[0][1] is None or v2.lhs[0][1].key != complex_sp.key:
                continue
            if any(sp is None for _, sp in v2.rhs):
                continue
            n_c = v2.occ_rhs(complex_sp.key)
            n_e = v2.occ_rhs(e_key)
            if n_c == 1 and n_e == 0:
                cat, prods = True, [sp for _, sp in v2.rhs if sp.key != complex_sp.key]
            elif n_c == 0 and n_e == 1:
                hit = False
                prods = []
                for _, sp in v2.rhs:
                    if sp.key == e_key and not hit:
                        hit = True
                        continue
                    prods.append(sp)
                cat = False
            else:
                continue
            if produce is not None:
                produce = None  # ambiguous: complex appears in several rules
                break
            produce, catalytic, products = r2, cat, prods
        if produce is None:
            continue
        substrates = []
        hit = False
        for _, sp in view.lhs:
            if sp.key == e_key and not hit:
                hit = True
                continue
            substrates.append(sp)
        k_bind = _species_rule_rate(view)
        k_unbind = unbind.rate * kappa.automorphisms(complex_sp)
        k_cat = produce.rate * kappa.automorphisms(complex_sp)
        branches.append(
            EnzymeBranch(rule, unbind, produce, substrates, complex_sp, products, catalytic, k_bind, k_unbind, k_cat)
        )
        members.update({rule.name, unbind.name, produce.name})

    if not branches:
        return None

    checks = {"enzyme": e_key, "branches": len(branches)}
    if _observable_touches(sys, enzyme):
        _note(notes, f"enzyme candidate {e_key}: is an observable; skipped")
        return None
    checks["not_an_observable"] = True
    n0 = sys.init_count(enzyme)
    if n0 >= cfg.enzyme_copy_threshold:
        _note(
            notes,
            f"enzyme candidate {e_key}: initial copy number {n0} >= threshold {cfg.enzyme_copy_threshold}; skipped",
        )
        return None
    checks["copy_number_below_threshold"] = f"{n0} < {cfg.enzyme_copy_threshold}"
    complex_keys = {b.complex.key for b in branches}
    if len(complex_keys) != len(branches):
        _note(notes, f"enzyme candidate {e_key}: two branches share a complex; skipped")
        return None
    for view in views:
        if view.rule.name in members:
            continue
        if view.mentions(e_key):
            _note(notes, f"enzyme candidate {e_key}: appears in rule {view.rule.name!r} outside the group; skipped")
            return None
        for ck in complex_keys:
            if view.mentions(ck):
                _note(
                    notes,
                    f"enzyme candidate {e_key}: complex {ck} appears in rule {view.rule.name!r} outside its triple; skipped",
                )
                return None
    checks["enzyme_neither_produced_nor_degraded_outside"] = True
    for b in branches:
        if sys.init_count(b.complex) != 0:
            _note(notes, f"enzyme candidate {e_key}: complex {b.complex.key} has nonzero initial count; skipped")
            return None
        if _observable_touches(sys, b.complex):
            _note(notes, f"enzyme candidate {e_key}: complex {b.complex.key} is an observable; skipped")
            return None
    checks["complexes_fresh_and_unobserved"] = True
    return EnzymeGroup(enzyme, branches, checks)


def _persistent_species(sys: KappaSystem, remaining: list[_RuleView], sp: Species) -> bool:
    """Never net-consumed by any remaining rule and initially present; such a
    species can gate a merged catalytic rule without changing its semantics."""
    if sys.init_count(sp) < 1:
        return False
    if _partial_component_embeds(remaining, sp):
        return False
    return all(v.occ_lhs(sp.key) == v.occ_rhs(sp.key) for v in remaining)


def generalized_enzymatic_reduce(
    sys: KappaSystem, cfg: ReductionConfig
) -> tuple[KappaSystem, list[ReductionStep], list[str]]:
    """Replace each detected enzymatic group by direct production rules with
    saturating closed-form rates.

    Per branch i: K_i = k_i / (k_i^- + k^_i) and the rate is
    k^_i * E_T * K_i * prod_j x_Sij / (1 + sum_l K_l * prod_j x_Slj); with a
    single branch this is exactly the Michaelis-Menten law.  Catalytic
    branches keep their substrates as modifiers; branches with identical
    products merge into one rule (rates summed) when every gating substrate is
    persistent."""
    steps: list[ReductionStep] = []
    notes: list[str] = []
    current = sys
    for _ in range(cfg.max_passes):
        groups, det_notes = detect_enzymatic(current, cfg)
        notes.extend(n for n in det_notes if n not in notes)
        if not groups:
            break
        current, step = _apply_enzyme_group(current, groups[0], len(steps) + 1)
        steps.append(step)
    return current, steps, notes


def _branch_letter(i: int) -> str:
    letters = "abcdefghijklmnopqrstuvwxyz"
    out = ""
    i0 = i
    while True:
        out = letters[i0 % 26] + out
        i0 = i0 // 26 - 1
        if i0 < 0:
            return out


def _apply_enzyme_group(sys: KappaSystem, group: EnzymeGroup, ordinal: int):
    constants = dict(sys.constants)
    et_base = "E_T" if ordinal == 1 else f"E_T{ordinal}"
    et_name = _fresh_constant(constants, et_base)
    e_total = sys.init_count(group.enzyme) + sum(sys.init_count(b.complex) for b in group.branches)
    constants[et_name] = float(e_total)

    k_names: list[str] = []
    for i, branch in enumerate(group.branches):
        base = f"K_{_branch_letter(i)}" if ordinal == 1 else f"K{ordinal}_{_branch_letter(i)}"
        name = _fresh_constant(constants, base)
        constants[name] = branch.binding_constant()
        k_names.append(name)

    def substrate_product(branch: EnzymeBranch) -> RateExpr | None:
        factors = [SpeciesVar(s.key) for s in branch.substrates]
        if not factors:
            return None
        return rexpr.mul(*factors)

    z_expr: RateExpr = Num(1.0)
    for branch, k_name in zip(group.branches, k_names):
        term: RateExpr = Const(k_name)
        sub = substrate_product(branch)
        if sub is not None:
            term = rexpr.mul(term, sub)
        z_expr = BinOp("+", z_expr, term)

    removed_rules: list[str] = []
    for b in group.branches:
        removed_rules.extend([b.bind.name, b.unbind.name, b.produce.name])

    group_rules = set(removed_rules)
    remaining_views = [v for v in _views(sys) if v.rule.name not in group_rules]

    def branch_rate(branch: EnzymeBranch, k_name: str) -> RateExpr:
        numer: RateExpr = rexpr.mul(Num(branch.k_cat), Const(et_name), Const(k_name))
        sub = substrate_product(branch)
        if sub is not None:
            numer = rexpr.mul(numer, sub)
        return rexpr.div(numer, z_expr)

    def side_expr(species_list: list[Species]) -> Expression:
        return _concat_components([s.expr for s in species_list])

    def substrate_union(idxs: list[int]) -> list[Species]:
        union: dict[str, tuple[Species, int]] = {}
        for i in idxs:
            counts: dict[str, int] = {}
            for s in group.branches[i].substrates:
                counts[s.key] = counts.get(s.key, 0) + 1
            for key, count in counts.items():
                sp = next(s for s in group.branches[i].substrates if s.key == key)
                if key not in union or union[key][1] < count:
                    union[key] = (sp, count)
        out: list[Species] = []
        for sp, count in union.values():
            out.extend([sp] * count)
        return out

    by_products: dict[tuple, list[int]] = {}
    for i, branch in enumerate(group.branches):
        if not branch.catalytic:
            continue
        pkey = tuple(sorted(s.key for s in branch.products))
        by_products.setdefault(pkey, []).append(i)

    merge_sets: list[list[int]] = []
    merged_members: set[int] = set()
    for idxs in by_products.values():
        if len(idxs) < 2:
            continue
        gating = substrate_union(idxs)
        if all(_persistent_species(sys, remaining_views, sp) for sp in gating):
            merge_sets.append(idxs)
            merged_members.update(idxs)

    new_rules: list[Rule] = []
    added: list[str] = []
    kind = "Enzymatic" if len(group.branches) == 1 else "GeneralizedEnzymatic"
    for idxs in merge_sets:
        gating = substrate_union(idxs)
        products = group.branches[idxs[0]].products
        lhs = side_expr(gating)
        rhs = side_expr(gating + products)
        rate = _sum_rates([branch_rate(group.branches[i], k_names[i]) for i in idxs])
        name = group.branches[idxs[0]].produce.name + "_red"
        new_rules.append(Rule(name, lhs, rhs, rate, kind))
        added.append(name)
    for i, branch in enumerate(group.branches):
        if i in merged_members:
            continue
        lhs = side_expr(branch.substrates)
        rhs = side_expr(branch.substrates + branch.products) if branch.catalytic else side_expr(branch.products)
        name = branch.produce.name + "_red"
        new_rules.append(Rule(name, lhs, rhs, branch_rate(branch, k_names[i]), kind))
        added.append(name)

    rules: list[Rule] = []
    inserted = False
    for rule in sys.rules:
        if rule.name in group_rules:
            if not inserted:
                rules.extend(new_rules)
                inserted = True
            continue
        rules.append(rule)
    if not inserted:
        rules.extend(new_rules)

    dead_keys = {group.enzyme.key} | {b.complex.key for b in group.branches}
    init = {sp: c for sp, c in sys.init.items() if sp.key not in dead_keys}
    out = KappaSystem(sys.signature, rules, init, list(sys.observables), constants)
    step = ReductionStep(
        kind=kind,
        removed_rules=removed_rules,
        added_rules=added,
        removed_species=sorted(dead_keys),
        introduced_constants={et_name: constants[et_name], **{k: constants[k] for k in k_names}},
        justification={
            **group.checks,
            "merged_branches": [[group.branches[i].produce.name for i in idxs] for idxs in merge_sets],
        },
    )
    return out, step


# --- top level --------------------------------------------------------------------


def _prune_signature(sys: KappaSystem) -> KappaSystem:
    used = model.used_agent_names(sys)
    agents = {n: a for n, a in sys.signature.agents.items() if n in used}
    return KappaSystem(kappa.Signature(agents), sys.rules, sys.init, sys.observables, sys.constants)


def reduce_all(sys: KappaSystem, cfg: ReductionConfig | None = None) -> tuple[KappaSystem, ReductionReport]:
    """Run the full pass pipeline: ME; SRC; fast dimerization; ME; SRC;
    generalized enzymatic; ME; SRC.  Each pass iterates to its own fixpoint."""
    cfg = cfg or ReductionConfig()
    report = ReductionReport(
        rules_before=len(sys.rules),
        agents_before=len(model.used_agent_names(sys)),
    )
    current = sys

    def exact_passes(s: KappaSystem) -> KappaSystem:
        if cfg.enable_me:
            s, steps = modifier_elimination(s, cfg.max_passes)
            report.steps.extend(steps)
        if cfg.enable_src:
            s, steps = similar_rule_composition(s)
            report.steps.extend(steps)
        return s

    current = exact_passes(current)
    if cfg.enable_dimer:
        current, steps, notes = fast_dimerization_reduce(current, cfg)
        report.steps.extend(steps)
        report.notes.extend(notes)
    current = exact_passes(current)
    if cfg.enable_enzymatic:
        current, steps, notes = generalized_enzymatic_reduce(current, cfg)
        report.steps.extend(steps)
        report.notes.extend(notes)
    current = exact_passes(current)

    current = _prune_signature(current)
    report.rules_after = len(current.rules)
    report.agents_after = len(model.used_agent_names(current))
    return current, report
