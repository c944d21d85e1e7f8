"""Model files: the concrete syntax tying signatures, initial mixtures,
observables, constants and rules into a system.

Sections (one per line, ``#`` comments allowed; ``#{`` opens a species
variable, not a comment):

    %agent: Name(site~v1~v2,...)
    %const: NAME value
    %init:  <count> <mixture>
    %obs:   <name> <pattern>          or   %obs: <name> @@ <expression>
    [name:] <lhs> -> <rhs> @ <k>      or   <lhs> <-> <rhs> @ <k+>, <k->
    [name:] <lhs> -> <rhs> @@ <expression>

Reversible rules desugar into two rules suffixed ``_fwd``/``_rev``.  An empty
rule side is written ``.``.
"""

from __future__ import annotations

import re

from . import expr as rexpr
from . import kappa
from .kappa import KappaError, ParseError
from .semantics import EditScript, KappaSystem, Observable, Rule, validate_rule

_RULE_NAME_RE = re.compile(r"^([A-Za-z_][A-Za-z0-9_]*)\s*:\s*(.*)$")


def parse_model(text: str) -> KappaSystem:
    """Parse a model file into a licensed KappaSystem.

    Licensing (agents/sites/states declared, init fully specified) is enforced
    here; rule well-formedness is checked by `validate_system`.
    """
    lines = [kappa.strip_comment(raw).strip() for raw in text.splitlines()]
    agents: dict[str, kappa.AgentSig] = {}
    for i, line in enumerate(lines):
        if not line.startswith("%agent:"):
            continue
        partial = kappa.parse_signature(line, start_line=i + 1)
        for name, asig in partial.agents.items():
            if name in agents:
                raise kappa.SignatureError(f"duplicate agent declaration {name!r}", i + 1)
            agents[name] = asig
    sig = kappa.Signature(agents)

    system = KappaSystem(sig, [], {}, [], {})
    obs_names: set[str] = set()
    auto = 0
    for lineno, line in enumerate(lines, start=1):
        if not line or line.startswith("%agent:"):
            continue
        if line.startswith("%init:"):
            body = line[len("%init:"):].strip()
            m = re.match(r"(\d+)\s+(.*)$", body)
            if not m:
                raise ParseError("expected '%init: <count> <mixture>'", lineno)
            count = int(m.group(1))
            mix = kappa.parse_expression(m.group(2), sig, line=lineno)
            try:
                kappa.mixture_check(mix, sig)
            except KappaError as e:
                raise ParseError(f"initial mixture not fully specified: {e}", lineno)
            for comp in kappa.components(mix):
                sp = kappa.canonicalize_species(comp, sig)
                system.init[sp] = system.init.get(sp, 0) + count
        elif line.startswith("%obs:"):
            body = line[len("%obs:"):].strip()
            m = re.match(r"([A-Za-z_][A-Za-z0-9_]*)\s+(.*)$", body)
            if not m:
                raise ParseError("expected '%obs: <name> <pattern>'", lineno)
            name, rest = m.group(1), m.group(2).strip()
            if name in obs_names:
                raise ParseError(f"duplicate observable {name!r}", lineno)
            obs_names.add(name)
            if rest.startswith("@@"):
                try:
                    closed = rexpr.parse(rest[2:].strip())
                except rexpr.ExprError as e:
                    raise ParseError(str(e), lineno)
                system.observables.append(Observable(name, closed=closed))
            else:
                pat = kappa.parse_expression(rest, sig, line=lineno)
                kappa.pattern_check(pat, sig)
                system.observables.append(Observable(name, pattern=kappa.normalize(pat)))
        elif line.startswith("%const:"):
            body = line[len("%const:"):].strip()
            m = re.match(r"([A-Za-z_][A-Za-z0-9_]*)\s+([-+0-9.eE]+)$", body)
            if not m:
                raise ParseError("expected '%const: <name> <value>'", lineno)
            name = m.group(1)
            if name in system.constants:
                raise ParseError(f"duplicate constant {name!r}", lineno)
            system.constants[name] = float(m.group(2))
        elif line.startswith("%"):
            raise ParseError(f"unknown directive {line.split(':')[0]!r}", lineno)
        else:
            auto += 1
            for rule in _parse_rule_line(line, sig, lineno, auto):
                system.rules.append(rule)
    return system


def _parse_rule_line(line: str, sig, lineno: int, auto: int) -> list[Rule]:
    m = _RULE_NAME_RE.match(line)
    if m:
        name, body = m.group(1), m.group(2)
    else:
        name, body = f"r{auto}", line

    reversible = "<->" in body
    arrow = "<->" if reversible else "->"
    if arrow not in body:
        raise ParseError("expected '->' or '<->' in rule", lineno)
    lhs_text, rest = body.split(arrow, 1)
    if "@@" in rest:
        rhs_text, rate_text = rest.split("@@", 1)
        if reversible:
            raise ParseError("reversible rules require two numeric rates", lineno)
        try:
            rate: float | rexpr.RateExpr = rexpr.parse(rate_text.strip())
        except rexpr.ExprError as e:
            raise ParseError(str(e), lineno)
        rates = [rate]
    elif "@" in rest:
        rhs_text, rate_text = rest.split("@", 1)
        parts = [p.strip() for p in rate_text.split(",")]
        expected = 2 if reversible else 1
        if len(parts) != expected:
            raise ParseError(f"expected {expected} rate(s) after '@'", lineno)
        try:
            rates = [float(p) for p in parts]
        except ValueError:
            raise ParseError(f"malformed rate in {rate_text.strip()!r}", lineno)
        if any(k < 0 for k in rates):
            raise ParseError("rates must be non-negative", lineno)
    else:
        raise ParseError("missing '@ <rate>'", lineno)

    lhs = kappa.parse_expression(lhs_text.strip(), sig, line=lineno)
    rhs = kappa.parse_expression(rhs_text.strip(), sig, line=lineno)
    kappa.pattern_check(lhs, sig)
    kappa.pattern_check(rhs, sig)
    if reversible:
        return [
            Rule(f"{name}_fwd", lhs, rhs, rates[0]),
            Rule(f"{name}_rev", rhs, lhs, rates[1]),
        ]
    return [Rule(name, lhs, rhs, rates[0])]


def validate_system(system: KappaSystem) -> dict[str, EditScript]:
    """Run rule well-formedness over the whole system; returns edit scripts."""
    return {rule.name: validate_rule(rule, system.signature) for rule in system.rules}


def _format_side(e: kappa.Expression) -> str:
    agents = kappa.normalize(e).concrete()
    if not agents:
        return "."
    texts = [kappa.format_agent(a) for a in agents]
    bonded = [any(isinstance(s.binding, int) for s in a.sites) for a in agents]
    out: list[str] = []
    i = 0
    while i < len(texts):
        j = i
        while j + 1 < len(texts) and not bonded[j + 1] and not bonded[i] and texts[j + 1] == texts[i]:
            j += 1
        run = j - i + 1
        out.append(texts[i] if run == 1 else f"{run} {texts[i]}")
        i = j + 1
    return ",".join(out)


def format_rule(rule: Rule) -> str:
    lhs, rhs = _format_side(rule.lhs), _format_side(rule.rhs)
    if rule.closed:
        return f"{rule.name}: {lhs} -> {rhs} @@ {rexpr.to_text(rule.rate)}"
    return f"{rule.name}: {lhs} -> {rhs} @ {rule.rate!r}"


def print_model(system: KappaSystem) -> str:
    """Serialize a system back to the concrete syntax (round-trippable)."""
    out: list[str] = []
    for asig in system.signature.agents.values():
        parts = []
        for s in asig.sites:
            vals = "".join(f"~{v}" for v in sorted(asig.internal_values.get(s, ())))
            parts.append(s + vals)
        out.append(f"%agent: {asig.name}({','.join(parts)})")
    for name, value in system.constants.items():
        out.append(f"%const: {name} {value!r}")
    for sp, count in system.init.items():
        out.append(f"%init: {count} {sp.key}")
    for obs in system.observables:
        if obs.closed is not None:
            out.append(f"%obs: {obs.name} @@ {rexpr.to_text(obs.closed)}")
        else:
            out.append(f"%obs: {obs.name} {_format_side(obs.pattern)}")
    for rule in system.rules:
        out.append(format_rule(rule))
    return "\n".join(out) + "\n"


def used_agent_names(system: KappaSystem) -> set[str]:
    """Agent names referenced by rules, initial mixture or observables."""
    names: set[str] = set()
    for sp in system.init:
        names.update(a.name for a in sp.expr.concrete())
    for obs in system.observables:
        if obs.pattern is not None:
            names.update(a.name for a in obs.pattern.concrete())
    for rule in system.rules:
        for side in (rule.lhs, rule.rhs):
            names.update(a.name for a in side.concrete())
    return names


def apply_volume(system: KappaSystem, volume: float) -> KappaSystem:
    """Rescale numeric rule rates by V^(1 - arity), converting rates given per
    concentration into stochastic per-count constants (arity = number of
    consumed reactant components).  V = 1 is the identity."""
    if volume == 1.0:
        return system
    rules = []
    for rule in system.rules:
        if rule.closed:
            rules.append(rule)
            continue
        arity = len(kappa.components(rule.lhs))
        rules.append(Rule(rule.name, rule.lhs, rule.rhs, rule.rate * volume ** (1 - arity), rule.origin))
    return KappaSystem(system.signature, rules, dict(system.init), list(system.observables), dict(system.constants))
