"""Site-graph expressions: concrete syntax, structural equivalence, canonical
forms and embeddings.

An expression is an ordered list of agents (or fictitious placeholders ``.``).
Each agent carries an interface of sites; a site may bear an internal state
(``~state``) and a binding state (absent = free, ``!_`` = bound to an unknown
partner, ``!n`` = one end of bond n).  Patterns are signature-licensed
expressions without dangling bonds; mixtures are fully specified patterns;
species are connected mixtures and carry a canonical text used as identity.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from . import canon

WILDCARD = "_"


class KappaError(Exception):
    """Base class for model errors; carries an optional source line."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(message if line is None else f"line {line}: {message}")


class ParseError(KappaError):
    pass


class SignatureError(KappaError):
    pass


class PatternError(KappaError):
    pass


# --- signatures ---------------------------------------------------------------


@dataclass(frozen=True)
class AgentSig:
    name: str
    sites: tuple[str, ...]
    internal_values: Mapping[str, frozenset[str]]  # only sites that carry states

    @property
    def internal_sites(self) -> frozenset[str]:
        return frozenset(self.internal_values)

    @property
    def binding_sites(self) -> frozenset[str]:
        # Every declared site may participate in bonds.
        return frozenset(self.sites)


@dataclass(frozen=True)
class Signature:
    agents: Mapping[str, AgentSig]

    def agent(self, name: str) -> AgentSig:
        try:
            return self.agents[name]
        except KeyError:
            raise SignatureError(f"unknown agent {name!r}") from None


_NAME_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")
_STATE_RE = re.compile(r"[A-Za-z0-9_]+")


def parse_signature(text: str, *, start_line: int = 1) -> Signature:
    """Parse one or more ``%agent: Name(site~v1~v2,...)`` declarations."""
    agents: dict[str, AgentSig] = {}
    for offset, line in enumerate(text.splitlines()):
        line = strip_comment(line).strip()
        if not line:
            continue
        for chunk in line.split("%agent:"):
            chunk = chunk.strip()
            if not chunk:
                continue
            sig = _parse_agent_decl(chunk, start_line + offset)
            if sig.name in agents:
                raise SignatureError(f"duplicate agent declaration {sig.name!r}", start_line + offset)
            agents[sig.name] = sig
    return Signature(agents)


def _parse_agent_decl(text: str, line: int) -> AgentSig:
    m = re.fullmatch(r"\s*([A-Za-z_][A-Za-z0-9_]*)\s*\((.*)\)\s*", text)
    if not m:
        raise ParseError(f"malformed agent declaration: {text!r}", line)
    name, body = m.group(1), m.group(2).strip()
    sites: list[str] = []
    values: dict[str, frozenset[str]] = {}
    if body:
        for part in body.split(","):
            tokens = part.strip().split("~")
            site = tokens[0].strip()
            if not _NAME_RE.fullmatch(site):
                raise ParseError(f"malformed site token {part.strip()!r}", line)
            if site in sites:
                raise SignatureError(f"duplicate site {site!r} in declaration of {name!r}", line)
            sites.append(site)
            states = [t.strip() for t in tokens[1:]]
            if states:
                for s in states:
                    if not _STATE_RE.fullmatch(s):
                        raise ParseError(f"malformed internal state {s!r}", line)
                if len(set(states)) != len(states):
                    raise SignatureError(f"duplicate internal state on site {site!r}", line)
                values[site] = frozenset(states)
    return AgentSig(name, tuple(sites), values)


# --- expressions ----------------------------------------------------------------


@dataclass(frozen=True)
class Site:
    name: str
    internal: str | None = None
    binding: int | str | None = None  # None = free, WILDCARD, or a bond label


@dataclass(frozen=True)
class Agent:
    name: str
    sites: tuple[Site, ...]

    def site(self, name: str) -> Site | None:
        for s in self.sites:
            if s.name == name:
                return s
        return None


@dataclass(frozen=True)
class Expression:
    """Ordered agent list; ``None`` entries are fictitious agents."""

    agents: tuple[Agent | None, ...]

    def concrete(self) -> list[Agent]:
        return [a for a in self.agents if a is not None]


def strip_comment(line: str) -> str:
    """Drop a trailing ``#`` comment (``#{`` opens a species variable, not a comment)."""
    i = 0
    while True:
        i = line.find("#", i)
        if i < 0:
            return line
        if i + 1 < len(line) and line[i + 1] == "{":
            i += 2
            continue
        return line[:i]


def parse_expression(text: str, sig: Signature, *, line: int | None = None) -> Expression:
    """Parse a comma-separated agent list.

    ``.`` denotes a fictitious agent and an integer prefix repeats an agent
    (``10 CI(ci,or)``); repetition is only allowed for agents without bond
    labels.  Every agent, site and internal state must be licensed by `sig`,
    and a bond label may occur at most twice.
    """
    entries: list[Agent | None] = []
    for count, token in _split_entries(text, line):
        if token == ".":
            if count != 1:
                raise ParseError("repetition count on a fictitious agent", line)
            entries.append(None)
            continue
        agent = _parse_agent(token, sig, line)
        if count != 1 and any(isinstance(s.binding, int) for s in agent.sites):
            raise ParseError(f"cannot repeat agent with bond labels: {token!r}", line)
        entries.extend([agent] * count)
    expr = Expression(tuple(entries))
    labels: dict[int, int] = {}
    for agent in expr.concrete():
        for s in agent.sites:
            if isinstance(s.binding, int):
                labels[s.binding] = labels.get(s.binding, 0) + 1
                if labels[s.binding] > 2:
                    raise PatternError(f"bond label {s.binding} used more than twice", line)
    return expr


def _split_entries(text: str, line: int | None) -> list[tuple[int, str]]:
    """Split on top-level commas into (repeat-count, agent-text) items."""
    out: list[tuple[int, str]] = []
    depth = 0
    item = ""
    for c in text + ",":
        if c == "," and depth == 0:
            item = item.strip()
            if item:
                m = re.fullmatch(r"(\d+)\s+(.*)", item)
                if m:
                    out.append((int(m.group(1)), m.group(2).strip()))
                else:
                    out.append((1, item))
            elif out or text.strip():
                raise ParseError("empty agent entry", line)
            item = ""
        else:
            if c == "(":
                depth += 1
            elif c == ")":
                depth -= 1
                if depth < 0:
                    raise ParseError("unbalanced ')'", line)
            item += c
    if depth != 0:
        raise ParseError("unbalanced '('", line)
    return out


def _parse_agent(text: str, sig: Signature, line: int | None) -> Agent:
    m = re.fullmatch(r"\s*([A-Za-z_][A-Za-z0-9_]*)\s*\((.*)\)\s*", text, re.S)
    if not m:
        raise ParseError(f"malformed agent: {text!r}", line)
    name, body = m.group(1), m.group(2).strip()
    if name not in sig.agents:
        raise SignatureError(f"unknown agent {name!r}", line)
    asig = sig.agents[name]
    sites: list[Site] = []
    seen: set[str] = set()
    if body:
        for part in body.split(","):
            site = _parse_site(part.strip(), name, asig, line)
            if site.name in seen:
                raise PatternError(f"site {site.name!r} repeated in interface of {name!r}", line)
            seen.add(site.name)
            sites.append(site)
    return Agent(name, tuple(sites))


def _parse_site(text: str, agent: str, asig: AgentSig, line: int | None) -> Site:
    m = re.fullmatch(r"([A-Za-z_][A-Za-z0-9_]*)(~[A-Za-z0-9_]+)?(!(?:\d+|_))?", text)
    if not m:
        raise ParseError(f"malformed site {text!r} in agent {agent!r}", line)
    name = m.group(1)
    if name not in asig.sites:
        raise SignatureError(f"unknown site {name!r} on agent {agent!r}", line)
    internal = m.group(2)[1:] if m.group(2) else None
    if internal is not None:
        allowed = asig.internal_values.get(name)
        if allowed is None:
            raise SignatureError(f"site {name!r} of {agent!r} bears no internal state", line)
        if internal not in allowed:
            raise SignatureError(f"unknown internal state {internal!r} for {agent}.{name}", line)
    binding: int | str | None = None
    if m.group(3):
        tail = m.group(3)[1:]
        binding = WILDCARD if tail == "_" else int(tail)
    return Site(name, internal, binding)


def format_site(s: Site) -> str:
    text = s.name
    if s.internal is not None:
        text += f"~{s.internal}"
    if s.binding is not None:
        text += "!_" if s.binding == WILDCARD else f"!{s.binding}"
    return text


def format_agent(a: Agent | None) -> str:
    if a is None:
        return "."
    return f"{a.name}({','.join(format_site(s) for s in a.sites)})"


def format_expression(e: Expression) -> str:
    return ",".join(format_agent(a) for a in e.agents)


# --- structural equivalence ------------------------------------------------------


def normalize(e: Expression) -> Expression:
    """Drop fictitious agents, erase dangling labels, renumber bonds densely.

    Labels are renamed to 1..k in order of first occurrence (agents in list
    order, sites in interface order).  Idempotent.
    """
    agents = e.concrete()
    counts: dict[int, int] = {}
    for a in agents:
        for s in a.sites:
            if isinstance(s.binding, int):
                counts[s.binding] = counts.get(s.binding, 0) + 1
    renumber: dict[int, int] = {}
    out: list[Agent] = []
    for a in agents:
        sites = []
        for s in a.sites:
            b = s.binding
            if isinstance(b, int):
                if counts[b] == 1:
                    b = None
                else:
                    if b not in renumber:
                        renumber[b] = len(renumber) + 1
                    b = renumber[b]
            sites.append(Site(s.name, s.internal, b))
        out.append(Agent(a.name, tuple(sites)))
    return Expression(tuple(out))


def _bond_map(agents: list[Agent]) -> dict[tuple[int, str], tuple[int, str]]:
    """Map each label-bound (agent index, site name) to its partner end."""
    ends: dict[int, list[tuple[int, str]]] = {}
    for i, a in enumerate(agents):
        for s in a.sites:
            if isinstance(s.binding, int):
                ends.setdefault(s.binding, []).append((i, s.name))
    out: dict[tuple[int, str], tuple[int, str]] = {}
    for label, pair in ends.items():
        if len(pair) != 2:
            raise PatternError(f"dangling bond label {label}")
        (a, sa), (b, sb) = pair
        out[(a, sa)] = (b, sb)
        out[(b, sb)] = (a, sa)
    return out


def components(e: Expression) -> list[Expression]:
    """Connected components of a normalized expression, in first-agent order."""
    e = normalize(e)
    agents = list(e.agents)
    bonds = _bond_map([a for a in agents if a is not None])
    n = len(agents)
    comp = [-1] * n
    order: list[list[int]] = []
    for i in range(n):
        if comp[i] >= 0:
            continue
        group = [i]
        comp[i] = len(order)
        stack = [i]
        while stack:
            v = stack.pop()
            for s in agents[v].sites:
                if isinstance(s.binding, int):
                    w = bonds[(v, s.name)][0]
                    if comp[w] < 0:
                        comp[w] = comp[i]
                        group.append(w)
                        stack.append(w)
        order.append(sorted(group))
    return [normalize(Expression(tuple(agents[i] for i in group))) for group in order]


def pattern_check(e: Expression, sig: Signature) -> None:
    """Raise unless `e` satisfies the pattern conditions (licensing, no
    repeated site in an interface, no dangling bonds)."""
    counts: dict[int, int] = {}
    for a in e.concrete():
        asig = sig.agent(a.name)
        seen: set[str] = set()
        for s in a.sites:
            if s.name in seen:
                raise PatternError(f"site {s.name!r} repeated in interface of {a.name!r}")
            seen.add(s.name)
            if s.name not in asig.sites:
                raise SignatureError(f"unknown site {s.name!r} on agent {a.name!r}")
            if s.internal is not None and s.name not in asig.internal_sites:
                raise PatternError(f"site {a.name}.{s.name} cannot bear an internal state")
            if isinstance(s.binding, int):
                counts[s.binding] = counts.get(s.binding, 0) + 1
    for label, c in counts.items():
        if c != 2:
            raise PatternError(f"dangling bond label {label}")


def mixture_check(e: Expression, sig: Signature) -> None:
    """Raise unless `e` is fully specified: full interfaces, no wildcards,
    concrete internal states, no fictitious agents."""
    for a in e.agents:
        if a is None:
            raise PatternError("fictitious agent in mixture")
        asig = sig.agent(a.name)
        documented = {s.name for s in a.sites}
        if documented != set(asig.sites):
            missing = set(asig.sites) - documented
            raise PatternError(f"agent {a.name!r} does not document sites {sorted(missing)}")
        for s in a.sites:
            if s.binding == WILDCARD:
                raise PatternError(f"wildcard bond on {a.name}.{s.name} in mixture")
            if s.name in asig.internal_sites and s.internal is None:
                raise PatternError(f"missing internal state on {a.name}.{s.name}")
    pattern_check(e, sig)


def _site_color(s: Site) -> str:
    mark = ""
    if s.binding == WILDCARD:
        mark = "!_"
    elif isinstance(s.binding, int):
        mark = "!+"
    return f"{s.name}~{s.internal or ''}{mark}"


def _canonical_component_order(agents: list[Agent]) -> list[int]:
    colors = [f"{a.name}({';'.join(sorted(_site_color(s) for s in a.sites))})" for a in agents]
    bonds = _bond_map(agents)
    edges: list[canon.Edge] = []
    for (i, sa), (j, sb) in bonds.items():
        if (i, sa) <= (j, sb):
            edges.append(((i, sa), (j, sb), "b"))
    return canon.canonical_order(colors, edges)


def _render_ordered(agents: list[Agent], bonds: dict, next_label: int) -> tuple[str, int]:
    """Render agents in the given order, sites sorted, bonds renumbered in
    first-occurrence order starting from `next_label`."""
    assigned: dict[frozenset, int] = {}
    texts = []
    for i, a in enumerate(agents):
        parts = []
        for s in sorted(a.sites, key=lambda s: s.name):
            text = s.name
            if s.internal is not None:
                text += f"~{s.internal}"
            if s.binding == WILDCARD:
                text += "!_"
            elif isinstance(s.binding, int):
                key = frozenset({(i, s.name), bonds[(i, s.name)]})
                if key not in assigned:
                    assigned[key] = next_label
                    next_label += 1
                text += f"!{assigned[key]}"
            parts.append(text)
        texts.append(f"{a.name}({','.join(parts)})")
    return ",".join(texts), next_label


def expression_key(e: Expression) -> str:
    """Canonical text of an expression: equal keys iff structurally equivalent.

    Each connected component is canonically ordered (partition refinement with
    backtracking, lexicographically least serialization); component texts are
    sorted; bond labels are renumbered globally in emission order.  The result
    is valid concrete syntax.
    """
    comps = components(e)
    rendered: list[tuple[str, list[Agent], dict]] = []
    for comp in comps:
        agents = comp.concrete()
        order = _canonical_component_order(agents)
        ordered = [agents[i] for i in order]
        remap = {old: new for new, old in enumerate(order)}
        bonds = {
            (remap[a], sa): (remap[b], sb) for (a, sa), (b, sb) in _bond_map(agents).items()
        }
        local, _ = _render_ordered(ordered, bonds, 1)
        rendered.append((local, ordered, bonds))
    rendered.sort(key=lambda r: r[0])
    out = []
    label = 1
    for _, ordered, bonds in rendered:
        text, label = _render_ordered(ordered, bonds, label)
        out.append(text)
    return ",".join(out)


def structurally_equal(e1: Expression, e2: Expression) -> bool:
    return expression_key(e1) == expression_key(e2)


# --- species ------------------------------------------------------------------


@dataclass(frozen=True)
class Species:
    """A connected mixture with its canonical text as identity."""

    expr: Expression = field(compare=False)
    key: str

    def __hash__(self) -> int:
        return hash(self.key)

    def __str__(self) -> str:
        return self.key


def canonicalize_species(e: Expression, sig: Signature) -> Species:
    """Canonicalize a connected, fully specified expression into a Species."""
    e = normalize(e)
    mixture_check(e, sig)
    comps = components(e)
    if len(comps) != 1:
        raise PatternError(f"species must be connected; found {len(comps)} components")
    key = expression_key(e)
    return Species(parse_expression(key, sig), key)


def occurrence_count(sp: Species, p: Expression) -> int:
    """Number of connected components of `p` structurally equal to `sp`."""
    return sum(1 for c in components(p) if expression_key(c) == sp.key)


# --- embeddings -----------------------------------------------------------------


def _agent_matches(pa: Agent, ma: Agent) -> bool:
    if pa.name != ma.name:
        return False
    for s in pa.sites:
        ms = ma.site(s.name)
        if ms is None:
            return False
        if s.internal is not None and ms.internal != s.internal:
            return False
        if s.binding is None:
            if ms.binding is not None:
                return False
        elif s.binding == WILDCARD:
            if ms.binding is None:
                return False
        else:  # bond label: partner identity checked via the bond map
            if not isinstance(ms.binding, int):
                return False
    return True


def embeddings(p: Expression, m: Expression) -> list[tuple[int, ...]]:
    """All injective structure-preserving maps of pattern `p` into mixture `m`.

    The result maps pattern agent positions to mixture agent positions and is
    sorted lexicographically.  Wildcards match any bound site; label-paired
    pattern sites must map onto bonded mixture sites; free must map to free.
    """
    if any(a is None for a in p.agents):
        raise PatternError("pattern with fictitious agents cannot be embedded")
    p = normalize(p)
    pa = list(p.agents)
    ma = m.concrete()
    p_bonds = _bond_map(pa)
    m_bonds = _bond_map(ma)

    comp_plans = []
    for comp_ids in _component_indices(pa, p_bonds):
        plan = [(comp_ids[0], None)]
        placed = {comp_ids[0]}
        frontier = [comp_ids[0]]
        while frontier:
            v = frontier.pop(0)
            for s in pa[v].sites:
                if isinstance(s.binding, int):
                    w, sw = p_bonds[(v, s.name)]
                    if w not in placed:
                        placed.add(w)
                        plan.append((w, (v, s.name, sw)))
                        frontier.append(w)
        comp_plans.append(plan)

    results: list[tuple[int, ...]] = []
    image: dict[int, int] = {}

    def match_component(ci: int) -> None:
        if ci == len(comp_plans):
            results.append(tuple(image[i] for i in range(len(pa))))
            return
        plan = comp_plans[ci]
        used = set(image.values())
        for anchor_img in range(len(ma)):
            if anchor_img in used or not _agent_matches(pa[plan[0][0]], ma[anchor_img]):
                continue
            local = {plan[0][0]: anchor_img}
            ok = True
            for v, via in plan[1:]:
                pv, psite, vsite = via
                target = m_bonds.get((local[pv], psite))
                if target is None:
                    ok = False
                    break
                mj, msite = target
                if msite != vsite or mj in used or mj in local.values() or not _agent_matches(pa[v], ma[mj]):
                    ok = False
                    break
                local[v] = mj
            if ok:
                for (a, sa), (b, sb) in p_bonds.items():
                    if a in local and b in local:
                        if m_bonds.get((local[a], sa)) != (local[b], sb):
                            ok = False
                            break
            if ok:
                image.update(local)
                match_component(ci + 1)
                for k in local:
                    del image[k]

    match_component(0)
    results.sort()
    return results


def _component_indices(agents: list[Agent], bonds) -> list[list[int]]:
    n = len(agents)
    seen = [False] * n
    out = []
    for i in range(n):
        if seen[i]:
            continue
        group = [i]
        seen[i] = True
        stack = [i]
        while stack:
            v = stack.pop()
            for s in agents[v].sites:
                if isinstance(s.binding, int):
                    w = bonds[(v, s.name)][0]
                    if not seen[w]:
                        seen[w] = True
                        group.append(w)
                        stack.append(w)
        out.append(sorted(group))
    return out


def automorphisms(sp: Species) -> int:
    """Order of the automorphism group, via self-embedding count."""
    return len(embeddings(sp.expr, sp.expr))
