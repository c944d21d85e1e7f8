"""Shared helpers: a random connected site-graph generator and an exhaustive
isomorphism oracle, independent of the canonicalization under test."""

from __future__ import annotations

import random

from kred import kappa

TEST_SIG = kappa.parse_signature(
    """
    %agent: A(x,y,z~u~p)
    %agent: B(a,b)
    %agent: C(c~0~1,d,e)
    """
)


def random_connected_mixture(rng: random.Random, max_agents: int = 8) -> kappa.Expression:
    """Build a random connected, fully specified site-graph."""
    n = rng.randint(1, max_agents)
    names = [rng.choice(list(TEST_SIG.agents)) for _ in range(n)]
    internals: list[dict[str, str]] = []
    free_ports: list[tuple[int, str]] = []
    for i, name in enumerate(names):
        asig = TEST_SIG.agents[name]
        internals.append({s: rng.choice(sorted(vals)) for s, vals in asig.internal_values.items()})
        for s in asig.sites:
            free_ports.append((i, s))

    bonds: list[tuple[tuple[int, str], tuple[int, str]]] = []
    connected = {0}
    pending = [i for i in range(1, n)]
    rng.shuffle(pending)
    for j in pending:
        # attach j to the connected part through any two free ports
        a_ports = [p for p in free_ports if p[0] in connected]
        b_ports = [p for p in free_ports if p[0] == j]
        if not a_ports or not b_ports:
            return random_connected_mixture(rng, max_agents)  # dead end, retry
        pa, pb = rng.choice(a_ports), rng.choice(b_ports)
        bonds.append((pa, pb))
        free_ports.remove(pa)
        free_ports.remove(pb)
        connected.add(j)
    # sprinkle extra bonds
    for _ in range(rng.randint(0, 2)):
        if len(free_ports) < 2:
            break
        pa, pb = rng.sample(free_ports, 2)
        bonds.append((pa, pb))
        free_ports.remove(pa)
        free_ports.remove(pb)

    bound = {p: k + 1 for k, (pa, pb) in enumerate(bonds) for p in (pa, pb)}
    agents = []
    for i, name in enumerate(names):
        asig = TEST_SIG.agents[name]
        sites = tuple(
            kappa.Site(s, internals[i].get(s), bound.get((i, s)))
            for s in asig.sites
        )
        agents.append(kappa.Agent(name, sites))
    return kappa.Expression(tuple(agents))


def shuffled_copy(rng: random.Random, e: kappa.Expression) -> kappa.Expression:
    """Reorder agents and sites and rename bond labels: a structurally
    equivalent rewrite of `e`."""
    agents = list(e.concrete())
    perm = list(range(len(agents)))
    rng.shuffle(perm)
    labels = sorted(
        {s.binding for a in agents for s in a.sites if isinstance(s.binding, int)}
    )
    relabel = dict(zip(labels, rng.sample(range(1, 3 * len(labels) + 2), len(labels))))
    out = []
    for i in perm:
        sites = [
            kappa.Site(s.name, s.internal, relabel[s.binding] if isinstance(s.binding, int) else s.binding)
            for s in agents[i].sites
        ]
        rng.shuffle(sites)
        out.append(kappa.Agent(agents[i].name, tuple(sites)))
    return kappa.Expression(tuple(out))


def brute_force_isomorphic(e1: kappa.Expression, e2: kappa.Expression) -> bool:
    """Exhaustive search for a site-graph isomorphism (independent oracle)."""
    a1, a2 = e1.concrete(), e2.concrete()
    if len(a1) != len(a2):
        return False
    if sorted(a.name for a in a1) != sorted(a.name for a in a2):
        return False
    b1, b2 = kappa._bond_map(a1), kappa._bond_map(a2)

    def sites_compatible(x: kappa.Agent, y: kappa.Agent) -> bool:
        if x.name != y.name or len(x.sites) != len(y.sites):
            return False
        ys = {s.name: s for s in y.sites}
        for s in x.sites:
            t = ys.get(s.name)
            if t is None or t.internal != s.internal:
                return False
            if isinstance(s.binding, int) != isinstance(t.binding, int):
                return False
            if s.binding is None and t.binding is not None:
                return False
        return True

    n = len(a1)
    candidates = [[j for j in range(n) if sites_compatible(a1[i], a2[j])] for i in range(n)]
    mapping: dict[int, int] = {}
    used = [False] * n

    def extend(i: int) -> bool:
        if i == n:
            return True
        for j in candidates[i]:
            if used[j]:
                continue
            mapping[i] = j
            used[j] = True
            ok = True
            for (u, su), (v, sv) in b1.items():
                if u in mapping and v in mapping:
                    if b2.get((mapping[u], su)) != (mapping[v], sv):
                        ok = False
                        break
            if ok and extend(i + 1):
                return True
            used[j] = False
            del mapping[i]
        return False

    return extend(0)
