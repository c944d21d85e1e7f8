import math
import random
from pathlib import Path

import numpy as np
import pytest

from kred import expr as rexpr
from kred import kappa, model, reduce, semantics, simulate
from kred.reduce import ReductionConfig
from ctmc_tools import generators_match, random_src_me_model, reachable_generator

FIXTURES = Path(__file__).resolve().parents[1] / "src" / "kred" / "fixtures"


def load(name):
    return model.parse_model((FIXTURES / f"{name}.ka").read_text())


def parse(text):
    return model.parse_model(text)


class TestSimilarRuleComposition:
    def test_merges_same_rewrite(self):
        sys = parse(
            """
            %agent: A(s)
            %agent: B(s)
            %init: 3 A(s)
            r1: A(s) -> B(s) @ 1.0
            r2: A(s) -> B(s) @ 2.0
            """
        )
        out, steps = reduce.similar_rule_composition(sys)
        assert len(out.rules) == 1
        assert out.rules[0].rate == pytest.approx(3.0)
        assert steps[0].removed_rules == ["r2"]

    def test_keeps_distinct_rewrites(self):
        sys = parse(
            """
            %agent: A(s)
            %agent: B(s)
            %agent: C(s)
            %init: 3 A(s)
            r1: A(s) -> B(s) @ 1.0
            r2: A(s) -> C(s) @ 2.0
            """
        )
        out, steps = reduce.similar_rule_composition(sys)
        assert len(out.rules) == 2 and not steps

    def test_three_copies(self):
        sys = parse(
            """
            %agent: A(s)
            %agent: B(s)
            %init: 1 A(s)
            r1: A(s) -> B(s) @ 0.7
            r2: A(s) -> B(s) @ 0.7
            r3: A(s) -> B(s) @ 0.7
            """
        )
        out, _ = reduce.similar_rule_composition(sys)
        assert len(out.rules) == 1
        assert out.rules[0].rate == pytest.approx(3 * 0.7)


class TestModifierElimination:
    def test_folds_initial_count_into_rate(self):
        sys = parse(
            """
            %agent: E(s)
            %agent: S(e)
            %agent: P()
            %init: 5 E(s)
            %init: 20 S(e)
            %obs: P P()
            conv: E(s),S(e) -> E(s),P() @ 2.0
            """
        )
        out, steps = reduce.modifier_elimination(sys)
        assert len(out.rules) == 1
        assert out.rules[0].rate == pytest.approx(10.0)  # 2.0 * C(5,1)
        assert kappa.occurrence_count(next(iter(steps[0].removed_species and [] or [])), out.rules[0].lhs) if False else True
        assert steps[0].removed_species == ["E(s)"]
        assert all(sp.key != "E(s)" for sp in out.init)

    def test_zero_copy_modifier_kills_rule(self):
        sys = parse(
            """
            %agent: E(s)
            %agent: S(e)
            %agent: P()
            %init: 20 S(e)
            %obs: P P()
            conv: E(s),S(e) -> E(s),P() @ 2.0
            """
        )
        out, steps = reduce.modifier_elimination(sys)
        assert out.rules == []
        assert steps[0].removed_rules == ["conv"]

    def test_observable_species_protected(self):
        sys = parse(
            """
            %agent: E(s)
            %agent: S(e)
            %agent: P()
            %init: 5 E(s)
            %init: 20 S(e)
            %obs: E E(s)
            conv: E(s),S(e) -> E(s),P() @ 2.0
            """
        )
        out, steps = reduce.modifier_elimination(sys)
        assert not steps and len(out.rules) == 1

    def test_exact_multiplier_for_double_occurrence(self):
        sys = parse(
            """
            %agent: E(s)
            %agent: S(e)
            %agent: P()
            %init: 5 E(s)
            %init: 9 S(e)
            %obs: P P()
            conv: E(s),E(s),S(e) -> E(s),E(s),P() @ 2.0
            """
        )
        out, _ = reduce.modifier_elimination(sys)
        assert out.rules[0].rate == pytest.approx(2.0 * math.comb(5, 2))

    def test_symmetric_dimer_modifier_uses_automorphisms(self):
        sys = parse(
            """
            %agent: D(b)
            %agent: S(e)
            %agent: P()
            %init: 3 D(b!1),D(b!1)
            %init: 9 S(e)
            %obs: P P()
            conv: D(b!1),D(b!1),S(e) -> D(b!1),D(b!1),P() @ 2.0
            """
        )
        out, _ = reduce.modifier_elimination(sys)
        # the dimer contributed |Aut| * C(3,1) = 2 * 3 to the propensity
        assert out.rules[0].rate == pytest.approx(2.0 * 2 * 3)

    def test_partial_pattern_guard(self):
        # a partial component matches inside the would-be modifier: unsound to
        # eliminate, so nothing happens
        sys = parse(
            """
            %agent: E(s,f~0~1)
            %agent: S(e)
            %agent: P()
            %init: 5 E(s,f~0)
            %init: 9 S(e)
            %obs: P P()
            conv: E(s,f~0),S(e) -> E(s,f~0),P() @ 2.0
            flip: E(f~0) -> E(f~1) @ 1.0
            """
        )
        out, steps = reduce.modifier_elimination(sys)
        assert not steps


class TestDimerDetection:
    def test_canonical_pattern(self):
        sys = load("dimer_toy")
        cands, _ = reduce.detect_dimerization(sys)
        assert len(cands) == 1
        assert cands[0].monomer.key == "M(b)"
        assert cands[0].dimer.key == "M(b!1),M(b!1)"
        # reaction-level rates: k_fwd = 0.01 (aut 1 per copy), k_rev = 2 * 1.0
        assert cands[0].k_fwd == pytest.approx(0.01)
        assert cands[0].k_rev == pytest.approx(2.0)
        assert cands[0].equilibrium_constant == pytest.approx(0.01 / 4.0)

    def test_dimer_produced_elsewhere_rejected(self):
        sys = parse(
            """
            %agent: M(b)
            %init: 10 M(b)
            dim: M(b),M(b) <-> M(b!1),M(b!1) @ 1.0, 1.0
            leak: . -> M(b!1),M(b!1) @ 0.1
            """
        )
        cands, notes = reduce.detect_dimerization(sys)
        assert not cands
        assert any("produced" in n for n in notes)

    def test_monomer_modifier_elsewhere_rejected(self):
        sys = parse(
            """
            %agent: M(b)
            %agent: P()
            %init: 10 M(b)
            dim: M(b),M(b) <-> M(b!1),M(b!1) @ 1.0, 1.0
            cat: M(b) -> M(b),P() @ 0.1
            """
        )
        cands, notes = reduce.detect_dimerization(sys)
        assert not cands
        assert any("modifier" in n for n in notes)

    def test_heterodimer_not_matched(self):
        sys = parse(
            """
            %agent: A(x)
            %agent: B(y)
            %init: 10 A(x)
            %init: 10 B(y)
            dim: A(x),B(y) <-> A(x!1),B(y!1) @ 1.0, 1.0
            """
        )
        cands, _ = reduce.detect_dimerization(sys)
        assert not cands


class TestDimerPartition:
    def test_zero_total(self):
        assert reduce.dimer_partition(0.0, 1.0) == (0.0, 0.0)

    def test_worked_example(self):
        x_m, x_m2 = reduce.dimer_partition(1.0, 1.0)
        assert x_m == pytest.approx(0.5, abs=1e-15)
        assert x_m2 == pytest.approx(0.25, abs=1e-15)

    def test_identities_on_random_grid(self):
        rng = random.Random(3)
        for _ in range(200):
            k = 10 ** rng.uniform(-3, 3)
            mt = 10 ** rng.uniform(-3, 6)
            x_m, x_m2 = reduce.dimer_partition(mt, k)
            assert abs(x_m + 2 * x_m2 - mt) <= 1e-12 * max(1.0, mt)
            assert abs(k * x_m**2 - x_m2) <= 1e-12 * max(1.0, x_m2)

    def test_rejects_bad_arguments(self):
        with pytest.raises(ValueError):
            reduce.dimer_partition(-1.0, 1.0)
        with pytest.raises(ValueError):
            reduce.dimer_partition(1.0, 0.0)


class TestFastDimerReduce:
    def test_toy_system(self):
        sys = load("dimer_toy")
        out, steps, _ = reduce.fast_dimerization_reduce(sys, ReductionConfig())
        assert len(steps) == 1
        assert steps[0].kind == "FastDimer"
        assert steps[0].removed_rules == ["dim_fwd", "dim_rev"]
        assert len(out.rules) == 1
        rule = out.rules[0]
        assert rule.closed
        # pool appears twice on each side: the dimer carries weight 2
        lhs_names = sorted(a.name for a in kappa.normalize(rule.lhs).concrete())
        rhs_names = sorted(a.name for a in kappa.normalize(rule.rhs).concrete())
        assert lhs_names == ["M_T", "M_T"]
        assert rhs_names == ["M_T", "M_T", "P"]
        assert "K_M_T" in out.constants

    def test_pool_init_counts_monomer_plus_twice_dimer(self):
        sys = parse(
            """
            %agent: M(b)
            %init: 10 M(b)
            %init: 4 M(b!1),M(b!1)
            dim: M(b),M(b) <-> M(b!1),M(b!1) @ 1.0, 1.0
            """
        )
        out, steps, _ = reduce.fast_dimerization_reduce(sys, ReductionConfig())
        assert steps and not out.rules
        (pool, count), = out.init.items()
        assert pool.key == "M_T()"
        assert count == 18

    def test_monomer_observable_rewritten(self):
        sys = load("dimer_toy")
        out, _, _ = reduce.fast_dimerization_reduce(sys, ReductionConfig())
        obs = {o.name: o for o in out.observables}
        assert obs["M"].closed is not None
        x_m = rexpr.evaluate(obs["M"].closed, {"M_T()": 40.0}, out.constants)
        expected, _ = reduce.dimer_partition(40.0, out.constants["K_M_T"])
        assert x_m == pytest.approx(expected, rel=1e-12)

    def test_ssa_means_agree_at_large_counts(self):
        # oracle: simulate original vs reduced and compare stationary means
        sys = load("dimer_toy")
        big = semantics.KappaSystem(
            sys.signature, sys.rules, {sp: 2000 for sp in sys.init}, sys.observables, {}
        )
        red, _ = reduce.reduce_all(big)
        cfg = simulate.SimConfig.on_grid(2.0, 9, n_runs=120, seed=11)
        comp = simulate.compare_systems(big, red, cfg)
        m = comp.observables["M"]
        # monomer equilibrates quickly: means agree within a couple percent
        assert m.mean_orig[-1] == pytest.approx(m.mean_red[-1], rel=0.02)
        p = comp.observables["P"]
        # production rates agree once equilibrated: compare late-window slopes
        slope_o = p.mean_orig[-1] - p.mean_orig[4]
        slope_r = p.mean_red[-1] - p.mean_red[4]
        assert slope_o == pytest.approx(slope_r, rel=0.05)


class TestEnzymeDetection:
    def test_mm_single_branch(self):
        sys = load("mm_enzyme")
        groups, _ = reduce.detect_enzymatic(sys, ReductionConfig())
        assert len(groups) == 1
        group = groups[0]
        assert group.enzyme.key == "E(s)"
        assert len(group.branches) == 1
        branch = group.branches[0]
        assert [s.key for s in branch.substrates] == ["S(e)"]
        assert not branch.catalytic
        assert [s.key for s in branch.products] == ["P()"]

    def test_lambda_competitive_two_branches(self):
        sys = load("lambda_pre_competitive")
        groups, _ = reduce.detect_enzymatic(sys, ReductionConfig())
        assert len(groups) == 1
        group = groups[0]
        assert group.enzyme.key == "PRE(cii,rnap)"
        assert len(group.branches) == 2
        subs = [sorted(s.expr.agents[0].name for s in b.substrates) for b in group.branches]
        assert subs == [["RNAP"], ["CII", "RNAP"]]
        assert all(b.catalytic for b in group.branches)

    def test_enzyme_produced_elsewhere_rejected(self):
        sys = parse(
            """
            %agent: E(s)
            %agent: S(e)
            %agent: P()
            %init: 2 E(s)
            %init: 20 S(e)
            %obs: P P()
            bind: E(s),S(e) <-> E(s!1),S(e!1) @ 1.0, 1.0
            cat: E(s!1),S(e!1) -> E(s),P() @ 1.0
            leak: . -> E(s) @ 0.1
            """
        )
        groups, notes = reduce.detect_enzymatic(sys, ReductionConfig())
        assert not groups
        assert any("outside the group" in n for n in notes)

    def test_copy_number_threshold(self):
        sys = load("mm_enzyme")
        groups, notes = reduce.detect_enzymatic(sys, ReductionConfig(enzyme_copy_threshold=2))
        assert not groups
        assert any("threshold" in n for n in notes)


class TestGeneralizedEnzymaticReduce:
    def test_single_branch_constant(self):
        sys = parse(
            """
            %agent: E(s)
            %agent: S(e)
            %agent: P()
            %init: 1 E(s)
            %init: 20 S(e)
            %obs: P P()
            bind: E(s),S(e) <-> E(s!1),S(e!1) @ 1.0, 1.0
            cat: E(s!1),S(e!1) -> E(s),P() @ 1.0
            """
        )
        out, steps, _ = reduce.generalized_enzymatic_reduce(sys, ReductionConfig())
        assert steps[0].kind == "Enzymatic"
        assert out.constants["K_a"] == pytest.approx(0.5)  # 1 / (1 + 1)
        assert out.constants["E_T"] == pytest.approx(1.0)

    def test_two_branch_rate_value(self):
        # K_1 = K_2 = 1, E_T = 1, x_S1 = x_S2 = 1, kcat_1 = 1: rate = 1/3
        sys = parse(
            """
            %agent: E(s)
            %agent: S1(e)
            %agent: S2(e)
            %agent: P1()
            %agent: P2()
            %init: 1 E(s)
            %init: 1 S1(e)
            %init: 1 S2(e)
            %obs: P1 P1()
            %obs: P2 P2()
            b1: E(s),S1(e) <-> E(s!1),S1(e!1) @ 2.0, 1.0
            c1: E(s!1),S1(e!1) -> E(s),P1() @ 1.0
            b2: E(s),S2(e) <-> E(s!1),S2(e!1) @ 2.0, 1.0
            c2: E(s!1),S2(e!1) -> E(s),P2() @ 1.0
            """
        )
        out, steps, _ = reduce.generalized_enzymatic_reduce(sys, ReductionConfig())
        assert steps[0].kind == "GeneralizedEnzymatic"
        assert out.constants["K_a"] == pytest.approx(1.0)
        assert out.constants["K_b"] == pytest.approx(1.0)
        rule1 = next(r for r in out.rules if r.name == "c1_red")
        value = rexpr.evaluate(rule1.rate, {"S1(e)": 1.0, "S2(e)": 1.0}, out.constants)
        assert value == pytest.approx(1.0 / 3.0, abs=1e-12)

    def test_qss_oracle_confirms_rate_shape(self):
        """Independent check of the saturating law: solve the complex balance
        equations of a two-branch system as a linear system and compare the
        production fluxes with the generated expressions."""
        k1, k1m, k1h = 2.0, 3.0, 0.5
        k2, k2m, k2h = 1.5, 1.0, 2.0
        et = 3.0
        sys = parse(
            f"""
            %agent: E(s)
            %agent: S1(e)
            %agent: S2(e)
            %agent: P1()
            %agent: P2()
            %init: 3 E(s)
            %init: 50 S1(e)
            %init: 40 S2(e)
            %obs: P1 P1()
            %obs: P2 P2()
            b1: E(s),S1(e) <-> E(s!1),S1(e!1) @ {k1}, {k1m}
            c1: E(s!1),S1(e!1) -> E(s),P1() @ {k1h}
            b2: E(s),S2(e) <-> E(s!1),S2(e!1) @ {k2}, {k2m}
            c2: E(s!1),S2(e!1) -> E(s),P2() @ {k2h}
            """
        )
        out, _, _ = reduce.generalized_enzymatic_reduce(sys, ReductionConfig())
        for xs1, xs2 in [(50.0, 40.0), (5.0, 1.0), (200.0, 0.0)]:
            # complex balance: k_i * xE * xSi = (k_i^- + k_i^) * xCi,
            # with xE = E_T - xC1 - xC2; linear in (xC1, xC2)
            a = np.array(
                [
                    [k1m + k1h + k1 * xs1, k1 * xs1],
                    [k2 * xs2, k2m + k2h + k2 * xs2],
                ]
            )
            b = np.array([k1 * xs1 * et, k2 * xs2 * et])
            xc1, xc2 = np.linalg.solve(a, b)
            env = {"S1(e)": xs1, "S2(e)": xs2}
            rate1 = rexpr.evaluate(next(r for r in out.rules if r.name == "c1_red").rate, env, out.constants)
            rate2 = rexpr.evaluate(next(r for r in out.rules if r.name == "c2_red").rate, env, out.constants)
            assert rate1 == pytest.approx(k1h * xc1, rel=1e-12, abs=1e-12)
            assert rate2 == pytest.approx(k2h * xc2, rel=1e-12, abs=1e-12)


class TestReduceAll:
    def test_identity_on_irreducible_system(self):
        sys = parse(
            """
            %agent: A(s)
            %agent: B(s)
            %init: 3 A(s)
            %obs: A A(s)
            %obs: B B(s)
            r1: A(s) -> B(s) @ 1.0
            r2: B(s) -> A(s) @ 2.0
            """
        )
        out, report = reduce.reduce_all(sys)
        assert not report.steps
        assert report.rules_before == report.rules_after == 2

    def test_lambda_competitive_single_rule(self):
        sys = load("lambda_pre_competitive")
        out, report = reduce.reduce_all(sys)
        assert report.rules_before == 6  # after desugaring the two reversibles
        assert report.rules_after == 1
        assert set(out.constants) == {"E_T", "K_a", "K_b"}
        assert out.constants["E_T"] == 1.0

    def test_lambda_pre_cii_counts(self):
        sys = load("lambda_pre_cii")
        out, report = reduce.reduce_all(sys)
        assert report.rules_before == 10
        assert report.rules_after == 4
        assert report.agents_after == 3
        assert model.used_agent_names(out) == {"RNAP", "CII", "CI"}

    def test_fig1_single_mm_rule(self):
        sys = load("fig1_tf_operator")
        out, report = reduce.reduce_all(sys)
        assert report.rules_after == 1
        assert out.rules[0].closed

    def test_disable_flags(self):
        sys = load("mm_enzyme")
        out, report = reduce.reduce_all(sys, ReductionConfig(enable_enzymatic=False))
        assert report.rules_after == 3

    def test_never_increases_rule_count(self):
        rng = random.Random(5)
        for _ in range(5):
            sys = parse(random_src_me_model(rng))
            _, report = reduce.reduce_all(sys)
            assert report.rules_after <= report.rules_before

    def test_exactness_on_random_src_me_systems(self):
        rng = random.Random(101)
        checked = 0
        while checked < 6:
            sys = parse(random_src_me_model(rng))
            red, report = reduce.reduce_all(sys)
            if not report.steps:
                continue
            net_o = semantics.expand(sys)
            net_r = semantics.expand(red)
            restrict = {sp.key for sp in net_r.species}
            gen_o = reachable_generator(net_o, restrict_keys=restrict)
            gen_r = reachable_generator(net_r)
            assert generators_match(gen_o, gen_r), f"generators differ for seed state {checked}"
            checked += 1

    def test_confluent_under_rule_permutation(self):
        rng = random.Random(77)
        sys_text = random_src_me_model(rng)
        sys = parse(sys_text)
        red1, _ = reduce.reduce_all(sys)

        perm = semantics.KappaSystem(
            sys.signature,
            list(reversed(sys.rules)),
            dict(sys.init),
            list(sys.observables),
            dict(sys.constants),
        )
        red2, _ = reduce.reduce_all(perm)

        def shape(s):
            pairs = []
            for r in s.rules:
                rate = rexpr.to_text(r.rate) if r.closed else round(r.rate, 9)
                pairs.append((semantics.rule_key(r, s.signature), rate))
            return sorted(pairs, key=str), sorted((sp.key, c) for sp, c in s.init.items())

        assert shape(red1) == shape(red2)

    def test_reduced_model_round_trips_and_is_idempotent(self):
        for name in ["fig1_tf_operator", "mm_enzyme", "dimer_toy", "lambda_pre_competitive", "lambda_pre_cii"]:
            red, _ = reduce.reduce_all(load(name))
            text = model.print_model(red)
            again = model.parse_model(text)
            red2, report2 = reduce.reduce_all(again)
            assert not report2.steps, f"{name}: second reduction must be the identity"
            assert model.print_model(red2) == text
