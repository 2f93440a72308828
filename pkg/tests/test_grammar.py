import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from glucofde import expression as ex
from glucofde.errors import GrammarError
from glucofde.grammar import (CODON_LIMIT, Genotype, GenotypeLimits, decode, default_grammar, derive,
                              parse_bnf, random_genotype)

TOY = """
# arithmetic over one variable
<e> ::= (<e> <o> <e>) | <v>
<o> ::= + | *
<v> ::= x | y
"""


def test_shipped_grammar_shape():
    g = default_grammar()
    assert g.start == "func"
    assert len(g.alternatives("var")) == 34
    assert len(g.alternatives("expr")) == 6
    assert len(g.alternatives("base")) == 99
    assert [g.alternative_text("exponent", i) for i in range(8)] == list("12345689")
    assert g.alternative_text("var", 0) == "B_I"
    assert g.alternative_text("var", 33) == "S*S"


def test_recursion_flags():
    g = default_grammar()
    assert g.recursive["expr"] == (True, True, False, False, False, False)
    assert g.first_nonrecursive("expr") == 2
    assert not any(g.recursive["var"])


def test_toy_grammar_decoding_by_hand():
    g = parse_bnf(TOY)
    # <e> picks alternative 0, then both children pick <v>; operator list picks '*'
    genotype = Genotype({"e": [0, 1, 1], "o": [1], "v": [0, 1]}, max_depth=3)
    assert derive(g, genotype).phenotype == "(x * y)"


def test_gene_values_wrap_modulo_alternatives():
    g = parse_bnf(TOY)
    a = derive(g, Genotype({"e": [1], "o": [], "v": [3]})).phenotype
    assert a == "y"


def test_depth_limit_forces_terminal_alternative():
    g = parse_bnf(TOY)
    genotype = Genotype({"e": [0] * 10, "o": [0] * 10, "v": [0] * 20}, max_depth=2)
    d = derive(g, genotype)
    assert max(s.depth for s in d.trace if s.nonterminal == "e") <= 2
    assert any(s.forced for s in d.trace)
    assert d.phenotype == "((x + x) + (x + x))"


def test_exhausted_lists_are_extended_and_recorded():
    g = parse_bnf(TOY)
    genotype = Genotype({"e": [], "o": [], "v": []}, max_depth=4)
    first = derive(g, genotype, np.random.default_rng(1)).phenotype
    assert genotype.total_genes() > 0
    # the recorded genes now reproduce the phenotype without any randomness
    assert derive(g, genotype.copy()).phenotype == first


def test_fallback_extension_is_deterministic():
    g = default_grammar()
    a = Genotype({"expr": [0, 0]})
    b = Genotype({"expr": [0, 0]})
    assert derive(g, a).phenotype == derive(g, b).phenotype


@pytest.mark.parametrize("text,line", [
    ("<a> ::= x\n<a> ::= y", 2),
    ("<a> ::= x | | y", 1),
    ("<a> ::= <b>", 1),
    ("x | y", 1),
])
def test_bnf_errors_carry_line_numbers(text, line):
    with pytest.raises(GrammarError) as info:
        parse_bnf(text)
    assert info.value.line == line


def test_empty_bnf_is_rejected():
    with pytest.raises(GrammarError):
        parse_bnf("# nothing here\n")


def test_continuation_lines_and_comments():
    g = parse_bnf("<a> ::= x |\n   # between\n  y | z")
    assert [g.alternative_text("a", i) for i in range(3)] == ["x", "y", "z"]


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_random_genotypes_decode_to_difference_equations(seed):
    rng = np.random.default_rng(seed)
    g = default_grammar()
    genotype = random_genotype(g, rng, GenotypeLimits(max_depth=6))
    node = decode(g, genotype)
    assert ex.is_fde_form(node)
    assert all(0 <= v < CODON_LIMIT for genes in genotype.genes.values() for v in genes)


def _mutated_pair(seed):
    rng = np.random.default_rng(seed)
    g = default_grammar()
    genotype = random_genotype(g, rng, GenotypeLimits(max_depth=6))
    before = derive(g, genotype.copy())
    pos = int(rng.integers(len(before.trace)))
    step = before.trace[pos]
    mutant = genotype.copy()
    mutant.genes[step.nonterminal][step.gene_index] = int((step.gene + 1 + rng.integers(CODON_LIMIT - 1))
                                                          % CODON_LIMIT)
    after = derive(g, mutant)
    return g, before, after, pos, step


def _shape(step):
    return step.nonterminal, step.gene_index, step.alternative


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_single_gene_mutation_leaves_earlier_expansions(seed):
    g, before, after, pos, step = _mutated_pair(seed)
    assert [_shape(s) for s in after.trace[:pos]] == [_shape(s) for s in before.trace[:pos]]


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_terminal_only_rules_change_a_single_expansion(seed):
    g, before, after, pos, step = _mutated_pair(seed)
    leaf = all(kind == "T" for alt in g.alternatives(step.nonterminal) for kind, _ in alt)
    if leaf:
        rest_before = [_shape(s) for i, s in enumerate(before.trace) if i != pos]
        rest_after = [_shape(s) for i, s in enumerate(after.trace) if i != pos]
        assert rest_before == rest_after
