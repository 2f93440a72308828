"""BNF grammars and the dynamic structured genotype-to-phenotype mapping.

A genotype holds one integer list per nonterminal.  Decoding performs a
leftmost derivation; each time nonterminal ``N`` is expanded the next gene of
``N``'s list picks an alternative (``gene % len(alternatives)``).  Lists that
run out are extended with fresh random codons, which are written back into
the genotype so later decodes are deterministic.
"""

from __future__ import annotations

import re
import zlib
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources

import numpy as np

from .errors import GrammarError
from .expression import parse_expression

CODON_LIMIT = 256

_NT_RE = re.compile(r"(<[^<>\s]+>)")
_RULE_RE = re.compile(r"^\s*(<[^<>\s]+>)\s*::=(.*)$")


@dataclass(frozen=True)
class Grammar:
    start: str
    nonterminals: tuple
    # name -> tuple of alternatives; each alternative is a tuple of
    # ("N", name) / ("T", text) symbols.
    productions: dict
    recursive: dict = field(default_factory=dict)

    def alternatives(self, nt):
        return self.productions[nt]

    def is_recursive(self, nt):
        return bool(self.recursive.get(nt))

    def first_nonrecursive(self, nt):
        flags = self.recursive[nt]
        for i, rec in enumerate(flags):
            if not rec:
                return i
        raise GrammarError(f"{nt} has no non-recursive alternative")

    def alternative_text(self, nt, index):
        return "".join(s[1] if s[0] == "T" else f"<{s[1]}>" for s in self.productions[nt][index])


def _strip_comment(line):
    pos = line.find("#")
    return line if pos < 0 else line[:pos]


def _symbols(text):
    text = re.sub(r"\s+", " ", text.strip())
    out = []
    for part in _NT_RE.split(text):
        if not part:
            continue
        if _NT_RE.fullmatch(part):
            out.append(("N", part[1:-1]))
        else:
            out.append(("T", part))
    return tuple(out)


def parse_bnf(text, start=None):
    """Parse BNF text into a :class:`Grammar`.

    Rules look like ``<a> ::= x | <b> y``; an alternative list may continue on
    following lines and ``#`` starts a comment.  Alternative order is kept.
    """
    if not text or not text.strip():
        raise GrammarError("empty grammar text")
    rules = {}  # name -> list of [text, line]
    order = []
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw)
        if not line.strip():
            continue
        m = _RULE_RE.match(line)
        if m:
            name = m.group(1)[1:-1]
            if name in rules:
                raise GrammarError(f"duplicate rule for <{name}>", lineno)
            rules[name] = [["", lineno]]
            order.append(name)
            current = name
            body = m.group(2)
        elif current is None:
            raise GrammarError("text outside of any rule", lineno)
        else:
            body = line
        pieces = body.split("|")
        alts = rules[current]
        alts[-1][0] += " " + pieces[0]
        for piece in pieces[1:]:
            alts.append([piece, lineno])

    productions = {}
    for name in order:
        alts = []
        for alt_text, lineno in rules[name]:
            syms = _symbols(alt_text)
            if not syms:
                raise GrammarError(f"empty alternative in <{name}>", lineno)
            for kind, value in syms:
                if kind == "N" and value not in rules:
                    raise GrammarError(f"undefined nonterminal <{value}>", lineno)
            alts.append(syms)
        productions[name] = tuple(alts)

    if not order:
        raise GrammarError("grammar has no rules")
    start = start or order[0]
    if start not in productions:
        raise GrammarError(f"start symbol <{start}> is not defined")
    return Grammar(start, tuple(order), productions, _recursion_flags(productions))


def _recursion_flags(productions):
    reach = {n: {s[1] for alt in alts for s in alt if s[0] == "N"} for n, alts in productions.items()}
    changed = True
    while changed:
        changed = False
        for n in reach:
            extra = set().union(*(reach[m] for m in reach[n])) - reach[n]
            if extra:
                reach[n] |= extra
                changed = True
    flags = {}
    for n, alts in productions.items():
        flags[n] = tuple(
            any(s[0] == "N" and (s[1] == n or n in reach[s[1]]) for s in alt) for alt in alts
        )
    return flags


def load_grammar(path=None):
    """Load the shipped difference-equation grammar, or a custom BNF file."""
    if path is None:
        text = resources.files("glucofde").joinpath("data/fde_grammar.bnf").read_text()
    else:
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise GrammarError(f"cannot read grammar {path}: {exc}") from None
    return parse_bnf(text)


@lru_cache(maxsize=1)
def default_grammar():
    return load_grammar()


# ---------------------------------------------------------------------------
# genotype


@dataclass
class Genotype:
    genes: dict
    max_depth: int = 6

    def copy(self):
        return Genotype({k: list(v) for k, v in self.genes.items()}, self.max_depth)

    def total_genes(self):
        return sum(len(v) for v in self.genes.values())

    def key(self):
        return tuple((k, tuple(v)) for k, v in sorted(self.genes.items()))


@dataclass(frozen=True)
class Step:
    """One expansion in a derivation, in leftmost (preorder) order."""

    nonterminal: str
    gene_index: int
    gene: int
    alternative: int
    depth: int
    forced: bool
    end: int  # trace position one past this expansion's subtree


@dataclass
class Derivation:
    phenotype: str
    trace: list

    def position_of(self, nonterminal, gene_index):
        for pos, step in enumerate(self.trace):
            if step.nonterminal == nonterminal and step.gene_index == gene_index:
                return pos
        return None


def _fallback_rng(genotype):
    return np.random.default_rng(zlib.crc32(repr(genotype.key()).encode()))


def derive(grammar, genotype, rng=None):
    """Run the leftmost derivation, extending exhausted gene lists in place."""
    for nt in grammar.nonterminals:
        genotype.genes.setdefault(nt, [])
    cursors = dict.fromkeys(grammar.nonterminals, 0)
    trace = []
    text = []
    state = {"rng": rng}

    def next_gene(nt):
        genes = genotype.genes[nt]
        idx = cursors[nt]
        if idx >= len(genes):
            if state["rng"] is None:
                state["rng"] = _fallback_rng(genotype)
            genes.append(int(state["rng"].integers(0, CODON_LIMIT)))
        cursors[nt] = idx + 1
        return idx, genes[idx]

    def expand(nt, depth):
        alts = grammar.productions[nt]
        idx, gene = next_gene(nt)
        recursive = grammar.recursive[nt]
        forced = False
        if len(alts) == 1:
            choice = 0
        else:
            choice = gene % len(alts)
            if recursive[choice] and depth >= genotype.max_depth:
                choice = grammar.first_nonrecursive(nt)
                forced = True
        pos = len(trace)
        trace.append(None)
        child_depth = depth + 1 if any(recursive) else depth
        for kind, value in alts[choice]:
            if kind == "T":
                text.append(value)
            else:
                expand(value, child_depth if value == nt or grammar.is_recursive(value) else depth)
        trace[pos] = Step(nt, idx, gene, choice, depth, forced, len(trace))

    expand(grammar.start, 0)
    return Derivation("".join(text), trace)


@lru_cache(maxsize=200_000)
def phenotype_expression(phenotype):
    return parse_expression(phenotype, fold=True)


def decode(grammar, genotype, rng=None):
    """Map a genotype to its expression tree (``G + f`` for the shipped grammar)."""
    return phenotype_expression(derive(grammar, genotype, rng).phenotype)


@dataclass(frozen=True)
class GenotypeLimits:
    max_depth: int = 6
    # Extra random codons appended to each list after initialization; they are
    # inert until a mutation or crossover makes the derivation reach them.
    padding: int = 0


def random_genotype(grammar, rng, limits=GenotypeLimits()):
    """Grow a random individual: derive from empty lists, drawing codons on demand."""
    genotype = Genotype({nt: [] for nt in grammar.nonterminals}, limits.max_depth)
    derive(grammar, genotype, rng)
    if limits.padding:
        for nt in grammar.nonterminals:
            genotype.genes[nt].extend(int(g) for g in rng.integers(0, CODON_LIMIT, limits.padding))
    return genotype
