"""Leveled context-free grammars: random construction, sampling, CYK.

The grammar is strictly leveled: one root symbol, four intermediate
non-terminal tiers and a terminal alphabet. Every production rewrites a
tier-``l`` symbol into 3 or 4 tier-``l+1`` symbols, so a five-level rule
set expands the root into roughly 3^5..4^5 terminals; samples are rejection
sampled into a target length band. Validity checking runs a bottom-up
dynamic program over (symbol, start, end) span sets, stored as banded
boolean tables since every tier spans a bounded length range.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, GenerationError

DEFAULT_BAND = (600, 700)
DEFAULT_TIER_SIZES = (3, 3, 3, 4)
RULE_LENGTHS = (3, 4)


@dataclass
class CfgGrammar:
    """Production rules per level; symbols are globally numbered ints."""

    tier_symbols: list        # tier -> list of symbol ids (last tier = terminals)
    rules: list               # level -> {symbol: [tuple of next-tier symbols, ...]}

    @property
    def level_count(self) -> int:
        return len(self.rules)

    @property
    def root(self) -> int:
        return self.tier_symbols[0][0]

    @property
    def terminals(self) -> list:
        return self.tier_symbols[-1]

    def production_lengths(self) -> set:
        out = set()
        for level in self.rules:
            for prods in level.values():
                out.update(len(p) for p in prods)
        return out

    def span_bounds(self) -> list:
        """(min, max) terminal span per tier; the terminal tier is (1, 1)."""
        bounds = [(1, 1)]
        for level in reversed(self.rules):
            lo = min(len(p) for prods in level.values() for p in prods)
            hi = max(len(p) for prods in level.values() for p in prods)
            prev_lo, prev_hi = bounds[0]
            bounds.insert(0, (lo * prev_lo, hi * prev_hi))
        return bounds


@dataclass
class CfgSample:
    terminals: np.ndarray     # terminal symbol ids
    derivation: tuple = field(default=(), repr=False)  # nested (symbol, children)


def gen_cfg_grammar(rng: np.random.Generator,
                    tier_sizes=DEFAULT_TIER_SIZES,
                    terminal_count: int = 3,
                    rules_per_symbol: int = 2) -> CfgGrammar:
    """Random leveled grammar.

    Every non-terminal gets ``rules_per_symbol`` productions with lengths in
    {3, 4}; with the default of two rules each symbol carries one length-3
    and one length-4 production, which keeps the sampled length distribution
    wide enough to reach the configured band.
    """
    if rules_per_symbol < 1:
        raise ConfigError("rules_per_symbol must be at least 1")
    sizes = [1] + list(tier_sizes) + [terminal_count]
    tier_symbols = []
    next_id = 0
    for size in sizes:
        tier_symbols.append(list(range(next_id, next_id + size)))
        next_id += size

    rules = []
    for level in range(len(sizes) - 1):
        nxt = tier_symbols[level + 1]
        level_rules = {}
        for sym in tier_symbols[level]:
            if rules_per_symbol == 2:
                lengths = [3, 4]
            else:
                lengths = [int(rng.choice(RULE_LENGTHS)) for _ in range(rules_per_symbol)]
            prods = []
            for length in lengths:
                rhs = tuple(int(nxt[i]) for i in rng.integers(0, len(nxt), length))
                for _ in range(20):
                    if rhs not in prods:
                        break
                    rhs = tuple(int(nxt[i]) for i in rng.integers(0, len(nxt), length))
                prods.append(rhs)
            level_rules[sym] = prods
        rules.append(level_rules)
    return CfgGrammar(tier_symbols=tier_symbols, rules=rules)


def _expand(grammar: CfgGrammar, rng: np.random.Generator):
    """One top-down expansion with uniform rule choice; returns the tree."""

    def grow(symbol: int, level: int):
        if level == grammar.level_count:
            return (symbol, ())
        prods = grammar.rules[level][symbol]
        choice = prods[int(rng.integers(0, len(prods)))]
        return (symbol, tuple(grow(child, level + 1) for child in choice))

    return grow(grammar.root, 0)


def derivation_leaves(tree) -> list:
    """Terminal symbols of a derivation tree in left-to-right order."""
    out = []
    stack = [tree]
    while stack:
        sym, children = stack.pop()
        if not children:
            out.append(sym)
            continue
        for child in reversed(children):
            stack.append(child)
    return out


def gen_cfg_sequence(grammar: CfgGrammar, rng: np.random.Generator,
                     band=DEFAULT_BAND, max_retries: int = 2000) -> CfgSample:
    """Rejection-sample one sequence whose length falls in ``band``."""
    lo, hi = band
    for _ in range(max_retries):
        tree = _expand(grammar, rng)
        terminals = derivation_leaves(tree)
        if lo <= len(terminals) <= hi:
            return CfgSample(terminals=np.array(terminals, dtype=np.int64),
                             derivation=tree)
    raise GenerationError(
        f"no sample of length in [{lo}, {hi}] after {max_retries} expansions"
    )


# ---------------------------------------------------------------- validation

def _compose_bands(a: np.ndarray, lo_a: int, b: np.ndarray, lo_b: int):
    """Concatenate two banded span sets.

    ``a[i, d]`` means the left part derives [i, i+lo_a+d). The result covers
    derivations of the concatenation, with offset lo_a+lo_b.
    """
    n1, wa = a.shape
    wb = b.shape[1]
    out = np.zeros((n1, wa + wb - 1), dtype=bool)
    for d in range(wa):
        col = a[:, d]
        if not col.any():
            continue
        shift = lo_a + d
        rows = b[shift:shift + n1]
        if rows.shape[0] < n1:
            rows = np.vstack([rows, np.zeros((n1 - rows.shape[0], wb), dtype=bool)])
        out[:, d:d + wb] |= col[:, None] & rows
    return out, lo_a + lo_b


def cyk_validate(sequence, grammar: CfgGrammar) -> bool:
    """True iff the root symbol derives ``sequence``, by bottom-up span DP."""
    seq = np.asarray(sequence, dtype=np.int64)
    n = len(seq)
    if n == 0:
        return False
    bounds = grammar.span_bounds()
    root_lo, root_hi = bounds[0]
    if not root_lo <= n <= root_hi:
        return False
    if not set(seq.tolist()) <= set(grammar.terminals):
        return False

    # tables[sym] = (band, lo): band[i, d] <=> sym derives seq[i : i+lo+d)
    tables = {}
    for sym in grammar.terminals:
        band = np.zeros((n + 1, 1), dtype=bool)
        band[:n, 0] = seq == sym
        tables[sym] = (band, 1)

    for level in range(grammar.level_count - 1, -1, -1):
        tier_lo = bounds[level][0]
        tier_hi = min(bounds[level][1], n)
        width = max(tier_hi - tier_lo + 1, 1)
        new_tables = {}
        for sym, prods in grammar.rules[level].items():
            band = np.zeros((n + 1, width), dtype=bool)
            for prod in prods:
                acc, lo_acc = tables[prod[0]]
                for child in prod[1:]:
                    acc, lo_acc = _compose_bands(acc, lo_acc, *tables[child])
                # embed the production's band into the tier band
                offset = lo_acc - tier_lo
                src_lo = max(0, -offset)
                src_hi = min(acc.shape[1], width - offset)
                if src_lo < src_hi:
                    band[:, offset + src_lo:offset + src_hi] |= acc[:, src_lo:src_hi]
            new_tables[sym] = (band, tier_lo)
        tables = new_tables

    band, lo = tables[grammar.root]
    d = n - lo
    if not 0 <= d < band.shape[1]:
        return False
    return bool(band[0, d])


# ---------------------------------------------------------------- persistence

def save_grammar(path, grammar: CfgGrammar):
    """Plain-text grammar listing; parsed back by :func:`load_grammar`."""
    lines = [f"levels {grammar.level_count}"]
    for tier, symbols in enumerate(grammar.tier_symbols):
        lines.append(f"tier {tier} " + " ".join(str(s) for s in symbols))
    for level, level_rules in enumerate(grammar.rules):
        for sym, prods in sorted(level_rules.items()):
            for prod in prods:
                lines.append(
                    f"rule {level} {sym} -> " + " ".join(str(s) for s in prod)
                )
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_grammar(path) -> CfgGrammar:
    tier_symbols: list = []
    rules: list = []
    with open(path, encoding="utf-8") as fh:
        for raw in fh:
            parts = raw.split()
            if not parts:
                continue
            if parts[0] == "levels":
                rules = [dict() for _ in range(int(parts[1]))]
            elif parts[0] == "tier":
                tier = int(parts[1])
                while len(tier_symbols) <= tier:
                    tier_symbols.append([])
                tier_symbols[tier] = [int(s) for s in parts[2:]]
            elif parts[0] == "rule":
                level, sym = int(parts[1]), int(parts[2])
                prod = tuple(int(s) for s in parts[parts.index("->") + 1:])
                rules[level].setdefault(sym, []).append(prod)
    if not tier_symbols or not rules:
        raise GenerationError(f"malformed grammar file: {path}")
    return CfgGrammar(tier_symbols=tier_symbols, rules=rules)
