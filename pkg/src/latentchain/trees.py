"""Binary-tree route-search task.

A sample is a full binary tree with randomly named nodes, a target leaf and
the unique root-to-leaf route. The surface form lists parent-child pairs in
breadth-first order, then the task markers:

    NL,NO,LJ,...,MC[ROOT]N[TARGET]K[ROUTE]NOMK

Each node name is a single character with its own token; depth counts edges
on the root-to-leaf path, so depth d gives 2^(d+1)-1 nodes and a route of
d+1 names.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, GenerationError
from .vocab import NAME_POOL, Vocabulary

MAX_DEPTH = 4


@dataclass
class TreeSample:
    edges: list          # (parent, child) names in BFS order
    root: str
    target_leaf: str
    route: list          # names from root to target leaf
    tokens: np.ndarray   # full serialized sample incl. trailing EOS
    route_mask: np.ndarray  # True exactly on the route tokens after [ROUTE]


def gen_tree_sample(depth: int, rng: np.random.Generator,
                    vocab: Vocabulary) -> TreeSample:
    """Full binary tree of edge-depth ``depth`` with distinct random names."""
    if not 1 <= depth <= MAX_DEPTH:
        raise ConfigError(f"depth must lie in [1, {MAX_DEPTH}], got {depth}")
    n_nodes = 2 ** (depth + 1) - 1
    if n_nodes > len(NAME_POOL):
        raise ConfigError(
            f"name pool of {len(NAME_POOL)} cannot label {n_nodes} nodes"
        )
    order = rng.permutation(len(NAME_POOL))[:n_nodes]
    names = [NAME_POOL[i] for i in order]

    n_internal = 2 ** depth - 1
    edges = []
    for i in range(n_internal):
        edges.append((names[i], names[2 * i + 1]))
        edges.append((names[i], names[2 * i + 2]))

    first_leaf = n_internal
    leaf_index = int(rng.integers(first_leaf, n_nodes))
    route_idx = []
    node = leaf_index
    while node != 0:
        route_idx.append(node)
        node = (node - 1) // 2
    route_idx.append(0)
    route = [names[i] for i in reversed(route_idx)]

    sample = TreeSample(edges=edges, root=names[0], target_leaf=names[leaf_index],
                        route=route, tokens=np.zeros(0, dtype=np.int64),
                        route_mask=np.zeros(0, dtype=bool))
    sample.tokens, sample.route_mask = tokenize_tree_sample(sample, vocab)
    return sample


def serialize_tree_sample(sample: TreeSample) -> str:
    edge_part = ",".join(p + c for p, c in sample.edges)
    return (f"{edge_part}[ROOT]{sample.root}[TARGET]{sample.target_leaf}"
            f"[ROUTE]{''.join(sample.route)}")


def tokenize_tree_sample(sample: TreeSample, vocab: Vocabulary):
    symbols = []
    for i, (p, c) in enumerate(sample.edges):
        if i:
            symbols.append(vocab.specials["comma"])
        symbols.extend([p, c])
    symbols.append(vocab.specials["root"])
    symbols.append(sample.root)
    symbols.append(vocab.specials["target"])
    symbols.append(sample.target_leaf)
    symbols.append(vocab.specials["route"])
    route_start = len(symbols)
    symbols.extend(sample.route)
    symbols.append(vocab.specials["eos"])
    tokens = vocab.encode(symbols)
    mask = np.zeros(len(tokens), dtype=bool)
    mask[route_start:route_start + len(sample.route)] = True
    return tokens, mask


def parse_tree_sample(line: str, vocab: Vocabulary) -> TreeSample:
    """Inverse of :func:`serialize_tree_sample`."""
    try:
        edge_part, rest = line.split("[ROOT]")
        root, rest = rest.split("[TARGET]")
        target, route_part = rest.split("[ROUTE]")
    except ValueError:
        raise GenerationError(f"malformed tree sample line: {line!r}") from None
    edges = [(pair[0], pair[1]) for pair in edge_part.split(",") if pair]
    sample = TreeSample(edges=edges, root=root, target_leaf=target,
                        route=list(route_part), tokens=np.zeros(0, dtype=np.int64),
                        route_mask=np.zeros(0, dtype=bool))
    sample.tokens, sample.route_mask = tokenize_tree_sample(sample, vocab)
    return sample


def route_prompt(sample: TreeSample, vocab: Vocabulary) -> np.ndarray:
    """Tokens up to and including the [ROUTE] marker."""
    route_id = vocab.special_id("route")
    idx = int(np.nonzero(sample.tokens == route_id)[0][0])
    return sample.tokens[:idx + 1]


def sibling_pairs(sample: TreeSample):
    """For each route step after the root: (correct child, other child).

    These are the two children of the previous route node, i.e. the choice
    the model faces at that step.
    """
    children: dict = {}
    for p, c in sample.edges:
        children.setdefault(p, []).append(c)
    pairs = []
    for prev, chosen in zip(sample.route[:-1], sample.route[1:]):
        pair = children[prev]
        other = pair[0] if pair[1] == chosen else pair[1]
        pairs.append((chosen, other))
    return pairs


def gen_tree_corpus(n_samples: int, depths, seed: int,
                    vocab: Vocabulary) -> list[TreeSample]:
    """Deterministic corpus; sample i uses its own (seed, i) RNG stream."""
    depths = list(depths)
    out = []
    for i in range(n_samples):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(i,)))
        depth = depths[int(rng.integers(0, len(depths)))]
        out.append(gen_tree_sample(depth, rng, vocab))
    return out
