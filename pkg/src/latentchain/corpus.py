"""Corpus files: one sample per line, UTF-8, deterministic given a seed.

Tree lines use the parent-child surface format; CFG lines are
space-separated terminal symbol ids. Train/test membership is decided by
hashing the serialized line, so the split is stable and the two sides are
disjoint by construction.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np

from .cfg import CfgGrammar, CfgSample, gen_cfg_sequence
from .trees import TreeSample, gen_tree_corpus, parse_tree_sample, serialize_tree_sample
from .vocab import Vocabulary


def is_test_line(line: str, test_percent: int = 10) -> bool:
    digest = hashlib.sha256(line.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") % 100 < test_percent


def split_lines(lines, test_percent: int = 10):
    train, test = [], []
    for line in lines:
        (test if is_test_line(line, test_percent) else train).append(line)
    return train, test


def write_lines(path, lines):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for line in lines:
            fh.write(line + "\n")


def read_lines(path) -> list:
    with open(path, encoding="utf-8") as fh:
        return [line.rstrip("\n") for line in fh if line.strip()]


# ---------------------------------------------------------------- trees

def build_tree_corpus(n_samples: int, depths, seed: int, vocab: Vocabulary):
    samples = gen_tree_corpus(n_samples, depths, seed, vocab)
    return [serialize_tree_sample(s) for s in samples]


def load_tree_corpus(path, vocab: Vocabulary) -> list:
    return [parse_tree_sample(line, vocab) for line in read_lines(path)]


# ---------------------------------------------------------------- cfg

def build_cfg_corpus(n_samples: int, grammar: CfgGrammar, seed: int,
                     band, max_retries: int = 2000) -> list:
    lines = []
    for i in range(n_samples):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(i,)))
        sample = gen_cfg_sequence(grammar, rng, band=band, max_retries=max_retries)
        lines.append(" ".join(str(int(t)) for t in sample.terminals))
    return lines


def load_cfg_corpus(path) -> list:
    out = []
    for line in read_lines(path):
        out.append(CfgSample(terminals=np.array([int(t) for t in line.split()],
                                                dtype=np.int64)))
    return out
