from __future__ import annotations

import hashlib
import random
import textwrap
from pathlib import Path

import pytest

from dagdoc.flowspec import parse_flow, validate_dag
from dagdoc.store import Store


@pytest.fixture
def store(tmp_path) -> Store:
    return Store(tmp_path / ".dagdoc")


def flow_from(text: str):
    return validate_dag(parse_flow(textwrap.dedent(text).lstrip()))


def write_flow(directory: Path, text: str, name: str = "flow.dag") -> Path:
    path = directory / name
    path.write_text(textwrap.dedent(text).lstrip(), encoding="utf-8")
    return path


def random_edges(rng: random.Random, n: int, acyclic: bool, density: float = 0.3) -> list[tuple[int, int]]:
    """Edges (pred, succ) over nodes 0..n-1; acyclic graphs only point from lower to higher index
    of a random permutation, so node names are not already in topological order."""
    perm = list(range(n))
    rng.shuffle(perm)
    edges = []
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            if acyclic and not perm[i] < perm[j]:
                continue
            if rng.random() < density:
                edges.append((i, j))
    return edges


def flow_text(n: int, edges: list[tuple[int, int]], name: str = "Rand") -> str:
    names = [f"s{i:02d}" for i in range(n)]
    lines = [f"flow {name}"]
    for j in range(n):
        preds = sorted({names[i] for i, k in edges if k == j})
        head = f"step {names[j]}"
        if preds:
            head += " after " + ", ".join(preds)
        lines += [head, '  exec "true"']
    return "\n".join(lines) + "\n"


def tree_digest(root: Path) -> dict[str, str]:
    """Relative path -> sha256 of every file under ``root`` (empty if absent)."""
    if not root.exists():
        return {}
    return {
        str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(root.rglob("*"))
        if p.is_file()
    }
