"""Node coordinates, the stored measurement log tree, and its file format.

Nodes are addressed by bit strings read root-to-leaf: ``"0"`` is the left
child of the root position, ``"01"`` that node's right child, and so on
down to the leaves at length ``depth``. The empty string addresses the
root itself, which lives in a protected register rather than in the log;
the log stores every coordinate of length 1..depth, with ``NIL`` marking
unoccupied positions so that serialization fixes the tree shape.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, NamedTuple, Sequence

from .crypto import NIL, Digest, HashConfig, SHA1, parse_digest
from .encoding import EncodingError

Coord = str

#: hard cap on tree depth; a full node map has 2^(depth+1) - 2 entries
MAX_DEPTH = 20


def check_coord(coord: Coord, depth: int | None = None, allow_root: bool = False) -> Coord:
    """Validate a coordinate string, returning it unchanged."""
    if not isinstance(coord, str) or any(c not in "01" for c in coord):
        raise ValueError(f"coordinate must be a string of 0/1 digits, got {coord!r}")
    if not coord and not allow_root:
        raise ValueError("the root position has no coordinate inside the log")
    if depth is not None and len(coord) > depth:
        raise ValueError(f"coordinate {coord!r} exceeds tree depth {depth}")
    return coord


def sibling_coord(coord: Coord) -> Coord:
    check_coord(coord)
    return coord[:-1] + ("0" if coord[-1] == "1" else "1")


def trace_coords(coord: Coord) -> list[Coord]:
    """Coordinates on the path from level 1 down to the node itself."""
    check_coord(coord)
    return [coord[:k] for k in range(1, len(coord) + 1)]


def reduced_coords(coord: Coord) -> list[Coord]:
    """Siblings of the trace: entry k is the length-k prefix, last bit negated."""
    check_coord(coord)
    return [sibling_coord(coord[:k]) for k in range(1, len(coord) + 1)]


def leq(m: Coord, n: Coord) -> bool:
    """True iff n lies on m's path to the root (n is a prefix of m)."""
    check_coord(m, allow_root=True)
    check_coord(n, allow_root=True)
    return m.startswith(n)


def leq_sets(ms: Sequence[Coord], ns: Sequence[Coord]) -> bool:
    """Set lift of leq: every m is dominated by some n."""
    return all(any(leq(m, n) for n in ns) for m in ms)


def leaf_interval(coord: Coord, depth: int) -> tuple[int, int]:
    """Inclusive range of leaf indices covered by the subtree at coord."""
    check_coord(coord, depth, allow_root=True)
    width = 1 << (depth - len(coord))
    start = int(coord, 2) * width if coord else 0
    return start, start + width - 1


class NodeRef(NamedTuple):
    """A coordinate paired with the value claimed or stored there."""

    coord: Coord
    value: Digest


Trace = list[NodeRef]
ReducedTree = list[NodeRef]


def fold_to_root(value: Digest, coord: Coord, reduced_values: Sequence[Digest], config: HashConfig) -> Digest:
    """Fold a node value through its sibling list up to a root candidate.

    The coordinate supplies the order bit at every level; entry k of
    ``reduced_values`` is the sibling at level k.
    """
    check_coord(coord, allow_root=True)
    if len(reduced_values) != len(coord):
        raise ValueError(f"need {len(coord)} sibling values, got {len(reduced_values)}")
    acc = value
    for k in range(len(coord), 0, -1):
        acc = config.chiral_extend(reduced_values[k - 1], coord[k - 1], acc)
    return acc


class SmlTree:
    """Stored measurement log: a fixed-depth binary tree of digests.

    The tree is a plain value object maintained by the software stack; no
    consistency is enforced on mutation so that tampering can be injected
    for verification tests. Use find_inconsistency() for well-formedness.
    """

    def __init__(self, depth: int, config: HashConfig = SHA1, root_register: int = 0) -> None:
        if not 1 <= depth <= MAX_DEPTH:
            raise ValueError(f"depth must be in 1..{MAX_DEPTH}, got {depth}")
        self.depth = depth
        self.config = config
        self.root_register = root_register
        self.leaf_count = 0
        self._nodes: dict[Coord, Digest] = {c: NIL for c in _all_coords(depth)}

    @property
    def capacity(self) -> int:
        return 1 << self.depth

    def coords(self) -> Iterator[Coord]:
        """All coordinates in breadth-first order."""
        return _all_coords(self.depth)

    def leaf_coords(self) -> Iterator[Coord]:
        depth = self.depth
        return (format(i, f"0{depth}b") for i in range(1 << depth))

    def node(self, coord: Coord) -> Digest:
        check_coord(coord, self.depth)
        return self._nodes[coord]

    def set_node(self, coord: Coord, value: Digest) -> None:
        check_coord(coord, self.depth)
        self._nodes[coord] = self.config.check(value)

    def occupied(self) -> Iterator[NodeRef]:
        for coord in self.coords():
            value = self._nodes[coord]
            if not value.is_nil:
                yield NodeRef(coord, value)

    def copy(self) -> "SmlTree":
        dup = SmlTree.__new__(SmlTree)
        dup.depth = self.depth
        dup.config = self.config
        dup.root_register = self.root_register
        dup.leaf_count = self.leaf_count
        dup._nodes = dict(self._nodes)
        return dup

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SmlTree):
            return NotImplemented
        return (
            self.depth == other.depth
            and self.config == other.config
            and self.root_register == other.root_register
            and self.leaf_count == other.leaf_count
            and self._nodes == other._nodes
        )

    def __repr__(self) -> str:
        occupied = sum(1 for c in self._nodes if not self._nodes[c].is_nil)
        return f"SmlTree(depth={self.depth}, leaves={self.leaf_count}, occupied={occupied})"


def _all_coords(depth: int) -> Iterator[Coord]:
    for level in range(1, depth + 1):
        for i in range(1 << level):
            yield format(i, f"0{level}b")


def build_trace(tree: SmlTree, coord: Coord) -> Trace:
    """Trace of a node as stored in the log (level 1 first)."""
    return [NodeRef(c, tree.node(c)) for c in trace_coords(check_coord(coord, tree.depth))]


def build_reduced_tree(tree: SmlTree, coord: Coord) -> ReducedTree:
    """Sibling list of a node as stored in the log (level 1 first)."""
    return [NodeRef(c, tree.node(c)) for c in reduced_coords(check_coord(coord, tree.depth))]


def recompute_root(tree: SmlTree) -> Digest:
    """Recompute the root value from the log without touching the tree.

    Inner values are refolded from below; where a node's children carry
    no information at all, the stored value is kept, so a tree whose
    inner node was legitimately replaced (emptying its subtree) still
    folds to the register value.
    """
    return _fold_subtree(tree, "")


def _fold_subtree(tree: SmlTree, coord: Coord) -> Digest:
    if len(coord) == tree.depth:
        return tree.node(coord)
    left = _fold_subtree(tree, coord + "0")
    right = _fold_subtree(tree, coord + "1")
    if left.is_nil and right.is_nil:
        return tree.node(coord) if coord else NIL
    return tree.config.extend(left, right)


def find_inconsistency(tree: SmlTree, claimed_root: Digest | None = None) -> Coord | None:
    """First coordinate (breadth-first) whose stored value mismatches its children.

    Returns the empty string when the refolded root mismatches
    ``claimed_root``; None when the log is internally consistent.
    """
    for coord in tree.coords():
        if len(coord) == tree.depth:
            continue
        expected = tree.config.extend(tree.node(coord + "0"), tree.node(coord + "1"))
        if expected != tree.node(coord):
            return coord
    if claimed_root is not None and recompute_root(tree) != claimed_root:
        return ""
    return None


def extract_subtree(tree: SmlTree, coord: Coord) -> SmlTree:
    """Standalone log for the subtree below coord (root value not included)."""
    check_coord(coord, tree.depth)
    if len(coord) >= tree.depth:
        raise ValueError("cannot extract a subtree below a leaf")
    sub = SmlTree(tree.depth - len(coord), tree.config, root_register=tree.root_register)
    for rel in sub.coords():
        sub._nodes[rel] = tree.node(coord + rel)
    sub.leaf_count = sum(1 for c in sub.leaf_coords() if not sub.node(c).is_nil)
    return sub


@dataclass
class SmlDocument:
    """A parsed log file: the tree plus an optional root register snapshot."""

    tree: SmlTree
    root_value: Digest | None = None
    root_state: str | None = None  # "AR" or "CR" when snapshotted


_MAGIC = "SMLTREE"
_VERSION = "v1"


def serialize_sml(tree: SmlTree, root_value: Digest | None = None, root_state: str | None = None) -> bytes:
    """Render a log as its canonical text file.

    The header carries the hash algorithm, shape, and the root register
    binding; node lines follow in breadth-first order. When given, the
    root register's value and state are snapshotted into the header so a
    later process can restore the protected register alongside the log.
    """
    head = [
        _MAGIC,
        _VERSION,
        f"alg={tree.config.algorithm}",
        f"depth={tree.depth}",
        f"leaves={tree.leaf_count}",
        f"root-reg={tree.root_register}",
    ]
    if root_value is not None:
        head.append(f"root={root_value.to_text()}")
    if root_state is not None:
        if root_state not in ("AR", "CR"):
            raise ValueError(f"root state must be AR or CR, got {root_state!r}")
        head.append(f"state={root_state}")
    lines = [" ".join(head)]
    for coord in tree.coords():
        lines.append(f"{coord} {tree.node(coord).to_text()}")
    return ("\n".join(lines) + "\n").encode("ascii")


def parse_sml(data: bytes) -> SmlDocument:
    """Parse serialize_sml() output; errors carry the offending line number."""
    try:
        text = data.decode("ascii")
    except UnicodeDecodeError as exc:
        raise EncodingError(f"log file is not ascii: {exc}") from exc
    lines = text.splitlines()
    if not lines:
        raise EncodingError("line 1: empty log file")
    head = lines[0].split()
    if len(head) < 6 or head[0] != _MAGIC or head[1] != _VERSION:
        raise EncodingError("line 1: bad magic or version")
    fields: dict[str, str] = {}
    for token in head[2:]:
        key, sep, value = token.partition("=")
        if not sep or key in fields:
            raise EncodingError(f"line 1: bad header token {token!r}")
        fields[key] = value
    try:
        config = HashConfig(fields["alg"])
        depth = int(fields["depth"])
        leaves = int(fields["leaves"])
        root_register = int(fields["root-reg"])
    except (KeyError, ValueError) as exc:
        raise EncodingError(f"line 1: bad header: {exc}") from exc
    if not 1 <= depth <= MAX_DEPTH:
        raise EncodingError(f"line 1: depth {depth} out of range")
    tree = SmlTree(depth, config, root_register=root_register)
    if not 0 <= leaves <= tree.capacity:
        raise EncodingError(f"line 1: leaf count {leaves} out of range")
    tree.leaf_count = leaves

    root_value: Digest | None = None
    if "root" in fields:
        try:
            root_value = parse_digest(fields["root"], config.size)
        except ValueError as exc:
            raise EncodingError(f"line 1: {exc}") from exc
    root_state = fields.get("state")
    if root_state is not None and root_state not in ("AR", "CR"):
        raise EncodingError(f"line 1: bad root state {root_state!r}")

    expected = list(tree.coords())
    body = lines[1:]
    if len(body) != len(expected):
        raise EncodingError(f"line {len(lines)}: expected {len(expected)} node lines, got {len(body)}")
    for lineno, (line, coord) in enumerate(zip(body, expected), start=2):
        parts = line.split()
        if len(parts) != 2:
            raise EncodingError(f"line {lineno}: expected '<coord> <digest>'")
        if parts[0] != coord:
            raise EncodingError(f"line {lineno}: expected coordinate {coord}, got {parts[0]}")
        try:
            tree._nodes[coord] = parse_digest(parts[1], config.size)
        except ValueError as exc:
            raise EncodingError(f"line {lineno}: {exc}") from exc
    return SmlDocument(tree, root_value, root_state)
