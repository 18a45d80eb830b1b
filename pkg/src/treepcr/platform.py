"""The trusted software stack side of the device.

A Platform owns one measurement tree: the device holds the protected
root, the platform mirrors the log, applies the node deltas returned by
tree commands, and speaks for the device in the certification protocol
(it holds the attestation identity key).
"""

from __future__ import annotations

import logging

from .crypto import NIL, Digest, HashConfig, SHA1, SigningKey
from .engine import (
    NodeVerifyBreach,
    Quote,
    RegisterState,
    StateViolation,
    TreeTpm,
    UpdateResult,
)
from .tree import (
    NodeRef,
    ReducedTree,
    SmlDocument,
    SmlTree,
    Trace,
    build_reduced_tree,
    build_trace,
    check_coord,
)

logger = logging.getLogger(__name__)


class Platform:
    """One measurement tree: protected root in the device, mirror here."""

    def __init__(
        self,
        depth: int,
        config: HashConfig = SHA1,
        engine: TreeTpm | None = None,
        register_count: int = 24,
        auto_close: bool = True,
        aik: SigningKey | None = None,
        aik_cert=None,
    ) -> None:
        self.engine = engine or TreeTpm(register_count, config, auto_close=auto_close)
        if self.engine.config != config:
            raise ValueError("engine hash configuration differs from the platform's")
        self.config = config
        self.root_reg = self.engine.create_tree(depth)
        self.tree = SmlTree(depth, config, root_register=self.root_reg)
        self.aik = aik or SigningKey.generate()
        self.aik_cert = aik_cert

    # -- measurement -------------------------------------------------------

    def extend(self, measurement: Digest) -> Digest:
        """Feed one measurement to the device and mirror the returned delta."""
        result = self.engine.tree_extend(self.root_reg, measurement)
        for ref in result.nodes:
            self.tree.set_node(ref.coord, ref.value)
        self.tree.leaf_count = result.index + 1
        return result.root

    def extend_data(self, data: bytes) -> Digest:
        return self.extend(self.config.measure(data))

    def close(self) -> None:
        self.engine.close_tree(self.root_reg)

    @property
    def depth(self) -> int:
        return self.tree.depth

    def root(self) -> Digest:
        return self.engine.register_value(self.root_reg)

    def root_state(self) -> RegisterState:
        return self.engine.register_state(self.root_reg)

    def node(self, coord: str) -> NodeRef:
        return NodeRef(coord, self.tree.node(coord))

    def reduced(self, coord: str) -> ReducedTree:
        return build_reduced_tree(self.tree, coord)

    def trace(self, coord: str) -> Trace:
        return build_trace(self.tree, coord)

    # -- verification ------------------------------------------------------

    def verify_node(self, coord: str) -> bool:
        """Check the stored node value against the protected root."""
        return (
            self.engine.reduced_tree_verify(self.node(coord), self.reduced(coord), self.root_reg)
            is not None
        )

    def diagnose_node(self, coord: str) -> NodeVerifyBreach | None:
        """Top-down walk reporting the first breached level, None when intact."""
        return self.engine.tree_node_verify(coord, self.reduced(coord), self.trace(coord), self.root_reg)

    # -- update ------------------------------------------------------------

    def verified_update(self, coord: str, new_value: Digest) -> UpdateResult | None:
        """Verify-and-replace one node; mirrors the new trace on success.

        Everything strictly below the replaced node loses its protection
        and is blanked in the mirror.
        """
        result = self.engine.tree_node_verified_update(
            self.node(coord), new_value, self.reduced(coord), self.root_reg
        )
        if result is None:
            return None
        self.apply_update(coord, result.trace)
        return result

    def apply_update(self, coord: str, trace: Trace) -> None:
        """Mirror maintenance after an update at coord."""
        for ref in trace:
            self.tree.set_node(ref.coord, ref.value)
        stale = 0
        for below in self.tree.coords():
            if len(below) > len(coord) and below.startswith(coord):
                if not self.tree.node(below).is_nil:
                    stale += 1
                self.tree.set_node(below, NIL)
        if stale:
            logger.debug("update at %s invalidated %d stale nodes", coord, stale)

    # -- quoting -----------------------------------------------------------

    def quote_node(self, coord: str, nonce: bytes, include_coord: bool = False) -> Quote | None:
        """Attest to a node value; the root position is quoted as a plain register.

        Protocol rule: quoting requires the root to be complete (CR).
        """
        check_coord(coord, self.depth, allow_root=True)
        if coord == "":
            if self.root_state() is not RegisterState.CR:
                raise StateViolation("root quotes for certification require a complete (CR) root")
            return self.engine.quote_register(self.root_reg, self.aik, nonce)
        return self.engine.tree_node_quote(
            self.node(coord), self.reduced(coord), self.root_reg, self.aik, nonce,
            include_coord=include_coord,
        )

    def quote_reduced(self, coord: str, nonce: bytes) -> Quote:
        """Reduced-tree quote: signs node, siblings, and root for receiver-side folding."""
        check_coord(coord, self.depth, allow_root=True)
        values = [ref.value for ref in self.reduced(coord)] if coord else []
        node_value = self.tree.node(coord) if coord else self.root()
        return self.engine.reduced_tree_quote(
            node_value, values, coord, self.root_reg, self.aik, nonce
        )

    # -- persistence (process-spanning emulation) ---------------------------

    def to_document(self) -> SmlDocument:
        state = self.root_state()
        if state not in (RegisterState.AR, RegisterState.CR):
            raise StateViolation(f"root register is {state.value}; nothing to snapshot")
        return SmlDocument(self.tree.copy(), self.root(), state.value)

    @classmethod
    def from_document(
        cls,
        doc: SmlDocument,
        engine: TreeTpm | None = None,
        register_count: int = 24,
        auto_close: bool = True,
        aik: SigningKey | None = None,
        aik_cert=None,
    ) -> "Platform":
        """Rebuild a platform from a snapshot; the register snapshot is authoritative.

        The root value comes from the document header, never from refolding
        the log, so tampering injected into the log stays detectable.
        """
        if doc.root_value is None or doc.root_state is None:
            raise ValueError("document carries no root register snapshot")
        tree = doc.tree
        self = cls.__new__(cls)
        self.engine = engine or TreeTpm(register_count, tree.config, auto_close=auto_close)
        if self.engine.config != tree.config:
            raise ValueError("engine hash configuration differs from the document's")
        self.config = tree.config
        frontier: list[Digest] = []
        if doc.root_state == "AR":
            frontier = _frontier_from_mirror(tree)
        self.root_reg = self.engine.restore_tree(
            tree.depth, doc.root_value, doc.root_state, tree.leaf_count, frontier
        )
        self.tree = tree.copy()
        self.tree.root_register = self.root_reg
        self.aik = aik or SigningKey.generate()
        self.aik_cert = aik_cert
        return self


def _frontier_from_mirror(tree: SmlTree) -> list[Digest]:
    """Completed-subtree roots per height, read back from the mirror."""
    frontier = [NIL] * tree.depth
    count = tree.leaf_count
    for height in range(tree.depth):
        if (count >> height) & 1:
            index = (count >> height) - 1
            coord = format(index, f"0{tree.depth - height}b")
            frontier[height] = tree.node(coord)
    return frontier
