"""The protected register file and the tree command set.

A single logical device: a fixed array of verification data registers
plus the commands that build, verify, update, and quote hash trees whose
roots those registers protect. Every value the commands combine lives in
a register while in use, commands run under exclusive access, and
verification outcomes are ordinary results while state and session
violations are raised as errors.
"""

from __future__ import annotations

import enum
import hashlib
import itertools
import logging
import threading
from dataclasses import dataclass
from typing import Sequence

from .crypto import (
    NIL,
    Digest,
    HashConfig,
    SHA1,
    Signature,
    SigningKey,
    VerifyingKey,
    digest_from_wire,
    digest_to_wire,
    sign,
    verify,
)
from .encoding import pack_fields, pack_u32, unpack_fields
from .tree import NodeRef, ReducedTree, Trace, check_coord, fold_to_root, reduced_coords, trace_coords

logger = logging.getLogger(__name__)


class TpmError(Exception):
    """Base class for device failures (verification misses are results, not errors)."""


class StateViolation(TpmError):
    """A command was applied to a register in the wrong lifecycle state."""


class TreeComplete(StateViolation):
    """The target tree already holds its full complement of leaves."""


class BindingViolation(TpmError):
    """An update session was consumed, invalidated, or never armed."""


class InsufficientRegisters(TpmError):
    """Not enough free registers for the requested operation."""


class RegisterState(enum.Enum):
    FREE = "Free"
    AR = "AR"  # active root, tree under construction
    CR = "CR"  # complete root, closed against further extends
    TB = "TB"  # tree-build scratch slot
    RT = "RT"  # loaded reduced-tree entry awaiting update


@dataclass
class Register:
    value: Digest = NIL
    state: RegisterState = RegisterState.FREE
    tree_uid: str | None = None
    coord: str | None = None


@dataclass(frozen=True)
class VdatEntry:
    """Allocation-table view of one register."""

    state: RegisterState
    tree_uid: str | None
    coord: str | None


class SessionStatus(enum.Enum):
    ARMED = "armed"
    CONSUMED = "consumed"
    INVALIDATED = "invalidated"


@dataclass
class UpdateSession:
    """Binding between a verified load and the one update it authorises."""

    session_id: int
    coord: str
    root_reg: int
    buffer_regs: tuple[int, ...]
    staging_reg: int
    tree_uid: str
    nonce: bytes
    auth: bytes
    status: SessionStatus = SessionStatus.ARMED

    def bound_registers(self) -> frozenset[int]:
        return frozenset(self.buffer_regs) | {self.staging_reg, self.root_reg}


@dataclass
class TreeExtendResult:
    index: int
    coord: str
    nodes: list[NodeRef]  # log delta, leaf first then recomputed ancestors
    root: Digest
    closed: bool


@dataclass
class VerifyLoadResult:
    trace: Trace
    session: UpdateSession


@dataclass
class UpdateResult:
    trace: Trace
    root: Digest


@dataclass
class NodeVerifyBreach:
    """Diagnostic outcome: the first tree level whose link failed."""

    level: int
    computed: Digest


@dataclass
class EngineStats:
    commands: int = 0
    extend_ops: int = 0
    verify_ops: int = 0
    update_ops: int = 0
    quote_ops: int = 0


@dataclass(frozen=True)
class Quote:
    """A signed statement over a register or tree-node value.

    ``reduced_values``/``root_value`` are populated only for the
    REDTREEQUOT variant, whose receiver refolds the node through the
    sibling values and compares against the signed root. The coordinate
    is signed for TREEQUOT when present, and carried unsigned for
    REDTREEQUOT (the signed root value anchors it).
    """

    tag: str
    node_value: Digest
    nonce: bytes
    signature: Signature
    aik_id: bytes
    coord: str | None = None
    reduced_values: tuple[Digest, ...] | None = None
    root_register: int | None = None
    root_value: Digest | None = None

    def signed_payload(self) -> bytes:
        return quote_payload(
            self.tag,
            self.node_value,
            coord=self.coord,
            reduced_values=self.reduced_values,
            root_register=self.root_register,
            root_value=self.root_value,
        )

    def to_bytes(self) -> bytes:
        reduced = self.reduced_values
        return pack_fields(
            self.tag.encode("ascii"),
            digest_to_wire(self.node_value),
            self.nonce,
            self.signature.data,
            self.signature.signer,
            self.aik_id,
            b"" if self.coord is None else b"c" + self.coord.encode("ascii"),
            b"" if reduced is None else pack_fields(*(digest_to_wire(d) for d in reduced)),
            b"" if self.root_register is None else pack_u32(self.root_register),
            b"" if self.root_value is None else digest_to_wire(self.root_value),
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "Quote":
        (tag, value, nonce, sig, signer, aik_id, coord, reduced, root_reg, root_val) = unpack_fields(
            data, count=10
        )
        return cls(
            tag=tag.decode("ascii"),
            node_value=digest_from_wire(value),
            nonce=nonce,
            signature=Signature(sig, signer),
            aik_id=aik_id,
            coord=None if not coord else coord[1:].decode("ascii"),
            reduced_values=None
            if not reduced
            else tuple(digest_from_wire(f) for f in unpack_fields(reduced)),
            root_register=None if not root_reg else int.from_bytes(root_reg, "big"),
            root_value=None if not root_val else digest_from_wire(root_val),
        )


def quote_payload(
    tag: str,
    node_value: Digest,
    coord: str | None = None,
    reduced_values: Sequence[Digest] | None = None,
    root_register: int | None = None,
    root_value: Digest | None = None,
) -> bytes:
    """Canonical signed payload for each quote variant."""
    if tag in ("QUOT", "TREEQUOT"):
        fields = [digest_to_wire(node_value)]
        if coord is not None:
            fields.append(coord.encode("ascii"))
        return pack_fields(*fields)
    if tag == "REDTREEQUOT":
        if reduced_values is None or root_register is None or root_value is None:
            raise ValueError("reduced quote payload needs sibling values and the root binding")
        fields = [digest_to_wire(node_value), pack_u32(len(reduced_values))]
        fields.extend(digest_to_wire(d) for d in reduced_values)
        fields.append(pack_u32(root_register))
        fields.append(digest_to_wire(root_value))
        return pack_fields(*fields)
    raise ValueError(f"unknown quote tag {tag!r}")


def verify_quote(quote: Quote, aik_pub: VerifyingKey) -> bool:
    """Check the quote signature against the presented AIK public key."""
    return verify(aik_pub, quote.tag, quote.signed_payload(), quote.nonce, quote.signature)


def refold_reduced_quote(quote: Quote, config: HashConfig) -> bool:
    """Receiver-side check of a REDTREEQUOT: fold node through siblings, compare root."""
    if quote.tag != "REDTREEQUOT" or quote.reduced_values is None or quote.root_value is None:
        raise ValueError("not a reduced-tree quote")
    coord = quote.coord if quote.coord is not None else ""
    if len(coord) != len(quote.reduced_values):
        return False
    return fold_to_root(quote.node_value, coord, quote.reduced_values, config) == quote.root_value


@dataclass
class _TreeMeta:
    uid: str
    depth: int
    root_reg: int
    tb_regs: list[int]
    leaf_count: int = 0
    closed: bool = False


class TreeTpm:
    """Register file plus tree commands, serialized as one logical device."""

    def __init__(
        self,
        register_count: int = 24,
        config: HashConfig = SHA1,
        auto_close: bool = True,
    ) -> None:
        if register_count < 2:
            raise ValueError("need at least two registers")
        self.config = config
        self.auto_close = auto_close
        self.stats = EngineStats()
        self._regs = [Register() for _ in range(register_count)]
        self._trees: dict[str, _TreeMeta] = {}
        self._sessions: dict[int, UpdateSession] = {}
        self._lock = threading.RLock()
        self._session_counter = itertools.count(1)
        self._tree_counter = itertools.count(1)
        self._command_counter = itertools.count(1)

    # -- register file plumbing ------------------------------------------

    @property
    def register_count(self) -> int:
        return len(self._regs)

    def register_value(self, reg: int) -> Digest:
        return self._reg(reg).value

    def register_state(self, reg: int) -> RegisterState:
        return self._reg(reg).state

    def vdat(self) -> dict[int, VdatEntry]:
        """Verification data allocation table: per-register state view."""
        with self._lock:
            return {
                i: VdatEntry(r.state, r.tree_uid, r.coord)
                for i, r in enumerate(self._regs)
                if r.state is not RegisterState.FREE
            }

    def free_register_count(self) -> int:
        with self._lock:
            return sum(1 for r in self._regs if r.state is RegisterState.FREE)

    def _reg(self, reg: int) -> Register:
        if not 0 <= reg < len(self._regs):
            raise ValueError(f"register index {reg} out of range")
        return self._regs[reg]

    def _alloc(self, count: int, state: RegisterState, tree_uid: str | None = None) -> list[int]:
        free = [i for i, r in enumerate(self._regs) if r.state is RegisterState.FREE]
        if len(free) < count:
            raise InsufficientRegisters(f"need {count} free registers, have {len(free)}")
        chosen = free[:count]
        for i in chosen:
            self._regs[i] = Register(NIL, state, tree_uid, None)
        return chosen

    def _free_regs(self, regs: Sequence[int]) -> None:
        for i in regs:
            self._regs[i] = Register()

    def _touch(self, regs: Sequence[int], exclude_session: int | None = None) -> None:
        """Invalidate armed sessions bound to any mutated register."""
        touched = set(regs)
        for session in self._sessions.values():
            if session.status is not SessionStatus.ARMED:
                continue
            if session.session_id == exclude_session:
                continue
            if touched & session.bound_registers():
                session.status = SessionStatus.INVALIDATED
                logger.debug("session %d invalidated by registers %s", session.session_id, sorted(touched))

    def _command(self, name: str, *detail: object) -> int:
        seq = next(self._command_counter)
        self.stats.commands += 1
        if logger.isEnabledFor(logging.DEBUG):
            logger.debug("cmd %d %s %s", seq, name, " ".join(str(d) for d in detail))
        return seq

    def _meta_for_root(self, reg: int) -> _TreeMeta:
        register = self._reg(reg)
        if register.tree_uid is None or register.tree_uid not in self._trees:
            raise StateViolation(f"register {reg} does not root a managed tree")
        return self._trees[register.tree_uid]

    # -- tree construction -----------------------------------------------

    def create_tree(self, depth: int, root_reg: int | None = None) -> int:
        """Allocate a root register (state AR) plus depth build-scratch registers."""
        if depth < 1:
            raise ValueError("tree depth must be at least 1")
        with self._lock:
            self._command("create_tree", depth)
            uid = f"tree-{next(self._tree_counter)}"
            if root_reg is None:
                (root_reg,) = self._alloc(1, RegisterState.AR, uid)
            else:
                if self._reg(root_reg).state is not RegisterState.FREE:
                    raise StateViolation(f"register {root_reg} is not free")
                self._regs[root_reg] = Register(NIL, RegisterState.AR, uid, "")
            tb = self._alloc(depth, RegisterState.TB, uid)
            self._regs[root_reg].coord = ""
            self._trees[uid] = _TreeMeta(uid, depth, root_reg, tb)
            return root_reg

    def restore_tree(
        self,
        depth: int,
        root_value: Digest,
        state: str,
        leaf_count: int,
        frontier: Sequence[Digest] = (),
    ) -> int:
        """Re-seat a persisted tree root (software-stack bootstrap plumbing).

        The register snapshot, not the log, is authoritative for the root
        value. An AR tree additionally needs its build frontier, one value
        per completed-subtree height, so later extends can continue.
        """
        if state not in ("AR", "CR"):
            raise ValueError(f"root state must be AR or CR, got {state!r}")
        if not 0 <= leaf_count <= (1 << depth):
            raise ValueError(f"leaf count {leaf_count} out of range for depth {depth}")
        with self._lock:
            self._command("restore_tree", depth, state, leaf_count)
            uid = f"tree-{next(self._tree_counter)}"
            (root_reg,) = self._alloc(1, RegisterState.AR, uid)
            reg = self._regs[root_reg]
            reg.value = self.config.check(root_value)
            reg.coord = ""
            tb: list[int] = []
            if state == "CR":
                reg.state = RegisterState.CR
            else:
                if len(frontier) != depth:
                    raise ValueError(f"need {depth} frontier values, got {len(frontier)}")
                tb = self._alloc(depth, RegisterState.TB, uid)
                for slot, value in zip(tb, frontier):
                    self._regs[slot].value = self.config.check(value)
            self._trees[uid] = _TreeMeta(uid, depth, root_reg, tb, leaf_count, state == "CR")
            return root_reg

    def tree_extend(self, reg: int, measurement: Digest) -> TreeExtendResult:
        """Place a measurement at the next free leaf and refold the path to the root.

        Completed sibling pairs are merged leftward through the scratch
        registers like binary-counter carries; the root register always
        holds the root of the current nil-padded tree.
        """
        with self._lock:
            self._command("tree_extend", reg)
            register = self._reg(reg)
            if register.state is RegisterState.CR:
                raise TreeComplete("tree complete")
            if register.state is not RegisterState.AR:
                raise StateViolation(f"register {reg} is not an active root ({register.state.value})")
            meta = self._meta_for_root(reg)
            if meta.leaf_count >= (1 << meta.depth):
                raise TreeComplete("tree complete")
            self.config.check(measurement)

            index = meta.leaf_count
            depth = meta.depth
            coord = format(index, f"0{depth}b")
            nodes = [NodeRef(coord, measurement)]
            value = measurement
            stored = False
            touched = [reg]
            for height in range(depth):
                if (index >> height) & 1:
                    # left sibling subtree is complete: merge it in
                    value = self.config.extend(self._regs[meta.tb_regs[height]].value, value)
                else:
                    if not stored:
                        self._regs[meta.tb_regs[height]].value = value
                        touched.append(meta.tb_regs[height])
                        stored = True
                    # right sibling still empty; nil unit leaves value unchanged
                ancestor = coord[: depth - height - 1]
                if ancestor:
                    nodes.append(NodeRef(ancestor, value))
            register.value = value
            meta.leaf_count += 1
            self.stats.extend_ops += 1

            closed = False
            if meta.leaf_count == (1 << depth) and self.auto_close:
                self._close(meta)
                closed = True
            self._touch(touched)
            return TreeExtendResult(index, coord, nodes, value, closed)

    def _close(self, meta: _TreeMeta) -> None:
        self._regs[meta.root_reg].state = RegisterState.CR
        self._free_regs(meta.tb_regs)
        self._touch([meta.root_reg, *meta.tb_regs])
        meta.tb_regs = []
        meta.closed = True

    def close_tree(self, reg: int) -> None:
        """AR -> CR; the tree is sealed against further extends."""
        with self._lock:
            self._command("close_tree", reg)
            register = self._reg(reg)
            if register.state is not RegisterState.AR:
                raise StateViolation(f"register {reg} is not an active root ({register.state.value})")
            self._close(self._meta_for_root(reg))

    # -- register administration -----------------------------------------

    def reset_to_nil(self, reg: int) -> None:
        """Clear a free scratch register to the nil unit."""
        with self._lock:
            self._command("reset_to_nil", reg)
            register = self._reg(reg)
            if register.state is not RegisterState.FREE:
                raise StateViolation(f"register {reg} is {register.state.value}, not free scratch")
            register.value = NIL
            self._touch([reg])

    def extend_register(self, reg: int, measurement: Digest) -> Digest:
        """Plain one-way extend of a free scratch register."""
        with self._lock:
            self._command("extend_register", reg)
            register = self._reg(reg)
            if register.state is not RegisterState.FREE:
                raise StateViolation(f"register {reg} is {register.state.value}, not free scratch")
            register.value = self.config.extend(register.value, self.config.check(measurement))
            self._touch([reg])
            return register.value

    def release(self, reg: int) -> None:
        """Authorised release of a managed register back to the free pool.

        Releasing a loaded reduced-tree slot invalidates its session;
        releasing a root abandons the whole tree including its scratch
        registers.
        """
        with self._lock:
            self._command("release", reg)
            register = self._reg(reg)
            if register.state is RegisterState.FREE:
                raise StateViolation(f"register {reg} is already free")
            if register.state is RegisterState.TB:
                raise StateViolation("build-scratch registers are managed by their tree")
            if register.state in (RegisterState.AR, RegisterState.CR):
                meta = self._meta_for_root(reg)
                victims = [reg, *meta.tb_regs]
                self._touch(victims)
                self._free_regs(victims)
                del self._trees[meta.uid]
                return
            self._touch([reg])
            self._free_regs([reg])

    # -- verification and update -----------------------------------------

    def _check_verify_inputs(self, node: NodeRef, reduced: ReducedTree, meta: _TreeMeta) -> None:
        check_coord(node.coord, meta.depth)
        self.config.check(node.value)
        expected = reduced_coords(node.coord)
        if [r.coord for r in reduced] != expected:
            raise ValueError(f"reduced tree coordinates must be {expected}")
        for ref in reduced:
            self.config.check(ref.value)

    def reduced_tree_verify_load(
        self, node: NodeRef, reduced: ReducedTree, root_reg: int
    ) -> VerifyLoadResult | None:
        """Verify a node against the root and keep its siblings loaded.

        On success the siblings stay in RT registers and an update session
        is armed; on a root mismatch everything is released and None is
        returned (a verification miss is a result, not an error).
        """
        with self._lock:
            seq = self._command("reduced_tree_verify_load", root_reg, node.coord)
            register = self._reg(root_reg)
            if register.state not in (RegisterState.AR, RegisterState.CR):
                raise StateViolation(f"register {root_reg} does not hold a root")
            meta = self._meta_for_root(root_reg)
            self._check_verify_inputs(node, reduced, meta)
            level = len(node.coord)
            self.stats.verify_ops += 1

            slots = self._alloc(level + 1, RegisterState.RT, meta.uid)
            buffers, staging = slots[:level], slots[level]
            for slot, ref in zip(buffers, reduced):
                self._regs[slot].value = ref.value
                self._regs[slot].coord = ref.coord
            self._regs[staging].value = node.value
            self._regs[staging].coord = node.coord

            emitted: list[Digest] = []
            for k in range(level, 0, -1):
                emitted.append(self._regs[staging].value)
                self._regs[staging].value = self.config.chiral_extend(
                    self._regs[buffers[k - 1]].value, node.coord[k - 1], self._regs[staging].value
                )
            if self._regs[staging].value != register.value:
                self._free_regs(slots)
                logger.debug("cmd %d verification error", seq)
                return None

            trace = [
                NodeRef(coord, value)
                for coord, value in zip(trace_coords(node.coord), reversed(emitted))
            ]
            nonce = pack_u32(seq) + pack_u32(next(self._command_counter))
            session = UpdateSession(
                session_id=next(self._session_counter),
                coord=node.coord,
                root_reg=root_reg,
                buffer_regs=tuple(buffers),
                staging_reg=staging,
                tree_uid=meta.uid,
                nonce=nonce,
                auth=hashlib.sha256(pack_fields(b"session", nonce)).digest(),
            )
            self._sessions[session.session_id] = session
            return VerifyLoadResult(trace, session)

    def reduced_tree_verify(self, node: NodeRef, reduced: ReducedTree, root_reg: int) -> Digest | None:
        """Single-register verification: streams the siblings, arms nothing."""
        with self._lock:
            seq = self._command("reduced_tree_verify", root_reg, node.coord)
            register = self._reg(root_reg)
            if register.state not in (RegisterState.AR, RegisterState.CR):
                raise StateViolation(f"register {root_reg} does not hold a root")
            meta = self._meta_for_root(root_reg)
            self._check_verify_inputs(node, reduced, meta)
            self.stats.verify_ops += 1

            (slot,) = self._alloc(1, RegisterState.RT, meta.uid)
            self._regs[slot].value = node.value
            for k in range(len(node.coord), 0, -1):
                self._regs[slot].value = self.config.chiral_extend(
                    reduced[k - 1].value, node.coord[k - 1], self._regs[slot].value
                )
            matched = self._regs[slot].value == register.value
            self._free_regs([slot])
            if not matched:
                logger.debug("cmd %d verification error", seq)
                return None
            return register.value

    def tree_node_verify(
        self, coord: str, reduced: ReducedTree, trace: Trace, root_reg: int
    ) -> NodeVerifyBreach | None:
        """Top-down diagnostic walk; returns the first breached level, or None when intact."""
        with self._lock:
            self._command("tree_node_verify", root_reg, coord)
            register = self._reg(root_reg)
            if register.state not in (RegisterState.AR, RegisterState.CR):
                raise StateViolation(f"register {root_reg} does not hold a root")
            meta = self._meta_for_root(root_reg)
            check_coord(coord, meta.depth)
            if [t.coord for t in trace] != trace_coords(coord):
                raise ValueError("trace coordinates do not match the node coordinate")
            if [r.coord for r in reduced] != reduced_coords(coord):
                raise ValueError("reduced tree coordinates do not match the node coordinate")
            for ref in itertools.chain(trace, reduced):
                self.config.check(ref.value)
            self.stats.verify_ops += 1

            slots = self._alloc(3, RegisterState.RT, meta.uid)
            b, c, d = slots
            result: NodeVerifyBreach | None = None
            self._regs[c].value = register.value
            for k in range(1, len(coord) + 1):
                self._regs[b].value = trace[k - 1].value
                self._regs[d].value = trace[k - 1].value
                self._regs[b].value = self.config.chiral_extend(
                    reduced[k - 1].value, coord[k - 1], self._regs[b].value
                )
                if self._regs[c].value != self._regs[b].value:
                    result = NodeVerifyBreach(k, self._regs[b].value)
                    break
                self._regs[c].value = self._regs[d].value
            self._free_regs(slots)
            return result

    def reduced_tree_update(self, session: UpdateSession, new_value: Digest) -> UpdateResult:
        """Consume an armed session: write the new node value and refold the root."""
        with self._lock:
            self._command("reduced_tree_update", session.root_reg, session.coord)
            live = self._sessions.get(session.session_id)
            if live is None or live is not session:
                raise BindingViolation("unknown update session")
            if session.status is SessionStatus.CONSUMED:
                raise BindingViolation("update session already consumed")
            if session.status is SessionStatus.INVALIDATED:
                raise BindingViolation("update session invalidated by an intervening command")
            expected_auth = hashlib.sha256(pack_fields(b"session", session.nonce)).digest()
            if expected_auth != session.auth:
                raise BindingViolation("session authorisation digest mismatch")
            for slot in (*session.buffer_regs, session.staging_reg):
                if self._regs[slot].state is not RegisterState.RT:
                    raise BindingViolation(f"bound register {slot} left the RT state")
            self.config.check(new_value)
            self.stats.update_ops += 1

            register = self._regs[session.root_reg]
            coord = session.coord
            emitted: list[Digest] = []
            value = new_value
            for k in range(len(coord), 0, -1):
                emitted.append(value)
                value = self.config.chiral_extend(
                    self._regs[session.buffer_regs[k - 1]].value, coord[k - 1], value
                )
            register.value = value
            session.status = SessionStatus.CONSUMED
            self._free_regs((*session.buffer_regs, session.staging_reg))
            self._touch([session.root_reg, *session.buffer_regs, session.staging_reg],
                        exclude_session=session.session_id)
            # an updated tree can no longer be extended consistently: seal it
            meta = self._meta_for_root(session.root_reg)
            if not meta.closed:
                self._close(meta)
            trace = [
                NodeRef(c, v) for c, v in zip(trace_coords(coord), reversed(emitted))
            ]
            return UpdateResult(trace, register.value)

    def tree_node_verified_update(
        self, node: NodeRef, new_value: Digest, reduced: ReducedTree, root_reg: int
    ) -> UpdateResult | None:
        """Atomic verify-then-update; on a verification miss nothing changes."""
        with self._lock:
            loaded = self.reduced_tree_verify_load(node, reduced, root_reg)
            if loaded is None:
                return None
            return self.reduced_tree_update(loaded.session, new_value)

    # -- quoting -----------------------------------------------------------

    def quote_register(self, reg: int, aik: SigningKey, nonce: bytes) -> Quote:
        """Plain register quote (tag QUOT); no tree-state gate."""
        with self._lock:
            self._command("quote_register", reg)
            value = self._reg(reg).value
            self.stats.quote_ops += 1
            payload = quote_payload("QUOT", value)
            return Quote(
                tag="QUOT",
                node_value=value,
                nonce=nonce,
                signature=sign(aik, "QUOT", payload, nonce),
                aik_id=aik.public.fingerprint(),
            )

    def tree_node_quote(
        self,
        node: NodeRef,
        reduced: ReducedTree,
        root_reg: int,
        aik: SigningKey,
        nonce: bytes,
        include_coord: bool = False,
    ) -> Quote | None:
        """Verify a node internally, then attest to its value (tag TREEQUOT).

        Only complete (CR) roots may be quoted. The coordinate enters the
        signed payload only on request; the default reveals the value
        alone.
        """
        with self._lock:
            self._command("tree_node_quote", root_reg, node.coord)
            register = self._reg(root_reg)
            if register.state is not RegisterState.CR:
                raise StateViolation("tree quotes require a complete (CR) root")
            if self.reduced_tree_verify(node, reduced, root_reg) is None:
                return None
            meta = self._meta_for_root(root_reg)
            # keep a copy of the verified value in a scratch register, quote that
            (copy_slot,) = self._alloc(1, RegisterState.RT, meta.uid)
            self._regs[copy_slot].value = node.value
            self.stats.quote_ops += 1
            coord = node.coord if include_coord else None
            payload = quote_payload("TREEQUOT", node.value, coord=coord)
            quote = Quote(
                tag="TREEQUOT",
                node_value=self._regs[copy_slot].value,
                nonce=nonce,
                signature=sign(aik, "TREEQUOT", payload, nonce),
                aik_id=aik.public.fingerprint(),
                coord=coord,
            )
            self._free_regs([copy_slot])
            return quote

    def reduced_tree_quote(
        self,
        node_value: Digest,
        reduced_values: Sequence[Digest],
        coord: str,
        root_reg: int,
        aik: SigningKey,
        nonce: bytes,
    ) -> Quote:
        """Sign node value, sibling values, and the root binding (tag REDTREEQUOT).

        No internal verification: the receiver refolds the data itself.
        The coordinate rides along unsigned so the receiver knows the
        fold order; the signed root value anchors it.
        """
        with self._lock:
            self._command("reduced_tree_quote", root_reg, coord)
            register = self._reg(root_reg)
            if register.state is not RegisterState.CR:
                raise StateViolation("tree quotes require a complete (CR) root")
            meta = self._meta_for_root(root_reg)
            check_coord(coord, meta.depth, allow_root=True)
            if len(reduced_values) != len(coord):
                raise ValueError(f"need {len(coord)} sibling values, got {len(reduced_values)}")
            self.config.check(node_value)
            for value in reduced_values:
                self.config.check(value)
            self.stats.quote_ops += 1
            payload = quote_payload(
                "REDTREEQUOT",
                node_value,
                reduced_values=reduced_values,
                root_register=root_reg,
                root_value=register.value,
            )
            return Quote(
                tag="REDTREEQUOT",
                node_value=node_value,
                nonce=nonce,
                signature=sign(aik, "REDTREEQUOT", payload, nonce),
                aik_id=aik.public.fingerprint(),
                coord=coord,
                reduced_values=tuple(reduced_values),
                root_register=root_reg,
                root_value=register.value,
            )
