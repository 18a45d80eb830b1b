"""The subtree certification authority.

The issuer keeps a flat policy table mapping node values it recognises to
property statements. A submitted quote is verified, the node value looked
up (or justified leaf by leaf from a submitted subtree log), and on
success a manifest plus subtree certificate come back. Verification
misses produce distinct refusal codes rather than exceptions.
"""

from __future__ import annotations

import logging
import secrets
from dataclasses import dataclass, field

from .certification import (
    CONCEALED,
    REVEALED,
    AttestationPackage,
    IssuePackage,
    Manifest,
    issue_subtree_certificate,
    now,
    verify_aik_certificate,
    verify_ref_value,
)
from .crypto import Digest, HashConfig, SHA1, SigningKey, VerifyingKey, parse_digest
from .engine import refold_reduced_quote, verify_quote
from .tree import find_inconsistency, parse_sml

logger = logging.getLogger(__name__)

OK = "issued"
REFUSED_UNKNOWN = "refused-unknown-value"
REJECT_SIGNATURE = "reject-signature"
REJECT_FRESHNESS = "reject-freshness"
REJECT_AIK_CERT = "reject-aik-certificate"
REJECT_PACKAGE = "reject-package"
REJECT_SUBTREE = "reject-subtree"


class PolicyTable:
    """Node values the issuer can certify, with their property statements."""

    def __init__(self, entries: dict[bytes, tuple[tuple[str, str], ...]] | None = None) -> None:
        self.entries = dict(entries or {})

    def lookup(self, value: Digest) -> tuple[tuple[str, str], ...] | None:
        if value.value is None:
            return None
        return self.entries.get(value.value)

    def add(self, value: Digest, properties: list[tuple[str, str]]) -> None:
        if value.value is None:
            raise ValueError("cannot certify the nil value")
        self.entries[value.value] = tuple(properties)

    def values(self) -> set[Digest]:
        return {Digest(raw) for raw in self.entries}

    @classmethod
    def from_text(cls, text: str, config: HashConfig = SHA1) -> "PolicyTable":
        """One entry per line: ``<hex node value> <name>=<value>[;...]``."""
        table = cls()
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                value_hex, _, props = line.partition(" ")
                value = parse_digest(value_hex, config.size)
                pairs = []
                for item in props.split(";"):
                    name, sep, prop_value = item.partition("=")
                    if not sep or not name:
                        raise ValueError(f"bad property {item!r}")
                    pairs.append((name.strip(), prop_value.strip()))
                if not pairs:
                    raise ValueError("no properties")
                table.add(value, pairs)
            except ValueError as exc:
                raise ValueError(f"policy line {lineno}: {exc}") from exc
        return table

    def to_text(self) -> str:
        lines = []
        for raw in sorted(self.entries):
            props = ";".join(f"{n}={v}" for n, v in self.entries[raw])
            lines.append(f"{raw.hex()} {props}")
        return "\n".join(lines) + "\n"


@dataclass
class IssueOutcome:
    status: str
    package: IssuePackage | None = None
    detail: str = ""


@dataclass
class SubtreeCa:
    """Issues manifests and subtree certificates against a policy table."""

    key: SigningKey
    policy: PolicyTable
    name: str = "sca"
    mode: str = REVEALED
    config: HashConfig = SHA1
    pca_pub: VerifyingKey | None = None
    require_aik_cert: bool = False
    ref_issuers: dict[str, VerifyingKey] = field(default_factory=dict)
    leaf_values: set[bytes] = field(default_factory=set)
    clock: object = None
    issued_log: list[IssuePackage] = field(default_factory=list)
    _nonces: set[bytes] = field(default_factory=set)

    @property
    def public(self) -> VerifyingKey:
        return self.key.public

    def issue_nonce(self) -> bytes:
        """Freshness challenge; each nonce authorises exactly one package."""
        nonce = secrets.token_bytes(16)
        self._nonces.add(nonce)
        return nonce

    def known_leaf_values(self) -> set[bytes]:
        return self.leaf_values or set(self.policy.entries)

    def _timestamp(self) -> int:
        return self.clock() if callable(self.clock) else now()

    def verify_and_issue(self, package: AttestationPackage) -> IssueOutcome:
        """Phase-3 work: verify evidence, recognise the value, sign the statement."""
        quote = package.quote
        if not verify_quote(quote, package.aik_pub):
            return IssueOutcome(REJECT_SIGNATURE, detail="quote signature invalid")
        if quote.nonce not in self._nonces:
            return IssueOutcome(REJECT_FRESHNESS, detail="quote nonce unknown or already used")
        self._nonces.discard(quote.nonce)
        if quote.tag == "REDTREEQUOT" and not refold_reduced_quote(quote, self.config):
            return IssueOutcome(REJECT_PACKAGE, detail="reduced quote does not refold to its root")

        aik_checked = False
        if package.aik_cert is not None:
            if self.pca_pub is None:
                return IssueOutcome(REJECT_AIK_CERT, detail="no privacy-CA anchor configured")
            if package.aik_cert.aik_pub != package.aik_pub:
                return IssueOutcome(REJECT_AIK_CERT, detail="certificate names a different key")
            if not verify_aik_certificate(package.aik_cert, self.pca_pub):
                return IssueOutcome(REJECT_AIK_CERT, detail="certificate chain invalid")
            aik_checked = True
        elif self.require_aik_cert:
            return IssueOutcome(REJECT_AIK_CERT, detail="identity certificate required")

        value = quote.node_value
        if value.is_nil:
            return IssueOutcome(REFUSED_UNKNOWN, detail="empty node values are never certified")
        if package.node_value is not None and package.node_value != value:
            return IssueOutcome(REJECT_PACKAGE, detail="package value differs from quoted value")

        properties = self.policy.lookup(value)
        if properties is None and package.subtree is not None:
            outcome = self._leaf_coverage(package)
            if outcome is not None:
                return outcome
            properties = self._leaf_properties(package)
        if properties is None:
            return IssueOutcome(REFUSED_UNKNOWN, detail="node value not recognised")
        return IssueOutcome(OK, self._issue(value, properties, quote, package, aik_checked))

    def _issue(self, value, properties, quote, package, aik_checked) -> IssuePackage:
        concealed = self.mode == CONCEALED
        subject = self.config.measure(value.value) if concealed else value
        manifest = Manifest(
            subject=subject,
            properties=tuple(properties),
            timestamp=self._timestamp(),
            issuer=self.name,
            aik_checked=aik_checked,
        )
        bind = package.aik_pub.fingerprint() if concealed else None
        certificate = issue_subtree_certificate(
            self.key,
            self.name,
            manifest,
            quote=None if concealed else quote,
            bind=bind,
        )
        issue = IssuePackage(manifest, certificate, bind=bind)
        self.issued_log.append(issue)
        logger.info("issued %s certificate for %s", self.mode, subject.to_text())
        return issue

    def _leaf_coverage(self, package: AttestationPackage) -> IssueOutcome | None:
        """Certification from leaf values: the log must refold to the quoted
        value and every occupied leaf must be known or attested by a
        trusted reference issuer. Returns a rejection, or None when covered."""
        try:
            doc = parse_sml(package.subtree)
        except ValueError as exc:
            return IssueOutcome(REJECT_SUBTREE, detail=f"unparseable subtree log: {exc}")
        subtree = doc.tree
        if subtree.config != self.config:
            return IssueOutcome(REJECT_SUBTREE, detail="hash algorithm mismatch")
        bad = find_inconsistency(subtree, package.quote.node_value)
        if bad is not None:
            return IssueOutcome(REJECT_SUBTREE, detail=f"inconsistent at {bad or '<root>'}")
        known = self.known_leaf_values()
        vouched = set()
        for entry in package.aux:
            issuer_pub = self.ref_issuers.get(entry.issuer)
            if issuer_pub is None or not verify_ref_value(entry, issuer_pub):
                return IssueOutcome(REJECT_SUBTREE, detail=f"untrusted reference attestation from {entry.issuer!r}")
            if entry.value.value is not None:
                vouched.add(entry.value.value)
        for coord in subtree.leaf_coords():
            leaf = subtree.node(coord)
            if leaf.is_nil:
                continue
            if leaf.value not in known and leaf.value not in vouched:
                return IssueOutcome(REJECT_SUBTREE, detail=f"leaf {coord} not covered by policy or references")
        return None

    def _leaf_properties(self, package: AttestationPackage) -> tuple[tuple[str, str], ...]:
        doc = parse_sml(package.subtree)
        merged: list[tuple[str, str]] = []
        vouched = 0
        for coord in sorted(doc.tree.leaf_coords()):
            leaf = doc.tree.node(coord)
            if leaf.is_nil:
                continue
            props = self.policy.lookup(leaf)
            if props is None:
                vouched += 1
                continue
            for pair in props:
                if pair not in merged:
                    merged.append(pair)
        merged.append(("leaves-covered", "policy" if vouched == 0 else f"references:{vouched}"))
        return tuple(merged)
