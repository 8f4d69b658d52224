"""Configuration and ground-truth records produced by the protection passes.

None of this is ever written into a bundle; it is what an evaluator knows and
an attacker does not.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Optional

from ..bundle import ChecksumMode

SCHEMES = ("dex_encrypt", "ssn", "appis", "sdc", "bombdroid", "nrp")
TAMPER_SCOPES = ("signature", "code_prefix", "resource")
REPORT_SCHEMA_VERSION = 1


class ProtectError(ValueError):
    """The requested protection cannot be applied."""


class NothingToProtect(ProtectError):
    """No site the scheme could protect was found."""


@dataclass(frozen=True)
class SchemeConfig:
    scheme: str
    seed: int = 0
    bomb_density: float = 1.0
    checksum_mode: ChecksumMode = ChecksumMode.FIXED
    salt_policy: Optional[str] = None  # None picks the scheme default
    nesting_depth: int = 1
    ssn_trigger_prob: float = 0.5
    appis_n_guards: int = 4
    tamper_scope: tuple[str, ...] = ("code_prefix", "signature")
    prefix_len: int = 100
    inject_artificial: bool = True
    const_range: tuple[int, int] = (-1024, 1024)
    obfuscate: bool = False  # recorded only; obfuscation is not modelled

    def __post_init__(self) -> None:
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if not 0.0 < self.bomb_density <= 1.0:
            raise ValueError("bomb_density must be in (0, 1]")
        if not 0.0 < self.ssn_trigger_prob <= 1.0:
            raise ValueError("ssn_trigger_prob must be in (0, 1]")
        if self.nesting_depth < 1:
            raise ValueError("nesting_depth must be >= 1")
        if self.appis_n_guards < 3:
            raise ValueError("appis_n_guards must be >= 3 (each guard needs two watchers)")
        scope = tuple(sorted(set(self.tamper_scope)))
        for s in scope:
            if s not in TAMPER_SCOPES:
                raise ValueError(f"unknown tamper scope {s!r}")
        object.__setattr__(self, "tamper_scope", scope)
        object.__setattr__(self, "checksum_mode", ChecksumMode(self.checksum_mode))
        policy = self.salt_policy
        if policy is None:
            policy = "random16" if self.scheme == "bombdroid" else "none"
        if policy not in ("none", "random16"):
            raise ValueError(f"unknown salt policy {policy!r}")
        object.__setattr__(self, "salt_policy", policy)
        object.__setattr__(self, "const_range", tuple(self.const_range))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["checksum_mode"] = self.checksum_mode.name.lower()
        d["tamper_scope"] = list(self.tamper_scope)
        d["const_range"] = list(self.const_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SchemeConfig":
        d = dict(d)
        if isinstance(d.get("checksum_mode"), str):
            d["checksum_mode"] = ChecksumMode[d["checksum_mode"].upper()]
        for k in ("tamper_scope", "const_range"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass(frozen=True)
class BombSite:
    """One injected logic bomb.

    ``index`` is the HASHEQ position inside ``host_section``/``function`` of the
    protected bundle.  ``key_value`` is the 32-bit value the payload key is
    derived from: ``const_v`` itself, except for SDC where the code checksum
    is folded in.
    """

    function: str
    index: int
    const_v: int
    salt: bytes
    alg: str
    digest32: int
    payload_section: str
    key_value: int
    host_section: str = "code"
    native_section: Optional[str] = None
    native_key: Optional[bytes] = None
    split: Optional[tuple[int, int]] = None
    depth: int = 1
    artificial: bool = False
    origin: Optional[tuple[str, int]] = None  # qualified condition it replaced

    def to_dict(self) -> dict:
        d = asdict(self)
        d["salt"] = self.salt.hex()
        d["native_key"] = self.native_key.hex() if self.native_key is not None else None
        d["split"] = list(self.split) if self.split is not None else None
        d["origin"] = list(self.origin) if self.origin is not None else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BombSite":
        d = dict(d)
        d["salt"] = bytes.fromhex(d["salt"])
        if d.get("native_key") is not None:
            d["native_key"] = bytes.fromhex(d["native_key"])
        for k in ("split", "origin"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass(frozen=True)
class Goal:
    id: str
    function: str
    start: int
    end: int
    checksum32: int


@dataclass(frozen=True)
class Guard:
    id: str
    kind: str  # "J" (function in code) or "N" (native section)
    net: int
    section: str
    start: int
    end: int
    watches: tuple[str, ...]


@dataclass(frozen=True)
class GuardNet:
    goals: tuple[Goal, ...]
    guards: tuple[Guard, ...]
    n_nets: int

    def audit(self) -> list[str]:
        """Constraint violations; empty when the net is well formed.

        Checked per net: every goal watched by at least one guard, every guard
        watched by at least two, and every goal still watched after removing
        any single guard.
        """
        problems = []
        goal_ids = {g.id for g in self.goals}
        for net in range(self.n_nets):
            guards = [g for g in self.guards if g.net == net]
            ids = {g.id for g in guards}
            for g in guards:
                for t in g.watches:
                    if t not in ids and t not in goal_ids:
                        problems.append(f"net {net}: {g.id} watches unknown {t}")
            watchers: dict[str, list[str]] = {t: [] for t in ids | goal_ids}
            for g in guards:
                for t in g.watches:
                    watchers.setdefault(t, []).append(g.id)
            for t in sorted(goal_ids):
                if len(watchers[t]) < 1:
                    problems.append(f"net {net}: goal {t} unwatched")
                elif len(set(watchers[t])) < 2:
                    problems.append(f"net {net}: goal {t} depends on a single guard")
            for t in sorted(ids):
                if len(set(watchers[t]) - {t}) < 2:
                    problems.append(f"net {net}: guard {t} watched by fewer than two guards")
        return problems

    def to_dict(self) -> dict:
        return {
            "n_nets": self.n_nets,
            "goals": [asdict(g) for g in self.goals],
            "guards": [dict(asdict(g), watches=list(g.watches)) for g in self.guards],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GuardNet":
        return cls(tuple(Goal(**g) for g in d["goals"]),
                   tuple(Guard(**dict(g, watches=tuple(g["watches"]))) for g in d["guards"]),
                   d["n_nets"])


@dataclass
class ProtectionReport:
    scheme: str
    config: SchemeConfig
    bomb_sites: list[BombSite] = field(default_factory=list)
    guard_net: Optional[GuardNet] = None
    sites_found: int = 0
    sites_protected: int = 0
    original_size: int = 0
    protected_size: int = 0
    details: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "kind": "protection",
            "scheme": self.scheme,
            "config": self.config.to_dict(),
            "sites_found": self.sites_found,
            "sites_protected": self.sites_protected,
            "original_size": self.original_size,
            "protected_size": self.protected_size,
            "bomb_sites": [s.to_dict() for s in self.bomb_sites],
            "guard_net": self.guard_net.to_dict() if self.guard_net else None,
            "details": self.details,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ProtectionReport":
        known = {f.name for f in fields(cls)}
        return cls(
            scheme=d["scheme"],
            config=SchemeConfig.from_dict(d["config"]),
            bomb_sites=[BombSite.from_dict(s) for s in d.get("bomb_sites", [])],
            guard_net=GuardNet.from_dict(d["guard_net"]) if d.get("guard_net") else None,
            **{k: d[k] for k in ("sites_found", "sites_protected", "original_size",
                                 "protected_size", "details") if k in known and k in d},
        )

    @classmethod
    def from_json(cls, text: str) -> "ProtectionReport":
        return cls.from_dict(json.loads(text))
