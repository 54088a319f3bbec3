"""Manual generation and parsing.

Manuals are rendered from sentence templates with per-attribute synonym
banks loaded from a plain-text configuration file, so phrasings stay
human-editable.  Each description carries its hidden ground-truth
(identity, movement, role) triple; the oracle parser returns it exactly,
the noisy parser corrupts the identity with a configurable probability
to emulate an imperfect learned extractor.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np

from .env import GAME_IDENTITIES, EnvParams, Identity, Movement, Role

_SECTION_RE = re.compile(r"^\[(identity|movement|role|template)\s+(\w+)\]$")


class ManualParseError(ValueError):
    """A description string cannot be grounded in the phrase banks."""


@dataclass(frozen=True)
class Description:
    text: str
    truth: tuple[Identity, Movement, Role]


@dataclass(frozen=True)
class Manual:
    """Three descriptions in shuffled order.

    channel_map[i] is the entity channel (1..3) described by
    descriptions[i].
    """

    descriptions: tuple[Description, Description, Description]
    channel_map: tuple[int, int, int]

    @property
    def texts(self) -> list[str]:
        return [d.text for d in self.descriptions]

    def description_for_channel(self, channel: int) -> Description:
        return self.descriptions[self.channel_map.index(channel)]


class SynonymBank:
    """Phrase banks plus sentence templates parsed from the config file."""

    def __init__(
        self,
        identity_phrases: dict[Identity, list[str]],
        movement_phrases: dict[Movement, list[str]],
        role_phrases: dict[Role, list[str]],
        templates: list[str],
    ):
        self.identity_phrases = identity_phrases
        self.movement_phrases = movement_phrases
        self.role_phrases = role_phrases
        self.templates = templates
        self._validate()

    def _validate(self) -> None:
        for ident in GAME_IDENTITIES:
            if len(self.identity_phrases.get(ident, [])) < 3:
                raise ValueError(f"need >= 3 phrasings for identity {ident.name}")
        for mv in Movement:
            if len(self.movement_phrases.get(mv, [])) < 3:
                raise ValueError(f"need >= 3 phrasings for movement {mv.value}")
        for rl in Role:
            if len(self.role_phrases.get(rl, [])) < 3:
                raise ValueError(f"need >= 3 phrasings for role {rl.value}")
        if not any(t.startswith("the {identity}") for t in self.templates) or not any(
            t.startswith("{role}") for t in self.templates
        ):
            raise ValueError("templates must include identity-first and role-first")
        seen: dict[str, Identity] = {}
        for ident, phrases in self.identity_phrases.items():
            for p in phrases:
                if p in seen:
                    raise ValueError(f"identity phrase {p!r} used twice")
                seen[p] = ident

    def render(self, truth: tuple[Identity, Movement, Role], rng) -> str:
        ident, movement, role = truth
        template = self.templates[int(rng.integers(len(self.templates)))]
        ip = self.identity_phrases[ident]
        mp = self.movement_phrases[movement]
        rp = self.role_phrases[role]
        return template.format(
            identity=ip[int(rng.integers(len(ip)))],
            movement=mp[int(rng.integers(len(mp)))],
            role=rp[int(rng.integers(len(rp)))],
        )

    def word_vocabulary(self) -> list[str]:
        """All word types a rendered or canonical description can use.

        Index 0 is the padding token; canonical attribute names are
        included so oracle-parse strings tokenize too.
        """
        words: set[str] = set()
        for phrases in self.identity_phrases.values():
            for p in phrases:
                words.update(p.split())
        for phrases in list(self.movement_phrases.values()) + list(
            self.role_phrases.values()
        ):
            for p in phrases:
                words.update(p.split())
        for t in self.templates:
            words.update(
                w for w in t.replace("{", " ").replace("}", " ").split()
                if w not in ("identity", "movement", "role")
            )
        words.update(i.name.lower() for i in GAME_IDENTITIES)
        words.update(m.value for m in Movement)
        words.update(r.value for r in Role)
        return ["<pad>"] + sorted(words)

    def max_description_words(self) -> int:
        longest_slot = {
            "identity": max(
                len(p.split())
                for ps in self.identity_phrases.values()
                for p in ps
            ),
            "movement": max(
                len(p.split())
                for ps in self.movement_phrases.values()
                for p in ps
            ),
            "role": max(
                len(p.split()) for ps in self.role_phrases.values() for p in ps
            ),
        }
        best = 0
        for t in self.templates:
            n = len(
                [
                    w
                    for w in t.replace("{", " ").replace("}", " ").split()
                    if w not in longest_slot
                ]
            )
            n += sum(v for k, v in longest_slot.items() if "{%s}" % k in t)
            best = max(best, n)
        return best


def load_banks(path: Optional[str | Path] = None) -> SynonymBank:
    """Parse the phrase-bank config (defaults to the packaged file)."""
    if path is None:
        text = (
            resources.files("courierlab").joinpath("data/synonyms.txt").read_text()
        )
    else:
        text = Path(path).read_text()
    identity: dict[Identity, list[str]] = {}
    movement: dict[Movement, list[str]] = {}
    role: dict[Role, list[str]] = {}
    templates: list[str] = []
    target: Optional[list[str]] = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        m = _SECTION_RE.match(line)
        if m:
            kind, value = m.groups()
            if kind == "identity":
                target = identity.setdefault(Identity[value.upper()], [])
            elif kind == "movement":
                target = movement.setdefault(Movement(value), [])
            elif kind == "role":
                target = role.setdefault(Role(value), [])
            else:
                target = templates
            continue
        if target is None:
            raise ValueError(f"line {lineno}: phrase before any section header")
        target.append(line)
    return SynonymBank(identity, movement, role, templates)


_DEFAULT_BANKS: Optional[SynonymBank] = None


def default_banks() -> SynonymBank:
    global _DEFAULT_BANKS
    if _DEFAULT_BANKS is None:
        _DEFAULT_BANKS = load_banks()
    return _DEFAULT_BANKS


def render_manual(
    params: EnvParams, seed: int, banks: Optional[SynonymBank] = None
) -> Manual:
    """Render one description per entity and shuffle their order."""
    banks = banks or default_banks()
    rng = np.random.default_rng(seed)
    descriptions = []
    for spec in params.entities:
        truth = (spec.identity, spec.movement, spec.role)
        descriptions.append(Description(text=banks.render(truth, rng), truth=truth))
    order = rng.permutation(3)
    shuffled = tuple(descriptions[int(i)] for i in order)
    channel_map = tuple(int(i) + 1 for i in order)
    return Manual(descriptions=shuffled, channel_map=channel_map)  # type: ignore[arg-type]


def oracle_parse(d: Description) -> tuple[Identity, Movement, Role]:
    return d.truth


def canonical_parse(d: Description) -> str:
    """The exact three-word form: 'identity movement role'."""
    ident, movement, role = d.truth
    return f"{ident.name.lower()} {movement.value} {role.value}"


def noisy_parse(
    d: Description,
    per_desc_error: float,
    rng: np.random.Generator,
) -> tuple[Identity, Movement, Role]:
    """Truth with probability 1 - per_desc_error, else a wrong identity.

    Movement and role are always returned truthfully; only identity
    extraction is error-prone.
    """
    if not 0.0 <= per_desc_error <= 1.0:
        raise ValueError("per_desc_error must lie in [0, 1]")
    ident, movement, role = d.truth
    if rng.random() < per_desc_error:
        wrong = [i for i in GAME_IDENTITIES if i != ident]
        ident = wrong[int(rng.integers(len(wrong)))]
    return (ident, movement, role)


def parse_with_banks(
    text: str, banks: Optional[SynonymBank] = None
) -> tuple[Identity, Movement, Role]:
    """Ground a description string via phrase-bank membership.

    Used to validate human-edited manual text: the string must contain
    exactly one identity phrasing, one movement phrasing, and one role
    phrasing (canonical attribute names also match).
    """
    banks = banks or default_banks()
    padded = f" {' '.join(text.lower().split())} "

    def find(phrase_map, canonical):
        hits = []
        for value, phrases in phrase_map.items():
            candidates = set(phrases) | {canonical(value)}
            if any(f" {p} " in padded for p in candidates):
                hits.append(value)
        return hits

    idents = find(banks.identity_phrases, lambda i: i.name.lower())
    moves = find(banks.movement_phrases, lambda m: m.value)
    roles = find(banks.role_phrases, lambda r: r.value)
    problems = []
    if len(idents) != 1:
        problems.append(f"identity matches: {[i.name.lower() for i in idents]}")
    if len(moves) != 1:
        problems.append(f"movement matches: {[m.value for m in moves]}")
    if len(roles) != 1:
        problems.append(f"role matches: {[r.value for r in roles]}")
    if problems:
        raise ManualParseError(f"cannot ground {text!r}: " + "; ".join(problems))
    return (idents[0], moves[0], roles[0])
