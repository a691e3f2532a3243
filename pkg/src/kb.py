"""
Immutable RDF-style knowledge base.

Storage, TSV ingestion and lookup of entities, labels, aliases, type
assertions, subclass edges and single-valued triples. A loaded
KnowledgeBase is never mutated and can be shared freely across threads.
"""

import logging
import math
import re
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from types import MappingProxyType
from typing import Dict, FrozenSet, Iterable, Iterator, List, Optional, Set, Tuple

from .errors import DanglingReferenceError, DuplicateObjectError, KbFormatError, UnknownIdError
from .units import Quantity, is_registered_unit
from .utils import normalize_text

logger = logging.getLogger(__name__)

KIND_CODES = {"e": "entity", "n": "number", "s": "string", "t": "time"}
KIND_TO_CODE = {kind: code for code, kind in KIND_CODES.items()}

_ISO_TIME_RE = re.compile(r"^[+-]?\d{4}(-\d{2}(-\d{2}(T\d{2}:\d{2}(:\d{2}(\.\d+)?)?(Z|[+-]\d{2}:\d{2})?)?)?)?$")


@dataclass(frozen=True)
class ObjectValue:
    """Object of a triple: an entity reference, a number (with unit), a string or an ISO date."""
    kind: str
    entity: Optional[str] = None
    number: Optional[float] = None
    unit: Optional[str] = None
    text: Optional[str] = None
    time: Optional[str] = None

    def __post_init__(self):
        if self.kind not in KIND_TO_CODE:
            raise ValueError(f"Unknown object kind: {self.kind}")
        populated = {
            "entity": self.entity is not None,
            "number": self.number is not None,
            "string": self.text is not None,
            "time": self.time is not None,
        }
        if sum(populated.values()) != 1 or not populated[self.kind]:
            raise ValueError(f"Object of kind {self.kind} must populate exactly its own variant")
        if self.unit is not None and self.kind != "number":
            raise ValueError("Only numbers carry a unit")
        if self.kind == "entity" and not self.entity:
            raise ValueError("Entity reference must be non-empty")
        if self.kind == "number":
            if not math.isfinite(self.number):
                raise ValueError(f"Number must be finite, got {self.number}")
            if self.unit is not None and not is_registered_unit(self.unit):
                raise ValueError(f"Unit {self.unit!r} is not in the unit registry")
        if self.kind == "time" and not _ISO_TIME_RE.match(self.time):
            raise ValueError(f"Not an ISO-8601 date: {self.time!r}")

    @classmethod
    def entity_ref(cls, entity_id: str) -> 'ObjectValue':
        return cls(kind="entity", entity=entity_id)

    @classmethod
    def numeric(cls, value: float, unit: Optional[str] = None) -> 'ObjectValue':
        return cls(kind="number", number=float(value), unit=unit)

    @classmethod
    def string(cls, text: str) -> 'ObjectValue':
        return cls(kind="string", text=text)

    @classmethod
    def time_value(cls, iso: str) -> 'ObjectValue':
        return cls(kind="time", time=iso)

    @property
    def code(self) -> str:
        return KIND_TO_CODE[self.kind]

    def value_field(self) -> str:
        """The TSV value column for this object."""
        if self.kind == "entity":
            return self.entity
        if self.kind == "number":
            return repr(self.number)
        if self.kind == "string":
            return self.text
        return self.time

    def quantity(self) -> Optional[Quantity]:
        if self.kind != "number":
            return None
        return Quantity(self.number, self.unit)

    def year(self) -> Optional[int]:
        """Year component of a time value."""
        if self.kind != "time":
            return None
        match = re.match(r"^([+-]?\d{4})", self.time)
        return int(match.group(1)) if match else None

    def render(self, kb: Optional['KnowledgeBase'] = None) -> str:
        """Surface form used for string matching, prompts and fills."""
        if self.kind == "entity":
            if kb is not None and kb.has_entity(self.entity):
                return kb.label(self.entity)
            return self.entity
        if self.kind == "number":
            text = str(int(self.number)) if float(self.number).is_integer() else repr(float(self.number))
            return f"{text} {self.unit}" if self.unit else text
        if self.kind == "string":
            return self.text
        return self.time


@dataclass(frozen=True)
class Triple:
    """RDF triple <subject, property, object>."""
    subject: str
    property: str
    object: ObjectValue

    @property
    def triple_id(self) -> str:
        return f"{self.subject}|{self.property}"


@dataclass(frozen=True)
class Entity:
    """Registered entity with its label and aliases."""
    id: str
    label: str
    aliases: Tuple[str, ...] = ()


class KnowledgeBase:
    """
    Immutable triple store.

    Holds at most one object per (subject, property) pair. Type assignments
    are direct assertions; hierarchy closure is a separate query
    (`types_closure`).
    """

    def __init__(
        self,
        entities: Dict[str, Entity],
        properties: Dict[str, str],
        types: Dict[str, FrozenSet[str]],
        subclass_of: Dict[str, FrozenSet[str]],
        objects: Dict[Tuple[str, str], ObjectValue],
    ):
        self._entities = MappingProxyType(dict(entities))
        self._properties = MappingProxyType(dict(properties))
        self._types = MappingProxyType({e: frozenset(ts) for e, ts in types.items() if ts})
        self._subclass_of = MappingProxyType({t: frozenset(s) for t, s in subclass_of.items() if s})
        self._objects = MappingProxyType(dict(objects))

        members: Dict[str, Set[str]] = defaultdict(set)
        for entity_id, type_ids in self._types.items():
            for type_id in type_ids:
                members[type_id].add(entity_id)
        self._members = MappingProxyType({t: frozenset(es) for t, es in members.items()})

        props_of: Dict[str, Set[str]] = defaultdict(set)
        for subject, prop in self._objects:
            props_of[subject].add(prop)
        self._props_of = MappingProxyType({e: frozenset(ps) for e, ps in props_of.items()})

        surface: Dict[str, Set[str]] = defaultdict(set)
        for entity in self._entities.values():
            surface[normalize_text(entity.label)].add(entity.id)
            for alias in entity.aliases:
                surface[normalize_text(alias)].add(entity.id)
        self._surface = MappingProxyType({k: frozenset(v) for k, v in surface.items()})

    # ------------------------------------------------------------------
    # Registration checks
    # ------------------------------------------------------------------

    def has_entity(self, entity_id: str) -> bool:
        return entity_id in self._entities

    def has_property(self, property_id: str) -> bool:
        return property_id in self._properties

    def _require_entity(self, entity_id: str):
        if entity_id not in self._entities:
            raise UnknownIdError(f"Unregistered entity: {entity_id!r}")

    def _require_property(self, property_id: str):
        if property_id not in self._properties:
            raise UnknownIdError(f"Unregistered property: {property_id!r}")

    # ------------------------------------------------------------------
    # Accessors
    # ------------------------------------------------------------------

    @property
    def entity_ids(self) -> FrozenSet[str]:
        return frozenset(self._entities)

    @property
    def property_ids(self) -> FrozenSet[str]:
        return frozenset(self._properties)

    @property
    def num_entities(self) -> int:
        return len(self._entities)

    @property
    def num_triples(self) -> int:
        return len(self._objects)

    def entity(self, entity_id: str) -> Entity:
        self._require_entity(entity_id)
        return self._entities[entity_id]

    def entities(self) -> Iterator[Entity]:
        for entity_id in sorted(self._entities):
            yield self._entities[entity_id]

    def label(self, entity_id: str) -> str:
        return self.entity(entity_id).label

    def aliases(self, entity_id: str) -> Tuple[str, ...]:
        return self.entity(entity_id).aliases

    def property_label(self, property_id: str) -> str:
        self._require_property(property_id)
        return self._properties[property_id]

    def triples(self) -> Iterator[Triple]:
        for subject, prop in sorted(self._objects):
            yield Triple(subject, prop, self._objects[(subject, prop)])

    def triple_set(self) -> FrozenSet[Triple]:
        return frozenset(self.triples())

    # ------------------------------------------------------------------
    # Queries
    # ------------------------------------------------------------------

    def property_lookup(self, entity_id: str, property_id: str) -> Optional[ObjectValue]:
        """Return o for <e, p, o>, or None when the pair is absent."""
        self._require_entity(entity_id)
        self._require_property(property_id)
        return self._objects.get((entity_id, property_id))

    def properties_of(self, entity_id: str) -> FrozenSet[str]:
        self._require_entity(entity_id)
        return self._props_of.get(entity_id, frozenset())

    def types_of(self, entity_id: str) -> FrozenSet[str]:
        """Directly asserted types, no hierarchy closure."""
        self._require_entity(entity_id)
        return self._types.get(entity_id, frozenset())

    def entities_of_type(self, type_id: str) -> FrozenSet[str]:
        """Entities directly asserted to have `type_id`."""
        self._require_entity(type_id)
        return self._members.get(type_id, frozenset())

    def supertypes(self, type_id: str) -> FrozenSet[str]:
        """Transitive subclass-of closure of a type (excluding the type itself)."""
        self._require_entity(type_id)
        seen: Set[str] = set()
        frontier = list(self._subclass_of.get(type_id, ()))
        while frontier:
            current = frontier.pop()
            if current in seen:
                continue
            seen.add(current)
            frontier.extend(self._subclass_of.get(current, ()))
        seen.discard(type_id)
        return frozenset(seen)

    def types_closure(self, entity_id: str) -> FrozenSet[str]:
        """Direct types plus all their supertypes."""
        closed: Set[str] = set()
        for type_id in self.types_of(entity_id):
            closed.add(type_id)
            closed |= self.supertypes(type_id)
        return frozenset(closed)

    def resolve_label(self, text: str) -> FrozenSet[str]:
        """Entities whose label or any alias equals `text` (case-insensitive, whitespace-collapsed)."""
        return self._surface.get(normalize_text(text), frozenset())

    def surface_forms(self) -> Iterator[Tuple[str, str]]:
        """(normalized surface form, entity id) pairs for labels and aliases."""
        for form in sorted(self._surface):
            for entity_id in sorted(self._surface[form]):
                yield form, entity_id

    # ------------------------------------------------------------------
    # Serialization
    # ------------------------------------------------------------------

    def to_tsv(self) -> str:
        lines: List[str] = ["# knowledge base"]
        for entity in self.entities():
            lines.append("\t".join(["E", entity.id, entity.label, "|".join(entity.aliases)]))
        for property_id in sorted(self._properties):
            lines.append("\t".join(["P", property_id, self._properties[property_id]]))
        for entity_id in sorted(self._types):
            for type_id in sorted(self._types[entity_id]):
                lines.append("\t".join(["T", entity_id, type_id]))
        for type_id in sorted(self._subclass_of):
            for parent in sorted(self._subclass_of[type_id]):
                lines.append("\t".join(["C", type_id, parent]))
        for triple in self.triples():
            fields = ["S", triple.subject, triple.property, triple.object.code, triple.object.value_field()]
            if triple.object.unit:
                fields.append(triple.object.unit)
            lines.append("\t".join(fields))
        return "\n".join(lines) + "\n"

    def __eq__(self, other):
        if not isinstance(other, KnowledgeBase):
            return NotImplemented
        return (
            dict(self._entities) == dict(other._entities)
            and dict(self._properties) == dict(other._properties)
            and dict(self._types) == dict(other._types)
            and dict(self._subclass_of) == dict(other._subclass_of)
            and dict(self._objects) == dict(other._objects)
        )

    __hash__ = None

    def __repr__(self):
        return (
            f"KnowledgeBase(entities={len(self._entities)}, properties={len(self._properties)}, "
            f"triples={len(self._objects)})"
        )


class KnowledgeBaseBuilder:
    """
    Accumulates records and validates them into a KnowledgeBase.

    Declarations may appear in any order; references are checked in `build`.
    Every record remembers its source line so errors can point at it.
    """

    def __init__(self, path: Optional[str] = None):
        self.path = path
        self._entities: Dict[str, Entity] = {}
        self._properties: Dict[str, str] = {}
        self._types: Dict[str, Set[str]] = defaultdict(set)
        self._subclass_of: Dict[str, Set[str]] = defaultdict(set)
        self._objects: Dict[Tuple[str, str], ObjectValue] = {}
        self._declared_at: Dict[str, Optional[int]] = {}
        self._references: List[Tuple[str, str, Optional[int]]] = []

    def _error(self, cls, message: str, line_no: Optional[int]):
        return cls(message, line_no=line_no, path=self.path)

    def _declare(self, identifier: str, line_no: Optional[int]):
        if not identifier:
            raise self._error(KbFormatError, "Empty identifier", line_no)
        if identifier in self._declared_at:
            where = self._declared_at[identifier]
            raise self._error(
                KbFormatError,
                f"Identifier {identifier!r} declared twice" + (f" (first at line {where})" if where else ""),
                line_no,
            )
        self._declared_at[identifier] = line_no

    def add_entity(self, entity_id: str, label: str, aliases: Iterable[str] = (), line_no: Optional[int] = None):
        self._declare(entity_id, line_no)
        cleaned = tuple(a for a in aliases if a)
        self._entities[entity_id] = Entity(entity_id, label, cleaned)
        return self

    def add_property(self, property_id: str, label: str, line_no: Optional[int] = None):
        self._declare(property_id, line_no)
        self._properties[property_id] = label
        return self

    def add_type(self, entity_id: str, type_id: str, line_no: Optional[int] = None):
        self._references.append(("entity", entity_id, line_no))
        self._references.append(("entity", type_id, line_no))
        self._types[entity_id].add(type_id)
        return self

    def add_subclass(self, type_id: str, parent_id: str, line_no: Optional[int] = None):
        self._references.append(("entity", type_id, line_no))
        self._references.append(("entity", parent_id, line_no))
        self._subclass_of[type_id].add(parent_id)
        return self

    def add_triple(self, subject: str, property_id: str, obj: ObjectValue, line_no: Optional[int] = None):
        key = (subject, property_id)
        existing = self._objects.get(key)
        if existing is not None and existing != obj:
            raise self._error(
                DuplicateObjectError,
                f"Property {property_id!r} of {subject!r} already has object "
                f"{existing.value_field()!r}; got {obj.value_field()!r}",
                line_no,
            )
        self._references.append(("entity", subject, line_no))
        self._references.append(("property", property_id, line_no))
        if obj.kind == "entity":
            self._references.append(("entity", obj.entity, line_no))
        self._objects[key] = obj
        return self

    def build(self) -> KnowledgeBase:
        for kind, identifier, line_no in self._references:
            registry = self._entities if kind == "entity" else self._properties
            if identifier not in registry:
                raise self._error(DanglingReferenceError, f"Reference to undeclared {kind} {identifier!r}", line_no)
        return KnowledgeBase(
            entities=self._entities,
            properties=self._properties,
            types={e: frozenset(ts) for e, ts in self._types.items()},
            subclass_of={t: frozenset(ps) for t, ps in self._subclass_of.items()},
            objects=self._objects,
        )


def parse_object(kind_code: str, value: str, unit: Optional[str] = None) -> ObjectValue:
    """Build an ObjectValue from the TSV kind/value/unit fields."""
    if kind_code not in KIND_CODES:
        raise ValueError(f"Unknown object kind {kind_code!r} (expected one of e, n, s, t)")
    kind = KIND_CODES[kind_code]
    if unit is not None and kind != "number":
        raise ValueError("Only numeric objects may carry a unit")
    if kind == "entity":
        return ObjectValue.entity_ref(value)
    if kind == "number":
        try:
            number = float(value)
        except ValueError:
            raise ValueError(f"Not a number: {value!r}")
        return ObjectValue.numeric(number, unit or None)
    if kind == "string":
        return ObjectValue.string(value)
    return ObjectValue.time_value(value)


def parse_kb_lines(lines: Iterable[str], path: Optional[str] = None) -> KnowledgeBase:
    """
    Parse KB TSV records.

    Args:
        lines: Iterable of raw lines (with or without trailing newlines)
        path: Source name used in error messages

    Returns:
        Validated KnowledgeBase
    """
    builder = KnowledgeBaseBuilder(path=path)

    for line_no, raw in enumerate(lines, start=1):
        line = raw.rstrip("\r\n")
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split("\t")
        record = fields[0]
        try:
            if record == "E":
                if len(fields) not in (3, 4):
                    raise ValueError("Entity record needs id, label and optional aliases")
                aliases = fields[3].split("|") if len(fields) == 4 else []
                builder.add_entity(fields[1], fields[2], aliases, line_no=line_no)
            elif record == "T":
                if len(fields) != 3:
                    raise ValueError("Type record needs entity id and type id")
                builder.add_type(fields[1], fields[2], line_no=line_no)
            elif record == "P":
                if len(fields) != 3:
                    raise ValueError("Property record needs id and label")
                builder.add_property(fields[1], fields[2], line_no=line_no)
            elif record == "C":
                if len(fields) != 3:
                    raise ValueError("Subclass record needs type id and parent type id")
                builder.add_subclass(fields[1], fields[2], line_no=line_no)
            elif record == "S":
                if len(fields) not in (5, 6):
                    raise ValueError("Triple record needs subject, property, kind, value and optional unit")
                unit = fields[5] if len(fields) == 6 and fields[5] else None
                obj = parse_object(fields[3], fields[4], unit)
                builder.add_triple(fields[1], fields[2], obj, line_no=line_no)
            else:
                raise ValueError(f"Unknown record type {record!r}")
        except KbFormatError:
            raise
        except ValueError as e:
            raise KbFormatError(str(e), line_no=line_no, path=path) from e

    return builder.build()


def load_kb(path) -> KnowledgeBase:
    """
    Load a knowledge base from the TSV format.

    Args:
        path: Path to a UTF-8 TSV file

    Returns:
        KnowledgeBase
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Knowledge base file not found: {path}")

    with open(path, 'r', encoding='utf-8') as f:
        kb = parse_kb_lines(f, path=str(path))

    logger.info("Loaded %r from %s", kb, path)
    return kb


def dump_kb(kb: KnowledgeBase, path):
    """Write `kb` in the TSV format."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        f.write(kb.to_tsv())


def property_lookup(kb: KnowledgeBase, entity_id: str, property_id: str) -> Optional[ObjectValue]:
    return kb.property_lookup(entity_id, property_id)


def types_of(kb: KnowledgeBase, entity_id: str) -> FrozenSet[str]:
    return kb.types_of(entity_id)


def entities_of_type(kb: KnowledgeBase, type_id: str) -> FrozenSet[str]:
    return kb.entities_of_type(type_id)


def resolve_label(kb: KnowledgeBase, text: str) -> FrozenSet[str]:
    return kb.resolve_label(text)
