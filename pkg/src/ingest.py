"""
Convert a Wikidata-style N-Triples export into the KB TSV format.

Each line is parsed on its own with rdflib so errors carry a line number.
Labels come from rdfs:label or schema:name, aliases from skos:altLabel,
type assertions from P31 and subclass edges from P279. Every other
predicate becomes a single-valued property. A second, different value for
the same subject and property is rejected like a duplicate KB object,
unless the caller opts into keeping the first value.
"""

import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Set, Tuple

from rdflib import Graph, Literal, URIRef
from rdflib.namespace import RDFS, SKOS, XSD

from .errors import IngestError
from .kb import KnowledgeBase, KnowledgeBaseBuilder, ObjectValue, dump_kb, load_kb

logger = logging.getLogger(__name__)

SCHEMA_NAME = URIRef("http://schema.org/name")
LABEL_PREDICATES = {RDFS.label, SCHEMA_NAME}
ALIAS_PREDICATES = {SKOS.altLabel}
TYPE_PROPERTY = "P31"
SUBCLASS_PROPERTY = "P279"

NUMERIC_TYPES = {XSD.integer, XSD.decimal, XSD.double, XSD.float, XSD.int, XSD.long,
                 XSD.nonNegativeInteger, XSD.positiveInteger}
DATE_TYPES = {XSD.date, XSD.dateTime, XSD.gYear}

_YEAR_RE = re.compile(r"^[+-]?\d{4}")
_DATE_RE = re.compile(r"^[+-]?\d{4}-\d{2}-\d{2}")


def local_name(iri) -> str:
    """Last path or fragment segment of an IRI (`.../entity/Q42` -> `Q42`)."""
    text = str(iri)
    for separator in ("#", "/"):
        if separator in text:
            text = text.rsplit(separator, 1)[1]
    return text


def _clean(text: str) -> str:
    return " ".join(str(text).replace("|", " ").split())


def _literal_text(literal: Literal) -> Tuple[Optional[str], str]:
    return literal.language, _clean(literal)


def literal_to_object(literal: Literal) -> ObjectValue:
    if literal.datatype in NUMERIC_TYPES:
        return ObjectValue.numeric(float(literal))
    if literal.datatype in DATE_TYPES:
        pattern = _YEAR_RE if literal.datatype == XSD.gYear else _DATE_RE
        match = pattern.match(str(literal).strip())
        if not match:
            raise ValueError(f"Unrecognized date literal {str(literal)!r}")
        return ObjectValue.time_value(match.group(0))
    return ObjectValue.string(_clean(literal))


@dataclass
class IngestStats:
    lines: int = 0
    triples: int = 0
    dropped_values: int = 0


def _parse_line(line: str, line_no: int):
    graph = Graph()
    try:
        graph.parse(data=line, format="nt")
    except Exception as e:
        raise IngestError(f"Cannot parse N-Triples line: {e}", line_no)
    statements = list(graph)
    if len(statements) != 1:
        raise IngestError(f"Expected one statement, got {len(statements)}", line_no)
    return statements[0]


def ingest_ntriples(
    lines,
    preferred_language: str = "en",
    keep_first: bool = False,
) -> Tuple[KnowledgeBase, IngestStats]:
    """
    Build a KnowledgeBase from N-Triples lines.

    Args:
        lines: Iterable of raw lines
        preferred_language: Language tag preferred for labels
        keep_first: Keep the first of several values of a property (counted
            in `dropped_values`) instead of raising IngestError

    Returns:
        (KnowledgeBase, IngestStats)
    """
    stats = IngestStats()
    labels: Dict[str, Tuple[int, str]] = {}
    aliases: Dict[str, List[str]] = {}
    types: Dict[str, Set[str]] = {}
    subclasses: Dict[str, Set[str]] = {}
    objects: Dict[Tuple[str, str], Tuple[ObjectValue, int]] = {}
    predicates: Set[str] = set()
    referenced: Set[str] = set()

    for line_no, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        stats.lines += 1
        subject, predicate, obj = _parse_line(line, line_no)
        if not isinstance(subject, URIRef):
            raise IngestError("Blank-node subjects are not supported", line_no)
        s = local_name(subject)

        if predicate in LABEL_PREDICATES or predicate in ALIAS_PREDICATES:
            if not isinstance(obj, Literal):
                raise IngestError("Labels must be literals", line_no)
            language, text = _literal_text(obj)
            if not text:
                continue
            if predicate in LABEL_PREDICATES:
                rank = 0 if language in (None, preferred_language) else 1
                if s not in labels or rank < labels[s][0]:
                    labels[s] = (rank, text)
            elif text not in aliases.setdefault(s, []):
                aliases[s].append(text)
            continue

        p = local_name(predicate)
        if p in (TYPE_PROPERTY, SUBCLASS_PROPERTY):
            if not isinstance(obj, URIRef):
                raise IngestError(f"{p} objects must be IRIs", line_no)
            target = types if p == TYPE_PROPERTY else subclasses
            target.setdefault(s, set()).add(local_name(obj))
            referenced.update((s, local_name(obj)))
            continue

        if isinstance(obj, URIRef):
            value = ObjectValue.entity_ref(local_name(obj))
            referenced.add(value.entity)
        elif isinstance(obj, Literal):
            try:
                value = literal_to_object(obj)
            except (TypeError, ValueError) as e:
                raise IngestError(str(e), line_no)
        else:
            raise IngestError("Blank-node objects are not supported", line_no)

        referenced.add(s)
        predicates.add(p)
        key = (s, p)
        if key in objects:
            first, first_line = objects[key]
            if first != value:
                if not keep_first:
                    raise IngestError(
                        f"{s} already has {p} = {first.value_field()!r} (line {first_line}); "
                        f"got {value.value_field()!r}",
                        line_no,
                    )
                stats.dropped_values += 1
                logger.warning("line %d: %s already has a value for %s; keeping the first", line_no, s, p)
            continue
        objects[key] = (value, line_no)
        stats.triples += 1

    builder = KnowledgeBaseBuilder(path="<ingest>")
    for property_id in sorted(predicates):
        builder.add_property(property_id, labels.get(property_id, (0, property_id))[1])
    for entity_id in sorted((referenced | set(labels) | set(aliases)) - predicates):
        builder.add_entity(entity_id, labels.get(entity_id, (0, entity_id))[1], aliases.get(entity_id, []))
    for entity_id in sorted(types):
        for type_id in sorted(types[entity_id]):
            builder.add_type(entity_id, type_id)
    for type_id in sorted(subclasses):
        for parent in sorted(subclasses[type_id]):
            builder.add_subclass(type_id, parent)
    for (s, p), (value, line_no) in sorted(objects.items()):
        builder.add_triple(s, p, value, line_no=line_no)
    return builder.build(), stats


def ingest_file(input_path, output_path, keep_first: bool = False) -> Dict:
    """
    Convert an N-Triples file to a KB TSV file and validate it by reloading.

    Args:
        keep_first: Keep the first of conflicting property values instead of failing

    Returns:
        Summary dict for the CLI
    """
    input_path, output_path = Path(input_path), Path(output_path)
    if not input_path.exists():
        raise FileNotFoundError(f"Input file not found: {input_path}")
    with open(input_path, 'r', encoding='utf-8') as f:
        kb, stats = ingest_ntriples(f, keep_first=keep_first)
    dump_kb(kb, output_path)
    reloaded = load_kb(output_path)
    logger.info("Ingested %d lines into %r", stats.lines, reloaded)
    return {
        "input": input_path.name,
        "output": output_path.name,
        "lines": stats.lines,
        "entities": reloaded.num_entities,
        "properties": len(reloaded.property_ids),
        "triples": reloaded.num_triples,
        "dropped_values": stats.dropped_values,
    }
