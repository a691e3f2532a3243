import pytest

from src.errors import IngestError
from src.ingest import ingest_file, ingest_ntriples, local_name
from src.kb import ObjectValue, load_kb

WD = "http://www.wikidata.org/entity/"
WDT = "http://www.wikidata.org/prop/direct/"
LABEL = "<http://www.w3.org/2000/01/rdf-schema#label>"
ALT = "<http://www.w3.org/2004/02/skos/core#altLabel>"
XSD = "http://www.w3.org/2001/XMLSchema#"

EXPORT = [
    "# sample export",
    f'<{WD}Q15935> {LABEL} "Kanye Ouest"@fr .',
    f'<{WD}Q15935> {LABEL} "Kanye West"@en .',
    f'<{WD}Q15935> {ALT} "Ye"@en .',
    f'<{WD}Q15935> <{WDT}P31> <{WD}Q5> .',
    f'<{WD}Q5> {LABEL} "human"@en .',
    f'<{WD}Q5> <{WDT}P279> <{WD}Q215627> .',
    f'<{WD}Q15935> <{WDT}P19> <{WD}Q1297> .',
    f'<{WD}Q1297> {LABEL} "Chicago"@en .',
    f'<{WD}Q15935> <{WDT}P19> <{WD}Q65> .',
    f'<{WD}Q15935> <{WDT}P569> "1977-06-08"^^<{XSD}date> .',
    f'<{WD}Q15935> <{WDT}P2048> "1.73"^^<{XSD}decimal> .',
    f'<{WD}Q15935> <{WDT}P742> "Yeezy" .',
    f'<{WDT}P19> {LABEL} "place of birth"@en .',
    "",
]


def test_local_name():
    assert local_name(f"{WD}Q42") == "Q42"
    assert local_name("http://example.org/vocab#name") == "name"


def test_ingest_rejects_a_second_value_by_default():
    with pytest.raises(IngestError) as excinfo:
        ingest_ntriples(EXPORT)
    # the Q65 birthplace conflicts with Q1297 from line 8
    assert excinfo.value.line_no == 10
    assert "line 8" in str(excinfo.value)


def test_ingest_builds_a_kb():
    kb, stats = ingest_ntriples(EXPORT, keep_first=True)

    assert kb.label("Q15935") == "Kanye West"
    assert kb.aliases("Q15935") == ("Ye",)
    assert kb.types_of("Q15935") == {"Q5"}
    assert "Q215627" in kb.types_closure("Q15935")
    assert kb.property_label("P19") == "place of birth"
    assert kb.property_label("P569") == "P569"

    assert kb.property_lookup("Q15935", "P19") == ObjectValue.entity_ref("Q1297")
    assert kb.property_lookup("Q15935", "P569") == ObjectValue.time_value("1977-06-08")
    assert kb.property_lookup("Q15935", "P2048") == ObjectValue.numeric(1.73)
    assert kb.property_lookup("Q15935", "P742") == ObjectValue.string("Yeezy")

    assert stats.lines == 13
    assert stats.triples == 4
    assert stats.dropped_values == 1


def test_repeated_identical_value_is_not_counted_as_dropped():
    line = f'<{WD}Q1> <{WDT}P742> "x" .'
    _, stats = ingest_ntriples([line, line])
    assert stats.triples == 1 and stats.dropped_values == 0


def test_malformed_line_reports_its_number():
    lines = ["# header", f"<{WD}Q1> <{WDT}P742> ."]
    with pytest.raises(IngestError) as excinfo:
        ingest_ntriples(lines)
    assert excinfo.value.line_no == 2


def test_type_assertions_need_iri_objects():
    with pytest.raises(IngestError) as excinfo:
        ingest_ntriples([f'<{WD}Q1> <{WDT}P31> "human" .'])
    assert excinfo.value.line_no == 1


def test_ingest_file_writes_a_loadable_kb(tmp_path):
    source = tmp_path / "dump.nt"
    source.write_text("\n".join(EXPORT) + "\n", encoding="utf-8")
    target = tmp_path / "kb.tsv"

    summary = ingest_file(source, target, keep_first=True)

    assert summary["input"] == "dump.nt"
    assert summary["dropped_values"] == 1
    assert summary["triples"] == 4
    # Q15935, Q5, Q215627, Q1297 and the dropped value's Q65
    assert summary["entities"] == 5
    assert load_kb(target).label("Q1297") == "Chicago"


def test_ingest_file_fails_on_conflicting_values(tmp_path):
    source = tmp_path / "dump.nt"
    source.write_text("\n".join(EXPORT) + "\n", encoding="utf-8")
    target = tmp_path / "kb.tsv"
    with pytest.raises(IngestError):
        ingest_file(source, target)
    assert not target.exists()


def test_ingest_file_requires_input(tmp_path):
    with pytest.raises(FileNotFoundError):
        ingest_file(tmp_path / "absent.nt", tmp_path / "kb.tsv")
