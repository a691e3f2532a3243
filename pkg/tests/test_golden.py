"""
Frozen outputs on the micro-benchmark under mock clients.

Set ROWCOMP_UPDATE_GOLDEN=1 to rewrite the files after an audited change.
"""

import os
from pathlib import Path

import pytest

from src.gapfill import ContextCache, fill_cell
from src.interpret import Table, link_main_column
from src.pipeline import _link, cmd_link, load_resources
from src.suggest import suggest_subjects
from src.utils import dumps_json, save_json

ROOT = Path(__file__).resolve().parent.parent
MICRO = ROOT / "benchmarks" / "micro"
GOLDEN = MICRO / "golden"


def check_golden(data, name):
    path = GOLDEN / name
    if os.environ.get("ROWCOMP_UPDATE_GOLDEN") == "1":
        save_json(data, path)
    assert dumps_json(data) + "\n" == path.read_text(encoding="utf-8")


@pytest.mark.parametrize("table", ["t01_rappers_pseudonym", "t06_country_capitals"])
def test_link_report_matches_golden(micro_config, table):
    report = cmd_link(MICRO / "tables" / table / "table.csv", micro_config)
    check_golden(report, f"link_{table}.json")


def test_suggestion_sources_match_golden(micro_config):
    res = load_resources(micro_config)
    linked = _link(res, Table.from_csv(MICRO / "tables" / "t01_rappers_pseudonym" / "table.csv").head(3), None)
    ranked = suggest_subjects(res.kb, res.idx, res.clients.generator, linked, micro_config.suggestion)
    check_golden({s.entity: s.source.value for s in ranked}, "suggestion_sources_t01_rappers_pseudonym.json")


def test_held_out_fills_match_golden(micro_config):
    res = load_resources(micro_config)
    table = Table.from_csv(MICRO / "tables" / "t02_rappers_birthplace" / "table.csv")
    linked = _link(res, table.head(3), None)
    subjects = link_main_column(res.kb, table, micro_config.linking.fuzzy_threshold).main_column
    contexts = ContextCache()

    fills = {}
    for row in (3, 4):
        values = fill_cell(res.kb, linked, subjects[row], 1, res.clients, micro_config.gap_filling, contexts)
        fills[f"{row},1"] = [f.value for f in values]
    check_golden(fills, "fills_t02_rappers_birthplace.json")
