"""
Shared fixtures: the bundled micro-benchmark and a few hand-written KBs.
"""

from pathlib import Path

import pytest

from src.config import PipelineConfig
from src.embed import load_embeddings
from src.interpret import Table
from src.kb import load_kb, parse_kb_lines

ROOT = Path(__file__).resolve().parent.parent
MICRO = ROOT / "benchmarks" / "micro"
TABLES = MICRO / "tables"

TINY_KB = """\
# tiny knowledge base
E\tT1\tanimal
E\tT2\tmammal
E\tT3\tdog\thound
C\tT3\tT2
C\tT2\tT1
E\tE1\tRex\tRexy|King Rex
E\tE2\tFido
E\tH\tHeight
T\tE1\tT3
T\tE2\tT3
P\tP1\tweight
P\tP2\towner
S\tE1\tP1\tn\t30\tkg
S\tE2\tP1\tn\t12.5\tkg
S\tE1\tP2\te\tH
"""


@pytest.fixture
def tiny_kb():
    return parse_kb_lines(TINY_KB.splitlines(), path="tiny.tsv")


@pytest.fixture(scope="session")
def micro_kb():
    return load_kb(MICRO / "kb.tsv")


@pytest.fixture(scope="session")
def micro_idx():
    return load_embeddings(MICRO / "embeddings.txt")


@pytest.fixture
def micro_config():
    config = PipelineConfig.from_yaml(ROOT / "configs" / "micro_benchmark.yaml")
    config.kb_path = str(MICRO / "kb.tsv")
    config.embeddings_path = str(MICRO / "embeddings.txt")
    config.clients.generator = f"mock:{MICRO / 'generations.json'}"
    config.clients.search = f"mock:{MICRO / 'search.json'}"
    return config


@pytest.fixture
def micro_table():
    """Loader for micro-benchmark tables, optionally keeping only the top `seeds` rows."""
    def load(name: str, seeds=None) -> Table:
        table = Table.from_csv(TABLES / name / "table.csv")
        return table.head(seeds) if seeds is not None else table
    return load


@pytest.fixture
def micro_dir():
    return MICRO


@pytest.fixture
def repo_root():
    return ROOT
