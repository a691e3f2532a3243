"""
Configuration management for the row-completion pipeline.
Handles loading and validation of YAML (or JSON) config files.
"""

import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import yaml

from .errors import ConfigError


@dataclass
class ClientConfig:
    """External-service selection: `mock:<path>` or `http`."""
    generator: str = "mock:benchmarks/micro/generations.json"
    search: str = "mock:benchmarks/micro/search.json"
    encoder: str = "hashing"
    timeout_s: float = 30.0
    max_attempts: int = 3


@dataclass
class LinkingConfig:
    """Main-column and property linking."""
    threshold_policy: Union[str, float] = "majority"
    fuzzy_threshold: float = 0.2
    numeric_tolerance: float = 1e-9
    outlier_remover: str = "isolation_forest"
    min_range_support: int = 3
    isolation_trees: int = 100
    isolation_max_samples: int = 256
    isolation_contamination: float = 0.05
    iqr_factor: float = 1.5
    n_neighbors: int = 10


@dataclass
class SuggestionConfig:
    """Candidate generation and ranking."""
    k_per_seed: int = 1000
    detector: str = "knn"
    contamination: float = 0.05
    high_cardinality_types: List[str] = field(default_factory=lambda: ["human"])
    feature2_normalization: str = "seed"
    samples: int = 100
    temperature: float = 0.7
    max_sentences: int = 1


@dataclass
class GapFillingConfig:
    """Ranked gap filling."""
    fill_threshold: float = 0.05
    sim_threshold: float = 0.5
    context_mode: str = "mean"
    samples: int = 100
    temperature: float = 0.7
    max_sentences: int = 1
    restrict_sources: List[str] = field(default_factory=lambda: ["wikipedia", "news"])


@dataclass
class EvaluationConfig:
    """Benchmark harness."""
    seed_rows: int = 3
    suggestions_requested: int = 10
    recall_cutoffs: List[int] = field(default_factory=lambda: [50, 1000])
    fill_ks: List[int] = field(default_factory=lambda: [1, 3])
    stability_pool: int = 5
    workers: int = 4


@dataclass
class ReproducibilityConfig:
    """Reproducibility configuration."""
    seed: int = 42


@dataclass
class PipelineConfig:
    """Complete pipeline configuration."""
    kb_path: str = "benchmarks/micro/kb.tsv"
    embeddings_path: str = "benchmarks/micro/embeddings.txt"
    clients: ClientConfig = field(default_factory=ClientConfig)
    linking: LinkingConfig = field(default_factory=LinkingConfig)
    suggestion: SuggestionConfig = field(default_factory=SuggestionConfig)
    gap_filling: GapFillingConfig = field(default_factory=GapFillingConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    reproducibility: ReproducibilityConfig = field(default_factory=ReproducibilityConfig)
    name: str = "default"
    description: str = ""

    @classmethod
    def from_dict(cls, config_dict: Dict[str, Any]) -> 'PipelineConfig':
        """Create config from dictionary."""
        config_dict = dict(config_dict or {})
        sections = {
            'clients': ClientConfig,
            'linking': LinkingConfig,
            'suggestion': SuggestionConfig,
            'gap_filling': GapFillingConfig,
            'evaluation': EvaluationConfig,
            'reproducibility': ReproducibilityConfig,
        }
        kwargs: Dict[str, Any] = {}
        for key, section_cls in sections.items():
            try:
                kwargs[key] = section_cls(**(config_dict.pop(key, None) or {}))
            except TypeError as e:
                raise ConfigError(f"Invalid '{key}' section: {e}")
        known = {'kb_path', 'embeddings_path', 'name', 'description'}
        unknown = set(config_dict) - known
        if unknown:
            raise ConfigError(f"Unknown config keys: {sorted(unknown)}")
        kwargs.update(config_dict)
        config = cls(**kwargs)
        config.validate()
        return config

    @classmethod
    def from_yaml(cls, yaml_path: str) -> 'PipelineConfig':
        """Load config from a YAML or JSON file."""
        yaml_path = Path(yaml_path)

        if not yaml_path.exists():
            raise FileNotFoundError(f"Config file not found: {yaml_path}")

        with open(yaml_path, 'r', encoding='utf-8') as f:
            try:
                config_dict = yaml.safe_load(f)
            except yaml.YAMLError as e:
                raise ConfigError(f"Cannot parse {yaml_path}: {e}")

        return cls.from_dict(config_dict or {})

    def to_dict(self) -> Dict[str, Any]:
        """Convert config to dictionary."""
        return asdict(self)

    def save(self, output_path: str):
        """Save config to YAML file."""
        output_path = Path(output_path)
        output_path.parent.mkdir(parents=True, exist_ok=True)

        with open(output_path, 'w', encoding='utf-8') as f:
            yaml.dump(self.to_dict(), f, default_flow_style=False, sort_keys=False)

    def link_threshold(self, linked_rows: int) -> float:
        """Resolve the property-linking threshold for a table with `linked_rows` linked subjects."""
        policy = self.linking.threshold_policy
        if isinstance(policy, str) and policy == "majority":
            return float(-(-linked_rows // 2))
        return float(policy)

    def validate(self):
        """Raise ConfigError on any out-of-range field."""
        def check(condition: bool, message: str):
            if not condition:
                raise ConfigError(message)

        policy = self.linking.threshold_policy
        if isinstance(policy, str):
            check(policy == "majority", f"threshold_policy must be 'majority' or a number, got {policy!r}")
        else:
            check(policy > 0, "threshold_policy must be positive")
        check(0.0 <= self.linking.fuzzy_threshold <= 1.0, "fuzzy_threshold must be in [0, 1]")
        check(self.linking.numeric_tolerance >= 0, "numeric_tolerance must be non-negative")
        check(self.linking.outlier_remover in ("isolation_forest", "iqr"),
              f"outlier_remover must be isolation_forest or iqr, got {self.linking.outlier_remover!r}")
        check(self.linking.min_range_support >= 1, "min_range_support must be >= 1")
        check(0.0 < self.linking.isolation_contamination <= 0.5, "isolation_contamination must be in (0, 0.5]")
        check(self.linking.n_neighbors >= 1, "n_neighbors must be >= 1")

        check(self.suggestion.k_per_seed >= 1, "k_per_seed must be >= 1")
        check(self.suggestion.detector in ("knn", "lof"),
              f"detector must be knn or lof, got {self.suggestion.detector!r}")
        check(0.01 <= self.suggestion.contamination <= 0.06, "contamination must be in [0.01, 0.06]")
        check(self.suggestion.feature2_normalization in ("seed", "candidate"),
              "feature2_normalization must be seed or candidate")

        for section in (self.suggestion, self.gap_filling):
            check(section.samples >= 1, "samples must be >= 1")
            check(0.0 <= section.temperature <= 2.0, "temperature must be in [0, 2]")
            check(section.max_sentences >= 1, "max_sentences must be >= 1")

        check(0.0 <= self.gap_filling.fill_threshold <= 1.0, "fill_threshold must be in [0, 1]")
        check(-1.0 <= self.gap_filling.sim_threshold <= 1.0, "sim_threshold must be in [-1, 1]")
        check(self.gap_filling.context_mode in ("mean", "max"), "context_mode must be mean or max")

        check(self.evaluation.seed_rows >= 1, "seed_rows must be >= 1")
        check(self.evaluation.suggestions_requested >= 0, "suggestions_requested must be >= 0")
        check(all(n >= 0 for n in self.evaluation.recall_cutoffs), "recall_cutoffs must be >= 0")
        check(all(k >= 1 for k in self.evaluation.fill_ks), "fill_ks must be >= 1")
        check(self.evaluation.workers >= 1, "workers must be >= 1")
        check(self.clients.max_attempts >= 1, "max_attempts must be >= 1")

    def print_summary(self, stream=None):
        """Print configuration summary to stderr."""
        out = stream or sys.stderr
        print("\n" + "=" * 50, file=out)
        print("Configuration Summary", file=out)
        print("=" * 50, file=out)
        print(f"Name: {self.name}", file=out)
        if self.description:
            print(f"Description: {self.description}", file=out)
        print(f"KB: {self.kb_path}", file=out)
        print(f"Embeddings: {self.embeddings_path}", file=out)

        print(f"\nClients:", file=out)
        print(f"  Generator: {self.clients.generator}", file=out)
        print(f"  Search: {self.clients.search}", file=out)
        print(f"  Encoder: {self.clients.encoder}", file=out)

        print(f"\nLinking:", file=out)
        print(f"  Threshold policy: {self.linking.threshold_policy}", file=out)
        print(f"  Outlier remover: {self.linking.outlier_remover}", file=out)

        print(f"\nSuggestion:", file=out)
        print(f"  k per seed: {self.suggestion.k_per_seed}", file=out)
        print(f"  Detector: {self.suggestion.detector} (contamination {self.suggestion.contamination})", file=out)

        print(f"\nGap filling:", file=out)
        print(f"  Fill threshold: {self.gap_filling.fill_threshold}", file=out)
        print(f"  Context threshold: {self.gap_filling.sim_threshold} ({self.gap_filling.context_mode})", file=out)

        print(f"\nReproducibility:", file=out)
        print(f"  Seed: {self.reproducibility.seed}", file=out)
        print("=" * 50 + "\n", file=out)


def load_config(config_path: Optional[str] = None) -> PipelineConfig:
    """
    Load configuration from a YAML file, or the defaults when no path is given.

    Args:
        config_path: Path to YAML config file

    Returns:
        PipelineConfig object
    """
    if config_path is None:
        config = PipelineConfig()
        config.validate()
        return config
    return PipelineConfig.from_yaml(config_path)
