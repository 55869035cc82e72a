"""Pipeline configuration file and embedding-stack presets.

One INI-style config drives every CLI command. Unknown sections or keys
are rejected (typo safety), and all randomness flows from the single
``[run] seed``. The presets mirror the five submitted runs:

* s1  char + n-gram general + n-gram domain
* s2  char-LM + n-gram general
* s3  char-LM + n-gram general + n-gram domain
* s4  min-pooled char-LM + n-gram general + n-gram domain
* s5  weighted-vote ensemble of s1..s4 outputs (not a trainable stack)
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import DataError, DeidseqError
from .corpusgen import DEFAULT_CLASSES, GeneratorConfig
from .embeddings import (
    CharEmbedder,
    CharLMTrainConfig,
    EmbeddingStack,
    NGramEmbedder,
    PooledCharLMEmbedder,
    load_charlm,
    load_text_vectors,
)
from .ensemble import EnsembleConfig
from .postprocess import DEFAULT_RULES, Rule, compile_rule
from .tagger import TrainConfig


class ConfigError(DeidseqError):
    """Bad configuration or usage (exit code 1 in the CLI)."""


PRESETS = {
    "s1": ("char", "ngram_general", "ngram_domain"),
    "s2": ("charlm", "ngram_general"),
    "s3": ("charlm", "ngram_general", "ngram_domain"),
    "s4": ("pooled_charlm", "ngram_general", "ngram_domain"),
}

_SCHEMA = {
    "run": {"seed"},
    "corpus": {"dir"},
    "generate": {"documents", "augmentation", "classes"},
    "charlm": {"hidden", "char_dim", "window", "epochs", "batch_size", "learning_rate", "checkpoint"},
    "stack": {
        "preset",
        "char_hidden",
        "char_dim",
        "ngram_dim",
        "ngram_buckets",
        "ngram_min",
        "ngram_max",
        "vectors_general",
        "vectors_domain",
    },
    "train": {"learning_rate", "batch_size", "dropout", "max_epochs", "patience", "hidden"},
    "rules": None,  # free-form: 'enabled' plus custom rule definitions
    "ensemble": {"weights", "threshold", "comparison"},
    "output": {"dir"},
}


@dataclass
class PipelineConfig:
    path: Path | None
    seed: int = 13
    corpus_dir: Path = Path("runs/corpus")
    output_dir: Path = Path("runs/out")
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    charlm: CharLMTrainConfig = field(default_factory=CharLMTrainConfig)
    charlm_checkpoint: Path | None = None
    preset: str = "s1"
    char_hidden: int = 25
    char_dim: int = 50
    ngram_dim: int = 50
    ngram_buckets: int = 2**17
    ngram_range: tuple[int, int] = (3, 6)
    vectors_general: Path | None = None
    vectors_domain: Path | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    hidden: int = 256
    rules_enabled: bool = True
    rules: tuple[Rule, ...] = DEFAULT_RULES
    ensemble: EnsembleConfig | None = None
    config_hash: str = ""

    @classmethod
    def load(cls, path: str | Path | None) -> "PipelineConfig":
        cfg = cls(path=Path(path) if path else None)
        if path is None:
            return cfg
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        raw = path.read_text(encoding="utf-8")
        cfg.config_hash = hashlib.sha256(raw.encode("utf-8")).hexdigest()
        parser = configparser.ConfigParser()
        try:
            parser.read_string(raw)
        except configparser.Error as e:
            raise ConfigError(f"cannot parse {path}: {e}") from None
        for section in parser.sections():
            if section not in _SCHEMA:
                raise ConfigError(f"unknown config section [{section}]")
            allowed = _SCHEMA[section]
            if allowed is not None:
                for key in parser[section]:
                    if key not in allowed:
                        raise ConfigError(f"unknown key '{key}' in section [{section}]")
        try:
            cfg._apply(parser)
        except (ValueError, DataError) as e:
            raise ConfigError(f"{path}: {e}") from None
        return cfg

    def _apply(self, p: configparser.ConfigParser) -> None:
        if p.has_option("run", "seed"):
            self.seed = p.getint("run", "seed")
        if p.has_option("corpus", "dir"):
            self.corpus_dir = Path(p.get("corpus", "dir"))
        if p.has_option("output", "dir"):
            self.output_dir = Path(p.get("output", "dir"))

        gen = {}
        if p.has_option("generate", "documents"):
            gen["documents"] = p.getint("generate", "documents")
        if p.has_option("generate", "augmentation"):
            gen["augmentation"] = p.getboolean("generate", "augmentation")
        if p.has_option("generate", "classes"):
            gen["classes"] = tuple(
                c.strip() for c in p.get("generate", "classes").split(",") if c.strip()
            )
        self.generator = GeneratorConfig(seed=self.seed, **gen)

        lm = {}
        for key in ("hidden", "char_dim", "window", "epochs", "batch_size"):
            if p.has_option("charlm", key):
                lm[key] = p.getint("charlm", key)
        if p.has_option("charlm", "learning_rate"):
            lm["learning_rate"] = p.getfloat("charlm", "learning_rate")
        self.charlm = CharLMTrainConfig(seed=self.seed, **lm)
        if p.has_option("charlm", "checkpoint"):
            self.charlm_checkpoint = Path(p.get("charlm", "checkpoint"))

        if p.has_option("stack", "preset"):
            self.preset = p.get("stack", "preset").strip().lower()
        for attr, key in (
            ("char_hidden", "char_hidden"),
            ("char_dim", "char_dim"),
            ("ngram_dim", "ngram_dim"),
            ("ngram_buckets", "ngram_buckets"),
        ):
            if p.has_option("stack", key):
                setattr(self, attr, p.getint("stack", key))
        if p.has_option("stack", "ngram_min") or p.has_option("stack", "ngram_max"):
            lo = p.getint("stack", "ngram_min", fallback=self.ngram_range[0])
            hi = p.getint("stack", "ngram_max", fallback=self.ngram_range[1])
            self.ngram_range = (lo, hi)
        if p.has_option("stack", "vectors_general"):
            self.vectors_general = Path(p.get("stack", "vectors_general"))
        if p.has_option("stack", "vectors_domain"):
            self.vectors_domain = Path(p.get("stack", "vectors_domain"))

        tr = {}
        if p.has_option("train", "learning_rate"):
            tr["learning_rate"] = p.getfloat("train", "learning_rate")
        if p.has_option("train", "dropout"):
            tr["dropout_p"] = p.getfloat("train", "dropout")
        for key in ("batch_size", "max_epochs", "patience"):
            if p.has_option("train", key):
                tr[key] = p.getint("train", key)
        self.train = TrainConfig(seed=self.seed, **tr)
        if p.has_option("train", "hidden"):
            self.hidden = p.getint("train", "hidden")

        if p.has_section("rules"):
            custom = []
            for key, value in p["rules"].items():
                if key == "enabled":
                    self.rules_enabled = p.getboolean("rules", "enabled")
                    continue
                parts = value.split(None, 1)
                if len(parts) != 2:
                    raise ConfigError(f"rule '{key}' must be '<PHI_CLASS> <pattern>'")
                custom.append(compile_rule(key, parts[1], parts[0]))
            if custom:
                self.rules = tuple(custom)

        if p.has_section("ensemble"):
            weights = [
                float(w) for w in p.get("ensemble", "weights", fallback="0.5,2.0,2.5,0.5").split(",")
            ]
            self.ensemble = EnsembleConfig(
                weights=weights,
                threshold=p.getfloat("ensemble", "threshold", fallback=3.0),
                comparison=p.get("ensemble", "comparison", fallback=">="),
            )

    @property
    def charlm_path(self) -> Path:
        return self.charlm_checkpoint or (self.output_dir / "charlm.npz")


def build_stack(cfg: PipelineConfig, train_docs, preset: str | None = None) -> EmbeddingStack:
    """Instantiate the embedding stack for a preset; deterministic per seed."""
    preset = (preset or cfg.preset).lower()
    if preset == "s5":
        raise ConfigError("preset s5 is the ensemble of s1..s4 predictions; it is not a trainable stack")
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r} (expected s1..s5)")
    rng = np.random.default_rng(cfg.seed)
    corpus_text = "\n".join(d.text for d in train_docs)
    members = []
    for member in PRESETS[preset]:
        if member == "char":
            members.append(CharEmbedder.create(rng, corpus_text, cfg.char_dim, cfg.char_hidden))
        elif member in ("ngram_general", "ngram_domain"):
            vectors_path = cfg.vectors_general if member == "ngram_general" else cfg.vectors_domain
            word_table = load_text_vectors(vectors_path) if vectors_path else None
            dim = cfg.ngram_dim
            if word_table:
                dim = len(next(iter(word_table.values())))
            members.append(
                NGramEmbedder.create(rng, dim, cfg.ngram_range, cfg.ngram_buckets, word_table)
            )
        elif member in ("charlm", "pooled_charlm"):
            emb = load_charlm(cfg.charlm_path)
            members.append(PooledCharLMEmbedder(emb) if member == "pooled_charlm" else emb)
    return EmbeddingStack(members)
