"""Declarative run configuration shared by every CLI command.

A run document has up to four sections, each optional::

    {"model": {...}, "train": {...}, "corpus": {...}, "inference": {...}}

Unknown sections or keys are rejected. Model defaults are the full-size
architecture (N=512, B=128, D=256, kernel 16, stride 8, an 8x3 TCN and a
4-layer, 4-head transformer); training defaults are lr 1e-3, batch 16 and
loss weights (1.0, 0.2, 0.2).
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .inference import InferenceOptions
from .model import TOY_CONFIG, ModelConfig
from .simulate import CorpusConfig
from .training import TrainConfig


def _options_from_dict(d: dict) -> InferenceOptions:
    names = {f.name for f in dataclasses.fields(InferenceOptions)} - {"num_speakers"}
    unknown = set(d) - names
    if unknown:
        raise ValueError(f"unknown inference config keys: {sorted(unknown)}")
    return InferenceOptions(**d)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    inference: InferenceOptions = field(default_factory=InferenceOptions)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ValueError("a run config must be a JSON object")
        unknown = set(d) - {"model", "train", "corpus", "inference"}
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        cfg = cls(model=ModelConfig.from_dict(d.get("model", {})),
                  train=TrainConfig.from_dict(d.get("train", {})),
                  corpus=CorpusConfig.from_dict(d.get("corpus", {})),
                  inference=_options_from_dict(d.get("inference", {})))
        cfg.sync()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ValueError(f"config file not found: {path}")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as err:
            raise ValueError(f"{path}: invalid JSON ({err})") from err
        return cls.from_dict(doc)

    def sync(self):
        """Keep the fields that live in two sections consistent (model wins)."""
        self.train.c_max = self.model.c_max
        self.train.lmf_concat = self.model.lmf_concat
        if self.model.c_max < 1:
            raise ValueError(f"model.c_max must be at least 1, got {self.model.c_max}")

    def to_dict(self) -> dict:
        inference = dataclasses.asdict(self.inference)
        inference.pop("num_speakers")
        return {"model": self.model.to_dict(), "train": self.train.to_dict(), "corpus": self.corpus.to_dict(),
                "inference": inference}

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def toy_run_config() -> RunConfig:
    """The reduced model used by the demos and the acceptance runs."""
    return RunConfig(model=dataclasses.replace(TOY_CONFIG))
