"""Pipeline configuration document and run manifests."""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

from . import __version__
from .energy import EnergyParams
from .ga import GaConfig
from .indrnn import TrainConfig

__all__ = ["PreprocessConfig", "ModelConfig", "PipelineConfig", "RunManifest", "derive_seed", "file_digest"]


def derive_seed(master: int, stage: str) -> int:
    """Stable 63-bit seed for ``stage`` derived from the master seed."""
    digest = hashlib.sha256(f"{int(master)}/{stage}".encode()).digest()
    return int.from_bytes(digest[:8], "big") & (2**63 - 1)


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass(frozen=True)
class PreprocessConfig:
    median_radius: int = 1
    window_level: float = 0.5
    window_width: float = 1.0
    gamma: float = 1.0

    def __post_init__(self):
        if self.median_radius < 1:
            raise ValueError("median-radius must be >= 1")
        if not self.window_width > 0:
            raise ValueError("window-width must be positive")
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")

    def to_dict(self) -> dict:
        return {
            "median-radius": self.median_radius,
            "window-level": self.window_level,
            "window-width": self.window_width,
            "gamma": self.gamma,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "PreprocessConfig":
        d = cls()
        return cls(
            median_radius=int(doc.get("median-radius", d.median_radius)),
            window_level=float(doc.get("window-level", d.window_level)),
            window_width=float(doc.get("window-width", d.window_width)),
            gamma=float(doc.get("gamma", d.gamma)),
        )


@dataclass(frozen=True)
class ModelConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    layer_sizes: tuple[int, ...] = (16, 16)

    def __post_init__(self):
        object.__setattr__(self, "layer_sizes", tuple(int(n) for n in self.layer_sizes))
        if not self.layer_sizes or min(self.layer_sizes) < 1:
            raise ValueError("layer-sizes must list positive unit counts")

    def to_dict(self) -> dict:
        t = self.train
        return {
            "learning-rate": t.learning_rate,
            "epochs": t.epochs,
            "batch-size": t.batch_size,
            "clip-gamma": t.clip_gamma,
            "seed": t.seed,
            "neighborhood-k": t.neighborhood_k,
            "layer-sizes": list(self.layer_sizes),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        d = TrainConfig()
        seed = doc.get("seed")
        train = TrainConfig(
            learning_rate=float(doc.get("learning-rate", d.learning_rate)),
            epochs=int(doc.get("epochs", d.epochs)),
            batch_size=int(doc.get("batch-size", d.batch_size)),
            clip_gamma=float(doc.get("clip-gamma", d.clip_gamma)),
            seed=None if seed is None else int(seed),
            neighborhood_k=int(doc.get("neighborhood-k", d.neighborhood_k)),
        )
        return cls(train, tuple(doc.get("layer-sizes", (16, 16))))


@dataclass(frozen=True)
class PipelineConfig:
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    energy: EnergyParams = field(default_factory=EnergyParams)
    ga: GaConfig = field(default_factory=GaConfig)
    binarize_threshold: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.binarize_threshold <= 1.0:
            raise ValueError("binarize-threshold must lie in [0, 1]")

    def to_dict(self) -> dict:
        return {
            "preprocess": self.preprocess.to_dict(),
            "model": self.model.to_dict(),
            "energy": self.energy.to_dict(),
            "ga": self.ga.to_dict(),
            "binarize-threshold": self.binarize_threshold,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "PipelineConfig":
        return cls(
            preprocess=PreprocessConfig.from_dict(doc.get("preprocess", {})),
            model=ModelConfig.from_dict(doc.get("model", {})),
            energy=EnergyParams.from_dict(doc.get("energy", {})),
            ga=GaConfig.from_dict(doc.get("ga", {})),
            binarize_threshold=float(doc.get("binarize-threshold", 0.5)),
            seed=int(doc.get("seed", 0)),
        )

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")

    def canonical_digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def stage_seeds(self) -> dict[str, int]:
        return {
            "train": self.model.train.seed if self.model.train.seed is not None
            else derive_seed(self.seed, "train"),
            "refine": self.ga.seed if self.ga.seed is not None else derive_seed(self.seed, "refine"),
        }

    def resolved(self) -> "PipelineConfig":
        """Copy with every stage seed filled in from the master seed."""
        seeds = self.stage_seeds()
        return replace(
            self,
            model=replace(self.model, train=replace(self.model.train, seed=seeds["train"])),
            ga=replace(self.ga, seed=seeds["refine"]),
        )


class RunManifest:
    """Accumulates what a command did and writes it as ``manifest.json``."""

    def __init__(self, command: str, out_dir, config: PipelineConfig, config_path=None):
        self.out_dir = Path(out_dir)
        self.doc: dict = {
            "command": command,
            "tool-version": __version__,
            "status": "running",
            "config-path": None if config_path is None else str(config_path),
            "config-digest": file_digest(config_path) if config_path else config.canonical_digest(),
            "config-digest-source": "file" if config_path else "canonical-json",
            "resolved-config": config.resolved().to_dict(),
            "seeds": {"master": config.seed, **config.stage_seeds()},
            "inputs": [],
            "outputs": [],
            "stage-timings": {},
            "notes": [],
        }
        self._t0: dict[str, float] = {}

    def add_input(self, path) -> None:
        self.doc["inputs"].append(str(path))

    def add_output(self, path) -> Path:
        path = Path(path)
        self.doc["outputs"].append(str(path))
        return path

    def note(self, text: str) -> None:
        self.doc["notes"].append(text)

    def __setitem__(self, key, value):
        self.doc[key] = value

    def __getitem__(self, key):
        return self.doc[key]

    def stage(self, name: str):
        manifest = self

        class _Timer:
            def __enter__(self):
                manifest.doc["current-stage"] = name
                manifest._t0[name] = time.perf_counter()

            def __exit__(self, exc_type, exc, tb):
                manifest.doc["stage-timings"][name] = round(time.perf_counter() - manifest._t0[name], 6)
                if exc_type is None:
                    manifest.doc.pop("current-stage", None)
                return False

        return _Timer()

    def fail(self, error: BaseException) -> None:
        self.doc["status"] = "failed"
        self.doc["error"] = f"{type(error).__name__}: {error}"
        self.doc["failed-stage"] = self.doc.pop("current-stage", None)
        self.doc["partial"] = True

    def write(self) -> Path:
        if self.doc["status"] == "running":
            self.doc["status"] = "ok"
            self.doc["partial"] = False
        present = [p for p in self.doc["outputs"] if Path(p).exists()]
        missing = [p for p in self.doc["outputs"] if not Path(p).exists()]
        if missing and self.doc["status"] == "ok":
            raise RuntimeError(f"manifest lists missing outputs: {missing}")
        self.doc["outputs"] = present
        # keyed by name relative to the run directory so reruns elsewhere compare equal
        self.doc["output-digests"] = {
            os.path.relpath(p, self.out_dir): file_digest(p) for p in present
        }
        if missing:
            self.doc["missing-outputs"] = missing
        path = self.out_dir / "manifest.json"
        with open(path, "w") as fh:
            json.dump(self.doc, fh, indent=2)
            fh.write("\n")
        return path
