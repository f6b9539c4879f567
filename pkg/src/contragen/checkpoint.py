"""Checkpoint directories: weights archive + manifest + vocabulary.

Layout: ``weights.bin`` (torch archive with live/best parameters,
optimizer state, and loop counters), ``manifest.json`` (version, step,
stage, config and its hash, vocabulary hash), ``vocab.txt``.  Loading
verifies the hashes; a config mismatch against the caller's expectation
is refused unless forced.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import torch

from .config import ExperimentConfig, config_from_dict, config_hash, config_to_dict
from .errors import ConfigError, ValidationError
from .training import TrainState, build_model
from .vocab import Vocab

MANIFEST_VERSION = 1
WEIGHTS_FILE = "weights.bin"
MANIFEST_FILE = "manifest.json"
VOCAB_FILE = "vocab.txt"


def _vocab_hash(vocab: Vocab) -> str:
    text = "\n".join(vocab.itos) + "\n"
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def save_checkpoint(
    state: TrainState,
    ckpt_dir: str | Path,
    vocab: Vocab,
    config: ExperimentConfig,
    stage: str = "train",
) -> Path:
    out = Path(ckpt_dir)
    out.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "model": state.model.state_dict(),
            "optimizer": state.optimizer.state_dict(),
            "best_model": state.best_model_state,
            "step": state.step,
            "best_dev_loss": state.best_dev_loss,
            "bad_validations": state.bad_validations,
            "warmed_up": state.warmed_up,
            "baseline_dev_loss": state.baseline_dev_loss,
        },
        out / WEIGHTS_FILE,
    )
    vocab.save(out / VOCAB_FILE)
    manifest = {
        "version": MANIFEST_VERSION,
        "step": state.step,
        "stage": stage,
        "config_hash": config_hash(config),
        "vocab_hash": _vocab_hash(vocab),
        "config": config_to_dict(config),
    }
    (out / MANIFEST_FILE).write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    return out


def load_checkpoint(
    ckpt_dir: str | Path,
    expected_config: ExperimentConfig | None = None,
    force: bool = False,
) -> tuple[TrainState, ExperimentConfig, Vocab, dict]:
    """Restore a checkpoint; returns (state, config, vocab, manifest)."""
    root = Path(ckpt_dir)
    manifest_path = root / MANIFEST_FILE
    if not manifest_path.exists():
        raise ValidationError(f"no checkpoint manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("version") != MANIFEST_VERSION:
        raise ConfigError(
            f"checkpoint version {manifest.get('version')} not supported (want {MANIFEST_VERSION})"
        )

    vocab = Vocab.load(root / VOCAB_FILE)
    if _vocab_hash(vocab) != manifest["vocab_hash"]:
        raise ConfigError("vocabulary hash mismatch: vocab.txt does not match manifest")

    config = config_from_dict(manifest["config"])
    if config_hash(config) != manifest["config_hash"]:
        raise ConfigError("config hash mismatch: manifest is internally inconsistent")
    if expected_config is not None and config_hash(expected_config) != manifest["config_hash"]:
        if not force:
            raise ConfigError(
                "checkpoint config does not match the current config; pass force to override"
            )
        config = expected_config

    bundle = torch.load(root / WEIGHTS_FILE, map_location="cpu", weights_only=False)
    model = build_model(config.model, seed=config.train.seed)
    model.load_state_dict(bundle["model"])
    optimizer = torch.optim.Adam(model.parameters(), lr=config.train.learning_rate)
    if bundle.get("optimizer"):
        optimizer.load_state_dict(bundle["optimizer"])
    state = TrainState(
        model=model,
        optimizer=optimizer,
        step=int(bundle["step"]),
        best_dev_loss=float(bundle["best_dev_loss"]),
        bad_validations=int(bundle["bad_validations"]),
        warmed_up=bool(bundle["warmed_up"]),
        best_model_state=bundle.get("best_model"),
        baseline_dev_loss=bundle.get("baseline_dev_loss"),
    )
    return state, config, vocab, manifest
