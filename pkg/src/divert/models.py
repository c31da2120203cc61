"""The model triple (prior, decoder, posterior, frozen posterior snapshot) and its checkpoints."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from divert.lm import CHECKPOINT_VERSION, CheckpointError, TinyLM, clone_frozen, load_model, save_model

ROLE_DIRS = ("prior", "decoder", "posterior", "posterior_init")


@dataclass
class ModelTriple:
    prior: TinyLM
    decoder: TinyLM
    posterior: TinyLM
    posterior_init: Optional[TinyLM] = None
    # variational step counter; drives the temperature schedule on resume
    step: int = 0
    state: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.posterior_init is None:
            self.posterior_init = clone_frozen(self.posterior)
        vocab = self.prior.vocab
        for m in (self.decoder, self.posterior, self.posterior_init):
            if m.vocab != vocab:
                raise ValueError("all models of a triple must share one vocabulary")

    @property
    def vocab(self):
        return self.prior.vocab

    def trainable(self) -> list[TinyLM]:
        return [self.prior, self.decoder, self.posterior]

    def parameters(self):
        for m in self.trainable():
            yield from m.parameters()

    def eval(self) -> "ModelTriple":
        for m in self.trainable():
            m.eval()
        return self

    def to(self, dtype) -> "ModelTriple":
        for m in (*self.trainable(), self.posterior_init):
            m.to(dtype)
        return self


def save_checkpoint(models: ModelTriple, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for name in ROLE_DIRS:
        save_model(getattr(models, name), path / name)
    meta = {"version": CHECKPOINT_VERSION, "step": models.step, "state": models.state}
    (path / "triple.json").write_text(json.dumps(meta, indent=1, sort_keys=True), encoding="utf-8")


def load_checkpoint(path) -> ModelTriple:
    path = Path(path)
    meta_file = path / "triple.json"
    if not meta_file.exists():
        raise CheckpointError(f"{path} is not a checkpoint directory (missing triple.json)")
    meta = json.loads(meta_file.read_text(encoding="utf-8"))
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint {path} has version {meta.get('version')}, expected {CHECKPOINT_VERSION}"
        )
    loaded = {name: load_model(path / name) for name in ROLE_DIRS}
    frozen = clone_frozen(loaded.pop("posterior_init"))
    return ModelTriple(
        posterior_init=frozen, step=int(meta["step"]), state=dict(meta.get("state", {})), **loaded
    )
