"""Model checkpoints: configs plus state dicts, identified by a content hash."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import torch

from .codec import model_fingerprint
from .inter import InterConfig, InterModel
from .intra import IntraConfig, IntraModel

FORMAT = "nnvc-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    intra: IntraModel | None = None
    inter: InterModel | None = None
    meta: dict = field(default_factory=dict)

    @property
    def fingerprint(self) -> str:
        return model_fingerprint(self.intra, self.inter)


def save_checkpoint(path, intra: IntraModel | None = None, inter: InterModel | None = None, **meta) -> str:
    payload = {"format": FORMAT, "version": VERSION, "meta": meta}
    if intra is not None:
        payload["intra"] = {"config": intra.cfg.to_dict(), "state": intra.state_dict()}
    if inter is not None:
        payload["inter"] = {"config": inter.cfg.to_dict(), "state": inter.state_dict()}
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)
    return model_fingerprint(intra, inter)


def _restore(entry: dict, model_cls, cfg_cls):
    try:
        model = model_cls(cfg_cls(**entry["config"]))
        model.load_state_dict(entry["state"])
    except (KeyError, TypeError, RuntimeError) as exc:
        raise CheckpointError(f"incompatible {model_cls.__name__} checkpoint: {exc}") from exc
    return model.eval()


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} not found")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # torch raises a variety of unpickling errors
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != FORMAT:
        raise CheckpointError(f"{path} is not a codec checkpoint")
    if payload.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {payload.get('version')}")
    ckpt = Checkpoint(meta=payload.get("meta", {}))
    if "intra" in payload:
        ckpt.intra = _restore(payload["intra"], IntraModel, IntraConfig)
    if "inter" in payload:
        ckpt.inter = _restore(payload["inter"], InterModel, InterConfig)
    return ckpt
