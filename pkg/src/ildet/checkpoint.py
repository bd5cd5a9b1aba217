"""Detector checkpoints (optionally with a Fisher diagonal) in the ILDET1 container."""

from __future__ import annotations

from typing import Optional, Tuple

from .container import ContainerError, read_container, write_container
from .kernel import ParamStore
from .losses import FisherDiagonal
from .model import ClassSet, DetectorModel


def save_checkpoint(path, model: DetectorModel, fisher: Optional[FisherDiagonal] = None,
                    meta: Optional[dict] = None):
    header = {
        "kind": "checkpoint",
        "in_dim": model.in_dim,
        "hidden": list(model.hidden),
        "class_set": {"old": list(model.class_set.old), "new": list(model.class_set.new)},
        "meta": meta or {},
        "has_fisher": fisher is not None,
    }
    tensors = {f"param/{k}": v for k, v in model.store.params.items()}
    if fisher is not None:
        tensors.update({f"fisher/{k}": v for k, v in fisher.values.items()})
        tensors.update({f"anchor/{k}": v for k, v in fisher.anchor.items()})
    return write_container(path, header, tensors)


def load_checkpoint(path) -> Tuple[DetectorModel, Optional[FisherDiagonal], dict]:
    """Returns ``(model, fisher or None, meta)``; parameters round-trip bit-exactly."""
    header, tensors = read_container(path)
    if header.get("kind") != "checkpoint":
        raise ContainerError(f"{path} is not a checkpoint")

    def group(prefix):
        n = len(prefix)
        return {k[n:]: v for k, v in tensors.items() if k.startswith(prefix)}

    store = ParamStore()
    for name, value in group("param/").items():
        store.add(name, value)
    cs = header["class_set"]
    model = DetectorModel(header["in_dim"], ClassSet(cs["old"], cs["new"]), header["hidden"],
                          store=store)
    fisher = None
    if header.get("has_fisher"):
        fisher = FisherDiagonal(group("fisher/"), group("anchor/"))
    return model, fisher, header.get("meta", {})
