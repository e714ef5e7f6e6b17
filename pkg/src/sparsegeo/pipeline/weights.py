"""Save and load a trained model through the weight manifest."""

from __future__ import annotations

import numpy as np

from ..fusion import FusionParams
from ..sparse.refiner import RefinerConfig, RefinerParams
from .run import Model
from .tensorfile import FormatError, read_manifest, write_manifest


def save_model(path, model: Model):
    cfg = model.cfg
    meta = {
        "levels": str(cfg.levels),
        "channels": ",".join(str(c) for c in cfg.channels),
        "kernel_size": str(cfg.kernel_size),
        "geo_channels": str(cfg.geo_channels),
        "conf_logits": str(cfg.conf_logits),
        "norm": cfg.norm,
    }
    tensors = dict(model.refiner.tensors)
    tensors.update(model.fusion.tensors())
    write_manifest(path, tensors, meta)


def load_model(path) -> Model:
    tensors, meta = read_manifest(path)
    try:
        cfg = RefinerConfig(
            levels=int(meta["levels"]),
            channels=tuple(int(c) for c in meta["channels"].split(",")),
            kernel_size=int(meta["kernel_size"]),
            geo_channels=int(meta["geo_channels"]),
            conf_logits=int(meta["conf_logits"]),
            norm=meta["norm"],
        )
    except KeyError as exc:
        raise FormatError(f"weight manifest lacks config key {exc}") from None
    fusion = FusionParams.from_tensors(tensors)
    refiner = RefinerParams({k: v for k, v in tensors.items() if not k.startswith("fuse.")})
    refiner.check(cfg)
    return Model(cfg, refiner, fusion)


def zero_head_model(cfg: RefinerConfig, seed: int = 0, hidden: int = 16) -> Model:
    """Untrained model whose refiner output is identically zero."""
    from ..fusion import init_fusion_params
    from ..sparse.refiner import init_refiner_params

    return Model(cfg, init_refiner_params(cfg, seed), init_fusion_params(cfg.geo_channels, hidden, seed + 1))
