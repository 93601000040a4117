"""The standard encoder zoo: three surrogates and one held-out encoder on disjoint training data."""

from __future__ import annotations

import hashlib
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING

from .data import ShapeDataset, generate_shape_dataset
from . import data as _data
from . import encoders as _enc
from .encoders import Encoder, TrainConfig, init_encoder, load_weights, save_weights, train_contrastive

if TYPE_CHECKING:
    from .config import ExperimentConfig

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ZooMember:
    arch: str
    seed_offset: int
    held_out: bool = False


STANDARD_ZOO = {
    "S1": ZooMember("tiny_vit", 1),
    "S2": ZooMember("tiny_vit", 2),
    "S3": ZooMember("tiny_cnn", 3),
    "H": ZooMember("tiny_cnn", 4, held_out=True),
}

# dataset seed offsets from the global seed
SURROGATE_DATA, HELDOUT_DATA, GALLERY_DATA, TEST_DATA, POOL_DATA = 100, 200, 300, 400, 500


def thread_cap() -> int:
    try:
        return max(1, int(os.environ.get("EMBLAUNDER_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class Zoo:
    encoders: dict[str, Encoder]
    train_data: dict[str, ShapeDataset]
    gallery: ShapeDataset
    test: ShapeDataset
    pool: ShapeDataset

    @property
    def surrogates(self) -> dict[str, Encoder]:
        return {k: v for k, v in self.encoders.items() if not STANDARD_ZOO[k].held_out}

    @property
    def held_out(self) -> Encoder:
        (eid,) = [k for k in self.encoders if STANDARD_ZOO[k].held_out]
        return self.encoders[eid]

    def ensemble(self, ids) -> dict[str, Encoder]:
        for eid in ids:
            if STANDARD_ZOO[eid].held_out:
                raise ValueError(f"{eid} is held out and cannot join the attack ensemble")
        return {eid: self.encoders[eid] for eid in ids}


def train_config_for(cfg: "ExperimentConfig", eid: str) -> TrainConfig:
    m = STANDARD_ZOO[eid]
    t = cfg.train
    vit = m.arch == "tiny_vit"
    return TrainConfig(
        epochs=t.epochs_vit if vit else t.epochs_cnn,
        temperature=t.temperature,
        lr=t.lr_vit if vit else t.lr_cnn,
        momentum=t.momentum,
        seed=cfg.seed + m.seed_offset,
        augment=t.augment,
        max_shift=t.max_shift,
    )


def _cache_key(cfg: "ExperimentConfig", eid: str) -> str:
    m = STANDARD_ZOO[eid]
    arch = (_enc.VIT_PATCH, _enc.VIT_WIDTH, _enc.VIT_HEADS, _enc.VIT_DEPTH, _enc.VIT_MLP, _enc.CNN_CHANNELS, _enc.CNN_STRIDES, _data.CHROMA, _data.CHROMA_NOISE, _data.CLUTTER)
    parts = (eid, m.arch, arch, cfg.seed, cfg.train.dim, repr(train_config_for(cfg, eid)), cfg.data.train_per_class)
    return hashlib.sha256(repr(parts).encode()).hexdigest()[:16]


def train_member(cfg: "ExperimentConfig", eid: str, data: ShapeDataset, cache_dir: str | Path | None = None) -> Encoder:
    m = STANDARD_ZOO[eid]
    path = Path(cache_dir) / f"{eid}-{_cache_key(cfg, eid)}.ezw" if cache_dir else None
    if path is not None and path.exists():
        return load_weights(path.read_bytes())
    enc = init_encoder(m.arch, cfg.train.dim, cfg.seed + m.seed_offset)
    enc = train_contrastive(enc, data, train_config_for(cfg, eid))
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(save_weights(enc))
    log.info("trained %s (%s)", eid, m.arch)
    return enc


def build_zoo(cfg: "ExperimentConfig", cache_dir: str | Path | None = None, members=None) -> Zoo:
    seed, d = cfg.seed, cfg.data
    surrogate_data = generate_shape_dataset(seed + SURROGATE_DATA, d.train_per_class)
    heldout_data = generate_shape_dataset(seed + HELDOUT_DATA, d.train_per_class)
    members = list(members or STANDARD_ZOO)
    train_data = {eid: heldout_data if STANDARD_ZOO[eid].held_out else surrogate_data for eid in members}
    with ThreadPoolExecutor(max_workers=thread_cap()) as pool:
        futures = {eid: pool.submit(train_member, cfg, eid, train_data[eid], cache_dir) for eid in members}
        encoders = {eid: f.result() for eid, f in futures.items()}
    return Zoo(
        encoders=encoders,
        train_data=train_data,
        gallery=generate_shape_dataset(seed + GALLERY_DATA, d.gallery_per_class),
        test=generate_shape_dataset(seed + TEST_DATA, d.test_per_class),
        pool=generate_shape_dataset(seed + POOL_DATA, d.pool_per_class),
    )
