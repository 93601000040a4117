"""Toy CLIP-style encoders: an image tower (tiny ViT or tiny CNN) plus a 32-row label head.

Both towers end in an L2 normalization, so every embedding is unit-norm.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import IMAGE_SIZE, NUM_CLASSES, ShapeDataset

log = logging.getLogger(__name__)

ARCHS = ("tiny_vit", "tiny_cnn")
_ARCH_TAGS = {"tiny_vit": 1, "tiny_cnn": 2}

VIT_PATCH = 8
VIT_WIDTH = 64
VIT_HEADS = 4
VIT_DEPTH = 2
VIT_MLP = 128
CNN_CHANNELS = (16, 32, 64)
CNN_STRIDES = (2, 2, 2)

MAGIC = b"EZW1"
FORMAT_VERSION = 1


class WeightsFormatError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class Encoder:
    arch: str
    dim: int
    seed: int
    params: dict[str, np.ndarray]
    input_size: int = IMAGE_SIZE
    _const: dict[str, Tensor] | None = field(default=None, repr=False, compare=False)

    def const_params(self) -> dict[str, Tensor]:
        if self._const is None:
            self._const = {k: Tensor(v) for k, v in self.params.items()}
        return self._const

    def embed_tensor(self, x: Tensor, params: dict[str, Tensor] | None = None) -> Tensor:
        """Differentiable (N, H, W, 3) -> (N, dim) unit-norm embeddings."""
        if x.ndim != 4 or x.shape[1:3] != (self.input_size, self.input_size):
            raise ValueError(f"{self.arch} expects {self.input_size}x{self.input_size} input, got {x.shape}")
        p = params if params is not None else self.const_params()
        h = (x - 0.5) * 2.0
        feats = _vit_forward(h, p) if self.arch == "tiny_vit" else _cnn_forward(h, p)
        return ad.l2_normalize(feats @ p["head.w"] + p["head.b"], axis=-1)

    def label_tensor(self, params: dict[str, Tensor] | None = None) -> Tensor:
        p = params if params is not None else self.const_params()
        return ad.l2_normalize(p["labels"], axis=-1)

    def embed(self, images, batch: int = 256) -> np.ndarray:
        images = np.asarray(images, dtype=np.float32)
        single = images.ndim == 3
        if single:
            images = images[None]
        out = [self.embed_tensor(Tensor(images[i : i + batch])).numpy() for i in range(0, len(images), batch)]
        res = np.concatenate(out) if out else np.zeros((0, self.dim), np.float32)
        return res[0] if single else res

    def label_embeddings(self) -> np.ndarray:
        return self.label_tensor().numpy()


# --- architectures -----------------------------------------------------------


def _vit_forward(x: Tensor, p) -> Tensor:
    tokens = ad.patchify(x, VIT_PATCH) @ p["patch.w"] + p["patch.b"] + p["pos"]
    n, t, _ = tokens.shape
    hd = VIT_WIDTH // VIT_HEADS
    for b in range(VIT_DEPTH):
        pre = f"blk{b}."
        y = ad.layer_norm(tokens, p[pre + "ln1.g"], p[pre + "ln1.b"])

        def heads(z):
            return ad.transpose(ad.reshape(z, (n, t, VIT_HEADS, hd)), (0, 2, 1, 3))

        q = heads(y @ p[pre + "q.w"] + p[pre + "q.b"])
        k = heads(y @ p[pre + "k.w"] + p[pre + "k.b"])
        v = heads(y @ p[pre + "v.w"] + p[pre + "v.b"])
        att = ad.softmax((q @ ad.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(hd)), axis=-1)
        mixed = ad.reshape(ad.transpose(att @ v, (0, 2, 1, 3)), (n, t, VIT_WIDTH))
        tokens = tokens + (mixed @ p[pre + "o.w"] + p[pre + "o.b"])
        y = ad.layer_norm(tokens, p[pre + "ln2.g"], p[pre + "ln2.b"])
        y = ad.gelu(y @ p[pre + "fc1.w"] + p[pre + "fc1.b"])
        tokens = tokens + (y @ p[pre + "fc2.w"] + p[pre + "fc2.b"])
    tokens = ad.layer_norm(tokens, p["ln_f.g"], p["ln_f.b"])
    return ad.mean(tokens, axis=1)


def _cnn_forward(x: Tensor, p) -> Tensor:
    h = x
    for i, stride in enumerate(CNN_STRIDES):
        h = ad.relu(ad.conv2d(h, p[f"conv{i}.w"], stride=stride, padding=1) + p[f"conv{i}.b"])
    return ad.mean(h, axis=(1, 2))


def _param_shapes(arch: str, dim: int) -> dict[str, tuple[int, ...]]:
    if arch == "tiny_vit":
        tokens = (IMAGE_SIZE // VIT_PATCH) ** 2
        shapes = {
            "patch.w": (VIT_PATCH * VIT_PATCH * 3, VIT_WIDTH),
            "patch.b": (VIT_WIDTH,),
            "pos": (tokens, VIT_WIDTH),
        }
        for b in range(VIT_DEPTH):
            pre = f"blk{b}."
            shapes.update({pre + "ln1.g": (VIT_WIDTH,), pre + "ln1.b": (VIT_WIDTH,)})
            for name in ("q", "k", "v", "o"):
                shapes[pre + name + ".w"] = (VIT_WIDTH, VIT_WIDTH)
                shapes[pre + name + ".b"] = (VIT_WIDTH,)
            shapes.update(
                {
                    pre + "ln2.g": (VIT_WIDTH,),
                    pre + "ln2.b": (VIT_WIDTH,),
                    pre + "fc1.w": (VIT_WIDTH, VIT_MLP),
                    pre + "fc1.b": (VIT_MLP,),
                    pre + "fc2.w": (VIT_MLP, VIT_WIDTH),
                    pre + "fc2.b": (VIT_WIDTH,),
                }
            )
        shapes.update({"ln_f.g": (VIT_WIDTH,), "ln_f.b": (VIT_WIDTH,), "head.w": (VIT_WIDTH, dim)})
    elif arch == "tiny_cnn":
        shapes = {}
        cin = 3
        for i, cout in enumerate(CNN_CHANNELS):
            shapes[f"conv{i}.w"] = (3, 3, cin, cout)
            shapes[f"conv{i}.b"] = (cout,)
            cin = cout
        shapes["head.w"] = (cin, dim)
    else:
        raise ValueError(f"unknown architecture {arch!r}; expected one of {ARCHS}")
    shapes["head.b"] = (dim,)
    shapes["labels"] = (NUM_CLASSES, dim)
    return shapes


def init_encoder(arch: str, dim: int = 64, seed: int = 0) -> Encoder:
    shapes = _param_shapes(arch, dim)
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in shapes.items():
        if name.endswith(".g"):
            arr = np.ones(shape)
        elif name.endswith(".b") and len(shape) == 1:
            arr = np.zeros(shape)
        elif name == "pos":
            arr = rng.normal(0.0, 0.5, shape)
        elif name == "labels":
            arr = rng.normal(0.0, 1.0 / math.sqrt(dim), shape)
        else:
            fan_in = int(np.prod(shape[:-1]))
            gain = math.sqrt(2.0) if name.startswith("conv") else 1.0
            arr = rng.normal(0.0, gain / math.sqrt(fan_in), shape)
        params[name] = arr.astype(np.float32)
    return Encoder(arch, dim, seed, params)


def embed_image(enc: Encoder, img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float32)
    if img.shape[:2] != (enc.input_size, enc.input_size):
        raise ValueError(f"image is {img.shape[:2]}, encoder expects {enc.input_size}x{enc.input_size}; resize first")
    return enc.embed(img)


def embed_label(enc: Encoder, cid: int) -> np.ndarray:
    if not 0 <= int(cid) < NUM_CLASSES:
        raise ValueError(f"class id {cid} out of range [0, {NUM_CLASSES})")
    return enc.label_embeddings()[int(cid)]


# --- training ------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 30
    temperature: float = 0.07
    lr: float = 0.05
    momentum: float = 0.9
    seed: int = 0
    augment: bool = True
    max_shift: int = 3
    stop_after: int | None = None  # run only the first N epochs of the schedule


@dataclass
class TrainLog:
    epoch_loss: list[float] = field(default_factory=list)


def _epoch_batches(labels: np.ndarray, rng: np.random.Generator):
    """Yield index arrays holding exactly one sample per class, in class-id order."""
    per_class = [rng.permutation(np.flatnonzero(labels == c)) for c in range(NUM_CLASSES)]
    rounds = min(len(ix) for ix in per_class)
    for r in range(rounds):
        yield np.array([per_class[c][r] for c in range(NUM_CLASSES)])


def augment_batch(images: np.ndarray, rng: np.random.Generator, max_shift: int) -> np.ndarray:
    """Random horizontal flip and integer translation with edge padding."""
    out = np.empty_like(images)
    n, h, w, _ = images.shape
    flips = rng.random(n) < 0.5
    shifts = rng.integers(-max_shift, max_shift + 1, (n, 2))
    for i in range(n):
        img = images[i, :, ::-1] if flips[i] else images[i]
        if max_shift:
            padded = np.pad(img, ((max_shift, max_shift), (max_shift, max_shift), (0, 0)), mode="edge")
            dy, dx = shifts[i] + max_shift
            img = padded[dy : dy + h, dx : dx + w]
        out[i] = img
    return out


def contrastive_loss(enc: Encoder, images: np.ndarray, params: dict[str, Tensor], temperature: float) -> Tensor:
    """Symmetric InfoNCE for a batch whose i-th image belongs to class i."""
    img = enc.embed_tensor(Tensor(images), params)
    logits = (img @ ad.transpose(enc.label_tensor(params))) * (1.0 / temperature)
    targets = np.arange(len(images))
    return (ad.cross_entropy(logits, targets) + ad.cross_entropy(ad.transpose(logits), targets)) * 0.5


def train_contrastive(
    enc: Encoder, data: ShapeDataset, cfg: TrainConfig | None = None, log_out: TrainLog | None = None
) -> Encoder:
    """SGD with momentum and cosine-decayed learning rate; returns a new Encoder."""
    cfg = cfg or TrainConfig()
    if cfg.epochs == 0:
        return Encoder(enc.arch, enc.dim, enc.seed, {k: v.copy() for k, v in enc.params.items()}, enc.input_size)
    if len(data) == 0:
        raise ValueError("training dataset is empty")
    counts = np.bincount(data.labels, minlength=NUM_CLASSES)
    if counts.min() == 0:
        raise ValueError("every class needs at least one training sample")
    rng = np.random.default_rng(cfg.seed)
    params = {k: v.astype(np.float32).copy() for k, v in enc.params.items()}
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    steps_per_epoch = int(counts.min())
    total = cfg.epochs * steps_per_epoch
    step = 0
    trainer = Encoder(enc.arch, enc.dim, enc.seed, params, enc.input_size)
    for epoch in range(cfg.epochs if cfg.stop_after is None else min(cfg.epochs, cfg.stop_after)):
        losses = []
        for idx in _epoch_batches(data.labels, rng):
            lr = 0.5 * cfg.lr * (1.0 + math.cos(math.pi * step / total))
            leaves = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
            try:
                batch = data.images[idx]
                if cfg.augment:
                    batch = augment_batch(batch, rng, cfg.max_shift)
                loss = contrastive_loss(trainer, batch, leaves, cfg.temperature)
                grads = ad.backward(loss)
            except ad.NonFiniteError as exc:
                raise TrainingDivergedError(f"{enc.arch} seed {enc.seed} diverged at epoch {epoch}") from exc
            for k, leaf in leaves.items():
                velocity[k] = (cfg.momentum * velocity[k] + grads[leaf]).astype(np.float32)
                params[k] = (params[k] - lr * velocity[k]).astype(np.float32)
            trainer.params = params
            losses.append(loss.item())
            step += 1
        mean_loss = float(np.mean(losses))
        if not math.isfinite(mean_loss):
            raise TrainingDivergedError(f"{enc.arch} seed {enc.seed}: loss {mean_loss} at epoch {epoch}")
        if log_out is not None:
            log_out.epoch_loss.append(mean_loss)
        log.debug("%s seed=%d epoch=%d loss=%.4f", enc.arch, enc.seed, epoch, mean_loss)
    return Encoder(enc.arch, enc.dim, enc.seed, params, enc.input_size)


def retrieval_accuracy(enc: Encoder, data: ShapeDataset) -> float:
    """Top-1 label retrieval: fraction of images whose nearest label row is their class."""
    if len(data) == 0:
        raise ValueError("empty dataset")
    scores = enc.embed(data.images) @ enc.label_embeddings().T
    return float(np.mean(scores.argmax(axis=1) == data.labels))


# --- weights file ----------------------------------------------------------------


def fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for b in data:
        h ^= b
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def save_weights(enc: Encoder) -> bytes:
    """EZW1 layout: magic, u16 version, u8 arch tag, u16 dim, u32 seed, u16 tensor count,
    per tensor (u16 name length, name, u8 ndim, u32 dims), f32 LE payload, u64 FNV-1a."""
    names = sorted(enc.params)
    out = bytearray(MAGIC)
    out += struct.pack("<HBHIH", FORMAT_VERSION, _ARCH_TAGS[enc.arch], enc.dim, enc.seed, len(names))
    for name in names:
        raw = name.encode()
        shape = enc.params[name].shape
        out += struct.pack("<H", len(raw)) + raw + struct.pack("<B", len(shape))
        out += struct.pack(f"<{len(shape)}I", *shape)
    for name in names:
        out += np.ascontiguousarray(enc.params[name], dtype="<f4").tobytes()
    out += struct.pack("<Q", fnv1a64(bytes(out)))
    return bytes(out)


def load_weights(data: bytes) -> Encoder:
    if len(data) < 4 + 11 + 8 or data[:4] != MAGIC:
        raise WeightsFormatError("bad magic: not an EZW1 weights file")
    body, (stored,) = data[:-8], struct.unpack("<Q", data[-8:])
    if fnv1a64(body) != stored:
        raise WeightsFormatError("checksum mismatch")
    version, tag, dim, seed, count = struct.unpack_from("<HBHIH", body, 4)
    if version != FORMAT_VERSION:
        raise WeightsFormatError(f"unsupported weights version {version}")
    arch = {v: k for k, v in _ARCH_TAGS.items()}.get(tag)
    if arch is None:
        raise WeightsFormatError(f"unknown architecture tag {tag}")
    pos = 4 + struct.calcsize("<HBHIH")
    table = []
    for _ in range(count):
        (n,) = struct.unpack_from("<H", body, pos)
        name = body[pos + 2 : pos + 2 + n].decode()
        pos += 2 + n
        (ndim,) = struct.unpack_from("<B", body, pos)
        shape = struct.unpack_from(f"<{ndim}I", body, pos + 1)
        pos += 1 + 4 * ndim
        table.append((name, shape))
    params = {}
    for name, shape in table:
        size = int(np.prod(shape)) if shape else 1
        params[name] = np.frombuffer(body, "<f4", size, pos).reshape(shape).astype(np.float32)
        pos += 4 * size
    if pos != len(body):
        raise WeightsFormatError("payload length does not match shape table")
    expected = _param_shapes(arch, dim)
    if {k: tuple(v.shape) for k, v in params.items()} != expected:
        raise WeightsFormatError("shape table does not match architecture")
    return Encoder(arch, dim, seed, params)
