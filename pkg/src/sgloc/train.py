"""Training loop, Adam optimizer, configuration, and checkpoint serialization.

Checkpoint format (all little-endian):
    magic "SGL1" | u32 version | u32 config length | config utf-8 |
    u32 param count | per param: u16 name length, utf-8 name, u8 rank,
    u32 extents..., float32 values.

Training is single-threaded over batches and fully deterministic given the
config seed: data order, query sampling, and parameter init all derive from
it. Identical configs therefore produce byte-identical checkpoints.
"""

from __future__ import annotations

import json
import os
import struct
import sys
from dataclasses import dataclass, fields, replace

import numpy as np

from .data import Dataset, derive_seed
from .matching import LossWeights, build_cost_matrix, hungarian_assign, total_loss
from .model import ModelConfig, SketchLocalizer
from .tensor import GradientMap, NonFiniteError, Param, Tensor, add_n, backward, scale

CHECKPOINT_MAGIC = b"SGL1"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    d: int = 64
    heads: int = 4
    stages: int = 3
    dec_layers: int = 2
    num_tokens: int = 100
    d_hidden: int = 128
    sketch_layers: int = 2
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 8
    epochs: int = 40
    lam_cls: float = 2.0
    lam_l1: float = 5.0
    lam_giou: float = 2.0
    seed: int = 0
    dataset: str = ""
    mode: str = "closed"
    protocol_mix: float = 0.5  # probability that a batch uses 5 query sketches
    encoder_fusion: bool = True
    refinement: bool = True

    def validate(self) -> None:
        numeric = ["d", "heads", "stages", "dec_layers", "num_tokens", "d_hidden",
                   "sketch_layers", "lr", "batch_size", "epochs"]
        for name in numeric:
            if getattr(self, name) <= 0:
                raise ValueError(f"config field {name} must be positive")
        if self.d % (4 * self.heads):
            raise ValueError(f"d={self.d} must be divisible by 4*heads={4 * self.heads}")
        if not 0.0 <= self.protocol_mix <= 1.0:
            raise ValueError("protocol_mix must lie in [0, 1]")

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            d=self.d,
            heads=self.heads,
            stages=self.stages,
            dec_layers=self.dec_layers,
            num_tokens=self.num_tokens,
            d_hidden=self.d_hidden,
            sketch_layers=self.sketch_layers,
            encoder_fusion=self.encoder_fusion,
            refinement=self.refinement,
        )

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lam_cls, self.lam_l1, self.lam_giou)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        known = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {lineno}: expected 'key = value', got {raw!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in known:
                raise ValueError(f"config line {lineno}: unknown key {key!r}")
            kwargs[key] = _parse_value(val, known[key])
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path: str) -> "TrainConfig":
        with open(path) as f:
            return cls.from_text(f.read())


def _parse_value(val: str, typ):
    name = typ if isinstance(typ, str) else typ.__name__
    if name == "int":
        return int(val)
    if name == "float":
        return float(val)
    if name == "bool":
        if val.lower() in ("true", "1", "yes"):
            return True
        if val.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"not a boolean: {val!r}")
    return val


# ---------------------------------------------------------------------------
# optimizer


class OptimState:
    """Per-parameter Adam moments plus the shared step counter."""

    def __init__(self, params):
        self.m = {p.name: np.zeros_like(p.value.data, dtype=np.float64) for p in params}
        self.v = {p.name: np.zeros_like(p.value.data, dtype=np.float64) for p in params}
        self.step = 0


def adam_step(
    params,
    grads: GradientMap,
    state: OptimState,
    lr: float,
    betas=(0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    """One standard Adam update with bias correction, in place."""
    b1, b2 = betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p in params:
        g = grads.raw(p)
        if g is None:
            g = np.zeros_like(p.value.data, dtype=np.float64)
        elif not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for parameter {p.name}")
        else:
            g = g.astype(np.float64, copy=False)
        m = state.m[p.name]
        v = state.v[p.name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.value.data -= update.astype(p.value.data.dtype)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str, model: SketchLocalizer, config_text: str) -> None:
    blob = config_text.encode()
    out = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(blob)), blob]
    out.append(struct.pack("<I", len(model.params)))
    for p in model.params:
        name = p.name.encode()
        data = np.ascontiguousarray(p.value.data, dtype="<f4")
        out.append(struct.pack("<H", len(name)))
        out.append(name)
        out.append(struct.pack("<B", data.ndim))
        out.append(struct.pack(f"<{data.ndim}I", *data.shape))
        out.append(data.tobytes())
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(b"".join(out))
    os.replace(tmp, path)


def read_checkpoint(path: str):
    """Returns (config_text, {name: float32 array})."""
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, cfg_len = struct.unpack_from("<II", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    config_text = buf[off : off + cfg_len].decode()
    off += cfg_len
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    entries = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off : off + nlen].decode()
        off += nlen
        (rank,) = struct.unpack_from("<B", buf, off)
        off += 1
        shape = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        n = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(shape)
        off += 4 * n
        entries[name] = data.copy()
    return config_text, entries


def load_checkpoint(path: str, model: SketchLocalizer) -> str:
    """Load parameters into `model`; unknown names are rejected."""
    config_text, entries = read_checkpoint(path)
    named = model.named_parameters()
    for name, data in entries.items():
        if name not in named:
            raise ValueError(f"{path}: unknown parameter {name!r} for this model")
        p = named[name]
        if tuple(data.shape) != tuple(p.value.shape):
            raise ValueError(
                f"{path}: shape {data.shape} for {name!r} does not match model {p.value.shape}"
            )
        p.value.data = data.astype(p.value.data.dtype)
    missing = set(named) - set(entries)
    if missing:
        raise ValueError(f"{path}: checkpoint missing parameters {sorted(missing)[:3]}...")
    return config_text


def load_model(path: str) -> tuple:
    """Rebuild the model a checkpoint was trained with and load its weights."""
    config_text, _ = read_checkpoint(path)
    cfg = TrainConfig.from_text(config_text)
    model = SketchLocalizer(cfg.model_config(), seed=cfg.seed)
    load_checkpoint(path, model)
    return model, cfg


# ---------------------------------------------------------------------------
# training


def _sample_query(rng, dataset: Dataset, ann, n_sketch: int):
    present = sorted(set(ann.classes))
    cls = int(present[rng.integers(len(present))])
    pool = dataset.sketch_pool(cls, "train")
    pick = rng.choice(len(pool), size=n_sketch, replace=len(pool) < n_sketch)
    sketches = [dataset.load_sketch(pool[i]) for i in pick]
    return cls, sketches


def train(config: TrainConfig, out_dir: str, log=None) -> str:
    """Run the full training loop; returns the path of the final checkpoint."""
    config.validate()
    if log is None:
        log = lambda msg: print(msg, file=sys.stderr)
    dataset = Dataset(config.dataset)
    model = SketchLocalizer(config.model_config(), seed=config.seed)
    state = OptimState(model.params)
    weights = config.loss_weights()
    rng = np.random.default_rng(derive_seed(config.seed, "train"))
    os.makedirs(out_dir, exist_ok=True)
    ckpt_path = os.path.join(out_dir, "last.sgl")
    config_text = config.to_text()
    size = float(dataset.image_size)
    train_ids = dataset.scene_ids("train")
    history = []

    for epoch in range(config.epochs):
        order = rng.permutation(len(train_ids))
        sums = np.zeros(4)
        n_batches = 0
        for start in range(0, len(order), config.batch_size):
            batch = [train_ids[i] for i in order[start : start + config.batch_size]]
            n_sketch = 5 if rng.random() < config.protocol_mix else 1
            losses = []
            comps = np.zeros(3)
            for sid in batch:
                ann = dataset.annotation(sid)
                cls, sketches = _sample_query(rng, dataset, ann, n_sketch)
                image = dataset.load_scene(sid)
                scores, boxes = model.forward(image, sketches)
                mask = [c == cls for c in ann.classes]
                gt_corners = ann.boxes[mask] / size
                cost = build_cost_matrix(scores.data, boxes.data, gt_corners, weights)
                assign = hungarian_assign(cost)
                lb = total_loss(scores, boxes, gt_corners, assign, weights)
                if not np.isfinite(lb.total):
                    raise NonFiniteError(
                        f"non-finite loss at epoch {epoch} scene {sid} (class {cls})"
                    )
                losses.append(lb.total_tensor)
                comps += (lb.score_loss, lb.l1_loss, lb.giou_loss)
            batch_loss = scale(add_n(losses), 1.0 / len(losses))
            grads = backward(batch_loss)
            adam_step(model.params, grads, state, config.lr, (config.beta1, config.beta2), config.eps)
            sums += (*(comps / len(batch)), batch_loss.item())
            n_batches += 1
        avg = sums / max(1, n_batches)
        history.append(
            {"epoch": epoch, "score": avg[0], "l1": avg[1], "giou": avg[2], "total": avg[3]}
        )
        log(
            f"epoch {epoch + 1}/{config.epochs}: total {avg[3]:.4f} "
            f"(score {avg[0]:.4f}, l1 {avg[1]:.4f}, giou {avg[2]:.4f})"
        )
        save_checkpoint(ckpt_path, model, config_text)

    with open(os.path.join(out_dir, "history.json"), "w") as f:
        json.dump(history, f, indent=1)
    return ckpt_path
