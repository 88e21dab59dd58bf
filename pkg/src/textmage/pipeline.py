"""Three-stage training protocol, checkpoints, curve export, and evaluation.

Stage 1 trains the CNN classifier with SGD; stage 2 freezes it, precomputes
feature vectors, and trains the LSTM decoder with Adam; stage 3 stitches both
models and trains end-to-end. Every stage emits a checkpoint plus a CSV curve
(and a rendered PNG of the same curve when an output directory is given).

Checkpoint format (little-endian): magic ``TMCK``, u32 version (1), u32 tensor
count, then per tensor: u32 name length, UTF-8 name, u8 dtype tag (0 =
float32), u32 ndim, ndim x u32 extents, raw float32 payload; finally a
u64-length-prefixed UTF-8 JSON trailer with the vocabulary and the run config
snapshot. Compute stays float64; payloads are float32, so parameters are
rounded once at checkpoint time and round-trip bit-exactly afterwards.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import decoder as D
from . import encoder as E
from .curves import CurvePoint, export_curves
from . import tensor as T
from .data import (PAD_ID, DatasetManifest, LoadedSample, Vocabulary,
                   build_vocabulary, detokenize, load_image, load_samples,
                   split_dataset)
from .decoder import DecoderConfig, DecoderModel, build_decoder, caption_pair_metrics
from .encoder import EncoderConfig, EncoderModel, build_encoder
from .errors import CheckpointError, ConfigError, DataError
from .metrics import bleu, meteor
from .optim import AdamConfig, SGDConfig, adam_step, init_adam_state
from .tensor import GradTape, Tensor, backward

CHECKPOINT_MAGIC = b"TMCK"
CHECKPOINT_VERSION = 1

IMAGE_SIZES = {"full": 224, "test": 32}

# Full-dataset results observed for this architecture family (9,154 images,
# 18,308 captions, multi-hour epochs). Desk-scale runs do not reproduce them;
# they are kept as documentation targets.
REFERENCE_FULL_SCALE = {
    "dataset": {"images": 9154, "captions": 18308, "classes": 25, "image_size": 224},
    "stage1": {"train_accuracy": 0.758565, "val_accuracy": 0.643476},
    "stage2": {"train_accuracy": 0.807854},
    "joint": {"train_accuracy": 0.916543, "val_accuracy": 0.739776},
    "eval_grid": {
        32: {"bleu1": 66.7, "bleu2": 43.6, "bleu3": 31.5, "bleu4": 23.8, "meteor": 18.227456},
        64: {"bleu1": 64.1, "bleu2": 41.1, "bleu3": 31.7, "bleu4": 22.7, "meteor": 17.906543},
        128: {"bleu1": 65.8, "bleu2": 43.5, "bleu3": 30.9, "bleu4": 23.1, "meteor": 18.458765},
    },
}


@dataclass(frozen=True)
class EncoderSettings:
    conv_blocks: tuple[int, ...] = (16, 32, 64, 128)
    kernel_size: int = 3
    fc_dims: tuple[int, ...] = (256,)
    feature_dim: int = 256
    num_classes: int | None = None  # resolved from the manifest when None


@dataclass(frozen=True)
class DecoderSettings:
    hidden_size: int = 256
    embed_dim: int = 256
    dropout_p: float = 0.5
    max_caption_len: int = 24


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    image_mode: str = "full"
    val_fraction: float = 0.2
    min_freq: int = 1
    encoder: EncoderSettings = EncoderSettings()
    decoder: DecoderSettings = DecoderSettings()
    sgd: SGDConfig = SGDConfig()
    adam: AdamConfig = AdamConfig()
    stage_epochs: tuple[int, int, int] = (20, 25, 35)
    stage_batch_sizes: tuple[int, int, int] = (16, 128, 128)
    joint_from_scratch: bool = False
    out_dir: str | None = None

    def __post_init__(self):
        if self.image_mode not in IMAGE_SIZES:
            raise ConfigError(f"image_mode must be one of {sorted(IMAGE_SIZES)}, got '{self.image_mode}'")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must be in [0, 1), got {self.val_fraction}")
        if len(self.stage_epochs) != 3 or any(e < 0 for e in self.stage_epochs):
            raise ConfigError(f"stage_epochs must be three non-negative ints, got {self.stage_epochs}")
        if len(self.stage_batch_sizes) != 3 or any(b < 1 for b in self.stage_batch_sizes):
            raise ConfigError(f"stage_batch_sizes must be three positive ints, got {self.stage_batch_sizes}")
        if self.min_freq < 1:
            raise ConfigError(f"min_freq must be >= 1, got {self.min_freq}")

    @property
    def image_size(self) -> int:
        return IMAGE_SIZES[self.image_mode]

    def encoder_config(self, num_classes: int) -> EncoderConfig:
        size = self.image_size
        return EncoderConfig(
            input_shape=(3, size, size),
            conv_blocks=tuple(self.encoder.conv_blocks),
            kernel_size=self.encoder.kernel_size,
            fc_dims=tuple(self.encoder.fc_dims),
            feature_dim=self.encoder.feature_dim,
            num_classes=num_classes,
        )

    def decoder_config(self, vocab_size: int) -> DecoderConfig:
        return DecoderConfig(
            vocab_size=vocab_size,
            hidden_size=self.decoder.hidden_size,
            embed_dim=self.decoder.embed_dim,
            dropout_p=self.decoder.dropout_p,
            max_caption_len=self.decoder.max_caption_len,
        )

    @classmethod
    def desk(cls, **overrides) -> "RunConfig":
        """Small configuration that trains in seconds on 32x32 synthetic data."""
        base = dict(
            image_mode="test",
            encoder=EncoderSettings(conv_blocks=(8, 16), fc_dims=(64,), feature_dim=32),
            decoder=DecoderSettings(hidden_size=64, embed_dim=32, max_caption_len=16),
            stage_epochs=(30, 200, 60),
            stage_batch_sizes=(8, 8, 8),
        )
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "image_mode": self.image_mode,
            "val_fraction": self.val_fraction,
            "min_freq": self.min_freq,
            "encoder": {
                "conv_blocks": list(self.encoder.conv_blocks),
                "kernel_size": self.encoder.kernel_size,
                "fc_dims": list(self.encoder.fc_dims),
                "feature_dim": self.encoder.feature_dim,
                "num_classes": self.encoder.num_classes,
            },
            "decoder": dataclasses.asdict(self.decoder),
            "sgd": dataclasses.asdict(self.sgd),
            "adam": dataclasses.asdict(self.adam),
            "stage_epochs": list(self.stage_epochs),
            "stage_batch_sizes": list(self.stage_batch_sizes),
            "joint_from_scratch": self.joint_from_scratch,
            "out_dir": self.out_dir,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "RunConfig":
        if not isinstance(obj, dict):
            raise ConfigError("run config must be a JSON object")

        def take(src: dict, allowed: dict, where: str) -> dict:
            unknown = set(src) - set(allowed)
            if unknown:
                raise ConfigError(f"unknown config key(s) in {where}: {sorted(unknown)}")
            out = dict(allowed)
            out.update(src)
            return out

        defaults = cls()
        top = take(obj, {
            "seed": defaults.seed, "image_mode": defaults.image_mode,
            "val_fraction": defaults.val_fraction, "min_freq": defaults.min_freq,
            "encoder": {}, "decoder": {}, "sgd": {}, "adam": {},
            "stage_epochs": list(defaults.stage_epochs),
            "stage_batch_sizes": list(defaults.stage_batch_sizes),
            "joint_from_scratch": defaults.joint_from_scratch,
            "out_dir": defaults.out_dir,
        }, "run config")
        enc = take(top["encoder"] if isinstance(top["encoder"], dict) else {},
                   dataclasses.asdict(defaults.encoder) | {"conv_blocks": list(defaults.encoder.conv_blocks),
                                                           "fc_dims": list(defaults.encoder.fc_dims)},
                   "encoder")
        dec = take(top["decoder"] if isinstance(top["decoder"], dict) else {},
                   dataclasses.asdict(defaults.decoder), "decoder")
        sgd = take(top["sgd"] if isinstance(top["sgd"], dict) else {},
                   dataclasses.asdict(defaults.sgd), "sgd")
        adam = take(top["adam"] if isinstance(top["adam"], dict) else {},
                    dataclasses.asdict(defaults.adam), "adam")
        return cls(
            seed=int(top["seed"]),
            image_mode=top["image_mode"],
            val_fraction=float(top["val_fraction"]),
            min_freq=int(top["min_freq"]),
            encoder=EncoderSettings(
                conv_blocks=tuple(enc["conv_blocks"]),
                kernel_size=int(enc["kernel_size"]),
                fc_dims=tuple(enc["fc_dims"]),
                feature_dim=int(enc["feature_dim"]),
                num_classes=None if enc["num_classes"] is None else int(enc["num_classes"]),
            ),
            decoder=DecoderSettings(**dec),
            sgd=SGDConfig(**sgd),
            adam=AdamConfig(**adam),
            stage_epochs=tuple(top["stage_epochs"]),
            stage_batch_sizes=tuple(top["stage_batch_sizes"]),
            joint_from_scratch=bool(top["joint_from_scratch"]),
            out_dir=top["out_dir"],
        )


def load_run_config(path) -> RunConfig:
    path = Path(path)
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON ({exc.msg})") from None
    return RunConfig.from_dict(obj)


@dataclass
class Checkpoint:
    stage: str
    params: dict[str, np.ndarray]  # float64 values that are float32-exact
    vocab: Vocabulary
    run_config: RunConfig
    metrics: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION


def quantize_params(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Round float64 parameters through the float32 checkpoint payload dtype."""
    return {k: v.astype(np.float32).astype(np.float64) for k, v in params.items()}


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", ckpt.version),
              struct.pack("<I", len(ckpt.params))]
    for name in sorted(ckpt.params):
        arr = ckpt.params[name]
        name_b = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(name_b)))
        chunks.append(name_b)
        chunks.append(struct.pack("<B", 0))
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.astype("<f4").tobytes())
    trailer = json.dumps({
        "stage": ckpt.stage,
        "vocab": ckpt.vocab.to_json_dict(),
        "run_config": ckpt.run_config.to_dict(),
        "metrics": ckpt.metrics,
    }, ensure_ascii=False, sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks.append(struct.pack("<Q", len(trailer)))
    chunks.append(trailer)
    path.write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, blob: bytes, path: Path):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(f"truncated checkpoint file: {self.path}")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    r = _Reader(blob, path)
    if r.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic in {path}")
    (version,) = r.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {version} in {path} (expected {CHECKPOINT_VERSION})"
        )
    (count,) = r.unpack("<I")
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<I")
        name = r.take(name_len).decode("utf-8")
        (dtype_tag,) = r.unpack("<B")
        if dtype_tag != 0:
            raise CheckpointError(f"unknown dtype tag {dtype_tag} in {path}")
        (ndim,) = r.unpack("<I")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        n_elem = int(np.prod(shape)) if shape else 1
        raw = r.take(4 * n_elem)
        params[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float64)
    (trailer_len,) = r.unpack("<Q")
    trailer_raw = r.take(trailer_len)
    if r.pos != len(blob):
        raise CheckpointError(f"trailing bytes after checkpoint trailer in {path}")
    try:
        trailer = json.loads(trailer_raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CheckpointError(f"corrupted checkpoint trailer in {path}") from None
    return Checkpoint(
        stage=trailer["stage"],
        params=params,
        vocab=Vocabulary.from_json_dict(trailer["vocab"]),
        run_config=RunConfig.from_dict(trailer["run_config"]),
        metrics=trailer.get("metrics", {}),
        version=version,
    )


def _stage_seeds(config: RunConfig):
    ss = np.random.SeedSequence(config.seed)
    return ss.spawn(6)  # split, enc-init, enc-train, dec-init, dec-train, joint-train


@dataclass
class Prepared:
    vocab: Vocabulary
    num_classes: int
    train: list[LoadedSample]
    val: list[LoadedSample]


def prepare_data(config: RunConfig, manifest: DatasetManifest) -> Prepared:
    """Vocabulary from the full manifest, seeded split, images decoded once."""
    if not manifest.samples:
        raise DataError("manifest contains no samples")
    vocab = build_vocabulary(manifest, min_freq=config.min_freq)
    num_classes = config.encoder.num_classes
    if num_classes is None:
        num_classes = max(2, max(s.class_id for s in manifest.samples) + 1)
    s_split = _stage_seeds(config)[0]
    train_m, val_m = split_dataset(manifest, config.val_fraction, seed=s_split)
    return Prepared(
        vocab=vocab,
        num_classes=num_classes,
        train=load_samples(train_m, config.image_size, vocab),
        val=load_samples(val_m, config.image_size, vocab),
    )


def _encoder_from_checkpoint(ckpt: Checkpoint) -> EncoderModel:
    enc_arrays = {k[len("encoder."):]: v for k, v in ckpt.params.items()
                  if k.startswith("encoder.")}
    if not enc_arrays:
        raise CheckpointError(f"checkpoint stage '{ckpt.stage}' holds no encoder parameters")
    cfg = ckpt.run_config
    num_classes = cfg.encoder.num_classes
    if num_classes is None:
        raise CheckpointError("checkpoint run config lacks a resolved class count")
    model = build_encoder(cfg.encoder_config(num_classes), np.random.default_rng(0))
    model.load_arrays(enc_arrays)
    return model


def _decoder_from_checkpoint(ckpt: Checkpoint) -> DecoderModel:
    dec_arrays = {k[len("decoder."):]: v for k, v in ckpt.params.items()
                  if k.startswith("decoder.")}
    if not dec_arrays:
        raise CheckpointError(f"checkpoint stage '{ckpt.stage}' holds no decoder parameters")
    cfg = ckpt.run_config
    model = build_decoder(cfg.decoder_config(ckpt.vocab.size), cfg.encoder.feature_dim,
                          np.random.default_rng(0))
    model.load_arrays(dec_arrays)
    return model


def models_from_checkpoint(ckpt: Checkpoint) -> tuple[EncoderModel | None, DecoderModel | None]:
    enc = dec = None
    if any(k.startswith("encoder.") for k in ckpt.params):
        enc = _encoder_from_checkpoint(ckpt)
    if any(k.startswith("decoder.") for k in ckpt.params):
        dec = _decoder_from_checkpoint(ckpt)
    return enc, dec


def _resolved_config(config: RunConfig, num_classes: int) -> RunConfig:
    return dataclasses.replace(
        config, encoder=dataclasses.replace(config.encoder, num_classes=num_classes))


@dataclass
class StageResult:
    checkpoint: Checkpoint
    curve: list[CurvePoint]
    info: dict


def _write_stage_outputs(result: StageResult, out_dir, stage_name: str) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.checkpoint, out_dir / f"{stage_name}.ckpt")
    export_curves(result.curve, out_dir / f"{stage_name}_curve.csv")
    if result.curve:
        from .figures import render_curves
        render_curves(result.curve, out_dir / f"{stage_name}_curve.png",
                      title=f"{stage_name} training")


def train_stage1(config: RunConfig, manifest: DatasetManifest,
                 out_dir=None) -> StageResult:
    """20-epoch-style classification stage: SGD over the CNN, best-val-accuracy weights."""
    prep = prepare_data(config, manifest)
    seeds = _stage_seeds(config)
    model = build_encoder(config.encoder_config(prep.num_classes), np.random.default_rng(seeds[1]))
    train_xy = [(s.image, s.class_id) for s in prep.train]
    val_xy = [(s.image, s.class_id) for s in prep.val]
    result = E.train_encoder(model, train_xy, val_xy, config.sgd,
                             epochs=config.stage_epochs[0],
                             batch_size=config.stage_batch_sizes[0],
                             rng=np.random.default_rng(seeds[2]))
    best = quantize_params(result.best_state)
    model.load_arrays(best)
    metrics: dict = {"best_epoch": result.best_epoch}
    train_loss, train_acc = E._classification_metrics(model, train_xy)
    metrics["train_loss"], metrics["train_accuracy"] = train_loss, train_acc
    if val_xy:
        val_loss, val_acc = E._classification_metrics(model, val_xy)
        metrics["val_loss"], metrics["val_accuracy"] = val_loss, val_acc
    ckpt = Checkpoint(
        stage="stage1",
        params={f"encoder.{k}": v for k, v in best.items()},
        vocab=prep.vocab,
        run_config=_resolved_config(config, prep.num_classes),
        metrics=metrics,
    )
    out = StageResult(ckpt, result.curve, metrics)
    if out_dir is not None:
        _write_stage_outputs(out, out_dir, "stage1")
    return out


class _CountingEncoder:
    """Wraps an encoder to count feature computations (cache instrumentation)."""

    def __init__(self, model: EncoderModel):
        self.model = model
        self.encode_calls = 0

    def encode(self, image: Tensor) -> Tensor:
        self.encode_calls += 1
        return E.encode(self.model, image)


def _caption_pairs(samples: list[LoadedSample], features: list[Tensor]):
    return [(features[i], ids) for i, s in enumerate(samples) for ids in s.caption_ids]


def train_stage2(config: RunConfig, manifest: DatasetManifest, stage1_ckpt: Checkpoint,
                 out_dir=None) -> StageResult:
    """Decoder stage: encoder frozen, features cached once per image, Adam training."""
    config = _resolved_config(config, _require_classes(stage1_ckpt))
    prep = prepare_data(config, manifest)
    seeds = _stage_seeds(config)
    encoder = _encoder_from_checkpoint(stage1_ckpt)
    counting = _CountingEncoder(encoder)
    train_features = [counting.encode(s.image) for s in prep.train]
    val_features = [counting.encode(s.image) for s in prep.val]
    train_pairs = _caption_pairs(prep.train, train_features)
    val_pairs = _caption_pairs(prep.val, val_features)

    dec_model = build_decoder(config.decoder_config(prep.vocab.size),
                              config.encoder.feature_dim, np.random.default_rng(seeds[3]))
    result = D.train_decoder(dec_model, train_pairs, val_pairs, config.adam,
                             epochs=config.stage_epochs[1],
                             batch_size=config.stage_batch_sizes[1],
                             rng=np.random.default_rng(seeds[4]))
    best = quantize_params(result.best_state)
    dec_model.load_arrays(best)
    metrics: dict = {"best_epoch": result.best_epoch,
                     "encode_calls": counting.encode_calls}
    train_loss, train_acc = caption_pair_metrics(dec_model, train_pairs)
    metrics["train_loss"], metrics["train_accuracy"] = train_loss, train_acc
    if val_pairs:
        val_loss, val_acc = caption_pair_metrics(dec_model, val_pairs)
        metrics["val_loss"], metrics["val_accuracy"] = val_loss, val_acc
    params = {k: v for k, v in stage1_ckpt.params.items() if k.startswith("encoder.")}
    params.update({f"decoder.{k}": v for k, v in best.items()})
    ckpt = Checkpoint(stage="stage2", params=params, vocab=prep.vocab,
                      run_config=config, metrics=metrics)
    out = StageResult(ckpt, result.curve, metrics)
    if out_dir is not None:
        _write_stage_outputs(out, out_dir, "stage2")
    return out


def _require_classes(ckpt: Checkpoint) -> int:
    n = ckpt.run_config.encoder.num_classes
    if n is None:
        raise CheckpointError("checkpoint run config lacks a resolved class count")
    return n


def joint_metrics(encoder: EncoderModel, dec_model: DecoderModel,
                  samples: list[LoadedSample]) -> tuple[float, float]:
    """Eval-mode teacher-forced metrics with features computed on the fly."""
    features = [E.encode(encoder, s.image) for s in samples]
    return caption_pair_metrics(dec_model, _caption_pairs(samples, features))


def train_joint(config: RunConfig, manifest: DatasetManifest, stage2_ckpt: Checkpoint,
                out_dir=None) -> StageResult:
    """End-to-end stage: gradients cross the feature boundary, Adam on all parameters."""
    config = _resolved_config(config, _require_classes(stage2_ckpt))
    prep = prepare_data(config, manifest)
    seeds = _stage_seeds(config)
    if config.joint_from_scratch:
        encoder = build_encoder(config.encoder_config(prep.num_classes),
                                np.random.default_rng(seeds[1]))
        dec_model = build_decoder(config.decoder_config(prep.vocab.size),
                                  config.encoder.feature_dim, np.random.default_rng(seeds[3]))
    else:
        encoder = _encoder_from_checkpoint(stage2_ckpt)
        dec_model = _decoder_from_checkpoint(stage2_ckpt)

    all_params = {f"encoder.{k}": p for k, p in encoder.params.items()}
    all_params.update({f"decoder.{k}": p for k, p in dec_model.params.items()})
    train_pairs = [(s.image, ids) for s in prep.train for ids in s.caption_ids]
    if not train_pairs:
        raise DataError("joint stage has no training pairs")
    state = init_adam_state({k: p.data for k, p in all_params.items()})
    rng = np.random.default_rng(seeds[5])
    curve: list[CurvePoint] = []
    best_state = {k: p.data.copy() for k, p in all_params.items()}
    best_metric = np.inf
    best_epoch = 0
    epochs = config.stage_epochs[2]
    batch_size = config.stage_batch_sizes[2]
    n = len(train_pairs)
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n)
        loss_sum = 0.0
        correct = 0
        total = 0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            with GradTape() as tape:
                batch_loss = None
                for i in idx:
                    image, caption = train_pairs[i]
                    feature = E.encode(encoder, image)
                    logits, loss = D.decode_train(dec_model, feature, caption, rng=rng, train=True)
                    batch_loss = loss if batch_loss is None else T.add(batch_loss, loss)
                    targets = np.asarray(caption)
                    keep = targets != PAD_ID
                    pred = logits.data[keep].argmax(axis=1)
                    correct += int((pred == targets[keep]).sum())
                    total += int(keep.sum())
                batch_loss = T.mul(batch_loss, 1.0 / len(idx))
                backward(batch_loss, tape)
            grads = {}
            for name, p in all_params.items():
                g = tape.grad(p)
                grads[name] = g.data if g is not None else np.zeros_like(p.data)
            new_params, state = adam_step({k: p.data for k, p in all_params.items()},
                                          grads, state, config.adam)
            for name, arr in new_params.items():
                all_params[name].assign(arr)
            loss_sum += batch_loss.item() * len(idx)
        train_loss = loss_sum / n
        train_acc = correct / total if total else 0.0
        val_loss = val_acc = None
        if prep.val:
            val_loss, val_acc = joint_metrics(encoder, dec_model, prep.val)
        curve.append(CurvePoint(epoch, train_loss, train_acc, val_loss, val_acc))
        metric = val_loss if prep.val else train_loss
        if metric < best_metric:
            best_metric = metric
            best_state = {k: p.data.copy() for k, p in all_params.items()}
            best_epoch = epoch
    best = quantize_params(best_state)
    for name, arr in best.items():
        all_params[name].assign(arr)
    metrics: dict = {"best_epoch": best_epoch}
    train_loss, train_acc = joint_metrics(encoder, dec_model, prep.train)
    metrics["train_loss"], metrics["train_accuracy"] = train_loss, train_acc
    if prep.val:
        val_loss, val_acc = joint_metrics(encoder, dec_model, prep.val)
        metrics["val_loss"], metrics["val_accuracy"] = val_loss, val_acc
    ckpt = Checkpoint(stage="stage3", params=best, vocab=prep.vocab,
                      run_config=config, metrics=metrics)
    out = StageResult(ckpt, curve, metrics)
    if out_dir is not None:
        _write_stage_outputs(out, out_dir, "stage3")
    return out


def train_all(config: RunConfig, manifest: DatasetManifest, out_dir=None) -> dict[str, StageResult]:
    s1 = train_stage1(config, manifest, out_dir)
    s2 = train_stage2(config, manifest, s1.checkpoint, out_dir)
    s3 = train_joint(config, manifest, s2.checkpoint, out_dir)
    return {"stage1": s1, "stage2": s2, "stage3": s3}


def caption_image(ckpt: Checkpoint, image_path, beam_width: int | None = None) -> str:
    """Load -> encode -> decode -> detokenize for one image file."""
    encoder, dec_model = models_from_checkpoint(ckpt)
    if encoder is None or dec_model is None:
        raise CheckpointError(
            f"captioning needs encoder and decoder weights; stage '{ckpt.stage}' checkpoint lacks them"
        )
    size = ckpt.run_config.image_size
    image = load_image(image_path, (size, size))
    feature = E.encode(encoder, image)
    max_len = ckpt.run_config.decoder.max_caption_len
    if beam_width is None or beam_width == 1:
        ids = D.greedy_decode(dec_model, feature, max_len)
    else:
        ids = D.beam_decode(dec_model, feature, beam_width, max_len)
    return detokenize(ckpt.vocab.decode(ids))


def evaluate_checkpoint(ckpt: Checkpoint, samples: list[LoadedSample]) -> dict:
    """Greedy-decode every sample, score BLEU/METEOR/token accuracy, emit a report dict."""
    if not samples:
        raise DataError("evaluation split is empty")
    encoder, dec_model = models_from_checkpoint(ckpt)
    if encoder is None or dec_model is None:
        raise CheckpointError(
            f"evaluation needs encoder and decoder weights; stage '{ckpt.stage}' checkpoint lacks them"
        )
    max_len = ckpt.run_config.decoder.max_caption_len
    candidates = []
    references = []
    meteor_scores = []
    features = []
    for s in samples:
        feature = E.encode(encoder, s.image)
        features.append(feature)
        ids = D.greedy_decode(dec_model, feature, max_len)
        cand_tokens = ckpt.vocab.decode(ids)
        candidates.append(cand_tokens)
        references.append(s.caption_tokens)
        meteor_scores.append(meteor(cand_tokens, s.caption_tokens).score)
    bleu_report = bleu(candidates, references)
    pairs = _caption_pairs(samples, features)
    correct = 0
    total = 0
    for feature, caption in pairs:
        logits, _ = D.decode_train(dec_model, feature, caption, train=False)
        targets = np.asarray(caption)
        keep = targets != 0
        correct += int((logits.data[keep].argmax(axis=1) == targets[keep]).sum())
        total += int(keep.sum())
    meteor_mean = float(np.mean(meteor_scores))
    return {
        "bleu": bleu_report.to_json_dict(),
        "meteor": meteor_mean,
        "meteor_x100": 100.0 * meteor_mean,
        "token_accuracy": correct / total if total else 0.0,
        "samples": len(samples),
    }


def write_report(report: dict, path) -> None:
    """Serialize an evaluation report as JSON and render its figure next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, ensure_ascii=False, sort_keys=True, indent=2) + "\n",
                    encoding="utf-8")
    from .figures import render_eval_report
    render_eval_report(report, path.with_suffix(".png"))


def run_hidden_sweep(ckpt: Checkpoint, manifest: DatasetManifest,
                     sizes: list[int]) -> dict:
    """Retrain the decoder per hidden size on the checkpoint's frozen encoder, then evaluate.

    Produces one grid row per size with BLEU-1..4 and METEOR, the same shape
    as the reference evaluation table.
    """
    if not sizes:
        raise ConfigError("hidden-size sweep needs at least one size")
    base = ckpt.run_config
    rows = []
    for size in sizes:
        cfg = dataclasses.replace(base, decoder=dataclasses.replace(base.decoder, hidden_size=size))
        stage2 = train_stage2(cfg, manifest, ckpt)
        prep = prepare_data(cfg, manifest)
        eval_samples = prep.val if prep.val else prep.train
        report = evaluate_checkpoint(stage2.checkpoint, eval_samples)
        rows.append({"hidden_size": size, **report})
    return {"sweep": rows}
