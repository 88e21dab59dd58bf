"""LSTM caption decoder conditioned on the encoder feature vector.

The image feature is projected into embedding space and consumed as the very
first step; ground-truth tokens follow under teacher forcing. Decoding is
greedy argmax or length-normalized beam search.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .curves import CurvePoint
from .data import END_ID, PAD_ID, START_ID
from .errors import ConfigError, DataError, ShapeError
from .optim import AdamConfig, adam_step, init_adam_state
from .tensor import GradTape, Tensor, backward

GATES = ("i", "f", "o", "g")


@dataclass(frozen=True)
class DecoderConfig:
    vocab_size: int
    hidden_size: int = 256
    embed_dim: int = 256
    dropout_p: float = 0.5
    max_caption_len: int = 24  # encoded length, START and END included

    def __post_init__(self):
        if self.hidden_size < 1:
            raise ConfigError(f"hidden_size must be >= 1, got {self.hidden_size}")
        if self.vocab_size < 4:
            raise ConfigError(f"vocab_size must cover the special tokens, got {self.vocab_size}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.max_caption_len < 3:
            raise ConfigError(f"max_caption_len must be >= 3, got {self.max_caption_len}")


@dataclass
class LSTMCell:
    """Gated recurrent cell; the memory path is the additive f*c + i*g update."""

    input_dim: int
    hidden_size: int
    params: dict[str, Tensor] = field(default_factory=dict)

    def step(self, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        return lstm_step(self, x, h, c)


def lstm_step(cell: LSTMCell, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
    """One LSTM step on vectors: x[E], h[H], c[H] -> (h', c')."""
    if x.shape != (cell.input_dim,) or h.shape != (cell.hidden_size,) or c.shape != (cell.hidden_size,):
        raise ShapeError(
            f"lstm_step shapes x{x.shape}, h{h.shape}, c{c.shape} do not match "
            f"(E={cell.input_dim}, H={cell.hidden_size})"
        )
    p = cell.params
    pre = {}
    for g in GATES:
        pre[g] = T.add(T.affine(x, p[f"W_{g}"], p[f"b_{g}"]), T.affine(h, p[f"U_{g}"]))
    i = T.sigmoid(pre["i"])
    f = T.sigmoid(pre["f"])
    o = T.sigmoid(pre["o"])
    g_t = T.tanh(pre["g"])
    c_new = T.add(T.mul(f, c), T.mul(i, g_t))
    h_new = T.mul(o, T.tanh(c_new))
    return h_new, c_new


@dataclass
class DecoderModel:
    config: DecoderConfig
    feature_dim: int
    cell: LSTMCell
    params: dict[str, Tensor] = field(default_factory=dict)

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            if name not in arrays:
                raise ShapeError(f"missing decoder parameter '{name}'")
            p.assign(arrays[name])


def build_decoder(config: DecoderConfig, feature_dim: int,
                  rng: np.random.Generator) -> DecoderModel:
    """He-uniform weights over their fan-in, zero biases; order of draws is fixed."""
    if feature_dim < 1:
        raise ConfigError(f"feature_dim must be >= 1, got {feature_dim}")
    e, hdim, v = config.embed_dim, config.hidden_size, config.vocab_size

    def he(shape, fan_in):
        bound = np.sqrt(6.0 / fan_in)
        return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)

    params: dict[str, Tensor] = {}
    params["embed.table"] = he((v, e), e)
    params["img.weight"] = he((feature_dim, e), feature_dim)
    params["img.bias"] = Tensor(np.zeros(e), requires_grad=True)
    cell = LSTMCell(input_dim=e, hidden_size=hdim)
    for g in GATES:
        cell.params[f"W_{g}"] = he((e, hdim), e)
        cell.params[f"U_{g}"] = he((hdim, hdim), hdim)
        cell.params[f"b_{g}"] = Tensor(np.zeros(hdim), requires_grad=True)
    for name, tensor in cell.params.items():
        params[f"cell.{name}"] = tensor
    params["out.weight"] = he((hdim, v), hdim)
    params["out.bias"] = Tensor(np.zeros(v), requires_grad=True)
    return DecoderModel(config=config, feature_dim=feature_dim, cell=cell, params=params)


def _validate_caption(model: DecoderModel, caption: list[int]) -> None:
    if len(caption) < 2 or caption[0] != START_ID:
        raise DataError("caption must begin with START")
    if END_ID not in caption:
        raise DataError("caption must contain END")
    end_pos = caption.index(END_ID)
    if any(t != PAD_ID for t in caption[end_pos + 1:]):
        raise DataError("only PAD may follow END in an encoded caption")
    if len(caption) > model.config.max_caption_len:
        raise DataError(
            f"caption length {len(caption)} exceeds max_caption_len {model.config.max_caption_len}"
        )
    for t in caption:
        if not 0 <= t < model.config.vocab_size:
            raise IndexError(f"caption token id {t} out of range [0, {model.config.vocab_size})")


def _image_step_input(model: DecoderModel, feature: Tensor) -> Tensor:
    if feature.shape != (model.feature_dim,):
        raise ShapeError(f"feature shape {feature.shape} != ({model.feature_dim},)")
    return T.affine(feature, model.params["img.weight"], model.params["img.bias"])


def decode_train(model: DecoderModel, feature: Tensor, caption: list[int],
                 rng: np.random.Generator | None = None,
                 train: bool = True) -> tuple[Tensor, Tensor]:
    """Teacher-forced pass: returns per-step logits [T,V] and the mean loss.

    Step 0 consumes the projected image feature and is scored against
    caption[0] (START); step t >= 1 consumes the embedding of caption[t-1]
    and is scored against caption[t]. PAD targets are ignored. Dropout hits
    the hidden state before the output projection, train mode only.
    """
    caption = list(caption)
    _validate_caption(model, caption)
    mode = "train" if train else "eval"
    hdim = model.config.hidden_size
    h = Tensor(np.zeros(hdim))
    c = Tensor(np.zeros(hdim))
    x = _image_step_input(model, feature)
    rows = []
    for t in range(len(caption)):
        if t > 0:
            emb = T.embedding_lookup(model.params["embed.table"], [caption[t - 1]])
            x = T.reshape(emb, (model.config.embed_dim,))
        h, c = lstm_step(model.cell, x, h, c)
        hidden = T.dropout(h, model.config.dropout_p, mode, rng)
        rows.append(T.affine(hidden, model.params["out.weight"], model.params["out.bias"]))
    logits = T.stack_rows(rows)
    loss = T.cross_entropy(logits, caption, ignore_id=PAD_ID)
    return logits, loss


def _strip_specials(tokens: list[int]) -> list[int]:
    return [t for t in tokens if t not in (PAD_ID, START_ID, END_ID)]


def greedy_decode(model: DecoderModel, feature: Tensor, max_len: int) -> list[int]:
    """Feed the argmax token back in until END or ``max_len`` steps; eval mode."""
    if max_len < 1:
        raise ConfigError(f"max_len must be >= 1, got {max_len}")
    h = Tensor(np.zeros(model.config.hidden_size))
    c = Tensor(np.zeros(model.config.hidden_size))
    x = _image_step_input(model, feature)
    out: list[int] = []
    for _ in range(max_len):
        h, c = lstm_step(model.cell, x, h, c)
        logits = T.affine(h, model.params["out.weight"], model.params["out.bias"])
        token = int(np.argmax(logits.data))
        if token == END_ID:
            break
        out.append(token)
        emb = T.embedding_lookup(model.params["embed.table"], [token])
        x = T.reshape(emb, (model.config.embed_dim,))
    return _strip_specials(out)


def beam_decode(model: DecoderModel, feature: Tensor, beam_width: int,
                max_len: int) -> list[int]:
    """Length-normalized beam search; ties break toward the smaller token sequence.

    Hypotheses that emit END retire from the beam. ``beam_width=1`` reproduces
    greedy decoding exactly; width >= V**max_len explores every sequence.
    """
    _score, tokens = beam_search(model, feature, beam_width, max_len)
    return _strip_specials(list(tokens))


def beam_search(model: DecoderModel, feature: Tensor, beam_width: int,
                max_len: int) -> tuple[float, tuple[int, ...]]:
    """Raw beam result: (normalized log-prob score, unstripped token sequence)."""
    if beam_width < 1:
        raise ConfigError(f"beam_width must be >= 1, got {beam_width}")
    if max_len < 1:
        raise ConfigError(f"max_len must be >= 1, got {max_len}")
    h0 = Tensor(np.zeros(model.config.hidden_size))
    c0 = Tensor(np.zeros(model.config.hidden_size))
    x0 = _image_step_input(model, feature)
    # live hypothesis: (tokens, logprob sum, h, c, next input)
    live = [((), 0.0, h0, c0, x0)]
    finished: list[tuple[float, tuple[int, ...]]] = []  # (normalized score, tokens)
    for _ in range(max_len):
        if not live:
            break
        candidates = []
        for tokens, logp, h, c, x in live:
            h2, c2 = lstm_step(model.cell, x, h, c)
            logits = T.affine(h2, model.params["out.weight"], model.params["out.bias"])
            log_probs = T.log_softmax_values(logits.data)
            for v in range(model.config.vocab_size):
                seq = tokens + (v,)
                score = (logp + float(log_probs[v])) / len(seq)
                candidates.append((score, seq, logp + float(log_probs[v]), h2, c2))
        candidates.sort(key=lambda item: (-item[0], item[1]))
        live = []
        for score, seq, logp, h2, c2 in candidates[:beam_width]:
            if seq[-1] == END_ID:
                finished.append((score, seq))
            else:
                emb = T.embedding_lookup(model.params["embed.table"], [seq[-1]])
                x2 = T.reshape(emb, (model.config.embed_dim,))
                live.append((seq, logp, h2, c2, x2))
    for tokens, logp, _h, _c, _x in live:
        finished.append((logp / len(tokens), tokens))
    return min(finished, key=lambda item: (-item[0], item[1]))


@dataclass
class DecoderTrainResult:
    curve: list[CurvePoint]
    best_state: dict[str, np.ndarray]
    best_epoch: int


def caption_pair_metrics(model: DecoderModel, pairs) -> tuple[float, float]:
    """Eval-mode teacher-forced (mean loss, token accuracy) over (feature, caption) pairs."""
    losses = []
    correct = 0
    total = 0
    for feature, caption in pairs:
        logits, loss = decode_train(model, feature, caption, train=False)
        losses.append(loss.item())
        targets = np.asarray(caption)
        keep = targets != PAD_ID
        pred = logits.data[keep].argmax(axis=1)
        correct += int((pred == targets[keep]).sum())
        total += int(keep.sum())
    return float(np.mean(losses)), (correct / total if total else 0.0)


def train_decoder(model: DecoderModel, train_pairs, val_pairs, adam: AdamConfig,
                  epochs: int, batch_size: int,
                  rng: np.random.Generator) -> DecoderTrainResult:
    """Adam training over precomputed (feature, caption) pairs.

    Batch loss is the mean of per-pair losses. The snapshot with the lowest
    validation loss (train loss without a split) is kept alongside the final
    weights.
    """
    if not train_pairs:
        raise DataError("cannot train the decoder on an empty dataset")
    if epochs < 0:
        raise ConfigError(f"epochs must be >= 0, got {epochs}")
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    state = init_adam_state(model.param_arrays())
    curve: list[CurvePoint] = []
    best_state = {k: p.data.copy() for k, p in model.params.items()}
    best_metric = np.inf
    best_epoch = 0
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
                    feature, caption = train_pairs[i]
                    logits, loss = decode_train(model, feature, caption, rng=rng, train=True)
                    batch_loss = loss if batch_loss is None else T.add(batch_loss, loss)
                    targets = np.asarray(caption)
                    keep = targets != PAD_ID
                    pred = logits.data[keep].argmax(axis=1)
                    correct += int((pred == targets[keep]).sum())
                    total += int(keep.sum())
                batch_loss = T.mul(batch_loss, 1.0 / len(idx))
                backward(batch_loss, tape)
            grads = {}
            for name, p in model.params.items():
                g = tape.grad(p)
                grads[name] = g.data if g is not None else np.zeros_like(p.data)
            new_params, state = adam_step(model.param_arrays(), grads, state, adam)
            for name, arr in new_params.items():
                model.params[name].assign(arr)
            loss_sum += batch_loss.item() * len(idx)
        train_loss = loss_sum / n
        train_acc = correct / total if total else 0.0
        val_loss = val_acc = None
        if val_pairs:
            val_loss, val_acc = caption_pair_metrics(model, val_pairs)
        curve.append(CurvePoint(epoch, train_loss, train_acc, val_loss, val_acc))
        metric = val_loss if val_pairs else train_loss
        if metric < best_metric:
            best_metric = metric
            best_state = {k: p.data.copy() for k, p in model.params.items()}
            best_epoch = epoch
    return DecoderTrainResult(curve=curve, best_state=best_state, best_epoch=best_epoch)
