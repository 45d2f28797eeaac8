"""Bidirectional-LSTM tagger: token sequences to 11-way attack-entity tags.

The network embeds tokens (via the trained word embedding), runs a forward
and a backward LSTM, concatenates the two hidden states per position and
applies a shared dense+softmax head.  Training is mini-batch SGD over the
class-weighted cross-entropy, with backpropagation through time; class O
gets weight 1, the ten entity classes get weight 10.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import Token, LabeledSentence
from .embedding import EmbeddingModel
from .errors import (
    DimensionMismatch,
    EmptyDataset,
    EmptySentence,
    FormatVersionMismatch,
    LengthMismatch,
    MalformedRecord,
    UnreadableFile,
)

#: The 11 tags, O last; indices are the class ids everywhere.
ALL_TAGS: tuple[str, ...] = (
    "VECTOR",
    "TECHNIQUE",
    "IMPACT",
    "MEANS",
    "PLATFORM",
    "OS",
    "VERSION",
    "PROTOCOL",
    "PORT",
    "PRIVILEGE",
    "O",
)
ENTITY_TAGS: tuple[str, ...] = ALL_TAGS[:10]
O_TAG = "O"
TAG_INDEX: dict[str, int] = {t: i for i, t in enumerate(ALL_TAGS)}

#: Loss weights: 10 for the entity classes, 1 for O.
LOSS_WEIGHTS = np.array([10.0] * 10 + [1.0])

MODEL_MARKER = "# vuln2rule-blstm 1"


@dataclass(frozen=True)
class BlstmConfig:
    max_len: int = 150
    dim: int = 100
    hidden: int = 100
    n_classes: int = len(ALL_TAGS)
    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 0.01
    clip_norm: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.max_len < 1 or self.hidden < 1:
            raise ValueError("max_len and hidden must be >= 1")
        if self.n_classes != len(ALL_TAGS):
            raise ValueError(f"n_classes must be {len(ALL_TAGS)}")


@dataclass
class BlstmModel:
    params: dict[str, np.ndarray]
    config: BlstmConfig


PARAM_SHAPES = {
    "fw_wx": ("dim", "4h"),
    "fw_wh": ("h", "4h"),
    "fw_b": ("4h",),
    "bw_wx": ("dim", "4h"),
    "bw_wh": ("h", "4h"),
    "bw_b": ("4h",),
    "dense_w": ("2h", "classes"),
    "dense_b": ("classes",),
}


def init_params(config: BlstmConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    d, h, o = config.dim, config.hidden, config.n_classes
    sizes = {"dim": d, "h": h, "4h": 4 * h, "2h": 2 * h, "classes": o}
    params: dict[str, np.ndarray] = {}
    for name, dims in PARAM_SHAPES.items():
        shape = tuple(sizes[k] for k in dims)
        if name.endswith("_b"):
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.uniform(-0.1, 0.1, size=shape)
    # forget-gate bias starts at 1 to keep early memory open
    params["fw_b"][h : 2 * h] = 1.0
    params["bw_b"][h : 2 * h] = 1.0
    return params


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _lstm_forward(x: np.ndarray, wx: np.ndarray, wh: np.ndarray, b: np.ndarray):
    batch, steps, _ = x.shape
    h_size = wh.shape[0]
    h = np.zeros((batch, h_size))
    c = np.zeros((batch, h_size))
    outputs = np.zeros((batch, steps, h_size))
    cache = []
    for t in range(steps):
        z = x[:, t] @ wx + h @ wh + b
        gi = _sigmoid(z[:, :h_size])
        gf = _sigmoid(z[:, h_size : 2 * h_size])
        gg = np.tanh(z[:, 2 * h_size : 3 * h_size])
        go = _sigmoid(z[:, 3 * h_size :])
        c_new = gf * c + gi * gg
        tanh_c = np.tanh(c_new)
        h_new = go * tanh_c
        cache.append((x[:, t], h, c, gi, gf, gg, go, tanh_c))
        h, c = h_new, c_new
        outputs[:, t] = h
    return outputs, cache


def _lstm_backward(d_out: np.ndarray, cache, wx: np.ndarray, wh: np.ndarray):
    batch, steps, h_size = d_out.shape
    dwx = np.zeros_like(wx)
    dwh = np.zeros_like(wh)
    db = np.zeros(4 * h_size)
    dh_next = np.zeros((batch, h_size))
    dc_next = np.zeros((batch, h_size))
    for t in reversed(range(steps)):
        x_t, h_prev, c_prev, gi, gf, gg, go, tanh_c = cache[t]
        dh = d_out[:, t] + dh_next
        d_go = dh * tanh_c
        dc = dc_next + dh * go * (1.0 - tanh_c**2)
        d_gf = dc * c_prev
        d_gi = dc * gg
        d_gg = dc * gi
        dc_next = dc * gf
        dz = np.concatenate(
            [
                d_gi * gi * (1.0 - gi),
                d_gf * gf * (1.0 - gf),
                d_gg * (1.0 - gg**2),
                d_go * go * (1.0 - go),
            ],
            axis=1,
        )
        dwx += x_t.T @ dz
        dwh += h_prev.T @ dz
        db += dz.sum(axis=0)
        dh_next = dz @ wh.T
    return dwx, dwh, db


def _reverse_within_lengths(x: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    out = np.zeros_like(x)
    for b, n in enumerate(lengths):
        out[b, :n] = x[b, :n][::-1]
    return out


def forward(
    params: dict[str, np.ndarray], x: np.ndarray, lengths: np.ndarray
):
    """Log-probabilities (batch, steps, classes) plus the backprop cache.

    The backward LSTM consumes each sentence reversed within its true length,
    so trailing padding never influences real positions.
    """
    hs_f, cache_f = _lstm_forward(x, params["fw_wx"], params["fw_wh"], params["fw_b"])
    x_rev = _reverse_within_lengths(x, lengths)
    hs_r, cache_r = _lstm_forward(x_rev, params["bw_wx"], params["bw_wh"], params["bw_b"])
    hs_b = _reverse_within_lengths(hs_r, lengths)
    concat = np.concatenate([hs_f, hs_b], axis=2)
    logits = concat @ params["dense_w"] + params["dense_b"]
    shifted = logits - logits.max(axis=2, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=2, keepdims=True))
    return log_probs, (cache_f, cache_r, concat, lengths)


def loss_and_grads(
    params: dict[str, np.ndarray],
    x: np.ndarray,
    tag_ids: np.ndarray,
    lengths: np.ndarray,
    class_weights: np.ndarray = LOSS_WEIGHTS,
):
    """Weighted cross-entropy summed over real positions, its parameter
    gradients, and the per-sentence loss vector."""
    batch, steps, _ = x.shape
    log_probs, (cache_f, cache_r, concat, _) = forward(params, x, lengths)
    mask = np.arange(steps)[None, :] < lengths[:, None]
    safe_ids = np.where(mask, tag_ids, 0)
    token_w = np.where(mask, class_weights[safe_ids], 0.0)
    rows = np.arange(batch)[:, None], np.arange(steps)[None, :], safe_ids
    per_token = -token_w * log_probs[rows]
    per_sentence = per_token.sum(axis=1)
    total = float(per_sentence.sum())

    dlogits = np.exp(log_probs)
    one_hot_sub = np.zeros_like(dlogits)
    one_hot_sub[rows] = 1.0
    dlogits = (dlogits - one_hot_sub) * token_w[:, :, None]

    h_size = params["fw_wh"].shape[0]
    flat_concat = concat.reshape(-1, 2 * h_size)
    flat_dlogits = dlogits.reshape(-1, dlogits.shape[2])
    grads: dict[str, np.ndarray] = {
        "dense_w": flat_concat.T @ flat_dlogits,
        "dense_b": flat_dlogits.sum(axis=0),
    }
    dconcat = dlogits @ params["dense_w"].T
    d_hs_f = dconcat[:, :, :h_size]
    d_hs_r = _reverse_within_lengths(dconcat[:, :, h_size:], lengths)
    grads["fw_wx"], grads["fw_wh"], grads["fw_b"] = _lstm_backward(
        d_hs_f, cache_f, params["fw_wx"], params["fw_wh"]
    )
    grads["bw_wx"], grads["bw_wh"], grads["bw_b"] = _lstm_backward(
        d_hs_r, cache_r, params["bw_wx"], params["bw_wh"]
    )
    return total, grads, per_sentence


def _embed_norms(norms: list[str], emb: EmbeddingModel) -> np.ndarray:
    return np.stack([emb.w_in[emb.vocab.id_for(w)] for w in norms])


def _split_long(
    sentences: list[tuple[list[str], list[int]]], max_len: int
) -> list[tuple[list[str], list[int]]]:
    # sentences longer than max_len are split at max_len with no overlap
    out = []
    for norms_, ids in sentences:
        for start in range(0, len(norms_), max_len):
            out.append((norms_[start : start + max_len], ids[start : start + max_len]))
    return out


def train_ner(
    data: list[LabeledSentence],
    emb: EmbeddingModel,
    config: BlstmConfig,
) -> BlstmModel:
    """Train the tagger; deterministic for a fixed seed.

    The gradient step uses the mean of per-sentence gradients over each
    mini-batch; optional global-norm clipping via ``config.clip_norm``.
    """
    if not data:
        raise EmptyDataset("no labeled sentences")
    if emb.dim != config.dim:
        raise DimensionMismatch(
            f"embedding dim {emb.dim} != tagger dim {config.dim}"
        )
    prepared = _split_long(
        [(s.norms(), [TAG_INDEX[t] for t in s.tags]) for s in data], config.max_len
    )
    embedded = [
        (_embed_norms(norms_, emb), np.asarray(ids)) for norms_, ids in prepared
    ]

    rng = np.random.default_rng(config.seed)
    params = init_params(config, rng)
    lr = config.learning_rate
    for _ in range(config.epochs):
        order = rng.permutation(len(embedded))
        for start in range(0, len(order), config.batch_size):
            batch_idx = order[start : start + config.batch_size]
            xs = [embedded[i][0] for i in batch_idx]
            ys = [embedded[i][1] for i in batch_idx]
            lengths = np.array([len(y) for y in ys])
            width = int(lengths.max())
            x = np.zeros((len(xs), width, config.dim))
            tag_ids = np.zeros((len(xs), width), dtype=np.intp)
            for b, (xb, yb) in enumerate(zip(xs, ys)):
                x[b, : len(yb)] = xb
                tag_ids[b, : len(yb)] = yb
            _, grads, _ = loss_and_grads(params, x, tag_ids, lengths)
            scale = 1.0 / len(xs)
            if config.clip_norm is not None:
                norm = np.sqrt(
                    sum(float(((g * scale) ** 2).sum()) for g in grads.values())
                )
                if norm > config.clip_norm:
                    scale *= config.clip_norm / norm
            for name in params:
                params[name] -= lr * scale * grads[name]
    return BlstmModel(params=params, config=config)


def tag(
    model: BlstmModel, emb: EmbeddingModel, sentence: list[Token]
) -> list[tuple[str, np.ndarray]]:
    """Per-token (predicted tag, probability vector over the 11 classes)."""
    if not sentence:
        raise EmptySentence("cannot tag an empty sentence")
    if emb.dim != model.config.dim:
        raise DimensionMismatch(
            f"embedding dim {emb.dim} != tagger dim {model.config.dim}"
        )
    norms_ = [t.norm for t in sentence]
    results: list[tuple[str, np.ndarray]] = []
    for start in range(0, len(norms_), model.config.max_len):
        chunk = norms_[start : start + model.config.max_len]
        x = _embed_norms(chunk, emb)[None, :, :]
        log_probs, _ = forward(model.params, x, np.array([len(chunk)]))
        probs = np.exp(log_probs[0])
        for t in range(len(chunk)):
            results.append((ALL_TAGS[int(np.argmax(probs[t]))], probs[t]))
    return results


# --- entity grouping ---------------------------------------------------------


@dataclass(frozen=True)
class EntitySpan:
    entity_type: str
    value: str
    token_range: tuple[int, int]


@dataclass
class EntitySet:
    """Per-vulnerability map from entity type to extracted values."""

    cve_id: str
    entities: dict[str, list[str]] = field(
        default_factory=lambda: {t: [] for t in ENTITY_TAGS}
    )

    def values_for(self, entity_type: str) -> list[str]:
        return self.entities.get(entity_type, [])

    def words_for(self, entity_type: str) -> list[str]:
        return [w for value in self.values_for(entity_type) for w in value.split()]

    def present(self, entity_type: str) -> bool:
        return bool(self.values_for(entity_type))


def extract_spans(tagged: list[tuple[Token, str]]) -> list[EntitySpan]:
    """Maximal runs of identical non-O tags become one span each."""
    spans: list[EntitySpan] = []
    run_start: int | None = None
    run_tag: str | None = None
    for idx, (_, tag_) in enumerate(tagged):
        if tag_ != run_tag:
            if run_tag is not None and run_tag != O_TAG:
                value = " ".join(tok.norm for tok, _ in tagged[run_start:idx])
                spans.append(EntitySpan(run_tag, value, (run_start, idx)))
            run_start, run_tag = idx, tag_
    if run_tag is not None and run_tag != O_TAG:
        value = " ".join(tok.norm for tok, _ in tagged[run_start:])
        spans.append(EntitySpan(run_tag, value, (run_start, len(tagged))))
    return spans


def extract_entities(tagged: list[tuple[Token, str]], cve_id: str) -> EntitySet:
    entity_set = EntitySet(cve_id=cve_id)
    for span in extract_spans(tagged):
        entity_set.entities[span.entity_type].append(span.value)
    return entity_set


# --- evaluation ---------------------------------------------------------------


@dataclass(frozen=True)
class ClassScore:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass(frozen=True)
class F1Report:
    per_class: dict[str, ClassScore]
    micro: ClassScore
    macro_f1: float


def _prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def evaluate_f1(
    predictions: list[list[str]], golds: list[list[str]]
) -> F1Report:
    """Token-level one-vs-all scores per entity class; micro over all non-O
    tokens; macro over classes with non-zero support."""
    if len(predictions) != len(golds):
        raise LengthMismatch(f"{len(predictions)} predictions vs {len(golds)} golds")
    pairs: list[tuple[str, str]] = []
    for pred_seq, gold_seq in zip(predictions, golds):
        if len(pred_seq) != len(gold_seq):
            raise LengthMismatch(
                f"sentence length {len(pred_seq)} vs {len(gold_seq)}"
            )
        pairs.extend(zip(pred_seq, gold_seq))

    per_class: dict[str, ClassScore] = {}
    micro_tp = micro_fp = micro_fn = 0
    f1_values: list[float] = []
    for cls in ENTITY_TAGS:
        tp = sum(1 for p, g in pairs if p == cls and g == cls)
        fp = sum(1 for p, g in pairs if p == cls and g != cls)
        fn = sum(1 for p, g in pairs if p != cls and g == cls)
        support = tp + fn
        precision, recall, f1 = _prf(tp, fp, fn)
        per_class[cls] = ClassScore(precision, recall, f1, support)
        micro_tp += tp
        micro_fp += fp
        micro_fn += fn
        if support > 0:
            f1_values.append(f1)
    precision, recall, f1 = _prf(micro_tp, micro_fp, micro_fn)
    micro = ClassScore(precision, recall, f1, micro_tp + micro_fn)
    macro = sum(f1_values) / len(f1_values) if f1_values else 0.0
    return F1Report(per_class=per_class, micro=micro, macro_f1=macro)


# --- persistence ---------------------------------------------------------------


def save_ner(model: BlstmModel, path: str | Path) -> None:
    cfg = model.config
    lines = [
        MODEL_MARKER,
        f"# max_len {cfg.max_len}",
        f"# dim {cfg.dim}",
        f"# hidden {cfg.hidden}",
        f"# n_classes {cfg.n_classes}",
        f"# epochs {cfg.epochs}",
        f"# batch_size {cfg.batch_size}",
        f"# learning_rate {cfg.learning_rate!r}",
        f"# clip_norm {'none' if cfg.clip_norm is None else repr(cfg.clip_norm)}",
        f"# seed {cfg.seed}",
    ]
    for name in sorted(model.params):
        arr = np.atleast_2d(model.params[name])
        lines.append(f"matrix {name} {arr.shape[0]} {arr.shape[1]}")
        for row in arr:
            lines.append(" ".join(repr(float(v)) for v in row))
    Path(path).write_text("\n".join(lines) + "\n", "utf-8")


def load_ner(path: str | Path) -> BlstmModel:
    try:
        lines = Path(path).read_text("utf-8").splitlines()
    except OSError as exc:
        raise UnreadableFile(str(exc)) from exc
    if not lines or lines[0].strip() != MODEL_MARKER:
        raise FormatVersionMismatch(f"expected {MODEL_MARKER!r} on the first line")
    meta: dict[str, str] = {}
    i = 1
    while i < len(lines) and lines[i].startswith("#"):
        key, _, value = lines[i][1:].strip().partition(" ")
        meta[key] = value
        i += 1
    config = BlstmConfig(
        max_len=int(meta["max_len"]),
        dim=int(meta["dim"]),
        hidden=int(meta["hidden"]),
        n_classes=int(meta["n_classes"]),
        epochs=int(meta["epochs"]),
        batch_size=int(meta["batch_size"]),
        learning_rate=float(meta["learning_rate"]),
        clip_norm=None if meta["clip_norm"] == "none" else float(meta["clip_norm"]),
        seed=int(meta["seed"]),
    )
    params: dict[str, np.ndarray] = {}
    while i < len(lines):
        header = lines[i].split()
        if len(header) != 4 or header[0] != "matrix":
            raise MalformedRecord(f"bad matrix header {lines[i]!r}")
        name, rows, cols = header[1], int(header[2]), int(header[3])
        block = lines[i + 1 : i + 1 + rows]
        if len(block) != rows:
            raise MalformedRecord(f"matrix {name}: expected {rows} rows")
        arr = np.array([[float(v) for v in line.split()] for line in block])
        if arr.shape != (rows, cols):
            raise MalformedRecord(f"matrix {name}: shape {arr.shape}")
        params[name] = arr[0] if name.endswith("_b") else arr
        i += 1 + rows
    missing = set(PARAM_SHAPES) - set(params)
    if missing:
        raise MalformedRecord(f"missing matrices: {sorted(missing)}")
    return BlstmModel(params=params, config=config)
