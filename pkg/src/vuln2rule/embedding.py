"""Domain word-embedding model: shallow CBOW / skip-gram network.

Full-softmax training over a capped vocabulary; the input weight matrix is
the embedding table.  Training is plain per-example SGD, deterministic for a
fixed seed.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import OOV_WORD, Vocabulary, vocabulary_from_sentences
from .errors import DegenerateCorpus, FormatVersionMismatch, MalformedRecord, UnreadableFile

FORMAT_MARKER = "# vuln2rule-embedding 1"

CBOW = "CBOW"
SKIP_GRAM = "SG"


@dataclass(frozen=True)
class EmbeddingConfig:
    variant: str = CBOW
    dim: int = 100
    window: int = 5
    epochs: int = 300
    learning_rate: float = 0.0001
    max_vocab: int = 10000
    seed: int = 0

    def __post_init__(self):
        if self.variant not in (CBOW, SKIP_GRAM):
            raise ValueError(f"variant must be {CBOW} or {SKIP_GRAM}")
        if self.dim < 1 or self.window < 1 or self.learning_rate <= 0:
            raise ValueError("dim and window must be >= 1, learning_rate > 0")


@dataclass
class EmbeddingModel:
    """Vocabulary plus the two weight matrices of the shallow network.

    ``w_in`` has one row per vocabulary word (the embeddings); ``w_out`` is
    the softmax output matrix of shape (dim, vocab size).
    """

    vocab: Vocabulary
    w_in: np.ndarray
    w_out: np.ndarray
    config: EmbeddingConfig
    initial_loss: float | None = None
    final_loss: float | None = None

    @property
    def dim(self) -> int:
        return self.w_in.shape[1]

    def embed(self, word: str) -> np.ndarray:
        """Embedding row for ``word``; out-of-vocabulary words get the OOV row."""
        return self.w_in[self.vocab.id_for(word)].copy()


def embed_word(model: EmbeddingModel, word: str) -> np.ndarray:
    return model.embed(word)


def _softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max()
    exp = np.exp(shifted)
    return exp / exp.sum()


def example_loss_and_grads(
    w_in: np.ndarray,
    w_out: np.ndarray,
    input_ids: list[int] | np.ndarray,
    target_id: int,
) -> tuple[float, tuple[np.ndarray, np.ndarray], np.ndarray]:
    """Cross-entropy loss and gradients for one training example.

    For CBOW ``input_ids`` are the context ids (the hidden vector is the
    average of their one-hot embeddings); for skip-gram it is the single
    center id.  Returns ``(loss, (rows, row_grads), dw_out)`` where ``rows``
    indexes the w_in rows touched by the example.
    """
    uniq, counts = np.unique(np.asarray(input_ids, dtype=np.intp), return_counts=True)
    weights = counts / len(input_ids)
    hidden = weights @ w_in[uniq]
    probs = _softmax(hidden @ w_out)
    loss = -float(np.log(probs[target_id]))
    dscores = probs
    dscores[target_id] -= 1.0
    dw_out = np.outer(hidden, dscores)
    dhidden = w_out @ dscores
    row_grads = np.outer(weights, dhidden)
    return loss, (uniq, row_grads), dw_out


def _training_pairs(
    sentences: list[list[str]], vocab: Vocabulary, variant: str, window: int
) -> list[tuple[tuple[int, ...], int]]:
    pairs: list[tuple[tuple[int, ...], int]] = []
    for sentence in sentences:
        ids = [vocab.id_for(w) for w in sentence]
        for i, target in enumerate(ids):
            context = ids[max(0, i - window) : i] + ids[i + 1 : i + 1 + window]
            if not context:
                continue
            if variant == CBOW:
                pairs.append((tuple(context), target))
            else:
                pairs.extend(((target,), ctx) for ctx in context)
    return pairs


def _mean_loss(
    w_in: np.ndarray, w_out: np.ndarray, pairs: list[tuple[tuple[int, ...], int]]
) -> float:
    total = 0.0
    for input_ids, target in pairs:
        loss, _, _ = example_loss_and_grads(w_in, w_out, input_ids, target)
        total += loss
    return total / len(pairs)


def train_embedding(
    sentences: list[list[str]],
    config: EmbeddingConfig = EmbeddingConfig(),
    vocab: Vocabulary | None = None,
) -> EmbeddingModel:
    """Train the embedding network on tokenized, normalized sentences.

    One epoch is a pass over all (input, target) pairs in a seeded-shuffle
    order.  Raises DegenerateCorpus when no trainable pairs exist.
    """
    if vocab is None:
        vocab = vocabulary_from_sentences(sentences, config.max_vocab)
    pairs = _training_pairs(sentences, vocab, config.variant, config.window)
    if not pairs:
        raise DegenerateCorpus("no (context, target) pairs derivable from corpus")

    rng = np.random.default_rng(config.seed)
    size = len(vocab)
    bound = 0.5 / config.dim
    w_in = rng.uniform(-bound, bound, size=(size, config.dim))
    w_out = np.zeros((config.dim, size))

    initial_loss = _mean_loss(w_in, w_out, pairs)
    lr = config.learning_rate
    for _ in range(config.epochs):
        for idx in rng.permutation(len(pairs)):
            input_ids, target = pairs[idx]
            _, (rows, row_grads), dw_out = example_loss_and_grads(
                w_in, w_out, input_ids, target
            )
            w_out -= lr * dw_out
            w_in[rows] -= lr * row_grads
    final_loss = _mean_loss(w_in, w_out, pairs)

    return EmbeddingModel(
        vocab=vocab,
        w_in=w_in,
        w_out=w_out,
        config=config,
        initial_loss=initial_loss,
        final_loss=final_loss,
    )


def nearest_neighbors(
    model: EmbeddingModel, word: str, k: int
) -> list[tuple[str, float]]:
    """Top-k words by cosine similarity (exhaustive scan), excluding the
    query word and the OOV pseudo-word.  Ties broken lexicographically."""
    if k < 1:
        raise ValueError("k must be >= 1")
    query = model.embed(word)
    qnorm = float(np.linalg.norm(query))
    scored: list[tuple[str, float]] = []
    for idx, candidate in enumerate(model.vocab.words):
        if idx == model.vocab.oov_id or candidate == word:
            continue
        vec = model.w_in[idx]
        denom = qnorm * float(np.linalg.norm(vec))
        sim = float(vec @ query / denom) if denom > 0 else 0.0
        scored.append((candidate, sim))
    scored.sort(key=lambda ws: (-ws[1], ws[0]))
    return scored[:k]


# --- persistence ------------------------------------------------------------


def _config_header(model: EmbeddingModel) -> list[str]:
    cfg = model.config
    return [
        FORMAT_MARKER,
        f"# variant {cfg.variant}",
        f"# dim {cfg.dim}",
        f"# window {cfg.window}",
        f"# epochs {cfg.epochs}",
        f"# learning_rate {cfg.learning_rate!r}",
        f"# max_vocab {cfg.max_vocab}",
        f"# seed {cfg.seed}",
        f"# coverage {model.vocab.coverage!r}",
    ]


def _matrix_lines(words: tuple[str, ...], rows: np.ndarray) -> list[str]:
    return [
        word + " " + " ".join(repr(float(v)) for v in row)
        for word, row in zip(words, rows)
    ]


def save_embedding(model: EmbeddingModel, path: str | Path) -> None:
    """Text format: config header, then ``<vocab> <dim>`` and one line per
    word; the output matrix goes to a companion ``<path>.out`` file."""
    path = Path(path)
    header = _config_header(model)
    size, dim = model.w_in.shape
    main = header + [f"{size} {dim}"] + _matrix_lines(model.vocab.words, model.w_in)
    path.write_text("\n".join(main) + "\n", "utf-8")
    out = header + [f"{size} {dim}"] + _matrix_lines(model.vocab.words, model.w_out.T)
    Path(str(path) + ".out").write_text("\n".join(out) + "\n", "utf-8")


def _parse_header(lines: list[str]) -> tuple[dict[str, str], int]:
    if not lines or lines[0].strip() != FORMAT_MARKER:
        raise FormatVersionMismatch(
            f"expected {FORMAT_MARKER!r} on the first line"
        )
    meta: dict[str, str] = {}
    i = 1
    while i < len(lines) and lines[i].startswith("#"):
        key, _, value = lines[i][1:].strip().partition(" ")
        meta[key] = value
        i += 1
    return meta, i


def _parse_matrix(
    lines: list[str], start: int, path: Path
) -> tuple[tuple[str, ...], np.ndarray]:
    if start >= len(lines):
        raise MalformedRecord(f"{path}: missing '<vocab> <dim>' header line")
    try:
        size, dim = (int(p) for p in lines[start].split())
    except ValueError as exc:
        raise MalformedRecord(f"{path}: bad size header {lines[start]!r}") from exc
    rows = lines[start + 1 : start + 1 + size]
    if len(rows) != size:
        raise MalformedRecord(f"{path}: expected {size} rows, found {len(rows)}")
    words: list[str] = []
    matrix = np.empty((size, dim))
    for r, line in enumerate(rows):
        parts = line.split()
        if len(parts) != dim + 1:
            raise MalformedRecord(f"{path}: row {r} has {len(parts) - 1} values, want {dim}")
        words.append(parts[0])
        matrix[r] = [float(p) for p in parts[1:]]
    return tuple(words), matrix


def load_embedding(path: str | Path) -> EmbeddingModel:
    path = Path(path)
    out_path = Path(str(path) + ".out")
    try:
        main_lines = path.read_text("utf-8").splitlines()
        out_lines = out_path.read_text("utf-8").splitlines()
    except OSError as exc:
        raise UnreadableFile(str(exc)) from exc

    meta, body = _parse_header(main_lines)
    words, w_in = _parse_matrix(main_lines, body, path)
    _, out_body = _parse_header(out_lines)
    out_words, w_out_rows = _parse_matrix(out_lines, out_body, out_path)
    if out_words != words:
        raise MalformedRecord(f"{out_path}: vocabulary differs from {path}")

    config = EmbeddingConfig(
        variant=meta.get("variant", CBOW),
        dim=int(meta["dim"]),
        window=int(meta["window"]),
        epochs=int(meta["epochs"]),
        learning_rate=float(meta["learning_rate"]),
        max_vocab=int(meta["max_vocab"]),
        seed=int(meta["seed"]),
    )
    if words[0] != OOV_WORD:
        raise MalformedRecord(f"{path}: first word must be {OOV_WORD}")
    vocab = Vocabulary(
        words=words,
        index_of={w: i for i, w in enumerate(words)},
        coverage=float(meta.get("coverage", "0.0")),
    )
    return EmbeddingModel(vocab=vocab, w_in=w_in, w_out=w_out_rows.T, config=config)
