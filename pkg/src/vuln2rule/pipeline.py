"""End-to-end orchestration: configuration, batch rule generation, wiring
cross-validation and the evaluation suite."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .completer import (
    COMPLETABLE_ENTITIES,
    build_feature_vector,
    load_completion,
    load_discretization,
    map_to_cluster,
    mean_precision_recall_at_k,
    predict_missing,
)
from .corpus import LabeledSentence, RawVulnerability, word_frequency_report
from .embedding import EmbeddingConfig, load_embedding, nearest_neighbors
from .errors import ConfigError, MissingArtifact, TooFewRules
from .rules.datalog import InteractionRule, emit_rules
from .rules.schema import (
    load_default_lexicon,
    load_default_mapping,
    load_lexicon,
    load_mapping,
)
from .rules.synthesis import (
    GenerationFailure,
    GeneratorModels,
    generate,
    infer_slot_sorts,
    skeleton_from_rule,
    variable_groups,
    wire_variables,
)
from .rules.wiring import estimate_wiring_matrix, impute_matrix, load_wiring
from .tagger import EntitySet, evaluate_f1, load_ner
from .tagger import tag as tag_tokens


# --- configuration ----------------------------------------------------------

#: artifact file names inside the model directory (versioned)
ARTIFACTS = {
    "embedding": "embedding.v1.txt",
    "ner": "ner.v1.txt",
    "wiring_raw": "wiring_raw.v1.csv",
    "wiring": "wiring.v1.csv",
}
DISC_TEMPLATE = "discretization_{}.v1.txt"
COMPLETION_TEMPLATE = "completion_{}.v1.txt"


@dataclass
class PipelineConfig:
    """Paths plus every stage's hyperparameters; defaults match the
    documented full-scale values."""

    model_dir: Path = Path("models")
    corpus_path: Path | None = None
    labeled_path: Path | None = None
    entities_path: Path | None = None
    rule_corpus_path: Path | None = None
    lexicon_path: Path | None = None
    mapping_path: Path | None = None
    embedding: EmbeddingConfig = field(default_factory=EmbeddingConfig)
    ner_max_len: int = 150
    ner_epochs: int = 100
    ner_batch_size: int = 32
    ner_learning_rate: float = 0.01
    k_clusters: dict[str, int] = field(
        default_factory=lambda: {"VECTOR": 4, "IMPACT": 6, "MEANS": 8}
    )
    completer_l2: float = 0.01
    completer_iterations: int = 70
    wiring_k: int = 5
    threshold: float = 0.5
    top_ks: tuple[int, ...] = (1, 2, 3)
    seed: int = 0

    @staticmethod
    def from_file(path: str | Path) -> PipelineConfig:
        """Key-value config: one ``key = value`` per line, '#' comments.

        Keys: model_dir, corpus_path, labeled_path, entities_path,
        rule_corpus_path, lexicon_path, mapping_path, seed, threshold,
        wiring_k, completer_l2, completer_iterations, top_ks (comma list),
        embedding.{variant,dim,window,epochs,learning_rate,max_vocab},
        ner.{max_len,epochs,batch_size,learning_rate},
        k_clusters.{VECTOR,IMPACT,MEANS}.
        """
        config = PipelineConfig()
        emb_kwargs: dict = {}
        for lineno, raw in enumerate(Path(path).read_text("utf-8").splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = (p.strip() for p in line.partition("="))
            if not sep:
                raise ConfigError(f"config line {lineno}: expected 'key = value'")
            try:
                _apply_config_key(config, emb_kwargs, key, value)
            except (KeyError, ValueError) as exc:
                raise ConfigError(f"config line {lineno}: {exc}") from exc
        if emb_kwargs:
            config.embedding = replace(config.embedding, **emb_kwargs)
        for name in ("corpus_path", "labeled_path", "entities_path",
                     "rule_corpus_path", "lexicon_path", "mapping_path"):
            value = getattr(config, name)
            if value is not None and not Path(value).exists():
                raise ConfigError(f"{name} does not exist: {value}")
        return config


def _apply_config_key(config: PipelineConfig, emb_kwargs: dict, key: str, value: str) -> None:
    paths = {"model_dir", "corpus_path", "labeled_path", "entities_path",
             "rule_corpus_path", "lexicon_path", "mapping_path"}
    if key in paths:
        setattr(config, key, Path(value))
    elif key == "seed":
        config.seed = int(value)
        emb_kwargs.setdefault("seed", int(value))
    elif key == "threshold":
        config.threshold = float(value)
    elif key == "wiring_k":
        config.wiring_k = int(value)
    elif key == "completer_l2":
        config.completer_l2 = float(value)
    elif key == "completer_iterations":
        config.completer_iterations = int(value)
    elif key == "top_ks":
        config.top_ks = tuple(int(v) for v in value.split(","))
    elif key.startswith("embedding."):
        attr = key.split(".", 1)[1]
        caster = {"variant": str, "dim": int, "window": int, "epochs": int,
                  "learning_rate": float, "max_vocab": int, "seed": int}[attr]
        emb_kwargs[attr] = caster(value)
    elif key.startswith("ner."):
        attr = key.split(".", 1)[1]
        caster = {"max_len": int, "epochs": int, "batch_size": int,
                  "learning_rate": float}[attr]
        setattr(config, f"ner_{attr}", caster(value))
    elif key.startswith("k_clusters."):
        config.k_clusters[key.split(".", 1)[1]] = int(value)
    else:
        raise KeyError(f"unknown config key {key!r}")


def load_models(config: PipelineConfig, need_tagger: bool = True) -> GeneratorModels:
    """Load every artifact from the model directory; raises MissingArtifact
    naming the stage whose file is absent."""
    model_dir = Path(config.model_dir)

    def path_for(stage: str, name: str) -> Path:
        p = model_dir / name
        if not p.exists():
            raise MissingArtifact(stage, str(p))
        return p

    emb = load_embedding(path_for("train-embedding", ARTIFACTS["embedding"]))
    tagger_model = None
    if need_tagger:
        tagger_model = load_ner(path_for("train-ner", ARTIFACTS["ner"]))
    discretization = {}
    completion = {}
    for entity in COMPLETABLE_ENTITIES:
        discretization[entity] = load_discretization(
            path_for("train-completer", DISC_TEMPLATE.format(entity.lower()))
        )
        completion[entity] = load_completion(
            path_for("train-completer", COMPLETION_TEMPLATE.format(entity.lower()))
        )
    wiring = load_wiring(path_for("learn-wiring", ARTIFACTS["wiring"]))
    lexicon = (
        load_lexicon(config.lexicon_path) if config.lexicon_path else load_default_lexicon()
    )
    mapping = (
        load_mapping(config.mapping_path) if config.mapping_path else load_default_mapping()
    )
    return GeneratorModels(
        embedding=emb,
        discretization=discretization,
        completion=completion,
        wiring=wiring,
        lexicon=lexicon,
        mapping=mapping,
        tagger=tagger_model,
        threshold=config.threshold,
    )


# --- run report ----------------------------------------------------------------


@dataclass
class RunReport:
    counts: dict[str, int] = field(default_factory=dict)
    outcomes: list[tuple[str, str]] = field(default_factory=list)
    failures: dict[str, int] = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)

    def success_ratio(self) -> float | None:
        if not self.outcomes:
            return None
        generated = sum(1 for _, outcome in self.outcomes if outcome == "rule")
        return generated / len(self.outcomes)

    def metrics_json(self) -> str:
        """Deterministic metrics section (no timings)."""
        ratio = self.success_ratio()
        payload = {
            "counts": self.counts,
            "failures": self.failures,
            "metrics": self.metrics,
            "success_ratio": "n/a" if ratio is None else ratio,
        }
        return json.dumps(payload, sort_keys=True, indent=2)

    def to_json(self) -> str:
        ratio = self.success_ratio()
        payload = {
            "counts": self.counts,
            "failures": self.failures,
            "metrics": self.metrics,
            "outcomes": self.outcomes,
            "success_ratio": "n/a" if ratio is None else ratio,
            "timings": self.timings,
        }
        return json.dumps(payload, sort_keys=True, indent=2)

    def render_text(self) -> str:
        lines = ["== run report =="]
        ratio = self.success_ratio()
        lines.append(f"success ratio: {'n/a' if ratio is None else f'{ratio:.3f}'}")
        for key in sorted(self.counts):
            lines.append(f"count {key}: {self.counts[key]}")
        for key in sorted(self.failures):
            lines.append(f"failure {key}: {self.failures[key]}")
        for key in sorted(self.metrics):
            lines.append(f"metric {key}: {json.dumps(self.metrics[key], sort_keys=True)}")
        for key in sorted(self.timings):
            lines.append(f"time {key}: {self.timings[key]:.3f}s")
        return "\n".join(lines) + "\n"


# --- batch generation -------------------------------------------------------------


def run_pipeline(
    models: GeneratorModels,
    inputs: list[RawVulnerability],
    gold_entities: dict[str, EntitySet] | None = None,
    out_path: str | Path | None = None,
) -> tuple[RunReport, list[InteractionRule]]:
    """One rule or one failure reason per input; optionally write the rules
    to ``out_path`` in the canonical file format."""
    report = RunReport()
    rules: list[InteractionRule] = []
    start = time.perf_counter()
    for record in inputs:
        gold = gold_entities.get(record.id) if gold_entities else None
        result = generate(record.description, models, gold_entities=gold, cve_id=record.id)
        if isinstance(result, GenerationFailure):
            report.outcomes.append((record.id, result.kind.value))
            report.failures[result.kind.value] = report.failures.get(result.kind.value, 0) + 1
        else:
            report.outcomes.append((record.id, "rule"))
            rules.append(result)
    report.timings["generate"] = time.perf_counter() - start
    report.counts["inputs"] = len(inputs)
    report.counts["rules"] = len(rules)
    if out_path is not None and rules:
        Path(out_path).write_text(emit_rules(rules), "utf-8")
    return report, rules


# --- wiring cross-validation ---------------------------------------------------------


@dataclass(frozen=True)
class WiringCvResult:
    f1: float
    accuracy: float
    fold_f1: tuple[float, ...]
    fold_accuracy: tuple[float, ...]


def _pair_sets(rule_like: InteractionRule) -> tuple[set[frozenset], set[frozenset]]:
    """(all unordered variable-node pairs, wired pairs) for one rule."""
    groups = variable_groups(rule_like)
    nodes = sorted({n for g in groups for n in g})
    all_pairs = {
        frozenset((a, b))
        for i, a in enumerate(nodes)
        for b in nodes[i + 1 :]
    }
    wired = {
        frozenset((a, b))
        for g in groups
        for i, a in enumerate(sorted(g))
        for b in sorted(g)[i + 1 :]
    }
    return all_pairs, wired


def crossvalidate_wiring(
    rules: list[InteractionRule],
    folds: int = 10,
    k_neighbors: int = 5,
    threshold: float = 0.5,
    lexicon=None,
) -> WiringCvResult:
    """Per fold: learn the matrix on the training rules, re-wire each test
    rule's skeleton, and score every variable-slot pair as wired/not-wired
    against the rule's own wiring."""
    if len(rules) < folds:
        raise TooFewRules(f"{len(rules)} rules for {folds} folds")
    chunks = np.array_split(np.arange(len(rules)), folds)
    fold_f1: list[float] = []
    fold_acc: list[float] = []
    for fold in chunks:
        test_idx = set(int(i) for i in fold)
        train = [r for i, r in enumerate(rules) if i not in test_idx]
        test = [rules[i] for i in sorted(test_idx)]
        matrix = impute_matrix(estimate_wiring_matrix(train), k_neighbors)
        sorts = infer_slot_sorts(train, lexicon)
        tp = fp = fn = tn = 0
        for rule in test:
            skeleton = skeleton_from_rule(rule, lexicon, sorts)
            rewired = wire_variables(
                skeleton, matrix, threshold, enforce_range_restriction=False
            )
            all_pairs, truth = _pair_sets(rule)
            _, predicted = _pair_sets(rewired)
            for pair in all_pairs:
                in_truth, in_pred = pair in truth, pair in predicted
                if in_truth and in_pred:
                    tp += 1
                elif in_pred:
                    fp += 1
                elif in_truth:
                    fn += 1
                else:
                    tn += 1
        precision = tp / (tp + fp) if tp + fp else (1.0 if fn == 0 else 0.0)
        recall = tp / (tp + fn) if tp + fn else 1.0
        f1 = (
            2 * precision * recall / (precision + recall)
            if precision + recall
            else 0.0
        )
        total = tp + fp + fn + tn
        fold_f1.append(f1)
        fold_acc.append((tp + tn) / total if total else 1.0)
    return WiringCvResult(
        f1=float(np.mean(fold_f1)),
        accuracy=float(np.mean(fold_acc)),
        fold_f1=tuple(fold_f1),
        fold_accuracy=tuple(fold_acc),
    )


# --- evaluation suite ---------------------------------------------------------------


@dataclass
class EvalInputs:
    corpus: list[RawVulnerability]
    labeled: list[LabeledSentence]
    entity_sets: list[EntitySet]
    rules: list[InteractionRule]
    pipeline_inputs: list[RawVulnerability]


def eval_suite(
    models: GeneratorModels,
    data: EvalInputs,
    top_ks: tuple[int, ...] = (1, 2, 3),
    folds: int = 10,
    probe_words: tuple[str, ...] = ("buffer", "remote", "windows", "code"),
) -> RunReport:
    """Frequency report, neighbor probes, tagger F1, completion ranking
    metrics, wiring cross-validation and the end-to-end success ratio, all
    in one machine-readable report."""
    report = RunReport()
    t0 = time.perf_counter()

    report.metrics["frequency_top10"] = [
        [w, c] for w, c in word_frequency_report(data.corpus, 10)
    ]
    probes = {}
    for word in probe_words:
        if word in models.embedding.vocab:
            probes[word] = [
                [w, round(s, 6)] for w, s in nearest_neighbors(models.embedding, word, 5)
            ]
    report.metrics["nearest_neighbors"] = probes

    if models.tagger is not None and data.labeled:
        predictions = []
        golds = []
        for sentence in data.labeled:
            tagged = tag_tokens(models.tagger, models.embedding, list(sentence.tokens))
            predictions.append([t for t, _ in tagged])
            golds.append(list(sentence.tags))
        f1 = evaluate_f1(predictions, golds)
        report.metrics["ner_f1"] = {
            "per_class": {
                cls: {"precision": s.precision, "recall": s.recall, "f1": s.f1, "support": s.support}
                for cls, s in f1.per_class.items()
            },
            "micro_f1": f1.micro.f1,
            "macro_f1": f1.macro_f1,
        }

    completion_metrics: dict[str, dict[str, float]] = {}
    for entity, model in models.completion.items():
        disc = models.discretization[entity]
        queries = []
        for entity_set in data.entity_sets:
            if not entity_set.present(entity):
                continue
            value = entity_set.values_for(entity)[0]
            _, gold_label = map_to_cluster(disc, value.split(), models.embedding)
            features = build_feature_vector(entity_set, models.embedding)
            ranked = [lbl for lbl, _ in predict_missing(model, features)]
            queries.append((ranked, gold_label))
        if not queries:
            continue
        entry = {}
        for k in top_ks:
            precision, recall = mean_precision_recall_at_k(queries, k)
            entry[f"precision@{k}"] = precision
            entry[f"recall@{k}"] = recall
        completion_metrics[entity] = entry
    report.metrics["completion"] = completion_metrics

    if len(data.rules) >= folds:
        cv = crossvalidate_wiring(
            data.rules, folds, lexicon=models.lexicon, threshold=models.threshold
        )
        report.metrics["wiring_cv"] = {"f1": cv.f1, "accuracy": cv.accuracy}

    pipeline_report, _ = run_pipeline(models, data.pipeline_inputs)
    ratio = pipeline_report.success_ratio()
    report.metrics["success_ratio"] = "n/a" if ratio is None else ratio
    report.failures = pipeline_report.failures
    report.outcomes = pipeline_report.outcomes
    report.counts = pipeline_report.counts
    report.timings["eval_suite"] = time.perf_counter() - t0
    return report
