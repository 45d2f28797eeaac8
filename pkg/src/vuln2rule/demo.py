"""Synthetic demo data and offline demo models.

The real training corpora (an NVD snapshot, hand-labeled sentences) are not
bundled, so this module generates small template-based stand-ins with known
entity structure, and trains every pipeline artifact on them.  Everything is
deterministic for a fixed seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .completer import (
    CompletionModel,
    DiscretizationModel,
    fit_discretization,
    label_clusters_by_exemplars,
    train_completion,
)
from .corpus import LabeledSentence, RawVulnerability, Token, tokenize
from .embedding import CBOW, EmbeddingConfig, EmbeddingModel, train_embedding
from .rules.schema import (
    load_default_lexicon,
    load_default_mapping,
    load_default_rule_corpus,
)
from .rules.datalog import parse_rule_file
from .rules.synthesis import GeneratorModels
from .rules.wiring import estimate_wiring_matrix, impute_matrix
from .tagger import BlstmConfig, BlstmModel, EntitySet, train_ner

#: value variants per class; every value keeps the class keyword so that the
#: succinct vectors of one class stay closer to each other than to others.
VECTOR_VALUES = {
    "remote": ["remote", "remote attackers"],
    "local": ["local", "local users"],
    "physical": ["physically proximate", "physically proximate attackers"],
}
MEANS_VALUES = {
    "bufferOverflow": ["buffer overflow", "heap buffer overflow", "stack buffer overflow"],
    "sqlInjection": ["sql injection", "blind sql injection"],
    "crossSiteScripting": ["cross-site scripting", "stored cross-site scripting"],
    "pathTraversal": ["path traversal", "directory path traversal"],
    "raceCondition": ["race condition", "file race condition"],
    "symlinkAttack": ["symlink attack", "insecure symlink attack"],
}
IMPACT_VALUES = {
    "execCode": ["execute arbitrary code", "run arbitrary code"],
    "dos": ["cause denial of service", "trigger denial of service"],
    "accessData": ["obtain sensitive information", "read sensitive information"],
    "gainPrivileges": ["gain elevated privileges", "obtain elevated privileges"],
}

#: which means/impact classes co-occur with each attack vector; the
#: completion models learn exactly these correlations.
VECTOR_PROFILE = {
    "remote": (["bufferOverflow", "sqlInjection", "crossSiteScripting"], ["execCode", "dos"]),
    "local": (["raceCondition", "symlinkAttack"], ["gainPrivileges"]),
    "physical": (["pathTraversal"], ["accessData"]),
}

PLATFORMS = ["adobe reader", "apache tomcat", "openssl library", "cisco gateway", "mysql server", "linux kernel"]
OSES = ["windows", "linux", "mac os x"]
VERSIONS = ["9.x before 9.3.3", "2.0.1", "5.x before 5.1.2", "1.0.2 before 1.0.2k"]
TECHNIQUES = [
    "a crafted http request",
    "a crafted pdf file",
    "a long query string",
    "a malformed packet",
]


@dataclass
class DemoRecord:
    vulnerability: RawVulnerability
    sentence: LabeledSentence
    entities: EntitySet
    vector_label: str
    means_label: str
    impact_label: str


def _segment_tokens(segments: list[tuple[str, str]]) -> tuple[list[Token], list[str]]:
    text = " ".join(s for s, _ in segments)
    tokens = tokenize(text)
    tags: list[str] = []
    for seg_text, seg_tag in segments:
        tags.extend(seg_tag for _ in tokenize(seg_text))
    if len(tags) != len(tokens):
        raise AssertionError("segment tokenization drifted from full tokenization")
    return tokens, tags


def generate_demo_records(
    n: int = 160, seed: int = 7, vector_missing_rate: float = 0.15
) -> list[DemoRecord]:
    """Template-generated vulnerability descriptions with gold labels.

    A fraction of records omit the attack-vector phrase, mirroring NVD
    descriptions that never state how the bug is reached.
    """
    rng = np.random.default_rng(seed)
    vector_labels = sorted(VECTOR_VALUES)
    records: list[DemoRecord] = []
    for i in range(n):
        vector = vector_labels[int(rng.integers(len(vector_labels)))]
        means_pool, impact_pool = VECTOR_PROFILE[vector]
        means = means_pool[int(rng.integers(len(means_pool)))]
        impact = impact_pool[int(rng.integers(len(impact_pool)))]
        means_value = MEANS_VALUES[means][int(rng.integers(len(MEANS_VALUES[means])))]
        impact_value = IMPACT_VALUES[impact][int(rng.integers(len(IMPACT_VALUES[impact])))]
        vector_value = VECTOR_VALUES[vector][int(rng.integers(len(VECTOR_VALUES[vector])))]
        platform = PLATFORMS[int(rng.integers(len(PLATFORMS)))]
        os_name = OSES[int(rng.integers(len(OSES)))]
        version = VERSIONS[int(rng.integers(len(VERSIONS)))]
        technique = TECHNIQUES[int(rng.integers(len(TECHNIQUES)))]
        with_vector = rng.random() >= vector_missing_rate

        segments: list[tuple[str, str]] = [
            (means_value.capitalize(), "MEANS"),
            ("in", "O"),
            (platform, "PLATFORM"),
            (version, "VERSION"),
            ("on", "O"),
            (os_name, "OS"),
            ("allows", "O"),
        ]
        if with_vector:
            segments.append((vector_value, "VECTOR"))
        segments += [
            ("attackers to", "O"),
            (impact_value, "IMPACT"),
            ("via", "O"),
            (technique, "TECHNIQUE"),
        ]
        tokens, tags = _segment_tokens(segments)
        cve_id = f"CVE-2020-{10000 + i}"
        description = " ".join(s for s, _ in segments) + "."
        entities = EntitySet(cve_id=cve_id)
        for seg_text, seg_tag in segments:
            if seg_tag != "O":
                entities.entities[seg_tag].append(
                    " ".join(t.norm for t in tokenize(seg_text))
                )
        records.append(
            DemoRecord(
                vulnerability=RawVulnerability(cve_id, description),
                sentence=LabeledSentence(tuple(tokens), tuple(tags)),
                entities=entities,
                vector_label=vector,
                means_label=means,
                impact_label=impact,
            )
        )
    return records


def demo_cluster_counts() -> dict[str, int]:
    return {
        "VECTOR": len(VECTOR_VALUES),
        "MEANS": len(MEANS_VALUES),
        "IMPACT": len(IMPACT_VALUES),
    }


def demo_exemplars() -> dict[str, dict[str, list[str]]]:
    return {
        "VECTOR": {k: list(v) for k, v in VECTOR_VALUES.items()},
        "MEANS": {k: list(v) for k, v in MEANS_VALUES.items()},
        "IMPACT": {k: list(v) for k, v in IMPACT_VALUES.items()},
    }


_ENTITY_VALUE_SETS = {"VECTOR": VECTOR_VALUES, "MEANS": MEANS_VALUES, "IMPACT": IMPACT_VALUES}


@dataclass
class DemoModels:
    embedding: EmbeddingModel
    tagger: BlstmModel
    discretization: dict[str, DiscretizationModel]
    completion: dict[str, CompletionModel]
    generator: GeneratorModels
    records: list[DemoRecord]


def build_demo_models(
    seed: int = 7,
    n_records: int = 160,
    dim: int = 32,
    embedding_epochs: int = 25,
    ner_epochs: int = 60,
) -> DemoModels:
    """Train the full artifact set on the synthetic corpus.

    Hyperparameters here are desk-scale overrides; library defaults stay at
    their documented full-scale values.
    """
    records = generate_demo_records(n_records, seed)
    sentences = [[t.norm for t in tokenize(r.vulnerability.description)] for r in records]
    # the golden fixture is part of the demo corpus so its words are in-vocab
    sentences.append([t.norm for t in tokenize(golden_fixture()["description"])])
    emb = train_embedding(
        sentences,
        EmbeddingConfig(
            variant=CBOW,
            dim=dim,
            window=5,
            epochs=embedding_epochs,
            learning_rate=0.05,
            max_vocab=10000,
            seed=seed,
        ),
    )

    discretization: dict[str, DiscretizationModel] = {}
    completion: dict[str, CompletionModel] = {}
    exemplars = demo_exemplars()
    counts = demo_cluster_counts()
    training_entities = [r.entities for r in records]
    for entity_type, value_sets in _ENTITY_VALUE_SETS.items():
        training_values = [
            v for r in records for v in r.entities.values_for(entity_type)
        ]
        disc = fit_discretization(
            training_values, emb, counts[entity_type], seed, entity_type
        )
        disc = label_clusters_by_exemplars(disc, exemplars[entity_type], emb)
        discretization[entity_type] = disc
        completion[entity_type] = train_completion(
            training_entities, emb, disc, entity_type
        )

    ner = train_ner(
        [r.sentence for r in records],
        emb,
        BlstmConfig(
            max_len=60,
            dim=dim,
            hidden=dim,
            epochs=ner_epochs,
            batch_size=32,
            learning_rate=0.1,
            seed=seed,
        ),
    )

    rules = parse_rule_file(load_default_rule_corpus())
    wiring = impute_matrix(estimate_wiring_matrix(rules))
    generator = GeneratorModels(
        embedding=emb,
        discretization=discretization,
        completion=completion,
        wiring=wiring,
        lexicon=load_default_lexicon(),
        mapping=load_default_mapping(),
        tagger=ner,
        threshold=0.5,
    )
    return DemoModels(
        embedding=emb,
        tagger=ner,
        discretization=discretization,
        completion=completion,
        generator=generator,
        records=records,
    )


# --- on-disk demo assets -------------------------------------------------------


def write_demo_corpus(records: list[DemoRecord], path: str | Path) -> None:
    lines = [f"{r.vulnerability.id}\t{r.vulnerability.description}" for r in records]
    Path(path).write_text("\n".join(lines) + "\n", "utf-8")


def write_demo_labeled(records: list[DemoRecord], path: str | Path) -> None:
    blocks = []
    for r in records:
        blocks.append(
            "\n".join(f"{t.surface}\t{tag}" for t, tag in zip(r.sentence.tokens, r.sentence.tags))
        )
    Path(path).write_text("\n\n".join(blocks) + "\n", "utf-8")


def write_demo_entities(records: list[DemoRecord], path: str | Path) -> None:
    lines = []
    for r in records:
        lines.append(
            json.dumps(
                {"cve_id": r.entities.cve_id, "entities": r.entities.entities},
                sort_keys=True,
            )
        )
    Path(path).write_text("\n".join(lines) + "\n", "utf-8")


def read_entity_records(path: str | Path) -> list[EntitySet]:
    records = []
    for line in Path(path).read_text("utf-8").splitlines():
        if not line.strip():
            continue
        data = json.loads(line)
        entity_set = EntitySet(cve_id=data["cve_id"])
        for key, values in data["entities"].items():
            entity_set.entities.setdefault(key, []).extend(values)
        records.append(entity_set)
    return records


def golden_fixture() -> dict:
    from importlib import resources

    text = resources.files("vuln2rule").joinpath("data", "golden_cve_2010_2212.json").read_text("utf-8")
    return json.loads(text)


def golden_entity_set() -> EntitySet:
    data = golden_fixture()
    entity_set = EntitySet(cve_id=data["cve_id"])
    for key, values in data["entities"].items():
        entity_set.entities[key].extend(values)
    return entity_set


def golden_rule_text() -> str:
    from importlib import resources

    return resources.files("vuln2rule").joinpath("data", "golden_cve_2010_2212.P").read_text("utf-8")


# --- synthetic wiring corpus -----------------------------------------------------


def synthesize_wiring_corpus(
    n_templates: int = 6,
    per_template: int = 10,
    noise_rate: float = 0.1,
    seed: int = 0,
):
    """Rules drawn from fixed wiring templates, with a fraction of rules
    carrying one flipped wiring decision.

    Template t: ``goal_t(A, B) :- pre_t(A, C), aux_t(C, B)``.  A noisy rule
    breaks the pre/aux link by giving aux a fresh first variable.
    """
    from .rules.datalog import InteractionRule, Predicate, Term

    rng = np.random.default_rng(seed)
    rules = []
    for t in range(n_templates):
        for _ in range(per_template):
            a, b, c = Term.variable("A"), Term.variable("B"), Term.variable("C")
            rules.append(
                InteractionRule(
                    head=Predicate(f"goal{t}", (a, b)),
                    body=(
                        Predicate(f"pre{t}", (a, c)),
                        Predicate(f"aux{t}", (c, b)),
                    ),
                    description=f"template {t}",
                )
            )
    order = rng.permutation(len(rules))
    rules = [rules[i] for i in order]
    n_noisy = int(round(noise_rate * len(rules)))
    for idx in rng.choice(len(rules), size=n_noisy, replace=False):
        rule = rules[idx]
        noisy_aux = Predicate(rule.body[1].name, (Term.variable("N"), rule.body[1].args[1]))
        rules[idx] = InteractionRule(
            head=rule.head,
            body=(rule.body[0], noisy_aux),
            description=rule.description + " (noisy)",
        )
    return rules
