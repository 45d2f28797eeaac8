"""Rule synthesis from extracted/completed entities.

Three steps: structure creation (labels pick the head and body predicates),
constant assignment (entity values fill constant slots), and variable wiring
(slot pairs merge when their learned co-wiring probability clears the
threshold and their sorts agree).
"""

from __future__ import annotations

import itertools
import re
from dataclasses import dataclass, field
from enum import Enum

from ..completer import (
    CompletionModel,
    DiscretizationModel,
    build_feature_vector,
    map_to_cluster,
    predict_missing,
)
from ..corpus import tokenize
from ..embedding import EmbeddingModel
from ..errors import (
    MissingArtifact,
    MissingCoreEntity,
    RangeRestrictionViolation,
    Vuln2RuleError,
)
from ..tagger import BlstmModel, EntitySet, extract_entities
from ..tagger import tag as tag_tokens
from .datalog import VARIABLE, WILDCARD, InteractionRule, Predicate, Term
from .schema import MappingTables, PredicateSchema, SchemaLexicon
from .wiring import Slot, UnionFind, WiringMatrix

#: entity keys used by structure creation, in the order they are checked
CORE_ENTITIES = ("means", "impact", "vector")
_CORE_TO_TAG = {"means": "MEANS", "impact": "IMPACT", "vector": "VECTOR"}


class UnmappableClusterError(Vuln2RuleError):
    pass


@dataclass
class SkeletonAtom:
    schema: PredicateSchema
    terms: list[Term | None]

    @property
    def slot(self) -> tuple[str, int]:
        return self.schema.name, self.schema.arity


@dataclass
class RuleSkeleton:
    head: SkeletonAtom
    body: list[SkeletonAtom]
    labels: dict[str, str]
    description: str = ""
    trace: dict[str, str] = field(default_factory=dict)

    def atoms(self) -> list[SkeletonAtom]:
        return [self.head, *self.body]


def create_structure(
    clusters: dict[str, str],
    mapping: MappingTables,
    lexicon: SchemaLexicon,
) -> RuleSkeleton:
    """Head from the impact label; body from the means predicates plus the
    vector's support predicates; every variable slot gets a fresh name and
    the range/consequence constants are filled from the mapping tables."""
    for key in CORE_ENTITIES:
        if not clusters.get(key):
            raise MissingCoreEntity(key)
    impact = mapping.impact.get(clusters["impact"])
    if impact is None:
        raise UnmappableClusterError(f"impact label {clusters['impact']!r} has no mapping")
    vector = mapping.vector.get(clusters["vector"])
    if vector is None:
        raise UnmappableClusterError(f"vector label {clusters['vector']!r} has no mapping")
    means = mapping.means.get(clusters["means"])
    if means is None:
        raise UnmappableClusterError(f"means label {clusters['means']!r} has no mapping")

    counter = itertools.count(1)

    def instantiate(name: str) -> SkeletonAtom:
        schema = lexicon.require(name)
        terms: list[Term | None] = []
        for pos in range(schema.arity):
            if pos in schema.constant_slots:
                sort = schema.arg_sorts[pos]
                if sort == "range":
                    terms.append(Term.constant(vector.range_constant))
                elif sort == "consequence":
                    terms.append(Term.constant(impact.consequence))
                else:
                    terms.append(None)
            else:
                terms.append(Term.variable(f"V{next(counter)}"))
        return SkeletonAtom(schema, terms)

    head = instantiate(impact.head)
    body = [instantiate(name) for name in means.body + vector.support]
    return RuleSkeleton(head=head, body=body, labels=dict(clusters))


def to_atom(text: str) -> str:
    """Constant-safe rendering: lowercase_underscore atom, quoted when the
    slug cannot stand alone (leading digit, empty, ...)."""
    slug = re.sub(r"[^a-z0-9_]+", "_", text.lower()).strip("_")
    if re.fullmatch(r"[a-z][a-z0-9_]*", slug):
        return slug
    return "'" + text + "'"


def assign_constants(
    skeleton: RuleSkeleton, entities: EntitySet, cve_id: str
) -> RuleSkeleton:
    """Fill the remaining constant slots: vulnerability ids from the CVE id,
    products/protocols/ports from the entities, wildcards when absent."""

    def first_value(tag: str) -> str | None:
        values = entities.values_for(tag)
        return values[0] if values else None

    fillers = {
        "vulnid": lambda: Term.constant("'" + cve_id + "'"),
        "product": lambda: _entity_constant(first_value("PLATFORM")),
        "protocol": lambda: _entity_constant(first_value("PROTOCOL")),
        "port": lambda: _port_constant(first_value("PORT")),
    }
    for atom in skeleton.atoms():
        for pos, term in enumerate(atom.terms):
            if term is not None:
                continue
            sort = atom.schema.arg_sorts[pos]
            filler = fillers.get(sort)
            filled = filler() if filler else Term.wildcard()
            atom.terms[pos] = filled
            if filled.kind == WILDCARD:
                skeleton.trace[f"{atom.schema.name}#{pos}"] = f"no entity for sort {sort!r}"
            else:
                skeleton.trace[f"{atom.schema.name}#{pos}"] = f"{sort} <- {filled.text}"
    return skeleton


def _entity_constant(value: str | None) -> Term:
    if value is None:
        return Term.wildcard()
    return Term.constant(to_atom(value))


def _port_constant(value: str | None) -> Term:
    if value is None:
        return Term.wildcard()
    return Term.constant(value) if value.isdigit() else Term.constant(to_atom(value))


def _hint_for(schema: PredicateSchema, pos: int) -> str:
    hint = schema.var_hints[pos]
    if hint and (hint[0].isupper() or hint[0] == "_"):
        return hint
    sort = re.sub(r"\W", "", schema.arg_sorts[pos])
    return sort[:1].upper() + sort[1:] if sort else "X"


def wire_variables(
    skeleton: RuleSkeleton,
    matrix: WiringMatrix,
    threshold: float = 0.5,
    enforce_range_restriction: bool = True,
) -> InteractionRule:
    """Union-find merge of variable slots with probability >= threshold and
    equal sorts; merged classes get canonical names from the slot hints.
    Raises RangeRestrictionViolation when a head variable stays unbound
    (cross-validation scoring disables the check to keep the partition)."""
    atoms = skeleton.atoms()
    nodes: list[tuple[int, int]] = []
    for ai, atom in enumerate(atoms):
        for pos, term in enumerate(atom.terms):
            if term is None:
                raise ValueError(
                    f"{atom.schema.name}#{pos}: constant slot not assigned"
                )
            if term.kind == VARIABLE:
                nodes.append((ai, pos))

    def slot_of(node: tuple[int, int]) -> Slot:
        atom = atoms[node[0]]
        return Slot(atom.schema.name, atom.schema.arity, node[1])

    def sort_of(node: tuple[int, int]) -> str:
        atom = atoms[node[0]]
        return atom.schema.arg_sorts[node[1]]

    uf = UnionFind(len(nodes))
    for i in range(len(nodes)):
        for j in range(i + 1, len(nodes)):
            slot_i, slot_j = slot_of(nodes[i]), slot_of(nodes[j])
            if slot_i == slot_j:
                continue
            prob = matrix.prob(slot_i, slot_j)
            if prob is None or prob < threshold:
                continue
            if sort_of(nodes[i]) != sort_of(nodes[j]):
                continue
            uf.union(i, j)

    groups = sorted(uf.groups().values(), key=min)
    used: dict[str, int] = {}
    name_of_node: dict[tuple[int, int], str] = {}
    for members in groups:
        lead = min(members)
        ai, pos = nodes[lead]
        base = _hint_for(atoms[ai].schema, pos)
        used[base] = used.get(base, 0) + 1
        name = base if used[base] == 1 else f"{base}{used[base]}"
        for m in members:
            name_of_node[nodes[m]] = name

    predicates: list[Predicate] = []
    for ai, atom in enumerate(atoms):
        args = []
        for pos, term in enumerate(atom.terms):
            if (ai, pos) in name_of_node:
                args.append(Term.variable(name_of_node[(ai, pos)]))
            else:
                args.append(term)
        predicates.append(Predicate(atom.schema.name, tuple(args)))

    rule = InteractionRule(
        head=predicates[0],
        body=tuple(predicates[1:]),
        description=skeleton.description,
        trace=dict(skeleton.trace),
    )
    if enforce_range_restriction:
        unbound = rule.head_variables_unbound()
        if unbound:
            raise RangeRestrictionViolation(
                f"head variables not bound in body: {sorted(unbound)}"
            )
    return rule


# --- re-wiring parsed rules (cross-validation, self-consistency) -------------


def infer_slot_sorts(
    rules: list[InteractionRule], lexicon: SchemaLexicon | None = None
) -> dict[Slot, str]:
    """Sorts for slots outside the lexicon: slots ever co-wired in the corpus
    share a sort; a class adopts a declared member sort when one exists."""
    slot_list: list[Slot] = sorted(
        {
            Slot(p.name, p.arity, pos)
            for rule in rules
            for p in rule.predicates()
            for pos in range(p.arity)
        }
    )
    index = {s: i for i, s in enumerate(slot_list)}
    uf = UnionFind(len(slot_list))
    for rule in rules:
        by_var: dict[str, list[Slot]] = {}
        for pred in rule.predicates():
            for pos, term in enumerate(pred.args):
                if term.kind == VARIABLE:
                    by_var.setdefault(term.text, []).append(Slot(pred.name, pred.arity, pos))
        for slots in by_var.values():
            for a, b in zip(slots, slots[1:]):
                uf.union(index[a], index[b])

    sorts: dict[Slot, str] = {}
    for root, members in uf.groups().items():
        declared = []
        if lexicon is not None:
            for m in members:
                s = slot_list[m]
                d = lexicon.sort_of(s.name, s.arity, s.pos)
                if d is not None:
                    declared.append(d)
        class_sort = (
            sorted(declared, key=lambda d: (-declared.count(d), d))[0]
            if declared
            else f"inferred{min(members)}"
        )
        for m in members:
            s = slot_list[m]
            own = lexicon.sort_of(s.name, s.arity, s.pos) if lexicon else None
            sorts[s] = own if own is not None else class_sort
    return sorts


def schema_for_predicate(
    pred: Predicate,
    lexicon: SchemaLexicon | None,
    sorts: dict[Slot, str] | None = None,
) -> PredicateSchema:
    schema = lexicon.get(pred.name, pred.arity) if lexicon else None
    if schema is not None:
        return schema
    slot_sorts = []
    hints = []
    for pos in range(pred.arity):
        slot = Slot(pred.name, pred.arity, pos)
        sort = (sorts or {}).get(slot, f"slot_{pred.name}_{pred.arity}_{pos}")
        slot_sorts.append(sort)
        clean = re.sub(r"\W", "", sort)
        hints.append((clean[:1].upper() + clean[1:]) if clean else "X")
    return PredicateSchema(
        name=pred.name,
        arity=pred.arity,
        arg_sorts=tuple(slot_sorts),
        var_hints=tuple(hints),
        constant_slots=frozenset(),
    )


def skeleton_from_rule(
    rule: InteractionRule,
    lexicon: SchemaLexicon | None = None,
    sorts: dict[Slot, str] | None = None,
) -> RuleSkeleton:
    """Same predicates, fresh variables; constants and wildcards kept."""
    counter = itertools.count(1)

    def rebuild(pred: Predicate) -> SkeletonAtom:
        schema = schema_for_predicate(pred, lexicon, sorts)
        terms: list[Term | None] = [
            Term.variable(f"V{next(counter)}") if t.kind == VARIABLE else t
            for t in pred.args
        ]
        return SkeletonAtom(schema, terms)

    return RuleSkeleton(
        head=rebuild(rule.head),
        body=[rebuild(p) for p in rule.body],
        labels={},
        description=rule.description,
    )


def variable_groups(rule: InteractionRule) -> list[frozenset[tuple[int, int]]]:
    """Partition of (atom index, position) nodes by shared variable name."""
    by_var: dict[str, set[tuple[int, int]]] = {}
    for ai, pred in enumerate(rule.predicates()):
        for pos, term in enumerate(pred.args):
            if term.kind == VARIABLE:
                by_var.setdefault(term.text, set()).add((ai, pos))
    return [frozenset(nodes) for nodes in by_var.values()]


# --- end-to-end generation ------------------------------------------------------


class FailureKind(str, Enum):
    MISSING_CORE_ENTITY = "MissingCoreEntity"
    UNSPECIFIED_VULNERABILITY = "UnspecifiedVulnerability"
    UNMAPPABLE_CLUSTER = "UnmappableCluster"
    RANGE_RESTRICTION = "RangeRestrictionViolation"


@dataclass(frozen=True)
class GenerationFailure:
    kind: FailureKind
    detail: str = ""


@dataclass
class GeneratorModels:
    """Everything generation needs, loaded once and then read-only."""

    embedding: EmbeddingModel
    discretization: dict[str, DiscretizationModel]
    completion: dict[str, CompletionModel]
    wiring: WiringMatrix
    lexicon: SchemaLexicon
    mapping: MappingTables
    tagger: BlstmModel | None = None
    threshold: float = 0.5


def generate(
    description: str,
    models: GeneratorModels,
    gold_entities: EntitySet | None = None,
    cve_id: str | None = None,
) -> InteractionRule | GenerationFailure:
    """Description to interaction rule; failures come back as values.

    With ``gold_entities`` the tagging stage is bypassed, which decouples
    rule-synthesis evaluation from tagger quality.
    """
    if gold_entities is not None:
        entity_set = gold_entities
        cve_id = cve_id or gold_entities.cve_id
    else:
        if models.tagger is None:
            raise MissingArtifact("tagger", "needed when no gold entities are given")
        cve_id = cve_id or "CVE-0000-0000"
        tokens = tokenize(description)
        if tokens:
            tagged = tag_tokens(models.tagger, models.embedding, tokens)
            pairs = list(zip(tokens, [t for t, _ in tagged]))
            entity_set = extract_entities(pairs, cve_id)
        else:
            entity_set = EntitySet(cve_id=cve_id)

    if not any(entity_set.present(t) for t in entity_set.entities):
        return GenerationFailure(
            FailureKind.MISSING_CORE_ENTITY, "nothing extracted from the description"
        )

    means_text = " ".join(entity_set.values_for("MEANS")).lower()
    if "unspecified vulnerabilit" in means_text:
        return GenerationFailure(FailureKind.UNSPECIFIED_VULNERABILITY, means_text)

    labels: dict[str, str] = {}
    trace: dict[str, str] = {}
    for key in CORE_ENTITIES:
        tag_name = _CORE_TO_TAG[key]
        disc = models.discretization.get(tag_name)
        if entity_set.present(tag_name):
            if disc is None:
                raise MissingArtifact(f"discretization:{tag_name}")
            value = entity_set.values_for(tag_name)[0]
            _, label = map_to_cluster(disc, value.split(), models.embedding)
            labels[key] = label
            trace[key] = f"entity value {value!r} -> {label}"
        else:
            completion = models.completion.get(tag_name)
            if completion is None:
                return GenerationFailure(
                    FailureKind.MISSING_CORE_ENTITY,
                    f"{tag_name} absent and no completion model available",
                )
            features = build_feature_vector(entity_set, models.embedding)
            ranked = predict_missing(completion, features, top_k=1)
            labels[key] = ranked[0][0]
            trace[key] = f"completed -> {ranked[0][0]} (p={ranked[0][1]:.3f})"

    try:
        skeleton = create_structure(labels, models.mapping, models.lexicon)
    except MissingCoreEntity as exc:
        return GenerationFailure(FailureKind.MISSING_CORE_ENTITY, str(exc))
    except UnmappableClusterError as exc:
        return GenerationFailure(FailureKind.UNMAPPABLE_CLUSTER, str(exc))

    skeleton.trace.update(trace)
    platform = entity_set.values_for("PLATFORM")
    skeleton.description = (
        f"{cve_id}: {labels['means']} in "
        f"{platform[0] if platform else 'an unspecified product'} "
        f"enables {labels['impact']} ({labels['vector']} vector); auto-generated"
    )
    assign_constants(skeleton, entity_set, cve_id)
    try:
        return wire_variables(skeleton, models.wiring, models.threshold)
    except RangeRestrictionViolation as exc:
        return GenerationFailure(FailureKind.RANGE_RESTRICTION, str(exc))
