"""Semantic label space, thing/stuff partition, and prompt remapping rules."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

THING = "thing"
STUFF = "stuff"
FLAT = "flat"
_KINDS = (THING, STUFF, FLAT)

# Canonical instance ids for stuff classes sit far above any per-sample box id.
STUFF_INST_BASE = 1_000_000


def stuff_instance_id(class_id: int) -> int:
    """Canonical class-level instance id for stuff/flat voxels and points."""
    return STUFF_INST_BASE + int(class_id)


class TaxonomyError(ValueError):
    pass


@dataclass(frozen=True)
class ClassDef:
    class_id: int
    name: str
    kind: str


@dataclass(frozen=True)
class PromptRule:
    """One prompt string, its target class name, and optional pixel-conflict precedence."""

    prompt: str
    target: str
    precedence: tuple[tuple[str, str], ...] = ()  # (relation, other prompt)


class Taxonomy:
    """Immutable class table. Safe to share read-only across workers."""

    def __init__(self, classes, free_id, ignore_id, eval_excluded=()):
        classes = tuple(classes)
        ids = [c.class_id for c in classes]
        if ids != list(range(len(classes))):
            raise TaxonomyError("class ids must be dense and sorted from 0")
        names = [c.name for c in classes]
        if len(set(names)) != len(names):
            raise TaxonomyError("duplicate class names")
        for c in classes:
            if c.kind not in _KINDS:
                raise TaxonomyError(f"unknown kind {c.kind!r} for class {c.name!r}")
        if free_id == ignore_id:
            raise TaxonomyError("free_id and ignore_id must be distinct")
        for special, label in ((free_id, "free_id"), (ignore_id, "ignore_id")):
            if 0 <= special < len(classes):
                raise TaxonomyError(f"{label} collides with a semantic class id")

        self.classes = classes
        self.free_id = int(free_id)
        self.ignore_id = int(ignore_id)
        self.num_classes = len(classes)
        self.name_to_id = {c.name: c.class_id for c in classes}
        self.id_to_name = {c.class_id: c.name for c in classes}
        self.thing_ids = frozenset(c.class_id for c in classes if c.kind == THING)

        excluded = set()
        for e in eval_excluded:
            cid = self.name_to_id.get(e, e) if isinstance(e, str) else e
            if cid not in self.id_to_name:
                raise TaxonomyError(f"eval_excluded entry {e!r} is not a class")
            excluded.add(int(cid))
        self.eval_excluded = frozenset(excluded)

    def kind_of(self, class_id: int) -> str:
        return self.classes[class_id].kind

    def is_thing(self, class_id: int) -> bool:
        return class_id in self.thing_ids

    @property
    def class_ids(self):
        return tuple(c.class_id for c in self.classes)

    def semantic_value_mask(self, sem: np.ndarray) -> np.ndarray:
        """True where a label raster carries a valid semantic class id."""
        return sem < self.num_classes

    def __eq__(self, other):
        return (
            isinstance(other, Taxonomy)
            and self.classes == other.classes
            and self.free_id == other.free_id
            and self.ignore_id == other.ignore_id
            and self.eval_excluded == other.eval_excluded
        )


class RuleSet:
    """Ordered prompt rules with an acyclic over/under precedence relation.

    Prompts are addressed by their index in the rule list; candidate metadata on
    disk refers to the same indices. The precedence graph is closed transitively
    at load, so conflicts resolve in a single lookup.
    """

    def __init__(self, rules, taxonomy: Taxonomy):
        rules = tuple(rules)
        prompts = [r.prompt for r in rules]
        if len(set(prompts)) != len(prompts):
            raise TaxonomyError("duplicate prompt strings: the prompt map must be a function")
        self.rules = rules
        self.taxonomy = taxonomy
        self.prompt_index = {p: i for i, p in enumerate(prompts)}

        targets = []
        for r in rules:
            if r.target not in taxonomy.name_to_id:
                raise TaxonomyError(f"prompt {r.prompt!r} targets unknown class {r.target!r}")
            targets.append(taxonomy.name_to_id[r.target])
        self.target_ids = np.asarray(targets, dtype=np.uint16)

        n = len(rules)
        over = np.zeros((n, n), dtype=bool)
        for i, r in enumerate(rules):
            for relation, other in r.precedence:
                if other not in self.prompt_index:
                    raise TaxonomyError(f"precedence of {r.prompt!r} names unknown prompt {other!r}")
                j = self.prompt_index[other]
                if relation == "over":
                    over[i, j] = True
                elif relation == "under":
                    over[j, i] = True
                else:
                    raise TaxonomyError(f"unknown precedence relation {relation!r}")
        # transitive closure; a cycle reaches the diagonal
        closure = over.copy()
        for _ in range(n):
            grown = closure | (closure @ closure)
            if (grown == closure).all():
                break
            closure = grown
        if closure.diagonal().any():
            bad = [rules[i].prompt for i in np.flatnonzero(closure.diagonal())]
            raise TaxonomyError(f"precedence cycle involving prompts {bad}")
        self.over = closure

    def __len__(self):
        return len(self.rules)

    def resolve_prompt(self, prompt_id: int) -> int:
        """Target class id of a prompt. Total over the loaded rule set."""
        return int(self.target_ids[prompt_id])

    def precedence_wins(self, prompt_a: int, prompt_b: int) -> str:
        """Which prompt wins a pixel conflict: 'a', 'b', or 'score' (no relation declared)."""
        if self.over[prompt_a, prompt_b]:
            return "a"
        if self.over[prompt_b, prompt_a]:
            return "b"
        return "score"


# Default label space: 17 semantic classes (driving taxonomy) plus free.
_DEFAULT_CLASSES = (
    ("others", STUFF),
    ("barrier", THING),
    ("bicycle", THING),
    ("bus", THING),
    ("car", THING),
    ("construction_vehicle", THING),
    ("motorcycle", THING),
    ("pedestrian", THING),
    ("traffic_cone", THING),
    ("trailer", THING),
    ("truck", THING),
    ("driveable_surface", FLAT),
    ("other_flat", FLAT),
    ("sidewalk", FLAT),
    ("terrain", FLAT),
    ("manmade", STUFF),
    ("vegetation", STUFF),
)

# Default prompt set: synonyms that promptable segmenters handle better than the
# bare class names. Edit the rules file, not this table, to change the label space.
_DEFAULT_PROMPTS = (
    ("barrier", "barrier"),
    ("guardrail", "barrier"),
    ("bicycle", "bicycle"),
    ("bus", "bus"),
    ("car", "car"),
    ("van", "car"),
    ("construction vehicle", "construction_vehicle"),
    ("excavator", "construction_vehicle"),
    ("motorcycle", "motorcycle"),
    ("person", "pedestrian"),
    ("pedestrian", "pedestrian"),
    ("traffic cone", "traffic_cone"),
    ("trailer", "trailer"),
    ("truck", "truck"),
    ("road", "driveable_surface"),
    ("street", "driveable_surface"),
    ("sidewalk", "sidewalk"),
    ("pavement", "sidewalk"),
    ("grass", "terrain"),
    ("dirt", "terrain"),
    ("gravel", "terrain"),
    ("building", "manmade"),
    ("wall", "manmade"),
    ("tree", "vegetation"),
    ("bush", "vegetation"),
)


def default_taxonomy() -> Taxonomy:
    classes = [ClassDef(i, name, kind) for i, (name, kind) in enumerate(_DEFAULT_CLASSES)]
    return Taxonomy(classes, free_id=17, ignore_id=255, eval_excluded=("others", "other_flat"))


def default_rules(taxonomy: Taxonomy | None = None) -> RuleSet:
    taxonomy = taxonomy or default_taxonomy()
    return RuleSet([PromptRule(p, t) for p, t in _DEFAULT_PROMPTS], taxonomy)


def identity_rules(taxonomy: Taxonomy, class_names=None) -> RuleSet:
    """One prompt per class, named identically. Used by the synthetic generator."""
    names = class_names or [c.name for c in taxonomy.classes]
    return RuleSet([PromptRule(n, n) for n in names], taxonomy)


_TAXONOMY_KEYS = {"classes", "free_id", "ignore_id", "eval_excluded", "prompts"}
_CLASS_KEYS = {"id", "name", "kind"}
_PROMPT_KEYS = {"prompt", "target", "precedence"}
_PRECEDENCE_KEYS = {"relation", "other_prompt"}


def _check_keys(mapping, allowed, where):
    unknown = set(mapping) - allowed
    if unknown:
        raise TaxonomyError(f"unknown keys {sorted(unknown)} in {where}")


def load_taxonomy(path) -> tuple[Taxonomy, RuleSet]:
    """Load a taxonomy + rules file (YAML). Rejects unknown keys and cyclic precedence."""
    path = Path(path)
    with open(path, "r", encoding="utf-8") as f:
        doc = yaml.safe_load(f)
    if not isinstance(doc, dict):
        raise TaxonomyError(f"{path}: top level must be a mapping")
    _check_keys(doc, _TAXONOMY_KEYS, str(path))

    classes = []
    for entry in doc.get("classes", []):
        _check_keys(entry, _CLASS_KEYS, f"{path} classes")
        classes.append(ClassDef(int(entry["id"]), str(entry["name"]), str(entry["kind"])))
    taxonomy = Taxonomy(
        classes,
        free_id=int(doc["free_id"]),
        ignore_id=int(doc["ignore_id"]),
        eval_excluded=doc.get("eval_excluded", ()),
    )

    rules = []
    for entry in doc.get("prompts", []):
        _check_keys(entry, _PROMPT_KEYS, f"{path} prompts")
        precedence = []
        for rel in entry.get("precedence", ()):
            _check_keys(rel, _PRECEDENCE_KEYS, f"{path} precedence of {entry['prompt']!r}")
            precedence.append((str(rel["relation"]), str(rel["other_prompt"])))
        rules.append(PromptRule(str(entry["prompt"]), str(entry["target"]), tuple(precedence)))
    return taxonomy, RuleSet(rules, taxonomy)


def save_taxonomy(path, taxonomy: Taxonomy, rules: RuleSet) -> None:
    doc = {
        "classes": [
            {"id": c.class_id, "name": c.name, "kind": c.kind} for c in taxonomy.classes
        ],
        "free_id": taxonomy.free_id,
        "ignore_id": taxonomy.ignore_id,
        "eval_excluded": sorted(taxonomy.id_to_name[i] for i in taxonomy.eval_excluded),
        "prompts": [
            {
                "prompt": r.prompt,
                "target": r.target,
                **(
                    {
                        "precedence": [
                            {"relation": rel, "other_prompt": other} for rel, other in r.precedence
                        ]
                    }
                    if r.precedence
                    else {}
                ),
            }
            for r in rules.rules
        ],
    }
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(doc, f, sort_keys=False)
