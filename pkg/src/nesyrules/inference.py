"""Decision-list interpreter with negation as failure and justifications.

Class rules are tried in order; the first rule whose body holds wins.
ab predicates are evaluated recursively through their defining rules.
No rule firing means abstention (returned as None); abstentions count
as incorrect downstream.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .binarization import BinarizationTable
from .rules import Literal, Rule, RuleSet, validate_stratification


@dataclass(frozen=True)
class FactSet:
    """True predicates for one image: the columns that binarized to 1."""

    image_id: str
    true_predicates: frozenset[str]

    @classmethod
    def from_row(cls, table: BinarizationTable, row: int) -> "FactSet":
        preds = frozenset(str(j) for j in np.flatnonzero(table.features[row] == 1))
        return cls(image_id=table.image_ids[row], true_predicates=preds)

    def to_facts_text(self) -> str:
        ordered = sorted(self.true_predicates, key=lambda p: (len(p), p))
        return "\n".join(f"{p}(img)." for p in ordered) + ("\n" if ordered else "")


def facts_from_text(text: str, image_id: str = "img") -> FactSet:
    preds = set()
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        if not (line.endswith("(img).")):
            raise ValueError(f"bad fact line: {line!r}")
        preds.add(line[: -len("(img).")])
    return FactSet(image_id=image_id, true_predicates=frozenset(preds))


class NonStratifiedError(ValueError):
    def __init__(self, cycle: list[str]):
        super().__init__(f"program is not stratified; cycle through negation: {' -> '.join(cycle)}")
        self.cycle = cycle


def _ensure_stratified(rs: RuleSet) -> None:
    # rulesets are immutable after construction, so one check suffices
    if getattr(rs, "_stratified_ok", False):
        return
    cycle = validate_stratification(rs)
    if cycle is not None:
        raise NonStratifiedError(cycle)
    rs._stratified_ok = True


def _predicate_true(pred: str, facts: FactSet, groups: dict[str, list[Rule]], memo: dict) -> bool:
    if pred in memo:
        return memo[pred]
    if pred not in groups:
        value = pred in facts.true_predicates
    else:
        value = any(_body_holds(rule.body, facts, groups, memo) for rule in groups[pred])
    memo[pred] = value
    return value


def _body_holds(body: list[Literal], facts: FactSet, groups, memo) -> bool:
    for lit in body:
        if _predicate_true(lit.predicate, facts, groups, memo) == lit.negated:
            return False
    return True


def classify(rs: RuleSet, facts: FactSet) -> str | None:
    """First class rule whose body holds; None means abstain."""
    _ensure_stratified(rs)
    groups = rs.ab_definitions()
    memo: dict[str, bool] = {}
    for rule in rs.class_rules:
        if _body_holds(rule.body, facts, groups, memo):
            return rule.head
    return None


def classify_table(rs: RuleSet, table: BinarizationTable) -> list[str | None]:
    return [classify(rs, FactSet.from_row(table, i)) for i in range(table.num_rows)]


# --- justifications ---

@dataclass
class FactCheck:
    """Leaf: a plain predicate looked up in the fact set."""

    literal: Literal
    holds: bool  # truth of the predicate itself, not of the literal


@dataclass
class FailedRule:
    """Witness for a failed defining rule: its first unmet literal."""

    rule: Rule
    failed_literal: Literal


@dataclass
class AbFailed:
    """Negated ab literal satisfied because every defining rule failed."""

    literal: Literal
    failures: list[FailedRule]


@dataclass
class AbSatisfied:
    """Positive ab literal satisfied by a firing defining rule."""

    literal: Literal
    sub: "Justification"


Child = Union[FactCheck, AbFailed, AbSatisfied]


@dataclass
class Justification:
    rule: Rule
    children: list[Child] = field(default_factory=list)

    def depth(self) -> int:
        best = 1
        for child in self.children:
            if isinstance(child, AbSatisfied):
                best = max(best, 1 + child.sub.depth())
            elif isinstance(child, AbFailed):
                best = max(best, 2)
        return best

    def render(self, indent: int = 0) -> str:
        pad = "  " * indent
        lines = [pad + self.rule.render()]
        for child in self.children:
            cpad = "  " * (indent + 1)
            if isinstance(child, FactCheck):
                if child.literal.negated:
                    lines.append(f"{cpad}{child.literal.render()}: no fact {child.literal.predicate}(img)")
                else:
                    lines.append(f"{cpad}{child.literal.render()}: fact {child.literal.predicate}(img)")
            elif isinstance(child, AbFailed):
                lines.append(f"{cpad}{child.literal.render()}: all rules for {child.literal.predicate} failed")
                for failure in child.failures:
                    lines.append(
                        f"{cpad}  {failure.rule.render()}  [failed at {failure.failed_literal.render()}]"
                    )
            else:
                lines.append(f"{cpad}{child.literal.render()}: derived by")
                lines.append(child.sub.render(indent + 2))
        return "\n".join(lines)

    def to_json(self) -> dict:
        children = []
        for child in self.children:
            if isinstance(child, FactCheck):
                children.append(
                    {"kind": "fact", "literal": child.literal.render(), "holds": child.holds}
                )
            elif isinstance(child, AbFailed):
                children.append(
                    {
                        "kind": "naf",
                        "literal": child.literal.render(),
                        "failures": [
                            {"rule": f.rule.render(), "failed_at": f.failed_literal.render()}
                            for f in child.failures
                        ],
                    }
                )
            else:
                children.append(
                    {"kind": "derived", "literal": child.literal.render(), "sub": child.sub.to_json()}
                )
        return {"rule": self.rule.render(), "children": children}


def _first_unmet(rule: Rule, facts: FactSet, groups, memo) -> Literal:
    for lit in rule.body:
        if _predicate_true(lit.predicate, facts, groups, memo) == lit.negated:
            return lit
    raise AssertionError("rule did not fail")


def _justify_rule(rule: Rule, facts: FactSet, groups, memo) -> Justification:
    node = Justification(rule=rule)
    for lit in rule.body:
        if lit.predicate in groups:
            if lit.negated:
                failures = [
                    FailedRule(r, _first_unmet(r, facts, groups, memo))
                    for r in groups[lit.predicate]
                ]
                node.children.append(AbFailed(lit, failures))
            else:
                firing = next(
                    r for r in groups[lit.predicate] if _body_holds(r.body, facts, groups, memo)
                )
                node.children.append(AbSatisfied(lit, _justify_rule(firing, facts, groups, memo)))
        else:
            node.children.append(FactCheck(lit, holds=not lit.negated))
    return node


def justify(rs: RuleSet, facts: FactSet) -> Justification | None:
    """Tree explaining the fired rule; None exactly when classify abstains."""
    _ensure_stratified(rs)
    groups = rs.ab_definitions()
    memo: dict[str, bool] = {}
    for rule in rs.class_rules:
        if _body_holds(rule.body, facts, groups, memo):
            return _justify_rule(rule, facts, groups, memo)
    return None
