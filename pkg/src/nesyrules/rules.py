"""Sequential-covering rule learner over binarization tables.

Produces an ordered decision list of class rules plus exception (ab)
rules, in the default-with-exceptions style: a class rule's body may
negate ab predicates whose defining rules were learned by swapping the
positive and negative examples. The output is a stratified program.

Hyperparameters: `ratio` bounds false positives against true positives
for every accepted rule; `tail` (a fraction of the table) sets the
minimum number of examples a rule must cover.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import numpy as np

from .binarization import BinarizationTable

# exception recursion cap: ab of ab of ab, nothing deeper
MAX_AB_DEPTH = 3


@dataclass(frozen=True)
class Literal:
    predicate: str  # decimal filter id, "abN", or a 'quoted' concept label
    negated: bool = False

    def render(self) -> str:
        prefix = "not " if self.negated else ""
        return f"{prefix}{self.predicate}(X)"


@dataclass
class Rule:
    head: str  # class name for kind="class", ab id for kind="ab"
    body: list[Literal] = field(default_factory=list)
    kind: str = "class"
    tp: int = 0  # covered positives at the moment of acceptance
    fp: int = 0

    def render(self) -> str:
        head = f"target(X,'{self.head}')" if self.kind == "class" else f"{self.head}(X)"
        if not self.body:
            return f"{head}."
        return f"{head} :- " + ", ".join(lit.render() for lit in self.body) + "."


@dataclass
class RuleSet:
    class_rules: list[Rule] = field(default_factory=list)
    ab_rules: list[Rule] = field(default_factory=list)
    ratio: float | None = None
    tail: float | None = None
    stats: dict = field(default_factory=dict)

    def ab_definitions(self) -> dict[str, list[Rule]]:
        groups: dict[str, list[Rule]] = {}
        for rule in self.ab_rules:
            groups.setdefault(rule.head, []).append(rule)
        return groups

    def to_text(self) -> str:
        def ab_key(rule: Rule) -> int:
            return int(rule.head[2:])

        lines = [r.render() for r in self.class_rules]
        lines += [r.render() for r in sorted(self.ab_rules, key=ab_key)]
        return "\n".join(lines) + ("\n" if lines else "")


def ruleset_size(rs: RuleSet) -> int:
    """Total predicate count: every head plus every body literal."""
    return sum(1 + len(r.body) for r in rs.class_rules + rs.ab_rules)


# --- text format ---

_HEAD_CLASS = re.compile(r"target\(X,'([^']*)'\)")
_HEAD_AB = re.compile(r"(ab\d+)\(X\)")
_LITERAL = re.compile(r"(not )?(\d+|ab\d+|'[^']*')\(X\)")


class RuleParseError(ValueError):
    pass


def _parse_body(text: str, line_no: int) -> list[Literal]:
    body = []
    for part in text.split(", "):
        m = _LITERAL.fullmatch(part)
        if not m:
            raise RuleParseError(f"line {line_no}: bad literal {part!r}")
        body.append(Literal(predicate=m.group(2), negated=m.group(1) is not None))
    return body


def parse_rules(text: str) -> RuleSet:
    """Parse the one-rule-per-line text format back into a RuleSet."""
    rs = RuleSet()
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if not line.endswith("."):
            raise RuleParseError(f"line {line_no}: missing terminating '.'")
        line = line[:-1]
        head_text, sep, body_text = line.partition(" :- ")
        m = _HEAD_CLASS.fullmatch(head_text)
        if m:
            rule = Rule(head=m.group(1), kind="class")
        else:
            m = _HEAD_AB.fullmatch(head_text)
            if not m:
                raise RuleParseError(f"line {line_no}: bad head {head_text!r}")
            rule = Rule(head=m.group(1), kind="ab")
        if sep:
            if not body_text:
                raise RuleParseError(f"line {line_no}: empty body after ':-'")
            rule.body = _parse_body(body_text, line_no)
        (rs.class_rules if rule.kind == "class" else rs.ab_rules).append(rule)
    return rs


# --- stratification ---

def validate_stratification(rs: RuleSet) -> list[str] | None:
    """Return None if no cycle passes through negation, else one offending cycle.

    The dependency graph has an edge head -> body predicate for every rule;
    a cycle is rejected when any of its edges is negated.
    """
    edges: dict[str, set[tuple[str, bool]]] = {}
    for rule in rs.class_rules + rs.ab_rules:
        head = f"class:{rule.head}" if rule.kind == "class" else rule.head
        deps = edges.setdefault(head, set())
        for lit in rule.body:
            deps.add((lit.predicate, lit.negated))
            edges.setdefault(lit.predicate, set())

    # Tarjan strongly connected components, iterative
    index: dict[str, int] = {}
    low: dict[str, int] = {}
    on_stack: set[str] = set()
    stack: list[str] = []
    components: list[set[str]] = []
    counter = [0]

    def strongconnect(root: str) -> None:
        work = [(root, iter(sorted(p for p, _ in edges.get(root, ()))))]
        index[root] = low[root] = counter[0]
        counter[0] += 1
        stack.append(root)
        on_stack.add(root)
        while work:
            node, it = work[-1]
            advanced = False
            for succ in it:
                if succ not in index:
                    index[succ] = low[succ] = counter[0]
                    counter[0] += 1
                    stack.append(succ)
                    on_stack.add(succ)
                    work.append((succ, iter(sorted(p for p, _ in edges.get(succ, ())))))
                    advanced = True
                    break
                if succ in on_stack:
                    low[node] = min(low[node], index[succ])
            if advanced:
                continue
            work.pop()
            if low[node] == index[node]:
                component = set()
                while True:
                    member = stack.pop()
                    on_stack.discard(member)
                    component.add(member)
                    if member == node:
                        break
                components.append(component)
            if work:
                parent = work[-1][0]
                low[parent] = min(low[parent], low[node])

    for node in sorted(edges):
        if node not in index:
            strongconnect(node)

    for component in components:
        internal = [
            (u, v, neg)
            for u in component
            for (v, neg) in edges.get(u, ())
            if v in component
        ]
        if not internal:
            continue
        if len(component) == 1 and not any(u == v for u, v, _ in internal):
            continue
        negated_edges = [(u, v) for u, v, neg in internal if neg]
        if not negated_edges:
            continue
        # recover a concrete cycle through the first negated edge
        u, v = negated_edges[0]
        path = _find_path(v, u, component, edges)
        return [u] + path

    return None


def _find_path(start: str, goal: str, allowed: set[str], edges) -> list[str]:
    # BFS inside one strongly connected component; a path always exists
    from collections import deque

    queue = deque([[start]])
    seen = {start}
    while queue:
        path = queue.popleft()
        node = path[-1]
        if node == goal:
            return path
        for succ, _ in edges.get(node, ()):
            if succ in allowed and succ not in seen:
                seen.add(succ)
                queue.append(path + [succ])
    raise AssertionError("no path inside a strongly connected component")


# --- the learner ---

@dataclass
class _Pending:
    """Rule under construction: body over feature columns plus exceptions."""

    body: list[tuple[int, bool]] = field(default_factory=list)  # (feature, negated)
    exceptions: list["_Pending"] = field(default_factory=list)
    tp: int = 0
    fp: int = 0


def _body_mask(body: list[tuple[int, bool]], X: np.ndarray) -> np.ndarray:
    mask = np.ones(len(X), dtype=bool)
    for j, negated in body:
        mask &= (X[:, j] == 0) if negated else (X[:, j] == 1)
    return mask


def _covers(pending: _Pending, X: np.ndarray) -> np.ndarray:
    """Rows the rule claims: body holds and no exception disjunct holds."""
    mask = _body_mask(pending.body, X)
    for sub in pending.exceptions:
        mask &= ~_covers(sub, X)
    return mask


def _best_literal(
    X: np.ndarray, pos: np.ndarray, neg: np.ndarray, used: set[int]
) -> tuple[int, bool] | None:
    """Literal with maximal FOIL-style gain; ties prefer positive polarity,
    then the lower feature index. None when no literal has positive gain."""
    t, f = len(pos), len(neg)
    if t == 0:
        return None
    base = math.log2(t / (t + f))
    pos_ones = X[pos].sum(axis=0)
    neg_ones = X[neg].sum(axis=0) if f else np.zeros(X.shape[1], dtype=np.int64)

    best = None
    best_key = (0.0,)
    for j in range(X.shape[1]):
        if j in used:
            continue
        for negated in (False, True):
            t_l = int(t - pos_ones[j]) if negated else int(pos_ones[j])
            f_l = int(f - neg_ones[j]) if negated else int(neg_ones[j])
            if t_l == 0:
                continue
            gain = t_l * (math.log2(t_l / (t_l + f_l)) - base)
            key = (gain, 0 if negated else 1, -j)
            if gain > 0 and key > best_key:
                best_key = key
                best = (j, negated)
    return best


def _grow_body(
    X: np.ndarray,
    pos: np.ndarray,
    neg: np.ndarray,
    ratio: float,
    allow_empty: bool,
) -> tuple[list[tuple[int, bool]], np.ndarray, np.ndarray] | None:
    """Add literals until FP <= ratio*TP or no literal helps.

    Returns (body, covered positives, covered negatives); None when an
    empty body is disallowed and no literal has gain.
    """
    body: list[tuple[int, bool]] = []
    used: set[int] = set()
    cur_pos, cur_neg = pos, neg
    while True:
        if body or allow_empty:
            if len(cur_neg) <= ratio * len(cur_pos):
                return body, cur_pos, cur_neg
        choice = _best_literal(X, cur_pos, cur_neg, used)
        if choice is None:
            if not body and not allow_empty:
                return None
            return body, cur_pos, cur_neg
        j, negated = choice
        body.append((j, negated))
        used.add(j)
        keep = (X[:, j] == 0) if negated else (X[:, j] == 1)
        cur_pos = cur_pos[keep[cur_pos]]
        cur_neg = cur_neg[keep[cur_neg]]


def _learn_one(
    X: np.ndarray,
    pos: np.ndarray,
    neg: np.ndarray,
    ratio: float,
    min_cover: int,
    depth: int,
    allow_empty: bool,
) -> _Pending | None:
    grown = _grow_body(X, pos, neg, ratio, allow_empty)
    if grown is None:
        return None
    body, cur_pos, cur_neg = grown
    pending = _Pending(body=body)
    if len(cur_neg) > 0 and depth < MAX_AB_DEPTH:
        # swap: the covered negatives become positives of the exception learner
        pending.exceptions = _learn_disjuncts(X, cur_neg, cur_pos, ratio, min_cover, depth + 1)

    covered = _covers(pending, X)
    tp = int(covered[pos].sum())
    fp = int(covered[neg].sum())
    if fp > ratio * tp or tp < min_cover:
        return None
    pending.tp, pending.fp = tp, fp
    return pending


def _learn_disjuncts(
    X: np.ndarray,
    pos: np.ndarray,
    neg: np.ndarray,
    ratio: float,
    min_cover: int,
    depth: int,
) -> list[_Pending]:
    """Sequential covering for exception rules; bodies must be non-empty."""
    rules: list[_Pending] = []
    pool = pos
    while len(pool) > 0:
        pending = _learn_one(X, pool, neg, ratio, min_cover, depth, allow_empty=False)
        if pending is None:
            break
        covered = _covers(pending, X)
        newly = pool[covered[pool]]
        if len(newly) == 0:
            break
        rules.append(pending)
        pool = pool[~covered[pool]]
    return rules


def fold_sem(table: BinarizationTable, ratio: float = 0.8, tail: float = 5e-3) -> RuleSet:
    """Learn a decision list with exceptions from a binarization table.

    Classes are covered one-vs-rest in descending training frequency;
    covered positives are removed after each accepted rule. Residual
    false positives are handled by recursively learning ab rules on the
    swapped example sets. Rules violating the ratio bound, or covering
    fewer than ceil(tail*N) examples, are discarded and end that class.
    """
    if table.num_rows == 0:
        raise ValueError("empty table")
    if not 0 <= ratio <= 1:
        raise ValueError("ratio must be in [0, 1]")
    if tail < 0:
        raise ValueError("tail must be >= 0")
    for name in table.class_names:
        if "'" in name:
            raise ValueError(f"class name {name!r} cannot be quoted in a rule head")

    X = table.features
    labels = np.asarray([table.class_names.index(lbl) for lbl in table.labels])
    n_total = table.num_rows
    min_cover = max(1, math.ceil(tail * n_total))

    counts = {c: int((labels == i).sum()) for i, c in enumerate(table.class_names)}
    order = sorted(
        (c for c in table.class_names if counts[c] > 0), key=lambda c: (-counts[c], c)
    )

    accepted: list[tuple[str, _Pending]] = []
    for cls in order:
        cls_idx = table.class_names.index(cls)
        pos = np.flatnonzero(labels == cls_idx)
        neg = np.flatnonzero(labels != cls_idx)
        pool = pos
        while len(pool) > 0:
            pending = _learn_one(X, pool, neg, ratio, min_cover, 0, allow_empty=True)
            if pending is None:
                break
            covered = _covers(pending, X)
            newly = pool[covered[pool]]
            if len(newly) == 0:
                break
            accepted.append((cls, pending))
            pool = pool[~covered[pool]]

    rs = _assemble(accepted, ratio, tail)
    _record_stats(rs, accepted, X, labels, table.class_names)
    return rs


def _assemble(accepted: list[tuple[str, _Pending]], ratio: float, tail: float) -> RuleSet:
    rs = RuleSet(ratio=ratio, tail=tail)
    counter = [0]

    def finalize(pending: _Pending, head: str, kind: str) -> Rule:
        body = [Literal(str(j), negated) for j, negated in pending.body]
        rule = Rule(head=head, body=body, kind=kind, tp=pending.tp, fp=pending.fp)
        if pending.exceptions:
            counter[0] += 1
            ab_id = f"ab{counter[0]}"
            rule.body.append(Literal(ab_id, negated=True))
            for sub in pending.exceptions:
                rs.ab_rules.append(finalize(sub, ab_id, "ab"))
        return rule

    for cls, pending in accepted:
        rs.class_rules.append(finalize(pending, cls, "class"))
    rs.ab_rules.sort(key=lambda r: int(r.head[2:]))
    return rs


def _record_stats(
    rs: RuleSet,
    accepted: list[tuple[str, _Pending]],
    X: np.ndarray,
    labels: np.ndarray,
    class_names: list[str],
) -> None:
    """First-match predictions over the accepted rules, mask-evaluated."""
    prediction = np.full(len(X), -1, dtype=np.int64)
    for cls, pending in accepted:
        cls_idx = class_names.index(cls)
        claim = _covers(pending, X) & (prediction == -1)
        prediction[claim] = cls_idx
    correct = int((prediction == labels).sum())
    abstained = prediction == -1
    rs.stats = {
        "num_rows": int(len(X)),
        "train_accuracy": 100.0 * correct / len(X),
        "abstained": int(abstained.sum()),
        "per_class_abstained": {
            c: int((abstained & (labels == i)).sum()) for i, c in enumerate(class_names)
        },
    }
