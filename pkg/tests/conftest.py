import json
from importlib.resources import files

import numpy as np
import pytest

from nesyrules.dataset import generate_synthetic
from nesyrules.sparsity import SparsityConfig
from nesyrules.training import TrainConfig, build_schedule, run_strategy


def load_synthetic_fixture(name: str):
    """Build the committed synthetic dataset spec by name."""
    spec = json.loads((files("nesyrules") / f"fixtures/synthetic_{name}.json").read_text())
    return generate_synthetic(
        num_classes=spec["num_classes"],
        per_class=spec["per_class"],
        image_size=spec["image_size"],
        seed=spec["seed"],
        with_masks=spec["with_masks"],
        split_spec=tuple(spec["split_spec"]),
    )


def fixture_train_config(seed: int = 0) -> TrainConfig:
    """The full-budget configuration used by the end-to-end checks."""
    return TrainConfig(
        epochs=60,
        batch_size=16,
        seed=seed,
        sparsity=SparsityConfig(filters_per_class=2, seed=seed),
    )


def quick_train_config(seed: int = 0, **overrides) -> TrainConfig:
    """A few-epoch configuration for unit tests that need a real run."""
    kwargs = dict(
        epochs=4,
        batch_size=16,
        patience=2,
        seed=seed,
        sparsity=SparsityConfig(filters_per_class=2, seed=seed),
    )
    kwargs.update(overrides)
    return TrainConfig(**kwargs)


@pytest.fixture(scope="session")
def c3():
    return load_synthetic_fixture("c3")


@pytest.fixture(scope="session")
def ts3_result(c3):
    """One full-budget TS3 training on the fixture, shared across tests."""
    cfg = fixture_train_config(seed=0)
    return run_strategy(build_schedule("ts3", cfg), c3, cfg)


def fuzz_program(rng: np.random.Generator) -> tuple[str, int]:
    """Random stratified program text; returns (text, num_base_predicates).

    ab dependencies always point to strictly higher ab ids, so the
    dependency graph is acyclic by construction.
    """
    num_base = int(rng.integers(2, 7))  # 2..6 -> at most 64 assignments
    num_ab = int(rng.integers(0, 4))
    classes = ["a", "b", "c"][: int(rng.integers(1, 4))]

    def base_literal() -> str:
        pred = int(rng.integers(0, num_base))
        return f"not {pred}(X)" if rng.random() < 0.4 else f"{pred}(X)"

    def ab_literal(min_id: int) -> str | None:
        choices = [k for k in range(min_id, num_ab + 1)]
        if not choices:
            return None
        k = int(rng.choice(choices))
        return f"not ab{k}(X)" if rng.random() < 0.6 else f"ab{k}(X)"

    lines = []
    for _ in range(int(rng.integers(1, 5))):
        cls = classes[int(rng.integers(0, len(classes)))]
        lits = [base_literal() for _ in range(int(rng.integers(0, 3)))]
        if num_ab and rng.random() < 0.6:
            lit = ab_literal(1)
            if lit:
                lits.append(lit)
        head = f"target(X,'{cls}')"
        lines.append(f"{head}." if not lits else f"{head} :- {', '.join(lits)}.")
    for k in range(1, num_ab + 1):
        for _ in range(int(rng.integers(1, 3))):
            lits = [base_literal() for _ in range(int(rng.integers(0, 3)))]
            if k < num_ab and rng.random() < 0.5:
                lit = ab_literal(k + 1)
                if lit:
                    lits.append(lit)
            head = f"ab{k}(X)"
            lines.append(f"{head}." if not lits else f"{head} :- {', '.join(lits)}.")
    return "\n".join(lines) + "\n", num_base


def oracle_classify(rs, true_base: set[str]) -> str | None:
    """Bottom-up reference evaluation: ab truth values first, then the
    first class rule whose body holds. Written against the text semantics
    only, independently of the interpreter's top-down search."""
    groups = rs.ab_definitions()
    ab_truth: dict[str, bool] = {}

    def lit_true(lit) -> bool:
        if lit.predicate in groups:
            value = ab_truth[lit.predicate]
        else:
            value = lit.predicate in true_base
        return (not value) if lit.negated else value

    # dependencies point to higher ids: evaluate highest id first
    for ab_id in sorted(groups, key=lambda a: -int(a[2:])):
        ab_truth[ab_id] = any(all(lit_true(l) for l in r.body) for r in groups[ab_id])
    for rule in rs.class_rules:
        if all(lit_true(l) for l in rule.body):
            return rule.head
    return None
