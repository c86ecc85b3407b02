"""Command-line pipeline around the library.

Subcommands: train, extract, eval, explain, label, experiment, report.
One flat JSON config feeds every stage; command-line flags win over the
file. Outputs land in --out, the NESY_OUT environment variable, or
./nesy_out, in that order of preference.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path

from .backbone import load_checkpoint, save_checkpoint
from .binarization import binarize_dataset, write_table
from .dataset import DatasetError, DatasetSplit, generate_synthetic, load_image_folder
from .evaluation import (
    AggregateReport,
    RunResult,
    check_paper_claims,
    evaluate_model,
    run_experiment,
)
from .figures import plot_strategy_comparison, plot_train_log, save_overlay_grid
from .inference import FactSet, classify, justify
from .labelling import (
    FilterLabel,
    apply_labels,
    label_filters,
    labels_to_json,
    top_activations,
    top_rule_filter,
)
from .rules import fold_sem, parse_rules, ruleset_size
from .sparsity import SparsityConfig, read_thresholds_csv, write_p_csv, write_thresholds_csv
from .training import (
    STRATEGIES,
    TrainConfig,
    TrainingDiverged,
    build_schedule,
    run_strategy,
)


class UsageError(Exception):
    pass


@dataclass
class PipelineConfig:
    """Flat pipeline settings; JSON configs use exactly these keys."""

    epochs: int = 60
    batch_size: int = 16
    learning_rate: float = 1e-3
    l2_reg: float = 0.005
    decay_factor: float = 0.5
    patience: int = 10
    seed: int = 0
    image_size: int = 32
    num_filters: int = 16
    filters_per_class: int = 2
    h1: float = 0.6
    h2: float = 0.7
    alpha: float = 1.0
    beta: float = 5.0
    strategy: str = "ts3"
    ratio: float = 0.8
    tail: float = 5e-3
    data: str | None = None
    masks: str | None = None
    synthetic: str | None = None
    out: str | None = None

    @classmethod
    def load(cls, config_path: str | None, args: argparse.Namespace) -> "PipelineConfig":
        payload = {}
        if config_path:
            try:
                payload = json.loads(Path(config_path).read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise UsageError(f"cannot read config {config_path}: {exc}") from exc
            known = {f.name for f in dataclasses.fields(cls)}
            unknown = sorted(set(payload) - known)
            if unknown:
                raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        cfg = cls(**payload)
        for key in (
            "strategy", "seed", "data", "masks", "synthetic", "out", "ratio", "tail"
        ):
            value = getattr(args, key, None)
            if value is not None:
                setattr(cfg, key, value)
        if cfg.strategy not in STRATEGIES:
            raise UsageError(f"strategy must be one of {', '.join(STRATEGIES)}")
        return cfg

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            l2_reg=self.l2_reg,
            decay_factor=self.decay_factor,
            patience=self.patience,
            seed=self.seed,
            image_size=self.image_size,
            num_filters=self.num_filters,
            sparsity=SparsityConfig(
                filters_per_class=self.filters_per_class,
                h1=self.h1,
                h2=self.h2,
                alpha=self.alpha,
                beta=self.beta,
                seed=self.seed,
            ),
        )


def _resolve_out(cfg: PipelineConfig) -> Path:
    out = cfg.out or os.environ.get("NESY_OUT") or "nesy_out"
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _synthetic_spec(name_or_path: str) -> dict:
    candidate = Path(name_or_path)
    if not candidate.is_file():
        from importlib.resources import files

        candidate = Path(str(files("nesyrules") / f"fixtures/synthetic_{name_or_path}.json"))
    if not candidate.is_file():
        raise UsageError(f"no synthetic spec named {name_or_path!r}")
    return json.loads(candidate.read_text())


def _dataset_from_spec(spec: dict) -> DatasetSplit:
    kind = spec.get("kind", "synthetic")
    if kind == "folder":
        return load_image_folder(
            spec["root"],
            split_spec=tuple(spec.get("split_spec", (0.8, 0.0, 0.2))),
            seed=spec.get("seed", 0),
            image_size=spec.get("image_size", 32),
            mask_root=spec.get("masks"),
        )
    return generate_synthetic(
        num_classes=spec["num_classes"],
        per_class=spec["per_class"],
        image_size=spec.get("image_size", 32),
        seed=spec.get("seed", 0),
        with_masks=spec.get("with_masks", True),
        split_spec=tuple(spec.get("split_spec", (0.7, 0.15, 0.15))),
    )


def _resolve_dataset(cfg: PipelineConfig, fallback_spec: dict | None = None
                     ) -> tuple[DatasetSplit, str, dict]:
    if cfg.data:
        spec = {
            "kind": "folder",
            "root": cfg.data,
            "image_size": cfg.image_size,
            "masks": cfg.masks,
        }
        return _dataset_from_spec(spec), Path(cfg.data).name, spec
    if cfg.synthetic:
        spec = _synthetic_spec(cfg.synthetic)
        return _dataset_from_spec(spec), spec.get("name", cfg.synthetic), spec
    if fallback_spec:
        name = fallback_spec.get("name") or Path(fallback_spec.get("root", "dataset")).name
        return _dataset_from_spec(fallback_spec), name, fallback_spec
    raise UsageError("no dataset: pass --data DIR or --synthetic NAME")


def _load_model_dir(checkpoint_dir: str):
    directory = Path(checkpoint_dir)
    archive = directory / "checkpoint.zip" if directory.is_dir() else directory
    if not archive.is_file():
        raise UsageError(f"no checkpoint at {archive}")
    model, metadata = load_checkpoint(archive)
    thresholds_path = archive.parent / "thresholds.csv"
    thresholds = read_thresholds_csv(thresholds_path) if thresholds_path.is_file() else None
    return model, metadata, thresholds


def _read_rules(path: str):
    try:
        return parse_rules(Path(path).read_text())
    except OSError as exc:
        raise UsageError(f"cannot read rules {path}: {exc}") from exc


def _emit(record: dict) -> None:
    print(json.dumps(record, sort_keys=True))


# --- commands ---

def cmd_train(cfg: PipelineConfig) -> int:
    out = _resolve_out(cfg)
    dataset, ds_name, ds_spec = _resolve_dataset(cfg)
    tc = cfg.train_config()
    schedule = build_schedule(cfg.strategy, tc)
    try:
        result = run_strategy(schedule, dataset, tc)
    except TrainingDiverged as exc:
        save_checkpoint(exc.model, out / "checkpoint.zip", {"diverged_at": exc.epoch})
        exc.log.write_jsonl(out / "trainlog.jsonl")
        raise RuntimeError(str(exc)) from exc

    metadata = {
        "strategy": cfg.strategy,
        "seed": cfg.seed,
        "class_names": dataset.class_names,
        "dataset": {**ds_spec, "name": ds_name},
        "config": dataclasses.asdict(tc),
    }
    save_checkpoint(result.model, out / "checkpoint.zip", metadata)
    write_p_csv(result.p_matrix, out / "p_matrix.csv")
    if result.thresholds is not None:
        write_thresholds_csv(result.thresholds, out / "thresholds.csv")
    result.log.write_jsonl(out / "trainlog.jsonl")
    plot_train_log(result.log, out / "loss_curves.png")
    summary = {
        "command": "train",
        "strategy": cfg.strategy,
        "seed": cfg.seed,
        "dataset": ds_name,
        "epochs": tc.epochs,
        "final_total_loss": result.log.records[-1]["total"],
        "out": str(out),
    }
    (out / "train_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _emit(summary)
    return 0


def cmd_extract(cfg: PipelineConfig, checkpoint: str) -> int:
    out = _resolve_out(cfg)
    model, metadata, thresholds = _load_model_dir(checkpoint)
    dataset, ds_name, _ = _resolve_dataset(cfg, metadata.get("dataset"))
    class_names = metadata.get("class_names", dataset.class_names)
    train_images = sorted(dataset.train, key=lambda im: im.id)
    table = binarize_dataset(train_images, class_names, model, thresholds)
    write_table(table, out / "table.csv")
    rs = fold_sem(table, ratio=cfg.ratio, tail=cfg.tail)
    (out / "rules.txt").write_text(rs.to_text())
    stats = {
        "ruleset_size": ruleset_size(rs),
        "num_class_rules": len(rs.class_rules),
        "num_ab_rules": len(rs.ab_rules),
        "ratio": cfg.ratio,
        "tail": cfg.tail,
        **rs.stats,
    }
    (out / "rules_stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")
    _emit({"command": "extract", "dataset": ds_name, "out": str(out), **stats})
    return 0


def cmd_eval(cfg: PipelineConfig, checkpoint: str, rules: str) -> int:
    out = _resolve_out(cfg)
    model, metadata, thresholds = _load_model_dir(checkpoint)
    dataset, ds_name, _ = _resolve_dataset(cfg, metadata.get("dataset"))
    rs = _read_rules(rules)
    metrics = evaluate_model(model, thresholds, rs, dataset)
    record = RunResult(
        strategy=metadata.get("strategy", cfg.strategy),
        dataset=ds_name,
        seed=metadata.get("seed", cfg.seed),
        **metrics,
    ).to_json()
    (out / "eval_report.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    _emit({"command": "eval", **record})
    return 0


def cmd_explain(cfg: PipelineConfig, checkpoint: str, rules: str, image_id: str,
                labels_path: str | None) -> int:
    model, metadata, thresholds = _load_model_dir(checkpoint)
    dataset, _, _ = _resolve_dataset(cfg, metadata.get("dataset"))
    class_names = metadata.get("class_names", dataset.class_names)
    rs = _read_rules(rules)
    try:
        image = dataset.image_by_id(image_id)
    except KeyError as exc:
        raise UsageError(str(exc)) from exc
    table = binarize_dataset([image], class_names, model, thresholds)
    facts = FactSet.from_row(table, 0)
    if labels_path:
        payload = json.loads(Path(labels_path).read_text())
        labels = {
            int(j): FilterLabel(int(j), entry["name"], [tuple(c) for c in entry["concepts"]])
            for j, entry in payload.items()
        }
        from .labelling import apply_labels, relabel_facts

        # facts and rules must be renamed together or nothing unifies
        facts = FactSet(facts.image_id, relabel_facts(facts.true_predicates, labels))
        rs = apply_labels(rs, labels)
    print(facts.to_facts_text(), end="")
    print("?-target(img, X).")
    predicted = classify(rs, facts)
    if predicted is None:
        print("no rule fires: abstain")
        return 0
    tree = justify(rs, facts)
    print(f"X = {predicted}")
    print(tree.render())
    return 0


def cmd_label(cfg: PipelineConfig, checkpoint: str, rules: str) -> int:
    out = _resolve_out(cfg)
    model, metadata, thresholds = _load_model_dir(checkpoint)
    dataset, ds_name, _ = _resolve_dataset(cfg, metadata.get("dataset"))
    rs = _read_rules(rules)
    train_images = sorted(dataset.train, key=lambda im: im.id)
    labels = label_filters(model, train_images, rs, dataset.concept_names)
    (out / "labels.json").write_text(
        json.dumps(labels_to_json(labels), indent=2, sort_keys=True) + "\n"
    )
    (out / "labelled_rules.txt").write_text(apply_labels(rs, labels).to_text())
    overlays = {}
    for class_name in dataset.class_names:
        filter_id = top_rule_filter(rs, class_name)
        if filter_id is not None and filter_id not in overlays:
            overlays[filter_id] = top_activations(model, train_images, filter_id, m=3)
    if overlays:
        save_overlay_grid(overlays, out / "top_filter_overlays.png")
    _emit(
        {
            "command": "label",
            "dataset": ds_name,
            "filters_labelled": len(labels),
            "out": str(out),
        }
    )
    return 0


def cmd_experiment(cfg: PipelineConfig, runs: int) -> int:
    out = _resolve_out(cfg)
    dataset, ds_name, _ = _resolve_dataset(cfg)
    report = run_experiment(
        cfg.strategy,
        dataset,
        cfg.train_config(),
        ratio=cfg.ratio,
        tail=cfg.tail,
        n_runs=runs,
        base_seed=cfg.seed,
        dataset_name=ds_name,
    )
    for run in report.runs:
        path = out / f"run_{run.strategy}_{run.dataset}_seed{run.seed}.json"
        path.write_text(json.dumps(run.to_json(), indent=2, sort_keys=True) + "\n")
    aggregate_path = out / f"aggregate_{cfg.strategy}_{ds_name}.json"
    aggregate_path.write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")
    _emit(
        {
            "command": "experiment",
            "strategy": cfg.strategy,
            "dataset": ds_name,
            "n_runs": runs,
            "missing": report.missing,
            "means": report.rounded_means(),
            "out": str(out),
        }
    )
    return 0


def cmd_report(cfg: PipelineConfig, results: list[str], check_claims: bool) -> int:
    out = _resolve_out(cfg)
    paths: list[Path] = []
    for entry in results:
        p = Path(entry)
        if p.is_dir():
            paths.extend(sorted(p.glob("run_*.json")))
        else:
            paths.append(p)
    groups: dict[tuple[str, str], list[RunResult]] = {}
    for path in paths:
        payload = json.loads(path.read_text())
        run = RunResult.from_json(payload)
        groups.setdefault((run.strategy, run.dataset), []).append(run)

    reports = []
    for (strategy, ds_name), runs in sorted(groups.items()):
        reports.append(
            AggregateReport(strategy=strategy, dataset=ds_name, n_runs=len(runs), runs=runs)
        )

    if reports:
        rows = ["strategy,dataset,n_runs,cnn_accuracy,nesy_accuracy,fidelity,"
                "ruleset_size,abstention_rate"]
        for report in reports:
            means = report.rounded_means()
            rows.append(
                f"{report.strategy},{report.dataset},{report.n_runs},"
                f"{means['cnn_accuracy']},{means['nesy_accuracy']},{means['fidelity']},"
                f"{means['ruleset_size']},{means['abstention_rate']}"
            )
        (out / "report.csv").write_text("\n".join(rows) + "\n")
        (out / "report.json").write_text(
            json.dumps([r.to_json() for r in reports], indent=2, sort_keys=True) + "\n"
        )
        plot_strategy_comparison(reports, out / "strategy_comparison.png")

    failed = []
    if check_claims:
        checks = check_paper_claims()
        lines = ["name,expected,computed,status"]
        for check in checks:
            print(check.render())
            lines.append(
                f"{check.name},{check.expected},{check.computed},"
                f"{'pass' if check.passed else 'fail'}"
            )
            if not check.passed:
                failed.append(check.name)
        (out / "claims.csv").write_text("\n".join(lines) + "\n")

    if not reports and not check_claims:
        raise UsageError("report needs --results files and/or --check-claims")
    if failed:
        _emit({"command": "report", "error": "claims_failed", "failed": failed})
        return 1
    _emit(
        {
            "command": "report",
            "aggregates": len(reports),
            "claims_checked": check_claims,
            "out": str(out),
        }
    )
    return 0


# --- argument wiring ---

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--out", help="output directory (or set NESY_OUT)")
    common.add_argument("--seed", type=int, help="training seed override")
    common.add_argument("--data", help="directory-per-class image folder")
    common.add_argument("--masks", help="segmentation mask root for --data")
    common.add_argument("--synthetic", help="synthetic dataset name or spec path")

    parser = argparse.ArgumentParser(
        prog="nesyrules",
        description="Train a small CNN with class-filter sparsity and extract rules",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train a backbone under a strategy")
    p.add_argument("--strategy", choices=STRATEGIES)

    p = sub.add_parser("extract", parents=[common], help="binarize and learn rules")
    p.add_argument("--checkpoint", required=True, help="train output dir or checkpoint.zip")
    p.add_argument("--ratio", type=float)
    p.add_argument("--tail", type=float)

    p = sub.add_parser("eval", parents=[common], help="score a rule-set on the test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--rules", required=True)

    p = sub.add_parser("explain", parents=[common], help="classify one image with justification")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--rules", required=True)
    p.add_argument("--image", required=True, help="image id within the dataset")
    p.add_argument("--labels", help="labels.json to render concept names")

    p = sub.add_parser("label", parents=[common], help="label filters from masks")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--rules", required=True)

    p = sub.add_parser("experiment", parents=[common], help="multi-seed protocol")
    p.add_argument("--strategy", choices=STRATEGIES)
    p.add_argument("--runs", type=int, default=1)

    p = sub.add_parser("report", parents=[common], help="aggregate runs, render figures")
    p.add_argument("--results", nargs="*", default=[],
                   help="run result JSON files or directories of run_*.json")
    p.add_argument("--check-claims", action="store_true", dest="check_claims")

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = PipelineConfig.load(getattr(args, "config", None), args)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "extract":
            return cmd_extract(cfg, args.checkpoint)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint, args.rules)
        if args.command == "explain":
            return cmd_explain(cfg, args.checkpoint, args.rules, args.image, args.labels)
        if args.command == "label":
            return cmd_label(cfg, args.checkpoint, args.rules)
        if args.command == "experiment":
            return cmd_experiment(cfg, args.runs)
        if args.command == "report":
            return cmd_report(cfg, args.results, args.check_claims)
        raise UsageError(f"unknown command {args.command}")
    except UsageError as exc:
        print(json.dumps({"error": "usage", "message": str(exc)}), file=sys.stderr)
        return 2
    except (DatasetError, ValueError, RuntimeError, OSError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
