"""Command-line pipeline: corpus preparation, response collection, jury
judging, labeling, training, offline evaluation, and the serving gateway.

Config precedence is flags > environment > file: GAPROUTE_* variables (two
underscores per nesting level, e.g. GAPROUTE_POLICY__TAU) override file
values, and --set plus per-command flags override both. Logs are emitted as
line-delimited JSON on stderr; data artifacts go only where --out points.
"""

from __future__ import annotations

import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Mapping, Sequence

import click

from . import corpus as corpus_mod
from . import evaluation
from .config import (
    ConfigError,
    GatewayConfig,
    build_chat_client,
    build_embedding_client,
    load_config,
)
from .corpus import (
    DEFAULT_CATEGORIES,
    DEFAULT_JACCARD_THRESHOLD,
    DEFAULT_LSH_BANDS,
    DEFAULT_NUM_PERMS,
    DEFAULT_SHINGLE_SIZE,
    IngestError,
    PromptRecord,
)
from .evaluation import build_report, bundle_regressor, render_report_csv
from .gateway import serve as gateway_serve
from .jsonl import dumps_canonical, read_jsonl, write_jsonl
from .jury import (
    DEFAULT_JUDGE_TEMPLATE,
    AggregationError,
    PairJudgment,
    aggregate,
    judge_pair,
    kappa_matrix,
    labeled_example_from_json,
    labeled_example_to_json,
    make_pairs,
    self_win_rate,
)
from .learners import (
    MODE_GLOBAL,
    MODE_PER_CATEGORY,
    BundleError,
    ForestConfig,
    MLPConfig,
    ModelBundle,
    examples_to_arrays,
    load_bundle,
    save_bundle,
    train_mlp,
    train_pair_classifier,
    train_random_forest,
    train_ridge,
)
from .upstream import CollectionError, ResponseRecord, collect_responses, expert_ids

ENV_PREFIX = "GAPROUTE_"


class _JsonLineFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        return json.dumps(
            {
                "level": record.levelname.lower(),
                "logger": record.name,
                "msg": record.getMessage(),
            },
            sort_keys=True,
        )


def _env_overrides(environ: Mapping[str, str] | None = None) -> dict[str, Any]:
    """GAPROUTE_POLICY__TAU=0.2 becomes the dotted override policy.tau=0.2."""
    env = os.environ if environ is None else environ
    overrides: dict[str, Any] = {}
    for key, value in env.items():
        if not key.startswith(ENV_PREFIX) or key == ENV_PREFIX:
            continue
        overrides[key[len(ENV_PREFIX):].lower().replace("__", ".")] = value
    return overrides


def _resolve_config(
    stage: str,
    config_path: str | None,
    sets: Sequence[str] = (),
    extra: Mapping[str, Any] | None = None,
) -> GatewayConfig:
    overrides = _env_overrides()
    for item in sets:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise click.ClickException(f"{stage}: override {item!r} must look like key=value")
        overrides[key.strip()] = value
    if extra:
        overrides.update(extra)
    try:
        return load_config(config_path, overrides)
    except ConfigError as exc:
        raise click.ClickException(f"{stage}: {exc}")


def _config_options(fn):
    fn = click.option(
        "--set",
        "sets",
        multiple=True,
        metavar="KEY=VALUE",
        help="Override one config key via its dotted path (repeatable).",
    )(fn)
    fn = click.option(
        "--config",
        "config_path",
        default=None,
        metavar="FILE",
        help="YAML or JSON config file.",
    )(fn)
    return fn


def _require_file(stage: str, path: str | Path, what: str) -> Path:
    resolved = Path(path)
    if not resolved.exists():
        raise click.ClickException(f"{stage}: missing {what} file {resolved}")
    return resolved


def _read_corpus(stage: str, path: str | Path) -> list[PromptRecord]:
    _require_file(stage, path, "corpus")
    try:
        records = [PromptRecord.from_json(row) for row in read_jsonl(path)]
    except (KeyError, TypeError, ValueError) as exc:
        raise click.ClickException(f"{stage}: corpus file {path} is invalid: {exc}")
    if not records:
        raise click.ClickException(f"{stage}: corpus file {path} is empty")
    return records


def _read_labels(stage: str, path: str | Path):
    _require_file(stage, path, "labels")
    try:
        examples = [labeled_example_from_json(row) for row in read_jsonl(path)]
    except (KeyError, TypeError, ValueError) as exc:
        raise click.ClickException(f"{stage}: labels file {path} is invalid: {exc}")
    if not examples:
        raise click.ClickException(f"{stage}: labels file {path} is empty")
    return examples


def _read_bundle(stage: str, path: str | Path) -> ModelBundle:
    if not Path(path).exists():
        raise click.ClickException(f"{stage}: missing bundle directory {path}")
    try:
        return load_bundle(path)
    except BundleError as exc:
        raise click.ClickException(f"{stage}: cannot load bundle {path}: {exc}")


def _split_csv(text: str) -> list[str]:
    return [part.strip() for part in text.split(",") if part.strip()]


def _parse_tau_grid(stage: str, text: str) -> tuple[float, ...]:
    parts = text.split(":")
    if len(parts) != 3:
        raise click.ClickException(f"{stage}: tau grid must look like start:stop:step")
    try:
        start, stop, step = (float(p) for p in parts)
    except ValueError:
        raise click.ClickException(f"{stage}: tau grid {text!r} has non-numeric parts")
    if step <= 0 or stop < start or start < 0:
        raise click.ClickException(f"{stage}: tau grid {text!r} must ascend with a positive step")
    count = int(round((stop - start) / step))
    taus = [round(start + k * step, 10) for k in range(count + 1)]
    return tuple(t for t in taus if t <= stop + 1e-12)


@click.group()
@click.option(
    "--log-level",
    default="info",
    show_default=True,
    type=click.Choice(["debug", "info", "warning", "error"]),
)
def cli(log_level: str) -> None:
    """Confidence-gap routing pipeline."""
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_JsonLineFormatter())
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(log_level.upper())


@cli.command("ingest")
@click.option("--category", required=True, help="Category label for every record.")
@click.option("--in", "inputs", multiple=True, required=True, metavar="FILE")
@click.option("--out", "out_path", required=True, metavar="FILE")
@click.option(
    "--categories",
    "category_set",
    default=",".join(DEFAULT_CATEGORIES),
    show_default=True,
    help="Comma-separated allowed category labels.",
)
def ingest_cmd(category: str, inputs: tuple[str, ...], out_path: str, category_set: str) -> None:
    """Read raw JSONL prompt sources into corpus records."""
    stage = "ingest"
    for path in inputs:
        _require_file(stage, path, "input")
    try:
        records, skipped = corpus_mod.ingest(list(inputs), category, _split_csv(category_set))
    except (IngestError, ValueError) as exc:
        raise click.ClickException(f"{stage}: {exc}")
    write_jsonl(out_path, (r.to_json() for r in records))
    click.echo(f"ingest: wrote {len(records)} records to {out_path} ({skipped} lines skipped)")


@cli.command("dedup")
@click.option("--in", "in_path", required=True, metavar="FILE")
@click.option("--out", "out_path", required=True, metavar="FILE")
@click.option("--threshold", default=DEFAULT_JACCARD_THRESHOLD, show_default=True)
@click.option("--num-perms", default=DEFAULT_NUM_PERMS, show_default=True)
@click.option("--bands", default=DEFAULT_LSH_BANDS, show_default=True)
@click.option("--shingle-size", default=DEFAULT_SHINGLE_SIZE, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--removed-out", default=None, metavar="FILE", help="Also write removed (id, duplicate_of) pairs.")
def dedup_cmd(
    in_path: str,
    out_path: str,
    threshold: float,
    num_perms: int,
    bands: int,
    shingle_size: int,
    seed: int,
    removed_out: str | None,
) -> None:
    """Drop near-duplicate prompts, keeping the earliest of each cluster."""
    stage = "dedup"
    records = _read_corpus(stage, in_path)
    try:
        kept, removed = corpus_mod.dedup(
            records,
            jaccard_threshold=threshold,
            num_perms=num_perms,
            shingle_size=shingle_size,
            bands=bands,
            seed=seed,
        )
    except ValueError as exc:
        raise click.ClickException(f"{stage}: {exc}")
    write_jsonl(out_path, (r.to_json() for r in kept))
    if removed_out:
        write_jsonl(removed_out, ({"id": a, "duplicate_of": b} for a, b in removed))
    click.echo(f"dedup: kept {len(kept)} of {len(records)} records ({len(removed)} removed)")


@cli.command("split")
@click.option("--in", "in_path", required=True, metavar="FILE")
@click.option("--out", "out_path", required=True, metavar="FILE")
@click.option("--train-frac", default=0.8, show_default=True)
@click.option("--seed", default=0, show_default=True)
def split_cmd(in_path: str, out_path: str, train_frac: float, seed: int) -> None:
    """Stamp train/validation splits stratified by category."""
    stage = "split"
    records = _read_corpus(stage, in_path)
    try:
        stamped = corpus_mod.assign_splits(records, train_frac, seed)
    except ValueError as exc:
        raise click.ClickException(f"{stage}: {exc}")
    write_jsonl(out_path, (r.to_json() for r in stamped))
    n_train = sum(1 for r in stamped if r.split == corpus_mod.SPLIT_TRAIN)
    click.echo(f"split: {n_train} train / {len(stamped) - n_train} validation -> {out_path}")


@cli.command("collect")
@_config_options
@click.option("--corpus", "corpus_path", required=True, metavar="FILE")
@click.option("--out", "out_path", required=True, metavar="FILE")
@click.option("--failures-out", default=None, metavar="FILE")
@click.option("--parallelism", default=None, type=int, help="Overrides collect.parallelism.")
@click.option("--temperature", default=None, type=float, help="Overrides upstream.temperature.")
def collect_cmd(
    config_path: str | None,
    sets: tuple[str, ...],
    corpus_path: str,
    out_path: str,
    failures_out: str | None,
    parallelism: int | None,
    temperature: float | None,
) -> None:
    """Query every expert on every prompt, resuming past completed pairs."""
    stage = "collect"
    extra: dict[str, Any] = {}
    if parallelism is not None:
        extra["collect.parallelism"] = parallelism
    if temperature is not None:
        extra["upstream.temperature"] = temperature
    config = _resolve_config(stage, config_path, sets, extra)
    experts = [d for d in config.roster if "expert" in d.roles]
    if not experts:
        raise click.ClickException(f"{stage}: config roster has no expert models")
    prompts = _read_corpus(stage, corpus_path)

    existing: list[ResponseRecord] = []
    if Path(out_path).exists():
        try:
            existing = [ResponseRecord.from_json(row) for row in read_jsonl(out_path)]
        except (KeyError, TypeError, ValueError) as exc:
            raise click.ClickException(f"{stage}: existing output {out_path} is invalid: {exc}")

    client = build_chat_client(config)
    try:
        records, failures = collect_responses(
            prompts,
            experts,
            client,
            parallelism=config.collect.parallelism,
            existing=existing,
            failure_ceiling=config.collect.failure_ceiling,
        )
    except (CollectionError, ValueError) as exc:
        raise click.ClickException(f"{stage}: {exc}")
    write_jsonl(out_path, (r.to_json() for r in records))
    if failures_out:
        write_jsonl(
            failures_out,
            (
                {"prompt_id": f.prompt_id, "model_id": f.model_id, "error": f.error}
                for f in failures
            ),
        )
    new = len(records) - len(existing)
    click.echo(
        f"collect: {len(records)} records ({new} new, {len(failures)} failures) -> {out_path}"
    )


@cli.command("judge")
@_config_options
@click.option("--corpus", "corpus_path", required=True, metavar="FILE")
@click.option("--responses", "responses_path", required=True, metavar="FILE")
@click.option("--judges", default=None, help="Comma-separated judge model ids (default: roster judges, else all experts).")
@click.option("--out", "out_path", required=True, metavar="FILE")
@click.option("--seed", default=0, show_default=True, help="Seed for blinded presentation order.")
@click.option("--exclude-self-pairs", is_flag=True, default=False, help="Skip pairs containing the judge's own model.")
@click.option("--template-file", default=None, metavar="FILE", help="Custom judge prompt template.")
def judge_cmd(
    config_path: str | None,
    sets: tuple[str, ...],
    corpus_path: str,
    responses_path: str,
    judges: str | None,
    out_path: str,
    seed: int,
    exclude_self_pairs: bool,
    template_file: str | None,
) -> None:
    """Run the pairwise jury over collected responses."""
    stage = "judge"
    config = _resolve_config(stage, config_path, sets)
    prompts = _read_corpus(stage, corpus_path)
    _require_file(stage, responses_path, "responses")
    try:
        responses = {
            (r.prompt_id, r.model_id): r.text
            for r in (ResponseRecord.from_json(row) for row in read_jsonl(responses_path))
        }
    except (KeyError, TypeError, ValueError) as exc:
        raise click.ClickException(f"{stage}: responses file {responses_path} is invalid: {exc}")

    roster_ids = list(expert_ids(config.roster))
    if len(roster_ids) < 2:
        raise click.ClickException(f"{stage}: config roster needs at least two experts")
    if judges:
        judge_ids = _split_csv(judges)
    else:
        judge_ids = [d.id for d in config.roster if "judge" in d.roles] or roster_ids
    try:
        descriptors = {j: config.descriptor(j) for j in judge_ids}
    except ConfigError as exc:
        raise click.ClickException(f"{stage}: {exc}")

    template = DEFAULT_JUDGE_TEMPLATE
    if template_file:
        template = _require_file(stage, template_file, "template").read_text(encoding="utf-8")

    client = build_chat_client(config)
    pairs = make_pairs(roster_ids)
    judgments: list[PairJudgment] = []
    skipped_pairs = 0
    try:
        for record in prompts:
            for model_i, model_j in pairs:
                text_i = responses.get((record.id, model_i))
                text_j = responses.get((record.id, model_j))
                if text_i is None or text_j is None:
                    skipped_pairs += 1
                    continue
                for judge_id in judge_ids:
                    if exclude_self_pairs and judge_id in (model_i, model_j):
                        continue
                    descriptor = descriptors[judge_id]
                    judgments.append(
                        judge_pair(
                            record.id,
                            record.text,
                            model_i,
                            text_i,
                            model_j,
                            text_j,
                            judge_id,
                            lambda text, d=descriptor: client.complete(
                                d, text, prompt_id=record.id
                            ).text,
                            template=template,
                            seed=seed,
                        )
                    )
    except CollectionError as exc:
        raise click.ClickException(f"{stage}: judge upstream failed: {exc}")
    write_jsonl(out_path, (j.to_json() for j in judgments))
    missing = sum(1 for j in judgments if j.missing)
    click.echo(
        f"judge: {len(judgments)} judgments ({missing} missing verdicts, "
        f"{skipped_pairs} pairs without responses) -> {out_path}"
    )


@cli.command("jury-stats")
@_config_options
@click.option("--judgments", "judgments_path", required=True, metavar="FILE")
@click.option("--out", "out_path", required=True, metavar="FILE")
@click.option("--chance", type=click.Choice(["marginal", "uniform"]), default="marginal", show_default=True)
def jury_stats_cmd(
    config_path: str | None,
    sets: tuple[str, ...],
    judgments_path: str,
    out_path: str,
    chance: str,
) -> None:
    """Agreement matrix, mean kappa, and the self-win table."""
    stage = "jury-stats"
    _require_file(stage, judgments_path, "judgments")
    try:
        judgments = [PairJudgment.from_json(row) for row in read_jsonl(judgments_path)]
    except (KeyError, TypeError, ValueError) as exc:
        raise click.ClickException(f"{stage}: judgments file {judgments_path} is invalid: {exc}")
    if not judgments:
        raise click.ClickException(f"{stage}: judgments file {judgments_path} is empty")

    config = _resolve_config(stage, config_path, sets)
    roster = list(expert_ids(config.roster))
    if not roster:
        roster = sorted({j.model_i for j in judgments} | {j.model_j for j in judgments})

    matrix, mean = kappa_matrix(judgments, chance=chance)
    self_win: dict[str, float] = {}
    for judge_id in sorted({j.judge_id for j in judgments}):
        if judge_id not in roster:
            continue
        try:
            self_win[judge_id] = self_win_rate(judgments, judge_id, judge_id, roster)
        except ValueError:
            continue
    payload = {
        "chance": chance,
        "kappa": {f"{a}|{b}": value for (a, b), value in sorted(matrix.items())},
        "mean_kappa": mean,
        "self_win": self_win,
    }
    Path(out_path).write_text(dumps_canonical(payload) + "\n", encoding="utf-8")
    mean_text = "n/a" if mean is None else f"{mean:.4f}"
    click.echo(f"jury-stats: mean kappa {mean_text} over {len(matrix)} judge pairs -> {out_path}")


@cli.command("label")
@_config_options
@click.option("--corpus", "corpus_path", required=True, metavar="FILE")
@click.option("--responses", "responses_path", required=True, metavar="FILE")
@click.option("--judgments", "judgments_path", required=True, metavar="FILE")
@click.option("--out", "out_path", required=True, metavar="FILE")
def label_cmd(
    config_path: str | None,
    sets: tuple[str, ...],
    corpus_path: str,
    responses_path: str,
    judgments_path: str,
    out_path: str,
) -> None:
    """Join prompts, jury scores, and embeddings into training labels."""
    stage = "label"
    config = _resolve_config(stage, config_path, sets)
    roster = list(expert_ids(config.roster))
    if len(roster) < 2:
        raise click.ClickException(f"{stage}: config roster needs at least two experts")
    prompts = _read_corpus(stage, corpus_path)
    _require_file(stage, responses_path, "responses")
    _require_file(stage, judgments_path, "judgments")

    try:
        response_index: dict[str, set[str]] = {}
        for row in read_jsonl(responses_path):
            record = ResponseRecord.from_json(row)
            response_index.setdefault(record.prompt_id, set()).add(record.model_id)
        by_prompt: dict[str, list[PairJudgment]] = {}
        for row in read_jsonl(judgments_path):
            judgment = PairJudgment.from_json(row)
            by_prompt.setdefault(judgment.prompt_id, []).append(judgment)
    except (KeyError, TypeError, ValueError) as exc:
        raise click.ClickException(f"{stage}: input file is invalid: {exc}")

    boards = {}
    incomplete = []
    for prompt_id, rows in by_prompt.items():
        try:
            boards[prompt_id] = aggregate(rows, roster)
        except AggregationError:
            incomplete.append(prompt_id)

    embedder = build_embedding_client(config)
    embeddings: dict[str, Sequence[float]] = {}
    try:
        for record in prompts:
            if record.id in boards:
                embeddings[record.id] = embedder.embed(record.text).values
    except (CollectionError, ValueError) as exc:
        raise click.ClickException(f"{stage}: embedding upstream failed: {exc}")

    from .jury import build_labeled_dataset

    examples, skipped = build_labeled_dataset(prompts, response_index, boards, embeddings)
    if not examples:
        raise click.ClickException(f"{stage}: no prompt survived labeling")
    write_jsonl(out_path, (labeled_example_to_json(e) for e in examples))
    click.echo(
        f"label: {len(examples)} examples ({len(skipped)} skipped, "
        f"{len(incomplete)} with incomplete judgments) -> {out_path}"
    )


@cli.command("train")
@_config_options
@click.option("--labels", "labels_path", required=True, metavar="FILE")
@click.option("--out", "out_path", required=True, metavar="DIR")
@click.option("--mode", type=click.Choice(["global", "per-category"]), default="global", show_default=True)
@click.option("--regressor", "regressor_kind", type=click.Choice(["forest", "ridge", "mlp"]), default="forest", show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--trees", default=60, show_default=True, help="Forest size.")
@click.option("--depth", default=8, show_default=True, help="Forest depth limit.")
@click.option("--hidden", default=32, show_default=True, help="MLP hidden width.")
@click.option("--epochs", default=200, show_default=True, help="MLP training epochs.")
@click.option("--learning-rate", default=0.05, show_default=True)
@click.option("--ridge-lambda", default=1.0, show_default=True)
def train_cmd(
    config_path: str | None,
    sets: tuple[str, ...],
    labels_path: str,
    out_path: str,
    mode: str,
    regressor_kind: str,
    seed: int,
    trees: int,
    depth: int,
    hidden: int,
    epochs: int,
    learning_rate: float,
    ridge_lambda: float,
) -> None:
    """Fit the scoring models and write one bundle directory."""
    stage = "train"
    config = _resolve_config(stage, config_path, sets)
    examples = _read_labels(stage, labels_path)
    roster = list(expert_ids(config.roster))
    if not roster:
        roster = sorted(examples[0].target.scores)
        logging.getLogger("gaproute.cli").warning(
            "train: config has no roster; using sorted label experts %s", roster
        )
    embedding_dim = len(examples[0].embedding)

    def fit_regressor(subset, fit_seed: int):
        try:
            X, Y = examples_to_arrays(subset, roster)
        except KeyError as exc:
            raise click.ClickException(f"{stage}: labels missing scores for expert {exc}")
        if regressor_kind == "forest":
            return train_random_forest(
                X, Y, ForestConfig(n_trees=trees, max_depth=depth, seed=fit_seed), roster=roster
            )
        if regressor_kind == "ridge":
            return train_ridge(X, Y, lam=ridge_lambda, roster=roster)
        return train_mlp(
            X,
            Y,
            config=MLPConfig(
                hidden_sizes=(hidden,), epochs=epochs, learning_rate=learning_rate, seed=fit_seed
            ),
            roster=roster,
        )

    try:
        pair_clf = train_pair_classifier(
            examples,
            roster,
            train_mlp,
            config=MLPConfig(
                hidden_sizes=(hidden,), epochs=epochs, learning_rate=learning_rate, seed=seed + 1
            ),
        )
    except (KeyError, ValueError) as exc:
        raise click.ClickException(f"{stage}: cannot fit pair classifier: {exc}")

    bundle_config = {
        "examples": len(examples),
        "regressor": regressor_kind,
        "seed": seed,
    }
    if mode == "global":
        bundle = ModelBundle(
            roster=tuple(roster),
            embedding_dim=embedding_dim,
            mode=MODE_GLOBAL,
            regressors={MODE_GLOBAL: fit_regressor(examples, seed)},
            pair_classifier=pair_clf,
            config=bundle_config,
        )
    else:
        categories = sorted({e.category for e in examples})
        if len(categories) < 2:
            raise click.ClickException(
                f"{stage}: per-category training needs at least 2 categories, found {categories}"
            )
        regressors = {
            category: fit_regressor([e for e in examples if e.category == category], seed + k)
            for k, category in enumerate(categories)
        }
        X_all, _ = examples_to_arrays(examples, roster)
        category_clf = train_random_forest(
            X_all,
            [e.category for e in examples],
            ForestConfig(n_trees=trees, max_depth=depth, seed=seed + 101),
            task="classify",
            classes=categories,
        )
        bundle = ModelBundle(
            roster=tuple(roster),
            embedding_dim=embedding_dim,
            mode=MODE_PER_CATEGORY,
            regressors=regressors,
            pair_classifier=pair_clf,
            category_classifier=category_clf,
            config=bundle_config,
        )
    try:
        save_bundle(bundle, out_path)
    except BundleError as exc:
        raise click.ClickException(f"{stage}: cannot save bundle: {exc}")
    click.echo(
        f"train: bundle ({bundle.mode}, {regressor_kind}, {len(examples)} examples) -> {out_path}"
    )


@cli.command("sweep")
@click.option("--bundle", "bundle_path", required=True, metavar="DIR")
@click.option("--labels", "labels_path", required=True, metavar="FILE")
@click.option("--tau-grid", default="0.01:0.20:0.01", show_default=True)
@click.option("--out", "out_path", required=True, metavar="FILE")
@click.option("--csv", "csv_path", default=None, metavar="FILE")
def sweep_cmd(
    bundle_path: str, labels_path: str, tau_grid: str, out_path: str, csv_path: str | None
) -> None:
    """Evaluate the decision rule across a threshold grid."""
    stage = "sweep"
    bundle = _read_bundle(stage, bundle_path)
    examples = _read_labels(stage, labels_path)
    taus = _parse_tau_grid(stage, tau_grid)
    try:
        rows = evaluation.sweep(examples, bundle_regressor(bundle), bundle.pair_classifier, taus)
    except (KeyError, ValueError, BundleError) as exc:
        raise click.ClickException(f"{stage}: {exc}")
    Path(out_path).write_text(dumps_canonical({"rows": rows}) + "\n", encoding="utf-8")
    if csv_path:
        Path(csv_path).write_text(render_report_csv(rows), encoding="utf-8")
    click.echo(f"sweep: {len(rows)} thresholds over {len(examples)} examples -> {out_path}")


@cli.command("eval")
@click.option("--bundle", "bundle_path", required=True, metavar="DIR")
@click.option("--labels", "labels_path", required=True, metavar="FILE")
@click.option("--tau", default=0.10, show_default=True)
@click.option("--reference", default=None, help="Expert the win rate is measured against.")
@click.option("--tau-grid", default="0.01:0.20:0.01", show_default=True)
@click.option("--out", "out_path", required=True, metavar="FILE")
@click.option("--csv", "csv_path", default=None, metavar="FILE")
def eval_cmd(
    bundle_path: str,
    labels_path: str,
    tau: float,
    reference: str | None,
    tau_grid: str,
    out_path: str,
    csv_path: str | None,
) -> None:
    """Full offline report: sweep, win rates, regressor metrics, gap stats."""
    stage = "eval"
    bundle = _read_bundle(stage, bundle_path)
    examples = _read_labels(stage, labels_path)
    if reference is not None and reference not in bundle.roster:
        raise click.ClickException(
            f"{stage}: reference expert {reference!r} not in bundle roster {list(bundle.roster)}"
        )
    taus = _parse_tau_grid(stage, tau_grid)
    try:
        report = build_report(
            examples, bundle_regressor(bundle), bundle.pair_classifier, taus=taus, tau=tau
        )
    except (KeyError, ValueError, BundleError) as exc:
        raise click.ClickException(f"{stage}: {exc}")
    payload = report.to_json()
    if reference is not None:
        payload["reference"] = reference
    Path(out_path).write_text(dumps_canonical(payload) + "\n", encoding="utf-8")
    if csv_path:
        Path(csv_path).write_text(render_report_csv(report.rows), encoding="utf-8")
    if reference is not None:
        click.echo(
            f"eval: win rate vs {reference} = {report.win_rates[reference]:.4f} -> {out_path}"
        )
    else:
        click.echo(f"eval: report at tau={tau} -> {out_path}")


@cli.command("serve")
@_config_options
@click.option("--listen", default=None, metavar="HOST:PORT", help="Overrides the listen address.")
def serve_cmd(config_path: str | None, sets: tuple[str, ...], listen: str | None) -> None:
    """Run the routing gateway (crash-only startup, SIGHUP reloads the bundle)."""
    stage = "serve"
    extra = {"listen": listen} if listen else None
    config = _resolve_config(stage, config_path, sets, extra)
    try:
        gateway_serve(config)
    except BundleError as exc:
        raise click.ClickException(f"{stage}: {exc}")


main = cli

if __name__ == "__main__":
    main()
