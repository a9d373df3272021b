"""Pairwise jury annotation: blind pair judging, score aggregation, ranking,
normalization, and reliability diagnostics (inter-judge kappa, self-win rate).

Verdicts are stored against the canonical (model_i, model_j) roster order no
matter which side was shown first; a judgment awards its full point split
between the two sides (a to i, 1 - a to j), so every counted judgment moves
exactly one point onto the board.
"""

from __future__ import annotations

import hashlib
import logging
import re
from dataclasses import dataclass
from typing import Any, Callable, Hashable, Iterable, Mapping, Sequence

logger = logging.getLogger(__name__)

VERDICT_VALUES = (0.0, 0.5, 1.0)
ORDER_CANONICAL = "ij"
ORDER_FLIPPED = "ji"

DEFAULT_JUDGE_TEMPLATE = (
    "You will compare two candidate responses to a user prompt.\n"
    "Judge which response better satisfies the prompt for clarity, accuracy,"
    " and completeness.\n"
    "Reply with exactly one token: A if response A is better, B if response B"
    " is better, or TIE if they are equally good.\n"
    "\n"
    "Prompt:\n{prompt}\n"
    "\n"
    "Response A:\n{response_a}\n"
    "\n"
    "Response B:\n{response_b}\n"
    "\n"
    "Verdict:"
)

_TOKEN_RE = re.compile(r"[A-Za-z]+")


class AggregationError(Exception):
    """A pair on the board has no counted judgments."""


@dataclass(frozen=True)
class PairJudgment:
    prompt_id: str
    model_i: str
    model_j: str
    judge_id: str
    a: float | None
    presentation_order: str

    def __post_init__(self) -> None:
        if self.model_i == self.model_j:
            raise ValueError("a pair needs two distinct models")
        if self.a is not None and self.a not in VERDICT_VALUES:
            raise ValueError(f"verdict must be one of {VERDICT_VALUES} or missing")
        if self.presentation_order not in (ORDER_CANONICAL, ORDER_FLIPPED):
            raise ValueError("presentation_order must be 'ij' or 'ji'")

    @property
    def missing(self) -> bool:
        return self.a is None

    def to_json(self) -> dict[str, Any]:
        return {
            "prompt_id": self.prompt_id,
            "model_i": self.model_i,
            "model_j": self.model_j,
            "judge_id": self.judge_id,
            "a": self.a,
            "presentation_order": self.presentation_order,
        }

    @classmethod
    def from_json(cls, row: Mapping[str, Any]) -> "PairJudgment":
        a = row["a"]
        return cls(
            prompt_id=str(row["prompt_id"]),
            model_i=str(row["model_i"]),
            model_j=str(row["model_j"]),
            judge_id=str(row["judge_id"]),
            a=None if a is None else float(a),
            presentation_order=str(row["presentation_order"]),
        )


@dataclass(frozen=True)
class ScoreBoard:
    prompt_id: str
    roster: tuple[str, ...]
    pair_scores: dict[tuple[str, str], float]
    judges_counted: dict[tuple[str, str], int]
    global_scores: dict[str, float]


@dataclass(frozen=True)
class NormalizedScores:
    prompt_id: str
    scores: dict[str, float]


@dataclass(frozen=True)
class LabeledExample:
    prompt_id: str
    embedding: tuple[float, ...]
    target: NormalizedScores
    category: str


def make_pairs(roster: Sequence[str]) -> list[tuple[str, str]]:
    """All unordered expert pairs in canonical roster order."""
    if len(roster) < 2:
        raise ValueError("need at least two experts to form pairs")
    if len(set(roster)) != len(roster):
        raise ValueError("roster ids must be unique")
    return [
        (roster[i], roster[j])
        for i in range(len(roster))
        for j in range(i + 1, len(roster))
    ]


def presentation_order(
    prompt_id: str, model_i: str, model_j: str, judge_id: str, seed: int
) -> str:
    """Seeded per (prompt, pair, judge): which side is shown as response A."""
    key = f"{seed}|{prompt_id}|{model_i}|{model_j}|{judge_id}".encode("utf-8")
    bit = hashlib.blake2b(key, digest_size=1).digest()[0] & 1
    return ORDER_CANONICAL if bit == 0 else ORDER_FLIPPED


def render_judge_prompt(
    template: str, prompt_text: str, first_text: str, second_text: str
) -> str:
    return template.format(
        prompt=prompt_text, response_a=first_text, response_b=second_text
    )


def parse_verdict(reply: str) -> float | None:
    """Positional verdict from a judge reply: 1 first, 0 second, 0.5 tie."""
    for token in _TOKEN_RE.findall(reply.upper()):
        if token in ("A", "FIRST"):
            return 1.0
        if token in ("B", "SECOND"):
            return 0.0
        if token == "TIE":
            return 0.5
    return None


def judge_pair(
    prompt_id: str,
    prompt_text: str,
    model_i: str,
    response_i: str,
    model_j: str,
    response_j: str,
    judge_id: str,
    ask: Callable[[str], str],
    template: str = DEFAULT_JUDGE_TEMPLATE,
    seed: int = 0,
) -> PairJudgment:
    """Blind-judge one response pair and store the canonical verdict.

    The two responses are presented in a seeded random order without expert
    names; the positional reply is mapped back to canonical (i, j) order.
    An unparseable reply is re-asked once, then marked missing.
    """
    order = presentation_order(prompt_id, model_i, model_j, judge_id, seed)
    if order == ORDER_CANONICAL:
        first, second = response_i, response_j
    else:
        first, second = response_j, response_i
    rendered = render_judge_prompt(template, prompt_text, first, second)

    positional = parse_verdict(ask(rendered))
    if positional is None:
        positional = parse_verdict(ask(rendered))
    if positional is None:
        logger.warning(
            "judge %s gave no parseable verdict on %s (%s vs %s); marking missing",
            judge_id, prompt_id, model_i, model_j,
        )
        a: float | None = None
    elif order == ORDER_CANONICAL:
        a = positional
    else:
        a = 1.0 - positional

    return PairJudgment(
        prompt_id=prompt_id,
        model_i=model_i,
        model_j=model_j,
        judge_id=judge_id,
        a=a,
        presentation_order=order,
    )


def aggregate(judgments: Iterable[PairJudgment], roster: Sequence[str]) -> ScoreBoard:
    """Fold one prompt's judgments into pair scores and global scores.

    Each counted judgment credits a to model_i and 1 - a to model_j. A pair
    left with zero counted judgments is an AggregationError; missing verdicts
    only shrink that pair's judge count.
    """
    pairs = make_pairs(roster)
    pair_set = set(pairs)
    scores = {pair: 0.0 for pair in pairs}
    counts = {pair: 0 for pair in pairs}
    prompt_ids = set()

    for judgment in judgments:
        prompt_ids.add(judgment.prompt_id)
        if judgment.missing:
            continue
        key = (judgment.model_i, judgment.model_j)
        if key not in pair_set:
            raise ValueError(f"judgment on unknown pair {key}")
        scores[key] += judgment.a  # type: ignore[operator]
        counts[key] += 1

    if len(prompt_ids) > 1:
        raise ValueError(f"judgments span multiple prompts: {sorted(prompt_ids)}")
    empty = [pair for pair in pairs if counts[pair] == 0]
    if empty:
        raise AggregationError(f"no counted judgments for pairs {empty}")

    global_scores = {}
    for expert in roster:
        total = 0.0
        for i, j in pairs:
            if i == expert:
                total += scores[(i, j)]
            elif j == expert:
                total += counts[(i, j)] - scores[(i, j)]
        global_scores[expert] = total

    return ScoreBoard(
        prompt_id=prompt_ids.pop() if prompt_ids else "",
        roster=tuple(roster),
        pair_scores=scores,
        judges_counted=counts,
        global_scores=global_scores,
    )


def rank(board: ScoreBoard) -> dict[str, int]:
    """Rank experts 1..M by descending global score, roster order on ties."""
    order = sorted(
        range(len(board.roster)),
        key=lambda idx: (-board.global_scores[board.roster[idx]], idx),
    )
    return {board.roster[idx]: position + 1 for position, idx in enumerate(order)}


def normalize(board: ScoreBoard) -> NormalizedScores:
    """Global scores scaled to sum to 1; an all-zero board becomes uniform."""
    total = sum(board.global_scores[e] for e in board.roster)
    if total == 0:
        share = 1.0 / len(board.roster)
        scores = {e: share for e in board.roster}
    else:
        scores = {e: board.global_scores[e] / total for e in board.roster}
    return NormalizedScores(prompt_id=board.prompt_id, scores=scores)


def kappa(
    labels_a: Sequence[Hashable],
    labels_b: Sequence[Hashable],
    chance: str = "marginal",
    classes: Sequence[Hashable] | None = None,
) -> float:
    """Agreement between two judges' verdict sequences, chance-corrected.

    chance="marginal" corrects by the product of the judges' own label
    marginals; chance="uniform" corrects by 1/k over the fixed class set
    (the three verdict classes by default), the free-marginal variant.
    """
    if len(labels_a) != len(labels_b):
        raise ValueError("label sequences differ in length")
    n = len(labels_a)
    if n < 2:
        raise ValueError("need at least two shared judged pairs")

    observed = sum(1 for x, y in zip(labels_a, labels_b) if x == y) / n
    if chance == "marginal":
        class_set = set(labels_a) | set(labels_b)
        expected = 0.0
        for cls in class_set:
            pa = sum(1 for x in labels_a if x == cls) / n
            pb = sum(1 for y in labels_b if y == cls) / n
            expected += pa * pb
    elif chance == "uniform":
        k = len(classes) if classes is not None else len(VERDICT_VALUES)
        if k < 2:
            raise ValueError("uniform chance needs at least two classes")
        expected = 1.0 / k
    else:
        raise ValueError(f"unknown chance convention {chance!r}")

    if expected == 1.0:
        if observed == 1.0:
            return 1.0
        raise ValueError("degenerate marginals with disagreeing labels")
    return (observed - expected) / (1.0 - expected)


def kappa_matrix(
    judgments: Iterable[PairJudgment],
    chance: str = "marginal",
) -> tuple[dict[tuple[str, str], float], float | None]:
    """Pairwise judge agreement over shared verdicts, plus the mean.

    Judge pairs sharing fewer than two verdicts are omitted; the mean is
    None when no judge pair qualifies.
    """
    by_judge: dict[str, dict[tuple[str, str, str], float]] = {}
    for judgment in judgments:
        if judgment.missing:
            continue
        key = (judgment.prompt_id, judgment.model_i, judgment.model_j)
        by_judge.setdefault(judgment.judge_id, {})[key] = judgment.a  # type: ignore[arg-type]

    judges = sorted(by_judge)
    matrix: dict[tuple[str, str], float] = {}
    for idx, judge_a in enumerate(judges):
        for judge_b in judges[idx + 1 :]:
            shared = sorted(set(by_judge[judge_a]) & set(by_judge[judge_b]))
            if len(shared) < 2:
                continue
            matrix[(judge_a, judge_b)] = kappa(
                [by_judge[judge_a][k] for k in shared],
                [by_judge[judge_b][k] for k in shared],
                chance=chance,
            )
    mean = sum(matrix.values()) / len(matrix) if matrix else None
    return matrix, mean


def self_win_rate(
    judgments: Iterable[PairJudgment],
    judge_id: str,
    own_model_id: str,
    roster: Sequence[str],
) -> float:
    """How often the judge's own verdicts alone rank its own model first.

    Only prompts where the judge produced a counted verdict for every pair
    are eligible; having none is an error.
    """
    if own_model_id not in roster:
        raise ValueError(f"own model {own_model_id!r} not in roster")
    n_pairs = len(make_pairs(roster))

    per_prompt: dict[str, list[PairJudgment]] = {}
    for judgment in judgments:
        if judgment.judge_id != judge_id or judgment.missing:
            continue
        per_prompt.setdefault(judgment.prompt_id, []).append(judgment)

    eligible = 0
    wins = 0
    for prompt_id, rows in per_prompt.items():
        if len({(r.model_i, r.model_j) for r in rows}) < n_pairs:
            continue
        eligible += 1
        board = aggregate(rows, roster)
        if rank(board)[own_model_id] == 1:
            wins += 1
    if eligible == 0:
        raise ValueError(f"judge {judge_id!r} has no complete prompts")
    return wins / eligible


def build_labeled_dataset(
    corpus: Sequence[Any],
    responses: Mapping[str, Iterable[str]] | None,
    score_boards: Mapping[str, ScoreBoard],
    embeddings: Mapping[str, Sequence[float]],
) -> tuple[list[LabeledExample], list[str]]:
    """Join prompts with embeddings and normalized jury scores.

    Prompts missing an embedding, a score board, or (when a response index
    is supplied) a full response set are skipped and reported by id.
    """
    examples: list[LabeledExample] = []
    skipped: list[str] = []
    for record in corpus:
        prompt_id = record.id
        board = score_boards.get(prompt_id)
        embedding = embeddings.get(prompt_id)
        if board is None or embedding is None:
            skipped.append(prompt_id)
            continue
        if responses is not None:
            have = set(responses.get(prompt_id, ()))
            if not set(board.roster) <= have:
                skipped.append(prompt_id)
                continue
        examples.append(
            LabeledExample(
                prompt_id=prompt_id,
                embedding=tuple(float(x) for x in embedding),
                target=normalize(board),
                category=record.category,
            )
        )
    for prompt_id in skipped:
        logger.info("labeled dataset skipped prompt %s", prompt_id)
    return examples, skipped


def labeled_example_to_json(example: LabeledExample) -> dict[str, Any]:
    return {
        "prompt_id": example.prompt_id,
        "category": example.category,
        "embedding": list(example.embedding),
        "scores": dict(example.target.scores),
    }


def labeled_example_from_json(row: Mapping[str, Any]) -> LabeledExample:
    scores = {str(k): float(v) for k, v in row["scores"].items()}
    return LabeledExample(
        prompt_id=str(row["prompt_id"]),
        embedding=tuple(float(x) for x in row["embedding"]),
        target=NormalizedScores(prompt_id=str(row["prompt_id"]), scores=scores),
        category=str(row["category"]),
    )
