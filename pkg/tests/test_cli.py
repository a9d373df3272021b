"""End-to-end exercises of the command-line pipeline with mock upstreams."""

import hashlib
import json
import logging
import re
from pathlib import Path
from unittest import mock

import httpx
import pytest
from click.testing import CliRunner

import gaproute.cli as cli_mod
from gaproute.cli import _env_overrides, _JsonLineFormatter, _parse_tau_grid, cli
from gaproute.evaluation import SWEEP_COLUMNS, default_tau_grid
from gaproute.jsonl import read_jsonl, write_jsonl
from gaproute.learners import MODE_GLOBAL, MODE_PER_CATEGORY, load_bundle
from gaproute.upstream import ChatClient, RetryPolicy

DIM = 6

CONFIG_YAML = """
listen: "127.0.0.1:8123"
roster:
  - {id: alpha, route: prov/alpha, roles: [expert]}
  - {id: bravo, route: prov/bravo, roles: [expert]}
  - {id: jane, route: prov/jane, roles: [judge]}
  - {id: judy, route: prov/judy, roles: [judge]}
policy:
  tau: 0.10
  mode: global
  bundle_path: bundle
upstream:
  base_url: "http://upstream.test/v1"
embedding:
  model_tag: test-embed
  dim: 6
collect:
  parallelism: 2
"""

# Alpha is strong on code prompts, bravo on everything else; judges read the
# quality markers straight out of the candidate texts.
QUALITY = {"prov/alpha": (9, 3), "prov/bravo": (4, 8)}


def make_chat_client(calls):
    def handler(request: httpx.Request) -> httpx.Response:
        body = json.loads(request.content)
        route = body["model"]
        content = body["messages"][-1]["content"]
        calls.append(route)
        if content.startswith("You will compare"):
            first, second = (int(q) for q in re.findall(r"q(\d+) answer", content)[:2])
            text = "A" if first > second else "B" if second > first else "TIE"
        else:
            on_code, off_code = QUALITY[route]
            quality = on_code if "code" in content else off_code
            text = f"q{quality} answer from {route}"
        return httpx.Response(
            200,
            json={"choices": [{"message": {"role": "assistant", "content": text}}]},
        )

    transport = httpx.MockTransport(handler)
    return ChatClient(
        base_url="http://upstream.test/v1",
        retry=RetryPolicy(max_attempts=1),
        client=httpx.Client(transport=transport, base_url="http://upstream.test/v1"),
    )


class _Vector:
    def __init__(self, values):
        self.values = values


class StubEmbedder:
    """Category one-hot plus a text-keyed jitter, fully deterministic."""

    def embed(self, text: str) -> _Vector:
        base = [0.0] * DIM
        base[0 if "code" in text else 1] = 1.0
        digest = hashlib.sha256(text.encode("utf-8")).digest()
        return _Vector(
            tuple(base[k] + (digest[k] / 255.0 - 0.5) * 0.1 for k in range(DIM))
        )


def run_ok(runner, args, env=None):
    result = runner.invoke(cli, args, env=env)
    assert result.exit_code == 0, f"{args[0]} failed: {result.output}{result.stderr}"
    return result


def patched_builders(calls):
    chat = mock.patch.object(cli_mod, "build_chat_client", lambda config: make_chat_client(calls))
    embed = mock.patch.object(cli_mod, "build_embedding_client", lambda config: StubEmbedder())
    return chat, embed


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeline")
    config = root / "config.yaml"
    config.write_text(CONFIG_YAML, encoding="utf-8")

    coding_raw = root / "coding_raw.jsonl"
    rows = [
        {"text": f"Write code task {k}: implement the widget numbered {k} for the build"}
        for k in range(10)
    ]
    rows.append({"note": "no text field, must be skipped"})
    rows.append(dict(rows[0]))  # exact duplicate, must fall to dedup
    write_jsonl(coding_raw, rows)
    writing_raw = root / "writing_raw.jsonl"
    write_jsonl(
        writing_raw,
        [
            {"text": f"Tell a short story about subject {k} in one vivid paragraph"}
            for k in range(10)
        ],
    )

    runner = CliRunner()
    paths = {
        "root": root,
        "config": config,
        "corpus": root / "corpus.jsonl",
        "responses": root / "responses.jsonl",
        "failures": root / "failures.jsonl",
        "judgments": root / "judgments.jsonl",
        "jury_stats": root / "jury_stats.json",
        "labels": root / "labels.jsonl",
        "bundle": root / "bundle",
        "sweep": root / "sweep.json",
        "sweep_csv": root / "sweep.csv",
        "eval": root / "eval.json",
    }
    echoes = {}

    coding = root / "coding.jsonl"
    writing = root / "writing.jsonl"
    echoes["ingest"] = run_ok(
        runner,
        ["ingest", "--category", "coding", "--in", str(coding_raw), "--out", str(coding)],
    ).output
    run_ok(
        runner,
        [
            "ingest",
            "--category",
            "creative-writing",
            "--in",
            str(writing_raw),
            "--out",
            str(writing),
        ],
    )
    merged = root / "merged.jsonl"
    write_jsonl(merged, list(read_jsonl(coding)) + list(read_jsonl(writing)))

    deduped = root / "deduped.jsonl"
    removed = root / "removed.jsonl"
    echoes["dedup"] = run_ok(
        runner,
        ["dedup", "--in", str(merged), "--out", str(deduped), "--removed-out", str(removed)],
    ).output
    paths["removed"] = removed

    echoes["split"] = run_ok(
        runner,
        ["split", "--in", str(deduped), "--out", str(paths["corpus"]), "--train-frac", "0.8"],
    ).output

    calls: list[str] = []
    chat, embed = patched_builders(calls)
    with chat, embed:
        echoes["collect"] = run_ok(
            runner,
            [
                "collect",
                "--config",
                str(config),
                "--corpus",
                str(paths["corpus"]),
                "--out",
                str(paths["responses"]),
                "--failures-out",
                str(paths["failures"]),
            ],
        ).output
        collect_calls = len(calls)
        echoes["judge"] = run_ok(
            runner,
            [
                "judge",
                "--config",
                str(config),
                "--corpus",
                str(paths["corpus"]),
                "--responses",
                str(paths["responses"]),
                "--out",
                str(paths["judgments"]),
                "--seed",
                "3",
            ],
        ).output
        echoes["label"] = run_ok(
            runner,
            [
                "label",
                "--config",
                str(config),
                "--corpus",
                str(paths["corpus"]),
                "--responses",
                str(paths["responses"]),
                "--judgments",
                str(paths["judgments"]),
                "--out",
                str(paths["labels"]),
            ],
        ).output

    echoes["jury-stats"] = run_ok(
        runner,
        [
            "jury-stats",
            "--config",
            str(config),
            "--judgments",
            str(paths["judgments"]),
            "--out",
            str(paths["jury_stats"]),
        ],
    ).output
    echoes["train"] = run_ok(
        runner,
        [
            "train",
            "--config",
            str(config),
            "--labels",
            str(paths["labels"]),
            "--out",
            str(paths["bundle"]),
            "--trees",
            "12",
            "--depth",
            "4",
            "--hidden",
            "8",
            "--epochs",
            "60",
        ],
    ).output
    echoes["sweep"] = run_ok(
        runner,
        [
            "sweep",
            "--bundle",
            str(paths["bundle"]),
            "--labels",
            str(paths["labels"]),
            "--tau-grid",
            "0.00:0.20:0.05",
            "--out",
            str(paths["sweep"]),
            "--csv",
            str(paths["sweep_csv"]),
        ],
    ).output
    echoes["eval"] = run_ok(
        runner,
        [
            "eval",
            "--bundle",
            str(paths["bundle"]),
            "--labels",
            str(paths["labels"]),
            "--tau",
            "0.10",
            "--reference",
            "alpha",
            "--out",
            str(paths["eval"]),
        ],
    ).output

    paths["echoes"] = echoes
    paths["collect_calls"] = collect_calls
    return paths


class TestPipelineArtifacts:
    def test_ingest_counts_and_skips(self, pipeline):
        assert "wrote 11 records" in pipeline["echoes"]["ingest"]
        assert "1 lines skipped" in pipeline["echoes"]["ingest"]

    def test_dedup_drops_only_the_copy(self, pipeline):
        removed = list(read_jsonl(pipeline["removed"]))
        assert removed == [{"id": "coding-000010", "duplicate_of": "coding-000000"}]
        assert "kept 20 of 21" in pipeline["echoes"]["dedup"]

    def test_split_is_stratified(self, pipeline):
        rows = list(read_jsonl(pipeline["corpus"]))
        assert len(rows) == 20
        for category in ("coding", "creative-writing"):
            splits = [r["split"] for r in rows if r["category"] == category]
            assert splits.count("train") == 8
            assert splits.count("validation") == 2

    def test_collect_queries_every_pair_once(self, pipeline):
        rows = list(read_jsonl(pipeline["responses"]))
        assert len(rows) == 40
        assert pipeline["collect_calls"] == 40
        assert list(read_jsonl(pipeline["failures"])) == []
        assert all(re.fullmatch(r"q\d+ answer from prov/\w+", r["text"]) for r in rows)

    def test_judgments_follow_the_quality_markers(self, pipeline):
        rows = list(read_jsonl(pipeline["judgments"]))
        assert len(rows) == 40  # 20 prompts x 1 pair x 2 judges
        assert {r["judge_id"] for r in rows} == {"jane", "judy"}
        for row in rows:
            assert (row["model_i"], row["model_j"]) == ("alpha", "bravo")
            expected = 1.0 if row["prompt_id"].startswith("coding") else 0.0
            assert row["a"] == expected

    def test_jury_stats_sees_perfect_agreement(self, pipeline):
        payload = json.loads(pipeline["jury_stats"].read_text())
        assert payload["chance"] == "marginal"
        assert payload["mean_kappa"] == 1.0
        assert list(payload["kappa"].values()) == [1.0]
        assert payload["self_win"] == {}

    def test_labels_orient_scores_by_category(self, pipeline):
        rows = list(read_jsonl(pipeline["labels"]))
        assert len(rows) == 20
        for row in rows:
            assert len(row["embedding"]) == DIM
            scores = row["scores"]
            if row["category"] == "coding":
                assert scores["alpha"] > scores["bravo"]
            else:
                assert scores["bravo"] > scores["alpha"]

    def test_bundle_round_trips(self, pipeline):
        bundle = load_bundle(pipeline["bundle"])
        assert bundle.roster == ("alpha", "bravo")
        assert bundle.mode == MODE_GLOBAL
        assert bundle.embedding_dim == DIM
        assert bundle.pair_classifier is not None

    def test_sweep_report_covers_the_grid(self, pipeline):
        payload = json.loads(pipeline["sweep"].read_text())
        rows = payload["rows"]
        assert [row["tau"] for row in rows] == [0.0, 0.05, 0.1, 0.15, 0.2]
        assert all(set(row) == set(SWEEP_COLUMNS) for row in rows)
        header = pipeline["sweep_csv"].read_text().splitlines()[0]
        assert header == ",".join(SWEEP_COLUMNS)

    def test_sweep_output_is_deterministic(self, pipeline, tmp_path):
        again = tmp_path / "sweep_again.json"
        run_ok(
            CliRunner(),
            [
                "sweep",
                "--bundle",
                str(pipeline["bundle"]),
                "--labels",
                str(pipeline["labels"]),
                "--tau-grid",
                "0.00:0.20:0.05",
                "--out",
                str(again),
            ],
        )
        assert again.read_bytes() == pipeline["sweep"].read_bytes()

    def test_eval_report_carries_the_reference(self, pipeline):
        payload = json.loads(pipeline["eval"].read_text())
        assert set(payload) >= {"rows", "win_rates", "regressor_metrics", "tau", "reference"}
        assert payload["reference"] == "alpha"
        assert set(payload["win_rates"]) == {"alpha", "bravo"}
        assert payload["tau"] == 0.1
        assert "win rate vs alpha" in pipeline["echoes"]["eval"]

    def test_collect_resumes_without_new_calls(self, pipeline):
        calls: list[str] = []
        chat, embed = patched_builders(calls)
        with chat, embed:
            result = run_ok(
                CliRunner(),
                [
                    "collect",
                    "--config",
                    str(pipeline["config"]),
                    "--corpus",
                    str(pipeline["corpus"]),
                    "--out",
                    str(pipeline["responses"]),
                ],
            )
        assert "0 new" in result.output
        assert calls == []
        assert len(list(read_jsonl(pipeline["responses"]))) == 40


class TestTrainPerCategory:
    def test_per_category_bundle_shape(self, pipeline, tmp_path):
        out = tmp_path / "bundle_pc"
        run_ok(
            CliRunner(),
            [
                "train",
                "--config",
                str(pipeline["config"]),
                "--labels",
                str(pipeline["labels"]),
                "--out",
                str(out),
                "--mode",
                "per-category",
                "--trees",
                "8",
                "--depth",
                "4",
                "--hidden",
                "8",
                "--epochs",
                "40",
            ],
        )
        bundle = load_bundle(out)
        assert bundle.mode == MODE_PER_CATEGORY
        assert set(bundle.regressors) == {"coding", "creative-writing"}
        assert bundle.category_classifier is not None
        assert bundle.pair_classifier is not None

    def test_single_category_is_rejected(self, pipeline, tmp_path):
        labels = tmp_path / "labels_one.jsonl"
        rows = [r for r in read_jsonl(pipeline["labels"]) if r["category"] == "coding"]
        write_jsonl(labels, rows)
        result = CliRunner().invoke(
            cli,
            [
                "train",
                "--config",
                str(pipeline["config"]),
                "--labels",
                str(labels),
                "--out",
                str(tmp_path / "nope"),
                "--mode",
                "per-category",
            ],
        )
        assert result.exit_code != 0
        assert "train: per-category training needs at least 2 categories" in result.stderr


class TestErrorPaths:
    @pytest.mark.parametrize(
        ("args", "fragment"),
        [
            (("ingest", "--category", "coding", "--in", "gone.jsonl", "--out", "o"), "ingest: missing input file"),
            (("dedup", "--in", "gone.jsonl", "--out", "o"), "dedup: missing corpus file"),
            (("split", "--in", "gone.jsonl", "--out", "o"), "split: missing corpus file"),
            (("jury-stats", "--judgments", "gone.jsonl", "--out", "o"), "jury-stats: missing judgments file"),
            (("train", "--labels", "gone.jsonl", "--out", "o"), "train: missing labels file"),
            (("sweep", "--bundle", "gone", "--labels", "l", "--out", "o"), "sweep: missing bundle directory"),
            (("eval", "--bundle", "gone", "--labels", "l", "--out", "o"), "eval: missing bundle directory"),
        ],
    )
    def test_missing_inputs_name_stage_and_file(self, tmp_path, args, fragment):
        result = CliRunner().invoke(cli, list(args), env={"HOME": str(tmp_path)})
        assert result.exit_code != 0
        assert fragment in result.stderr
        assert "gone" in result.stderr

    def test_ingest_rejects_unknown_category(self, tmp_path):
        raw = tmp_path / "raw.jsonl"
        write_jsonl(raw, [{"text": "a prompt"}])
        result = CliRunner().invoke(
            cli,
            ["ingest", "--category", "esoterica", "--in", str(raw), "--out", str(tmp_path / "o")],
        )
        assert result.exit_code != 0
        assert "ingest:" in result.stderr
        assert "esoterica" in result.stderr

    def test_collect_requires_expert_roster(self, tmp_path):
        config = tmp_path / "config.yaml"
        config.write_text(
            "roster:\n  - {id: judy, route: prov/judy, roles: [judge]}\n",
            encoding="utf-8",
        )
        corpus = tmp_path / "corpus.jsonl"
        write_jsonl(
            corpus,
            [{"id": "c-0", "text": "a prompt", "category": "coding", "source": "s"}],
        )
        result = CliRunner().invoke(
            cli,
            [
                "collect",
                "--config",
                str(config),
                "--corpus",
                str(corpus),
                "--out",
                str(tmp_path / "o"),
            ],
        )
        assert result.exit_code != 0
        assert "collect: config roster has no expert models" in result.stderr

    def test_judge_requires_responses_file(self, pipeline, tmp_path):
        result = CliRunner().invoke(
            cli,
            [
                "judge",
                "--config",
                str(pipeline["config"]),
                "--corpus",
                str(pipeline["corpus"]),
                "--responses",
                str(tmp_path / "gone.jsonl"),
                "--out",
                str(tmp_path / "o"),
            ],
        )
        assert result.exit_code != 0
        assert "judge: missing responses file" in result.stderr

    def test_train_rejects_invalid_labels(self, tmp_path):
        labels = tmp_path / "labels.jsonl"
        labels.write_text('{"prompt_id": "p", "nope": 1}\n', encoding="utf-8")
        result = CliRunner().invoke(
            cli,
            ["train", "--labels", str(labels), "--out", str(tmp_path / "o")],
        )
        assert result.exit_code != 0
        assert "train: labels file" in result.stderr
        assert "is invalid" in result.stderr

    def test_sweep_rejects_corrupt_bundle(self, pipeline, tmp_path):
        corrupt = tmp_path / "bundle"
        corrupt.mkdir()
        (corrupt / "manifest.json").write_text("{]", encoding="utf-8")
        result = CliRunner().invoke(
            cli,
            [
                "sweep",
                "--bundle",
                str(corrupt),
                "--labels",
                str(pipeline["labels"]),
                "--out",
                str(tmp_path / "o"),
            ],
        )
        assert result.exit_code != 0
        assert "sweep: cannot load bundle" in result.stderr

    def test_eval_rejects_unknown_reference(self, pipeline, tmp_path):
        result = CliRunner().invoke(
            cli,
            [
                "eval",
                "--bundle",
                str(pipeline["bundle"]),
                "--labels",
                str(pipeline["labels"]),
                "--reference",
                "nope",
                "--out",
                str(tmp_path / "o"),
            ],
        )
        assert result.exit_code != 0
        assert "eval: reference expert 'nope' not in bundle roster" in result.stderr

    def test_bad_config_names_the_stage(self, tmp_path):
        config = tmp_path / "config.yaml"
        config.write_text("policy:\n  tau: -3\n", encoding="utf-8")
        result = CliRunner().invoke(
            cli,
            ["serve", "--config", str(config)],
        )
        assert result.exit_code != 0
        assert "serve:" in result.stderr

    def test_bad_set_override_is_rejected(self, tmp_path):
        result = CliRunner().invoke(cli, ["serve", "--set", "nonsense"])
        assert result.exit_code != 0
        assert "serve: override 'nonsense' must look like key=value" in result.stderr


class TestServe:
    def test_serve_passes_resolved_config(self, pipeline, monkeypatch):
        captured = {}
        monkeypatch.setattr(cli_mod, "gateway_serve", lambda config: captured.update(config=config))
        run_ok(
            CliRunner(),
            [
                "serve",
                "--config",
                str(pipeline["config"]),
                "--listen",
                "127.0.0.1:9001",
            ],
        )
        assert captured["config"].listen == "127.0.0.1:9001"
        assert captured["config"].policy.tau == 0.10

    def test_flag_beats_env_beats_file(self, pipeline, monkeypatch):
        captured = {}
        monkeypatch.setattr(cli_mod, "gateway_serve", lambda config: captured.update(config=config))
        env = {"GAPROUTE_POLICY__TAU": "0.17"}
        run_ok(CliRunner(), ["serve", "--config", str(pipeline["config"])], env=env)
        assert captured["config"].policy.tau == 0.17

        run_ok(
            CliRunner(),
            ["serve", "--config", str(pipeline["config"]), "--set", "policy.tau=0.19"],
            env=env,
        )
        assert captured["config"].policy.tau == 0.19

    def test_corrupt_bundle_fails_before_binding(self, tmp_path):
        bundle = tmp_path / "bundle"
        bundle.mkdir()
        (bundle / "manifest.json").write_text("{]", encoding="utf-8")
        config = tmp_path / "config.yaml"
        config.write_text(
            CONFIG_YAML.replace("bundle_path: bundle", f"bundle_path: {bundle}"),
            encoding="utf-8",
        )
        result = CliRunner().invoke(cli, ["serve", "--config", str(config)])
        assert result.exit_code != 0
        assert "serve:" in result.stderr


class TestHelpers:
    def test_env_overrides_map_double_underscores(self):
        env = {
            "GAPROUTE_POLICY__TAU": "0.2",
            "GAPROUTE_LISTEN": "host:1",
            "GAPROUTE_UPSTREAM__RETRY__MAX_ATTEMPTS": "5",
            "HOME": "/nowhere",
        }
        assert _env_overrides(env) == {
            "policy.tau": "0.2",
            "listen": "host:1",
            "upstream.retry.max_attempts": "5",
        }

    def test_tau_grid_matches_default_grid(self):
        assert _parse_tau_grid("sweep", "0.01:0.20:0.01") == default_tau_grid()

    def test_tau_grid_small(self):
        assert _parse_tau_grid("sweep", "0.05:0.15:0.05") == (0.05, 0.1, 0.15)

    @pytest.mark.parametrize(
        "text",
        ["0.1:0.05:0.01", "0.1:0.2", "a:b:c", "0.0:0.2:0", "-0.1:0.2:0.1"],
    )
    def test_tau_grid_rejects_malformed(self, text):
        with pytest.raises(Exception) as err:
            _parse_tau_grid("sweep", text)
        assert "sweep:" in str(err.value)

    def test_log_lines_are_json(self):
        record = logging.LogRecord("gaproute.cli", logging.INFO, "f.py", 1, "hello %d", (7,), None)
        line = _JsonLineFormatter().format(record)
        assert json.loads(line) == {"level": "info", "logger": "gaproute.cli", "msg": "hello 7"}
