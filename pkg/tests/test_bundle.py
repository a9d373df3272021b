import hashlib
import json
from types import SimpleNamespace

import numpy as np
import pytest

from gaproute.jsonl import dumps_canonical
from gaproute.jury import LabeledExample, NormalizedScores
from gaproute.learners import (
    MODE_GLOBAL,
    MODE_PER_CATEGORY,
    TASK_CLASSIFY,
    BundleError,
    ForestConfig,
    MLPConfig,
    ModelBundle,
    examples_to_arrays,
    load_bundle,
    roster_hash,
    save_bundle,
    train_mlp,
    train_pair_classifier,
    train_random_forest,
    train_ridge,
)

ROSTER = ("alpha", "bravo", "charlie")


def make_examples(rng, n=30):
    examples = []
    for k in range(n):
        emb = rng.normal(size=3)
        raw = rng.dirichlet(np.ones(3))
        examples.append(
            LabeledExample(
                prompt_id=f"p{k:03d}",
                embedding=tuple(float(v) for v in emb),
                target=NormalizedScores(
                    prompt_id=f"p{k:03d}",
                    scores=dict(zip(ROSTER, map(float, raw))),
                ),
                category="coding" if k % 2 == 0 else "mathematics",
            )
        )
    return examples


@pytest.fixture(scope="module")
def trained():
    rng = np.random.default_rng(7)
    examples = make_examples(rng)
    X, Y = examples_to_arrays(examples, ROSTER)
    forest = train_random_forest(
        X, Y, ForestConfig(n_trees=5, max_depth=4, seed=3), roster=ROSTER
    )
    ridge = train_ridge(X, Y, lam=0.5, roster=ROSTER)
    pair = train_pair_classifier(
        examples,
        ROSTER,
        train_mlp,
        config=MLPConfig(hidden_sizes=(4,), epochs=5, learning_rate=0.05, seed=1),
    )
    categories = [e.category for e in examples]
    cat_clf = train_random_forest(
        X, categories, ForestConfig(n_trees=5, max_depth=4, seed=9), task=TASK_CLASSIFY
    )
    probes = np.random.default_rng(11).normal(size=(10, 3))
    return SimpleNamespace(
        forest=forest, ridge=ridge, pair=pair, cat_clf=cat_clf, probes=probes
    )


@pytest.fixture()
def global_bundle(trained):
    return ModelBundle(
        roster=ROSTER,
        embedding_dim=3,
        mode=MODE_GLOBAL,
        regressors={"global": trained.forest},
        pair_classifier=trained.pair,
        config={"trained_on": 30},
    )


@pytest.fixture()
def category_bundle(trained):
    return ModelBundle(
        roster=ROSTER,
        embedding_dim=3,
        mode=MODE_PER_CATEGORY,
        regressors={"coding": trained.ridge, "mathematics": trained.forest},
        pair_classifier=trained.pair,
        category_classifier=trained.cat_clf,
    )


def patch_manifest(root, mutate):
    manifest = json.loads((root / "manifest.json").read_text())
    mutate(manifest)
    (root / "manifest.json").write_text(dumps_canonical(manifest) + "\n")


class TestRoundTrip:
    def test_global_predictions_bit_identical(self, tmp_path, trained, global_bundle):
        save_bundle(global_bundle, tmp_path / "b")
        loaded = load_bundle(tmp_path / "b")

        assert loaded.roster == ROSTER
        assert loaded.mode == MODE_GLOBAL
        assert loaded.embedding_dim == 3
        assert loaded.config == {"trained_on": 30}
        assert loaded.category_classifier is None

        before = trained.forest.predict(trained.probes)
        after = loaded.regressor_for("anything").predict(trained.probes)
        assert np.array_equal(before, after)

        for probe in trained.probes:
            orig = trained.pair.probability(probe, "alpha", "charlie")
            assert loaded.pair_classifier.probability(probe, "alpha", "charlie") == orig

    def test_per_category_predictions_bit_identical(self, tmp_path, trained, category_bundle):
        save_bundle(category_bundle, tmp_path / "b")
        loaded = load_bundle(tmp_path / "b")

        assert loaded.mode == MODE_PER_CATEGORY
        assert set(loaded.regressors) == {"coding", "mathematics"}
        assert np.array_equal(
            trained.ridge.predict(trained.probes),
            loaded.regressor_for("coding").predict(trained.probes),
        )
        assert np.array_equal(
            trained.forest.predict(trained.probes),
            loaded.regressor_for("mathematics").predict(trained.probes),
        )
        assert np.array_equal(
            trained.cat_clf.predict(trained.probes),
            loaded.category_classifier.predict(trained.probes),
        )
        assert np.array_equal(
            trained.cat_clf.predict_proba(trained.probes),
            loaded.category_classifier.predict_proba(trained.probes),
        )

    def test_loaded_metadata_survives(self, tmp_path, trained, category_bundle):
        save_bundle(category_bundle, tmp_path / "b")
        loaded = load_bundle(tmp_path / "b")
        assert loaded.regressors["coding"].kind == "ridge"
        assert loaded.regressors["mathematics"].kind == "random_forest"
        assert loaded.pair_classifier.kind == "mlp"
        assert loaded.pair_classifier.roster == ROSTER
        assert loaded.pair_classifier.embedding_dim == 3
        assert loaded.category_classifier.classes == ("coding", "mathematics")

    def test_roster_pin_accepts_matching_hash(self, tmp_path, global_bundle):
        save_bundle(global_bundle, tmp_path / "b")
        loaded = load_bundle(tmp_path / "b", expected_roster_hash=roster_hash(ROSTER))
        assert loaded.roster_hash == roster_hash(ROSTER)


class TestDeterminism:
    def test_two_saves_byte_identical(self, tmp_path, category_bundle):
        save_bundle(category_bundle, tmp_path / "a")
        save_bundle(category_bundle, tmp_path / "b")

        listing_a = sorted(p.name for p in (tmp_path / "a").iterdir())
        listing_b = sorted(p.name for p in (tmp_path / "b").iterdir())
        assert listing_a == listing_b
        assert "manifest.json" in listing_a
        for name in listing_a:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_roster_hash_is_order_sensitive(self):
        assert roster_hash(("a", "b")) != roster_hash(("b", "a"))
        assert roster_hash(("a", "b")) == roster_hash(["a", "b"])
        assert len(roster_hash(ROSTER)) == 64

    def test_manifest_hashes_match_files(self, tmp_path, global_bundle):
        root = tmp_path / "b"
        save_bundle(global_bundle, root)
        manifest = json.loads((root / "manifest.json").read_text())
        assert manifest["roster_hash"] == roster_hash(ROSTER)
        for entry in manifest["files"].values():
            blob = (root / entry["path"]).read_bytes()
            assert hashlib.sha256(blob).hexdigest() == entry["sha256"]


class TestLoadRejections:
    def test_missing_manifest(self, tmp_path):
        with pytest.raises(BundleError, match="manifest"):
            load_bundle(tmp_path / "nowhere")

    def test_invalid_manifest_json(self, tmp_path):
        root = tmp_path / "b"
        root.mkdir()
        (root / "manifest.json").write_text("{not json")
        with pytest.raises(BundleError, match="JSON"):
            load_bundle(root)

    def test_format_version_mismatch(self, tmp_path, global_bundle):
        root = tmp_path / "b"
        save_bundle(global_bundle, root)
        patch_manifest(root, lambda m: m.update(format_version=2))
        with pytest.raises(BundleError, match="format version"):
            load_bundle(root)

    def test_corrupt_model_file(self, tmp_path, global_bundle):
        root = tmp_path / "b"
        save_bundle(global_bundle, root)
        blob_path = root / "regressor_global.bin"
        blob = bytearray(blob_path.read_bytes())
        blob[-1] ^= 0xFF
        blob_path.write_bytes(bytes(blob))
        with pytest.raises(BundleError, match="hash mismatch"):
            load_bundle(root)

    def test_missing_model_file(self, tmp_path, global_bundle):
        root = tmp_path / "b"
        save_bundle(global_bundle, root)
        (root / "pair_classifier.bin").unlink()
        with pytest.raises(BundleError, match="missing model file"):
            load_bundle(root)

    def test_truncated_payload(self, tmp_path, global_bundle):
        # Re-hash after truncating so the content check passes and the
        # payload decoder itself must notice the short array.
        root = tmp_path / "b"
        save_bundle(global_bundle, root)
        blob_path = root / "regressor_global.bin"
        blob = blob_path.read_bytes()[:-8]
        blob_path.write_bytes(blob)

        def mutate(manifest):
            manifest["files"]["regressor:global"]["sha256"] = hashlib.sha256(blob).hexdigest()

        patch_manifest(root, mutate)
        with pytest.raises(BundleError, match="truncated"):
            load_bundle(root)

    def test_trailing_bytes(self, tmp_path, global_bundle):
        root = tmp_path / "b"
        save_bundle(global_bundle, root)
        blob_path = root / "regressor_global.bin"
        blob = blob_path.read_bytes() + b"\x00" * 8
        blob_path.write_bytes(blob)

        def mutate(manifest):
            manifest["files"]["regressor:global"]["sha256"] = hashlib.sha256(blob).hexdigest()

        patch_manifest(root, mutate)
        with pytest.raises(BundleError, match="trailing"):
            load_bundle(root)

    def test_tampered_roster_fails_self_check(self, tmp_path, global_bundle):
        root = tmp_path / "b"
        save_bundle(global_bundle, root)
        patch_manifest(root, lambda m: m.update(roster=["alpha", "bravo", "mallory"]))
        with pytest.raises(BundleError, match="roster hash"):
            load_bundle(root)

    def test_roster_pin_mismatch(self, tmp_path, global_bundle):
        root = tmp_path / "b"
        save_bundle(global_bundle, root)
        other = roster_hash(("x", "y"))
        with pytest.raises(BundleError, match="configured roster"):
            load_bundle(root, expected_roster_hash=other)


class TestConstruction:
    def test_global_requires_global_regressor(self, trained):
        with pytest.raises(BundleError, match="global"):
            ModelBundle(
                roster=ROSTER,
                embedding_dim=3,
                mode=MODE_GLOBAL,
                regressors={"coding": trained.forest},
                pair_classifier=trained.pair,
            )

    def test_per_category_requires_classifier(self, trained):
        with pytest.raises(BundleError, match="category classifier"):
            ModelBundle(
                roster=ROSTER,
                embedding_dim=3,
                mode=MODE_PER_CATEGORY,
                regressors={"coding": trained.ridge, "mathematics": trained.forest},
                pair_classifier=trained.pair,
            )

    def test_per_category_requires_full_coverage(self, trained):
        with pytest.raises(BundleError, match="mathematics"):
            ModelBundle(
                roster=ROSTER,
                embedding_dim=3,
                mode=MODE_PER_CATEGORY,
                regressors={"coding": trained.ridge},
                pair_classifier=trained.pair,
                category_classifier=trained.cat_clf,
            )

    def test_unknown_mode(self, trained):
        with pytest.raises(BundleError, match="mode"):
            ModelBundle(
                roster=ROSTER,
                embedding_dim=3,
                mode="hybrid",
                regressors={"global": trained.forest},
                pair_classifier=trained.pair,
            )

    def test_regressor_for_unknown_category(self, category_bundle):
        with pytest.raises(BundleError, match="creative"):
            category_bundle.regressor_for("creative-writing")
        with pytest.raises(BundleError, match="None"):
            category_bundle.regressor_for(None)

    def test_unserializable_model_rejected(self, tmp_path, trained):
        bundle = ModelBundle(
            roster=ROSTER,
            embedding_dim=3,
            mode=MODE_GLOBAL,
            regressors={"global": object()},
            pair_classifier=trained.pair,
        )
        with pytest.raises(BundleError, match="cannot serialize"):
            save_bundle(bundle, tmp_path / "b")
