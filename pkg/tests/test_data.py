import numpy as np
import pytest

from anast.classifier import joint_fit
from anast.data import (
    FeatureStore,
    FormatError,
    ManifestError,
    SyntheticSpec,
    decode_features,
    encode_features,
    gen_synthetic,
    load_features,
    load_manifest,
    parse_manifest,
    parse_text_features,
    save_features,
    split_train_test,
)
from anast.expansion import ExpansionSpec, make_projector
from anast.protocol import accuracy

from conftest import synthetic_doc


def holdout_accuracy(store, gamma=0.01, output_dim=200):
    train, test = split_train_test(store, 0.8, 0)
    p = make_projector(ExpansionSpec(input_dim=store.feature_dim, output_dim=output_dim, seed=0))
    return accuracy(joint_fit([train], gamma, p), test)[0]


class TestSynthetic:
    def test_deterministic(self):
        spec = SyntheticSpec(classes=4, per_class=30, dim=6, separation=3.0, std=1.0, seed=5)
        a, b = gen_synthetic(spec), gen_synthetic(spec)
        assert encode_features(a) == encode_features(b)
        assert encode_features(gen_synthetic(SyntheticSpec(4, 30, 6, 3.0, 1.0, seed=6))) != encode_features(a)

    def test_shape_and_labels(self):
        s = gen_synthetic(SyntheticSpec(classes=3, per_class=5, dim=2))
        assert s.features.shape == (15, 2)
        assert s.classes() == ["c0", "c1", "c2"]

    def test_mean_separation(self):
        s = gen_synthetic(SyntheticSpec(classes=5, per_class=2000, dim=8, separation=6.0, std=0.1, seed=1))
        means = np.array([s.features[s.labels == c].mean(axis=0) for c in s.classes()])
        dists = [np.linalg.norm(means[i] - means[j]) for i in range(5) for j in range(i + 1, 5)]
        np.testing.assert_allclose(dists, 6.0, rtol=0.01)

    def test_zero_separation_is_chance(self):
        s = gen_synthetic(SyntheticSpec(classes=4, per_class=1000, dim=10, separation=0.0, std=1.0, seed=3))
        assert abs(holdout_accuracy(s) - 0.25) <= 0.05

    def test_well_separated(self):
        s = gen_synthetic(SyntheticSpec(classes=8, per_class=200, dim=20, separation=10.0, std=0.5, seed=7))
        assert holdout_accuracy(s) >= 0.99

    @pytest.mark.parametrize("bad", [dict(classes=0), dict(per_class=0), dict(dim=0), dict(separation=-1.0),
                                     dict(std=0.0), dict(seed=-2)])
    def test_invalid(self, bad):
        kw = dict(classes=2, per_class=2, dim=2)
        kw.update(bad)
        with pytest.raises(ValueError):
            SyntheticSpec(**kw)


def store_with_counts(counts):
    labels = [c for c, n in counts.items() for _ in range(n)]
    return FeatureStore(np.arange(len(labels), dtype=float)[:, None], np.array(labels, dtype=object), "t")


class TestSplit:
    def test_80_20(self):
        train, test = split_train_test(store_with_counts({"a": 10, "b": 10, "c": 10}), 0.8, 1)
        assert train.class_counts() == {"a": 8, "b": 8, "c": 8}
        assert test.class_counts() == {"a": 2, "b": 2, "c": 2}

    def test_partition(self):
        store = store_with_counts({"a": 13, "b": 7, "c": 2})
        train, test = split_train_test(store, 0.75, 3)
        ids_tr, ids_te = set(train.features[:, 0]), set(test.features[:, 0])
        assert not ids_tr & ids_te
        assert ids_tr | ids_te == set(store.features[:, 0])

    def test_seeds_change_membership_not_counts(self):
        store = store_with_counts({"a": 20, "b": 20})
        tr1, _ = split_train_test(store, 0.8, 1)
        tr2, _ = split_train_test(store, 0.8, 2)
        assert tr1.class_counts() == tr2.class_counts()
        assert set(tr1.features[:, 0]) != set(tr2.features[:, 0])

    @pytest.mark.parametrize("ratio", [0.05, 0.3, 0.5, 0.8, 0.97])
    @pytest.mark.parametrize("n", [2, 3, 7, 10, 101])
    def test_stratified_within_one_sample(self, ratio, n):
        train, _ = split_train_test(store_with_counts({"a": n, "b": n + 1}), ratio, 0)
        for c, size in (("a", n), ("b", n + 1)):
            assert abs(train.class_counts()[c] - ratio * size) < 1

    def test_too_small_class(self):
        with pytest.raises(ValueError, match="'b'"):
            split_train_test(store_with_counts({"a": 5, "b": 1}), 0.8, 0)

    @pytest.mark.parametrize("ratio", [0.0, 1.0, 1.5])
    def test_bad_ratio(self, ratio):
        with pytest.raises(ValueError):
            split_train_test(store_with_counts({"a": 5}), ratio, 0)


class TestFeatureFiles:
    def test_binary_round_trip(self, tmp_path, rng):
        store = FeatureStore(rng.standard_normal((9, 4)), np.array(list("abcabcabc"), dtype=object))
        save_features(store, tmp_path / "f.anft")
        back = load_features(tmp_path / "f.anft")
        assert back.features.tobytes() == store.features.tobytes()
        assert list(back.labels) == list(store.labels)
        raw = (tmp_path / "f.anft").read_bytes()
        assert raw[:4] == b"ANFT"
        assert int.from_bytes(raw[8:16], "little") == 9 and int.from_bytes(raw[16:24], "little") == 4

    def test_text_row(self):
        s = parse_text_features("1.0,2.0,attackA\n")
        assert s.features.tolist() == [[1.0, 2.0]] and list(s.labels) == ["attackA"]

    def test_text_header(self):
        s = parse_text_features("f0,f1,label\n1,2,x\n3,4,y\n")
        assert s.n_rows == 2 and s.feature_dim == 2

    def test_ragged_row_cites_line(self):
        with pytest.raises(FormatError, match="line 3"):
            parse_text_features("1,2,a\n3,4,b\n5,c\n")

    def test_non_numeric_cites_line(self):
        with pytest.raises(FormatError, match="line 2, field 2"):
            parse_text_features("1,2,a\n3,oops,b\n")

    def test_text_round_trip(self, tmp_path, rng):
        store = FeatureStore(rng.standard_normal((5, 3)), np.array(list("xyzxy"), dtype=object))
        save_features(store, tmp_path / "f.csv")
        back = load_features(tmp_path / "f.csv")
        assert back.features.tobytes() == store.features.tobytes()

    def test_bad_magic_and_truncation(self, rng):
        raw = encode_features(FeatureStore(rng.standard_normal((3, 2)), np.array(["a", "b", "c"], dtype=object)))
        with pytest.raises(FormatError, match="offset"):
            decode_features(raw[:-5])
        with pytest.raises(FormatError, match="version"):
            decode_features(raw[:4] + (7).to_bytes(4, "little") + raw[8:])
        with pytest.raises(FormatError, match="magic"):
            decode_features(b"NOPE" + raw[4:])


class TestManifest:
    def test_asvspoof_schedule(self):
        m = load_manifest("scenarios/asvspoof_la_schedule.toml")
        assert [len(t.classes) for t in m.tasks] == [10, 2, 2, 2, 2, 2]
        assert m.gamma == 0.01 and m.expansion.output_dim == 1000

    def test_values_and_relative_paths(self, tmp_path):
        store = gen_synthetic(SyntheticSpec(classes=4, per_class=10, dim=3))
        save_features(store, tmp_path / "feats.anft")
        (tmp_path / "m.toml").write_text(
            'name = "x"\ngamma = 0.01\n[expansion]\noutput_dim = 1000\n'
            '[sources.main]\npath = "feats.anft"\n'
            '[[tasks]]\nname = "a"\nclasses = ["c0", "c1"]\nsource = "main"\n'
            '[[tasks]]\nname = "b"\nclasses = ["c2", "c3"]\nsource = "main"\n'
        )
        m = load_manifest(tmp_path / "m.toml")
        assert m.gamma == 0.01 and m.expansion.output_dim == 1000 and m.expansion.input_dim == 3
        assert m.task_data(m.tasks[1]).class_counts() == {"c2": 10, "c3": 10}

    def test_missing_source(self):
        doc = synthetic_doc()
        doc["tasks"][1]["source"] = "elsewhere"
        with pytest.raises(ManifestError, match="'elsewhere'"):
            parse_manifest(doc)

    def test_unknown_class(self):
        doc = synthetic_doc()
        doc["tasks"][0]["classes"] = ["c0", "nope"]
        with pytest.raises(ManifestError, match="nope"):
            parse_manifest(doc)

    def test_empty_task(self):
        doc = synthetic_doc()
        doc["tasks"][0]["classes"] = []
        with pytest.raises(ManifestError, match="empty"):
            parse_manifest(doc)

    def test_duplicate_task_names(self):
        doc = synthetic_doc()
        doc["tasks"][1]["name"] = doc["tasks"][0]["name"]
        with pytest.raises(ManifestError, match="duplicate"):
            parse_manifest(doc)

    def test_missing_file(self, tmp_path):
        doc = synthetic_doc()
        doc["sources"] = {"disk": {"path": "absent.anft"}}
        with pytest.raises(ManifestError, match="'disk'"):
            parse_manifest(doc, tmp_path)

    def test_expansion_disabled(self):
        doc = synthetic_doc()
        doc["expansion"] = {"enabled": False}
        m = parse_manifest(doc)
        assert m.expansion.kind.value == "identity" and m.expansion.output_dim == 20

    def test_overrides_validated_and_echoed(self, standard_manifest):
        m = standard_manifest.with_overrides(gamma=0.1, expansion_size=64, activation="relu")
        assert m.gamma == 0.1 and m.expansion.output_dim == 64
        assert m.config()["overrides"] == {"activation": "relu", "expansion_size": 64, "gamma": 0.1}
        with pytest.raises(ManifestError):
            standard_manifest.with_overrides(gamma=-1.0)
        with pytest.raises(ManifestError):
            standard_manifest.with_overrides(expansion_size=0)
