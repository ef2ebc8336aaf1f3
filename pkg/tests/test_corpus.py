import hashlib
import struct

import numpy as np
import pytest

from abstain.corpus import (
    EmbeddingStore,
    Role,
    Split,
    SynthSpec,
    assign_splits,
    load_embeddings,
    save_embeddings,
    synth_corpus,
)
from abstain.errors import DuplicateId, EmptySplit, FormatError, InfeasibleGeometry, NormError

from .conftest import unit_rows


def make_store(vectors, roles=None):
    n = len(vectors)
    return EmbeddingStore(
        ids=tuple(f"x{i}" for i in range(n)),
        vectors=np.asarray(vectors, dtype=np.float32),
        roles=np.asarray(roles if roles is not None else [Role.ANCHOR] * n, dtype=np.int8),
        splits=np.zeros(n, dtype=np.int8),
    )


class TestEmb1:
    def test_round_trip_is_bit_exact(self, tmp_path, small_store):
        path = tmp_path / "s.emb"
        save_embeddings(small_store, path)
        back = load_embeddings(path)
        assert back.vectors.tobytes() == small_store.vectors.tobytes()
        assert back.ids == small_store.ids
        np.testing.assert_array_equal(back.roles, small_store.roles)
        np.testing.assert_array_equal(back.splits, small_store.splits)
        assert back.groups == small_store.groups
        save_embeddings(back, tmp_path / "again.emb")
        assert (tmp_path / "again.emb").read_bytes() == path.read_bytes()

    def test_layout(self, tmp_path):
        store = make_store(np.eye(3)[:2])
        path = tmp_path / "t.emb"
        save_embeddings(store, path)
        data = path.read_bytes()
        assert data[:4] == b"EMB1"
        assert struct.unpack_from("<II", data, 4) == (2, 3)
        np.testing.assert_array_equal(np.frombuffer(data, "<f4", 6, 12), np.eye(3)[:2].ravel())
        (tlen,) = struct.unpack_from("<Q", data, 12 + 24)
        lines = data[12 + 24 + 8 :].decode().splitlines()
        assert len(data) == 12 + 24 + 8 + tlen
        assert lines[0] == '{"id":"x0","role":"anchor","split":"unassigned"}'

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.emb"
        save_embeddings(make_store(np.eye(2)), path)
        path.write_bytes(b"XXXX" + path.read_bytes()[4:])
        with pytest.raises(FormatError):
            load_embeddings(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / "t.emb"
        save_embeddings(make_store(np.eye(4)), path)
        path.write_bytes(path.read_bytes()[:-5])
        with pytest.raises(FormatError):
            load_embeddings(path)

    def test_random_unit_matrix(self, tmp_path):
        rng = np.random.default_rng(0)
        store = make_store(unit_rows(rng, 100, 1024))
        save_embeddings(store, tmp_path / "r.emb")
        assert len(load_embeddings(tmp_path / "r.emb")) == 100

    def test_norm_error(self, tmp_path):
        v = np.eye(3) * np.array([[1.0], [1.0], [3.0]])
        path = tmp_path / "n.emb"
        save_embeddings(make_store(v), path)
        with pytest.raises(NormError):
            load_embeddings(path)

    def test_near_unit_rows_are_renormalised(self, tmp_path):
        v = np.eye(3) * np.array([[1.0], [1.0005], [1.0]])
        path = tmp_path / "n.emb"
        save_embeddings(make_store(v), path)
        back = load_embeddings(path)
        assert abs(np.linalg.norm(back.vectors[1]) - 1.0) < 1e-6
        assert back.vectors[0].tobytes() == np.eye(3, dtype=np.float32)[0].tobytes()

    def test_duplicate_ids(self, tmp_path):
        store = make_store(np.eye(2))
        path = tmp_path / "d.emb"
        save_embeddings(store, path)
        path.write_bytes(path.read_bytes().replace(b'"x1"', b'"x0"'))
        with pytest.raises(DuplicateId):
            load_embeddings(path)


@pytest.fixture(scope="module")
def default_store():
    return synth_corpus(SynthSpec(n_anchors=400, n_easy_ood=400, n_mid=400))


class TestSynth:
    def test_deterministic(self, small_spec, tmp_path):
        a, b = synth_corpus(small_spec), synth_corpus(small_spec)
        save_embeddings(a, tmp_path / "a.emb")
        save_embeddings(b, tmp_path / "b.emb")
        assert (tmp_path / "a.emb").read_bytes() == (tmp_path / "b.emb").read_bytes()

    def test_seed_changes_output(self, small_spec):
        from dataclasses import replace

        a = synth_corpus(small_spec)
        b = synth_corpus(replace(small_spec, seed=small_spec.seed + 1))
        assert a.vectors.tobytes() != b.vectors.tobytes()

    def test_unit_norm(self, small_store):
        norms = np.linalg.norm(small_store.vectors.astype(np.float64), axis=1)
        assert np.max(np.abs(norms - 1.0)) <= 1e-6

    def test_role_counts(self, small_spec):
        counts = synth_corpus(small_spec).role_counts()
        n_res = round(small_spec.reserve_fraction * small_spec.n_mid)
        assert counts == {
            "anchor": 60,
            "positive-pool": 60,
            "hard-negative": 60,
            "mid-pool": 90 - n_res,
            "easy-ood": 60,
            "reserve": n_res,
        }

    def test_hard_negative_angle(self, default_store):
        s = default_store
        a = s.vectors[s.where(Role.ANCHOR)].astype(np.float64)
        h = s.vectors[s.where(Role.HARD_NEGATIVE)].astype(np.float64)
        mean_cos = np.mean(np.sum(a * h, axis=1))
        assert abs(mean_cos - np.cos(0.35)) < 0.02

    def test_positive_closer_than_half_hard_angle(self, default_store):
        s = default_store
        a = s.vectors[s.where(Role.ANCHOR)].astype(np.float64)
        p = s.vectors[s.where(Role.POSITIVE_POOL)].astype(np.float64)
        assert np.all(np.sum(a * p, axis=1) > np.cos(0.35 / 2) - 1e-6)

    def test_easy_ood_separation(self, default_store):
        s = default_store
        spec = SynthSpec()
        a = s.vectors[s.where(Role.ANCHOR)].astype(np.float64)
        # cluster centres are recovered as normalised anchor means per cluster
        centres = np.stack([a[c :: spec.n_id_clusters].mean(0) for c in range(spec.n_id_clusters)])
        centres /= np.linalg.norm(centres, axis=1, keepdims=True)
        o = s.vectors[s.where(Role.EASY_OOD)].astype(np.float64)
        assert np.max(o @ centres.T) <= np.cos(spec.easy_ood_separation_angle) + 0.02

    def test_infeasible(self):
        with pytest.raises(InfeasibleGeometry):
            synth_corpus(SynthSpec(dim=4))
        with pytest.raises(InfeasibleGeometry):
            synth_corpus(SynthSpec(hard_perturbation_angle=1.3, easy_ood_separation_angle=1.2))
        with pytest.raises(InfeasibleGeometry):
            synth_corpus(SynthSpec(dim=8, n_id_clusters=8, n_anchors=16, n_easy_ood=8, n_mid=8))


class TestSplits:
    def test_all_train(self, small_spec):
        s = assign_splits(synth_corpus(small_spec), (1.0, 0.0, 0.0))
        assert np.all(s.splits[s.where(Role.ANCHOR)] == Split.TRAIN)

    def test_exact_proportions(self):
        s = synth_corpus(SynthSpec(dim=16, n_anchors=1000, n_easy_ood=300, n_mid=10))
        s = assign_splits(s, (0.8, 0.1, 0.1), seed=3)
        a = s.where(Role.ANCHOR)
        assert [int(np.sum(s.splits[a] == k)) for k in (Split.TRAIN, Split.VAL, Split.TEST)] == [800, 100, 100]
        e = s.where(Role.EASY_OOD)
        assert int(np.sum(s.splits[e] == Split.VAL)) == 100
        assert int(np.sum(s.splits[e] == Split.TEST)) == 100

    def test_triples_never_straddle(self, small_store):
        s = small_store
        by_group: dict[str, set] = {}
        for i, g in enumerate(s.groups):
            if g:
                by_group.setdefault(g, set()).add(int(s.splits[i]))
        violations = [g for g, sp in by_group.items() if len(sp) != 1]
        assert violations == []

    def test_pools_stay_unassigned(self, small_store):
        s = small_store
        for role in (Role.MID_POOL, Role.RESERVE):
            assert np.all(s.splits[s.where(role)] == Split.UNASSIGNED)

    def test_empty_split(self, small_spec):
        with pytest.raises(EmptySplit):
            assign_splits(synth_corpus(small_spec), (0.995, 0.005, 0.0))

    def test_bad_fractions(self, small_store):
        with pytest.raises(ValueError):
            assign_splits(small_store, (0.5, 0.2, 0.2))

    def test_deterministic(self, small_spec):
        s = synth_corpus(small_spec)
        a = assign_splits(s, (0.6, 0.2, 0.2), seed=9)
        b = assign_splits(s, (0.6, 0.2, 0.2), seed=9)
        assert hashlib.sha1(a.splits.tobytes()).digest() == hashlib.sha1(b.splits.tobytes()).digest()
