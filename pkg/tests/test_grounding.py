import math

import numpy as np
import pytest

from lscp.grounding import (
    Grounding,
    GroundingStore,
    build_grounding,
    cosine_similarity,
    drop_ratio,
    peak_positions,
    source_window_span,
)


def tokens_for(surprisals):
    return [chr(ord("a") + (i % 26)) for i in range(len(surprisals))]


def make_grounding(doc_id="doc", index=0, surprisals=(1.0, 2.0, 3.0), metadata=None):
    return build_grounding(doc_id, index, tokens_for(surprisals), list(surprisals), metadata)


class TestDropRatio:
    def test_flat_surprisal_is_zero(self):
        assert drop_ratio([2, 2, 2, 2, 2, 2]) == 0.0

    def test_half_drop(self):
        # thirds means 3.0 then 1.5 -> (3.0 - 1.5) / 3.0 = 0.5
        assert drop_ratio([3.0, 3.0, 9.9, 9.9, 1.5, 1.5]) == pytest.approx(0.5)

    def test_rising_surprisal_goes_negative(self):
        assert drop_ratio([1.0, 1.0, 0.0, 0.0, 2.0, 2.0]) == pytest.approx(-1.0)

    def test_zero_first_third_maps_to_zero(self):
        assert drop_ratio([0.0, 0.0, 1.0, 1.0, 2.0, 2.0]) == 0.0

    def test_never_exceeds_one(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            s = rng.exponential(1.0, size=int(rng.integers(3, 40)))
            assert drop_ratio(s) <= 1.0 + 1e-12

    def test_scale_invariance(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            s = rng.exponential(1.0, size=int(rng.integers(3, 30))) + 0.01
            for alpha in (0.1, 2.0, 17.0):
                assert drop_ratio(list(alpha * s)) == pytest.approx(drop_ratio(list(s)), rel=1e-9)

    def test_remainder_goes_to_middle_third(self):
        # n=5: first third is 1 token, last third is 1 token
        assert drop_ratio([4.0, 9.0, 9.0, 9.0, 1.0]) == pytest.approx((4.0 - 1.0) / 4.0)

    def test_too_short(self):
        with pytest.raises(ValueError, match="too short"):
            drop_ratio([1.0, 2.0])


class TestPeaks:
    def test_top_decile_by_rank(self):
        s = [0.1] * 18 + [5.0, 7.0]
        # ceil(0.1 * 20) = 2 peaks: the two large values
        assert peak_positions(s) == (18, 19)

    def test_small_passages_get_one_peak(self):
        assert peak_positions([1.0, 9.0, 2.0]) == (1,)

    def test_ties_break_by_index(self):
        assert peak_positions([3.0, 3.0, 3.0, 3.0]) == (0,)

    def test_sorted_ascending_and_in_range(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            s = rng.exponential(1.0, size=int(rng.integers(3, 60)))
            peaks = peak_positions(s)
            assert len(peaks) == math.ceil(0.1 * len(s))
            assert list(peaks) == sorted(peaks)
            assert all(0 <= p < len(s) for p in peaks)


class TestSourceWindow:
    def test_short_passage_uses_full_text(self):
        s = [1.0] * 30
        assert source_window_span(s, peak_positions(s), max_tokens=40) == (0, 30)

    def test_window_centers_on_top_peak_run(self):
        s = [0.1] * 30
        s[20] = 9.0
        s[21] = 8.5
        peaks = peak_positions(s)  # ceil(3) = 3 peaks: 20, 21 and one 0.1 tie at 0
        span = source_window_span(s, peaks, max_tokens=10)
        assert span == (15, 25)  # centered on run [20, 21]
        center = (20 + 21) // 2
        assert span[0] <= center < span[1]

    def test_window_clamps_at_edges(self):
        s = [0.1] * 30
        s[1] = 9.0
        span = source_window_span(s, peak_positions(s), max_tokens=10)
        assert span == (0, 10)


class TestBuildGrounding:
    def test_fields_assembled(self):
        g = build_grounding("d1", 3, ["ab", "cd", "ef", "gh"], [1.0, 2.0, 3.0, 4.0],
                            metadata={"journal": "x"})
        assert g.passage_ref == ("d1", 3)
        assert g.passage_text == "abcdefgh"
        assert g.surprisal == pytest.approx(2.5)
        assert g.source_window == g.passage_text  # short passage: full text
        assert g.metadata == {"journal": "x"}

    def test_source_window_is_contiguous_substring(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            n = int(rng.integers(3, 120))
            s = list(rng.exponential(1.0, size=n))
            g = build_grounding("d", 0, tokens_for(s), s, source_window_tokens=16)
            assert g.source_window in g.passage_text
            assert list(g.peak_positions) == sorted(g.peak_positions)

    def test_too_short_passage(self):
        with pytest.raises(ValueError, match="passage too short for grounding"):
            build_grounding("d", 0, ["a", "b"], [1.0, 2.0])

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="differ in length"):
            build_grounding("d", 0, ["a", "b", "c"], [1.0, 2.0])

    def test_dict_roundtrip(self):
        g = make_grounding(metadata={"author": "y"})
        assert Grounding.from_dict(g.to_dict()) == g


class TestCosine:
    def test_brute_force_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            a = rng.normal(size=8)
            b = rng.normal(size=8)
            expected = float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))
            assert cosine_similarity(a, b) == pytest.approx(expected, rel=1e-12)

    def test_zero_vector_is_zero_similarity(self):
        assert cosine_similarity([0.0, 0.0], [1.0, 2.0]) == 0.0

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="dimension mismatch"):
            cosine_similarity([1.0], [1.0, 2.0])


class TestGroundingStore:
    def test_roundtrip_across_reopen(self, tmp_path):
        path = tmp_path / "store.jsonl"
        store = GroundingStore(path)
        g = make_grounding(metadata={"journal": "nature"})
        record_id = store.add(g, embedding=[1.0, 0.0])
        reopened = GroundingStore(path)
        assert len(reopened) == 1
        record = reopened.get(record_id)
        assert record.grounding == g
        assert record.embedding == (1.0, 0.0)

    def test_idempotent_store_same_ref(self, tmp_path):
        path = tmp_path / "store.jsonl"
        store = GroundingStore(path)
        g = make_grounding()
        id1 = store.add(g, embedding=[1.0, 0.0])
        id2 = store.add(g, embedding=[1.0, 0.0])
        assert id1 == id2
        assert len(store) == 1
        assert len(path.read_text().strip().splitlines()) == 1

    def test_changed_content_same_ref_last_wins(self, tmp_path):
        store = GroundingStore(tmp_path / "store.jsonl")
        store.add(make_grounding(surprisals=(1.0, 1.0, 1.0)))
        store.add(make_grounding(surprisals=(2.0, 2.0, 2.0)))
        assert len(store) == 1
        assert store.get("doc#0").grounding.surprisal == pytest.approx(2.0)

    def test_store_size_tracks_flagged_count(self, tmp_path):
        store = GroundingStore(tmp_path / "store.jsonl")
        n_flagged = 39
        for i in range(n_flagged):
            store.add(make_grounding(index=i))
        assert len(store) == n_flagged

    def test_retrieve_self_match_first(self, tmp_path):
        store = GroundingStore(tmp_path / "store.jsonl")
        store.add(make_grounding(index=0), embedding=[1.0, 0.0, 0.0])
        store.add(make_grounding(index=1), embedding=[0.0, 1.0, 0.0])
        results = store.retrieve_similar([1.0, 0.0, 0.0], top_k=2)
        assert results[0][0] == pytest.approx(1.0)
        assert results[0][1].record_id == "doc#0"
        assert results[1][0] == pytest.approx(0.0)  # orthogonal

    def test_retrieve_matches_brute_force_cosine(self, tmp_path):
        store = GroundingStore(tmp_path / "store.jsonl")
        vectors = {0: [1.0, 0.2, 0.0], 1: [0.4, 1.0, 0.1], 2: [0.0, 0.3, 1.0]}
        for i, vec in vectors.items():
            store.add(make_grounding(index=i), embedding=vec)
        query = [0.3, 0.9, 0.2]
        scored = sorted(
            ((cosine_similarity(query, vec), f"doc#{i}") for i, vec in vectors.items()),
            key=lambda pair: (-pair[0], pair[1]),
        )
        results = store.retrieve_similar(query, top_k=3)
        assert [r.record_id for _s, r in results] == [rid for _s, rid in scored]
        assert results[0][1].record_id == "doc#1"

    def test_ties_break_by_record_id(self, tmp_path):
        store = GroundingStore(tmp_path / "store.jsonl")
        for i in (3, 1, 2):
            store.add(make_grounding(index=i), embedding=[1.0, 0.0])
        results = store.retrieve_similar([1.0, 0.0], top_k=3)
        assert [r.record_id for _s, r in results] == ["doc#1", "doc#2", "doc#3"]

    def test_top_k_at_least_store_size_returns_all(self, tmp_path):
        store = GroundingStore(tmp_path / "store.jsonl")
        for i in range(4):
            store.add(make_grounding(index=i), embedding=[1.0, float(i)])
        assert len(store.retrieve_similar([1.0, 1.0], top_k=10)) == 4

    def test_retrieve_dimension_mismatch(self, tmp_path):
        store = GroundingStore(tmp_path / "store.jsonl")
        store.add(make_grounding(), embedding=[1.0, 0.0])
        with pytest.raises(ValueError, match="dimension mismatch"):
            store.retrieve_similar([1.0, 0.0, 0.0], top_k=1)

    def test_retrieve_empty_store(self, tmp_path):
        store = GroundingStore(tmp_path / "store.jsonl")
        with pytest.raises(ValueError, match="empty"):
            store.retrieve_similar([1.0], top_k=1)

    def test_jsonl_schema_fields(self, tmp_path):
        import json

        path = tmp_path / "store.jsonl"
        GroundingStore(path).add(make_grounding(metadata={"journal": "x"}), embedding=[0.5, 0.5])
        record = json.loads(path.read_text().splitlines()[0])
        assert set(record) == {
            "id", "doc_id", "passage_index", "passage_text", "surprisal",
            "drop_ratio", "peaks", "source_window", "metadata", "embedding",
        }
