import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from viewmem.embedding_index import Candidate
from viewmem.providers import MockRerankProvider, ProviderError
from viewmem.rerank import (
    ParseError,
    RerankVerdict,
    format_prompt,
    parse_response,
    rerank,
)


class TestFormatPrompt:
    def test_template(self):
        assert (
            format_prompt("red mug")
            == "Is a red mug visible in this image? Reply ONLY: yes/no <visibility 0-10>"
        )

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            format_prompt("")

    def test_bit_stable(self):
        a = format_prompt("green plant").encode()
        b = format_prompt("green plant").encode()
        assert a == b


# (input, detected, score) — the documented grammar table
GRAMMAR_TABLE = [
    ("yes 8", True, 8),
    ("no 2", False, 2),
    ("YES, 10.", True, 10),
    ("Yes 0", True, 0),
    ("no 0", False, 0),
    ("yes", True, 5),
    ("no", False, 0),
    ("  yes   7 ", True, 7),
    ("YES\t3", True, 3),
    ("No; 4", False, 4),
    ("yes: 10", True, 10),
    ("yes.9", True, 9),
    ("Answer: yes 6", True, 6),
    ("I think no 1", False, 1),
    ("yes 10 definitely", True, 10),
    ("yes 11", True, 5),       # out of range -> default
    ("no 99", False, 0),       # out of range -> default
    ("yes -3", True, 3),       # "-" is a separator, not a sign
    ("NO-7", False, 7),
    ("yes (8)", True, 8),
    ("yes score=4", True, 4),
    ("YES 08", True, 8),
    ("no thanks", False, 0),
    ("yes!", True, 5),
    ("Yes, visibility 9 out of 10", True, 9),
    ("nope yes 3", True, 3),   # "nope" is not a token; first token is yes
    ("noyes", None, None),     # glued: no word boundary token
    ("maybe", None, None),
    ("", None, None),
    (".. 8 ..", None, None),
    ("YES 2.718", True, 2),
    ("no\n5", False, 5),
]


class TestParseResponse:
    @pytest.mark.parametrize("text,detected,score", GRAMMAR_TABLE)
    def test_grammar_table(self, text, detected, score):
        if detected is None:
            with pytest.raises(ParseError):
                parse_response(text)
        else:
            verdict = parse_response(text)
            assert verdict.detected is detected
            assert verdict.score == score
            assert verdict.confidence == pytest.approx(score / 10)

    def test_bytes_accepted(self):
        assert parse_response(b"yes 4").score == 4
        assert parse_response(b"\xff\xfe yes 4").score == 4

    def test_confidence_exact(self):
        for s in range(11):
            assert RerankVerdict(True, s).confidence == s / 10

    @settings(max_examples=300, deadline=None)
    @given(st.binary(max_size=40))
    def test_never_crashes_on_bytes(self, blob):
        try:
            verdict = parse_response(blob)
            assert 0 <= verdict.score <= 10
        except ParseError:
            pass


class CannedProvider:
    """Scripted raw responses keyed by image id; ProviderError on '!'."""

    def __init__(self, responses: dict):
        self.responses = responses
        self.calls = 0

    def score(self, image_id: str, query: str) -> str:
        self.calls += 1
        raw = self.responses[image_id]
        if raw == "!":
            raise ProviderError("scripted transport failure")
        return raw


def cands(*pairs):
    return [Candidate(fid, score) for fid, score in pairs]


class TestRerank:
    def test_detected_sorted_negatives_dropped(self):
        provider = CannedProvider({"1": "yes 8", "2": "no 9", "3": "yes 3"})
        out = rerank(cands((1, 0.9), (2, 0.8), (3, 0.7)), provider, "mug")
        assert [rc.candidate.frame_id for rc in out] == [1, 3]
        assert [rc.verdict.score for rc in out] == [8, 3]

    def test_all_negative_falls_back_to_highest_confidence(self):
        provider = CannedProvider({"1": "no 2", "2": "no 7", "3": "no 4"})
        out = rerank(cands((1, 0.9), (2, 0.8), (3, 0.7)), provider, "mug")
        assert len(out) == 1
        assert out[0].candidate.frame_id == 2
        assert not out[0].verdict.detected

    def test_single_candidate(self):
        provider = CannedProvider({"5": "yes 10"})
        out = rerank(cands((5, 0.5)), provider, "mug")
        assert [rc.candidate.frame_id for rc in out] == [5]

    def test_one_call_per_candidate(self):
        provider = CannedProvider({str(i): "yes 5" for i in range(7)})
        rerank(cands(*[(i, 1.0 - i * 0.1) for i in range(7)]), provider, "mug")
        assert provider.calls == 7

    def test_tie_breaks_stage1_then_id(self):
        provider = CannedProvider({"1": "yes 6", "2": "yes 6", "3": "yes 6"})
        out = rerank(cands((2, 0.5), (1, 0.9), (3, 0.9)), provider, "mug")
        # same confidence: higher stage-1 first, then smaller id
        assert [rc.candidate.frame_id for rc in out] == [1, 3, 2]

    def test_yes_zero_kept_last(self):
        provider = CannedProvider({"1": "yes 0", "2": "yes 4"})
        out = rerank(cands((1, 0.9), (2, 0.8)), provider, "mug")
        assert [rc.candidate.frame_id for rc in out] == [2, 1]

    def test_transport_failure_flagged(self):
        provider = CannedProvider({"1": "!", "2": "yes 4"})
        out = rerank(cands((1, 0.9), (2, 0.8)), provider, "mug")
        assert [rc.candidate.frame_id for rc in out] == [2]

    def test_malformed_counts_as_rejection(self):
        provider = CannedProvider({"1": "garbled &&&", "2": "yes 4"})
        out = rerank(cands((1, 0.9), (2, 0.8)), provider, "mug")
        assert [rc.candidate.frame_id for rc in out] == [2]

    def test_all_failures_raise_provider_unavailable(self):
        provider = CannedProvider({"1": "!", "2": "!"})
        with pytest.raises(ProviderError, match="unavailable"):
            rerank(cands((1, 0.9), (2, 0.8)), provider, "mug")

    def test_all_malformed_is_fallback_not_error(self):
        provider = CannedProvider({"1": "???", "2": "###"})
        out = rerank(cands((1, 0.9), (2, 0.8)), provider, "mug")
        assert len(out) == 1
        assert out[0].malformed

    def test_output_subset_confidence_non_increasing(self):
        rng = np.random.default_rng(0)
        responses = {
            str(i): f"{'yes' if rng.integers(2) else 'no'} {rng.integers(11)}"
            for i in range(20)
        }
        provider = CannedProvider(responses)
        inputs = cands(*[(i, float(rng.random())) for i in range(20)])
        out = rerank(inputs, provider, "mug")
        in_ids = {c.frame_id for c in inputs}
        assert all(rc.candidate.frame_id in in_ids for rc in out)
        confs = [rc.verdict.confidence for rc in out]
        assert confs == sorted(confs, reverse=True)

    def test_concurrent_merge_deterministic(self):
        responses = {str(i): f"yes {i % 11}" for i in range(16)}
        inputs = cands(*[(i, 1.0 - i * 0.01) for i in range(16)])
        seq = rerank(inputs, CannedProvider(responses), "mug", max_workers=1)
        par = rerank(inputs, CannedProvider(responses), "mug", max_workers=8)
        assert [(rc.candidate.frame_id, rc.verdict.score) for rc in seq] == [
            (rc.candidate.frame_id, rc.verdict.score) for rc in par
        ]

    def test_empty_candidates_rejected(self):
        with pytest.raises(ValueError):
            rerank([], CannedProvider({}), "mug")


class TestMockRerankProvider:
    def test_lookup_and_missing_entry(self, tmp_path):
        table = tmp_path / "table.json"
        table.write_text(json.dumps([{"image_id": "3", "query": "mug", "raw": "yes 9"}]))
        provider = MockRerankProvider(table)
        assert provider.score("3", "mug") == "yes 9"
        with pytest.raises(ProviderError):
            provider.score("4", "mug")
