"""Second-stage candidate re-ranking from short yes/no verdicts.

The provider (a VLM behind a wire protocol, or a lookup-table mock) is
asked one fixed-template question per candidate and must answer with the
grammar parsed by `parse_response`.
"""

from __future__ import annotations

import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

from .embedding_index import Candidate
from .providers import ProviderError, RerankProvider

PROMPT_TEMPLATE = "Is a {query} visible in this image? Reply ONLY: yes/no <visibility 0-10>"

_TOKEN_RE = re.compile(r"\b(yes|no)\b", re.IGNORECASE)
_INT_RE = re.compile(r"\d+")  # digit runs only; signs and punctuation are separators


class ParseError(ValueError):
    """Response contains no yes/no token."""


@dataclass(frozen=True)
class RerankVerdict:
    detected: bool
    score: int  # 0..10

    def __post_init__(self):
        if not 0 <= self.score <= 10:
            raise ValueError(f"score {self.score} outside 0..10")

    @property
    def confidence(self) -> float:
        return self.score / 10


@dataclass(frozen=True)
class RerankedCandidate:
    candidate: Candidate
    verdict: RerankVerdict
    malformed: bool = False  # unparseable response or transport failure


def format_prompt(query_text: str) -> str:
    if not query_text:
        raise ValueError("empty query")
    return PROMPT_TEMPLATE.format(query=query_text)


def parse_response(text) -> RerankVerdict:
    """Parse a short verdict: yes/no token, then an optional integer 0..10.

    Lenient about surrounding text and punctuation. A missing or
    out-of-range integer defaults to 5 for "yes" and 0 for "no". Raises
    ParseError when no yes/no token occurs anywhere.
    """
    if isinstance(text, bytes):
        text = text.decode("utf-8", errors="replace")
    match = _TOKEN_RE.search(text)
    if match is None:
        raise ParseError(f"no yes/no token in {text[:80]!r}")
    detected = match.group(1).lower() == "yes"
    score = 5 if detected else 0
    int_match = _INT_RE.search(text, match.end())
    if int_match is not None:
        value = int(int_match.group())
        if 0 <= value <= 10:
            score = value
    return RerankVerdict(detected=detected, score=score)


def _verdict_for(provider: RerankProvider, cand: Candidate, query_text: str):
    try:
        raw = provider.score(str(cand.frame_id), query_text)
    except ProviderError:
        return RerankVerdict(False, 0), True, True
    try:
        return parse_response(raw), False, False
    except ParseError:
        return RerankVerdict(False, 0), True, False


def rerank(
    cands: list[Candidate],
    provider: RerankProvider,
    query_text: str,
    max_workers: int = 1,
) -> list[RerankedCandidate]:
    """Score every candidate once, keep positives sorted by confidence.

    Ties break on the stage-1 score, then the frame id. When nothing is
    detected, the single highest-confidence candidate is returned as a
    fallback. Transport failures score (no, 0) and are flagged; an episode
    where every call failed raises ProviderError.
    """
    if not cands:
        raise ValueError("no candidates to re-rank")
    format_prompt(query_text)  # validates the query once up front

    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            outcomes = list(
                pool.map(lambda c: _verdict_for(provider, c, query_text), cands)
            )
    else:
        outcomes = [_verdict_for(provider, c, query_text) for c in cands]

    scored = [
        RerankedCandidate(cand, verdict, malformed)
        for cand, (verdict, malformed, _) in zip(cands, outcomes)
    ]
    if all(failed for _, _, failed in outcomes):
        raise ProviderError("provider unavailable")

    def order(rc: RerankedCandidate):
        return (-rc.verdict.confidence, -rc.candidate.score, rc.candidate.frame_id)

    detected = sorted((rc for rc in scored if rc.verdict.detected), key=order)
    if detected:
        return detected
    return [min(scored, key=order)]
