"""Deterministic offline stand-ins for a reasoning model, a judge and a compressor.

The simulated target writes reasoning traces by mixing two phrase banks: a
recall bank (confident, retrieval phrasing) and an inference bank (hesitant,
branching phrasing). ``mix`` is the probability that a body sentence is drawn
from the inference bank, so familiar texts get small ``mix`` and unfamiliar
texts large ``mix``. Independently of ``mix`` every trace also gets a generic
opening, a few sentences quoting the input, and filler interjections, which
play the role of model-specific reasoning style.

All randomness is derived from SHA-256 of the inputs, so outputs are stable
across processes and platforms.
"""

from __future__ import annotations

import hashlib
import random
import re
from dataclasses import dataclass
from typing import Callable, Mapping

from .dataset import QuerySequence
from .providers import PromptTemplate, ProviderConfig, ReasoningTrace, split_sentences

RECALL_BANK = (
    "I recognize this passage immediately.",
    "This is a well-known line and I remember exactly how it continues.",
    "I have definitely seen this text before, it comes from a famous source.",
    "From memory the original wording carries on in a fixed way.",
    "The source is familiar and the phrasing matches what I recall.",
    "I can recall the exact words that follow in the original.",
    "This is a direct quotation that I know by heart.",
    "The continuation is certain because the text is memorable.",
    "I know this sentence from the original work.",
    "Recalling the text, the following word is clear to me.",
    "The passage is familiar, so the answer comes straight from memory.",
    "I am confident about this because I remember the source.",
)

INFERENCE_BANK = (
    "Hmm, I am not sure I have seen this exact text.",
    "Wait, there are several plausible ways this could continue.",
    "Maybe the next word is a noun, or perhaps it is a verb.",
    "Let me consider the grammar to guess what might come next.",
    "It could go either way, so I need to reason from the context.",
    "I do not recognize this passage, so I will infer a likely word.",
    "Perhaps the author intends something different here.",
    "Without more context I can only estimate the continuation.",
    "Actually, another option would also fit the sentence structure.",
    "So I should weigh a few candidate words against each other.",
    "The structure suggests a preposition, but I am uncertain.",
    "Alternatively, the sentence might end at this point.",
)

OPENINGS = (
    "The user wants me to predict the next word after a given text.",
    "I need to figure out which word follows the provided text.",
    "The task is to check the text and give the word that comes next.",
)

FRAGMENT_TEMPLATES = (
    "The text reads '{frag}'.",
    "The given passage ends with '{frag}'.",
    "Looking at the words '{frag}' again.",
)

CLOSINGS = (
    "So the next word is probably '{word}'.",
    "My answer for the next word is '{word}'.",
    "I will go with '{word}' as the next word.",
)

FILLERS = ("Hmm, ", "Okay, so ", "Wait, ", "Well, ", "Alright, ")

STYLE_MIX = {"recall_like": 0.0, "inference_like": 1.0}

_PUNCT = re.compile(r"[.!?'\"]")


def _rng(*parts: object) -> random.Random:
    digest = hashlib.sha256("\x1f".join(map(str, parts)).encode("utf-8")).digest()
    return random.Random(int.from_bytes(digest[:8], "big"))


def _fragment(words: list[str], rng: random.Random, size: int = 6) -> str:
    if len(words) <= size:
        chunk = words
    else:
        start = rng.randrange(len(words) - size + 1)
        chunk = words[start:start + size]
    return _PUNCT.sub("", " ".join(chunk)).strip() or "the text"


def generate_trace_text(
    text: str,
    mix: float,
    rng: random.Random,
    n_body: int = 8,
    n_fragments: int = 2,
    filler_max: int = 3,
) -> str:
    if not 0.0 <= mix <= 1.0:
        raise ValueError("mix must lie in [0, 1]")
    words = text.split() or ["text"]
    opening = [rng.choice(OPENINGS),
               rng.choice(FRAGMENT_TEMPLATES).format(frag=_fragment(words, rng))]
    body = []
    for _ in range(n_body):
        bank = INFERENCE_BANK if rng.random() < mix else RECALL_BANK
        body.append(rng.choice(bank))
    for _ in range(n_fragments):
        pos = rng.randrange(len(body) + 1)
        body.insert(pos, rng.choice(FRAGMENT_TEMPLATES).format(frag=_fragment(words, rng)))
    sentences = opening + body
    for _ in range(rng.randint(0, filler_max)):
        i = rng.randrange(1, len(sentences))
        s = sentences[i]
        sentences[i] = rng.choice(FILLERS) + s[0].lower() + s[1:]
    word = _PUNCT.sub("", rng.choice(words)) or "the"
    sentences.append(rng.choice(CLOSINGS).format(word=word))
    return " ".join(sentences)


def simulate_trace(
    sequence: QuerySequence,
    mix: float | None = None,
    seed: int = 0,
    style: str | None = None,
    sample_index: int = 0,
    **kwargs,
) -> ReasoningTrace:
    """Generate one simulated trace for ``sequence``.

    ``style`` names a pure mode (``recall_like`` is mix 0, ``inference_like``
    is mix 1); an explicit ``mix`` takes precedence over it.
    """
    if mix is None:
        if style not in STYLE_MIX:
            raise ValueError("give either mix or a style in {recall_like, inference_like}")
        mix = STYLE_MIX[style]
    rng = _rng(seed, sequence.id, sample_index)
    text = generate_trace_text(sequence.text, mix, rng, **kwargs)
    return ReasoningTrace(sequence.id, text, sample_index, f"simulator/mix={mix:g}",
                          retrieved_at="1970-01-01T00:00:00+00:00")


def _chat_response(content: str, reasoning: str | None = None) -> dict:
    message = {"role": "assistant", "content": content}
    if reasoning is not None:
        message["reasoning_content"] = reasoning
    return {"choices": [{"index": 0, "message": message, "finish_reason": "stop"}]}


def _last_user(body: dict) -> str:
    for m in reversed(body.get("messages", [])):
        if m.get("role") == "user":
            return m.get("content", "")
    return ""


class SimulatedLRM:
    """A reasoning model whose familiarity with each text is given up front.

    ``familiarity`` maps an input text to its ``mix`` (or is a callable doing
    so); texts not found use ``default_mix``. When a prompt template is given
    the input text is recovered from the prompt by stripping the template's
    fixed prefix and suffix.
    """

    is_network = False

    def __init__(
        self,
        familiarity: Mapping[str, float] | Callable[[str], float | None] = (),
        default_mix: float = 0.85,
        seed: int = 0,
        template: PromptTemplate | None = None,
        n_body: int = 8,
        n_fragments: int = 2,
        filler_max: int = 3,
    ):
        self._lookup = familiarity if callable(familiarity) else dict(familiarity).get
        self.default_mix = default_mix
        self.seed = seed
        self.template = template
        self.trace_kwargs = dict(n_body=n_body, n_fragments=n_fragments, filler_max=filler_max)
        self.calls = 0

    def input_text(self, prompt: str) -> str:
        if self.template is not None:
            prefix, suffix = self.template.split()
            if prompt.startswith(prefix) and prompt.endswith(suffix):
                return prompt[len(prefix):len(prompt) - len(suffix)]
        return prompt

    def mix_for(self, text: str) -> float:
        mix = self._lookup(text)
        return self.default_mix if mix is None else mix

    def __call__(self, config: ProviderConfig, body: dict, sample_index: int) -> dict:
        self.calls += 1
        text = self.input_text(_last_user(body))
        rng = _rng(self.seed, config.model_id, body.get("temperature"), text, sample_index)
        trace = generate_trace_text(text, self.mix_for(text), rng, **self.trace_kwargs)
        answer = split_sentences(trace)[-1]
        return _chat_response(answer, trace)


CONFIDENT_CUES = ("recognize", "remember", "recall", "certain", "confident",
                  "familiar", "know", "memory", "definitely")
HESITANT_CUES = ("not sure", "maybe", "perhaps", "could", "guess", "hmm", "wait",
                 "uncertain", "estimate", "alternatively", "option", "infer")


class SimulatedJudge:
    """Rates certainty on 1-10 by counting surface cue words, plus noise."""

    is_network = False

    def __init__(self, seed: int = 0, noise_sd: float = 1.5, reply_format: str = "Certainty: {n}/10"):
        self.seed = seed
        self.noise_sd = noise_sd
        self.reply_format = reply_format
        self.calls = 0

    def rate(self, trace_text: str) -> int:
        low = trace_text.lower()
        conf = sum(low.count(c) for c in CONFIDENT_CUES)
        hes = sum(low.count(c) for c in HESITANT_CUES)
        noise = _rng(self.seed, trace_text).gauss(0.0, self.noise_sd)
        return max(1, min(10, round(5.5 + 0.4 * (conf - hes) + noise)))

    def __call__(self, config: ProviderConfig, body: dict, sample_index: int) -> dict:
        self.calls += 1
        prompt = _last_user(body)
        trace = prompt.split("Reasoning trace:", 1)[-1]
        return _chat_response(self.reply_format.format(n=self.rate(trace)))


_SENTENCE_RANGE = re.compile(r"in (\d+)\s*[-~]\s*(\d+) sentences")


class SimulatedCompressor:
    """Summarizes by keeping the first N sentences, N = upper end of the requested range."""

    is_network = False

    def __init__(self):
        self.calls = 0

    def __call__(self, config: ProviderConfig, body: dict, sample_index: int) -> dict:
        self.calls += 1
        prompt = _last_user(body)
        m = _SENTENCE_RANGE.search(prompt)
        limit = int(m.group(2)) if m else 3
        trace = prompt.split("Reasoning path:\n", 1)[-1]
        return _chat_response(" ".join(split_sentences(trace)[:limit]))


@dataclass(frozen=True)
class SimulationSettings:
    seed: int = 0
    mix_member: float = 0.15
    mix_non_member: float = 0.85
    mix_recall_anchor: float = 0.0
    mix_synthetic_anchor: float = 1.0
    n_body: int = 8
    n_fragments: int = 2
    filler_max: int = 3
    judge_noise_sd: float = 1.5
