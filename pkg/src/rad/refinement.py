"""LLM refinement of retrieved passages into per-disease guidelines."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import time
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

from .corpus import Document

logger = logging.getLogger(__name__)

PLACEHOLDERS = ("{disease_icd_name}", "{topk}", "{retrieve_passages_str}")

DEFAULT_TEMPLATE = """\
Your task is to help filter and summarize the relevant information from multiple sets of retrieved external knowledge (from 4 different sources) to support my multi-modal disease classification model in diagnosing the specific disease associated with the provided ICD disease description.
For the given disease, identify the critical symptoms, lab indicators, and radiological features that are most strongly associated with the disease diagnosis. Discard any information that is unrelated or irrelevant to disease classification. You do not need to focus on treatment options, but instead, concentrate on factors that would help in diagnosing the disease.
You will be provided with a set of documents (containing {topk} retrieved documents, each approximately 2000 characters), containing a range of medical information. Your job is to:

    Review the retrieved documents and determine which information is directly relevant to diagnosing the disease, based on its ICD code and description.
    Eliminate any information that is unrelated to diagnosis or classification, such as treatment options, management strategies, or irrelevant clinical details.
    Focus on identifying key diagnostic features, including symptoms, laboratory test results, and imaging findings that help confirm the presence of the disease.
    Evaluate the importance of each retrieved documents: Some documents may provide more critical or reliable information than others. Prioritize information that is most relevant and useful for diagnosing the disease, even if it means excluding less relevant details from certain documents.
    Summarize the most relevant content into a single cohesive summary of approximately 2000 characters (or 500 words). The summary should include the essential diagnostic criteria, including lab values, clinical features, and radiological findings.

The summary should emphasize:

    A brief explanation or description of the disease, including any variations or related conditions under the same ICD code.
    Important lab tests and values (e.g., white blood cell count, C-reactive protein).
    Key radiological or clinical findings associated with the disease's presence (e.g., lung opacity, pleural effusion).
    Any diagnostic symptoms or relevant clinical features.
    Discard information that is not useful for diagnosing the disease.

Please ensure that the summary is concise and directly related to diagnosis, omitting irrelevant details.

Disease description (ICD name): {disease_icd_name}

Retrieved passages: {retrieve_passages_str}
"""


class ConfigurationError(ValueError):
    pass


class LLMError(RuntimeError):
    """Transient failure talking to the language model."""


@dataclass
class DiseaseGuideline:
    disease_id: str
    name: str
    text: str
    indicators: list[str] = field(default_factory=list)
    source_doc_ids: list[str] = field(default_factory=list)
    verified: bool = False
    prompt_hash: str = ""

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "DiseaseGuideline":
        return cls(**{f.name: data[f.name] for f in dataclasses.fields(cls) if f.name in data})


@dataclass
class RefinementRequest:
    disease_id: str
    disease_name: str
    documents: list[Document]
    template: str = DEFAULT_TEMPLATE
    target_length: int = 2000

    def __post_init__(self):
        if not self.documents:
            raise ValueError(f"no documents to refine for {self.disease_id!r}")


def load_template(path: str | Path) -> str:
    return Path(path).read_text(encoding="utf-8")


def format_passages(texts: Sequence[str]) -> str:
    return "\n".join(f"[{i}] {text}" for i, text in enumerate(texts, start=1))


def build_prompt(request: RefinementRequest) -> str:
    template = request.template
    for placeholder in PLACEHOLDERS:
        if placeholder not in template:
            raise ConfigurationError(f"template is missing placeholder {placeholder}")
    # str.format would choke on braces inside passages; substitute literally,
    # passages last so their content is never rescanned
    return (
        template.replace("{disease_icd_name}", request.disease_name)
        .replace("{topk}", str(len(request.documents)))
        .replace("{retrieve_passages_str}", format_passages([d.text for d in request.documents]))
    )


def prompt_hash(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


class LLMClient:
    name = "abstract"

    def complete(self, prompt: str) -> str:
        raise NotImplementedError


class EchoClient(LLMClient):
    """Offline stand-in that echoes its input.

    ``mode="passages"`` echoes only the retrieved-passages block, which
    gives each disease a distinct guideline without a model.
    """

    name = "echo"
    marker = "Retrieved passages: "

    def __init__(self, mode: str = "prompt"):
        if mode not in ("prompt", "passages"):
            raise ValueError(f"unknown echo mode {mode!r}")
        self.mode = mode

    def complete(self, prompt: str) -> str:
        if self.mode == "passages" and self.marker in prompt:
            return prompt.split(self.marker, 1)[1].strip()
        return prompt


class TranscriptClient(LLMClient):
    """Replays recorded responses keyed by prompt hash."""

    name = "transcript"

    def __init__(self, responses: dict[str, str]):
        self.responses = dict(responses)

    @classmethod
    def from_jsonl(cls, path: str | Path) -> "TranscriptClient":
        responses = {}
        with Path(path).open(encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    rec = json.loads(line)
                    responses[rec["prompt_hash"]] = rec["response"]
        return cls(responses)

    def complete(self, prompt: str) -> str:
        key = prompt_hash(prompt)
        if key not in self.responses:
            raise KeyError(f"no recorded response for prompt hash {key}")
        return self.responses[key]


class HTTPClient(LLMClient):
    """Minimal JSON-over-HTTP client.

    Sends ``{"prompt": ..., "max_tokens": ...}`` and accepts either a
    ``{"text": ...}`` body or an OpenAI-style ``choices`` list.
    """

    name = "http"

    def __init__(self, endpoint: str | None = None, api_key: str | None = None, timeout: float = 120.0,
                 max_tokens: int = 1024):
        self.endpoint = endpoint or os.environ.get("RAD_LLM_ENDPOINT")
        self.api_key = api_key or os.environ.get("RAD_LLM_API_KEY")
        if not self.endpoint:
            raise ConfigurationError("RAD_LLM_ENDPOINT is not set")
        self.timeout = timeout
        self.max_tokens = max_tokens

    def complete(self, prompt: str) -> str:
        body = json.dumps({"prompt": prompt, "max_tokens": self.max_tokens}).encode("utf-8")
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        req = urllib.request.Request(self.endpoint, data=body, headers=headers, method="POST")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                payload = json.loads(resp.read().decode("utf-8"))
        except (urllib.error.URLError, TimeoutError, ConnectionError) as exc:
            raise LLMError(str(exc)) from exc
        if "text" in payload:
            return payload["text"]
        try:
            choice = payload["choices"][0]
            return choice["message"]["content"] if "message" in choice else choice["text"]
        except (KeyError, IndexError, TypeError) as exc:
            raise LLMError(f"unrecognised response body: {payload!r:.200}") from exc


class ResponseCache:
    """One JSON file per prompt hash."""

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)

    def _path(self, key: str) -> Path:
        return self.directory / f"{key}.json"

    def get(self, key: str) -> str | None:
        path = self._path(key)
        if not path.exists():
            return None
        try:
            record = json.loads(path.read_text(encoding="utf-8"))
            if record.get("prompt_hash") != key or not isinstance(record.get("response"), str):
                raise ValueError("mismatched cache record")
        except (ValueError, OSError) as exc:
            logger.warning("ignoring corrupt cache entry %s: %s", path, exc)
            return None
        return record["response"]

    def put(self, key: str, response: str) -> None:
        self.directory.mkdir(parents=True, exist_ok=True)
        tmp = self._path(key).with_suffix(".tmp")
        tmp.write_text(json.dumps({"prompt_hash": key, "response": response}), encoding="utf-8")
        tmp.replace(self._path(key))


RETRYABLE = (LLMError, TimeoutError, ConnectionError)


def refine(
    request: RefinementRequest,
    client: LLMClient,
    cache: ResponseCache | None = None,
    max_retries: int = 3,
    backoff: float = 1.0,
    sleep: Callable[[float], None] = time.sleep,
) -> DiseaseGuideline:
    prompt = build_prompt(request)
    key = prompt_hash(prompt)
    response = cache.get(key) if cache is not None else None
    if response is None:
        for attempt in range(max_retries + 1):
            try:
                response = client.complete(prompt)
                break
            except RETRYABLE as exc:
                if attempt == max_retries:
                    raise LLMError(f"refinement of {request.disease_id!r} failed after "
                                   f"{max_retries + 1} attempts: {exc}") from exc
                delay = backoff * 2**attempt
                logger.warning("LLM call failed (%s); retrying in %.1fs", exc, delay)
                sleep(delay)
        if cache is not None:
            cache.put(key, response)
    return DiseaseGuideline(
        disease_id=request.disease_id,
        name=request.disease_name,
        text=response,
        indicators=[],
        source_doc_ids=[d.id for d in request.documents],
        verified=False,
        prompt_hash=key,
    )


def refine_many(requests: Sequence[RefinementRequest], client: LLMClient, cache: ResponseCache | None = None,
                max_workers: int = 4, **kwargs) -> list[DiseaseGuideline]:
    """Refine several diseases with bounded parallelism; output keeps input order."""
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        return list(pool.map(lambda r: refine(r, client, cache, **kwargs), requests))


def normalize_indicator(phrase: str) -> str:
    return " ".join(phrase.split()).lower()


def verify(guideline: DiseaseGuideline, indicators: Sequence[str]) -> DiseaseGuideline:
    """Mark a guideline as manually checked and attach its indicator list."""
    if not guideline.text.strip():
        raise ValueError(f"guideline {guideline.disease_id!r} has empty text")
    cleaned: list[str] = []
    for phrase in indicators:
        norm = normalize_indicator(phrase)
        if not norm:
            raise ValueError("indicator phrases must be non-empty")
        if norm not in cleaned:
            cleaned.append(norm)
    return dataclasses.replace(guideline, indicators=cleaned, verified=True)


class GuidelineStore:
    """Directory holding one ``<disease_id>.json`` file per disease."""

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)

    def path(self, disease_id: str) -> Path:
        return self.directory / f"{disease_id}.json"

    def save(self, guideline: DiseaseGuideline) -> Path:
        self.directory.mkdir(parents=True, exist_ok=True)
        path = self.path(guideline.disease_id)
        path.write_text(json.dumps(guideline.to_dict(), indent=2, ensure_ascii=False), encoding="utf-8")
        return path

    def load(self, disease_id: str) -> DiseaseGuideline:
        path = self.path(disease_id)
        if not path.exists():
            raise KeyError(f"no guideline stored for disease {disease_id!r}")
        return DiseaseGuideline.from_dict(json.loads(path.read_text(encoding="utf-8")))

    def load_many(self, disease_ids: Sequence[str]) -> list[DiseaseGuideline]:
        return [self.load(d) for d in disease_ids]

    def __contains__(self, disease_id: str) -> bool:
        return self.path(disease_id).exists()
