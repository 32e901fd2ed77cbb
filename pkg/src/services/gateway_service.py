"""
    inference gateway

    renders inference prompts and runs batch inference against any
    chat-completion HTTP endpoint. Completed predictions are appended to a
    journal as they arrive, so an interrupted run resumes without re-querying;
    once every item is answered the file is rewritten in benchmark order.

"""

import json
import logging
import os
import tempfile
import threading
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import requests
import yaml
from tqdm import tqdm

from src.database.models import NlSqlExample, ScoredExample
from src.errors import AuthMissing, EndpointUnreachable, FormatError, SchemaMismatch
from src.services.corpus_service import SchemaDescription
from src.services.prompts import (
    DIRECT_SYSTEM_PROMPT,
    COT_SYSTEM_PROMPT,
    SELF_CORRECTION_DIRECTIVE,
    STEP_OUTLINE,
    ChatMessage,
    user_content,
    with_directives,
)

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

RETRYABLE = {429, 500, 502, 503, 504}
PROMPT_MODES = ("direct", "cot", "trace")
# upper bound on a server-requested Retry-After wait
MAX_RETRY_AFTER = 60.0


@dataclass(frozen=True)
class EndpointConfig:
    """
    chat-completion endpoint settings

        base_url: e.g. http://localhost:8000/v1 ; requests go to <base_url>/chat/completions
        token_env: name of the environment variable holding the bearer token (None for no auth)
        backoff_base, backoff_multiplier: wait before retry n is base * multiplier ** n seconds
    """
    base_url: str
    model: str
    token_env: Optional[str] = None
    timeout: float = 60.0
    max_retries: int = 4
    backoff_base: float = 1.0
    backoff_multiplier: float = 2.0
    max_concurrent: int = 4
    temperature: float = 0.0
    max_tokens: int = 1024

    def __post_init__(self):
        if not self.base_url:
            raise ValueError("base_url must not be empty")
        if not self.model:
            raise ValueError("model must not be empty")
        if self.max_concurrent < 1:
            raise ValueError("max_concurrent must be at least 1")
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")
        if self.max_retries < 0 or self.backoff_base < 0 or self.backoff_multiplier < 1:
            raise ValueError("retry settings out of range")

    @classmethod
    def from_mapping(cls, data: Dict[str, Any]) -> "EndpointConfig":
        known = {name for name in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown endpoint settings: {', '.join(sorted(unknown))}")
        return cls(**data)

    @classmethod
    def from_yaml(cls, path: PathLike) -> "EndpointConfig":
        """
        Settings from a YAML file, either top-level or under an "endpoint:" key

        Raises:
            FormatError: unreadable file, invalid YAML or not a mapping
            ValueError: unknown or out-of-range settings
        """
        try:
            with open(path, "r", encoding="utf-8") as handle:
                data = yaml.safe_load(handle) or {}
        except (OSError, yaml.YAMLError) as error:
            raise FormatError(f"{path}: cannot read endpoint settings ({error})") from error
        if not isinstance(data, dict):
            raise FormatError(f"{path}: endpoint settings must be a mapping")
        section = data.get("endpoint", data)
        if not isinstance(section, dict):
            raise FormatError(f"{path}: endpoint: must be a mapping")
        return cls.from_mapping(section)

    def token(self) -> Optional[str]:
        """
        Raises:
            AuthMissing: token_env is set but the variable is empty or unset
        """
        if not self.token_env:
            return None
        value = os.environ.get(self.token_env, "").strip()
        if not value:
            raise AuthMissing(f"environment variable {self.token_env} is not set")
        return value


@dataclass(frozen=True)
class PromptOptions:
    mode: str = "cot"
    self_correction: bool = False
    step_outline: bool = False

    def __post_init__(self):
        if self.mode not in PROMPT_MODES:
            raise ValueError(f"prompt mode must be one of {', '.join(PROMPT_MODES)}")


def render_inference_prompt(example: NlSqlExample,
                            description: SchemaDescription,
                            mode: str = "cot",
                            self_correction: bool = False,
                            step_outline: bool = False) -> List[ChatMessage]:
    """
    System and user messages for one inference request

        direct: the model must answer with a fenced query only
        cot / trace: reasoning first, then the fenced query
    """
    if description.db_id != example.db_id:
        raise SchemaMismatch(f"description for {description.db_id!r} used with {example.db_id!r}")
    # constructing the options validates the mode
    PromptOptions(mode=mode)

    system = DIRECT_SYSTEM_PROMPT if mode == "direct" else COT_SYSTEM_PROMPT
    system = with_directives(
        system,
        STEP_OUTLINE if step_outline and mode != "direct" else "",
        SELF_CORRECTION_DIRECTIVE if self_correction else "",
    )
    return [
        ChatMessage("system", system),
        ChatMessage("user", user_content(description.text, example.question)),
    ]


@dataclass(frozen=True)
class Prediction:
    """
    one model answer

        key: benchmark item key (db_id#source_index)
        raw_output: assistant text; "" when the request failed
        error: transport failure message, None on success
    """
    key: str
    raw_output: str
    latency_ms: int = 0
    retries: int = 0
    error: Optional[str] = None

    def to_record(self) -> Dict[str, Any]:
        record = {"key": self.key, "raw_output": self.raw_output,
                  "latency_ms": self.latency_ms, "retries": self.retries}
        if self.error is not None:
            record["error"] = self.error
        return record

    @classmethod
    def from_record(cls, record: Dict[str, Any]) -> "Prediction":
        return cls(
            key=str(record["key"]),
            raw_output=record.get("raw_output") or "",
            latency_ms=int(record.get("latency_ms", 0)),
            retries=int(record.get("retries", 0)),
            error=record.get("error"),
        )


@dataclass
class PredictionSet:
    predictions: List[Prediction] = field(default_factory=list)
    metadata: Dict[str, Any] = field(default_factory=dict)

    def by_key(self) -> Dict[str, Prediction]:
        return {p.key: p for p in self.predictions}

    def raw_outputs(self) -> Dict[str, str]:
        return {p.key: p.raw_output for p in self.predictions}

    def __len__(self) -> int:
        return len(self.predictions)


def metadata_path(path: PathLike) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".meta.json")


def read_predictions(path: PathLike, tolerant: bool = False) -> PredictionSet:
    """
    Read a prediction file; later lines for the same key replace earlier ones

    tolerant=True drops a malformed final line (a write cut short by an interrupt)

    Raises:
        FormatError: a malformed line (any line when tolerant is False)
    """
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    latest: Dict[str, Prediction] = {}
    for index, line in enumerate(lines):
        if not line.strip():
            continue
        try:
            prediction = Prediction.from_record(json.loads(line))
        except (ValueError, KeyError, TypeError) as error:
            if tolerant and index == len(lines) - 1:
                logger.warning("%s: ignoring truncated last line", path)
                continue
            raise FormatError(f"{path}: bad prediction record ({error})", index) from error
        # pop first so the key moves to its latest position in the dict
        latest.pop(prediction.key, None)
        latest[prediction.key] = prediction

    metadata = {}
    sidecar = metadata_path(path)
    if sidecar.is_file():
        metadata = json.loads(sidecar.read_text(encoding="utf-8"))
    return PredictionSet(predictions=list(latest.values()), metadata=metadata)


def write_predictions(path: PathLike, predictions: Sequence[Prediction]) -> None:
    """Replace the file atomically"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # write a temporary file next to the target, then swap it in
    # os.replace is atomic on the same filesystem, so readers never see half a file
    handle, temporary = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(handle, "w", encoding="utf-8") as out:
            for prediction in predictions:
                out.write(json.dumps(prediction.to_record(), ensure_ascii=False) + "\n")
        os.replace(temporary, path)
    except BaseException:
        Path(temporary).unlink(missing_ok=True)
        raise


class ChatClient:
    """
    Minimal chat-completion client with retry and exponential backoff

    one requests.Session per worker thread
    """

    def __init__(self, config: EndpointConfig):
        self.config = config
        # threading.local() gives every worker thread its own attribute namespace
        self._local = threading.local()
        self._headers = {"Content-Type": "application/json"}
        # raises AuthMissing now, before any request is sent
        token = config.token()
        if token:
            self._headers["Authorization"] = f"Bearer {token}"

    @property
    def url(self) -> str:
        return self.config.base_url.rstrip("/") + "/chat/completions"

    def _session(self) -> requests.Session:
        # a Session keeps the TCP connection alive between requests
        session = getattr(self._local, "session", None)
        if session is None:
            session = requests.Session()
            self._local.session = session
        return session

    def complete(self, messages: Sequence[ChatMessage]) -> Tuple[str, int]:
        """
        Send one request

        Returns:
            (assistant text, retries used)

        Raises:
            EndpointUnreachable: non-retryable status, malformed body or retries exhausted;
                the exception carries the retry count in .retries
        """
        # OpenAI-compatible request body
        payload = {
            "model": self.config.model,
            "messages": [m.to_dict() for m in messages],
            "temperature": self.config.temperature,
            "max_tokens": self.config.max_tokens,
        }
        retries = 0
        while True:
            retry_after = None
            try:
                response = self._session().post(self.url, json=payload, headers=self._headers,
                                                timeout=self.config.timeout)
            except (requests.ConnectionError, requests.Timeout) as error:
                # refused connections and read timeouts are retried like a 503
                failure = f"{type(error).__name__}: {error}"
            else:
                if response.status_code == 200:
                    return self._content(response, retries), retries
                # 400, 401, 404 ... will not get better by asking again
                if response.status_code not in RETRYABLE:
                    raise self._unreachable(f"HTTP {response.status_code}: {response.text[:200]}", retries)
                failure = f"HTTP {response.status_code}"
                retry_after = _retry_after(response)

            if retries >= self.config.max_retries:
                raise self._unreachable(f"{failure} after {retries} retries", retries)
            # exponential backoff: base, base * m, base * m**2, ...
            delay = self.config.backoff_base * self.config.backoff_multiplier ** retries
            # a server-sent Retry-After can only lengthen the wait
            if retry_after is not None:
                delay = max(delay, retry_after)
            logger.warning("%s, retrying in %.1fs", failure, delay)
            time.sleep(delay)
            retries += 1

    def _content(self, response: requests.Response, retries: int) -> str:
        try:
            # choices[0].message.content holds the assistant text; null content counts as ""
            return response.json()["choices"][0]["message"]["content"] or ""
        except (ValueError, KeyError, IndexError, TypeError) as error:
            raise self._unreachable(f"malformed completion body ({error})", retries) from error

    @staticmethod
    def _unreachable(message: str, retries: int) -> EndpointUnreachable:
        error = EndpointUnreachable(message)
        error.retries = retries
        return error


def _retry_after(response: requests.Response) -> Optional[float]:
    value = response.headers.get("Retry-After")
    if value is None:
        return None
    try:
        return min(max(float(value), 0.0), MAX_RETRY_AFTER)
    except ValueError:
        return None


class GatewayService:
    """
    Service for batch inference

    takes the endpoint config and, optionally, a prebuilt client (tests inject one)
    """

    def __init__(self, config: EndpointConfig, client: ChatClient = None):

        self.config = config
        self.client = client if client is not None else ChatClient(config)

    def predict(self, key: str, messages: Sequence[ChatMessage]) -> Prediction:
        """One request; transport failures become a Prediction with an error"""
        # monotonic clock: unaffected by system clock changes
        started = time.monotonic()
        try:
            content, retries = self.client.complete(messages)
            error = None
        except EndpointUnreachable as failure:
            content, retries, error = "", getattr(failure, "retries", 0), str(failure)
            logger.warning("%s: %s", key, failure)
        except requests.RequestException as failure:
            content, retries, error = "", 0, f"{type(failure).__name__}: {failure}"
            logger.warning("%s: %s", key, failure)
        latency = int(round((time.monotonic() - started) * 1000))
        return Prediction(key=key, raw_output=content, latency_ms=latency, retries=retries, error=error)

    def run_batch(self,
                  items: Sequence[ScoredExample],
                  descriptions: Dict[str, SchemaDescription],
                  output_path: PathLike,
                  options: PromptOptions = None,
                  retry_failed: bool = False,
                  progress: bool = False) -> PredictionSet:
        """
        Answer every item, resuming from whatever output_path already holds

        Args:
            items: benchmark items in benchmark order
            descriptions: db_id -> SchemaDescription
            output_path: prediction file; also the resume journal
            options: PromptOptions
            retry_failed: re-query items whose stored prediction carries a transport error

        Returns:
            PredictionSet in benchmark order
        """
        options = options or PromptOptions()
        output_path = Path(output_path)

        keys = [item.example.key for item in items]
        if len(set(keys)) != len(keys):
            raise ValueError("benchmark keys are not unique")

        done: Dict[str, Prediction] = {}
        if output_path.is_file():
            done = read_predictions(output_path, tolerant=True).by_key()
            # rewrite so a cut-off last line does not merge with the next append
            write_predictions(output_path, list(done.values()))
        if retry_failed:
            # forget stored failures so they are requested again
            done = {key: p for key, p in done.items() if p.error is None}

        pending = []
        for item in items:
            if item.example.key in done:
                continue
            description = descriptions.get(item.example.db_id)
            if description is None:
                raise SchemaMismatch(f"no schema description for {item.example.db_id!r}")
            messages = render_inference_prompt(item.example, description, options.mode,
                                               options.self_correction, options.step_outline)
            pending.append((item.example.key, messages))
        logger.info("%d of %d items already answered, %d to request", len(items) - len(pending), len(items), len(pending))

        if pending:
            self._run_pending(pending, output_path, done, progress)

        # the journal holds answers in completion order; the final file follows the benchmark
        ordered = [done[key] for key in keys]
        write_predictions(output_path, ordered)
        metadata = self.run_metadata(options, len(ordered))
        metadata_path(output_path).write_text(json.dumps(metadata, sort_keys=True, indent=2) + "\n", encoding="utf-8")
        return PredictionSet(predictions=ordered, metadata=metadata)

    def _run_pending(self, pending: List[Tuple[str, List[ChatMessage]]], journal_path: Path,
                     done: Dict[str, Prediction], progress: bool) -> None:
        # max_workers bounds the number of requests in flight
        pool = ThreadPoolExecutor(max_workers=self.config.max_concurrent)
        try:
            with journal_path.open("a", encoding="utf-8") as journal:
                futures = [pool.submit(self.predict, key, messages) for key, messages in pending]
                # the main thread is the only writer
                for future in tqdm(as_completed(futures), total=len(futures), disable=not progress, desc="infer"):
                    prediction = future.result()
                    journal.write(json.dumps(prediction.to_record(), ensure_ascii=False) + "\n")
                    # flush per line so an interrupted run keeps every finished answer
                    journal.flush()
                    done[prediction.key] = prediction
        except BaseException:
            # Ctrl-C: drop queued requests instead of waiting for them
            pool.shutdown(wait=False, cancel_futures=True)
            raise
        pool.shutdown(wait=True)

    def run_metadata(self, options: PromptOptions, count: int) -> Dict[str, Any]:
        settings = asdict(self.config)
        # the variable name is not needed to reproduce a run
        settings.pop("token_env")
        return {"endpoint": settings, "prompt": asdict(options), "items": count}
