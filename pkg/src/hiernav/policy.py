"""Decision layer: greedy, featurised softmax and LLM-backed candidate selection."""

from __future__ import annotations

import json
import logging
import os
import re
import threading
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path as FilePath
from typing import Callable, Sequence

import numpy as np

from .observe import FINAL, GlobalObservation, LocalObservation, serialize_observation
from .plan import GlobalRoutePlan, LocalRoutePlan

log = logging.getLogger(__name__)

N_FEATURES = 5
GLOBAL = "global"
LOCAL = "local"
LEVELS = (GLOBAL, LOCAL)


@dataclass(frozen=True)
class Decision:
    index: int
    logp: float
    policy: str
    reasoning: str | None = None


@dataclass
class PolicyParams:
    theta_global: np.ndarray = field(default_factory=lambda: np.zeros(N_FEATURES))
    theta_local: np.ndarray = field(default_factory=lambda: np.zeros(N_FEATURES))
    temperature: float = 1.0

    def __post_init__(self) -> None:
        self.theta_global = np.asarray(self.theta_global, dtype=float).reshape(N_FEATURES)
        self.theta_local = np.asarray(self.theta_local, dtype=float).reshape(N_FEATURES)
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if not (np.all(np.isfinite(self.theta_global)) and np.all(np.isfinite(self.theta_local))):
            raise ValueError("parameters must be finite")

    def theta(self, level: str) -> np.ndarray:
        return self.theta_global if level == GLOBAL else self.theta_local

    @property
    def flat(self) -> np.ndarray:
        return np.concatenate([self.theta_global, self.theta_local])

    @classmethod
    def from_flat(cls, v, temperature: float = 1.0) -> "PolicyParams":
        v = np.asarray(v, dtype=float)
        return cls(v[:N_FEATURES].copy(), v[N_FEATURES:].copy(), temperature)

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.theta_global.copy(), self.theta_local.copy(), self.temperature)

    def to_json(self) -> str:
        return json.dumps(
            {"theta_global": self.theta_global.tolist(), "theta_local": self.theta_local.tolist(), "temperature": self.temperature},
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "PolicyParams":
        d = json.loads(text)
        return cls(d["theta_global"], d["theta_local"], float(d.get("temperature", 1.0)))

    def save(self, path) -> None:
        FilePath(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "PolicyParams":
        return cls.from_json(FilePath(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# features


def _mean(xs: list[float]) -> float:
    return float(np.mean(xs)) if xs else 0.0


def _scaled(x: np.ndarray) -> np.ndarray:
    m = float(np.max(x)) if x.size else 0.0
    return x / m if m > 0 else np.zeros_like(x)


def global_features(candidates: Sequence[GlobalRoutePlan], obs: GlobalObservation) -> np.ndarray:
    """Rows ``[time, congestion, hotspot, length, 1]`` for region-sequence candidates."""
    n = len(candidates)
    f = np.ones((n, N_FEATURES))
    if n == 0:
        return f
    times = np.array([sum(obs.regions[z].avg_time for z in c.regions) for c in candidates])
    f[:, 0] = _scaled(times)
    f[:, 1] = [_mean([obs.regions[z].cong for z in c.regions]) for c in candidates]
    f[:, 2] = [_mean([obs.hotspot[z] for z in c.regions]) for c in candidates]
    f[:, 3] = _scaled(np.array([len(c.regions) for c in candidates], dtype=float))
    return f


def local_features(candidates: Sequence[LocalRoutePlan], obs: LocalObservation) -> np.ndarray:
    """Rows ``[time, congestion, exit demand, length, 1]`` for edge-path candidates."""
    n = len(candidates)
    f = np.ones((n, N_FEATURES))
    if n == 0:
        return f
    cong = {d.edge: d.cong for d in obs.edges}
    f[:, 0] = _scaled(np.array([c.free_flow for c in candidates]))
    f[:, 1] = [_mean([cong.get(e, 0.0) for e in c.edges]) for c in candidates]
    demand = np.array([0.0 if c.terminal == FINAL else float(obs.demand(c.terminal)) for c in candidates])
    f[:, 2] = _scaled(demand)
    f[:, 3] = _scaled(np.array([len(c.edges) for c in candidates], dtype=float))
    return f


@dataclass
class DecisionContext:
    """Everything a policy sees at one decision point."""

    vehicle_id: int
    decision_no: int
    level: str
    t: int
    candidates: list
    features: np.ndarray
    est_times: list[float]
    observation: object

    def text(self) -> str:
        return serialize_observation(self.observation, self.candidates, self.features)


# ---------------------------------------------------------------------------
# selection rules


def greedy_select(est_times: Sequence[float]) -> Decision:
    if len(est_times) == 0:
        raise ValueError("empty candidate set")
    best = 0
    for i, t in enumerate(est_times):
        if t < est_times[best]:
            best = i
    return Decision(best, 0.0, "greedy")


def log_softmax(theta: np.ndarray, features: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    z = np.asarray(features, dtype=float) @ np.asarray(theta, dtype=float) / temperature
    z = z - np.max(z)
    return z - np.log(np.sum(np.exp(z)))


def softmax_probs(theta, features, temperature: float = 1.0) -> np.ndarray:
    return np.exp(log_softmax(theta, features, temperature))


def log_prob(theta, features, index: int, temperature: float = 1.0) -> float:
    lp = log_softmax(theta, features, temperature)
    if not 0 <= index < len(lp):
        raise IndexError(f"candidate index {index} out of range")
    return float(min(0.0, lp[index]))


def softmax_select(theta, features, rng: np.random.Generator, temperature: float = 1.0) -> Decision:
    features = np.asarray(features, dtype=float)
    if features.shape[0] == 0:
        raise ValueError("empty candidate set")
    lp = log_softmax(theta, features, temperature)
    cdf = np.cumsum(np.exp(lp))
    u = rng.random() * cdf[-1]
    idx = min(int(np.searchsorted(cdf, u, side="right")), len(lp) - 1)
    return Decision(idx, float(min(0.0, lp[idx])), "softmax")


# ---------------------------------------------------------------------------
# policies used by the hierarchical navigator


class GreedyPolicy:
    name = "greedy"

    def choose(self, ctx: DecisionContext) -> Decision:
        return greedy_select(ctx.est_times)

    def choose_many(self, ctxs: list[DecisionContext]) -> list[Decision]:
        return [self.choose(c) for c in ctxs]


class SoftmaxPolicy:
    """Samples from the featurised softmax; ``sample=False`` takes the mode."""

    name = "softmax"

    def __init__(self, params: PolicyParams, rng: np.random.Generator | None = None, sample: bool = True) -> None:
        self.params = params
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.sample = sample

    def choose(self, ctx: DecisionContext) -> Decision:
        theta = self.params.theta(ctx.level)
        if self.sample:
            return softmax_select(theta, ctx.features, self.rng, self.params.temperature)
        lp = log_softmax(theta, ctx.features, self.params.temperature)
        i = int(np.argmax(lp))
        return Decision(i, float(min(0.0, lp[i])), "softmax-mode")

    def choose_many(self, ctxs: list[DecisionContext]) -> list[Decision]:
        return [self.choose(c) for c in ctxs]


# ---------------------------------------------------------------------------
# LLM endpoint


class TransportError(RuntimeError):
    pass


Transport = Callable[[list, str], str]


@dataclass
class LLMConfig:
    url: str | None = None
    api_key: str | None = None
    model: str = "default"
    temperature: float = 0.1
    top_p: float = 1.0
    timeout_s: float = 30.0
    max_inflight: int = 4
    response_path: str = "choices.0.message.content"
    two_stage: bool = False

    @classmethod
    def from_env(cls, **kw) -> "LLMConfig":
        kw.setdefault("url", os.environ.get("CITYNAV_LLM_URL"))
        kw.setdefault("api_key", os.environ.get("CITYNAV_LLM_KEY"))
        return cls(**kw)


def _dig(obj, path: str):
    for part in path.split("."):
        obj = obj[int(part)] if isinstance(obj, list) else obj[part]
    return obj


class HttpTransport:
    """JSON chat-completion POST via urllib."""

    def __init__(self, config: LLMConfig) -> None:
        if not config.url:
            raise ValueError("no LLM endpoint configured (set CITYNAV_LLM_URL)")
        self.config = config

    def __call__(self, messages: list, request_id: str) -> str:
        c = self.config
        body = json.dumps(
            {"model": c.model, "messages": messages, "temperature": c.temperature, "top_p": c.top_p}
        ).encode()
        headers = {"Content-Type": "application/json", "X-Request-Id": request_id}
        if c.api_key:
            headers["Authorization"] = f"Bearer {c.api_key}"
        req = urllib.request.Request(c.url, data=body, headers=headers, method="POST")
        try:
            with urllib.request.urlopen(req, timeout=c.timeout_s) as resp:
                payload = json.loads(resp.read().decode("utf-8"))
            return str(_dig(payload, c.response_path))
        except Exception as exc:
            raise TransportError(str(exc)) from exc


class StubTransport:
    """Offline endpoint: a fixed reply, a scripted list consumed in call order, or a function."""

    def __init__(self, responses) -> None:
        self.responses = responses
        self.calls: list[tuple[str, list]] = []
        self._i = 0
        self._lock = threading.Lock()

    def __call__(self, messages: list, request_id: str) -> str:
        with self._lock:
            self.calls.append((request_id, messages))
            r = self.responses
            if callable(r):
                out = r(messages, request_id)
            elif isinstance(r, (str, Exception)):
                out = r
            else:
                out = r[self._i % len(r)]
                self._i += 1
        if isinstance(out, Exception):
            raise TransportError(str(out))
        return out


SYSTEM_PROMPT = {
    GLOBAL: "You allocate vehicles to region-level routes in a city road network. "
    "Prefer routes with low expected delay and avoid regions many other vehicles already plan to use.",
    LOCAL: "You choose a road-level path that leaves the current region toward the target. "
    "Prefer low congestion and exits that few other vehicles are heading for.",
}

_CHOICE = re.compile(r"CHOICE:\s*(-?\d+)", re.IGNORECASE)
_REASON = re.compile(r"REASONING:\s*(.*?)(?=CHOICE:|\Z)", re.IGNORECASE | re.DOTALL)


def parse_choice(text: str, n: int) -> tuple[int | None, str | None]:
    """0-based choice from a ``CHOICE: <n>`` reply, or ``None`` if absent or out of range."""
    matches = _CHOICE.findall(text or "")
    rm = _REASON.search(text or "")
    reasoning = rm.group(1).strip() if rm else None
    if not matches:
        return None, reasoning
    k = int(matches[-1])
    if not 1 <= k <= n:
        return None, reasoning
    return k - 1, reasoning


class LLMClient:
    def __init__(self, config: LLMConfig | None = None, transport: Transport | None = None) -> None:
        self.config = config or LLMConfig.from_env()
        self.transport = transport if transport is not None else HttpTransport(self.config)
        self.incidents: list[str] = []
        self._lock = threading.Lock()

    def _incident(self, msg: str, level: int = logging.INFO) -> None:
        with self._lock:
            self.incidents.append(msg)
        log.log(level, "llm: %s", msg)

    def _ask(self, level: str, text: str, n: int, request_id: str) -> tuple[int | None, str | None]:
        sys_msg = {"role": "system", "content": SYSTEM_PROMPT[level]}
        fmt = f"Reply as 'REASONING: <your analysis>' followed by 'CHOICE: <number 1-{n}>'."
        if not self.config.two_stage:
            reply = self.transport([sys_msg, {"role": "user", "content": f"{text}\n\n{fmt}"}], request_id)
            return parse_choice(reply, n)
        ask = {"role": "user", "content": f"{text}\n\nAnalyse the options step by step. Do not choose yet."}
        reasoning = self.transport([sys_msg, ask], request_id + "-r")
        reply = self.transport(
            [sys_msg, ask, {"role": "assistant", "content": reasoning}, {"role": "user", "content": f"Now answer with 'CHOICE: <number 1-{n}>'."}],
            request_id + "-a",
        )
        idx, _ = parse_choice(reply, n)
        return idx, reasoning

    def select(self, level: str, text: str, est_times: Sequence[float], request_id: str = "0") -> Decision:
        n = len(est_times)
        if n == 0:
            raise ValueError("empty candidate set")
        for attempt in range(2):
            rid = f"{request_id}-{attempt}"
            try:
                idx, reasoning = self._ask(level, text, n, rid)
            except TransportError as exc:
                self._incident(f"request {rid}: transport failure: {exc}")
                continue
            if idx is not None:
                return Decision(idx, 0.0, "llm", reasoning)
            self._incident(f"request {rid}: unparseable or out-of-range choice")
        self._incident(f"request {request_id}: greedy fallback", logging.WARNING)
        d = greedy_select(est_times)
        return Decision(d.index, 0.0, "llm-fallback")

    def select_many(self, jobs: list[tuple[str, str, Sequence[float], str]]) -> list[Decision]:
        """Run ``(level, text, est_times, request_id)`` jobs with bounded concurrency, results in job order."""
        if len(jobs) <= 1 or self.config.max_inflight <= 1:
            return [self.select(*j) for j in jobs]
        with ThreadPoolExecutor(max_workers=self.config.max_inflight) as ex:
            return list(ex.map(lambda j: self.select(*j), jobs))


def llm_select(client: LLMClient, obs_text: str, est_times: Sequence[float], level: str, request_id: str = "0") -> Decision:
    return client.select(level, obs_text, est_times, request_id)


class LLMPolicy:
    name = "llm"

    def __init__(self, client: LLMClient) -> None:
        self.client = client

    def choose(self, ctx: DecisionContext) -> Decision:
        return self.choose_many([ctx])[0]

    def choose_many(self, ctxs: list[DecisionContext]) -> list[Decision]:
        jobs = [(c.level, c.text(), c.est_times, f"{c.vehicle_id}-{c.decision_no}-{c.level}") for c in ctxs]
        return self.client.select_many(jobs)
