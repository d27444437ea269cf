"""Direction proposers for the calibration loop.

A proposer receives a :class:`ProposerContext` (current best point, bounds,
per-frequency diagnostics and the history of earlier rounds) and returns a
:class:`Proposal`. The loop turns the proposal into a search direction and
validates it with a backtracking line search, so proposals need not be
feasible.
"""

from __future__ import annotations

import json
import logging
import math
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import requests

from swimcal import params as P

log = logging.getLogger(__name__)

PROTOCOL_VERSION = "1"


class ProposerError(RuntimeError):
    """A proposer could not produce a usable proposal (timeout, bad reply, ...)."""

    def __init__(self, msg, raw_body=None):
        super().__init__(msg)
        self.raw_body = raw_body


@dataclass
class HistoryEntry:
    delta: np.ndarray
    step_multiplier: float | None
    accepted: bool
    loss: float | None = None

    def __post_init__(self):
        if self.accepted and (self.step_multiplier is None or self.loss is None):
            raise ValueError("an accepted entry needs its step multiplier and loss")


@dataclass
class ProposerContext:
    round: int
    budget_remaining: int
    theta_best: np.ndarray
    loss_best: float
    bounds: P.ParamBounds
    error_matrix: np.ndarray
    frequencies: np.ndarray
    sim_velocity: np.ndarray
    real_velocity: np.ndarray
    worst_frequency: float | None
    history: list = field(default_factory=list)
    attachments: list = field(default_factory=list)


@dataclass
class Proposal:
    theta: np.ndarray
    rationale: str = ""
    source: str = ""

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        if not np.all(np.isfinite(self.theta)):
            raise ProposerError(f"non-finite proposal from {self.source or 'proposer'}")


def _num(x):
    x = float(x)
    return x if math.isfinite(x) else None


def _nums(a):
    return [_num(v) for v in np.asarray(a, dtype=float).ravel()]


def context_to_wire(ctx: ProposerContext) -> dict:
    """Request body of ``POST /propose``. Non-finite numbers are sent as null."""
    return {
        "protocol_version": PROTOCOL_VERSION,
        "round": int(ctx.round),
        "budget_remaining": int(ctx.budget_remaining),
        "bounds": ctx.bounds.to_list(),
        "theta_best": _nums(ctx.theta_best),
        "loss_best": _num(ctx.loss_best),
        "error_matrix": [_nums(row) for row in np.asarray(ctx.error_matrix)],
        "frequencies_hz": _nums(ctx.frequencies),
        "velocities": {"sim": _nums(ctx.sim_velocity), "real": _nums(ctx.real_velocity)},
        "worst_frequency_hz": None if ctx.worst_frequency is None else _num(ctx.worst_frequency),
        "history": [
            {
                "delta": _nums(h.delta),
                "step_multiplier": None if h.step_multiplier is None else float(h.step_multiplier),
                "accepted": bool(h.accepted),
                "loss": None if h.loss is None else _num(h.loss),
            }
            for h in ctx.history
        ],
        "attachments": [str(a) for a in ctx.attachments],
    }


def _arr(values):
    return np.array([math.inf if v is None else v for v in values], dtype=float)


def context_from_wire(body: dict) -> ProposerContext:
    hist = [
        HistoryEntry(np.asarray(h["delta"], dtype=float), h["step_multiplier"], h["accepted"], h["loss"])
        for h in body["history"]
    ]
    return ProposerContext(
        round=body["round"],
        budget_remaining=body["budget_remaining"],
        theta_best=np.asarray(body["theta_best"], dtype=float),
        loss_best=math.inf if body["loss_best"] is None else body["loss_best"],
        bounds=P.ParamBounds.from_list(body["bounds"]),
        error_matrix=np.array([_arr(r) for r in body["error_matrix"]]).reshape(len(body["error_matrix"]), -1),
        frequencies=np.asarray(body["frequencies_hz"], dtype=float),
        sim_velocity=_arr(body["velocities"]["sim"]),
        real_velocity=_arr(body["velocities"]["real"]),
        worst_frequency=body["worst_frequency_hz"],
        history=hist,
        attachments=list(body.get("attachments", [])),
    )


def parse_reply(raw: str, dim: int) -> Proposal:
    try:
        body = json.loads(raw)
        theta = body["theta_proposed"]
        rationale = body.get("rationale", "")
    except (ValueError, TypeError, KeyError) as exc:
        raise ProposerError(f"malformed proposer reply: {exc}", raw_body=raw) from None
    if not isinstance(rationale, str):
        raise ProposerError("rationale must be a string", raw_body=raw)
    if (not isinstance(theta, list) or len(theta) != dim
            or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in theta)):
        raise ProposerError(f"theta_proposed must be a list of {dim} numbers", raw_body=raw)
    if not all(math.isfinite(v) for v in theta):
        raise ProposerError("theta_proposed contains non-finite values", raw_body=raw)
    return Proposal(np.asarray(theta, dtype=float), rationale, "remote")


# ---------------------------------------------------------------------------
# proposers
# ---------------------------------------------------------------------------


class Proposer:
    name = "proposer"

    def propose(self, ctx: ProposerContext) -> Proposal:
        raise NotImplementedError

    @property
    def internal_evals(self) -> int:
        """Simulation evaluations spent inside the proposer (never charged to the loop)."""
        return 0


class GroundTruthOracle(Proposer):
    """Test double that knows the hidden parameters.

    Points from the current best toward ``theta_star`` in normalized space,
    scaled by ``overshoot`` and tilted by a random angle of at most
    ``direction_noise`` radians.
    """

    name = "ground_truth"

    def __init__(self, theta_star, bounds: P.ParamBounds, overshoot=1.0, direction_noise=0.0, seed=0):
        if not overshoot > 0:
            raise ValueError("overshoot must be positive")
        self.theta_star = np.asarray(theta_star, dtype=float)
        self.bounds = bounds
        self.overshoot = float(overshoot)
        self.direction_noise = float(direction_noise)
        self.seed = int(seed)

    def propose(self, ctx: ProposerContext) -> Proposal:
        if self.overshoot == 1.0 and self.direction_noise == 0.0:
            return Proposal(self.theta_star.copy(), "exact target", self.name)
        u_best = P.normalize(ctx.theta_best, self.bounds)
        step = P.normalize(self.theta_star, self.bounds) - u_best
        length = np.linalg.norm(step)
        if self.direction_noise > 0 and length > 0:
            step = length * tilt(step / length, self.direction_noise, P.make_rng([self.seed, int(ctx.round)]))
        theta = P.denormalize(u_best + self.overshoot * step, self.bounds)
        return Proposal(theta, f"overshoot {self.overshoot:g}", self.name)


def tilt(unit, max_angle, rng):
    """Rotate ``unit`` by an angle uniform in [0, max_angle] toward a random Gaussian direction."""
    g = rng.standard_normal(unit.size)
    g -= g.dot(unit) * unit
    norm = np.linalg.norm(g)
    if norm == 0:
        return unit.copy()
    angle = max_angle * rng.random()
    return math.cos(angle) * unit + math.sin(angle) * (g / norm)


class SPSAOracle(Proposer):
    """Two-probe simultaneous-perturbation descent step.

    Probes ``clip(u +/- c*delta)`` in normalized space with its own evaluator
    (whose counter is separate from the calibration budget) and steps against
    the relative directional slope.
    """

    name = "spsa"

    def __init__(self, evaluator, bounds: P.ParamBounds, perturbation=0.05, overshoot=1.0, seed=0):
        if not perturbation > 0:
            raise ValueError("perturbation must be positive")
        self.evaluator = evaluator
        self.bounds = bounds
        self.c = float(perturbation)
        self.overshoot = float(overshoot)
        self.seed = int(seed)

    @property
    def internal_evals(self) -> int:
        return self.evaluator.count

    def propose(self, ctx: ProposerContext) -> Proposal:
        b = self.bounds
        u = P.normalize(ctx.theta_best, b)
        rng = P.make_rng([self.seed, int(ctx.round), 31])
        delta = rng.choice([-1.0, 1.0], size=u.size)
        up = self.evaluator(P.denormalize(np.clip(u + self.c * delta, 0, 1), b)).loss
        down = self.evaluator(P.denormalize(np.clip(u - self.c * delta, 0, 1), b)).loss
        if math.isinf(up) and math.isinf(down):
            return Proposal(np.asarray(ctx.theta_best, dtype=float).copy(), "probes diverged", self.name)
        if math.isinf(up):
            slope = 1.0
        elif math.isinf(down):
            slope = -1.0
        else:
            scale = max(abs(up), abs(down))
            slope = 0.0 if scale == 0 else (up - down) / (2.0 * scale)
        theta = P.denormalize(u - self.overshoot * slope * delta, b)
        return Proposal(theta, f"spsa slope {slope:+.4g}", self.name)


class ReplayProposer(Proposer):
    """Returns previously recorded proposals in order."""

    name = "replay"

    def __init__(self, proposals):
        self.proposals = [np.asarray(p, dtype=float) for p in proposals]
        self.rationales = [""] * len(self.proposals)

    @classmethod
    def from_record(cls, record: dict) -> "ReplayProposer":
        rounds = record["rounds"]
        rep = cls([r["proposal"] for r in rounds])
        rep.rationales = [r.get("rationale", "") for r in rounds]
        return rep

    def propose(self, ctx: ProposerContext) -> Proposal:
        i = int(ctx.round)
        if i >= len(self.proposals):
            raise ProposerError(f"replay log exhausted at round {i}")
        return Proposal(self.proposals[i].copy(), self.rationales[i], self.name)


class RemoteProposer(Proposer):
    """HTTP client for the proposer protocol (``POST <endpoint>/propose``)."""

    name = "remote"

    def __init__(self, endpoint: str, timeout: float = 120.0, retries: int = 2, backoff: float = 0.0,
                 session=None):
        self.url = endpoint.rstrip("/") + ("" if endpoint.rstrip("/").endswith("/propose") else "/propose")
        self.timeout = timeout
        self.retries = int(retries)
        self.backoff = backoff
        self.session = session or requests.Session()
        self.attempts = 0

    def propose(self, ctx: ProposerContext) -> Proposal:
        payload = json.dumps(context_to_wire(ctx), allow_nan=False)
        headers = {"Content-Type": "application/json; charset=utf-8"}
        last = None
        for attempt in range(self.retries + 1):
            self.attempts += 1
            try:
                resp = self.session.post(self.url, data=payload.encode("utf-8"), headers=headers,
                                         timeout=self.timeout)
            except (requests.Timeout, requests.ConnectionError) as exc:
                last = f"{type(exc).__name__}: {exc}"
                log.warning("proposer attempt %d failed: %s", attempt + 1, last)
            else:
                if resp.status_code >= 500:
                    last = f"HTTP {resp.status_code}"
                    log.warning("proposer attempt %d failed: %s", attempt + 1, last)
                elif resp.status_code != 200:
                    raise ProposerError(f"proposer returned HTTP {resp.status_code}", raw_body=resp.text)
                else:
                    return parse_reply(resp.text, ctx.bounds.dim)
            if self.backoff and attempt < self.retries:
                time.sleep(self.backoff * 2**attempt)
        raise ProposerError(f"proposer failed after {self.retries + 1} attempts ({last})")


# ---------------------------------------------------------------------------
# fixed-reply stub server
# ---------------------------------------------------------------------------


class StubServer(ThreadingHTTPServer):
    """Answers every ``POST /propose`` with the same vector.

    ``delay`` sleeps before replying (to exercise client timeouts) and
    ``status`` overrides the HTTP status. ``requests`` keeps the decoded
    request bodies for inspection.
    """

    daemon_threads = True

    def __init__(self, theta, rationale="stub reply", host="127.0.0.1", port=0, delay=0.0, status=200):
        super().__init__((host, port), _StubHandler)
        self.reply = {"theta_proposed": [float(v) for v in theta], "rationale": rationale}
        self.delay = delay
        self.status = status
        self.requests = []
        self._thread = None

    @property
    def url(self) -> str:
        host, port = self.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> "StubServer":
        self._thread = threading.Thread(target=self.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self.shutdown()
        self.server_close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


class _StubHandler(BaseHTTPRequestHandler):
    def do_POST(self):  # noqa: N802
        length = int(self.headers.get("Content-Length", 0))
        body = self.rfile.read(length)
        srv = self.server
        try:
            srv.requests.append(json.loads(body.decode("utf-8")))
        except ValueError:
            srv.requests.append(None)
        if self.path.rstrip("/") != "/propose":
            self.send_error(404)
            return
        if srv.delay:
            time.sleep(srv.delay)
        out = json.dumps(srv.reply).encode("utf-8")
        try:
            self.send_response(srv.status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(out)))
            self.end_headers()
            self.wfile.write(out)
        except (BrokenPipeError, ConnectionResetError):
            pass

    def log_message(self, fmt, *args):
        log.debug("stub: " + fmt, *args)
