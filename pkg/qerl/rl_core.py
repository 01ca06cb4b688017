import logging
import math
import zlib
from dataclasses import dataclass, field
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .errors import DimensionMismatch, RangeViolation, SchemaVersionMismatch, raise_if

logger = logging.getLogger(__name__)

PARAMETERS_SCHEMA_VERSION: int = 1
DEFAULT_HIDDEN: Tuple[int, ...] = (64, 64)
GRADCHECK_TOPOLOGIES: Tuple[Tuple[int, ...], ...] = (
    (4, 16, 16, 3),
    (10, 64, 64, 13),
    (21, 64, 64, 16),
)


@dataclass(frozen=True)
class RLCoreConfig:
    """Shared learner settings. `hidden` sizes both the policy and the Q-network.

    `seed` mirrors the run seed and is not read from config documents.
    """

    discount_factor: float = 0.99
    gae_lambda: float = 0.95
    hidden: Tuple[int, ...] = DEFAULT_HIDDEN
    seed: int = field(default=0, metadata={"mirror": True})


def _mismatch(message: str) -> DimensionMismatch:
    return DimensionMismatch(message, module="rl_core")


class MLPParameters:
    """Weights and biases of a tanh MLP with a linear output layer.

    All entries live in one flat float64 vector; `weights[i]` (shape (in, out)) and
    `biases[i]` are views into it, so optimizers and finite differences work on `flat`.
    """

    def __init__(self, sizes: Sequence[int], flat: Optional[np.ndarray] = None) -> None:
        self.sizes: Tuple[int, ...] = tuple(int(s) for s in sizes)
        raise_if(
            len(self.sizes) < 2 or any(s < 1 for s in self.sizes),
            _mismatch(f"Invalid MLP topology {list(self.sizes)}"),
        )
        count = MLPParameters.parameter_count(self.sizes)
        if flat is None:
            self.flat = np.zeros(count, dtype=np.float64)
        else:
            source = np.asarray(flat, dtype=np.float64)
            raise_if(
                source.shape != (count,),
                _mismatch(f"Expected {count} parameters, got {source.shape}"),
            )
            self.flat = source.copy()
        self.weights: List[np.ndarray] = []
        self.biases: List[np.ndarray] = []
        offset = 0
        for n_in, n_out in zip(self.sizes[:-1], self.sizes[1:]):
            self.weights.append(self.flat[offset : offset + n_in * n_out].reshape(n_in, n_out))
            offset += n_in * n_out
            self.biases.append(self.flat[offset : offset + n_out])
            offset += n_out

    @staticmethod
    def parameter_count(sizes: Sequence[int]) -> int:
        return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))

    @staticmethod
    def xavier(
        sizes: Sequence[int], rng: np.random.Generator, output_scale: float = 1.0
    ) -> "MLPParameters":
        params = MLPParameters(sizes)
        for index, weight in enumerate(params.weights):
            n_in, n_out = weight.shape
            limit = math.sqrt(6.0 / (n_in + n_out))
            weight[...] = rng.uniform(-limit, limit, size=weight.shape)
            if index == len(params.weights) - 1:
                weight *= output_scale
        return params

    @property
    def n_in(self) -> int:
        return self.sizes[0]

    @property
    def n_out(self) -> int:
        return self.sizes[-1]

    def copy(self) -> "MLPParameters":
        return MLPParameters(self.sizes, self.flat)

    def zeros_like(self) -> "MLPParameters":
        return MLPParameters(self.sizes)

    def load_from(self, other: "MLPParameters") -> None:
        raise_if(other.sizes != self.sizes, _mismatch("Cannot copy between topologies"))
        self.flat[...] = other.flat

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.flat)))

    def identical_to(self, other: "MLPParameters") -> bool:
        return self.sizes == other.sizes and bool(np.array_equal(self.flat, other.flat))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "schema_version": PARAMETERS_SCHEMA_VERSION,
            "sizes": list(self.sizes),
            "weights": [[repr(float(x)) for x in w.ravel()] for w in self.weights],
            "biases": [[repr(float(x)) for x in b] for b in self.biases],
        }

    @staticmethod
    def from_dict(data: Dict[str, Any]) -> "MLPParameters":
        version = data.get("schema_version")
        if version != PARAMETERS_SCHEMA_VERSION:
            raise SchemaVersionMismatch(
                f"Parameter checkpoint schema_version {version!r}, "
                f"expected {PARAMETERS_SCHEMA_VERSION}",
                module="rl_core",
            )
        params = MLPParameters(data["sizes"])
        for weight, values in zip(params.weights, data["weights"]):
            weight[...] = np.array([float(v) for v in values]).reshape(weight.shape)
        for bias, values in zip(params.biases, data["biases"]):
            bias[...] = np.array([float(v) for v in values])
        return params

    def __repr__(self) -> str:
        return f"{self.__class__.__name__}(sizes={list(self.sizes)})"


def _as_batch(params: MLPParameters, x: np.ndarray) -> Tuple[np.ndarray, bool]:
    array = np.asarray(x, dtype=np.float64)
    single = array.ndim == 1
    batch = array.reshape(1, -1) if single else array
    if batch.ndim != 2 or batch.shape[1] != params.n_in:
        logger.error("Input shape %s does not match n_in=%d", array.shape, params.n_in)
        raise _mismatch(f"Input shape {array.shape} does not match n_in={params.n_in}")
    return batch, single


def _forward_cached(params: MLPParameters, batch: np.ndarray) -> List[np.ndarray]:
    activations = [batch]
    last = len(params.weights) - 1
    for index, (weight, bias) in enumerate(zip(params.weights, params.biases)):
        z = activations[-1] @ weight + bias
        activations.append(z if index == last else np.tanh(z))
    return activations


def forward(params: MLPParameters, x: np.ndarray) -> np.ndarray:
    """Feedforward pass. Accepts a single input vector or a (batch, n_in) matrix."""
    batch, single = _as_batch(params, x)
    out = _forward_cached(params, batch)[-1]
    return out[0] if single else out


def backward(
    params: MLPParameters, x: np.ndarray, output_gradient: np.ndarray
) -> MLPParameters:
    """Gradient of sum(output * output_gradient) w.r.t. every parameter, summed over the batch."""
    batch, single = _as_batch(params, x)
    delta = np.asarray(output_gradient, dtype=np.float64)
    if single:
        delta = delta.reshape(1, -1)
    if delta.shape != (batch.shape[0], params.n_out):
        logger.error(
            "Output gradient shape %s does not match (%d, %d)",
            delta.shape,
            batch.shape[0],
            params.n_out,
        )
        raise _mismatch(
            f"Output gradient shape {delta.shape} does not match "
            f"({batch.shape[0]}, {params.n_out})"
        )
    activations = _forward_cached(params, batch)
    grad = params.zeros_like()
    for layer in range(len(params.weights) - 1, -1, -1):
        grad.weights[layer][...] = activations[layer].T @ delta
        grad.biases[layer][...] = delta.sum(axis=0)
        if layer > 0:
            delta = (delta @ params.weights[layer].T) * (1.0 - activations[layer] ** 2)
    return grad


class Adam:
    """Adaptive-moment descent over MLPParameters.flat."""

    def __init__(
        self,
        parameter_count: int,
        learning_rate: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ) -> None:
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(parameter_count, dtype=np.float64)
        self.v = np.zeros(parameter_count, dtype=np.float64)
        self.t = 0

    def step(self, params: MLPParameters, grad: MLPParameters) -> None:
        """Moves params against grad (minimization)."""
        raise_if(
            grad.flat.shape != self.m.shape,
            _mismatch(f"Gradient size {grad.flat.shape} does not match optimizer state"),
        )
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad.flat
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad.flat**2
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        params.flat -= self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)
        if not params.is_finite():
            logger.error("Non-finite parameters after Adam step %d", self.t)
            raise RangeViolation(
                "Parameters became non-finite", key="parameters", module="rl_core"
            )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "learning_rate": self.learning_rate,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "t": self.t,
            "m": [repr(float(x)) for x in self.m],
            "v": [repr(float(x)) for x in self.v],
        }

    @staticmethod
    def from_dict(data: Dict[str, Any]) -> "Adam":
        optimizer = Adam(len(data["m"]), data["learning_rate"], data["beta1"], data["beta2"], data["eps"])
        optimizer.t = int(data["t"])
        optimizer.m = np.array([float(x) for x in data["m"]], dtype=np.float64)
        optimizer.v = np.array([float(x) for x in data["v"]], dtype=np.float64)
        return optimizer


def softmax_policy(logits: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Numerically stable softmax over the last axis. Returns (probabilities, log-probabilities)."""
    z = np.asarray(logits, dtype=np.float64)
    raise_if(z.size == 0, _mismatch("softmax_policy needs at least one logit"))
    shifted = z - np.max(z, axis=-1, keepdims=True)
    log_probs = shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
    return np.exp(log_probs), log_probs


def sample_action(probabilities: np.ndarray, rng: np.random.Generator) -> int:
    """Inverse-CDF draw; consumes exactly one uniform from rng."""
    cdf = np.cumsum(probabilities)
    u = rng.random()
    index = int(np.searchsorted(cdf, u * cdf[-1], side="right"))
    return min(index, len(cdf) - 1)


def stream_key(name: str) -> int:
    return zlib.crc32(name.encode("utf8"))


class RngStreams:
    """Named numpy Generators derived from one master seed.

    Drawing from one stream never shifts another. `child()` builds throwaway generators
    addressed by position, e.g. (episode, slot, test).
    """

    def __init__(self, seed: int) -> None:
        raise_if(
            not isinstance(seed, int) or seed < 0,
            RangeViolation(f"Seed must be a non-negative integer, got {seed!r}", key="seed", module="rl_core"),
        )
        self.seed = seed
        self._streams: Dict[str, np.random.Generator] = {}

    def _sequence(self, name: str, *indices: int) -> np.random.SeedSequence:
        return np.random.SeedSequence(self.seed, spawn_key=(stream_key(name), *indices))

    def get(self, name: str) -> np.random.Generator:
        if name not in self._streams:
            logger.debug("Creating RNG stream '%s'", name)
            self._streams[name] = np.random.Generator(np.random.PCG64(self._sequence(name)))
        return self._streams[name]

    def child(self, name: str, *indices: int) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(self._sequence(name, *indices)))

    def state_dict(self) -> Dict[str, Any]:
        return {
            "seed": self.seed,
            "streams": {
                name: gen.bit_generator.state for name, gen in sorted(self._streams.items())
            },
        }

    @staticmethod
    def from_state_dict(data: Dict[str, Any]) -> "RngStreams":
        streams = RngStreams(int(data["seed"]))
        for name, state in data["streams"].items():
            streams.get(name).bit_generator.state = state
        return streams


@dataclass(eq=False)
class Transition:
    state: np.ndarray
    action: int
    reward: float
    next_state: np.ndarray
    done: bool = False
    log_prob_old: Optional[float] = None

    def __post_init__(self) -> None:
        self.state = np.asarray(self.state, dtype=np.float64)
        self.next_state = np.asarray(self.next_state, dtype=np.float64)
        raise_if(
            self.state.shape != self.next_state.shape,
            _mismatch(
                f"state shape {self.state.shape} differs from next_state {self.next_state.shape}"
            ),
        )
        raise_if(
            self.log_prob_old is not None and self.log_prob_old > 0.0,
            RangeViolation(
                f"log_prob_old must be <= 0, got {self.log_prob_old}",
                key="log_prob_old",
                module="rl_core",
            ),
        )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Transition):
            return NotImplemented
        return (
            np.array_equal(self.state, other.state)
            and self.action == other.action
            and self.reward == other.reward
            and np.array_equal(self.next_state, other.next_state)
            and self.done == other.done
            and self.log_prob_old == other.log_prob_old
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "state": [float(x) for x in self.state],
            "action": int(self.action),
            "reward": float(self.reward),
            "next_state": [float(x) for x in self.next_state],
            "done": bool(self.done),
            "log_prob_old": None if self.log_prob_old is None else float(self.log_prob_old),
        }

    @staticmethod
    def from_dict(data: Dict[str, Any]) -> "Transition":
        return Transition(
            state=np.array(data["state"], dtype=np.float64),
            action=int(data["action"]),
            reward=float(data["reward"]),
            next_state=np.array(data["next_state"], dtype=np.float64),
            done=bool(data["done"]),
            log_prob_old=data.get("log_prob_old"),
        )


class ExperienceBuffer:
    """Fixed-capacity ring of transitions; the oldest entry is evicted first."""

    def __init__(self, capacity: int, state_dim: Optional[int] = None) -> None:
        raise_if(
            capacity < 1,
            RangeViolation("capacity must be >= 1", key="capacity", module="rl_core"),
        )
        self.capacity = capacity
        self.state_dim = state_dim
        self._items: List[Transition] = []
        self._head = 0
        self.insertions = 0

    def push(self, transition: Transition) -> None:
        if self.state_dim is not None and transition.state.shape != (self.state_dim,):
            logger.error(
                "Transition state shape %s, expected (%d,)", transition.state.shape, self.state_dim
            )
            raise _mismatch(
                f"Transition state shape {transition.state.shape}, expected ({self.state_dim},)"
            )
        if len(self._items) < self.capacity:
            self._items.append(transition)
        else:
            self._items[self._head] = transition
            self._head = (self._head + 1) % self.capacity
        self.insertions += 1

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self) -> Iterator[Transition]:
        return iter(self.ordered())

    def ordered(self) -> List[Transition]:
        """Contents from oldest to newest."""
        return self._items[self._head :] + self._items[: self._head]

    def sample_indices(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        return rng.integers(0, len(self._items), size=batch_size)

    def sample(self, batch_size: int, rng: np.random.Generator) -> List[Transition]:
        return [self._items[i] for i in self.sample_indices(batch_size, rng)]

    def clear(self) -> None:
        self._items.clear()
        self._head = 0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "capacity": self.capacity,
            "state_dim": self.state_dim,
            "insertions": self.insertions,
            "head": self._head,
            "items": [t.to_dict() for t in self._items],
        }

    @staticmethod
    def from_dict(data: Dict[str, Any]) -> "ExperienceBuffer":
        buffer = ExperienceBuffer(int(data["capacity"]), data.get("state_dim"))
        # raw slot order, so sampled indices address the same transitions after restore
        buffer._items = [Transition.from_dict(item) for item in data["items"]]
        buffer._head = int(data.get("head", 0))
        buffer.insertions = int(data["insertions"])
        return buffer


@dataclass(frozen=True)
class GradCheckResult:
    sizes: Tuple[int, ...]
    seed: int
    max_relative_error: float
    tolerance: float = field(default=1e-4)

    @property
    def passed(self) -> bool:
        return self.max_relative_error < self.tolerance

    def to_dict(self) -> Dict[str, Any]:
        return {
            "sizes": list(self.sizes),
            "seed": self.seed,
            "max_relative_error": self.max_relative_error,
            "passed": self.passed,
        }


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(np.abs(analytic) + np.abs(numeric), 1e-4)


def gradient_check(
    sizes: Sequence[int], seed: int, h: float = 1e-5, tolerance: float = 1e-4
) -> GradCheckResult:
    """Compares backward() against central finite differences on a random linear projection."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(stream_key("gradcheck"),))))
    params = MLPParameters.xavier(sizes, rng)
    params.flat += rng.normal(0.0, 0.1, size=params.flat.shape)
    x = rng.normal(0.0, 1.0, size=params.n_in)
    direction = rng.normal(0.0, 1.0, size=params.n_out)

    analytic = backward(params, x, direction).flat
    numeric = np.empty_like(analytic)
    for i in range(params.flat.size):
        original = params.flat[i]
        params.flat[i] = original + h
        plus = float(forward(params, x) @ direction)
        params.flat[i] = original - h
        minus = float(forward(params, x) @ direction)
        params.flat[i] = original
        numeric[i] = (plus - minus) / (2.0 * h)
    worst = float(np.max(relative_error(analytic, numeric)))
    logger.debug("Gradient check %s seed=%d: max relative error %.3e", list(sizes), seed, worst)
    return GradCheckResult(tuple(int(s) for s in sizes), seed, worst, tolerance)


def run_gradcheck_suite(
    seeds: int = 10,
    topologies: Sequence[Sequence[int]] = GRADCHECK_TOPOLOGIES,
    tolerance: float = 1e-4,
) -> List[GradCheckResult]:
    results = [
        gradient_check(sizes, seed, tolerance=tolerance)
        for sizes in topologies
        for seed in range(seeds)
    ]
    worst = max(r.max_relative_error for r in results)
    logger.info(
        "Gradient check suite: %d cases, max relative error %.3e, %s",
        len(results),
        worst,
        "passed" if all(r.passed for r in results) else "FAILED",
    )
    return results


__all__ = [
    "PARAMETERS_SCHEMA_VERSION",
    "DEFAULT_HIDDEN",
    "GRADCHECK_TOPOLOGIES",
    "RLCoreConfig",
    "MLPParameters",
    "forward",
    "backward",
    "Adam",
    "softmax_policy",
    "sample_action",
    "stream_key",
    "RngStreams",
    "Transition",
    "ExperienceBuffer",
    "GradCheckResult",
    "relative_error",
    "gradient_check",
    "run_gradcheck_suite",
]
