"""FGAM: iterative gradient-sign perturbation under functionality-preserving injection.

One attack run:

1. size the perturbation from the file size and injection rate, fill it with
   uniform random bytes and inject it;
2. score the executable file through Binary2img + resize;
3. while it is still detected: run FGSM on the resized image, map the image
   back to native size and to bytes, cut the perturbation out through the
   injection record and re-inject it into the pristine file;
4. stop on success, after ``max_iterations`` gradient rounds, or when the
   least-squares slope of recent executable scores falls under ``speed_floor``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from fgam import imaging, manipulations, pe_format
from fgam.errors import InsufficientHistory, InvalidSpec, NotClassifiedMalware
from fgam.manipulations import InjectionRecord, InjectionSpec, Method
from fgam.neural.models import ImageConvNet


class StopReason(str, enum.Enum):
    SUCCESS = "Success"
    SPEED_FLOOR = "SpeedFloor"
    MAX_ITERATIONS = "MaxIterations"


@dataclass(frozen=True)
class AttackConfig:
    rate: float = 0.1
    epsilon: float = 64.0
    max_iterations: int = 20
    stop_threshold: float = 0.5
    speed_floor: float = 0.001
    speed_window: int = 5
    inner_cap: int = 50
    method: Method = Method.PADDING
    section_name: bytes = manipulations.DEFAULT_SECTION_NAME
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        if not self.rate > 0:
            raise InvalidSpec(f"rate must be positive, got {self.rate}")
        if not self.epsilon > 0:
            raise InvalidSpec(f"epsilon must be positive, got {self.epsilon}")
        if self.max_iterations < 1:
            raise InvalidSpec("max_iterations must be at least 1")
        if not 0 < self.stop_threshold < 1:
            raise InvalidSpec(f"stop_threshold {self.stop_threshold} outside (0, 1)")
        if not self.speed_floor > 0:
            raise InvalidSpec("speed_floor must be positive")
        if self.speed_window < 2 or self.inner_cap < 1:
            raise InvalidSpec("speed_window must be >= 2 and inner_cap >= 1")


@dataclass
class AttackTrace:
    """Everything one attack run produced.

    ``scores[k]`` is the score of the executable file after ``k`` gradient
    rounds, so ``scores[0]`` is the randomly initialised injection and
    ``t == len(scores) - 1``.
    """

    scores: list[float] = field(default_factory=list)
    inner_steps: list[int] = field(default_factory=list)
    inner_exhausted: list[bool] = field(default_factory=list)
    speeds: list[float | None] = field(default_factory=list)
    stop_reason: StopReason | None = None
    adversarial: bytes = b""
    record: InjectionRecord | None = None
    original_score: float = float("nan")

    @property
    def t(self) -> int:
        return len(self.scores) - 1

    @property
    def success(self) -> bool:
        return self.stop_reason is StopReason.SUCCESS

    @property
    def final_score(self) -> float:
        return self.scores[-1]

    def evaded_within(self, k: int) -> bool:
        return self.success and self.t <= k

    def lines(self) -> list[dict]:
        rows = []
        for k, score in enumerate(self.scores):
            rows.append({
                "iteration": k,
                "score": score,
                "speed": self.speeds[k] if k < len(self.speeds) else None,
                "inner_steps": self.inner_steps[k - 1] if k else 0,
            })
        return rows


def perturbation_size(file_size: int, rate: float) -> int:
    """Bytes of perturbation for a file: ceil(rate * size), computed exactly."""
    return math.ceil(Fraction(repr(float(rate))) * int(file_size))


def init_perturbation(size: int, seed: int) -> bytes:
    if size <= 0:
        raise InvalidSpec(f"perturbation size must be positive, got {size}")
    return np.random.default_rng(seed).integers(0, 256, size, dtype=np.uint8).tobytes()


def descent_speed(scores) -> float:
    """Magnitude of the ordinary least-squares slope of scores against their index."""
    y = np.asarray(scores, dtype=np.float64)
    if y.size < 2:
        raise InsufficientHistory(f"need at least 2 scores, got {y.size}")
    x = np.arange(y.size, dtype=np.float64)
    xc = x - x.mean()
    return float(abs(xc @ (y - y.mean()) / (xc @ xc)))


@dataclass(frozen=True)
class FgsmResult:
    image: imaging.GrayImage
    steps: int
    exhausted: bool
    score: float


def fgsm_inner(model: ImageConvNet, img: imaging.GrayImage, target: float, epsilon: float,
               cap: int, threshold: float = 0.5) -> FgsmResult:
    """Step ``x += eps * sign(grad J)`` until the image score drops under ``threshold``.

    ``target`` is the label J is measured against (1.0 = malware), so each
    step climbs the loss away from that label. Pixels are clamped to the byte
    range after every step; zero gradient components leave the pixel alone.
    Hitting ``cap`` is reported through ``exhausted`` rather than raised.
    """
    x = img.pixels.astype(np.float64, copy=True)
    score = float(model.scores([x])[0])
    steps = 0
    while score >= threshold and steps < cap:
        grad = model.input_gradient(x, target)
        x = np.clip(x + epsilon * np.sign(grad), 0.0, 255.0)
        score = float(model.scores([x])[0])
        steps += 1
    return FgsmResult(img.with_pixels(x), steps, score >= threshold, score)


def _score(model: ImageConvNet, data: bytes) -> tuple[float, imaging.GrayImage]:
    img = imaging.to_model_input(data, model.input_size)
    return float(model.scores([img])[0]), img


def attack(original: bytes, model: ImageConvNet, config: AttackConfig) -> AttackTrace:
    pe = pe_format.parse(original)
    trace = AttackTrace()
    trace.original_score, _ = _score(model, original)
    if trace.original_score < 0.5:
        raise NotClassifiedMalware(f"original scores {trace.original_score:.4f}, below the 0.5 threshold")

    amount = perturbation_size(len(original), config.rate)
    spec = InjectionSpec(config.method, amount, config.section_name)
    injected, record = manipulations.inject(pe, spec, init_perturbation(amount, config.seed))
    trace.record = record
    current = pe_format.serialize(injected)
    perturbation = manipulations.separate(current, record)

    score, img = _score(model, current)
    trace.scores.append(score)
    trace.speeds.append(None)
    while True:
        if score < config.stop_threshold:
            trace.stop_reason = StopReason.SUCCESS
            break
        if trace.t >= config.max_iterations:
            trace.stop_reason = StopReason.MAX_ITERATIONS
            break
        speed = trace.speeds[-1]
        if speed is not None and speed < config.speed_floor:
            trace.stop_reason = StopReason.SPEED_FLOOR
            break

        result = fgsm_inner(model, img, 1.0, config.epsilon, config.inner_cap, config.stop_threshold)
        trace.inner_steps.append(result.steps)
        trace.inner_exhausted.append(result.exhausted)
        native = imaging.to_native(result.image)
        perturbation = manipulations.separate(imaging.img2binary(native), record)
        current = manipulations.reinject(pe, record, perturbation)

        score, img = _score(model, current)
        trace.scores.append(score)
        trace.speeds.append(descent_speed(trace.scores[-config.speed_window:]))

    trace.adversarial = current
    return trace
