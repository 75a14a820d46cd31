"""
training on freshly sampled channel instances and Monte-Carlo BER evaluation

every step draws its batch from a generator seeded with (seed, step), so a run is
reproducible and independent of the worker count. Per-instance gradients may be
computed on worker threads, they are always reduced in batch order.
"""
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, TypeVar

import numpy as np
from scipy.stats import beta

from utils import log, worker_count

from .baselines import Detector
from .channel import Constellation, MimoInstance, load_instances, make_constellation, sample_instance
from .models import BerRecord, TrainStep
from .network import SgtConfig, SgtDetector, SgtModel, forward, save_checkpoint
from .tensor import GradTape, NonFiniteError, Tensor, backward, binary_cross_entropy
from .tokenizer import bits_to_prob, llr_to_prob

SCHEDULES = ("cosine", "constant")

_CONSTELLATION_BY_BITS = {1: "qpsk", 2: "16qam", 3: "64qam"}

T = TypeVar("T")
R = TypeVar("R")


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, step: int, checkpoint: str = ""):
        super().__init__(message)
        self.step = step
        self.checkpoint = checkpoint


@dataclass
class TrainConfig:
    steps: int = 20000
    batch_size: int = 128
    learning_rate: float = 1e-3
    min_learning_rate: float = 0.0
    warmup_steps: int = 0
    schedule: str = "cosine"
    snr_low: float = 0.0
    snr_high: float = 15.0
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 1.0  # global gradient norm, 0 disables
    # share of instances that get decoder-style soft priors instead of uninformative ones
    prior_fraction: float = 0.25
    prior_llr_max: float = 8.0
    checkpoint_every: int = 1000
    log_every: int = 100
    val_every: int = 0
    val_snrs: List[float] = field(default_factory=list)
    val_trials: int = 200
    dataset: str = ""  # .npz instance dump, trains on a fixed dataset when set

    def __post_init__(self) -> None:
        if self.batch_size < 1 or self.steps < 1:
            raise ValueError("batch_size and steps must be at least 1")
        if not self.snr_high > self.snr_low:
            raise ValueError(f"snr range [{self.snr_low}, {self.snr_high}] is degenerate")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}, got {self.schedule}")
        if not 0.0 <= self.prior_fraction <= 1.0:
            raise ValueError(f"prior_fraction must be in [0, 1], got {self.prior_fraction}")
        if self.seed < 0:
            raise ValueError(f"seed must be non-negative, got {self.seed}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class TrainLog:
    steps: List[int] = field(default_factory=list)
    losses: List[float] = field(default_factory=list)
    learning_rates: List[float] = field(default_factory=list)
    validation: Dict[int, Dict[float, float]] = field(default_factory=dict)
    wall_clock: float = field(default=0.0, compare=False)

    def append(self, step: int, loss_value: float, lr: float) -> None:
        self.steps.append(step)
        self.losses.append(loss_value)
        self.learning_rates.append(lr)

    def smoothed(self, window: int) -> np.ndarray:
        losses = np.asarray(self.losses)
        window = max(1, min(window, len(losses)))
        csum = np.concatenate([[0.0], np.cumsum(losses)])
        return (csum[window:] - csum[:-window]) / window

    def final_loss(self, window: int = 0) -> float:
        """mean loss over the last window steps, default the last 5% of training"""
        if not self.losses:
            return float("nan")
        window = window or max(1, len(self.losses) // 20)
        return float(np.mean(self.losses[-window:]))

    def steps_to_reach(self, target: float, window: int = 0) -> Optional[int]:
        """first step at which the windowed mean loss is at or below target"""
        window = window or max(1, len(self.losses) // 20)
        below = np.nonzero(self.smoothed(window) <= target)[0]
        if below.size == 0:
            return None
        return self.steps[int(below[0]) + window - 1]

    def rows(self, variant: str) -> List[TrainStep]:
        return [
            TrainStep(variant=variant, step=step, loss=loss_value, learning_rate=lr)
            for step, loss_value, lr in zip(self.steps, self.losses, self.learning_rates)
        ]

    def to_csv(self, path: str, header: Sequence[str] = ()) -> None:
        snrs = sorted({snr for point in self.validation.values() for snr in point})
        with open(path, "w", newline="") as f:
            for line in header:
                f.write(f"# {line}\n")
            f.write(",".join(["step", "loss", "lr"] + [f"val_ber@{snr:g}" for snr in snrs]) + "\n")
            for step, loss_value, lr in zip(self.steps, self.losses, self.learning_rates):
                point = self.validation.get(step, {})
                vals = [repr(point[snr]) if snr in point else "" for snr in snrs]
                f.write(",".join([str(step), repr(loss_value), repr(lr)] + vals) + "\n")


class Adam:
    def __init__(self, params: Dict[str, Tensor], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.t = 0

    def step(self, grads: Dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            g = grads[name]
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            p.data -= lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)


def learning_rate(step: int, cfg: TrainConfig) -> float:
    """linear warmup, then cosine decay from learning_rate toward min_learning_rate. The last step
    still gets a positive rate when min_learning_rate is 0"""
    if cfg.warmup_steps and step <= cfg.warmup_steps:
        return cfg.learning_rate * step / cfg.warmup_steps
    if cfg.schedule == "constant":
        return cfg.learning_rate
    progress = (step - 1 - cfg.warmup_steps) / max(1, cfg.steps - cfg.warmup_steps)
    span = cfg.learning_rate - cfg.min_learning_rate
    return cfg.min_learning_rate + 0.5 * span * (1.0 + math.cos(math.pi * progress))


def loss(pred: Tensor, target: np.ndarray) -> Tensor:
    """mean bitwise binary cross-entropy, target holds P(bit = 0) of the truth"""
    return binary_cross_entropy(pred, target)


def constellation_for(config: SgtConfig) -> Constellation:
    return make_constellation(_CONSTELLATION_BY_BITS[config.bits_per_dim])


def sample_priors(bits: np.ndarray, rng: np.random.Generator, llr_max: float) -> np.ndarray:
    """
    soft priors as a decoder would deliver them: consistent Gaussian LLRs with
    mean +-mu (positive for bit 0) and variance 2 mu, mu ~ U[0, llr_max]
    """
    mu = rng.uniform(0.0, llr_max)
    llr = mu * (1.0 - 2.0 * bits) + math.sqrt(2.0 * mu) * rng.standard_normal(bits.shape)
    return llr_to_prob(llr)


def _map(fn: Callable[[T], R], items: Sequence[T], pool: Optional[ThreadPoolExecutor]) -> List[R]:
    if pool is None:
        return [fn(item) for item in items]
    return list(pool.map(fn, items))


class BatchSampler:
    def __init__(
        self,
        cfg: TrainConfig,
        n_t: int,
        n_r: int,
        constellation: Constellation,
        snr_definition: str = "per-receive-antenna",
    ):
        self.cfg = cfg
        self.n_t, self.n_r = n_t, n_r
        self.constellation = constellation
        self.snr_definition = snr_definition
        self.dataset: List[MimoInstance] = load_instances(cfg.dataset) if cfg.dataset else []
        if self.dataset and (self.dataset[0].n_t, self.dataset[0].n_r) != (n_t, n_r):
            raise ValueError(f"dataset {cfg.dataset} does not hold {n_t}x{n_r} instances")

    def batch(self, step: int) -> List[Tuple[MimoInstance, Optional[np.ndarray]]]:
        cfg = self.cfg
        rng = np.random.default_rng([cfg.seed, step])
        if self.dataset:
            picks = rng.choice(len(self.dataset), size=cfg.batch_size, replace=len(self.dataset) < cfg.batch_size)
            instances = [self.dataset[int(k)] for k in picks]
        else:
            instances = [
                sample_instance(
                    self.n_t,
                    self.n_r,
                    float(rng.uniform(cfg.snr_low, cfg.snr_high)),
                    self.constellation,
                    rng,
                    self.snr_definition,
                )
                for _ in range(cfg.batch_size)
            ]

        batch = []
        for inst in instances:
            informed = rng.random() < cfg.prior_fraction
            priors = sample_priors(inst.bits, rng, cfg.prior_llr_max) if informed else None
            batch.append((inst, priors))
        return batch


def _instance_gradient(model: SgtModel, inst: MimoInstance, priors: Optional[np.ndarray]):
    params = model.parameters()
    with GradTape():
        value = loss(forward(inst, model, priors), bits_to_prob(inst.bits))
        grads = backward(value)
    return value.item(), {name: grads[p] for name, p in params.items()}


def _clip(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm and norm > max_norm:
        for name in grads:
            grads[name] = grads[name] * (max_norm / norm)
    return norm


def train(
    model: SgtModel,
    cfg: TrainConfig,
    constellation: Optional[Constellation] = None,
    snr_definition: str = "per-receive-antenna",
    checkpoint_path: str = "",
    workers: Optional[int] = None,
) -> Tuple[SgtModel, TrainLog]:
    """
    adaptive-moment training on bitwise cross-entropy, marks the model trained after the
    first step. A non-finite loss or parameter restores the last checkpointed parameters
    and raises TrainingAborted
    """
    mc = model.config
    constellation = constellation or constellation_for(mc)
    sampler = BatchSampler(cfg, mc.n_t, mc.n_r, constellation, snr_definition)
    params = model.parameters()
    optimizer = Adam(params, cfg.beta1, cfg.beta2, cfg.eps)
    workers = workers or worker_count()

    snapshot, snapshot_trained = model.state_dict(), model.trained
    train_log = TrainLog()
    started = time.monotonic()

    def abort(step: int, reason: str) -> TrainingAborted:
        model.load_state_dict(snapshot)
        model.trained = snapshot_trained
        if checkpoint_path:
            save_checkpoint(model, checkpoint_path)
        print(f"### training aborted at step {step}: {reason}")
        return TrainingAborted(f"training aborted at step {step}: {reason}", step, checkpoint_path)

    log(f"training {mc.variant} {mc.n_t}x{mc.n_r} d_model={mc.d_model} layers={mc.n_layers} for {cfg.steps} steps")
    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    try:
        for step in range(1, cfg.steps + 1):
            batch = sampler.batch(step)
            try:
                results = _map(lambda item: _instance_gradient(model, *item), batch, pool)
            except NonFiniteError as e:
                raise abort(step, str(e)) from e

            loss_value = float(np.mean([value for value, _ in results]))
            if not math.isfinite(loss_value):
                raise abort(step, f"loss is {loss_value}")

            grads = {name: np.zeros_like(p.data) for name, p in params.items()}
            for _, instance_grads in results:
                for name in grads:
                    grads[name] += instance_grads[name]
            for name in grads:
                grads[name] /= len(batch)
            grad_norm = _clip(grads, cfg.grad_clip)

            lr = learning_rate(step, cfg)
            optimizer.step(grads, lr)
            model.trained = True
            if not all(np.all(np.isfinite(p.data)) for p in params.values()):
                raise abort(step, "parameters became non-finite")

            train_log.append(step, loss_value, lr)

            if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                snapshot, snapshot_trained = model.state_dict(), True
                if checkpoint_path:
                    save_checkpoint(model, checkpoint_path)

            if cfg.val_every and cfg.val_snrs and step % cfg.val_every == 0:
                records = evaluate_ber(
                    SgtDetector(model.copy()),
                    cfg.val_snrs,
                    cfg.val_trials,
                    cfg.seed + 1,
                    mc.n_t,
                    mc.n_r,
                    constellation,
                    snr_definition,
                    min_errors=0,
                    workers=1,
                )
                train_log.validation[step] = {r.snr_db: r.ber for r in records}

            if cfg.log_every and step % cfg.log_every == 0:
                log(f"step {step:6,} loss {loss_value:.5f} lr {lr:.2e} grad norm {grad_norm:.3f}")
    finally:
        if pool is not None:
            pool.shutdown()

    if checkpoint_path:
        save_checkpoint(model, checkpoint_path)
    train_log.wall_clock = time.monotonic() - started
    log(f"finished {cfg.steps} steps in {train_log.wall_clock:.1f}s, final loss {train_log.final_loss():.5f}")
    return model, train_log


def binomial_interval(errors: int, bits: int, alpha: float = 0.05) -> Tuple[float, float]:
    """Clopper-Pearson interval for errors out of bits"""
    if bits == 0:
        return 0.0, 1.0
    low = float(beta.ppf(alpha / 2, errors, bits - errors + 1)) if errors > 0 else 0.0
    high = float(beta.ppf(1 - alpha / 2, errors + 1, bits - errors)) if errors < bits else 1.0
    return low, high


def _snr_key(snr_db: float) -> int:
    return int(round(snr_db * 1000)) + 2**31


def _count_errors(
    detector: Detector,
    n_t: int,
    n_r: int,
    snr_db: float,
    constellation: Constellation,
    snr_definition: str,
    seed: int,
    chunk: int,
    n: int,
) -> Tuple[int, int]:
    rng = np.random.default_rng([seed, _snr_key(snr_db), chunk])
    errors, bits = 0, 0
    for _ in range(n):
        inst = sample_instance(n_t, n_r, snr_db, constellation, rng, snr_definition)
        errors += int(np.sum(detector.detect(inst).bits != inst.bits))
        bits += inst.bits.size
    return errors, bits


def evaluate_ber(
    detector: Detector,
    snrs: Iterable[float],
    trials: int,
    seed: int,
    n_t: int,
    n_r: int,
    constellation: Optional[Constellation] = None,
    snr_definition: str = "per-receive-antenna",
    min_errors: int = 100,
    max_trials: Optional[int] = None,
    chunk_size: int = 100,
    workers: Optional[int] = None,
    config: str = "",
) -> List[BerRecord]:
    """
    bit error rate per SNR point. At least `trials` instances are run, then more until
    min_errors bit errors were counted or max_trials is reached. Instances are drawn in
    chunks seeded by (seed, snr, chunk index), so detectors evaluated with the same seed
    see the same instances and results do not depend on the worker count.
    """
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    constellation = constellation or make_constellation()
    workers = workers or worker_count()
    max_trials = max(max_trials or trials, trials)
    records = []

    def more(done: int, errors: int) -> bool:
        return done < trials or (errors < min_errors and done < max_trials)

    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    try:
        for snr_db in snrs:
            snr_db = float(snr_db)
            done = errors = bits = 0
            chunk = 0
            while more(done, errors):
                wave = []
                for i in range(workers):
                    start = (chunk + i) * chunk_size
                    if start >= max_trials:
                        break
                    wave.append((chunk + i, min(chunk_size, max_trials - start)))
                counts = _map(
                    lambda c: _count_errors(detector, n_t, n_r, snr_db, constellation, snr_definition, seed, *c),
                    wave,
                    pool,
                )
                for (_, n), (e, b) in zip(wave, counts):
                    if not more(done, errors):
                        break
                    done, errors, bits = done + n, errors + e, bits + b
                chunk += len(wave)

            low, high = binomial_interval(errors, bits)
            record = BerRecord(
                detector=detector.name,
                snr_db=snr_db,
                errors=errors,
                bits=bits,
                trials=done,
                ci_low=low,
                ci_high=high,
                config=config,
                capped=errors < min_errors,
            )
            records.append(record)
            log(f"{detector.name:>18} {snr_db:5.1f} dB  BER {record.ber:.3e}  [{low:.2e}, {high:.2e}]  trials {done:,}")
    finally:
        if pool is not None:
            pool.shutdown()
    return records


@dataclass
class AblationResult:
    variant: str
    final_loss: float
    steps_to_reference: Optional[int]
    log: TrainLog
    ber: List[BerRecord] = field(default_factory=list)
    model: Optional[SgtModel] = None


def ablate(
    base: SgtConfig,
    cfg: TrainConfig,
    variants: Sequence[str] = ("full-sgt", "no-cross-attention", "qr-baseline"),
    snrs: Sequence[float] = (),
    trials: int = 0,
    seed: int = 0,
    constellation: Optional[Constellation] = None,
    snr_definition: str = "per-receive-antenna",
    checkpoint_dir: str = "",
    reference: str = "no-cross-attention",
    config: str = "",
) -> List[AblationResult]:
    """
    trains every variant with the identical TrainConfig (same data stream, steps and schedule)
    and reports final loss, steps needed to reach the reference variant's final loss and BER
    """
    results = []
    for variant in variants:
        model = SgtModel(replace(base, variant=variant))
        ckpt = os.path.join(checkpoint_dir, f"checkpoint-{variant}.npz") if checkpoint_dir else ""
        model, train_log = train(model, cfg, constellation, snr_definition, ckpt)
        records = []
        if snrs and trials:
            records = evaluate_ber(
                SgtDetector(model),
                snrs,
                trials,
                seed,
                base.n_t,
                base.n_r,
                constellation,
                snr_definition,
                config=config,
            )
        results.append(AblationResult(variant, train_log.final_loss(), None, train_log, records, model))

    target = next((r.final_loss for r in results if r.variant == reference), None)
    if target is not None:
        for r in results:
            r.steps_to_reference = r.log.steps_to_reach(target)
    return results
