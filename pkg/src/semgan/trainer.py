"""Deterministic adversarial training loop.

Each step runs four phases in a fixed order: (1) forward both generators
(adaptation and cycle), (2) compute the generator-side total and update
both generators, (3) push the detached adapted images (with their source
masks) through the history buffers, (4) update both discriminators on
real images versus history-sampled fakes with the least-squares loss.

Everything that evolves across steps (parameters, optimizer moments,
buffer contents and RNG states, counters) round-trips bitwise through
checkpoints, so a resumed run reproduces the uninterrupted one exactly.
"""

from __future__ import annotations

import json
import math
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import engine
from .data import ScenePair, load_corpus
from .engine import Graph, Tensor
from .losses import (
    LossReport,
    LossWeights,
    SoftnessParams,
    cycle_loss,
    discriminator_loss_ls,
    full_grad_objective,
    generator_adv_loss_ls,
    total_objective,
)
from .networks import (
    DiscriminatorConfig,
    GeneratorConfig,
    GeneratorNet,
    SemanticDiscriminatorNet,
    discriminator_receptive_dims,
    load_records,
    one_hot_mask,
    save_records,
    sd_forward,
)

ADAM_BETA1 = 0.5
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

METRIC_COLUMNS = ("step", "adv_g_v2r", "adv_g_r2v", "adv_d_r", "adv_d_v",
                  "cycle", "grad_sens", "total", "epoch", "alpha", "beta")

CHECKPOINT_FORMAT = 1


class ValidationError(ValueError):
    """One or more configuration constraints violated; lists all of them."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class TrainingDivergedError(RuntimeError):
    """Non-finite loss or gradient encountered."""


def parse_schedule(text: str):
    """Parse 'start:alpha,beta;start:alpha,beta' into ordered entries."""
    entries = []
    for chunk in text.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        try:
            start_text, pair_text = chunk.split(":")
            alpha_text, beta_text = pair_text.split(",")
            entries.append((int(start_text), float(alpha_text), float(beta_text)))
        except ValueError as exc:
            raise ValueError(
                f"schedule entry {chunk!r} is not 'epoch:alpha,beta'"
            ) from exc
    if not entries:
        raise ValueError("schedule has no entries")
    return entries


@dataclass
class TrainConfig:
    lambda_c: float = 10.0
    lambda_g: float = 5.0
    alpha_beta_schedule: str = "1:1,0;4:0.9,0.1"
    learning_rate: float = 0.0002
    batch_size: int = 1
    epochs: int = 10
    image_height: int = 64
    image_width: int = 128
    num_classes: int = 4
    history_capacity: int = 50
    seed: int = 0
    checkpoint_dir: str = "checkpoints"
    metrics_path: str = "metrics.csv"
    checkpoint_interval: int = 0
    gen_depth: int = 4
    gen_base_width: int = 32
    disc_base_width: int = 32
    disc_blocks: int = 4
    semantic_discriminator: bool = True

    def validate(self):
        """Collect every violated constraint (empty list when valid)."""
        problems = []
        if self.lambda_c < 0 or self.lambda_g < 0:
            problems.append(f"lambda_c/lambda_g must be >= 0, got {self.lambda_c}/{self.lambda_g}")
        try:
            entries = parse_schedule(self.alpha_beta_schedule)
        except ValueError as exc:
            problems.append(str(exc))
            entries = []
        for start, alpha, beta in entries:
            if start < 1:
                problems.append(f"schedule epoch {start} must be >= 1")
            try:
                SoftnessParams(alpha, beta)
            except ValueError as exc:
                problems.append(f"schedule entry for epoch {start}: {exc}")
        if entries:
            starts = [start for start, _, _ in entries]
            if starts != sorted(starts) or len(set(starts)) != len(starts):
                problems.append("schedule epochs must be strictly increasing")
            if starts[0] != 1:
                problems.append("schedule must start at epoch 1")
        if self.learning_rate <= 0:
            problems.append(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size != 1:
            problems.append(f"batch_size must be 1, got {self.batch_size}")
        if self.epochs < 0:
            problems.append(f"epochs must be >= 0, got {self.epochs}")
        factor = 2 ** self.gen_depth
        if self.image_height % factor or self.image_width % factor:
            problems.append(
                f"image dims {self.image_height}x{self.image_width} must be "
                f"divisible by 2^gen_depth = {factor}"
            )
        if self.num_classes < 1:
            problems.append(f"num_classes must be >= 1, got {self.num_classes}")
        if self.history_capacity < 0:
            problems.append(f"history_capacity must be >= 0, got {self.history_capacity}")
        if self.checkpoint_interval < 0:
            problems.append(f"checkpoint_interval must be >= 0, got {self.checkpoint_interval}")
        if self.gen_depth < 2:
            problems.append(f"gen_depth must be >= 2, got {self.gen_depth}")
        if self.disc_blocks < 1:
            problems.append(f"disc_blocks must be >= 1, got {self.disc_blocks}")
        return problems

    def schedule_entries(self):
        return parse_schedule(self.alpha_beta_schedule)

    def alpha_beta_for_epoch(self, epoch: int):
        """Softness pair in force during a 1-based epoch."""
        current = None
        for start, alpha, beta in self.schedule_entries():
            if start <= epoch:
                current = (alpha, beta)
        if current is None:
            raise ValueError(f"schedule has no entry covering epoch {epoch}")
        return current


class HistoryBuffer:
    """Replay pool of past adapted images (with their masks).

    When full, each push returns, with probability 1/2, a uniformly drawn
    stored item whose slot the new item takes; otherwise the new item
    passes straight through. Below capacity it inserts and passes through.
    """

    def __init__(self, capacity: int, rng: np.random.Generator):
        if capacity < 0:
            raise ValueError(f"history capacity must be >= 0, got {capacity}")
        self.capacity = capacity
        self.rng = rng
        self.items: list[tuple] = []

    def push_sample(self, image: np.ndarray, mask: np.ndarray):
        if self.capacity == 0:
            return image, mask
        if len(self.items) < self.capacity:
            self.items.append((image, mask))
            return image, mask
        if self.rng.random() < 0.5:
            index = int(self.rng.integers(0, self.capacity))
            stored = self.items[index]
            self.items[index] = (image, mask)
            return stored
        return image, mask


def history_push_sample(buffer: HistoryBuffer, image: np.ndarray, mask: np.ndarray):
    return buffer.push_sample(image, mask)


@dataclass
class TrainState:
    config: TrainConfig
    g_v2r: GeneratorNet
    g_r2v: GeneratorNet
    d_r: SemanticDiscriminatorNet
    d_v: SemanticDiscriminatorNet
    moments: dict
    history_r: HistoryBuffer
    history_v: HistoryBuffer
    step: int = 0
    epoch: int = 0
    pos: int = 0

    def named_networks(self):
        return (("g_v2r", self.g_v2r), ("g_r2v", self.g_r2v),
                ("d_r", self.d_r), ("d_v", self.d_v))


def _derived_seed(seed: int, stream: int) -> int:
    return int(np.random.SeedSequence([int(seed), stream]).generate_state(1)[0])


def init_train_state(cfg: TrainConfig) -> TrainState:
    problems = cfg.validate()
    if problems:
        raise ValidationError(problems)
    disc_classes = cfg.num_classes if cfg.semantic_discriminator else 1
    g_v2r = GeneratorNet(GeneratorConfig(cfg.gen_depth, cfg.gen_base_width, 3,
                                         _derived_seed(cfg.seed, 1)))
    g_r2v = GeneratorNet(GeneratorConfig(cfg.gen_depth, cfg.gen_base_width, 3,
                                         _derived_seed(cfg.seed, 2)))
    d_r = SemanticDiscriminatorNet(DiscriminatorConfig(
        disc_classes, cfg.disc_base_width, cfg.disc_blocks, 3, _derived_seed(cfg.seed, 3)))
    d_v = SemanticDiscriminatorNet(DiscriminatorConfig(
        disc_classes, cfg.disc_base_width, cfg.disc_blocks, 3, _derived_seed(cfg.seed, 4)))
    state = TrainState(
        config=cfg, g_v2r=g_v2r, g_r2v=g_r2v, d_r=d_r, d_v=d_v,
        moments={}, history_r=HistoryBuffer(
            cfg.history_capacity, np.random.default_rng([int(cfg.seed), 21])),
        history_v=HistoryBuffer(
            cfg.history_capacity, np.random.default_rng([int(cfg.seed), 22])),
    )
    for net_name, net in state.named_networks():
        for name, tensor in net.parameters().items():
            key = f"{net_name}/{name}"
            state.moments[key] = [np.zeros(tensor.shape, np.float32),
                                  np.zeros(tensor.shape, np.float32)]
    return state


@contextmanager
def frozen(*nets):
    """Temporarily clear requires_grad so backward skips these parameters."""
    tensors = [t for net in nets for t in net.parameters().values()]
    saved = [t.requires_grad for t in tensors]
    for t in tensors:
        t.requires_grad = False
    try:
        yield
    finally:
        for t, flag in zip(tensors, saved):
            t.requires_grad = flag


def adam_update(params: dict, grads: dict, moments: dict, lr: float,
                beta1: float, beta2: float, eps: float, step: int) -> None:
    """Bias-corrected adaptive-moment update, in place, float32 throughout."""
    if step < 1:
        raise ValueError(f"adam step count is 1-based, got {step}")
    bias1 = 1.0 - beta1 ** step
    bias2 = 1.0 - beta2 ** step
    for name, param in params.items():
        grad = grads[name]
        if grad is None:
            raise TrainingDivergedError(f"parameter {name!r} received no gradient")
        if not np.all(np.isfinite(grad)):
            raise TrainingDivergedError(f"non-finite gradient for parameter {name!r}")
        m, v = moments[name]
        m *= beta1
        m += (1.0 - beta1) * grad
        v *= beta2
        v += (1.0 - beta2) * (grad * grad)
        update = (m / bias1) / (np.sqrt(v / bias2) + eps)
        param.data -= np.float32(lr) * update


def _mask_for(state: TrainState, labels, hk: int, wk: int) -> Tensor:
    cfg = state.config
    if cfg.semantic_discriminator:
        return one_hot_mask(labels, cfg.num_classes, hk, wk)
    return Tensor(np.ones((labels.shape[0], 1, hk, wk), np.float32))


def _score_dims(state: TrainState, image: Tensor):
    return discriminator_receptive_dims(state.d_r, image.shape[2], image.shape[3])


def _gen_params(state: TrainState) -> dict:
    named = {}
    for net_name, net in (("g_v2r", state.g_v2r), ("g_r2v", state.g_r2v)):
        for name, tensor in net.parameters().items():
            named[f"{net_name}/{name}"] = tensor
    return named


def _disc_params(state: TrainState) -> dict:
    named = {}
    for net_name, net in (("d_r", state.d_r), ("d_v", state.d_v)):
        for name, tensor in net.parameters().items():
            named[f"{net_name}/{name}"] = tensor
    return named


def _clear_grads(params: dict) -> None:
    for tensor in params.values():
        tensor.grad = None


def generator_objective(state: TrainState, v: ScenePair, r: ScenePair,
                        softness: SoftnessParams) -> float:
    """Forward-only evaluation of the generator-side total at the current
    parameters (no graph, no updates)."""
    cfg = state.config
    weights = LossWeights(cfg.lambda_c, cfg.lambda_g)
    fake_r = state.g_v2r.forward(v.image)
    cyc_v = state.g_r2v.forward(fake_r)
    fake_v = state.g_r2v.forward(r.image)
    cyc_r = state.g_v2r.forward(fake_v)
    hk, wk = _score_dims(state, v.image)
    mask_v = _mask_for(state, v.labels, hk, wk)
    mask_r = _mask_for(state, r.labels, hk, wk)
    adv_v2r = generator_adv_loss_ls(sd_forward(state.d_r, fake_r, mask_v))
    adv_r2v = generator_adv_loss_ls(sd_forward(state.d_v, fake_v, mask_r))
    cyc = cycle_loss(v.image, cyc_v, r.image, cyc_r)
    grad_sens = full_grad_objective(v.image, fake_r, v.labels,
                                    r.image, fake_v, r.labels, softness)
    return total_objective(adv_v2r, adv_r2v, cyc, grad_sens, weights).item()


def generator_update(state: TrainState, v: ScenePair, r: ScenePair,
                     softness: SoftnessParams):
    """Phase 1+2: forward both generators, update them on the full
    generator-side objective. Discriminators stay untouched (frozen)."""
    cfg = state.config
    weights = LossWeights(cfg.lambda_c, cfg.lambda_g)
    hk, wk = _score_dims(state, v.image)
    mask_v = _mask_for(state, v.labels, hk, wk)
    mask_r = _mask_for(state, r.labels, hk, wk)
    with Graph() as graph:
        with frozen(state.d_r, state.d_v):
            fake_r = state.g_v2r.forward(v.image)
            cyc_v = state.g_r2v.forward(fake_r)
            fake_v = state.g_r2v.forward(r.image)
            cyc_r = state.g_v2r.forward(fake_v)
            adv_v2r = generator_adv_loss_ls(sd_forward(state.d_r, fake_r, mask_v))
            adv_r2v = generator_adv_loss_ls(sd_forward(state.d_v, fake_v, mask_r))
            cyc = cycle_loss(v.image, cyc_v, r.image, cyc_r)
            grad_sens = full_grad_objective(v.image, fake_r, v.labels,
                                            r.image, fake_v, r.labels, softness)
            total = total_objective(adv_v2r, adv_r2v, cyc, grad_sens, weights)
    graph.backward(total)
    params = _gen_params(state)
    grads = {name: tensor.grad for name, tensor in params.items()}
    adam_update(params, grads, state.moments, cfg.learning_rate,
                ADAM_BETA1, ADAM_BETA2, ADAM_EPS, state.step + 1)
    _clear_grads(params)
    parts = {
        "adv_g_v2r": adv_v2r.item(),
        "adv_g_r2v": adv_r2v.item(),
        "cycle": cyc.item(),
        "grad_sens": grad_sens.item(),
    }
    return parts, fake_r.detach(), mask_v, fake_v.detach(), mask_r


def discriminator_update(state: TrainState, v: ScenePair, r: ScenePair,
                         fake_r: Tensor, hist_mask_v: Tensor,
                         fake_v: Tensor, hist_mask_r: Tensor,
                         mask_v: Tensor, mask_r: Tensor):
    """Phase 4: least-squares update of both discriminators against real
    images and (history-sampled) fakes."""
    cfg = state.config
    with Graph() as graph:
        score_real_r = sd_forward(state.d_r, r.image, mask_r)
        score_fake_r = sd_forward(state.d_r, fake_r, hist_mask_v)
        loss_d_r = discriminator_loss_ls(score_real_r, score_fake_r)
        score_real_v = sd_forward(state.d_v, v.image, mask_v)
        score_fake_v = sd_forward(state.d_v, fake_v, hist_mask_r)
        loss_d_v = discriminator_loss_ls(score_real_v, score_fake_v)
        d_total = engine.add(loss_d_r, loss_d_v)
    graph.backward(d_total)
    params = _disc_params(state)
    grads = {name: tensor.grad for name, tensor in params.items()}
    adam_update(params, grads, state.moments, cfg.learning_rate,
                ADAM_BETA1, ADAM_BETA2, ADAM_EPS, state.step + 1)
    _clear_grads(params)
    return {"adv_d_r": loss_d_r.item(), "adv_d_v": loss_d_v.item()}


def train_step(state: TrainState, v: ScenePair, r: ScenePair,
               cfg: TrainConfig) -> LossReport:
    """One full step at the softness pair of the current epoch."""
    alpha, beta = cfg.alpha_beta_for_epoch(state.epoch + 1)
    softness = SoftnessParams(alpha, beta)
    gen_parts, fake_r, mask_v, fake_v, mask_r = generator_update(state, v, r, softness)

    hist_img_r, hist_mask_v = state.history_r.push_sample(fake_r.data, mask_v.data)
    hist_img_v, hist_mask_r = state.history_v.push_sample(fake_v.data, mask_r.data)

    disc_parts = discriminator_update(
        state, v, r, Tensor(hist_img_r), Tensor(hist_mask_v),
        Tensor(hist_img_v), Tensor(hist_mask_r), mask_v, mask_r)

    report = LossReport.from_components(
        gen_parts["adv_g_v2r"], gen_parts["adv_g_r2v"],
        disc_parts["adv_d_r"], disc_parts["adv_d_v"],
        gen_parts["cycle"], gen_parts["grad_sens"],
        LossWeights(cfg.lambda_c, cfg.lambda_g))
    if not all(math.isfinite(value) for value in report.csv_values()):
        raise TrainingDivergedError(
            f"step {state.step}: non-finite loss in {report}")
    state.step += 1
    return report


def epoch_permutation(seed: int, epoch: int, n: int) -> np.ndarray:
    """Shuffle order for one epoch, a pure function of (seed, epoch)."""
    return np.random.default_rng([int(seed), 1009, int(epoch)]).permutation(n)


def _format_value(value) -> str:
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return str(np.float32(value))


def metric_row(step: int, report: LossReport, epoch: int,
               alpha: float, beta: float) -> str:
    values = [step] + report.csv_values() + [epoch, alpha, beta]
    return ",".join(_format_value(v) for v in values)


def run_training(cfg: TrainConfig, virtual_dir, real_dir, resume_from=None,
                 log=None) -> TrainState:
    """Epoch loop over the smaller corpus with fresh per-epoch shuffles.

    Appends one CSV row per step to cfg.metrics_path and writes
    checkpoints to cfg.checkpoint_dir (every cfg.checkpoint_interval
    steps when nonzero, plus final.ckpt at the end).
    """
    problems = cfg.validate()
    if problems:
        raise ValidationError(problems)
    if resume_from is not None:
        state = checkpoint_load(resume_from)
        saved = asdict(state.config)
        wanted = asdict(cfg)
        for path_field in ("metrics_path", "checkpoint_dir"):  # I/O locations only
            saved.pop(path_field)
            wanted.pop(path_field)
        if saved != wanted:
            diffs = [f"{key}: checkpoint={saved[key]!r} requested={wanted[key]!r}"
                     for key in saved if saved[key] != wanted[key]]
            raise ValidationError(
                ["checkpoint config differs from requested config"] + diffs)
        state.config = cfg
    else:
        state = init_train_state(cfg)

    corpus_v = load_corpus(virtual_dir, cfg.num_classes)
    corpus_r = load_corpus(real_dir, cfg.num_classes)
    for name, corpus in (("virtual", corpus_v), ("real", corpus_r)):
        if cfg.epochs > state.epoch and not corpus:
            raise ValidationError([f"{name} corpus at is empty"])
        for pair in corpus:
            if pair.image.shape[2:] != (cfg.image_height, cfg.image_width):
                raise ValidationError(
                    [f"{name} corpus has {pair.image.shape[2]}x{pair.image.shape[3]} "
                     f"images, config expects {cfg.image_height}x{cfg.image_width}"])

    steps_per_epoch = min(len(corpus_v), len(corpus_r))
    metrics_path = Path(cfg.metrics_path)
    metrics_path.parent.mkdir(parents=True, exist_ok=True)
    checkpoint_dir = Path(cfg.checkpoint_dir)
    checkpoint_dir.mkdir(parents=True, exist_ok=True)
    write_header = not metrics_path.exists() or metrics_path.stat().st_size == 0

    with open(metrics_path, "a") as metrics:
        if write_header:
            metrics.write(",".join(METRIC_COLUMNS) + "\n")
        while state.epoch < cfg.epochs:
            order_v = epoch_permutation(cfg.seed, state.epoch, len(corpus_v))
            order_r = epoch_permutation(cfg.seed, state.epoch + 500000, len(corpus_r))
            while state.pos < steps_per_epoch:
                v = corpus_v[order_v[state.pos]]
                r = corpus_r[order_r[state.pos]]
                report = train_step(state, v, r, cfg)
                state.pos += 1
                alpha, beta = cfg.alpha_beta_for_epoch(state.epoch + 1)
                metrics.write(metric_row(state.step, report, state.epoch + 1,
                                         alpha, beta) + "\n")
                metrics.flush()
                if log is not None:
                    log(f"step {state.step} epoch {state.epoch + 1} "
                        f"total {report.total:.4f}")
                if cfg.checkpoint_interval and state.step % cfg.checkpoint_interval == 0:
                    checkpoint_save(checkpoint_dir / f"step_{state.step:06d}.ckpt", state)
            state.pos = 0
            state.epoch += 1
    checkpoint_save(checkpoint_dir / "final.ckpt", state)
    return state


# ---------------------------------------------------------------------------
# checkpointing: the parameter container plus one JSON manifest record


def _json_to_record(payload: dict) -> np.ndarray:
    raw = json.dumps(payload, sort_keys=True).encode("utf-8")
    raw += b" " * (-len(raw) % 4)
    return np.frombuffer(raw, dtype="<f4").reshape(1, 1, 1, -1).copy()


def _record_to_json(record: np.ndarray) -> dict:
    return json.loads(np.ascontiguousarray(record, dtype="<f4").tobytes().decode("utf-8"))


def checkpoint_save(path, state: TrainState) -> None:
    """Serialize the whole training state; bitwise reproducible."""
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "config": asdict(state.config),
        "step": state.step,
        "epoch": state.epoch,
        "pos": state.pos,
        "history_r": {"rng": state.history_r.rng.bit_generator.state,
                      "count": len(state.history_r.items)},
        "history_v": {"rng": state.history_v.rng.bit_generator.state,
                      "count": len(state.history_v.items)},
    }
    records = {"__manifest__": _json_to_record(manifest)}
    for net_name, net in state.named_networks():
        for name, tensor in net.parameters().items():
            records[f"params/{net_name}/{name}"] = tensor.data
    for key, (m, v) in state.moments.items():
        records[f"adam_m/{key}"] = m
        records[f"adam_v/{key}"] = v
    for buf_name, buf in (("history_r", state.history_r), ("history_v", state.history_v)):
        for i, (image, mask) in enumerate(buf.items):
            records[f"{buf_name}/{i}/image"] = image
            records[f"{buf_name}/{i}/mask"] = mask
    save_records(path, records)


def checkpoint_load(path) -> TrainState:
    """Rebuild a TrainState (networks included) from a checkpoint file."""
    records = load_records(path)
    if "__manifest__" not in records:
        raise ValidationError([f"{path}: checkpoint has no manifest record"])
    manifest = _record_to_json(records["__manifest__"])
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValidationError(
            [f"{path}: checkpoint format {manifest.get('format')}, "
             f"expected {CHECKPOINT_FORMAT}"])
    cfg = TrainConfig(**manifest["config"])
    state = init_train_state(cfg)
    state.step = int(manifest["step"])
    state.epoch = int(manifest["epoch"])
    state.pos = int(manifest["pos"])
    for net_name, net in state.named_networks():
        for name, tensor in net.parameters().items():
            tensor.data = np.ascontiguousarray(
                records[f"params/{net_name}/{name}"], dtype=np.float32)
    for key in state.moments:
        state.moments[key] = [
            np.ascontiguousarray(records[f"adam_m/{key}"], dtype=np.float32),
            np.ascontiguousarray(records[f"adam_v/{key}"], dtype=np.float32),
        ]
    for buf_name, buf in (("history_r", state.history_r), ("history_v", state.history_v)):
        info = manifest[buf_name]
        buf.rng.bit_generator.state = info["rng"]
        buf.items = []
        for i in range(info["count"]):
            buf.items.append((
                np.ascontiguousarray(records[f"{buf_name}/{i}/image"], np.float32),
                np.ascontiguousarray(records[f"{buf_name}/{i}/mask"], np.float32),
            ))
    return state
