"""Collaborative training with dynamic teacher selection and block swapping,
plus every baseline mode, batch-norm calibration, and evaluation.

One training step runs every bit-width on the same batch with shared
weights. The highest precision always executes all-student and takes only
the task loss. Each lower precision picks the higher precision whose batch
entropy plus weighted weight-space distance is smallest, samples a swap
mask, executes with the chosen teacher's blocks swapped in where the mask
says so, and adds a distillation term against the teacher's (detached)
soft logits. All losses sum into one backward and one shared update.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from . import numerics
from .autograd import Tape, Tensor, no_grad
from .config import RunConfig
from .datasets import Dataset, gen_synthetic_blobs, load_idx
from .metrics import BatchRecord, EpochRecord, MetricsLog
from .network import ContractError, PrecisionBank, QuantNet, StatsCollector, SwapMask
from .optim import SGD, ParamGroup, step_decay_factor
from .rng import RngStreams


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# selection, swapping, losses
# ---------------------------------------------------------------------------

def entropy(probs: np.ndarray) -> float:
    """Mean over the batch of -sum_i p_i ln p_i. Zero entries contribute zero."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim == 1:
        p = p[None, :]
    terms = np.where(p > 0.0, p * numerics.clamped_log(p, "entropy_clamp"), 0.0)
    return float(-np.sum(terms) / p.shape[0])


@dataclass
class TeacherChoice:
    student_b: int
    teacher_b: int
    entropy_term: float
    distance_term: float
    lam: float
    epoch: int = 0
    batch_index: int = 0
    # every candidate's (entropy, distance), for auditing the argmin
    candidates: dict[int, tuple[float, float]] = None

    @property
    def score(self) -> float:
        return self.entropy_term + self.lam * self.distance_term


def select_teacher(student_b: int, teacher_probs: dict[int, np.ndarray], lam: float,
                   distance_fn, epoch: int = 0, batch_index: int = 0) -> TeacherChoice:
    """Pick the candidate minimizing entropy + lam * model distance.

    Candidates are the probabilities already computed this batch for every
    higher precision. Ties go to the higher bit-width.
    """
    if not teacher_probs:
        raise ContractError(f"bit-width {student_b} has no higher-precision teacher")
    terms: dict[int, tuple[float, float]] = {}
    best: TeacherChoice | None = None
    for t in sorted(teacher_probs, reverse=True):
        if t <= student_b:
            raise ContractError(f"teacher candidate {t} is not above student {student_b}")
        ent = entropy(teacher_probs[t])
        dist = float(distance_fn(t, student_b))
        terms[t] = (ent, dist)
        cand = TeacherChoice(student_b, t, ent, dist, lam, epoch, batch_index)
        if best is None or cand.score < best.score:
            best = cand
    best.candidates = terms
    return best


@dataclass
class SwapSchedule:
    """Linear curriculum on the base swap probability, hitting 1 at the end."""

    p1_initial: float
    epochs_total: int

    def __post_init__(self):
        if not 0.0 < self.p1_initial <= 1.0:
            raise ValueError(f"p1_initial must be in (0, 1], got {self.p1_initial}")

    def p1_at(self, epoch: int) -> float:
        if self.epochs_total <= 1 or epoch >= self.epochs_total - 1:
            return 1.0
        t = epoch / (self.epochs_total - 1)
        return min(1.0, self.p1_initial + (1.0 - self.p1_initial) * t)


def layer_probs(num_blocks: int, p1: float) -> np.ndarray:
    """Per-block student probabilities: p_l = min(1, (1 + l/L) p1), l = 1..L."""
    if num_blocks == 0:
        return np.zeros(0)
    l = np.arange(1, num_blocks + 1, dtype=np.float64)
    return np.minimum(1.0, (1.0 + l / num_blocks) * p1)


def sample_swap_mask(num_blocks: int, p1: float, rng: np.random.Generator) -> SwapMask:
    if not 0.0 < p1 <= 1.0:
        raise ValueError(f"p1 must be in (0, 1], got {p1}")
    probs = layer_probs(num_blocks, p1)
    return SwapMask(rng.random(num_blocks) < probs)


@dataclass
class LossParts:
    loss: Tensor
    probs: Tensor
    ce: float
    kl: float


def loss_for_bit(b: int, logits: Tensor, labels: np.ndarray,
                 teacher_probs: Tensor | np.ndarray | None = None) -> LossParts:
    """Task loss plus, for lower precisions, distillation against the teacher.

    The teacher distribution is detached: the distillation term moves only
    the student-side execution.
    """
    probs = ag.softmax(logits)
    ce = ag.cross_entropy(probs, labels)
    if teacher_probs is None:
        return LossParts(ce, probs, float(ce.data), 0.0)
    t = teacher_probs.detach() if isinstance(teacher_probs, Tensor) else Tensor(teacher_probs)
    kl = ag.kl_div(t, probs)
    return LossParts(ag.add(ce, kl), probs, float(ce.data), float(kl.data))


def delta_b(accuracies: dict[int, float], reference: dict[int, float]) -> float:
    """Mean over bit-widths of accuracy relative to the reference, in percent."""
    if set(accuracies) != set(reference):
        raise ValueError(f"bit coverage differs: {sorted(accuracies)} vs {sorted(reference)}")
    if any(v <= 0 for v in reference.values()):
        raise ValueError("reference accuracies must be positive")
    ratios = [accuracies[b] / reference[b] for b in accuracies]
    return 100.0 * sum(ratios) / len(ratios)


# ---------------------------------------------------------------------------
# the trainer
# ---------------------------------------------------------------------------

def load_dataset(spec) -> tuple[Dataset, Dataset]:
    """(train, eval) datasets for a DatasetSpec."""
    if spec.kind == "synthetic_blobs":
        train = gen_synthetic_blobs(spec.classes, spec.samples, spec.dim,
                                    spec.spread, spec.seed, spec.center_scale,
                                    "train", spec.center_offset)
        test = gen_synthetic_blobs(spec.classes, spec.eval_samples, spec.dim,
                                   spec.spread, spec.seed, spec.center_scale,
                                   "eval", spec.center_offset)
        return train, test
    if spec.kind == "idx_images":
        train = load_idx(spec.train_images, spec.train_labels, spec.mean, spec.std,
                         spec.classes or None)
        if spec.test_images:
            test = load_idx(spec.test_images, spec.test_labels, spec.mean, spec.std,
                            train.classes)
        else:
            test = train
        return train, test
    if spec.kind == "csv_table":
        def read_csv(path):
            table = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
            return Dataset(table[:, :-1], table[:, -1].astype(np.int64), spec.classes)
        train = read_csv(spec.path)
        test = read_csv(spec.eval_path) if spec.eval_path else train
        return train, test
    raise ValueError(f"unknown dataset kind {spec.kind!r}")


class Trainer:
    """Owns the network, banks, optimizer, RNG streams, and metrics for one run."""

    def __init__(self, config: RunConfig):
        config.validate()
        self.config = config
        self.bits = config.bit_set()
        self.arch = config.build_arch()
        self.train_set, self.eval_set = load_dataset(config.dataset)
        self.streams = RngStreams(config.seed)

        kind = config.mode_kind
        share_bn = kind == "joint"
        share_alpha = kind in ("joint", "switchable_bn")
        self.bank = PrecisionBank(self.bits, self.arch, alpha_init=config.alpha.init,
                                  bn_momentum=config.bn_momentum,
                                  share_bn=share_bn, share_alpha=share_alpha)
        self.net = QuantNet(self.arch, self.bits, self.bank, rng=self.streams["init"])

        bn_params, alpha_params = self.bank.named_parameters()
        main = dict(self.net.named_weights())
        main.update(bn_params)
        opt = config.optimizer
        self.optimizer = SGD([
            ParamGroup(main, lr=opt.lr, momentum=opt.momentum,
                       weight_decay=opt.weight_decay),
            ParamGroup(alpha_params, lr=config.alpha.lr, momentum=opt.momentum,
                       weight_decay=config.alpha.weight_decay,
                       min_value=numerics.ALPHA_FLOOR),
        ])
        self.swap_schedule = SwapSchedule(config.p1_initial, config.epochs)
        self.log = MetricsLog(config.to_json(), config.mode)
        self.epoch = 0
        self.calibrated_bits: set[int] = set()
        self.teacher_choices: list[TeacherChoice] = []

    # -- per-mode bit lists ---------------------------------------------------

    def _phase_bits(self, epoch: int) -> list[int]:
        """Bit-widths whose losses are optimized at this epoch."""
        kind = self.config.mode_kind
        if kind == "individual":
            return [self.config.mode_bit]
        if kind == "direct":
            return [self.config.mode_bit]
        if kind in ("progressive_desc", "progressive_asc"):
            order = list(self.bits) if kind == "progressive_desc" else list(self.bits)[::-1]
            n = len(order)
            base, extra = divmod(self.config.epochs, n)
            bounds, acc = [], 0
            for i in range(n):
                acc += base + (1 if i < extra else 0)
                bounds.append(acc)
            for i, end in enumerate(bounds):
                if epoch < end:
                    return [order[i]]
            return [order[-1]]
        return list(self.bits)

    # -- training -------------------------------------------------------------

    def train_step(self, xb: np.ndarray, yb: np.ndarray, epoch: int,
                   batch_index: int) -> list[BatchRecord]:
        """One batch: forward every active precision, one backward, one update."""
        cfg = self.config
        coquant = cfg.mode_kind == "coquant"
        active = self._phase_bits(epoch)
        self.net.begin_step()
        records: list[BatchRecord] = []
        num_blocks = self.arch.num_blocks
        p1 = self.swap_schedule.p1_at(epoch)
        with Tape() as tape:
            probs_by_bit: dict[int, Tensor] = {}
            total: Tensor | None = None
            for b in active:
                choice = None
                swap_fraction = 1.0
                if coquant and b != self.bits.b1:
                    candidates = {t: probs_by_bit[t].data for t in self.bits.teachers_of(b)}
                    choice = select_teacher(b, candidates, cfg.lam,
                                            self.net.model_distance, epoch, batch_index)
                    self.teacher_choices.append(choice)
                    mask = sample_swap_mask(num_blocks, p1, self.streams["swap"])
                    swap_fraction = mask.student_fraction
                    logits = self.net.forward_at(
                        xb, b, mask=mask if mask.any_teacher() else None,
                        teacher_b=choice.teacher_b, mode="train")
                    parts = loss_for_bit(b, logits, yb, probs_by_bit[choice.teacher_b])
                else:
                    logits = self.net.forward_at(xb, b, mode="train")
                    parts = loss_for_bit(b, logits, yb, None)
                probs_by_bit[b] = parts.probs
                total = parts.loss if total is None else ag.add(total, parts.loss)
                records.append(BatchRecord(
                    epoch=epoch, batch=batch_index, mode=cfg.mode, b=b,
                    loss=float(parts.loss.data), ce=parts.ce, kl=parts.kl,
                    teacher_b=choice.teacher_b if choice else None,
                    entropy_term=choice.entropy_term if choice else None,
                    distance_term=choice.distance_term if choice else None,
                    swap_student_fraction=swap_fraction,
                ))
        if not np.isfinite(total.data):
            raise TrainingError(
                f"non-finite loss at epoch {epoch} batch {batch_index}: {total.data}"
            )
        tape.backward(total)
        self.optimizer.step()
        self.optimizer.zero_grad()
        self.net.after_update()
        return records

    def train_epoch(self) -> EpochRecord:
        epoch = self.epoch
        cfg = self.config
        if cfg.optimizer.schedule == "step":
            self.optimizer.set_lr_factor(step_decay_factor(epoch, cfg.epochs))
        order = self.streams["shuffle"].permutation(len(self.train_set))
        for batch_index, (xb, yb) in enumerate(self.train_set.batches(cfg.batch_size, order)):
            for rec in self.train_step(xb, yb, epoch, batch_index):
                self.log.add_batch(rec)
        accuracy = {b: self.evaluate(b) for b in self._eval_bits(epoch)}
        record = self.log.end_epoch(epoch, accuracy)
        self.epoch += 1
        return record

    def _eval_bits(self, epoch: int) -> list[int]:
        kind = self.config.mode_kind
        if kind in ("individual", "direct"):
            return [self.config.mode_bit]
        return list(self.bits)

    def run(self) -> dict[int, float]:
        """Train to the configured epoch budget; returns final per-b accuracy."""
        while self.epoch < self.config.epochs:
            self.train_epoch()
        if self.config.mode_kind == "direct":
            # direct quantization reuses the source bank wholesale (statistics
            # included) at every other bit-width; calibration can fix them later
            src_entry = self.bank.entry(self.config.mode_bit)
            for b in self.bits:
                if b == self.config.mode_bit:
                    continue
                entry = self.bank.entry(b)
                for name, st in entry.bn.items():
                    st.copy_from(src_entry.bn[name])
                for name, a in entry.alpha.items():
                    a.data = src_entry.alpha[name].data.copy()
        return {b: self.evaluate(b) for b in self.bits}

    # -- evaluation / calibration ----------------------------------------------

    def evaluate(self, b: int, dataset: Dataset | None = None,
                 batch_size: int = 512) -> float:
        """Eval-mode top-1 accuracy in percent at bit-width b."""
        data = dataset if dataset is not None else self.eval_set
        correct = 0
        with no_grad():
            for xb, yb in data.batches(batch_size):
                logits = self.net.forward_at(xb, int(b), mode="eval")
                pred = np.argmax(logits.data, axis=1)
                correct += int(np.sum(pred == yb))
        return 100.0 * correct / len(data)

    def nearest_trained_bit(self, b: int) -> int:
        """Trained bit-width closest to b; ties round up."""
        trained = sorted(self.bank.entries)
        return min(trained, key=lambda t: (abs(t - b), -t))

    def ensure_direct_entry(self, b: int) -> None:
        """Bank entry for an untrained b, borrowing the nearest trained one."""
        if not self.bank.has(b):
            self.bank.ensure_entry(b, borrow_from=self.nearest_trained_bit(b))

    def calibrate(self, b: int, dataset: Dataset | None = None,
                  batch_size: int | None = None) -> None:
        """Zero-shot calibration: repopulate BN statistics for bit-width b.

        Weights and clipping values stay frozen; a missing bank entry is
        created by borrowing the nearest trained bit-width's parameters.
        """
        data = dataset if dataset is not None else self.train_set
        if len(data) == 0:
            raise TrainingError("calibration needs a non-empty dataset")
        b = int(b)
        self.ensure_direct_entry(b)
        entry = self.bank.entry(b)
        collector = StatsCollector()
        bs = batch_size or self.config.batch_size
        with no_grad():
            for xb, _ in data.batches(bs):
                self.net.forward_at(xb, b, mode="calibrate", collector=collector)
        for name, (mean, var) in collector.finalize().items():
            entry.bn[name].running_mean = mean
            entry.bn[name].running_var = var
        self.calibrated_bits.add(b)
