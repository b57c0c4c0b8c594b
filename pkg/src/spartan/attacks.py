"""Perturbation norms, FGSM, and the surrogate black-box attack.

The white-box attack perturbs each input coordinate by +-epsilon along the
sign of the input gradient of the task loss, then clips back into the pixel
box.  The black-box attack never touches the target's internals: it trains a
substitute from label-only oracle queries (doubling its query set each round
along the substitute's class-score gradients) and transfers the substitute's
FGSM perturbations to the target.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import Dataset
from .layers import BuildConfig, Network, build_network
from .tensor import Rng, Tape, Tensor
from .training import TrainConfig, train

NORM_KINDS = ("l0", "l1", "l2", "linf")
LINF_SLACK = 1e-6


@dataclass
class AttackConfig:
    epsilon: float
    mode: str = "untargeted"
    target_class: int | None = None
    clip: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.mode not in ("untargeted", "targeted"):
            raise ValueError(f"unknown attack mode {self.mode!r}")
        if self.mode == "targeted":
            if self.target_class is None or not 0 <= self.target_class < 10:
                raise ValueError("targeted mode requires a target class in [0, 10)")
        lo, hi = self.clip
        if not lo < hi:
            raise ValueError("clip range must satisfy lo < hi")


@dataclass
class AdversarialBatch:
    originals: np.ndarray
    adversarials: np.ndarray
    true_labels: np.ndarray
    pred_original: np.ndarray
    pred_adversarial: np.ndarray
    success: np.ndarray
    linf: np.ndarray

    def success_rate(self) -> float:
        return float(self.success.mean()) if len(self.success) else 0.0

    def adversarial_accuracy(self) -> float:
        return float((self.pred_adversarial == self.true_labels).mean())


def perturbation_norm(perturbation: np.ndarray, kind: str) -> float:
    lam = np.asarray(perturbation, dtype=np.float64).reshape(-1)
    if kind == "l0":
        return float(np.count_nonzero(lam))
    if kind == "l1":
        return float(np.abs(lam).sum())
    if kind == "l2":
        return float(np.sqrt((lam * lam).sum()))
    if kind == "linf":
        return float(np.abs(lam).max()) if lam.size else 0.0
    raise ValueError(f"unknown norm {kind!r}; expected one of {NORM_KINDS}")


def input_gradient(net: Network, images: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Gradient of the task loss (cross-entropy only) w.r.t. the input.

    Flows through the synthetic backward rules at filtering layers, so it is
    non-zero even where the true derivative of a Heaviside forward vanishes.
    """
    x = Tensor(np.asarray(images, dtype=net.build.dtype))
    with Tape() as tape:
        logits, _ = net.forward(x)
        loss = T.softmax_cross_entropy(logits, labels)
        (gx,) = tape.backward(loss, inputs=[x])
    return gx


def class_score_gradient(net: Network, images: np.ndarray, classes: np.ndarray) -> np.ndarray:
    """Gradient of the selected class logit w.r.t. the input, per sample."""
    x = Tensor(np.asarray(images, dtype=net.build.dtype))
    with Tape() as tape:
        logits, _ = net.forward(x)
        score = T.gather_sum(logits, classes)
        (gx,) = tape.backward(score, inputs=[x])
    return gx


def _judge(originals, adversarials, true_labels, pred_o, pred_a, cfg: AttackConfig):
    lam = adversarials - originals
    linf = np.abs(lam.reshape(len(lam), -1)).max(axis=1) if len(lam) else np.zeros(0)
    success = attack_success(pred_o, pred_a, true_labels, lam, cfg.epsilon, cfg.mode,
                             cfg.target_class)
    return AdversarialBatch(originals, adversarials, np.asarray(true_labels),
                            pred_o, pred_a, success, linf)


def fgsm(net: Network, images: np.ndarray, labels: np.ndarray,
         cfg: AttackConfig, gradient_net: Network | None = None,
         batch_size: int = 256) -> AdversarialBatch:
    """Single-step sign attack with clipping; sign(0) leaves a coordinate
    untouched.  ``gradient_net`` supplies the gradients when attacking via a
    substitute; predictions and success are always judged on ``net``."""
    images = np.asarray(images, dtype=net.build.dtype)
    labels = np.asarray(labels, dtype=np.int64)
    source = gradient_net if gradient_net is not None else net
    lo, hi = cfg.clip
    chunks = []
    for i in range(0, len(images), batch_size):
        bx, by = images[i : i + batch_size], labels[i : i + batch_size]
        if cfg.mode == "targeted":
            target = np.full(len(by), cfg.target_class, dtype=np.int64)
            lam = -cfg.epsilon * np.sign(input_gradient(source, bx, target))
        else:
            lam = cfg.epsilon * np.sign(input_gradient(source, bx, by))
        chunks.append(np.clip(bx + lam.astype(bx.dtype), lo, hi))
    adversarials = np.concatenate(chunks, axis=0) if chunks else images.copy()
    pred_o = net.predict(images)
    pred_a = net.predict(adversarials)
    return _judge(images, adversarials, labels, pred_o, pred_a, cfg)


def attack_success(original_pred, adv_pred, true_label, perturbation,
                   epsilon: float, mode: str = "untargeted",
                   target_class: int | None = None) -> np.ndarray:
    """Per-sample success flags.

    A sample counts only if it was correctly classified to begin with, the
    adversarial prediction moved off the true class, and the perturbation
    stayed within the budget; targeted mode additionally requires hitting
    the chosen class.
    """
    original_pred = np.atleast_1d(np.asarray(original_pred))
    adv_pred = np.atleast_1d(np.asarray(adv_pred))
    true_label = np.atleast_1d(np.asarray(true_label))
    lam = np.asarray(perturbation)
    if lam.ndim <= 1:
        linf = np.full(original_pred.shape, np.abs(lam).max() if lam.size else 0.0)
    else:
        linf = np.abs(lam.reshape(len(lam), -1)).max(axis=1)
    ok = (original_pred == true_label) & (adv_pred != true_label)
    ok &= linf <= epsilon + LINF_SLACK
    if mode == "targeted":
        ok &= adv_pred == target_class
    return ok


# ---------------------------------------------------------------------------
# surrogate black-box attack


class LabelOracle:
    """Query interface exposing nothing but predicted class indices."""

    def __init__(self, predict_fn):
        self._predict = predict_fn
        self.query_count = 0

    @classmethod
    def from_network(cls, net: Network) -> "LabelOracle":
        return cls(lambda images: net.predict(images))

    def __call__(self, images: np.ndarray) -> np.ndarray:
        labels = np.asarray(self._predict(images), dtype=np.int64)
        if labels.shape != (len(images),):
            raise ValueError("oracle must return one class index per sample")
        self.query_count += len(images)
        return labels


@dataclass
class SurrogateConfig:
    seed_size: int = 150
    rounds: int = 5
    aug_step: float = 0.1
    substitute: str = "standard"
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=10))
    clip: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.aug_step <= 0:
            raise ValueError("augmentation step must be > 0")


@dataclass
class SurrogateResult:
    network: Network
    query_count: int
    round_sizes: list[int]
    final_size: int


def train_surrogate(oracle: LabelOracle, cfg: SurrogateConfig,
                    seed_images: np.ndarray, rng: Rng | None = None) -> SurrogateResult:
    """Label-only substitute training with gradient-directed set doubling.

    Each round labels the current set through the oracle, fits a fresh
    substitute, then doubles the set by stepping every sample along the sign
    of the substitute's gradient for its oracle-assigned class.
    """
    rng = rng or Rng(cfg.train.seed)
    images = np.asarray(seed_images, dtype=np.float32)
    if images.ndim != 4:
        raise ValueError("seed set must be [N,1,H,W]")
    lo, hi = cfg.clip
    h, w = images.shape[2], images.shape[3]
    substitute = None
    round_sizes = []
    queries_before = oracle.query_count
    for round_idx in range(cfg.rounds):
        round_sizes.append(len(images))
        labels = oracle(images)
        build = BuildConfig(input_hw=(h, w),
                            seed=int(rng.split(round_idx).integers(0, 2**31)))
        substitute = build_network(cfg.substitute, build)
        round_cfg = TrainConfig(
            learning_rate=cfg.train.learning_rate,
            batch_size=cfg.train.batch_size,
            epochs=cfg.train.epochs,
            filter_scale=cfg.train.filter_scale,
            optimizer=cfg.train.optimizer,
            seed=int(rng.split(1000 + round_idx).integers(0, 2**31)),
        )
        train(substitute, Dataset(images, labels, "surrogate"), round_cfg)
        augmented = _jacobian_augment(substitute, images, labels, cfg.aug_step, lo, hi)
        images = np.concatenate([images, augmented], axis=0)
    return SurrogateResult(substitute, oracle.query_count - queries_before,
                           round_sizes, len(images))


def _jacobian_augment(substitute: Network, images: np.ndarray, labels: np.ndarray,
                      step: float, lo: float, hi: float,
                      batch_size: int = 256) -> np.ndarray:
    out = []
    for i in range(0, len(images), batch_size):
        bx, by = images[i : i + batch_size], labels[i : i + batch_size]
        grad = class_score_gradient(substitute, bx, by)
        out.append(np.clip(bx + step * np.sign(grad, dtype=bx.dtype), lo, hi))
    return np.concatenate(out, axis=0)


def black_box_fgsm(target: Network, surrogate: Network, images: np.ndarray,
                   labels: np.ndarray, cfg: AttackConfig) -> AdversarialBatch:
    """FGSM on the surrogate's gradients, judged on the target's predictions."""
    return fgsm(target, images, labels, cfg, gradient_net=surrogate)
