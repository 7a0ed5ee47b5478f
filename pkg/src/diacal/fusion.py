"""Frame-level fusion of several systems' speaker-activity scores."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import (
    DEFAULT_EPSILON,
    MULTILABEL,
    POWERSET,
    PROBABILITY,
    ContractError,
    FrameScoreMatrix,
    best_permutation,
    sigmoid,
    softmax,
)
from .optim import SIGMOID, SOFTMAX, CrossEntropyObjective, minimize_regularized_cross_entropy
from .spaces import to_logits, to_probabilities, power_to_mult

AVERAGE_PROBS = "average_probs"
AVERAGE_LOGITS = "average_logits"
DYNAMIC_LOGITS = "dynamic_logits"
ENTROPY = "entropy"
METALEARNER = "metalearner"
UNSUPERVISED = (AVERAGE_PROBS, AVERAGE_LOGITS, DYNAMIC_LOGITS, ENTROPY)
METHODS = UNSUPERVISED + (METALEARNER,)


@dataclass
class FusionInput:
    systems: list
    system_ids: list = field(default_factory=list)
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        if not self.systems:
            raise ContractError("fusion needs at least one system")
        self.systems = [to_probabilities(m) for m in self.systems]
        if not self.system_ids:
            self.system_ids = [f"sys{i}" for i in range(len(self.systems))]
        if len(self.system_ids) != len(self.systems):
            raise ContractError("one system id per system is required")
        ref = self.systems[0]
        for m in self.systems[1:]:
            if (m.values.shape != ref.values.shape or m.space != ref.space
                    or m.num_speakers != ref.num_speakers or m.frame_rate_hz != ref.frame_rate_hz):
                raise ContractError("fused systems must share frames, space, speakers and rate")

    @property
    def template(self) -> FrameScoreMatrix:
        return self.systems[0]

    @property
    def space(self) -> str:
        return self.template.space

    def probabilities(self) -> np.ndarray:
        """M x T x D stack."""
        return np.stack([m.values for m in self.systems])

    def logits(self) -> np.ndarray:
        return np.stack([to_logits(m, self.epsilon).values for m in self.systems])

    def link(self, z: np.ndarray) -> np.ndarray:
        return sigmoid(z) if self.space == MULTILABEL else softmax(z, axis=-1)

    def output(self, values: np.ndarray) -> FrameScoreMatrix:
        if self.space == POWERSET:
            values = values / values.sum(axis=1, keepdims=True)
        return self.template.replace(values=np.clip(values, 0.0, 1.0), kind=PROBABILITY)


def _as_input(inp) -> FusionInput:
    return inp if isinstance(inp, FusionInput) else FusionInput(list(inp))


def align_systems(anchor: FrameScoreMatrix, others) -> list[np.ndarray]:
    """Speaker permutations mapping each other system onto the anchor.

    For a returned ``perm``, ``other.values[:, perm]`` lines up with the anchor
    columns in the squared-error sense.
    """
    anchor = to_probabilities(anchor)
    if anchor.space == POWERSET:
        anchor = power_to_mult(anchor)
    a = anchor.values
    perms = []
    for other in others:
        other = to_probabilities(other)
        if other.space == POWERSET:
            other = power_to_mult(other)
        b = other.values
        if b.shape != a.shape:
            raise ContractError(f"cannot align shape {b.shape} to anchor {a.shape}")
        # cost[j, i]: anchor column j against other column i
        cost = (a * a).sum(0)[:, None] + (b * b).sum(0)[None, :] - 2.0 * a.T @ b
        perms.append(best_permutation(cost))
    return perms


def average_probs(inp) -> FrameScoreMatrix:
    inp = _as_input(inp)
    return inp.output(inp.probabilities().mean(axis=0))


def average_logits(inp) -> FrameScoreMatrix:
    inp = _as_input(inp)
    return inp.output(inp.link(inp.logits().mean(axis=0)))


def dynamic_logits(inp) -> FrameScoreMatrix:
    """Per-frame weights proportional to each system's summed absolute logits."""
    inp = _as_input(inp)
    z = inp.logits()
    mag = np.abs(z).sum(axis=2)  # M x T
    total = mag.sum(axis=0)
    m = z.shape[0]
    weights = np.divide(mag, total, out=np.full_like(mag, 1.0 / m), where=total > 0)
    return inp.output(inp.link(np.einsum("mt,mtd->td", weights, z)))


def entropy(p: np.ndarray, axis: int = -1) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    safe = np.where(p > 0, p, 1.0)
    return -(p * np.log(safe)).sum(axis=axis)


def max_entropy(space: str, num_speakers: int) -> float:
    # -sum p log p over S speakers reaches S/e > log S, hence the clamp on the
    # raw weights in entropy_fusion
    return float(np.log(num_speakers)) if space == MULTILABEL else num_speakers * float(np.log(2.0))


def entropy_fusion(inp) -> FrameScoreMatrix:
    inp = _as_input(inp)
    p = inp.probabilities()
    h_max = max_entropy(inp.space, inp.template.num_speakers)
    raw = np.maximum(h_max - entropy(p, axis=2), 0.0)  # M x T
    total = raw.sum(axis=0)
    m = p.shape[0]
    weights = np.divide(raw, total, out=np.full_like(raw, 1.0 / m), where=total > 0)
    return inp.output(np.einsum("mt,mtd->td", weights, p))


def _finite_or_none(x: float):
    return float(x) if np.isfinite(x) else None


def _float_or_nan(x) -> float:
    return float("nan") if x is None else float(x)


@dataclass
class MetaLearnerModel:
    weights: np.ndarray  # D x (M * D)
    bias: np.ndarray
    space: str
    num_speakers: int
    system_ids: list
    epsilon: float = DEFAULT_EPSILON
    training_loss: float = float("nan")
    objective: float = float("nan")

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        d = self.dim
        if self.weights.shape != (d, self.m_systems * d) or self.bias.shape != (d,):
            raise ContractError(
                f"metalearner for {self.m_systems} systems needs W {(d, self.m_systems * d)} and b ({d},)"
            )

    @property
    def dim(self) -> int:
        return self.num_speakers if self.space == MULTILABEL else 2 ** self.num_speakers

    @property
    def m_systems(self) -> int:
        return len(self.system_ids)

    def to_dict(self) -> dict:
        return {
            "space": self.space,
            "S": self.num_speakers,
            "D": self.dim,
            "m_systems": self.m_systems,
            "system_ids": list(self.system_ids),
            "weights": self.weights.ravel().tolist(),
            "bias": self.bias.tolist(),
            "epsilon": self.epsilon,
            "training_loss": _finite_or_none(self.training_loss),
            "objective": _finite_or_none(self.objective),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "MetaLearnerModel":
        try:
            space, s = doc["space"], int(doc["S"])
            ids = list(doc["system_ids"])
            d = s if space == MULTILABEL else 2 ** s
            return cls(
                weights=np.asarray(doc["weights"], dtype=np.float64).reshape(d, len(ids) * d),
                bias=doc["bias"],
                space=space,
                num_speakers=s,
                system_ids=ids,
                epsilon=float(doc.get("epsilon", DEFAULT_EPSILON)),
                training_loss=_float_or_nan(doc.get("training_loss")),
                objective=_float_or_nan(doc.get("objective")),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ContractError(f"malformed metalearner document: {exc}") from exc


def fit_metalearner(logits: list, targets, space: str, system_ids=None, l2_c: float = 1.0,
                    max_iter: int = 1000, epsilon: float = DEFAULT_EPSILON) -> MetaLearnerModel:
    """Logistic (multilabel) or softmax (powerset) regression on concatenated logits.

    ``logits`` holds one N x D array per system; ``targets`` is N x S binary for
    multilabel and N class indices for powerset.
    """
    if not logits:
        raise ContractError("metalearner needs at least one system")
    arrays = [np.asarray(z, dtype=np.float64) for z in logits]
    n, d = arrays[0].shape
    for z in arrays[1:]:
        if z.shape != (n, d):
            raise ContractError("all systems must provide the same number of frames and dimensions")
    if system_ids is None:
        system_ids = [f"sys{i}" for i in range(len(arrays))]
    if space == MULTILABEL:
        link, num_speakers, n_out = SIGMOID, d, None
    elif space == POWERSET:
        link, num_speakers, n_out = SOFTMAX, int(round(np.log2(d))), d
        if 2 ** num_speakers != d:
            raise ContractError("powerset logits need 2^S columns")
    else:
        raise ContractError(f"unknown space {space!r}")
    x = np.hstack(arrays)
    res = minimize_regularized_cross_entropy(x, targets, link, l2_c, max_iter, n_out=n_out)
    return MetaLearnerModel(
        weights=res.weights,
        bias=res.bias,
        space=space,
        num_speakers=num_speakers,
        system_ids=list(system_ids),
        epsilon=epsilon,
        training_loss=res.cross_entropy,
        objective=res.final_loss,
    )


def apply_metalearner(model: MetaLearnerModel, inp: FusionInput) -> FrameScoreMatrix:
    if list(inp.system_ids) != list(model.system_ids):
        raise ContractError(
            f"metalearner expects systems {model.system_ids}, got {inp.system_ids}"
        )
    if inp.space != model.space or inp.template.num_speakers != model.num_speakers:
        raise ContractError("metalearner space or speaker count does not match the inputs")
    x = np.hstack([to_logits(m, model.epsilon).values for m in inp.systems])
    s = x @ model.weights.T + model.bias
    return inp.output(inp.link(s))


def metalearner_cross_entropy(model: MetaLearnerModel, logits: list, targets, l2_c: float = 1.0) -> float:
    """Data term of the training objective for ``model`` on the given frames."""
    link = SIGMOID if model.space == MULTILABEL else SOFTMAX
    n_out = None if model.space == MULTILABEL else model.dim
    obj = CrossEntropyObjective(np.hstack(logits), targets, link, l2_c, n_out=n_out)
    return obj.cross_entropy(obj.pack(model.weights, model.bias))


_UNSUPERVISED_FUNCS = {
    AVERAGE_PROBS: average_probs,
    AVERAGE_LOGITS: average_logits,
    DYNAMIC_LOGITS: dynamic_logits,
    ENTROPY: entropy_fusion,
}


def fuse(method: str, inp, model: MetaLearnerModel | None = None) -> FrameScoreMatrix:
    inp = _as_input(inp)
    if method == METALEARNER:
        if model is None:
            raise ContractError("metalearner fusion needs a fitted model")
        return apply_metalearner(model, inp)
    try:
        func = _UNSUPERVISED_FUNCS[method]
    except KeyError:
        raise ContractError(f"unknown fusion method {method!r}") from None
    return func(inp)
