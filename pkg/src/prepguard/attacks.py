"""FGSM, iterative FGSM, DeepFool and untargeted Carlini-Wagner L2.

All attacks take a model, a clean image in [0, 1] with its true label, and an
:class:`AttackConfig`; they return an :class:`AttackResult` whose adversarial
image is always inside [0, 1].
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np

from . import model as M


class AttackKind(str, enum.Enum):
    FGSM = "fgsm"
    IFGSM = "ifgsm"
    DEEPFOOL = "deepfool"
    CW_L2 = "cw"


class AttackError(RuntimeError):
    pass


class DegenerateInputError(AttackError):
    """Every logit difference has zero gradient, so no boundary can be found."""


class OptimizationDivergedError(AttackError):
    def __init__(self, step: int, value: float):
        super().__init__(f"C&W objective became non-finite ({value}) at step {step}")
        self.step = step


class AttackTagError(ValueError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    kind: AttackKind
    epsilon: float = 8 / 255
    step_size: float | None = None  # IFGSM; None -> min(eps, 2 * eps / iterations)
    iterations: int = 10  # IFGSM steps, or DeepFool iteration cap
    overshoot: float = 0.02
    kappa: float = 0.0
    lam: float = 1.0
    cw_learning_rate: float = 0.01
    cw_max_steps: int = 200
    cw_search_steps: int = 0  # 0: fixed lambda plus one x10 restart; >0: binary search
    seed: int = 0
    tag: str = ""  # the preset string this config was parsed from, echoed in reports

    def __post_init__(self):
        object.__setattr__(self, "kind", AttackKind(self.kind))
        if not 0 < self.epsilon <= 1:
            raise ValueError("epsilon must lie in (0, 1]")
        if self.iterations <= 0 or self.cw_max_steps <= 0:
            raise ValueError("iteration counts must be positive")
        if self.overshoot < 0 or self.kappa < 0:
            raise ValueError("overshoot and kappa must be non-negative")
        if self.lam <= 0 or self.cw_learning_rate <= 0:
            raise ValueError("lambda and learning rate must be positive")
        if self.step_size is not None and not 0 < self.step_size <= 1:
            raise ValueError("step_size must lie in (0, 1]")
        if self.kind is AttackKind.IFGSM and self.step_size is not None and self.step_size > self.epsilon:
            raise ValueError("IFGSM step_size must not exceed epsilon")

    @property
    def ifgsm_step(self) -> float:
        if self.step_size is not None:
            return self.step_size
        return min(self.epsilon, 2 * self.epsilon / self.iterations)

    @property
    def name(self) -> str:
        return self.tag or format_attack_tag(self)


@dataclass
class Perturbation:
    delta: np.ndarray
    l2: float = field(init=False)
    linf: float = field(init=False)

    def __post_init__(self):
        self.l2 = float(np.linalg.norm(self.delta.ravel()))
        self.linf = float(np.abs(self.delta).max()) if self.delta.size else 0.0


@dataclass
class AttackResult:
    adversarial: np.ndarray
    perturbation: Perturbation
    success: bool
    iterations_used: int
    original_label: int
    adversarial_label: int


def _result(params, x, adv, label, iterations) -> AttackResult:
    adv = np.clip(adv, 0.0, 1.0)
    adv_label = M.predict(params, adv)
    return AttackResult(adv, Perturbation(adv - x), adv_label != label, iterations, label, adv_label)


def clip_ball(origin, candidate, epsilon: float) -> np.ndarray:
    """Project onto the L-inf ball of radius epsilon around origin, then onto [0, 1]."""
    origin = np.asarray(origin, dtype=np.float64)
    candidate = np.asarray(candidate, dtype=np.float64)
    if origin.shape != candidate.shape:
        raise M.ShapeError(f"shape mismatch {origin.shape} vs {candidate.shape}")
    return np.clip(np.minimum(np.maximum(candidate, origin - epsilon), origin + epsilon), 0.0, 1.0)


def fgsm(params, x, label: int, cfg: AttackConfig) -> AttackResult:
    x = M._check_image(params, x)
    g = M.grad_input(params, x, label)
    adv = np.clip(x + cfg.epsilon * np.sign(g), 0.0, 1.0)
    return _result(params, x, adv, label, 1)


def ifgsm(params, x, label: int, cfg: AttackConfig) -> AttackResult:
    """Runs exactly ``cfg.iterations`` signed-gradient steps and returns the last iterate."""
    x = M._check_image(params, x)
    step = cfg.ifgsm_step
    cur = x.copy()
    for _ in range(cfg.iterations):
        g = M.grad_input(params, cur, label)
        cur = clip_ball(x, cur + step * np.sign(g), cfg.epsilon)
    return _result(params, x, cur, label, cfg.iterations)


def deepfool(params, x, label: int, cfg: AttackConfig) -> AttackResult:
    """Multiclass DeepFool.

    Each iteration linearizes f_k = Z_k - Z_c (c = the originally predicted
    class) and steps onto the closest linearized boundary.  The accumulated
    perturbation is applied as x + (1 + overshoot) * r_total.
    """
    x = M._check_image(params, x)
    if params.num_classes < 2:
        raise AttackError("DeepFool needs at least two classes")
    logits, jac = M.logit_jacobian(params, x)
    current = M.predict_logits(logits)
    if current != label:
        return _result(params, x, x, label, 0)
    r_total = np.zeros_like(x)
    adv = x
    others = [k for k in range(params.num_classes) if k != current]
    for it in range(1, cfg.iterations + 1):
        w = jac[others] - jac[current]
        f = logits[others] - logits[current]
        norms = np.linalg.norm(w.reshape(len(others), -1), axis=1)
        if not np.any(norms > 0):
            raise DegenerateInputError("all logit-difference gradients vanish")
        with np.errstate(divide="ignore", invalid="ignore"):
            dist = np.where(norms > 0, np.abs(f) / norms, np.inf)
        k = int(np.argmin(dist))
        r_total = r_total + (np.abs(f[k]) / norms[k] ** 2) * w[k]
        adv = np.clip(x + (1 + cfg.overshoot) * r_total, 0.0, 1.0)
        logits, jac = M.logit_jacobian(params, adv)
        if M.predict_logits(logits) != current:
            return _result(params, x, adv, label, it)
    return _result(params, x, adv, label, cfg.iterations)


def _to_tanh_space(x):
    return np.arctanh(np.clip(2.0 * x - 1.0, -1.0, 1.0) * (1 - 1e-12))


def _cw_run(params, x, label, cfg, lam):
    """One Adam descent in tanh space at a fixed trade-off ``lam``.

    Returns (best successful image or None, its L2, last image).
    """
    w = _to_tanh_space(x)
    m = np.zeros_like(w)
    v = np.zeros_like(w)
    b1, b2, eps = 0.9, 0.999, 1e-8
    best, best_l2 = None, np.inf
    k = params.num_classes
    for step in range(cfg.cw_max_steps + 1):
        t = np.tanh(w)
        adv = (t + 1.0) / 2.0
        # margin = Z_y - max_{j != y} Z_j, needs logits first
        logits = M.forward(params, adv)
        other = logits.copy()
        other[label] = -np.inf
        j = int(np.argmax(other))
        margin = logits[label] - logits[j]
        diff = adv - x
        l2sq = float(np.sum(diff * diff))
        objective = l2sq + lam * max(margin, -cfg.kappa)
        if not np.isfinite(objective):
            raise OptimizationDivergedError(step, objective)
        if M.predict_logits(logits) != label and l2sq < best_l2:
            best, best_l2 = adv.copy(), l2sq
        if step == cfg.cw_max_steps:
            break
        grad_adv = 2.0 * diff
        if margin > -cfg.kappa:
            d = np.zeros(k)
            d[label], d[j] = lam, -lam
            grad_adv = grad_adv + M.logits_and_vjp(params, adv, d)[1]
        g = grad_adv * (1.0 - t * t) / 2.0
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** (step + 1))
        vhat = v / (1 - b2 ** (step + 1))
        w = w - cfg.cw_learning_rate * mhat / (np.sqrt(vhat) + eps)
    return best, np.sqrt(best_l2), adv


def cw_l2(params, x, label: int, cfg: AttackConfig) -> AttackResult:
    """Untargeted C&W-L2: min ||x' - x||^2 + lam * max(Z_y - max_{j!=y} Z_j, -kappa).

    x' = (tanh(w) + 1) / 2 keeps iterates in [0, 1].  The lowest-L2
    misclassified iterate is returned; if none is found the last iterate is
    returned with ``success=False``.
    """
    x = M._check_image(params, x)
    if not 0 <= label < params.num_classes:
        raise ValueError("label out of range")
    runs = 0
    if cfg.cw_search_steps > 0:
        lo, hi, lam = 0.0, np.inf, cfg.lam
        best, best_l2, last = None, np.inf, x
        for _ in range(cfg.cw_search_steps):
            cand, l2, last = _cw_run(params, x, label, cfg, lam)
            runs += 1
            if cand is not None:
                if l2 < best_l2:
                    best, best_l2 = cand, l2
                hi = lam
            else:
                lo = lam
            lam = (lo + hi) / 2 if np.isfinite(hi) else lam * 10
    else:
        best, _, last = _cw_run(params, x, label, cfg, cfg.lam)
        runs = 1
        if best is None:
            best, _, last = _cw_run(params, x, label, cfg, cfg.lam * 10)
            runs = 2
    adv = best if best is not None else last
    return _result(params, x, adv, label, runs * cfg.cw_max_steps)


_DISPATCH = {
    AttackKind.FGSM: fgsm,
    AttackKind.IFGSM: ifgsm,
    AttackKind.DEEPFOOL: deepfool,
    AttackKind.CW_L2: cw_l2,
}


def run_attack(params, x, label: int, cfg: AttackConfig) -> AttackResult:
    return _DISPATCH[cfg.kind](params, x, label, cfg)


# ---------------------------------------------------------------------------
# Preset tags: "fgsm:eps=8/255", "ifgsm:eps=5/255,iters=10", "deepfool", "cw"
# ---------------------------------------------------------------------------

_KEYS = {
    "eps": ("epsilon", "frac"),
    "step": ("step_size", "frac"),
    "iters": ("iterations", int),
    "overshoot": ("overshoot", "frac"),
    "kappa": ("kappa", "frac"),
    "lambda": ("lam", "frac"),
    "lr": ("cw_learning_rate", "frac"),
    "steps": ("cw_max_steps", int),
    "search": ("cw_search_steps", int),
    "seed": ("seed", int),
}

PRESETS = {
    "fgsm": "fgsm:eps=8/255",
    "ifgsm": "ifgsm:eps=5/255,iters=10",
    "deepfool": "deepfool",
    "cw": "cw",
}

_NAMES = {"fgsm": AttackKind.FGSM, "ifgsm": AttackKind.IFGSM, "deepfool": AttackKind.DEEPFOOL,
          "cw": AttackKind.CW_L2, "cw_l2": AttackKind.CW_L2}


def parse_fraction(text: str) -> float:
    """'8/255' -> 8/255, '0.03' -> 0.03.  Both /225 and /255 are accepted verbatim."""
    try:
        return float(Fraction(text.strip()))
    except (ValueError, ZeroDivisionError):
        raise AttackTagError(f"not a number or fraction: {text!r}") from None


def parse_attack_tag(tag: str) -> AttackConfig:
    tag = tag.strip()
    head, _, rest = tag.partition(":")
    name = head.strip().lower()
    if name not in _NAMES:
        raise AttackTagError(f"unknown attack {head!r}")
    kwargs = {}
    if rest.strip():
        for item in rest.split(","):
            key, sep, val = item.partition("=")
            key = key.strip().lower()
            if not sep or key not in _KEYS:
                raise AttackTagError(f"bad attack parameter {item!r} in {tag!r}")
            attr, conv = _KEYS[key]
            try:
                kwargs[attr] = parse_fraction(val) if conv == "frac" else int(val)
            except ValueError:
                raise AttackTagError(f"bad value for {key!r} in {tag!r}") from None
    try:
        return AttackConfig(kind=_NAMES[name], tag=re.sub(r"\s+", "", tag), **kwargs)
    except ValueError as exc:
        raise AttackTagError(f"{tag!r}: {exc}") from None


def parse_attack_list(text: str) -> list[AttackConfig]:
    """Split a comma-joined list where parameter items attach to the preceding attack.

    ``"ifgsm:eps=8/255,iters=10,deepfool,cw"`` gives three attacks.
    """
    groups: list[str] = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        if "=" in item and ":" not in item and groups:
            groups[-1] += "," + item
        else:
            groups.append(item)
    if not groups:
        raise AttackTagError("no attacks given")
    return [parse_attack_tag(PRESETS.get(g.lower(), g)) if g.lower() in ("fgsm", "ifgsm") and ":" not in g
            else parse_attack_tag(g) for g in groups]


def format_attack_tag(cfg: AttackConfig) -> str:
    name = "cw" if cfg.kind is AttackKind.CW_L2 else cfg.kind.value
    if cfg.kind in (AttackKind.FGSM, AttackKind.IFGSM):
        eps = Fraction(cfg.epsilon).limit_denominator(1000)
        parts = [f"eps={eps.numerator}/{eps.denominator}"]
        if cfg.kind is AttackKind.IFGSM:
            parts.append(f"iters={cfg.iterations}")
        return f"{name}:" + ",".join(parts)
    return name


def with_seed(cfg: AttackConfig, seed: int) -> AttackConfig:
    return replace(cfg, seed=seed)
