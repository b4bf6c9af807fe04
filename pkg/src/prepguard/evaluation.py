"""Robustness evaluation: benign selection, successful-adversarial-example sets,
defense accuracy matrices, quality-factor sweeps and PSNR tables."""

from __future__ import annotations

import csv
import io
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from . import attacks as A
from . import codecs as C
from . import model as M
from .data import Dataset, load_png, quantize8, save_png
from .defense import DefenseSpec, apply_defense, format_defense_spec, parse_defense_spec

REPORT_VERSION = 1

# Extra push applied to L2-attack perturbations when 8-bit rounding would
# otherwise undo a boundary-hugging adversarial example.
L2_BOOST_SCALES = (1.0, 1.05, 1.1, 1.2, 1.35, 1.5, 1.75, 2.0)


class EvaluationError(RuntimeError):
    pass


class SelectionError(EvaluationError):
    def __init__(self, requested: int, available: int):
        super().__init__(f"requested {requested} benign images but only {available} are classified correctly")
        self.requested = requested
        self.available = available


class FingerprintMismatch(EvaluationError):
    pass


def fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for b in data:
        h ^= b
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def fingerprint(params: M.ModelParams) -> str:
    """FNV-1a 64 of the serialized model file, as 16 hex digits."""
    return f"{fnv1a64(M.dumps(params)):016x}"


def resolve_threads(threads: int | None = None) -> int:
    if threads is None:
        env = os.environ.get("PREPGUARD_THREADS")
        threads = int(env) if env else (os.cpu_count() or 1)
    return max(1, int(threads))


def _ordered_map(fn, items, threads: int | None):
    """map() that returns results in input order whatever the pool size."""
    threads = resolve_threads(threads)
    if threads == 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# Benign selection and SAE sets
# ---------------------------------------------------------------------------


def select_benign(params: M.ModelParams, dataset: Dataset, n: int, seed: int) -> Dataset:
    """Seeded sample without replacement from the correctly classified images."""
    if n <= 0:
        raise ValueError("n must be positive")
    correct = np.flatnonzero(M.predict_batch(params, dataset.images) == dataset.labels)
    if len(correct) < n:
        raise SelectionError(n, len(correct))
    pick = np.random.default_rng(seed).permutation(correct)[:n]
    out = dataset.subset(pick)
    out.descriptor["benign_indices"] = [int(i) for i in pick]
    return out


@dataclass
class SaeEntry:
    index: int  # position in the benign list
    label: int
    original: np.ndarray
    adversarial: np.ndarray
    adv_label: int
    l2: float
    linf: float


@dataclass
class SaeSet:
    attack: str
    entries: list[SaeEntry]
    seed: int
    fingerprint: str
    n_attacked: int = 0
    config: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.entries)

    @property
    def labels(self) -> np.ndarray:
        return np.array([e.label for e in self.entries], dtype=np.int64)

    @property
    def adversarials(self) -> np.ndarray:
        return np.stack([e.adversarial for e in self.entries]) if self.entries else np.zeros((0,))

    @property
    def originals(self) -> np.ndarray:
        return np.stack([e.original for e in self.entries]) if self.entries else np.zeros((0,))

    @property
    def success_rate(self) -> float:
        return len(self.entries) / self.n_attacked if self.n_attacked else 0.0


def finalize_8bit(params, x, label: int, result: A.AttackResult, cfg: A.AttackConfig):
    """Snap an attack output to the 8-bit grid and keep it only if it still fools the model.

    L-inf attacks are re-clipped to the largest grid-aligned budget not above
    epsilon.  L2 attacks (DeepFool, C&W) may have their perturbation scaled up
    by the factors in ``L2_BOOST_SCALES`` until the rounded image is still
    misclassified.  Returns the rounded adversarial image or None.
    """
    if not result.success:
        return None
    delta = result.adversarial - x
    if cfg.kind in (A.AttackKind.FGSM, A.AttackKind.IFGSM):
        budget = math.floor(cfg.epsilon * 255 + 1e-9) / 255
        cand = quantize8(np.clip(quantize8(result.adversarial), x - budget, x + budget))
        return cand if M.predict(params, cand) != label else None
    for s in L2_BOOST_SCALES:
        cand = quantize8(x + s * delta)
        if M.predict(params, cand) != label:
            return cand
    return None


def build_sae_set(params: M.ModelParams, benign: Dataset, cfg: A.AttackConfig, seed: int = 0,
                  quantize: bool = True, threads: int | None = None) -> SaeSet:
    """Attack every benign image and keep only the successes.

    With ``quantize`` the adversarial images are rounded to 8 bits (see
    :func:`finalize_8bit`) before the success check, so stored PNGs and the
    in-memory set agree.
    """

    def work(i):
        x, y = benign.images[i], int(benign.labels[i])
        try:
            res = A.run_attack(params, x, y, cfg)
        except A.AttackError as exc:
            raise EvaluationError(f"attack {cfg.name} failed on benign image {i}: {exc}") from exc
        adv = finalize_8bit(params, x, y, res, cfg) if quantize else (res.adversarial if res.success else None)
        if adv is None:
            return None
        delta = adv - x
        return SaeEntry(i, y, x, adv, M.predict(params, adv), float(np.linalg.norm(delta.ravel())),
                        float(np.abs(delta).max()))

    results = _ordered_map(work, range(len(benign)), threads)
    entries = [e for e in results if e is not None]
    return SaeSet(cfg.name, entries, seed, fingerprint(params), n_attacked=len(benign),
                  config=attack_config_echo(cfg))


def attack_config_echo(cfg: A.AttackConfig) -> dict:
    eps = cfg.epsilon
    return {
        "kind": cfg.kind.value, "tag": cfg.name, "epsilon": eps, "step_size": cfg.ifgsm_step,
        "iterations": cfg.iterations, "overshoot": cfg.overshoot, "kappa": cfg.kappa,
        "lambda": cfg.lam, "cw_learning_rate": cfg.cw_learning_rate,
        "cw_max_steps": cfg.cw_max_steps, "cw_search_steps": cfg.cw_search_steps,
    }


def verify_sae_set(params: M.ModelParams, sae: SaeSet) -> None:
    """Raise unless every entry is still (original correct, adversarial wrong) under ``params``."""
    if fingerprint(params) != sae.fingerprint:
        raise FingerprintMismatch(f"SAE set was built for model {sae.fingerprint}, not {fingerprint(params)}")
    for e in sae.entries:
        if M.predict(params, e.original) != e.label:
            raise EvaluationError(f"SAE entry {e.index}: original no longer classified correctly")
        if M.predict(params, e.adversarial) == e.label:
            raise EvaluationError(f"SAE entry {e.index}: adversarial image no longer fools the model")


def save_sae_set(sae: SaeSet, directory) -> None:
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "manifest.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "label", "adv_label", "l2", "linf"])
        for e in sae.entries:
            save_png(os.path.join(directory, f"orig_{e.index:05d}.png"), e.original)
            save_png(os.path.join(directory, f"adv_{e.index:05d}.png"), e.adversarial)
            w.writerow([e.index, e.label, e.adv_label, repr(e.l2), repr(e.linf)])
    meta = {"attack": sae.attack, "seed": sae.seed, "fingerprint": sae.fingerprint,
            "n_attacked": sae.n_attacked, "config": sae.config}
    with open(os.path.join(directory, "sae.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_sae_set(directory, params: M.ModelParams | None = None) -> SaeSet:
    """Load a persisted set; with ``params`` the fingerprint must match (hard error otherwise)."""
    with open(os.path.join(directory, "sae.json")) as fh:
        meta = json.load(fh)
    if params is not None and fingerprint(params) != meta["fingerprint"]:
        raise FingerprintMismatch(f"SAE set at {directory} belongs to model {meta['fingerprint']}")
    entries = []
    with open(os.path.join(directory, "manifest.csv"), newline="") as fh:
        for row in csv.DictReader(fh):
            i = int(row["index"])
            entries.append(SaeEntry(i, int(row["label"]),
                                    load_png(os.path.join(directory, f"orig_{i:05d}.png")),
                                    load_png(os.path.join(directory, f"adv_{i:05d}.png")),
                                    int(row["adv_label"]), float(row["l2"]), float(row["linf"])))
    return SaeSet(meta["attack"], entries, meta["seed"], meta["fingerprint"],
                  meta.get("n_attacked", len(entries)), meta.get("config", {}))


# ---------------------------------------------------------------------------
# Accuracy
# ---------------------------------------------------------------------------


def defend_batch(spec: DefenseSpec, images, threads: int | None = None) -> np.ndarray:
    if not spec.transforms:
        return np.asarray(images, dtype=np.float64)
    return np.stack(_ordered_map(lambda img: apply_defense(spec, img), list(images), threads))


def top1_accuracy(params: M.ModelParams, spec: DefenseSpec, images, labels,
                  threads: int | None = None) -> float:
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("top-1 accuracy of an empty example list is undefined")
    defended = defend_batch(spec, images, threads)
    return float((M.predict_batch(params, defended) == labels).mean())


@dataclass
class Cell:
    attack: str
    defense: str
    n: int
    accuracy: float | None
    mean_l2: float
    mean_psnr: float | None

    def as_dict(self) -> dict:
        return {"attack": self.attack, "defense": self.defense, "n": self.n,
                "accuracy": self.accuracy, "mean_l2": self.mean_l2,
                "mean_psnr": _json_float(self.mean_psnr)}


def _json_float(v):
    if v is None:
        return None
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return v


def _cell(params, spec, attack, images, labels, references, l2s, threads) -> Cell:
    n = len(labels)
    if n == 0:
        return Cell(attack, format_defense_spec(spec), 0, None, 0.0, None)
    defended = defend_batch(spec, images, threads)
    acc = float((M.predict_batch(params, defended) == np.asarray(labels)).mean())
    psnrs = [C.psnr(d, r) for d, r in zip(defended, references)]
    return Cell(attack, format_defense_spec(spec), n, acc, float(np.mean(l2s)) if len(l2s) else 0.0,
                float(np.mean(psnrs)))


@dataclass
class EvalReport:
    model_fingerprint: str
    dataset: dict
    seed: int
    n_benign: int
    attacks: list[dict]
    defenses: list[str]
    cells: list[Cell]
    reversed_order: list[Cell]
    config: dict
    sae_sets: list[SaeSet] = field(default_factory=list, repr=False)  # kept in memory, not serialized

    def cell(self, attack: str, defense: str, reversed_order: bool = False) -> Cell:
        pool = self.reversed_order if reversed_order else self.cells
        for c in pool:
            if c.attack == attack and c.defense == defense:
                return c
        raise KeyError((attack, defense))

    def to_json(self) -> str:
        doc = {
            "report_version": REPORT_VERSION,
            "tool_version": __version__,
            "model_fingerprint": self.model_fingerprint,
            "dataset": self.dataset,
            "seed": self.seed,
            "n_benign": self.n_benign,
            "attacks": self.attacks,
            "defenses": self.defenses,
            "cells": [c.as_dict() for c in self.cells],
            "reversed_order": [c.as_dict() for c in self.reversed_order],
            "config": self.config,
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["attack", "defense", "n", "accuracy", "mean_l2", "mean_psnr"])
        for c in self.cells:
            w.writerow([c.attack, c.defense, c.n, "" if c.accuracy is None else repr(c.accuracy),
                        repr(c.mean_l2), "" if c.mean_psnr is None else _json_float(c.mean_psnr)])
        return buf.getvalue()


def run_matrix(params: M.ModelParams, dataset: Dataset, attacks: list[A.AttackConfig],
               defenses: list[DefenseSpec], n: int = 200, seed: int = 0, quantize: bool = True,
               threads: int | None = None, log=None) -> EvalReport:
    """Evaluate every defense on the benign set and on one SAE set per attack.

    Benign images are selected once, and every defense for a given attack sees
    exactly the same SAE list.  Multi-transform defenses are also evaluated
    with their transform order reversed.
    """
    if quantize:
        dataset = Dataset(quantize8(dataset.images), dataset.labels, dataset.num_classes,
                          dict(dataset.descriptor))
    benign = select_benign(params, dataset, n, seed)
    sae_sets = []
    for cfg in attacks:
        if log:
            log(f"attacking with {cfg.name} ...")
        sae = build_sae_set(params, benign, cfg, seed=seed, quantize=quantize, threads=threads)
        if log:
            log(f"  {len(sae)}/{len(benign)} successful adversarial examples")
        sae_sets.append(sae)

    def evaluate(spec: DefenseSpec) -> list[Cell]:
        try:
            row = [_cell(params, spec, "benign", benign.images, benign.labels, benign.images, [], threads)]
            for sae in sae_sets:
                imgs = sae.adversarials if len(sae) else np.zeros((0,) + benign.shape)
                row.append(_cell(params, spec, sae.attack, imgs, sae.labels,
                                 sae.originals if len(sae) else imgs, [e.l2 for e in sae.entries], threads))
        except Exception as exc:
            raise EvaluationError(f"defense {format_defense_spec(spec)!r}: {exc}") from exc
        return row

    cells, rev = [], []
    for spec in defenses:
        if log:
            log(f"defense {format_defense_spec(spec)}")
        cells.extend(evaluate(spec))
        if len(spec.transforms) > 1:
            rev.extend(evaluate(spec.reversed()))

    return EvalReport(
        model_fingerprint=fingerprint(params),
        dataset={k: v for k, v in dataset.descriptor.items()},
        seed=seed,
        n_benign=len(benign),
        attacks=[{"tag": s.attack, "n_attacked": s.n_attacked, "n_sae": len(s),
                  "success_rate": s.success_rate, "config": s.config} for s in sae_sets],
        defenses=[format_defense_spec(d) for d in defenses],
        cells=cells,
        reversed_order=rev,
        config={"n": n, "quantize_8bit": quantize, "l2_boost_scales": list(L2_BOOST_SCALES)},
        sae_sets=sae_sets,
    )


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------


@dataclass
class QfSweep:
    codec: str
    qfs: list[int]
    accuracy: dict  # attack tag -> list of accuracies aligned with qfs

    def bucket_means(self, attack: str) -> tuple[float | None, float | None]:
        """Mean accuracy over qf < 50 and over qf >= 50 (None when a bucket is empty)."""
        acc = self.accuracy[attack]
        low = [a for q, a in zip(self.qfs, acc) if q < 50]
        high = [a for q, a in zip(self.qfs, acc) if q >= 50]
        return (float(np.mean(low)) if low else None, float(np.mean(high)) if high else None)


def qf_sweep(params: M.ModelParams, sae_sets: list[SaeSet], codec: str, qfs: list[int],
             threads: int | None = None) -> QfSweep:
    if not qfs:
        raise ValueError("qf list must not be empty")
    if codec not in C.ROUNDTRIPS:
        raise ValueError(f"unknown codec {codec!r}")
    table = {}
    for sae in sae_sets:
        if len(sae) == 0:
            raise EvaluationError(f"SAE set for {sae.attack} is empty")
        table[sae.attack] = [top1_accuracy(params, parse_defense_spec(f"{codec}:{q}"), sae.adversarials,
                                           sae.labels, threads) for q in qfs]
    return QfSweep(codec, list(qfs), table)


def psnr_report(images, codecs: list[str], qfs: list[int]) -> list[dict]:
    """Mean/min/max PSNR of codec round-trip versus original, per codec and qf."""
    images = np.asarray(images, dtype=np.float64)
    if len(images) == 0 or not qfs:
        raise ValueError("need at least one image and one quality factor")
    rows = []
    for codec in codecs:
        for q in qfs:
            vals = np.array([C.psnr(img, C.roundtrip(codec, img, q)) for img in images])
            rows.append({"codec": codec, "qf": int(q), "mean_psnr": float(vals.mean()),
                         "min_psnr": float(vals.min()), "max_psnr": float(vals.max()), "n": len(vals)})
    return rows


def psnr_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["codec", "qf", "n", "mean_psnr", "min_psnr", "max_psnr"])
    for r in rows:
        w.writerow([r["codec"], r["qf"], r["n"]] + [_json_float(r[k]) for k in ("mean_psnr", "min_psnr", "max_psnr")])
    return buf.getvalue()
