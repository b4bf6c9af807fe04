"""Input-space defenses: an ordered list of transforms applied before classification.

Spec strings look like ``"webp:70,fliplr"``.  Grammar::

    spec      := "none" | transform ("," transform)*
    transform := "jpeg:"INT | "webp:"INT | "fliplr" | "fliptb" | "extern:"TEMPLATE

An extern TEMPLATE is a shell command containing ``{in}`` and ``{out}``
placeholders; the image is written to ``{in}`` as PNG and read back from
``{out}``.  It may not contain ',' or ';'.
"""

from __future__ import annotations

import os
import re
import shlex
import subprocess
import tempfile
from dataclasses import dataclass

import numpy as np

from . import codecs
from .data import load_png, save_png


class DefenseSpecError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at byte offset {offset}")
        self.offset = offset


class DefenseExecutionError(RuntimeError):
    def __init__(self, index: int, message: str):
        super().__init__(f"transform #{index}: {message}")
        self.index = index


@dataclass(frozen=True)
class JpegLike:
    qf: int

    def __call__(self, img):
        return codecs.jpeg_like_roundtrip(img, self.qf)

    def __str__(self):
        return f"jpeg:{self.qf}"


@dataclass(frozen=True)
class WebpLike:
    qf: int

    def __call__(self, img):
        return codecs.webp_like_roundtrip(img, self.qf)

    def __str__(self):
        return f"webp:{self.qf}"


@dataclass(frozen=True)
class FlipLR:
    def __call__(self, img):
        return codecs.flip_lr(img)

    def __str__(self):
        return "fliplr"


@dataclass(frozen=True)
class FlipTB:
    def __call__(self, img):
        return codecs.flip_tb(img)

    def __str__(self):
        return "fliptb"


@dataclass(frozen=True)
class Extern:
    """Round-trip through an external encoder/decoder command (e.g. cwebp + dwebp)."""

    template: str
    timeout: float = 60.0

    def __call__(self, img):
        with tempfile.TemporaryDirectory(prefix="prepguard-") as tmp:
            src = os.path.join(tmp, "in.png")
            dst = os.path.join(tmp, "out.png")
            save_png(src, img)
            cmd = self.template.replace("{in}", shlex.quote(src)).replace("{out}", shlex.quote(dst))
            cmd = cmd.replace("{tmp}", shlex.quote(tmp))
            proc = subprocess.run(cmd, shell=True, capture_output=True, timeout=self.timeout)
            if proc.returncode != 0:
                raise RuntimeError(f"command exited with {proc.returncode}: "
                                   f"{proc.stderr.decode(errors='replace').strip()}")
            if not os.path.isfile(dst):
                raise RuntimeError("command produced no output image")
            out = load_png(dst, channels=img.shape[2])
        if out.shape != img.shape:
            raise RuntimeError(f"output shape {out.shape} differs from input {img.shape}")
        return out

    def __str__(self):
        return f"extern:{self.template}"


@dataclass(frozen=True)
class DefenseSpec:
    transforms: tuple = ()
    name: str = ""

    def __str__(self):
        return format_defense_spec(self)

    @property
    def label(self) -> str:
        return self.name or str(self)

    @property
    def is_extern(self) -> bool:
        return any(isinstance(t, Extern) for t in self.transforms)

    def reversed(self) -> "DefenseSpec":
        return DefenseSpec(tuple(reversed(self.transforms)))


NO_DEFENSE = DefenseSpec((), "No Defense")


def format_defense_spec(spec: DefenseSpec) -> str:
    return ",".join(str(t) for t in spec.transforms) or "none"


def apply_defense(spec: DefenseSpec, img) -> np.ndarray:
    """Apply the transforms left to right; the empty spec returns the image unchanged."""
    out = np.asarray(img, dtype=np.float64)
    for i, t in enumerate(spec.transforms):
        try:
            out = t(out)
        except (OSError, RuntimeError, subprocess.SubprocessError) as exc:
            raise DefenseExecutionError(i, str(exc)) from exc
    return out


_QF_TOKEN = re.compile(r"(jpeg|webp)\s*:\s*([+-]?\d+)")


def parse_defense_spec(text: str) -> DefenseSpec:
    transforms = []
    pos = 0
    saw_none = False
    for piece in text.split(","):
        start = pos + (len(piece.encode("utf-8")) - len(piece.lstrip().encode("utf-8")))
        pos += len(piece.encode("utf-8")) + 1
        token = piece.strip()
        low = token.lower()
        if not token:
            raise DefenseSpecError("empty transform", start)
        if low.startswith("extern:"):
            template = token[len("extern:"):].strip()
            if not template or ";" in template:
                raise DefenseSpecError("extern needs a command template", start)
            transforms.append(Extern(template))
            continue
        compact = re.sub(r"\s+", "", low)
        if compact == "none":
            saw_none = True
            continue
        if compact == "fliplr":
            transforms.append(FlipLR())
            continue
        if compact == "fliptb":
            transforms.append(FlipTB())
            continue
        m = _QF_TOKEN.fullmatch(low)
        if m:
            qf = int(m.group(2))
            if not 0 <= qf <= 100:
                qf_at = start + low.index(m.group(2))
                raise DefenseSpecError(f"quality factor {qf} outside [0, 100]", qf_at)
            transforms.append(JpegLike(qf) if m.group(1) == "jpeg" else WebpLike(qf))
            continue
        raise DefenseSpecError(f"unknown transform {token!r}", start)
    if saw_none and transforms:
        raise DefenseSpecError("'none' cannot be combined with other transforms", 0)
    return DefenseSpec(tuple(transforms))


def parse_defense_list(text: str) -> list[DefenseSpec]:
    """Semicolon-separated list of specs, as used on the command line."""
    specs = [parse_defense_spec(part) for part in text.split(";") if part.strip()]
    if not specs:
        raise DefenseSpecError("no defenses given", 0)
    return specs
