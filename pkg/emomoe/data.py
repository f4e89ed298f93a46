"""Synthetic two-domain classification data.

Most samples are delivered at the visual-embedding level. General-domain
samples trace a quarter-circle arc in a 2-D "scene" plane whose starting
phase ``2*pi*y/C`` encodes the label, on top of a constant scene marker.
Emotion-domain samples carry a weak face marker everywhere and a
contiguous face patch of ``face_tokens`` tokens with a strong face marker
and a sign-pattern code for the label over ``ceil(log2 C)`` axes, at a
larger amplitude than the background.

With ``[data] clips > 0`` each split also carries pixel clips. An emotion
clip hides the label's sign code in one face patch of one frame, and the
scripted observations report that face with high confidence. A general
clip has no faces and tints every frame by the label's phase. Clips reach
the model through key-frame capture and the patch embedder.
"""

from __future__ import annotations

import json
import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass
from emomoe._compat import StrEnum
from pathlib import Path
from typing import Protocol, TypeVar

import numpy as np
from pydantic import ValidationError

from emomoe.compressor import TokenSource, VisualEmbeddings
from emomoe.config import RunConfig, signature_axes
from emomoe.errors import ConfigError, ContractError, FormatError
from emomoe.fec import EMOTIONS, FaceObservation, FrameRecord, ScriptedScorer, run_fec, sequence_patches
from emomoe.tensor import Tensor, constant

logger = logging.getLogger(__name__)

BASIS_SEED = 20240601
SCENE_AXIS, FACE_AXIS, ARC_AXES, CODE_START = 0, 1, (2, 3), 4
BACKGROUND_FACE_LEVEL = 0.5
GENERAL_PROMPT, EMOTION_PROMPT = 0, 1

FRAME_PATCHES = 2  # patches per frame side
FRAME_INTERVAL = 0.04
FACE_CONFIDENCE, DISTRACTOR_CONFIDENCE = 0.95, 0.4
CLIP_STREAM = 1


class Domain(StrEnum):
    GENERAL = "general"
    EMOTION = "emotion"


class _HasDomain(Protocol):
    @property
    def domain(self) -> Domain: ...


S = TypeVar("S", bound=_HasDomain)


@dataclass(frozen=True)
class SyntheticSample:
    embeddings: VisualEmbeddings
    text: np.ndarray
    label: int
    domain: Domain
    true_label: int


@dataclass(frozen=True, eq=False)
class ClipSample:
    """A short pixel clip plus the face observations a detector would report for it."""

    frames: tuple[FrameRecord, ...]
    faces: dict[int, list[FaceObservation]]
    text: np.ndarray
    label: int
    domain: Domain
    true_label: int

    def scorer(self) -> ScriptedScorer:
        return ScriptedScorer(self.faces)


@dataclass(frozen=True, eq=False)
class PreparedClip:
    """A clip after key-frame capture, flattened to ``[N, p*p*3]`` patches for the embedder."""

    patches: np.ndarray
    sources: tuple[TokenSource, ...]
    text: np.ndarray
    label: int
    domain: Domain
    true_label: int

    @property
    def key_tokens(self) -> int:
        return sum(1 for s in self.sources if s is TokenSource.KEY_FRAME)


TrainItem = SyntheticSample | PreparedClip


def signature_basis(d_v: int) -> np.ndarray:
    """Fixed orthonormal basis ``[d_v, d_v]``; row i is signature axis i."""
    q, _ = np.linalg.qr(np.random.default_rng(BASIS_SEED).normal(size=(d_v, d_v)))
    return q.T


def code_bits(label: int, classes: int) -> np.ndarray:
    bits = math.ceil(math.log2(classes))
    return np.array([1.0 if (label >> j) & 1 else -1.0 for j in range(bits)])


def _general_tokens(rng: np.random.Generator, label: int, cfg: RunConfig, basis: np.ndarray) -> np.ndarray:
    n1, c = cfg.model.n1, cfg.model.classes
    start = 2.0 * math.pi * label / c
    sweep = 0.5 * math.pi * np.arange(n1) / max(n1 - 1, 1)
    phase = start + sweep
    tokens = np.outer(np.ones(n1), basis[SCENE_AXIS])
    tokens += np.outer(np.cos(phase), basis[ARC_AXES[0]]) + np.outer(np.sin(phase), basis[ARC_AXES[1]])
    return tokens


def _emotion_tokens(rng: np.random.Generator, label: int, cfg: RunConfig, basis: np.ndarray) -> np.ndarray:
    n1, face = cfg.model.n1, cfg.data.face_tokens
    tokens = np.outer(np.full(n1, BACKGROUND_FACE_LEVEL), basis[FACE_AXIS])
    first = int(rng.integers(0, n1 - face + 1))
    code = code_bits(label, cfg.model.classes)
    signature = basis[FACE_AXIS] + code @ basis[CODE_START : CODE_START + code.size]
    amplitude = rng.uniform(1.0, 2.0, size=face)
    tokens[first : first + face] = np.outer(amplitude, signature)
    return tokens


def _prompt_and_label(
    rng: np.random.Generator, true_label: int, prompt: int, cfg: RunConfig
) -> tuple[np.ndarray, int]:
    m = cfg.model
    text = rng.integers(0, m.vocab, size=m.m)
    text[0] = prompt % m.vocab
    label = true_label
    if rng.random() < cfg.data.label_noise:
        label = int((true_label + rng.integers(1, m.classes)) % m.classes)
    return text, label


def _domain_order(rng: np.random.Generator, n: int, fraction: float) -> tuple[np.ndarray, int]:
    n_emotion = round(n * fraction)
    domains = np.array([Domain.EMOTION] * n_emotion + [Domain.GENERAL] * (n - n_emotion))
    return domains[rng.permutation(n)], n_emotion


def generate_dataset(
    seed: int,
    n: int,
    cfg: RunConfig,
    emotion_fraction: float | None = None,
) -> list[SyntheticSample]:
    """Deterministic per seed; ``round(n * emotion_fraction)`` emotion samples, the rest general."""
    if n <= 0:
        raise ContractError(f"dataset size must be positive, got {n}")
    m = cfg.model
    if m.d_v < signature_axes(m.classes):
        raise ConfigError(f"d_v={m.d_v} is too small for {m.classes} classes")
    fraction = cfg.data.emotion_fraction if emotion_fraction is None else emotion_fraction
    rng = np.random.default_rng(seed)
    basis = signature_basis(m.d_v)

    domains, n_emotion = _domain_order(rng, n, fraction)

    samples: list[SyntheticSample] = []
    for domain in domains:
        true_label = int(rng.integers(m.classes))
        if domain == Domain.GENERAL:
            tokens = _general_tokens(rng, true_label, cfg, basis)
            prompt = GENERAL_PROMPT
        else:
            tokens = _emotion_tokens(rng, true_label, cfg, basis)
            prompt = EMOTION_PROMPT
        tokens = tokens + cfg.data.noise * rng.normal(size=tokens.shape)
        text, label = _prompt_and_label(rng, true_label, prompt, cfg)
        samples.append(
            SyntheticSample(VisualEmbeddings(constant(tokens)), text, label, Domain(domain), true_label)
        )
    logger.info("Generated %d samples (%d emotion) with seed %d", n, n_emotion, seed)
    return samples


def select_domain(samples: Sequence[S], domain: Domain | None) -> list[S]:
    if domain is None:
        return list(samples)
    return [s for s in samples if s.domain == domain]


def stack_batch(samples: Sequence[SyntheticSample]) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Embeddings ``[B, N1, d_v]``, text ids ``[B, M]`` and labels ``[B]``."""
    if not samples:
        raise ContractError("cannot batch zero samples")
    values = constant(np.stack([s.embeddings.values.data for s in samples]))
    text = np.stack([s.text for s in samples])
    labels = np.array([s.label for s in samples], dtype=np.int64)
    return values, text, labels


def decode_label(sample: SyntheticSample, cfg: RunConfig) -> int:
    """Closed-form read-out of the generating feature of the sample's domain."""
    basis = signature_basis(cfg.model.d_v)
    tokens = sample.embeddings.values.data
    classes = cfg.model.classes
    if sample.domain == Domain.GENERAL:
        first = tokens[0]
        angle = math.atan2(first @ basis[ARC_AXES[1]], first @ basis[ARC_AXES[0]])
        return int(round(angle / (2.0 * math.pi / classes))) % classes
    bits = math.ceil(math.log2(classes))
    face = tokens @ basis[FACE_AXIS]
    patch = face > (BACKGROUND_FACE_LEVEL + 1.0) / 2.0
    code = (tokens[patch] @ basis[CODE_START : CODE_START + bits].T).sum(axis=0)
    return int(sum(1 << j for j in range(bits) if code[j] > 0))


# -- pixel clips --


def _face_probs(top: float, emotion: int) -> tuple[float, ...]:
    rest = (1.0 - top) / (len(EMOTIONS) - 1)
    return tuple(top if i == emotion else rest for i in range(len(EMOTIONS)))


def _emotion_clip(
    rng: np.random.Generator, label: int, cfg: RunConfig, pixels: np.ndarray
) -> dict[int, list[FaceObservation]]:
    p, frames = cfg.model.patch, pixels.shape[0]
    key = int(rng.integers(frames))
    row, col = (int(v) for v in rng.integers(FRAME_PATCHES, size=2))
    code = code_bits(label, cfg.model.classes)
    pattern = code[np.arange(p * p * 3) % code.size].reshape(p, p, 3)
    face = 0.5 + 0.4 * pattern + cfg.data.noise * rng.normal(size=(p, p, 3))
    pixels[key, row * p : (row + 1) * p, col * p : (col + 1) * p] = face
    faces = {key: [FaceObservation(bbox=(col * p, row * p, p, p), probs=_face_probs(FACE_CONFIDENCE, label % len(EMOTIONS)))]}
    if frames > 1 and rng.random() < 0.5:
        other = int((key + rng.integers(1, frames)) % frames)
        r, c = (int(v) for v in rng.integers(FRAME_PATCHES, size=2))
        emotion = int(rng.integers(len(EMOTIONS)))
        faces[other] = [FaceObservation(bbox=(c * p, r * p, p, p), probs=_face_probs(DISTRACTOR_CONFIDENCE, emotion))]
    return faces


def generate_clips(
    seed: int,
    n: int,
    cfg: RunConfig,
    emotion_fraction: float | None = None,
) -> list[ClipSample]:
    """``n`` clips of ``clip_frames`` frames, each ``FRAME_PATCHES x FRAME_PATCHES`` patches.

    Draws from its own stream of ``seed``, so clips and embedding samples of
    one split never share random numbers.
    """
    if n <= 0:
        raise ContractError(f"clip count must be positive, got {n}")
    m = cfg.model
    fraction = cfg.data.emotion_fraction if emotion_fraction is None else emotion_fraction
    rng = np.random.default_rng([seed, CLIP_STREAM])
    side = FRAME_PATCHES * m.patch
    domains, n_emotion = _domain_order(rng, n, fraction)

    clips: list[ClipSample] = []
    for domain in domains:
        true_label = int(rng.integers(m.classes))
        pixels = rng.uniform(0.25, 0.75, size=(cfg.data.clip_frames, side, side, 3))
        faces: dict[int, list[FaceObservation]] = {}
        if domain == Domain.EMOTION:
            faces = _emotion_clip(rng, true_label, cfg, pixels)
            prompt = EMOTION_PROMPT
        else:
            phase = 2.0 * math.pi * true_label / m.classes
            pixels[..., 0] += 0.2 * math.cos(phase)
            pixels[..., 1] += 0.2 * math.sin(phase)
            prompt = GENERAL_PROMPT
        pixels = np.clip(pixels, 0.0, 1.0)
        frames = tuple(
            FrameRecord(t, t * FRAME_INTERVAL, constant(pixels[t])) for t in range(cfg.data.clip_frames)
        )
        text, label = _prompt_and_label(rng, true_label, prompt, cfg)
        clips.append(ClipSample(frames, faces, text, label, Domain(domain), true_label))
    logger.info("Generated %d clips (%d emotion) with seed %d", n, n_emotion, seed)
    return clips


def prepare_clips(
    clips: Sequence[ClipSample], patch: int, tau: float, active: bool
) -> list[PreparedClip]:
    """Run key-frame capture on every clip and flatten the composed sequence to patches."""
    prepared: list[PreparedClip] = []
    keyed = missed = 0
    for clip in clips:
        result = run_fec(clip.frames, clip.scorer(), tau, active, quiet=True)
        patches, sources = sequence_patches(result.sequence, patch)
        prepared.append(PreparedClip(patches, sources, clip.text, clip.label, clip.domain, clip.true_label))
        if result.n_key_frames:
            keyed += 1
        elif active and clip.faces:
            missed += 1
    if clips:
        logger.info(
            "Key-frame capture %s at tau=%.3f: %d of %d clips gained key frames",
            "on" if active else "off", tau, keyed, len(clips),
        )
    if missed:
        logger.warning("%d clips with faces had none reach tau=%.3f", missed, tau)
    return prepared


# -- on-disk layout --

_FILES = ("embeddings", "text", "labels", "true_labels", "domains")


def save_dataset(samples: Sequence[SyntheticSample], directory: Path) -> None:
    """Write one ``.npy`` per field; byte-identical for identical samples."""
    directory.mkdir(parents=True, exist_ok=True)
    arrays = {
        "embeddings": np.stack([s.embeddings.values.data for s in samples]),
        "text": np.stack([s.text for s in samples]).astype(np.int64),
        "labels": np.array([s.label for s in samples], dtype=np.int64),
        "true_labels": np.array([s.true_label for s in samples], dtype=np.int64),
        "domains": np.array([s.domain == Domain.EMOTION for s in samples], dtype=np.int8),
    }
    for name, arr in arrays.items():
        np.save(directory / f"{name}.npy", arr, allow_pickle=False)


def load_dataset(directory: Path) -> list[SyntheticSample]:
    try:
        arrays = {name: np.load(directory / f"{name}.npy", allow_pickle=False) for name in _FILES}
    except (OSError, ValueError) as e:
        raise FormatError(f"cannot read dataset in {directory}: {e}") from e
    n = arrays["labels"].shape[0]
    if any(arr.shape[0] != n for arr in arrays.values()):
        raise FormatError(f"dataset arrays in {directory} disagree on sample count")
    return [
        SyntheticSample(
            VisualEmbeddings(constant(arrays["embeddings"][i])),
            arrays["text"][i],
            int(arrays["labels"][i]),
            Domain.EMOTION if arrays["domains"][i] else Domain.GENERAL,
            int(arrays["true_labels"][i]),
        )
        for i in range(n)
    ]


_CLIP_FILES = ("pixels", "text", "labels", "true_labels", "domains")


def save_clips(clips: Sequence[ClipSample], directory: Path) -> None:
    """Stacked pixel clips as ``.npy`` plus the scripted observations as ``faces.jsonl``."""
    directory.mkdir(parents=True, exist_ok=True)
    arrays = {
        "pixels": np.stack([np.stack([f.pixels.data for f in c.frames]) for c in clips]),
        "text": np.stack([c.text for c in clips]).astype(np.int64),
        "labels": np.array([c.label for c in clips], dtype=np.int64),
        "true_labels": np.array([c.true_label for c in clips], dtype=np.int64),
        "domains": np.array([c.domain == Domain.EMOTION for c in clips], dtype=np.int8),
    }
    for name, arr in arrays.items():
        np.save(directory / f"{name}.npy", arr, allow_pickle=False)
    lines = []
    for i, clip in enumerate(clips):
        for index in sorted(clip.faces):
            faces = [f.model_dump(by_alias=True, mode="json") for f in clip.faces[index]]
            lines.append(json.dumps({"clip": i, "index": index, "faces": faces}, sort_keys=True))
    (directory / "faces.jsonl").write_text("".join(f"{line}\n" for line in lines), encoding="utf-8")


def load_clips(directory: Path) -> list[ClipSample]:
    try:
        arrays = {name: np.load(directory / f"{name}.npy", allow_pickle=False) for name in _CLIP_FILES}
        text = (directory / "faces.jsonl").read_text(encoding="utf-8")
    except (OSError, ValueError) as e:
        raise FormatError(f"cannot read clips in {directory}: {e}") from e
    n = arrays["labels"].shape[0]
    if any(arr.shape[0] != n for arr in arrays.values()):
        raise FormatError(f"clip arrays in {directory} disagree on clip count")
    faces: list[dict[int, list[FaceObservation]]] = [{} for _ in range(n)]
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            observed = [FaceObservation.model_validate(f) for f in rec["faces"]]
            faces[int(rec["clip"])][int(rec["index"])] = observed
        except (json.JSONDecodeError, KeyError, TypeError, IndexError, ValidationError) as e:
            raise FormatError(f"{directory / 'faces.jsonl'}:{lineno}: bad face record: {e}") from e
    pixels = arrays["pixels"]
    return [
        ClipSample(
            tuple(FrameRecord(t, t * FRAME_INTERVAL, constant(pixels[i, t])) for t in range(pixels.shape[1])),
            faces[i],
            arrays["text"][i],
            int(arrays["labels"][i]),
            Domain.EMOTION if arrays["domains"][i] else Domain.GENERAL,
            int(arrays["true_labels"][i]),
        )
        for i in range(n)
    ]


def split_seeds(cfg: RunConfig) -> dict[str, int]:
    """Generator seed of every split: train, eval, then one per adapter."""
    base = cfg.seeds.data
    seeds = {"train": base, "eval": base + 1}
    for i, name in enumerate(cfg.lora.adapters):
        seeds[f"finetune/{name}"] = base + 2 + i
    return seeds


def generate_split(cfg: RunConfig, name: str) -> list[SyntheticSample]:
    """One named split; fine-tuning splits are emotion-only and sized like the train split's emotion half."""
    seeds = split_seeds(cfg)
    if name not in seeds:
        raise ConfigError(f"unknown split {name!r}; expected one of {sorted(seeds)}")
    if name == "train":
        return generate_dataset(seeds[name], cfg.data.n, cfg)
    if name == "eval":
        return generate_dataset(seeds[name], cfg.data.n_eval, cfg)
    n_emotion = max(1, round(cfg.data.n * cfg.data.emotion_fraction))
    return generate_dataset(seeds[name], n_emotion, cfg, emotion_fraction=1.0)


def generate_clip_split(cfg: RunConfig, name: str) -> list[ClipSample]:
    """Pixel clips of one named split, empty unless ``[data] clips`` is set.

    Train and eval carry ``clips`` clips; fine-tuning splits are emotion-only,
    sized like the train split's emotion share.
    """
    seeds = split_seeds(cfg)
    if name not in seeds:
        raise ConfigError(f"unknown split {name!r}; expected one of {sorted(seeds)}")
    if cfg.data.clips == 0:
        return []
    if name in ("train", "eval"):
        return generate_clips(seeds[name], cfg.data.clips, cfg)
    n_emotion = max(1, round(cfg.data.clips * cfg.data.emotion_fraction))
    return generate_clips(seeds[name], n_emotion, cfg, emotion_fraction=1.0)


def generate_splits(cfg: RunConfig) -> dict[str, list[SyntheticSample]]:
    return {name: generate_split(cfg, name) for name in split_seeds(cfg)}
