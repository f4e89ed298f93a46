"""Facial emotion capture: key-frame selection, facial masking and sequence composition.

Face detection and emotion scoring sit behind the :class:`FaceScorer`
protocol. :class:`ScriptedScorer` replays observations from a sidecar
JSONL file so the pipeline runs without any vision model.

On-disk layout of a frame sequence directory::

    manifest.jsonl   one {"index": int, "timestamp": float, "file": str} per line
    <file>.npy       float pixels [h, w, 3] in [0, 1]

Observation sidecar, one line per frame that has faces::

    {"index": 3, "faces": [{"bbox": [x, y, w, h],
                            "landmarks": [[x, y], ...],
                            "probs": [angry, disgust, fear, happy, sad, surprise, neutral]}]}
"""

from __future__ import annotations

import json
import logging
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Protocol

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from emomoe.compressor import TokenSource, VisualEmbeddings
from emomoe.errors import ConfigError, ContractError, DimensionError, FormatError
from emomoe.tensor import Tensor, constant, matmul, parameter

logger = logging.getLogger(__name__)

EMOTIONS = ("angry", "disgust", "fear", "happy", "sad", "surprise", "neutral")
PROB_TOLERANCE = 1e-6


class FaceObservation(BaseModel):
    model_config = ConfigDict(frozen=True, populate_by_name=True)

    bbox: tuple[int, int, int, int]
    landmarks: list[tuple[float, float]] = Field(default_factory=list)
    emotion_probs: tuple[float, ...] = Field(alias="probs")

    @field_validator("bbox")
    @classmethod
    def _positive_box(cls, v: tuple[int, int, int, int]) -> tuple[int, int, int, int]:
        x, y, w, h = v
        if x < 0 or y < 0 or w < 1 or h < 1:
            raise ValueError(f"bbox needs x, y >= 0 and width, height >= 1, got {v}")
        return v

    @field_validator("emotion_probs")
    @classmethod
    def _distribution(cls, v: tuple[float, ...]) -> tuple[float, ...]:
        if len(v) != len(EMOTIONS):
            raise ValueError(f"expected {len(EMOTIONS)} emotion probabilities, got {len(v)}")
        if min(v) < 0.0 or abs(sum(v) - 1.0) > PROB_TOLERANCE:
            raise ValueError("emotion probabilities must be non-negative and sum to 1")
        return v

    @property
    def confidence(self) -> float:
        return max(self.emotion_probs)

    @property
    def emotion(self) -> str:
        return EMOTIONS[int(np.argmax(self.emotion_probs))]


@dataclass(frozen=True)
class FrameRecord:
    index: int
    timestamp: float
    pixels: Tensor
    is_key: bool = False

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


class FaceScorer(Protocol):
    def detect(self, frame: FrameRecord) -> list[FaceObservation]: ...


class ScriptedScorer:
    """Returns pre-recorded observations keyed by frame index."""

    def __init__(self, observations: dict[int, list[FaceObservation]] | None = None) -> None:
        self._observations = dict(observations or {})

    def detect(self, frame: FrameRecord) -> list[FaceObservation]:
        return list(self._observations.get(frame.index, []))

    @classmethod
    def from_jsonl(cls, path: Path) -> ScriptedScorer:
        if not path.is_file():
            raise FormatError(f"observation file not found: {path}")
        observations: dict[int, list[FaceObservation]] = {}
        with path.open(encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    faces = [FaceObservation.model_validate(f) for f in rec.get("faces", [])]
                    observations.setdefault(int(rec["index"]), []).extend(faces)
                except (json.JSONDecodeError, KeyError, TypeError, ValidationError) as e:
                    raise FormatError(f"{path}:{lineno}: bad observation record: {e}") from e
        return cls(observations)

    def to_jsonl(self, path: Path) -> None:
        lines = []
        for index in sorted(self._observations):
            faces = [f.model_dump(by_alias=True, mode="json") for f in self._observations[index]]
            lines.append(json.dumps({"index": index, "faces": faces}, sort_keys=True))
        path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


# -- frame sequences on disk --


def check_timestamps(frames: Sequence[FrameRecord]) -> None:
    for prev, cur in zip(frames, frames[1:], strict=False):
        if cur.timestamp <= prev.timestamp:
            raise ContractError(
                f"timestamps must increase: frame {cur.index} at {cur.timestamp} "
                f"follows frame {prev.index} at {prev.timestamp}"
            )


def load_frames(directory: Path) -> list[FrameRecord]:
    manifest = directory / "manifest.jsonl"
    if not manifest.is_file():
        raise FormatError(f"no manifest.jsonl in {directory}")
    frames: list[FrameRecord] = []
    with manifest.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                pixels = np.load(directory / rec["file"], allow_pickle=False)
                frames.append(
                    FrameRecord(
                        int(rec["index"]),
                        float(rec["timestamp"]),
                        constant(pixels),
                        is_key=bool(rec.get("is_key", False)),
                    )
                )
            except (json.JSONDecodeError, KeyError, TypeError, OSError, ValueError) as e:
                raise FormatError(f"{manifest}:{lineno}: bad frame record: {e}") from e
    check_timestamps([f for f in frames if not f.is_key])
    logger.info("Loaded %d frames from %s", len(frames), directory)
    return frames


def save_frames(frames: Sequence[FrameRecord], directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for pos, frame in enumerate(frames):
        name = f"frame_{pos:05d}{'_key' if frame.is_key else ''}.npy"
        np.save(directory / name, frame.pixels.data, allow_pickle=False)
        rec = {"index": frame.index, "timestamp": frame.timestamp, "file": name, "is_key": frame.is_key}
        lines.append(json.dumps(rec, sort_keys=True))
    (directory / "manifest.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")


# -- pipeline --


def select_key_frames(
    frames: Iterable[FrameRecord], scorer: FaceScorer, tau: float
) -> list[tuple[int, FaceObservation]]:
    """Every (frame index, face) whose top emotion probability reaches ``tau``, by frame order."""
    if not 0.0 < tau <= 1.0:
        raise ConfigError(f"tau must lie in (0, 1], got {tau}")
    selected: list[tuple[int, FaceObservation]] = []
    for frame in sorted(frames, key=lambda f: f.index):
        selected.extend((frame.index, face) for face in scorer.detect(frame) if face.confidence >= tau)
    return selected


def face_mask(height: int, width: int, faces: Sequence[FaceObservation]) -> np.ndarray:
    """Boolean [h, w] union of the face boxes."""
    mask = np.zeros((height, width), dtype=bool)
    for face in faces:
        x, y, w, h = face.bbox
        if x + w > width or y + h > height:
            raise ContractError(f"bbox {face.bbox} lies outside a {width}x{height} frame")
        mask[y : y + h, x : x + w] = True
    return mask


def apply_spatial_mask(frame: FrameRecord, faces: Sequence[FaceObservation]) -> FrameRecord:
    """Zero every pixel outside the union of face boxes."""
    if not faces:
        raise ContractError(f"frame {frame.index}: masking needs at least one face")
    keep = face_mask(frame.height, frame.width, faces)
    pixels = np.where(keep[:, :, None], frame.pixels.data, 0.0)
    return replace(frame, pixels=constant(pixels), is_key=True)


def compose_sequence(
    frames: Sequence[FrameRecord], key_frames: Sequence[FrameRecord]
) -> list[FrameRecord]:
    """Original frames untouched, then key frames in ascending timestamp order."""
    return list(frames) + sorted(key_frames, key=lambda f: f.timestamp)


@dataclass
class FecResult:
    sequence: list[FrameRecord]
    selections: list[tuple[int, FaceObservation]]
    tau: float
    active: bool

    @property
    def n_key_frames(self) -> int:
        return sum(1 for f in self.sequence if f.is_key)


def run_fec(
    frames: Sequence[FrameRecord],
    scorer: FaceScorer,
    tau: float,
    active: bool = True,
    quiet: bool = False,
) -> FecResult:
    """Select, mask and append key frames. With ``active=False`` the input passes through.

    ``quiet`` drops the per-sequence log lines to DEBUG for callers that summarize many clips.
    """
    if not active:
        return FecResult(list(frames), [], tau, active=False)
    selections = select_key_frames(frames, scorer, tau)
    by_frame: dict[int, list[FaceObservation]] = {}
    for index, face in selections:
        by_frame.setdefault(index, []).append(face)
    lookup = {f.index: f for f in frames}
    keys = [apply_spatial_mask(lookup[i], faces) for i, faces in by_frame.items()]
    if not keys:
        logger.log(logging.DEBUG if quiet else logging.WARNING, "No frame reached tau=%.3f; sequence left unchanged", tau)
    else:
        logger.log(
            logging.DEBUG if quiet else logging.INFO,
            "Selected %d key frames (%d faces) at tau=%.3f", len(keys), len(selections), tau,
        )
    return FecResult(compose_sequence(frames, keys), selections, tau, active=True)


def selection_report(result: FecResult, n_frames: int) -> dict[str, object]:
    return {
        "tau": result.tau,
        "active": result.active,
        "frames": n_frames,
        "key_frames": result.n_key_frames,
        "selections": [
            {
                "index": index,
                "emotion": face.emotion,
                "confidence": face.confidence,
                "bbox": list(face.bbox),
            }
            for index, face in result.selections
        ],
    }


# -- patch embedding --


@dataclass
class PatchEmbedder:
    """Linear map from flattened ``patch x patch x 3`` pixel blocks to ``d_v``."""

    weight: Tensor
    bias: Tensor
    patch: int

    @property
    def d_v(self) -> int:
        return self.weight.shape[1]


def init_patch_embedder(rng: np.random.Generator, patch: int, d_v: int) -> PatchEmbedder:
    fan_in = patch * patch * 3
    bound = 1.0 / np.sqrt(fan_in)
    return PatchEmbedder(
        weight=parameter(rng.uniform(-bound, bound, size=(fan_in, d_v)), name="weight"),
        bias=parameter(np.zeros(d_v), name="bias"),
        patch=patch,
    )


def patchify(pixels: np.ndarray, patch: int) -> np.ndarray:
    """Row-major non-overlapping patches, ``[h/p * w/p, p*p*3]``."""
    h, w, c = pixels.shape
    if h % patch or w % patch:
        raise ConfigError(f"frame size {h}x{w} is not divisible by patch size {patch}")
    blocks = pixels.reshape(h // patch, patch, w // patch, patch, c).transpose(0, 2, 1, 3, 4)
    return blocks.reshape(-1, patch * patch * c)


def sequence_patches(sequence: Sequence[FrameRecord], patch: int) -> tuple[np.ndarray, tuple[TokenSource, ...]]:
    """Patches of every frame in order, ``[frames * patches_per_frame, p*p*3]``, with source tags."""
    if not sequence:
        raise ContractError("cannot embed an empty frame sequence")
    shape = sequence[0].pixels.shape
    rows: list[np.ndarray] = []
    sources: list[TokenSource] = []
    for frame in sequence:
        if frame.pixels.shape != shape:
            raise DimensionError(f"frame {frame.index} has shape {frame.pixels.shape}, expected {shape}")
        patches = patchify(frame.pixels.data, patch)
        rows.append(patches)
        tag = TokenSource.KEY_FRAME if frame.is_key else TokenSource.ORIGINAL
        sources.extend([tag] * patches.shape[0])
    return np.concatenate(rows, axis=0), tuple(sources)


def embed_patches(patches: Tensor, embedder: PatchEmbedder) -> Tensor:
    """``[N, p*p*3]`` or ``[B, N, p*p*3]`` patches to ``d_v`` tokens."""
    if patches.shape[-1] != embedder.weight.shape[0]:
        raise DimensionError(
            f"patch width {patches.shape[-1]} does not match embedder weight {embedder.weight.shape}"
        )
    return matmul(patches, embedder.weight) + embedder.bias


def fec_to_embeddings(sequence: Sequence[FrameRecord], embedder: PatchEmbedder) -> VisualEmbeddings:
    """Embed every frame's patches and concatenate the frames along the token axis."""
    patches, sources = sequence_patches(sequence, embedder.patch)
    return VisualEmbeddings(embed_patches(constant(patches), embedder), sources)
