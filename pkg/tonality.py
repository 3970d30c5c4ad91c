"""Key and mode estimation, and tonic-relative pitch offsets."""
import logging
from dataclasses import dataclass
from enum import Enum
from typing import List, Sequence, Tuple

import numpy as np

from exceptions import KeyEstimationError, OutOfModeError
from midi_io import NoteEvent

logger = logging.getLogger(__name__)

PITCH_NAMES = ['C', 'C#', 'D', 'Eb', 'E', 'F', 'F#', 'G', 'Ab', 'A', 'Bb', 'B']
ROMAN = ['I', 'II', 'III', 'IV', 'V', 'VI', 'VII']

OFFSET_LIMIT = 16
# weight of the tonic-triad profile relative to scale membership
TONIC_TRIAD_WEIGHT = 0.25


class Mode(Enum):
    MAJOR = ('Major', (0, 2, 4, 5, 7, 9, 11))
    DORIAN = ('Dorian', (0, 2, 3, 5, 7, 9, 10))
    PHRYGIAN = ('Phrygian', (0, 1, 3, 5, 7, 8, 10))
    LYDIAN = ('Lydian', (0, 2, 4, 6, 7, 9, 11))
    MIXOLYDIAN = ('Mixolydian', (0, 2, 4, 5, 7, 9, 10))
    MINOR = ('Minor', (0, 2, 3, 5, 7, 8, 10))
    LOCRIAN = ('Locrian', (0, 1, 3, 5, 6, 8, 10))
    JAZZ_MINOR = ('JazzMinor', (0, 2, 3, 5, 7, 9, 11))

    @property
    def label(self) -> str:
        return self.value[0]

    @property
    def intervals(self) -> Tuple[int, ...]:
        return self.value[1]

    @property
    def index(self) -> int:
        return list(Mode).index(self)

    @classmethod
    def from_name(cls, name: str) -> 'Mode':
        key = name.replace(' ', '').replace('_', '').lower()
        for mode in cls:
            if mode.label.lower() == key or mode.name.replace('_', '').lower() == key:
                return mode
        raise ValueError(f"Unknown mode: {name}")


@dataclass(frozen=True)
class KeyEstimate:
    tonic: int
    mode: Mode
    confidence: float

    def __str__(self):
        return f"{PITCH_NAMES[self.tonic]} {self.mode.label}"


@dataclass(frozen=True)
class OffsetResult:
    offsets: List[int]
    reference: int
    clamp_count: int


def _profiles() -> Tuple[np.ndarray, np.ndarray, List[Tuple[int, Mode]]]:
    """Scale-membership and tonic-triad profiles for all 12 x 8 candidates"""
    scale_rows, triad_rows, candidates = [], [], []
    for tonic in range(12):
        for mode in Mode:
            scale = np.zeros(12)
            scale[list(mode.intervals)] = 1.0
            triad = np.zeros(12)
            triad[0] = 2.0
            triad[mode.intervals[2]] = 1.0
            triad[mode.intervals[4]] = 1.0
            scale_rows.append(np.roll(scale, tonic))
            triad_rows.append(np.roll(triad, tonic))
            candidates.append((tonic, mode))
    return np.array(scale_rows), np.array(triad_rows), candidates


SCALE_PROFILES, TRIAD_PROFILES, CANDIDATES = _profiles()


def pitch_class_histogram(notes: Sequence[NoteEvent]) -> np.ndarray:
    """Duration-weighted pitch-class histogram"""
    histogram = np.zeros(12)
    for note in notes:
        histogram[note.pitch % 12] += float(note.duration)
    return histogram


def estimate_key(notes: Sequence[NoteEvent]) -> KeyEstimate:
    """Correlate the pitch-class histogram with every (tonic, mode) profile"""
    if not notes:
        raise KeyEstimationError("Cannot estimate a key without notes")
    histogram = pitch_class_histogram(notes)
    norm = np.linalg.norm(histogram)
    if norm == 0:
        raise KeyEstimationError("Cannot estimate a key from zero-duration notes")

    scale_corr = SCALE_PROFILES @ histogram / (np.linalg.norm(SCALE_PROFILES, axis=1) * norm)
    triad_corr = TRIAD_PROFILES @ histogram / (np.linalg.norm(TRIAD_PROFILES, axis=1) * norm)
    scores = np.round(scale_corr + TONIC_TRIAD_WEIGHT * triad_corr, 12)

    # candidates are ordered by tonic then mode, so a stable sort breaks ties as required
    order = np.argsort(-scores, kind='stable')
    best, second = scores[order[0]], scores[order[1]]
    confidence = float((best - second) / best) if best > 0 else 0.0
    tonic, mode = CANDIDATES[order[0]]
    return KeyEstimate(tonic=tonic, mode=mode, confidence=float(np.clip(confidence, 0.0, 1.0)))


def degree_of(pitch_class: int, tonic: int, mode: Mode) -> int:
    """1-based scale degree of a pitch class, or OutOfModeError"""
    interval = (pitch_class - tonic) % 12
    if interval not in mode.intervals:
        raise OutOfModeError(
            f"{PITCH_NAMES[pitch_class % 12]} is not diatonic to {PITCH_NAMES[tonic % 12]} {mode.label}")
    return mode.intervals.index(interval) + 1


def diatonic_triad(degree: int, mode: Mode) -> Tuple[int, ...]:
    """Intervals above the root of the triad built on ``degree`` within ``mode``"""
    if not 1 <= degree <= 7:
        raise ValueError(f"Scale degree must be 1-7, got {degree}")
    i = degree - 1
    root = mode.intervals[i]
    third = mode.intervals[(i + 2) % 7]
    fifth = mode.intervals[(i + 4) % 7]
    return (0, (third - root) % 12, (fifth - root) % 12)


def transpose_degree(degree: int, steps: int) -> int:
    """Diatonic transposition by ``steps`` scale steps"""
    return (degree - 1 + steps) % 7 + 1


def melody_offsets(notes: Sequence[NoteEvent], tonic: int) -> OffsetResult:
    """Signed semitone offsets from a tonic reference chosen near the median pitch"""
    if not notes:
        return OffsetResult(offsets=[], reference=60 + tonic % 12, clamp_count=0)
    pitches = np.array([n.pitch for n in notes])
    median = float(np.median(pitches))
    tonic = tonic % 12
    reference = tonic + 12 * int(np.floor((median - tonic) / 12 + 0.5))

    offsets, clamps = [], 0
    for pitch in pitches:
        offset = int(pitch) - reference
        shifted = False
        while offset > OFFSET_LIMIT:
            offset -= 12
            shifted = True
        while offset < -OFFSET_LIMIT:
            offset += 12
            shifted = True
        clamps += shifted
        offsets.append(offset)
    if clamps:
        logger.debug(f"{clamps} melody notes octave-shifted into +/-{OFFSET_LIMIT}")
    return OffsetResult(offsets=offsets, reference=reference, clamp_count=clamps)
