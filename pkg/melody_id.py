"""Melody track identification: instrumentation, density and range rubric plus pitch entropy."""
import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.stats import entropy

from config import DEFAULT_INSTRUMENT_FILE, DEFAULT_RUBRIC_FILE
from exceptions import ConfigError, NoMelodyError
from midi_io import NoteEvent, Song, Track

logger = logging.getLogger(__name__)


class InstrumentCategory(Enum):
    MELODY_LIKELY = 'MelodyLikely'
    ACCOMPANIMENT_LIKELY = 'AccompanimentLikely'
    PERCUSSION = 'Percussion'


@dataclass(frozen=True)
class InstrumentTable:
    """Keyword and program lists for each instrument category"""
    accompaniment_keywords: Tuple[str, ...]
    accompaniment_programs: Tuple[Tuple[int, int], ...]
    melody_keywords: Tuple[str, ...]
    melody_programs: Tuple[Tuple[int, int], ...]
    percussion_keywords: Tuple[str, ...] = ()

    def categorize(self, name: str, program: int, is_channel_10: bool) -> InstrumentCategory:
        if is_channel_10:
            return InstrumentCategory.PERCUSSION
        name = (name or '').lower()
        if name:
            if any(k in name for k in self.percussion_keywords):
                return InstrumentCategory.PERCUSSION
            if any(k in name for k in self.accompaniment_keywords):
                return InstrumentCategory.ACCOMPANIMENT_LIKELY
            if any(k in name for k in self.melody_keywords):
                return InstrumentCategory.MELODY_LIKELY
        if any(lo <= program <= hi for lo, hi in self.accompaniment_programs):
            return InstrumentCategory.ACCOMPANIMENT_LIKELY
        if any(lo <= program <= hi for lo, hi in self.melody_programs):
            return InstrumentCategory.MELODY_LIKELY
        return InstrumentCategory.ACCOMPANIMENT_LIKELY


@dataclass(frozen=True)
class RubricWeights:
    category: Dict[str, float] = field(default_factory=lambda: {
        'MelodyLikely': 2.0, 'AccompanimentLikely': 0.0, 'Percussion': -100.0})
    density_bonus: float = 1.0
    density_range: Tuple[float, float] = (0.4, 0.8)
    range_bonus: float = 1.0
    pitch_range: Tuple[int, int] = (48, 84)
    range_coverage: float = 0.9


@dataclass(frozen=True)
class TrackScore:
    """Score of one track; ``total`` is always ``rubric + entropy``"""
    track_index: int
    category: InstrumentCategory
    density: float
    rubric: float
    entropy: float
    total: float
    flags: Tuple[str, ...] = ()


@lru_cache(maxsize=8)
def load_instrument_table(path: str = str(DEFAULT_INSTRUMENT_FILE)) -> InstrumentTable:
    try:
        with open(path, encoding='utf-8') as f:
            raw = json.load(f)
        return InstrumentTable(
            accompaniment_keywords=tuple(k.lower() for k in raw['accompaniment']['keywords']),
            accompaniment_programs=tuple(tuple(r) for r in raw['accompaniment']['programs']),
            melody_keywords=tuple(k.lower() for k in raw['melody']['keywords']),
            melody_programs=tuple(tuple(r) for r in raw['melody']['programs']),
            percussion_keywords=tuple(k.lower() for k in raw.get('percussion', {}).get('keywords', [])),
        )
    except (OSError, KeyError, TypeError, json.JSONDecodeError) as e:
        logger.error(f"Error loading instrument table: {str(e)}")
        raise ConfigError(f"Error loading instrument table from {path}: {str(e)}")


@lru_cache(maxsize=8)
def load_rubric_weights(path: str = str(DEFAULT_RUBRIC_FILE)) -> RubricWeights:
    try:
        with open(path, encoding='utf-8') as f:
            raw = json.load(f)
        return RubricWeights(
            category={k: float(v) for k, v in raw['category'].items()},
            density_bonus=float(raw['density_bonus']),
            density_range=tuple(raw['density_range']),
            range_bonus=float(raw['range_bonus']),
            pitch_range=tuple(raw['pitch_range']),
            range_coverage=float(raw.get('range_coverage', 0.9)),
        )
    except (OSError, KeyError, TypeError, ValueError) as e:
        logger.error(f"Error loading rubric weights: {str(e)}")
        raise ConfigError(f"Error loading rubric weights from {path}: {str(e)}")


def instrument_category(name: str, program: int, is_channel_10: bool,
                        table: Optional[InstrumentTable] = None) -> InstrumentCategory:
    table = table or load_instrument_table()
    return table.categorize(name, program, is_channel_10)


def track_category(track: Track, table: Optional[InstrumentTable] = None) -> InstrumentCategory:
    name = ' '.join(part for part in (track.instrument, track.name) if part)
    return instrument_category(name, track.program, track.is_percussion, table)


def note_density(notes: Sequence[NoteEvent], song_duration) -> float:
    """Share of the song during which at least one note of the track sounds"""
    if song_duration <= 0:
        raise ValueError("Song duration must be positive")
    if not notes:
        return 0.0

    covered = 0
    current_start, current_end = None, None
    for note in sorted(notes, key=lambda n: (n.onset, n.end)):
        if current_end is None or note.onset > current_end:
            if current_end is not None:
                covered += current_end - current_start
            current_start, current_end = note.onset, note.end
        else:
            current_end = max(current_end, note.end)
    covered += current_end - current_start
    return float(min(covered / song_duration, 1))


def pitch_class_distribution(notes: Sequence[NoteEvent]) -> np.ndarray:
    """Probability of each pitch class, counted over note onsets"""
    counts = np.bincount([n.pitch % 12 for n in notes], minlength=12).astype(float)
    total = counts.sum()
    if total == 0:
        return counts
    return counts / total


def pitch_entropy(notes: Sequence[NoteEvent]) -> float:
    """Shannon entropy in nats of the track's pitch-class distribution"""
    if not notes:
        logger.warning("Pitch entropy of an empty track taken as 0")
        return 0.0
    return float(entropy(pitch_class_distribution(notes)))


def range_bonus_applies(notes: Sequence[NoteEvent], weights: RubricWeights) -> bool:
    """True when the central part of the track's notes lies inside the pitch range"""
    if not notes:
        return False
    tail = (1 - weights.range_coverage) / 2 * 100
    low, high = np.percentile([n.pitch for n in notes], [tail, 100 - tail])
    return bool(weights.pitch_range[0] <= low and high <= weights.pitch_range[1])


def rubric_score(track: Track, song: Song, weights: Optional[RubricWeights] = None,
                 table: Optional[InstrumentTable] = None) -> float:
    weights = weights or load_rubric_weights()
    category = track_category(track, table)
    score = weights.category[category.value]
    duration = song.duration
    density = note_density(track.notes, duration) if duration > 0 else 0.0
    if weights.density_range[0] <= density <= weights.density_range[1]:
        score += weights.density_bonus
    if range_bonus_applies(track.notes, weights):
        score += weights.range_bonus
    return float(score)


class MelodyIdentifier:
    """Scores every track of a song and picks the melody"""

    def __init__(self, weights: Optional[RubricWeights] = None, table: Optional[InstrumentTable] = None):
        self.weights = weights or load_rubric_weights()
        self.table = table or load_instrument_table()
        self.scores: List[TrackScore] = []

    def score_tracks(self, song: Song) -> List[TrackScore]:
        duration = song.duration
        self.scores = []
        for index, track in enumerate(song.tracks):
            flags = []
            if not track.notes:
                flags.append('empty')
            rubric = rubric_score(track, song, self.weights, self.table)
            track_entropy = pitch_entropy(track.notes) if track.notes else 0.0
            self.scores.append(TrackScore(
                track_index=index,
                category=track_category(track, self.table),
                density=note_density(track.notes, duration) if duration > 0 else 0.0,
                rubric=rubric,
                entropy=track_entropy,
                total=rubric + track_entropy,
                flags=tuple(flags),
            ))
        return self.scores

    def identify(self, song: Song) -> int:
        """Index of the highest-scoring pitched track; ties go to the lowest index"""
        scores = self.score_tracks(song)
        eligible = [
            s for s, track in zip(scores, song.tracks)
            if track.notes and s.category != InstrumentCategory.PERCUSSION
        ]
        if not eligible:
            raise NoMelodyError("Song has no pitched track with notes")
        best = eligible[0]
        for score in eligible[1:]:
            if score.total > best.total:
                best = score
        logger.debug(f"Melody is track {best.track_index} with score {best.total:.3f}")
        return best.track_index

    def score_table(self) -> pd.DataFrame:
        """Per-track score breakdown of the last scored song"""
        return pd.DataFrame([
            {
                'track': s.track_index,
                'category': s.category.value,
                'density': round(s.density, 3),
                'rubric': s.rubric,
                'entropy': round(s.entropy, 4),
                'total': round(s.total, 4),
                'flags': ','.join(s.flags),
            }
            for s in self.scores
        ])

    def to_dict(self) -> List[Dict[str, Any]]:
        return [
            {
                'track': s.track_index,
                'category': s.category.value,
                'density': s.density,
                'rubric': s.rubric,
                'entropy': s.entropy,
                'total': s.total,
                'flags': list(s.flags),
            }
            for s in self.scores
        ]


def identify_melody(song: Song, weights: Optional[RubricWeights] = None,
                    table: Optional[InstrumentTable] = None) -> int:
    return MelodyIdentifier(weights, table).identify(song)
