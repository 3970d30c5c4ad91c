"""Chord detection by interval-compatibility cost over a fixed template collection."""
import json
import logging
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from config import DEFAULT_TEMPLATE_FILE
from exceptions import ConfigError, NoRootError
from midi_io import NoteEvent, Song
from tonality import PITCH_NAMES, ROMAN, Mode, degree_of, diatonic_triad

logger = logging.getLogger(__name__)

# compatibility distance for interval classes 0-7; 8-11 fold by inversion
COMPATIBILITY = {0: 0, 1: 6, 2: 2, 3: 2, 4: 2, 5: 1, 6: 4, 7: 1}

QUALITIES = ('Pwr', 'Maj', 'Min', 'Dim', 'Aug')
QUALITY_INTERVALS = {'Pwr': 7, 'Maj': 4, 'Min': 3, 'Dim': 6, 'Aug': 8}

BIN_MEASURES = {
    'half': Fraction(1, 2),
    'one': Fraction(1),
    'two': Fraction(2),
}


def compatibility_distance(semitones: int) -> int:
    interval = abs(int(semitones)) % 12
    return COMPATIBILITY[min(interval, 12 - interval)]


DISTANCE = np.array([[compatibility_distance(a - b) for b in range(12)] for a in range(12)])


def qualities_of(intervals: Iterable[int]) -> FrozenSet[str]:
    """Quality flags marked by a chord: a flag is set when its defining interval is present"""
    classes = {i % 12 for i in intervals}
    return frozenset(q for q in QUALITIES if QUALITY_INTERVALS[q] in classes)


@dataclass(frozen=True)
class ChordTemplate:
    name: str
    intervals: Tuple[int, ...]
    symbol: str = ''
    quality_override: Optional[FrozenSet[str]] = None

    def __post_init__(self):
        if 0 not in self.intervals:
            raise ConfigError(f"Chord template {self.name!r} must contain the root interval 0")
        if any(not 0 <= i <= 23 for i in self.intervals):
            raise ConfigError(f"Chord template {self.name!r} has intervals outside 0-23")

    @property
    def pitch_classes(self) -> Tuple[int, ...]:
        return tuple(sorted({i % 12 for i in self.intervals}))

    @property
    def qualities(self) -> FrozenSet[str]:
        if self.quality_override is not None:
            return self.quality_override
        return qualities_of(self.intervals)


@dataclass(frozen=True)
class ChordLabel:
    """Chord matched to one bin; ``root_pitch_class`` is None for a silent bin"""
    root_pitch_class: Optional[int]
    template: Optional[ChordTemplate]
    cost: int
    start: Fraction
    length: Fraction

    @property
    def is_silent(self) -> bool:
        return self.template is None

    @property
    def end(self) -> Fraction:
        return self.start + self.length

    @property
    def name(self) -> str:
        return chord_name(self)


@dataclass(frozen=True)
class DegreeChord:
    """A chord as a scale degree (1-7) plus quality flags; degree None means silent"""
    degree: Optional[int]
    qualities: FrozenSet[str] = frozenset()

    @property
    def is_silent(self) -> bool:
        return self.degree is None

    @property
    def roman(self) -> str:
        return 'N.C.' if self.degree is None else ROMAN[self.degree - 1]


SILENT = DegreeChord(degree=None)


@lru_cache(maxsize=8)
def load_templates(path: str = str(DEFAULT_TEMPLATE_FILE)) -> Tuple[ChordTemplate, ...]:
    """Read the chord template collection; order in the file breaks cost ties"""
    try:
        with open(path, encoding='utf-8') as f:
            raw = json.load(f)
        templates = tuple(
            ChordTemplate(
                name=entry['name'],
                intervals=tuple(entry['intervals']),
                symbol=entry.get('symbol', ''),
                quality_override=frozenset(entry['qualities']) if 'qualities' in entry else None,
            )
            for entry in raw['templates']
        )
    except (OSError, KeyError, TypeError, json.JSONDecodeError) as e:
        logger.error(f"Error loading chord templates: {str(e)}")
        raise ConfigError(f"Error loading chord templates from {path}: {str(e)}")
    if not templates:
        raise ConfigError(f"No chord templates in {path}")
    return templates


def chord_name(label: ChordLabel) -> str:
    if label.is_silent:
        return 'N.C.'
    return f"{PITCH_NAMES[label.root_pitch_class]}{label.template.symbol}"


def find_root(bin_notes: Sequence[NoteEvent], bin_start, upbeat: Fraction = Fraction(1, 2)) -> int:
    """Pitch class of the lowest note starting before the first upbeat of the bin.

    Falls back to the lowest note sounding at the bin start, then the lowest
    note anywhere in the bin.
    """
    if not bin_notes:
        raise NoRootError(f"Bin at beat {bin_start} is silent")
    bin_start = Fraction(bin_start)
    on_downbeat = [n for n in bin_notes if bin_start <= n.onset < bin_start + upbeat]
    if on_downbeat:
        return min(on_downbeat, key=lambda n: n.pitch).pitch % 12
    sounding = [n for n in bin_notes if n.onset <= bin_start < n.end]
    if sounding:
        return min(sounding, key=lambda n: n.pitch).pitch % 12
    return min(bin_notes, key=lambda n: n.pitch).pitch % 12


def cost(pitches: Iterable[int], chord: ChordTemplate, root: int) -> int:
    """Pitch-to-voice plus voice-to-pitch compatibility cost of a chord reading"""
    intervals = sorted({(p - root) % 12 for p in pitches})
    if not intervals:
        raise ValueError("Cost needs at least one pitch")
    distances = DISTANCE[np.ix_(intervals, chord.pitch_classes)]
    pitch_cost = distances.min(axis=1).sum()
    chord_cost = distances.min(axis=0).sum()
    return int(pitch_cost + chord_cost)


def naive_semitone_cost(pitches: Iterable[int], chord: ChordTemplate, root: int) -> int:
    """Pitch-to-voice cost with plain semitone distance, for comparison"""
    total = 0
    for p in sorted({(p - root) % 12 for p in pitches}):
        total += min(min(abs(p - v), 12 - abs(p - v)) for v in chord.pitch_classes)
    return total


def notes_in_bin(notes: Sequence[NoteEvent], start: Fraction, length: Fraction) -> List[NoteEvent]:
    end = start + length
    return [n for n in notes if n.onset < end and n.end > start]


def best_chord_in_bin(bin_notes: Sequence[NoteEvent], bin_start=Fraction(0), bin_length=Fraction(4),
                      templates: Optional[Sequence[ChordTemplate]] = None) -> ChordLabel:
    """Minimum-cost chord for the notes of one bin"""
    bin_start, bin_length = Fraction(bin_start), Fraction(bin_length)
    if not bin_notes:
        return ChordLabel(None, None, 0, bin_start, bin_length)
    templates = templates or load_templates()
    root = find_root(bin_notes, bin_start)
    pitches = {n.pitch % 12 for n in bin_notes}

    best_key, best = None, None
    for index, template in enumerate(templates):
        key = (cost(pitches, template, root), len(template.pitch_classes), index)
        if best_key is None or key < best_key:
            best_key, best = key, template
    return ChordLabel(root, best, best_key[0], bin_start, bin_length)


def _label_bins(notes: Sequence[NoteEvent], start: Fraction, end: Fraction, bin_length: Fraction,
                templates: Sequence[ChordTemplate]) -> List[ChordLabel]:
    labels = []
    position = start
    while position < end:
        length = min(bin_length, end - position)
        labels.append(best_chord_in_bin(notes_in_bin(notes, position, length), position, length, templates))
        position += length
    return labels


def detect_chords(song: Song, accompaniment_tracks: Optional[Iterable[int]] = None,
                  bin_policy: str = 'auto',
                  templates: Optional[Sequence[ChordTemplate]] = None) -> List[ChordLabel]:
    """Label every bin of every constant-time-signature segment with a chord"""
    if not song.time_signatures:
        raise ValueError("Chord detection needs at least one time signature span")
    if bin_policy not in BIN_MEASURES and bin_policy != 'auto':
        raise ValueError(f"Unsupported bin policy: {bin_policy}")
    templates = templates or load_templates()
    notes = song.all_notes(include_percussion=False, track_indices=accompaniment_tracks)

    labels = []
    for span in song.time_signatures:
        if span.length == 0:
            continue
        span_notes = notes_in_bin(notes, span.start, span.length)
        if bin_policy != 'auto':
            bin_length = BIN_MEASURES[bin_policy] * span.measure_length
            labels.extend(_label_bins(span_notes, span.start, span.end, bin_length, templates))
            continue

        n_measures = span.length / span.measure_length
        best_key, best_labels = None, None
        # longest bins first so ties keep the coarser reading
        for policy in ('two', 'one', 'half'):
            bin_length = BIN_MEASURES[policy] * span.measure_length
            candidate = _label_bins(span_notes, span.start, span.end, bin_length, templates)
            normalized = Fraction(sum(label.cost for label in candidate)) / n_measures
            if best_key is None or normalized < best_key:
                best_key, best_labels = normalized, candidate
        logger.debug(f"Auto bin policy at beat {span.start}: cost {float(best_key):.3f} per measure")
        labels.extend(best_labels)
    return labels


def to_scale_degree(label: ChordLabel, tonic: int, mode: Mode) -> DegreeChord:
    """Roman-numeral degree and quality flags of a chord within a key"""
    if label.is_silent:
        return SILENT
    degree = degree_of(label.root_pitch_class, tonic, mode)
    return DegreeChord(degree=degree, qualities=label.template.qualities)


def diatonic_chord(degree: int, mode: Mode) -> DegreeChord:
    """The mode's own triad on a degree"""
    return DegreeChord(degree=degree, qualities=qualities_of(diatonic_triad(degree, mode)))


def chord_at(labels: Sequence[ChordLabel], position: Fraction) -> Optional[ChordLabel]:
    for label in labels:
        if label.start <= position < label.end:
            return label
    return None


def label_table(labels: Sequence[ChordLabel]) -> List[Dict]:
    return [
        {
            'start': float(label.start),
            'length': float(label.length),
            'chord': label.name,
            'root': None if label.is_silent else PITCH_NAMES[label.root_pitch_class],
            'template': None if label.is_silent else label.template.name,
            'cost': label.cost,
        }
        for label in labels
    ]

