"""Melody grids, chord condition vectors and 8-measure training segments.

A melody grid has one row per sixteenth-note step and 35 channels: 33
offset slots for -16..16 semitones around the tonic reference, a Silent
slot and an Attack flag. A condition vector flattens, for two chord slots
per measure, a degree one-hot (I..VII plus Silent) and five quality flags,
followed by a one-hot of the mode.
"""
import logging
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from exceptions import EncodingError, KeyEstimationError, OutOfModeError
from harmony import QUALITIES, SILENT, ChordLabel, DegreeChord, chord_at, to_scale_degree
from midi_io import NoteEvent, Song, TimeSignatureSpan
from tonality import OFFSET_LIMIT, KeyEstimate, Mode, estimate_key, melody_offsets

logger = logging.getLogger(__name__)

STEPS_PER_MEASURE = 16
STEP = Fraction(1, 4)
CHORD_SLOTS_PER_MEASURE = 2
STEPS_PER_CHORD_SLOT = STEPS_PER_MEASURE // CHORD_SLOTS_PER_MEASURE

N_OFFSETS = 2 * OFFSET_LIMIT + 1
SILENT_SLOT = N_OFFSETS
ATTACK = N_OFFSETS + 1
N_PITCH_SLOTS = N_OFFSETS + 1
N_CHANNELS = N_OFFSETS + 2

N_DEGREES = 8  # I..VII plus Silent
SILENT_DEGREE = 7
N_QUALITIES = len(QUALITIES)
N_MODES = len(Mode)
STEP_CONDITION_DIM = N_DEGREES + N_QUALITIES + N_MODES

SEGMENT_MEASURES = 8
HOP_MEASURES = 4
MIN_MELODY_DENSITY = 0.1
# overlaps up to this many steps are legato, not polyphony
LEGATO_STEPS = 1

DROP_REASONS = ('meter', 'sparse_melody', 'out_of_mode', 'polyphony')


def n_steps(n_measures: int = SEGMENT_MEASURES) -> int:
    return n_measures * STEPS_PER_MEASURE


def grid_size(n_measures: int = SEGMENT_MEASURES) -> int:
    return N_CHANNELS * n_steps(n_measures)


def condition_size(n_measures: int = SEGMENT_MEASURES) -> int:
    slots = n_measures * CHORD_SLOTS_PER_MEASURE
    return N_DEGREES * slots + N_QUALITIES * slots + N_MODES


def offset_to_slot(offset: int) -> int:
    if not -OFFSET_LIMIT <= offset <= OFFSET_LIMIT:
        raise EncodingError(f"Offset {offset} outside +/-{OFFSET_LIMIT}")
    return offset + OFFSET_LIMIT


def slot_to_offset(slot: int) -> int:
    return slot - OFFSET_LIMIT


@dataclass(frozen=True)
class QuantizedNote:
    """A melody note in tonic-relative semitones, placed on the sixteenth grid"""
    offset: int
    start: int
    length: int

    @property
    def end(self) -> int:
        return self.start + self.length


@dataclass
class TrainingSegment:
    id: str
    grid: np.ndarray
    condition: np.ndarray
    source: str
    start_measure: int
    n_measures: int
    tonic: int
    mode: Mode
    key_confidence: float
    reference: int
    provenance: Dict[str, Any] = field(default_factory=dict)

    @property
    def chords(self) -> List[DegreeChord]:
        return decode_condition(self.condition, self.n_measures)[0]


def validate_grid(grid: np.ndarray, n_measures: int = SEGMENT_MEASURES):
    """Raise EncodingError unless the grid is a well-formed hard encoding"""
    expected = (n_steps(n_measures), N_CHANNELS)
    if grid.shape != expected:
        raise EncodingError(f"Melody grid has shape {grid.shape}, expected {expected}")
    pitch = grid[:, :N_PITCH_SLOTS]
    if not np.all((pitch == 0) | (pitch == 1)) or not np.all(pitch.sum(axis=1) == 1):
        raise EncodingError("Every step needs exactly one pitch or Silent slot")
    attack = grid[:, ATTACK]
    if not np.all((attack == 0) | (attack == 1)):
        raise EncodingError("Attack channel must be 0 or 1")
    if np.any((attack == 1) & (grid[:, SILENT_SLOT] == 1)):
        raise EncodingError("Attack set on a silent step")


def quantize_notes(notes: Sequence[NoteEvent], window_start, reference: int,
                   n_measures: int = SEGMENT_MEASURES) -> List[QuantizedNote]:
    """Place notes starting inside the window on the sixteenth grid, relative to ``reference``"""
    window_start = Fraction(window_start)
    total = n_steps(n_measures)
    quantized = []
    for note in notes:
        start = round((note.onset - window_start) / STEP)
        if start < 0 or start >= total:
            continue
        end = min(round((note.end - window_start) / STEP), total)
        offset = note.pitch - reference
        while offset > OFFSET_LIMIT:
            offset -= 12
        while offset < -OFFSET_LIMIT:
            offset += 12
        quantized.append(QuantizedNote(offset=offset, start=start, length=max(end - start, 1)))
    return quantized


def encode_melody(notes: Sequence[QuantizedNote],
                  n_measures: int = SEGMENT_MEASURES) -> Tuple[np.ndarray, bool]:
    """Hard melody grid for quantized notes, plus whether any step was polyphonic.

    At a polyphonic step the higher note is kept.
    """
    total = n_steps(n_measures)
    ordered = sorted(notes, key=lambda n: (n.start, -n.offset))
    spans = []
    for i, note in enumerate(ordered):
        end = min(note.end, total)
        following = next((n for n in ordered[i + 1:] if n.start > note.start), None)
        if following is not None and 0 < end - following.start <= LEGATO_STEPS:
            end = following.start
        spans.append((note.start, end, note.offset))

    grid = np.zeros((total, N_CHANNELS))
    grid[:, SILENT_SLOT] = 1
    polyphonic = False
    previous = None
    for step in range(total):
        sounding = [i for i, (start, end, _) in enumerate(spans) if start <= step < end]
        if not sounding:
            previous = None
            continue
        if len(sounding) > 1:
            polyphonic = True
        chosen = max(sounding, key=lambda i: (spans[i][2], -spans[i][0]))
        grid[step, SILENT_SLOT] = 0
        grid[step, offset_to_slot(spans[chosen][2])] = 1
        if chosen != previous:
            grid[step, ATTACK] = 1
        previous = chosen
    return grid, polyphonic


def harden(probabilities: np.ndarray, attack_threshold: float = 0.5) -> np.ndarray:
    """Per-step argmax over pitch slots and a thresholded attack"""
    slots = np.argmax(probabilities[:, :N_PITCH_SLOTS], axis=1)
    grid = np.zeros((len(slots), N_CHANNELS))
    grid[np.arange(len(slots)), slots] = 1
    attack = probabilities[:, ATTACK] >= attack_threshold
    previous = np.concatenate([[SILENT_SLOT], slots[:-1]])
    attack |= slots != previous
    attack &= slots != SILENT_SLOT
    grid[:, ATTACK] = attack.astype(float)
    return grid


def grid_notes(grid: np.ndarray) -> List[QuantizedNote]:
    """Quantized notes of a hard grid; attacks split notes, equal slots merge"""
    notes = []
    current = None
    for step, row in enumerate(grid):
        slot = int(np.argmax(row[:N_PITCH_SLOTS]))
        if slot == SILENT_SLOT:
            if current is not None:
                notes.append(current)
                current = None
            continue
        if current is None or row[ATTACK] >= 0.5 or slot_to_offset(slot) != current.offset:
            if current is not None:
                notes.append(current)
            current = QuantizedNote(offset=slot_to_offset(slot), start=step, length=1)
        else:
            current = QuantizedNote(offset=current.offset, start=current.start, length=current.length + 1)
    if current is not None:
        notes.append(current)
    return notes


def decode_melody(grid: np.ndarray, reference: int, start=Fraction(0), velocity: int = 100,
                  track_index: int = 0, channel: int = 0) -> List[NoteEvent]:
    """Note events of a grid; ``reference`` is the MIDI pitch of offset 0"""
    if grid.ndim != 2 or grid.shape[1] != N_CHANNELS:
        raise EncodingError(f"Melody grid needs {N_CHANNELS} channels, got shape {grid.shape}")
    if not np.all((grid == 0) | (grid == 1)):
        grid = harden(grid)
    start = Fraction(start)
    return [
        NoteEvent(
            onset=start + note.start * STEP,
            pitch=reference + note.offset,
            duration=note.length * STEP,
            velocity=velocity,
            track_index=track_index,
            channel=channel,
        )
        for note in grid_notes(grid)
    ]


def encode_condition(chords: Sequence[DegreeChord], mode: Mode,
                     n_measures: int = SEGMENT_MEASURES) -> np.ndarray:
    """Flattened degree one-hots, quality flags and mode one-hot for the chord slots"""
    slots = n_measures * CHORD_SLOTS_PER_MEASURE
    if len(chords) != slots:
        raise EncodingError(f"Condition needs {slots} chord slots, got {len(chords)}")
    degrees = np.zeros((slots, N_DEGREES))
    qualities = np.zeros((slots, N_QUALITIES))
    for i, chord in enumerate(chords):
        if chord.is_silent:
            degrees[i, SILENT_DEGREE] = 1
            continue
        if not 1 <= chord.degree <= 7:
            raise EncodingError(f"Chord degree {chord.degree} outside I-VII")
        degrees[i, chord.degree - 1] = 1
        for q in chord.qualities:
            qualities[i, QUALITIES.index(q)] = 1
    mode_vector = np.zeros(N_MODES)
    mode_vector[mode.index] = 1
    return np.concatenate([degrees.ravel(), qualities.ravel(), mode_vector])


def decode_condition(condition: np.ndarray,
                     n_measures: int = SEGMENT_MEASURES) -> Tuple[List[DegreeChord], Mode]:
    if condition.shape != (condition_size(n_measures),):
        raise EncodingError(f"Condition has shape {condition.shape}, expected ({condition_size(n_measures)},)")
    slots = n_measures * CHORD_SLOTS_PER_MEASURE
    degrees = condition[:slots * N_DEGREES].reshape(slots, N_DEGREES)
    qualities = condition[slots * N_DEGREES:slots * (N_DEGREES + N_QUALITIES)].reshape(slots, N_QUALITIES)
    chords = []
    for degree_row, quality_row in zip(degrees, qualities):
        degree = int(np.argmax(degree_row))
        if degree == SILENT_DEGREE:
            chords.append(SILENT)
        else:
            flags = frozenset(q for q, flag in zip(QUALITIES, quality_row) if flag > 0.5)
            chords.append(DegreeChord(degree=degree + 1, qualities=flags))
    mode = list(Mode)[int(np.argmax(condition[-N_MODES:]))]
    return chords, mode


def condition_per_step(condition: np.ndarray, n_measures: int = SEGMENT_MEASURES) -> np.ndarray:
    """Spread a condition vector over time: (steps, degree + qualities + mode)"""
    slots = n_measures * CHORD_SLOTS_PER_MEASURE
    degrees = condition[:slots * N_DEGREES].reshape(slots, N_DEGREES)
    qualities = condition[slots * N_DEGREES:slots * (N_DEGREES + N_QUALITIES)].reshape(slots, N_QUALITIES)
    per_slot = np.concatenate([degrees, qualities, np.tile(condition[-N_MODES:], (slots, 1))], axis=1)
    return np.repeat(per_slot, STEPS_PER_CHORD_SLOT, axis=0)


def is_duple_or_quadruple(span: TimeSignatureSpan) -> bool:
    """Meters whose measure is four quarter beats: 4/4 and 2/2"""
    return span.numerator in (2, 4) and span.measure_length == 4


def slot_chords(labels: Sequence[ChordLabel], window_start, tonic: int, mode: Mode,
                n_measures: int = SEGMENT_MEASURES) -> List[DegreeChord]:
    """Scale-degree chord under each half-measure slot of a window"""
    slot_length = STEPS_PER_CHORD_SLOT * STEP
    chords = []
    for k in range(n_measures * CHORD_SLOTS_PER_MEASURE):
        label = chord_at(labels, Fraction(window_start) + k * slot_length)
        chords.append(SILENT if label is None else to_scale_degree(label, tonic, mode))
    return chords


class SegmentExtractor:
    """Slides an 8-measure window over a song and keeps the windows that encode cleanly"""

    def __init__(self, n_measures: int = SEGMENT_MEASURES, hop: int = HOP_MEASURES,
                 min_density: float = MIN_MELODY_DENSITY):
        self.n_measures = n_measures
        self.hop = hop
        self.min_density = min_density
        self.drop_reasons = Counter()
        self.kept = 0

    @property
    def report(self) -> Dict[str, Any]:
        return {
            'kept': self.kept,
            'dropped': sum(self.drop_reasons.values()),
            'drop_reasons': {reason: self.drop_reasons.get(reason, 0) for reason in DROP_REASONS},
        }

    def _drop(self, reason: str, source: str, measure: int):
        self.drop_reasons[reason] += 1
        logger.debug(f"Dropped window at measure {measure} of {source}: {reason}")

    def extract(self, song: Song, melody_track: int, chord_labels: Sequence[ChordLabel],
                key: Optional[KeyEstimate] = None, source: str = '') -> List[TrainingSegment]:
        """Training segments of a song, in window order"""
        melody = song.tracks[melody_track].notes
        window_length = self.n_measures * 4
        segments = []
        measure_index = 0
        for span in song.time_signatures:
            n_windows = len(range(0, span.n_measures - self.n_measures + 1, self.hop))
            conforming = is_duple_or_quadruple(span)
            for w in range(n_windows):
                first = measure_index + w * self.hop
                if not conforming:
                    self._drop('meter', source, first)
                    continue
                window_start = span.start + w * self.hop * span.measure_length
                segment = self._encode_window(song, melody, chord_labels, key, source,
                                              first, window_start, window_start + window_length)
                if segment is not None:
                    segments.append(segment)
            measure_index += span.n_measures
        self.kept += len(segments)
        return segments

    def _encode_window(self, song: Song, melody: Sequence[NoteEvent], chord_labels: Sequence[ChordLabel],
                       key: Optional[KeyEstimate], source: str, first_measure: int,
                       window_start: Fraction, window_end: Fraction) -> Optional[TrainingSegment]:
        window_melody = [n for n in melody if window_start <= n.onset < window_end]
        if not window_melody:
            self._drop('sparse_melody', source, first_measure)
            return None

        if key is None:
            window_notes = [n for n in song.all_notes() if n.onset < window_end and n.end > window_start]
            try:
                window_key = estimate_key(window_notes)
            except KeyEstimationError:
                self._drop('sparse_melody', source, first_measure)
                return None
        else:
            window_key = key

        reference = melody_offsets(window_melody, window_key.tonic).reference
        grid, polyphonic = encode_melody(
            quantize_notes(window_melody, window_start, reference, self.n_measures), self.n_measures)
        density = 1.0 - grid[:, SILENT_SLOT].mean()
        if density < self.min_density:
            self._drop('sparse_melody', source, first_measure)
            return None

        try:
            chords = slot_chords(chord_labels, window_start, window_key.tonic, window_key.mode, self.n_measures)
        except OutOfModeError:
            self._drop('out_of_mode', source, first_measure)
            return None
        if polyphonic:
            self._drop('polyphony', source, first_measure)
            return None

        return TrainingSegment(
            id=f"{source}#{first_measure}",
            grid=grid,
            condition=encode_condition(chords, window_key.mode, self.n_measures),
            source=source,
            start_measure=first_measure,
            n_measures=self.n_measures,
            tonic=window_key.tonic,
            mode=window_key.mode,
            key_confidence=window_key.confidence,
            reference=reference,
        )


def extract_segments(song: Song, melody_track: int, chord_labels: Sequence[ChordLabel],
                     key: Optional[KeyEstimate] = None, source: str = '') -> List[TrainingSegment]:
    return SegmentExtractor().extract(song, melody_track, chord_labels, key, source)
