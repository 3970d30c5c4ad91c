"""Shared song builders and fixtures."""
from fractions import Fraction
from typing import List, Sequence, Tuple

import numpy as np
import pytest

from config import CvaeConfig
from harmony import load_templates
from midi_io import NoteEvent, Song, TempoChange, TimeSignatureSpan, Track, four_four, write_smf

C_MAJOR_SCALE = [0, 2, 4, 5, 7, 9, 11]


def note(onset, pitch, duration=1, velocity=100, track_index=0, channel=0) -> NoteEvent:
    return NoteEvent(onset=Fraction(onset), pitch=pitch, duration=Fraction(duration), velocity=velocity,
                     track_index=track_index, channel=channel)


def block_chords(chords: Sequence[Sequence[int]], length=4, start=0, track_index=0, channel=0) -> List[NoteEvent]:
    """One block chord per ``length`` beats"""
    notes = []
    for k, pitches in enumerate(chords):
        for pitch in pitches:
            notes.append(note(start + k * length, pitch, length, 80, track_index, channel))
    return notes


def make_song(tracks: Sequence[Track], n_measures: int = None, spans=None) -> Song:
    if spans is None:
        if n_measures is None:
            end = max((n.end for t in tracks for n in t.notes), default=Fraction(4))
            n_measures = int(-(-end // 4))
        spans = four_four(n_measures)
    return Song(tracks=tuple(tracks), time_signatures=tuple(spans), tempos=(TempoChange(Fraction(0), 500000),))


def scale_melody(n_measures: int, start=0, track_index=0) -> List[NoteEvent]:
    """Quarter notes walking up and down a C major scale around C4"""
    walk = [60, 62, 64, 65, 67, 65, 64, 62]
    return [note(start + beat, walk[beat % len(walk)], 1, 100, track_index, 0) for beat in range(4 * n_measures)]


def c_major_song(n_measures: int = 16) -> Song:
    """Melody over a I-IV-V-I progression, one chord per measure, in 4/4"""
    progression = [(48, 52, 55), (53, 57, 60), (55, 59, 62), (48, 52, 55)]
    chords = block_chords([progression[m % 4] for m in range(n_measures)], track_index=1, channel=1)
    return make_song([
        Track(name='Lead', program=73, channel=0, notes=tuple(scale_melody(n_measures))),
        Track(name='Piano', program=0, channel=1, notes=tuple(sorted(chords))),
    ], n_measures)


FLY_ME_CHORDS = [
    (57, 60, 64, 67),  # Am7
    (50, 57, 60, 65),  # Dm7
    (55, 59, 62, 65),  # G7
    (48, 55, 59, 64),  # Cmaj7
    (53, 57, 60, 64),  # Fmaj7
    (59, 62, 65, 69),  # Bm7b5
    (52, 56, 59, 62),  # E7
    (57, 60, 64),      # Am
]


def fly_me_song() -> Song:
    """Four measures with two chords each"""
    chords = block_chords(FLY_ME_CHORDS, length=2)
    return make_song([Track(name='Piano', program=0, notes=tuple(sorted(chords)))], 4)


def synthetic_song(rng: np.random.Generator, n_measures: int = 8) -> Tuple[Song, int]:
    """Melody, chords, bass and drums in random track order; returns the song and the melody index"""
    beats = 4 * n_measures
    melody, chords, bass, drums = [], [], [], []
    for beat in range(beats):
        if rng.random() < 0.6:
            octave = 60 if rng.random() < 0.7 else 72
            melody.append((beat, octave + int(rng.choice(C_MAJOR_SCALE)), 1))
    if not melody:
        melody.append((0, 64, 1))
    roots = rng.choice([0, 5, 7, 9], size=n_measures)
    for m, root in enumerate(roots):
        triad = [48 + root, 52 + root, 55 + root] if root != 9 else [57, 60, 64]
        chords.extend((4 * m, p, 4) for p in triad)
        bass.extend((4 * m + b, 36 + root, 1) for b in (0, 2))
        drums.extend((4 * m + b, 36 if b % 2 == 0 else 38, Fraction(1, 2)) for b in range(4))

    melody_names = [('Lead', 80), ('Flute', 73), ('', 73), ('Violin', 40), ('Vocal', 0)]
    name, program = melody_names[int(rng.integers(len(melody_names)))]
    parts = [
        ('melody', name, program, 0, melody),
        ('chords', 'Piano' if rng.random() < 0.5 else '', 0, 1, chords),
        ('bass', 'Bass' if rng.random() < 0.5 else '', 33, 2, bass),
        ('drums', 'Drums' if rng.random() < 0.5 else '', 0, 9, drums),
    ]
    order = rng.permutation(len(parts))
    tracks = []
    for index, part in enumerate(order):
        role, name, program, channel, events = parts[part]
        notes = tuple(sorted(
            note(onset, pitch, duration, 90, index, channel) for onset, pitch, duration in events))
        tracks.append(Track(name=name, program=program, channel=channel, notes=notes))
    melody_index = int(np.where(order == 0)[0][0])
    return make_song(tracks, n_measures), melody_index


def tiny_cvae_config(**changes) -> CvaeConfig:
    values = dict(latent_dim=4, hidden_dim=4, recurrent_layers_per_coder=2, residual_injection_period=1,
                  aggregation_dim=4, n_measures=1, batch_size=2, steps=3, seed=0)
    values.update(changes)
    return CvaeConfig(**values)


@pytest.fixture
def templates():
    return load_templates()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def c_major_file(tmp_path):
    path = tmp_path / 'c_major.mid'
    path.write_bytes(write_smf(c_major_song()))
    return path


@pytest.fixture
def three_four_span():
    return TimeSignatureSpan(Fraction(0), 3, 4, Fraction(48))
