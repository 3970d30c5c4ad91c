"""Standard MIDI File reading and writing in exact beat time.

Beat positions are ``Fraction`` values (ticks over ticks-per-quarter), so
quantization further down the pipeline never drifts.
"""
import io
import logging
import struct
from collections import defaultdict, deque
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, Iterable, List, Optional, Tuple

import mido

from exceptions import ParseError, ValidationError

logger = logging.getLogger(__name__)

PERCUSSION_CHANNEL = 9
DEFAULT_TICKS_PER_QUARTER = 480
DEFAULT_TEMPO = 500000

Beat = Fraction


def to_beats(value) -> Fraction:
    """Exact beat value from an int, Fraction, float or numeric string"""
    if isinstance(value, Fraction):
        return value
    if isinstance(value, float):
        return Fraction(value).limit_denominator(1 << 20)
    return Fraction(value)


@dataclass(frozen=True, order=True)
class NoteEvent:
    """One sounding note; onset and duration are in quarter-note beats"""
    onset: Fraction
    pitch: int
    duration: Fraction
    velocity: int = 100
    track_index: int = 0
    channel: int = 0

    def __post_init__(self):
        object.__setattr__(self, 'onset', to_beats(self.onset))
        object.__setattr__(self, 'duration', to_beats(self.duration))
        if not 0 <= self.pitch <= 127:
            raise ValidationError(f"Pitch {self.pitch} outside MIDI range 0-127")
        if not 1 <= self.velocity <= 127:
            raise ValidationError(f"Velocity {self.velocity} outside 1-127")
        if self.duration <= 0:
            raise ValidationError(f"Note duration must be positive, got {self.duration}")
        if self.onset < 0:
            raise ValidationError(f"Note onset must be non-negative, got {self.onset}")
        if not 0 <= self.channel <= 15:
            raise ValidationError(f"Channel {self.channel} outside 0-15")

    @property
    def end(self) -> Fraction:
        return self.onset + self.duration

    @property
    def is_percussion(self) -> bool:
        return self.channel == PERCUSSION_CHANNEL

    @property
    def pitch_class(self) -> int:
        return self.pitch % 12


@dataclass(frozen=True)
class TimeSignatureSpan:
    """A stretch of the song with one time signature, ``start`` to ``end`` in beats"""
    start: Fraction
    numerator: int
    denominator: int
    end: Fraction

    def __post_init__(self):
        if self.numerator < 1:
            raise ValidationError("Time signature numerator must be at least 1")
        if self.denominator < 1 or self.denominator & (self.denominator - 1):
            raise ValidationError(f"Time signature denominator {self.denominator} is not a power of two")
        if self.end < self.start:
            raise ValidationError("Time signature span ends before it starts")

    @property
    def measure_length(self) -> Fraction:
        return Fraction(4 * self.numerator, self.denominator)

    @property
    def length(self) -> Fraction:
        return self.end - self.start

    @property
    def n_measures(self) -> int:
        return int(self.length // self.measure_length)


@dataclass(frozen=True)
class TempoChange:
    start: Fraction
    tempo: int  # microseconds per quarter note


@dataclass(frozen=True)
class Measure:
    index: int
    start: Fraction
    length: Fraction
    numerator: int
    denominator: int


@dataclass(frozen=True)
class Track:
    name: str = ''
    program: int = 0
    channel: int = 0
    notes: Tuple[NoteEvent, ...] = ()
    instrument: str = ''

    @property
    def is_percussion(self) -> bool:
        if self.notes:
            return all(n.is_percussion for n in self.notes)
        return self.channel == PERCUSSION_CHANNEL


@dataclass(frozen=True)
class Song:
    tracks: Tuple[Track, ...]
    time_signatures: Tuple[TimeSignatureSpan, ...] = ()
    tempos: Tuple[TempoChange, ...] = ()
    ticks_per_quarter: int = DEFAULT_TICKS_PER_QUARTER
    warnings: Tuple[str, ...] = field(default=(), compare=False)

    @property
    def duration(self) -> Fraction:
        ends = [n.end for t in self.tracks for n in t.notes]
        if self.time_signatures:
            ends.append(self.time_signatures[-1].end)
        return max(ends, default=Fraction(0))

    def all_notes(self, include_percussion: bool = False,
                  track_indices: Optional[Iterable[int]] = None) -> List[NoteEvent]:
        wanted = set(range(len(self.tracks))) if track_indices is None else set(track_indices)
        notes = [
            n for i, t in enumerate(self.tracks) if i in wanted
            for n in t.notes if include_percussion or not n.is_percussion
        ]
        return sorted(notes)

    def measures(self) -> List[Measure]:
        """Every whole measure of every time-signature span, in order"""
        measures = []
        for span in self.time_signatures:
            for k in range(span.n_measures):
                measures.append(Measure(
                    index=len(measures),
                    start=span.start + k * span.measure_length,
                    length=span.measure_length,
                    numerator=span.numerator,
                    denominator=span.denominator,
                ))
        return measures

    def seconds_at(self, beat) -> float:
        """Wall-clock time of a beat position through the tempo map"""
        beat = to_beats(beat)
        seconds = Fraction(0)
        position = Fraction(0)
        tempo = DEFAULT_TEMPO
        for change in self.tempos:
            if change.start >= beat:
                break
            seconds += (change.start - position) * Fraction(tempo, 1000000)
            position, tempo = change.start, change.tempo
        seconds += (beat - position) * Fraction(tempo, 1000000)
        return float(seconds)


def parse_smf(data: bytes) -> Song:
    """Parse a format-0 or format-1 Standard MIDI File into a Song"""
    fmt, division, chunks = _scan_chunks(data)

    raw_tracks = []
    for offset, chunk in chunks:
        raw_tracks.append(_read_track_chunk(chunk, division, offset))

    end_tick = max((t['end_tick'] for t in raw_tracks), default=0)
    warnings = [w for t in raw_tracks for w in t['warnings']]

    if fmt == 0 and raw_tracks:
        raw_tracks = _split_by_channel(raw_tracks[0])

    tracks = []
    for index, raw in enumerate(raw_tracks):
        notes = tuple(sorted(
            NoteEvent(
                onset=Fraction(on, division),
                pitch=pitch,
                duration=Fraction(off - on, division),
                velocity=velocity,
                track_index=index,
                channel=channel,
            )
            for on, off, pitch, velocity, channel in raw['notes']
        ))
        tracks.append(Track(
            name=raw['name'],
            program=raw['program'],
            channel=raw['channel'],
            notes=notes,
            instrument=raw['instrument'],
        ))

    time_signatures = _build_spans(
        [ts for raw in raw_tracks for ts in raw['time_signatures']], end_tick, division)
    tempos = _build_tempos([tc for raw in raw_tracks for tc in raw['tempos']], division)

    for warning in warnings:
        logger.warning(warning)
    return Song(
        tracks=tuple(tracks),
        time_signatures=time_signatures,
        tempos=tempos,
        ticks_per_quarter=division,
        warnings=tuple(warnings),
    )


def read_smf(path) -> Song:
    try:
        with open(path, 'rb') as f:
            data = f.read()
    except OSError as e:
        logger.error(f"Error reading MIDI file: {str(e)}")
        raise ParseError(f"Cannot read {path}: {str(e)}")
    return parse_smf(data)


def write_smf(song: Song) -> bytes:
    """Serialize a Song as a format-1 Standard MIDI File"""
    if not song.tracks:
        raise ValidationError("A song needs at least one track to be written")
    tpq = song.ticks_per_quarter
    end_tick = _to_tick(song.duration, tpq)

    mid = mido.MidiFile(type=1, ticks_per_beat=tpq)
    for index, track in enumerate(song.tracks):
        events = []
        if track.name:
            events.append((0, 0, mido.MetaMessage('track_name', name=track.name)))
        if track.instrument:
            events.append((0, 1, mido.MetaMessage('instrument_name', name=track.instrument)))
        if index == 0:
            for span in song.time_signatures:
                events.append((_to_tick(span.start, tpq), 2, mido.MetaMessage(
                    'time_signature', numerator=span.numerator, denominator=span.denominator)))
            for change in song.tempos:
                events.append((_to_tick(change.start, tpq), 2, mido.MetaMessage(
                    'set_tempo', tempo=change.tempo)))
        if not 0 <= track.program <= 127:
            raise ValidationError(f"Program {track.program} outside 0-127")
        events.append((0, 3, mido.Message('program_change', channel=track.channel, program=track.program)))

        for note in track.notes:
            if not 0 <= note.pitch <= 127:
                raise ValidationError(f"Pitch {note.pitch} outside MIDI range 0-127")
            on = _to_tick(note.onset, tpq)
            off = _to_tick(note.end, tpq)
            events.append((on, 5, mido.Message(
                'note_on', channel=note.channel, note=note.pitch, velocity=note.velocity)))
            # note-offs sort before note-ons on the same tick so repeated pitches stay separate
            events.append((off, 4, mido.Message(
                'note_off', channel=note.channel, note=note.pitch, velocity=0)))

        events.sort(key=lambda e: (e[0], e[1]))
        midi_track = mido.MidiTrack()
        previous = 0
        for tick, _, message in events:
            midi_track.append(message.copy(time=tick - previous))
            previous = tick
        midi_track.append(mido.MetaMessage('end_of_track', time=max(end_tick - previous, 0)))
        mid.tracks.append(midi_track)

    output = io.BytesIO()
    mid.save(file=output)
    return output.getvalue()


def _to_tick(beats: Fraction, tpq: int) -> int:
    ticks = to_beats(beats) * tpq
    if ticks.denominator != 1:
        raise ValidationError(f"Beat position {beats} is not a whole number of ticks at {tpq} per quarter")
    return int(ticks)


def _scan_chunks(data: bytes) -> Tuple[int, int, List[Tuple[int, bytes]]]:
    """Validate the header and locate every MTrk chunk with its byte offset"""
    if len(data) < 14 or data[:4] != b'MThd':
        raise ParseError("Missing MThd header chunk", 0)
    header_length = struct.unpack('>I', data[4:8])[0]
    if header_length < 6:
        raise ParseError("Header chunk shorter than 6 bytes", 4)
    fmt, n_tracks, division = struct.unpack('>HHH', data[8:14])
    if fmt == 2:
        raise ParseError("Format-2 MIDI files are not supported", 8)
    if fmt not in (0, 1):
        raise ParseError(f"Unknown MIDI file format {fmt}", 8)
    if division & 0x8000:
        raise ParseError("SMPTE time division is not supported", 12)
    if division == 0:
        raise ParseError("Zero ticks per quarter note", 12)

    chunks = []
    offset = 8 + header_length
    while offset < len(data) and len(chunks) < n_tracks:
        if offset + 8 > len(data):
            raise ParseError("Truncated chunk header", offset)
        chunk_id = data[offset:offset + 4]
        size = struct.unpack('>I', data[offset + 4:offset + 8])[0]
        if offset + 8 + size > len(data):
            raise ParseError(f"Chunk {chunk_id!r} runs past the end of the file", offset)
        if chunk_id == b'MTrk':
            chunks.append((offset, data[offset:offset + 8 + size]))
        offset += 8 + size
    if len(chunks) < n_tracks:
        raise ParseError(f"Header announces {n_tracks} tracks but only {len(chunks)} were found", offset)
    return fmt, division, chunks


def _read_track_chunk(chunk: bytes, division: int, offset: int) -> Dict:
    """Decode one MTrk chunk with mido and pair its note-on/off events"""
    single = b'MThd' + struct.pack('>IHHH', 6, 0, 1, division) + chunk
    try:
        messages = mido.MidiFile(file=io.BytesIO(single)).tracks[0]
    except Exception as e:
        logger.error(f"Error decoding track chunk at byte {offset}: {str(e)}")
        raise ParseError(f"Malformed track chunk: {str(e)}", offset)

    raw = {
        'name': '', 'instrument': '', 'program': None, 'channel': None,
        'programs': {}, 'notes': [], 'time_signatures': [], 'tempos': [],
        'warnings': [], 'end_tick': 0,
    }
    # overlapping duplicates of one pitch merge into their union
    open_notes: Dict[Tuple[int, int], deque] = defaultdict(deque)
    tick = 0
    for msg in messages:
        tick += msg.time
        if msg.type == 'track_name' and not raw['name']:
            raw['name'] = msg.name
        elif msg.type == 'instrument_name' and not raw['instrument']:
            raw['instrument'] = msg.name
        elif msg.type == 'time_signature':
            raw['time_signatures'].append((tick, msg.numerator, msg.denominator))
        elif msg.type == 'set_tempo':
            raw['tempos'].append((tick, msg.tempo))
        elif msg.type == 'program_change':
            raw['programs'].setdefault(msg.channel, msg.program)
            if raw['channel'] is None:
                raw['channel'] = msg.channel
            if raw['program'] is None:
                raw['program'] = msg.program
        elif msg.type in ('note_on', 'note_off'):
            if raw['channel'] is None:
                raw['channel'] = msg.channel
            key = (msg.channel, msg.note)
            stack = open_notes[key]
            if msg.type == 'note_on' and msg.velocity > 0:
                stack.append((tick, msg.velocity))
            elif stack:
                if len(stack) > 1:
                    stack.pop()
                    continue
                start, velocity = stack.popleft()
                if tick > start:
                    raw['notes'].append((start, tick, msg.note, velocity, msg.channel))
                else:
                    raw['warnings'].append(
                        f"Zero-length note {msg.note} at tick {tick} in chunk at byte {offset} dropped")
    raw['end_tick'] = tick

    for (channel, pitch), stack in open_notes.items():
        if stack:
            start, velocity = stack[0]
            raw['warnings'].append(
                f"Unmatched note-on {pitch} at tick {start} in chunk at byte {offset} closed at track end")
            if tick > start:
                raw['notes'].append((start, tick, pitch, velocity, channel))

    if raw['program'] is None:
        raw['program'] = 0
    if raw['channel'] is None:
        raw['channel'] = 0
    return raw


def _split_by_channel(raw: Dict) -> List[Dict]:
    """Give each MIDI channel of a format-0 track its own track"""
    channels = sorted({n[4] for n in raw['notes']})
    if len(channels) <= 1:
        return [raw]
    split = []
    for channel in channels:
        part = dict(raw)
        part['notes'] = [n for n in raw['notes'] if n[4] == channel]
        part['channel'] = channel
        part['program'] = raw['programs'].get(channel, 0)
        part['name'] = f"{raw['name']} ch{channel + 1}".strip()
        # conductor events stay on the first track only
        if split:
            part['time_signatures'] = []
            part['tempos'] = []
        split.append(part)
    return split


def _build_spans(events: List[Tuple[int, int, int]], end_tick: int,
                 division: int) -> Tuple[TimeSignatureSpan, ...]:
    """Turn time-signature events into non-overlapping spans covering the song"""
    by_tick: Dict[int, Tuple[int, int]] = {}
    for tick, numerator, denominator in sorted(events, key=lambda e: e[0]):
        by_tick[tick] = (numerator, denominator)
    if 0 not in by_tick:
        by_tick[0] = (4, 4)

    starts = sorted(t for t in by_tick if t < end_tick or t == 0)
    spans = []
    for start in starts:
        numerator, denominator = by_tick[start]
        if spans and (spans[-1][1], spans[-1][2]) == (numerator, denominator):
            continue
        spans.append((start, numerator, denominator))

    result = []
    for i, (start, numerator, denominator) in enumerate(spans):
        stop = spans[i + 1][0] if i + 1 < len(spans) else max(end_tick, start)
        result.append(TimeSignatureSpan(
            start=Fraction(start, division),
            numerator=numerator,
            denominator=denominator,
            end=Fraction(stop, division),
        ))
    return tuple(result)


def _build_tempos(events: List[Tuple[int, int]], division: int) -> Tuple[TempoChange, ...]:
    return tuple(
        TempoChange(start=Fraction(tick, division), tempo=tempo)
        for tick, tempo in sorted(events, key=lambda e: e[0])
    )


def four_four(n_measures: int) -> Tuple[TimeSignatureSpan, ...]:
    """A single 4/4 span of ``n_measures`` measures"""
    return (TimeSignatureSpan(Fraction(0), 4, 4, Fraction(4 * n_measures)),)
