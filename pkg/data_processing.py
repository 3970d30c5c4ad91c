import json
import logging
from collections import Counter
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from tqdm import tqdm

from config import PipelineConfig
from encoding import (ATTACK, DROP_REASONS, N_CHANNELS, SILENT_SLOT, SegmentExtractor, TrainingSegment,
                      encode_condition, n_steps, validate_grid)
from exceptions import ConfigError, EncodingError, PopComposerError
from harmony import QUALITIES, SILENT, DegreeChord, detect_chords, load_templates
from melody_id import MelodyIdentifier, load_instrument_table, load_rubric_weights
from midi_io import Song, read_smf
from tonality import Mode, estimate_key

logger = logging.getLogger(__name__)

MIDI_SUFFIXES = ('.mid', '.midi')


def segment_to_record(segment: TrainingSegment) -> Dict[str, Any]:
    """JSON-ready dataset record; the melody grid is stored as (step, slot, attack) triples"""
    slots = np.argmax(segment.grid[:, :ATTACK], axis=1)
    melody = [
        [step, int(slot), int(segment.grid[step, ATTACK])]
        for step, slot in enumerate(slots) if slot != SILENT_SLOT
    ]
    chords = [
        {'degree': chord.degree, 'qualities': [q for q in QUALITIES if q in chord.qualities]}
        for chord in segment.chords
    ]
    return {
        'id': segment.id,
        'source': segment.source,
        'start_measure': segment.start_measure,
        'n_measures': segment.n_measures,
        'tonic': segment.tonic,
        'mode': segment.mode.label,
        'key_confidence': segment.key_confidence,
        'reference': segment.reference,
        'melody': melody,
        'chords': chords,
        'provenance': segment.provenance,
    }


def record_to_segment(record: Dict[str, Any]) -> TrainingSegment:
    try:
        n_measures = int(record['n_measures'])
        grid = np.zeros((n_steps(n_measures), N_CHANNELS))
        grid[:, SILENT_SLOT] = 1
        for step, slot, attack in record['melody']:
            grid[step, SILENT_SLOT] = 0
            grid[step, slot] = 1
            grid[step, ATTACK] = attack
        validate_grid(grid, n_measures)
        mode = Mode.from_name(record['mode'])
        chords = [
            SILENT if entry['degree'] is None
            else DegreeChord(degree=int(entry['degree']), qualities=frozenset(entry['qualities']))
            for entry in record['chords']
        ]
        return TrainingSegment(
            id=record['id'],
            grid=grid,
            condition=encode_condition(chords, mode, n_measures),
            source=record['source'],
            start_measure=int(record['start_measure']),
            n_measures=n_measures,
            tonic=int(record['tonic']),
            mode=mode,
            key_confidence=float(record['key_confidence']),
            reference=int(record['reference']),
            provenance=record.get('provenance', {}),
        )
    except (KeyError, TypeError, IndexError, ValueError) as e:
        if isinstance(e, PopComposerError):
            raise
        raise EncodingError(f"Malformed dataset record {record.get('id', '?')}: {str(e)}")


def analysis_options(config: PipelineConfig) -> Dict[str, Any]:
    return {
        'bin_policy': config.bin_policy,
        'exclude_melody': config.exclude_melody,
        'template_file': str(config.template_file),
        'instrument_file': str(config.instrument_file),
        'rubric_weights_file': str(config.rubric_weights_file),
        'n_measures': config.cvae.n_measures,
        'provenance': config.provenance(),
    }


def analyze_song(song: Song, options: Dict[str, Any]) -> Dict[str, Any]:
    """Melody decision with score breakdown, chord labels and key estimate of one song"""
    identifier = MelodyIdentifier(load_rubric_weights(options['rubric_weights_file']),
                                  load_instrument_table(options['instrument_file']))
    melody = identifier.identify(song)
    accompaniment = None
    if options.get('exclude_melody'):
        accompaniment = [i for i in range(len(song.tracks)) if i != melody]
    labels = detect_chords(song, accompaniment, options['bin_policy'], load_templates(options['template_file']))
    key = estimate_key(song.all_notes())
    return {
        'melody_track': melody,
        'scores': identifier.to_dict(),
        'chords': labels,
        'key': key,
        'warnings': list(song.warnings),
    }


def analyze_file(path: str, options: Dict[str, Any]) -> Dict[str, Any]:
    """Worker entry point: analysis of one file, or the error that stopped it"""
    try:
        song = read_smf(path)
        result = analyze_song(song, options)
        result['song'] = song
        result['path'] = path
        return result
    except (PopComposerError, OSError) as e:
        logger.error(f"Error analyzing {path}: {str(e)}")
        return {'path': path, 'error': str(e), 'exit_code': getattr(e, 'exit_code', 2)}


def extract_file(path: str, source: str, options: Dict[str, Any]) -> Dict[str, Any]:
    """Worker entry point: dataset records of one file plus its drop-reason counts"""
    extractor = SegmentExtractor(n_measures=options['n_measures'])
    try:
        song = read_smf(path)
        analysis = analyze_song(song, options)
        segments = extractor.extract(song, analysis['melody_track'], analysis['chords'], source=source)
    except (PopComposerError, OSError) as e:
        logger.warning(f"Skipping {source}: {str(e)}")
        return {'source': source, 'records': [], 'report': extractor.report, 'error': str(e)}
    for segment in segments:
        segment.provenance = options['provenance']
    return {
        'source': source,
        'records': [segment_to_record(s) for s in segments],
        'report': extractor.report,
        'error': None,
    }


class DataProcessor:
    """Class for reading MIDI corpora and reading and writing segment datasets"""

    def __init__(self, config: Optional[PipelineConfig] = None, workers: int = 1):
        self.config = config or PipelineConfig()
        self.workers = workers
        self.supported_formats = MIDI_SUFFIXES
        self.extraction_report: Dict[str, Any] = {}

    def list_midi_files(self, corpus_dir) -> List[Path]:
        corpus_dir = Path(corpus_dir)
        if not corpus_dir.is_dir():
            raise ConfigError(f"Corpus directory not found: {corpus_dir}")
        return sorted(p for p in corpus_dir.rglob('*') if p.is_file() and p.suffix.lower() in self.supported_formats)

    def analyze_files(self, paths: Sequence) -> List[Dict[str, Any]]:
        """Analyze files on the worker pool; results come back in input order"""
        options = analysis_options(self.config)
        return Parallel(n_jobs=self.workers)(delayed(analyze_file)(str(p), options) for p in paths)

    def extract_corpus(self, corpus_dir) -> Tuple[List[Dict[str, Any]], Dict[str, Any]]:
        """Dataset records of every MIDI file under a directory, ordered by path then window"""
        corpus_dir = Path(corpus_dir)
        files = self.list_midi_files(corpus_dir)
        if not files:
            logger.warning(f"No MIDI files found in {corpus_dir}")

        options = analysis_options(self.config)
        jobs = (delayed(extract_file)(str(p), p.relative_to(corpus_dir).as_posix(), options)
                for p in tqdm(files, desc='Extracting', disable=len(files) < 2))
        results = Parallel(n_jobs=self.workers)(jobs)

        records = []
        drop_reasons = Counter()
        failed = []
        for result in results:
            records.extend(result['records'])
            drop_reasons.update(result['report']['drop_reasons'])
            if result['error'] is not None:
                failed.append({'source': result['source'], 'error': result['error']})

        self.extraction_report = {
            'files_read': len(files) - len(failed),
            'files_failed': len(failed),
            'segments_kept': len(records),
            'windows_dropped': sum(drop_reasons.values()),
            'drop_reasons': {reason: drop_reasons.get(reason, 0) for reason in DROP_REASONS},
            'failures': failed,
        }
        logger.info(f"Extracted {len(records)} segments from {len(files)} files")
        return records, self.extraction_report

    def write_dataset(self, records: Sequence[Dict[str, Any]], path):
        try:
            with open(path, 'w', encoding='utf-8') as f:
                for record in records:
                    f.write(json.dumps(record, sort_keys=True) + '\n')
        except OSError as e:
            logger.error(f"Error writing dataset: {str(e)}")
            raise ConfigError(f"Error writing dataset {path}: {str(e)}")

    def read_dataset(self, path) -> List[TrainingSegment]:
        """Training segments of a JSON Lines dataset"""
        segments = []
        try:
            with open(path, encoding='utf-8') as f:
                for line_number, line in enumerate(f, start=1):
                    if not line.strip():
                        continue
                    try:
                        record = json.loads(line)
                    except json.JSONDecodeError as e:
                        raise EncodingError(f"Line {line_number} of {path} is not JSON: {str(e)}")
                    segments.append(record_to_segment(record))
        except OSError as e:
            logger.error(f"Error reading dataset: {str(e)}")
            raise ConfigError(f"Error reading dataset {path}: {str(e)}")
        return segments

    def get_basic_stats(self, segments: Sequence[TrainingSegment]) -> Dict[str, Any]:
        """Get basic statistics about the dataset"""
        if not segments:
            return {'records': 0, 'modes': {}, 'mean_key_confidence': None, 'silent_step_ratio': None}
        frame = pd.DataFrame({
            'mode': [s.mode.label for s in segments],
            'key_confidence': [s.key_confidence for s in segments],
            'silent_ratio': [float(s.grid[:, SILENT_SLOT].mean()) for s in segments],
        })
        return {
            'records': len(frame),
            'modes': frame['mode'].value_counts().to_dict(),
            'mean_key_confidence': float(frame['key_confidence'].mean()),
            'silent_step_ratio': float(frame['silent_ratio'].mean()),
        }

