import numpy as np
import pytest

from config import PipelineConfig
from conftest import c_major_song
from data_processing import DataProcessor, analysis_options, analyze_file, record_to_segment, segment_to_record
from encoding import SegmentExtractor
from exceptions import ConfigError, EncodingError
from harmony import detect_chords
from midi_io import write_smf
from tonality import KeyEstimate, Mode


@pytest.fixture
def corpus(tmp_path):
    root = tmp_path / 'corpus'
    (root / 'sub').mkdir(parents=True)
    (root / 'a.mid').write_bytes(write_smf(c_major_song(16)))
    (root / 'sub' / 'b.MID').write_bytes(write_smf(c_major_song(8)))
    (root / 'bad.mid').write_bytes(b'not a midi file')
    (root / 'notes.txt').write_text('ignored')
    return root


def test_record_keeps_segment():
    song = c_major_song(8)
    labels = detect_chords(song, accompaniment_tracks=[1], bin_policy='one')
    segment = SegmentExtractor().extract(song, 0, labels, KeyEstimate(0, Mode.MAJOR, 0.8), source='x.mid')[0]

    record = segment_to_record(segment)
    restored = record_to_segment(record)

    assert record['melody'][:2] == [[0, 16, 1], [1, 16, 0]]
    assert record['chords'][0] == {'degree': 1, 'qualities': ['Pwr', 'Maj']}
    np.testing.assert_array_equal(restored.grid, segment.grid)
    np.testing.assert_array_equal(restored.condition, segment.condition)
    assert (restored.id, restored.mode, restored.reference) == ('x.mid#0', Mode.MAJOR, 60)


def test_malformed_record():
    with pytest.raises(EncodingError):
        record_to_segment({'id': 'x', 'n_measures': 8})


def test_lists_midi_files_recursively(corpus):
    files = DataProcessor().list_midi_files(corpus)
    assert [p.relative_to(corpus).as_posix() for p in files] == ['a.mid', 'bad.mid', 'sub/b.MID']


def test_missing_corpus(tmp_path):
    with pytest.raises(ConfigError):
        DataProcessor().list_midi_files(tmp_path / 'nowhere')


def test_extract_corpus(corpus):
    processor = DataProcessor()
    records, report = processor.extract_corpus(corpus)

    assert [r['id'] for r in records] == ['a.mid#0', 'a.mid#4', 'a.mid#8', 'sub/b.MID#0']
    assert report['files_read'] == 2
    assert report['files_failed'] == 1
    assert report['failures'][0]['source'] == 'bad.mid'
    assert report['segments_kept'] == 4
    assert all(r['provenance']['config_hash'] == records[0]['provenance']['config_hash'] for r in records)


def test_dataset_file_round_trip(corpus, tmp_path):
    processor = DataProcessor()
    records, _ = processor.extract_corpus(corpus)
    path = tmp_path / 'segments.jsonl'
    processor.write_dataset(records, path)

    segments = processor.read_dataset(path)

    assert len(path.read_text().splitlines()) == 4
    assert [s.id for s in segments] == [r['id'] for r in records]
    assert all(s.grid.shape == (128, 35) for s in segments)


def test_bad_dataset_line(tmp_path):
    path = tmp_path / 'broken.jsonl'
    path.write_text('{"id": "x"\n')
    with pytest.raises(EncodingError):
        DataProcessor().read_dataset(path)
    with pytest.raises(ConfigError):
        DataProcessor().read_dataset(tmp_path / 'missing.jsonl')


def test_basic_stats(corpus):
    processor = DataProcessor()
    records, _ = processor.extract_corpus(corpus)
    stats = processor.get_basic_stats([record_to_segment(r) for r in records])

    assert stats['records'] == 4
    assert sum(stats['modes'].values()) == 4
    assert stats['silent_step_ratio'] == 0
    assert processor.get_basic_stats([])['records'] == 0


def test_analyze_file_reports_errors(corpus):
    options = analysis_options(PipelineConfig())

    good = analyze_file(str(corpus / 'a.mid'), options)
    bad = analyze_file(str(corpus / 'bad.mid'), options)

    assert good['melody_track'] == 0
    assert len(good['scores']) == 2
    assert bad['exit_code'] == 2
    assert 'error' in bad


def test_analyze_files_keeps_input_order(corpus):
    results = DataProcessor().analyze_files([corpus / 'bad.mid', corpus / 'a.mid'])
    assert ['error' in r for r in results] == [True, False]
