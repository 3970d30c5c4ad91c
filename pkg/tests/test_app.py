import json
from pathlib import Path

import numpy as np
import pytest

from app import main, parse_tonic, progression_slots
from config import load_pipeline_config
from conftest import c_major_song, fly_me_song
from cvae import CvaeModel, save_checkpoint
from exceptions import ConfigError
from midi_io import read_smf, write_smf
from tonality import Mode

GRAMMARS = Path(__file__).resolve().parent.parent / 'grammars'

TINY_CONFIG = '\n'.join([
    'CVAE_LATENT_DIM=4',
    'CVAE_HIDDEN_DIM=4',
    'CVAE_RECURRENT_LAYERS_PER_CODER=2',
    'CVAE_RESIDUAL_INJECTION_PERIOD=1',
    'CVAE_AGGREGATION_DIM=4',
    'CVAE_N_MEASURES=1',
    'CVAE_BATCH_SIZE=2',
    'CVAE_STEPS=3',
]) + '\n'


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / 'tiny.env'
    path.write_text(TINY_CONFIG)
    return path


@pytest.fixture
def checkpoint(tmp_path, tiny_config):
    model = CvaeModel.initialize(load_pipeline_config(tiny_config).cvae)
    rng = np.random.default_rng(5)
    model.params['decoder.output.w'] = rng.normal(scale=0.8, size=model.params['decoder.output.w'].shape)
    path = tmp_path / 'model.ckpt'
    save_checkpoint(model, path, {'seed': 0})
    return path


def test_analyze(c_major_file, capsys):
    assert main(['analyze', str(c_major_file)]) == 0

    out = capsys.readouterr().out
    assert 'Melody: track 0' in out
    assert '16: ' in out


def test_analyze_json_and_corrupt_file(c_major_file, tmp_path, capsys):
    corrupt = tmp_path / 'corrupt.mid'
    corrupt.write_bytes(b'MThd\x00\x00')

    assert main(['analyze', '--json', str(c_major_file), str(corrupt)]) == 2

    captured = capsys.readouterr()
    data = json.loads(captured.out)
    assert data['melody_track'] == 0
    assert len(data['lead_sheet']) == 16
    assert 'corrupt.mid' in captured.err


def test_identify_melody(c_major_file, capsys):
    assert main(['identify-melody', '--json', str(c_major_file)]) == 0
    assert json.loads(capsys.readouterr().out)['melody_track'] == 0


def test_detect_chords(tmp_path, capsys):
    path = tmp_path / 'fly.mid'
    path.write_bytes(write_smf(fly_me_song()))

    assert main(['detect-chords', str(path), '--bin', 'half']) == 0
    assert capsys.readouterr().out.splitlines() == ['1: Am7 Dm7', '2: G7 Cmaj7', '3: Fmaj7 Bdim', '4: E7 Am']


def test_extract_writes_segments(tmp_path, capsys):
    corpus = tmp_path / 'corpus'
    corpus.mkdir()
    (corpus / 'song.mid').write_bytes(write_smf(c_major_song(16)))
    dataset = tmp_path / 'segments.jsonl'

    assert main(['extract', '--in', str(corpus), '--out', str(dataset)]) == 0

    assert len(dataset.read_text().splitlines()) == 3
    assert 'segments kept: 3' in capsys.readouterr().out


def test_extract_then_train(tmp_path, tiny_config, capsys):
    corpus = tmp_path / 'corpus'
    corpus.mkdir()
    (corpus / 'song.mid').write_bytes(write_smf(c_major_song(16)))
    dataset = tmp_path / 'segments.jsonl'
    model_path = tmp_path / 'trained.ckpt'

    assert main(['extract', '--config', str(tiny_config), '--in', str(corpus), '--out', str(dataset)]) == 0
    assert len(dataset.read_text().splitlines()) == 4
    assert main(['train', '--config', str(tiny_config), '--data', str(dataset), '--out', str(model_path),
                 '--steps', '2', '--quiet']) == 0

    assert model_path.is_file()
    loss_lines = (tmp_path / 'trained.loss.csv').read_text().splitlines()
    assert loss_lines[0] == 'step,reproduction,kl'
    assert len(loss_lines) == 3
    assert 'Records: 4' in capsys.readouterr().out


def test_train_on_mismatched_dataset(tmp_path, tiny_config):
    corpus = tmp_path / 'corpus'
    corpus.mkdir()
    (corpus / 'song.mid').write_bytes(write_smf(c_major_song(8)))
    dataset = tmp_path / 'segments.jsonl'

    assert main(['extract', '--in', str(corpus), '--out', str(dataset)]) == 0
    assert main(['train', '--config', str(tiny_config), '--data', str(dataset),
                 '--out', str(tmp_path / 'm.ckpt'), '--quiet']) == 2


def test_generate_is_reproducible(tmp_path, tiny_config, checkpoint):
    outputs = []
    for name in ('first.mid', 'second.mid'):
        out = tmp_path / name
        args = ['generate', '--config', str(tiny_config), '--grammar', str(GRAMMARS / 'motif.tgg'),
                '--checkpoint', str(checkpoint), '--seed', '3', '--out', str(out)]
        assert main(args) == 0
        outputs.append(out)

    assert outputs[0].read_bytes() == outputs[1].read_bytes()
    sidecar = json.loads(Path(f"{outputs[0]}.json").read_text())
    assert [s['tag'] for s in sidecar['sections']][1::2] == ['x_1', 'x_2']
    assert len(sidecar['sections']) == 5
    assert sidecar['grammar_seed'] == 3 and sidecar['latent_seed'] == 3
    assert sidecar['checkpoint_provenance'] == {'seed': 0}
    assert len(read_smf(outputs[0]).measures()) == 40


def test_generate_takes_seeds_and_sigma_from_config(tmp_path, checkpoint):
    config = tmp_path / 'seeded.env'
    config.write_text(TINY_CONFIG + 'SEED=5\nGRAMMAR_SEED=5\nLATENT_SEED=6\nSIGMA=0.0\n')
    out = tmp_path / 'song.mid'

    assert main(['generate', '--config', str(config), '--checkpoint', str(checkpoint), '--out', str(out)]) == 0
    sidecar = json.loads(Path(f"{out}.json").read_text())
    assert (sidecar['grammar_seed'], sidecar['latent_seed'], sidecar['sigma']) == (5, 6, 0.0)

    assert main(['generate', '--config', str(config), '--checkpoint', str(checkpoint), '--seed', '3',
                 '--sigma', '0.5', '--out', str(out)]) == 0
    sidecar = json.loads(Path(f"{out}.json").read_text())
    assert (sidecar['grammar_seed'], sidecar['latent_seed'], sidecar['sigma']) == (3, 3, 0.5)


def test_generate_in_another_key(tmp_path, checkpoint):
    out = tmp_path / 'song.mid'
    assert main(['generate', '--checkpoint', str(checkpoint), '--tonic', 'Eb', '--out', str(out)]) == 0
    assert json.loads(Path(f"{out}.json").read_text())['tonic'] == 'Eb'


def test_generate_without_checkpoint(tmp_path):
    args = ['generate', '--checkpoint', str(tmp_path / 'missing.ckpt'), '--out', str(tmp_path / 'x.mid')]
    assert main(args) == 1


def test_reharmonize(tmp_path, checkpoint, c_major_file):
    out = tmp_path / 'reharm.mid'
    args = ['reharmonize', '--checkpoint', str(checkpoint), '--in', str(c_major_file), '--chords', 'IV V',
            '--mode', 'Major', '--out', str(out)]

    assert main(args) == 0

    song = read_smf(out)
    assert len(song.measures()) == 1
    assert json.loads(Path(f"{out}.json").read_text())['chords'] == 'IV V'


def test_reharmonize_bad_mode(tmp_path, checkpoint, c_major_file):
    args = ['reharmonize', '--checkpoint', str(checkpoint), '--in', str(c_major_file), '--chords', 'I V',
            '--mode', 'Bogus', '--out', str(tmp_path / 'x.mid')]
    assert main(args) == 1


def test_unknown_config_key(tmp_path, c_major_file):
    path = tmp_path / 'bad.env'
    path.write_text('VOLUME=11\n')
    assert main(['analyze', '--config', str(path), str(c_major_file)]) == 1


def test_parse_tonic():
    assert parse_tonic('Eb') == 3
    assert parse_tonic('D#') == 3
    assert parse_tonic('14') == 2
    with pytest.raises(SystemExit):
        main(['generate', '--checkpoint', 'x', '--tonic', 'H', '--out', 'y.mid'])


def test_progression_slots():
    slots = progression_slots('VI IV I V', Mode.MAJOR, 2)
    assert [c.degree for c in slots] == [6, 4, 1, 5]
    with pytest.raises(ConfigError):
        progression_slots('I (IV V)', Mode.MAJOR, 2)
