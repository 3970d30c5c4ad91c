import math
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from conftest import c_major_song, make_song, note, tiny_cvae_config
from cvae import (CHECKPOINT_MAGIC, CvaeModel, CvaeTrainer, LatentDistribution, generate, kl_divergence,
                  load_checkpoint, loss, reharmonize, sample, save_checkpoint, warmup_beta, write_loss_history)
from encoding import (SILENT_SLOT, QuantizedNote, SegmentExtractor, TrainingSegment, encode_condition, encode_melody,
                      harden)
from exceptions import ConfigError, ReharmonizeError, ShapeError, TrainingDivergedError
from grammar import assign_latents, expand, read_grammar
from harmony import detect_chords, diatonic_chord
from midi_io import Track, write_smf
from tonality import OFFSET_LIMIT, KeyEstimate, Mode

GRAMMARS = Path(__file__).resolve().parent.parent / 'grammars'


def randomize_head(model, seed=7, scale=0.8):
    """Random output layer that rarely picks Silent"""
    rng = np.random.default_rng(seed)
    for name in ('decoder.output.w', 'decoder.output.b'):
        model.params[name] = rng.normal(scale=scale, size=model.params[name].shape)
    model.params['decoder.output.b'][SILENT_SLOT] = -4.0
    return model


def one_measure_batch():
    grids = [
        encode_melody([QuantizedNote(0, 0, 4), QuantizedNote(4, 4, 4), QuantizedNote(7, 8, 8)], 1)[0],
        encode_melody([QuantizedNote(-3, 2, 6), QuantizedNote(2, 10, 2)], 1)[0],
    ]
    conditions = [
        encode_condition([diatonic_chord(1, Mode.MAJOR), diatonic_chord(5, Mode.MAJOR)], Mode.MAJOR, 1),
        encode_condition([diatonic_chord(6, Mode.MINOR), diatonic_chord(4, Mode.MINOR)], Mode.MINOR, 1),
    ]
    return np.stack(grids), np.stack(conditions)


def one_measure_segments():
    song = c_major_song(4)
    labels = detect_chords(song, accompaniment_tracks=[1], bin_policy='one')
    extractor = SegmentExtractor(n_measures=1, hop=1)
    return extractor.extract(song, 0, labels, KeyEstimate(0, Mode.MAJOR, 1.0), source='c.mid')


def test_parameter_gradients_match_finite_differences():
    model = randomize_head(CvaeModel.initialize(tiny_cvae_config()))
    grids, conditions = one_measure_batch()
    eps = np.random.default_rng(3).standard_normal((2, 4))
    beta = 0.7

    total, reproduction, kl, grads = model.gradients(grids, conditions, eps, beta)
    assert total == pytest.approx(reproduction + beta * kl)

    rng = np.random.default_rng(11)
    h = 1e-5
    for name, value in model.params.items():
        flat = value.reshape(-1)
        picks = rng.choice(flat.size, size=min(8, flat.size), replace=False)
        numeric = []
        for i in picks:
            original = flat[i]
            flat[i] = original + h
            upper = model.objective(grids, conditions, eps, beta)
            flat[i] = original - h
            lower = model.objective(grids, conditions, eps, beta)
            flat[i] = original
            numeric.append((upper - lower) / (2 * h))
        analytic = grads[name].reshape(-1)[picks]
        numeric = np.array(numeric)
        scale = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-3)
        assert np.linalg.norm(analytic - numeric) <= 1e-4 * scale, name


def test_kl_divergence_values():
    assert kl_divergence(LatentDistribution(np.zeros(5), np.zeros(5))) == 0
    assert kl_divergence(LatentDistribution(np.array([1.0]), np.array([0.0]))) == pytest.approx(0.5)


def test_kl_is_never_negative(rng):
    for _ in range(10000):
        dist = LatentDistribution(rng.normal(size=3), rng.normal(scale=2.0, size=3))
        assert kl_divergence(dist) >= 0


def test_sample_uses_mean_and_spread():
    dist = LatentDistribution(np.full(20000, 2.0), np.full(20000, math.log(0.25)))
    z = sample(dist, np.random.default_rng(0))

    assert z.mean() == pytest.approx(2.0, abs=0.02)
    assert z.std() == pytest.approx(0.5, rel=0.03)


def test_fresh_model_decodes_uniformly():
    config = tiny_cvae_config(n_measures=8)
    model = CvaeModel.initialize(config)
    condition = encode_condition([diatonic_chord(1, Mode.MAJOR)] * 16, Mode.MAJOR, 8)
    decoded = model.decode(np.zeros(config.latent_dim), condition)
    grid, _ = encode_melody([QuantizedNote(0, 0, 16)], 8)

    total, reproduction, kl = loss(grid, decoded, LatentDistribution(np.zeros(4), np.zeros(4)), beta=1.0)

    assert decoded.shape == (128, 35)
    np.testing.assert_allclose(decoded[:, :34].sum(axis=1), 1.0)
    assert reproduction == pytest.approx(128 * math.log(34) + 128 * math.log(2))
    assert kl == 0
    assert total == reproduction


def test_loss_shape_mismatch():
    with pytest.raises(ShapeError):
        loss(np.zeros((16, 35)), np.zeros((32, 35)), LatentDistribution(np.zeros(1), np.zeros(1)), 1.0)


def test_warmup_midpoint_is_half():
    config = tiny_cvae_config(warmup_midpoint_steps=100, warmup_steepness=10.0)

    assert warmup_beta(100, config) == pytest.approx(0.5)
    assert warmup_beta(0, config) < 0.01
    assert warmup_beta(200, config) > 0.99


def test_latent_changes_the_decoding():
    model = randomize_head(CvaeModel.initialize(tiny_cvae_config()))
    _, conditions = one_measure_batch()

    first = model.decode(np.zeros(4), conditions[0])
    second = model.decode(np.full(4, 2.0), conditions[0])

    assert not np.allclose(first, second)


def test_chords_change_the_decoding():
    model = randomize_head(CvaeModel.initialize(tiny_cvae_config()))
    _, conditions = one_measure_batch()
    z = np.full(4, 0.5)

    assert not np.allclose(model.decode(z, conditions[0]), model.decode(z, conditions[1]))


def test_encode_checks_shapes():
    model = CvaeModel.initialize(tiny_cvae_config())
    grids, conditions = one_measure_batch()

    dist = model.encode(grids[0], conditions[0])
    assert dist.mean.shape == (4,) and dist.logvar.shape == (4,)
    with pytest.raises(ShapeError):
        model.encode(np.zeros((32, 35)), conditions[0])
    with pytest.raises(ShapeError):
        model.decode(np.zeros(3), conditions[0])


def test_zero_learning_rate_leaves_parameters():
    config = tiny_cvae_config(learning_rate=0.0)
    model = CvaeModel.initialize(config)
    before = {name: value.copy() for name, value in model.params.items()}

    trained, history = CvaeTrainer(config).train(one_measure_segments(), model=model, progress=False)

    assert trained.step == 3
    assert list(history.columns) == ['step', 'reproduction', 'kl', 'beta', 'total']
    assert history['step'].tolist() == [0, 1, 2]
    for name, value in trained.params.items():
        np.testing.assert_array_equal(value, before[name])


def test_training_rejects_mismatched_segments():
    with pytest.raises(ShapeError):
        CvaeTrainer(tiny_cvae_config(n_measures=2)).train(one_measure_segments(), progress=False)


def test_non_finite_loss_stops_training():
    segment = one_measure_segments()[0]
    broken = TrainingSegment(id='broken#0', grid=np.full_like(segment.grid, np.nan), condition=segment.condition,
                             source='broken', start_measure=0, n_measures=1, tonic=0, mode=Mode.MAJOR,
                             key_confidence=1.0, reference=60)

    with pytest.raises(TrainingDivergedError) as info:
        CvaeTrainer(tiny_cvae_config()).train([broken], progress=False)
    assert info.value.snapshot['step'] == 0
    assert info.value.snapshot['batch'] == ['broken#0', 'broken#0']


def test_loss_history_csv(tmp_path):
    _, history = CvaeTrainer(tiny_cvae_config()).train(one_measure_segments(), progress=False)
    path = tmp_path / 'loss.csv'
    write_loss_history(history, path)

    assert path.read_text().splitlines()[0] == 'step,reproduction,kl'
    assert len(path.read_text().splitlines()) == 4


def test_checkpoint_round_trip(tmp_path):
    model = randomize_head(CvaeModel.initialize(tiny_cvae_config()))
    model.step = 42
    path = tmp_path / 'model.ckpt'
    save_checkpoint(model, path, {'seed': 5, 'config_hash': 'abc'})

    loaded = load_checkpoint(path)

    assert loaded.config == model.config
    assert loaded.step == 42
    assert loaded.provenance == {'seed': 5, 'config_hash': 'abc'}
    assert list(loaded.params) == list(model.params)
    for name, value in model.params.items():
        np.testing.assert_array_equal(loaded.params[name], value)


def test_corrupt_checkpoints(tmp_path):
    path = tmp_path / 'model.ckpt'
    save_checkpoint(CvaeModel.initialize(tiny_cvae_config()), path)
    data = path.read_bytes()

    path.write_bytes(b'NOTACKPT' + data[len(CHECKPOINT_MAGIC):])
    with pytest.raises(ShapeError):
        load_checkpoint(path)

    path.write_bytes(data[:-16])
    with pytest.raises(ShapeError):
        load_checkpoint(path)

    with pytest.raises(ConfigError):
        load_checkpoint(tmp_path / 'missing.ckpt')


def test_generation_is_deterministic():
    model = randomize_head(CvaeModel.initialize(tiny_cvae_config()))
    plan = expand(read_grammar(GRAMMARS / 'motif.tgg'), seed=1)

    first = generate(model, plan, assign_latents(plan, 4, sigma=0.2, seed=9))
    second = generate(model, plan, assign_latents(plan, 4, sigma=0.2, seed=9))

    assert write_smf(first) == write_smf(second)
    assert len(first.measures()) == 40
    assert [t.name for t in first.tracks] == ['Melody', 'Chords']


def test_zero_sigma_repeats_the_motif_melody():
    model = randomize_head(CvaeModel.initialize(tiny_cvae_config()))
    plan = expand(read_grammar(GRAMMARS / 'motif.tgg'))
    song = generate(model, plan, assign_latents(plan, 4, sigma=0.0, seed=2))

    def section_melody(first_measure):
        start, end = Fraction(4 * first_measure), Fraction(4 * (first_measure + 8))
        return [(n.onset - start, n.pitch, n.duration) for n in song.tracks[0].notes if start <= n.onset < end]

    assert section_melody(8) == section_melody(24)
    assert section_melody(8) != []
    dominant = sorted({n.pitch for n in song.tracks[1].notes if 32 <= n.onset < 64})
    assert dominant == [55, 59, 62]


def test_tonic_transposes_output():
    model = randomize_head(CvaeModel.initialize(tiny_cvae_config()))
    plan = expand(read_grammar(GRAMMARS / 'motif.tgg'))
    latents = assign_latents(plan, 4, seed=2)

    in_c = generate(model, plan, latents, tonic=0)
    in_d = generate(model, plan, latents, tonic=2)

    assert [n.pitch + 2 for n in in_c.tracks[0].notes] == [n.pitch for n in in_d.tracks[0].notes]


def test_reharmonize_keeps_the_window():
    model = randomize_head(CvaeModel.initialize(tiny_cvae_config()))
    chords = [diatonic_chord(4, Mode.MAJOR), diatonic_chord(5, Mode.MAJOR)]

    song = reharmonize(model, c_major_song(4), chords, Mode.MAJOR, melody_track=0, bin_policy='one')
    again = reharmonize(model, c_major_song(4), chords, Mode.MAJOR, melody_track=0, bin_policy='one')

    assert song == again
    assert len(song.measures()) == 1
    chord_track = song.tracks[1].notes
    assert len(chord_track) == 6
    assert sorted({n.onset for n in chord_track}) == [0, 2]
    assert all(n.duration == 2 for n in chord_track)


def test_reharmonize_with_sampled_latent_is_seeded():
    model = randomize_head(CvaeModel.initialize(tiny_cvae_config()))
    chords = [diatonic_chord(2, Mode.MAJOR), diatonic_chord(5, Mode.MAJOR)]

    first = reharmonize(model, c_major_song(4), chords, Mode.MAJOR, seed=4, sample_latent=True, melody_track=0)
    second = reharmonize(model, c_major_song(4), chords, Mode.MAJOR, seed=4, sample_latent=True, melody_track=0)

    assert first == second


def test_reharmonize_errors(three_four_span):
    model = CvaeModel.initialize(tiny_cvae_config())
    with pytest.raises(ShapeError):
        reharmonize(model, c_major_song(4), [diatonic_chord(1, Mode.MAJOR)], Mode.MAJOR)

    waltz = make_song([Track(name='Lead', notes=tuple(note(3 * m, 64, 3) for m in range(16)))],
                      spans=[three_four_span])
    with pytest.raises(ReharmonizeError):
        reharmonize(model, waltz, [diatonic_chord(1, Mode.MAJOR)] * 2, Mode.MAJOR, melody_track=0)




def tenth(history, column):
    n = max(1, len(history) // 10)
    return history[column].iloc[:n].mean(), history[column].iloc[-n:].mean()


@pytest.fixture(scope='module')
def overfit():
    """Model trained to memorize the four one-measure segments, KL weight still negligible"""
    config = tiny_cvae_config(hidden_dim=16, learning_rate=0.05, steps=1500, warmup_midpoint_steps=10000)
    segments = one_measure_segments()
    model, history = CvaeTrainer(config).train(segments, progress=False)
    return model, history, segments


@pytest.mark.slow
def test_training_memorizes_small_dataset(overfit):
    model, history, segments = overfit
    steps_per_segment = segments[0].grid.shape[0]

    first, last = tenth(history, 'reproduction')
    assert last / steps_per_segment < 0.05
    assert last < first
    first_total, last_total = tenth(history, 'total')
    assert last_total < first_total


@pytest.mark.slow
def test_total_loss_falls_after_warmup():
    config = tiny_cvae_config(hidden_dim=8, learning_rate=0.05, steps=600, warmup_midpoint_steps=100,
                              warmup_steepness=10.0)
    _, history = CvaeTrainer(config).train(one_measure_segments(), progress=False)

    warmed = history[history['beta'] > 0.99]
    assert len(warmed) > 300
    first, last = tenth(warmed, 'total')
    assert last < first


@pytest.mark.slow
def test_distinct_segments_get_distinct_latents(overfit):
    model, _, segments = overfit
    # measures 1 and 4 share the I chord but carry different melodies
    first = model.encode(segments[0].grid, segments[0].condition)
    last = model.encode(segments[3].grid, segments[3].condition)

    np.testing.assert_array_equal(segments[0].condition, segments[3].condition)
    assert np.linalg.norm(first.mean - last.mean) > max(first.std.max(), last.std.max())


@pytest.mark.slow
def test_new_chords_change_the_melody(overfit):
    model, _, segments = overfit
    mode = Mode.MIXOLYDIAN
    changed = sounding = diatonic = total = 0
    for segment in segments:
        z = model.encode(segment.grid, segment.condition).mean
        original = harden(model.decode(z, segment.condition))
        for first in range(1, 8):
            for second in range(1, 8):
                condition = encode_condition([diatonic_chord(first, mode), diatonic_chord(second, mode)], mode, 1)
                grid = harden(model.decode(z, condition))
                total += grid.shape[0]
                changed += int(np.sum(np.any(grid != original, axis=1)))
                slots = np.argmax(grid[:, :SILENT_SLOT + 1], axis=1)
                pitched = slots[slots < SILENT_SLOT] - OFFSET_LIMIT
                sounding += pitched.size
                diatonic += int(np.isin(pitched % 12, mode.intervals).sum())

    assert changed >= 0.05 * total
    assert sounding > 0
    assert diatonic >= 0.9 * sounding
