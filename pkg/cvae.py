"""Conditional variational recurrent autoencoder over melody grids.

The encoder is a stack of bidirectional gated recurrent layers that see the
per-step chord condition at every layer and the melody grid every
``residual_injection_period`` layers, followed by a strided time aggregation
(one affine map per measure) and affine heads for the latent mean and
log-variance. The decoder expands the latent, reinjects it at the same
residual points, and ends in a per-step head: a 34-way categorical over
pitch slots plus Silent, and an independent attack probability.
"""
import json
import logging
import struct
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.special import expit
from tqdm import tqdm

import autodiff as ad
from config import CvaeConfig
from encoding import (ATTACK, CHORD_SLOTS_PER_MEASURE, N_CHANNELS, N_PITCH_SLOTS,
                      STEP_CONDITION_DIM, STEPS_PER_MEASURE, SegmentExtractor, TrainingSegment,
                      condition_per_step, condition_size, decode_melody, encode_condition, harden,
                      n_steps)
from exceptions import ConfigError, EncodingError, ReharmonizeError, ShapeError, TrainingDivergedError
from grammar import MotifLatentAssignment, SectionPlan
from harmony import SILENT, ChordTemplate, DegreeChord, detect_chords
from melody_id import identify_melody
from midi_io import NoteEvent, Song, TempoChange, Track, four_four
from tonality import Mode, diatonic_triad

logger = logging.getLogger(__name__)

PROBABILITY_FLOOR = 1e-9
LOG_FLOOR = float(np.log(PROBABILITY_FLOOR))

CHECKPOINT_MAGIC = b'PCVAE\x00\x00\x00'
CHECKPOINT_VERSION = 1

MELODY_BASE_PITCH = 60
CHORD_BASE_PITCH = 48


@dataclass
class LatentDistribution:
    """Diagonal Gaussian; the standard deviation is kept as a log-variance"""
    mean: np.ndarray
    logvar: np.ndarray

    @property
    def std(self) -> np.ndarray:
        return np.exp(0.5 * self.logvar)


def kl_divergence(dist: LatentDistribution) -> float:
    """KL divergence from the unit Gaussian, summed over latent dimensions"""
    mean, logvar = np.asarray(dist.mean), np.asarray(dist.logvar)
    return float(0.5 * np.sum(mean ** 2 + np.exp(logvar) - 1.0 - logvar))


def sample(dist: LatentDistribution, rng: np.random.Generator) -> np.ndarray:
    return dist.mean + dist.std * rng.standard_normal(np.shape(dist.mean))


def warmup_beta(step: int, config: CvaeConfig) -> float:
    """Sigmoid KL weight schedule"""
    return float(expit((step - config.warmup_midpoint_steps) / config.warmup_steepness))


def loss(grid: np.ndarray, decoded: np.ndarray, dist: LatentDistribution, beta: float) -> Tuple[float, float, float]:
    """(total, reproduction, kl) for a target grid and decoded probabilities"""
    if grid.shape != decoded.shape:
        raise ShapeError(f"Grid shape {grid.shape} does not match decoded shape {decoded.shape}")
    pitch = np.maximum(decoded[..., :N_PITCH_SLOTS], PROBABILITY_FLOOR)
    attack = decoded[..., ATTACK]
    target_attack = grid[..., ATTACK]
    reproduction = -np.sum(grid[..., :N_PITCH_SLOTS] * np.log(pitch))
    reproduction -= np.sum(target_attack * np.log(np.maximum(attack, PROBABILITY_FLOOR))
                           + (1 - target_attack) * np.log(np.maximum(1 - attack, PROBABILITY_FLOOR)))
    batch = grid.shape[0] if grid.ndim == 3 else 1
    reproduction = float(reproduction / batch)
    kl = kl_divergence(dist) / batch
    return reproduction + beta * kl, reproduction, kl


class CvaeModel:
    """Parameters and forward passes of the autoencoder"""

    def __init__(self, config: CvaeConfig, params: Dict[str, np.ndarray], step: int = 0,
                 provenance: Optional[Dict[str, Any]] = None):
        self.config = config
        self.params = params
        self.step = step
        self.provenance = provenance or {}
        expected = self.parameter_shapes(config)
        for name, shape in expected.items():
            if name not in params or params[name].shape != shape:
                got = None if name not in params else params[name].shape
                raise ShapeError(f"Parameter {name} has shape {got}, expected {shape}")

    @staticmethod
    def parameter_shapes(config: CvaeConfig) -> Dict[str, Tuple[int, ...]]:
        """Names and shapes of every parameter, in checkpoint order"""
        h = config.hidden_dim
        shapes: Dict[str, Tuple[int, ...]] = {}

        def recurrent_stack(prefix: str, injected: int):
            for layer in range(config.recurrent_layers_per_coder):
                width = (2 * h if layer > 0 else 0) + STEP_CONDITION_DIM
                if layer % config.residual_injection_period == 0:
                    width += injected
                for direction in ('fwd', 'bwd'):
                    shapes[f'{prefix}.layer{layer}.{direction}.w_x'] = (width, 3 * h)
                    shapes[f'{prefix}.layer{layer}.{direction}.b'] = (3 * h,)
                    shapes[f'{prefix}.layer{layer}.{direction}.w_h'] = (h, 3 * h)

        recurrent_stack('encoder', N_CHANNELS)
        aggregated = config.n_measures * config.aggregation_dim
        shapes['encoder.aggregate.w'] = (STEPS_PER_MEASURE * 2 * h, config.aggregation_dim)
        shapes['encoder.aggregate.b'] = (config.aggregation_dim,)
        shapes['encoder.mean.w'] = (aggregated, config.latent_dim)
        shapes['encoder.mean.b'] = (config.latent_dim,)
        shapes['encoder.logvar.w'] = (aggregated, config.latent_dim)
        shapes['encoder.logvar.b'] = (config.latent_dim,)
        shapes['decoder.expand.w'] = (config.latent_dim, h)
        shapes['decoder.expand.b'] = (h,)
        recurrent_stack('decoder', h)
        shapes['decoder.output.w'] = (2 * h, N_CHANNELS)
        shapes['decoder.output.b'] = (N_CHANNELS,)
        return shapes

    @classmethod
    def initialize(cls, config: CvaeConfig, rng: Optional[np.random.Generator] = None) -> 'CvaeModel':
        """Uniform fan-in scaled weights, zero biases, zero output head"""
        rng = rng or np.random.default_rng(config.seed)
        params = {}
        for name, shape in cls.parameter_shapes(config).items():
            if name.startswith('decoder.output') or name.endswith('.b'):
                params[name] = np.zeros(shape)
            else:
                bound = 1.0 / np.sqrt(shape[0])
                params[name] = rng.uniform(-bound, bound, size=shape)
        model = cls(config, params)
        logger.info(f"Initialized model with {model.n_parameters} parameters")
        return model

    @property
    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    @property
    def n_steps(self) -> int:
        return n_steps(self.config.n_measures)

    def _check_inputs(self, grid: Optional[np.ndarray], condition: np.ndarray) -> Tuple[Optional[np.ndarray], np.ndarray]:
        condition = np.asarray(condition, dtype=np.float64)
        if condition.ndim == 1:
            condition = condition[None]
        if condition.shape[1:] != (condition_size(self.config.n_measures),):
            raise ShapeError(f"Condition has shape {condition.shape[1:]}, "
                             f"expected ({condition_size(self.config.n_measures)},)")
        if grid is not None:
            grid = np.asarray(grid, dtype=np.float64)
            if grid.ndim == 2:
                grid = grid[None]
            if grid.shape[1:] != (self.n_steps, N_CHANNELS):
                raise ShapeError(f"Melody grid has shape {grid.shape[1:]}, expected {(self.n_steps, N_CHANNELS)}")
            if grid.shape[0] != condition.shape[0]:
                raise ShapeError("Grid and condition batch sizes differ")
        return grid, condition

    def _step_conditions(self, condition: np.ndarray) -> np.ndarray:
        return np.stack([condition_per_step(c, self.config.n_measures) for c in condition])

    def _bidirectional(self, p: Dict[str, ad.Tensor], prefix: str, inputs: ad.Tensor) -> ad.Tensor:
        outputs = []
        for direction, reverse in (('fwd', False), ('bwd', True)):
            projected = inputs @ p[f'{prefix}.{direction}.w_x'] + p[f'{prefix}.{direction}.b']
            outputs.append(ad.gru_sequence(projected, p[f'{prefix}.{direction}.w_h'], reverse=reverse))
        return ad.concat(outputs, axis=-1)

    def _recurrent_stack(self, p: Dict[str, ad.Tensor], prefix: str, injected: ad.Tensor,
                         steps: ad.Tensor) -> ad.Tensor:
        hidden = None
        for layer in range(self.config.recurrent_layers_per_coder):
            parts = [] if hidden is None else [hidden]
            if layer % self.config.residual_injection_period == 0:
                parts.append(injected)
            parts.append(steps)
            hidden = self._bidirectional(p, f'{prefix}.layer{layer}', ad.concat(parts, axis=-1))
        return hidden

    def _encoder_graph(self, p: Dict[str, ad.Tensor], grid: np.ndarray,
                       steps: ad.Tensor) -> Tuple[ad.Tensor, ad.Tensor]:
        batch = grid.shape[0]
        hidden = self._recurrent_stack(p, 'encoder', ad.Tensor(grid), steps)
        chunks = ad.reshape(hidden, (batch, self.config.n_measures, -1))
        aggregated = ad.elu(chunks @ p['encoder.aggregate.w'] + p['encoder.aggregate.b'])
        flat = ad.reshape(aggregated, (batch, -1))
        mean = flat @ p['encoder.mean.w'] + p['encoder.mean.b']
        logvar = flat @ p['encoder.logvar.w'] + p['encoder.logvar.b']
        return mean, logvar

    def _decoder_graph(self, p: Dict[str, ad.Tensor], z: ad.Tensor,
                       steps: ad.Tensor) -> Tuple[ad.Tensor, ad.Tensor]:
        batch = z.shape[0]
        expanded = ad.elu(z @ p['decoder.expand.w'] + p['decoder.expand.b'])
        over_time = ad.reshape(expanded, (batch, 1, -1)) + np.zeros((batch, self.n_steps, self.config.hidden_dim))
        hidden = self._recurrent_stack(p, 'decoder', over_time, steps)
        logits = hidden @ p['decoder.output.w'] + p['decoder.output.b']
        log_probs = ad.log_softmax(logits[..., :N_PITCH_SLOTS], axis=-1)
        attack_logits = logits[..., ATTACK]
        return log_probs, attack_logits

    def _constants(self) -> Dict[str, ad.Tensor]:
        return {name: ad.Tensor(value) for name, value in self.params.items()}

    def encode(self, grid: np.ndarray, condition: np.ndarray) -> LatentDistribution:
        single = np.ndim(grid) == 2
        grid, condition = self._check_inputs(grid, condition)
        steps = ad.Tensor(self._step_conditions(condition))
        mean, logvar = self._encoder_graph(self._constants(), grid, steps)
        if single:
            return LatentDistribution(mean.data[0], logvar.data[0])
        return LatentDistribution(mean.data, logvar.data)

    def decode(self, z: np.ndarray, condition: np.ndarray) -> np.ndarray:
        """Per-step probabilities: 34 categorical pitch/Silent slots, then attack"""
        z = np.asarray(z, dtype=np.float64)
        single = z.ndim == 1
        if single:
            z = z[None]
        if z.shape[1:] != (self.config.latent_dim,):
            raise ShapeError(f"Latent has shape {z.shape[1:]}, expected ({self.config.latent_dim},)")
        _, condition = self._check_inputs(None, condition)
        if condition.shape[0] != z.shape[0]:
            raise ShapeError("Latent and condition batch sizes differ")
        steps = ad.Tensor(self._step_conditions(condition))
        log_probs, attack_logits = self._decoder_graph(self._constants(), ad.Tensor(z), steps)
        probabilities = np.concatenate(
            [np.exp(log_probs.data), expit(attack_logits.data)[..., None]], axis=-1)
        return probabilities[0] if single else probabilities

    def _loss_graph(self, p: Dict[str, ad.Tensor], grid: np.ndarray, condition: np.ndarray,
                    eps: np.ndarray, beta: float) -> Tuple[ad.Tensor, ad.Tensor, ad.Tensor]:
        batch = grid.shape[0]
        steps = ad.Tensor(self._step_conditions(condition))
        mean, logvar = self._encoder_graph(p, grid, steps)
        z = mean + ad.exp(0.5 * logvar) * eps
        log_probs, attack_logits = self._decoder_graph(p, z, steps)

        target_pitch = grid[..., :N_PITCH_SLOTS]
        target_attack = grid[..., ATTACK]
        pitch_term = ad.tensor_sum(ad.clamp_min(log_probs, LOG_FLOOR) * target_pitch)
        attack_term = ad.tensor_sum(
            ad.clamp_min(ad.log_sigmoid(attack_logits), LOG_FLOOR) * target_attack
            + ad.clamp_min(ad.log_sigmoid(-attack_logits), LOG_FLOOR) * (1 - target_attack))
        reproduction = (pitch_term + attack_term) * (-1.0 / batch)
        kl = ad.tensor_sum(mean * mean + ad.exp(logvar) - 1.0 - logvar) * (0.5 / batch)
        return reproduction + kl * beta, reproduction, kl

    def objective(self, grid: np.ndarray, condition: np.ndarray, eps: np.ndarray, beta: float) -> float:
        """Total loss at fixed noise, without building gradients"""
        grid, condition = self._check_inputs(grid, condition)
        total, _, _ = self._loss_graph(self._constants(), grid, condition, np.atleast_2d(eps), beta)
        return float(total.data)

    def gradients(self, grid: np.ndarray, condition: np.ndarray, eps: np.ndarray,
                  beta: float) -> Tuple[float, float, float, Dict[str, np.ndarray]]:
        """(total, reproduction, kl, gradient per parameter) at fixed noise"""
        grid, condition = self._check_inputs(grid, condition)
        p = {name: ad.parameter(value, name) for name, value in self.params.items()}
        total, reproduction, kl = self._loss_graph(p, grid, condition, np.atleast_2d(eps), beta)
        total.backward()
        grads = {name: (t.grad if t.grad is not None else np.zeros_like(t.data)) for name, t in p.items()}
        return float(total.data), float(reproduction.data), float(kl.data), grads


class CvaeTrainer:
    """Minibatch SGD with momentum and global-norm clipping"""

    def __init__(self, config: CvaeConfig):
        self.config = config
        self.history: List[Dict[str, float]] = []

    def train(self, segments: Sequence[TrainingSegment], model: Optional[CvaeModel] = None,
              progress: bool = True) -> Tuple[CvaeModel, pd.DataFrame]:
        if not segments:
            raise ValueError("Training needs at least one segment")
        config = self.config
        grids = np.stack([s.grid for s in segments])
        conditions = np.stack([s.condition for s in segments])
        if grids.shape[1:] != (n_steps(config.n_measures), N_CHANNELS):
            raise ShapeError(f"Segments span {grids.shape[1] // STEPS_PER_MEASURE} measures, "
                             f"model expects {config.n_measures}")

        rng = np.random.default_rng(config.seed)
        model = model or CvaeModel.initialize(config, rng)
        velocity = {name: np.zeros_like(value) for name, value in model.params.items()}
        self.history = []

        for _ in tqdm(range(config.steps), desc='Training', disable=not progress):
            batch = rng.choice(len(segments), size=config.batch_size, replace=len(segments) < config.batch_size)
            eps = rng.standard_normal((len(batch), config.latent_dim))
            beta = warmup_beta(model.step, config)
            total, reproduction, kl, grads = model.gradients(grids[batch], conditions[batch], eps, beta)

            norm = float(np.sqrt(sum(np.sum(g * g) for g in grads.values())))
            if not (np.isfinite(total) and np.isfinite(norm)):
                snapshot = {
                    'step': model.step,
                    'total': total,
                    'reproduction': reproduction,
                    'kl': kl,
                    'beta': beta,
                    'gradient_norm': norm,
                    'batch': [segments[i].id for i in batch],
                }
                logger.error(f"Training diverged at step {model.step}")
                raise TrainingDivergedError(f"Non-finite loss at step {model.step}", snapshot)

            scale = config.clip_norm / norm if norm > config.clip_norm else 1.0
            for name, grad in grads.items():
                velocity[name] = config.momentum * velocity[name] - config.learning_rate * scale * grad
                model.params[name] += velocity[name]

            self.history.append({
                'step': model.step,
                'reproduction': reproduction,
                'kl': kl,
                'beta': beta,
                'total': total,
            })
            model.step += 1

        return model, self.history_frame()

    def history_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.history, columns=['step', 'reproduction', 'kl', 'beta', 'total'])


def train(segments: Sequence[TrainingSegment], config: CvaeConfig,
          progress: bool = True) -> Tuple[CvaeModel, pd.DataFrame]:
    return CvaeTrainer(config).train(segments, progress=progress)


def write_loss_history(history: pd.DataFrame, path):
    history[['step', 'reproduction', 'kl']].to_csv(path, index=False)


def save_checkpoint(model: CvaeModel, path, provenance: Optional[Dict[str, Any]] = None):
    """Magic, version, header length, JSON header, then little-endian float64 tensors"""
    provenance = provenance if provenance is not None else model.provenance
    header = {
        'config': model.config.to_dict(),
        'step': model.step,
        'provenance': provenance,
        'tensors': [{'name': name, 'shape': list(value.shape)} for name, value in model.params.items()],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode('utf-8')
    with open(path, 'wb') as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack('<HI', CHECKPOINT_VERSION, len(header_bytes)))
        f.write(header_bytes)
        for value in model.params.values():
            f.write(np.ascontiguousarray(value, dtype='<f8').tobytes())
    logger.info(f"Wrote checkpoint with {model.n_parameters} parameters to {path}")


def load_checkpoint(path) -> CvaeModel:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        logger.error(f"Error reading checkpoint: {str(e)}")
        raise ConfigError(f"Error reading checkpoint {path}: {str(e)}")
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ShapeError(f"{path} is not a model checkpoint")
    offset = len(CHECKPOINT_MAGIC)
    version, header_length = struct.unpack_from('<HI', data, offset)
    if version != CHECKPOINT_VERSION:
        raise ShapeError(f"Unsupported checkpoint version {version}")
    offset += struct.calcsize('<HI')
    header = json.loads(data[offset:offset + header_length].decode('utf-8'))
    offset += header_length

    params = {}
    for entry in header['tensors']:
        shape = tuple(entry['shape'])
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(data):
            raise ShapeError(f"Checkpoint truncated in tensor {entry['name']}")
        params[entry['name']] = np.frombuffer(data[offset:end], dtype='<f8').reshape(shape).astype(np.float64)
        offset = end
    return CvaeModel(CvaeConfig.from_mapping(header['config']), params,
                     step=header.get('step', 0), provenance=header.get('provenance', {}))


def chord_notes(chord: DegreeChord, mode: Mode, tonic: int, start: Fraction, length: Fraction,
                track_index: int = 1, channel: int = 1, velocity: int = 80) -> List[NoteEvent]:
    """Block triad for a degree chord, rooted in the octave above C3"""
    if chord.is_silent:
        return []
    root = CHORD_BASE_PITCH + tonic % 12 + mode.intervals[chord.degree - 1]
    return [
        NoteEvent(onset=start, pitch=root + interval, duration=length, velocity=velocity,
                  track_index=track_index, channel=channel)
        for interval in diatonic_triad(chord.degree, mode)
    ]


def _slot_chord_notes(chords: Sequence[DegreeChord], mode: Mode, tonic: int, start: Fraction) -> List[NoteEvent]:
    """Chord track for half-measure slots, merging repeated chords"""
    slot_length = Fraction(4, CHORD_SLOTS_PER_MEASURE)
    notes, k = [], 0
    while k < len(chords):
        run = 1
        while k + run < len(chords) and chords[k + run] == chords[k]:
            run += 1
        notes.extend(chord_notes(chords[k], mode, tonic, start + k * slot_length, run * slot_length))
        k += run
    return notes


def _clip_notes(notes: Sequence[NoteEvent], end: Fraction) -> List[NoteEvent]:
    clipped = []
    for note in notes:
        if note.onset >= end:
            continue
        if note.end > end:
            note = NoteEvent(note.onset, note.pitch, end - note.onset, note.velocity, note.track_index, note.channel)
        clipped.append(note)
    return clipped


def _song(melody: List[NoteEvent], chords: List[NoteEvent], n_measures: int) -> Song:
    return Song(
        tracks=(
            Track(name='Melody', program=73, channel=0, notes=tuple(sorted(melody))),
            Track(name='Chords', program=0, channel=1, notes=tuple(sorted(chords))),
        ),
        time_signatures=four_four(n_measures),
        tempos=(TempoChange(Fraction(0), 500000),),
    )


def generate(model: CvaeModel, plan: SectionPlan, latents: MotifLatentAssignment, tonic: int = 0) -> Song:
    """Decode one melody per section over its chords and lay the sections end to end"""
    window = model.config.n_measures
    slots_per_window = window * CHORD_SLOTS_PER_MEASURE
    reference = MELODY_BASE_PITCH + tonic % 12
    melody, chords = [], []
    for section, first_measure in zip(plan.sections, plan.section_starts()):
        z = latents.for_section(section)
        slot_chords = section.slot_chords()
        for chunk_start in range(0, section.measures, window):
            chunk_measures = min(window, section.measures - chunk_start)
            chunk = slot_chords[chunk_start * CHORD_SLOTS_PER_MEASURE:
                                (chunk_start + chunk_measures) * CHORD_SLOTS_PER_MEASURE]
            padded = list(chunk) + [SILENT] * (slots_per_window - len(chunk))
            try:
                condition = encode_condition(padded, section.mode, window)
            except EncodingError as e:
                raise EncodingError(f"Section {section.index} ({section.tag}): {str(e)}")
            start = Fraction(4 * (first_measure + chunk_start))
            grid = harden(model.decode(z, condition))
            notes = decode_melody(grid, reference, start=start)
            melody.extend(_clip_notes(notes, start + 4 * chunk_measures))
            chords.extend(_slot_chord_notes(chunk, section.mode, tonic, start))
    logger.info(f"Generated {len(plan.sections)} sections, {plan.total_measures} measures")
    return _song(melody, chords, plan.total_measures)


def reharmonize(model: CvaeModel, song: Song, new_chords: Sequence[DegreeChord], mode: Mode,
                seed: int = 0, sample_latent: bool = False, melody_track: Optional[int] = None,
                bin_policy: str = 'auto', templates: Optional[Sequence[ChordTemplate]] = None) -> Song:
    """Re-decode the first valid segment of a song under a new chord progression"""
    window = model.config.n_measures
    if len(new_chords) != window * CHORD_SLOTS_PER_MEASURE:
        raise ShapeError(f"Reharmonization needs {window * CHORD_SLOTS_PER_MEASURE} chord slots, "
                         f"got {len(new_chords)}")
    if melody_track is None:
        melody_track = identify_melody(song)
    labels = detect_chords(song, bin_policy=bin_policy, templates=templates)
    extractor = SegmentExtractor(n_measures=window)
    segments = extractor.extract(song, melody_track, labels)
    if not segments:
        reasons = {k: v for k, v in extractor.report['drop_reasons'].items() if v}
        raise ReharmonizeError(f"No segment of the song can be reharmonized; dropped windows: {reasons or 'none'}")

    segment = segments[0]
    dist = model.encode(segment.grid, segment.condition)
    z = sample(dist, np.random.default_rng(seed)) if sample_latent else dist.mean
    condition = encode_condition(new_chords, mode, window)
    grid = harden(model.decode(z, condition))
    melody = decode_melody(grid, segment.reference)
    logger.info(f"Reharmonized segment {segment.id} into {mode.label}")
    return _song(melody, _slot_chord_notes(new_chords, mode, segment.tonic, Fraction(0)), window)
