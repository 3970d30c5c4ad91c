#App.py

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

from colorama import Fore, Style, init as colorama_init

from config import configure_logging, load_environment, load_pipeline_config
from cvae import CvaeTrainer, generate, load_checkpoint, reharmonize, save_checkpoint, write_loss_history
from data_processing import DataProcessor
from exceptions import ConfigError, PopComposerError, TrainingDivergedError
from grammar import assign_latents, expand, parse_grammar, read_grammar
from harmony import detect_chords, load_templates
from melody_id import MelodyIdentifier, load_instrument_table, load_rubric_weights
from midi_io import read_smf, write_smf
from reports import ReportGenerator
from tonality import PITCH_NAMES, Mode

logger = logging.getLogger(__name__)

# Exit codes
EXIT_OK = 0
EXIT_USAGE = 1


def print_status(message: str):
    print(f"{Fore.GREEN}{message}{Style.RESET_ALL}", file=sys.stderr)


def print_error(message: str):
    print(f"{Fore.RED}Error: {message}{Style.RESET_ALL}", file=sys.stderr)


def parse_tonic(value: str) -> int:
    """Pitch class from a name such as ``Eb`` or a number 0-11"""
    if value.isdigit():
        return int(value) % 12
    aliases = {'Db': 'C#', 'D#': 'Eb', 'Gb': 'F#', 'G#': 'Ab', 'A#': 'Bb'}
    name = aliases.get(value, value)
    if name not in PITCH_NAMES:
        raise argparse.ArgumentTypeError(f"Unknown tonic: {value}")
    return PITCH_NAMES.index(name)


def write_sidecar(midi_path: Path, payload: Dict[str, Any]) -> Path:
    """Provenance JSON written next to a MIDI artifact"""
    sidecar = Path(f"{midi_path}.json")
    sidecar.write_text(json.dumps(payload, indent=2, sort_keys=True, default=str), encoding='utf-8')
    return sidecar


def load_config(args: argparse.Namespace, **overrides):
    return load_pipeline_config(getattr(args, 'config', None), overrides)


def cmd_analyze(args: argparse.Namespace, settings: Dict[str, Any]) -> int:
    config = load_config(args, bin_policy=args.bin, exclude_melody=args.exclude_melody or None)
    processor = DataProcessor(config, workers=settings['workers'])
    reporter = ReportGenerator(as_json=args.json)
    exit_code = EXIT_OK
    for result in processor.analyze_files(args.files):
        if 'error' in result:
            print_error(f"{result['path']}: {result['error']}")
            exit_code = max(exit_code, result['exit_code'])
            continue
        print(reporter.create_report('analysis', result))
    return exit_code


def cmd_identify_melody(args: argparse.Namespace, settings: Dict[str, Any]) -> int:
    config = load_config(args)
    song = read_smf(args.file)
    identifier = MelodyIdentifier(load_rubric_weights(str(config.rubric_weights_file)),
                                  load_instrument_table(str(config.instrument_file)))
    melody = identifier.identify(song)
    payload = {'melody_track': melody, 'scores': identifier.to_dict()}
    print(ReportGenerator(as_json=args.json).create_report('melody', payload))
    return EXIT_OK


def cmd_detect_chords(args: argparse.Namespace, settings: Dict[str, Any]) -> int:
    overrides = {'bin_policy': args.bin, 'template_file': args.templates}
    config = load_config(args, **overrides)
    song = read_smf(args.file)
    templates = load_templates(str(config.template_file))
    accompaniment = None
    if args.exclude_melody or config.exclude_melody:
        identifier = MelodyIdentifier(load_rubric_weights(str(config.rubric_weights_file)),
                                      load_instrument_table(str(config.instrument_file)))
        melody = identifier.identify(song)
        accompaniment = [i for i in range(len(song.tracks)) if i != melody]
    labels = detect_chords(song, accompaniment, config.bin_policy, templates)
    print(ReportGenerator(as_json=args.json).create_report('chords', {'chords': labels, 'song': song}))
    return EXIT_OK


def cmd_extract(args: argparse.Namespace, settings: Dict[str, Any]) -> int:
    config = load_config(args, corpus_dir=args.input, dataset=args.output, bin_policy=args.bin)
    processor = DataProcessor(config, workers=settings['workers'])
    records, report = processor.extract_corpus(config.corpus_dir)
    processor.write_dataset(records, config.dataset)
    print(ReportGenerator(as_json=args.json).create_report('extraction', report))
    print_status(f"Wrote {len(records)} segments to {config.dataset}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace, settings: Dict[str, Any]) -> int:
    config = load_config(args, dataset=args.data, checkpoint=args.output, cvae_steps=args.steps)
    processor = DataProcessor(config)
    segments = processor.read_dataset(config.dataset)
    if not segments:
        raise ConfigError(f"Dataset {config.dataset} holds no segments")
    print(ReportGenerator(as_json=args.json).create_report('dataset', processor.get_basic_stats(segments)))

    checkpoint = Path(config.checkpoint)
    trainer = CvaeTrainer(config.cvae)
    try:
        model, history = trainer.train(segments, progress=not args.quiet)
    except TrainingDivergedError as e:
        snapshot_path = checkpoint.with_suffix('.diverged.json')
        snapshot_path.write_text(json.dumps({**e.snapshot, 'provenance': config.provenance()}, indent=2, default=str),
                                 encoding='utf-8')
        write_loss_history(trainer.history_frame(), checkpoint.with_suffix('.loss.csv'))
        print_error(f"Training diverged; diagnostics in {snapshot_path}")
        raise

    provenance = {**config.provenance(), 'dataset': str(config.dataset)}
    save_checkpoint(model, checkpoint, provenance)
    write_loss_history(history, checkpoint.with_suffix('.loss.csv'))
    print(ReportGenerator(as_json=args.json).create_report('training', {'history': history, 'checkpoint': checkpoint}))
    return EXIT_OK


def cmd_generate(args: argparse.Namespace, settings: Dict[str, Any]) -> int:
    seed = args.seed
    latent_seed = args.latent_seed if args.latent_seed is not None else seed
    config = load_config(args, grammar_file=args.grammar, checkpoint=args.checkpoint, seed=seed,
                         grammar_seed=seed, latent_seed=latent_seed, sigma=args.sigma)
    model = load_checkpoint(config.checkpoint)
    grammar = read_grammar(config.grammar_file)
    plan = expand(grammar, seed=config.grammar_seed)
    latents = assign_latents(plan, model.config.latent_dim, sigma=config.sigma, seed=config.latent_seed)
    song = generate(model, plan, latents, tonic=args.tonic)

    output = Path(args.output)
    output.write_bytes(write_smf(song))
    write_sidecar(output, {
        **config.provenance(),
        'grammar_file': str(config.grammar_file),
        'checkpoint': str(config.checkpoint),
        'checkpoint_provenance': model.provenance,
        'tonic': PITCH_NAMES[args.tonic],
        'mode': plan.mode.label,
        'sections': [
            {'index': s.index, 'tag': s.tag, 'measures': s.measures, 'chords': s.roman()}
            for s in plan.sections
        ],
    })
    print_status(f"Wrote {len(plan.sections)} sections ({plan.total_measures} measures) to {output}")
    return EXIT_OK


def progression_slots(chords: str, mode: Mode, n_measures: int) -> List:
    """Half-measure chord slots of a Roman-numeral progression spread over ``n_measures``"""
    plan = expand(parse_grammar(f"%mode {mode.label}\nS[{n_measures}] -> {chords}"))
    if len(plan.sections) != 1:
        raise ConfigError(f"Progression must be plain chords: {chords!r}")
    return plan.sections[0].slot_chords()


def cmd_reharmonize(args: argparse.Namespace, settings: Dict[str, Any]) -> int:
    config = load_config(args, checkpoint=args.checkpoint, seed=args.seed)
    model = load_checkpoint(config.checkpoint)
    try:
        mode = Mode.from_name(args.mode)
    except ValueError as e:
        raise ConfigError(str(e))
    new_chords = progression_slots(args.chords, mode, model.config.n_measures)
    song = read_smf(args.input)
    result = reharmonize(model, song, new_chords, mode, seed=config.seed, sample_latent=args.sample,
                         bin_policy=config.bin_policy, templates=load_templates(str(config.template_file)))

    output = Path(args.output)
    output.write_bytes(write_smf(result))
    write_sidecar(output, {
        **config.provenance(),
        'input': str(args.input),
        'checkpoint': str(config.checkpoint),
        'chords': args.chords,
        'mode': mode.label,
        'sampled_latent': args.sample,
    })
    print_status(f"Wrote reharmonized melody to {output}")
    return EXIT_OK


COMMANDS = {
    'analyze': cmd_analyze,
    'identify-melody': cmd_identify_melody,
    'detect-chords': cmd_detect_chords,
    'extract': cmd_extract,
    'train': cmd_train,
    'generate': cmd_generate,
    'reharmonize': cmd_reharmonize,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', type=Path, help='KEY=value pipeline config file')
    common.add_argument('--json', action='store_true', help='Machine-readable output')

    parser = argparse.ArgumentParser(prog='popcomposer', description='Analyze MIDI pop songs and compose melodies')
    sub = parser.add_subparsers(dest='command', required=True)

    analyze = sub.add_parser('analyze', parents=[common], help='Melody track, chords per measure and key of MIDI files')
    analyze.add_argument('files', nargs='+', type=Path)
    analyze.add_argument('--bin', choices=['half', 'one', 'two', 'auto'])
    analyze.add_argument('--exclude-melody', action='store_true')

    identify = sub.add_parser('identify-melody', parents=[common], help='Score every track and pick the melody')
    identify.add_argument('file', type=Path)

    chords = sub.add_parser('detect-chords', parents=[common], help='Lead sheet of detected chords')
    chords.add_argument('file', type=Path)
    chords.add_argument('--bin', choices=['half', 'one', 'two', 'auto'])
    chords.add_argument('--templates', type=Path)
    chords.add_argument('--exclude-melody', action='store_true')

    extract = sub.add_parser('extract', parents=[common], help='Training segments of a MIDI corpus')
    extract.add_argument('--in', dest='input', type=Path, required=True)
    extract.add_argument('--out', dest='output', type=Path, required=True)
    extract.add_argument('--bin', choices=['half', 'one', 'two', 'auto'])

    train = sub.add_parser('train', parents=[common], help='Train the melody model on a dataset')
    train.add_argument('--data', type=Path, required=True)
    train.add_argument('--out', dest='output', type=Path, required=True)
    train.add_argument('--steps', type=int)
    train.add_argument('--quiet', action='store_true', help='No progress bar')

    gen = sub.add_parser('generate', parents=[common], help='Compose a song from a chord grammar')
    gen.add_argument('--grammar', type=Path)
    gen.add_argument('--checkpoint', type=Path, required=True)
    gen.add_argument('--seed', type=int, help='Grammar and latent seed (default: from config)')
    gen.add_argument('--latent-seed', type=int)
    gen.add_argument('--sigma', type=float, help='Motif variation spread (default: from config)')
    gen.add_argument('--tonic', type=parse_tonic, default=0)
    gen.add_argument('--out', dest='output', type=Path, required=True)

    reharm = sub.add_parser('reharmonize', parents=[common], help='Re-decode a melody over new chords')
    reharm.add_argument('--checkpoint', type=Path, required=True)
    reharm.add_argument('--in', dest='input', type=Path, required=True)
    reharm.add_argument('--chords', required=True, help="Roman numerals, e.g. 'VI IV I V'")
    reharm.add_argument('--mode', default='Major')
    reharm.add_argument('--sample', action='store_true', help='Sample the latent instead of using its mean')
    reharm.add_argument('--seed', type=int)
    reharm.add_argument('--out', dest='output', type=Path, required=True)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Main application entry point"""
    colorama_init()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        settings = load_environment()
        configure_logging(settings['log_level'])
        return COMMANDS[args.command](args, settings)
    except PopComposerError as e:
        print_error(str(e))
        return e.exit_code
    except OSError as e:
        logger.error(f"Error running {args.command}: {str(e)}")
        print_error(str(e))
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
