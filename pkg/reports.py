import json
import logging
from typing import Any, Callable, Dict, List, Sequence, Tuple

import pandas as pd

from harmony import ChordLabel, label_table
from midi_io import Song
from tonality import PITCH_NAMES, KeyEstimate

logger = logging.getLogger(__name__)


def lead_sheet(labels: Sequence[ChordLabel], song: Song) -> List[str]:
    """One ``measure: chord chord`` line per measure"""
    lines = []
    for measure in song.measures():
        end = measure.start + measure.length
        names = [label.name for label in labels if measure.start <= label.start < end]
        if not names:
            # a bin that started in an earlier measure is still sounding
            names = [label.name for label in labels if label.start < measure.start < label.end]
        lines.append(f"{measure.index + 1}: {' '.join(names)}")
    return lines


def score_table(scores: Sequence[Dict[str, Any]]) -> pd.DataFrame:
    frame = pd.DataFrame(scores, columns=['track', 'category', 'density', 'rubric', 'entropy', 'total', 'flags'])
    if not frame.empty:
        frame['flags'] = frame['flags'].apply(lambda flags: ','.join(flags))
    return frame.round({'density': 3, 'entropy': 4, 'total': 4})


def drop_reason_table(report: Dict[str, Any]) -> pd.DataFrame:
    return pd.DataFrame(
        [{'reason': reason, 'windows': count} for reason, count in report['drop_reasons'].items()],
        columns=['reason', 'windows'],
    )


def key_dict(key: KeyEstimate) -> Dict[str, Any]:
    return {'tonic': PITCH_NAMES[key.tonic], 'mode': key.mode.label, 'confidence': round(key.confidence, 4)}


class ReportGenerator:
    """Renders command results as text or JSON"""

    def __init__(self, as_json: bool = False):
        self.as_json = as_json
        self.report_types: Dict[str, Callable[[Dict[str, Any]], Tuple[Dict[str, Any], str]]] = {
            'analysis': self._analysis_report,
            'melody': self._melody_report,
            'chords': self._chord_report,
            'extraction': self._extraction_report,
            'dataset': self._dataset_report,
            'training': self._training_report,
        }

    def create_report(self, report_type: str, payload: Dict[str, Any]) -> str:
        if report_type not in self.report_types:
            raise ValueError(f"Unsupported report type: {report_type}")
        data, text = self.report_types[report_type](payload)
        if self.as_json:
            return json.dumps(data, indent=2, default=str)
        return text

    def _melody_report(self, payload: Dict[str, Any]) -> Tuple[Dict[str, Any], str]:
        table = score_table(payload['scores'])
        data = {'melody_track': payload['melody_track'], 'scores': payload['scores']}
        text = f"{table.to_string(index=False)}\n\nMelody: track {payload['melody_track']}"
        return data, text

    def _chord_report(self, payload: Dict[str, Any]) -> Tuple[Dict[str, Any], str]:
        lines = lead_sheet(payload['chords'], payload['song'])
        return {'chords': label_table(payload['chords']), 'lead_sheet': lines}, '\n'.join(lines)

    def _analysis_report(self, payload: Dict[str, Any]) -> Tuple[Dict[str, Any], str]:
        melody_data, melody_text = self._melody_report(payload)
        chord_data, chord_text = self._chord_report(payload)
        key = payload['key']
        data = {
            'path': payload.get('path'),
            **melody_data,
            'key': key_dict(key),
            **chord_data,
            'warnings': payload.get('warnings', []),
        }
        text = '\n'.join([
            f"File: {payload.get('path', '')}",
            melody_text,
            f"Key: {key} (confidence {key.confidence:.3f})",
            'Chords:',
            chord_text,
        ])
        return data, text

    def _extraction_report(self, payload: Dict[str, Any]) -> Tuple[Dict[str, Any], str]:
        table = drop_reason_table(payload)
        text = (f"Files read: {payload['files_read']}, failed: {payload['files_failed']}, "
                f"segments kept: {payload['segments_kept']}, windows dropped: {payload['windows_dropped']}\n"
                f"{table.to_string(index=False)}")
        return payload, text

    def _dataset_report(self, payload: Dict[str, Any]) -> Tuple[Dict[str, Any], str]:
        lines = [f"Records: {payload['records']}"]
        if payload['records']:
            modes = ', '.join(f"{mode} {count}" for mode, count in payload['modes'].items())
            lines.append(f"Modes: {modes}")
            lines.append(f"Mean key confidence: {payload['mean_key_confidence']:.3f}")
            lines.append(f"Silent steps: {100 * payload['silent_step_ratio']:.1f}%")
        return payload, '\n'.join(lines)

    def _training_report(self, payload: Dict[str, Any]) -> Tuple[Dict[str, Any], str]:
        history: pd.DataFrame = payload['history']
        tail = history.tail(max(1, len(history) // 10))
        data = {
            'steps': len(history),
            'final_reproduction': float(tail['reproduction'].mean()) if len(history) else None,
            'final_kl': float(tail['kl'].mean()) if len(history) else None,
            'checkpoint': str(payload['checkpoint']),
        }
        if not len(history):
            return data, f"No training steps run; checkpoint {data['checkpoint']}"
        text = (f"Trained {data['steps']} steps; last-10% reproduction {data['final_reproduction']:.4f}, "
                f"KL {data['final_kl']:.4f}\nCheckpoint: {data['checkpoint']}")
        return data, text
