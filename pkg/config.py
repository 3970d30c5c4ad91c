import dataclasses
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

from dotenv import dotenv_values, load_dotenv

from exceptions import ConfigError

logger = logging.getLogger(__name__)

PACKAGE_DIR = Path(__file__).resolve().parent
DATA_DIR = PACKAGE_DIR / 'data'
GRAMMAR_DIR = PACKAGE_DIR / 'grammars'

DEFAULT_TEMPLATE_FILE = DATA_DIR / 'chord_templates.json'
DEFAULT_INSTRUMENT_FILE = DATA_DIR / 'instruments.json'
DEFAULT_RUBRIC_FILE = DATA_DIR / 'rubric_weights.json'
DEFAULT_GRAMMAR_FILE = GRAMMAR_DIR / 'default.tgg'

BIN_POLICIES = ('half', 'one', 'two', 'auto')


def load_environment() -> Dict[str, Any]:
    """Load environment variables and return the runtime settings"""
    load_dotenv()

    workers = os.getenv('POPCOMPOSER_WORKERS', '1')
    try:
        n_workers = int(workers)
    except ValueError:
        raise ConfigError(f"POPCOMPOSER_WORKERS must be an integer, got {workers!r}")
    if n_workers == 0 or n_workers < -1:
        raise ConfigError("POPCOMPOSER_WORKERS must be positive or -1 (all cores)")

    return {
        'workers': n_workers,
        'log_level': os.getenv('POPCOMPOSER_LOG_LEVEL', 'INFO').upper(),
    }


def configure_logging(level: str = 'INFO'):
    """Configure logging settings"""
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )

    # mido logs every unknown meta message it meets
    logging.getLogger('mido').setLevel(logging.WARNING)
    logging.getLogger('joblib').setLevel(logging.WARNING)


@dataclass
class CvaeConfig:
    """Hyperparameters of the conditional variational recurrent autoencoder.

    Defaults are desk-scale; the full-scale network uses 12 layers per coder,
    600 hidden units and an 800-dimensional latent space.
    """
    latent_dim: int = 16
    hidden_dim: int = 64
    recurrent_layers_per_coder: int = 6
    residual_injection_period: int = 3
    aggregation_dim: int = 64
    n_measures: int = 8
    warmup_midpoint_steps: int = 2000
    warmup_steepness: float = 400.0
    learning_rate: float = 0.002
    momentum: float = 0.9
    clip_norm: float = 5.0
    batch_size: int = 4
    steps: int = 20000
    seed: int = 0

    def __post_init__(self):
        if self.latent_dim < 1:
            raise ConfigError("latent_dim must be at least 1")
        if self.residual_injection_period < 1:
            raise ConfigError("residual_injection_period must be at least 1")
        if self.recurrent_layers_per_coder < 1 or self.hidden_dim < 1:
            raise ConfigError("recurrent_layers_per_coder and hidden_dim must be positive")
        if self.n_measures < 1 or self.batch_size < 1:
            raise ConfigError("n_measures and batch_size must be positive")
        if self.warmup_steepness <= 0:
            raise ConfigError("warmup_steepness must be positive")

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any]) -> 'CvaeConfig':
        return cls(**_coerce_fields(cls, values))

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)


@dataclass
class PipelineConfig:
    """Everything one run of the pipeline depends on"""
    corpus_dir: Optional[Path] = None
    dataset: Optional[Path] = None
    checkpoint: Optional[Path] = None
    grammar_file: Path = DEFAULT_GRAMMAR_FILE
    template_file: Path = DEFAULT_TEMPLATE_FILE
    instrument_file: Path = DEFAULT_INSTRUMENT_FILE
    rubric_weights_file: Path = DEFAULT_RUBRIC_FILE
    bin_policy: str = 'auto'
    exclude_melody: bool = False
    seed: int = 0
    grammar_seed: int = 0
    latent_seed: int = 0
    sigma: float = 0.2
    cvae: CvaeConfig = field(default_factory=CvaeConfig)

    def validate(self):
        """Check option values and that every referenced input file exists"""
        if self.bin_policy not in BIN_POLICIES:
            raise ConfigError(f"Unsupported bin policy: {self.bin_policy}")
        if self.sigma < 0:
            raise ConfigError("sigma must be non-negative")
        for name in ('grammar_file', 'template_file', 'instrument_file', 'rubric_weights_file'):
            path = getattr(self, name)
            if not Path(path).is_file():
                raise ConfigError(f"{name} does not exist: {path}")
        if self.corpus_dir is not None and not Path(self.corpus_dir).is_dir():
            raise ConfigError(f"corpus_dir does not exist: {self.corpus_dir}")
        return self

    def provenance(self) -> Dict[str, Any]:
        """Seeds and config hash embedded in every artifact"""
        return {
            'seed': self.seed,
            'grammar_seed': self.grammar_seed,
            'latent_seed': self.latent_seed,
            'sigma': self.sigma,
            'config_hash': config_hash(self.to_dict()),
        }

    def to_dict(self) -> Dict[str, Any]:
        values = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, CvaeConfig):
                value = value.to_dict()
            elif isinstance(value, Path):
                value = str(value)
            values[f.name] = value
        return values


def load_pipeline_config(path: Optional[os.PathLike] = None,
                         overrides: Optional[Mapping[str, Any]] = None) -> PipelineConfig:
    """Read a KEY=value config file; keys prefixed ``cvae_`` configure the network"""
    values: Dict[str, Any] = {}
    if path is not None:
        if not Path(path).is_file():
            raise ConfigError(f"Config file not found: {path}")
        try:
            values.update({k.lower(): v for k, v in dotenv_values(path).items() if v is not None})
        except Exception as e:
            logger.error(f"Error reading config file: {str(e)}")
            raise ConfigError(f"Error reading config file {path}: {str(e)}")
    if overrides:
        values.update({k: v for k, v in overrides.items() if v is not None})

    cvae_values = {k[len('cvae_'):]: v for k, v in values.items() if k.startswith('cvae_')}
    pipeline_values = {k: v for k, v in values.items() if not k.startswith('cvae_')}
    unknown = set(pipeline_values) - {f.name for f in dataclasses.fields(PipelineConfig)}
    if unknown:
        raise ConfigError(f"Unknown config keys: {sorted(unknown)}")
    pipeline_values.pop('cvae', None)

    try:
        config = PipelineConfig(
            cvae=CvaeConfig.from_mapping(cvae_values),
            **_coerce_fields(PipelineConfig, pipeline_values)
        )
    except TypeError as e:
        raise ConfigError(f"Invalid configuration: {str(e)}")
    return config.validate()


def config_hash(values: Mapping[str, Any]) -> str:
    """SHA-256 over the canonical JSON form of a config mapping"""
    canonical = json.dumps(values, sort_keys=True, default=str, separators=(',', ':'))
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()


def _coerce_fields(cls, values: Mapping[str, Any]) -> Dict[str, Any]:
    """Cast text values from a config file to the dataclass field types"""
    types = {f.name: f.type for f in dataclasses.fields(cls)}
    coerced = {}
    for key, value in values.items():
        if key not in types:
            raise ConfigError(f"Unknown {cls.__name__} key: {key}")
        try:
            coerced[key] = _coerce(types[key], value)
        except ValueError:
            raise ConfigError(f"Invalid value for {key}: {value!r}")
    return coerced


def _coerce(kind: Any, value: Any) -> Any:
    if not isinstance(value, str):
        return value
    if kind is bool:
        if value.strip().lower() in ('1', 'true', 'yes', 'on'):
            return True
        if value.strip().lower() in ('0', 'false', 'no', 'off'):
            return False
        raise ValueError(value)
    if kind is int:
        return int(value)
    if kind is float:
        return float(value)
    if 'Path' in str(kind):
        return Path(value)
    return value
