"""Run configuration for the command-line interface.

Settings are resolved in this order, with later sources taking precedence:

1. Built-in defaults
2. A JSON config file (``--config path.json``)
3. Environment variables (``MEMATTN_CACHE_CAP``)
4. Command-line flags

Example config file::

    {
      "r_local": 0.3,
      "k": 3,
      "fusion_mode": "normalized-inverse-distance",
      "banks": ["banks/class_1.msb", "banks/class_2.msb"],
      "encoder": "encoder.bin",
      "encoder_config": {"volume_dims": [32, 32, 32], "memorizing_layers": [2]}
    }
"""

import os
from logging import getLogger
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional

from attr import asdict, define, evolve, field, fields_dict

from .constants import (
    CACHE_CAPACITY_ENV,
    DEFAULT_CACHE_CAPACITY,
    DEFAULT_EPSILON,
    DEFAULT_K,
    DEFAULT_R_LOCAL,
    DEFAULT_SEED,
    PathOrStr,
)
from .encoder import EncoderConfig, EncoderWeights, init_encoder_weights, load_encoder_weights
from .exceptions import ConfigurationError, MemattnError
from .fileio import read_json
from .memory import BlockConfig, FusionMode

logger = getLogger(__name__)


def _to_paths(paths) -> List[Path]:
    if isinstance(paths, (str, Path)):
        paths = [p for p in str(paths).split(',') if p]
    return [Path(p).expanduser() for p in paths]


def _to_optional_path(path) -> Optional[Path]:
    return Path(path).expanduser() if path else None


def _to_encoder_config(value) -> EncoderConfig:
    if isinstance(value, EncoderConfig):
        return value
    return EncoderConfig.from_dict(dict(value or {}))


def _at_least_one(instance, attribute, value):
    if value < 1:
        raise ConfigurationError(f'{attribute.name} must be at least 1, got {value}')


@define
class RunConfig:
    """Fully resolved settings for one CLI run"""

    r_local: float = field(default=DEFAULT_R_LOCAL, converter=float)
    k: int = field(default=DEFAULT_K, converter=int)
    fusion_mode: str = field(default=FusionMode.NORMALIZED_INVERSE_DISTANCE.value)
    epsilon: float = field(default=DEFAULT_EPSILON, converter=float)
    cache_capacity: int = field(
        default=DEFAULT_CACHE_CAPACITY, converter=int, validator=_at_least_one
    )
    banks: List[Path] = field(factory=list, converter=_to_paths)
    encoder: Optional[Path] = field(default=None, converter=_to_optional_path)
    seed: int = field(default=DEFAULT_SEED, converter=int)
    workers: int = field(default=1, converter=int, validator=_at_least_one)
    encoder_config: EncoderConfig = field(factory=EncoderConfig, converter=_to_encoder_config)

    def __attrs_post_init__(self):
        # Validate block settings up front, so errors surface before any work
        self.block_config()

    def block_config(self, **overrides) -> BlockConfig:
        try:
            return BlockConfig(
                r_local=overrides.get('r_local', self.r_local),
                k=overrides.get('k', self.k),
                fusion_mode=self.fusion_mode,
                epsilon=self.epsilon,
            )
        except (MemattnError, ValueError) as e:
            raise ConfigurationError(f'Invalid block config: {e}') from e

    @property
    def encoder_cfg(self) -> EncoderConfig:
        """Encoder geometry, with the run seed applied"""
        return evolve(self.encoder_config, seed=self.seed)

    def require_banks(self):
        if self.k > 0 and not self.banks:
            raise ConfigurationError(
                f'k={self.k} requires at least one bank; pass --bank, or use --dense or --k 0'
            )
        missing = [str(p) for p in self.banks if not p.is_file()]
        if missing:
            raise ConfigurationError(f'Bank file not found: {", ".join(missing)}')

    def load_weights(self) -> EncoderWeights:
        """Load encoder weights from the configured file, or initialize them from the seed"""
        if self.encoder:
            if not self.encoder.is_file():
                raise ConfigurationError(f'Encoder weights not found: {self.encoder}')
            return load_encoder_weights(self.encoder)
        return init_encoder_weights(self.encoder_cfg)

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self, recurse=False)
        d['banks'] = [str(p) for p in self.banks]
        d['encoder'] = str(self.encoder) if self.encoder else None
        d['encoder_config'] = self.encoder_config.to_dict()
        return d


def load_config_file(path: PathOrStr) -> Dict[str, Any]:
    path = Path(path).expanduser()
    if not path.is_file():
        raise ConfigurationError(f'Config file not found: {path}')
    data = read_json(path)
    if not isinstance(data, dict):
        raise ConfigurationError(f'{path}: config must be a JSON object')
    unknown = set(data) - set(fields_dict(RunConfig))
    if unknown:
        raise ConfigurationError(f'{path}: unknown config keys {sorted(unknown)}')
    return data


def resolve_config(
    config_path: Optional[PathOrStr] = None,
    overrides: Optional[Mapping[str, Any]] = None,
    environ: Optional[Mapping[str, str]] = None,
) -> RunConfig:
    """Merge defaults, config file, environment, and flags into a validated :py:class:`RunConfig`

    Args:
        config_path: Optional JSON config file
        overrides: Values from command-line flags; ``None`` values are ignored
        environ: Environment variables (defaults to ``os.environ``)
    """
    environ = os.environ if environ is None else environ
    settings: Dict[str, Any] = {}
    if config_path:
        settings.update(load_config_file(config_path))

    if environ.get(CACHE_CAPACITY_ENV):
        try:
            settings['cache_capacity'] = int(environ[CACHE_CAPACITY_ENV])
        except ValueError:
            raise ConfigurationError(
                f'{CACHE_CAPACITY_ENV} must be an integer, got {environ[CACHE_CAPACITY_ENV]!r}'
            ) from None

    settings.update({k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        config = RunConfig(**settings)
    except ConfigurationError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigurationError(f'Invalid configuration: {e}') from e
    logger.debug(f'Resolved config: {config.to_dict()}')
    return config
