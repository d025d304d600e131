"""Build per-class memory banks from volumes.

Each :py:class:`ClassDatasetManifest` lists the volumes of one class. Every volume is run through
the frozen encoder with all layers dense, and the keys and values at each memorizing layer are
stored together with the volume's fingerprint as one bank entry. Entries are written in manifest
order, so identical inputs always produce byte-identical bank files.

**Manifest format** (JSON; relative paths are resolved against the manifest's directory)::

    {
      "class_id": 7,
      "label": "liver",
      "volume_paths": ["liver_000.vol", "liver_001.vol"],
      "encoder": "liver_encoder.bin"
    }

``encoder`` is optional; without it, the run's shared encoder weights are used.

**Example**::

    >>> from memattn import build_all, load_manifest, load_encoder_weights
    >>> weights = load_encoder_weights('encoder.bin')
    >>> reports = build_all([load_manifest('liver.json')], weights, 'banks/')

**Main classes and functions:**

.. autosummary::
    :nosignatures:

    ClassDatasetManifest
    BuildReport
    load_manifest
    build_bank
    build_all
"""

from concurrent.futures import ThreadPoolExecutor
from hashlib import sha256
from logging import getLogger
from pathlib import Path
from time import perf_counter
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

from attr import define, field, frozen

from .bank import SOURCE_ID_SIZE, BankHeader, MemoryEntry, write_bank
from .console import get_multi_progress
from .constants import BANK_SUFFIX, PathOrStr
from .encoder import EncoderConfig, EncoderWeights, encode, load_encoder_weights
from .exceptions import BuildError, ConfigurationError, MemattnError
from .fileio import read_json, write_json
from .volume import read_volume

MAX_CLASS_ID = 2**32 - 1
MANIFEST_KEYS = {'class_id', 'label', 'volume_paths', 'encoder'}

Skipped = Tuple[str, str]
Captured = Union[MemoryEntry, Skipped]

logger = getLogger(__name__)


def _check_class_id(instance, attribute, value):
    if not 0 <= value <= MAX_CLASS_ID:
        raise ConfigurationError(f'class_id must be an unsigned 32-bit integer, got {value}')


def _to_paths(paths: Sequence[PathOrStr]) -> List[Path]:
    return [Path(p).expanduser() for p in paths]


@frozen
class ClassDatasetManifest:
    """The volumes of one class"""

    class_id: int = field(converter=int, validator=_check_class_id)
    volume_paths: List[Path] = field(converter=_to_paths)
    label: str = field(default='')
    encoder: Optional[Path] = field(default=None)

    def __attrs_post_init__(self):
        if not self.volume_paths:
            raise ConfigurationError(f'Manifest for class {self.class_id} lists no volumes')

    @property
    def name(self) -> str:
        return self.label or f'class {self.class_id}'


@define
class BuildReport:
    """Outcome of building one class bank"""

    class_id: int = field()
    bank_path: Optional[Path] = field(default=None)
    label: str = field(default='')
    entries_written: int = field(default=0)
    skipped: List[Skipped] = field(factory=list)
    wall_time: float = field(default=0.0)
    error: Optional[str] = field(default=None)

    @property
    def ok(self) -> bool:
        return self.error is None and self.entries_written > 0

    def to_dict(self) -> Dict[str, Any]:
        return {
            'class_id': self.class_id,
            'label': self.label,
            'bank_path': str(self.bank_path) if self.bank_path else None,
            'entries_written': self.entries_written,
            'skipped': [{'path': path, 'reason': reason} for path, reason in self.skipped],
            'wall_time': round(self.wall_time, 6),
            'error': self.error,
        }


def load_manifest(path: PathOrStr) -> ClassDatasetManifest:
    """Load a class manifest from a JSON file"""
    path = Path(path).expanduser()
    if not path.is_file():
        raise ConfigurationError(f'Manifest not found: {path}')
    data = read_json(path)
    if not isinstance(data, dict):
        raise ConfigurationError(f'{path}: manifest must be a JSON object')
    unknown = set(data) - MANIFEST_KEYS
    if unknown:
        raise ConfigurationError(f'{path}: unknown manifest keys {sorted(unknown)}')
    try:
        encoder = data.get('encoder')
        return ClassDatasetManifest(
            class_id=data['class_id'],
            label=data.get('label', ''),
            volume_paths=[path.parent / p for p in data['volume_paths']],
            encoder=path.parent / encoder if encoder else None,
        )
    except KeyError as e:
        raise ConfigurationError(f'{path}: missing manifest key {e}') from e
    except (TypeError, ValueError) as e:
        raise ConfigurationError(f'{path}: {e}') from e


def source_id(path: PathOrStr) -> bytes:
    """Stable 16-byte provenance id for a source file path"""
    return sha256(str(path).encode('utf-8')).digest()[:SOURCE_ID_SIZE]


def bank_header(cfg: EncoderConfig) -> BankHeader:
    """Bank geometry for entries captured from an encoder"""
    if not cfg.memorizing_layers:
        raise ConfigurationError('Encoder config has no memorizing layers to capture')
    return BankHeader(
        fingerprint_dim=cfg.d_model,
        layer_ids=cfg.memorizing_layers,
        n_tokens=cfg.n_tokens,
        num_heads=cfg.num_heads,
        d_model=cfg.d_model,
    )


def capture_entry(
    path: Path, class_id: int, weights: EncoderWeights, cfg: EncoderConfig
) -> Captured:
    """Encode one volume densely and capture its bank entry, or return ``(path, reason)`` if the
    volume can't be used
    """
    try:
        result = encode(read_volume(path), cfg, weights)
    except (OSError, MemattnError) as e:
        logger.warning(f'Skipping {path}: {e}')
        return str(path), str(e)
    if result.fingerprint.degenerate:
        logger.warning(f'Skipping {path}: degenerate fingerprint')
        return str(path), 'degenerate fingerprint'

    layers = {
        layer_id: (result.activations[layer_id].keys, result.activations[layer_id].values)
        for layer_id in cfg.memorizing_layers
    }
    return MemoryEntry(
        fingerprint=result.fingerprint.vector,
        layers=layers,
        class_id=class_id,
        source_id=source_id(path),
    )


def build_bank(
    manifest: ClassDatasetManifest,
    encoder_weights: EncoderWeights,
    cfg: Optional[EncoderConfig] = None,
    out_path: Optional[PathOrStr] = None,
    workers: int = 1,
    on_volume: Optional[Callable[[], None]] = None,
) -> BuildReport:
    """Build a bank for one class.

    Volumes that can't be read or encoded, or that have a degenerate fingerprint, are skipped and
    listed in the report. Encoding may run in parallel threads, but entries are always written in
    manifest order.

    Args:
        manifest: Class volumes
        encoder_weights: Frozen encoder weights
        cfg: Encoder config; defaults to the config stored with the weights
        out_path: Bank file to write; defaults to ``class_<id>.msb`` in the current directory
        workers: Number of volumes to encode in parallel
        on_volume: Called once per volume processed, for progress reporting

    Raises:
        :py:exc:`.BuildError` if no entries were written
    """
    cfg = cfg or encoder_weights.config
    out_path = Path(out_path or f'class_{manifest.class_id}{BANK_SUFFIX}').expanduser()
    header = bank_header(cfg)
    report = BuildReport(class_id=manifest.class_id, label=manifest.label, bank_path=out_path)
    start = perf_counter()
    logger.info(f'Building bank for {manifest.name} from {len(manifest.volume_paths)} volumes')

    def capture(path: Path) -> Captured:
        captured = capture_entry(path, manifest.class_id, encoder_weights, cfg)
        if on_volume:
            on_volume()
        return captured

    def iter_entries(results: Iterator[Captured]) -> Iterator[MemoryEntry]:
        for captured in results:
            if isinstance(captured, MemoryEntry):
                yield captured
            else:
                report.skipped.append(captured)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            written = write_bank(
                iter_entries(executor.map(capture, manifest.volume_paths)), header, out_path
            )
    else:
        written = write_bank(iter_entries(map(capture, manifest.volume_paths)), header, out_path)

    report.entries_written = written.entry_count
    report.wall_time = perf_counter() - start
    if report.entries_written == 0:
        out_path.unlink(missing_ok=True)
        raise BuildError(
            f'No entries written for {manifest.name}: all {len(report.skipped)} volumes skipped',
            report=report,
        )
    logger.info(
        f'Built {out_path} with {report.entries_written} entries '
        f'({len(report.skipped)} skipped) in {report.wall_time:.2f}s'
    )
    return report


def build_all(
    manifests: Sequence[ClassDatasetManifest],
    encoder_weights: EncoderWeights,
    out_dir: PathOrStr,
    cfg: Optional[EncoderConfig] = None,
    workers: int = 1,
    progress_bars: bool = False,
) -> List[BuildReport]:
    """Build one bank per class, named ``class_<id>.msb`` in ``out_dir``.

    Classes are built independently: a failure in one is recorded in its report and the others
    still run. A manifest that names its own ``encoder`` file uses those weights and their
    config instead of the shared ones.

    Raises:
        :py:exc:`.ConfigurationError` if any class id appears more than once
    """
    class_ids = [m.class_id for m in manifests]
    duplicates = sorted({i for i in class_ids if class_ids.count(i) > 1})
    if duplicates:
        raise ConfigurationError(f'Duplicate class ids in manifests: {duplicates}')

    out_dir = Path(out_dir).expanduser()
    reports = []
    totals = {m.name: len(m.volume_paths) for m in manifests}
    with get_multi_progress(totals, enabled=progress_bars) as progress:
        for manifest in manifests:
            progress.start_job(manifest.name)
            out_path = out_dir / f'class_{manifest.class_id}{BANK_SUFFIX}'
            try:
                if manifest.encoder:
                    weights = load_encoder_weights(manifest.encoder)
                    class_cfg = weights.config
                else:
                    weights, class_cfg = encoder_weights, cfg or encoder_weights.config
                report = build_bank(
                    manifest, weights, class_cfg, out_path, workers, on_volume=progress.advance
                )
            except BuildError as e:
                logger.error(str(e))
                report = e.report
                report.error = str(e)
                report.bank_path = None
            except (MemattnError, OSError) as e:
                logger.error(f'Failed to build bank for {manifest.name}: {e}')
                report = BuildReport(
                    class_id=manifest.class_id,
                    label=manifest.label,
                    bank_path=None,
                    error=str(e),
                )
            reports.append(report)

    total = sum(r.entries_written for r in reports)
    logger.info(f'Built {sum(r.ok for r in reports)}/{len(reports)} banks with {total} entries')
    return reports


def write_reports(reports: Sequence[BuildReport], path: PathOrStr):
    """Save build reports as JSON"""
    write_json([r.to_dict() for r in reports], path)
