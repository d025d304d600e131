"""Command-line interface.

Commands:

* ``init-encoder``: Create seeded encoder weights
* ``synth``: Write synthetic class volumes and one manifest per class
* ``build-bank``: Build memory banks from class manifests
* ``infer``: Encode one volume, optionally retrieving from banks
* ``bench``: Measure dense and memorizing inference cost
* ``ablate``: Compare outputs and latency over several values of ``k``
* ``inspect-bank``: Show bank geometry, per-class counts, and I/O stats
* ``merge-banks``: Concatenate banks with identical geometry

Exit codes: 0 on success, 1 on runtime failures, 2 on configuration or validation errors.

**Example**::

    $ memattn init-encoder --out encoder.bin --seed 42
    $ memattn synth --out-dir data --classes 3 --per-class 8
    $ memattn build-bank --manifest data/class_0.json --manifest data/class_1.json \\
        --encoder encoder.bin --out-dir banks
    $ memattn infer --input data/class_0/vol_000.vol --bank banks/class_0.msb --k 3 \\
        --encoder encoder.bin --output features.f32
"""

import json
import sys
from argparse import ArgumentParser, Namespace
from logging import getLogger
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from attr import evolve
from rich import print
from rich.console import Console
from rich.table import Table

from .bank import merge_banks, open_bank, open_banks
from .bench import (
    BenchMode,
    run_ablation,
    run_efficiency,
    write_ablation_csv,
    write_efficiency_json,
)
from .builder import build_all, build_bank, load_manifest, write_reports
from .config import RunConfig, resolve_config
from .console import enable_logging
from .constants import BANK_SUFFIX, DEFAULT_ABLATION_K_VALUES, VOLUME_SUFFIX
from .encoder import (
    EncoderConfig,
    encode,
    init_encoder_weights,
    load_encoder_weights,
    save_encoder_weights,
    save_features,
)
from .exceptions import (
    BankIncompatibleError,
    ConfigurationError,
    FormatError,
    MemattnError,
    SchemaError,
)
from .fileio import write_json
from .memory import FusionMode
from .volume import Volume, read_volume, synthetic_volume, write_volume

# Errors caused by inputs or settings, rather than by a failure while running
CONFIG_ERRORS = (
    ConfigurationError,
    BankIncompatibleError,
    FormatError,
    SchemaError,
    FileNotFoundError,
)

err_console = Console(stderr=True, soft_wrap=True)
logger = getLogger(__name__)


def _int_list(value: str) -> List[int]:
    return [int(v) for v in value.split(',') if v.strip()]


def _path_list(value: str) -> List[str]:
    return [v for v in value.split(',') if v.strip()]


def build_arg_parser() -> ArgumentParser:
    common = ArgumentParser(add_help=False)
    common.add_argument('-v', '--verbose', action='store_true', help='Show debug logging')
    common.add_argument('--config', help='JSON config file')
    common.add_argument('--encoder', help='Encoder weights file')
    common.add_argument('--seed', type=int, help='Seed for encoder initialization')

    block = ArgumentParser(add_help=False)
    block.add_argument(
        '--bank',
        dest='banks',
        action='append',
        type=_path_list,
        help='Bank file(s), comma-separated',
    )
    block.add_argument('--k', type=int, help='Number of memories to retrieve')
    block.add_argument('--r-local', type=float, help='Ratio applied to local attention')
    block.add_argument('--fusion', choices=[m.value for m in FusionMode], help='Fusion rule')
    block.add_argument('--epsilon', type=float, help='Lower clamp for kNN distances')
    block.add_argument('--cache-capacity', type=int, help='Decoded payloads kept in memory')

    parser = ArgumentParser(prog='memattn', description='Memorizing attention engine')
    subparsers = parser.add_subparsers(dest='command', required=True)

    cmd = subparsers.add_parser('init-encoder', parents=[common], help='Create encoder weights')
    cmd.add_argument('--out', required=True, help='Output weights file')
    cmd.add_argument('--memorizing-layers', type=_int_list, help='Comma-separated layer indices')
    cmd.set_defaults(func=cmd_init_encoder)

    cmd = subparsers.add_parser('synth', parents=[common], help='Write synthetic volumes')
    cmd.add_argument('--out-dir', required=True, help='Output directory')
    cmd.add_argument('--classes', type=int, default=3, help='Number of classes')
    cmd.add_argument('--per-class', type=int, default=8, help='Volumes per class')
    cmd.add_argument('--dims', type=_int_list, help='Volume dims as D,H,W')
    cmd.add_argument('--format', choices=['vol', 'f32'], default='vol', help='Volume file format')
    cmd.set_defaults(func=cmd_synth)

    cmd = subparsers.add_parser('build-bank', parents=[common], help='Build memory banks')
    cmd.add_argument('--manifest', action='append', required=True, help='Class manifest (JSON)')
    cmd.add_argument('--out', help='Output bank file (single manifest only)')
    cmd.add_argument('--out-dir', help='Output directory for class_<id>.msb files')
    cmd.add_argument('--report', help='Also write build reports to this JSON file')
    cmd.add_argument('--workers', type=int, help='Volumes to encode in parallel')
    cmd.add_argument('--no-progress', action='store_true', help="Don't show progress bars")
    cmd.set_defaults(func=cmd_build_bank)

    cmd = subparsers.add_parser('infer', parents=[common, block], help='Encode one volume')
    cmd.add_argument('--input', required=True, help='Input volume')
    cmd.add_argument('--output', required=True, help='Output feature file (.f32)')
    cmd.add_argument('--dense', action='store_true', help='Disable retrieval (k=0)')
    cmd.set_defaults(func=cmd_infer)

    cmd = subparsers.add_parser('bench', parents=[common, block], help='Measure inference cost')
    cmd.add_argument('--input', nargs='+', required=True, help='Input volumes')
    cmd.add_argument(
        '--mode', choices=['dense', 'memorizing', 'both'], default='both', help='Modes to run'
    )
    cmd.add_argument('--repetitions', type=int, default=5, help='Timed passes over all inputs')
    cmd.add_argument('--warmup', type=int, default=1, help='Untimed passes over all inputs')
    cmd.add_argument('--json', dest='json_out', help='Also write reports to this JSON file')
    cmd.set_defaults(func=cmd_bench)

    cmd = subparsers.add_parser('ablate', parents=[common, block], help='Ablate over k')
    cmd.add_argument('--input', nargs='+', required=True, help='Input volumes')
    cmd.add_argument(
        '--k-values',
        type=_int_list,
        default=DEFAULT_ABLATION_K_VALUES,
        help='Comma-separated values of k',
    )
    cmd.add_argument('--out', help='Output CSV file (default: stdout)')
    cmd.add_argument('--repetitions', type=int, default=1, help='Timed passes per row')
    cmd.add_argument(
        '--allow-clamp', action='store_true', help='Allow k values larger than the bank'
    )
    cmd.set_defaults(func=cmd_ablate)

    cmd = subparsers.add_parser('inspect-bank', parents=[common], help='Show bank contents')
    cmd.add_argument('bank', help='Bank file')
    cmd.add_argument('--json', action='store_true', help='Print stats as JSON')
    cmd.set_defaults(func=cmd_inspect_bank)

    cmd = subparsers.add_parser('merge-banks', parents=[common], help='Concatenate banks')
    cmd.add_argument('inputs', nargs='+', help='Bank files, in merge order')
    cmd.add_argument('--out', required=True, help='Output bank file')
    cmd.set_defaults(func=cmd_merge_banks)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run the CLI and return an exit code"""
    args = build_arg_parser().parse_args(argv)
    if args.verbose:
        enable_logging('DEBUG')
    else:
        enable_logging('INFO')

    try:
        return args.func(args)
    except CONFIG_ERRORS as e:
        err_console.print(f'[red]Error:[/red] {e}', markup=True, highlight=False)
        return 2
    except (MemattnError, OSError) as e:
        err_console.print(f'[red]Failed:[/red] {e}', markup=True, highlight=False)
        return 1


def cli():
    sys.exit(main())


def _resolve(args: Namespace, **extra) -> RunConfig:
    """Resolve and echo the run config from the config file, environment, and flags"""
    banks = getattr(args, 'banks', None)
    overrides: Dict[str, Any] = {
        'encoder': args.encoder,
        'seed': args.seed,
        'k': getattr(args, 'k', None),
        'r_local': getattr(args, 'r_local', None),
        'fusion_mode': getattr(args, 'fusion', None),
        'epsilon': getattr(args, 'epsilon', None),
        'cache_capacity': getattr(args, 'cache_capacity', None),
        'banks': [p for group in banks for p in group] if banks else None,
        **extra,
    }
    config = resolve_config(args.config, overrides)
    err_console.print(f'[cyan]Config:[/cyan] {json.dumps(config.to_dict())}', highlight=False)
    return config


def _read_inputs(paths: Sequence[str], cfg: EncoderConfig) -> List[Volume]:
    """Read input volumes, checking that they exist and match the encoder geometry"""
    missing = [p for p in paths if not Path(p).expanduser().is_file()]
    if missing:
        raise ConfigurationError(f'Input volume not found: {", ".join(missing)}')
    volumes = [read_volume(p) for p in paths]
    for path, volume in zip(paths, volumes):
        if volume.dims != cfg.volume_dims:
            raise ConfigurationError(
                f'{path}: dims {volume.dims} do not match encoder volume_dims {cfg.volume_dims}'
            )
    return volumes


def _write_stdout(text: str):
    sys.stdout.write(text if text.endswith('\n') else text + '\n')


def cmd_init_encoder(args: Namespace) -> int:
    cfg = _resolve(args).encoder_cfg
    if args.memorizing_layers is not None:
        cfg = evolve(cfg, memorizing_layers=args.memorizing_layers)
    weights = init_encoder_weights(cfg)
    save_encoder_weights(weights, args.out)
    print(f'[cyan]Wrote encoder weights[/cyan] ({weights.num_params} params) to {args.out}')
    return 0


def cmd_synth(args: Namespace) -> int:
    config = _resolve(args)
    dims = tuple(args.dims) if args.dims else config.encoder_cfg.volume_dims
    out_dir = Path(args.out_dir).expanduser()
    suffix = VOLUME_SUFFIX if args.format == 'vol' else '.f32'
    for class_id in range(args.classes):
        paths = []
        for i in range(args.per_class):
            seed = config.seed + class_id * args.per_class + i
            relative = Path(f'class_{class_id}') / f'vol_{i:03d}{suffix}'
            write_volume(synthetic_volume(dims, seed, class_id), out_dir / relative)
            paths.append(str(relative))
        write_json(
            {'class_id': class_id, 'label': f'class_{class_id}', 'volume_paths': paths},
            out_dir / f'class_{class_id}.json',
        )
    print(f'[cyan]Wrote {args.classes} classes × {args.per_class} volumes to[/cyan] {out_dir}')
    return 0


def cmd_build_bank(args: Namespace) -> int:
    config = _resolve(args, workers=args.workers)
    if args.out and len(args.manifest) > 1:
        raise ConfigurationError('--out accepts a single manifest; use --out-dir for several')
    manifests = [load_manifest(m) for m in args.manifest]
    weights = config.load_weights()

    if args.out:
        manifest = manifests[0]
        if manifest.encoder:
            weights = load_encoder_weights(manifest.encoder)
        reports = [build_bank(manifest, weights, out_path=args.out, workers=config.workers)]
    else:
        reports = build_all(
            manifests,
            weights,
            args.out_dir or '.',
            workers=config.workers,
            progress_bars=not args.no_progress,
        )

    _write_stdout(json.dumps([r.to_dict() for r in reports], indent=2))
    if args.report:
        write_reports(reports, args.report)
    return 0 if all(r.ok for r in reports) else 1


def cmd_infer(args: Namespace) -> int:
    config = _resolve(args, k=0 if args.dense else getattr(args, 'k', None))
    if not args.dense:
        config.require_banks()
    weights = config.load_weights()
    (volume,) = _read_inputs([args.input], weights.config)
    cfg = weights.config
    block_cfg = config.block_config()

    if args.dense or not config.banks:
        result = encode(volume, cfg, weights, None, block_cfg)
    else:
        with open_banks(config.banks, config.cache_capacity) as bank:
            result = encode(volume, cfg, weights, bank, block_cfg)

    neighbors = [{'entry_id': i, 'distance': d} for i, d in result.neighbors]
    save_features(result.features, args.output, {'neighbors': neighbors})
    print(f'[cyan]Wrote features[/cyan] {list(result.features.shape)} to {args.output}')
    return 0


def cmd_bench(args: Namespace) -> int:
    config = _resolve(args)
    weights = config.load_weights()
    volumes = _read_inputs(args.input, weights.config)
    modes = ['dense', 'memorizing'] if args.mode == 'both' else [args.mode]
    if 'memorizing' in modes:
        config.require_banks()

    reports = [
        run_efficiency(
            volumes,
            weights.config,
            weights,
            mode=BenchMode(mode),
            bank_paths=config.banks,
            block_cfg=config.block_config(),
            repetitions=args.repetitions,
            warmup=args.warmup,
            cache_capacity=config.cache_capacity,
        )
        for mode in modes
    ]

    table = Table('Metric', *[r.mode.value for r in reports], title='Efficiency')
    for key in reports[0].to_dict():
        if key != 'mode':
            table.add_row(key, *[str(r.to_dict()[key]) for r in reports])
    err_console.print(table)
    _write_stdout(json.dumps([r.to_dict() for r in reports], indent=2))
    if args.json_out:
        write_efficiency_json(reports, args.json_out)
    return 0


def cmd_ablate(args: Namespace) -> int:
    config = _resolve(args)
    if not config.banks:
        raise ConfigurationError('ablate requires at least one bank (--bank)')
    config.require_banks()
    weights = config.load_weights()
    volumes = _read_inputs(args.input, weights.config)

    with open_banks(config.banks, config.cache_capacity) as bank:
        largest_k = max(args.k_values, default=0)
        if not args.allow_clamp and bank.entry_count < largest_k:
            raise ConfigurationError(
                f'Bank has {bank.entry_count} entries, fewer than the largest k ({largest_k}); '
                'use --allow-clamp to clamp retrieval to the bank size'
            )
        result = run_ablation(
            volumes,
            weights.config,
            weights,
            bank,
            k_values=args.k_values,
            block_cfg=config.block_config(),
            repetitions=args.repetitions,
            strict=not args.allow_clamp,
        )

    err_console.print(f'[cyan]Dense checksum:[/cyan] {result.dense_checksum}', highlight=False)
    if args.out:
        write_ablation_csv(result.rows, args.out)
    else:
        _write_stdout(result.to_dataset().export('csv'))
    return 0


def cmd_inspect_bank(args: Namespace) -> int:
    if not Path(args.bank).expanduser().is_file():
        raise ConfigurationError(f'Bank file not found: {args.bank}')
    with open_bank(args.bank) as bank:
        stats = bank.stats()

    if args.json:
        _write_stdout(json.dumps(stats, indent=2))
        return 0

    table = Table('Field', 'Value', title=str(args.bank))
    for key, value in stats.items():
        if key != 'class_counts':
            table.add_row(key, str(value))
    print(table)
    counts = Table('Class', 'Entries', title='Entries per class')
    for class_id, count in stats['class_counts'].items():
        counts.add_row(str(class_id), str(count))
    print(counts)
    return 0


def cmd_merge_banks(args: Namespace) -> int:
    missing = [p for p in args.inputs if not Path(p).expanduser().is_file()]
    if missing:
        raise ConfigurationError(f'Bank file not found: {", ".join(missing)}')
    out = args.out if Path(args.out).suffix else f'{args.out}{BANK_SUFFIX}'
    header = merge_banks(args.inputs, out)
    print(f'[cyan]Merged {len(args.inputs)} banks[/cyan] ({header.entry_count} entries) into {out}')
    return 0


if __name__ == '__main__':
    cli()
