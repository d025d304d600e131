"""A small volumetric ViT image encoder with plug-in slots for memorizing blocks.

A volume is cut into non-overlapping ``p×p×p`` patches, each patch is linearly projected to
``d_model`` and summed with a fixed sinusoidal 3D positional encoding, and the resulting tokens
pass through ``num_layers`` pre-norm Transformer blocks. Layers listed in
``EncoderConfig.memorizing_layers`` run as memorizing blocks when a bank is supplied.

The retrieval fingerprint is the mean of the patch embeddings, L2-normalized. It's computed once
per volume, so one kNN search serves every memorizing layer.

**Example**::

    >>> from memattn import EncoderConfig, encode, init_encoder_weights, synthetic_volume
    >>> cfg = EncoderConfig(volume_dims=(16, 16, 16), num_layers=2)
    >>> weights = init_encoder_weights(cfg)
    >>> result = encode(synthetic_volume(cfg.volume_dims, seed=1), cfg, weights)
    >>> result.features.shape
    (8, 64)

**Main classes and functions:**

.. autosummary::
    :nosignatures:

    EncoderConfig
    EncoderWeights
    EncodeResult
    Fingerprint
    patch_embed
    positional_encoding
    fingerprint
    encode
    init_encoder_weights
    save_encoder_weights
    load_encoder_weights
    save_features
"""

import struct
import zlib
from logging import getLogger
from pathlib import Path
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from attr import asdict, define, field, frozen

from .attention import BlockActivations, BlockParams, transformer_block
from .bank import AnyBank, BankHeader, Neighbor
from .constants import (
    DEFAULT_D_FF,
    DEFAULT_D_MODEL,
    DEFAULT_INIT_STD,
    DEFAULT_MEMORIZING_LAYERS,
    DEFAULT_NUM_HEADS,
    DEFAULT_NUM_LAYERS,
    DEFAULT_PATCH_SIZE,
    DEFAULT_SEED,
    DEFAULT_VOLUME_DIMS,
    ENCODER_MAGIC,
    ENCODER_VERSION,
    FINGERPRINT_EPS,
    Dims,
    PathOrStr,
)
from .exceptions import BankIncompatibleError, ConfigurationError, CorruptionError, DimensionError
from .fileio import (
    atomic_write,
    check_magic,
    check_version,
    pack_u32s,
    read_exact,
    read_json,
    write_json,
)
from .memory import BlockConfig, memorizing_block_forward
from .numerics import MAX_SEED, Prng, Tensor, as_tensor, init_gaussian, l2_normalize, matmul
from .volume import Volume

# magic, version, D, H, W, patch_size, d_model, d_ff, num_heads, num_layers, n_memorizing
WEIGHTS_PREFIX = struct.Struct('<8sI3I6I')
WEIGHTS_SEED = struct.Struct('<Q')
WEIGHTS_CRC = struct.Struct('<I')
POSITIONAL_BASE = 10000.0

logger = getLogger(__name__)


def _positive(instance, attribute, value):
    if value <= 0:
        raise ConfigurationError(f'{attribute.name} must be positive, got {value}')


def _sorted_ints(values: Sequence[int]) -> Tuple[int, ...]:
    return tuple(sorted({int(v) for v in values}))


@frozen
class EncoderConfig:
    """Encoder geometry and weight seed

    Args:
        volume_dims: Input volume shape ``(D, H, W)``
        patch_size: Edge length of cubic patches; must divide each dim
        d_model: Token width
        d_ff: FFN hidden width
        num_heads: Attention heads per block
        num_layers: Number of Transformer blocks
        memorizing_layers: Indices of blocks that retrieve from a bank
        seed: Seed for weight initialization
    """

    volume_dims: Dims = field(
        default=DEFAULT_VOLUME_DIMS, converter=lambda v: tuple(int(d) for d in v)
    )
    patch_size: int = field(default=DEFAULT_PATCH_SIZE, converter=int, validator=_positive)
    d_model: int = field(default=DEFAULT_D_MODEL, converter=int, validator=_positive)
    d_ff: int = field(default=DEFAULT_D_FF, converter=int, validator=_positive)
    num_heads: int = field(default=DEFAULT_NUM_HEADS, converter=int, validator=_positive)
    num_layers: int = field(default=DEFAULT_NUM_LAYERS, converter=int, validator=_positive)
    memorizing_layers: Tuple[int, ...] = field(
        default=DEFAULT_MEMORIZING_LAYERS, converter=_sorted_ints
    )
    seed: int = field(default=DEFAULT_SEED, converter=int)

    def __attrs_post_init__(self):
        if len(self.volume_dims) != 3 or any(d <= 0 for d in self.volume_dims):
            raise ConfigurationError(
                f'volume_dims must be 3 positive integers, got {self.volume_dims}'
            )
        if any(d % self.patch_size for d in self.volume_dims):
            raise ConfigurationError(
                f'patch_size {self.patch_size} does not divide volume_dims {self.volume_dims}'
            )
        if self.d_model % self.num_heads:
            raise ConfigurationError(
                f'd_model {self.d_model} is not divisible by num_heads {self.num_heads}'
            )
        invalid = [i for i in self.memorizing_layers if not 0 <= i < self.num_layers]
        if invalid:
            raise ConfigurationError(
                f'memorizing_layers {invalid} out of range for {self.num_layers} layers'
            )
        if not 0 <= self.seed <= MAX_SEED:
            raise ConfigurationError(f'seed must be an unsigned 64-bit integer, got {self.seed}')

    @property
    def geometry(self) -> tuple:
        """Everything that determines weight shapes"""
        return (
            self.volume_dims,
            self.patch_size,
            self.d_model,
            self.d_ff,
            self.num_heads,
            self.num_layers,
        )

    @property
    def grid(self) -> Dims:
        """Number of patches along each axis"""
        return tuple(d // self.patch_size for d in self.volume_dims)  # type: ignore[return-value]

    @property
    def n_tokens(self) -> int:
        return int(np.prod(self.grid))

    @property
    def patch_volume(self) -> int:
        return self.patch_size**3

    @property
    def embed_params(self) -> int:
        return self.patch_volume * self.d_model + self.d_model

    @property
    def block_params(self) -> int:
        return 4 * self.d_model**2 + 2 * self.d_model * self.d_ff + 4 * self.d_model

    @property
    def num_params(self) -> int:
        """Trainable scalars in the whole encoder. Memorizing layers add none."""
        return self.embed_params + self.num_layers * self.block_params

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        d['volume_dims'] = list(self.volume_dims)
        d['memorizing_layers'] = list(self.memorizing_layers)
        return d

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> 'EncoderConfig':
        unknown = set(d) - {a.name for a in cls.__attrs_attrs__}  # type: ignore[attr-defined]
        if unknown:
            raise ConfigurationError(f'Unknown encoder config keys: {sorted(unknown)}')
        try:
            return cls(**d)
        except (TypeError, ValueError) as e:
            raise ConfigurationError(f'Invalid encoder config: {e}') from e


@define(eq=False)
class EncoderWeights:
    """Frozen encoder weights: patch projection plus one :py:class:`.BlockParams` per layer"""

    config: EncoderConfig = field()
    w_patch: Tensor = field(converter=as_tensor)
    b_patch: Tensor = field(converter=as_tensor)
    blocks: List[BlockParams] = field(factory=list)

    def __attrs_post_init__(self):
        cfg = self.config
        if self.w_patch.shape != (cfg.patch_volume, cfg.d_model):
            raise DimensionError(
                f'w_patch has shape {self.w_patch.shape}, expected '
                f'{(cfg.patch_volume, cfg.d_model)}'
            )
        if self.b_patch.shape != (cfg.d_model,):
            raise DimensionError(
                f'b_patch has shape {self.b_patch.shape}, expected {(cfg.d_model,)}'
            )
        if len(self.blocks) != cfg.num_layers:
            raise DimensionError(f'Got {len(self.blocks)} blocks for {cfg.num_layers} layers')

    @property
    def num_params(self) -> int:
        return self.w_patch.size + self.b_patch.size + sum(b.num_params for b in self.blocks)

    def tensors(self) -> List[Tensor]:
        """All weight tensors in serialization order"""
        tensors = [self.w_patch, self.b_patch]
        for block in self.blocks:
            tensors.extend(block.tensors())
        return tensors


class Fingerprint(NamedTuple):
    """A per-volume retrieval vector. ``degenerate`` is set when the pooled embedding had (near)
    zero norm, in which case ``vector`` is all zeros and retrieval should be skipped.
    """

    vector: np.ndarray
    degenerate: bool


@define(eq=False)
class EncodeResult:
    """Output of :py:func:`encode`"""

    features: Tensor = field()
    activations: List[BlockActivations] = field()
    fingerprint: Fingerprint = field()
    neighbors: List[Neighbor] = field(factory=list)


def init_encoder_weights(cfg: EncoderConfig, std: float = DEFAULT_INIT_STD) -> EncoderWeights:
    """Initialize encoder weights from ``cfg.seed``. The same config always gives bitwise-identical
    weights.
    """
    prng = Prng(cfg.seed)
    w_patch = init_gaussian((cfg.patch_volume, cfg.d_model), prng, std)
    blocks = [
        BlockParams.init(cfg.d_model, cfg.d_ff, cfg.num_heads, prng, std)
        for _ in range(cfg.num_layers)
    ]
    return EncoderWeights(cfg, w_patch, np.zeros(cfg.d_model), blocks)


def positional_encoding(grid: Sequence[int], d_model: int) -> Tensor:
    """Fixed sinusoidal 3D positional encoding, ``[n_tokens×d_model]``.

    Each axis gets ``2·(d_model // 6)`` channels (sines then cosines over geometric frequencies);
    leftover channels are zero.
    """
    n_freq = d_model // 6
    coords = np.indices(tuple(grid)).reshape(3, -1).T.astype(np.float64)
    encoding = np.zeros((coords.shape[0], d_model), dtype=np.float64)
    if n_freq == 0:
        return as_tensor(encoding)
    freqs = 1.0 / POSITIONAL_BASE ** (np.arange(n_freq) / n_freq)
    parts = []
    for axis in range(3):
        angles = coords[:, axis : axis + 1] * freqs
        parts.extend([np.sin(angles), np.cos(angles)])
    encoding[:, : 6 * n_freq] = np.concatenate(parts, axis=1)
    return as_tensor(encoding)


def extract_patches(volume: Volume, patch_size: int) -> Tensor:
    """Flatten non-overlapping cubic patches, in ``(z, y, x)`` grid order: ``[n_tokens×p³]``"""
    p = patch_size
    gd, gh, gw = (d // p for d in volume.dims)
    patches = volume.array.reshape(gd, p, gh, p, gw, p).transpose(0, 2, 4, 1, 3, 5)
    return as_tensor(patches.reshape(gd * gh * gw, p**3))


def patch_embed(
    volume: Volume, cfg: EncoderConfig, weights: EncoderWeights, positional: bool = True
) -> Tensor:
    """Project patches to tokens and add the positional encoding.
    Set ``positional=False`` to leave out the positional encoding.
    """
    if volume.dims != cfg.volume_dims:
        raise DimensionError(
            f'Volume dims {volume.dims} do not match encoder volume_dims {cfg.volume_dims}'
        )
    tokens = matmul(extract_patches(volume, cfg.patch_size), weights.w_patch) + weights.b_patch
    if positional:
        tokens = tokens + positional_encoding(cfg.grid, cfg.d_model)
    return as_tensor(tokens)


def fingerprint(tokens: Tensor) -> Fingerprint:
    """Mean-pool tokens ``[n×d_model]`` and L2-normalize"""
    if tokens.ndim != 2 or tokens.shape[0] < 1:
        raise DimensionError(f'Cannot fingerprint tokens with shape {tuple(tokens.shape)}')
    pooled = np.asarray(tokens, dtype=np.float64).mean(axis=0)
    vector = l2_normalize(pooled, FINGERPRINT_EPS)
    return Fingerprint(vector, degenerate=not np.any(vector))


def check_bank_compatibility(header: BankHeader, cfg: EncoderConfig):
    """Raise a :py:exc:`.BankIncompatibleError` if a bank wasn't built for this encoder geometry"""
    problems = []
    if header.d_model != cfg.d_model or header.fingerprint_dim != cfg.d_model:
        problems.append('d_model')
    if header.n_tokens != cfg.n_tokens:
        problems.append('n_tokens')
    if header.num_heads != cfg.num_heads:
        problems.append('num_heads')
    missing = set(cfg.memorizing_layers) - set(header.layer_ids)
    if missing:
        problems.append(f'layers {sorted(missing)}')
    if problems:
        raise BankIncompatibleError(
            f'Bank ({header.describe()}) is incompatible with encoder '
            f'(n_tokens={cfg.n_tokens}, num_heads={cfg.num_heads}, d_model={cfg.d_model}, '
            f'memorizing_layers={list(cfg.memorizing_layers)}): mismatched {", ".join(problems)}'
        )


def encode(
    volume: Volume,
    cfg: EncoderConfig,
    weights: EncoderWeights,
    bank: Optional[AnyBank] = None,
    block_cfg: Optional[BlockConfig] = None,
) -> EncodeResult:
    """Run the encoder on one volume.

    Without a bank (or with ``block_cfg.k == 0``) every layer runs as a dense block, and the
    output is bitwise identical to an all-dense encoder.

    Args:
        volume: Input volume matching ``cfg.volume_dims``
        cfg: Encoder geometry
        weights: Encoder weights for the same geometry
        bank: Memory bank(s) to retrieve from
        block_cfg: Memorizing block hyperparameters

    Returns:
        Features ``[n_tokens×d_model]``, per-layer activations, the fingerprint, and the neighbors
        retrieved (if any)
    """
    if weights.config.geometry != cfg.geometry:
        raise ConfigurationError('Encoder weights were created for a different geometry')
    block_cfg = block_cfg or BlockConfig()
    if bank is not None:
        check_bank_compatibility(bank.header, cfg)

    x = patch_embed(volume, cfg, weights)
    fp = fingerprint(x)

    neighbors: List[Neighbor] = []
    retrieving = bank is not None and block_cfg.k > 0 and bool(cfg.memorizing_layers)
    if retrieving and fp.degenerate:
        logger.warning('Degenerate fingerprint; skipping retrieval for this volume')
        bank = None
    elif retrieving:
        neighbors = bank.search(fp.vector, block_cfg.k)  # type: ignore[union-attr]
        logger.debug(f'Retrieved neighbors: {neighbors}')

    activations = []
    for layer_id, params in enumerate(weights.blocks):
        if layer_id in cfg.memorizing_layers:
            act = memorizing_block_forward(
                x, params, bank, block_cfg, fp.vector, layer_id, neighbors
            )
        else:
            act = transformer_block(x, params)
        activations.append(act)
        x = act.block_output

    return EncodeResult(features=x, activations=activations, fingerprint=fp, neighbors=neighbors)


def save_encoder_weights(weights: EncoderWeights, path: PathOrStr):
    """Write encoder weights to an ``MSAMENC1`` file"""
    cfg = weights.config
    payload = b''.join(np.asarray(t, dtype='<f4').tobytes(order='C') for t in weights.tensors())
    with atomic_write(path) as f:
        f.write(
            WEIGHTS_PREFIX.pack(
                ENCODER_MAGIC,
                ENCODER_VERSION,
                *cfg.volume_dims,
                cfg.patch_size,
                cfg.d_model,
                cfg.d_ff,
                cfg.num_heads,
                cfg.num_layers,
                len(cfg.memorizing_layers),
            )
        )
        f.write(pack_u32s(cfg.memorizing_layers))
        f.write(WEIGHTS_SEED.pack(cfg.seed))
        f.write(payload)
        f.write(WEIGHTS_CRC.pack(zlib.crc32(payload)))
    logger.info(f'Wrote encoder weights ({weights.num_params} params) to {path}')


def load_encoder_weights(path: PathOrStr) -> EncoderWeights:
    """Read encoder weights from an ``MSAMENC1`` file"""
    with open(path, 'rb') as f:
        magic, version, *fields = WEIGHTS_PREFIX.unpack(
            read_exact(f, WEIGHTS_PREFIX.size, path, 'header')
        )
        check_magic(magic, ENCODER_MAGIC, path)
        check_version(version, ENCODER_VERSION, path)
        d, h, w, patch_size, d_model, d_ff, num_heads, num_layers, n_memorizing = fields
        layer_data = read_exact(f, 4 * n_memorizing, path, 'header')
        (seed,) = WEIGHTS_SEED.unpack(read_exact(f, WEIGHTS_SEED.size, path, 'header'))
        cfg = EncoderConfig(
            volume_dims=(d, h, w),
            patch_size=patch_size,
            d_model=d_model,
            d_ff=d_ff,
            num_heads=num_heads,
            num_layers=num_layers,
            memorizing_layers=struct.unpack(f'<{n_memorizing}I', layer_data),
            seed=seed,
        )

        shapes = [(cfg.patch_volume, d_model), (d_model,)]
        shapes += BlockParams.tensor_shapes(d_model, d_ff) * num_layers
        payload_size = sum(int(np.prod(s)) for s in shapes) * 4
        payload = read_exact(f, payload_size, path, 'weights')
        (crc,) = WEIGHTS_CRC.unpack(read_exact(f, WEIGHTS_CRC.size, path, 'checksum'))
    if zlib.crc32(payload) != crc:
        raise CorruptionError(f'{path}: CRC mismatch in encoder weights')

    flat = np.frombuffer(payload, dtype='<f4')
    tensors, offset = [], 0
    for shape in shapes:
        size = int(np.prod(shape))
        tensors.append(flat[offset : offset + size].reshape(shape))
        offset += size

    size = len(BlockParams.tensor_shapes(d_model, d_ff))
    blocks = [
        BlockParams.from_tensors(tensors[2 + i * size : 2 + (i + 1) * size], num_heads)
        for i in range(num_layers)
    ]
    logger.info(f'Loaded encoder weights from {path}')
    return EncoderWeights(cfg, tensors[0], tensors[1], blocks)


def save_features(features: Tensor, path: PathOrStr, metadata: Optional[Dict[str, Any]] = None):
    """Write features as raw little-endian f32, with shape and any extra metadata in a JSON
    sidecar of the same name
    """
    path = Path(path).expanduser()
    with atomic_write(path) as f:
        f.write(np.ascontiguousarray(features, dtype='<f4').tobytes())
    sidecar = {'shape': list(features.shape), 'dtype': 'float32', 'byte_order': 'little'}
    write_json({**sidecar, **(metadata or {})}, path.with_suffix('.json'))


def load_features(path: PathOrStr) -> Tensor:
    path = Path(path).expanduser()
    shape = tuple(read_json(path.with_suffix('.json'))['shape'])
    return as_tensor(np.frombuffer(path.read_bytes(), dtype='<f4').reshape(shape))
