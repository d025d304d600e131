# flake8: noqa: F401
from pathlib import Path
from typing import List, Tuple, Union

PathOrStr = Union[Path, str]
Dims = Tuple[int, int, int]

# Memorizing block defaults
DEFAULT_R_LOCAL = 0.3
DEFAULT_K = 3
DEFAULT_EPSILON = 1e-6
DEFAULT_CACHE_CAPACITY = 64
DEFAULT_ABLATION_K_VALUES: List[int] = [1, 3, 5, 7]
DEFAULT_SEED = 42

# Toy encoder geometry
DEFAULT_VOLUME_DIMS: Dims = (32, 32, 32)
DEFAULT_PATCH_SIZE = 8
DEFAULT_D_MODEL = 64
DEFAULT_D_FF = 256
DEFAULT_NUM_HEADS = 4
DEFAULT_NUM_LAYERS = 4
DEFAULT_MEMORIZING_LAYERS = (2,)
DEFAULT_INIT_STD = 0.02

LAYER_NORM_EPS = 1e-5
# Fingerprints with a pre-normalization norm below this are degenerate
FINGERPRINT_EPS = 1e-12

# Binary file formats; all integers and floats little-endian
BANK_MAGIC = b'MSAMBNK1'
BANK_VERSION = 1
ENCODER_MAGIC = b'MSAMENC1'
ENCODER_VERSION = 1
VOLUME_MAGIC = b'VOL1'
DTYPE_F32 = 0

BANK_SUFFIX = '.msb'
VOLUME_SUFFIX = '.vol'
RAW_SUFFIXES = ['.f32', '.raw']

CACHE_CAPACITY_ENV = 'MEMATTN_CACHE_CAP'
