#!/usr/bin/env python3
"""
Raw frame representations and file I/O.

RawFrame holds a Bayer mosaic of digital numbers (DN) in a 16-bit container,
FloatFrame holds real-valued DN planes (averages, calibrated maps, pipeline
stages). Pixels live in 16-bit binary PGM files; capture metadata lives in a
JSON sidecar named after the full file name (frame.pgm -> frame.pgm.json).
Black level is carried as metadata and is never subtracted here.
"""

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterator, List, Sequence, Union

import numpy as np
from scipy import ndimage

from config import Config
from errors import ArgumentError, FrameFormatError, MetadataError, SampleRangeError

logger = logging.getLogger(__name__)

BAYER_PATTERNS = ('RGGB', 'BGGR', 'GRBG', 'GBRG')
SUPPORTED_BIT_DEPTHS = (8, 10, 12, 16)
SIDECAR_FIELDS = (
    'width', 'height', 'bit_depth', 'bayer_pattern', 'black_level',
    'analog_gain', 'exposure_time_ms', 'sensor_id', 'frame_index',
)
PGM_MAXVAL = 65535


def _check_capture_fields(bit_depth: int, bayer_pattern: str, black_level: float,
                          analog_gain: float, exposure_time: float):
    if bit_depth not in SUPPORTED_BIT_DEPTHS:
        raise ArgumentError(f"bit_depth must be one of {SUPPORTED_BIT_DEPTHS}, got {bit_depth}")
    if bayer_pattern not in BAYER_PATTERNS:
        raise ArgumentError(f"bayer_pattern must be one of {BAYER_PATTERNS}, got {bayer_pattern!r}")
    if not (0 <= black_level < 2 ** bit_depth):
        raise ArgumentError(f"black_level {black_level} outside [0, 2^{bit_depth})")
    if not analog_gain >= 1.0:
        raise ArgumentError(f"analog_gain must be >= 1.0, got {analog_gain}")
    if not exposure_time > 0:
        raise ArgumentError(f"exposure_time must be > 0 ms, got {exposure_time}")


def _check_shape(samples: np.ndarray):
    if samples.ndim != 2:
        raise ArgumentError(f"samples must be a 2-D grid, got shape {samples.shape}")
    height, width = samples.shape
    if width <= 0 or height <= 0 or width % 2 or height % 2:
        raise ArgumentError(
            f"frame dimensions must be even and positive for a complete Bayer mosaic, got {width}x{height}"
        )


@dataclass(frozen=True, eq=False)
class RawFrame:
    """Bayer-mosaiced integer frame with its capture metadata"""
    samples: np.ndarray
    bit_depth: int = Config.DEFAULT_BIT_DEPTH
    bayer_pattern: str = Config.DEFAULT_BAYER_PATTERN
    black_level: int = 0
    analog_gain: float = 1.0
    exposure_time: float = 1.0  # milliseconds
    sensor_id: str = ''
    frame_index: int = 0
    provenance: str = ''  # how the frame was produced, e.g. the noise generator and seed

    def __post_init__(self):
        samples = np.asarray(self.samples)
        _check_shape(samples)
        _check_capture_fields(self.bit_depth, self.bayer_pattern, self.black_level,
                              self.analog_gain, self.exposure_time)
        if self.frame_index < 0:
            raise ArgumentError(f"frame_index must be non-negative, got {self.frame_index}")

        if not np.issubdtype(samples.dtype, np.integer):
            if not np.all(np.isfinite(samples)) or np.any(samples != np.round(samples)):
                raise ArgumentError("RawFrame samples must be integers")
        if samples.size and samples.min() < 0:
            raise SampleRangeError(f"negative sample {samples.min()} in raw frame")
        if samples.size and samples.max() >= 2 ** self.bit_depth:
            raise SampleRangeError(
                f"sample {int(samples.max())} does not fit bit_depth {self.bit_depth}"
            )

        frozen = np.array(samples, dtype=np.uint16, copy=True)
        frozen.setflags(write=False)
        object.__setattr__(self, 'samples', frozen)
        object.__setattr__(self, 'black_level', int(self.black_level))
        object.__setattr__(self, 'analog_gain', float(self.analog_gain))
        object.__setattr__(self, 'exposure_time', float(self.exposure_time))
        object.__setattr__(self, 'frame_index', int(self.frame_index))

    @property
    def width(self) -> int:
        return self.samples.shape[1]

    @property
    def height(self) -> int:
        return self.samples.shape[0]

    @property
    def full_scale(self) -> int:
        return 2 ** self.bit_depth - 1

    def metadata(self) -> Dict:
        """Sidecar representation of every non-pixel field"""
        return {
            'width': self.width,
            'height': self.height,
            'bit_depth': self.bit_depth,
            'bayer_pattern': self.bayer_pattern,
            'black_level': self.black_level,
            'analog_gain': self.analog_gain,
            'exposure_time_ms': self.exposure_time,
            'sensor_id': self.sensor_id,
            'frame_index': self.frame_index,
            'provenance': self.provenance,
        }

    def to_float(self, provenance: str = 'raw') -> 'FloatFrame':
        return FloatFrame(
            samples=self.samples.astype(np.float64),
            provenance=provenance,
            bit_depth=self.bit_depth,
            bayer_pattern=self.bayer_pattern,
            black_level=self.black_level,
            analog_gain=self.analog_gain,
            exposure_time=self.exposure_time,
            sensor_id=self.sensor_id,
        )


@dataclass(frozen=True, eq=False)
class FloatFrame:
    """Real-valued DN plane; carries capture metadata along the pipeline"""
    samples: np.ndarray
    provenance: str = ''
    bit_depth: int = Config.DEFAULT_BIT_DEPTH
    bayer_pattern: str = Config.DEFAULT_BAYER_PATTERN
    black_level: int = 0
    analog_gain: float = 1.0
    exposure_time: float = 1.0
    sensor_id: str = ''

    def __post_init__(self):
        samples = np.array(self.samples, dtype=np.float64, copy=True)
        _check_shape(samples)
        _check_capture_fields(self.bit_depth, self.bayer_pattern, self.black_level,
                              self.analog_gain, self.exposure_time)
        if not np.all(np.isfinite(samples)):
            raise ArgumentError(f"FloatFrame '{self.provenance}' contains NaN or Inf values")
        samples.setflags(write=False)
        object.__setattr__(self, 'samples', samples)

    @property
    def width(self) -> int:
        return self.samples.shape[1]

    @property
    def height(self) -> int:
        return self.samples.shape[0]

    @property
    def full_scale(self) -> int:
        return 2 ** self.bit_depth - 1

    def with_samples(self, samples: np.ndarray, provenance: str) -> 'FloatFrame':
        """Same metadata, new pixel values"""
        return replace(self, samples=samples, provenance=provenance)

    def metadata(self) -> Dict:
        return {
            'width': self.width,
            'height': self.height,
            'bit_depth': self.bit_depth,
            'bayer_pattern': self.bayer_pattern,
            'black_level': self.black_level,
            'analog_gain': self.analog_gain,
            'exposure_time_ms': self.exposure_time,
            'sensor_id': self.sensor_id,
            'provenance': self.provenance,
        }


Frame = Union[RawFrame, FloatFrame]


def as_float(frame: Frame, provenance: str = 'raw') -> FloatFrame:
    """View any frame as a FloatFrame (RawFrames are converted)"""
    if isinstance(frame, FloatFrame):
        return frame
    if isinstance(frame, RawFrame):
        return frame.to_float(provenance)
    raise ArgumentError(f"expected RawFrame or FloatFrame, got {type(frame).__name__}")


@dataclass(frozen=True, eq=False)
class FrameStack:
    """Ordered frames captured under identical settings"""
    frames: Sequence[RawFrame] = field(default_factory=tuple)

    def __post_init__(self):
        frames = tuple(self.frames)
        if not frames:
            raise ArgumentError("FrameStack must contain at least one frame")
        first = frames[0]
        for frame in frames[1:]:
            if not same_capture_settings(first, frame):
                raise ArgumentError(
                    f"frame {frame.frame_index} does not share the stack's shape/bit depth/"
                    f"Bayer pattern/gain/exposure"
                )
        object.__setattr__(self, 'frames', frames)

    def __len__(self) -> int:
        return len(self.frames)

    def __iter__(self) -> Iterator[RawFrame]:
        return iter(self.frames)

    def __getitem__(self, index: int) -> RawFrame:
        return self.frames[index]

    @property
    def first(self) -> RawFrame:
        return self.frames[0]

    @property
    def shape(self):
        return self.first.samples.shape

    def array(self) -> np.ndarray:
        """(frames, height, width) uint16 cube"""
        return np.stack([frame.samples for frame in self.frames])


def same_capture_settings(a: RawFrame, b: RawFrame) -> bool:
    return (
        a.samples.shape == b.samples.shape
        and a.bit_depth == b.bit_depth
        and a.bayer_pattern == b.bayer_pattern
        and a.analog_gain == b.analog_gain
        and a.exposure_time == b.exposure_time
    )


def temporal_average(stack: Union[FrameStack, Sequence[RawFrame]]) -> FloatFrame:
    """
    Per-pixel arithmetic mean over a stack.

    Samples are integers below 2^16, so the float64 sum is exact and the
    result does not depend on frame order.
    """
    if not isinstance(stack, FrameStack):
        frames = list(stack) if stack is not None else []
        if not frames:
            raise ArgumentError("cannot average an empty stack")
        stack = FrameStack(frames)

    total = stack.array().sum(axis=0, dtype=np.float64)
    mean = total / len(stack)
    logger.debug(f"Averaged {len(stack)} frames of {stack.first.width}x{stack.first.height}")
    return stack.first.to_float('temporal_average').with_samples(mean, 'temporal_average')


# ---------------------------------------------------------------- file I/O

def sidecar_path(path: Union[str, Path]) -> Path:
    """<file>.json next to the frame file; x.pgm and x.npy keep separate sidecars"""
    path = Path(path)
    return path.with_name(path.name + '.json')


def _write_sidecar(path: Path, metadata: Dict):
    with open(sidecar_path(path), 'w', encoding='utf-8') as f:
        json.dump(metadata, f, indent=2, sort_keys=True)
        f.write('\n')


def _read_sidecar(path: Path) -> Dict:
    meta_path = sidecar_path(path)
    if not meta_path.exists():
        raise MetadataError(f"metadata sidecar {meta_path} not found")
    try:
        with open(meta_path, 'r', encoding='utf-8') as f:
            metadata = json.load(f)
    except json.JSONDecodeError as e:
        raise MetadataError(f"sidecar {meta_path} is not valid JSON: {e}") from e
    if not isinstance(metadata, dict):
        raise MetadataError(f"sidecar {meta_path} must hold a JSON object")
    return metadata


def _require(metadata: Dict, name: str, kind, source: Path):
    if name not in metadata:
        raise MetadataError(f"sidecar for {source} is missing required field '{name}'")
    try:
        return kind(metadata[name])
    except (TypeError, ValueError) as e:
        raise MetadataError(f"sidecar field '{name}' for {source} is invalid: {metadata[name]!r}") from e


def _parse_pgm_header(data: bytes, path: Path):
    """Return (width, height, maxval, body_offset) of a binary PGM"""
    tokens: List[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise FrameFormatError(f"{path}: truncated PGM header")
        if data[pos:pos + 1] == b'#':
            while pos < len(data) and data[pos:pos + 1] not in (b'\n', b'\r'):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates maxval from the raster
    pos += 1

    if tokens[0] != b'P5':
        raise FrameFormatError(f"{path}: expected binary PGM magic 'P5', got {tokens[0][:8]!r}")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as e:
        raise FrameFormatError(f"{path}: non-numeric PGM header field") from e
    if maxval != PGM_MAXVAL:
        raise FrameFormatError(f"{path}: expected 16-bit PGM (maxval {PGM_MAXVAL}), got maxval {maxval}")
    return width, height, maxval, pos


def read_pgm_samples(path: Union[str, Path]) -> np.ndarray:
    """Pixel grid of a 16-bit binary PGM, without any sidecar"""
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError as e:
        raise FrameFormatError(f"{path}: PGM file not found") from e

    width, height, _, offset = _parse_pgm_header(data, path)
    expected = width * height * 2
    body = data[offset:offset + expected]
    if len(body) != expected:
        raise FrameFormatError(f"{path}: raster holds {len(body)} bytes, expected {expected}")
    return np.frombuffer(body, dtype='>u2').reshape(height, width)


def load_frame(path: Union[str, Path]) -> RawFrame:
    """Load a 16-bit PGM plus its JSON sidecar into a RawFrame"""
    path = Path(path)
    samples = read_pgm_samples(path)
    height, width = samples.shape

    metadata = _read_sidecar(path)
    meta_width = _require(metadata, 'width', int, path)
    meta_height = _require(metadata, 'height', int, path)
    if (meta_width, meta_height) != (width, height):
        raise MetadataError(
            f"{path}: sidecar shape {meta_width}x{meta_height} disagrees with PGM {width}x{height}"
        )
    bit_depth = _require(metadata, 'bit_depth', int, path)
    if bit_depth not in SUPPORTED_BIT_DEPTHS:
        raise MetadataError(f"{path}: unsupported bit_depth {bit_depth}")
    bayer_pattern = _require(metadata, 'bayer_pattern', str, path)
    if bayer_pattern not in BAYER_PATTERNS:
        raise MetadataError(f"{path}: unsupported bayer_pattern {bayer_pattern!r}")

    kwargs = dict(
        bit_depth=bit_depth,
        bayer_pattern=bayer_pattern,
        black_level=_require(metadata, 'black_level', int, path),
        analog_gain=_require(metadata, 'analog_gain', float, path),
        exposure_time=_require(metadata, 'exposure_time_ms', float, path),
        sensor_id=_require(metadata, 'sensor_id', str, path),
        frame_index=_require(metadata, 'frame_index', int, path),
        provenance=str(metadata.get('provenance', '')),
    )
    if samples.size and int(samples.max()) >= 2 ** bit_depth:
        raise SampleRangeError(f"{path}: sample {int(samples.max())} does not fit bit_depth {bit_depth}")
    try:
        return RawFrame(samples=samples, **kwargs)
    except SampleRangeError:
        raise
    except ArgumentError as e:
        raise MetadataError(f"{path}: {e}") from e


def save_frame(frame: RawFrame, path: Union[str, Path]):
    """Write a RawFrame as PGM + sidecar so that load_frame inverts it bit-exactly"""
    if not isinstance(frame, RawFrame):
        raise ArgumentError(f"save_frame expects a RawFrame, got {type(frame).__name__}")

    path = Path(path)
    header = f"P5\n{frame.width} {frame.height}\n{PGM_MAXVAL}\n".encode('ascii')
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'wb') as f:
            f.write(header)
            f.write(frame.samples.astype('>u2').tobytes())
        _write_sidecar(path, frame.metadata())
    except OSError as e:
        logger.error(f"Cannot write frame to {path}: {e}")
        raise


def save_float_frame(frame: FloatFrame, path: Union[str, Path]):
    """Persist a FloatFrame as float64 .npy plus sidecar"""
    path = Path(path).with_suffix('.npy')
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        np.save(path, np.asarray(frame.samples, dtype=np.float64), allow_pickle=False)
        _write_sidecar(path, frame.metadata())
    except OSError as e:
        logger.error(f"Cannot write float frame to {path}: {e}")
        raise


def load_float_frame(path: Union[str, Path]) -> FloatFrame:
    path = Path(path).with_suffix('.npy')
    try:
        samples = np.load(path, allow_pickle=False)
    except FileNotFoundError as e:
        raise FrameFormatError(f"{path}: float frame not found") from e
    except ValueError as e:
        raise FrameFormatError(f"{path}: not a valid .npy array: {e}") from e
    metadata = _read_sidecar(path)
    return FloatFrame(
        samples=samples,
        provenance=str(metadata.get('provenance', '')),
        bit_depth=_require(metadata, 'bit_depth', int, path),
        bayer_pattern=_require(metadata, 'bayer_pattern', str, path),
        black_level=_require(metadata, 'black_level', int, path),
        analog_gain=_require(metadata, 'analog_gain', float, path),
        exposure_time=_require(metadata, 'exposure_time_ms', float, path),
        sensor_id=_require(metadata, 'sensor_id', str, path),
    )


def load_stack(directory: Union[str, Path]) -> FrameStack:
    """Load every *.pgm in a directory, in lexicographic order"""
    directory = Path(directory)
    paths = sorted(p for p in directory.glob('*.pgm') if p.is_file())
    if not paths:
        raise ArgumentError(f"no PGM frames found in {directory}")
    logger.info(f"Loading {len(paths)} frames from {directory}")
    return FrameStack([load_frame(p) for p in paths])


def save_stack(stack: FrameStack, directory: Union[str, Path], prefix: str = 'frame') -> List[Path]:
    directory = Path(directory)
    paths = []
    for position, frame in enumerate(stack):
        path = directory / f"{prefix}_{position:04d}.pgm"
        save_frame(frame, path)
        paths.append(path)
    return paths


# ----------------------------------------------------------- preview demosaic

_KERNEL_RB = np.array([[1, 2, 1], [2, 4, 2], [1, 2, 1]], dtype=np.float64) / 4.0
_KERNEL_G = np.array([[0, 1, 0], [1, 4, 1], [0, 1, 0]], dtype=np.float64) / 4.0


def bayer_masks(bayer_pattern: str, shape) -> Dict[str, np.ndarray]:
    """Boolean site masks for the R, G and B channels of a mosaic"""
    if bayer_pattern not in BAYER_PATTERNS:
        raise ArgumentError(f"unknown Bayer pattern {bayer_pattern!r}")
    height, width = shape
    masks = {c: np.zeros((height, width), dtype=bool) for c in 'RGB'}
    for index, channel in enumerate(bayer_pattern):
        dy, dx = divmod(index, 2)
        masks[channel][dy::2, dx::2] = True
    return masks


def demosaic_preview(frame: Frame, bayer_pattern: str = None) -> np.ndarray:
    """
    Bilinear demosaic scaled to 8-bit RGB for visualization.

    Output maps [black_level, 2^bit_depth - 1] onto [0, 255] with clamping.
    Not used by any metric.
    """
    float_frame = as_float(frame)
    pattern = bayer_pattern or float_frame.bayer_pattern
    values = float_frame.samples
    masks = bayer_masks(pattern, values.shape)

    planes = []
    for channel in 'RGB':
        kernel = _KERNEL_G if channel == 'G' else _KERNEL_RB
        # mirror keeps the parity of reflected sites, so masks stay aligned
        planes.append(ndimage.convolve(np.where(masks[channel], values, 0.0), kernel, mode='mirror'))
    rgb = np.stack(planes, axis=-1)

    low = float(float_frame.black_level)
    high = float(float_frame.full_scale)
    span = max(high - low, 1.0)
    scaled = np.clip((rgb - low) / span * 255.0, 0.0, 255.0)
    return np.rint(scaled).astype(np.uint8)


def save_preview(rgb: np.ndarray, path: Union[str, Path]):
    """Write an 8-bit RGB preview as binary PPM"""
    rgb = np.asarray(rgb, dtype=np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'wb') as f:
        f.write(f"P6\n{rgb.shape[1]} {rgb.shape[0]}\n255\n".encode('ascii'))
        f.write(rgb.tobytes())
