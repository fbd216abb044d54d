"""Storage formats for 4-bit code matrices and whole-model containers.

Three interchangeable layer formats, sized in exact bits:

  dense4   4 bits per element, row-major:            4*R*C
  bitmask  per 256-wide row tile a 256-bit occupancy
           mask, plus the nonzero codes:              256*R*T + 4*nnz
  csr      per row tile an 8-bit nonzero count and
           8-bit column offsets, plus the codes:      8*R*T + 12*nnz
           (only representable when every tile has <= 32 nonzeros,
           the width of the hardware position chunk block)

T = ceil(C/256) row tiles. Values stream row-major in all formats and are
nibble-packed on serialization (low nibble first); masks use LSB-first bit
order within bytes. The recorded bit sizes are the exact formula values;
serialized streams pad the final nibble to a byte boundary.
"""

import logging
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import DataFormatError, NotRepresentable

log = logging.getLogger("f4")

TILE = 256
CSR_MAX_NNZ = 32
FORMAT_DENSE4 = "dense4"
FORMAT_BITMASK = "bitmask"
FORMAT_CSR = "csr"
# Fixed tie-break priority: dense4 < bitmask < csr.
FORMAT_ORDER = (FORMAT_DENSE4, FORMAT_BITMASK, FORMAT_CSR)

CONTAINER_MAGIC = b"F4C1"
CONTAINER_VERSION = 1


def tiles_per_row(cols):
    return (cols + TILE - 1) // TILE


def _check_codes(codes):
    codes = np.ascontiguousarray(codes, dtype=np.uint8)
    if codes.ndim != 2:
        raise ValueError("codes must be a 2-D matrix")
    if codes.size and codes.max() > 15:
        raise ValueError("codes must be 4-bit values")
    return codes


def pack_nibbles(values):
    values = np.asarray(values, dtype=np.uint8)
    if values.size % 2:
        values = np.concatenate([values, np.zeros(1, dtype=np.uint8)])
    pairs = values.reshape(-1, 2)
    return (pairs[:, 0] | (pairs[:, 1] << 4)).tobytes()


def unpack_nibbles(raw, count):
    data = np.frombuffer(raw, dtype=np.uint8)
    if data.size * 2 < count:
        raise DataFormatError("value stream shorter than expected")
    out = np.empty(data.size * 2, dtype=np.uint8)
    out[0::2] = data & 0x0F
    out[1::2] = data >> 4
    return out[:count]


def _row_tile_views(codes):
    """Yield (row, tile, view) over zero-padded 256-wide row tiles."""
    rows, cols = codes.shape
    for r in range(rows):
        for t in range(tiles_per_row(cols)):
            yield r, t, codes[r, t * TILE : min((t + 1) * TILE, cols)]


@dataclass
class Dense4Layer:
    rows: int
    cols: int
    values: np.ndarray  # every code, row-major

    @property
    def bit_size(self):
        return 4 * self.rows * self.cols

    def to_bytes(self):
        return pack_nibbles(self.values)

    @classmethod
    def from_bytes(cls, raw, rows, cols):
        return cls(rows, cols, unpack_nibbles(raw, rows * cols))

    def decode(self):
        return self.values.reshape(self.rows, self.cols).copy()


@dataclass
class BitmaskLayer:
    rows: int
    cols: int
    masks: np.ndarray  # uint8 [rows*tiles, 32], LSB-first bit order
    values: np.ndarray  # nonzero codes, row-major

    @property
    def bit_size(self):
        return TILE * self.masks.shape[0] + 4 * self.values.size

    def to_bytes(self):
        return self.masks.tobytes() + pack_nibbles(self.values)

    @classmethod
    def from_bytes(cls, raw, rows, cols):
        n_tiles = rows * tiles_per_row(cols)
        mask_bytes = n_tiles * 32
        if len(raw) < mask_bytes:
            raise DataFormatError("bitmask payload truncated")
        masks = np.frombuffer(raw[:mask_bytes], dtype=np.uint8).reshape(n_tiles, 32)
        nnz = int(np.unpackbits(masks).sum())
        values = unpack_nibbles(raw[mask_bytes:], nnz)
        return cls(rows, cols, masks, values)

    def decode(self):
        rows, cols = self.rows, self.cols
        t_per_row = tiles_per_row(cols)
        # LSB-first expansion of each 32-byte mask into 256 bools
        bits = np.unpackbits(self.masks, axis=1, bitorder="little").astype(bool)
        if int(bits.sum()) != self.values.size:
            raise DataFormatError("bitmask popcount does not match value count")
        full = bits.reshape(rows, t_per_row * TILE)
        if np.any(full[:, cols:]):
            raise DataFormatError("bitmask has bits set beyond the matrix width")
        codes = np.zeros((rows, t_per_row * TILE), dtype=np.uint8)
        codes[full] = self.values
        if np.any(self.values == 0):
            raise DataFormatError("bitmask value stream contains zero codes")
        return codes[:, :cols].copy()


@dataclass
class CsrLayer:
    rows: int
    cols: int
    counts: np.ndarray  # uint8 per row tile
    positions: np.ndarray  # uint8 column offsets, concatenated per tile
    values: np.ndarray  # nonzero codes, row-major

    @property
    def bit_size(self):
        return 8 * self.counts.size + 12 * self.values.size

    def to_bytes(self):
        out = bytearray()
        off = 0
        for c in self.counts:
            c = int(c)
            out.append(c)
            out.extend(self.positions[off : off + c].tobytes())
            off += c
        out.extend(pack_nibbles(self.values))
        return bytes(out)

    @classmethod
    def from_bytes(cls, raw, rows, cols):
        n_tiles = rows * tiles_per_row(cols)
        counts = np.empty(n_tiles, dtype=np.uint8)
        positions = []
        off = 0
        for i in range(n_tiles):
            if off >= len(raw):
                raise DataFormatError("csr payload truncated in tile headers")
            c = raw[off]
            off += 1
            if c > CSR_MAX_NNZ:
                raise DataFormatError(f"csr tile count {c} exceeds {CSR_MAX_NNZ}")
            if off + c > len(raw):
                raise DataFormatError("csr payload truncated in position block")
            counts[i] = c
            positions.append(np.frombuffer(raw[off : off + c], dtype=np.uint8))
            off += c
        positions = (
            np.concatenate(positions) if positions else np.empty(0, dtype=np.uint8)
        )
        values = unpack_nibbles(raw[off:], int(counts.sum()))
        return cls(rows, cols, counts, positions, values)

    def decode(self):
        rows, cols = self.rows, self.cols
        t_per_row = tiles_per_row(cols)
        if int(self.counts.sum()) != self.values.size:
            raise DataFormatError("csr counts do not match value count")
        codes = np.zeros((rows, cols), dtype=np.uint8)
        off = 0
        for i, c in enumerate(self.counts):
            c = int(c)
            r, t = divmod(i, t_per_row)
            pos = self.positions[off : off + c].astype(np.int64)
            vals = self.values[off : off + c]
            if c:
                if np.any(np.diff(pos) <= 0):
                    raise DataFormatError("csr positions must strictly increase")
                width = min(TILE, cols - t * TILE)
                if pos[-1] >= width:
                    raise DataFormatError("csr position beyond tile width")
                if np.any(vals == 0):
                    raise DataFormatError("csr value stream contains zero codes")
                codes[r, t * TILE + pos] = vals
            off += c
        return codes


def encode_dense4(codes):
    codes = _check_codes(codes)
    return Dense4Layer(codes.shape[0], codes.shape[1], codes.reshape(-1).copy())


def encode_bitmask(codes):
    codes = _check_codes(codes)
    rows, cols = codes.shape
    t_per_row = tiles_per_row(cols)
    padded = np.zeros((rows, t_per_row * TILE), dtype=np.uint8)
    padded[:, :cols] = codes
    bits = (padded != 0).reshape(rows * t_per_row, TILE)
    masks = np.packbits(bits, axis=1, bitorder="little")
    values = padded.reshape(-1)
    return BitmaskLayer(rows, cols, masks, values[values != 0].copy())


def encode_csr(codes):
    codes = _check_codes(codes)
    counts, positions, values = [], [], []
    for r, t, view in _row_tile_views(codes):
        (nz,) = np.nonzero(view)
        if nz.size > CSR_MAX_NNZ:
            raise NotRepresentable(
                f"row {r} tile {t} has {nz.size} nonzeros (csr limit {CSR_MAX_NNZ})"
            )
        counts.append(nz.size)
        positions.append(nz.astype(np.uint8))
        values.append(view[nz])
    return CsrLayer(
        codes.shape[0],
        codes.shape[1],
        np.array(counts, dtype=np.uint8),
        np.concatenate(positions) if positions else np.empty(0, dtype=np.uint8),
        np.concatenate(values) if values else np.empty(0, dtype=np.uint8),
    )


_PAYLOAD_TYPES = {
    FORMAT_DENSE4: Dense4Layer,
    FORMAT_BITMASK: BitmaskLayer,
    FORMAT_CSR: CsrLayer,
}


@dataclass
class CompressedLayer:
    format: str
    payload: object
    rows: int
    cols: int
    bit_size: int

    @property
    def n_tiles(self):
        return self.rows * tiles_per_row(self.cols)


def _wrap(fmt, payload):
    return CompressedLayer(fmt, payload, payload.rows, payload.cols, payload.bit_size)


def encode(codes, fmt):
    if fmt == FORMAT_DENSE4:
        return _wrap(fmt, encode_dense4(codes))
    if fmt == FORMAT_BITMASK:
        return _wrap(fmt, encode_bitmask(codes))
    if fmt == FORMAT_CSR:
        return _wrap(fmt, encode_csr(codes))
    raise ValueError(f"unknown format {fmt!r}")


def decode(compressed):
    """Exact inverse of encode for any CompressedLayer."""
    return compressed.payload.decode()


def csr_representable(codes):
    codes = _check_codes(codes)
    for _, _, view in _row_tile_views(codes):
        if int((view != 0).sum()) > CSR_MAX_NNZ:
            return False
    return True


def format_bit_sizes(codes):
    """Exact bit size under each format; csr is None when not representable."""
    codes = _check_codes(codes)
    rows, cols = codes.shape
    n_tiles = rows * tiles_per_row(cols)
    nnz = int((codes != 0).sum())
    sizes = {
        FORMAT_DENSE4: 4 * rows * cols,
        FORMAT_BITMASK: TILE * n_tiles + 4 * nnz,
        FORMAT_CSR: 8 * n_tiles + 12 * nnz if csr_representable(codes) else None,
    }
    return sizes


def select_format(codes):
    """Smallest representable format; ties break dense4 < bitmask < csr."""
    sizes = format_bit_sizes(codes)
    best = min(
        (fmt for fmt in FORMAT_ORDER if sizes[fmt] is not None),
        key=lambda fmt: sizes[fmt],
    )
    return encode(codes, best)


FP_BITS_PER_WEIGHT = 32


def compression_ratio(codes_list, mode="hybrid"):
    """Full-precision bits over compressed bits, weights only.

    mode "hybrid" stores each layer in its smallest format; "csr_only"
    forces csr and falls back to dense4 (with a warning) for layers where
    csr is not representable.
    """
    if mode not in ("hybrid", "csr_only"):
        raise ValueError(f"unknown compression-ratio mode {mode!r}")
    fp_bits = 0
    packed_bits = 0
    for i, codes in enumerate(codes_list):
        sizes = format_bit_sizes(codes)
        fp_bits += FP_BITS_PER_WEIGHT * codes.size
        if mode == "hybrid":
            packed_bits += min(s for s in sizes.values() if s is not None)
        else:
            if sizes[FORMAT_CSR] is None:
                log.warning(
                    "layer %d not csr-representable; falling back to dense4", i
                )
                packed_bits += sizes[FORMAT_DENSE4]
            else:
                packed_bits += sizes[FORMAT_CSR]
    return fp_bits / packed_bits


# --------------------------------------------------------------- container


@dataclass
class ContainerLayer:
    """One compressed layer plus everything the datapath needs to run it."""

    compressed: CompressedLayer
    omega_int: np.ndarray  # int16 [4], basis weights in fixed point
    omega_exp: int  # shared power-of-two exponent: omega = omega_int * 2**exp
    alpha1: np.ndarray  # float32 [rows], output scale per channel
    bias: np.ndarray  # float32 [rows]
    alpha2: float  # float32 scalar, requantization scale
    act_scale: float  # float32, scale of this layer's int8 inputs
    relu: bool = True
    half_select: int = 0  # 0 = low byte feeds the adders, 1 = high byte
    sign_mode: int = 0  # 0 = add, 1 = subtract


@dataclass
class ModelContainer:
    layers: list = field(default_factory=list)

    def __post_init__(self):
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.compressed.rows != nxt.compressed.cols:
                raise DataFormatError(
                    f"container layer dims do not chain: "
                    f"{prev.compressed.rows} -> {nxt.compressed.cols}"
                )


_FORMAT_IDS = {FORMAT_DENSE4: 0, FORMAT_BITMASK: 1, FORMAT_CSR: 2}
_FORMAT_NAMES = {v: k for k, v in _FORMAT_IDS.items()}


def container_to_bytes(container):
    out = bytearray()
    out += CONTAINER_MAGIC
    out += struct.pack("<HH", CONTAINER_VERSION, len(container.layers))
    for layer in container.layers:
        comp = layer.compressed
        payload = comp.payload.to_bytes()
        flags = (
            (1 if layer.relu else 0)
            | ((layer.half_select & 1) << 1)
            | ((layer.sign_mode & 1) << 2)
        )
        out += struct.pack(
            "<IIBBh4h",
            comp.rows,
            comp.cols,
            _FORMAT_IDS[comp.format],
            flags,
            layer.omega_exp,
            *[int(v) for v in layer.omega_int],
        )
        out += struct.pack("<ff", layer.act_scale, layer.alpha2)
        out += layer.alpha1.astype("<f4").tobytes()
        out += layer.bias.astype("<f4").tobytes()
        out += struct.pack("<QI", comp.bit_size, len(payload))
        out += payload
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    return bytes(out)


def container_from_bytes(raw):
    if len(raw) < 12:
        raise DataFormatError("container truncated")
    if raw[:4] != CONTAINER_MAGIC:
        raise DataFormatError("bad container magic")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise DataFormatError("container checksum mismatch")
    version, n_layers = struct.unpack("<HH", raw[4:8])
    if version != CONTAINER_VERSION:
        raise DataFormatError(f"unsupported container version {version}")
    off = 8
    layers = []
    for _ in range(n_layers):
        rows, cols, fmt_id, flags, omega_exp, o0, o1, o2, o3 = struct.unpack_from(
            "<IIBBh4h", raw, off
        )
        off += struct.calcsize("<IIBBh4h")
        act_scale, alpha2 = struct.unpack_from("<ff", raw, off)
        off += 8
        alpha1 = np.frombuffer(raw, dtype="<f4", count=rows, offset=off).copy()
        off += 4 * rows
        bias = np.frombuffer(raw, dtype="<f4", count=rows, offset=off).copy()
        off += 4 * rows
        bit_size, payload_len = struct.unpack_from("<QI", raw, off)
        off += 12
        if off + payload_len > len(body):
            raise DataFormatError("container payload truncated")
        if fmt_id not in _FORMAT_NAMES:
            raise DataFormatError(f"unknown format id {fmt_id}")
        fmt = _FORMAT_NAMES[fmt_id]
        payload = _PAYLOAD_TYPES[fmt].from_bytes(raw[off : off + payload_len], rows, cols)
        off += payload_len
        comp = CompressedLayer(fmt, payload, rows, cols, bit_size)
        layers.append(
            ContainerLayer(
                compressed=comp,
                omega_int=np.array([o0, o1, o2, o3], dtype=np.int16),
                omega_exp=omega_exp,
                alpha1=alpha1,
                bias=bias,
                alpha2=alpha2,
                act_scale=act_scale,
                relu=bool(flags & 1),
                half_select=(flags >> 1) & 1,
                sign_mode=(flags >> 2) & 1,
            )
        )
    return ModelContainer(layers)


def serialize_model(container, path):
    data = container_to_bytes(container)
    with open(path, "wb") as f:
        f.write(data)
    return len(data)


def deserialize_model(path):
    with open(path, "rb") as f:
        return container_from_bytes(f.read())
