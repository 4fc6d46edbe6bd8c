"""Mini-PE sample container, raw-feature extractors, and synthetic data.

The container is a deliberately small executable-like format carrying exactly
the structure the raw-feature extractors consume: sections with flags, an
import name table, an entry point, and the body bytes.

The import name table is the only symbol table (no export table; the
64-dimension hash block is fed from imports alone).

Wire format (little-endian, canonical):
    magic ``b"MPE1"`` | entry_point u32 | section_count u8 |
    per section: name 8 bytes, offset u32, size u32, flags u32 |
    import_count u32 | per import: u16 length + bytes |
    body = all remaining bytes

The minimal blob (no sections, no imports, empty body) is 13 header bytes.
Parsing validates, in this order: magic, field bounds (Truncated), section
ranges inside the body (Truncated), section overlap, entry point.  When there
are no sections the entry point must be 0; otherwise it must fall inside an
executable-flagged section.

Raw features are 368 dimensions: byte histogram (256) + import-hash buckets
(64) + section summary (32) + entry-point summary (16).

Section summary layout (zero-padded to 32):
    [0] section count, [1..4] log1p of total/mean/max/min section size,
    [5..7] counts of exec/write/read-flagged sections,
    [8..10] mean/max/min per-section byte entropy in bits.

Entry summary layout (zero-padded to 16):
    [0] entry offset / body length, [1] log1p(containing section size),
    [2..4] containing section exec/write/read flags,
    [5] containing section byte entropy,
    [6..9] mean/std/min/max of the 16 body bytes at the entry point, /255.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

MAGIC = b"MPE1"

FLAG_EXEC = 0x1
FLAG_WRITE = 0x2
FLAG_READ = 0x4

HIST_DIM = 256
IMPORT_DIM = 64
SECTION_DIM = 32
ENTRY_DIM = 16
RAW_DIM = HIST_DIM + IMPORT_DIM + SECTION_DIM + ENTRY_DIM

_SECTION_STRUCT = struct.Struct("<8sIII")


class BlobError(ValueError):
    """Base for all mini-PE parse/validation failures."""


class BadMagic(BlobError):
    pass


class Truncated(BlobError):
    pass


class OverlappingSections(BlobError):
    pass


class EntryOutOfRange(BlobError):
    pass


@dataclass
class Section:
    name: bytes  # exactly 8 bytes
    offset: int
    size: int
    flags: int


@dataclass
class SampleBlob:
    entry_point: int
    sections: list[Section] = field(default_factory=list)
    import_names: list[bytes] = field(default_factory=list)
    body: bytes = b""


def _validate(blob: SampleBlob) -> None:
    body_len = len(blob.body)
    for s in blob.sections:
        if len(s.name) != 8:
            raise BlobError("section name must be exactly 8 bytes")
        if s.offset < 0 or s.size < 0 or s.offset + s.size > body_len:
            raise Truncated("section extends past body")
    ordered = sorted(blob.sections, key=lambda s: (s.offset, s.size))
    for a, b in zip(ordered, ordered[1:]):
        if a.offset + a.size > b.offset and a.size > 0 and b.size > 0:
            raise OverlappingSections("sections overlap")
    if not blob.sections:
        if blob.entry_point != 0:
            raise EntryOutOfRange("entry point must be 0 when there are no sections")
        return
    for s in blob.sections:
        if s.flags & FLAG_EXEC and s.offset <= blob.entry_point < s.offset + s.size:
            return
    raise EntryOutOfRange("entry point not inside an executable section")


def serialize_blob(blob: SampleBlob) -> bytes:
    """Canonical little-endian encoding; inverse of :func:`parse_blob`."""
    _validate(blob)
    if len(blob.sections) > 0xFF:
        raise BlobError("too many sections")
    parts = [MAGIC, struct.pack("<IB", blob.entry_point, len(blob.sections))]
    for s in blob.sections:
        parts.append(_SECTION_STRUCT.pack(s.name, s.offset, s.size, s.flags))
    parts.append(struct.pack("<I", len(blob.import_names)))
    for name in blob.import_names:
        if len(name) > 0xFFFF:
            raise BlobError("import name too long")
        parts.append(struct.pack("<H", len(name)))
        parts.append(name)
    parts.append(blob.body)
    return b"".join(parts)


def parse_blob(raw: bytes) -> SampleBlob:
    """Parse and fully validate a mini-PE blob; raises a typed BlobError."""
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise BadMagic("bad magic")
    off = 4

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(raw):
            raise Truncated("field extends past input")
        piece = raw[off : off + n]
        off += n
        return piece

    entry_point, section_count = struct.unpack("<IB", take(5))
    sections = []
    for _ in range(section_count):
        name, s_off, s_size, s_flags = _SECTION_STRUCT.unpack(take(_SECTION_STRUCT.size))
        sections.append(Section(name=name, offset=s_off, size=s_size, flags=s_flags))
    (import_count,) = struct.unpack("<I", take(4))
    imports = []
    for _ in range(import_count):
        (n,) = struct.unpack("<H", take(2))
        imports.append(take(n))
    body = raw[off:]
    blob = SampleBlob(
        entry_point=entry_point, sections=sections, import_names=imports, body=body
    )
    _validate(blob)
    return blob


def _byte_entropy(data: bytes) -> float:
    """Shannon entropy of a byte string in bits (empty input: 0)."""
    if not data:
        return 0.0
    counts = np.bincount(np.frombuffer(data, dtype=np.uint8), minlength=256)
    p = counts[counts > 0] / len(data)
    return float(-(p * np.log2(p)).sum())


def byte_histogram(blob: SampleBlob) -> np.ndarray:
    """Normalized byte frequency over the body (256 dims, zeros if empty)."""
    out = np.zeros(HIST_DIM)
    if blob.body:
        counts = np.bincount(np.frombuffer(blob.body, dtype=np.uint8), minlength=256)
        out = counts / len(blob.body)
    return out


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a hash."""
    h = 0xCBF29CE484222325
    for byte in data:
        h ^= byte
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def import_hash_features(blob: SampleBlob) -> np.ndarray:
    """Import names hashed (FNV-1a/64) into 64 buckets, count-normalized."""
    out = np.zeros(IMPORT_DIM)
    if not blob.import_names:
        return out
    for name in blob.import_names:
        out[fnv1a64(name) % IMPORT_DIM] += 1.0
    return out / len(blob.import_names)


def section_features(blob: SampleBlob) -> np.ndarray:
    out = np.zeros(SECTION_DIM)
    secs = blob.sections
    out[0] = len(secs)
    if not secs:
        return out
    sizes = np.array([s.size for s in secs], dtype=np.float64)
    out[1] = np.log1p(sizes.sum())
    out[2] = np.log1p(sizes.mean())
    out[3] = np.log1p(sizes.max())
    out[4] = np.log1p(sizes.min())
    out[5] = sum(1 for s in secs if s.flags & FLAG_EXEC)
    out[6] = sum(1 for s in secs if s.flags & FLAG_WRITE)
    out[7] = sum(1 for s in secs if s.flags & FLAG_READ)
    entropies = np.array(
        [_byte_entropy(blob.body[s.offset : s.offset + s.size]) for s in secs]
    )
    out[8] = entropies.mean()
    out[9] = entropies.max()
    out[10] = entropies.min()
    return out


def entry_features(blob: SampleBlob) -> np.ndarray:
    out = np.zeros(ENTRY_DIM)
    body_len = len(blob.body)
    if body_len:
        out[0] = blob.entry_point / body_len
    containing = None
    for s in blob.sections:
        if s.flags & FLAG_EXEC and s.offset <= blob.entry_point < s.offset + s.size:
            containing = s
            break
    if containing is not None:
        out[1] = np.log1p(containing.size)
        out[2] = 1.0 if containing.flags & FLAG_EXEC else 0.0
        out[3] = 1.0 if containing.flags & FLAG_WRITE else 0.0
        out[4] = 1.0 if containing.flags & FLAG_READ else 0.0
        out[5] = _byte_entropy(blob.body[containing.offset : containing.offset + containing.size])
    head = blob.body[blob.entry_point : blob.entry_point + 16]
    if head:
        vals = np.frombuffer(head, dtype=np.uint8).astype(np.float64)
        out[6] = vals.mean() / 255.0
        out[7] = vals.std() / 255.0
        out[8] = vals.min() / 255.0
        out[9] = vals.max() / 255.0
    return out


def extract_raw(blob: SampleBlob) -> np.ndarray:
    """Concatenated raw features: histogram | imports | sections | entry (368)."""
    return np.concatenate(
        [
            byte_histogram(blob),
            import_hash_features(blob),
            section_features(blob),
            entry_features(blob),
        ]
    )


# --------------------------------------------------------------------------
# Synthetic sample generation (desk-scale stand-in for a real corpus)
# --------------------------------------------------------------------------

_BENIGN_IMPORTS = [
    b"kernel32.dll:ReadFile",
    b"kernel32.dll:WriteFile",
    b"kernel32.dll:CloseHandle",
    b"kernel32.dll:GetModuleHandleW",
    b"user32.dll:MessageBoxW",
    b"user32.dll:LoadIconW",
    b"gdi32.dll:BitBlt",
    b"comctl32.dll:InitCommonControls",
    b"shell32.dll:ShellExecuteW",
    b"ole32.dll:CoInitialize",
    b"msvcrt.dll:malloc",
    b"advapi32.dll:RegOpenKeyExW",
]

_MALWARE_IMPORTS = [
    b"advapi32.dll:RegSetValueExW",
    b"wininet.dll:InternetOpenA",
    b"ws2_32.dll:connect",
    b"kernel32.dll:VirtualAllocEx",
    b"kernel32.dll:WriteProcessMemory",
    b"kernel32.dll:CreateRemoteThread",
    b"urlmon.dll:URLDownloadToFileA",
    b"advapi32.dll:CryptEncrypt",
    b"ntdll.dll:NtUnmapViewOfSection",
    b"psapi.dll:EnumProcesses",
    b"shlwapi.dll:StrStrIA",
    b"crypt32.dll:CryptStringToBinaryA",
]

_SECTION_NAMES = [b".text\x00\x00\x00", b".data\x00\x00\x00", b".rsrc\x00\x00\x00"]


def _byte_dist(center: float, width: float, floor: float) -> np.ndarray:
    i = np.arange(256, dtype=np.float64)
    p = np.exp(-(((i - center) / width) ** 2)) + floor
    return p / p.sum()


_BENIGN_BYTES = _byte_dist(center=96.0, width=48.0, floor=0.08)
_MALWARE_BYTES = _byte_dist(center=208.0, width=40.0, floor=0.35)


@dataclass(frozen=True)
class GeneratorConfig:
    feature_dim: int = 64
    separation: float = 4.0
    noise: float = 1.0
    label_noise: float = 0.0     # probability that a sample carries the wrong label
    hard_fraction: float = 0.0   # fraction drawn with the separation scaled down
    hard_scale: float = 0.2      # separation multiplier for the hard subpopulation
    body_min: int = 256
    body_max: int = 2048
    seed: int = 7

    def __post_init__(self):
        if self.feature_dim < 2:
            raise ValueError("feature_dim must be >= 2")
        if self.separation < 0:
            raise ValueError("separation must be >= 0")
        if not 0.0 <= self.label_noise < 0.5:
            raise ValueError("label_noise must lie in [0, 0.5)")
        if not 0.0 <= self.hard_fraction <= 1.0:
            raise ValueError("hard_fraction must lie in [0, 1]")
        if not 0.0 <= self.hard_scale <= 1.0:
            raise ValueError("hard_scale must lie in [0, 1]")
        if not 1 <= self.body_min <= self.body_max:
            raise ValueError("need 1 <= body_min <= body_max")


@lru_cache(maxsize=16)
def _class_structure(config: GeneratorConfig) -> tuple[np.ndarray, np.ndarray]:
    """Class-mean geometry in logit space, fixed by the config seed.

    Every coordinate carries the full per-coordinate gap (a random +-1 sign
    pattern), so ``separation`` sets how far one feature must move to erase
    its label signal rather than being diluted across dimensions.
    """
    rng = np.random.default_rng(config.seed)
    direction = rng.choice([-1.0, 1.0], size=config.feature_dim)
    base = rng.uniform(-0.5, 0.5, size=config.feature_dim)
    return base, direction


def synth_sample(
    label: int, config: GeneratorConfig, rng: np.random.Generator
) -> tuple[SampleBlob, np.ndarray]:
    """One labelled sample: engineered feature vector plus a mini-PE blob.

    Features are a label-conditioned Gaussian in logit space squashed into
    [0, 1]: logit = base +- separation/2 on every coordinate (sign pattern
    from the config seed) plus Gaussian noise.  The blob's byte distribution
    and import set are label-dependent so the raw features carry an
    independent label signal that feature-space perturbations cannot touch.
    """
    if label not in (0, 1):
        raise ValueError("label must be 0 or 1")
    base, direction = _class_structure(config)
    separation = config.separation
    if config.hard_fraction and rng.random() < config.hard_fraction:
        # intrinsically ambiguous subpopulation: same geometry, weak signal
        separation *= config.hard_scale
    z = (
        base
        + (2 * label - 1) * (separation / 2.0) * direction
        + config.noise * rng.normal(size=config.feature_dim)
    )
    features = 1.0 / (1.0 + np.exp(-z))

    own, other = (
        (_MALWARE_IMPORTS, _BENIGN_IMPORTS) if label else (_BENIGN_IMPORTS, _MALWARE_IMPORTS)
    )
    n_imports = int(rng.integers(3, 9))
    imports = [
        (own if rng.random() < 0.85 else other)[int(rng.integers(0, len(own)))]
        for _ in range(n_imports)
    ]

    dist = _MALWARE_BYTES if label else _BENIGN_BYTES
    body_len = int(rng.integers(config.body_min, config.body_max + 1))
    body = rng.choice(256, size=body_len, p=dist).astype(np.uint8).tobytes()

    n_sections = int(rng.integers(1, 4))
    n_sections = min(n_sections, body_len)
    cuts = [0]
    if n_sections > 1:
        cuts += sorted(rng.choice(np.arange(1, body_len), size=n_sections - 1, replace=False).tolist())
    cuts.append(body_len)
    sections = []
    for i in range(n_sections):
        off, end = cuts[i], cuts[i + 1]
        flags = FLAG_EXEC | FLAG_READ if i == 0 else (
            FLAG_READ | (FLAG_WRITE if rng.random() < 0.5 else 0)
        )
        sections.append(
            Section(name=_SECTION_NAMES[i % 3], offset=off, size=end - off, flags=flags)
        )
    entry = sections[0].offset + int(rng.integers(0, sections[0].size))
    blob = SampleBlob(entry_point=entry, sections=sections, import_names=imports, body=body)
    return blob, features


def synth_dataset(
    n: int, config: GeneratorConfig, seed: int
) -> tuple[np.ndarray, np.ndarray, list[bytes]]:
    """Balanced labelled dataset of n samples: features, labels, blob bytes.

    With ``label_noise`` > 0 a sample is generated from one class but carries
    the other label, putting an irreducible floor under every classifier.
    """
    rng = np.random.default_rng(seed)
    labels = np.repeat([0, 1], [n - n // 2, n // 2])
    labels = labels[rng.permutation(n)]
    X = np.empty((n, config.feature_dim))
    blobs = []
    for i, label in enumerate(labels):
        source = int(label)
        if config.label_noise and rng.random() < config.label_noise:
            source = 1 - source
        blob, x = synth_sample(source, config, rng)
        X[i] = x
        blobs.append(serialize_blob(blob))
    return X, labels.astype(np.int64), blobs
