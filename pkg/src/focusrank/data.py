"""Synthetic paired text/video data with controllable hard negatives, plus
binary persistence for datasets and encoded galleries.

Every generated pair renders a (coarse, fine) latent: cohorts of
`cohort_size` items share one coarse latent and differ only in a fine
detail. The coarse theme saturates every video patch and two text tokens;
the fine detail occupies a single text token and a single (per-item random)
spatial patch position, so broad global matching tends to confuse cohort
members while local cross-attention can separate them.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig
from .errors import ConfigError, FormatError, InputError
from .model import RetrievalModel
from .pipeline import SIDE_TEXT, SIDE_VIDEO, Gallery
from .rng import RandomStream
from .tensor import no_grad

# Token ranges inside the synthetic vocabulary. 0..1 reserved.
_COARSE_LO = 2          # coarse id, low digit (base 16)
_COARSE_HI = 18         # coarse id, high digit
_FINE_BASE = 34         # fine detail token, one per cohort member
_FILLER_BASE = 50       # everything above is filler noise


@dataclass
class SyntheticSpec:
    """Generator settings; derived from a RunConfig via `spec_from_config`."""

    pair_count: int
    latent_dim: int
    coarse_clusters: int
    cohort_size: int
    noise_level: float
    fine_scale: float
    text_len: int
    frame_count: int
    patch_count: int
    patch_dim: int
    vocab_size: int
    seed: int

    def validate(self) -> "SyntheticSpec":
        if self.cohort_size < 1:
            raise ConfigError("cohort_size must be >= 1")
        if self.pair_count % self.cohort_size != 0:
            raise ConfigError("pair_count must be divisible by cohort_size")
        if self.coarse_clusters * self.cohort_size != self.pair_count:
            raise ConfigError("coarse_clusters * cohort_size must equal pair_count")
        if self.coarse_clusters > 256:
            raise ConfigError("at most 256 coarse clusters fit the token layout")
        if self.cohort_size > 16:
            raise ConfigError("at most 16 cohort members fit the token layout")
        if self.text_len < 3:
            raise ConfigError("text_len must be >= 3 (coarse x2 + fine token)")
        if self.vocab_size < _FILLER_BASE + 2:
            raise ConfigError(f"vocab_size must be >= {_FILLER_BASE + 2}")
        return self


def spec_from_config(cfg: RunConfig) -> SyntheticSpec:
    return SyntheticSpec(
        pair_count=cfg.pair_count,
        latent_dim=cfg.latent_dim,
        coarse_clusters=cfg.resolved_coarse_clusters(),
        cohort_size=cfg.cohort_size,
        noise_level=cfg.noise_level,
        fine_scale=cfg.fine_scale,
        text_len=cfg.text_len,
        frame_count=cfg.frame_count,
        patch_count=cfg.patch_count,
        patch_dim=cfg.patch_dim,
        vocab_size=cfg.vocab_size,
        seed=cfg.seed,
    ).validate()


@dataclass
class PairedDataset:
    """Index-aligned pairs; group labels mark hard-negative cohorts."""

    texts: np.ndarray    # (N, text_len) int64 token ids
    videos: np.ndarray   # (N, T, P^2, D) float64
    groups: np.ndarray   # (N,) int64 cohort label
    seed: int = 0

    def __len__(self) -> int:
        return len(self.groups)


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def generate_synthetic_pairs(spec: SyntheticSpec) -> PairedDataset:
    """Deterministically render `pair_count` (text, video) pairs from latents.

    Cohort c member j shares coarse latent c with its cohort and carries fine
    latent j (a codebook shared across cohorts, so the fine patterns are
    learnable). Text: two coarse-digit tokens + one fine token + seeded
    filler. Video: the projected coarse latent in every patch, the projected
    fine latent added at one seeded patch position (constant over time), and
    gaussian noise scaled by `noise_level`.
    """
    spec.validate()
    root = RandomStream(spec.seed).child("dataset")
    coarse_latents = root.child("coarse").normal((spec.coarse_clusters, spec.latent_dim))
    fine_latents = root.child("fine").normal((spec.cohort_size, spec.latent_dim))
    proj_coarse = root.child("proj-coarse").normal((spec.latent_dim, spec.patch_dim))
    proj_fine = root.child("proj-fine").normal((spec.latent_dim, spec.patch_dim))

    n = spec.pair_count
    texts = np.zeros((n, spec.text_len), dtype=np.int64)
    videos = np.zeros((n, spec.frame_count, spec.patch_count, spec.patch_dim))
    groups = np.zeros(n, dtype=np.int64)

    for item in range(n):
        cluster = item // spec.cohort_size
        member = item % spec.cohort_size
        groups[item] = cluster
        item_rng = root.child("item", item)

        tokens = texts[item]
        tokens[0] = _COARSE_LO + cluster % 16
        tokens[1] = _COARSE_HI + cluster // 16
        tokens[2] = _FINE_BASE + member
        tokens[3:] = item_rng.child("filler").integers(
            _FILLER_BASE, spec.vocab_size, spec.text_len - 3
        )

        coarse_vec = _unit(coarse_latents[cluster] @ proj_coarse)
        fine_vec = _unit(fine_latents[member] @ proj_fine)
        clip = np.broadcast_to(
            coarse_vec, (spec.frame_count, spec.patch_count, spec.patch_dim)
        ).copy()
        needle = int(item_rng.child("needle").integers(0, spec.patch_count))
        clip[:, needle, :] += spec.fine_scale * fine_vec
        if spec.noise_level > 0:
            clip += spec.noise_level * item_rng.child("noise").normal(clip.shape)
        videos[item] = clip

    return PairedDataset(texts, videos, groups, seed=spec.seed)


# -- binary persistence -----------------------------------------------------

_GALLERY_MAGIC = b"FRGL"
_DATASET_MAGIC = b"FRDS"
_VERSION = 1
_SIDE_CODES = {SIDE_VIDEO: 0, SIDE_TEXT: 1}
_SIDE_NAMES = {0: SIDE_VIDEO, 1: SIDE_TEXT}


def _checked_header(blob: bytes, magic: bytes, fmt: str, what: str) -> tuple:
    """Parse `magic | fields | crc32` and verify the checksum covers every
    header byte, so any single corrupted byte is rejected."""
    head_len = len(magic) + struct.calcsize(fmt) + 4
    if len(blob) < head_len:
        raise FormatError(f"truncated {what} header", offset=len(blob))
    if blob[: len(magic)] != magic:
        raise FormatError(f"bad magic; not a {what} file", offset=0)
    fields = struct.unpack_from(fmt, blob, len(magic))
    (crc,) = struct.unpack_from("<I", blob, head_len - 4)
    if zlib.crc32(blob[: head_len - 4]) != crc:
        raise FormatError(f"{what} header checksum mismatch", offset=head_len - 4)
    return fields, head_len


def save_gallery(gallery: Gallery, path) -> None:
    """Gallery file: FRGL | version, N, C, n, side | crc32 | entry records.

    Each record is id (u64) + global (C f64-le) + locals (n*C f64-le).
    """
    if len(gallery) == 0:
        raise InputError("refusing to save an empty gallery")
    n_entries, c = gallery.globals_.shape
    n_local = gallery.locals_.shape[1]
    header = _GALLERY_MAGIC + struct.pack(
        "<IIIII", _VERSION, n_entries, c, n_local, _SIDE_CODES[gallery.side]
    )
    chunks = [header, struct.pack("<I", zlib.crc32(header))]
    for i in range(n_entries):
        chunks.append(struct.pack("<q", int(gallery.ids[i])))
        chunks.append(gallery.globals_[i].astype("<f8").tobytes())
        chunks.append(gallery.locals_[i].astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_gallery(path) -> Gallery:
    blob = Path(path).read_bytes()
    (version, n_entries, c, n_local, side_code), pos = _checked_header(
        blob, _GALLERY_MAGIC, "<IIIII", "gallery"
    )
    if version != _VERSION:
        raise FormatError(f"unsupported gallery version {version}", offset=4)
    if side_code not in _SIDE_NAMES:
        raise FormatError(f"unknown gallery side code {side_code}", offset=20)
    record = 8 + 8 * c + 8 * n_local * c
    expected = pos + n_entries * record
    if len(blob) != expected:
        raise FormatError(
            f"gallery size {len(blob)} != expected {expected}", offset=min(len(blob), expected)
        )
    ids = np.empty(n_entries, dtype=np.int64)
    globals_ = np.empty((n_entries, c))
    locals_ = np.empty((n_entries, n_local, c))
    for i in range(n_entries):
        (ids[i],) = struct.unpack_from("<q", blob, pos)
        pos += 8
        globals_[i] = np.frombuffer(blob, dtype="<f8", count=c, offset=pos)
        pos += 8 * c
        locals_[i] = np.frombuffer(blob, dtype="<f8", count=n_local * c, offset=pos).reshape(
            n_local, c
        )
        pos += 8 * n_local * c
    return Gallery(ids, globals_, locals_, _SIDE_NAMES[side_code])


def save_dataset(dataset: PairedDataset, path) -> None:
    """Dataset file: FRDS | version, N, text_len, T, P^2, D, seed | crc32 |
    token array (u32) | patch features (f64-le) | group labels (u32)."""
    n, text_len = dataset.texts.shape
    _, t, p2, d = dataset.videos.shape
    header = _DATASET_MAGIC + struct.pack(
        "<IIIIIIq", _VERSION, n, text_len, t, p2, d, dataset.seed
    )
    chunks = [header, struct.pack("<I", zlib.crc32(header))]
    chunks.append(dataset.texts.astype("<u4").tobytes())
    chunks.append(dataset.videos.astype("<f8").tobytes())
    chunks.append(dataset.groups.astype("<u4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_dataset(path) -> PairedDataset:
    blob = Path(path).read_bytes()
    (version, n, text_len, t, p2, d, seed), pos = _checked_header(
        blob, _DATASET_MAGIC, "<IIIIIIq", "dataset"
    )
    if version != _VERSION:
        raise FormatError(f"unsupported dataset version {version}", offset=4)
    expected = pos + 4 * n * text_len + 8 * n * t * p2 * d + 4 * n
    if len(blob) != expected:
        raise FormatError(
            f"dataset size {len(blob)} != expected {expected}", offset=min(len(blob), expected)
        )
    texts = np.frombuffer(blob, dtype="<u4", count=n * text_len, offset=pos)
    pos += 4 * n * text_len
    videos = np.frombuffer(blob, dtype="<f8", count=n * t * p2 * d, offset=pos)
    pos += 8 * n * t * p2 * d
    groups = np.frombuffer(blob, dtype="<u4", count=n, offset=pos)
    return PairedDataset(
        texts.astype(np.int64).reshape(n, text_len),
        videos.reshape(n, t, p2, d).copy(),
        groups.astype(np.int64),
        seed=seed,
    )


# -- gallery construction ----------------------------------------------------


def encode_dataset(model: RetrievalModel, dataset: PairedDataset, chunk: int = 100):
    """Encode every pair; returns numpy (globals, focus, locals) per side."""
    t_parts, v_parts = [], []
    with no_grad():
        for start in range(0, len(dataset), chunk):
            stop = min(start + chunk, len(dataset))
            tg, tf, tl = model.encode_text_batch(dataset.texts[start:stop])
            vg, vf, vl = model.encode_video_batch(dataset.videos[start:stop])
            t_parts.append((tg.data, None if tf is None else tf.data, tl.data))
            v_parts.append((vg.data, None if vf is None else vf.data, vl.data))

    def stitch(parts):
        globals_ = np.concatenate([p[0] for p in parts])
        focus = None if parts[0][1] is None else np.concatenate([p[1] for p in parts])
        locals_ = np.concatenate([p[2] for p in parts])
        return globals_, focus, locals_

    return stitch(t_parts), stitch(v_parts)


def build_galleries(model: RetrievalModel, dataset: PairedDataset):
    """Encode the dataset into a video gallery (t2v) and text gallery (v2t),
    returning (text_queries, video_queries, video_gallery, text_gallery)."""
    ids = np.arange(len(dataset), dtype=np.int64)
    (tg, tf, tl), (vg, vf, vl) = encode_dataset(model, dataset)
    video_gallery = Gallery(ids, vg, vl, SIDE_VIDEO)
    text_gallery = Gallery(ids, tg, tl, SIDE_TEXT)
    return (tg, tf), (vg, vf), video_gallery, text_gallery
