"""Feature-statistics style hallucination.

A style is a per-block set of channel means and standard deviations. Styles
live in a :class:`StyleBank`; a bank is filled either by random sampling or by
running images through a frozen encoder that shares the detector backbone's
architecture.
"""
from __future__ import annotations

import json
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import STD_EPS, Tensor

NUM_BLOCKS = 4


@dataclass(frozen=True)
class ChannelStats:
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64).reshape(-1)
        sigma = np.asarray(self.sigma, dtype=np.float64).reshape(-1)
        if mu.shape != sigma.shape:
            raise ValueError(f"mu {mu.shape} and sigma {sigma.shape} differ")
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(sigma))):
            raise ValueError("non-finite channel statistics")
        if np.any(sigma <= 0):
            raise ValueError("sigma must be strictly positive")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)

    @property
    def channels(self) -> int:
        return self.mu.size


def channel_stats(fmap, eps: float = STD_EPS) -> ChannelStats:
    """Spatial mean and ``sqrt(var + eps)`` per channel of a (C, H, W) map."""
    x = fmap.data if isinstance(fmap, Tensor) else np.asarray(fmap, dtype=np.float64)
    if x.ndim != 3 or x.shape[1] * x.shape[2] < 1:
        raise ValueError(f"expected a (C, H, W) map, got {x.shape}")
    mu = x.mean(axis=(1, 2))
    var = ((x - mu[:, None, None]) ** 2).mean(axis=(1, 2))
    return ChannelStats(mu, np.sqrt(var + eps))


def adain_transfer(content, style: ChannelStats, eps: float = STD_EPS) -> Tensor:
    """Re-normalise ``content`` so each channel carries ``style``'s mean and std.

    ``content`` is (C, H, W) or (B, C, H, W); the output is differentiable
    with respect to it.
    """
    content = ad.as_tensor(content)
    C = content.shape[-3]
    if style.channels != C:
        raise ValueError(f"channel mismatch: content has {C}, style has {style.channels}")
    mu, sigma = ad.channel_mean_std(content, eps)
    normed = ad.div(ad.sub(content, mu), sigma)
    return ad.add(ad.mul(normed, style.sigma[:, None, None]), style.mu[:, None, None])


@dataclass(frozen=True)
class StyleEntry:
    id: str
    blocks: tuple  # of ChannelStats, one per backbone block


class StyleBank:
    """Read-only collection of per-block styles."""

    def __init__(self, entries: Sequence[StyleEntry] = (), channels: Sequence[int] | None = None):
        self.entries: list[StyleEntry] = []
        self.channels = tuple(channels) if channels is not None else None
        for e in entries:
            self.append(e)

    def append(self, entry: StyleEntry) -> None:
        chans = tuple(b.channels for b in entry.blocks)
        if len(chans) != NUM_BLOCKS:
            raise ValueError(f"style entry {entry.id!r} covers {len(chans)} blocks, need {NUM_BLOCKS}")
        if self.channels is None:
            self.channels = chans
        elif chans != self.channels:
            raise ValueError(f"style entry {entry.id!r} has channels {chans}, bank expects {self.channels}")
        self.entries.append(entry)

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, i) -> StyleEntry:
        return self.entries[i]

    @classmethod
    def synthetic(cls, channels: Sequence[int], size: int, rng: np.random.Generator,
                  mu_scale: float = 1.0, log_sigma_scale: float = 0.5) -> "StyleBank":
        """Random styles: mu ~ N(0, mu_scale^2), sigma ~ LogNormal(0, log_sigma_scale^2)."""
        bank = cls(channels=channels)
        for k in range(size):
            blocks = tuple(
                ChannelStats(rng.normal(0.0, mu_scale, c), np.exp(rng.normal(0.0, log_sigma_scale, c)))
                for c in channels
            )
            bank.append(StyleEntry(f"synthetic-{k:04d}", blocks))
        return bank

    # on-disk format: manifest.json + raw little-endian float64 side files
    def save(self, directory) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        entries = []
        for e in self.entries:
            blocks = []
            for i, st in enumerate(e.blocks):
                mu_file, sigma_file = f"{e.id}_b{i + 1}_mu.f64", f"{e.id}_b{i + 1}_sigma.f64"
                (d / mu_file).write_bytes(st.mu.astype("<f8").tobytes())
                (d / sigma_file).write_bytes(st.sigma.astype("<f8").tobytes())
                blocks.append({"channels": st.channels, "mu_file": mu_file, "sigma_file": sigma_file})
            entries.append({"id": e.id, "blocks": blocks})
        path = d / "manifest.json"
        path.write_text(json.dumps({"entries": entries}, indent=1))
        return path

    @classmethod
    def load(cls, directory) -> "StyleBank":
        d = Path(directory)
        path = d / "manifest.json"
        try:
            manifest = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ValueError(f"cannot read style bank manifest {path}: {exc}") from exc
        bank = cls()
        for e in manifest["entries"]:
            blocks = []
            for b in e["blocks"]:
                mu = _read_f64(d / b["mu_file"], b["channels"])
                sigma = _read_f64(d / b["sigma_file"], b["channels"])
                blocks.append(ChannelStats(mu, sigma))
            bank.append(StyleEntry(e["id"], tuple(blocks)))
        return bank

    def checksum(self) -> int:
        crc = 0
        for e in self.entries:
            for st in e.blocks:
                crc = zlib.crc32(st.mu.astype("<f8").tobytes(), crc)
                crc = zlib.crc32(st.sigma.astype("<f8").tobytes(), crc)
        return crc


def _read_f64(path: Path, count: int) -> np.ndarray:
    raw = path.read_bytes()
    if len(raw) != 8 * count:
        raise ValueError(f"{path}: expected {8 * count} bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype="<f8").astype(np.float64)


def sample_style(bank: StyleBank, rng: np.random.Generator) -> StyleEntry:
    """Draw one entry uniformly; the entry supplies all four blocks of an image."""
    if len(bank) == 0:
        raise ValueError("cannot sample from an empty style bank")
    return bank[int(rng.integers(len(bank)))]


def encode_style_image(image: np.ndarray, encoder, bank: StyleBank | None = None,
                       entry_id: str | None = None) -> tuple:
    """Per-block channel statistics of ``image`` under a frozen encoder.

    ``encoder`` is a :class:`dgobb.detector.Backbone` whose weights are not
    trained. When ``bank`` is given the result is appended to it.
    """
    blocks = encoder.forward(np.asarray(image, dtype=np.float64)[None])
    stats = tuple(channel_stats(b.data[0]) for b in blocks)
    if bank is not None:
        bank.append(StyleEntry(entry_id or f"encoded-{len(bank):04d}", stats))
    return stats
