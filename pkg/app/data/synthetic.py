"""Synthetic multi-domain liveness data.

Bonafide images carry a checkerboard texture at the highest spatial
frequency; print-like attacks blur it away and add a colour cast;
replay-like attacks replace it with a moire pattern. Each domain then
applies its own low-frequency style (contrast, channel shift, background
wave) and sensor noise, none of which look at the label. An optional
spurious tint is the exception: it separates the classes along a colour
direction drawn per domain, so it helps inside a domain and misleads
across domains.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .dataset import ATTACK_NONE, ATTACK_PRINT, ATTACK_REPLAY, DomainDataset

LOGGER = logging.getLogger(__name__)

PRINT_CAST = (0.08, 0.03, -0.05)
MOIRE_AMPLITUDE = 0.12
MOIRE_FREQUENCY = (0.35, 0.2)
STYLE_SHIFT_RANGE = 0.15
STYLE_CONTRAST_RANGE = 0.3
STYLE_BACKGROUND = 0.1


@dataclass(frozen=True)
class DomainSpec:
    domain_id: int
    channel_shift: Tuple[float, ...]
    contrast: float
    noise: float
    phase: float
    background: float
    bonafide_count: int
    attack_count: int
    image_shape: Tuple[int, int, int] = (16, 16, 3)
    frames_per_group: int = 4
    spurious_tint: Tuple[float, ...] = ()

    def __post_init__(self) -> None:
        if self.noise < 0:
            raise ValueError("noise sigma must be >= 0")
        if self.contrast <= 0:
            raise ValueError("contrast scale must be > 0")
        if min(self.bonafide_count, self.attack_count, self.frames_per_group) < 1:
            raise ValueError("sample counts must be >= 1")
        if len(self.channel_shift) != self.image_shape[2]:
            raise ValueError("channel_shift needs one entry per channel")
        if self.spurious_tint and len(self.spurious_tint) != self.image_shape[2]:
            raise ValueError("spurious_tint needs one entry per channel")


def make_domain_specs(
        num_domains: int,
        seed: int,
        image_shape: Sequence[int] = (16, 16, 3),
        noise: float = 0.05,
        style_strength: float = 1.0,
        style_shifts: bool = True,
        bonafide_count: int = 48,
        attack_count: int = 24,
        frames_per_group: int = 4,
        spurious_strength: float = 0.0) -> List[DomainSpec]:
    """Draw per-domain style parameters; ``style_strength`` scales every shift.

    ``spurious_strength`` is the norm of the per-domain label tint; bonafide
    samples move along it and attacks against it.
    """

    channels = int(image_shape[2])
    specs = []
    for domain in range(num_domains):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 7919, domain]))
        shift = rng.uniform(-STYLE_SHIFT_RANGE, STYLE_SHIFT_RANGE, channels) * style_strength
        contrast = math.exp(rng.uniform(-STYLE_CONTRAST_RANGE, STYLE_CONTRAST_RANGE) * style_strength)
        phase = float(rng.uniform(0.0, 2.0 * math.pi))
        background = STYLE_BACKGROUND * style_strength
        direction = rng.normal(size=channels)
        tint = spurious_strength * direction / np.linalg.norm(direction)
        if not style_shifts:
            shift, contrast, background = np.zeros(channels), 1.0, 0.0
        specs.append(DomainSpec(
            domain_id=domain,
            channel_shift=tuple(float(s) for s in shift),
            contrast=float(contrast),
            noise=noise,
            phase=phase,
            background=float(background),
            bonafide_count=bonafide_count,
            attack_count=attack_count,
            image_shape=tuple(int(v) for v in image_shape),
            frames_per_group=frames_per_group,
            spurious_tint=tuple(float(t) for t in tint) if spurious_strength else (),
        ))
    return specs


def _checkerboard(height: int, width: int) -> np.ndarray:
    rows, cols = np.indices((height, width))
    return np.where((rows + cols) % 2 == 0, 1.0, -1.0)[:, :, None]


def _moire(height: int, width: int) -> np.ndarray:
    rows, cols = np.indices((height, width))
    fy, fx = MOIRE_FREQUENCY
    return (MOIRE_AMPLITUDE * np.sin(2.0 * math.pi * (fy * rows + fx * cols)))[:, :, None]


def _box_blur(image: np.ndarray) -> np.ndarray:
    height, width = image.shape[:2]
    padded = np.pad(image, ((1, 1), (1, 1), (0, 0)), mode="edge")
    total = np.zeros_like(image)
    for dy in range(3):
        for dx in range(3):
            total += padded[dy:dy + height, dx:dx + width]
    return total / 9.0


def _content(rng: np.random.Generator, shape: Tuple[int, int, int]) -> np.ndarray:
    height, width, channels = shape
    rows, cols = np.indices((height, width))
    fy, fx = rng.integers(0, 2, size=2)
    angle = float(rng.uniform(0.0, 2.0 * math.pi))
    wave = 0.15 * np.cos(2.0 * math.pi * (fy * rows / height + fx * cols / width) + angle)
    tint = rng.normal(0.0, 0.05, channels)
    return 0.5 + wave[:, :, None] + tint[None, None, :]


def _apply_style(image: np.ndarray, spec: DomainSpec, rng: np.random.Generator) -> np.ndarray:
    height = image.shape[0]
    rows = np.arange(height)[:, None, None]
    styled = spec.contrast * (image - 0.5) + 0.5 + np.asarray(spec.channel_shift)
    styled = styled + spec.background * np.sin(2.0 * math.pi * rows / height + spec.phase)
    if spec.noise:
        styled = styled + rng.normal(0.0, spec.noise, image.shape)
    return np.clip(styled, 0.0, 1.0)


def generate(spec: DomainSpec, amplitude: float, seed: int) -> DomainDataset:
    """Bonafide, then print-like, then replay-like samples for one domain."""

    if amplitude < 0:
        raise ValueError("class signal amplitude must be >= 0")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), spec.domain_id]))
    height, width, channels = spec.image_shape
    texture = 0.5 * amplitude * _checkerboard(height, width)
    moire = _moire(height, width)
    cast = np.resize(np.asarray(PRINT_CAST), channels)
    tint = np.asarray(spec.spurious_tint) if spec.spurious_tint else np.zeros(channels)

    plan = [(ATTACK_NONE, spec.bonafide_count), (ATTACK_PRINT, spec.attack_count), (ATTACK_REPLAY, spec.attack_count)]
    images, labels, attacks, groups = [], [], [], []
    group_index = 0
    for attack, count in plan:
        for start in range(0, count, spec.frames_per_group):
            base = _content(rng, spec.image_shape)
            for _ in range(min(spec.frames_per_group, count - start)):
                frame = base + rng.normal(0.0, 0.01, spec.image_shape)
                if attack == ATTACK_NONE:
                    raw = frame + texture
                elif attack == ATTACK_PRINT:
                    raw = _box_blur(frame + texture) + cast
                else:
                    raw = frame + moire
                raw = raw + tint if attack == ATTACK_NONE else raw - tint
                images.append(_apply_style(raw, spec, rng))
                labels.append(1 if attack == ATTACK_NONE else 0)
                attacks.append(attack)
                groups.append((spec.domain_id << 20) | group_index)
            group_index += 1

    count = len(images)
    dataset = DomainDataset(
        images=np.stack(images).astype(np.float64),
        labels=np.asarray(labels, dtype=np.int64),
        domains=np.full(count, spec.domain_id, dtype=np.int64),
        attacks=np.asarray(attacks, dtype=np.int64),
        groups=np.asarray(groups, dtype=np.int64),
        uids=(np.int64(spec.domain_id) << 32) | np.arange(count, dtype=np.int64),
    )
    LOGGER.debug(
        "Generated domain",
        extra={"domain": spec.domain_id, "samples": count, "groups": group_index})
    return dataset


def generate_domains(specs: Sequence[DomainSpec], amplitude: float, seed: int) -> List[DomainDataset]:
    return [generate(spec, amplitude, seed) for spec in specs]


__all__ = [
    "DomainSpec",
    "generate",
    "generate_domains",
    "make_domain_specs",
]
