"""Biorthogonal wavelet filter banks, 3D coarse transforms and the coarse/detail pyramid.

Filter normalisation: the analysis lowpass sums to sqrt(2), so one analysis
pass multiplies a constant signal by sqrt(2) per axis (2**1.5 in 3D) and one
synthesis pass undoes it.

Boundaries use whole-sample symmetric extension (x[-k] = x[k],
x[N-1+k] = x[N-1-k]) for odd-length symmetric filters, which keeps the
two-channel transform non-expansive and perfectly reconstructing for any
even length N. Two-tap filters (Haar) need no extension at even lengths.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import lru_cache
from math import comb
from pathlib import Path

import numpy as np

from wavediff.volume import (
    InvalidConfigError,
    InvalidInputError,
    TsdfConfig,
    VolumeGrid,
    decode_vol,
    encode_vol,
)

WVP_MAGIC = b"WVPR"


@dataclass(frozen=True)
class FilterBank:
    """Two-channel filter bank.

    Odd-length filters are stored centred (tap ``len // 2`` is the origin).
    The lowpass branch keeps even samples and the highpass branch odd ones.
    """

    name: str
    analysis_lowpass: np.ndarray
    analysis_highpass: np.ndarray
    synthesis_lowpass: np.ndarray
    synthesis_highpass: np.ndarray
    symmetry: str = field(default="whole")  # "whole" (odd taps) or "pair" (two taps)

    @property
    def max_length(self) -> int:
        return max(len(self.analysis_lowpass), len(self.analysis_highpass),
                   len(self.synthesis_lowpass), len(self.synthesis_highpass))


def _laurent_pow(base: np.ndarray, k: int) -> np.ndarray:
    out = np.array([1.0])
    for _ in range(k):
        out = np.convolve(out, base)
    return out


def _laurent_in_sin2(coeffs) -> np.ndarray:
    """Symmetric Laurent polynomial in z for sum_n c_n sin^2n(w/2)."""
    sin2 = np.array([-0.25, 0.5, -0.25])
    deg = len(coeffs) - 1
    out = np.zeros(2 * deg + 1)
    for n, c in enumerate(coeffs):
        term = _laurent_pow(sin2, n)
        pad = deg - n
        out += c * np.pad(term, pad)
    return out


def cdf_filter_bank(synthesis_moments: int, analysis_moments: int, synthesis_degree: int = 0,
                    name: str | None = None) -> FilterBank:
    """Cohen-Daubechies-Feauveau biorthogonal bank of symmetric odd-length filters.

    The synthesis lowpass has ``synthesis_moments`` zeros at pi, the analysis
    lowpass ``analysis_moments``. The Daubechies remainder polynomial of
    degree (p + p~)/2 - 1 in sin^2 is split between the two lowpass filters;
    ``synthesis_degree = 0`` gives the spline family, larger values move that
    many roots to the synthesis side. Among admissible real splits the one
    whose two lowpass filters are closest to each other (nearest to
    orthogonal) is used.
    """
    p, pt = synthesis_moments, analysis_moments
    if p < 2 or pt < 2 or p % 2 or pt % 2:
        raise InvalidConfigError("odd-length symmetric banks need even moment counts >= 2")
    ell = (p + pt) // 2
    remainder = [comb(ell - 1 + n, n) for n in range(ell)]
    if not 0 <= synthesis_degree <= ell - 1:
        raise InvalidConfigError(f"synthesis_degree must lie in [0, {ell - 1}]")

    roots = np.roots(remainder[::-1])
    groups = _conjugate_groups(roots)
    candidates = []
    for chosen in _subsets_with_degree(groups, synthesis_degree):
        syn_roots = [roots[i] for g in chosen for i in g]
        ana_roots = [roots[i] for i in range(len(roots)) if not any(i in g for g in chosen)]
        qs = np.real(np.poly(syn_roots))[::-1] if syn_roots else np.array([1.0])
        qa = np.real(np.poly(ana_roots))[::-1] if ana_roots else np.array([1.0])
        # constant terms multiply to the remainder's constant term (1)
        qs = qs / qs[0]
        qa = qa / qa[0] * remainder[0]
        cos2 = np.array([0.25, 0.5, 0.25])
        syn = np.sqrt(2.0) * np.convolve(_laurent_pow(cos2, p // 2), _laurent_in_sin2(qs))
        ana = np.sqrt(2.0) * np.convolve(_laurent_pow(cos2, pt // 2), _laurent_in_sin2(qa))
        width = max(len(syn), len(ana))
        gap = np.linalg.norm(np.pad(syn, (width - len(syn)) // 2) - np.pad(ana, (width - len(ana)) // 2))
        candidates.append((gap, syn, ana))
    if not candidates:
        raise InvalidConfigError("no real factorisation with the requested synthesis degree")
    _, g0, h0 = min(candidates, key=lambda c: c[0])
    return _bank_from_lowpass(name or f"bior{p}.{pt}", h0, g0)


def _conjugate_groups(roots: np.ndarray) -> list[tuple[int, ...]]:
    groups, used = [], set()
    for i, r in enumerate(roots):
        if i in used:
            continue
        used.add(i)
        if abs(r.imag) < 1e-10:
            groups.append((i,))
            continue
        j = min((j for j in range(len(roots)) if j not in used),
                key=lambda j: abs(roots[j] - np.conj(r)))
        used.add(j)
        groups.append((i, j))
    return groups


def _subsets_with_degree(groups, degree):
    from itertools import combinations

    for k in range(len(groups) + 1):
        for combo in combinations(groups, k):
            if sum(len(g) for g in combo) == degree:
                yield combo


def _bank_from_lowpass(name: str, h0: np.ndarray, g0: np.ndarray) -> FilterBank:
    # highpass filters by modulation; hi branch sits on odd samples
    h1 = g0 * (-1.0) ** (np.arange(len(g0)) - len(g0) // 2)
    g1 = h0 * (-1.0) ** (np.arange(len(h0)) - len(h0) // 2)
    return FilterBank(name, _ro(h0), _ro(h1), _ro(g0), _ro(g1), "whole")


def _ro(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.flags.writeable = False
    return a


def haar_bank() -> FilterBank:
    s = 1.0 / np.sqrt(2.0)
    return FilterBank("haar", _ro([s, s]), _ro([s, -s]), _ro([s, s]), _ro([s, -s]), "pair")


_BUILDERS = {
    "haar": haar_bank,
    "bior2.2": lambda: cdf_filter_bank(2, 2, 0, "bior2.2"),
    "bior4.4": lambda: cdf_filter_bank(4, 4, 1, "bior4.4"),
    "bior6.8": lambda: cdf_filter_bank(6, 8, 2, "bior6.8"),
    "spline6.8": lambda: cdf_filter_bank(6, 8, 0, "spline6.8"),
}

DEFAULT_BANK = "bior6.8"


def available_banks() -> list[str]:
    return sorted(_BUILDERS)


@lru_cache(maxsize=None)
def get_filter_bank(name: str = DEFAULT_BANK) -> FilterBank:
    try:
        return _BUILDERS[name]()
    except KeyError:
        raise InvalidConfigError(f"unknown filter bank {name!r}; choose from {available_banks()}") from None


# ----------------------------------------------------------------------------
# 1D two-channel transform along one axis


def _correlate_axis(x: np.ndarray, h: np.ndarray, start: int, step: int) -> np.ndarray:
    """Centred correlation on the whole-sample symmetric extension, sampled at start::step."""
    n = x.shape[-1]
    r = len(h) // 2
    xp = np.pad(x, [(0, 0)] * (x.ndim - 1) + [(r, r)], mode="reflect") if r else x
    out = None
    for k, c in enumerate(h):
        if c == 0.0:
            continue
        term = c * xp[..., start + k : start + k + n : step]
        out = term if out is None else out + term
    return out


def _check_length(n: int, fb: FilterBank):
    if n < 2 or n % 2:
        raise InvalidInputError(f"axis length must be even and >= 2, got {n}")


def analyze_1d(x: np.ndarray, fb: FilterBank, axis: int = -1) -> tuple[np.ndarray, np.ndarray]:
    """Split along ``axis`` into (lowpass, highpass) halves."""
    x = np.moveaxis(np.asarray(x, dtype=np.float64), axis, -1)
    _check_length(x.shape[-1], fb)
    if fb.symmetry == "pair":
        even, odd = x[..., 0::2], x[..., 1::2]
        h0, h1 = fb.analysis_lowpass, fb.analysis_highpass
        lo, hi = h0[0] * even + h0[1] * odd, h1[0] * even + h1[1] * odd
    else:
        lo = _correlate_axis(x, fb.analysis_lowpass, 0, 2)
        hi = _correlate_axis(x, fb.analysis_highpass, 1, 2)
    return np.moveaxis(lo, -1, axis), np.moveaxis(hi, -1, axis)


def synthesize_1d(lo: np.ndarray, hi: np.ndarray | None, fb: FilterBank, axis: int = -1) -> np.ndarray:
    """Inverse of :func:`analyze_1d`; ``hi=None`` treats the highpass band as zero."""
    lo = np.moveaxis(np.asarray(lo, dtype=np.float64), axis, -1)
    hi = None if hi is None else np.moveaxis(np.asarray(hi, dtype=np.float64), axis, -1)
    m = lo.shape[-1]
    shape = lo.shape[:-1] + (2 * m,)
    if fb.symmetry == "pair":
        g0, g1 = fb.synthesis_lowpass, fb.synthesis_highpass
        out = np.empty(shape)
        out[..., 0::2] = g0[0] * lo
        out[..., 1::2] = g0[1] * lo
        if hi is not None:
            out[..., 0::2] += g1[0] * hi
            out[..., 1::2] += g1[1] * hi
    else:
        up = np.zeros(shape)
        up[..., 0::2] = lo
        out = _correlate_axis(up, fb.synthesis_lowpass, 0, 1)
        if hi is not None:
            up = np.zeros(shape)
            up[..., 1::2] = hi
            out = out + _correlate_axis(up, fb.synthesis_highpass, 0, 1)
    return np.moveaxis(out, -1, axis)


# ----------------------------------------------------------------------------
# 3D coarse transforms


def _as_array(volume) -> tuple[np.ndarray, float | None]:
    if isinstance(volume, VolumeGrid):
        return volume.values, volume.extent
    return np.asarray(volume, dtype=np.float64), None


def dwt3_coarse(volume, fb: FilterBank | str = DEFAULT_BANK):
    """Lowpass analysis plus 2x decimation along each axis.

    Accepts a VolumeGrid (returns one with the same extent) or a bare array.
    """
    fb = get_filter_bank(fb) if isinstance(fb, str) else fb
    vals, extent = _as_array(volume)
    for n in vals.shape:
        _check_length(n, fb)
    out = vals
    for axis in range(3):
        out = _lowpass_axis(out, fb, axis)
    return VolumeGrid(out, extent) if extent is not None else out


def _lowpass_axis(x: np.ndarray, fb: FilterBank, axis: int) -> np.ndarray:
    if fb.symmetry == "pair":
        return analyze_1d(x, fb, axis)[0]
    x = np.moveaxis(x, axis, -1)
    return np.moveaxis(_correlate_axis(x, fb.analysis_lowpass, 0, 2), -1, axis)


def idwt3_coarse(coarse, fb: FilterBank | str = DEFAULT_BANK):
    """Zero-insertion upsampling plus synthesis lowpass along each axis (details taken as zero)."""
    fb = get_filter_bank(fb) if isinstance(fb, str) else fb
    vals, extent = _as_array(coarse)
    out = vals
    for axis in range(3):
        out = synthesize_1d(out, None, fb, axis)
    return VolumeGrid(out, extent) if extent is not None else out


# ----------------------------------------------------------------------------
# pyramid


@dataclass(frozen=True)
class PyramidLevels:
    """C^1..C^J and Laplacian-style details D^j = C^(j-1) - idwt(C^j)."""

    coarse_chain: list[VolumeGrid]
    detail_chain: list[VolumeGrid]

    @property
    def depth(self) -> int:
        return len(self.coarse_chain)


@dataclass(frozen=True)
class WaveletPair:
    level: int
    coarse: VolumeGrid
    detail: VolumeGrid
    source_meta: TsdfConfig | None = None

    def __post_init__(self):
        if self.level < 1:
            raise InvalidInputError("level must be >= 1")
        if self.coarse.resolution * 2 != self.detail.resolution:
            raise InvalidInputError(
                f"detail resolution {self.detail.resolution} must be twice coarse {self.coarse.resolution}"
            )


def _as_grid(volume) -> VolumeGrid:
    if isinstance(volume, VolumeGrid):
        return volume
    return VolumeGrid(np.asarray(volume, dtype=np.float64), 1.0)


def decompose(tsdf, fb: FilterBank | str = DEFAULT_BANK, level: int = 3) -> PyramidLevels:
    fb = get_filter_bank(fb) if isinstance(fb, str) else fb
    grid = _as_grid(tsdf)
    if level < 1:
        raise InvalidInputError("level must be >= 1")
    if grid.resolution % (2**level):
        raise InvalidInputError(f"resolution {grid.resolution} is not divisible by 2**{level}")
    coarse, detail = [], []
    parent = grid.with_values(grid.values)
    for _ in range(level):
        child = dwt3_coarse(parent, fb)
        detail.append(parent.with_values(parent.values - idwt3_coarse(child.values, fb)))
        coarse.append(child)
        parent = child
    return PyramidLevels(coarse, detail)


def reconstruct_full(levels: PyramidLevels, fb: FilterBank | str = DEFAULT_BANK) -> VolumeGrid:
    fb = get_filter_bank(fb) if isinstance(fb, str) else fb
    current = levels.coarse_chain[-1]
    for detail in reversed(levels.detail_chain):
        current = detail.with_values(idwt3_coarse(current.values, fb) + detail.values)
    return current


def compact_pair(levels: PyramidLevels, level: int | None = None,
                 source_meta: TsdfConfig | None = None) -> WaveletPair:
    """Keep (C^J, D^J) and drop the finer details."""
    level = levels.depth if level is None else level
    if not 1 <= level <= levels.depth:
        raise InvalidInputError(f"pyramid depth {levels.depth} is smaller than level {level}")
    return WaveletPair(level, levels.coarse_chain[level - 1], levels.detail_chain[level - 1], source_meta)


def reconstruct_from_pair(pair: WaveletPair, fb: FilterBank | str = DEFAULT_BANK,
                          truncation: float | None = None) -> VolumeGrid:
    fb = get_filter_bank(fb) if isinstance(fb, str) else fb
    vals = idwt3_coarse(pair.coarse.values, fb) + pair.detail.values
    for _ in range(pair.level - 1):
        vals = idwt3_coarse(vals, fb)
    if truncation is None and pair.source_meta is not None:
        truncation = pair.source_meta.truncation
    return VolumeGrid(vals, pair.detail.extent, truncation)


def retained_fraction(resolution: int, level: int) -> float:
    """Share of the N^3 TSDF samples kept by the (C^J, D^J) pair."""
    coarse = (resolution // 2**level) ** 3
    detail = (resolution // 2 ** (level - 1)) ** 3
    return (coarse + detail) / resolution**3


# ----------------------------------------------------------------------------
# .wvp files


def encode_wvp(pair: WaveletPair) -> bytes:
    # the embedded headers carry the source TSDF truncation so it survives a round trip
    tau = pair.source_meta.truncation if pair.source_meta else None
    coarse = VolumeGrid(pair.coarse.values, pair.coarse.extent, tau)
    detail = VolumeGrid(pair.detail.values, pair.detail.extent, tau)
    return WVP_MAGIC + struct.pack("<I", pair.level) + encode_vol(coarse) + encode_vol(detail)


def decode_wvp(buf: bytes) -> WaveletPair:
    if buf[:4] != WVP_MAGIC:
        raise InvalidInputError(f"bad .wvp magic {buf[:4]!r}")
    (level,) = struct.unpack_from("<I", buf, 4)
    coarse, off = decode_vol(buf, 8)
    detail, end = decode_vol(buf, off)
    if end != len(buf):
        raise InvalidInputError("trailing bytes after .wvp payload")
    meta = None
    if detail.truncation:
        meta = TsdfConfig(detail.resolution * 2 ** (level - 1), detail.extent, detail.truncation)
    return WaveletPair(
        level,
        VolumeGrid(coarse.values, coarse.extent),
        VolumeGrid(detail.values, detail.extent),
        meta,
    )


def save_wvp(pair: WaveletPair, path) -> None:
    Path(path).write_bytes(encode_wvp(pair))


def load_wvp(path) -> WaveletPair:
    return decode_wvp(Path(path).read_bytes())
