"""
Simulated secure aggregation with pairwise additive masks over 64-bit fixed point.

Each client encodes its (pre-weighted) delta as two's-complement fixed point, then adds
``+PRG(seed_ij)`` for every peer ``j > i`` and ``-PRG(seed_ij)`` for every ``j < i``. All
arithmetic wraps mod 2**64, so the masks cancel exactly in the server's sum and the server
never handles an unmasked individual update.
"""
from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Tuple

import numpy as np

from . import rng
from .errors import EncodingRangeError, ProtocolError

FRACTION_BITS = 24
SCALE = float(2**FRACTION_BITS)
# |value| * 2**24 must stay below 2**39
VALUE_LIMIT = float(2 ** (39 - FRACTION_BITS))

PairSeeds = Dict[Tuple[int, int], int]


@dataclass(frozen=True)
class MaskedUpdate:
    client_id: int
    masked_fixed: np.ndarray
    n_samples: int


def encode_fixed(values: np.ndarray) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    bad = ~np.isfinite(v) | (np.abs(v) >= VALUE_LIMIT)
    if bad.any():
        index = int(np.flatnonzero(bad)[0])
        raise EncodingRangeError(f"value {v[index]!r} at index {index} is outside the fixed-point range +-{VALUE_LIMIT:g}")
    return np.rint(v * SCALE).astype(np.int64).view(np.uint64)


def decode_fixed(encoded: np.ndarray) -> np.ndarray:
    return np.asarray(encoded, dtype=np.uint64).view(np.int64).astype(np.float64) / SCALE


def pairwise_seeds(seed: int, round_index: int, client_ids: Iterable[int]) -> PairSeeds:
    """One shared seed per unordered client pair, fresh every round."""
    ids = sorted(client_ids)
    return {
        (a, b): rng.derive_seed(seed, "secure-agg", round_index, a, b)
        for i, a in enumerate(ids)
        for b in ids[i + 1 :]
    }


def prg_mask(pair_seed: int, length: int) -> np.ndarray:
    return np.random.Philox(int(pair_seed)).random_raw(length).astype(np.uint64)


def mask_update(
    client_id: int,
    encoded: np.ndarray,
    n_samples: int,
    seeds: PairSeeds,
    peers: Iterable[int],
) -> MaskedUpdate:
    """Client side: add the pairwise masks to an encoded vector."""
    masked = np.array(encoded, dtype=np.uint64, copy=True)
    for peer in sorted(peers):
        if peer == client_id:
            continue
        pair = (min(client_id, peer), max(client_id, peer))
        if pair not in seeds:
            raise ProtocolError(f"no shared seed for clients {pair}")
        mask = prg_mask(seeds[pair], masked.size)
        if client_id < peer:
            masked += mask
        else:
            masked -= mask
    return MaskedUpdate(client_id, masked, n_samples)


def server_sum(updates: List[MaskedUpdate]) -> np.ndarray:
    """Server side: wrapping sum of masked vectors, in client-id order."""
    if not updates:
        raise ProtocolError("nothing to aggregate")
    sizes = {u.masked_fixed.size for u in updates}
    if len(sizes) != 1:
        raise ProtocolError(f"masked updates have different lengths {sorted(sizes)}")
    total = np.zeros(sizes.pop(), dtype=np.uint64)
    for update in sorted(updates, key=lambda u: u.client_id):
        total += update.masked_fixed
    return total


def secure_aggregate(
    deltas: Mapping[int, np.ndarray],
    seeds: PairSeeds,
    weights: Optional[Mapping[int, float]] = None,
    n_samples: Optional[Mapping[int, int]] = None,
) -> np.ndarray:
    """Decoded sum of ``weights[k] * deltas[k]`` computed through masked fixed point.

    Weighting happens client-side before encoding; without ``weights`` the plain sum
    is returned.
    """
    if len(deltas) < 2:
        raise ProtocolError(f"secure aggregation needs at least 2 clients, got {len(deltas)}")
    ids = sorted(deltas)
    masked = []
    for cid in ids:
        local = np.asarray(deltas[cid], dtype=np.float64)
        if weights is not None:
            local = local * weights[cid]
        count = n_samples[cid] if n_samples is not None else 0
        masked.append(mask_update(cid, encode_fixed(local), count, seeds, ids))
    return decode_fixed(server_sum(masked))
