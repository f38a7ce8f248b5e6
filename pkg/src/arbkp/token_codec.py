"""Keypoint query tokens: a keypoint vector ``v_p`` over the 17 slots and a
thickness vector ``v_t`` of length 3.

``v_p`` holds ``alpha`` at ``k_i`` and ``1 - alpha`` at ``k_j``. ``v_t`` is
``(1-b, b, 0)`` for limb points on the c1 side, ``(0, b, 1-b)`` on the c2 side
and ``(b, 0, 1-b)`` on skis; standard and projection points use ``(0, 1, 0)``.

The encoding is not injective everywhere. A limb point with ``beta = 1`` is
``p`` on either side; an endpoint ``alpha`` gives a one-hot ``v_p`` that cannot
name its segment when the slot is shared (elbow, knee). :func:`canonical`
maps a spec to the representative that :func:`decode` returns.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datamodel import KEYPOINT_NAMES, NUM_KEYPOINTS
from .geometry import (
    DEFAULT_SEGMENTS,
    LIMB,
    PROJECTION,
    SKI,
    STANDARD,
    ArbitraryKeypointSpec,
)

THICKNESS_DIM = 3


class TokenError(ValueError):
    pass


class MalformedTokenError(TokenError):
    pass


class UnknownSegmentError(TokenError):
    pass


@dataclass(frozen=True, eq=False)
class QueryToken:
    v_p: np.ndarray
    v_t: np.ndarray

    def __eq__(self, other):
        return (
            isinstance(other, QueryToken)
            and np.array_equal(self.v_p, other.v_p)
            and np.array_equal(self.v_t, other.v_t)
        )

    def vector(self):
        return np.concatenate([self.v_p, self.v_t])

    def to_text(self):
        return " ".join(repr(float(v)) for v in self.vector())

    @classmethod
    def from_text(cls, text):
        values = np.array([float(v) for v in text.replace(",", " ").split()])
        if values.size != NUM_KEYPOINTS + THICKNESS_DIM:
            raise MalformedTokenError(
                f"expected {NUM_KEYPOINTS + THICKNESS_DIM} numbers, got {values.size}"
            )
        return cls(values[:NUM_KEYPOINTS], values[NUM_KEYPOINTS:])


def _check_unit(name, value):
    if not 0.0 <= value <= 1.0:
        raise TokenError(f"{name}={value} outside [0, 1]")


def encode(spec, table=DEFAULT_SEGMENTS):
    _check_unit("alpha", spec.alpha)
    _check_unit("beta", spec.beta)
    v_p = np.zeros(NUM_KEYPOINTS)
    v_t = np.zeros(THICKNESS_DIM)
    if spec.kind == STANDARD:
        v_p[KEYPOINT_NAMES.index(spec.keypoint)] = 1.0
        v_t[1] = 1.0
        return QueryToken(v_p, v_t)
    seg = table[spec.segment_id]
    v_p[seg.k_j] = 1.0 - spec.alpha
    v_p[seg.k_i] = spec.alpha
    if spec.kind == PROJECTION:
        v_t[1] = 1.0
    elif spec.kind == LIMB:
        if spec.side == "c1":
            v_t[:] = (1.0 - spec.beta, spec.beta, 0.0)
        else:
            v_t[:] = (0.0, spec.beta, 1.0 - spec.beta)
    elif spec.kind == SKI:
        v_t[:] = (spec.beta, 0.0, 1.0 - spec.beta)
    return QueryToken(v_p, v_t)


def encode_batch(specs, table=DEFAULT_SEGMENTS):
    """Stack tokens as an ``(n, 20)`` float array."""
    out = np.zeros((len(specs), NUM_KEYPOINTS + THICKNESS_DIM))
    for row, spec in zip(out, specs):
        tok = encode(spec, table)
        row[:NUM_KEYPOINTS] = tok.v_p
        row[NUM_KEYPOINTS:] = tok.v_t
    return out


def _validate(token):
    v_p = np.asarray(token.v_p, dtype=np.float64)
    v_t = np.asarray(token.v_t, dtype=np.float64)
    if v_p.shape != (NUM_KEYPOINTS,) or v_t.shape != (THICKNESS_DIM,):
        raise MalformedTokenError("token vectors have the wrong length")
    for name, v in (("v_p", v_p), ("v_t", v_t)):
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise MalformedTokenError(f"{name} has negative or non-finite entries")
        if np.count_nonzero(v) > 2:
            raise MalformedTokenError(f"{name} has more than two nonzero entries")
        if abs(v.sum() - 1.0) > 1e-9:
            raise MalformedTokenError(f"{name} does not sum to 1")
    return v_p, v_t


def decode(token, table=DEFAULT_SEGMENTS):
    v_p, v_t = _validate(token)
    support = np.flatnonzero(v_p)
    standard_vt = v_t[1] == 1.0
    if support.size == 1:
        slot = int(support[0])
        if standard_vt:
            return ArbitraryKeypointSpec.standard(slot)
        candidates = table.with_slot(slot)
        if not candidates:
            raise UnknownSegmentError(f"slot {KEYPOINT_NAMES[slot]} belongs to no segment")
        seg = candidates[0]
        alpha = 1.0 if seg.k_i == slot else 0.0
    else:
        seg = table.by_pair(int(support[0]), int(support[1]))
        if seg is None:
            names = [KEYPOINT_NAMES[i] for i in support]
            raise UnknownSegmentError(f"slots {names} do not form a segment")
        alpha = float(v_p[seg.k_i])
    if seg.kind == SKI:
        if standard_vt:
            return ArbitraryKeypointSpec.projection(seg.segment_id, alpha)
        if v_t[1] != 0.0:
            raise MalformedTokenError("ski tokens have no middle thickness component")
        return ArbitraryKeypointSpec.ski(seg.segment_id, alpha, float(v_t[0]))
    if v_t[0] != 0.0 and v_t[2] != 0.0:
        raise MalformedTokenError("limb tokens cannot use both sides")
    if v_t[2] == 0.0:
        return ArbitraryKeypointSpec.limb(seg.segment_id, alpha, "c1", float(v_t[1]))
    return ArbitraryKeypointSpec.limb(seg.segment_id, alpha, "c2", float(v_t[1]))


def canonical(spec, table=DEFAULT_SEGMENTS):
    """The representative of ``spec``'s token class returned by :func:`decode`."""
    return decode(encode(spec, table), table)
