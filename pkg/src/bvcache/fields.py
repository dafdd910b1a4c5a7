"""Named, serializable scalar fields for sources and boundary data."""
from dataclasses import asdict, dataclass, field

import numpy as np


def _pts(points):
    return np.asarray(points, dtype=np.float64).reshape(-1, 2)


@dataclass(frozen=True)
class Constant:
    value: float = 0.0

    def __call__(self, points):
        return np.full(len(_pts(points)), float(self.value))


@dataclass(frozen=True)
class Linear:
    """a·x + b·y + c."""
    a: float = 0.0
    b: float = 0.0
    c: float = 0.0

    def __call__(self, points):
        p = _pts(points)
        return self.a * p[:, 0] + self.b * p[:, 1] + self.c

    def gradient(self, points):
        return np.tile([self.a, self.b], (len(_pts(points)), 1)).astype(np.float64)


@dataclass(frozen=True)
class Radial:
    """a·r² + b·log r + c with r measured from ``center``."""
    a: float = 0.0
    b: float = 0.0
    c: float = 0.0
    center: tuple = (0.0, 0.0)

    def __call__(self, points):
        d = _pts(points) - np.asarray(self.center, dtype=np.float64)
        r2 = np.einsum("ij,ij->i", d, d)
        out = self.a * r2 + self.c
        if self.b:
            with np.errstate(divide="ignore"):
                out = out + 0.5 * self.b * np.log(r2)
        return out

    def gradient(self, points):
        d = _pts(points) - np.asarray(self.center, dtype=np.float64)
        r2 = np.einsum("ij,ij->i", d, d)
        scale = 2.0 * self.a + (self.b / r2 if self.b else 0.0)
        return d * scale[:, None] if np.ndim(scale) else d * scale


@dataclass(frozen=True)
class HarmonicPoly:
    """a·Re(z^n) + b·Im(z^n), z = (x - x0) + i(y - y0)."""
    degree: int = 1
    a: float = 1.0
    b: float = 0.0
    center: tuple = (0.0, 0.0)

    def _z(self, points):
        p = _pts(points) - np.asarray(self.center, dtype=np.float64)
        return p[:, 0] + 1j * p[:, 1]

    def __call__(self, points):
        w = self._z(points) ** self.degree
        return self.a * w.real + self.b * w.imag

    def gradient(self, points):
        if self.degree == 0:
            return np.zeros((len(_pts(points)), 2))
        dw = self.degree * self._z(points) ** (self.degree - 1)
        # d/dx = f'(z), d/dy = i f'(z)
        gx = self.a * dw.real + self.b * dw.imag
        gy = -self.a * dw.imag + self.b * dw.real
        return np.column_stack([gx, gy])


@dataclass(frozen=True)
class Checkerboard:
    cell: float = 0.25
    low: float = 0.0
    high: float = 1.0
    origin: tuple = (0.0, 0.0)

    def __call__(self, points):
        p = (_pts(points) - np.asarray(self.origin, dtype=np.float64)) / self.cell
        parity = (np.floor(p[:, 0]) + np.floor(p[:, 1])) % 2
        return np.where(parity == 0, self.low, self.high).astype(np.float64)


@dataclass(frozen=True)
class PerSegmentConstant:
    """Constant per boundary segment id; ``default`` for unlisted ids."""
    values: tuple = ()
    default: float = 0.0
    uses_segments = True

    def __call__(self, points, segments=None):
        n = len(_pts(points))
        if segments is None:
            return np.full(n, float(self.default))
        seg = np.asarray(segments, dtype=np.int64)
        table = np.asarray(self.values, dtype=np.float64)
        ok = (seg >= 0) & (seg < len(table))
        out = np.full(n, float(self.default))
        out[ok] = table[seg[ok]]
        return out


FIELD_TYPES = {
    "constant": Constant,
    "linear": Linear,
    "radial": Radial,
    "harmonic-poly": HarmonicPoly,
    "checkerboard": Checkerboard,
    "per-segment-constant": PerSegmentConstant,
}


def make_field(spec):
    """Build a field from ``{"type": name, **params}``; None stays None."""
    if spec is None:
        return None
    params = dict(spec)
    name = params.pop("type", None)
    if name not in FIELD_TYPES:
        raise ValueError(f"unknown field type {name!r}; expected one of {sorted(FIELD_TYPES)}")
    cls = FIELD_TYPES[name]
    for key in ("center", "origin", "values"):
        if key in params and params[key] is not None:
            params[key] = tuple(params[key])
    try:
        return cls(**params)
    except TypeError as exc:
        raise ValueError(f"bad parameters for field {name!r}: {exc}") from None


def field_spec(fld):
    """Inverse of make_field for the built-in types."""
    if fld is None:
        return None
    for name, cls in FIELD_TYPES.items():
        if type(fld) is cls:
            d = asdict(fld)
            for k, v in d.items():
                if isinstance(v, tuple):
                    d[k] = list(v)
            return {"type": name, **d}
    raise ValueError(f"{fld!r} is not a built-in field")
