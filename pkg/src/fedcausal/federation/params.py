"""Named, segmented parameter vectors shared by the coordinator and the workers."""

import base64
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np


def pack_array(a):
    """Base64 of little-endian float64 values; exact and much cheaper than decimal JSON."""
    a = np.asarray(a, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise ValueError("cannot serialize non-finite values")
    return base64.b64encode(a.astype("<f8").tobytes(order="C")).decode("ascii")


def unpack_array(text, shape):
    buf = base64.b64decode(text.encode("ascii"))
    size = int(np.prod(shape, dtype=np.int64))
    if len(buf) != 8 * size:
        raise ValueError(f"payload of {len(buf)} bytes does not match shape {list(shape)}")
    return np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(shape)


@dataclass
class Segment:
    name: str
    values: np.ndarray
    part: str = "global"  # "global" or "source:<id>"

    @property
    def shape(self):
        return tuple(self.values.shape)


class ParameterVector:
    """Ordered mapping ``name -> float64 array`` with a partition label per segment.

    The layout (names, shapes, order) is fixed after construction; only values
    change between rounds.
    """

    def __init__(self, segments=None):
        self._segs = OrderedDict()
        for seg in segments or []:
            self.add(seg.name, seg.values, seg.part)

    def add(self, name, values, part="global"):
        if name in self._segs:
            raise ValueError(f"duplicate segment {name!r}")
        self._segs[name] = Segment(name, np.array(values, dtype=np.float64), part)
        return self

    def __contains__(self, name):
        return name in self._segs

    def __getitem__(self, name):
        return self._segs[name].values

    def __setitem__(self, name, values):
        seg = self._segs[name]
        arr = np.asarray(values, dtype=np.float64)
        if arr.shape != seg.values.shape:
            raise ValueError(f"segment {name!r}: shape {arr.shape} != {seg.values.shape}")
        seg.values = arr.copy()

    def names(self):
        return list(self._segs)

    def items(self):
        return [(k, s.values) for k, s in self._segs.items()]

    def part(self, name):
        return self._segs[name].part

    def shapes(self):
        return OrderedDict((k, s.shape) for k, s in self._segs.items())

    @property
    def size(self):
        return int(sum(s.values.size for s in self._segs.values()))

    def flat(self):
        if not self._segs:
            return np.zeros(0)
        return np.concatenate([s.values.ravel() for s in self._segs.values()])

    def with_flat(self, flat):
        out = self.copy()
        off = 0
        for seg in out._segs.values():
            k = seg.values.size
            seg.values = np.asarray(flat[off:off + k], dtype=np.float64).reshape(seg.values.shape).copy()
            off += k
        if off != len(flat):
            raise ValueError("flat vector length does not match the layout")
        return out

    def copy(self):
        return ParameterVector([Segment(s.name, s.values.copy(), s.part) for s in self._segs.values()])

    def zeros_like(self):
        return ParameterVector([Segment(s.name, np.zeros_like(s.values), s.part) for s in self._segs.values()])

    def same_layout(self, other):
        return self.shapes() == other.shapes()

    def to_segments(self):
        """JSON-ready ``{name: {"shape", "part", "data"}}`` with ``data`` from :func:`pack_array`."""
        return {
            k: {"shape": list(s.shape), "part": s.part, "data": pack_array(s.values)}
            for k, s in self._segs.items()
        }

    @classmethod
    def from_segments(cls, segs, order=None):
        pv = cls()
        for k in order or segs:
            d = segs[k]
            pv.add(k, unpack_array(d["data"], d["shape"]), d.get("part", "global"))
        return pv

    def __repr__(self):
        return f"ParameterVector({', '.join(f'{k}{s.shape}' for k, s in self._segs.items())})"
