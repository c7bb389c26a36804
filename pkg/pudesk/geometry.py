# encoding: utf-8

"""Axis-aligned box arithmetic: IoU, delta encoding, clipping and NMS.

Boxes are corner-coordinate rectangles on continuous pixel coordinates, with
area ``(xmax - xmin) * (ymax - ymin)``.

>>> a = Box(0, 0, 10, 10)
>>> round(iou(a, Box(5, 0, 15, 10)), 4)
0.3333
>>> decode_deltas(a, encode_deltas(a, Box(2, 3, 12, 13))).as_tuple()
(2.0, 3.0, 12.0, 13.0)
"""

import math
from dataclasses import dataclass

import numpy as np

from pudesk.errors import InvariantError, ParseError
from pudesk.log import get_logger


log = get_logger('pudesk.geometry')

#: The six pressure ulcer categories, in histogram order.
CLASSES = ('CategoryI', 'CategoryII', 'CategoryIII', 'CategoryIV', 'DTI',
           'Unstageable')
BACKGROUND = 'background'

#: Cap on |dw| and |dh| before exponentiation.
DELTA_CLAMP = math.log(1000.0 / 16)

_CLASS_KEYS = dict((name.lower(), name) for name in CLASSES)


def canonical_class(name):
    """Map a class name to one of :data:`CLASSES`.

    Matching ignores case, spaces, underscores and hyphens.

    >>> canonical_class('category ii')
    'CategoryII'
    >>> canonical_class('dti')
    'DTI'
    """
    key = ''.join(c for c in str(name).lower() if c not in ' _-')
    try:
        return _CLASS_KEYS[key]
    except KeyError:
        raise ParseError('unknown class %r; valid names are %s (matched '
                         'case-insensitively, ignoring spaces and '
                         'underscores)' % (name, ', '.join(CLASSES)),
                         field='class')


@dataclass(frozen=True)
class Box(object):
    """An axis-aligned pixel rectangle."""

    xmin: float
    ymin: float
    xmax: float
    ymax: float

    def __post_init__(self):
        for name in ('xmin', 'ymin', 'xmax', 'ymax'):
            object.__setattr__(self, name, float(getattr(self, name)))

    @property
    def width(self):
        return self.xmax - self.xmin

    @property
    def height(self):
        return self.ymax - self.ymin

    @property
    def area(self):
        if self.xmax <= self.xmin or self.ymax <= self.ymin:
            return 0.0
        return (self.xmax - self.xmin) * (self.ymax - self.ymin)

    @property
    def center(self):
        return (self.xmin + 0.5 * self.width, self.ymin + 0.5 * self.height)

    @property
    def is_valid(self):
        return (all(math.isfinite(v) for v in self.as_tuple())
                and self.xmin < self.xmax and self.ymin < self.ymax)

    def validate(self):
        """Raise :class:`InvariantError` unless the box has positive area."""
        if not self.is_valid:
            raise InvariantError('degenerate box %r' % (self.as_tuple(),))
        return self

    def as_tuple(self):
        return (self.xmin, self.ymin, self.xmax, self.ymax)

    def clip(self, width, height):
        """Clip to the image rectangle ``[0, width] x [0, height]``."""
        return Box(min(max(self.xmin, 0.0), width),
                   min(max(self.ymin, 0.0), height),
                   min(max(self.xmax, 0.0), width),
                   min(max(self.ymax, 0.0), height))

    def intersection(self, other):
        """Overlap rectangle, or None when the boxes do not overlap."""
        xmin = max(self.xmin, other.xmin)
        ymin = max(self.ymin, other.ymin)
        xmax = min(self.xmax, other.xmax)
        ymax = min(self.ymax, other.ymax)
        if xmax <= xmin or ymax <= ymin:
            return None
        return Box(xmin, ymin, xmax, ymax)

    @classmethod
    def from_center(cls, cx, cy, w, h):
        return cls(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)


@dataclass(frozen=True)
class BoxDelta(object):
    """Centre offsets (dx, dy) and log-scale size factors (dw, dh)."""

    dx: float
    dy: float
    dw: float
    dh: float

    def as_array(self):
        return np.array([self.dx, self.dy, self.dw, self.dh], dtype=float)

    @classmethod
    def from_array(cls, values):
        dx, dy, dw, dh = (float(v) for v in values)
        return cls(dx, dy, dw, dh)


@dataclass(frozen=True)
class LabeledBox(object):
    """A ground-truth box with its class."""

    box: Box
    class_name: str

    def __post_init__(self):
        object.__setattr__(self, 'class_name',
                           canonical_class(self.class_name))


@dataclass(frozen=True)
class Detection(object):
    """A scored, classified box produced for one image."""

    box: Box
    class_name: str
    confidence: float
    image_id: str = ''

    def __post_init__(self):
        object.__setattr__(self, 'class_name',
                           canonical_class(self.class_name))
        confidence = float(self.confidence)
        if not 0.0 <= confidence <= 1.0:
            raise InvariantError('confidence %r outside [0, 1]'
                                 % (self.confidence,))
        object.__setattr__(self, 'confidence', confidence)


def iou(a, b, strict=False):
    """Intersection over union of two boxes.

    Degenerate (zero-area) operands give 0, or raise in strict mode.

    >>> iou(Box(0, 0, 10, 10), Box(20, 20, 30, 30))
    0.0
    >>> iou(Box(0, 0, 10, 10), Box(0, 0, 10, 10))
    1.0
    """
    area_a = a.area
    area_b = b.area
    if area_a <= 0.0 or area_b <= 0.0:
        if strict:
            raise InvariantError('IoU of a degenerate box: %r, %r'
                                 % (a.as_tuple(), b.as_tuple()))
        return 0.0
    w = min(a.xmax, b.xmax) - max(a.xmin, b.xmin)
    h = min(a.ymax, b.ymax) - max(a.ymin, b.ymin)
    if w <= 0.0 or h <= 0.0:
        return 0.0
    inter = w * h
    return inter / (area_a + area_b - inter)


def boxes_to_array(boxes):
    """Stack boxes into an ``(N, 4)`` float array."""
    if not len(boxes):
        return np.zeros((0, 4), dtype=float)
    return np.array([b.as_tuple() for b in boxes], dtype=float)


def iou_matrix(a, b):
    """Pairwise IoU between two ``(N, 4)`` and ``(M, 4)`` arrays.

    Uses the same arithmetic as :func:`iou`, so results agree exactly.
    """
    a = np.asarray(a, dtype=float).reshape(-1, 4)
    b = np.asarray(b, dtype=float).reshape(-1, 4)
    area_a = np.clip(a[:, 2] - a[:, 0], 0, None) * \
        np.clip(a[:, 3] - a[:, 1], 0, None)
    area_b = np.clip(b[:, 2] - b[:, 0], 0, None) * \
        np.clip(b[:, 3] - b[:, 1], 0, None)
    w = np.minimum(a[:, None, 2], b[None, :, 2]) - \
        np.maximum(a[:, None, 0], b[None, :, 0])
    h = np.minimum(a[:, None, 3], b[None, :, 3]) - \
        np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.where((w > 0) & (h > 0), w * h, 0.0)
    union = area_a[:, None] + area_b[None, :] - inter
    valid = (area_a[:, None] > 0) & (area_b[None, :] > 0) & (inter > 0)
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=valid)
    return out


def encode_deltas(reference, target):
    """Deltas that transform ``reference`` into ``target``.

    >>> d = encode_deltas(Box.from_center(10, 10, 10, 10),
    ...                   Box.from_center(15, 10, 20, 10))
    >>> (d.dx, d.dy, round(d.dw, 4), d.dh)
    (0.5, 0.0, 0.6931, 0.0)
    """
    if reference.width <= 0 or reference.height <= 0:
        raise InvariantError('cannot encode against zero-size reference %r'
                             % (reference.as_tuple(),))
    if target.width <= 0 or target.height <= 0:
        raise InvariantError('cannot encode a zero-size target %r'
                             % (target.as_tuple(),))
    rx, ry = reference.center
    tx, ty = target.center
    return BoxDelta((tx - rx) / reference.width,
                    (ty - ry) / reference.height,
                    math.log(target.width / reference.width),
                    math.log(target.height / reference.height))


def decode_deltas(reference, delta, clip_to=None, clamp=DELTA_CLAMP):
    """Apply ``delta`` to ``reference``; the inverse of :func:`encode_deltas`.

    :param clip_to: Optional ``(width, height)`` image bounds to clip to.
    :param clamp: Cap on ``|dw|`` and ``|dh|``; larger values are clamped
                  with a warning.
    """
    if reference.width <= 0 or reference.height <= 0:
        raise InvariantError('cannot decode against zero-size reference %r'
                             % (reference.as_tuple(),))
    values = (delta.dx, delta.dy, delta.dw, delta.dh)
    if not all(math.isfinite(v) for v in values):
        raise InvariantError('non-finite delta %r' % (values,))
    dw, dh = delta.dw, delta.dh
    if abs(dw) > clamp or abs(dh) > clamp:
        log.warning('clamping size delta (%.4f, %.4f) to +/-%.4f',
                    dw, dh, clamp)
        dw = max(-clamp, min(clamp, dw))
        dh = max(-clamp, min(clamp, dh))
    rx, ry = reference.center
    box = Box.from_center(rx + delta.dx * reference.width,
                          ry + delta.dy * reference.height,
                          reference.width * math.exp(dw),
                          reference.height * math.exp(dh))
    if clip_to is not None:
        box = box.clip(*clip_to)
    return box


def _nms_order(confidences):
    # descending confidence, then lower input index first
    return sorted(range(len(confidences)),
                  key=lambda i: (-confidences[i], i))


def nms_indices(boxes, confidences, iou_threshold):
    """Indices kept by greedy NMS over parallel box and score lists."""
    order = _nms_order(confidences)
    keep = []
    if not order:
        return keep
    array = boxes_to_array(boxes)
    overlaps = iou_matrix(array, array)
    suppressed = np.zeros(len(boxes), dtype=bool)
    for i in order:
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= overlaps[i] > iou_threshold
    return keep


def nms(detections, iou_threshold=0.5, class_wise=False):
    """Greedy non-maximum suppression.

    Boxes are visited in descending confidence (ties: lower input index
    first); each kept box suppresses every later box whose IoU with it
    exceeds ``iou_threshold``. With ``class_wise`` suppression only happens
    within a class. The result is sorted by descending confidence.

    >>> dets = [Detection(Box(0, 0, 10, 10), 'DTI', 0.7),
    ...         Detection(Box(0, 0, 10, 9), 'DTI', 0.9)]
    >>> [d.confidence for d in nms(dets, 0.6)]
    [0.9]
    """
    if not 0.0 < iou_threshold < 1.0:
        raise InvariantError('NMS threshold %r outside (0, 1)'
                             % (iou_threshold,))
    detections = list(detections)
    if not detections:
        return []
    if class_wise:
        groups = {}
        for index, det in enumerate(detections):
            groups.setdefault(det.class_name, []).append(index)
    else:
        groups = {None: list(range(len(detections)))}
    kept = []
    for indices in groups.values():
        members = [detections[i] for i in indices]
        local = nms_indices([d.box for d in members],
                            [d.confidence for d in members], iou_threshold)
        kept.extend(indices[i] for i in local)
    kept.sort(key=lambda i: (-detections[i].confidence, i))
    log.fine('nms kept %d of %d boxes', len(kept), len(detections))
    return [detections[i] for i in kept]
