# encoding: utf-8

"""Annotation ingestion, canonical CSV and manifest files, the train/val
split, and geometric transforms of annotated records.

Only geometry and metadata are transformed; image bytes are never touched.

>>> record = parse_voc('''<annotation><filename>a.jpg</filename>
...   <size><width>600</width><height>400</height></size>
...   <object><name>CategoryII</name><bndbox><xmin>10</xmin><ymin>20</ymin>
...   <xmax>110</xmax><ymax>220</ymax></bndbox></object></annotation>''')
>>> record.image_id, record.annotations[0].box.as_tuple()
('a.jpg', (10.0, 20.0, 110.0, 220.0))
"""

import math
import os
import re
import xml.etree.ElementTree as ET
from collections import OrderedDict, namedtuple
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
import pandas as pd
import simplejson

from pudesk.errors import EmptyResultError, InvariantError, ParseError
from pudesk.geometry import CLASSES, Box, LabeledBox, canonical_class
from pudesk.log import get_logger


log = get_logger('pudesk.dataset')

PROVENANCES = ('medetec', 'web', 'trial')
CANONICAL_COLUMNS = ('filename', 'width', 'height', 'class', 'xmin', 'ymin',
                     'xmax', 'ymax')

#: Default ranges for randomly drawn augmentation parameters.
AUGMENT_RANGES = {
    'rotate': (-15.0, 15.0),
    'tilt': (-5.0, 5.0),
    'scale': (0.9, 1.1),
    'skew': (-0.15, 0.15),
}
MIN_RETAINED_AREA = 0.25


@dataclass(frozen=True)
class ImageRecord(object):
    """One image's annotations."""

    image_id: str
    source_path: str
    width: float
    height: float
    annotations: tuple = ()
    provenance: str = 'web'

    def __post_init__(self):
        object.__setattr__(self, 'annotations', tuple(self.annotations))
        if self.provenance not in PROVENANCES:
            raise InvariantError('unknown provenance %r; expected one of %s'
                                 % (self.provenance, ', '.join(PROVENANCES)))

    def validate(self):
        """Check the record invariant; raises :class:`InvariantError`."""
        if self.width < 1 or self.height < 1:
            raise InvariantError('%s: image size %rx%r is not positive'
                                 % (self.image_id, self.width, self.height))
        for annotation in self.annotations:
            box = annotation.box
            if not box.is_valid or box.xmin < 0 or box.ymin < 0 or \
                    box.xmax > self.width or box.ymax > self.height:
                raise InvariantError('%s: box %r outside %rx%r image'
                                     % (self.image_id, box.as_tuple(),
                                        self.width, self.height))
        return self


@dataclass(frozen=True)
class DatasetManifest(object):
    """Records sorted by image_id, plus an optional split tag."""

    records: tuple = ()
    split_tag: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, 'records', tuple(
            sorted(self.records, key=lambda r: r.image_id)))
        if self.split_tag not in (None, 'train', 'val', 'test'):
            raise InvariantError('unknown split tag %r' % (self.split_tag,))

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def class_histogram(self):
        return class_histogram(self.records)

    @property
    def num_objects(self):
        return sum(len(r.annotations) for r in self.records)


def class_histogram(records):
    """Annotation count per class, in :data:`CLASSES` order.

    >>> list(class_histogram([]).values())
    [0, 0, 0, 0, 0, 0]
    """
    histogram = OrderedDict((name, 0) for name in CLASSES)
    for record in records:
        for annotation in record.annotations:
            histogram[annotation.class_name] += 1
    return histogram


def _finish_boxes(image_id, raw, width, height, strict):
    """Turn (class, xmin, ymin, xmax, ymax) tuples into LabeledBoxes,
    clamping (lenient) or rejecting (strict) boxes outside the image."""
    annotations = []
    for name, xmin, ymin, xmax, ymax in raw:
        box = Box(xmin, ymin, xmax, ymax)
        if not box.is_valid:
            if strict:
                raise InvariantError('%s: degenerate box %r'
                                     % (image_id, box.as_tuple()))
            log.warning('%s: dropping degenerate box %r', image_id,
                        box.as_tuple())
            continue
        clipped = box.clip(width, height)
        if clipped != box:
            if strict:
                raise InvariantError('%s: box %r outside %rx%r image'
                                     % (image_id, box.as_tuple(), width,
                                        height))
            log.warning('%s: clamping box %r to the image', image_id,
                        box.as_tuple())
            if not clipped.is_valid:
                log.warning('%s: dropping box with no area inside the image',
                            image_id)
                continue
            box = clipped
        annotations.append(LabeledBox(box, name))
    return annotations


def _number(element, path, image_id):
    node = element.find(path)
    if node is None or node.text is None:
        raise ParseError('%s: missing <%s> element' % (image_id, path),
                         field=path)
    try:
        return float(node.text.strip())
    except ValueError:
        raise ParseError('%s: <%s> is not a number: %r'
                         % (image_id, path, node.text), field=path)


def parse_voc(xml_text, strict=False, provenance='web', source_path=''):
    """Parse one Pascal VOC annotation document into an ImageRecord."""
    try:
        root = ET.fromstring(xml_text)
    except ET.ParseError as e:
        raise ParseError('%s: malformed XML: %s' % (source_path or '<xml>', e))
    image_id = (root.findtext('filename') or '').strip() or \
        os.path.splitext(os.path.basename(source_path))[0]
    if not image_id:
        raise ParseError('annotation has no <filename>', field='filename')
    size = root.find('size')
    if size is None:
        raise ParseError('%s: missing <size> element' % image_id,
                         field='size')
    width = _number(size, 'width', image_id)
    height = _number(size, 'height', image_id)
    raw = []
    for obj in root.findall('object'):
        name = (obj.findtext('name') or '').strip()
        bndbox = obj.find('bndbox')
        if bndbox is None:
            raise ParseError('%s: object %r has no <bndbox>' % (image_id,
                                                                name),
                             field='bndbox')
        raw.append((canonical_class(name),
                    _number(bndbox, 'xmin', image_id),
                    _number(bndbox, 'ymin', image_id),
                    _number(bndbox, 'xmax', image_id),
                    _number(bndbox, 'ymax', image_id)))
    record = ImageRecord(image_id, source_path or root.findtext('path') or '',
                         width, height,
                         _finish_boxes(image_id, raw, width, height, strict),
                         provenance)
    return record.validate()


def parse_labelme(annotation_text, strict=False, provenance='web',
                  source_path=''):
    """Parse one Labelme annotation (rectangle shapes only)."""
    try:
        document = simplejson.loads(annotation_text)
    except simplejson.JSONDecodeError as e:
        raise ParseError('%s: malformed JSON: %s'
                         % (source_path or '<labelme>', e))
    image_path = document.get('imagePath') or source_path
    image_id = os.path.basename(image_path or '')
    if not image_id:
        raise ParseError('annotation has no imagePath', field='imagePath')
    try:
        width = float(document['imageWidth'])
        height = float(document['imageHeight'])
    except (KeyError, TypeError, ValueError):
        raise ParseError('%s: imageWidth/imageHeight missing or invalid'
                         % image_id, field='imageWidth')
    raw = []
    for shape in document.get('shapes') or []:
        shape_type = shape.get('shape_type') or 'polygon'
        if shape_type != 'rectangle':
            raise ParseError('%s: %s shapes are not supported, only '
                             'rectangles' % (image_id, shape_type),
                             field='shape_type')
        points = shape.get('points') or []
        if len(points) != 2:
            raise ParseError('%s: rectangle needs two points, got %d'
                             % (image_id, len(points)), field='points')
        (x1, y1), (x2, y2) = points
        raw.append((canonical_class(shape.get('label')),
                    min(x1, x2), min(y1, y2), max(x1, x2), max(y1, y2)))
    record = ImageRecord(image_id, source_path or image_path, width, height,
                         _finish_boxes(image_id, raw, width, height, strict),
                         provenance)
    return record.validate()


def detect_format(path):
    """'voc' or 'labelme' from a file extension."""
    extension = os.path.splitext(path)[1].lower()
    if extension == '.xml':
        return 'voc'
    if extension == '.json':
        return 'labelme'
    raise ParseError('cannot tell the annotation format of %r; pass '
                     '--input-format' % path)


def load_annotation(path, input_format=None, strict=False,
                    provenance='web'):
    """Read and parse one annotation file."""
    input_format = input_format or detect_format(path)
    with open(path, encoding='utf-8') as fd:
        text = fd.read()
    if input_format == 'voc':
        return parse_voc(text, strict, provenance, path)
    if input_format == 'labelme':
        return parse_labelme(text, strict, provenance, path)
    raise ParseError('unknown annotation format %r' % input_format)


def to_canonical(records):
    """One row per annotation, ordered by filename then box order."""
    rows = []
    for record in sorted(records, key=lambda r: r.image_id):
        for annotation in record.annotations:
            rows.append((record.image_id, record.width, record.height,
                         annotation.class_name) + annotation.box.as_tuple())
    return pd.DataFrame(rows, columns=list(CANONICAL_COLUMNS))


def write_canonical(records, path_or_buffer=None):
    """Write canonical CSV (UTF-8, header, LF). Returns the text when no
    destination is given."""
    return to_canonical(records).to_csv(
        path_or_buffer, index=False, lineterminator='\n',
        float_format='%.10g', encoding='utf-8')


def read_canonical(path_or_buffer, provenance='web'):
    """Rebuild records from canonical CSV, grouping rows by filename."""
    try:
        frame = pd.read_csv(path_or_buffer, dtype={'filename': str,
                                                   'class': str},
                            float_precision='round_trip')
    except (pd.errors.ParserError, pd.errors.EmptyDataError, ValueError) as e:
        raise ParseError('malformed canonical CSV: %s' % e)
    missing = set(CANONICAL_COLUMNS) - set(frame.columns)
    if missing:
        raise ParseError('canonical CSV lacks columns: %s'
                         % ', '.join(sorted(missing)))
    grouped = OrderedDict()
    for row in frame.to_dict('records'):
        entry = grouped.setdefault(row['filename'],
                                   [row['width'], row['height'], []])
        entry[2].append(LabeledBox(Box(row['xmin'], row['ymin'], row['xmax'],
                                       row['ymax']), row['class']))
    return [ImageRecord(name, '', float(w), float(h), boxes,
                        provenance).validate()
            for name, (w, h, boxes) in grouped.items()]


def record_to_dict(record):
    return OrderedDict([
        ('image_id', record.image_id),
        ('source_path', record.source_path),
        ('width', record.width),
        ('height', record.height),
        ('provenance', record.provenance),
        ('annotations', [OrderedDict([
            ('class', a.class_name),
            ('xmin', a.box.xmin), ('ymin', a.box.ymin),
            ('xmax', a.box.xmax), ('ymax', a.box.ymax)])
            for a in record.annotations]),
    ])


def record_from_dict(data):
    try:
        return ImageRecord(
            str(data['image_id']), data.get('source_path', ''),
            float(data['width']), float(data['height']),
            [LabeledBox(Box(a['xmin'], a['ymin'], a['xmax'], a['ymax']),
                        a['class']) for a in data.get('annotations', [])],
            data.get('provenance', 'web')).validate()
    except (KeyError, TypeError) as e:
        raise ParseError('malformed manifest record: %r' % (e,))


def manifest_lines(manifest):
    """Serialise a manifest as one JSON record per line."""
    return ''.join(simplejson.dumps(record_to_dict(r)) + '\n'
                   for r in manifest.records)


def write_manifest(manifest, path):
    with open(path, 'w', encoding='utf-8', newline='\n') as fd:
        fd.write(manifest_lines(manifest))


def read_manifest(path_or_text, split_tag=None):
    """Load a manifest from a path, or from text when given a file object."""
    if hasattr(path_or_text, 'read'):
        lines = path_or_text.read().splitlines()
    else:
        with open(path_or_text, encoding='utf-8') as fd:
            lines = fd.read().splitlines()
    records = []
    for number, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            data = simplejson.loads(line)
        except simplejson.JSONDecodeError as e:
            raise ParseError('manifest line %d: %s' % (number, e))
        records.append(record_from_dict(data))
    return DatasetManifest(records, split_tag)


def load_records(path):
    """Records from either canonical CSV (``.csv``) or a manifest file."""
    if path.lower().endswith('.csv'):
        return read_canonical(path)
    return list(read_manifest(path).records)


def split(manifest, train_fraction=0.9, seed=0):
    """Partition whole images into train and validation manifests.

    The validation side gets ``floor(n * (1 - train_fraction))`` images
    (at least one, and at least one stays in train).

    >>> m = DatasetManifest([ImageRecord(str(i), '', 10, 10)
    ...                      for i in range(4291)])
    >>> [len(part) for part in split(m, 0.9)]
    [3862, 429]
    """
    if not 0.0 < train_fraction < 1.0:
        raise InvariantError('train fraction %r outside (0, 1)'
                             % (train_fraction,))
    records = list(manifest.records)
    n = len(records)
    if n < 2:
        raise InvariantError('need at least 2 images to split, got %d' % n)
    n_val = int(math.floor(n * (1.0 - train_fraction) + 1e-9))
    n_val = min(max(n_val, 1), n - 1)
    order = np.random.default_rng(seed).permutation(n)
    val = [records[i] for i in order[:n_val]]
    train = [records[i] for i in order[n_val:]]
    train = DatasetManifest(train, 'train')
    val = DatasetManifest(val, 'val')
    log.info('split %d images: train %s, val %s', n,
             dict(train.class_histogram), dict(val.class_histogram))
    return train, val


@dataclass(frozen=True)
class Letterbox(object):
    """Uniform scale plus symmetric padding onto a square canvas."""

    scale: float
    pad_x: float
    pad_y: float
    target: float

    def apply_box(self, box):
        return Box(box.xmin * self.scale + self.pad_x,
                   box.ymin * self.scale + self.pad_y,
                   box.xmax * self.scale + self.pad_x,
                   box.ymax * self.scale + self.pad_y)

    def invert_box(self, box):
        return Box((box.xmin - self.pad_x) / self.scale,
                   (box.ymin - self.pad_y) / self.scale,
                   (box.xmax - self.pad_x) / self.scale,
                   (box.ymax - self.pad_y) / self.scale)


def letterbox_resize(record, target=1024):
    """Scale so the longer side equals ``target`` and pad the shorter side.

    >>> r = ImageRecord('a', '', 2048, 1024,
    ...                 [LabeledBox(Box(0, 0, 2048, 1024), 'DTI')])
    >>> out, lb = letterbox_resize(r)
    >>> lb.scale, out.annotations[0].box.as_tuple()
    (0.5, (0.0, 256.0, 1024.0, 768.0))
    """
    if record.width <= 0 or record.height <= 0 or target <= 0:
        raise InvariantError('letterbox needs positive sizes')
    scale = float(target) / max(record.width, record.height)
    transform = Letterbox(scale,
                          (target - record.width * scale) / 2.0,
                          (target - record.height * scale) / 2.0,
                          float(target))
    annotations = [LabeledBox(transform.apply_box(a.box), a.class_name)
                   for a in record.annotations]
    return (replace(record, width=float(target), height=float(target),
                    annotations=annotations), transform)


AugmentOp = namedtuple('AugmentOp', 'name param')

_OP_PATTERN = re.compile(r'^\s*(flip_h|flip_v|rotate|tilt|scale|skew)'
                         r'\s*(?:\(\s*([^)]*?)\s*\))?\s*$')


def parse_ops(text):
    """Parse an op list such as ``'flip_h,rotate(90),scale'``.

    >>> parse_ops('flip_h, rotate(90), skew')
    [AugmentOp(name='flip_h', param=None), AugmentOp(name='rotate', param=90.0), AugmentOp(name='skew', param=None)]
    """
    ops = []
    for part in (p for p in text.split(',') if p.strip()):
        match = _OP_PATTERN.match(part)
        if not match:
            raise ParseError('unknown augmentation op %r' % part.strip())
        name, param = match.groups()
        if param and name.startswith('flip'):
            raise ParseError('%s takes no parameter' % name)
        try:
            ops.append(AugmentOp(name, float(param) if param else None))
        except ValueError:
            raise ParseError('bad parameter for %s: %r' % (name, param))
    return ops


def _about_center(matrix, width, height):
    cx, cy = width / 2.0, height / 2.0
    to_origin = np.array([[1.0, 0, -cx], [0, 1.0, -cy], [0, 0, 1.0]])
    back = np.array([[1.0, 0, cx], [0, 1.0, cy], [0, 0, 1.0]])
    return back @ matrix @ to_origin


def _op_matrix(op, width, height):
    name, param = op
    if name == 'flip_h':
        return np.array([[-1.0, 0, width], [0, 1.0, 0], [0, 0, 1.0]])
    if name == 'flip_v':
        return np.array([[1.0, 0, 0], [0, -1.0, height], [0, 0, 1.0]])
    if name in ('rotate', 'tilt'):
        theta = math.radians(param)
        c, s = math.cos(theta), math.sin(theta)
        return _about_center(np.array([[c, s, 0], [-s, c, 0], [0, 0, 1.0]]),
                             width, height)
    if name == 'scale':
        if param <= 0:
            raise InvariantError('scale factor must be positive, got %r'
                                 % param)
        return _about_center(np.diag([param, param, 1.0]), width, height)
    if name == 'skew':
        return _about_center(np.array([[1.0, param, 0], [0, 1.0, 0],
                                       [0, 0, 1.0]]), width, height)
    raise ParseError('unknown augmentation op %r' % name)


def augment(record, ops, seed=0, strict=False,
            min_area_fraction=MIN_RETAINED_AREA):
    """Map a record's boxes through a sequence of affine ops.

    Ops run in order about the image centre on a canvas of unchanged size.
    Ops with no parameter draw one from :data:`AUGMENT_RANGES` using
    ``seed``. Each box becomes the axis-aligned hull of its four transformed
    corners, clipped to the image; boxes keeping less than
    ``min_area_fraction`` of their hull area are dropped.
    """
    rng = np.random.default_rng(seed)
    matrix = np.eye(3)
    resolved = []
    for op in ops:
        if isinstance(op, str):
            op = parse_ops(op)[0]
        op = AugmentOp(*op)
        if op.param is None and op.name in AUGMENT_RANGES:
            op = AugmentOp(op.name, float(rng.uniform(*AUGMENT_RANGES[op.name])))
        if op.param is not None and not math.isfinite(op.param):
            raise InvariantError('non-finite parameter for %s' % op.name)
        resolved.append(op)
        matrix = _op_matrix(op, record.width, record.height) @ matrix
    log.fine('%s: augment %s', record.image_id, resolved)

    annotations = []
    for annotation in record.annotations:
        box = annotation.box
        corners = np.array([[box.xmin, box.xmin, box.xmax, box.xmax],
                            [box.ymin, box.ymax, box.ymin, box.ymax],
                            [1.0, 1.0, 1.0, 1.0]])
        mapped = matrix @ corners
        hull = Box(mapped[0].min(), mapped[1].min(),
                   mapped[0].max(), mapped[1].max())
        clipped = hull.clip(record.width, record.height)
        if not clipped.is_valid or \
                clipped.area < min_area_fraction * hull.area:
            log.warning('%s: dropping %s box cut below %.0f%% of its area',
                        record.image_id, annotation.class_name,
                        100 * min_area_fraction)
            continue
        annotations.append(LabeledBox(clipped, annotation.class_name))
    if record.annotations and not annotations:
        message = '%s: augmentation removed every annotation' % \
            record.image_id
        if strict:
            raise EmptyResultError(message)
        log.warning(message)
    return replace(record, annotations=annotations)


def crop_window(record, window, min_retained=MIN_RETAINED_AREA):
    """Crop a record to ``window``, re-expressing boxes in window
    coordinates. Boxes keeping less than ``min_retained`` of their area are
    dropped.
    """
    if not window.is_valid or window.xmin < 0 or window.ymin < 0 or \
            window.xmax > record.width or window.ymax > record.height:
        raise InvariantError('%s: crop window %r outside %rx%r image'
                             % (record.image_id, window.as_tuple(),
                                record.width, record.height))
    annotations = []
    touched = False
    for annotation in record.annotations:
        inter = annotation.box.intersection(window)
        if inter is None:
            continue
        touched = True
        if inter.area < min_retained * annotation.box.area:
            log.fine('%s: dropping %s box, %.2f retained', record.image_id,
                     annotation.class_name,
                     inter.area / annotation.box.area)
            continue
        annotations.append(LabeledBox(
            Box(inter.xmin - window.xmin, inter.ymin - window.ymin,
                inter.xmax - window.xmin, inter.ymax - window.ymin),
            annotation.class_name))
    if record.annotations and not touched:
        log.warning('%s: crop window %r misses every annotation',
                    record.image_id, window.as_tuple())
    return replace(record, width=window.width, height=window.height,
                   annotations=annotations)


def square_crop(record, size=1024, min_retained=MIN_RETAINED_AREA):
    """Crop a ``size`` square (or the largest square that fits) centred on
    the annotations, shifted to stay inside the image."""
    side = float(min(size, record.width, record.height))
    if record.annotations:
        xmin = min(a.box.xmin for a in record.annotations)
        ymin = min(a.box.ymin for a in record.annotations)
        xmax = max(a.box.xmax for a in record.annotations)
        ymax = max(a.box.ymax for a in record.annotations)
        cx, cy = (xmin + xmax) / 2.0, (ymin + ymax) / 2.0
    else:
        cx, cy = record.width / 2.0, record.height / 2.0
    x0 = min(max(cx - side / 2.0, 0.0), record.width - side)
    y0 = min(max(cy - side / 2.0, 0.0), record.height - side)
    return crop_window(record, Box(x0, y0, x0 + side, y0 + side),
                       min_retained)


def filter_resolution(records, min_width=600, min_height=400):
    """Keep records at least ``min_width`` by ``min_height`` pixels."""
    kept = [r for r in records
            if r.width >= min_width and r.height >= min_height]
    if len(kept) != len(records):
        log.warning('dropped %d images below %dx%d',
                    len(records) - len(kept), min_width, min_height)
    return kept
