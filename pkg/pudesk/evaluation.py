# encoding: utf-8

"""Matching detections to ground truth, and every metric built on top of it.

Ground truth is a mapping ``image_id -> [LabeledBox, ...]`` (see
:func:`ground_truth`). Detections carry their own ``image_id``.

Matching is greedy. Within one image and class, detections are visited in
descending confidence (ties: lower input index first), and each takes the
highest-IoU unmatched ground truth box with IoU >= the threshold. Whatever
is left over becomes a false positive or false negative.

>>> from pudesk.geometry import LabeledBox
>>> gts = {'a': [LabeledBox(Box(0, 0, 10, 10), 'DTI')]}
>>> dets = [Detection(Box(0, 0, 10, 9), 'DTI', 0.9, 'a'),
...         Detection(Box(0, 0, 10, 8), 'DTI', 0.7, 'a')]
>>> match = match_detections(dets, gts, 0.5, 0.0)
>>> len(match.true_positives), len(match.false_positives)
(1, 1)
"""

import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from pudesk.dataset import load_records
from pudesk.errors import EmptyResultError, InvariantError, ParseError
from pudesk.geometry import CLASSES, Box, Detection, boxes_to_array, \
    iou_matrix
from pudesk.log import get_logger


log = get_logger('pudesk.evaluation')

DEFAULT_CS_LIST = (0.30, 0.50, 0.75, 0.90)
COCO_IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = np.arange(101) / 100.0

#: Half-open area ranges for size-stratified metrics.
AREA_RANGES = OrderedDict([
    ('small', (0.0, 32.0 ** 2)),
    ('medium', (32.0 ** 2, 96.0 ** 2)),
    ('large', (96.0 ** 2, math.inf)),
])

DETECTION_COLUMNS = ('image_id', 'class', 'confidence', 'xmin', 'ymin',
                     'xmax', 'ymax')

ARITHMETIC_MODES = ('exact', 'tabulated')


def truncate(value, places=4):
    """Truncate towards zero to ``places`` decimals, as the published
    result tables do.

    >>> truncate(0.29626), truncate(0.6)
    (0.2962, 0.6)
    """
    scale = 10.0 ** places
    return math.floor(value * scale + 1e-9) / scale


def f1_score(precision, recall):
    """Harmonic mean of precision and recall, 0 when both are 0.

    >>> round(f1_score(0.375, 0.6), 4)
    0.4615
    """
    if precision + recall <= 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


@dataclass(frozen=True)
class Match(object):
    detection: Detection
    gt: object
    iou: float


@dataclass(frozen=True)
class MatchResult(object):
    """TP/FP/FN assignment over a whole evaluation set.

    ``false_negatives`` holds ``(image_id, LabeledBox)`` pairs; ``outside``
    is the subset of false positives whose best same-class IoU is below the
    threshold.
    """

    iou_threshold: float
    confidence_threshold: float
    true_positives: tuple = ()
    false_positives: tuple = ()
    false_negatives: tuple = ()
    outside: tuple = ()
    support: dict = field(default_factory=dict)

    def counts(self, class_name):
        """(TP, FP, FN, outside FP) for one class."""
        tp = sum(1 for m in self.true_positives
                 if m.detection.class_name == class_name)
        fp = sum(1 for d in self.false_positives if d.class_name == class_name)
        fn = sum(1 for _, g in self.false_negatives
                 if g.class_name == class_name)
        out = sum(1 for d in self.outside if d.class_name == class_name)
        return tp, fp, fn, out


@dataclass(frozen=True)
class ClassMetrics(object):
    class_name: str
    precision: float
    recall: float
    f1: float
    support: int
    fp_outside_iou: int = 0
    true_positives: int = 0
    false_positives: int = 0
    false_negatives: int = 0

    @classmethod
    def from_rates(cls, class_name, precision, recall, support,
                   arithmetic='exact', **counts):
        """Build a row from precision and recall, deriving F1.

        In ``tabulated`` arithmetic precision and recall are truncated to
        4 decimals first, and F1 is computed from those and truncated too.
        """
        if arithmetic == 'tabulated':
            precision, recall = truncate(precision), truncate(recall)
            f1 = truncate(f1_score(precision, recall))
        else:
            f1 = f1_score(precision, recall)
        return cls(class_name, precision, recall, f1, support, **counts)


@dataclass(frozen=True)
class EvalReport(object):
    """Per-class metrics and the mean-average row for one (IoU, CS)."""

    iou_threshold: float
    confidence_threshold: float
    metrics: tuple
    mean_precision: float
    mean_recall: float
    mean_f1: float
    mean_support: float
    false_positives: int
    fp_outside_iou: int
    arithmetic: str = 'exact'

    @property
    def mean_average(self):
        return (self.mean_precision, self.mean_recall, self.mean_f1)

    def metric(self, class_name):
        for row in self.metrics:
            if row.class_name == class_name:
                return row
        raise KeyError(class_name)

    def to_dict(self):
        return OrderedDict([
            ('iou', self.iou_threshold),
            ('cs', self.confidence_threshold),
            ('arithmetic', self.arithmetic),
            ('classes', [OrderedDict([
                ('class', m.class_name),
                ('precision', m.precision),
                ('recall', m.recall),
                ('f1', m.f1),
                ('support', m.support),
                ('true_positives', m.true_positives),
                ('false_positives', m.false_positives),
                ('false_negatives', m.false_negatives),
                ('fp_outside_iou', m.fp_outside_iou),
            ]) for m in self.metrics]),
            ('mean_average', OrderedDict([
                ('precision', self.mean_precision),
                ('recall', self.mean_recall),
                ('f1', self.mean_f1),
                ('support', self.mean_support),
            ])),
            ('false_positives', self.false_positives),
            ('fp_outside_iou', self.fp_outside_iou),
        ])


@dataclass(frozen=True)
class PRCurve(object):
    """Precision/recall points, one per distinct confidence cutoff.

    ``points`` starts with a recall-0 point; ``envelope`` holds the
    monotone (right-maximum) precision the AUC is integrated over.
    """

    class_name: str
    points: tuple
    envelope: tuple
    auc: float
    support: int


def _check_threshold(name, value, low_open=True):
    value = float(value)
    if math.isnan(value) or value > 1.0 or value < 0.0 or \
            (low_open and value == 0.0):
        raise InvariantError('%s threshold %r outside %s0, 1]'
                             % (name, value, '(' if low_open else '['))
    return value


def ground_truth(records):
    """Map image_id to its labelled boxes."""
    gts = OrderedDict()
    for record in records:
        if record.image_id in gts:
            raise InvariantError('duplicate image %r in ground truth'
                                 % record.image_id)
        gts[record.image_id] = tuple(record.annotations)
    return gts


def load_ground_truth(path):
    """Ground truth from canonical CSV or a manifest file."""
    return ground_truth(load_records(path))


def _group(detections, gts):
    """Bucket detections by image, keeping their input index."""
    by_image = OrderedDict((image_id, []) for image_id in sorted(gts))
    for index, det in enumerate(detections):
        if det.image_id not in by_image:
            raise ParseError('detection references unknown image %r'
                             % det.image_id, field='image_id')
        by_image[det.image_id].append((index, det))
    return by_image


def _in_range(area, area_range):
    return area_range is None or area_range[0] <= area < area_range[1]


def _greedy(dets, gts, iou_thr, area_range=None):
    """Greedy one-to-one matching within one image and class.

    :param dets: ``(index, Detection)`` pairs.
    :param gts: LabeledBoxes of the same class.
    :returns: One ``(index, det, status, gt_index, iou, best_iou)`` tuple per
              detection in visiting order; status is 'tp', 'fp' or 'ignore'.
              Also the list of unmatched, non-ignored gt indices.
    """
    dets = sorted(dets, key=lambda p: (-p[1].confidence, p[0]))
    ignored = np.array([not _in_range(g.box.area, area_range) for g in gts],
                       dtype=bool)
    overlaps = iou_matrix(boxes_to_array([d.box for _, d in dets]),
                          boxes_to_array([g.box for g in gts]))
    taken = np.zeros(len(gts), dtype=bool)
    out = []
    for row, (index, det) in enumerate(dets):
        ious = overlaps[row] if len(gts) else np.zeros(0)
        best_iou = float(ious.max()) if len(gts) else 0.0
        status, chosen = 'fp', None
        for want_ignored in (False, True):
            free = np.where(~taken & (ignored == want_ignored), ious, -1.0)
            if len(free) and free.max() >= iou_thr:
                chosen = int(np.argmax(free))
                status = 'ignore' if want_ignored else 'tp'
                break
        if chosen is not None:
            taken[chosen] = True
        elif not _in_range(det.box.area, area_range):
            status = 'ignore'
        out.append((index, det, status, chosen,
                    float(ious[chosen]) if chosen is not None else 0.0,
                    best_iou))
    missed = [i for i in range(len(gts)) if not taken[i] and not ignored[i]]
    return out, missed


def _match_image(item):
    image_id, dets, gts, iou_thr = item
    tps, fps, fns, outside = [], [], [], []
    for class_name in CLASSES:
        class_dets = [p for p in dets if p[1].class_name == class_name]
        class_gts = [g for g in gts if g.class_name == class_name]
        if not class_dets and not class_gts:
            continue
        visited, missed = _greedy(class_dets, class_gts, iou_thr)
        for _, det, status, gt_index, overlap, best in visited:
            if status == 'tp':
                tps.append(Match(det, class_gts[gt_index], overlap))
            else:
                fps.append(det)
                if best < iou_thr:
                    outside.append(det)
        fns.extend((image_id, class_gts[i]) for i in missed)
    return tps, fps, fns, outside


def match_detections(detections, gts, iou_thr=0.5, cs_thr=0.5, pool=None):
    """Match detections with confidence >= ``cs_thr`` against ground truth.

    :param pool: Optional :class:`pudesk.app.ThreadPool` to match images in
                 parallel; the result does not depend on it.
    """
    iou_thr = _check_threshold('IoU', iou_thr)
    cs_thr = _check_threshold('confidence', cs_thr, low_open=False)
    kept = [d for d in detections if d.confidence >= cs_thr]
    by_image = _group(kept, gts)
    items = [(image_id, dets, tuple(gts[image_id]), iou_thr)
             for image_id, dets in by_image.items()]
    if pool is not None:
        results = pool.map(_match_image, items)
    else:
        results = [_match_image(item) for item in items]
    tps, fps, fns, outside = [], [], [], []
    for t, f, n, o in results:
        tps.extend(t)
        fps.extend(f)
        fns.extend(n)
        outside.extend(o)
    support = OrderedDict((name, 0) for name in CLASSES)
    for boxes in gts.values():
        for g in boxes:
            support[g.class_name] += 1
    log.fine('matched %d detections at IoU %.2f CS %.2f: %d TP %d FP %d FN',
             len(kept), iou_thr, cs_thr, len(tps), len(fps), len(fns))
    return MatchResult(iou_thr, cs_thr, tuple(tps), tuple(fps), tuple(fns),
                       tuple(outside), support)


def class_metrics(match, arithmetic='exact'):
    """One :class:`ClassMetrics` per class, in :data:`CLASSES` order."""
    if arithmetic not in ARITHMETIC_MODES:
        raise InvariantError('unknown arithmetic %r' % (arithmetic,))
    rows = []
    for class_name in CLASSES:
        tp, fp, fn, out = match.counts(class_name)
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        rows.append(ClassMetrics.from_rates(
            class_name, precision, recall, match.support.get(class_name, 0),
            arithmetic, fp_outside_iou=out, true_positives=tp,
            false_positives=fp, false_negatives=fn))
    return rows


def mean_average(metrics, arithmetic='exact'):
    """Mean (P, R, F1) over the classes with nonzero support.

    >>> rows = [ClassMetrics('DTI', 0.5, 1.0, 0.6667, 3),
    ...         ClassMetrics('CategoryIV', 0.0, 0.0, 0.0, 0)]
    >>> mean_average(rows)
    (0.5, 1.0, 0.6667)
    """
    supported = [m for m in metrics if m.support > 0]
    if not supported:
        raise EmptyResultError('no class has ground truth support')
    means = tuple(math.fsum(getattr(m, name) for m in supported)
                  / len(supported) for name in ('precision', 'recall', 'f1'))
    if arithmetic == 'tabulated':
        means = tuple(truncate(v) for v in means)
    return means


def mean_support(metrics):
    supported = [m.support for m in metrics if m.support > 0]
    if not supported:
        raise EmptyResultError('no class has ground truth support')
    return sum(supported) / float(len(supported))


def build_report(match, arithmetic='exact'):
    rows = class_metrics(match, arithmetic)
    mp, mr, mf = mean_average(rows, arithmetic)
    return EvalReport(match.iou_threshold, match.confidence_threshold,
                      tuple(rows), mp, mr, mf, mean_support(rows),
                      len(match.false_positives), len(match.outside),
                      arithmetic)


def evaluate(detections, gts, iou_thr=0.5, cs_thr=0.5, arithmetic='exact',
             pool=None):
    """Match and report in one step."""
    return build_report(match_detections(detections, gts, iou_thr, cs_thr,
                                         pool), arithmetic)


def sweep(detections, gts, iou_thr=0.5, cs_list=DEFAULT_CS_LIST,
          arithmetic='exact', pool=None):
    """One report per confidence threshold, in ascending order."""
    cs_list = [float(c) for c in cs_list]
    if not cs_list:
        raise InvariantError('confidence list is empty')
    if cs_list != sorted(cs_list):
        raise InvariantError('confidence list must be ascending: %r'
                             % (cs_list,))
    detections = list(detections)
    return [evaluate(detections, gts, iou_thr, cs, arithmetic, pool)
            for cs in cs_list]


def _ranked(detections, gts, class_name, iou_thr, area_range=None,
            max_dets=None):
    """Globally ranked TP flags for one class.

    :returns: (list of ``(confidence, is_tp)`` in rank order, number of
              non-ignored ground truth boxes).
    """
    by_image = _group(detections, gts)
    ranked = []
    n_gt = 0
    for image_id, dets in by_image.items():
        class_dets = [p for p in dets if p[1].class_name == class_name]
        if max_dets is not None:
            class_dets = sorted(class_dets,
                                key=lambda p: (-p[1].confidence, p[0]))
            class_dets = class_dets[:max_dets]
        class_gts = [g for g in gts[image_id] if g.class_name == class_name]
        n_gt += sum(1 for g in class_gts if _in_range(g.box.area, area_range))
        visited, _ = _greedy(class_dets, class_gts, iou_thr, area_range)
        ranked.extend((-det.confidence, image_id, index, status == 'tp')
                      for index, det, status, _, _, _ in visited
                      if status != 'ignore')
    ranked.sort(key=lambda r: r[:3])
    return [(-r[0], r[3]) for r in ranked], n_gt


def _precision_recall(flags, n_gt):
    tp = np.cumsum(flags, dtype=float)
    fp = np.cumsum(~np.asarray(flags, dtype=bool), dtype=float)
    return tp / np.maximum(tp + fp, 1.0), tp / n_gt


def _envelope(precision):
    """Right-to-left running maximum."""
    return np.maximum.accumulate(np.asarray(precision)[::-1])[::-1]


def _interpolated_ap(flags, n_gt):
    if not len(flags):
        return 0.0
    precision, recall = _precision_recall(flags, n_gt)
    envelope = _envelope(precision)
    idx = np.searchsorted(recall, RECALL_POINTS, side='left')
    sampled = np.where(idx < len(envelope),
                       envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return float(math.fsum(sampled) / len(RECALL_POINTS))


def average_precision(detections, gts, class_name, iou_thr=0.5,
                      area_range=None):
    """101-point interpolated AP for one class, or None without ground truth.

    Detections are ranked over the whole set by descending confidence (ties:
    image_id, then input index).
    """
    iou_thr = _check_threshold('IoU', iou_thr)
    ranked, n_gt = _ranked(detections, gts, class_name, iou_thr, area_range)
    if n_gt == 0:
        return None
    return _interpolated_ap(np.array([tp for _, tp in ranked], dtype=bool),
                            n_gt)


def _mean_defined(values):
    values = [v for v in values if v is not None]
    if not values:
        return None
    return math.fsum(values) / len(values)


def mean_ap(detections, gts, iou_thresholds=COCO_IOU_THRESHOLDS,
            area_range=None):
    """AP averaged over classes with ground truth, then over thresholds."""
    detections = list(detections)
    per_threshold = [
        _mean_defined([average_precision(detections, gts, c, t, area_range)
                       for c in CLASSES])
        for t in iou_thresholds]
    return _mean_defined(per_threshold)


def coco_map_suite(detections, gts):
    """The COCO-style detection precision summary.

    Entries are None where no ground truth falls in scope (for example
    ``mAP_small`` on a set without small boxes).
    """
    detections = list(detections)
    suite = OrderedDict([
        ('mAP', mean_ap(detections, gts)),
        ('mAP@.50', mean_ap(detections, gts, (0.5,))),
        ('mAP@.75', mean_ap(detections, gts, (0.75,))),
    ])
    for name, area_range in AREA_RANGES.items():
        suite['mAP_%s' % name] = mean_ap(detections, gts,
                                         area_range=area_range)
    return suite


def average_recall_at(detections, gts, k=100, area_range=None):
    """Recall with at most ``k`` detections per image and class, averaged
    over the COCO IoU thresholds and over classes with ground truth.

    Returns None when no ground truth is in scope.
    """
    if k < 1:
        raise InvariantError('k must be positive, got %r' % (k,))
    detections = list(detections)
    per_class = []
    for class_name in CLASSES:
        recalls = []
        for t in COCO_IOU_THRESHOLDS:
            ranked, n_gt = _ranked(detections, gts, class_name, t,
                                   area_range, max_dets=k)
            if n_gt == 0:
                break
            recalls.append(sum(1 for _, tp in ranked if tp) / float(n_gt))
        if recalls:
            per_class.append(math.fsum(recalls) / len(recalls))
    return _mean_defined(per_class)


def average_recall_suite(detections, gts):
    detections = list(detections)
    suite = OrderedDict(('AR@%d' % k, average_recall_at(detections, gts, k))
                        for k in (1, 10, 100))
    for name, area_range in AREA_RANGES.items():
        suite['AR@100_%s' % name] = average_recall_at(detections, gts, 100,
                                                      area_range)
    return suite


def pr_curve(detections, gts, class_name, iou_thr=0.5):
    """Precision/recall at every distinct confidence cutoff, with AUC.

    The AUC is the trapezoidal area under the monotone precision envelope,
    starting from recall 0.
    """
    iou_thr = _check_threshold('IoU', iou_thr)
    ranked, n_gt = _ranked(detections, gts, class_name, iou_thr)
    if n_gt == 0:
        raise EmptyResultError('class %s has no ground truth support'
                               % class_name)
    flags = np.array([tp for _, tp in ranked], dtype=bool)
    confidences = [c for c, _ in ranked]
    points = []
    if len(flags):
        precision, recall = _precision_recall(flags, n_gt)
        # last rank of each distinct confidence
        for i in range(len(confidences)):
            if i + 1 == len(confidences) or confidences[i + 1] != \
                    confidences[i]:
                points.append((float(recall[i]), float(precision[i])))
    envelope = list(_envelope([p for _, p in points])) if points else []
    start = envelope[0] if envelope else 0.0
    points.insert(0, (0.0, start))
    envelope.insert(0, start)
    auc = math.fsum((points[i + 1][0] - points[i][0])
                    * (envelope[i] + envelope[i + 1]) / 2.0
                    for i in range(len(points) - 1))
    return PRCurve(class_name, tuple(points),
                   tuple(float(e) for e in envelope),
                   min(max(auc, 0.0), 1.0), n_gt)


def read_detections(path_or_buffer):
    """Detection rows: image_id, class, confidence, xmin, ymin, xmax, ymax."""
    try:
        frame = pd.read_csv(path_or_buffer, dtype={'image_id': str,
                                                   'class': str},
                            float_precision='round_trip')
    except pd.errors.EmptyDataError:
        return []
    except (pd.errors.ParserError, ValueError) as e:
        raise ParseError('malformed detection file: %s' % e)
    missing = set(DETECTION_COLUMNS) - set(frame.columns)
    if missing:
        raise ParseError('detection file lacks columns: %s'
                         % ', '.join(sorted(missing)))
    detections = []
    for number, row in enumerate(frame.to_dict('records'), 2):
        box = Box(row['xmin'], row['ymin'], row['xmax'], row['ymax'])
        if not box.is_valid:
            raise ParseError('detection line %d: bad box %r'
                             % (number, box.as_tuple()), field='xmin')
        try:
            detections.append(Detection(box, row['class'], row['confidence'],
                                        row['image_id']))
        except InvariantError as e:
            raise ParseError('detection line %d: %s' % (number, e),
                             field='confidence')
    return detections


def detections_frame(detections):
    return pd.DataFrame(
        [(d.image_id, d.class_name, d.confidence) + d.box.as_tuple()
         for d in detections], columns=list(DETECTION_COLUMNS))


def write_detections(detections, path_or_buffer=None):
    """Write detection rows; floats keep full precision."""
    return detections_frame(detections).to_csv(
        path_or_buffer, index=False, lineterminator='\n', encoding='utf-8')
