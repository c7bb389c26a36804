# encoding: utf-8

"""HTTP gateway: detection submissions in, evaluation reports out.

Submissions are appended to a line-delimited JSON log, which is the only
source of truth; restarting the service replays it. Reports are kept in a
bounded in-memory cache, so report ids do not survive a restart and the
oldest are evicted first.

    POST /api/v1/detections          store one submission
    GET  /api/v1/detections          export stored detections as CSV rows
    GET  /api/v1/reports?iou=&cs=    evaluate the store against the manifest
    GET  /api/v1/reports/<id>        fetch a report produced earlier
"""

import math
import os
import threading
import uuid
from collections import OrderedDict
from dataclasses import dataclass
from datetime import datetime, timezone
from typing import Optional

import simplejson
from flask import Flask, Response, request

from pudesk.errors import Error, InvariantError, ParseError
from pudesk.evaluation import evaluate, write_detections
from pudesk.geometry import Box, Detection, canonical_class
from pudesk.log import Log, get_logger


log = get_logger('pudesk.gateway')

DETECTION_FIELDS = ('class', 'confidence', 'xmin', 'ymin', 'xmax', 'ymax')
MAX_REPORTS = 256


class ValidationError(ParseError):
    """A payload failed validation; ``errors`` maps field paths to
    messages."""

    def __init__(self, errors):
        super().__init__('; '.join('%s: %s' % item for item in errors.items()))
        self.errors = errors


class DuplicateError(Error):
    """A dedup key was reused with a different payload."""


@dataclass(frozen=True)
class Submission(object):
    submission_id: str
    image_id: str
    received_at: str
    detections: tuple = ()
    submitter: str = ''
    dedup_key: Optional[str] = None
    no_finding: bool = False

    def fingerprint(self):
        """Canonical text of the client-supplied content."""
        return simplejson.dumps(self.payload(), sort_keys=True)

    def payload(self):
        return OrderedDict([
            ('image_id', self.image_id),
            ('submitter', self.submitter),
            ('no_finding', self.no_finding),
            ('detections', [OrderedDict([
                ('class', d.class_name), ('confidence', d.confidence),
                ('xmin', d.box.xmin), ('ymin', d.box.ymin),
                ('xmax', d.box.xmax), ('ymax', d.box.ymax)])
                for d in self.detections]),
        ])

    def to_dict(self):
        data = OrderedDict([('submission_id', self.submission_id),
                            ('received_at', self.received_at),
                            ('dedup_key', self.dedup_key)])
        data.update(self.payload())
        return data

    @classmethod
    def from_dict(cls, data):
        image_id = data['image_id']
        return cls(data['submission_id'], image_id, data['received_at'],
                   tuple(Detection(Box(d['xmin'], d['ymin'], d['xmax'],
                                       d['ymax']),
                                   d['class'], d['confidence'], image_id)
                         for d in data.get('detections', [])),
                   data.get('submitter', ''), data.get('dedup_key'),
                   bool(data.get('no_finding', False)))


@dataclass(frozen=True)
class StoredReport(object):
    report_id: str
    iou: float
    cs: float
    arithmetic: str
    report: object
    created_at: str

    def to_dict(self):
        return OrderedDict([
            ('report_id', self.report_id),
            ('config', OrderedDict([('iou', self.iou), ('cs', self.cs),
                                    ('arithmetic', self.arithmetic)])),
            ('created_at', self.created_at),
            ('report', self.report.to_dict()),
        ])


def _now():
    return datetime.now(timezone.utc).isoformat()


def _number(value, name, errors):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        errors[name] = 'must be a number'
        return None
    if not math.isfinite(value):
        errors[name] = 'must be finite'
        return None
    return float(value)


def validate_submission(payload, known_images=None):
    """Check a submission payload.

    :returns: (image_id, submitter, dedup_key, no_finding, detections)
    :raises ValidationError: with one message per offending field.
    """
    if not isinstance(payload, dict):
        raise ValidationError({'body': 'must be a JSON object'})
    errors = OrderedDict()
    image_id = payload.get('image_id')
    if not isinstance(image_id, str) or not image_id:
        errors['image_id'] = 'must be a non-empty string'
    elif known_images is not None and image_id not in known_images:
        errors['image_id'] = 'unknown image %r' % image_id
    submitter = payload.get('submitter', '')
    if not isinstance(submitter, str):
        errors['submitter'] = 'must be a string'
    dedup_key = payload.get('dedup_key')
    if dedup_key is not None and (not isinstance(dedup_key, str)
                                  or not dedup_key):
        errors['dedup_key'] = 'must be a non-empty string'
    no_finding = payload.get('no_finding', False)
    if not isinstance(no_finding, bool):
        errors['no_finding'] = 'must be true or false'
    raw = payload.get('detections', [])
    if not isinstance(raw, list):
        errors['detections'] = 'must be a list'
        raw = []
    elif no_finding is True and raw:
        errors['detections'] = 'must be empty when no_finding is set'
    elif not raw and no_finding is not True:
        errors['detections'] = 'must not be empty unless no_finding is set'

    detections = []
    for i, item in enumerate(raw):
        prefix = 'detections[%d].' % i
        if not isinstance(item, dict):
            errors['detections[%d]' % i] = 'must be an object'
            continue
        missing = [f for f in DETECTION_FIELDS if f not in item]
        for name in missing:
            errors[prefix + name] = 'is required'
        if missing:
            continue
        class_name = None
        try:
            class_name = canonical_class(item['class'])
        except ParseError as e:
            errors[prefix + 'class'] = str(e)
        confidence = _number(item['confidence'], prefix + 'confidence',
                             errors)
        if confidence is not None and not 0.0 <= confidence <= 1.0:
            errors[prefix + 'confidence'] = 'must be within [0, 1]'
            confidence = None
        coords = [_number(item[name], prefix + name, errors)
                  for name in ('xmin', 'ymin', 'xmax', 'ymax')]
        if None in coords:
            continue
        box = Box(*coords)
        if box.xmin >= box.xmax:
            errors[prefix + 'xmax'] = 'must be greater than xmin'
        if box.ymin >= box.ymax:
            errors[prefix + 'ymax'] = 'must be greater than ymin'
        if class_name and confidence is not None and box.is_valid:
            detections.append(Detection(box, class_name, confidence,
                                        image_id))
    if errors:
        raise ValidationError(errors)
    return image_id, submitter, dedup_key, no_finding, tuple(detections)


class SubmissionStore(object):
    """Append-only submission log with an in-memory index.

    Writes are serialised by one lock and reach the disk (flush + fsync)
    before :meth:`append` returns. Readers get a consistent prefix.
    """

    log = Log('pudesk.gateway.store')

    def __init__(self, path):
        self.path = path
        self._lock = threading.Lock()
        self._submissions = []
        self._dedup = {}
        self._replay()

    def __len__(self):
        with self._lock:
            return len(self._submissions)

    def _replay(self):
        if not os.path.exists(self.path):
            return
        with open(self.path, 'rb') as fd:
            data = fd.read()
        lines = data.split(b'\n')
        good = 0
        for number, line in enumerate(lines, 1):
            if not line.strip():
                good += len(line) + 1
                continue
            try:
                submission = Submission.from_dict(
                    simplejson.loads(line.decode('utf-8')))
            except (ValueError, KeyError, Error) as e:
                if number == len(lines):
                    self.log.warning('%s: discarding torn final record: %s',
                                     self.path, e)
                    with open(self.path, 'r+b') as fd:
                        fd.truncate(good)
                    break
                raise ParseError('%s line %d: corrupt submission record: %s'
                                 % (self.path, number, e))
            self._index(submission)
            good += len(line) + 1
            if number == len(lines):
                self.log.warning('%s: final record lacks a newline, '
                                 'adding one', self.path)
                with open(self.path, 'ab') as fd:
                    fd.write(b'\n')
                    fd.flush()
                    os.fsync(fd.fileno())
        self.log.info('replayed %d submissions from %s',
                      len(self._submissions), self.path)

    def _index(self, submission):
        self._submissions.append(submission)
        if submission.dedup_key:
            self._dedup[submission.dedup_key] = submission

    def append(self, image_id, detections, submitter='', dedup_key=None,
               no_finding=False):
        """Store a submission.

        :returns: (submission, created). A resent dedup key with identical
                  content returns the original submission and False.
        :raises DuplicateError: when the dedup key is reused for different
                                content.
        """
        candidate = Submission(uuid.uuid4().hex, image_id, _now(),
                               tuple(detections), submitter, dedup_key,
                               no_finding)
        with self._lock:
            if dedup_key and dedup_key in self._dedup:
                existing = self._dedup[dedup_key]
                if existing.fingerprint() != candidate.fingerprint():
                    raise DuplicateError(
                        'dedup key %r already used for a different payload'
                        % dedup_key)
                return existing, False
            line = simplejson.dumps(candidate.to_dict()) + '\n'
            with open(self.path, 'a', encoding='utf-8', newline='\n') as fd:
                fd.write(line)
                fd.flush()
                os.fsync(fd.fileno())
            self._index(candidate)
        self.log.fine('stored submission %s for %s', candidate.submission_id,
                      image_id)
        return candidate, True

    def submissions(self):
        with self._lock:
            return list(self._submissions)

    def detections(self):
        return [d for s in self.submissions() for d in s.detections]


def _json(data, status=200):
    return Response(simplejson.dumps(data) + '\n', status=status,
                    mimetype='application/json')


def _threshold(name, default):
    raw = request.args.get(name)
    if raw is None:
        return default, None
    try:
        value = float(raw)
    except ValueError:
        return None, '%s must be a number' % name
    if not 0.0 < value <= 1.0:
        return None, '%s must be within (0, 1]' % name
    return value, None


def create_app(store, gts=None, max_reports=MAX_REPORTS):
    """Build the Flask application over ``store``.

    :param gts: Ground truth mapping (see
                :func:`pudesk.evaluation.ground_truth`); None means no
                manifest was loaded and reports answer 503.
    :param max_reports: Reports kept for ``/api/v1/reports/<id>``; the
                        least recently used is evicted beyond this.
    """
    if max_reports < 1:
        raise InvariantError('max_reports must be positive')
    app = Flask('pudesk')
    reports = OrderedDict()
    reports_lock = threading.Lock()

    @app.route('/api/v1/detections', methods=['POST'])
    def submit_detections():
        try:
            payload = simplejson.loads(request.get_data(as_text=True))
        except ValueError as e:
            return _json({'error': 'malformed JSON body',
                          'fields': {'body': str(e)}}, 400)
        try:
            image_id, submitter, dedup_key, no_finding, detections = \
                validate_submission(payload, gts)
            submission, created = store.append(image_id, detections,
                                               submitter, dedup_key,
                                               no_finding)
        except ValidationError as e:
            return _json({'error': 'validation failed',
                          'fields': e.errors}, 400)
        except DuplicateError as e:
            return _json({'error': str(e)}, 409)
        return _json({'submission_id': submission.submission_id,
                      'received_at': submission.received_at},
                     201 if created else 200)

    @app.route('/api/v1/detections', methods=['GET'])
    def export_detections():
        return Response(write_detections(store.detections()),
                        mimetype='text/csv')

    @app.route('/api/v1/reports', methods=['GET'])
    def get_report():
        if gts is None:
            return _json({'error': 'no ground truth manifest loaded'}, 503)
        iou, iou_error = _threshold('iou', 0.5)
        cs, cs_error = _threshold('cs', 0.5)
        arithmetic = request.args.get('arithmetic', 'tabulated')
        errors = OrderedDict((k, v) for k, v in (('iou', iou_error),
                                                 ('cs', cs_error)) if v)
        if arithmetic not in ('tabulated', 'exact'):
            errors['arithmetic'] = 'must be tabulated or exact'
        if errors:
            return _json({'error': 'invalid parameters', 'fields': errors},
                         422)
        try:
            report = evaluate(store.detections(), gts, iou, cs, arithmetic)
        except Error as e:
            return _json({'error': str(e)}, 422)
        stored = StoredReport(uuid.uuid4().hex, iou, cs, arithmetic, report,
                              _now())
        with reports_lock:
            reports[stored.report_id] = stored
            while len(reports) > max_reports:
                reports.popitem(last=False)
        return _json(stored.to_dict())

    @app.route('/api/v1/reports/<report_id>', methods=['GET'])
    def fetch_report(report_id):
        with reports_lock:
            stored = reports.get(report_id)
            if stored is not None:
                reports.move_to_end(report_id)
        if stored is None:
            return _json({'error': 'no report %r' % report_id}, 404)
        return _json(stored.to_dict())

    return app


def serve(store_path, gts=None, host='127.0.0.1', port=8080):
    """Run the gateway until interrupted."""
    store = SubmissionStore(store_path)
    app = create_app(store, gts)
    log.info('serving %d stored submissions on %s:%d', len(store), host,
             port)
    app.run(host=host, port=port, threaded=True)
