# encoding: utf-8

"""The ``pudesk`` command line.

Every command is a plain function registered with :func:`pudesk.app.command`
and configured through global flags. Library errors become exit codes in
:func:`pudesk.app.run`.
"""

import os
import sys
from dataclasses import dataclass

import numpy as np

from pudesk import __version__
from pudesk.anchors import (DEFAULT_RATIOS, DEFAULT_SCALES, DEFAULT_STRIDE,
                            FOREGROUND, IGNORE, RPN_PRESETS,
                            assign_rpn_targets, generate_anchors,
                            sample_minibatch)
from pudesk.app import ThreadPool, command, define_flag, flags, run
from pudesk.dataset import augment as augment_record
from pudesk.dataset import (DatasetManifest, crop_window,
                            detect_format, filter_resolution, load_annotation,
                            load_records, manifest_lines, parse_ops,
                            split as split_manifest, square_crop,
                            write_canonical, write_manifest)
from pudesk.errors import CommandError, InvariantError, ParseError
from pudesk.evaluation import (average_recall_suite, coco_map_suite,
                               load_ground_truth, pr_curve, read_detections,
                               sweep, write_detections)
from pudesk.gateway import SubmissionStore, serve as serve_gateway
from pudesk.geometry import BACKGROUND, Box, LabeledBox, canonical_class
from pudesk.log import get_logger, log_manager
from pudesk.report import (FORMATS, render, render_histogram, render_summary,
                           write_curve)
from pudesk.trainmath import LOSS_TERMS, AdamState, adam_step, \
    combine_losses


log = get_logger('pudesk.cli')

OUTPUT_DIR_ENV = 'PUDESK_OUTPUT_DIR'
CONFIG_FILE = '~/.pudeskrc'

#: Smoothed final training losses of the reference detector.
REFERENCE_LOSSES = (0.0593, 0.0598, 0.2015, 0.0564)


define_flag('--iou', type='fraction', default=0.5,
            help='IoU threshold for matching')
define_flag('--cs', type='floatlist', default='0.3,0.5,0.75,0.9',
            help='comma-separated confidence thresholds, ascending')
define_flag('--seed', type='int', default=0,
            help='seed for splitting, sampling and augmentation')
define_flag('--format', type='choice', choices=list(FORMATS),
            default='table', help='report format: ' + ', '.join(FORMATS))
define_flag('--arithmetic', type='choice', choices=['tabulated', 'exact'],
            default='tabulated',
            help='truncate rates to 4 decimals as the result tables do '
                 '(tabulated), or keep full precision (exact)')
define_flag('--input-format', type='choice', choices=['voc', 'labelme'],
            default=None, help='annotation format; guessed from extensions')
define_flag('--provenance', type='choice',
            choices=['medetec', 'web', 'trial'], default='web',
            help='provenance recorded on ingested images')
define_flag('--strict', action='store_true', default=False,
            help='reject out-of-image or degenerate boxes')
define_flag('--out', type='filename', default=None,
            help='output file; defaults to $%s or stdout' % OUTPUT_DIR_ENV)
define_flag('--threads', type='int', default=4,
            help='worker threads for parsing and matching')
define_flag('--min-resolution', type='list', default='',
            help='drop images smaller than WIDTH,HEIGHT (e.g. 600,400)')
define_flag('--train-fraction', type='fraction', default=0.9,
            help='fraction of images kept for training')
define_flag('--crop-size', type='int', default=1024,
            help='square crop size')
define_flag('--stride', type='float', default=DEFAULT_STRIDE,
            help='anchor stride in pixels')
define_flag('--scales', type='floatlist',
            default=','.join('%g' % s for s in DEFAULT_SCALES),
            help='anchor scales')
define_flag('--ratios', type='floatlist',
            default=','.join('%g' % r for r in DEFAULT_RATIOS),
            help='anchor aspect ratios (height / width)')
define_flag('--preset', type='choice', choices=sorted(RPN_PRESETS),
            default='assignment',
            help='RPN foreground/background thresholds: assignment '
                 '(0.5/0.1) or nms (0.7/0.3)')
define_flag('--batch', type='int', default=256,
            help='anchor minibatch size')
define_flag('--table1', action='store_true', default=False,
            help='use the reference training losses')
define_flag('--quadratic', action='store_true', default=False,
            help='run Adam on f(theta) = theta^2')
define_flag('--theta', type='float', default=1.0,
            help='starting parameter for the Adam trace')
define_flag('--steps', type='int', default=200, help='Adam steps')
define_flag('--lr', type='float', default=0.1, help='Adam learning rate')
define_flag('--port', type='int', default=8080, help='gateway port')
define_flag('--host', type='string', default='127.0.0.1',
            help='gateway bind address')
define_flag('--manifest', type='filename', default=None,
            help='ground truth manifest or canonical CSV for the gateway')
define_flag('--store-path', type='filename', default='submissions.jsonl',
            help='gateway submission log')
define_flag('--log-file', type='filename', default=None,
            help='also log to this (rotated) file')


@dataclass(frozen=True)
class RunConfig(object):
    """Validated settings for one command run."""

    command: str
    paths: tuple
    iou_thr: float
    cs_list: tuple
    seed: int
    output_format: str
    strict: bool
    arithmetic: str
    out: str = None

    def __post_init__(self):
        if not 0.0 < self.iou_thr <= 1.0:
            raise InvariantError('--iou %r outside (0, 1]' % (self.iou_thr,))
        if not self.cs_list:
            raise InvariantError('--cs must list at least one threshold')
        if any(not 0.0 < c <= 1.0 for c in self.cs_list):
            raise InvariantError('--cs thresholds must lie in (0, 1]: %r'
                                 % (self.cs_list,))
        if list(self.cs_list) != sorted(self.cs_list):
            raise InvariantError('--cs thresholds must be ascending: %r'
                                 % (self.cs_list,))
        for path in self.paths:
            if not os.path.exists(path):
                raise CommandError('no such file: %s' % path)

    @classmethod
    def from_flags(cls, command, paths=()):
        return cls(command, tuple(paths), float(flags.iou),
                   tuple(flags.cs), int(flags.seed), flags.format,
                   bool(flags.strict), flags.arithmetic, flags.out)


def _output_path(default_name):
    """--out, else $PUDESK_OUTPUT_DIR/default_name, else None (stdout)."""
    if flags.out:
        return flags.out
    directory = os.environ.get(OUTPUT_DIR_ENV)
    if directory and default_name:
        os.makedirs(directory, exist_ok=True)
        return os.path.join(directory, default_name)
    return None


def _emit(text, default_name=None):
    path = _output_path(default_name)
    if path is None:
        sys.stdout.write(text)
        return
    with open(path, 'w', encoding='utf-8', newline='\n') as fd:
        fd.write(text)
    log.info('wrote %s', path)


def _pool():
    return ThreadPool(threads=flags.threads)


def _min_resolution():
    if not flags.min_resolution:
        return None
    try:
        width, height = (int(v) for v in flags.min_resolution)
    except ValueError:
        raise CommandError('--min-resolution takes WIDTH,HEIGHT')
    return width, height


@command
def ingest(*paths):
    """Parse VOC or Labelme annotation files into a manifest.

    Writes manifest lines (or canonical CSV when --out ends in .csv) and
    prints the class histogram.
    """
    config = RunConfig.from_flags('ingest', paths)
    if not paths:
        raise CommandError('ingest needs at least one annotation file')
    input_format = flags.input_format
    if input_format is None:
        formats = set(detect_format(p) for p in paths)
        if len(formats) > 1:
            raise ParseError('mixed annotation formats (%s); pass '
                             '--input-format' % ', '.join(sorted(formats)))
        input_format = formats.pop()

    skipped = []

    def load(path):
        try:
            return load_annotation(path, input_format, config.strict,
                                   flags.provenance)
        except (ParseError, InvariantError) as e:
            if config.strict:
                raise
            log.warning('skipping %s: %s', path, e)
            skipped.append(path)
            return None

    pool = _pool()
    try:
        records = [r for r in pool.map(load, paths) if r is not None]
    finally:
        pool.quit()
    minimum = _min_resolution()
    if minimum:
        records = filter_resolution(records, *minimum)
    manifest = DatasetManifest(records)
    path = _output_path('manifest.jsonl') or 'manifest.jsonl'
    if path.lower().endswith('.csv'):
        write_canonical(manifest.records, path)
    else:
        write_manifest(manifest, path)
    print('%d records, %d objects, %d skipped -> %s'
          % (len(manifest), manifest.num_objects, len(skipped), path))
    sys.stdout.write(render_histogram(manifest.class_histogram))


@command(name='eval')
def eval_report(gt, det):
    """Evaluate detections against ground truth at every --cs threshold."""
    config = RunConfig.from_flags('eval', (gt, det))
    gts = load_ground_truth(gt)
    detections = read_detections(det)
    pool = _pool()
    try:
        reports = sweep(detections, gts, config.iou_thr, config.cs_list,
                        config.arithmetic, pool)
    finally:
        pool.quit()
    extension = {'table': 'txt', 'csv': 'csv', 'structured': 'json'}
    _emit(render(reports, config.output_format),
          'report.' + extension[config.output_format])


@command
def eval_coco(gt, det):
    """COCO-style mAP and AR summary over all detections."""
    RunConfig.from_flags('eval coco', (gt, det))
    gts = load_ground_truth(gt)
    detections = read_detections(det)
    summary = coco_map_suite(detections, gts)
    summary.update(average_recall_suite(detections, gts))
    _emit(render_summary(summary), 'coco.txt')


@command
def curve(gt, det, class_name, out_svg):
    """Precision-recall curve for one class as SVG plus a point CSV."""
    config = RunConfig.from_flags('curve', (gt, det))
    class_name = canonical_class(class_name)
    result = pr_curve(read_detections(det), load_ground_truth(gt),
                      class_name, config.iou_thr)
    svg_path, points_path = write_curve(result, out_svg)
    print('%s AUC %.4f (%d points) -> %s, %s'
          % (class_name, result.auc, len(result.points), svg_path,
             points_path))


@command
def split(source):
    """Split a manifest into train and val manifests by whole images."""
    config = RunConfig.from_flags('split', (source,))
    manifest = DatasetManifest(load_records(source))
    train, val = split_manifest(manifest, flags.train_fraction, config.seed)
    base = _output_path('split') or 'split'
    for part in (train, val):
        path = '%s.%s.jsonl' % (base, part.split_tag)
        write_manifest(part, path)
        print('%s: %d images, %d objects -> %s'
              % (part.split_tag, len(part), part.num_objects, path))
        sys.stdout.write(render_histogram(part.class_histogram))


@command
def augment(source, ops):
    """Apply augmentation ops (e.g. flip_h,rotate(90),scale) to every
    record of a manifest."""
    config = RunConfig.from_flags('augment', (source,))
    operations = parse_ops(ops)
    records = [augment_record(r, operations, config.seed + i, config.strict)
               for i, r in enumerate(load_records(source))]
    _emit(manifest_lines(DatasetManifest(records)), 'augmented.jsonl')


@command
def crop(source, *window):
    """Crop every record: square crop of --crop-size around the annotations,
    or a fixed window when XMIN YMIN XMAX YMAX are given."""
    RunConfig.from_flags('crop', (source,))
    if window and len(window) != 4:
        raise CommandError('crop window needs XMIN YMIN XMAX YMAX')
    records = load_records(source)
    if window:
        box = Box(*(float(v) for v in window))
        records = [crop_window(r, box) for r in records]
    else:
        records = [square_crop(r, flags.crop_size) for r in records]
    _emit(manifest_lines(DatasetManifest(records)), 'cropped.jsonl')


@command
def export(store_path):
    """Export a gateway submission log as detection rows."""
    RunConfig.from_flags('export', (store_path,))
    _emit(write_detections(SubmissionStore(store_path).detections()),
          'detections.csv')


@command
def serve():
    """Run the HTTP gateway."""
    gts = load_ground_truth(flags.manifest) if flags.manifest else None
    if gts is None:
        log.warning('no --manifest given; reports will answer 503')
    serve_gateway(flags.store_path, gts, flags.host, flags.port)


@command
def desk_anchors(width, height):
    """Tile anchors over a WIDTH x HEIGHT image."""
    grid = generate_anchors(float(width), float(height), flags.stride,
                            flags.scales, flags.ratios)
    print('%d anchors' % len(grid))
    print('%d per cell, stride %g, %d inside the image'
          % (grid.per_cell, grid.stride, int(grid.inside_image().sum())))


def _parse_box(text):
    parts = [p.strip() for p in text.split(',')]
    if len(parts) not in (4, 5):
        raise CommandError('boxes are XMIN,YMIN,XMAX,YMAX[,CLASS]: %r' % text)
    try:
        box = Box(*(float(p) for p in parts[:4]))
    except ValueError:
        raise ParseError('bad box coordinates: %r' % text)
    return LabeledBox(box.validate(), parts[4] if len(parts) == 5 else 'DTI')


@command
def desk_assign(width, height, *boxes):
    """Label anchors against ground truth boxes XMIN,YMIN,XMAX,YMAX[,CLASS]
    and sample a minibatch."""
    grid = generate_anchors(float(width), float(height), flags.stride,
                            flags.scales, flags.ratios)
    gts = [_parse_box(b) for b in boxes]
    fg_thr, bg_thr = RPN_PRESETS[flags.preset]
    assignments = assign_rpn_targets(grid, gts, fg_thr, bg_thr)
    counts = dict((label, 0) for label in (FOREGROUND, BACKGROUND, IGNORE))
    for a in assignments:
        counts[a.label] += 1
    print('%d anchors: %d foreground, %d background, %d ignored '
          '(fg > %g, bg < %g)' % (len(grid), counts[FOREGROUND],
                                  counts[BACKGROUND], counts[IGNORE],
                                  fg_thr, bg_thr))
    for g in range(len(gts)):
        print('gt %d: %d foreground anchors'
              % (g, sum(1 for a in assignments if a.matched_gt == g)))
    batch = sample_minibatch(assignments, flags.batch, seed=flags.seed)
    fg = sum(1 for i in batch if assignments[i].label == FOREGROUND)
    print('minibatch %d: %d foreground, %d background'
          % (len(batch), fg, len(batch) - fg))


@command
def desk_losses(*parts):
    """Combine the four detector losses (or --table1) into a total."""
    if flags.table1:
        values = REFERENCE_LOSSES
    elif len(parts) == len(LOSS_TERMS):
        try:
            values = tuple(float(p) for p in parts)
        except ValueError:
            raise ParseError('losses must be numbers: %r' % (parts,))
    else:
        raise CommandError('give %d losses or --table1' % len(LOSS_TERMS))
    breakdown = combine_losses(values)
    for name, value in zip(LOSS_TERMS, breakdown.parts()):
        print('%-20s %.4f' % (name, value))
    print('%-20s %.4f' % ('total', breakdown.total))


@command
def desk_adam():
    """Trace Adam minimising theta^2 (--quadratic) from --theta."""
    if not flags.quadratic:
        raise CommandError('only the --quadratic objective is available')
    if flags.steps < 1:
        raise InvariantError('--steps must be positive')
    theta = np.array([flags.theta])
    state = AdamState.zeros(1, lr=flags.lr)
    for step in range(1, flags.steps + 1):
        state, update = adam_step(state, 2.0 * theta)
        theta = theta + update
        if step % 10 == 0 or step == flags.steps:
            print('step %4d theta %+.9f' % (step, theta[0]))
    print('|theta| = %.3g after %d steps' % (abs(theta[0]), flags.steps))


def main(args=None):
    log_manager.log_to_console()
    if args is None:
        args = sys.argv[1:]
    return run(args=args, version=__version__,
               usage='%prog [<flags>] <command> ...',
               config=os.path.expanduser(CONFIG_FILE), init=_init_logging)


def _init_logging(args):
    if flags.log_file:
        log_manager.log_to_file(flags.log_file)
