# encoding: utf-8

"""Report renderers: aligned text tables, CSV, structured JSON, and PR curve
figures.

Output is byte-stable for identical inputs. Tables print 4 decimals.
"""

import io
import os
from collections import OrderedDict

import matplotlib
matplotlib.use('Agg')
from matplotlib.figure import Figure  # noqa: E402
import pandas as pd  # noqa: E402
import simplejson  # noqa: E402

from pudesk.errors import InvariantError  # noqa: E402
from pudesk.log import get_logger  # noqa: E402


log = get_logger('pudesk.report')

FORMATS = ('table', 'csv', 'structured')

#: Row order of the published result tables.
TABLE_ORDER = ('CategoryI', 'CategoryII', 'CategoryIII', 'CategoryIV',
               'Unstageable', 'DTI')
MEAN_ROW = 'Mean Average'


def _ordered(report):
    return [report.metric(name) for name in TABLE_ORDER]


def render_table(reports):
    """Aligned per-class tables, one block per report."""
    blocks = []
    for report in reports:
        lines = ['IoU@%.2f CS@%.2f' % (report.iou_threshold,
                                       report.confidence_threshold),
                 '%-14s %9s %9s %9s %8s' % ('Class', 'Precision', 'Recall',
                                            'F1-Score', 'Support')]
        for m in _ordered(report):
            lines.append('%-14s %9.4f %9.4f %9.4f %8d'
                         % (m.class_name, m.precision, m.recall, m.f1,
                            m.support))
        lines.append('%-14s %9.4f %9.4f %9.4f %8.1f'
                     % ((MEAN_ROW,) + report.mean_average
                        + (report.mean_support,)))
        lines.append('false positives: %d (outside IoU@%.2f: %d)'
                     % (report.false_positives, report.iou_threshold,
                        report.fp_outside_iou))
        blocks.append('\n'.join(lines) + '\n')
    return '\n'.join(blocks)


def report_frame(reports):
    rows = []
    for report in reports:
        key = (report.iou_threshold, report.confidence_threshold)
        for m in _ordered(report):
            rows.append(key + (m.class_name, m.precision, m.recall, m.f1,
                               m.support, m.fp_outside_iou))
        rows.append(key + ((MEAN_ROW,) + report.mean_average
                           + (report.mean_support, report.fp_outside_iou)))
    return pd.DataFrame(rows, columns=['iou', 'cs', 'class', 'precision',
                                       'recall', 'f1', 'support',
                                       'fp_outside_iou'])


def render_csv(reports):
    return report_frame(reports).to_csv(index=False, lineterminator='\n',
                                        float_format='%.4f')


def render_structured(reports):
    return simplejson.dumps([r.to_dict() for r in reports], indent=2) + '\n'


def render(reports, output_format='table'):
    """Render reports in one of :data:`FORMATS`."""
    renderers = {'table': render_table, 'csv': render_csv,
                 'structured': render_structured}
    try:
        renderer = renderers[output_format]
    except KeyError:
        raise InvariantError('unknown report format %r; expected one of %s'
                             % (output_format, ', '.join(FORMATS)))
    return renderer(list(reports))


def render_histogram(histogram):
    """``class count`` lines in histogram order."""
    return ''.join('%-14s %6d\n' % (name, count)
                   for name, count in histogram.items())


def render_summary(summary):
    """Render a metric -> value mapping, with '-' for undefined values."""
    return ''.join('%-18s %s\n' % (name, '-' if value is None
                                   else '%.4f' % value)
                   for name, value in summary.items())


def curve_points_csv(curve):
    frame = pd.DataFrame(OrderedDict([
        ('recall', [r for r, _ in curve.points]),
        ('precision', [p for _, p in curve.points]),
        ('envelope', list(curve.envelope)),
    ]))
    return frame.to_csv(index=False, lineterminator='\n',
                        float_format='%.6f')


def curve_svg(curve):
    """SVG text for one PR curve, AUC in the legend."""
    figure = Figure(figsize=(5, 5))
    axes = figure.add_subplot(1, 1, 1)
    recall = [r for r, _ in curve.points]
    axes.plot(recall, [p for _, p in curve.points], color='0.6',
              linewidth=1, linestyle='--', label='precision')
    axes.step(recall, list(curve.envelope), where='post', color='C0',
              linewidth=2,
              label='%s (AUC = %.4f)' % (curve.class_name, curve.auc))
    axes.set_xlim(0.0, 1.0)
    axes.set_ylim(0.0, 1.0)
    axes.set_xlabel('Recall')
    axes.set_ylabel('Precision')
    axes.set_title('Precision-recall: %s' % curve.class_name)
    axes.legend(loc='lower left')
    buffer = io.StringIO()
    with matplotlib.rc_context({'svg.hashsalt': 'pudesk',
                                'svg.fonttype': 'none'}):
        figure.savefig(buffer, format='svg', metadata={'Date': None})
    return buffer.getvalue()


def write_curve(curve, svg_path, points_path=None):
    """Write the SVG and, next to it, the point CSV."""
    if points_path is None:
        points_path = os.path.splitext(svg_path)[0] + '.csv'
    with open(svg_path, 'w', encoding='utf-8', newline='\n') as fd:
        fd.write(curve_svg(curve))
    with open(points_path, 'w', encoding='utf-8', newline='\n') as fd:
        fd.write(curve_points_csv(curve))
    log.info('wrote %s and %s', svg_path, points_path)
    return svg_path, points_path
