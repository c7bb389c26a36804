# encoding: utf-8

from collections import OrderedDict

import pytest
import simplejson

from pudesk import report
from pudesk.errors import InvariantError
from pudesk.evaluation import evaluate, pr_curve, sweep
from pudesk.geometry import Box, Detection, LabeledBox


@pytest.fixture
def table_report(table_inputs):
    gts, dets = table_inputs
    return evaluate(dets, gts, 0.5, 0.75, 'tabulated')


def test_table_layout(table_report):
    lines = report.render_table([table_report]).splitlines()
    assert lines[0] == 'IoU@0.50 CS@0.75'
    assert lines[1].split() == ['Class', 'Precision', 'Recall', 'F1-Score',
                                'Support']
    assert [line.split()[0] for line in lines[2:8]] == list(
        report.TABLE_ORDER)
    assert lines[2] == 'CategoryI         0.3750    0.6000    0.4615        5'
    assert lines[5] == 'CategoryIV        0.0000    0.0000    0.0000        0'
    assert lines[8] == \
        'Mean Average      0.6796    0.6997    0.6786     43.2'
    assert lines[9] == 'false positives: 56 (outside IoU@0.50: 56)'


def test_sweep_tables_are_separated(table_inputs):
    gts, dets = table_inputs
    text = report.render_table(sweep(dets, gts, cs_list=(0.3, 0.9)))
    blocks = text.split('\n\n')
    assert len(blocks) == 2
    assert blocks[1].startswith('IoU@0.50 CS@0.90')


def test_csv(table_report):
    lines = report.render_csv([table_report]).splitlines()
    assert lines[0] == 'iou,cs,class,precision,recall,f1,support,' \
        'fp_outside_iou'
    assert lines[-1].startswith('0.5000,0.7500,Mean Average,0.6796,0.6997,'
                                '0.6786,')
    assert len(lines) == 8


def test_structured(table_report):
    data = simplejson.loads(report.render_structured([table_report]))
    assert len(data) == 1
    assert data[0]['mean_average']['precision'] == 0.6796
    assert [c['class'] for c in data[0]['classes']][:2] == ['CategoryI',
                                                             'CategoryII']


def test_render_is_byte_stable(table_report):
    for output_format in report.FORMATS:
        assert report.render([table_report], output_format) == \
            report.render([table_report], output_format)


def test_render_unknown_format(table_report):
    with pytest.raises(InvariantError):
        report.render([table_report], 'xlsx')


def test_histogram_and_summary():
    histogram = OrderedDict([('CategoryI', 12), ('DTI', 3)])
    assert report.render_histogram(histogram) == \
        'CategoryI          12\nDTI                 3\n'
    summary = OrderedDict([('mAP', 0.5), ('mAP_small', None)])
    assert report.render_summary(summary) == \
        'mAP                0.5000\nmAP_small          -\n'


def _curve(confidences_and_boxes):
    gts = {'a': [LabeledBox(Box(0, 0, 10, 10), 'DTI'),
                 LabeledBox(Box(50, 50, 60, 60), 'DTI')]}
    dets = [Detection(Box(*box), 'DTI', c, 'a')
            for c, box in confidences_and_boxes]
    return pr_curve(dets, gts, 'DTI')


HIT_1 = (0.9, (0, 0, 10, 10))
MISS = (0.8, (100, 100, 110, 110))
HIT_2 = (0.7, (50, 50, 60, 60))


def test_curve_points_csv():
    lines = report.curve_points_csv(_curve([HIT_1, MISS, HIT_2])).splitlines()
    assert lines == ['recall,precision,envelope',
                     '0.000000,1.000000,1.000000',
                     '0.500000,1.000000,1.000000',
                     '0.500000,0.500000,0.666667',
                     '1.000000,0.666667,0.666667']


def test_curve_svg_legend():
    curve = _curve([HIT_1, MISS, HIT_2])
    svg = report.curve_svg(curve)
    assert svg.lstrip().startswith('<?xml')
    assert 'DTI (AUC = 0.8333)' in svg
    assert svg == report.curve_svg(curve)
    assert 'AUC = 1.0000' in report.curve_svg(_curve([HIT_1, HIT_2]))
    assert 'AUC = 0.0000' in report.curve_svg(_curve([MISS]))


def test_write_curve(tmp_path):
    svg_path = str(tmp_path / 'dti.svg')
    written = report.write_curve(_curve([HIT_1, HIT_2]), svg_path)
    assert written == (svg_path, str(tmp_path / 'dti.csv'))
    assert (tmp_path / 'dti.csv').read_text().startswith('recall,')
    assert '<svg' in (tmp_path / 'dti.svg').read_text()


def test_write_curve_without_extension(tmp_path):
    directory = tmp_path / 'run.v2'
    directory.mkdir()
    svg_path = str(directory / 'dti')
    written = report.write_curve(_curve([HIT_1, HIT_2]), svg_path)
    assert written == (svg_path, svg_path + '.csv')
    assert (directory / 'dti.csv').read_text().startswith('recall,')
