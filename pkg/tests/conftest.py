# encoding: utf-8

from collections import OrderedDict

import pytest

from pudesk.dataset import DatasetManifest, ImageRecord, write_manifest
from pudesk.evaluation import write_detections
from pudesk.geometry import Box, Detection, LabeledBox


#: (TP, FP, FN) per class behind the cropped-image CS@0.75 result table.
TABLE_COUNTS = OrderedDict([
    ('CategoryI', (3, 5, 2)),
    ('CategoryII', (62, 32, 31)),
    ('CategoryIII', (8, 6, 3)),
    ('Unstageable', (62, 12, 15)),
    ('DTI', (21, 1, 9)),
])


def _grid_box(i):
    x, y = (i % 20) * 20, (i // 20) * 20
    return Box(x, y, x + 10, y + 10)


def count_fixture(counts, confidence=0.8):
    """Ground truth and detections with exact TP/FP/FN per class at any CS
    up to ``confidence``: one image per class, plus 0.1-confidence copies of
    every ground truth box."""
    gts, dets = OrderedDict(), []
    for class_name, (tp, fp, fn) in counts.items():
        image_id = 'img-%s.jpg' % class_name
        gts[image_id] = [LabeledBox(_grid_box(i), class_name)
                         for i in range(tp + fn)]
        dets.extend(Detection(_grid_box(i), class_name, confidence, image_id)
                    for i in range(tp))
        dets.extend(Detection(_grid_box(tp + fn + i), class_name, confidence,
                              image_id) for i in range(fp))
        dets.extend(Detection(_grid_box(i), class_name, 0.1, image_id)
                    for i in range(tp + fn))
    return gts, dets


@pytest.fixture
def table_counts():
    return TABLE_COUNTS


@pytest.fixture
def table_inputs():
    return count_fixture(TABLE_COUNTS)


@pytest.fixture
def table_files(tmp_path, table_inputs):
    """(ground truth manifest path, detection CSV path) for table_inputs."""
    gts, dets = table_inputs
    manifest = DatasetManifest([ImageRecord(image_id, '', 1024, 1024, boxes)
                                for image_id, boxes in gts.items()])
    gt_path = tmp_path / 'gt.jsonl'
    det_path = tmp_path / 'detections.csv'
    write_manifest(manifest, str(gt_path))
    write_detections(dets, str(det_path))
    return str(gt_path), str(det_path)
