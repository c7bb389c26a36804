# encoding: utf-8

import io
import logging
import math

import pytest
import simplejson
from hypothesis import given, strategies as st

from pudesk import dataset
from pudesk.dataset import (AugmentOp, DatasetManifest, ImageRecord,
                            augment, class_histogram, crop_window,
                            filter_resolution, letterbox_resize,
                            parse_labelme, parse_ops,
                            parse_voc, read_canonical, read_manifest,
                            split, square_crop, write_canonical,
                            write_manifest)
from pudesk.errors import EmptyResultError, InvariantError, ParseError
from pudesk.geometry import CLASSES, Box, LabeledBox


VOC = '''<annotation>
  <folder>wounds</folder>
  <filename>{name}</filename>
  <size><width>{width}</width><height>{height}</height><depth>3</depth></size>
  {objects}
</annotation>'''

OBJECT = '''<object><name>{label}</name><bndbox><xmin>{0}</xmin><ymin>{1}</ymin>
  <xmax>{2}</xmax><ymax>{3}</ymax></bndbox></object>'''


def voc(name='w1.jpg', width=600, height=400, boxes=()):
    objects = ''.join(OBJECT.format(*box[1:], label=box[0]) for box in boxes)
    return VOC.format(name=name, width=width, height=height, objects=objects)


def labelme(shapes, path='images/w2.jpg', width=800, height=600):
    return simplejson.dumps({'imagePath': path, 'imageWidth': width,
                             'imageHeight': height, 'shapes': shapes})


def _record(image_id='r', width=100, height=100, boxes=()):
    return ImageRecord(image_id, '', width, height,
                       [LabeledBox(Box(*b[1:]), b[0]) for b in boxes])


def test_parse_voc():
    record = parse_voc(voc(boxes=[('Category II', 10.5, 20, 110, 220.25),
                                  ('dti', 0, 0, 600, 400)]),
                       provenance='medetec')
    assert record.image_id == 'w1.jpg'
    assert (record.width, record.height) == (600.0, 400.0)
    assert [a.class_name for a in record.annotations] == ['CategoryII', 'DTI']
    assert record.annotations[0].box.as_tuple() == (10.5, 20.0, 110.0, 220.25)
    assert record.provenance == 'medetec'


def test_canonical_csv_text():
    record = parse_voc(voc(boxes=[('CategoryII', 10, 20, 110, 220)]))
    assert write_canonical([record]) == (
        'filename,width,height,class,xmin,ymin,xmax,ymax\n'
        'w1.jpg,600,400,CategoryII,10,20,110,220\n')


def test_voc_canonical_round_trip():
    records = [parse_voc(voc('b.jpg', boxes=[('Unstageable', 1.25, 2, 3, 4),
                                             ('CategoryI', 5, 6, 70.125, 8)])),
               parse_voc(voc('a.jpg', 1024, 768,
                             boxes=[('Category IV', 100, 100, 1000, 700)]))]
    back = read_canonical(io.StringIO(write_canonical(records)))
    assert [r.image_id for r in back] == ['a.jpg', 'b.jpg']
    by_id = {r.image_id: r for r in records}
    for record in back:
        original = by_id[record.image_id]
        assert (record.width, record.height) == (original.width,
                                                  original.height)
        assert record.annotations == original.annotations


def test_voc_lenient_clamps_with_warning(caplog):
    with caplog.at_level(logging.WARNING, logger='pudesk.dataset'):
        record = parse_voc(voc(boxes=[('DTI', -5, 10, 650, 300),
                                      ('DTI', 50, 50, 50, 80)]))
    assert [a.box.as_tuple() for a in record.annotations] == \
        [(0.0, 10.0, 600.0, 300.0)]
    assert 'clamping' in caplog.text
    assert 'degenerate' in caplog.text


def test_voc_strict_rejects_out_of_image_box():
    with pytest.raises(InvariantError):
        parse_voc(voc(boxes=[('DTI', -5, 10, 650, 300)]), strict=True)


def test_voc_parse_errors():
    with pytest.raises(ParseError):
        parse_voc('<annotation><filename>x')
    with pytest.raises(ParseError) as info:
        parse_voc('<annotation><filename>x.jpg</filename></annotation>')
    assert info.value.field == 'size'
    with pytest.raises(ParseError) as info:
        parse_voc(voc(boxes=[('Category V', 1, 1, 2, 2)]))
    assert info.value.field == 'class'
    with pytest.raises(ParseError):
        parse_voc(voc(boxes=[('DTI', 'left', 1, 2, 2)]))


def test_parse_labelme_rectangles():
    record = parse_labelme(labelme([
        {'label': 'Category III', 'shape_type': 'rectangle',
         'points': [[300, 200], [100, 50]]}]))
    assert record.image_id == 'w2.jpg'
    assert record.annotations[0].class_name == 'CategoryIII'
    assert record.annotations[0].box.as_tuple() == (100, 50, 300, 200)


def test_parse_labelme_rejects_polygons():
    with pytest.raises(ParseError) as info:
        parse_labelme(labelme([{'label': 'DTI', 'shape_type': 'polygon',
                                'points': [[0, 0], [1, 1], [0, 1]]}]))
    assert info.value.field == 'shape_type'
    with pytest.raises(ParseError):
        parse_labelme('{"imagePath": ')


def test_load_annotation_detects_format(tmp_path):
    path = tmp_path / 'w1.xml'
    path.write_text(voc(boxes=[('DTI', 1, 1, 5, 5)]))
    record = dataset.load_annotation(str(path), provenance='trial')
    assert record.source_path == str(path)
    assert record.provenance == 'trial'
    with pytest.raises(ParseError):
        dataset.detect_format('notes.txt')


def test_unknown_provenance():
    with pytest.raises(InvariantError):
        ImageRecord('a', '', 10, 10, provenance='scraped')


def test_manifest_round_trip(tmp_path):
    manifest = DatasetManifest([
        _record('b', boxes=[('DTI', 1.5, 2, 30, 40)]),
        _record('a', 640, 480, boxes=[('CategoryII', 0, 0, 640, 480),
                                      ('Unstageable', 10, 10, 20, 20)])])
    assert [r.image_id for r in manifest] == ['a', 'b']
    assert manifest.num_objects == 3
    assert manifest.class_histogram['CategoryII'] == 1
    path = tmp_path / 'all.jsonl'
    write_manifest(manifest, str(path))
    assert read_manifest(str(path)).records == manifest.records
    text = io.StringIO(dataset.manifest_lines(manifest))
    assert read_manifest(text, 'train').split_tag == 'train'


def test_manifest_bad_line():
    with pytest.raises(ParseError):
        read_manifest(io.StringIO('{"image_id": "a"\n'))
    with pytest.raises(ParseError):
        read_manifest(io.StringIO('{"image_id": "a"}\n'))


def test_load_records_by_extension(tmp_path):
    records = [_record('a', boxes=[('DTI', 1, 1, 9, 9)])]
    csv_path = tmp_path / 'gt.csv'
    write_canonical(records, str(csv_path))
    assert dataset.load_records(str(csv_path))[0].annotations == \
        records[0].annotations
    manifest_path = tmp_path / 'gt.jsonl'
    write_manifest(DatasetManifest(records), str(manifest_path))
    assert dataset.load_records(str(manifest_path)) == records


def _images(n):
    return DatasetManifest([_record('img%04d' % i) for i in range(n)])


def test_split_partitions_images():
    manifest = _images(50)
    train, val = split(manifest, 0.9, seed=4)
    assert (len(train), len(val)) == (45, 5)
    assert (train.split_tag, val.split_tag) == ('train', 'val')
    train_ids = {r.image_id for r in train}
    val_ids = {r.image_id for r in val}
    assert not train_ids & val_ids
    assert train_ids | val_ids == {r.image_id for r in manifest}


def test_split_deterministic():
    manifest = _images(30)
    first = split(manifest, 0.8, seed=11)
    assert split(manifest, 0.8, seed=11) == first


def test_split_rejects_bad_inputs():
    with pytest.raises(InvariantError):
        split(_images(10), 1.0)
    with pytest.raises(InvariantError):
        split(_images(1), 0.5)


def test_letterbox_pads_short_side():
    record = _record('tall', 500, 1000, boxes=[('DTI', 0, 0, 500, 1000)])
    out, transform = letterbox_resize(record, 1024)
    assert (out.width, out.height) == (1024.0, 1024.0)
    assert transform.pad_x == pytest.approx(256.0)
    assert out.annotations[0].box.as_tuple() == \
        pytest.approx((256.0, 0.0, 768.0, 1024.0))


@given(st.integers(50, 4000), st.integers(50, 4000),
       st.floats(0, 0.45), st.floats(0, 0.45),
       st.floats(0.5, 0.95), st.floats(0.5, 0.95))
def test_letterbox_inverts(width, height, fx0, fy0, fx1, fy1):
    box = Box(fx0 * width, fy0 * height, fx1 * width, fy1 * height)
    record = _record('a', width, height, boxes=[('DTI',) + box.as_tuple()])
    out, transform = letterbox_resize(record, 1024)
    back = transform.invert_box(out.annotations[0].box)
    for got, want in zip(back.as_tuple(), box.as_tuple()):
        assert got == pytest.approx(want, abs=1e-6)


def test_parse_ops():
    assert parse_ops('flip_h,rotate( -12.5 ),scale') == [
        AugmentOp('flip_h', None), AugmentOp('rotate', -12.5),
        AugmentOp('scale', None)]
    with pytest.raises(ParseError):
        parse_ops('blur')
    with pytest.raises(ParseError):
        parse_ops('flip_v(3)')
    with pytest.raises(ParseError):
        parse_ops('rotate(left)')


def test_flip_twice_is_identity():
    record = _record(boxes=[('DTI', 10, 20, 30, 60), ('CategoryI', 0, 0, 5, 5)])
    for op in ('flip_h', 'flip_v'):
        assert augment(record, [op, op]) == record


def test_flip_h_mirrors_box():
    record = _record(width=200, boxes=[('DTI', 10, 20, 30, 60)])
    out = augment(record, ['flip_h'])
    assert out.annotations[0].box.as_tuple() == (170.0, 20.0, 190.0, 60.0)


def test_rotate_quarter_turn():
    record = _record(boxes=[('DTI', 10, 20, 30, 60)])
    box = augment(record, [AugmentOp('rotate', 90.0)]).annotations[0].box
    for got, want in zip(box.as_tuple(), (20.0, 70.0, 60.0, 90.0)):
        assert got == pytest.approx(want, abs=1e-9)


def test_random_parameters_follow_seed():
    record = _record(boxes=[('DTI', 30, 30, 60, 60)])
    ops = parse_ops('rotate,scale,skew')
    assert augment(record, ops, seed=5) == augment(record, ops, seed=5)


def test_augment_drops_boxes_pushed_out():
    record = _record(boxes=[('DTI', 0, 0, 10, 10)])
    assert augment(record, [AugmentOp('scale', 10.0)]).annotations == ()
    with pytest.raises(EmptyResultError):
        augment(record, [AugmentOp('scale', 10.0)], strict=True)
    with pytest.raises(InvariantError):
        augment(record, [AugmentOp('scale', 0.0)])


def test_crop_window_reexpresses_boxes():
    record = _record(width=400, height=300,
                     boxes=[('DTI', 100, 100, 200, 200),
                            ('CategoryII', 0, 0, 110, 20),
                            ('CategoryI', 350, 250, 400, 300)])
    out = crop_window(record, Box(50, 50, 250, 250))
    assert (out.width, out.height) == (200.0, 200.0)
    assert [(a.class_name, a.box.as_tuple()) for a in out.annotations] == \
        [('DTI', (50.0, 50.0, 150.0, 150.0))]
    with pytest.raises(InvariantError):
        crop_window(record, Box(300, 200, 500, 300))


def test_square_crop_follows_annotations():
    record = _record(width=2000, height=1500,
                     boxes=[('DTI', 1800, 1400, 1900, 1480)])
    out = square_crop(record, 1024)
    assert (out.width, out.height) == (1024.0, 1024.0)
    assert out.annotations[0].box.as_tuple() == (824.0, 924.0, 924.0, 1004.0)


def test_square_crop_small_image():
    out = square_crop(_record(width=300, height=500), 1024)
    assert (out.width, out.height) == (300.0, 300.0)


def test_filter_resolution(caplog):
    records = [_record('a', 600, 400), _record('b', 599, 800),
               _record('c', 1024, 399)]
    with caplog.at_level(logging.WARNING, logger='pudesk.dataset'):
        kept = filter_resolution(records)
    assert [r.image_id for r in kept] == ['a']
    assert 'dropped 2 images' in caplog.text


TRAINING_COUNTS = dict(zip(CLASSES, (685, 1401, 432, 740, 899, 927)))
TRIAL_COUNTS = dict(zip(CLASSES, (5, 93, 11, 0, 30, 77)))


def _corpus(counts):
    return [_record('%s-%04d' % (name, i), boxes=[(name, 0, 0, 10, 10)])
            for name, count in counts.items() for i in range(count)]


@pytest.mark.parametrize('counts', [TRAINING_COUNTS, TRIAL_COUNTS])
def test_class_histogram_published_counts(counts):
    records = _corpus(counts)
    assert dict(class_histogram(records)) == counts
    manifest = DatasetManifest(records)
    assert list(manifest.class_histogram) == list(CLASSES)
    assert manifest.num_objects == sum(counts.values())


@given(st.randoms(use_true_random=False))
def test_class_histogram_ignores_record_order(rng):
    records = _corpus(TRIAL_COUNTS)
    rng.shuffle(records)
    assert dict(class_histogram(records)) == TRIAL_COUNTS


def test_voc_with_one_object_per_class():
    names = ('Category I', 'category ii', 'Category III', 'CATEGORY IV',
             'DTI', 'Unstageable')
    record = parse_voc(voc(boxes=[(name, 80 * i, 10, 80 * i + 50, 60)
                                  for i, name in enumerate(names)]))
    assert list(class_histogram([record]).values()) == [1] * 6


def _map_point(op, x, y, width, height):
    cx, cy = width / 2.0, height / 2.0
    dx, dy = x - cx, y - cy
    if op.name == 'flip_h':
        return width - x, y
    if op.name == 'flip_v':
        return x, height - y
    if op.name == 'rotate':
        c = math.cos(math.radians(op.param))
        s = math.sin(math.radians(op.param))
        return cx + c * dx + s * dy, cy - s * dx + c * dy
    if op.name == 'scale':
        return cx + op.param * dx, cy + op.param * dy
    return cx + dx + op.param * dy, y


augment_ops = st.one_of(
    st.sampled_from([AugmentOp('flip_h', None), AugmentOp('flip_v', None)]),
    st.builds(AugmentOp, st.just('rotate'), st.floats(-180, 180)),
    st.builds(AugmentOp, st.just('scale'), st.floats(0.5, 2.0)),
    st.builds(AugmentOp, st.just('skew'), st.floats(-0.5, 0.5)))


@given(st.integers(0, 150), st.integers(0, 50), st.integers(10, 50),
       st.integers(10, 50), st.lists(augment_ops, min_size=1, max_size=4))
def test_augment_box_is_hull_of_mapped_corners(x, y, w, h, ops):
    record = _record(width=200, height=100, boxes=[('DTI', x, y, x + w, y + h)])
    corners = [(x, y), (x, y + h), (x + w, y), (x + w, y + h)]
    for op in ops:
        corners = [_map_point(op, px, py, 200, 100) for px, py in corners]
    xs = [min(max(px, 0.0), 200.0) for px, _ in corners]
    ys = [min(max(py, 0.0), 100.0) for _, py in corners]
    for annotation in augment(record, ops).annotations:
        box = annotation.box
        assert box.xmin == pytest.approx(min(xs), abs=1e-6)
        assert box.ymin == pytest.approx(min(ys), abs=1e-6)
        assert box.xmax == pytest.approx(max(xs), abs=1e-6)
        assert box.ymax == pytest.approx(max(ys), abs=1e-6)


def test_crop_window_retained_area_floor():
    record = _record(width=400, height=300,
                     boxes=[('DTI', 0, 100, 100, 200),
                            ('CategoryII', 0, 100, 60, 200),
                            ('CategoryI', 0, 100, 75, 200)])
    out = crop_window(record, Box(50, 50, 250, 250))
    assert [(a.class_name, a.box.as_tuple()) for a in out.annotations] == \
        [('DTI', (0.0, 50.0, 50.0, 150.0)),
         ('CategoryI', (0.0, 50.0, 25.0, 150.0))]
