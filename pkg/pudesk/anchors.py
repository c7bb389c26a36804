# encoding: utf-8

"""Anchor grids, RPN and second-stage target assignment, minibatch sampling
and RoI crop/pool geometry on synthetic feature maps.

>>> grid = generate_anchors(1024, 1024)
>>> len(grid)
36864
"""

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from pudesk.errors import InvariantError
from pudesk.geometry import (BACKGROUND, Box, BoxDelta, boxes_to_array,
                             decode_deltas, encode_deltas, iou_matrix,
                             nms_indices)
from pudesk.log import get_logger


log = get_logger('pudesk.anchors')

DEFAULT_STRIDE = 16
DEFAULT_SCALES = (128.0, 256.0, 512.0)
DEFAULT_RATIOS = (0.5, 1.0, 2.0)

FOREGROUND = 'foreground'
IGNORE = 'ignore'

#: (foreground threshold, background threshold) pairs. "assignment" is the
#: default; "nms" is the 0.7/0.3 pair quoted alongside proposal NMS.
RPN_PRESETS = {
    'assignment': (0.5, 0.1),
    'nms': (0.7, 0.3),
}


@dataclass(frozen=True)
class AnchorGrid(object):
    """Anchors tiled over an image: one row of ``anchors`` per anchor.

    Rows are ordered by grid row, then grid column, then scale, then ratio.
    """

    stride: float
    scales: tuple
    ratios: tuple
    image_w: float
    image_h: float
    anchors: np.ndarray

    def __len__(self):
        return len(self.anchors)

    def box(self, index):
        return Box(*self.anchors[index])

    @property
    def boxes(self):
        return [Box(*row) for row in self.anchors]

    @property
    def per_cell(self):
        return len(self.scales) * len(self.ratios)

    def inside_image(self):
        """Boolean mask of anchors lying fully inside the image."""
        a = self.anchors
        return ((a[:, 0] >= 0) & (a[:, 1] >= 0) &
                (a[:, 2] <= self.image_w) & (a[:, 3] <= self.image_h))


@dataclass(frozen=True)
class TargetAssignment(object):
    """Training target for one anchor or proposal."""

    anchor_index: int
    label: str
    matched_gt: Optional[int] = None
    deltas: Optional[BoxDelta] = None
    class_name: Optional[str] = None


@dataclass(frozen=True)
class FeatureGrid(object):
    """A synthetic feature map, ``values`` shaped (height, width, channels)."""

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 2:
            values = values[:, :, None]
        if values.ndim != 3 or min(values.shape) < 1:
            raise InvariantError('feature grid must be (height, width, '
                                 'channels), got %r' % (values.shape,))
        if not np.all(np.isfinite(values)):
            raise InvariantError('feature grid holds non-finite values')
        object.__setattr__(self, 'values', values)

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]

    @property
    def channels(self):
        return self.values.shape[2]


def anchor_shapes(scales, ratios):
    """(width, height) of the base anchors; ratio is height over width and
    every shape keeps the area of its scale.

    >>> [tuple(round(v, 3) for v in s) for s in anchor_shapes([2], [1, 4])]
    [(2.0, 2.0), (1.0, 4.0)]
    """
    return [(s / math.sqrt(r), s * math.sqrt(r))
            for s in scales for r in ratios]


def generate_anchors(image_w, image_h, stride=DEFAULT_STRIDE,
                     scales=DEFAULT_SCALES, ratios=DEFAULT_RATIOS):
    """Tile anchors over an image.

    Each of the ``floor(image_w / stride) * floor(image_h / stride)`` cells
    gets one anchor per (scale, ratio), centred on the cell. Anchors may
    extend past the image border.
    """
    if not stride or stride <= 0:
        raise InvariantError('anchor stride must be positive, got %r'
                             % (stride,))
    scales = tuple(float(s) for s in scales)
    ratios = tuple(float(r) for r in ratios)
    if not scales or not ratios:
        raise InvariantError('anchor scales and ratios must be non-empty')
    if min(scales) <= 0 or min(ratios) <= 0:
        raise InvariantError('anchor scales and ratios must be positive')
    nx = int(image_w // stride)
    ny = int(image_h // stride)
    shapes = np.array(anchor_shapes(scales, ratios), dtype=float)
    cy, cx = np.meshgrid((np.arange(ny) + 0.5) * stride,
                         (np.arange(nx) + 0.5) * stride, indexing='ij')
    cx = cx.reshape(-1, 1)
    cy = cy.reshape(-1, 1)
    half_w = 0.5 * shapes[:, 0][None, :]
    half_h = 0.5 * shapes[:, 1][None, :]
    anchors = np.stack([cx - half_w, cy - half_h, cx + half_w, cy + half_h],
                       axis=-1).reshape(-1, 4)
    log.fine('%d anchors over a %dx%d cell grid', len(anchors), nx, ny)
    return AnchorGrid(float(stride), scales, ratios, float(image_w),
                      float(image_h), anchors)


def _check_thresholds(fg_thr, bg_thr):
    if not 0.0 <= bg_thr < fg_thr <= 1.0:
        raise InvariantError('need 0 <= bg_thr < fg_thr <= 1, got %r / %r'
                             % (fg_thr, bg_thr))


def assign_rpn_targets(grid, gts, fg_thr=0.5, bg_thr=0.1,
                       exclude_outside=False):
    """Label every anchor foreground, background or ignore.

    An anchor whose best IoU over ``gts`` exceeds ``fg_thr`` is foreground
    and regresses towards that box; below ``bg_thr`` (including no overlap)
    it is background; anything between is ignored. A ground-truth box that
    overlaps some anchor but has no foreground anchor of its own gets its
    highest-IoU free anchor forced to foreground. With ``exclude_outside``,
    anchors crossing the image border are always ignored.

    :returns: One :class:`TargetAssignment` per anchor, in anchor order.
    """
    _check_thresholds(fg_thr, bg_thr)
    n = len(grid)
    if exclude_outside:
        inside = grid.inside_image()
    else:
        inside = np.ones(n, dtype=bool)
    if not gts:
        return [TargetAssignment(i, BACKGROUND if inside[i] else IGNORE)
                for i in range(n)]

    gt_array = boxes_to_array([g.box for g in gts])
    overlaps = iou_matrix(grid.anchors, gt_array)
    overlaps[~inside] = 0.0
    max_iou = overlaps.max(axis=1)
    matched = overlaps.argmax(axis=1)

    labels = np.full(n, IGNORE, dtype=object)
    labels[max_iou < bg_thr] = BACKGROUND
    labels[max_iou > fg_thr] = FOREGROUND
    labels[~inside] = IGNORE

    forced = 0
    for g in range(len(gts)):
        column = overlaps[:, g]
        if not np.any(column > 0):
            continue
        if np.any((labels == FOREGROUND) & (matched == g)):
            continue
        candidates = np.where((labels != FOREGROUND) & (column > 0),
                              column, -1.0)
        best = int(np.argmax(candidates))
        if candidates[best] <= 0:
            continue
        labels[best] = FOREGROUND
        matched[best] = g
        forced += 1
    if forced:
        log.fine('forced %d anchors to foreground', forced)

    result = []
    for i in range(n):
        if labels[i] == FOREGROUND:
            gt = gts[matched[i]]
            result.append(TargetAssignment(
                i, FOREGROUND, int(matched[i]),
                encode_deltas(grid.box(i), gt.box), gt.class_name))
        else:
            result.append(TargetAssignment(i, labels[i]))
    return result


def sample_minibatch(assignments, batch=256, fg_fraction=0.5, seed=0):
    """Sample a balanced anchor minibatch.

    Up to ``fg_fraction * batch`` foreground anchors are drawn uniformly
    without replacement; background anchors fill the rest.

    :returns: Anchor indices, foreground first, each part ascending.
    """
    if batch <= 0:
        raise InvariantError('minibatch size must be positive, got %r'
                             % (batch,))
    if not 0.0 <= fg_fraction <= 1.0:
        raise InvariantError('foreground fraction %r outside [0, 1]'
                             % (fg_fraction,))
    fg = [a.anchor_index for a in assignments if a.label == FOREGROUND]
    bg = [a.anchor_index for a in assignments if a.label == BACKGROUND]
    if not fg:
        log.warning('no foreground anchors available; minibatch is all '
                    'background')
    rng = np.random.default_rng(seed)
    num_fg = min(len(fg), int(fg_fraction * batch))
    chosen_fg = rng.choice(fg, size=num_fg, replace=False) if num_fg else []
    num_bg = min(len(bg), batch - num_fg)
    chosen_bg = rng.choice(bg, size=num_bg, replace=False) if num_bg else []
    return ([int(i) for i in sorted(chosen_fg)] +
            [int(i) for i in sorted(chosen_bg)])


def assign_proposal_targets(proposals, gts, fg_thr=0.5, bg_thr=0.1):
    """Second-stage targets for proposals.

    Best IoU above ``fg_thr``: the ground truth's class plus deltas. Between
    ``bg_thr`` and ``fg_thr`` (inclusive): background. Below ``bg_thr``:
    ignored, i.e. left out of the loss.
    """
    _check_thresholds(fg_thr, bg_thr)
    proposals = list(proposals)
    if not gts:
        return [TargetAssignment(i, IGNORE) for i in range(len(proposals))]
    overlaps = iou_matrix(boxes_to_array(proposals),
                          boxes_to_array([g.box for g in gts]))
    result = []
    for i, proposal in enumerate(proposals):
        g = int(overlaps[i].argmax())
        best = overlaps[i, g]
        if best > fg_thr:
            result.append(TargetAssignment(
                i, FOREGROUND, g, encode_deltas(proposal, gts[g].box),
                gts[g].class_name))
        elif best >= bg_thr:
            result.append(TargetAssignment(i, BACKGROUND,
                                           class_name=BACKGROUND))
        else:
            result.append(TargetAssignment(i, IGNORE))
    return result


def select_proposals(grid, deltas, scores, top_n=300, nms_threshold=0.7,
                     pre_nms_top_n=6000, min_size=1.0):
    """Turn per-anchor deltas and objectness scores into proposals.

    The ``pre_nms_top_n`` best-scoring anchors are decoded and clipped to the
    image. Boxes narrower or shorter than ``min_size`` are dropped, NMS runs
    at ``nms_threshold`` and at most ``top_n`` survivors are returned.

    :returns: List of (Box, score), best first.
    """
    deltas = np.asarray(deltas, dtype=float).reshape(-1, 4)
    scores = np.asarray(scores, dtype=float).reshape(-1)
    if len(deltas) != len(grid) or len(scores) != len(grid):
        raise InvariantError('need one delta row and score per anchor')
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    boxes = []
    kept_scores = []
    for i in order[:pre_nms_top_n]:
        box = decode_deltas(grid.box(i), BoxDelta.from_array(deltas[i]),
                            clip_to=(grid.image_w, grid.image_h))
        if box.width < min_size or box.height < min_size:
            continue
        boxes.append(box)
        kept_scores.append(float(scores[i]))
    keep = nms_indices(boxes, kept_scores, nms_threshold)[:top_n]
    return [(boxes[i], kept_scores[i]) for i in keep]


def _bilinear(values, ys, xs):
    height, width = values.shape[:2]
    ys = np.clip(ys, 0.0, height - 1.0)
    xs = np.clip(xs, 0.0, width - 1.0)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, height - 1)
    x1 = np.minimum(x0 + 1, width - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    v00 = values[y0[:, None], x0[None, :]]
    v01 = values[y0[:, None], x1[None, :]]
    v10 = values[y1[:, None], x0[None, :]]
    v11 = values[y1[:, None], x1[None, :]]
    top = v00 + wx * (v01 - v00)
    bottom = v10 + wx * (v11 - v10)
    return top + wy * (bottom - top)


def roi_crop_pool(feature, proposal, stride=DEFAULT_STRIDE, crop_size=14,
                  pool_kernel=2):
    """Crop a proposal out of a feature map and max-pool it.

    The proposal (image pixels) is scaled by ``1 / stride`` into feature
    cells, resampled bilinearly to ``crop_size x crop_size`` (samples at the
    centres of an even subdivision, feature values living at cell centres),
    then max-pooled with a ``pool_kernel`` square kernel. Channels are
    preserved: the default turns any proposal into a 7x7xC grid.
    """
    if crop_size % pool_kernel:
        raise InvariantError('crop size %d is not a multiple of the pool '
                             'kernel %d' % (crop_size, pool_kernel))
    x0, y0, x1, y1 = (v / float(stride) for v in proposal.as_tuple())
    if x1 <= x0 or y1 <= y0:
        raise InvariantError('degenerate proposal %r'
                             % (proposal.as_tuple(),))
    if x1 <= 0 or y1 <= 0 or x0 >= feature.width or y0 >= feature.height:
        raise InvariantError('proposal %r lies outside the %dx%d feature grid'
                             % (proposal.as_tuple(), feature.width,
                                feature.height))
    steps = np.arange(crop_size) + 0.5
    xs = x0 + steps * (x1 - x0) / crop_size - 0.5
    ys = y0 + steps * (y1 - y0) / crop_size - 0.5
    crop = _bilinear(feature.values, ys, xs)
    n = crop_size // pool_kernel
    pooled = crop.reshape(n, pool_kernel, n, pool_kernel,
                          feature.channels).max(axis=(1, 3))
    return FeatureGrid(pooled)
