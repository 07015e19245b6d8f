"""The 19-class urban-scene label palette.

Class indices follow the Cityscapes trainID convention: the evaluation
classes are numbered 0..18 in the fixed order below and 255 marks pixels
excluded from both training and evaluation.

Render colors are flat RGB anchors in [0, 1] used by the synthetic scene
renderer.  Several class pairs are deliberately close in color (road vs
sidewalk, building vs wall, vegetation vs terrain, ...) so that, under
pixel noise, telling them apart requires spatial context rather than a
per-pixel color threshold.  Every close pair differs by the same "warm"
color axis PAIR_AXIS; the panoramic renderer shifts its output along this
axis, which slides each pair's first member onto its partner's anchor and
makes the cross-domain confusions systematic rather than random.
"""

from __future__ import annotations

import numpy as np

NUM_CLASSES = 19
IGNORE_INDEX = 255

CLASS_NAMES = (
    "road",
    "sidewalk",
    "building",
    "wall",
    "fence",
    "pole",
    "traffic light",
    "traffic sign",
    "vegetation",
    "terrain",
    "sky",
    "person",
    "rider",
    "car",
    "truck",
    "bus",
    "train",
    "motorcycle",
    "bicycle",
)

# The common difference vector of every close class pair (about one noise
# standard deviation long): partner = anchor + PAIR_AXIS.
PAIR_AXIS = np.array([0.045, 0.012, -0.012], dtype=np.float64)

# Flat render colors, RGB in [0, 1], indexed by class id.
RENDER_COLORS = np.array(
    [
        [0.320, 0.320, 0.340],  # road
        [0.365, 0.332, 0.328],  # sidewalk   = road + PAIR_AXIS
        [0.270, 0.270, 0.270],  # building
        [0.315, 0.282, 0.258],  # wall       = building + PAIR_AXIS
        [0.600, 0.470, 0.350],  # fence
        [0.620, 0.620, 0.620],  # pole
        [0.965, 0.712, 0.068],  # traffic light = traffic sign + PAIR_AXIS
        [0.920, 0.700, 0.080],  # traffic sign
        [0.130, 0.550, 0.130],  # vegetation
        [0.175, 0.562, 0.118],  # terrain    = vegetation + PAIR_AXIS
        [0.530, 0.810, 0.920],  # sky
        [0.860, 0.080, 0.230],  # person
        [0.905, 0.092, 0.218],  # rider      = person + PAIR_AXIS
        [0.000, 0.000, 0.560],  # car
        [0.045, 0.012, 0.548],  # truck      = car + PAIR_AXIS
        [0.000, 0.470, 0.740],  # bus
        [0.000, 0.500, 0.500],  # train
        [0.500, 0.000, 0.550],  # motorcycle
        [0.545, 0.012, 0.538],  # bicycle    = motorcycle + PAIR_AXIS
    ],
    dtype=np.float64,
)

assert RENDER_COLORS.shape == (NUM_CLASSES, 3)


def colorize_labels(labels: np.ndarray) -> np.ndarray:
    """Map an H×W label map to an H×W×3 float image; ignore pixels become black."""
    out = np.zeros(labels.shape + (3,), dtype=np.float64)
    valid = labels != IGNORE_INDEX
    out[valid] = RENDER_COLORS[labels[valid]]
    return out
