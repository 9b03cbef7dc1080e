"""Anatomical landmark vocabulary and derived class definitions.

Landmark names follow the annotation scheme used throughout the package:
bone boundaries (pelvis-start, femur-end, eyes-end, ...) plus vertebra
centroids (L5..L1, Th12..Th1, C7..C1).  Slice indices increase from feet
to head ("natural" z ordering), so anatomically higher landmarks sit at
larger indices and should receive larger slice scores.
"""

# Full vocabulary, ordered from feet to head.
LANDMARK_NAMES = [
    "pelvis-start",
    "femur-end",
    "L5",
    "pelvis-end",
    "L4",
    "L3",
    "kidneys",
    "L2",
    "L1",
    "lung-start",
    "Th12",
    "Th11",
    "Th10",
    "Th9",
    "liver-end",
    "Th8",
    "Th7",
    "Th6",
    "Th5",
    "Th4",
    "Th3",
    "Th2",
    "lung-end",
    "Th1",
    "C7",
    "C6",
    "C5",
    "C4",
    "C3",
    "teeth",
    "C2",
    "C1",
    "nose",
    "eyes-end",
    "head-end",
]

# The twelve landmarks used for quantitative evaluation, in anatomical
# order.  The first and last one pin the common 0..100 score scale.
EVALUATION_LANDMARKS = [
    "pelvis-start",
    "femur-end",
    "L5",
    "L3",
    "L1",
    "Th11",
    "Th8",
    "Th5",
    "Th2",
    "C6",
    "C1",
    "eyes-end",
]

SCALE_START_LANDMARK = EVALUATION_LANDMARKS[0]   # maps to 0
SCALE_END_LANDMARK = EVALUATION_LANDMARKS[-1]    # maps to 100

# Five-class split used by the accuracy metric and by the per-slice tag
# vote on short scans.  Intervals are half-open [start, end) so boundary
# slices belong to exactly one class; classes are listed bottom-up.
FIVE_CLASSES = [
    ("pelvis", "pelvis-start", "L5"),
    ("abdomen", "L5", "Th11"),
    ("chest", "Th11", "Th2"),
    ("neck", "Th2", "C1"),
    ("head", "C1", "eyes-end"),
]


def is_known_landmark(name: str) -> bool:
    return name in LANDMARK_NAMES
