"""Hand-counted F1 cases: (name, duration, ref, hyp, event counts, segment counts).

Counts are (tp, fp, fn). Segment cells use 1 s segments; a label is active in
a segment when one of its intervals overlaps it with positive length. Event
matches need the same label, |onset diff| <= 0.2 s and
|offset diff| <= max(0.2 s, 0.2 * reference length).
"""
from fractions import Fraction

from audiocontrol.conditions import EventRoll, EventTrack


def roll(duration, **labels):
    return EventRoll(duration, [EventTrack(lab, ivs) for lab, ivs in labels.items()])


CASES = [
    # the worked example: 5 ref cells, 4 hit; offset error 1.0 s = 0.2 * 5 s still matches
    ("ref 0-5 hyp 0-4", 10.0, dict(dog=[(0, 5)]), dict(dog=[(0, 4)]), (1, 0, 0), (4, 0, 1)),
    ("identical two labels", 6.0, dict(dog=[(0, 2), (3, 5)], cat=[(1, 4)]),
     dict(dog=[(0, 2), (3, 5)], cat=[(1, 4)]), (3, 0, 0), (7, 0, 0)),
    ("empty hypothesis", 4.0, dict(dog=[(1, 3)]), dict(), (0, 0, 1), (0, 0, 2)),
    # onset shifted by twice the collar: no event match, segments still overlap
    ("shift by two collars", 4.0, dict(dog=[(1, 3)]), dict(dog=[(1.4, 3.4)]), (0, 1, 1), (2, 1, 0)),
    ("wrong label", 2.0, dict(dog=[(0, 2)]), dict(cat=[(0, 2)]), (0, 1, 1), (0, 2, 2)),
    ("complementary", 4.0, dict(dog=[(0, 2)]), dict(dog=[(2, 4)]), (0, 1, 1), (0, 2, 2)),
    ("two refs one hyp", 4.0, dict(dog=[(0, 1), (2, 3)]), dict(dog=[(0.1, 1.1)]), (1, 0, 1), (1, 1, 1)),
    # offset tolerance grows with reference length: 0.2 * 4 s = 0.8 s
    ("long offset tolerance", 5.0, dict(dog=[(0, 4)]), dict(dog=[(0.1, 4.7)]), (1, 0, 0), (4, 1, 0)),
    ("short offset tolerance", 2.0, dict(dog=[(0, 1)]), dict(dog=[(0, 1.5)]), (0, 1, 1), (1, 1, 0)),
    # greedy one-to-one: the closer onset wins, the other hypothesis is a false positive
    ("one to one", 3.0, dict(dog=[(1, 2)]), dict(dog=[(1.1, 2.0), (0.95, 2.05)]), (1, 1, 0), (1, 2, 0)),
    ("multi label", 3.0, dict(dog=[(0, 2)], cat=[(1, 3)]), dict(dog=[(0, 2)], bird=[(1, 3)]),
     (1, 1, 1), (2, 2, 2)),
]


def f1_of(counts):
    tp, fp, fn = counts
    if tp == 0:
        return Fraction(0)
    return Fraction(2 * tp, 2 * tp + fp + fn)


def build(case):
    name, duration, ref, hyp, ev, seg = case
    return roll(duration, **ref), roll(duration, **hyp), ev, seg
