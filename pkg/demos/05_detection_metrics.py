# %% [markdown]
"""
# Event- and segment-based F1

Event-based F1 matches whole events: same label, onsets within a 0.2 s
collar, offsets within max(0.2 s, 20% of the reference length), one to one.
Segment-based F1 cuts the clip into 1 s segments and scores each
(segment, label) cell as active or not.

The two views can disagree sharply, as the cases below show.
"""

# %%
from audiocontrol.conditions import EventRoll, EventTrack
from audiocontrol.evaluation import event_f1, segment_f1


def roll(duration, **labels):
    return EventRoll(duration, [EventTrack(lab, ivs) for lab, ivs in labels.items()])


def show(title, ref, hyp):
    e, s = event_f1(ref, hyp), segment_f1(ref, hyp)
    print(f"{title:34s} event F1 {e.f1:.3f} (tp {e.tp} fp {e.fp} fn {e.fn})   "
          f"segment F1 {s.f1:.3f} (tp {s.tp} fp {s.fp} fn {s.fn})")


# %% [markdown]
"""
A reference dog bark over 0-5 s and a hypothesis over 0-4 s: the offset is
1 s late, which 20% of a 5 s event still tolerates, so the event matches.
Four of the five reference segments are hit, so segment F1 is 2*4/(2*4+1) = 8/9.
"""

# %%
show("ref 0-5, hyp 0-4", roll(10.0, dog=[(0, 5)]), roll(10.0, dog=[(0, 4)]))

# %% [markdown]
"""
Shift a 2 s event by 0.4 s: twice the onset collar, so no event match. The
segment view only loses the one cell the shifted tail spills into.
"""

# %%
show("shifted by two collars", roll(4.0, dog=[(1, 3)]), roll(4.0, dog=[(1.4, 3.4)]))
show("wrong label", roll(2.0, dog=[(0, 2)]), roll(2.0, cat=[(0, 2)]))
show("empty hypothesis", roll(4.0, dog=[(1, 3)]), EventRoll(4.0))
show("identical", roll(6.0, dog=[(0, 2), (3, 5)], cat=[(1, 4)]), roll(6.0, dog=[(0, 2), (3, 5)], cat=[(1, 4)]))
