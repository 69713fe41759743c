# %% [markdown]
"""
# Condition features from audio

Three kinds of time-aligned control signal are read off a clip:

| Kind | Extractor | Frame rate |
|------|-----------|------------|
| loudness | frame RMS in dB, Savitzky-Golay smoothed | ~43 Hz |
| pitch | f0 track, log, Ricker CWT over 32 scales, 256-bin codes | ~43 Hz |
| events | tone-band detector, one activity row per label | ~43 Hz |

Run with ``python demos/01_condition_features.py``. Nothing is written to disk.
"""

# %%
import numpy as np

from audiocontrol import conditions, dsp, evaluation
from audiocontrol.conditions import EventRoll, EventTrack
from audiocontrol.data import ToyCorpusSpec, synth_toy_clip
from audiocontrol.dsp import SAMPLE_RATE, AudioClip

# %% [markdown]
"""
## Loudness

A 330 Hz tone whose amplitude swells and fades once a second. The curve
follows the envelope. A 0.05..0.5 amplitude swing spans 20 dB, and the
frame averaging and smoothing shave a little off the extremes.
"""

# %%
t = np.arange(3 * SAMPLE_RATE) / SAMPLE_RATE
env = 0.05 + 0.45 * (0.5 + 0.5 * np.sin(2 * np.pi * t))
clip = AudioClip(env * np.sin(2 * np.pi * 330 * t))
curve = conditions.extract_loudness(clip)
print(f"{len(curve.db)} frames at {curve.frame_rate:.2f} Hz")
print(f"range {curve.db.min():.1f} .. {curve.db.max():.1f} dB")

# %% [markdown]
"""
## Pitch

A steady tone has a flat log-f0 contour, so every CWT scale answers zero and
all frames land in the same code (the middle bin). A vibrato tone moves the
codes at the scales that match its rate.
"""

# %%
steady = AudioClip(0.5 * np.sin(2 * np.pi * 220 * t))
code = conditions.extract_pitch(steady)
print("steady tone codes:", np.unique(code.bins))

phase = 2 * np.pi * np.cumsum(220 * (1 + 0.03 * np.sin(2 * np.pi * 2 * t))) / SAMPLE_RATE
vibrato = conditions.extract_pitch(AudioClip(0.5 * np.sin(phase)))
print("vibrato: distinct codes per scale (first 8):", [len(np.unique(c)) for c in vibrato.bins.T[:8]])
print(f"f0 of the steady tone: {np.median(dsp.estimate_f0(steady).f0):.2f} Hz")

# %% [markdown]
"""
## Events

The toy corpus gives each label its own tone band. The detector reads the
bands back, so a synthesized roll is recovered to within a frame or two.
"""

# %%
spec = ToyCorpusSpec()
roll = EventRoll(6.0, [EventTrack("dog", [(0.5, 2.0)]), EventTrack("siren", [(1.5, 4.25)])])
det = evaluation.toy_sed(synth_toy_clip(spec, roll), spec.vocabulary)
for label in ("dog", "siren"):
    print(label, "reference", roll.intervals_for(label), "detected",
          [(round(a, 3), round(b, 3)) for a, b in det.intervals[label]])
activity = conditions.event_activity(roll, conditions.n_frames_for(6.0))
print("activity matrix", activity.shape)
