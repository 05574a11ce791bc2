"""Why a window of frames beats a single frame.

The synthetic set renders blinks and long eye closures identically frame
by frame. Only closures carry a label, and it ramps up with the closure's
duration, so no single-frame model can tell a blink from the start of a
closure. A model looking at the last 30 frames can.

Trains both models on 4 of 6 subjects and reports held-out MSE. Takes
about two minutes on one core.
"""

from rclnet import NetworkConfig, PoolSpec, SynthSpec, TrainConfig, compare_static_baseline, synth_generate
from rclnet.datapipe import label_histogram

seqs = synth_generate(SynthSpec())
hist = label_histogram(seqs)
print(f"{len(seqs)} sequences, {hist.sum()} frames, {hist[0] / hist.sum():.0%} labelled 0")

net = NetworkConfig(
    input_w=64,
    input_h=30,
    maps=8,
    rcl_count=2,
    iterations=2,
    pool_specs=(PoolSpec(4, 1, 4, 1), PoolSpec(4, 1, 4, 1), PoolSpec(1, 1, 1, 1)),
    dropout_rate=0.0,
)
budget = TrainConfig(batch_size=32, steps_per_epoch=20, max_epochs=30, level_weights="natural")
result = compare_static_baseline(seqs, net, budget)

print(f"held-out subjects {result.test_subjects}")
print(f"  30-frame model  MSE {result.temporal.pooled_mse:.3f}  PCC {result.temporal.pooled_pcc:.3f}")
print(f"  1-frame model   MSE {result.static.pooled_mse:.3f}  PCC {result.static.pooled_pcc:.3f}")
print(f"  improvement {result.relative_improvement:.0%}")

# one timeline around a long closure, truth vs both models
t, s = result.temporal.timelines[0], result.static.timelines[0]
start = int((t.truth > 0).argmax())
print("\nframe truth  30-frame 1-frame")
for i in range(max(0, start - 3), min(len(t.truth), start + 14)):
    print(f"{t.frames[i]:5d} {t.truth[i]:5.0f} {t.prediction[i]:9.2f} {s.prediction[i]:7.2f}")
