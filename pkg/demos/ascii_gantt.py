"""Render a simulated 1F1B schedule as a text Gantt chart.

Four stages, six micro-batches, a small send delay. Digits are forward
passes, letters are backward passes (a = micro-batch 0).
"""
from hetplan.sim import StageTimes, simulate_pipeline

times = [StageTimes(fwd_s=1.0, bwd_s=2.0, send_fwd_s=0.25, send_bwd_s=0.25) for _ in range(4)]
result = simulate_pipeline(times, M=6)

SCALE = 4  # columns per second
width = int(result.iteration_time_s * SCALE) + 1
for stage in range(len(times)):
    row = [" "] * width
    for ev in result.trace:
        if ev.stage != stage or ev.kind not in ("F", "B"):
            continue
        mark = str(ev.microbatch) if ev.kind == "F" else chr(ord("a") + ev.microbatch)
        for c in range(int(ev.start_s * SCALE), int(ev.end_s * SCALE)):
            row[c] = mark
    print(f"stage {stage} |{''.join(row)}|")

print(f"\niteration {result.iteration_time_s:.2f} s, peak in-flight {result.peak_in_flight}")
print("per-stage bubble", [round(b, 3) for b in result.bubble_ratio])
