"""Fit per-group compute efficiency from measured layer timings.

The synthetic measurements below run the fast group at about 45 % of peak;
calibration recovers that factor and the backward/forward ratio.
"""
from pathlib import Path

from hetplan import load_cluster, load_model
from hetplan.profiles import ProfileRecord, calibrate, ideal_fwd_ms, parse_profiles, render_profiles

CFG = Path(__file__).resolve().parents[1] / "configs"
model = load_model(CFG / "toy_model.yaml")
cluster = load_cluster(CFG / "toy_cluster.yaml")

records = []
for B in (1, 2, 4):
    ideal = ideal_fwd_ms(ProfileRecord("fast", "transformer_layer", B, 256, 512, 1, 1.0, 1.0),
                         cluster.group("fast").peak_tflops)
    records.append(ProfileRecord("fast", "transformer_layer", B, 256, 512, 1,
                                 ideal / 0.45, 2.2 * ideal / 0.45))

# Profiles travel as JSON lines; a malformed line becomes a diagnostic, not a crash.
text = render_profiles(records) + "{not json\n"
parsed, diags = parse_profiles(text.splitlines())
print(f"{len(parsed)} records, diagnostics: {[str(d) for d in diags]}")

calibrated, more = calibrate(parsed, model, cluster)
g = calibrated.group("fast")
print(f"fast: efficiency {g.compute_efficiency:.3f}, bwd/fwd {g.bwd_fwd_ratio:.2f}")
print(f"slow untouched: efficiency {calibrated.group('slow').compute_efficiency}")
