"""
A certified map over a simulated flight
=======================================

Runs the first seconds of the bundled lab scenario in oracle mode: every
published distance is compared against the analytic scene after every frame.
A second map shares the same TSDF but never deflates, to show what goes wrong
without the correction. Pass a frame count to run longer (1800 is the full
minute).
"""

import sys
import tempfile

from certmap.pipeline import RunConfig, run_scenario

frames = int(sys.argv[1]) if len(sys.argv) > 1 else 150
out = tempfile.mkdtemp(prefix="certmap-lab-")

summary, traces = run_scenario(RunConfig("lab-yaw", oracle=True, out_dir=out, max_frames=frames))

print(f"{summary.frames} frames of '{summary.scenario}' (seed {summary.seed})")
print(f"RMS rotation error {summary.rms_rre:.4f}, RMS bound {summary.rms_epsilon_r:.4f}")
print(f"RMS translation error {summary.rms_rte:.4f} m, RMS bound {summary.rms_epsilon_t:.4f} m")
print(f"certified map violations: {summary.violations}")
print(f"undeflated map violations: {summary.baseline_violations}")
print(f"mean frame time {summary.mean_ms['frame_ms']:.0f} ms "
      f"(registration {summary.mean_ms['registration_ms']:.1f} ms)")

worst = max(traces, key=lambda t: t.epsilon_r)
print(f"loosest rotation bound at frame {worst.k}: {worst.epsilon_r:.3f} (error {worst.rre:.4f})")
print(f"outputs in {out}")
