"""Monte Carlo look at moving-average estimators of batch statistics.

Compares simulated variances of exponential and simple moving averages with
their closed forms, shows how a fast-drifting mean breaks the simple average,
and measures the extra gradient variance that centering adds at small batches.

    python3 demos/moving_average_estimators.py
"""

from mabnlab.theorems import McConfig, gap_trend, verify_ema_variance, verify_sma_variance, verify_variance_gap

print("exponential moving average after 500 steps of unit-variance noise")
for alpha in (0.9, 0.98):
    r = verify_ema_variance(McConfig(alpha=alpha))
    print(f"  alpha={alpha}: simulated {r.empirical:.5f}  closed form {r.predicted:.5f}  rel dev {r.rel_dev:.3f}")

print("simple moving average over the last m batches, slow drift")
for m in (4, 16):
    r = verify_sma_variance(McConfig(window=m, drift=1e-3))
    print(f"  m={m:2d}: simulated {r.empirical:.5f}  1/m {r.predicted:.5f}  rel dev {r.rel_dev:.3f}")

r = verify_sma_variance(McConfig(window=16, drift=0.5))
print(f"  fast drift 0.5: error {r.empirical:.2f}, lag bias {r.details['lag_bias']:.2f}, passes: {r.passed}")

print("gradient variance added by centering with batch statistics")
r = verify_variance_gap(McConfig(batch=2, trials=200_000))
print(f"  batch 2: gap {r.empirical:.4f}, lower bound {r.predicted:.4f}")
gaps, monotone = gap_trend((2, 8, 32), McConfig(trials=200_000))
print("  batch 2, 8, 32:", ", ".join(f"{g:.4f}" for g in gaps), "(shrinks:", str(monotone) + ")")
