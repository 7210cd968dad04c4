"""Coverage of 95% intervals in a small Monte Carlo.

Every replication is keyed by (seed, replication index), so the numbers do
not depend on the number of workers. Set VAREG_JOBS to parallelise.
"""
from vareg import DgpConfig, run_replications
from vareg.simulation import default_jobs

cfg = DgpConfig(J=500, T=6, seed=5)
summ = run_replications(cfg, ("ols_naive", "ols_corrected", "optimal_gmm"), R=60, jobs=default_jobs())
print(f"{'estimator':14s} {'bias':>7s} {'MC var':>8s} {'mean var':>9s} {'coverage':>9s}")
for row in summ.table():
    print(f"{row['estimator']:14s} {row['bias']:7.3f} {row['mc_variance']:8.2f} "
          f"{row['mean_variance']:9.2f} {row['coverage']:9.3f}")
