"""Train a small supernet, then check how well inherited accuracy ranks candidates.

Runs in about two minutes on one core. Everything is derived from the seed,
so two runs print the same numbers.
"""
import time

from supernas.config import config_from_dict
from supernas.evaluation import evaluate_supernet, rank_correlations
from supernas.experiments import load_data, select_encodings, standalone_records
from supernas.training import derive_seed, run_progressive_pipeline

cfg = config_from_dict({
    "space": {"layers": [[4, 8, 12, 16]] * 6, "stem_width": 16},
    "dataset": {"n_per_class": 80, "num_classes": 10},
    "stages": [
        {"iterations": 120, "warmup_iterations": 40},
        {"iterations": 40},
        {"iterations": 40},
    ],
    "standalone": {"iterations": 150},
})
data = load_data(cfg)
print(f"train/calib/val sizes: {len(data.train)}/{len(data.calib)}/{len(data.val)}")

# Candidates are picked evenly across model size, so small and large nets
# both show up in the ranking.
encodings = select_encodings(cfg.base_space(), 12, cfg.seed)
for e in encodings[:3]:
    print("candidate", e)

t0 = time.time()
alone = standalone_records(cfg, data, encodings)
print(f"stand-alone ground truth: {len(alone)} nets in {time.time() - t0:.0f}s")

t0 = time.time()
space = cfg.supernet_space("PReLU+OE")
states = run_progressive_pipeline(space, data.train, cfg.train_configs(), init_seed=derive_seed(cfg.seed, "init"))
print(f"supernet, three stages: {time.time() - t0:.0f}s")

for st in states:
    recs = evaluate_supernet(st.params, encodings, data)
    rep = rank_correlations(recs + alone)
    print(f"stage {st.params.stage}: |pearson| {rep.pearson_abs:.3f}  spearman {rep.spearman:.3f}  "
          f"kendall {rep.kendall_tau:.3f}")
