"""Sweep the distillation weight alpha and watch the ranking quality.

A short-budget version of the toy ablation, one supernet seed per value,
so expect noise. Takes roughly five minutes.
"""
import sys

from supernas.config import parse_config
from supernas.evaluation import evaluate_supernet, rank_correlations
from supernas.experiments import load_data, resolve_encodings, standalone_records, train_variant

cfg = parse_config(sys.argv[1] if len(sys.argv) > 1 else "configs/toy_ablation.yaml")
for st in cfg.stages:
    st.iterations //= 3
cfg.stages[0].warmup_iterations //= 3
cfg.eval.num_encodings = 12
cfg.standalone.iterations = 150

data = load_data(cfg)
encodings = resolve_encodings(cfg)
alone = standalone_records(cfg, data, encodings)

print("alpha  stage1  stage2  stage3")
for alpha in (0.0, 0.25, 0.5, 0.75):
    for st in cfg.stages:
        st.alpha = alpha
    states = train_variant(cfg, data, "PReLU+OE", seed=0)
    rs = [rank_correlations(evaluate_supernet(s.params, encodings, data) + alone).pearson_abs for s in states]
    print(f"{alpha:5.2f}  " + "  ".join(f"{r:.3f}" for r in rs))
