"""Uncertainty filtering, location ablation and covariance biclustering on one seed.

    python3 demos/uncertainty_and_ablation.py [seed]

Trains twice (full model and without the location tower), about half a minute.
"""

import sys
from pathlib import Path

import numpy as np

from unite.cli import evaluation_rows
from unite.config import load_config
from unite.data import generate_synthetic, split
from unite.embeddings import Standardizer, take_rows
from unite.model import UniteModel
from unite.predict import balanced_sample, cluster_agreement, covariance_bicluster, predict
from unite.train import Trainer

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
config = load_config(Path(__file__).resolve().parents[1] / "configs" / "desk.conf", [f"seed = {seed}"])
cohort = split(generate_synthetic(config.n_patients, config.vocab_size, config.n_locations, config.positive_rate, seed=seed), seed=seed)
train = cohort.batch(cohort.indices("train"), config.max_len)
test = cohort.batch(cohort.indices("test"), config.max_len)


def fit(cfg):
    model = UniteModel.create(cfg.embedding(len(cohort.vocab), cohort.demographics_dim, cohort.location_dim), cfg.gp(), Standardizer.fit(train), seed)
    Trainer(model, cohort, cfg.train()).fit()
    return model


full = fit(config)

print("removing the most uncertain patients:")
for r in evaluation_rows(full, test, config.filter_fractions, config.B_predict, seed):
    print(f"  q={r['q']:.1f}  n={r['n_retained']:3d}  f1 {r['f1']:.3f}  pr-auc {r['pr_auc']:.3f}")

# label-noise patients should sit among the most uncertain
preds = predict(full, test, B=config.B_predict, seed=seed)
noise = np.array([pid in cohort.planted_noise for pid in test.patient_ids])
top = np.argsort([-p.variance for p in preds], kind="stable")[: len(preds) // 5]
print(f"noise share: {noise.mean():.3f} overall, {noise[top].mean():.3f} in the top 20% uncertainty")

ablated = fit(config.with_ablation("location"))
f1_full = evaluation_rows(full, test, (0.0,), config.B_predict, seed)[0]["f1"]
f1_abl = evaluation_rows(ablated, test, (0.0,), config.B_predict, seed)[0]["f1"]
print(f"location ablation: f1 {f1_full:.3f} -> {f1_abl:.3f}")

idx = balanced_sample(test.labels, config.n_sample, seed)
export = covariance_bicluster(full, take_rows(test, idx))
print(f"spectral split of the kernel matrix agrees with the labels on {cluster_agreement(export.assignment, test.labels[idx]):.1%} of patients")
