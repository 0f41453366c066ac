"""Train on a planted-signal synthetic cohort and inspect the predictive distribution.

Run from the repository root:

    python3 demos/quickstart.py [seed]

Takes about ten seconds on one core with the laptop-scale configuration.
"""

import sys
from pathlib import Path

import numpy as np

from unite.config import load_config
from unite.data import generate_synthetic, split
from unite.embeddings import Standardizer
from unite.metrics import evaluate
from unite.model import UniteModel
from unite.predict import predict
from unite.train import Trainer

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
config = load_config(Path(__file__).resolve().parents[1] / "configs" / "desk.conf", [f"seed = {seed}"])

# 1562 synthetic patients; the label depends on a few risk codes, a latent zip-level risk and age
cohort = split(generate_synthetic(config.n_patients, config.vocab_size, config.n_locations, config.positive_rate, seed=seed), seed=seed)
print(f"{len(cohort)} patients, {len(cohort.vocab)} codes, {len(cohort.planted_noise)} label-noise patients")

train = cohort.batch(cohort.indices("train"), config.max_len)
embedding = config.embedding(len(cohort.vocab), cohort.demographics_dim, cohort.location_dim)
model = UniteModel.create(embedding, config.gp(), Standardizer.fit(train), seed)
report = Trainer(model, cohort, config.train()).fit()
print(f"pre-training: {len(report.pretrain_losses)} epochs; GP phase stopped ({report.stop_reason}) at epoch {report.best_epoch}")

test = cohort.batch(cohort.indices("test"), config.max_len)
preds = predict(model, test, B=config.B_predict, seed=seed)
mean = np.array([p.mean for p in preds])
gp = evaluate(test.labels, mean)
head = evaluate(test.labels, model.head_probability(test))
print(f"GP layer      f1 {gp.f1:.3f}  kappa {gp.kappa:.3f}  pr-auc {gp.pr_auc:.3f}")
print(f"linear head   f1 {head.f1:.3f}  kappa {head.kappa:.3f}  pr-auc {head.pr_auc:.3f}")

print("\nmost and least certain test patients (risk, uncertainty, label):")
order = np.argsort([p.variance for p in preds])
for i in [*order[:3], *order[-3:]]:
    print(f"  {preds[i].patient_id:>8}  {preds[i].mean:.3f}  {preds[i].variance:.4f}  {int(test.labels[i])}")
