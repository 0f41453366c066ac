"""Pre-training followed by joint stochastic variational training of the ELBO.

One seed drives everything: it is split into independent streams for batch
shuffling, Monte-Carlo noise and initialisation, and the stream states are
part of :meth:`Trainer.state_dict` so a resumed run continues bitwise
identically.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import Cohort, PatientBatch
from .embeddings import Penalty, embedding_names, pretrain, take_rows
from .metrics import evaluate
from .model import GP_NAMES, UniteModel
from .optim import AdamConfig, AdamState, adam_step

logger = logging.getLogger(__name__)

__all__ = ["TrainConfig", "EpochRecord", "TrainReport", "TrainingDiverged", "Trainer", "fit", "adam_step"]


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, report: "TrainReport"):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 256
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 10.0
    max_epochs: int = 50
    patience: int = 5
    min_delta: float = 1e-4
    smoothing: int = 3
    B_train: int = 8
    B_eval: int = 64
    pretrain_epochs: int = 10
    pretrain_learning_rate: float | None = None
    embed_l2: float = 0.04
    tabular_l2: float = 0.03
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        if self.max_epochs < 0 or self.pretrain_epochs < 0:
            raise ValueError("epoch counts must be non-negative")
        self.penalty()  # validates the weights
        if self.B_train < 1 or self.B_eval < 2:
            raise ValueError("B_train must be >= 1 and B_eval >= 2")

    def penalty(self) -> Penalty:
        return Penalty(self.embed_l2, self.tabular_l2)

    def adam(self, pretraining: bool = False) -> AdamConfig:
        lr = self.pretrain_learning_rate if pretraining and self.pretrain_learning_rate else self.learning_rate
        return AdamConfig(lr, self.beta1, self.beta2, self.eps, self.clip_norm)


@dataclass
class EpochRecord:
    epoch: int
    elbo: float
    val_elbo: float
    val_f1: float
    val_kappa: float
    val_prauc: float
    seconds: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=False)


@dataclass
class TrainReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    pretrain_losses: list[float] = field(default_factory=list)
    stop_reason: str = ""
    best_epoch: int = 0
    initial_val_elbo: float = float("nan")

    def write_log(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.epochs:
                fh.write(rec.to_json() + "\n")


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _restore_rng(state: dict) -> np.random.Generator:
    rng = np.random.default_rng()
    rng.bit_generator.state = state
    return rng


class Trainer:
    """Runs the two training phases on a split cohort and keeps all resumable state."""

    def __init__(self, model: UniteModel, cohort: Cohort, config: TrainConfig):
        self.model = model
        self.config = config
        self.max_len = model.embedding.transformer.max_len
        self.train = cohort.batch(cohort.indices("train"), self.max_len)
        self.val = cohort.batch(cohort.indices("val"), self.max_len)
        if len(self.train) == 0 or len(self.val) == 0:
            raise ValueError("training and validation splits must be non-empty")
        shuffle, mc, init = np.random.SeedSequence(config.seed).spawn(3)
        self.shuffle_rng = np.random.default_rng(shuffle)
        self.mc_rng = np.random.default_rng(mc)
        self.init_seed = int(init.generate_state(1)[0])
        eval_rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(4)[3])
        self.eval_eps_u = eval_rng.standard_normal((config.B_eval, model.gp.n_inducing))
        self.eval_eps_f = eval_rng.standard_normal((len(self.val), config.B_eval))
        self.names = embedding_names(model.embedding, model.params) + list(GP_NAMES)
        self.adam_state = AdamState()
        self.report = TrainReport()
        self.epoch = 0
        self.best_score = -np.inf
        self.best_params = None
        self.wait = 0
        self.done = False

    # -- phases --------------------------------------------------------------

    def pretrain(self) -> None:
        cfg = self.config
        if cfg.pretrain_epochs:
            result = pretrain(
                self.model.params,
                self.train,
                self.model.embedding,
                epochs=cfg.pretrain_epochs,
                batch_size=cfg.batch_size,
                adam=cfg.adam(pretraining=True),
                seed=self.init_seed,
                standardizer=self.model.standardizer,
                validation=self.val,
                patience=cfg.patience,
                penalty=cfg.penalty(),
            )
            self.model.params = result.params
            self.report.pretrain_losses = result.losses
        self.model.init_gp(self.train, self.init_seed)
        self.report.initial_val_elbo = self.validation_elbo()

    def validation_elbo(self, params=None) -> float:
        """Held-out ELBO per patient with fixed evaluation noise.

        The validation likelihood is scaled up to the training-set size so
        the KL term carries the same per-patient weight as in the training
        objective.
        """
        total = len(self.train)
        terms = self.model.elbo_terms(params or self.model.params, self.val, self.eval_eps_u, self.eval_eps_f, total)
        return float(terms.value.data) / total

    def validation_metrics(self):
        from .predict import predictive_moments

        mean, _ = predictive_moments(self.model, self.val, self.eval_eps_u, self.eval_eps_f)
        return evaluate(self.val.labels, mean)

    def step(self, batch: PatientBatch, total: int) -> float:
        model, cfg = self.model, self.config
        eps_u = self.mc_rng.standard_normal((cfg.B_train, model.gp.n_inducing))
        eps_f = self.mc_rng.standard_normal((len(batch), cfg.B_train))
        leaves = {k: (ad.parameter(v, k) if k in self.names else v) for k, v in model.params.items()}
        terms = model.elbo_terms(leaves, batch, eps_u, eps_f, total)
        objective = terms.value * (1.0 / total)
        extra = cfg.penalty()(leaves, model.embedding)
        if extra is not None:
            objective = objective - extra
        objective.backward()
        grads = {k: leaves[k].grad if leaves[k].grad is not None else np.zeros_like(model.params[k]) for k in self.names}
        model.params, self.adam_state = adam_step(model.params, grads, self.adam_state, cfg.adam(), maximize=True)
        return float(terms.value.data) / total

    def run_epoch(self) -> EpochRecord:
        start = time.perf_counter()
        cfg = self.config
        n = len(self.train)
        order = self.shuffle_rng.permutation(n)
        values = []
        for lo in range(0, n, cfg.batch_size):
            values.append(self.step(take_rows(self.train, order[lo : lo + cfg.batch_size]), n))
        self.epoch += 1
        val_elbo = self.validation_elbo()
        m = self.validation_metrics()
        rec = EpochRecord(self.epoch, float(np.mean(values)), val_elbo, m.f1, m.kappa, m.pr_auc, time.perf_counter() - start)
        self.report.epochs.append(rec)
        logger.info("epoch %d elbo %.4f val_elbo %.4f val_f1 %.3f", rec.epoch, rec.elbo, rec.val_elbo, rec.val_f1)
        return rec

    def _update_stopping(self, rec: EpochRecord) -> None:
        cfg = self.config
        recent = [r.val_elbo for r in self.report.epochs[-cfg.smoothing :]]
        smoothed = float(np.mean(recent))
        if smoothed > self.best_score + cfg.min_delta * abs(self.best_score) if np.isfinite(self.best_score) else True:
            self.best_score = smoothed
            self.wait = 0
        else:
            self.wait += 1
        best = max(self.report.epochs, key=lambda r: r.val_elbo)
        if best is rec:
            self.best_params = {k: v.copy() for k, v in self.model.params.items()}
            self.report.best_epoch = rec.epoch

    def fit(self) -> TrainReport:
        """Run (or continue) joint training until convergence or ``max_epochs``."""
        cfg = self.config
        if not self.model.gp_ready:
            self.pretrain()
        initial = self.report.initial_val_elbo
        while not self.done:
            if self.epoch >= cfg.max_epochs:
                self.report.stop_reason = "max_epochs"
                break
            rec = self.run_epoch()
            if rec.val_elbo < initial - 10.0 * abs(initial):
                self.report.stop_reason = "diverged"
                self.done = True
                raise TrainingDiverged(f"validation ELBO {rec.val_elbo:.4g} fell far below its initial value {initial:.4g}", self.report)
            self._update_stopping(rec)
            if self.wait >= cfg.patience:
                self.report.stop_reason = "converged"
                break
        self.done = True
        if self.best_params is not None:
            self.model.params = self.best_params
        return self.report

    # -- resumable state -----------------------------------------------------

    def state_dict(self) -> dict:
        return {
            "params": {k: v.copy() for k, v in self.model.params.items()},
            "gp_ready": self.model.gp_ready,
            "adam": self.adam_state.copy(),
            "shuffle_rng": _rng_state(self.shuffle_rng),
            "mc_rng": _rng_state(self.mc_rng),
            "epoch": self.epoch,
            "best_score": self.best_score,
            "best_params": None if self.best_params is None else {k: v.copy() for k, v in self.best_params.items()},
            "wait": self.wait,
            "report": TrainReport(list(self.report.epochs), list(self.report.pretrain_losses), self.report.stop_reason,
                                  self.report.best_epoch, self.report.initial_val_elbo),
        }

    def load_state_dict(self, state: dict) -> None:
        self.model.params = {k: v.copy() for k, v in state["params"].items()}
        self.model.gp_ready = state["gp_ready"]
        self.adam_state = state["adam"].copy()
        self.shuffle_rng = _restore_rng(state["shuffle_rng"])
        self.mc_rng = _restore_rng(state["mc_rng"])
        self.epoch = state["epoch"]
        self.best_score = state["best_score"]
        self.best_params = None if state["best_params"] is None else {k: v.copy() for k, v in state["best_params"].items()}
        self.wait = state["wait"]
        r = state["report"]
        self.report = TrainReport(list(r.epochs), list(r.pretrain_losses), r.stop_reason, r.best_epoch, r.initial_val_elbo)
        self.done = False

    def save_state(self, path) -> None:
        """Write the resumable state (model parameters, moments, RNG streams) to an ``.npz`` file."""
        s = self.state_dict()
        arrays = {f"param/{k}": v for k, v in s["params"].items()}
        arrays.update({f"adam_m/{k}": v for k, v in s["adam"].m.items()})
        arrays.update({f"adam_v/{k}": v for k, v in s["adam"].v.items()})
        if s["best_params"] is not None:
            arrays.update({f"best/{k}": v for k, v in s["best_params"].items()})
        meta = {
            "gp_ready": s["gp_ready"],
            "adam_step": s["adam"].step,
            "shuffle_rng": s["shuffle_rng"],
            "mc_rng": s["mc_rng"],
            "epoch": s["epoch"],
            "best_score": s["best_score"] if np.isfinite(s["best_score"]) else None,
            "wait": s["wait"],
            "report": {
                "epochs": [asdict(r) for r in s["report"].epochs],
                "pretrain_losses": s["report"].pretrain_losses,
                "stop_reason": s["report"].stop_reason,
                "best_epoch": s["report"].best_epoch,
                "initial_val_elbo": s["report"].initial_val_elbo,
            },
        }
        arrays["trainer_state"] = np.array(json.dumps(meta))
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    def load_state(self, path) -> None:
        with np.load(Path(path), allow_pickle=False) as z:
            meta = json.loads(str(z["trainer_state"]))

            def group(prefix):
                return {k[len(prefix):]: z[k].copy() for k in z.files if k.startswith(prefix)}

            params, m, v, best = group("param/"), group("adam_m/"), group("adam_v/"), group("best/")
        r = meta["report"]
        self.load_state_dict({
            "params": params,
            "gp_ready": meta["gp_ready"],
            "adam": AdamState(m, v, meta["adam_step"]),
            "shuffle_rng": meta["shuffle_rng"],
            "mc_rng": meta["mc_rng"],
            "epoch": meta["epoch"],
            "best_score": -np.inf if meta["best_score"] is None else meta["best_score"],
            "best_params": best or None,
            "wait": meta["wait"],
            "report": TrainReport([EpochRecord(**e) for e in r["epochs"]], r["pretrain_losses"], r["stop_reason"],
                                  r["best_epoch"], r["initial_val_elbo"]),
        })


def fit(cohort: Cohort, model: UniteModel, config: TrainConfig) -> tuple[UniteModel, TrainReport]:
    """Pre-train (if needed), then maximise the ELBO; returns the best-validation model."""
    trainer = Trainer(model, cohort, config)
    report = trainer.fit()
    return trainer.model, report
