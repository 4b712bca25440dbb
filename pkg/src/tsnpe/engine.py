"""Round loop for truncated sequential estimation, plus NPE and atomic APT baselines.

Every random stream is derived from ``(seed, round, phase)`` (see
:mod:`tsnpe.seeding`), so a run can be resumed from its persisted artifacts
and reproduce an uninterrupted run byte for byte.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from . import seeding
from .density import (MaximumLikelihood, TrainConfig, TrainableEstimator, TrainingError, build_estimator,
                      estimator_from_bytes, estimator_to_bytes, fit, load_estimator, save_estimator,
                      validation_nll)
from .diagnostics import (CoverageReport, c2st, leakage_fraction, prior_mass_in_hpr, sbcc_multiround,
                          true_posterior_mass_in_hpr)
from .tasks import (OracleError, OracleUnavailable, TaskSpec, make_task, reference_posterior, replace_invalid,
                    simulate_batch)
from .truncation import SamplerError, SamplerReport, TruncatedProposal, sample_truncated

log = logging.getLogger(__name__)

METHODS = ("tsnpe", "npe", "apt")
METRIC_NAMES = ("c2st", "leakage_fraction", "prior_mass_in_hpr", "true_posterior_mass_in_hpr")
METRIC_KEYS = ("c2st", "leakage_fraction", "acceptance_rate", "ess_min", "ess_mean", "nll_val",
               "prior_mass_in_hpr", "true_posterior_mass_in_hpr", "hpr_tau")


@dataclass
class RunConfig:
    task: str = "toy1d"
    method: str = "tsnpe"
    observation: int = 0
    rounds: int = 10
    simulations: int = 500
    epsilon: float = 1e-4
    m_threshold: int = 10_000
    sampler: str = "auto"
    k: int = 1024
    max_draws: int = 10 ** 7
    pooling: str = "all"
    warm_start: bool = False
    backend: str = "mdn"
    components: int = 10
    hidden: int = 50
    layers: int | None = None
    activation: str = "tanh"
    ensemble_size: int = 1
    train: TrainConfig = field(default_factory=TrainConfig)
    coverage: bool = False
    coverage_m: int = 200
    coverage_p: int = 1000
    coverage_strategy: str = "pooled"
    atoms: int = 10
    constrain_space: bool = False
    metrics: tuple[str, ...] = ("leakage_fraction", "prior_mass_in_hpr")
    metric_samples: int = 10_000
    c2st_samples: int = 2_000
    seed: int = 0
    workers: int = 1
    name: str | None = None

    def __post_init__(self):
        if isinstance(self.train, dict):
            self.train = TrainConfig(**self.train)
        self.metrics = tuple(self.metrics)

    def validate(self) -> list[str]:
        """All problems with this configuration (empty when valid)."""
        errs = []
        if self.method not in METHODS:
            errs.append(f"method must be one of {METHODS}, got {self.method!r}")
        if self.rounds < 1:
            errs.append("rounds must be >= 1")
        if self.simulations < 2 * self.train.batch_size:
            errs.append(f"simulations per round ({self.simulations}) must be at least twice the batch "
                        f"size ({self.train.batch_size})")
        if not 0.0 < self.epsilon < 1.0:
            errs.append("epsilon must lie in (0, 1)")
        if self.m_threshold < 1000:
            errs.append("m_threshold must be >= 1000")
        elif self.epsilon * self.m_threshold < 1.0 - 1e-9:
            errs.append("epsilon * m_threshold must be >= 1")
        if self.sampler not in ("rejection", "sir", "auto"):
            errs.append(f"sampler must be rejection, sir or auto, got {self.sampler!r}")
        if self.k < 2:
            errs.append("k must be >= 2")
        if self.pooling not in ("all", "latest"):
            errs.append("pooling must be 'all' or 'latest'")
        if self.backend not in ("mdn", "flow"):
            errs.append(f"backend must be mdn or flow, got {self.backend!r}")
        if self.ensemble_size < 1:
            errs.append("ensemble_size must be >= 1")
        if self.coverage_strategy not in ("pooled", "truncated"):
            errs.append("coverage_strategy must be 'pooled' or 'truncated'")
        if self.atoms < 2 or self.atoms > self.train.batch_size:
            errs.append("atoms must lie in [2, batch_size]")
        unknown = [m for m in self.metrics if m not in METRIC_NAMES]
        if unknown:
            errs.append(f"unknown metrics {unknown}; choose from {METRIC_NAMES}")
        if self.metric_samples < 1000:
            errs.append("metric_samples must be >= 1000")
        if self.c2st_samples < 500:
            errs.append("c2st_samples must be >= 500")
        if self.workers < 1:
            errs.append("workers must be >= 1")
        return errs

    def check(self) -> None:
        errs = self.validate()
        if errs:
            raise ValueError("invalid run configuration: " + "; ".join(errs))

    @property
    def run_name(self) -> str:
        return self.name or f"{self.task}_{self.method}_s{self.seed}"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["metrics"] = list(self.metrics)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return cls(**d)


@dataclass
class RoundRecord:
    round: int
    proposal: TruncatedProposal  # proposal the round's parameters were drawn from
    sampler: SamplerReport
    data_slice: tuple[int, int]
    estimator: TrainableEstimator
    history: list[dict]
    hpr: TruncatedProposal | None  # region of this round's estimator (next TSNPE proposal)
    metrics: dict
    coverage: CoverageReport | None = None
    timing: dict = field(default_factory=dict)
    status: str = "ok"


# ---------------------------------------------------------------------------
# Atomic APT loss
# ---------------------------------------------------------------------------


def draw_atoms(n: int, atoms: int, rng: np.random.Generator) -> np.ndarray:
    """Row ``i`` holds ``i`` followed by ``atoms - 1`` distinct other batch indices."""
    if not 2 <= atoms <= n:
        raise ValueError(f"atoms must lie in [2, {n}]")
    others = np.argsort(rng.random((n, n - 1)), axis=1)[:, :atoms - 1]
    others += others >= np.arange(n)[:, None]
    return np.concatenate([np.arange(n)[:, None], others], axis=1)


def _atomic_terms(est, theta, x, idx, prior):
    n, a = idx.shape
    th = theta[idx.reshape(-1)]
    xx = np.repeat(x, a, axis=0)
    lp0 = np.asarray(prior.log_prob(th), dtype=np.float64)
    if not np.all(np.isfinite(lp0)):
        raise ValueError("prior density is zero at an atom")
    lq, ctx = est.forward_pass(th, xx)
    logits = (lq - lp0).reshape(n, a)
    return logits, ctx


def atomic_apt_loss(est, theta, x, atoms: int, prior, rng: np.random.Generator) -> float:
    """Mean over rows of ``-log softmax(q / p)`` for the row's own parameter among its atoms."""
    theta, x = np.asarray(theta, dtype=np.float64), np.asarray(x, dtype=np.float64)
    idx = draw_atoms(theta.shape[0], atoms, rng)
    logits, _ = _atomic_terms(est, theta, x, idx, prior)
    return float(-np.mean(logits[:, 0] - logsumexp(logits, axis=1)))


class AtomicLoss:
    """Training objective for :func:`tsnpe.density.fit` using the atomic loss."""

    def __init__(self, prior, atoms: int = 10):
        self.prior, self.atoms = prior, atoms

    def _idx(self, n, rng):
        return draw_atoms(n, min(self.atoms, n), rng)

    def loss(self, est, theta, x, rng=None) -> float:
        rng = rng if rng is not None else np.random.default_rng(0)
        return atomic_apt_loss(est, theta, x, min(self.atoms, len(theta)), self.prior, rng)

    def loss_and_grad(self, est, theta, x, rng=None):
        idx = self._idx(theta.shape[0], rng)
        logits, ctx = _atomic_terms(est, theta, x, idx, self.prior)
        n = logits.shape[0]
        lse = logsumexp(logits, axis=1, keepdims=True)
        loss = float(-np.mean(logits[:, 0] - lse[:, 0]))
        coef = np.exp(logits - lse)
        coef[:, 0] -= 1.0
        return loss, est.backward_pass(ctx, (coef / n).reshape(-1))


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def _json_value(v):
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return v if np.isfinite(v) else None
    if isinstance(v, np.integer):
        return int(v)
    return v


def write_json(path: Path, obj) -> None:
    def clean(o):
        if isinstance(o, dict):
            return {k: clean(v) for k, v in o.items()}
        if isinstance(o, (list, tuple)):
            return [clean(v) for v in o]
        return _json_value(o)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(clean(obj), indent=2, sort_keys=True) + "\n")
    tmp.replace(path)


def write_dataset(path: Path, round_index: int, theta: np.ndarray, x: np.ndarray, valid: np.ndarray) -> None:
    header = (["round"] + [f"theta_{i}" for i in range(theta.shape[1])]
              + [f"x_{i}" for i in range(x.shape[1])] + ["valid"])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for t, xx, v in zip(theta, x, valid):
            w.writerow([round_index] + ["%.17g" % a for a in t] + ["%.17g" % a for a in xx] + [int(v)])


def read_dataset(path: Path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    d = sum(h.startswith("theta_") for h in header)
    k = sum(h.startswith("x_") for h in header)
    data = np.array([[float(a) for a in r] for r in rows[1:]], dtype=np.float64).reshape(-1, len(header))
    return data[:, 1:1 + d], data[:, 1 + d:1 + d + k], data[:, -1].astype(bool)


def write_coverage(round_dir: Path, report: CoverageReport) -> None:
    with open(round_dir / "coverage.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["confidence_level", "empirical_coverage"])
        for lvl, c in zip(report.levels, report.curve):
            w.writerow(["%.17g" % lvl, "%.17g" % c])
    with open(round_dir / "e_values.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["e"])
        for e in np.sort(report.e):
            w.writerow(["%.17g" % e])


def read_e_values(path: Path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return np.array([float(r[0]) for r in rows])


# ---------------------------------------------------------------------------
# Run
# ---------------------------------------------------------------------------


class _Run:
    def __init__(self, cfg: RunConfig, out: Path | None, task: TaskSpec | None, resume: bool):
        cfg.check()
        self.cfg = cfg
        self.task = task if task is not None else make_task(cfg.task, cfg.observation)
        self.dir = None if out is None else Path(out) / cfg.run_name
        self.resume = resume
        self._reference = None
        self.theta = np.empty((0, self.task.theta_dim))
        self.x = np.empty((0, self.task.x_dim))
        self.valid = np.empty(0, dtype=bool)
        self.records: list[RoundRecord] = []
        self.standardizer = None
        self.bijection = self.task.prior.bijection() if cfg.constrain_space else None

    # -- helpers -------------------------------------------------------

    def rng(self, r, phase, *extra):
        return seeding.derive_rng(self.cfg.seed, r, phase, *extra)

    def reference(self):
        if self._reference is None:
            n = max(self.cfg.metric_samples, self.cfg.c2st_samples)
            try:
                self._reference = reference_posterior(self.task, n, self.rng(0, "oracle"))
            except (OracleUnavailable, OracleError) as exc:
                self._reference = exc  # remembered so later rounds do not retry
        if isinstance(self._reference, Exception):
            raise self._reference
        return self._reference

    def round_dir(self, r) -> Path:
        return self.dir / f"round_{r}"

    def new_estimator(self, r, previous):
        cfg = self.cfg
        warm = previous is not None and (cfg.warm_start or (cfg.method == "apt" and r > 1))
        if warm:
            return estimator_from_bytes(estimator_to_bytes(previous))
        return build_estimator(cfg.backend, self.task.theta_dim, self.task.x_dim, self.rng(r, "init"),
                               cfg.components, cfg.layers, cfg.hidden, cfg.activation, cfg.ensemble_size,
                               self.standardizer, self.bijection)

    def proposal_for(self, r) -> TruncatedProposal:
        if r == 1:
            return TruncatedProposal.from_prior(self.task.prior, self.task.x_o)
        prev = self.records[-1]
        if self.cfg.method == "apt":
            return TruncatedProposal(self.task.prior, prev.estimator, self.task.x_o)
        return prev.hpr

    def sample_proposal(self, r, proposal) -> tuple[np.ndarray, SamplerReport]:
        cfg, rng = self.cfg, self.rng(r, "proposal")
        n = cfg.simulations
        if proposal.is_prior and proposal.estimator is None:
            return sample_truncated(proposal, n, rng)
        if cfg.method == "apt":
            return sample_posterior_in_support(proposal.estimator, self.task.x_o, self.task.prior, n, rng,
                                               cfg.max_draws)
        return sample_truncated(proposal, n, rng, cfg.sampler, cfg.k, cfg.max_draws)

    def compute_metrics(self, r, est, hpr, history, sampler) -> dict:
        cfg, task = self.cfg, self.task
        m = {k: None for k in METRIC_KEYS}
        m["acceptance_rate"] = sampler.acceptance_rate
        if sampler.sir is not None:
            m["ess_min"], m["ess_mean"] = sampler.sir.min, sampler.sir.mean
        m["nll_val"] = validation_nll(history)
        m["hpr_tau"] = None if hpr is None else hpr.tau
        if "leakage_fraction" in cfg.metrics:
            m["leakage_fraction"] = leakage_fraction(est, task.x_o, task.prior, cfg.metric_samples,
                                                     self.rng(r, "metrics", 0))
        if hpr is not None and "prior_mass_in_hpr" in cfg.metrics:
            m["prior_mass_in_hpr"] = prior_mass_in_hpr(hpr, cfg.metric_samples, self.rng(r, "metrics", 1))
        wants_oracle = "c2st" in cfg.metrics or (hpr is not None and "true_posterior_mass_in_hpr" in cfg.metrics)
        ref = None
        if wants_oracle:
            try:
                ref = self.reference()
            except (OracleUnavailable, OracleError) as exc:
                # reported as missing rather than approximated
                log.warning("round %d: oracle metrics unavailable: %s", r, exc)
        if ref is not None and hpr is not None and "true_posterior_mass_in_hpr" in cfg.metrics:
            m["true_posterior_mass_in_hpr"] = true_posterior_mass_in_hpr(hpr, ref)
        if ref is not None and "c2st" in cfg.metrics:
            rng = self.rng(r, "metrics", 2)
            q = est.sample(task.x_o, cfg.c2st_samples, rng)
            m["c2st"] = c2st(q, ref[:cfg.c2st_samples], rng).accuracy
        return m

    # -- persistence ---------------------------------------------------

    def write_config(self):
        self.dir.mkdir(parents=True, exist_ok=True)
        write_json(self.dir / "config.json", self.cfg.to_dict())

    def persist(self, rec: RoundRecord, theta, x, valid):
        d = self.round_dir(rec.round)
        d.mkdir(parents=True, exist_ok=True)
        write_dataset(d / "dataset.csv", rec.round, theta, x, valid)
        save_estimator(rec.estimator, d / "estimator.bin")
        info = {"round": rec.round, "status": rec.status, **rec.proposal.to_dict(), **rec.sampler.to_dict(),
                "n_drawn": rec.sampler.n_drawn, "notes": rec.sampler.notes}
        write_json(d / "proposal.json", info)
        write_json(d / "training_log.json", rec.history)
        if rec.coverage is not None:
            write_coverage(d, rec.coverage)
        write_json(d / "timing.json", rec.timing)
        write_json(d / "metrics.json", rec.metrics)  # written last: marks the round complete

    def load_round(self, r) -> bool:
        d = self.round_dir(r)
        if not (d / "metrics.json").exists():
            return False
        prop_info = json.loads((d / "proposal.json").read_text())
        metrics = json.loads((d / "metrics.json").read_text())
        if prop_info.get("status", "ok") != "ok":
            n = self.theta.shape[0]
            self.records.append(RoundRecord(r, self.proposal_for(r),
                                            SamplerReport(prop_info.get("sampler", "posterior"),
                                                          prop_info.get("acceptance_rate"),
                                                          prop_info.get("n_drawn", 0)),
                                            (n, n), self.records[-1].estimator, [], None, metrics,
                                            status=prop_info["status"]))
            return True
        theta, x, valid = read_dataset(d / "dataset.csv")
        est = load_estimator(d / "estimator.bin")
        proposal = self.proposal_for(r)
        tau = metrics.get("hpr_tau")
        hpr = None
        if self.cfg.method != "apt":
            hpr = TruncatedProposal(self.task.prior, est, self.task.x_o, self.cfg.epsilon,
                                    -np.inf if tau is None else float(tau), self.cfg.m_threshold)
        start = self.theta.shape[0]
        self.append_data(theta, x, valid)
        if r == 1:
            self.standardizer = _base_standardizer(est)
        coverage = None
        if (d / "e_values.csv").exists():
            e = read_e_values(d / "e_values.csv")
            coverage = CoverageReport(e, e.size, self.cfg.coverage_p)
        sampler = SamplerReport(prop_info.get("sampler", "prior"), prop_info.get("acceptance_rate"),
                                prop_info.get("n_drawn", 0))
        self.records.append(RoundRecord(r, proposal, sampler, (start, self.theta.shape[0]), est,
                                        json.loads((d / "training_log.json").read_text()), hpr, metrics,
                                        coverage, json.loads((d / "timing.json").read_text()),
                                        prop_info.get("status", "ok")))
        return True

    def append_data(self, theta, x, valid):
        self.theta = np.concatenate([self.theta, theta])
        self.x = np.concatenate([self.x, x])
        self.valid = np.concatenate([self.valid, valid])

    # -- main loop -----------------------------------------------------

    def run(self) -> list[RoundRecord]:
        cfg = self.cfg
        if self.dir is not None:
            if self.resume and (self.dir / "config.json").exists():
                saved = json.loads((self.dir / "config.json").read_text())
                if saved != json.loads(json.dumps(self.cfg.to_dict())):
                    raise ValueError(f"config in {self.dir} differs from the requested run; cannot resume")
            self.write_config()
        start = 1
        if self.resume and self.dir is not None:
            while start <= cfg.rounds and self.load_round(start):
                if self.records[-1].status != "ok":
                    return self.records
                start += 1
            if start > 1:
                log.info("resuming %s at round %d", cfg.run_name, start)
        for r in range(start, cfg.rounds + 1):
            rec = self.run_round(r)
            if rec.status != "ok":
                break
        return self.records

    def run_round(self, r) -> RoundRecord:
        cfg, task = self.cfg, self.task
        timing = {}
        t0 = time.perf_counter()
        proposal = self.proposal_for(r)
        try:
            theta, sampler = self.sample_proposal(r, proposal)
        except ProposalExhausted as exc:
            log.warning("round %d: %s; halting run", r, exc)
            prev = self.records[-1]
            rec = RoundRecord(r, proposal, SamplerReport("posterior", exc.acceptance_rate, exc.n_drawn),
                              (self.theta.shape[0], self.theta.shape[0]), prev.estimator, [], None,
                              {k: None for k in METRIC_KEYS} | {"acceptance_rate": exc.acceptance_rate},
                              status="proposal_exhausted")
            self.records.append(rec)
            if self.dir is not None:
                d = self.round_dir(r)
                d.mkdir(parents=True, exist_ok=True)
                write_json(d / "proposal.json", {"round": r, "status": rec.status, "sampler": "posterior",
                                                 "acceptance_rate": exc.acceptance_rate, "n_drawn": exc.n_drawn})
                write_json(d / "metrics.json", rec.metrics)
            return rec
        except SamplerError as exc:
            raise SamplerError(f"round {r}: {exc}") from exc
        timing["sample"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        x_raw = simulate_batch(task, theta, cfg.seed, r, cfg.workers)
        valid = np.all(np.isfinite(x_raw), axis=1)
        x = x_raw if valid.all() else replace_invalid(x_raw, task.policy)[0]
        timing["simulate"] = time.perf_counter() - t0
        start = self.theta.shape[0]
        self.append_data(theta, x, valid)
        if cfg.pooling == "all":
            th_train, x_train = self.theta, self.x
        else:
            th_train, x_train = theta, x

        t0 = time.perf_counter()
        previous = self.records[-1].estimator if self.records else None
        est = self.new_estimator(r, previous)
        objective = AtomicLoss(task.prior, cfg.atoms) if (cfg.method == "apt" and r > 1) else MaximumLikelihood()
        train_cfg = replace(cfg.train, seed=seeding.derive_seed(cfg.seed, r, "train"))
        try:
            est, history = fit(est, th_train, x_train, train_cfg, objective)
        except TrainingError as exc:
            raise TrainingError(f"round {r}: {exc}") from exc
        if r == 1:
            self.standardizer = _base_standardizer(est)
        timing["train"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        hpr = None
        if cfg.method != "apt":
            hpr = TruncatedProposal.fit(task.prior, est, task.x_o, cfg.epsilon, self.rng(r, "threshold"),
                                        cfg.m_threshold)
        coverage = None
        if cfg.coverage:
            proposals = [rec.proposal for rec in self.records] + [proposal]
            if cfg.method == "apt":
                proposals = [TruncatedProposal.from_prior(task.prior, task.x_o)]
            coverage = sbcc_multiround(proposals, task, est, cfg.coverage_m, cfg.coverage_p,
                                       self.rng(r, "coverage"), cfg.coverage_strategy, cfg.sampler, cfg.k,
                                       cfg.workers)
        metrics = self.compute_metrics(r, est, hpr, history, sampler)
        timing["diagnostics"] = time.perf_counter() - t0
        rec = RoundRecord(r, proposal, sampler, (start, self.theta.shape[0]), est, history, hpr, metrics,
                          coverage, timing)
        self.records.append(rec)
        if self.dir is not None:
            self.persist(rec, theta, x, valid)
        log.info("%s round %d/%d done: %s", cfg.run_name, r, cfg.rounds,
                 {k: v for k, v in metrics.items() if v is not None})
        return rec


def _base_standardizer(est):
    while hasattr(est, "members") or hasattr(est, "base"):
        est = est.members[0] if hasattr(est, "members") else est.base
    return est.standardizer


class ProposalExhausted(SamplerError):
    def __init__(self, acceptance_rate: float, n_drawn: int):
        super().__init__(f"posterior proposal exhausted its draw cap after {n_drawn} draws "
                         f"(in-support rate {acceptance_rate:.3g})")
        self.acceptance_rate, self.n_drawn = acceptance_rate, n_drawn


def sample_posterior_in_support(est, x_o, prior, n: int, rng: np.random.Generator,
                                max_draws: int = 10 ** 7) -> tuple[np.ndarray, SamplerReport]:
    """Estimator draws at ``x_o`` restricted to the prior support by rejection."""
    kept, n_kept, drawn = [], 0, 0
    batch = max(1000, 2 * n)
    while n_kept < n:
        batch = min(batch, max_draws - drawn)
        if batch <= 0:
            raise ProposalExhausted(n_kept / max(drawn, 1), drawn)
        th = est.sample(x_o, batch, rng)
        drawn += batch
        th = th[np.atleast_1d(prior.support(th))]
        kept.append(th)
        n_kept += th.shape[0]
        batch = int(np.clip(1.2 * (n - n_kept) / max(n_kept / drawn, 1e-9), 1000, 1_000_000))
    return np.concatenate(kept)[:n], SamplerReport("posterior", n_kept / drawn, drawn)


def run(cfg: RunConfig, out=None, task: TaskSpec | None = None, resume: bool = False) -> list[RoundRecord]:
    """Run ``cfg.method``; artifacts go to ``out/<run name>`` when ``out`` is given."""
    if cfg.method == "npe" and cfg.rounds != 1:
        cfg = replace(cfg, rounds=1)
    return _Run(cfg, out, task, resume).run()


def load_run(run_dir, rounds: int | None = None) -> tuple[RunConfig, TaskSpec, list[RoundRecord]]:
    """Reload a persisted run: its config, task and completed round records
    (up to ``rounds`` when given)."""
    run_dir = Path(run_dir)
    cfg_path = run_dir / "config.json"
    if not cfg_path.exists():
        raise FileNotFoundError(f"{cfg_path} not found; not a run directory")
    cfg = replace(RunConfig.from_dict(json.loads(cfg_path.read_text())), name=run_dir.name)
    runner = _Run(cfg, run_dir.parent, None, resume=True)
    r = 1
    while (rounds is None or r <= rounds) and runner.load_round(r):
        r += 1
    return cfg, runner.task, runner.records


def run_tsnpe(cfg: RunConfig, out=None, task: TaskSpec | None = None, resume: bool = False) -> list[RoundRecord]:
    return run(replace(cfg, method="tsnpe"), out, task, resume)


def run_npe(cfg: RunConfig, out=None, task: TaskSpec | None = None) -> RoundRecord:
    """Single round of prior simulations, trained by maximum likelihood."""
    return run(replace(cfg, method="npe", rounds=1), out, task)[0]


def run_apt(cfg: RunConfig, constrain_space: bool = False, out=None, task: TaskSpec | None = None,
            resume: bool = False) -> list[RoundRecord]:
    return run(replace(cfg, method="apt", constrain_space=constrain_space), out, task, resume)


__all__ = ["AtomicLoss", "METRIC_KEYS", "ProposalExhausted", "RoundRecord", "RunConfig", "atomic_apt_loss",
           "draw_atoms", "leakage_fraction", "load_run", "read_dataset", "run", "run_apt", "run_npe", "run_tsnpe",
           "sample_posterior_in_support"]
