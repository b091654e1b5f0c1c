"""Per-experiment wiring of data, targets and methods.

Each ``run_*`` function takes a fully resolved config dict and returns an
:class:`Outcome`; the CLI only handles config resolution and file output.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import data as D
from .baselines import BaselineConfig, baseline_predict, run_baseline_nn
from .engine import LmcConfig, RunTrace, StoppingRule, run_pmfvb
from .errors import InvalidArgument
from .nn import DriftConfig, MlpModel, NnData, NnPrior, NnRunConfig, metrics, predict, run_pmfvb_nn
from .samplers import AdamSgldConfig, DensityTarget, PsgldConfig, mala_sample
from .sv import SvData, SvPriors, SvUnconstrained, generate_sv_data, run_pmfvb_sv
from .targets import (
    GaussianToy,
    GaussianToyTarget,
    LogisticModel,
    LogisticTarget,
    gaussian_toy_mean_field_optimum,
    generate_logistic_data,
    logistic_full_grad,
    logistic_log_unnorm_posterior,
)


@dataclass
class Outcome:
    metrics: dict
    trace: RunTrace | None = None
    table_name: str = "particles.csv"
    columns: list = field(default_factory=list)
    table: np.ndarray | None = None


def stopping_rule(cfg: dict) -> StoppingRule:
    s = cfg["stopping"]
    kind = s.get("kind", "none")
    window = int(s.get("window", 50))
    if kind == "none":
        # never fires within max_iters
        return StoppingRule("lower-bound-plateau", window, patience=int(cfg["max_iters"]) + 1)
    return StoppingRule(kind, window, int(s.get("patience", 100)), float(s.get("tolerance", 0.0)))


def lmc_config(cfg: dict) -> LmcConfig:
    return LmcConfig(float(cfg["step_size"]), int(cfg["subsample"]), int(cfg["max_iters"]), int(cfg["seed"]))


def _trace_meta(trace: RunTrace) -> dict:
    return {"n_iters": len(trace), "truncated": bool(getattr(trace, "truncated", False)),
            "final_lower_bound": float(trace.lower_bounds[-1]) if len(trace) else None}


def _mala(target, cfg: dict, rng_key) -> "MalaResult":  # noqa: F821
    s = cfg["sampler"]
    return mala_sample(target, float(s.get("h", 0.01)), int(s.get("n_samples", 10 ** 6)),
                       int(s.get("burn_in", 2000)), np.random.default_rng(rng_key),
                       x0=s.get("x0"), n_chains=int(s.get("chains", 100)), adapt=bool(s.get("adapt", True)),
                       thin=int(s.get("thin", 1)))


def _sample_table(samples, max_rows):
    if max_rows and len(samples) > max_rows:
        step = -(-len(samples) // max_rows)
        return samples[::step]
    return samples


# --------------------------------------------------------------------------
# Gaussian toy
# --------------------------------------------------------------------------

def toy_model(cfg: dict) -> GaussianToy:
    m = cfg["model"]
    return GaussianToy(np.asarray(m.get("mean", [0.0, 0.0]), float), np.asarray(m.get("cov", [[1, 0.5], [0.5, 1]]), float))


def run_gaussian_toy(cfg: dict) -> Outcome:
    toy = toy_model(cfg)
    optimum = gaussian_toy_mean_field_optimum(toy)
    sha = D.data_sha(toy.mean, toy.cov)
    if cfg["method"] == "mala":
        t = DensityTarget(GaussianToyTarget(toy).log_joint, lambda z: -(z - toy.mean) @ toy.precision, toy.mean.size)
        res = _mala(t, cfg, [cfg["seed"], 7])
        return Outcome({**res.summary(), "data_sha": sha}, None, "samples.csv",
                       [f"x{k}" for k in range(toy.mean.size)], _sample_table(res.samples, cfg["sampler"].get("dump_rows")))
    target = GaussianToyTarget(toy)
    init_sd = float(cfg["model"].get("init_sd", 1.0))
    init_mean = float(cfg["model"].get("init_mean", 2.0))

    def init(n, rng):
        return rng.normal(init_mean, init_sd, size=(n, 1))

    res = run_pmfvb(target, {b.name: init for b in target.blocks}, lmc_config(cfg), stopping_rule(cfg),
                    n_particles=int(cfg["particles"]))
    means = [float(res.clouds[b.name].values.mean()) for b in target.blocks]
    vars_ = [float(res.clouds[b.name].values.var()) for b in target.blocks]
    m = {
        "block_means": means,
        "block_vars": vars_,
        "oracle_means": [o[0] for o in optimum],
        "oracle_vars": [o[1] for o in optimum],
        "oracle_mean_abs_err": max(abs(a - o[0]) for a, o in zip(means, optimum)),
        "oracle_var_abs_err": max(abs(a - o[1]) for a, o in zip(vars_, optimum)),
        "data_sha": sha,
        **_trace_meta(res.trace),
    }
    table = np.column_stack([res.clouds[b.name].values for b in target.blocks])
    return Outcome(m, res.trace, "particles.csv", [b.name for b in target.blocks], table)


# --------------------------------------------------------------------------
# logistic regression
# --------------------------------------------------------------------------

def logistic_data(cfg: dict) -> LogisticModel:
    d = cfg["data"]
    prior_var = float(cfg["model"].get("prior_var", 4.0))
    if d.get("source", "synthetic") == "csv":
        nd, _ = D.read_matrix(d["path"], d.get("response", "y"))
        X = np.column_stack([np.ones(len(nd.y)), nd.x])
        return LogisticModel(X, nd.y, prior_var)
    model, _ = generate_logistic_data(int(d.get("n", 200)), int(d.get("d", 4)), prior_var, int(d.get("seed", 0)))
    return model


def logistic_density(model: LogisticModel) -> DensityTarget:
    return DensityTarget(lambda b: logistic_log_unnorm_posterior(b, model),
                         lambda b: logistic_full_grad(b, model), model.d)


def run_logistic(cfg: dict) -> Outcome:
    model = logistic_data(cfg)
    sha = D.data_sha(model.X, model.y)
    names = [f"beta{j}" for j in range(model.d)]
    if cfg["method"] == "mala":
        res = _mala(logistic_density(model), cfg, [cfg["seed"], 7])
        m = {**res.summary(), "sd": res.samples.std(axis=0).tolist(), "data_sha": sha}
        return Outcome(m, None, "samples.csv", names, _sample_table(res.samples, cfg["sampler"].get("dump_rows")))
    target = LogisticTarget(model)
    init_sd = float(cfg["model"].get("init_sd", 1.0))
    init = {b.name: (lambda n, rng, k=b.dim: rng.normal(0.0, init_sd, size=(n, k))) for b in target.blocks}
    res = run_pmfvb(target, init, lmc_config(cfg), stopping_rule(cfg), n_particles=int(cfg["particles"]))
    beta = model.assemble([res.clouds[b.name].values for b in target.blocks])
    m = {"mean": beta.mean(axis=0).tolist(), "sd": beta.std(axis=0).tolist(), "data_sha": sha,
         **_trace_meta(res.trace)}
    return Outcome(m, res.trace, "particles.csv", names, beta)


# --------------------------------------------------------------------------
# stochastic volatility
# --------------------------------------------------------------------------

def sv_data(cfg: dict) -> SvData:
    d = cfg["data"]
    if d.get("source", "synthetic") == "csv":
        nd, _ = D.read_matrix(d["path"], d.get("response", "y"))
        return SvData(nd.y)
    return generate_sv_data(int(d.get("T", 500)), float(d.get("mu", 1.0)), float(d.get("phi", 0.8)),
                            float(d.get("sigma", 0.5)), int(d.get("seed", 0)))


def sv_priors(cfg: dict) -> SvPriors:
    keys = ("sigma0_sq", "a0", "b0", "alpha0", "beta0")
    return SvPriors(**{k: float(cfg["model"][k]) for k in keys if k in cfg["model"]})


def run_sv(cfg: dict) -> Outcome:
    data, priors = sv_data(cfg), sv_priors(cfg)
    sha = D.data_sha(data.y)
    names = ["phi"] + [f"x{t + 1}" for t in range(data.T)]
    if cfg["method"] == "mala":
        target = SvUnconstrained(data, priors)
        s = dict(cfg["sampler"])
        if s.get("x0") is None:
            # jittered start around a crude moment guess, in unconstrained coordinates
            C = int(s.get("chains", 100))
            x0 = np.concatenate([[0.5, np.arctanh(0.5), math.log(0.3)], np.log(data.y ** 2 + 0.5)])
            s["x0"] = x0 + 0.1 * np.random.default_rng([int(cfg["seed"]), 8]).standard_normal((C, x0.size))
        res = _mala(target, {**cfg, "sampler": s}, [cfg["seed"], 7])
        mu, phi, s2, x = SvUnconstrained.to_constrained(res.samples)
        theta = np.column_stack([mu, phi, s2])
        m = {"mean": {"mu": float(mu.mean()), "phi": float(phi.mean()), "sigma2": float(s2.mean())},
             "var": {"mu": float(mu.var()), "phi": float(phi.var()), "sigma2": float(s2.var())},
             "acceptance": res.acceptance, "step_size": res.step_size, "low_acceptance": res.low_acceptance,
             "data_sha": sha}
        return Outcome(m, None, "samples.csv", ["mu", "phi", "sigma2"],
                       _sample_table(theta, cfg["sampler"].get("dump_rows")))
    precondition = bool(cfg["model"].get("precondition", True))
    variant = cfg["model"].get("mu_variant", "corrected")
    state, trace = run_pmfvb_sv(data, priors, lmc_config(cfg), stopping_rule(cfg), int(cfg["particles"]),
                                variant, precondition)
    m = {**state.summary(), "mean": {"mu": state.mu_q, "phi": float(state.phi.mean()), "sigma2": state.sigma2_mean()},
         "var": {"mu": state.sigma_q2, "phi": float(state.phi.var()), "sigma2": state.sigma2_var()},
         "data_sha": sha, **_trace_meta(trace)}
    return Outcome(m, trace, "particles.csv", names, state.cloud.values)


# --------------------------------------------------------------------------
# neural networks
# --------------------------------------------------------------------------

@dataclass
class NnSplits:
    train: NnData
    val: NnData
    test: NnData
    y_mean: float = 0.0
    y_sd: float = 1.0

    def standardised(self) -> "NnSplits":
        """Regression responses centred and scaled with training statistics."""
        mu, sd = float(self.train.y.mean()), float(self.train.y.std())
        sd = sd if sd > 0 else 1.0
        f = [NnData(s.x, (s.y - mu) / sd) for s in (self.train, self.val, self.test)]
        return NnSplits(*f, mu, sd)


def nn_splits(cfg: dict) -> NnSplits:
    d = cfg["data"]
    task = "regression" if cfg["experiment"] == "nn-regression" else "classification"
    source = d.get("source", "synthetic" if task == "regression" else "census-like")
    seed = int(d.get("seed", 0))
    fractions = d.get("fractions", [0.53, 0.14, 0.33])
    if source == "synthetic":
        tr, va, te = D.generate_nonlinear_regression(int(d.get("n_train", 5000)), int(d.get("n_val", 1000)),
                                                     int(d.get("n_test", 2000)), seed)
        return NnSplits(tr, va, te)
    if source in ("census-like", "survey-like"):
        gen, schema = ((D.generate_census_like, D.CENSUS_SCHEMA) if source == "census-like"
                       else (D.generate_survey_like, D.SURVEY_SCHEMA))
        rows = gen(int(d.get("n", 5000)), seed)
        enc = D.TabularEncoder(dict(schema))
        parts = D.split_indices(len(rows), fractions, int(d.get("split_seed", seed)))
        enc.fit([rows[i] for i in parts[0]], ">50K" if source == "census-like" else None)
        tr, va, te = (enc.transform([rows[i] for i in p]) for p in parts)
        if source == "survey-like":
            tr, va, te = (NnData(s.x, np.log(s.y)) for s in (tr, va, te))
        return NnSplits(tr, va, te)
    if source == "csv":
        if "schema" in d:
            schema, positive = d["schema"], d.get("positive")
            if isinstance(schema, str):
                named = {"census": D.CENSUS_SCHEMA, "survey": D.SURVEY_SCHEMA}
                if schema not in named:
                    raise InvalidArgument(f"unknown schema name {schema!r}; expected one of {sorted(named)}")
                if schema == "census" and positive is None:
                    positive = ">50K"
                schema = named[schema]
            (tr, va, te), _, _ = D.load_tabular_splits(d["path"], schema, fractions,
                                                       int(d.get("split_seed", seed)), positive)
        else:
            nd, _ = D.read_matrix(d["path"], d.get("response", "y"))
            tr, va, te = D.split_dataset(nd, fractions, int(d.get("split_seed", seed)))
        return NnSplits(tr, va, te)
    raise InvalidArgument(f"unknown data source {source!r}")


def nn_model(cfg: dict, n_features: int) -> MlpModel:
    hidden = list(cfg["model"].get("hidden", [10]))
    return MlpModel(tuple([n_features] + hidden + [1]))


def run_nn(cfg: dict) -> Outcome:
    task = "regression" if cfg["experiment"] == "nn-regression" else "classification"
    raw = nn_splits(cfg)
    sp = raw.standardised() if task == "regression" else raw
    sha = D.data_sha(raw.train.x, raw.train.y, raw.val.x, raw.val.y, raw.test.x, raw.test.y)
    model = nn_model(cfg, sp.train.x.shape[1])
    mc, s = cfg["model"], cfg["sampler"]
    prior = NnPrior(float(mc.get("alpha0", 1.0)), float(mc.get("beta0", 0.01)))
    rule = stopping_rule(cfg)
    batch = s.get("batch_size", 500)
    t0 = time.perf_counter()
    if cfg["method"] == "pmfvb":
        drift = DriftConfig(beta1=float(s.get("beta1", 0.9)), beta2=float(s.get("beta2", 0.99)),
                            a=float(s.get("a", 300.0)), lam=float(s.get("lam", 1e-8)), h=float(cfg["step_size"]),
                            block_fraction=float(s.get("block_fraction", 0.1)), clip_norm=s.get("clip_norm"))
        rc = NnRunConfig(int(cfg["particles"]), batch, int(cfg["max_iters"]), int(cfg["seed"]),
                         float(s.get("init_sd", 0.1)), drift)
        res = run_pmfvb_nn(task, model, sp.train, sp.val, prior, rc, rule)
        pred = predict(res.best_cloud, model, sp.test.x, task)
        noise_var = 1.0 / res.best_factors.inv_sigma2 if task == "regression" else 1.0
        trace, columns, table = res.trace, [f"w{j + 1}" for j in range(model.d_w)], res.best_cloud
        name = "particles.csv"
    elif cfg["method"] in ("sgld", "psgld", "adam-sgld"):
        bc = BaselineConfig(cfg["method"], float(cfg["step_size"]), batch, int(cfg["max_iters"]),
                            int(s.get("burn_in", 1000)), int(cfg["seed"]), float(s.get("init_sd", 0.1)),
                            PsgldConfig(float(s.get("rho", 0.99)), float(s.get("psgld_lam", 1e-5))),
                            AdamSgldConfig(float(s.get("a", 100.0)), float(s.get("beta1", 0.9)),
                                           float(s.get("beta2", 0.99)), float(s.get("lam", 1e-8))))
        res = run_baseline_nn(task, model, sp.train, sp.val, prior, bc, rule)
        pred = baseline_predict(res.best_w_mean, model, sp.test.x, task)
        noise_var = res.best_noise_var
        trace, columns = res.trace, [f"w{j + 1}" for j in range(model.d_w)]
        table, name = res.best_w_mean[None, :], "samples.csv"
    else:
        raise InvalidArgument(f"method {cfg['method']!r} is not available for {cfg['experiment']}")
    wall = time.perf_counter() - t0
    if task == "regression":
        # back to the original response scale
        pred = pred * sp.y_sd + sp.y_mean
        noise_var = noise_var * sp.y_sd ** 2
    m = metrics(pred, raw.test.y, task, noise_var)
    m.update({"wall_minutes": wall / 60.0, "test_var_y": float(np.var(raw.test.y)), "data_sha": sha,
              "n_features": int(sp.train.x.shape[1]), "d_w": model.d_w, "activation": model.activation,
              **_trace_meta(trace)})
    return Outcome(m, trace, name, columns, table)


RUNNERS = {
    "gaussian-toy": run_gaussian_toy,
    "logistic": run_logistic,
    "sv": run_sv,
    "nn-regression": run_nn,
    "nn-classification": run_nn,
}


def run(cfg: dict) -> Outcome:
    return RUNNERS[cfg["experiment"]](cfg)
