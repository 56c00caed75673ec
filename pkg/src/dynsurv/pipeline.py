"""End-to-end model: mixed models, random-effect summaries, penalized Cox.

Also reads and writes fitted models as a directory of CSV files plus a JSON
manifest.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd

from dynsurv.cox import (
    CoxFit,
    PenaltySpec,
    assemble_design,
    design_rows,
    fit_penalized_cox,
    predict_survival,
    predict_survival_new_subjects,
    survival_frame,
)
from dynsurv.data import StepFunction
from dynsurv.lmm import LmmFit, LmmSpec, fit_all_lmms, summarize_lmms

BUNDLE_SCHEMA = "dynsurv-model"
BUNDLE_VERSION = 1


@dataclass(frozen=True)
class PipelineConfig:
    y_names: tuple | None = None
    fixed_terms: tuple = ()
    random_terms: tuple = ()
    baseline: tuple | None = None
    penalty: PenaltySpec = field(default_factory=PenaltySpec)
    standardize: bool = True

    def __post_init__(self):
        for name in ("y_names", "baseline"):
            v = getattr(self, name)
            if v is not None:
                object.__setattr__(self, name, tuple(v))
        object.__setattr__(self, "fixed_terms", tuple(self.fixed_terms))
        object.__setattr__(self, "random_terms", tuple(self.random_terms))

    def to_dict(self):
        d = asdict(self)
        d["penalty"] = asdict(self.penalty)
        return d

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class PrcModel:
    config: PipelineConfig
    lmm_fits: list
    cox_fit: CoxFit
    landmark: float | None = None
    train_ids: np.ndarray | None = None
    train_raw: np.ndarray | None = None

    def summaries(self, dataset):
        return summarize_lmms(self.lmm_fits, dataset, allow_flagged=True)

    def predict(self, dataset, times):
        """Survival probabilities for every subject of a (landmarked) dataset."""
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            summ = self.summaries(dataset)
        ids, raw = design_rows(self.cox_fit, summ.to_frame(), dataset.survival)
        return ids, predict_survival(self.cox_fit, raw, times)

    def predict_frame(self, dataset, times):
        ids, surv = self.predict(dataset, times)
        return survival_frame(ids, surv, times)

    def predict_new(self, new_longitudinal, new_baseline, times):
        return predict_survival_new_subjects(self.lmm_fits, self.cox_fit, new_longitudinal, new_baseline, times)


def fit_prc(dataset, config=None, workers=1, timings=None):
    """Fit the three steps on a landmarked dataset.

    If ``timings`` is a dict, wall-clock seconds per step are added to it
    under ``step1_s``, ``step2_s`` and ``step3_s``.
    """
    config = config or PipelineConfig()
    y_names = config.y_names or dataset.longitudinal_vars
    t0 = time.perf_counter()
    fits = fit_all_lmms(dataset, y_names, config.fixed_terms, config.random_terms, workers=workers)
    t1 = time.perf_counter()
    summ = summarize_lmms(fits, dataset, allow_flagged=True)
    t2 = time.perf_counter()
    design = assemble_design(summ, dataset, baseline=config.baseline, standardize=config.standardize)
    cox_fit = fit_penalized_cox(design, dataset, config.penalty, landmark=dataset.landmark)
    t3 = time.perf_counter()
    if timings is not None:
        for key, dt in (("step1_s", t1 - t0), ("step2_s", t2 - t1), ("step3_s", t3 - t2)):
            timings[key] = timings.get(key, 0.0) + dt
    return PrcModel(config, fits, cox_fit, dataset.landmark, design.subject_ids, design.raw)


# model bundle ---------------------------------------------------------------

def _write_csv(frame, path):
    frame.to_csv(path, index=False, float_format="%.17g")


def save_model(model, directory):
    """Write ``model`` to ``directory``; floats round-trip exactly."""
    os.makedirs(directory, exist_ok=True)
    cf = model.cox_fit
    manifest = {
        "schema": BUNDLE_SCHEMA,
        "version": BUNDLE_VERSION,
        "config": model.config.to_dict(),
        "landmark": model.landmark,
        "lmm": [
            {
                "response": f.spec.response,
                "fixed_terms": list(f.spec.fixed_terms),
                "random_terms": list(f.spec.random_terms),
                "sigma2": f.sigma2,
                "loglik": f.loglik,
                "n_obs": f.n_obs,
                "n_subjects": f.n_subjects,
                "converged": f.converged,
                "iterations": f.iterations,
                "grad_norm": f.grad_norm,
                "boundary": f.boundary,
            }
            for f in model.lmm_fits
        ],
        "cox": {
            "lambda_star": cf.lambda_star,
            "alpha_star": cf.alpha_star,
            "baseline": list(cf.baseline),
            "levels": {k: list(v) for k, v in cf.levels.items()},
            "n_baseline_columns": cf.n_baseline_columns,
            "landmark": cf.landmark,
            "alpha_cv": {repr(k): v for k, v in cf.alpha_cv.items()},
        },
    }
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)

    rows = []
    for f in model.lmm_fits:
        for j, nm in enumerate(f.spec.fixed_names):
            rows.append((f.spec.response, "beta", nm, "", f.beta[j]))
        for a, na in enumerate(f.spec.random_names):
            for b, nb in enumerate(f.spec.random_names):
                rows.append((f.spec.response, "D", na, nb, f.D[a, b]))
        for a, na in enumerate(f.spec.fixed_names):
            for b, nb in enumerate(f.spec.fixed_names):
                rows.append((f.spec.response, "cov_beta", na, nb, f.cov_beta[a, b]))
    _write_csv(pd.DataFrame(rows, columns=["covariate", "parameter", "row", "col", "value"]),
               os.path.join(directory, "lmm_parameters.csv"))
    _write_csv(cf.coefficients(), os.path.join(directory, "cox_coefficients.csv"))
    _write_csv(
        pd.DataFrame({"term": cf.columns, "center": cf.center, "scale": cf.scale, "standardized": cf.standardized.astype(int)}),
        os.path.join(directory, "scaling.csv"),
    )
    _write_csv(cf.baseline_hazard.to_frame("cumhaz"), os.path.join(directory, "baseline_hazard.csv"))
    cv = cf.cv_curve if cf.cv_curve is not None else np.full(len(cf.lambdas), np.nan)
    _write_csv(pd.DataFrame({"lambda": cf.lambdas, "cv_deviance": cv}), os.path.join(directory, "cv_curve.csv"))


def _read_csv(path, **kw):
    return pd.read_csv(path, float_precision="round_trip", **kw)


def load_model(directory):
    with open(os.path.join(directory, "manifest.json")) as fh:
        manifest = json.load(fh)
    if manifest.get("schema") != BUNDLE_SCHEMA:
        raise ValueError(f"{directory}: not a model bundle (schema {manifest.get('schema')!r})")
    if manifest.get("version") != BUNDLE_VERSION:
        raise ValueError(f"{directory}: unsupported bundle version {manifest.get('version')!r}")
    cfg = dict(manifest["config"])
    cfg["penalty"] = PenaltySpec(**cfg["penalty"])
    config = PipelineConfig(**cfg)

    params = _read_csv(os.path.join(directory, "lmm_parameters.csv"), keep_default_na=False, dtype={"row": str, "col": str})
    fits = []
    for meta in manifest["lmm"]:
        spec = LmmSpec(meta["response"], meta["fixed_terms"], meta["random_terms"])
        sub = params[params["covariate"] == spec.response]
        beta = sub[sub["parameter"] == "beta"]["value"].to_numpy(dtype=float)
        D = sub[sub["parameter"] == "D"]["value"].to_numpy(dtype=float).reshape(spec.q, spec.q)
        f = len(spec.fixed_names)
        cov = sub[sub["parameter"] == "cov_beta"]["value"].to_numpy(dtype=float).reshape(f, f)
        fits.append(
            LmmFit(
                spec, beta, D, meta["sigma2"], meta["loglik"], meta["n_obs"], meta["n_subjects"],
                converged=meta["converged"], iterations=meta["iterations"], grad_norm=meta["grad_norm"],
                boundary=meta["boundary"], cov_beta=cov,
            )
        )

    coefs = _read_csv(os.path.join(directory, "cox_coefficients.csv"), keep_default_na=False)
    scaling = _read_csv(os.path.join(directory, "scaling.csv"), keep_default_na=False)
    hazard = _read_csv(os.path.join(directory, "baseline_hazard.csv"))
    cv = _read_csv(os.path.join(directory, "cv_curve.csv"))
    cm = manifest["cox"]
    cv_curve = cv["cv_deviance"].to_numpy(dtype=float)
    cox_fit = CoxFit(
        columns=coefs["term"].astype(str).tolist(),
        coef=coefs["estimate"].to_numpy(dtype=float),
        coef_scaled=coefs["scaled_estimate"].to_numpy(dtype=float),
        lambda_star=cm["lambda_star"],
        alpha_star=cm["alpha_star"],
        lambdas=cv["lambda"].to_numpy(dtype=float),
        cv_curve=None if np.all(np.isnan(cv_curve)) else cv_curve,
        baseline_hazard=StepFunction(hazard["time"].to_numpy(dtype=float), hazard["cumhaz"].to_numpy(dtype=float), 0.0),
        center=scaling["center"].to_numpy(dtype=float),
        scale=scaling["scale"].to_numpy(dtype=float),
        standardized=scaling["standardized"].to_numpy().astype(bool),
        penalty=config.penalty,
        baseline=tuple(cm["baseline"]),
        levels={k: tuple(v) for k, v in cm["levels"].items()},
        n_baseline_columns=cm["n_baseline_columns"],
        landmark=cm["landmark"],
        alpha_cv={float(k): v for k, v in cm["alpha_cv"].items()},
    )
    return PrcModel(config, fits, cox_fit, manifest["landmark"])
