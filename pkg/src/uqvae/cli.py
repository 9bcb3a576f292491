"""Command-line pipeline: dataset generation, two-stage training, posterior
solves, oracle comparison, loss benchmarking, sensitivity analysis, and
forward uncertainty propagation.

Every command takes ``--config PATH`` (JSON, with a ``preset`` field) or
``--preset NAME`` for the built-in defaults; ``--seed``/``--out`` and a
few sweep flags override config fields. Exit codes: 0 success, 2
configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import bayes, gsa as gsa_mod, losses, nnet, presets, qmc
from .backend import selected_backend
from .errors import (
    ConfigError,
    DegenerateWeights,
    MissingArtifact,
    NotPositiveDefinite,
    SingularGamma,
    UqvaeError,
)
from .forward import ElementwiseAffineWrapped, ForwardModel, MLPModel
from .forward import cardio as cardio_mod
from .linalg import SPDMatrix, matrix_from_json, matrix_to_json

FORMAT_VERSION = 1

DEFAULTS = {
    "exp": {
        "preset": "exp",
        "seed": 0,
        "eta": 0.01,
        "theta": 1e-4,
        "alpha": 0.5,
        "k_samples": 4096,
        "loss": "theta",
        "m_decoder": 0,
        "m_encoder": 100,
        "m_test": 100,
        "problem": {"dim": 10},
        "decoder": {"hidden_layers": 3, "hidden_width": 64, "epochs": 1500,
                    "lr": 1e-3, "seed_offset": 2},
        "encoder": {"hidden_layers": 2, "hidden_width": 64, "epochs": 800,
                    "lr": 1e-3, "seed_offset": 3},
        "oracle_points": 16384,
        # timing comparison regime: the network cost (shared by both
        # losses) dominates the perturbation-loss path, as in production
        # use where encoders are wide
        "benchmark": {"dims": [10, 25], "epochs": 50,
                      "hidden_layers": 2, "hidden_width": 384},
        "forward_uq": {"n_samples": 128, "sample_index": 0},
        "gsa": {"scenario": "hypertension", "n_base": 64},
    },
    "poisson": {
        "preset": "poisson",
        "seed": 0,
        "eta": 0.01,
        "theta": 1e-4,
        "alpha": 0.5,
        "k_samples": 4096,
        "loss": "theta",
        "m_decoder": 512,
        "m_encoder": 100,
        "m_test": 20,
        "problem": {"n": 9, "n_obs": 20, "gamma": 0.1, "delta": 0.5,
                    "xi": 1.5, "beta": None},
        "decoder": {"hidden_layers": 3, "hidden_width": 64, "epochs": 1500,
                    "lr": 1e-3, "seed_offset": 2},
        "encoder": {"hidden_layers": 2, "hidden_width": 64, "epochs": 600,
                    "lr": 1e-3, "seed_offset": 3},
        "oracle_points": 4096,
        "forward_uq": {"n_samples": 128, "sample_index": 0},
        "gsa": {"scenario": "hypertension", "n_base": 64},
    },
    "cardio": {
        "preset": "cardio",
        "seed": 0,
        "eta": 0.05,
        "theta": 1e-4,
        "alpha": 0.5,
        "k_samples": 4096,
        "loss": "theta",
        "m_decoder": 1024,
        "m_encoder": 100,
        "m_test": 20,
        "problem": {"dt": 1e-4, "beats": 25, "samples_per_beat": 1000,
                    "bsa": 1.80},
        "decoder": {"hidden_layers": 3, "hidden_width": 64, "epochs": 3000,
                    "lr": 1e-3, "seed_offset": 2},
        "encoder": {"hidden_layers": 2, "hidden_width": 64, "epochs": 2000,
                    "lr": 1e-3, "seed_offset": 3},
        "oracle_points": 16384,
        "forward_uq": {"n_samples": 128, "sample_index": 0},
        "gsa": {"scenario": "hypertension", "n_base": 64},
    },
    "cardio_vsd": {
        "preset": "cardio_vsd",
        "seed": 0,
        "eta": 0.05,
        "theta": 1e-4,
        "alpha": 0.5,
        "k_samples": 4096,
        "loss": "theta",
        "m_decoder": 1024,
        "m_encoder": 100,
        "m_test": 20,
        "problem": {"dt": 1e-4, "beats": 25, "samples_per_beat": 1000,
                    "bsa": 1.80},
        "decoder": {"hidden_layers": 3, "hidden_width": 64, "epochs": 3000,
                    "lr": 1e-3, "seed_offset": 2},
        "encoder": {"hidden_layers": 2, "hidden_width": 64, "epochs": 2000,
                    "lr": 1e-3, "seed_offset": 3},
        "oracle_points": 16384,
        "forward_uq": {"n_samples": 128, "sample_index": 0},
        "gsa": {"scenario": "vsd", "n_base": 64},
    },
}

SMOKE_OVERRIDES = {
    "m_decoder_cap": 64,
    "m_encoder": 16,
    "m_test": 4,
    "epochs": 40,
    "oracle_points": 1024,
    "k_samples": 256,
    "exp_dim": 5,
    "poisson_n": 5,
    "poisson_n_obs": 6,
    "cardio_dt": 1e-3,
    "cardio_spb": 200,
    "gsa_n_base": 8,
    "forward_uq_samples": 8,
}


def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def load_config(args) -> dict:
    """Merge preset defaults, config file, and CLI overrides."""
    file_cfg = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            file_cfg = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path}: invalid JSON ({exc})") from exc
    preset = args.preset or file_cfg.get("preset")
    if not preset:
        raise ConfigError("either --preset or a config with a 'preset' field is required")
    if preset not in DEFAULTS:
        raise ConfigError(f"unknown preset {preset!r}; expected one of {list(DEFAULTS)}")
    cfg = _deep_merge(DEFAULTS[preset], file_cfg)
    cfg["preset"] = preset
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.out is not None:
        cfg["out_dir"] = args.out
    if getattr(args, "theta", None) is not None:
        cfg["theta"] = args.theta
    if getattr(args, "eta", None) is not None:
        cfg["eta"] = args.eta
    if getattr(args, "obs_count", None) is not None:
        if preset == "poisson":
            cfg["problem"]["n_obs"] = args.obs_count
        else:
            raise ConfigError("--obs-count only applies to the poisson preset")
    if getattr(args, "known_map", False):
        cfg["known_map"] = True
    if getattr(args, "loss", None):
        cfg["loss"] = args.loss
    if getattr(args, "smoke", False):
        cfg["smoke"] = True
    if cfg.get("smoke"):
        _apply_smoke(cfg)
    if "out_dir" not in cfg:
        raise ConfigError("no output directory: set 'out_dir' in the config or pass --out")
    if cfg["eta"] <= 0:
        raise ConfigError("eta must be > 0")
    return cfg


def _apply_smoke(cfg: dict) -> None:
    s = SMOKE_OVERRIDES
    cfg["m_decoder"] = min(cfg["m_decoder"], s["m_decoder_cap"])
    cfg["m_encoder"] = s["m_encoder"]
    cfg["m_test"] = s["m_test"]
    cfg["decoder"]["epochs"] = s["epochs"]
    cfg["encoder"]["epochs"] = s["epochs"]
    cfg["oracle_points"] = s["oracle_points"]
    cfg["k_samples"] = s["k_samples"]
    cfg["gsa"]["n_base"] = s["gsa_n_base"]
    cfg["forward_uq"]["n_samples"] = s["forward_uq_samples"]
    if cfg["preset"] == "exp":
        cfg["problem"]["dim"] = s["exp_dim"]
        cfg["benchmark"] = {"dims": [3], "epochs": 10}
    elif cfg["preset"] == "poisson":
        cfg["problem"]["n"] = s["poisson_n"]
        cfg["problem"]["n_obs"] = s["poisson_n_obs"]
    else:
        cfg["problem"]["dt"] = s["cardio_dt"]
        cfg["problem"]["samples_per_beat"] = s["cardio_spb"]


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(
        json.dumps(cfg, sort_keys=True, default=str).encode()
    ).hexdigest()


def build_problem(cfg: dict) -> presets.Problem:
    options = dict(cfg.get("problem", {}))
    if cfg["preset"] == "poisson":
        options.setdefault("obs_seed", cfg["seed"])
    return presets.build_problem(cfg["preset"], options)


# ---------------------------------------------------------------------------
# artifact paths and the run manifest


class Workspace:
    def __init__(self, cfg: dict):
        self.cfg = cfg
        self.dir = Path(cfg["out_dir"])
        self.dir.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        return self.dir / name

    def require(self, name: str) -> Path:
        p = self.path(name)
        if not p.exists():
            raise MissingArtifact(
                f"{name} not found in {self.dir}; run the earlier pipeline stage first"
            )
        return p

    def write_json(self, name: str, obj) -> Path:
        p = self.path(name)
        with open(p, "w") as fh:
            json.dump(obj, fh, indent=1, sort_keys=True)
        return p

    def read_json(self, name: str):
        with open(self.require(name)) as fh:
            return json.load(fh)

    def update_manifest(self, stage: str, artifacts: list[str], seconds: float,
                        forward_calls: int = 0) -> None:
        p = self.path("manifest.json")
        manifest = json.loads(p.read_text()) if p.exists() else {
            "format_version": FORMAT_VERSION,
            "preset": self.cfg["preset"],
            "config_hash": config_hash(self.cfg),
            "backend": selected_backend(),
            "artifacts": {},
            "timings": {},
            "forward_calls": {},
        }
        manifest["config_hash"] = config_hash(self.cfg)
        for a in artifacts:
            manifest["artifacts"][a] = str(self.path(a))
        manifest["timings"][stage] = seconds
        manifest["forward_calls"][stage] = forward_calls
        with open(p, "w") as fh:
            json.dump(manifest, fh, indent=1, sort_keys=True)


def _noise_to_json(noise: bayes.GaussianModel) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "mu": noise.mean.tolist(),
        "cov": matrix_to_json(noise.cov.mat),
    }


def _noise_from_json(obj: dict) -> bayes.GaussianModel:
    return bayes.GaussianModel(np.asarray(obj["mu"], float),
                               SPDMatrix(matrix_from_json(obj["cov"])))


def _load_y_rows(path: Path) -> tuple[np.ndarray, np.ndarray | None]:
    """Read observation rows from a JSONL file.

    Accepts records with key "y" or dataset records with "y_noisy" (the
    true parameters come along when present).
    """
    ys, us = [], []
    with open(path) as fh:
        for line in fh:
            rec = json.loads(line)
            ys.append(rec.get("y", rec.get("y_noisy")))
            us.append(rec.get("u"))
    if not ys or any(y is None for y in ys):
        raise ConfigError(f"{path}: no observation records (need 'y' or 'y_noisy')")
    u_arr = None
    if all(u is not None for u in us):
        u_arr = np.asarray(us, dtype=float)
    return np.asarray(ys, dtype=float), u_arr


# ---------------------------------------------------------------------------
# pipeline stages


def cmd_generate(cfg: dict) -> int:
    ws = Workspace(cfg)
    t0 = time.perf_counter()
    problem = build_problem(cfg)
    fwd = problem.forward
    m_pool = max(cfg["m_decoder"], cfg["m_encoder"])
    ds, noise = bayes.generate_dataset(
        fwd, problem.prior, cfg["eta"], m_pool, cfg["seed"],
        noise_grouping=problem.noise_grouping,
        group_size=problem.noise_group_size,
    )
    maps = bayes.build_normalization(ds, problem.normalization_mode)
    # test set: fresh parameters, noised with the dataset's noise model
    rng = np.random.default_rng(cfg["seed"] + 1)
    u_test = problem.prior.sample(rng, cfg["m_test"])
    clean_test = fwd.eval_many(u_test)
    test_ds = bayes.Dataset(
        u_test, clean_test, clean_test + noise.sample(rng, cfg["m_test"]),
        seed=cfg["seed"] + 1, model_id=fwd.name, eta=cfg["eta"],
    )
    bayes.save_dataset(ws.path("dataset.jsonl"), ws.path("dataset_header.json"), ds)
    bayes.save_dataset(ws.path("test.jsonl"), ws.path("test_header.json"), test_ds)
    ws.write_json("normalization.json", maps.to_json())
    ws.write_json("noise.json", _noise_to_json(noise))
    ws.write_json("config_resolved.json", cfg)
    ws.update_manifest(
        "generate",
        ["dataset.jsonl", "dataset_header.json", "test.jsonl",
         "test_header.json", "normalization.json", "noise.json"],
        time.perf_counter() - t0, fwd.call_count,
    )
    print(f"generate: {m_pool} training + {cfg['m_test']} test samples -> {ws.dir}")
    return 0


def _load_generate_artifacts(ws: Workspace):
    ds, _ = bayes.load_dataset(ws.require("dataset.jsonl"),
                               ws.require("dataset_header.json"))
    maps = bayes.NormalizationMaps.from_json(ws.read_json("normalization.json"))
    noise = _noise_from_json(ws.read_json("noise.json"))
    return ds, maps, noise


def cmd_train_decoder(cfg: dict) -> int:
    ws = Workspace(cfg)
    t0 = time.perf_counter()
    if cfg.get("known_map") or cfg["m_decoder"] == 0:
        print("train-decoder: known forward map, nothing to train")
        ws.write_json("decoder_skipped.json", {"reason": "known map"})
        ws.update_manifest("train-decoder", ["decoder_skipped.json"],
                           time.perf_counter() - t0)
        return 0
    ds, maps, _ = _load_generate_artifacts(ws)
    ds = ds.subset(cfg["m_decoder"])
    x = maps.normalize_params(ds.params)
    t = maps.normalize_obs(ds.clean_obs)
    dcfg = cfg["decoder"]
    spec = nnet.MLPSpec(x.shape[1], dcfg["hidden_layers"], dcfg["hidden_width"],
                        t.shape[1])
    opt = losses.OptConfig(epochs=dcfg["epochs"], lr=dcfg["lr"],
                           seed=cfg["seed"] + dcfg["seed_offset"],
                           batch_size=dcfg.get("batch_size"))
    params, history = losses.train_decoder(spec, x, t, opt)
    nnet.save_checkpoint(ws.path("decoder.json"), params,
                         meta={"seed": opt.seed, "trained_on": "dataset.jsonl",
                               "final_val_loss": history[-1].val_loss})
    _write_log(ws.path("decoder_log.csv"), history)
    tr, va = losses.train_val_split(x.shape[0])
    x_err, t_err = x[va], t[va]
    if x_err.shape[0] < t.shape[1] + 1:
        # validation split too small for a full-rank residual covariance
        x_err, t_err = x, t
    preds, _ = nnet.forward(params, x_err)
    err = losses.decoder_error_stats_from_pairs(preds, t_err)
    ws.write_json("decoder_error.json", {
        "format_version": FORMAT_VERSION,
        "mu_dec": err.mu_dec.tolist(),
        "gamma_dec": matrix_to_json(err.gamma_dec.mat),
    })
    ws.update_manifest("train-decoder",
                       ["decoder.json", "decoder_log.csv", "decoder_error.json"],
                       time.perf_counter() - t0)
    print(f"train-decoder: final val MSE {history[-1].val_loss:.3e}")
    return 0


def _write_log(path: Path, history: list[losses.EpochRecord]) -> None:
    with open(path, "w") as fh:
        fh.write(losses.EpochRecord.CSV_HEADER + "\n")
        for rec in history:
            fh.write(rec.csv_row() + "\n")


def _normalized_training_pieces(cfg: dict, ws: Workspace):
    """Forward map, prior, and total noise in the normalized scale."""
    problem = build_problem(cfg)
    ds, maps, noise = _load_generate_artifacts(ws)
    prior_bar, noise_bar = bayes.normalize_models(problem.prior, noise, maps)
    if cfg.get("known_map") or cfg["m_decoder"] == 0:
        fwd_bar: ForwardModel = ElementwiseAffineWrapped(
            problem.forward, maps.a, maps.b, maps.c, maps.d
        )
        total_noise = noise_bar
    else:
        dec_params, _ = nnet.load_checkpoint(ws.require("decoder.json"))
        fwd_bar = MLPModel(dec_params)
        derr = ws.read_json("decoder_error.json")
        err = losses.DecoderErrorModel(
            np.asarray(derr["mu_dec"], float),
            SPDMatrix(matrix_from_json(derr["gamma_dec"])),
        )
        total_noise = err.combine_with(noise_bar)
    return problem, ds, maps, noise, prior_bar, total_noise, fwd_bar


def cmd_train_encoder(cfg: dict) -> int:
    ws = Workspace(cfg)
    t0 = time.perf_counter()
    problem, ds, maps, _, prior_bar, total_noise, fwd_bar = \
        _normalized_training_pieces(cfg, ws)
    y_rows = maps.normalize_obs(ds.subset(cfg["m_encoder"]).noisy_obs)
    ecfg = cfg["encoder"]
    d = prior_bar.dim
    spec = nnet.MLPSpec(y_rows.shape[1], ecfg["hidden_layers"],
                        ecfg["hidden_width"], nnet.head_dim(d))
    opt = losses.OptConfig(epochs=ecfg["epochs"], lr=ecfg["lr"],
                           seed=cfg["seed"] + ecfg["seed_offset"])
    train_cfg = losses.EncoderTrainConfig(
        loss=cfg["loss"], theta=cfg["theta"], alpha=cfg["alpha"],
        k_samples=cfg["k_samples"], sampling_seed=cfg["seed"] + 4,
    )
    params, history = losses.train_encoder(
        spec, y_rows, fwd_bar, prior_bar, total_noise, train_cfg, opt
    )
    nnet.save_checkpoint(ws.path("encoder.json"), params,
                         meta={"seed": opt.seed, "loss": cfg["loss"],
                               "theta": cfg["theta"], "alpha": cfg["alpha"],
                               "final_val_loss": history[-1].val_loss})
    _write_log(ws.path("encoder_log.csv"), history)
    ws.update_manifest("train-encoder", ["encoder.json", "encoder_log.csv"],
                       time.perf_counter() - t0, fwd_bar.call_count)
    print(f"train-encoder[{cfg['loss']}]: final val loss {history[-1].val_loss:.4e}")
    return 0


def _posterior_from_encoder(cfg, enc_params, meta, y_bar, prior_bar,
                            total_noise, fwd_bar, maps):
    """Encoder pass, head decode, recovery transform, denormalization."""
    raw, _ = nnet.forward(enc_params, y_bar)
    out = nnet.decode_head(raw, prior_bar.dim)
    if meta.get("loss", "theta") == "theta":
        mu_bar, gamma_bar = losses.recover_posterior_theta(
            out.mu, out.C, prior_bar.cov
        )
    else:
        gamma_hat = out.C @ out.C.T
        mu_hat = out.mu
        gamma_lap = bayes.laplace_covariance(
            fwd_bar, bayes.GaussianModel(prior_bar.mean, prior_bar.cov),
            total_noise, mu_hat,
        )
        mu_bar, gamma_bar = losses.recover_posterior_alpha(
            mu_hat, gamma_hat, gamma_lap, prior_bar.mean, prior_bar.cov,
            meta.get("alpha", cfg["alpha"]),
        )
    return bayes.denormalize_posterior(mu_bar, gamma_bar, maps)


def cmd_solve(cfg: dict, y_file: str | None = None) -> int:
    ws = Workspace(cfg)
    t0 = time.perf_counter()
    problem, ds, maps, noise, prior_bar, total_noise, fwd_bar = \
        _normalized_training_pieces(cfg, ws)
    enc_params, meta = nnet.load_checkpoint(ws.require("encoder.json"))
    y_rows, u_true = _load_y_rows(Path(y_file) if y_file else ws.require("test.jsonl"))
    records = []
    for i, y in enumerate(y_rows):
        t_start = time.perf_counter()
        mu, gamma = _posterior_from_encoder(
            cfg, enc_params, meta, maps.normalize_obs(y), prior_bar,
            total_noise, fwd_bar, maps,
        )
        records.append({
            "index": i,
            "mu_post": mu.tolist(),
            "gamma_post": matrix_to_json(gamma.mat),
            "wall_seconds": time.perf_counter() - t_start,
        })
    report = {
        "format_version": FORMAT_VERSION,
        "preset": cfg["preset"],
        "loss": meta.get("loss", cfg["loss"]),
        "n_samples": len(records),
        "total_seconds": time.perf_counter() - t0,
        "samples": records,
    }
    ws.write_json("solve_report.json", report)
    ws.update_manifest("solve", ["solve_report.json"], time.perf_counter() - t0)
    print(f"solve: {len(records)} posteriors in {report['total_seconds']:.2f}s")
    return 0


def _oracle_forward_and_noise(cfg, ws, problem, maps, noise):
    """Original-scale forward map and noise model for the oracle."""
    if not problem.oracle_uses_surrogate:
        return problem.forward, noise
    # circulation runs are too costly to sample 2^14 times: weight by the
    # decoder surrogate mapped back to the original scale, with the decoder
    # error folded into the noise
    dec_params, _ = nnet.load_checkpoint(ws.require("decoder.json"))
    surrogate = ElementwiseAffineWrapped(
        MLPModel(dec_params),
        1.0 / maps.a, -maps.b / maps.a, 1.0 / maps.c, -maps.d / maps.c,
    )
    derr = ws.read_json("decoder_error.json")
    mu_dec = np.asarray(derr["mu_dec"], float) / maps.c
    gamma_dec = matrix_from_json(derr["gamma_dec"]) * np.outer(1.0 / maps.c, 1.0 / maps.c)
    total = bayes.GaussianModel(noise.mean + mu_dec,
                                SPDMatrix(noise.cov.mat + gamma_dec))
    return surrogate, total


def cmd_oracle(cfg: dict, y_file: str | None = None) -> int:
    ws = Workspace(cfg)
    t0 = time.perf_counter()
    problem, ds, maps, noise, prior_bar, total_noise, fwd_bar = \
        _normalized_training_pieces(cfg, ws)
    y_rows, u_true = _load_y_rows(Path(y_file) if y_file else ws.require("test.jsonl"))
    fwd_oracle, noise_oracle = _oracle_forward_and_noise(cfg, ws, problem, maps, noise)
    solve_report = None
    solve_path = ws.path("solve_report.json")
    if solve_path.exists():
        solve_report = json.loads(solve_path.read_text())
    oracle_records = []
    error_rows = []
    for i, y in enumerate(y_rows):
        t_start = time.perf_counter()
        try:
            res = qmc.posterior_oracle(
                y, fwd_oracle, problem.prior, noise_oracle, cfg["oracle_points"]
            )
        except DegenerateWeights as exc:
            # surfaced per sample: the estimate is unusable, not silently wrong
            oracle_records.append({
                "index": i, "degenerate": True, "error": str(exc),
                "runtime_seconds": time.perf_counter() - t_start,
            })
            error_rows.append({"sample": i, "ess": float("nan")})
            continue
        rec = res.to_json()
        rec["index"] = i
        rec["runtime_seconds"] = time.perf_counter() - t_start
        oracle_records.append(rec)
        row = {"sample": i, "ess": res.ess}
        if solve_report is not None and i < len(solve_report["samples"]):
            s = solve_report["samples"][i]
            mu_vae = np.asarray(s["mu_post"], float)
            var_vae = np.diag(matrix_from_json(s["gamma_post"]))
            _, row["vae_vs_oracle_mean"] = bayes.rel_error_vec(mu_vae, res.mean)
            _, row["vae_vs_oracle_var"] = bayes.rel_error_vec(
                var_vae, np.diag(res.cov)
            )
            if u_true is not None:
                _, row["vae_vs_true"] = bayes.rel_error_vec(mu_vae, u_true[i])
        if u_true is not None:
            _, row["oracle_vs_true"] = bayes.rel_error_vec(res.mean, u_true[i])
        error_rows.append(row)
    ws.write_json("oracle_report.json", {
        "format_version": FORMAT_VERSION,
        "n_points": cfg["oracle_points"],
        "surrogate": problem.oracle_uses_surrogate,
        "samples": oracle_records,
    })
    cols = ["sample", "ess", "vae_vs_oracle_mean", "vae_vs_oracle_var",
            "vae_vs_true", "oracle_vs_true"]
    with open(ws.path("oracle_errors.csv"), "w") as fh:
        fh.write(",".join(cols) + "\n")
        for row in error_rows:
            fh.write(",".join(
                f"{row[c]:.8e}" if isinstance(row.get(c), float) else str(row.get(c, ""))
                for c in cols
            ) + "\n")
    ws.update_manifest("oracle", ["oracle_report.json", "oracle_errors.csv"],
                       time.perf_counter() - t0, fwd_oracle.call_count)
    print(f"oracle: {len(oracle_records)} estimates at {cfg['oracle_points']} points")
    return 0


def cmd_benchmark(cfg: dict) -> int:
    """Train-the-encoder timing/accuracy comparison of the two losses."""
    if cfg["preset"] != "exp":
        raise ConfigError("benchmark requires the exp preset")
    ws = Workspace(cfg)
    t0 = time.perf_counter()
    bench = cfg["benchmark"]
    rows = []
    for dim in bench["dims"]:
        problem = presets.exp_problem(dim)
        fwd = problem.forward
        ds, noise = bayes.generate_dataset(
            fwd, problem.prior, cfg["eta"], cfg["m_encoder"], cfg["seed"],
            noise_grouping="per_component",
        )
        maps = bayes.build_normalization(ds, problem.normalization_mode)
        prior_bar, noise_bar = bayes.normalize_models(problem.prior, noise, maps)
        fwd_bar = ElementwiseAffineWrapped(fwd, maps.a, maps.b, maps.c, maps.d)
        rng = np.random.default_rng(cfg["seed"] + 1)
        u_test = problem.prior.sample(rng, cfg["m_test"])
        y_test = fwd.eval_many(u_test) + noise.sample(rng, cfg["m_test"])
        u_map = np.array([
            bayes.map_estimate(fwd, problem.prior, noise, y) for y in y_test
        ])
        for loss_name in ("theta", "alpha"):
            calls_per_eval = dim + 1 if loss_name == "theta" else cfg["k_samples"]
            ecfg = cfg["encoder"]
            spec = nnet.MLPSpec(
                dim,
                bench.get("hidden_layers", ecfg["hidden_layers"]),
                bench.get("hidden_width", ecfg["hidden_width"]),
                nnet.head_dim(dim),
            )
            opt = losses.OptConfig(epochs=bench["epochs"], lr=ecfg["lr"],
                                   seed=cfg["seed"] + ecfg["seed_offset"])
            tcfg = losses.EncoderTrainConfig(
                loss=loss_name, theta=cfg["theta"], alpha=cfg["alpha"],
                k_samples=cfg["k_samples"], sampling_seed=cfg["seed"] + 4,
            )
            y_rows = maps.normalize_obs(ds.noisy_obs)
            t_train = time.perf_counter()
            params, _ = losses.train_encoder(
                spec, y_rows, fwd_bar, prior_bar, noise_bar, tcfg, opt
            )
            train_seconds = time.perf_counter() - t_train
            errs = []
            for y, um in zip(y_test, u_map):
                try:
                    mu, _ = _posterior_from_encoder(
                        cfg, params, {"loss": loss_name, "alpha": cfg["alpha"]},
                        maps.normalize_obs(y), prior_bar, noise_bar, fwd_bar, maps,
                    )
                except (SingularGamma, NotPositiveDefinite):
                    # collapsed covariance head: score the raw encoder mean
                    raw, _ = nnet.forward(params, maps.normalize_obs(y))
                    out = nnet.decode_head(raw, dim)
                    mu, _ = bayes.denormalize_posterior(out.mu, prior_bar.cov, maps)
                _, e = bayes.rel_error_vec(mu, um)
                errs.append(e)
            rows.append({
                "dim": dim, "loss": loss_name,
                "train_seconds": train_seconds,
                "epochs": bench["epochs"],
                "calls_per_eval": calls_per_eval,
                "mean_rel_err_map": float(np.mean(errs)),
            })
            print(f"benchmark dim={dim} loss={loss_name}: "
                  f"{train_seconds:.2f}s, err {rows[-1]['mean_rel_err_map']:.4f}")
    cols = ["dim", "loss", "train_seconds", "epochs", "calls_per_eval",
            "mean_rel_err_map"]
    with open(ws.path("benchmark.csv"), "w") as fh:
        fh.write(",".join(cols) + "\n")
        for row in rows:
            fh.write(",".join(str(row[c]) for c in cols) + "\n")
    ws.update_manifest("benchmark", ["benchmark.csv"], time.perf_counter() - t0)
    return 0


def cmd_gsa(cfg: dict) -> int:
    ws = Workspace(cfg)
    t0 = time.perf_counter()
    gcfg = cfg["gsa"]
    names, ranges = presets.gsa_ranges(gcfg["scenario"])
    vsd = gcfg["scenario"] == "vsd"
    observed = gcfg.get("outputs") or (
        presets.VSD_OBSERVED if vsd else presets.HYPERTENSION_OBSERVED
    )
    popts = cfg["problem"] if cfg["preset"].startswith("cardio") else {}
    model = cardio_mod.CardioModel(
        names, observed, vsd=vsd, log_scale=False,
        dt=popts.get("dt", 1e-3), beats=popts.get("beats", 25),
        samples_per_beat=popts.get("samples_per_beat", 200),
        bsa=popts.get("bsa", 1.80),
    )
    plan = gsa_mod.GsaPlan(ranges=ranges, n_base=gcfg["n_base"], names=names)
    rows = gsa_mod.saltelli_sample(plan, seed=cfg["seed"])
    outputs = model.eval_many(rows)
    indices = gsa_mod.total_sobol_indices(outputs, plan, output_names=observed)
    selected = gsa_mod.select_parameters(indices)
    with open(ws.path("gsa_report.csv"), "w") as fh:
        fh.write("parameter,output,s_total\n")
        for i, pname in enumerate(names):
            for j, oname in enumerate(observed):
                fh.write(f"{pname},{oname},{indices.s_total[i, j]:.8e}\n")
    ws.write_json("gsa_summary.json", {
        "format_version": FORMAT_VERSION,
        "scenario": gcfg["scenario"],
        "n_base": gcfg["n_base"],
        "n_rows": plan.n_rows,
        "selected": [names[i] for i in selected],
        "threshold": gsa_mod.SELECT_THRESHOLD,
    })
    ws.write_json("gsa_chart.json", {
        "parameters": names, "outputs": observed,
        "s_total": indices.clipped().tolist(),
    })
    ws.update_manifest("gsa", ["gsa_report.csv", "gsa_summary.json", "gsa_chart.json"],
                       time.perf_counter() - t0, model.call_count)
    print(f"gsa[{gcfg['scenario']}]: {plan.n_rows} runs, selected {len(selected)} params")
    return 0


def cmd_forward_uq(cfg: dict, posterior_file: str | None = None) -> int:
    if not cfg["preset"].startswith("cardio"):
        raise ConfigError("forward-uq requires a cardio preset")
    ws = Workspace(cfg)
    t0 = time.perf_counter()
    problem = build_problem(cfg)
    report = json.loads(
        (Path(posterior_file) if posterior_file else ws.require("solve_report.json"))
        .read_text()
    )
    idx = cfg["forward_uq"]["sample_index"]
    if idx >= len(report["samples"]):
        raise ConfigError(f"posterior sample index {idx} out of range")
    rec = report["samples"][idx]
    posterior = bayes.GaussianModel(
        np.asarray(rec["mu_post"], float),
        SPDMatrix(matrix_from_json(rec["gamma_post"])),
    )
    model: cardio_mod.CardioModel = problem.forward

    def simulate_series(u):
        from .errors import ForwardFailure, IntegratorBlowup
        params, r_vsd = model.params_for(u)
        try:
            traj = cardio_mod.simulate(
                params, r_vsd_cm=r_vsd, dt=model.dt, beats=model.beats,
                samples_per_beat=model.samples_per_beat, warn_nonperiodic=False,
            )
        except IntegratorBlowup as exc:
            raise ForwardFailure(str(exc)) from exc
        series = {f"V_{c}": traj.states[:, i]
                  for c, i in (("LA", 0), ("LV", 1), ("RA", 6), ("RV", 7))}
        series.update({k: v for k, v in traj.pressures.items()})
        return series

    bands = qmc.forward_uq(posterior, simulate_series,
                           cfg["forward_uq"]["n_samples"])
    keys = sorted(bands)
    n_t = len(bands[keys[0]]["mean"])
    with open(ws.path("forward_uq.csv"), "w") as fh:
        fh.write("t_index," + ",".join(f"{k}_mean,{k}_std" for k in keys) + "\n")
        for ti in range(n_t):
            cells = [str(ti)]
            for k in keys:
                cells.append(f"{bands[k]['mean'][ti]:.8e}")
                cells.append(f"{bands[k]['std'][ti]:.8e}")
            fh.write(",".join(cells) + "\n")
    ws.update_manifest("forward-uq", ["forward_uq.csv"],
                       time.perf_counter() - t0, model.call_count)
    print(f"forward-uq: {cfg['forward_uq']['n_samples']} draws, {n_t} time points")
    return 0


# ---------------------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--preset", choices=list(DEFAULTS),
                   help="built-in defaults (config file optional)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--smoke", action="store_true",
                   help="shrink sizes for a fast end-to-end check")


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="uqvae",
        description="Bayesian inverse problems with variational-autoencoder posteriors",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="sample a dataset and build noise/normalization")
    _add_common(p)
    p.add_argument("--eta", type=float, default=None)
    p.add_argument("--obs-count", type=int, default=None)

    p = sub.add_parser("train-decoder", help="fit the forward-map surrogate")
    _add_common(p)
    p.add_argument("--known-map", action="store_true")

    p = sub.add_parser("train-encoder", help="fit the posterior encoder")
    _add_common(p)
    p.add_argument("--known-map", action="store_true")
    p.add_argument("--theta", type=float, default=None)
    p.add_argument("--loss", choices=["theta", "alpha"], default=None)

    p = sub.add_parser("solve", help="posterior moments for observation records")
    _add_common(p)
    p.add_argument("--known-map", action="store_true")
    p.add_argument("--y-file", default=None)

    p = sub.add_parser("oracle", help="quasi-Monte Carlo posterior reference")
    _add_common(p)
    p.add_argument("--known-map", action="store_true")
    p.add_argument("--y-file", default=None)

    p = sub.add_parser("benchmark", help="loss comparison: time and accuracy")
    _add_common(p)

    p = sub.add_parser("gsa", help="total Sobol indices over a parameter hypercube")
    _add_common(p)

    p = sub.add_parser("forward-uq", help="posterior-predictive trajectory bands")
    _add_common(p)
    p.add_argument("--posterior-file", default=None)
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        cfg = load_config(args)
        if args.command == "generate":
            return cmd_generate(cfg)
        if args.command == "train-decoder":
            return cmd_train_decoder(cfg)
        if args.command == "train-encoder":
            return cmd_train_encoder(cfg)
        if args.command == "solve":
            return cmd_solve(cfg, args.y_file)
        if args.command == "oracle":
            return cmd_oracle(cfg, args.y_file)
        if args.command == "benchmark":
            return cmd_benchmark(cfg)
        if args.command == "gsa":
            return cmd_gsa(cfg)
        if args.command == "forward-uq":
            return cmd_forward_uq(cfg, args.posterior_file)
        raise ConfigError(f"unknown command {args.command}")
    except (ConfigError, MissingArtifact) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except UqvaeError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
