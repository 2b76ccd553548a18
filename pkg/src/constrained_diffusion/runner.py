"""Staged experiment pipeline with content-addressed caching.

Stages: dataset -> net -> oracle -> sample -> score. Every artifact is
cached under a key derived from the canonical JSON of the config sections
it depends on, so reruns hit the cache and identical configs yield
bit-identical results. A manifest records completed stages; failures leave
partial artifacts plus the manifest behind and surface as a nonzero exit
from the CLI.

Baseline tuning protocol: the guidance and direct-projection baselines are
compared at defaults chosen to minimize each baseline's own final
constraint violation on held-out 2D studies (grid over optimizer, step
size, and budget), so the comparison never handicaps a baseline.
"""

from __future__ import annotations

import csv
import json
import os
import time
from pathlib import Path

import numpy as np

from . import datagen
from .arrayio import load_arrays, save_arrays
from .config import canonical_json, digest
from .constraints import GrfConstraint, ObservationConstraint, constraint_from_dict, grf_sample, observation_of_rows
from .errors import OracleExhaustedError
from .metrics import continuity_norms, ensemble_scores, knn_cross_edge_rate, sinkhorn_divergence, violation_stats
from .net import DenoiserNet, TrainConfig, train
from .oracle import OracleConfig, refine, rejection_sample
from .projection import LambdaSchedule, ProjectionConfig
from .samplers import BaselineProjConfig, PprConfig, SampleRun, SamplerConfig, sample
from .sde import NoiseSchedule, marginal_cloud

RESULTS_SCHEMA_VERSION = 1


def cache_dir(cfg: dict) -> Path:
    env = os.environ.get("CONSTRAINED_DIFFUSION_CACHE")
    return Path(env) if env else Path(cfg["output_dir"]) / "cache"


def schedule_from_config(cfg: dict) -> NoiseSchedule:
    s = cfg["schedule"]
    return NoiseSchedule(s["num_steps"], s["sigma_min"], s["sigma_max"], s["spacing"], s["rho"])


def sampler_config(cfg: dict, method: dict) -> SamplerConfig:
    sampling = cfg["sampling"]
    kwargs = dict(
        schedule=schedule_from_config(cfg),
        predictor=sampling["predictor"],
        churn=sampling["churn"],
        correct_steps=sampling["correct_steps"],
        langevin_snr=sampling["langevin_snr"],
        snapshot_steps=tuple(sampling["snapshot_steps"]),
    )
    if method["name"] == "ppr":
        kwargs["ppr"] = PprConfig(
            inner_steps=method["inner_steps"],
            posterior_spread=method["posterior_spread"],
            projection=ProjectionConfig(
                optimizer=method["optimizer"],
                max_iters=method["proj_iters"],
                objective_tol=method["objective_tol"],
                adam_lr=method["adam_lr"],
                lambda_schedule=LambdaSchedule(method["lambda"]),
            ),
        )
    elif method["name"] == "dps":
        kwargs["dps_zeta"] = method["zeta"]
    elif method["name"] == "x0proj":
        kwargs["x0proj"] = BaselineProjConfig(steps=method["steps"], optimizer=method["optimizer"], lr=method["lr"])
    elif method["name"] == "xtproj":
        kwargs["xtproj"] = BaselineProjConfig(steps=method["steps"], optimizer=method["optimizer"], lr=method["lr"])
    return SamplerConfig(**kwargs)


def save_run(path, run: SampleRun, meta: dict) -> None:
    arrays = {"cloud": run.cloud, "failed": run.failed.astype(np.int64)}
    if run.constraint_values is not None:
        arrays["violations"] = run.constraint_values
    snap_meta = {}
    for step, (sigma, cloud) in run.snapshots.items():
        arrays[f"snapshot_{step}"] = cloud
        snap_meta[str(step)] = sigma
    save_arrays(path, arrays, {**meta, "method": run.method, "seed": run.seed, "snapshots": snap_meta, "elapsed": run.elapsed})


def load_run(path) -> SampleRun:
    arrays, meta = load_arrays(path)
    snapshots = {int(step): (sigma, arrays[f"snapshot_{step}"]) for step, sigma in meta.get("snapshots", {}).items()}
    return SampleRun(
        cloud=arrays["cloud"],
        snapshots=snapshots,
        constraint_values=arrays.get("violations"),
        failed=arrays["failed"].astype(bool),
        seed=meta.get("seed"),
        method=meta.get("method", "unknown"),
        elapsed=meta.get("elapsed", 0.0),
    )


class ExperimentRunner:
    """Executes one experiment config end to end."""

    def __init__(self, cfg: dict):
        self.cfg = cfg
        self.out = Path(cfg["output_dir"])
        self.cache = cache_dir(cfg)
        self.out.mkdir(parents=True, exist_ok=True)
        for sub in ("nets", "datasets", "pools", "oracles", "runs"):
            (self.cache / sub).mkdir(parents=True, exist_ok=True)
        self.manifest = {"config_digest": digest(cfg), "schema_version": RESULTS_SCHEMA_VERSION, "stages": {}}
        self.net = None
        self.ks_dataset = None
        self.test_states = None  # ks: (test_count, t, x) standardized model states
        self.constraints = []  # list of (constraint_id, constraint, extra)
        self.oracles = {}
        self.runs = {}

    # -- keys --------------------------------------------------------------

    def _net_key(self) -> str:
        return digest({k: self.cfg[k] for k in ("experiment", "dataset", "schedule", "net", "training")})

    def _pool_key(self) -> str:
        o = self.cfg["oracle"]
        return digest({"net": self._net_key(), "pool_size": o["pool_size"], "seed": o["seed"]})

    def _oracle_key(self, constraint_spec) -> str:
        o = self.cfg["oracle"]
        rel = {k: o[k] for k in ("epsilon", "refine_steps", "refine_lr", "target_count", "max_proposals")}
        return digest({"pool": self._pool_key(), "constraint": constraint_spec, "oracle": rel})

    def _run_key(self, method: dict, constraint_id) -> str:
        return digest(
            {
                "net": self._net_key(),
                "constraint": constraint_id,
                "constraints": self.cfg["constraints"],
                "dataset": self.cfg["dataset"],
                "method": method,
                "sampling": self.cfg["sampling"],
                "schedule": self.cfg["schedule"],
            }
        )

    # -- stages ------------------------------------------------------------

    def stage_dataset(self) -> np.ndarray:
        cfg = self.cfg
        ds = cfg["dataset"]
        if cfg["experiment"] == "data2d":
            rng = np.random.default_rng(ds["seed"])
            if ds["kind"] == "checkerboard":
                params = datagen.Checkerboard2D(grid_size=ds["grid_size"], jitter=ds["jitter"])
                data = datagen.checkerboard_sample(params, ds["train_size"], rng)
            else:
                params = datagen.BananaGmm(
                    weights=tuple(ds["weights"]),
                    means=tuple(tuple(m) for m in ds["means"]),
                    stds=tuple(tuple(s) for s in ds["stds"]),
                    curvature=ds["curvature"],
                )
                data = datagen.banana_sample(params, ds["train_size"], rng)
            self.manifest["stages"]["dataset"] = {"shape": list(data.shape)}
            return data
        key = digest({"dataset": ds})
        path = self.cache / "datasets" / f"{key}.bin"
        if path.exists():
            arrays, meta = load_arrays(path)
            self.ks_dataset = datagen.KsDataset(
                states=arrays["states"],
                mean=meta["mean"],
                std=meta["std"],
                params=self._ks_params(),
                out_res=tuple(ds["out_res"]),
            )
        else:
            self.ks_dataset = datagen.prepare_ks_dataset(
                ds["count"], self._ks_params(), out_res=tuple(ds["out_res"]), seed=ds["seed"]
            )
            save_arrays(path, {"states": self.ks_dataset.states}, {"mean": self.ks_dataset.mean, "std": self.ks_dataset.std})
        data = self.ks_dataset.states.reshape(self.ks_dataset.states.shape[0], -1)
        self.manifest["stages"]["dataset"] = {"shape": list(data.shape), "cache_key": key}
        return data

    def _ks_params(self) -> datagen.KsParams:
        ds = self.cfg["dataset"]
        return datagen.KsParams(
            grid=ds["grid"],
            length=ds["length"],
            dt=ds["dt"],
            steps=ds["steps"],
            newton_tol=ds["newton_tol"],
            newton_max_iter=ds["newton_max_iter"],
        )

    def stage_net(self, data=None) -> DenoiserNet:
        key = self._net_key()
        path = self.cache / "nets" / f"{key}.bin"
        if path.exists():
            self.net = DenoiserNet.load(path)
        else:
            if data is None:
                data = self.stage_dataset()
            ncfg = self.cfg["net"]
            tcfg = self.cfg["training"]
            net = DenoiserNet(
                dim=data.shape[1],
                hidden=tuple(ncfg["hidden"]),
                activation=ncfg["activation"],
                sigma_data=ncfg["sigma_data"],
                embed_features=ncfg["embed_features"],
                rng=np.random.default_rng(ncfg["init_seed"]),
            )
            net, history = train(
                net,
                data,
                TrainConfig(
                    batch=tcfg["batch"],
                    steps=tcfg["steps"],
                    lr=tcfg["lr"],
                    sigma_min=tcfg["sigma_min"],
                    sigma_max=tcfg["sigma_max"],
                    log_sigma_mean=tcfg["log_sigma_mean"],
                    log_sigma_std=tcfg["log_sigma_std"],
                    seed=tcfg["seed"],
                ),
            )
            net.save(path)
            with open(self.out / "training_loss.csv", "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["step", "loss"])
                writer.writerows((i, f"{v:.10g}") for i, v in enumerate(history))
            self.net = net
        self.manifest["stages"]["net"] = {"cache_key": key}
        return self.net

    def stage_constraints(self):
        """Instantiate constraint objects; for the PDE case this also
        generates the held-out test states the observations are read from."""
        cfg = self.cfg
        self.constraints = []
        if cfg["experiment"] == "data2d":
            for i, spec in enumerate(cfg["constraints"]):
                con = grf_sample(
                    np.random.default_rng(spec["seed"]),
                    num_features=spec["num_features"],
                    lengthscale=spec["lengthscale"],
                    kernel_variance=spec["kernel_variance"],
                    bias_scale=spec["bias_scale"],
                )
                self.constraints.append((f"grf{i}", con, {"spec": spec}))
            return self.constraints
        # ks: test states drawn from the trained model so the reference lies
        # in the model's own distribution
        sampling = cfg["sampling"]
        shape = tuple(cfg["dataset"]["out_res"])
        run = sample(
            "pc",
            self.net,
            None,
            sampler_config(cfg, {"name": "pc", "label": "pc"}),
            sampling["test_count"],
            np.random.default_rng(sampling["test_seed"]),
        )
        self.test_states = run.cloud.reshape(-1, *shape)
        for i, spec in enumerate(cfg["constraints"]):
            rows = sorted({min(int(round(f * (shape[0] - 1))), shape[0] - 1) for f in spec["time_fractions"]})
            for j, ref in enumerate(self.test_states):
                con = observation_of_rows(spec["map"], ref, rows)
                self.constraints.append((f"obs{i}_case{j}", con, {"spec": spec, "spec_idx": i, "case": j, "rows": rows}))
        return self.constraints

    def stage_oracle(self):
        """Rejection-sampled ground truth per constraint (2D experiment)."""
        if self.cfg["experiment"] != "data2d":
            return {}
        pool = self._prior_pool()
        ocfg = self.cfg["oracle"]
        for cid, con, _ in self.constraints:
            key = self._oracle_key(con.to_dict())
            path = self.cache / "oracles" / f"{key}.bin"
            if path.exists():
                arrays, _ = load_arrays(path)
                self.oracles[cid] = arrays["cloud"]
                continue
            pool_state = {"offset": 0}

            def draw(n, rng, _state=pool_state):
                # serve cached prior samples first, then fresh batches
                start = _state["offset"]
                _state["offset"] = start + n
                if _state["offset"] <= pool.shape[0]:
                    return pool[start : _state["offset"]]
                run = sample("pc", self.net, None, sampler_config(self.cfg, {"name": "pc", "label": "pc"}), n, rng)
                return run.cloud

            cloud = rejection_sample(
                draw,
                con,
                OracleConfig(
                    epsilon=ocfg["epsilon"],
                    refine_steps=ocfg["refine_steps"],
                    refine_lr=ocfg["refine_lr"],
                    target_count=ocfg["target_count"],
                    max_proposals=ocfg["max_proposals"],
                ),
                np.random.default_rng(ocfg["seed"] + 1),
            )
            save_arrays(path, {"cloud": cloud}, {"constraint": cid})
            self.oracles[cid] = cloud
        self.manifest["stages"]["oracle"] = {"count": len(self.oracles)}
        return self.oracles

    def _prior_pool(self) -> np.ndarray:
        key = self._pool_key()
        path = self.cache / "pools" / f"{key}.bin"
        if path.exists():
            arrays, _ = load_arrays(path)
            return arrays["pool"]
        ocfg = self.cfg["oracle"]
        run = sample(
            "pc",
            self.net,
            None,
            sampler_config(self.cfg, {"name": "pc", "label": "pc"}),
            ocfg["pool_size"],
            np.random.default_rng(ocfg["seed"]),
        )
        save_arrays(path, {"pool": run.cloud}, {})
        return run.cloud

    def stage_sample(self):
        cfg = self.cfg
        n = cfg["sampling"]["n"] if cfg["experiment"] == "data2d" else cfg["sampling"]["ensemble_size"]
        for method in cfg["methods"]:
            targets = [(None, None)] if method["name"] == "pc" else [(cid, con) for cid, con, _ in self.constraints]
            for cid, con in targets:
                key = self._run_key(method, cid)
                path = self.cache / "runs" / f"{key}.bin"
                if path.exists():
                    run = load_run(path)
                else:
                    scfg = sampler_config(cfg, method)
                    seed = cfg["sampling"]["seed"]
                    run = sample(method["name"], self.net, con, scfg, n, np.random.default_rng(seed), seed=seed)
                    save_run(path, run, {"constraint": cid, "label": method["label"]})
                self.runs[(method["label"], cid)] = run
        self.manifest["stages"]["sample"] = {"count": len(self.runs)}
        return self.runs

    def stage_score(self):
        if self.cfg["experiment"] == "data2d":
            rows = self._score_data2d()
        else:
            rows = self._score_ks()
        self._write_results(rows)
        self.manifest["stages"]["score"] = {"rows": len(rows)}
        return rows

    def _score_data2d(self):
        cfg = self.cfg
        m = cfg["metrics"]
        rows = []
        curve_rows = []
        for method in cfg["methods"]:
            if method["name"] == "pc":
                continue
            for cid, con, _ in self.constraints:
                run = self.runs[(method["label"], cid)]
                oracle = self.oracles[cid]
                stats = violation_stats(run.cloud, con)
                with open(self.out / f"violation_hist_{method['label']}_{cid}.json", "w") as fh:
                    json.dump(stats, fh)
                mrng = np.random.default_rng(1234)
                rate = knn_cross_edge_rate(
                    run.cloud, oracle, k=m["k"], subsample=min(m["subsample"], len(oracle), len(run.cloud)), repeats=m["repeats"], rng=mrng
                )
                sk = sinkhorn_divergence(run.cloud[: m["sinkhorn_points"]], oracle[: m["sinkhorn_points"]])
                row = {
                    "experiment": "data2d",
                    "dataset": cfg["dataset"]["kind"],
                    "method": method["label"],
                    "constraint": cid,
                    "n": run.cloud.shape[0],
                    "violation_median": stats["median"],
                    "violation_q25": stats["q25"],
                    "violation_q75": stats["q75"],
                    "violation_max": stats["max"],
                    "cross_edge": rate,
                    "sinkhorn": sk,
                    "failed": int(run.failed.sum()),
                    "elapsed": run.elapsed,
                }
                rows.append(row)
                for step, (sigma, cloud) in sorted(run.snapshots.items()):
                    target = oracle if sigma == 0 else marginal_cloud(oracle, sigma, np.random.default_rng(5000 + step))
                    srate = knn_cross_edge_rate(
                        cloud, target, k=m["k"], subsample=min(m["subsample"], len(target), len(cloud)), repeats=m["repeats"], rng=np.random.default_rng(99)
                    )
                    ssk = sinkhorn_divergence(cloud[: m["sinkhorn_points"]], target[: m["sinkhorn_points"]])
                    curve_rows.append(
                        {
                            "method": method["label"],
                            "constraint": cid,
                            "step": step,
                            "sigma": sigma,
                            "cross_edge": srate,
                            "sinkhorn": ssk,
                        }
                    )
        self._write_csv(self.out / "metric_vs_sigma.csv", curve_rows)
        return rows

    def _score_ks(self):
        cfg = self.cfg
        shape = tuple(cfg["dataset"]["out_res"])
        rows = []
        # unconditional continuity reference
        prior_run = self.runs.get(("pc", None))
        prior_stats = None
        if prior_run is not None:
            scores = [continuity_norms(s.reshape(shape)) for s in prior_run.cloud]
            prior_stats = {
                "mean": float(np.mean([s.mean_step_norm for s in scores])),
                "max": float(np.max([s.max_step_norm for s in scores])),
            }
            rows.append(
                {
                    "experiment": "ks",
                    "method": "pc",
                    "constraint": "",
                    "violation_median": "",
                    "violation_max": "",
                    "skill": "",
                    "spread": "",
                    "ratio": "",
                    "crps": "",
                    "continuity_mean": prior_stats["mean"],
                    "continuity_max": prior_stats["max"],
                    "failed": int(prior_run.failed.sum()),
                    "elapsed": prior_run.elapsed,
                }
            )
        cont_rows = []
        for method in cfg["methods"]:
            if method["name"] == "pc":
                continue
            by_spec: dict[int, list] = {}
            for (label, cid), run in self.runs.items():
                if label != method["label"] or cid is None:
                    continue
                extra = next(e for c, _, e in self.constraints if c == cid)
                by_spec.setdefault(extra["spec_idx"], []).append((cid, run, extra))
            for spec_idx, items in sorted(by_spec.items()):
                items.sort(key=lambda it: it[2]["case"])
                ens = np.stack([it[1].cloud.reshape(-1, *shape) for it in items])  # (K, M, t, x)
                tru = np.stack([self.test_states[it[2]["case"]] for it in items])
                scores = ensemble_scores(ens, tru)
                violations = np.concatenate([it[1].constraint_values for it in items])
                conts = [continuity_norms(member) for case in ens for member in case]
                cont_mean = float(np.mean([c.mean_step_norm for c in conts]))
                cont_max = float(np.max([c.max_step_norm for c in conts]))
                spec = cfg["constraints"][spec_idx]
                cname = f"{spec['map']}@{','.join(str(f) for f in spec['time_fractions'])}"
                rows.append(
                    {
                        "experiment": "ks",
                        "method": method["label"],
                        "constraint": cname,
                        "violation_median": float(np.median(violations)),
                        "violation_max": float(np.max(violations)),
                        "skill": scores.skill,
                        "spread": scores.spread,
                        "ratio": scores.ratio,
                        "crps": scores.crps,
                        "continuity_mean": cont_mean,
                        "continuity_max": cont_max,
                        "failed": int(sum(it[1].failed.sum() for it in items)),
                        "elapsed": float(sum(it[1].elapsed for it in items)),
                    }
                )
                cont_rows.append({"method": method["label"], "constraint": cname, "continuity_mean": cont_mean, "continuity_max": cont_max})
        if prior_stats:
            cont_rows.append({"method": "pc", "constraint": "", "continuity_mean": prior_stats["mean"], "continuity_max": prior_stats["max"]})
        self._write_csv(self.out / "continuity.csv", cont_rows)
        self._write_csv(self.out / "ensemble_metrics.csv", [r for r in rows if r["method"] != "pc"])
        return rows

    def _write_csv(self, path, rows):
        if not rows:
            return
        keys = list(rows[0].keys())
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=keys)
            writer.writeheader()
            writer.writerows(rows)

    def _write_results(self, rows):
        self._write_csv(self.out / "results.csv", rows)
        with open(self.out / "results.json", "w") as fh:
            json.dump(rows, fh, indent=1)

    def _write_manifest(self, status: str):
        self.manifest["status"] = status
        with open(self.out / "manifest.json", "w") as fh:
            json.dump(self.manifest, fh, indent=1)

    def run_all(self) -> int:
        t0 = time.perf_counter()
        try:
            data = self.stage_dataset()
            self.stage_net(data)
            self.stage_constraints()
            self.stage_oracle()
            self.stage_sample()
            self.stage_score()
        except Exception as exc:  # partial artifacts stay behind
            self.manifest["error"] = f"{type(exc).__name__}: {exc}"
            self._write_manifest("failed")
            raise
        self.manifest["elapsed"] = time.perf_counter() - t0
        self._write_manifest("complete")
        return 0


ABLATION_AXES = ("renoise_M", "correct_N", "proj_steps")


def ablate(cfg: dict, axis: str, values, out_dir=None) -> list:
    """Run one experiment per axis value, sharing nets and oracles.

    The axis rewrites the first ppr method entry (renoise count or
    projection iterations) or the global correction count.
    """
    if axis not in ABLATION_AXES:
        raise ValueError(f"axis must be one of {ABLATION_AXES}")
    if not values:
        raise ValueError("values must be a non-empty list")
    import copy as _copy

    out_root = Path(out_dir) if out_dir else Path(cfg["output_dir"])
    combined = []
    for value in values:
        sub = _copy.deepcopy(cfg)
        sub["output_dir"] = str(out_root / f"ablate_{axis}_{value}")
        ppr_methods = [m for m in sub["methods"] if m["name"] == "ppr"]
        if axis == "renoise_M":
            for m in ppr_methods:
                m["inner_steps"] = int(value)
        elif axis == "proj_steps":
            for m in ppr_methods:
                m["proj_iters"] = int(value)
        else:
            sub["sampling"]["correct_steps"] = int(value)
        if os.environ.get("CONSTRAINED_DIFFUSION_CACHE") is None:
            os.environ["CONSTRAINED_DIFFUSION_CACHE"] = str(cache_dir(cfg))
            reset = True
        else:
            reset = False
        try:
            runner = ExperimentRunner(sub)
            runner.run_all()
        finally:
            if reset:
                del os.environ["CONSTRAINED_DIFFUSION_CACHE"]
        with open(Path(sub["output_dir"]) / "results.json") as fh:
            for row in json.load(fh):
                row[axis] = value
                combined.append(row)
    if combined:
        keys = [axis] + [k for k in combined[0] if k != axis]
        with open(out_root / f"ablate_{axis}.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=keys)
            writer.writeheader()
            writer.writerows(combined)
    return combined
