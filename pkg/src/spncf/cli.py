"""Command-line pipeline: data -> VAE -> latents -> SPN -> counterfactuals -> reports.

Every stage reads artifacts written by earlier stages under one output root
and records the resolved configuration hash and seed in ``manifest.json``.

Configuration is a JSON object with the sections shown in ``DEFAULT_CONFIG``;
any key can be overridden with ``--set section.key=value`` where ``value`` is
parsed as JSON and falls back to a plain string.
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import counterfactual as cf
from . import data, metrics, structlearn, vae
from .circuit import Circuit

log = logging.getLogger("spncf")

OUTPUT_ROOT_ENV = "SPNCF_OUTPUT_ROOT"
STAGES = ("gen-data", "train-vae", "export-latents", "learn-spn", "eval-clf", "gen-cf",
          "eval-cf", "diffmap")

DEFAULT_CONFIG = {
    "seed": 0,
    "output_dir": "runs/default",
    "dataset": {
        "generator": "ellipse", "n": 2000, "side": 32, "noise_sigma": 0.05,
        "group_size": 4, "fractions": [0.8, 0.1, 0.1], "group_aware": True,
        "folds": 1, "fold": 0,
    },
    "vae": {
        "beta1_grid": [0.1, 0.01, 0.001], "beta0": 1.0, "beta2": 1.0,
        "learning_rate": 1e-3, "epochs": 30, "batch_size": 50, "latent_dim": 8,
        "hidden": [128], "classifier_hidden": [32], "noise_sigma": 0.2,
    },
    "spn": {
        "samples_per_instance": 5, "independence_threshold": 0.3, "min_instances": 30,
        "num_row_clusters": 2, "sigma_floor": 1e-3,
    },
    "cf": {
        "backends": ["spn", "mlp"], "betas": [0.0, 1.0], "gammas": [0.0, 1.0],
        "replicates": 5, "step_size": 0.05, "step_decay": 0.01, "max_steps": 1000,
        "num_instances": 100, "target_class": None,
    },
    "metrics": {"embedding": "encoder_mean"},
    "diffmap": {"num_instances": 8},
}


class UsageError(Exception):
    pass


class StageError(Exception):
    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage!r} failed: {message}")
        self.stage = stage


# --------------------------------------------------------------------------
# configuration


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in out:
            raise UsageError(f"unknown configuration key {path + k!r}")
        if isinstance(out[k], dict):
            if not isinstance(v, dict):
                raise UsageError(f"configuration key {path + k!r} must be an object")
            out[k] = _merge(out[k], v, path + k + ".")
        else:
            out[k] = v
    return out


def _parse_override(text: str) -> tuple[list[str], object]:
    if "=" not in text:
        raise UsageError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def resolve_config(path: str | None = None, overrides: list[str] = (),
                   output: str | None = None, seed: int | None = None,
                   folds: int | None = None, env=os.environ) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path:
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise UsageError("config file must hold a JSON object")
        cfg = _merge(cfg, doc)
    for text in overrides:
        keys, value = _parse_override(text)
        nested: dict = value  # type: ignore[assignment]
        for k in reversed(keys):
            nested = {k: nested}
        cfg = _merge(cfg, nested)
    if env.get(OUTPUT_ROOT_ENV):
        cfg["output_dir"] = env[OUTPUT_ROOT_ENV]
    if output is not None:
        cfg["output_dir"] = output
    if seed is not None:
        cfg["seed"] = seed
    if folds is not None:
        cfg["dataset"]["folds"] = folds
    ds = cfg["dataset"]
    if ds["folds"] < 1 or not 0 <= ds["fold"] < max(ds["folds"], 1):
        raise UsageError("need folds >= 1 and 0 <= fold < folds")
    return cfg


def config_hash(cfg: dict) -> str:
    doc = {k: v for k, v in cfg.items() if k != "output_dir"}
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


# --------------------------------------------------------------------------
# helpers


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def _write_json(path: Path, doc) -> None:
    _write_text(path, json.dumps(doc, sort_keys=True) + "\n")


def _tag(value: float) -> str:
    return ("%g" % value).replace("-", "m")


class Pipeline:
    def __init__(self, cfg: dict):
        self.cfg = cfg
        self.root = Path(cfg["output_dir"])
        self.seed = int(cfg["seed"])

    # paths
    def data_dir(self) -> Path:
        return self.root / "data"

    def model_dir(self, beta1: float) -> Path:
        return self.root / f"beta1_{_tag(beta1)}"

    def require(self, stage: str, path: Path) -> Path:
        if not path.exists():
            raise StageError(stage, f"missing upstream artifact {path}")
        return path

    def record(self, stage: str, outputs: list[Path]) -> None:
        path = self.root / "manifest.json"
        doc = json.loads(path.read_text()) if path.exists() else {"stages": {}}
        doc["config"] = {k: v for k, v in self.cfg.items() if k != "output_dir"}
        doc["config_hash"] = config_hash(self.cfg)
        doc["seed"] = self.seed
        doc["stages"][stage] = {
            "config_hash": config_hash(self.cfg), "seed": self.seed,
            "outputs": sorted(str(p.relative_to(self.root)) for p in outputs),
        }
        _write_json(path, doc)

    def load_splits(self, stage: str) -> tuple[data.LabeledDataset, dict]:
        dataset = data.load_dataset(self.require(stage, self.data_dir() / "manifest.json").parent)
        splits = json.loads(self.require(stage, self.data_dir() / "split.json").read_text())
        return dataset, {k: np.array(v, dtype=np.intp) for k, v in splits.items()}

    def load_model(self, stage: str, beta1: float) -> vae.VaeModel:
        return vae.load_model(self.require(stage, self.model_dir(beta1) / "model.json"))

    def load_circuit(self, stage: str, beta1: float) -> Circuit:
        return Circuit.load(self.require(stage, self.model_dir(beta1) / "circuit.json"))

    def cf_grid(self) -> list[cf.CfConfig]:
        c = self.cfg["cf"]
        grid = []
        for backend in c["backends"]:
            gammas = c["gammas"] if backend == "spn" else [0.0]
            for beta in c["betas"]:
                for gamma in gammas:
                    grid.append(cf.CfConfig(
                        target_class=c["target_class"], beta=float(beta), gamma=float(gamma),
                        replicates=int(c["replicates"]), step_size=float(c["step_size"]),
                        max_steps=int(c["max_steps"]), backend=backend, seed=self.seed,
                        trace_stride=max(1, int(c["max_steps"]) // 20),
                        step_decay=float(c["step_decay"])))
        if not grid:
            raise StageError("gen-cf", "counterfactual grid is empty")
        return grid

    @staticmethod
    def cf_name(config: cf.CfConfig) -> str:
        return f"{config.backend}_beta{_tag(config.beta)}_gamma{_tag(config.gamma)}"

    def test_instances(self, dataset, splits) -> np.ndarray:
        return splits["test"][: int(self.cfg["cf"]["num_instances"])]

    # stages
    def gen_data(self) -> None:
        ds_cfg = self.cfg["dataset"]
        if ds_cfg["generator"] != "ellipse":
            raise StageError("gen-data", f"unknown generator {ds_cfg['generator']!r}")
        dataset = data.gen_ellipse_images(int(ds_cfg["n"]), int(ds_cfg["side"]),
                                          noise_sigma=float(ds_cfg["noise_sigma"]),
                                          seed=self.seed, group_size=int(ds_cfg["group_size"]))
        if ds_cfg["folds"] > 1:
            folds = data.group_folds(dataset.group_ids, int(ds_cfg["folds"]), self.seed)
            k = int(ds_cfg["fold"])
            test, val = folds[k], folds[(k + 1) % len(folds)]
            train = np.setdiff1d(np.arange(len(dataset)), np.concatenate([test, val]))
        else:
            spec = data.SplitSpec(tuple(ds_cfg["fractions"]), self.seed,
                                  bool(ds_cfg["group_aware"]))
            train, val, test = data.split(dataset, spec)
        out = self.data_dir()
        data.save_dataset(dataset, out)
        _write_json(out / "split.json", {"train": sorted(map(int, train)),
                                         "val": sorted(map(int, val)),
                                         "test": sorted(map(int, test))})
        self.record("gen-data", [out / "manifest.json", out / "split.json"])

    def train_vae(self) -> None:
        dataset, splits = self.load_splits("train-vae")
        v = self.cfg["vae"]
        outputs = []
        for beta1 in v["beta1_grid"]:
            tc = vae.TrainConfig(beta0=v["beta0"], beta1=float(beta1), beta2=v["beta2"],
                                 learning_rate=v["learning_rate"], epochs=int(v["epochs"]),
                                 batch_size=int(v["batch_size"]), seed=self.seed,
                                 latent_dim=int(v["latent_dim"]), hidden=tuple(v["hidden"]),
                                 classifier_hidden=tuple(v["classifier_hidden"]),
                                 noise_sigma=float(v["noise_sigma"]))
            model, history = vae.train(dataset.subset(splits["train"]), tc,
                                       dataset.subset(splits["val"]))
            d = self.model_dir(beta1)
            d.mkdir(parents=True, exist_ok=True)
            _write_text(d / "model.json", json.dumps(vae.model_to_dict(model)) + "\n")
            _write_json(d / "history.json", [asdict(h) for h in history])
            outputs += [d / "model.json", d / "history.json"]
        self.record("train-vae", outputs)

    def export_latents(self) -> None:
        dataset, splits = self.load_splits("export-latents")
        R = int(self.cfg["spn"]["samples_per_instance"])
        outputs = []
        for beta1 in self.cfg["vae"]["beta1_grid"]:
            model = self.load_model("export-latents", beta1)
            table = vae.export_latents(model, dataset.subset(splits["train"]), R, self.seed)
            path = self.model_dir(beta1) / "latents.csv"
            tmp = path.with_name(path.name + ".tmp")
            structlearn.write_latents_csv(table, tmp)
            tmp.replace(path)
            outputs.append(path)
        self.record("export-latents", outputs)

    def learn_spn(self) -> None:
        s = self.cfg["spn"]
        lc = structlearn.LearnConfig(float(s["independence_threshold"]), int(s["min_instances"]),
                                     int(s["num_row_clusters"]), self.seed,
                                     float(s["sigma_floor"]))
        outputs = []
        for beta1 in self.cfg["vae"]["beta1_grid"]:
            model = self.load_model("learn-spn", beta1)
            path = self.require("learn-spn", self.model_dir(beta1) / "latents.csv")
            table = structlearn.read_latents_csv(path, model.num_classes)
            try:
                circuit = structlearn.learn_spn(table, lc)
            except structlearn.LearningError as exc:
                raise StageError("learn-spn", str(exc)) from exc
            out = self.model_dir(beta1) / "circuit.json"
            _write_text(out, json.dumps(circuit.to_dict()) + "\n")
            outputs.append(out)
        self.record("learn-spn", outputs)

    def _posteriors(self, backend: str, model, circuit, z) -> np.ndarray:
        if backend == "spn":
            return circuit.class_posterior_batch(z)[0]
        return model.classify_proba(z)

    def eval_clf(self) -> None:
        dataset, splits = self.load_splits("eval-clf")
        test = dataset.subset(splits["test"])
        rows, outputs = [], []
        for beta1 in self.cfg["vae"]["beta1_grid"]:
            model = self.load_model("eval-clf", beta1)
            circuit = self.load_circuit("eval-clf", beta1)
            mu, _ = model.encode(test.instances)
            stats = {}
            for backend in ("mlp", "spn"):
                st = metrics.classifier_stats(self._posteriors(backend, model, circuit, mu),
                                              test.labels)
                stats[backend] = st
                rows.append({"beta1": float(beta1), "classifier": backend, **st})
            out = self.model_dir(beta1) / "classifier.json"
            _write_json(out, stats)
            outputs.append(out)
        cols = ("beta1", "classifier", "accuracy", "entropy", "auc", "precision", "recall")
        rows.sort(key=lambda r: (-r["beta1"], r["classifier"]))
        text = ",".join(cols) + "\n" + "".join(
            ",".join(r[c] if isinstance(r[c], str) else "%.6g" % r[c] for c in cols) + "\n"
            for r in rows)
        _write_text(self.root / "classifier_report.csv", text)
        outputs.append(self.root / "classifier_report.csv")
        self.record("eval-clf", outputs)

    def gen_cf(self) -> None:
        dataset, splits = self.load_splits("gen-cf")
        idx = self.test_instances(dataset, splits)
        outputs = []
        for beta1 in self.cfg["vae"]["beta1_grid"]:
            model = self.load_model("gen-cf", beta1)
            circuit = self.load_circuit("gen-cf", beta1)
            for config in self.cf_grid():
                try:
                    results = cf.generate_batch(dataset.instances[idx], model, config, circuit,
                                                instance_keys=idx, labels=dataset.labels[idx])
                except (cf.OptimizationError, cf.ConfigurationError) as exc:
                    raise StageError("gen-cf", f"{self.cf_name(config)}: {exc}") from exc
                out = self.model_dir(beta1) / "cf" / f"{self.cf_name(config)}.json"
                _write_text(out, json.dumps([r.to_dict() for r in results]) + "\n")
                outputs.append(out)
        self.record("gen-cf", outputs)

    def eval_cf(self) -> None:
        dataset, splits = self.load_splits("eval-cf")
        if self.cfg["metrics"]["embedding"] != "encoder_mean":
            raise StageError("eval-cf", "only the encoder_mean embedding is available")
        outputs = []
        for beta1 in self.cfg["vae"]["beta1_grid"]:
            model = self.load_model("eval-cf", beta1)
            circuit = self.load_circuit("eval-cf", beta1)
            test = dataset.subset(splits["test"])
            mu_test, _ = model.encode(test.instances)
            for config in self.cf_grid():
                path = self.require("eval-cf", self.model_dir(beta1) / "cf"
                                    / f"{self.cf_name(config)}.json")
                results = cf.load_results(path)
                originals = dataset.instances[[r.instance for r in results]]
                clf = metrics.classifier_stats(
                    self._posteriors(config.backend, model, circuit, mu_test), test.labels)
                report = metrics.build_report(results, originals,
                                              lambda x: model.encode(x)[0], beta1, clf)
                out = path.with_name(path.stem + ".metrics.json")
                _write_json(out, report.to_dict())
                outputs.append(out)
        metrics.emit_report(self.root, self.root / "report")
        outputs += [self.root / "report.csv", self.root / "report.txt"]
        self.record("eval-cf", outputs)

    def diffmap(self) -> None:
        k = int(self.cfg["diffmap"]["num_instances"])
        outputs = []
        for beta1 in self.cfg["vae"]["beta1_grid"]:
            for config in self.cf_grid():
                path = self.require("diffmap", self.model_dir(beta1) / "cf"
                                    / f"{self.cf_name(config)}.json")
                d = path.parent / "diff" / self.cf_name(config)
                d.mkdir(parents=True, exist_ok=True)
                for r in cf.load_results(path)[:k]:
                    stem = d / f"{r.instance:06d}"
                    out = stem.with_name(stem.name + "_diff.png")
                    tmp = out.with_name(out.stem + ".tmp.png")
                    cf.save_difference_png(tmp, r.difference, r.shape)
                    tmp.replace(out)
                    outputs.append(out)
                    for name, img in (("x_tilde", r.x_tilde), ("x_cf", r.x_cf)):
                        out = stem.with_name(f"{stem.name}_{name}.pgm")
                        tmp = out.with_name(out.name + ".tmp")
                        data.write_pgm(tmp, np.reshape(img, r.shape))
                        tmp.replace(out)
                        outputs.append(out)
        self.record("diffmap", outputs)

    def run(self, stage: str) -> None:
        getattr(self, stage.replace("-", "_"))()


# --------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spncf", description=__doc__.splitlines()[0])
    p.add_argument("stage", choices=STAGES + ("all",),
                   help="pipeline stage to run; 'all' runs every stage in order")
    p.add_argument("--config", help="JSON configuration file")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="override a configuration value (repeatable)")
    p.add_argument("--output", help=f"output root (overrides ${OUTPUT_ROOT_ENV})")
    p.add_argument("--seed", type=int, help="global seed")
    p.add_argument("--folds", type=int, help="group-disjoint folds; test set is fold 'dataset.fold'")
    p.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args.config, args.overrides, args.output, args.seed, args.folds)
    except UsageError as exc:
        print(f"spncf: usage error: {exc}", file=sys.stderr)
        return 2
    if args.print_config:
        print(json.dumps(cfg, indent=2, sort_keys=True))
        return 0
    pipe = Pipeline(cfg)
    pipe.root.mkdir(parents=True, exist_ok=True)
    stages = STAGES if args.stage == "all" else (args.stage,)
    for stage in stages:
        try:
            pipe.run(stage)
        except StageError as exc:
            print(f"spncf: {exc}", file=sys.stderr)
            return 1
        except (ValueError, RuntimeError, OSError, KeyError) as exc:
            print(f"spncf: stage {stage!r} failed: {exc}", file=sys.stderr)
            return 1
        log.info("stage %s done", stage)
    return 0


if __name__ == "__main__":
    sys.exit(main())
