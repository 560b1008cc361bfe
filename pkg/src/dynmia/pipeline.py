"""Staged experiment runner behind the command line.

Every artifact lives in ``<out>/<fingerprint>/`` and carries the config
fingerprint (checkpoint meta, feature and report headers, and a sidecar for
the partition manifest). A stage whose outputs already exist with the
current fingerprint is skipped unless ``force`` is set.
"""

from __future__ import annotations

import json
import logging
from dataclasses import replace
from pathlib import Path

from filelock import FileLock, Timeout

from .attack import load_attack, save_attack, score_file, train_attack, write_scores
from .checkpoint import load_container
from .config import ExperimentConfig
from .data import SplitSpec, load_pool, make_partitions, read_manifest, write_manifest
from .defense import train_defended_target
from .errors import ConfigFingerprintMismatch, ExperimentLocked, InvalidSpec, MissingArtifact
from .evaluation import balanced_sample, compare_reports, compute_metrics, read_report, write_report
from .features import concat, extract_from_pool, read_features, write_features
from .models import DynamicNet, load_model, save_model
from .trainers import FINETUNE_MODES, evaluate_accuracy, finetune_shadow, shadow_config, train_target

log = logging.getLogger(__name__)

SHADOW_MODES = FINETUNE_MODES + ("scratch",)


def attack_name(variant: str, mode: str, defended: bool = False) -> str:
    """The logits-only baseline always uses the from-scratch shadow."""
    name = "logits-only" if variant == "logits-only" else f"{variant}-{mode}"
    return f"defended-{name}" if defended else name


class Experiment:
    def __init__(self, cfg: ExperimentConfig, out=None, force: bool = False):
        self.cfg = cfg
        self.fingerprint = cfg.fingerprint
        self.root = Path(out if out is not None else cfg.out) / self.fingerprint
        self.force = force
        self._pool = None
        self._parts = None

    # ------------------------------------------------------------------ paths

    @property
    def manifest_path(self) -> Path:
        return self.root / "splits.txt"

    def model_path(self, model_id: str) -> Path:
        return self.root / f"{model_id}.ckpt"

    def features_path(self, model_id: str, side: str) -> Path:
        return self.root / "features" / f"{model_id}-{side}.jsonl"

    def attack_path(self, name: str) -> Path:
        return self.root / f"attack-{name}.ckpt"

    def report_path(self, name: str) -> Path:
        return self.root / f"report-{name}.json"

    # ------------------------------------------------------------ bookkeeping

    def lock(self) -> FileLock:
        self.root.mkdir(parents=True, exist_ok=True)
        return FileLock(str(self.root / ".lock"), timeout=0)

    def locked(self):
        lock = self.lock()
        try:
            lock.acquire()
        except Timeout as exc:
            raise ExperimentLocked(f"another process is writing to {self.root}") from exc
        return lock

    def _stored_fingerprint(self, path: Path) -> str | None:
        if path == self.manifest_path:
            side = path.with_name(path.name + ".fingerprint")
            return side.read_text().strip() if side.exists() else None
        if path.suffix == ".ckpt":
            return load_container(path).get("meta", {}).get("fingerprint")
        if path.suffix == ".jsonl":
            with open(path, encoding="utf-8") as fh:
                fh.readline()
                return json.loads(fh.readline()).get("fingerprint")
        if path.suffix == ".json":
            return json.loads(path.read_text()).get("fingerprint")
        return None

    def _check(self, path: Path) -> None:
        got = self._stored_fingerprint(path)
        if got != self.fingerprint:
            raise ConfigFingerprintMismatch(
                f"{path.name} belongs to experiment {got!r}, not {self.fingerprint!r}")

    def require(self, path: Path, stage: str) -> Path:
        if not path.exists():
            raise MissingArtifact(f"missing {stage} ({path.name}); run that stage first")
        self._check(path)
        return path

    def done(self, *paths: Path) -> bool:
        if self.force or not all(p.exists() for p in paths):
            return False
        for p in paths:
            self._check(p)
        return True

    # ------------------------------------------------------------------ data

    def pool(self):
        if self._pool is None:
            c = self.cfg
            self._pool = load_pool(c.dataset, root=c.data_root, seed=c.stage_seed("data"),
                                   synthetic_n=c.synthetic.n,
                                   synthetic_separation=c.synthetic.separation)
        return self._pool

    def partitions(self):
        if self._parts is None:
            self._parts = read_manifest(self.require(self.manifest_path, "partition manifest"))
        return self._parts

    def split_spec(self) -> SplitSpec:
        s = self.cfg.split
        return SplitSpec(self.cfg.dataset, self.cfg.stage_seed("split"), s.n_target_train,
                         s.n_target_test, s.n_shadow_train, s.n_shadow_test,
                         s.overlap_fraction, s.n_reference)

    # ---------------------------------------------------------------- stages

    def prepare(self) -> dict:
        path = self.manifest_path
        if self.done(path):
            return {"stage": "prepare", "skipped": True, "artifacts": [str(path)]}
        self.root.mkdir(parents=True, exist_ok=True)
        parts = make_partitions(self.split_spec(), self.pool().size)
        write_manifest(parts, path)
        path.with_name(path.name + ".fingerprint").write_text(self.fingerprint + "\n")
        self._parts = parts
        return {"stage": "prepare", "skipped": False, "artifacts": [str(path)],
                "sizes": {k: len(v) for k, v in parts.items()}}

    def _fresh_net(self, tag: str = "model") -> DynamicNet:
        return DynamicNet(replace(self.cfg.model, seed=self.cfg.stage_seed(tag)))

    def train_target(self) -> dict:
        path = self.model_path("target")
        if not self.done(path):
            parts = self.partitions()
            net, hist = train_target(self._fresh_net(), self.pool(), parts, self.cfg.target,
                                     log_path=self.root / "target.metrics.tsv")
            self._save_net(net, path, hist, parts.target_train)
            skipped = False
        else:
            skipped = True
        return {"stage": "train-target", "skipped": skipped, "artifacts": [str(path)],
                **self._accuracy(path)}

    def _save_net(self, net, path, hist, train_idx, **meta):
        # inference-mode accuracy; the running training-loop figure mixes in STE gates and batch stats
        train_acc = evaluate_accuracy(net, self.pool(), train_idx)
        save_model(net, path, fingerprint=self.fingerprint, train_acc=train_acc,
                   test_acc=hist[-1].test_acc, **meta)

    def _accuracy(self, path) -> dict:
        meta = load_container(path).get("meta", {})
        return {"train_acc": meta.get("train_acc"), "test_acc": meta.get("test_acc")}

    def shadow(self, mode: str | None = None, defended: bool = False) -> dict:
        mode = mode or self.cfg.shadow.mode
        if mode not in SHADOW_MODES:
            raise InvalidSpec(f"shadow mode must be one of {SHADOW_MODES}")
        if defended and mode == "scratch":
            raise InvalidSpec("a from-scratch shadow does not depend on the target")
        model_id = f"{'defended-' if defended else ''}shadow-{mode}"
        path = self.model_path(model_id)
        stage = "defend" if defended else "shadow"
        if self.done(path):
            return {"stage": stage, "mode": mode, "skipped": True, "artifacts": [str(path)]}
        parts = self.partitions()
        seed = self.cfg.stage_seed(model_id)
        if mode == "scratch":
            net = self._fresh_net("shadow-scratch-init")
            net, hist = train_target(net, self.pool(), parts, replace(self.cfg.target, seed=seed),
                                     which="shadow", log_path=self.root / f"{model_id}.metrics.tsv")
        else:
            src = "defended" if defended else "target"
            f_t, _ = load_model(self.require(self.model_path(src), f"{src} model"))
            cfg = shadow_config(self.cfg.target, self.cfg.shadow.epoch_fraction, seed=seed)
            net, hist = finetune_shadow(f_t, self.pool(), parts, mode, cfg,
                                        log_path=self.root / f"{model_id}.metrics.tsv")
        self._save_net(net, path, hist, parts.shadow_train, mode=mode)
        return {"stage": stage, "mode": mode, "skipped": False, "artifacts": [str(path)]}

    def extract(self, which: str = "target", mode: str | None = None) -> dict:
        """Member/non-member feature files for ``target``, ``shadow``, ``defended`` or ``defended-shadow``."""
        mode = mode or self.cfg.shadow.mode
        if which in ("target", "defended"):
            model_id, sides = which, ("target_train", "target_test")
        elif which in ("shadow", "defended-shadow"):
            model_id, sides = f"{which}-{mode}", ("shadow_train", "shadow_test")
        else:
            raise InvalidSpec(f"unknown feature source {which!r}")
        outs = [self.features_path(model_id, "member"), self.features_path(model_id, "nonmember")]
        if self.done(*outs):
            return {"stage": "extract", "which": model_id, "skipped": True, "artifacts": list(map(str, outs))}
        label = "shadow model" if "shadow" in which else f"{which} model"
        net, _ = load_model(self.require(self.model_path(model_id), label))
        parts = self.partitions()
        outs[0].parent.mkdir(parents=True, exist_ok=True)
        f = self.cfg.features
        for out, side, y in zip(outs, sides, (1, 0)):
            ff = extract_from_pool(net, self.pool(), getattr(parts, side), y, model_id=model_id,
                                   fingerprint=self.fingerprint, with_gradients=f.with_gradients,
                                   with_activations=f.with_activations)
            write_features(ff, out)
        return {"stage": "extract", "which": model_id, "skipped": False, "artifacts": list(map(str, outs))}

    def _features(self, model_id: str):
        mem = read_features(self.require(self.features_path(model_id, "member"), f"{model_id} features"))
        non = read_features(self.require(self.features_path(model_id, "nonmember"), f"{model_id} features"))
        return mem, non

    def attack(self, variant: str = "fusion", mode: str | None = None, defended: bool = False) -> dict:
        mode = mode or self.cfg.shadow.mode
        name = attack_name(variant, mode, defended)
        path = self.attack_path(name)
        if self.done(path):
            return {"stage": "attack", "attack": name, "skipped": True, "artifacts": [str(path)]}
        shadow_id = "shadow-scratch" if variant == "logits-only" else f"shadow-{mode}"
        if defended and variant != "logits-only":
            shadow_id = f"defended-{shadow_id}"
        mem, non = self._features(shadow_id)
        cfg = replace(self.cfg.attack, seed=self.cfg.stage_seed(f"attack-{name}"))
        model = train_attack(mem, non, variant, cfg)
        save_attack(model, path, fingerprint=self.fingerprint, shadow=shadow_id)
        return {"stage": "attack", "attack": name, "skipped": False, "artifacts": [str(path)]}

    def evaluate(self, variant: str = "fusion", mode: str | None = None, defended: bool = False) -> dict:
        mode = mode or self.cfg.shadow.mode
        name = attack_name(variant, mode, defended)
        path = self.report_path(name)
        if not self.done(path):
            model, _ = load_attack(self.require(self.attack_path(name), "attack model"))
            mem, non = self._features("defended" if defended else "target")
            seed = self.cfg.stage_seed(f"eval-{name}")
            m_ids, n_ids = balanced_sample(mem.ids, non.ids, seed)
            test = _concat_rows(mem, m_ids, non, n_ids)
            scores = score_file(model, test)
            report = compute_metrics(scores, test.membership, seed=seed, fingerprint=self.fingerprint)
            write_scores(self.root / f"scores-{name}.tsv", test.ids, scores, test.membership)
            write_report(report, path)
            skipped = False
        else:
            report, skipped = read_report(path), True
        return {"stage": "eval", "attack": name, "skipped": skipped, "artifacts": [str(path)],
                "asr": report.asr, "precision": report.precision, "recall": report.recall}

    def defend(self, mode: str | None = None) -> dict:
        """Adversarially regularised target, then the fusion attack rerun against it."""
        mode = mode or self.cfg.shadow.mode
        path = self.model_path("defended")
        if not self.done(path):
            parts = self.partitions()
            net, hist, adv_acc = train_defended_target(
                self._fresh_net(), self.pool(), parts, self.cfg.target, self.cfg.defense,
                log_path=self.root / "defended.metrics.tsv")
            self._save_net(net, path, hist, parts.target_train, defended=True, adversary_acc=adv_acc,
                           **{"lambda": self.cfg.defense.lam})
        self.shadow(mode, defended=True)
        self.extract("defended")
        self.extract("defended-shadow", mode)
        self.attack("fusion", mode, defended=True)
        summary = self.evaluate("fusion", mode, defended=True)
        summary.update(stage="defend", **self._accuracy(path))
        return summary

    def run_all(self) -> dict:
        c = self.cfg
        mode = c.shadow.mode
        self.prepare()
        target = self.train_target()
        self.shadow(mode)
        self.extract("shadow", mode)
        self.extract("target")
        variants = ["fusion"]
        if c.run.comparative:
            variants += ["gradient", "activation"]
        if c.run.baseline:
            self.shadow("scratch")
            self.extract("shadow", "scratch")
            variants.append("logits-only")
        results = {}
        for v in variants:
            self.attack(v, mode)
            results[attack_name(v, mode)] = self.evaluate(v, mode)["asr"]
        summary = {"stage": "run-all", "asr": results["fusion-" + mode], "attacks": results,
                   "target_test_acc": target["test_acc"]}
        if c.run.defense:
            d = self.defend(mode)
            results[attack_name("fusion", mode, True)] = d["asr"]
            summary["defended_test_acc"] = d["test_acc"]
        if len(results) >= 2:
            reports = {k: read_report(self.report_path(k)) for k in results}
            fig = self.root / c.run.figure
            table = compare_reports(reports, fig, title=f"{c.dataset}: attack success rate")
            (self.root / "comparison.txt").write_text(table + "\n")
            summary["figure"] = str(fig)
        return summary


def _concat_rows(mem, m_ids, non, n_ids):
    return concat([mem.subset(mem.rows_for(m_ids)), non.subset(non.rows_for(n_ids))])


def run_stage(cfg: ExperimentConfig, stage: str, out=None, force: bool = False, **kw) -> dict:
    """Run one named stage under the experiment lock and return its summary."""
    exp = Experiment(cfg, out=out, force=force)
    handlers = {
        "prepare": exp.prepare, "train-target": exp.train_target, "shadow": exp.shadow,
        "extract": exp.extract, "attack": exp.attack, "eval": exp.evaluate,
        "defend": exp.defend, "run-all": exp.run_all,
    }
    if stage not in handlers:
        raise InvalidSpec(f"unknown stage {stage!r}")
    lock = exp.locked()
    try:
        summary = handlers[stage](**kw)
    finally:
        lock.release()
    summary.setdefault("stage", stage)
    summary["fingerprint"] = exp.fingerprint
    summary["dir"] = str(exp.root)
    return summary


__all__ = ["Experiment", "SHADOW_MODES", "attack_name", "run_stage"]
