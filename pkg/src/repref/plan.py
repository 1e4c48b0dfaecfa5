"""Experiment plans: TOML parsing, validation, and grid expansion.

The configuration document is TOML with tables [experiment], [[datasets]],
[[features]], [[deformations]], [[probes]], [optimizer], [aggregation];
the exact keys are documented in the README and are a public contract.
Unknown keys are hard errors: silent typos corrupt experiment provenance.

The clean condition is always implicitly present as deformation id CLEAN,
so a plan may declare zero deformations.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import dataio
from .dataio import SplitPolicy
from .deform import DeformationSpec
from .features import AggregationSpec, FeatureSpec
from .probes import OptimizerSpec, ProbeSpec

CLEAN = "CLEAN"

# tasks shipped by each synthetic generator kind
_SYNTH_TASKS = {"tonebank": ["pitch_class", "timbre"], "noiseband": ["band"],
                "xor": ["parity"]}
_SYNTH_PARAMS = {
    "tonebank": {"seed", "n_per_class", "octaves", "timbre_families", "sr",
                 "duration_s", "detune_cents_max"},
    "noiseband": {"seed", "n_classes", "n_per_class", "sr", "duration_s"},
    "xor": {"seed", "n_per_cluster", "sr", "duration_s"},
}

_DEFORM_PARAM_KEYS = ("snr_db", "gain_db", "cutoff_hz", "bits", "command")
_KIND_OF_PARAM = {"snr_db": "white_noise", "gain_db": "gain",
                  "cutoff_hz": "lowpass", "bits": "bit_depth",
                  "command": "external_codec"}


class PlanError(ValueError):
    """Configuration error with a path-like locus."""

    def __init__(self, locus, message):
        super().__init__(f"{locus}: {message}" if locus else message)
        self.locus = locus


@dataclass(frozen=True)
class Diagnostic:
    severity: str  # ERROR | WARNING
    locus: str
    message: str

    def __str__(self):
        return f"{self.severity} {self.locus}: {self.message}"


@dataclass(frozen=True)
class DatasetRef:
    id: str
    manifest: str | None = None
    synth: dict | None = None            # {"kind": ..., **params}
    tasks: dict | None = None            # task -> kind (manifest) or subset map
    task_filter: tuple | None = None     # subset list for synth datasets
    split: SplitPolicy = field(default_factory=SplitPolicy)

    def declared_tasks(self) -> list | None:
        """Task ids statically known from the plan, else None."""
        if self.tasks:
            return sorted(self.tasks)
        if self.synth is not None:
            all_tasks = _SYNTH_TASKS.get(self.synth.get("kind", ""), [])
            if self.task_filter is not None:
                return [t for t in all_tasks if t in self.task_filter]
            return list(all_tasks)
        return None


@dataclass(frozen=True)
class RunSpec:
    dataset_id: str
    task_id: str
    feature_id: str
    deformation_id: str  # CLEAN for the implicit clean condition
    probe_id: str
    seed: int
    aggregation_mode: str

    def key_tuple(self):
        return (self.dataset_id, self.task_id, self.feature_id,
                self.deformation_id, self.probe_id, self.seed)

    def to_jsonable(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class ExperimentPlan:
    name: str
    datasets: list
    features: list
    deformations: list
    probes: list
    optimizer: OptimizerSpec
    aggregation: AggregationSpec
    seeds: list
    output_dir: str
    parallelism: int = 1
    deform_training: bool = False  # probes train on clean features by default


# ---------------------------------------------------------------------------
# strict table readers
# ---------------------------------------------------------------------------


def _require_keys(table, allowed, locus):
    for key in table:
        if key not in allowed:
            raise PlanError(locus, f"unknown key {key!r}")


def _get(table, key, types, locus, default=None, required=False):
    if key not in table:
        if required:
            raise PlanError(locus, f"missing required key {key!r}")
        return default
    value = table[key]
    if types is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if not isinstance(value, types) or isinstance(value, bool) and types is not bool:
        raise PlanError(f"{locus}.{key}",
                        f"expected {getattr(types, '__name__', types)}, "
                        f"got {type(value).__name__}")
    return value


def _get_str_list(table, key, locus, default=None):
    if key not in table:
        return default
    value = table[key]
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise PlanError(f"{locus}.{key}", "expected a list of strings")
    return value


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------


def parse_plan(text: str) -> ExperimentPlan:
    """Parse and default-populate a plan; structural problems raise PlanError."""
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        raise PlanError("", f"syntax error: {e}") from e

    _require_keys(doc, {"experiment", "datasets", "features", "deformations",
                        "probes", "optimizer", "aggregation"}, "(top level)")

    exp = _get(doc, "experiment", dict, "(top level)", required=True)
    _require_keys(exp, {"name", "output_dir", "seeds", "parallelism",
                        "deform_training"}, "experiment")
    name = _get(exp, "name", str, "experiment", required=True)
    output_dir = _get(exp, "output_dir", str, "experiment", default=f"runs/{name}")
    seeds = exp.get("seeds", [0])
    if (not isinstance(seeds, list) or not seeds
            or not all(isinstance(s, int) and not isinstance(s, bool) for s in seeds)):
        raise PlanError("experiment.seeds", "expected a nonempty list of integers")
    if len(set(seeds)) != len(seeds):
        raise PlanError("experiment.seeds", "seeds must be distinct")
    parallelism = _get(exp, "parallelism", int, "experiment", default=1)
    if parallelism < 1:
        raise PlanError("experiment.parallelism", "must be a positive integer")

    datasets = _parse_datasets(doc.get("datasets"))
    feats = _parse_features(doc.get("features"))
    deforms = _parse_deformations(doc.get("deformations", []))
    probe_specs = _parse_probes(doc.get("probes"))
    optimizer = _parse_optimizer(doc.get("optimizer", {}))
    aggregation = _parse_aggregation(doc.get("aggregation", {}))

    return ExperimentPlan(name=name, datasets=datasets, features=feats,
                          deformations=deforms, probes=probe_specs,
                          optimizer=optimizer, aggregation=aggregation,
                          seeds=list(seeds), output_dir=output_dir,
                          parallelism=parallelism,
                          deform_training=_get(exp, "deform_training", bool,
                                               "experiment", default=False))


def load_plan(path) -> ExperimentPlan:
    path = Path(path)
    return parse_plan(path.read_text(encoding="utf-8"))


def _check_unique_ids(items, what):
    seen = set()
    for it in items:
        if it.id in seen:
            raise PlanError(f"{what}s", f"duplicate {what} id {it.id!r}")
        seen.add(it.id)


def _parse_datasets(raw):
    if not isinstance(raw, list) or not raw:
        raise PlanError("datasets", "missing required section: at least one "
                                    "[[datasets]] table")
    out = []
    for i, tab in enumerate(raw):
        locus = f"datasets[{i}]"
        _require_keys(tab, {"id", "manifest", "synth", "tasks", "split"}, locus)
        did = _get(tab, "id", str, locus, required=True)
        manifest = _get(tab, "manifest", str, locus)
        synth = _get(tab, "synth", dict, locus)
        if (manifest is None) == (synth is None):
            raise PlanError(locus, "exactly one of manifest/synth required")
        tasks = None
        task_filter = None
        if "tasks" in tab:
            tval = tab["tasks"]
            if isinstance(tval, dict):
                for task, kind in tval.items():
                    if kind not in dataio.TASK_KINDS:
                        raise PlanError(f"{locus}.tasks",
                                        f"unknown task kind {kind!r} for {task!r}")
                tasks = dict(tval)
            elif isinstance(tval, list) and all(isinstance(v, str) for v in tval):
                task_filter = tuple(tval)
            else:
                raise PlanError(f"{locus}.tasks",
                                "expected a task->kind table or a list of task ids")
        if synth is not None:
            kind = synth.get("kind")
            if not isinstance(kind, str):
                raise PlanError(f"{locus}.synth", "missing required key 'kind'")
        split = _parse_split(tab.get("split", {}), f"{locus}.split")
        out.append(DatasetRef(id=did, manifest=manifest, synth=synth,
                              tasks=tasks, task_filter=task_filter, split=split))
    _check_unique_ids(out, "dataset")
    return out


def _parse_split(tab, locus):
    _require_keys(tab, {"train", "val", "test", "group_aware", "seed"}, locus)
    ratios = (_get(tab, "train", float, locus, default=0.7),
              _get(tab, "val", float, locus, default=0.1),
              _get(tab, "test", float, locus, default=0.2))
    return SplitPolicy(ratios=ratios,
                       group_aware=_get(tab, "group_aware", bool, locus,
                                        default=False),
                       seed=_get(tab, "seed", int, locus, default=0))


def _parse_features(raw):
    if not isinstance(raw, list) or not raw:
        raise PlanError("features", "missing required section: at least one "
                                    "[[features]] table")
    out = []
    for i, tab in enumerate(raw):
        locus = f"features[{i}]"
        _require_keys(tab, {"id", "builtin", "command", "window_s", "hop_s",
                            "target_sr"}, locus)
        out.append(FeatureSpec(
            id=_get(tab, "id", str, locus, required=True),
            builtin=_get(tab, "builtin", str, locus),
            command=_get(tab, "command", str, locus),
            window_s=_get(tab, "window_s", float, locus, default=3.0),
            hop_s=_get(tab, "hop_s", float, locus, default=3.0),
            target_sr=_get(tab, "target_sr", int, locus, default=16000)))
    _check_unique_ids(out, "feature")
    return out


def _parse_deformations(raw):
    if not isinstance(raw, list):
        raise PlanError("deformations", "expected [[deformations]] tables")
    out = []
    for i, tab in enumerate(raw):
        locus = f"deformations[{i}]"
        _require_keys(tab, {"id", "kind", "seed_salt", *_DEFORM_PARAM_KEYS}, locus)
        did = _get(tab, "id", str, locus, required=True)
        if did == CLEAN:
            raise PlanError(locus, f"deformation id {CLEAN!r} is reserved for "
                                   f"the implicit clean condition")
        params = {k: tab[k] for k in _DEFORM_PARAM_KEYS if k in tab}
        explicit = _get(tab, "kind", str, locus)
        if explicit is not None:
            kind = explicit
        elif len(params) == 1:
            kind = _KIND_OF_PARAM[next(iter(params))]
        else:
            kind = ""  # undeterminable; validate() reports it
        out.append(DeformationSpec(
            id=did, kind=kind, params=params,
            seed_salt=_get(tab, "seed_salt", int, locus, default=0)))
    _check_unique_ids(out, "deformation")
    return out


def _parse_probes(raw):
    if not isinstance(raw, list) or not raw:
        raise PlanError("probes", "missing required section: at least one "
                                  "[[probes]] table")
    out = []
    for i, tab in enumerate(raw):
        locus = f"probes[{i}]"
        _require_keys(tab, {"id", "architecture", "hidden", "variant",
                            "dropout_p", "activation"}, locus)
        hidden = tab.get("hidden", [])
        if not isinstance(hidden, list) or not all(
                isinstance(h, int) and not isinstance(h, bool) for h in hidden):
            raise PlanError(f"{locus}.hidden", "expected a list of integers")
        out.append(ProbeSpec(
            id=_get(tab, "id", str, locus, required=True),
            architecture=_get(tab, "architecture", str, locus, default="slp"),
            hidden=tuple(hidden),
            variant=_get(tab, "variant", str, locus),
            dropout_p=_get(tab, "dropout_p", float, locus, default=0.0),
            activation=_get(tab, "activation", str, locus, default="relu")))
    _check_unique_ids(out, "probe")
    return out


def _parse_optimizer(tab):
    locus = "optimizer"
    _require_keys(tab, {"algorithm", "lr", "wd", "batch_size", "max_epochs",
                        "patience", "seed"}, locus)
    return OptimizerSpec(
        algorithm=_get(tab, "algorithm", str, locus, default="adam"),
        lr=_get(tab, "lr", float, locus, default=1e-3),
        wd=_get(tab, "wd", float, locus, default=1e-5),
        batch_size=_get(tab, "batch_size", int, locus, default=32),
        max_epochs=_get(tab, "max_epochs", int, locus, default=200),
        patience=_get(tab, "patience", int, locus, default=20),
        seed=_get(tab, "seed", int, locus, default=0))


def _parse_aggregation(tab):
    locus = "aggregation"
    _require_keys(tab, {"mode", "representation_op", "prediction_op"}, locus)
    return AggregationSpec(
        representation_op=_get(tab, "representation_op", str, locus,
                               default="mean"),
        prediction_op=_get(tab, "prediction_op", str, locus,
                           default="mean_prob"),
        mode=_get(tab, "mode", str, locus, default="representation"))


# ---------------------------------------------------------------------------
# serialization (round-trips through parse_plan)
# ---------------------------------------------------------------------------


def _toml_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int,)):
        return repr(v)
    if isinstance(v, float):
        r = repr(v)
        return r if any(c in r for c in ".einf") else r + ".0"
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    if isinstance(v, dict):
        inner = ", ".join(f"{k} = {_toml_value(x)}" for k, x in sorted(v.items()))
        return "{ " + inner + " }"
    raise TypeError(f"cannot serialize {type(v).__name__}")


def serialize_plan(plan: ExperimentPlan) -> str:
    lines = ["[experiment]",
             f"name = {_toml_value(plan.name)}",
             f"output_dir = {_toml_value(plan.output_dir)}",
             f"seeds = {_toml_value(plan.seeds)}",
             f"parallelism = {plan.parallelism}",
             f"deform_training = {_toml_value(plan.deform_training)}", ""]
    for d in plan.datasets:
        lines.append("[[datasets]]")
        lines.append(f"id = {_toml_value(d.id)}")
        if d.manifest is not None:
            lines.append(f"manifest = {_toml_value(d.manifest)}")
        if d.synth is not None:
            lines.append(f"synth = {_toml_value(d.synth)}")
        if d.tasks is not None:
            lines.append(f"tasks = {_toml_value(d.tasks)}")
        if d.task_filter is not None:
            lines.append(f"tasks = {_toml_value(list(d.task_filter))}")
        sp = d.split
        lines.append(
            "split = { train = %s, val = %s, test = %s, group_aware = %s, seed = %d }"
            % (_toml_value(sp.ratios[0]), _toml_value(sp.ratios[1]),
               _toml_value(sp.ratios[2]), "true" if sp.group_aware else "false",
               sp.seed))
        lines.append("")
    for f in plan.features:
        lines.append("[[features]]")
        lines.append(f"id = {_toml_value(f.id)}")
        if f.builtin is not None:
            lines.append(f"builtin = {_toml_value(f.builtin)}")
        if f.command is not None:
            lines.append(f"command = {_toml_value(f.command)}")
        lines.append(f"window_s = {_toml_value(f.window_s)}")
        lines.append(f"hop_s = {_toml_value(f.hop_s)}")
        lines.append(f"target_sr = {f.target_sr}")
        lines.append("")
    for dd in plan.deformations:
        lines.append("[[deformations]]")
        lines.append(f"id = {_toml_value(dd.id)}")
        if dd.kind:
            lines.append(f"kind = {_toml_value(dd.kind)}")
        for k in _DEFORM_PARAM_KEYS:
            if k in dd.params:
                lines.append(f"{k} = {_toml_value(dd.params[k])}")
        lines.append(f"seed_salt = {dd.seed_salt}")
        lines.append("")
    for p in plan.probes:
        lines.append("[[probes]]")
        lines.append(f"id = {_toml_value(p.id)}")
        lines.append(f"architecture = {_toml_value(p.architecture)}")
        if p.hidden:
            lines.append(f"hidden = {_toml_value(list(p.hidden))}")
        if p.variant is not None:
            lines.append(f"variant = {_toml_value(p.variant)}")
        lines.append(f"dropout_p = {_toml_value(p.dropout_p)}")
        lines.append(f"activation = {_toml_value(p.activation)}")
        lines.append("")
    o = plan.optimizer
    lines += ["[optimizer]",
              f"algorithm = {_toml_value(o.algorithm)}",
              f"lr = {_toml_value(o.lr)}",
              f"wd = {_toml_value(o.wd)}",
              f"batch_size = {o.batch_size}",
              f"max_epochs = {o.max_epochs}",
              f"patience = {o.patience}",
              f"seed = {o.seed}", ""]
    a = plan.aggregation
    lines += ["[aggregation]",
              f"mode = {_toml_value(a.mode)}",
              f"representation_op = {_toml_value(a.representation_op)}",
              f"prediction_op = {_toml_value(a.prediction_op)}", ""]
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# validation and grid expansion
# ---------------------------------------------------------------------------


def validate(plan: ExperimentPlan, base_dir=None) -> list:
    """Cross-reference and invariant diagnostics; empty means runnable."""
    base = Path(base_dir) if base_dir else Path.cwd()
    diags = []

    def err(locus, msg):
        diags.append(Diagnostic("ERROR", locus, msg))

    for i, d in enumerate(plan.datasets):
        locus = f"datasets[{i}]({d.id})"
        if d.manifest is not None:
            p = Path(d.manifest)
            if not (p if p.is_absolute() else base / p).exists():
                err(locus, f"manifest path does not exist: {d.manifest}")
        if d.synth is not None:
            kind = d.synth.get("kind")
            if kind not in _SYNTH_TASKS:
                err(locus, f"unknown synth kind {kind!r} "
                           f"(known: {', '.join(sorted(_SYNTH_TASKS))})")
            else:
                extra = set(d.synth) - {"kind"} - _SYNTH_PARAMS[kind]
                for k in sorted(extra):
                    err(locus, f"unknown synth parameter {k!r} for kind {kind!r}")
                if d.task_filter is not None:
                    for t in d.task_filter:
                        if t not in _SYNTH_TASKS[kind]:
                            err(locus, f"synth kind {kind!r} has no task {t!r}")
        ratios = d.split.ratios
        if any(x <= 0 for x in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
            err(f"{locus}.split", f"ratios must be positive and sum to 1, "
                                  f"got {ratios}")

    for i, f in enumerate(plan.features):
        try:
            f.check()
        except Exception as e:
            err(f"features[{i}]({f.id})", str(e))
    for i, dd in enumerate(plan.deformations):
        try:
            dd.check()
        except Exception as e:
            err(f"deformations[{i}]({dd.id})", str(e))
    for i, p in enumerate(plan.probes):
        try:
            p.check()
        except Exception as e:
            err(f"probes[{i}]({p.id})", str(e))
    try:
        plan.optimizer.check()
    except Exception as e:
        err("optimizer", str(e))
    try:
        plan.aggregation.check()
    except Exception as e:
        err("aggregation", str(e))
    return diags


def expand_grid(plan: ExperimentPlan, task_map=None) -> list:
    """The full cartesian grid of runs, lexicographically ordered.

    |runs| = sum of task counts over datasets x |features| x
    (|deformations| + 1) x |probes| x |seeds|. task_map supplies the task
    list for datasets whose tasks are not declared in the plan (manifest
    datasets without task bindings).
    """
    runs = []
    conditions = [CLEAN] + [d.id for d in plan.deformations]
    for ds in plan.datasets:
        tasks = ds.declared_tasks()
        if tasks is None:
            if task_map and ds.id in task_map:
                tasks = sorted(task_map[ds.id])
            else:
                raise PlanError(
                    f"datasets({ds.id})",
                    "tasks are not declared in the plan and no task_map was "
                    "provided")
        for task in tasks:
            for feat in plan.features:
                for cond in conditions:
                    for probe in plan.probes:
                        for seed in plan.seeds:
                            runs.append(RunSpec(
                                dataset_id=ds.id, task_id=task,
                                feature_id=feat.id, deformation_id=cond,
                                probe_id=probe.id, seed=seed,
                                aggregation_mode=plan.aggregation.mode))
    runs.sort(key=RunSpec.key_tuple)
    return runs
