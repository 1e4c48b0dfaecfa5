"""Content-addressed DAG construction, cached parallel execution, results.

Every pipeline stage (deform, extract, aggregate, train, evaluate) becomes a
node keyed by SHA-256 of its canonical (stage, params, input_keys,
format_version); equal inputs always produce equal keys across processes and
machines. Node outputs are published atomically (temp dir + rename) under
``cache/<first2>/<key>``, so an interrupted run resumes without redoing
finished work and concurrent writers of one key are benign.

Deformations apply to evaluation-split audio only: probes train on clean
features (one train node shared by every deformation of the same grid cell)
unless the plan sets deform_training = true. The policy is auditable from
each RunResult's cache lineage.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import shutil
import threading
import time
import uuid
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dataio, deform, dsp, features, metrics, probes
from .dataio import Signal
from .plan import CLEAN, ExperimentPlan, RunSpec, expand_grid

log = logging.getLogger(__name__)

FORMAT_VERSION = "1"
CONFUSION_EXAMPLE_CAP = 5
_ABORT_ENV = "REPREF_TEST_ABORT_AFTER_STAGE"  # crash-injection hook for tests


class OrchestratorError(RuntimeError):
    pass


class NodeFailure(OrchestratorError):
    def __init__(self, stage, key, cause):
        super().__init__(f"stage={stage} key={key[:12]} failed: {cause}")
        self.stage = stage
        self.key = key
        self.cause = cause


# ---------------------------------------------------------------------------
# canonical serialization and keys
# ---------------------------------------------------------------------------


def canonical_json(obj) -> str:
    """Sorted keys, compact separators, shortest round-trip floats, no NaN."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"),
                      allow_nan=False)


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def node_key(stage: str, params: dict, input_keys: list) -> str:
    return sha256_text(canonical_json({
        "stage": stage, "params": params, "input_keys": list(input_keys),
        "format_version": FORMAT_VERSION}))


def track_seed(track_id: str) -> int:
    """Stable per-track seed so a track always receives identical noise."""
    return int(hashlib.sha256(track_id.encode("utf-8")).hexdigest()[:8], 16)


@dataclass
class StageNode:
    stage: str
    params: dict
    input_keys: list
    compute: object = field(repr=False, default=None)  # (inputs, out_dir) -> None
    key: str = ""

    def __post_init__(self):
        if not self.key:
            self.key = node_key(self.stage, self.params, self.input_keys)


@dataclass
class NodeStatus:
    key: str
    stage: str
    status: str  # hit | run | fail | aborted
    seconds: float = 0.0
    error: str = ""


@dataclass
class RunResult:
    run: RunSpec
    metrics: dict
    confusion: dict | None
    timing: dict
    lineage: list  # [{"stage": ..., "key": ...}], sorted

    def to_jsonable(self) -> dict:
        return {"run": self.run.to_jsonable(), "metrics": self.metrics,
                "confusion": self.confusion, "timing": self.timing,
                "lineage": self.lineage}

    @classmethod
    def from_jsonable(cls, obj) -> "RunResult":
        return cls(run=RunSpec(**obj["run"]), metrics=obj["metrics"],
                   confusion=obj["confusion"], timing=obj["timing"],
                   lineage=obj["lineage"])


@dataclass
class ExecutionReport:
    statuses: list = field(default_factory=list)
    results: list = field(default_factory=list)

    def counts(self) -> dict:
        out: dict = {}
        for s in self.statuses:
            out[s.status] = out.get(s.status, 0) + 1
        return out

    @property
    def failures(self):
        return [s for s in self.statuses if s.status == "fail"]


# ---------------------------------------------------------------------------
# cache
# ---------------------------------------------------------------------------


class Cache:
    """Content-addressed blob store: cache/<first2>/<key>/{meta.json,payload/}."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        (self.root / "tmp").mkdir(exist_ok=True)
        self._index_lock = threading.Lock()

    def blob_dir(self, key: str) -> Path:
        return self.root / key[:2] / key

    def payload_dir(self, key: str) -> Path:
        return self.blob_dir(key) / "payload"

    def meta(self, key: str) -> dict:
        return json.loads((self.blob_dir(key) / "meta.json").read_text())

    def has_verified(self, key: str) -> bool:
        """True when the blob exists and its payload digests check out;
        corrupt blobs are dropped (the node will recompute)."""
        blob = self.blob_dir(key)
        meta_path = blob / "meta.json"
        if not meta_path.exists():
            return False
        try:
            meta = json.loads(meta_path.read_text())
            for rel, digest in meta["content"].items():
                if _file_sha256(blob / "payload" / rel) != digest:
                    raise ValueError(f"digest mismatch for {rel}")
            return True
        except Exception as e:
            log.warning("cache corruption at %s (%s); recomputing", key[:12], e)
            shutil.rmtree(blob, ignore_errors=True)
            return False

    def build_dir(self, key: str) -> Path:
        d = self.root / "tmp" / f"{key[:16]}.{uuid.uuid4().hex[:8]}"
        (d / "payload").mkdir(parents=True)
        return d

    def publish(self, node: StageNode, build: Path, wall_s: float) -> None:
        payload = build / "payload"
        content = {}
        for f in sorted(payload.rglob("*")):
            if f.is_file():
                content[f.relative_to(payload).as_posix()] = _file_sha256(f)
        meta = {"key": node.key, "stage": node.stage, "params": node.params,
                "input_keys": node.input_keys,
                "format_version": FORMAT_VERSION, "wall_s": wall_s,
                "content": content}
        (build / "meta.json").write_text(canonical_json(meta))
        final = self.blob_dir(node.key)
        final.parent.mkdir(parents=True, exist_ok=True)
        try:
            os.rename(build, final)
        except OSError:
            # another writer published the same key; identical content, drop ours
            shutil.rmtree(build, ignore_errors=True)
        self._append_index({"key": node.key, "stage": node.stage,
                            "wall_s": round(wall_s, 6)})

    def _append_index(self, entry: dict) -> None:
        with self._index_lock:
            with open(self.root / "index.jsonl", "a", encoding="utf-8") as fh:
                fh.write(canonical_json(entry) + "\n")


def _file_sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


_digest_memo: dict = {}
_digest_lock = threading.Lock()


def audio_digest(path) -> str:
    path = Path(path).resolve()
    st = path.stat()
    memo_key = (str(path), st.st_size, st.st_mtime_ns)
    with _digest_lock:
        if memo_key not in _digest_memo:
            _digest_memo[memo_key] = _file_sha256(path)
        return _digest_memo[memo_key]


# ---------------------------------------------------------------------------
# dataset materialization
# ---------------------------------------------------------------------------


def load_datasets(plan: ExperimentPlan, base_dir) -> dict:
    """Resolve every DatasetRef into a split Dataset; synthetic datasets are
    materialized under <output_dir>/datasets/<id> (reused when the stored
    generator spec matches)."""
    base = Path(base_dir)
    out = {}
    for ref in plan.datasets:
        if ref.manifest is not None:
            p = Path(ref.manifest)
            ds = dataio.load_manifest(p if p.is_absolute() else base / p,
                                      task_kinds=ref.tasks, dataset_id=ref.id)
            if ref.tasks:
                ds = _restrict_tasks(ds, sorted(ref.tasks))
        else:
            ds = _materialize_synth(ref, base / plan.output_dir / "datasets" / ref.id)
            if ref.task_filter is not None:
                ds = _restrict_tasks(ds, list(ref.task_filter))
        ds.dataset_id = ref.id
        ds.splits = dataio.split_dataset(ds, ref.split)
        for diag in ds.splits.diagnostics:
            log.warning("dataset %s: %s", ref.id, diag)
        out[ref.id] = ds
    return out


def _restrict_tasks(ds: dataio.Dataset, tasks) -> dataio.Dataset:
    unknown = [t for t in tasks if t not in ds.tasks]
    if unknown:
        raise OrchestratorError(
            f"dataset {ds.dataset_id!r} has no task(s) {unknown}")
    return dataio.Dataset(
        dataset_id=ds.dataset_id,
        tasks={t: ds.tasks[t] for t in tasks},
        label_vocab={t: ds.label_vocab[t] for t in tasks},
        tracks=[dataio.TrackRecord(t.track_id, t.audio_path,
                                   {k: t.labels[k] for k in tasks},
                                   t.group, t.duration_s) for t in ds.tracks],
        splits=ds.splits)


def _materialize_synth(ref, out_dir: Path) -> dataio.Dataset:
    spec = dict(ref.synth)
    kind = spec.pop("kind")
    gen = dataio.SYNTH_KINDS[kind]
    stamp = out_dir / "synth_spec.json"
    want = canonical_json({"kind": kind, **spec})
    if stamp.exists() and stamp.read_text() == want and \
            (out_dir / "manifest.csv").exists():
        return dataio.load_manifest(out_dir / "manifest.csv", dataset_id=ref.id)
    ds = gen(out_dir, **spec)
    stamp.write_text(want)
    return ds


# ---------------------------------------------------------------------------
# DAG construction
# ---------------------------------------------------------------------------


@dataclass
class Dag:
    nodes: dict = field(default_factory=dict)   # key -> StageNode
    run_nodes: dict = field(default_factory=dict)  # RunSpec -> evaluate key

    def add(self, node: StageNode) -> StageNode:
        return self.nodes.setdefault(node.key, node)

    def ancestors(self, key: str) -> list:
        """Transitive input closure as sorted [{"stage", "key"}]."""
        seen = set()
        stack = list(self.nodes[key].input_keys)
        while stack:
            k = stack.pop()
            if k not in seen:
                seen.add(k)
                stack.extend(self.nodes[k].input_keys)
        return sorted(({"stage": self.nodes[k].stage, "key": k} for k in seen),
                      key=lambda e: (e["stage"], e["key"]))

    def stage_counts(self) -> dict:
        out: dict = {}
        for n in self.nodes.values():
            out[n.stage] = out.get(n.stage, 0) + 1
        return out


def _spec_dict(obj, keys) -> dict:
    return {k: getattr(obj, k) for k in keys}


def _deform_params(spec: deform.DeformationSpec) -> dict:
    return {"id": spec.id, "kind": spec.kind, "params": spec.params,
            "seed_salt": spec.seed_salt}


def _feature_params(spec: features.FeatureSpec) -> dict:
    return {"id": spec.id, "builtin": spec.builtin, "command": spec.command,
            "window_s": spec.window_s, "hop_s": spec.hop_s,
            "target_sr": spec.target_sr}


def _probe_params(spec: probes.ProbeSpec) -> dict:
    return {"id": spec.id, "architecture": spec.architecture,
            "hidden": list(spec.hidden), "variant": spec.variant,
            "dropout_p": spec.dropout_p}


def _labels_digest(ds: dataio.Dataset, task: str, track_ids) -> str:
    labels = {}
    for tid in track_ids:
        lab = ds.track(tid).labels[task]
        labels[tid] = sorted(lab) if isinstance(lab, frozenset) else lab
    return sha256_text(canonical_json(labels))


def build_dag(plan: ExperimentPlan, datasets: dict) -> Dag:
    """Compile the run grid into shared stage nodes.

    Sharing contract: extract/aggregate nodes are per (dataset, feature,
    condition, split) regardless of probe or seed; a train node is shared by
    every deformation of its (dataset, task, feature, probe, seed) cell.
    """
    dag = Dag()
    task_map = {did: sorted(ds.tasks) for did, ds in datasets.items()}
    runs = expand_grid(plan, task_map=task_map)
    deforms = {d.id: d for d in plan.deformations}
    agg = plan.aggregation

    # deform + extract + aggregate layers, shared across tasks/probes/seeds
    agg_key: dict = {}  # (dataset, feature, condition, split) -> aggregate key
    for ref in plan.datasets:
        ds = datasets[ref.id]
        split_of = ds.splits.assignment
        members = {s: ds.splits.members(s) for s in ("train", "val", "test")}
        deform_keys: dict = {}  # (deformation_id, track_id) -> key

        deformed_splits = (("train", "val", "test") if plan.deform_training
                           else ("test",))
        for dspec in plan.deformations:
            for split in deformed_splits:
                for tid in members[split]:
                    track = ds.track(tid)
                    node = dag.add(StageNode(
                        stage="deform",
                        params={"track_id": tid,
                                "audio_digest": audio_digest(track.audio_path),
                                "deformation": _deform_params(dspec),
                                "track_seed": track_seed(tid)},
                        input_keys=[],
                        compute=_make_deform_compute(track.audio_path, dspec, tid)))
                    deform_keys[(dspec.id, tid)] = node.key

        conditions_of_split = {
            "train": [CLEAN] + (list(deforms) if plan.deform_training else []),
            "val": [CLEAN] + (list(deforms) if plan.deform_training else []),
            "test": [CLEAN] + list(deforms),
        }
        for fspec in plan.features:
            for split, conds in conditions_of_split.items():
                for cond in conds:
                    tids = members[split]
                    if cond == CLEAN:
                        tracks_param = [
                            [tid, audio_digest(ds.track(tid).audio_path)]
                            for tid in tids]
                        inputs = []
                        audio_of = {tid: ("file", ds.track(tid).audio_path)
                                    for tid in tids}
                    else:
                        tracks_param = [[tid, None] for tid in tids]
                        inputs = [deform_keys[(cond, tid)] for tid in tids]
                        audio_of = {tid: ("blob", deform_keys[(cond, tid)])
                                    for tid in tids}
                    extract = dag.add(StageNode(
                        stage="extract",
                        params={"dataset_id": ref.id, "condition": cond,
                                "split": split, "tracks": tracks_param,
                                "feature": _feature_params(fspec),
                                "extractor_version": "builtin-1"
                                if fspec.builtin else "plugin-1"},
                        input_keys=inputs,
                        compute=_make_extract_compute(fspec, tids, audio_of)))
                    aggregate = dag.add(StageNode(
                        stage="aggregate",
                        params={"dataset_id": ref.id, "condition": cond,
                                "split": split, "feature_id": fspec.id,
                                "mode": agg.mode,
                                "representation_op": agg.representation_op,
                                "track_ids": tids},
                        input_keys=[extract.key],
                        compute=_make_aggregate_compute(
                            extract.key, tids, agg, ds, split)))
                    agg_key[(ref.id, fspec.id, cond, split)] = aggregate.key

    # train + evaluate layers
    probe_of = {p.id: p for p in plan.probes}
    train_key: dict = {}
    for run in runs:
        ds = datasets[run.dataset_id]
        task_kind = ds.tasks[run.task_id]
        vocab = ds.label_vocab[run.task_id]
        train_cond = run.deformation_id if plan.deform_training else CLEAN
        tcell = (run.dataset_id, run.task_id, run.feature_id, run.probe_id,
                 run.seed, train_cond)
        if tcell not in train_key:
            opt = probes.optimizer_for_run(plan.optimizer, run.seed)
            k_train_feats = agg_key[(run.dataset_id, run.feature_id,
                                     train_cond, "train")]
            k_val_feats = agg_key[(run.dataset_id, run.feature_id,
                                   train_cond, "val")]
            train_ids = ds.splits.members("train")
            val_ids = ds.splits.members("val")
            node = dag.add(StageNode(
                stage="train",
                params={"dataset_id": run.dataset_id, "task_id": run.task_id,
                        "task_kind": task_kind, "vocab": vocab,
                        "labels_digest": _labels_digest(
                            ds, run.task_id, train_ids + val_ids),
                        "probe": _probe_params(probe_of[run.probe_id]),
                        "optimizer": _spec_dict(
                            opt, ("algorithm", "lr", "wd", "batch_size",
                                  "max_epochs", "patience", "seed")),
                        "run_seed": run.seed,
                        "mode": run.aggregation_mode},
                input_keys=[k_train_feats, k_val_feats],
                compute=_make_train_compute(
                    probe_of[run.probe_id], opt, ds, run, k_train_feats,
                    k_val_feats)))
            train_key[tcell] = node.key

        eval_ids = ds.splits.members("test")
        k_eval_feats = agg_key[(run.dataset_id, run.feature_id,
                                run.deformation_id, "test")]
        node = dag.add(StageNode(
            stage="evaluate",
            params={"run": run.to_jsonable(), "task_kind": task_kind,
                    "vocab": vocab,
                    "labels_digest": _labels_digest(ds, run.task_id, eval_ids),
                    "prediction_op": agg.prediction_op,
                    "confusion_cap": CONFUSION_EXAMPLE_CAP},
            input_keys=[train_key[tcell], k_eval_feats],
            compute=_make_evaluate_compute(run, ds, train_key[tcell],
                                           k_eval_feats)))
        dag.run_nodes[run] = node.key
    return dag


# ---------------------------------------------------------------------------
# stage compute implementations
# ---------------------------------------------------------------------------


def _make_deform_compute(audio_path, dspec, tid):
    def compute(inputs, out_dir):
        sig = dataio.read_wav(audio_path)
        out = deform.apply_deformation(sig, dspec, track_seed(tid))
        dataio.write_wav(out_dir / "audio.wav", out, encoding="float32")
    return compute


def _load_node_audio(inputs, source):
    kind, ref = source
    if kind == "file":
        return dataio.read_wav(ref)
    return dataio.read_wav(inputs[ref] / "audio.wav")


def _make_extract_compute(fspec, tids, audio_of):
    def compute(inputs, out_dir):
        if fspec.builtin is not None:
            for tid in tids:
                sig = _load_node_audio(inputs, audio_of[tid])
                if sig.sr != fspec.target_sr:
                    sig = Signal(dsp.resample(sig.samples, sig.sr,
                                              fspec.target_sr),
                                 fspec.target_sr)
                seq = features.extract_builtin(sig, fspec, track_id=tid)
                features.write_tensor_file(out_dir / f"{tid}.mrt", seq.matrix)
        else:
            manifest = out_dir.parent / "plugin_manifest.jsonl"
            entries = []
            for tid in tids:
                kind, ref = audio_of[tid]
                path = ref if kind == "file" else inputs[ref] / "audio.wav"
                entries.append({"track_id": tid, "audio_path": str(path),
                                "window_s": fspec.window_s,
                                "hop_s": fspec.hop_s,
                                "target_sr": fspec.target_sr})
            features.write_plugin_manifest(manifest, entries)
            features.run_plugin_extractor(fspec, manifest, out_dir)
    return compute


def _window_matrix(payload_dir, tid):
    return features.read_tensor_file(payload_dir / f"{tid}.mrt")


def _make_aggregate_compute(extract_key, tids, agg, ds, split):
    def compute(inputs, out_dir):
        payload = inputs[extract_key]
        rows = []
        owners = []
        for tid in tids:
            m = _window_matrix(payload, tid)
            if agg.mode == "representation":
                rows.append(features.aggregate_representation(
                    m, agg.representation_op))
                owners.append(tid)
            else:
                for w in range(m.shape[0]):
                    rows.append(m[w])
                    owners.append([tid, w])
        features.write_tensor_file(out_dir / "features.mrt",
                                   np.asarray(rows, dtype=np.float32))
        (out_dir / "rows.json").write_text(canonical_json(owners))
    return compute


def _targets_for(ds, task, task_kind, owners, vocab):
    idx = {lab: i for i, lab in enumerate(vocab)}
    tids = [o if isinstance(o, str) else o[0] for o in owners]
    if task_kind == "multilabel":
        y = np.zeros((len(tids), len(vocab)), dtype=np.float32)
        for r, tid in enumerate(tids):
            for lab in ds.track(tid).labels[task]:
                y[r, idx[lab]] = 1.0
        return y
    return np.array([idx[ds.track(tid).labels[task]] for tid in tids],
                    dtype=np.int64)


def _make_train_compute(pspec, opt, ds, run, k_train, k_val):
    def compute(inputs, out_dir):
        x_train = features.read_tensor_file(inputs[k_train] / "features.mrt")
        owners_train = json.loads((inputs[k_train] / "rows.json").read_text())
        x_val = features.read_tensor_file(inputs[k_val] / "features.mrt")
        owners_val = json.loads((inputs[k_val] / "rows.json").read_text())
        task_kind = ds.tasks[run.task_id]
        vocab = ds.label_vocab[run.task_id]
        y_train = _targets_for(ds, run.task_id, task_kind, owners_train, vocab)
        y_val = _targets_for(ds, run.task_id, task_kind, owners_val, vocab)
        model = probes.build_probe(pspec, x_train.shape[1], len(vocab),
                                   task_kind, seed=opt.seed)
        trained = probes.train(model, (x_train, y_train), (x_val, y_val), opt)
        probes.save_probe(trained, out_dir, "probe")
    return compute


def _make_evaluate_compute(run, ds, k_train, k_eval):
    def compute(inputs, out_dir):
        trained = probes.load_probe(inputs[k_train] / "probe.json")
        x = features.read_tensor_file(inputs[k_eval] / "features.mrt")
        owners = json.loads((inputs[k_eval] / "rows.json").read_text())
        task_kind = ds.tasks[run.task_id]
        vocab = ds.label_vocab[run.task_id]

        if run.aggregation_mode == "representation":
            prob_rows = probes.probabilities(trained.model, x)
            track_ids = list(owners)
            track_probs = {tid: prob_rows[i] for i, tid in enumerate(track_ids)}
        else:
            prob_rows = probes.probabilities(trained.model, x)
            track_ids = sorted({o[0] for o in owners})
            track_probs = {}
            for tid in track_ids:
                sel = [i for i, o in enumerate(owners) if o[0] == tid]
                track_probs[tid] = prob_rows[sel].mean(axis=0)

        result = {"run": run.to_jsonable(), "n_tracks": len(track_ids)}
        if task_kind == "multilabel":
            refs = _targets_for(ds, run.task_id, task_kind, track_ids, vocab)
            scores = np.stack([track_probs[t] for t in track_ids])
            result["metrics"] = _scrub(metrics.multilabel_metrics(refs, scores))
            result["confusion"] = None
        else:
            idx = {lab: i for i, lab in enumerate(vocab)}
            refs = [idx[ds.track(t).labels[run.task_id]] for t in track_ids]
            preds = [int(track_probs[t].argmax()) for t in track_ids]
            m = metrics.classification_metrics(refs, preds, len(vocab))
            if task_kind == "key":
                scores = [metrics.key_weighted_score(vocab[r], vocab[p])
                          for r, p in zip(refs, preds)]
                m["weighted_key_score"] = float(np.mean(scores))
            result["metrics"] = _scrub(m)
            result["confusion"] = metrics.confusion(
                refs, preds, track_ids, vocab,
                cap=CONFUSION_EXAMPLE_CAP).to_jsonable()
        result["predictions"] = {
            t: {"probs": [round(float(p), 9) for p in track_probs[t]]}
            for t in track_ids}
        (out_dir / "result.json").write_text(canonical_json(result))
    return compute


def _scrub(obj):
    """Make metric structures canonical-JSON safe (NaN -> None)."""
    if isinstance(obj, dict):
        return {k: _scrub(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_scrub(v) for v in obj]
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


# ---------------------------------------------------------------------------
# execution
# ---------------------------------------------------------------------------


def execute(dag: Dag, cache_dir, parallelism: int = 1,
            progress=None, cancel=None) -> ExecutionReport:
    """Topological execution with caching and a bounded worker pool.

    Failed nodes abort their dependents; independent branches keep going.
    A second execution over the same cache is all hits and recomputes
    nothing. When `cancel` (a threading.Event) is set, in-flight nodes
    publish normally and everything not yet started is marked aborted.
    """
    cache = Cache(cache_dir)
    abort_stage = os.environ.get(_ABORT_ENV, "")

    children: dict = {k: [] for k in dag.nodes}
    indegree = {}
    for key, node in dag.nodes.items():
        indegree[key] = len(node.input_keys)
        for dep in node.input_keys:
            children[dep].append(key)

    ready = deque(sorted(k for k, d in indegree.items() if d == 0))
    statuses: dict = {}
    lock = threading.Lock()
    cond = threading.Condition(lock)
    remaining = len(dag.nodes)
    stage_pending = {}
    for node in dag.nodes.values():
        stage_pending[node.stage] = stage_pending.get(node.stage, 0) + 1

    def emit(st: NodeStatus):
        statuses[st.key] = st
        if progress is not None:
            progress(st)

    def mark_done(key, st):
        nonlocal remaining
        with cond:
            emit(st)
            remaining -= 1
            stage_pending[dag.nodes[key].stage] -= 1
            if st.status in ("fail", "aborted"):
                _abort_children(key)
            else:
                for child in children[key]:
                    indegree[child] -= 1
                    if indegree[child] == 0 and child not in statuses:
                        ready.append(child)
            cond.notify_all()
        if (abort_stage and dag.nodes[key].stage == abort_stage
                and stage_pending.get(abort_stage, 0) == 0):
            os._exit(137)  # simulated kill for crash-safety tests

    def _abort_children(key):
        nonlocal remaining
        stack = list(children[key])
        while stack:
            k = stack.pop()
            if k in statuses:
                continue
            emit(NodeStatus(key=k, stage=dag.nodes[k].stage, status="aborted",
                            error=f"upstream {key[:12]} failed"))
            remaining -= 1
            stage_pending[dag.nodes[k].stage] -= 1
            stack.extend(children[k])

    def drain_cancelled():
        nonlocal remaining
        while ready:
            k = ready.popleft()
            if k in statuses:
                continue
            emit(NodeStatus(key=k, stage=dag.nodes[k].stage, status="aborted",
                            error="cancelled"))
            remaining -= 1
            stage_pending[dag.nodes[k].stage] -= 1
            for child in children[k]:
                indegree[child] -= 1
                if indegree[child] == 0 and child not in statuses:
                    ready.append(child)
        cond.notify_all()

    def worker():
        while True:
            with cond:
                if cancel is not None and cancel.is_set():
                    drain_cancelled()
                while not ready and remaining > 0:
                    cond.wait()
                    if cancel is not None and cancel.is_set():
                        drain_cancelled()
                if remaining <= 0 and not ready:
                    return
                if not ready:
                    continue
                key = ready.popleft()
                if key in statuses:
                    continue
            node = dag.nodes[key]
            if cache.has_verified(key):
                mark_done(key, NodeStatus(key=key, stage=node.stage,
                                          status="hit",
                                          seconds=0.0))
                continue
            build = cache.build_dir(key)
            t0 = time.perf_counter()
            try:
                inputs = {k: cache.payload_dir(k) for k in node.input_keys}
                node.compute(inputs, build / "payload")
                wall = time.perf_counter() - t0
                cache.publish(node, build, wall)
                mark_done(key, NodeStatus(key=key, stage=node.stage,
                                          status="run", seconds=wall))
            except Exception as e:  # noqa: BLE001 - failures are reported
                shutil.rmtree(build, ignore_errors=True)
                log.error("node %s/%s failed: %s", node.stage, key[:12], e)
                mark_done(key, NodeStatus(
                    key=key, stage=node.stage, status="fail",
                    seconds=time.perf_counter() - t0, error=str(e)))

    threads = [threading.Thread(target=worker, daemon=True)
               for _ in range(max(1, parallelism))]
    for t in threads:
        t.start()
    for t in threads:
        t.join()

    report = ExecutionReport(statuses=[statuses[k] for k in sorted(statuses)])
    for run in sorted(dag.run_nodes, key=RunSpec.key_tuple):
        key = dag.run_nodes[run]
        if statuses[key].status in ("hit", "run"):
            report.results.append(_assemble_result(dag, cache, run, key))
    return report


def _assemble_result(dag: Dag, cache: Cache, run: RunSpec, key: str) -> RunResult:
    payload = json.loads((cache.payload_dir(key) / "result.json").read_text())
    lineage = dag.ancestors(key)
    timing: dict = {}
    for entry in lineage + [{"stage": "evaluate", "key": key}]:
        wall = cache.meta(entry["key"])["wall_s"]
        timing[entry["stage"]] = round(timing.get(entry["stage"], 0.0) + wall, 6)
    return RunResult(run=run, metrics=payload["metrics"],
                     confusion=payload["confusion"], timing=timing,
                     lineage=lineage)


# ---------------------------------------------------------------------------
# result store
# ---------------------------------------------------------------------------


def store_results(results, out_dir) -> Path:
    """Write results.jsonl (one canonical RunResult per line, sorted) and a
    flat results.csv projection (one row per run x scalar metric)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ordered = sorted(results, key=lambda r: r.run.key_tuple())

    jsonl = out_dir / "results.jsonl"
    tmp = jsonl.with_suffix(".jsonl.tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        for r in ordered:
            fh.write(canonical_json(r.to_jsonable()) + "\n")
    os.replace(tmp, jsonl)

    csv_path = out_dir / "results.csv"
    tmp = csv_path.with_suffix(".csv.tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write("dataset_id,task_id,feature_id,deformation_id,probe_id,"
                 "seed,aggregation_mode,metric,value\n")
        for r in ordered:
            prefix = ",".join([r.run.dataset_id, r.run.task_id,
                               r.run.feature_id, r.run.deformation_id,
                               r.run.probe_id, str(r.run.seed),
                               r.run.aggregation_mode])
            for name in sorted(r.metrics):
                value = r.metrics[name]
                if isinstance(value, (int, float)) and value is not None:
                    fh.write(f"{prefix},{name},{value!r}\n")
    os.replace(tmp, csv_path)
    return jsonl


def load_results(path) -> list:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(RunResult.from_jsonable(json.loads(line)))
    return out
