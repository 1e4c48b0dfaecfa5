"""Result-store analysis: preset comparison tables and confusion reports.

Tables are emitted as CSV plus aligned Markdown. The confusion report is a
single self-contained HTML file (inline styling and script, no network, no
external assets) whose cells expand to example tracks with relative links
to the as-evaluated audio and a pre-rendered grayscale log-mel spectrogram.

The primary metric follows the task kind: macro-F1 for multiclass,
macro ROC-AUC for multilabel, mean weighted key score for key detection.
"""

from __future__ import annotations

import html
import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dataio, dsp
from .plan import CLEAN

PRESETS = ("overall", "robustness", "best_probe")

_SPEC_N_MELS = 40
_SPEC_N_FFT = 1024
_SPEC_HOP = 512


class ReportError(ValueError):
    pass


def primary_metric_name(metrics: dict) -> str:
    if "weighted_key_score" in metrics:
        return "weighted_key_score"
    if "macro_roc_auc" in metrics:
        return "macro_roc_auc"
    return "macro_f1"


@dataclass
class Table:
    title: str
    row_label: str
    col_headers: list
    rows: list  # [(row_header, [cell strings])]

    def to_markdown(self) -> str:
        headers = [self.row_label] + self.col_headers
        body = [[name] + cells for name, cells in self.rows]
        widths = [max(len(str(r[i])) for r in [headers] + body)
                  for i in range(len(headers))]
        def fmt(row):
            return "| " + " | ".join(str(c).ljust(w)
                                     for c, w in zip(row, widths)) + " |"
        sep = "|" + "|".join("-" * (w + 2) for w in widths) + "|"
        return "\n".join([f"### {self.title}", "", fmt(headers), sep]
                         + [fmt(r) for r in body]) + "\n"

    def to_csv_lines(self, context_cols) -> list:
        lines = []
        for name, cells in self.rows:
            for col, cell in zip(self.col_headers, cells):
                lines.append(",".join(context_cols + [name, col, f'"{cell}"']))
        return lines


def _fmt_cell(values) -> str:
    values = [v for v in values if v is not None]
    if not values:
        return "n/a"
    mean = float(np.mean(values))
    if len(values) > 1:
        return f"{mean:.3f} ± {float(np.std(values)):.3f}"
    return f"{mean:.3f}"


def _mean(values):
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


class _Grid:
    """results indexed by (dataset, task, feature, deformation, probe)."""

    def __init__(self, results):
        if not results:
            raise ReportError("empty results")
        self.results = results
        self.by_cell: dict = {}
        for r in results:
            cell = (r.run.dataset_id, r.run.task_id, r.run.feature_id,
                    r.run.deformation_id, r.run.probe_id)
            self.by_cell.setdefault(cell, []).append(r)

    def groups(self):
        seen = []
        for r in self.results:
            g = (r.run.dataset_id, r.run.task_id)
            if g not in seen:
                seen.append(g)
        return sorted(seen)

    def axis(self, which: str, dataset=None, task=None):
        vals = []
        for r in self.results:
            if dataset and r.run.dataset_id != dataset:
                continue
            if task and r.run.task_id != task:
                continue
            v = getattr(r.run, which)
            if v not in vals:
                vals.append(v)
        return sorted(vals)

    def metric_values(self, dataset, task, feature, deformation, probe):
        cell = (dataset, task, feature, deformation, probe)
        out = []
        for r in sorted(self.by_cell.get(cell, []), key=lambda r: r.run.seed):
            out.append(r.metrics.get(primary_metric_name(r.metrics)))
        return out


def results_table(results, preset: str) -> list:
    """Build one Table per applicable (dataset, task) group."""
    if preset not in PRESETS:
        raise ReportError(f"unknown preset {preset!r} (valid: {', '.join(PRESETS)})")
    grid = _Grid(results)
    tables = []
    if preset == "best_probe":
        for dataset in grid.axis("dataset_id"):
            tasks = [t for d, t in grid.groups() if d == dataset]
            rows = []
            for feature in grid.axis("feature_id", dataset=dataset):
                cells = []
                for task in tasks:
                    bests = [_mean(grid.metric_values(dataset, task, feature,
                                                      CLEAN, probe))
                             for probe in grid.axis("probe_id", dataset=dataset,
                                                    task=task)]
                    bests = [b for b in bests if b is not None]
                    cells.append(f"{max(bests):.3f}" if bests else "n/a")
                rows.append((feature, cells))
            tables.append(Table(title=f"best_probe: {dataset} (clean)",
                                row_label="feature", col_headers=tasks,
                                rows=rows))
        return tables

    for dataset, task in grid.groups():
        features_axis = grid.axis("feature_id", dataset=dataset, task=task)
        probes_axis = grid.axis("probe_id", dataset=dataset, task=task)
        if preset == "overall":
            rows = []
            for feature in features_axis:
                rows.append((feature, [
                    _fmt_cell(grid.metric_values(dataset, task, feature,
                                                 CLEAN, probe))
                    for probe in probes_axis]))
            tables.append(Table(title=f"overall: {dataset}/{task} (clean)",
                                row_label="feature", col_headers=probes_axis,
                                rows=rows))
        else:  # robustness
            deformations = [d for d in grid.axis("deformation_id",
                                                 dataset=dataset, task=task)
                            if d != CLEAN]
            if not deformations:
                raise ReportError(
                    f"preset 'robustness' needs deformed conditions, none in "
                    f"results for {dataset}/{task}")
            rows = []
            for feature in features_axis:
                clean_by_probe = {
                    p: _mean(grid.metric_values(dataset, task, feature,
                                                CLEAN, p))
                    for p in probes_axis}
                scored = [(v, p) for p, v in clean_by_probe.items()
                          if v is not None]
                if not scored:
                    rows.append((feature, ["n/a"] * len(deformations)))
                    continue
                best_probe = max(scored)[1]
                cells = []
                for cond in deformations:
                    deformed = _mean(grid.metric_values(dataset, task, feature,
                                                        cond, best_probe))
                    if deformed is None:
                        cells.append("n/a")
                    else:
                        cells.append(f"{deformed - clean_by_probe[best_probe]:.3f}")
                rows.append((f"{feature} [{best_probe}]", cells))
            tables.append(Table(
                title=f"robustness: {dataset}/{task} (delta vs clean, "
                      f"best probe)",
                row_label="feature", col_headers=deformations, rows=rows))
    return tables


def write_tables(tables, out_dir, preset: str) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    md_path = out_dir / f"{preset}.md"
    csv_path = out_dir / f"{preset}.csv"
    md_path.write_text("\n".join(t.to_markdown() for t in tables),
                       encoding="utf-8")
    lines = ["table,row,column,cell"]
    for t in tables:
        lines += t.to_csv_lines([f'"{t.title}"'])
    csv_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return {"md": md_path, "csv": csv_path}


# ---------------------------------------------------------------------------
# grayscale PNG writer (8-bit, zlib stored blocks, fully deterministic)
# ---------------------------------------------------------------------------


def write_png_gray(path, img) -> None:
    img = np.ascontiguousarray(img, dtype=np.uint8)
    if img.ndim != 2:
        raise ReportError("expected a 2-D uint8 image")
    height, width = img.shape
    raw = b"".join(b"\x00" + img[r].tobytes() for r in range(height))

    def chunk(tag, body):
        crc = zlib.crc32(tag + body) & 0xFFFFFFFF
        return struct.pack(">I", len(body)) + tag + body + struct.pack(">I", crc)

    ihdr = struct.pack(">IIBBBBB", width, height, 8, 0, 0, 0, 0)
    blob = (b"\x89PNG\r\n\x1a\n"
            + chunk(b"IHDR", ihdr)
            + chunk(b"IDAT", zlib.compress(raw, 0))  # stored deflate blocks
            + chunk(b"IEND", b""))
    Path(path).write_bytes(blob)


def render_spectrogram_png(signal: dataio.Signal, out_path) -> tuple:
    """Log-mel spectrogram image: rows = 40 mel bands (low at the bottom),
    columns = frames; per-image min-max normalization to [0, 255]."""
    spec = dsp.stft(signal.samples, _SPEC_N_FFT, _SPEC_HOP, sr=signal.sr)
    fb = dsp.mel_filterbank(_SPEC_N_MELS, _SPEC_N_FFT, signal.sr)
    logmel = np.log(spec.magnitudes ** 2 @ fb.T + 1e-10)  # [frames, mels]
    img = logmel.T[::-1]  # [mels, frames], first row = highest band
    lo, hi = float(img.min()), float(img.max())
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    u8 = np.round((img - lo) * scale).astype(np.uint8)
    write_png_gray(out_path, u8)
    return u8.shape


# ---------------------------------------------------------------------------
# confusion report
# ---------------------------------------------------------------------------


def audio_paths_for_result(result, dataset: dataio.Dataset, cache) -> dict:
    """Locate the as-evaluated audio per track: dataset files for the clean
    condition, deform-node payloads otherwise."""
    if result.run.deformation_id == CLEAN:
        return {t.track_id: t.audio_path for t in dataset.tracks}
    out = {}
    for entry in result.lineage:
        if entry["stage"] != "deform":
            continue
        meta = cache.meta(entry["key"])
        if meta["params"]["deformation"]["id"] != result.run.deformation_id:
            continue
        wav = cache.payload_dir(entry["key"]) / "audio.wav"
        if wav.exists():
            out[meta["params"]["track_id"]] = wav
    return out


_PAGE = """<!DOCTYPE html>
<html lang="en">
<head>
<meta charset="utf-8">
<title>{title}</title>
<style>
body {{ font-family: sans-serif; margin: 1.5em; }}
table.cm {{ border-collapse: collapse; }}
table.cm td, table.cm th {{ border: 1px solid #999; padding: 0.35em 0.6em;
  text-align: center; }}
table.cm td.nonzero {{ background: #f2d7d5; cursor: pointer; }}
table.cm td.diag {{ background: #d5f2d7; }}
div.cell-detail {{ display: none; border: 1px solid #bbb; margin: 0.8em 0;
  padding: 0.6em; }}
div.cell-detail.open {{ display: block; }}
img.spec {{ image-rendering: pixelated; height: 80px; border: 1px solid #ccc; }}
footer {{ margin-top: 2em; color: #884400; }}
</style>
</head>
<body>
<h1>{title}</h1>
<p>{subtitle}</p>
{table}
{details}
<footer>{warnings}</footer>
<script>
document.querySelectorAll("td[data-cell]").forEach(function (td) {{
  td.addEventListener("click", function () {{
    var el = document.getElementById("cell-" + td.dataset.cell);
    if (el) {{ el.classList.toggle("open"); }}
  }});
}});
</script>
</body>
</html>
"""


def confusion_report(result, dataset: dataio.Dataset, out_dir,
                     audio_of=None) -> Path:
    """Write report/<task>/<feature>/confusion[.<cond>].html plus the
    spectrogram PNGs and audio copies its cells link to.

    audio_of maps track_id -> source path of the as-evaluated audio; tracks
    without audio degrade to text-only entries listed in the page footer.
    """
    if result.confusion is None:
        raise ReportError(
            f"run {result.run.key_tuple()} has no confusion data "
            f"(multilabel tasks produce none)")
    run = result.run
    out_dir = Path(out_dir)
    suffix = "" if run.deformation_id == CLEAN else f".{run.deformation_id}"
    page_dir = out_dir / run.task_id / run.feature_id
    spec_dir = out_dir / "spectrograms"
    audio_dir = out_dir / "audio"
    for d in (page_dir, spec_dir, audio_dir):
        d.mkdir(parents=True, exist_ok=True)

    labels = result.confusion["labels"]
    counts = result.confusion["counts"]
    examples = {tuple(int(x) for x in k.split(",")): v
                for k, v in result.confusion["examples"].items()}
    warnings = []

    # render assets for every example track, deterministically ordered
    needed = sorted({tid for ids in examples.values() for tid in ids})
    asset = {}
    for tid in needed:
        src = (audio_of or {}).get(tid) if not callable(audio_of) \
            else audio_of(tid)
        if src is None or not Path(src).exists():
            warnings.append(f"missing audio for {tid}")
            asset[tid] = None
            continue
        sig = dataio.read_wav(src)
        wav_rel = f"{tid}{suffix}.wav"
        png_rel = f"{tid}{suffix}.png"
        dataio.write_wav(audio_dir / wav_rel, sig, encoding="pcm16")
        render_spectrogram_png(sig, spec_dir / png_rel)
        asset[tid] = (f"../../audio/{wav_rel}", f"../../spectrograms/{png_rel}")

    head = "<tr><th>ref \\ pred</th>" + "".join(
        f"<th>{html.escape(str(l))}</th>" for l in labels) + "</tr>"
    body_rows = []
    details = []
    for r, row in enumerate(counts):
        cells = [f"<th>{html.escape(str(labels[r]))}</th>"]
        for c, count in enumerate(row):
            classes = []
            if r == c:
                classes.append("diag")
            attrs = ""
            if count and (r, c) in examples:
                classes.append("nonzero" if r != c else "diag")
                attrs = f' data-cell="{r}-{c}"'
                items = []
                for tid in examples[(r, c)]:
                    if asset.get(tid):
                        wav, png = asset[tid]
                        items.append(
                            f'<li>{html.escape(tid)} '
                            f'<a href="{wav}">audio</a> '
                            f'<a href="{png}"><img class="spec" src="{png}" '
                            f'alt="spectrogram of {html.escape(tid)}"></a></li>')
                    else:
                        items.append(f"<li>{html.escape(tid)} (no audio)</li>")
                details.append(
                    f'<div class="cell-detail" id="cell-{r}-{c}">'
                    f"<h3>ref {html.escape(str(labels[r]))} → "
                    f"pred {html.escape(str(labels[c]))} ({count})</h3>"
                    f"<ul>{''.join(items)}</ul></div>")
            cls = f' class="{" ".join(classes)}"' if classes else ""
            cells.append(f"<td{cls}{attrs}>{count}</td>")
        body_rows.append("<tr>" + "".join(cells) + "</tr>")

    table = f'<table class="cm">{head}{"".join(body_rows)}</table>'
    subtitle = (f"dataset {run.dataset_id} · task {run.task_id} · "
                f"feature {run.feature_id} · condition "
                f"{run.deformation_id} · probe {run.probe_id} · "
                f"seed {run.seed} · click a highlighted cell for examples")
    page = _PAGE.format(
        title=f"confusion: {run.task_id}/{run.feature_id}{suffix}",
        subtitle=html.escape(subtitle), table=table,
        details="".join(details),
        warnings="<br>".join(html.escape(w) for w in sorted(warnings)))
    out_path = page_dir / f"confusion{suffix}.html"
    out_path.write_text(page, encoding="utf-8")
    return out_path
