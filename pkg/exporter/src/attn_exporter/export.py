"""Last-layer [CLS] attention export.

Feeds a passage file through a pre-trained encoder and writes one JSONL
record per passage:

    {"id": ..., "tokens": [...], "cls_attention": [...]}

``tokens`` are the encoder's own pieces (wordpiece "##" continuations and
all); downstream consumers aggregate piece-level mass to word level.
``cls_attention`` is the last attention layer's [CLS] row averaged over
heads, with special tokens ([CLS], [SEP], padding) dropped and the rest
renormalized to sum to 1. Renormalization after dropping specials is a
deliberate choice: the raw row assigns substantial mass to [CLS] and [SEP]
themselves, and consumers expect a distribution over content positions.
"""

from __future__ import annotations

import json
import sys
from dataclasses import dataclass
from pathlib import Path

import torch
from transformers import AutoModel, AutoTokenizer


@dataclass(frozen=True)
class ExportJob:
    """One export run: which model, which passages, where to write."""

    model_id: str
    input_path: Path
    output_path: Path
    batch_size: int = 16
    max_length: int = 128


@dataclass(frozen=True)
class ExportReport:
    n_records: int
    n_skipped: int


def _warn(message: str) -> None:
    print(f"export-attn: warning: {message}", file=sys.stderr)


def read_passages(path: str | Path) -> tuple[list[tuple[str, str]], int]:
    """Parse (id, text) pairs from passage JSONL.

    Malformed lines (bad JSON, missing/empty fields) are skipped with a
    warning; the skip count is returned alongside the good pairs.
    """
    passages: list[tuple[str, str]] = []
    skipped = 0
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError:
                _warn(f"line {lineno}: not valid JSON, skipping")
                skipped += 1
                continue
            if not isinstance(obj, dict) or "id" not in obj or "text" not in obj:
                _warn(f"line {lineno}: expected object with 'id' and 'text', skipping")
                skipped += 1
                continue
            pid, text = obj["id"], obj["text"]
            if not isinstance(pid, (str, int)) or not isinstance(text, str) or not text.strip():
                _warn(f"line {lineno}: empty or non-string fields, skipping")
                skipped += 1
                continue
            passages.append((str(pid), text))
    return passages, skipped


def load_encoder(model_id: str):
    """Load tokenizer and encoder in inference mode with attention outputs."""
    tokenizer = AutoTokenizer.from_pretrained(model_id)
    # eager attention keeps per-head weights available on every backend
    model = AutoModel.from_pretrained(model_id, attn_implementation="eager")
    model.eval()
    return tokenizer, model


def export_attention(job: ExportJob, encoder=None) -> ExportReport:
    """Write one attention record per readable passage, in input order."""
    passages, skipped = read_passages(job.input_path)
    tokenizer, model = encoder if encoder is not None else load_encoder(job.model_id)

    records: list[dict] = []
    with torch.no_grad():
        for start in range(0, len(passages), job.batch_size):
            batch = passages[start : start + job.batch_size]
            enc = tokenizer(
                [text for _, text in batch],
                padding=True,
                truncation=True,
                max_length=job.max_length,
                return_tensors="pt",
                return_special_tokens_mask=True,
            )
            special = enc.pop("special_tokens_mask")
            out = model(**enc, output_attentions=True)
            # (batch, heads, seq, seq) -> [CLS] query row, head average
            cls_row = out.attentions[-1][:, :, 0, :].mean(dim=1)
            for i, (pid, _) in enumerate(batch):
                keep = (special[i] == 0) & (enc["attention_mask"][i] == 1)
                if not bool(keep.any()):
                    _warn(f"passage {pid!r}: no content tokens after tokenization, skipping")
                    skipped += 1
                    continue
                ids = enc["input_ids"][i][keep]
                weights = cls_row[i][keep].double()
                weights = weights / weights.sum()
                records.append(
                    {
                        "id": pid,
                        "tokens": tokenizer.convert_ids_to_tokens(ids.tolist()),
                        "cls_attention": [float(w) for w in weights],
                    }
                )

    out_path = Path(job.output_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec) + "\n")
    return ExportReport(n_records=len(records), n_skipped=skipped)
