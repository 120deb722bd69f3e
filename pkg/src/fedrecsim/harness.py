"""Experiment execution: data generation, training runs, sweeps, diagnostics."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
from pathlib import Path

import numpy as np

from .attacks import make_attack
from .config import ExperimentConfig, parse_config_text
from .data import Corpus, load_corpus, synth_generate, write_behaviors_tsv, write_news_tsv
from .defenses import make_defense
from .fedcore import ConfigError, run_training
from .metrics import evaluate, similarity_drift
from .model import AttnRec, ModelConfig
from .params import load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=False)


def build_corpus(cfg: ExperimentConfig) -> Corpus:
    if cfg.data.source == "synth":
        return synth_generate(cfg.synth, cfg.data.synth_seed)
    with open(cfg.data.news_path, encoding="utf-8") as news, \
            open(cfg.data.behaviors_path, encoding="utf-8") as behaviors:
        return load_corpus(news, behaviors, cfg.data.max_title_len, cfg.data.split, cfg.data.unknown)


def build_model(cfg: ExperimentConfig, corpus: Corpus) -> AttnRec:
    m = cfg.model
    return AttnRec(ModelConfig(
        vocab_size=corpus.vocab_size, embed_dim=m.embed_dim, attn_hidden=m.attn_hidden,
        max_title_len=cfg.data.max_title_len, max_history_len=m.max_history_len,
        negatives=m.negatives, dropout=m.dropout,
    ))


def _input_hash(cfg: ExperimentConfig) -> str:
    h = hashlib.sha256(cfg.to_text().encode("utf-8"))
    if cfg.data.source == "mind":
        for p in (cfg.data.news_path, cfg.data.behaviors_path):
            h.update(Path(p).read_bytes())
    return h.hexdigest()


def cmd_generate_data(cfg: ExperimentConfig, seed: int, out) -> tuple[Path, Path]:
    cfg.synth.validate()
    corpus = synth_generate(cfg.synth, seed)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    news_path, behaviors_path = out / "news.tsv", out / "behaviors.tsv"
    with open(news_path, "w", encoding="utf-8", newline="") as fh:
        write_news_tsv(corpus, fh)
    with open(behaviors_path, "w", encoding="utf-8", newline="") as fh:
        write_behaviors_tsv(corpus, fh)
    return news_path, behaviors_path


def train_one_seed(cfg: ExperimentConfig, corpus: Corpus, seed: int, out_dir: Path | None = None):
    """Run one seeded experiment; returns the :class:`TrainingResult`."""
    model = build_model(cfg, corpus)
    fed = _replace(cfg.fed, seed=seed)
    m = cfg.malicious_count(len(corpus.clients))
    attack = make_attack(_replace(cfg.attack, malicious_count=m)) if m > 0 else None
    d = cfg.defense
    defense = make_defense(d.name, f=d.f, c=d.c, beta=d.beta, rho=d.rho)

    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    def on_checkpoint(r, params):
        save_checkpoint(out_dir / f"checkpoint_{r:05d}.bin", params)

    result = run_training(corpus, model, fed, attack, defense, eval_every=cfg.run.eval_every or None,
                          checkpoint_rounds=cfg.run.checkpoint_rounds if out_dir is not None else (),
                          on_checkpoint=on_checkpoint)
    if not result.evals:
        result.evals.append((fed.rounds, evaluate(result.params, model, corpus)))
    result.meta.update({"seed": seed, "malicious_count": m,
                        "malicious_ratio": m / len(corpus.clients)})

    if out_dir is not None:
        with open(out_dir / "eval.jsonl", "w", encoding="utf-8") as fh:
            for r, rep in result.evals:
                fh.write(_dump(rep.to_json(r)) + "\n")
        with open(out_dir / "rounds.jsonl", "w", encoding="utf-8") as fh:
            for rec in result.records:
                fh.write(_dump(rec.to_json()) + "\n")
        r, final = result.evals[-1]
        (out_dir / "final.json").write_text(_dump({**final.to_json(r), "meta": result.meta}) + "\n")
    return result


def _replace(obj, **changes):
    return dataclasses.replace(obj, **changes)


def summarize(reports) -> dict:
    """Mean and population std across seeds of each final metric."""
    out = {}
    for key in ("auc", "mrr", "ndcg5", "ndcg10"):
        vals = np.array([getattr(r, key) for r in reports])
        out[f"{key}_mean"] = float(vals.mean())
        out[f"{key}_std"] = float(vals.std())
    out["seeds"] = len(reports)
    return out


def cmd_train(cfg: ExperimentConfig, out=None) -> dict:
    corpus = build_corpus(cfg)
    cfg.validate(len(corpus.clients))
    out = Path(out if out is not None else cfg.run.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
    (out / "seeds.json").write_text(_dump(cfg.run.seeds) + "\n")
    (out / "inputs.sha256").write_text(_input_hash(cfg) + "\n")
    finals = []
    for seed in cfg.run.seeds:
        result = train_one_seed(cfg, corpus, seed, out / f"seed_{seed}")
        finals.append(result.final)
    summary = summarize(finals)
    summary["per_seed"] = [dict(seed=s, **rep.as_dict()) for s, rep in zip(cfg.run.seeds, finals)]
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


def cmd_sweep(cfg_text: str, axis: str, values, out) -> list[dict]:
    values = list(values)
    if not values:
        raise ConfigError("sweep needs at least one value")
    out = Path(out)
    rows = []
    for value in values:
        cfg = parse_config_text(cfg_text)
        cfg.set(axis, str(value))
        summary = cmd_train(cfg, out / f"{axis}={value}")
        rows.append({
            "value": value,
            "auc_mean": summary["auc_mean"],
            "auc_std": summary["auc_std"],
            "mrr": summary["mrr_mean"],
            "ndcg5": summary["ndcg5_mean"],
            "ndcg10": summary["ndcg10_mean"],
        })
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "sweep.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    return rows


def cmd_diagnose_similarity(checkpoint_a, checkpoint_b, cfg: ExperimentConfig,
                            n_pairs: int = 10000, seed: int = 0, out=None) -> float:
    params_a = load_checkpoint(checkpoint_a)
    params_b = load_checkpoint(checkpoint_b)
    corpus = build_corpus(cfg)
    model = build_model(cfg, corpus)
    if params_a.layout != model.layout or params_b.layout != model.layout:
        raise ConfigError("checkpoint layout does not match the configured model")
    r = similarity_drift(params_a, params_b, model, corpus, n_pairs, seed)
    if out is not None:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(_dump({
            "checkpoint_a": str(checkpoint_a), "checkpoint_b": str(checkpoint_b),
            "pairs": n_pairs, "seed": seed, "r": r,
        }) + "\n")
    return r
