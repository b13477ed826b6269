"""Run-directory stages shared by the CLI, the scripts and the acceptance suite.

Layout::

    <run>/config.yaml           copy of the run config
    <run>/data/                 world, corpus, tokenizer, training and eval sets
    <run>/checkpoints/          lm, encoder, generator and attack weights
    <run>/reports/              JSON / CSV / JSONL outputs (all carry config hash and seed)
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Sequence

import torch

from . import attack as atk
from . import checkpoint
from . import datagen as dg
from .config import ConfigError, RunConfig, load
from .distill import DistillConfig, train_generator as _train_generator
from .experiment import build_tokenizer, reading_examples, retrieval_examples
from .generator import DocEncoder, EncoderConfig, GeneratorConfig, GeneratorNet, mlm_accuracy, pretrain_encoder
from .lm import LmConfig, LmModel, pretrain_lm
from .mask import MASK_MODES, install_mask
from .pipeline import METHODS, EvalReport, Pipeline, comparison_table, evaluate, qa_from_document
from .retrieval import build_index, max_jaccard_overlap
from .tokenizer import Tokenizer

log = logging.getLogger(__name__)

EVAL_SPLITS = {"in-domain": ("eval-in-domain", False), "ood": ("eval-ood-style", True)}
KINDS = ("single", "cross")
ABLATIONS = ("no-cos", "no-kl", "single-doc-only", "degraded-synthesis")


class MissingPrerequisite(RuntimeError):
    def __init__(self, path: Path, command: str):
        super().__init__(f"missing {path}; produce it with `{command}`")
        self.path, self.command = path, command


def parse_ablations(items: Sequence[str] | None) -> tuple[str, ...]:
    out = []
    for a in items or ():
        if a.startswith("mask-mode="):
            if a.split("=", 1)[1] not in MASK_MODES:
                raise ConfigError(f"unknown mask mode in {a!r}; choose from {MASK_MODES}")
        elif a not in ABLATIONS:
            raise ConfigError(f"unknown ablation {a!r}")
        out.append(a)
    return tuple(sorted(set(out)))


def variant_tag(ablations: Sequence[str], seed: int) -> str:
    return ("+".join(ablations) or "full") + f"_s{seed}"


@dataclass
class RunDir:
    root: Path
    cfg: RunConfig

    @classmethod
    def open(cls, root: str | Path, config: str | Path | None = None, create: bool = False) -> "RunDir":
        root = Path(root)
        stored = root / "config.yaml"
        if config is not None:
            cfg = load(config)
            if stored.exists() and load(stored).hash() != cfg.hash():
                raise ConfigError(f"{root} already holds a different config; use a fresh run dir")
        elif stored.exists():
            cfg = load(stored)
        elif create:
            cfg = RunConfig()
        else:
            raise MissingPrerequisite(stored, f"dprag gen-data --run-dir {root}")
        if create:
            for sub in ("data", "checkpoints", "reports"):
                (root / sub).mkdir(parents=True, exist_ok=True)
            if not stored.exists():
                cfg.dump(stored)
        return cls(root, cfg)

    @property
    def config_hash(self) -> str:
        return self.cfg.hash()

    def path(self, *parts: str) -> Path:
        return self.root.joinpath(*parts)

    def need(self, *parts: str, command: str) -> Path:
        p = self.path(*parts)
        if not p.exists():
            raise MissingPrerequisite(p, f"dprag {command} --run-dir {self.root}")
        return p

    def stamp(self, seed: int, **extra) -> dict:
        return {"config_hash": self.config_hash, "seed": seed, **extra}

    def write_json(self, rel: str, payload: dict) -> Path:
        p = self.path("reports", rel)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(json.dumps(payload, indent=1, sort_keys=True))
        return p

    # ------------------------------------------------------------ loaders

    def world(self) -> dg.FactWorld:
        return dg.world_from_json(json.loads(self.need("data", "world.json", command="gen-data").read_text()))

    def tokenizer(self) -> Tokenizer:
        return Tokenizer.load(self.need("data", "tok.json", command="gen-data"))

    def lm(self) -> LmModel:
        return LmModel.load(self.need("checkpoints", "lm.safetensors", command="pretrain-lm"))

    def encoder(self) -> DocEncoder:
        return DocEncoder.load(self.need("checkpoints", "encoder.safetensors", command="pretrain-encoder"))

    def eval_set(self, split: str, kind: str) -> list[dg.TrainingTriple]:
        return dg.read_jsonl(self.need("data", f"eval_{split}_{kind}.jsonl", command="gen-data"))


# ---------------------------------------------------------------- stages

def gen_data(run: RunDir) -> dict:
    c = run.cfg
    world = dg.gen_world(c.world.seed, c.world.n_entities)
    run.path("data", "world.json").write_text(json.dumps(dg.world_to_json(world)))
    dg.write_corpus(run.path("data", "corpus.jsonl"), world)
    build_tokenizer(world).save(run.path("data", "tok.json"))
    sizes = {}
    variants = {"full": {}, "single-doc-only": {"single_only": True}, "degraded-synthesis": {"degraded": True}}
    for name, kw in variants.items():
        data = dg.build_training_set(world, seed=c.distill.seed, **kw)
        dg.write_jsonl(run.path("data", f"distill_{name}.jsonl"), data)
        sizes[name] = len(data)
    for split, (world_split, ood) in EVAL_SPLITS.items():
        for kind in KINDS:
            es = dg.build_eval_set(world, world_split, kind, c.eval.n_questions, c.eval.seed, ood=ood)
            dg.write_jsonl(run.path("data", f"eval_{split}_{kind}.jsonl"), es)
            sizes[f"eval_{split}_{kind}"] = len(es)
    manifest = run.stamp(c.world.seed, n_entities=len(world.entities), sizes=sizes,
                         splits={s: len(world.by_split(s)) for s in dg.SPLITS})
    run.path("data", "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def pretrain_lm_stage(run: RunDir) -> dict:
    c, r = run.cfg.lm, run.cfg.retrieval
    tok = run.tokenizer()
    t0 = time.perf_counter()
    cfg = LmConfig(len(tok), c.d_model, c.n_layers, c.n_heads, c.d_ff, c.max_len, c.seed)
    common = dict(ctx_weight=c.ctx_weight, max_len=c.max_len, chunk_entities=c.chunk_entities)
    reading = reading_examples(tok, c.read_steps * c.batch_size, c.seed, c.read_qa, **common)
    model, read_losses = pretrain_lm(reading, cfg, c.read_steps, tok.pad_id, tok.mask_id, c.batch_size, c.lr)
    # a different seed so the second phase draws new worlds
    rag = retrieval_examples(tok, c.rag_steps * c.batch_size, c.seed + 1, r.k, k1=r.k1, b=r.b, **common)
    model, rag_losses = pretrain_lm(rag, cfg, c.rag_steps, tok.pad_id, tok.mask_id, c.batch_size, c.lr,
                                    model=model)
    model.save(run.path("checkpoints", "lm.safetensors"), run.stamp(c.seed))

    def tail(xs):
        return sum(xs[-50:]) / len(xs[-50:])

    report = run.stamp(c.seed, steps=c.read_steps + c.rag_steps, first_loss=read_losses[0],
                       read_final_loss=tail(read_losses), final_loss=tail(rag_losses),
                       loss_every_100=(read_losses + rag_losses)[::100], seconds=time.perf_counter() - t0)
    run.write_json("pretrain_lm.json", report)
    return report


def pretrain_encoder_stage(run: RunDir) -> dict:
    c = run.cfg.encoder
    world, tok = run.world(), run.tokenizer()
    t0 = time.perf_counter()
    train_docs = [tok.encode(t) for _, t in dg.corpus(world, ["lm-pretrain", "distill-train"])]
    held = [tok.encode(t) for _, t in dg.corpus(world, ["eval-in-domain"])]
    cfg = EncoderConfig(len(tok), c.d_model, c.n_layers, c.n_heads, c.d_ff, run.cfg.lm.max_len, c.seed)
    enc, losses = pretrain_encoder(train_docs, cfg, c.steps, tok.mask_id, tok.pad_id, tok.special_ids,
                                   c.batch_size, c.lr)
    enc.save(run.path("checkpoints", "encoder.safetensors"))
    acc = mlm_accuracy(enc, held, tok.mask_id, tok.pad_id, tok.special_ids, seed=c.seed)
    report = run.stamp(c.seed, steps=c.steps, final_loss=losses[-1], heldout_mlm_accuracy=acc,
                       chance=1.0 / len(tok), seconds=time.perf_counter() - t0)
    run.write_json("pretrain_encoder.json", report)
    return report


def distill_config(run: RunDir, ablations: Sequence[str], seed: int) -> DistillConfig:
    cfg = replace(run.cfg.distill, seed=seed)
    if "no-cos" in ablations:
        cfg = replace(cfg, lambda_cos=0.0)
    if "no-kl" in ablations:
        cfg = replace(cfg, lambda_kl=0.0)
    for a in ablations:
        if a.startswith("mask-mode="):
            cfg = replace(cfg, mask_mode=a.split("=", 1)[1])
    return cfg


def _dataset_name(ablations: Sequence[str]) -> str:
    if "single-doc-only" in ablations:
        return "single-doc-only"
    if "degraded-synthesis" in ablations:
        return "degraded-synthesis"
    return "full"


def train_generator_stage(run: RunDir, ablations: Sequence[str] = (), seed: int | None = None) -> dict:
    seed = run.cfg.distill.seed if seed is None else seed
    tag = variant_tag(ablations, seed)
    dcfg = distill_config(run, ablations, seed)
    tok, lm, enc = run.tokenizer(), run.lm(), run.encoder()
    data = dg.read_jsonl(run.need("data", f"distill_{_dataset_name(ablations)}.jsonl", command="gen-data"))
    install_mask(lm, dcfg.mask_mode, seed)
    g = run.cfg.generator
    gen = GeneratorNet(GeneratorConfig(lm.cfg.n_layers, lm.cfg.d_model, enc.cfg.d_model, g.rank, g.alpha, g.n_heads,
                                       g.depth, g.d_ff, g.a_init_std, seed, lm.config_hash()))
    t0 = time.perf_counter()
    res = _train_generator(data, lm, enc, gen, tok, dcfg, log_path=run.path("reports", f"train_log_{tag}.jsonl"),
                           record_extra=run.stamp(seed))
    gen.save(run.path("checkpoints", f"generator_{tag}.safetensors"), run.stamp(seed, ablations=list(ablations)))
    checkpoint.save(run.path("checkpoints", f"mask_{tag}.safetensors"), {"mask_vec": lm.mask_vec.detach().clone()},
                    {"mode": dcfg.mask_mode}, run.stamp(seed))
    totals = [r["total"] for r in res.log]
    w = max(1, min(50, len(totals) // 10))
    report = run.stamp(seed, ablations=list(ablations), distill=asdict(dcfg), steps=len(res.log),
                       rejected_steps=res.rejected_steps, initial_total=sum(totals[:w]) / w,
                       final_total=sum(totals[-w:]) / w, seconds=time.perf_counter() - t0)
    run.write_json(f"train_{tag}.json", report)
    return report


def load_generator(run: RunDir, lm: LmModel, ablations: Sequence[str], seed: int) -> GeneratorNet:
    tag = variant_tag(ablations, seed)
    cmd = f"train-generator --seed {seed}" + "".join(f" --ablation {a}" for a in ablations)
    gen = GeneratorNet.load(run.need("checkpoints", f"generator_{tag}.safetensors", command=cmd), lm.config_hash())
    tensors, _, _ = checkpoint.load(run.need("checkpoints", f"mask_{tag}.safetensors", command=cmd))
    with torch.no_grad():
        lm.mask_vec.copy_(tensors["mask_vec"])
    return gen


def pipeline_for(run: RunDir, method: str, ablations: Sequence[str] = (), seed: int | None = None) -> Pipeline:
    seed = run.cfg.distill.seed if seed is None else seed
    tok, lm = run.tokenizer(), run.lm()
    c = run.cfg
    idx = build_index(dg.read_corpus(run.need("data", "corpus.jsonl", command="gen-data")), c.retrieval.k1,
                      c.retrieval.b)
    enc = gen = None
    mode = distill_config(run, ablations, seed).mask_mode
    if method in ("distilled", "dyprag"):
        enc, gen = run.encoder(), load_generator(run, lm, ablations, seed)
    else:
        install_mask(lm, mode, seed)
    return Pipeline(tok, lm, idx, enc, gen, k=c.retrieval.k, max_new_tokens=c.eval.max_new_tokens,
                    prag_steps=c.eval.prag_steps, prag_lr=c.eval.prag_lr, config_hash=run.config_hash,
                    mask_mode=mode)


def eval_stage(run: RunDir, method: str, ablations: Sequence[str] = (), seed: int | None = None,
               split: str = "in-domain", kinds: Sequence[str] = KINDS, limit: int | None = None) -> dict[str, EvalReport]:
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; choose from {METHODS}")
    if split not in EVAL_SPLITS:
        raise ConfigError(f"unknown split {split!r}")
    seed = run.cfg.distill.seed if seed is None else seed
    pipe = pipeline_for(run, method, ablations, seed)
    kwargs = {"qa_for_doc": lambda d, text: qa_from_document(text)} if method == "prag" else {}
    tag = variant_tag(ablations, seed) if method in ("distilled", "dyprag") else "base"
    out = {}
    for kind in kinds:
        es = run.eval_set(split, kind)[:limit]
        rep = evaluate(method, pipe, es, seed, **kwargs)
        rep.extra = {"ablations": list(ablations), "split": split, "kind": kind}
        rep.save(run.path("reports", f"eval_{method}_{tag}_{split}_{kind}.json"))
        log.info("%s %s %s %s: F1 %.1f", method, tag, split, kind, rep.f1)
        out[kind] = rep
    return out


def attack_stage(run: RunDir, seed: int | None = None) -> dict:
    seed = run.cfg.attack.seed if seed is None else seed
    tok, lm, enc = run.tokenizer(), run.lm(), run.encoder()
    gen = load_generator(run, lm, (), run.cfg.distill.seed)
    a = run.cfg.attack
    corpus = dg.read_corpus(run.need("data", "corpus.jsonl", command="gen-data"))
    t0 = time.perf_counter()
    ds = atk.build_attack_set(corpus, gen, enc, tok, seed, a.test_fraction, a.min_test)
    dcfg = replace(a.decoder_config(), seed=seed)
    summary = run.stamp(seed, n_docs=len(ds.docs), n_test=len(ds.test_idx), test_doc_ids=[ds.doc_ids[i] for i in ds.test_idx])
    for name, data in (("trained", ds), ("zero", ds.zeroed())):
        trained = atk.train_reconstructor(data, dcfg, len(tok), tok.eoa_id, tok.pad_id,
                                          run.path("checkpoints", f"attack_{name}"))
        rep = atk.run_attack(data, trained.checkpoints, "test", run.config_hash, seed)
        rep.save(run.path("reports", f"attack_{name}.json"), run.path("reports", f"attack_{name}.csv"))
        train_recall = atk.score_decoder(trained.decoder, data, "train")
        summary[name] = {"best_recall": rep.best_recall, "mean_recall": rep.mean_recall,
                         "final_recall": rep.curve[-1].mean_recall, "epoch_losses": trained.epoch_losses,
                         "train_split_recall": sum(train_recall.values()) / len(train_recall)}
    summary["seconds"] = time.perf_counter() - t0
    run.write_json("attack_summary.json", summary)
    return summary


def overlap_stage(run: RunDir) -> dict:
    world = run.world()
    o = run.cfg.overlap
    train = dg.corpus(world, ["distill-train"])
    out = run.stamp(o.seed)
    for split, (world_split, _) in EVAL_SPLITS.items():
        rep = max_jaccard_overlap(dg.corpus(world, [world_split]), train, o.n_perm, o.lsh_bands, o.seed, split)
        out[split] = rep.to_json()
    run.write_json("overlap.json", out)
    return out


def bench_latency_stage(run: RunDir, n: int = 20, methods: Sequence[str] = METHODS) -> dict:
    seed = run.cfg.distill.seed
    reports = []
    for m in methods:
        pipe = pipeline_for(run, m, (), seed)
        kwargs = {"qa_for_doc": lambda d, text: qa_from_document(text)} if m == "prag" else {}
        reports.append(evaluate(m, pipe, run.eval_set("in-domain", "single")[:n], seed, **kwargs))
    text, csv = comparison_table(reports)
    lines = csv.splitlines()
    lines = [lines[0] + ",config_hash,seed"] + [f"{ln},{run.config_hash},{seed}" for ln in lines[1:]]
    run.path("reports", "latency.csv").write_text("\n".join(lines) + "\n")
    out = run.stamp(seed, n_questions=n, table=text,
                    methods={r.method: {"mean_latency": r.mean_latency, "f1": r.f1} for r in reports})
    run.write_json("latency.json", out)
    return out
