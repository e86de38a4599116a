"""Experiment orchestration: config parsing, stage DAG, artifacts and reports.

A run directory holds one subdirectory per stage. Every stage reads only
from the directories of its declared upstream stages (through
StageContext.input, which records a content hash of each file read) and
finishes by writing DONE.json with the hashes of its inputs and outputs.
"""

import configparser
import hashlib
import json
import logging
import os
import re
import shutil
import time
from dataclasses import dataclass

import numpy as np

from . import features as feat
from .audio import augment, read_manifest, read_wav, resample
from .decoder import build_graph, decode, nnet_loglik, pdf_log_priors, score_corpus, write_hypotheses, \
    read_hypotheses, write_score_report
from .gmm import (AcousticModelGmm, MonophoneConfig, estimate_lda, read_alignments, train_monophone,
                  write_alignments, fit_gmm_em)
from .ivector import accumulate_stats, read_ivectors, train_total_variability, write_ivectors
from .lexlm import Lexicon, segment_corpus, train_ngram
from .nnet import Network, TrainConfig, TrainLog, build_network, log_posteriors, tdnn_lstm_specs, train_sgd
from .synthetic import make_language_pair, synthesize_corpus
from .transfer import TransferConfig, build_transfer_grid, transfer_weights

log = logging.getLogger(__name__)


class PipelineError(Exception):
    exit_code = 5


class ConfigError(PipelineError):
    exit_code = 3


class MissingArtifactError(PipelineError):
    exit_code = 4

    def __init__(self, stage, path=None):
        self.stage = stage
        self.path = path
        what = " (%s)" % path if path else ""
        super().__init__("missing artifact from stage '%s'%s; run `%s` first" % (stage, what, stage))


# ---- configuration ----------------------------------------------------------------

def _ints(s):
    return [int(v) for v in s.replace(",", " ").split()]


def _floats(s):
    return [float(v) for v in s.replace(",", " ").split()]


def _bool(s):
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected a boolean, got %r" % s)


def _choice(*options):
    def parse(s):
        v = s.strip()
        if v not in options:
            raise ValueError("expected one of %s, got %r" % ("/".join(options), v))
        return v
    return parse


# section -> key -> (parser, default string)
SCHEMA = {
    "experiment": {
        "seed": (int, "0"),
        "out_dir": (str, "runs/default"),
    },
    "corpus": {
        "source": (_choice("synthetic", "manifest"), "synthetic"),
        "shared_fraction": (float, "0.6"),
        "parent_phones": (int, "20"),
        "child_phones": (int, "14"),
        "parent_words": (int, "200"),
        "child_words": (int, "50"),
        "parent_utts": (int, "2000"),
        "child_utts": (int, "200"),
        "child_dev_utts": (int, "100"),
        "valid_fraction": (float, "0.1"),
        "parent_dir": (str, ""),
        "child_dir": (str, ""),
        "child_dev_dir": (str, ""),
    },
    "features": {
        "augment": (_bool, "false"),
        "sample_rate": (int, "8000"),
    },
    "gmm": {
        "passes": (int, "10"),
        "max_gauss": (int, "300"),
        "splice": (int, "3"),
        "lda_dim": (int, "40"),
    },
    "ivector": {
        "dim": (int, "10"),
        "ubm_components": (int, "16"),
        "iters": (int, "5"),
        "source": (_choice("child", "parent"), "child"),
    },
    "nnet": {
        "tdnn_dim": (int, "64"),
        "cell_dim": (int, "32"),
        "parent_epochs": (int, "4"),
        "epochs": (int, "4"),
        "lr_initial": (float, "0.001"),
        "lr_final": (float, "0.0001"),
        "minibatch": (int, "128"),
        "parent_minibatch": (int, "128"),
        "minibatches_per_iter": (int, "1"),
        "frames_per_example": (_ints, "150,110,90"),
        "dropout_peak": (float, "0.3"),
        "dropout_start": (float, "0.5"),
        "max_change": (float, "0.75"),
        "max_change_output": (float, "1.5"),
        "diagnostic_utts": (int, "50"),
    },
    "transfer": {
        "k": (_ints, "2,4,6"),
        "lr_multiplier": (_floats, "0,0.25,1.0"),
        "baseline": (_bool, "true"),
    },
    "decoder": {
        "beam": (float, "16"),
        "acoustic_scale": (float, "0.1"),
        "lm_scale": (float, "1.0"),
        "sil_prob": (float, "0.5"),
        "lm_order": (int, "3"),
        "smoothing": (_choice("kneser_ney", "good_turing"), "kneser_ney"),
        "nbest": (int, "10"),
    },
}


@dataclass
class ExperimentConfig:
    values: dict                      # section -> key -> parsed value
    base_dir: str = "."
    source_path: str = ""

    def __getitem__(self, dotted):
        sec, key = dotted.split(".", 1)
        return self.values[sec][key]

    @property
    def seed(self):
        return self["experiment.seed"]

    @property
    def out_dir(self):
        p = self["experiment.out_dir"]
        return p if os.path.isabs(p) else os.path.normpath(os.path.join(self.base_dir, p))

    def resolve(self, p):
        return p if os.path.isabs(p) else os.path.normpath(os.path.join(self.base_dir, p))

    def canonical(self):
        """Deterministic text form used for hashing (out_dir excluded)."""
        v = {s: {k: val for k, val in kv.items() if (s, k) != ("experiment", "out_dir")}
             for s, kv in self.values.items()}
        return json.dumps(v, sort_keys=True)

    def train_config(self, epochs, seed, minibatch=None):
        n = self.values["nnet"]
        return TrainConfig(epochs=epochs, lr_initial=n["lr_initial"], lr_final=n["lr_final"],
                           minibatch=minibatch or n["minibatch"], frames_per_example=tuple(n["frames_per_example"]),
                           dropout_peak=n["dropout_peak"], dropout_start=n["dropout_start"],
                           minibatches_per_iter=n["minibatches_per_iter"], max_change=n["max_change"],
                           max_change_output=n["max_change_output"],
                           diagnostic_utts=n["diagnostic_utts"], seed=seed)


def _key_line(lines, section, key):
    cur = None
    for i, line in enumerate(lines, 1):
        s = line.strip()
        if s.startswith("[") and s.endswith("]"):
            cur = s[1:-1].strip()
        elif cur == section and "=" in s and s.split("=", 1)[0].strip().lower() == key:
            return i
    return 0


def load_config(path, overrides=()):
    """Parse an INI experiment config; overrides are 'section.key=value' strings."""
    if not os.path.exists(path):
        raise ConfigError("%s: config file not found" % path)
    with open(path, encoding="utf-8") as f:
        text = f.read()
    lines = text.splitlines()
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text, source=path)
    except configparser.MissingSectionHeaderError as e:
        raise ConfigError("%s:%d: key outside any [section]" % (path, e.lineno)) from None
    except (configparser.DuplicateOptionError, configparser.DuplicateSectionError) as e:
        raise ConfigError("%s:%d: %s" % (path, e.lineno, e.message.split(":", 1)[-1].strip())) from None
    except configparser.ParsingError as e:
        lineno = e.errors[0][0] if e.errors else 0
        raise ConfigError("%s:%d: cannot parse line %r" % (path, lineno, e.errors[0][1].strip()
                                                              if e.errors else "")) from None

    raw = {s: {k: v for k, (_, v) in keys.items()} for s, keys in SCHEMA.items()}
    where = {}
    for sec in cp.sections():
        if sec not in SCHEMA:
            raise ConfigError("%s:%d: unknown section [%s]" % (path, _section_line(lines, sec), sec))
        for key, val in cp.items(sec):
            line = _key_line(lines, sec, key)
            if key not in SCHEMA[sec]:
                raise ConfigError("%s:%d: unknown key '%s' in [%s]" % (path, line, key, sec))
            raw[sec][key] = val
            where[(sec, key)] = "%s:%d" % (path, line)
    for ov in overrides:
        if "=" not in ov or "." not in ov.split("=", 1)[0]:
            raise ConfigError("--set expects section.key=value, got %r" % ov)
        dotted, val = ov.split("=", 1)
        sec, key = dotted.strip().split(".", 1)
        if sec not in SCHEMA or key not in SCHEMA[sec]:
            raise ConfigError("--set: unknown key %r" % dotted)
        raw[sec][key] = val.strip()
        where[(sec, key)] = "--set %s" % dotted

    values = {}
    for sec, keys in SCHEMA.items():
        values[sec] = {}
        for key, (parse, _) in keys.items():
            try:
                values[sec][key] = parse(raw[sec][key])
            except ValueError as e:
                loc = where.get((sec, key), "%s (default)" % path)
                raise ConfigError("%s: bad value for %s.%s: %s" % (loc, sec, key, e)) from None
    cfg = ExperimentConfig(values, os.path.dirname(os.path.abspath(path)), path)
    _validate(cfg, where, path)
    return cfg


def _section_line(lines, sec):
    for i, line in enumerate(lines, 1):
        if line.strip() == "[%s]" % sec:
            return i
    return 0


def _validate(cfg, where, path):
    def bad(dotted, msg):
        sec, key = dotted.split(".")
        raise ConfigError("%s: %s %s" % (where.get((sec, key), path), dotted, msg))

    if not 0 <= cfg["corpus.shared_fraction"] <= 1:
        bad("corpus.shared_fraction", "must lie in [0, 1]")
    if not 0 < cfg["corpus.valid_fraction"] < 1:
        bad("corpus.valid_fraction", "must lie in (0, 1)")
    for k in ("parent_utts", "child_utts", "child_dev_utts"):
        if cfg["corpus." + k] < 1:
            bad("corpus." + k, "must be >= 1")
    if not cfg["transfer.k"]:
        bad("transfer.k", "grid must be nonempty")
    if not cfg["transfer.lr_multiplier"]:
        bad("transfer.lr_multiplier", "grid must be nonempty")
    if any(x < 0 for x in cfg["transfer.lr_multiplier"]):
        bad("transfer.lr_multiplier", "must be >= 0")
    if any(k < 0 or k > 10 for k in cfg["transfer.k"]):
        bad("transfer.k", "must lie in [0, 10] for the 11-layer network")
    if not 0 <= cfg["decoder.sil_prob"] < 1:
        bad("decoder.sil_prob", "must lie in [0, 1)")
    if cfg["decoder.lm_order"] < 2:
        bad("decoder.lm_order", "must be >= 2")
    if cfg["features.sample_rate"] < 8000:
        bad("features.sample_rate", "must be >= 8000 (the filterbank reaches 4 kHz)")
    if cfg["corpus.source"] == "manifest":
        for k in ("parent_dir", "child_dir", "child_dev_dir"):
            d = cfg["corpus." + k]
            if not d or not os.path.isdir(cfg.resolve(d)):
                bad("corpus." + k, "must name an existing corpus directory")
    try:
        cfg.train_config(1, 0)
    except ValueError as e:
        raise ConfigError("%s: [nnet] %s" % (path, e)) from None


def subseed(root, stage, name):
    """Named sub-seed `root/stage/name` as a 31-bit integer."""
    h = hashlib.sha256(("%d/%s/%s" % (root, stage, name)).encode("utf-8")).digest()
    return int.from_bytes(h[:4], "little") & 0x7FFFFFFF


# ---- stage context ---------------------------------------------------------------

STAGES = ["gen-corpus", "prep", "train-gmm", "train-ivector", "train-parent",
          "transfer-train", "decode", "score", "report"]

UPSTREAM = {
    "gen-corpus": [],
    "prep": ["gen-corpus"],
    "train-gmm": ["gen-corpus", "prep"],
    "train-ivector": ["prep"],
    "train-parent": ["prep", "train-gmm", "train-ivector"],
    "transfer-train": ["prep", "train-gmm", "train-ivector", "train-parent"],
    "decode": ["gen-corpus", "prep", "train-gmm", "train-ivector", "train-parent", "transfer-train"],
    "score": ["prep", "decode"],
    "report": ["transfer-train", "score"],
}

MARKER = "DONE.json"
SETS = ("parent", "child", "child_dev")


def file_hash(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


class StageContext:
    def __init__(self, cfg, stage):
        self.cfg = cfg
        self.stage = stage
        self.root = cfg.out_dir
        self.dir = os.path.join(self.root, stage)
        self.inputs = {}
        self.external = {}
        self.upstream = {}
        for up in UPSTREAM[stage]:
            mp = os.path.join(self.root, up, MARKER)
            if not os.path.exists(mp):
                raise MissingArtifactError(up)
            with open(mp, encoding="utf-8") as f:
                self.upstream[up] = json.load(f)

    def input(self, stage, rel):
        if stage not in UPSTREAM[self.stage]:
            raise PipelineError("stage %s does not declare %s as an input" % (self.stage, stage))
        rel = rel.replace(os.sep, "/")
        path = os.path.join(self.root, stage, rel)
        if rel not in self.upstream[stage]["outputs"] or not os.path.exists(path):
            raise MissingArtifactError(stage, rel)
        key = "%s/%s" % (stage, rel)
        if key not in self.inputs:
            digest = file_hash(path)
            if digest != self.upstream[stage]["outputs"][rel]:
                raise MissingArtifactError(stage, rel + " changed since the stage completed")
            self.inputs[key] = digest
        return path

    def upstream_outputs(self, stage, prefix=""):
        return sorted(r for r in self.upstream[stage]["outputs"] if r.startswith(prefix))

    def external_input(self, path):
        if not os.path.exists(path):
            raise PipelineError("external input %s does not exist" % path)
        self.external.setdefault(os.path.abspath(path), file_hash(path))
        return path

    def output(self, rel):
        path = os.path.join(self.dir, rel)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        return path

    def begin(self):
        if os.path.isdir(self.dir):
            shutil.rmtree(self.dir)
        os.makedirs(self.dir)

    def finish(self):
        outputs = {}
        for base, _, files in os.walk(self.dir):
            for fn in files:
                p = os.path.join(base, fn)
                rel = os.path.relpath(p, self.dir).replace(os.sep, "/")
                if rel != MARKER:
                    outputs[rel] = file_hash(p)
        marker = {"stage": self.stage,
                  "config_sha256": hashlib.sha256(self.cfg.canonical().encode()).hexdigest(),
                  "inputs": dict(sorted(self.inputs.items())),
                  "external_inputs": dict(sorted(self.external.items())),
                  "outputs": dict(sorted(outputs.items()))}
        with open(os.path.join(self.dir, MARKER), "w", encoding="utf-8") as f:
            json.dump(marker, f, indent=1, sort_keys=True)
        return marker


# ---- shared helpers ----------------------------------------------------------------

def _write_text(path, texts):
    with open(path, "w", encoding="utf-8") as f:
        for utt in sorted(texts):
            f.write(" ".join([utt] + list(texts[utt])) + "\n")


def read_text(path):
    out = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            parts = line.split()
            if parts:
                out[parts[0]] = parts[1:]
    return out


def _lexicon(ctx, name):
    lang = "child" if name == "child_dev" else name
    return Lexicon.read(ctx.input("gen-corpus", "%s/words.txt" % lang),
                        ctx.input("gen-corpus", "%s/syllables.txt" % lang))


def _split_valid(utts, fraction, seed):
    utts = sorted(utts)
    n_valid = max(1, int(round(fraction * len(utts))))
    perm = np.random.default_rng(seed).permutation(len(utts))
    valid = sorted(utts[i] for i in perm[:n_valid])
    return [u for u in utts if u not in set(valid)], valid


def _save_arrays(path, **arrays):
    with open(path, "wb") as f:
        np.savez(f, **arrays)


def _load_arrays(path):
    with np.load(path) as z:
        return {k: z[k] for k in z.files}


# ---- stages -------------------------------------------------------------------------

def stage_gen_corpus(ctx):
    cfg = ctx.cfg
    if cfg["corpus.source"] == "synthetic":
        parent, child = make_language_pair(
            cfg["corpus.shared_fraction"], seed=subseed(cfg.seed, "gen-corpus", "languages"),
            parent_phones=cfg["corpus.parent_phones"], child_phones=cfg["corpus.child_phones"],
            parent_words=cfg["corpus.parent_words"], child_words=cfg["corpus.child_words"])
        for name, spec, n in (("parent", parent, cfg["corpus.parent_utts"]),
                              ("child", child, cfg["corpus.child_utts"]),
                              ("child_dev", child, cfg["corpus.child_dev_utts"])):
            log.info("synthesizing %d %s utterances", n, name)
            synthesize_corpus(spec, n, seed=subseed(cfg.seed, "gen-corpus", name),
                              prefix=name.replace("_", ""), out_dir=ctx.output(name))
        return
    for name in SETS:
        src = cfg.resolve(cfg["corpus.%s_dir" % name])
        rows = read_manifest(ctx.external_input(os.path.join(src, "manifest.tsv")))
        with open(ctx.output("%s/manifest.tsv" % name), "w", encoding="utf-8") as f:
            for utt, wav, spk, text in rows:
                ctx.external_input(wav)
                f.write("%s\t%s\t%s\t%s\n" % (utt, os.path.abspath(wav), spk, text))
        for fn in ("words.txt", "syllables.txt"):
            lex_src = os.path.join(src, fn)
            if os.path.exists(lex_src):
                shutil.copyfile(ctx.external_input(lex_src), ctx.output("%s/%s" % (name, fn)))
            elif name != "child_dev":
                raise PipelineError("%s: lexicon file %s missing" % (src, fn))


def _featurize(buf):
    m13 = feat.compute_mfcc(buf)
    p4 = feat.compute_pitch(buf, 4)
    gmm = m13.with_values(np.concatenate([m13.values, p4.values[:, :3]], axis=1))
    hi = feat.apply_cmn(feat.compute_mfcc(buf, feat.MfccConfig(hires=True)))
    return gmm, hi.with_values(np.concatenate([hi.values, p4.values], axis=1))


def stage_prep(ctx):
    cfg = ctx.cfg
    for name in SETS:
        rows = read_manifest(ctx.input("gen-corpus", "%s/manifest.tsv" % name))
        lex = _lexicon(ctx, name)
        gmm_arc, hi_arc, raw_text = {}, {}, {}
        aug = cfg["features.augment"] and name != "child_dev"
        for utt, wav, spk, text in rows:
            inside = os.path.abspath(wav).startswith(os.path.abspath(ctx.root) + os.sep)
            if inside:
                rel = os.path.relpath(wav, os.path.join(ctx.root, "gen-corpus"))
                buf = read_wav(ctx.input("gen-corpus", rel))
            else:
                buf = read_wav(ctx.external_input(wav))
            if buf.sample_rate != cfg["features.sample_rate"]:
                buf = resample(buf, cfg["features.sample_rate"])
            raw_text[utt] = text.replace(" ", "")
            gmm_arc[utt], hi_arc[utt] = _featurize(buf)
            if aug:
                rng = np.random.default_rng(subseed(cfg.seed, "prep", utt))
                for factor, pert in augment(buf, rng):
                    if factor == 1.0:
                        continue
                    key = "sp%g-%s" % (factor, utt)
                    raw_text[key] = raw_text[utt]
                    gmm_arc[key], hi_arc[key] = _featurize(pert)
        unigram_iters = 2
        seg = segment_corpus([raw_text[u] for u in sorted(raw_text)], lex, iterations=unigram_iters)
        texts = dict(zip(sorted(raw_text), seg))
        feat.write_archive(ctx.output("%s/gmm.fea" % name), sorted(gmm_arc.items()))
        feat.write_archive(ctx.output("%s/hires.fea" % name), sorted(hi_arc.items()))
        _write_text(ctx.output("%s/text" % name), texts)
        log.info("prep %s: %d utterances", name, len(texts))


def stage_train_gmm(ctx):
    cfg = ctx.cfg
    mono = MonophoneConfig(num_passes=cfg["gmm.passes"], max_gauss=cfg["gmm.max_gauss"])
    ctx_frames = cfg["gmm.splice"]
    for name in ("parent", "child"):
        lex = _lexicon(ctx, name)
        feats = feat.read_archive(ctx.input("prep", "%s/gmm.fea" % name))
        texts = read_text(ctx.input("prep", "%s/text" % name))
        seqs = {u: lex.utterance_phones(texts[u]) for u in texts}
        log.info("train-gmm %s: monophone pass", name)
        am, ali, h1, skipped = train_monophone(feats, seqs, lex.phones, mono)
        log.info("train-gmm %s: delta pass", name)
        dfeats = {u: feat.append_deltas(fm) for u, fm in feats.items()}
        am, ali, h2, _ = train_monophone(dfeats, seqs, lex.phones, mono, init_alignments=ali)
        log.info("train-gmm %s: spliced LDA pass", name)
        spliced = {u: feat.splice_frames(fm, ctx_frames, ctx_frames) for u, fm in feats.items()}
        used = sorted(ali)
        lda_dim = min(cfg["gmm.lda_dim"], spliced[used[0]].dims)
        lda = estimate_lda([spliced[u] for u in used], [ali[u].pdfs for u in used], lda_dim)
        lfeats = {u: fm.with_values(fm.values @ lda.T) for u, fm in spliced.items()}
        am, ali, h3, _ = train_monophone(lfeats, seqs, lex.phones, mono, init_alignments=ali)
        am.save(ctx.output("%s/final.amg" % name))
        write_alignments(ctx.output("%s/ali.txt" % name), [ali[u] for u in sorted(ali)])
        _save_arrays(ctx.output("%s/lda.npz" % name), lda=lda)
        with open(ctx.output("%s/history.csv" % name), "w", encoding="utf-8") as f:
            f.write("stage,pass,logprob\n")
            for st, h in (("mono", h1), ("delta", h2), ("lda", h3)):
                for i, v in enumerate(h):
                    f.write("%s,%d,%.6f\n" % (st, i, v))
        with open(ctx.output("%s/skipped.txt" % name), "w", encoding="utf-8") as f:
            f.write("".join(u + "\n" for u in skipped))


IVEC_FEATS = 39  # the MFCC block of the hires features


def stage_train_ivector(ctx):
    cfg = ctx.cfg
    D = cfg["ivector.dim"]
    hires = {name: feat.read_archive(ctx.input("prep", "%s/hires.fea" % name)) for name in SETS}
    for src in ("parent", "child"):
        utts = sorted(hires[src])
        frames = np.vstack([hires[src][u].values[:, :IVEC_FEATS] for u in utts])
        rng = np.random.default_rng(subseed(cfg.seed, "train-ivector", src + "/ubm-subset"))
        if len(frames) > 40000:
            frames = frames[np.sort(rng.choice(len(frames), 40000, replace=False))]
        ubm = fit_gmm_em(frames, cfg["ivector.ubm_components"], iters=10,
                         seed=subseed(cfg.seed, "train-ivector", src + "/ubm"))
        stats = [accumulate_stats(ubm, hires[src][u].values[:, :IVEC_FEATS]) for u in utts]
        ex, hist = train_total_variability(stats, ubm, D, cfg["ivector.iters"],
                                           seed=subseed(cfg.seed, "train-ivector", src + "/T"),
                                           return_history=True)
        ex.save(ctx.output("%s_extractor.ivx" % src))
        # the parent extractor serves every set; the child one only the child sets
        for name in (SETS if src == "parent" else ("child", "child_dev")):
            iv = {u: ex.extract(hires[name][u].values[:, :IVEC_FEATS]) for u in sorted(hires[name])}
            write_ivectors(ctx.output("ivectors/%s.%s.txt" % (name, src)), iv)


def _nnet_inputs(ctx, name, source):
    hires = feat.read_archive(ctx.input("prep", "%s/hires.fea" % name))
    ivecs = read_ivectors(ctx.input("train-ivector", "ivectors/%s.%s.txt" % (name, source)))
    out = {}
    for u in sorted(hires):
        x = hires[u].values
        out[u] = np.concatenate([x, np.broadcast_to(ivecs[u], (len(x), len(ivecs[u])))], axis=1)
    return out


def _normalize(inputs, norm):
    return {u: (x - norm["mean"]) / norm["std"] for u, x in inputs.items()}


def _training_pairs(ctx, name, inputs):
    ali = read_alignments(ctx.input("train-gmm", "%s/ali.txt" % name))
    pairs = {}
    for u in sorted(ali):
        if u in inputs and len(inputs[u]) == len(ali[u].pdfs):
            pairs[u] = (inputs[u], ali[u].pdfs)
    return pairs


def _num_pdfs(ctx, name):
    return AcousticModelGmm.load(ctx.input("train-gmm", "%s/final.amg" % name)).num_pdfs


_AUG_PREFIX = re.compile(r"^sp\d+(\.\d+)?-")


def source_utt(utt):
    """Utterance id an augmented copy ('sp0.9-<utt>') was derived from."""
    return _AUG_PREFIX.sub("", utt, count=1)


def _split_pairs(ctx, pairs, stage):
    # augmented copies follow their source utterance into the same split
    base = sorted({source_utt(u) for u in pairs})
    _, valid = _split_valid(base, ctx.cfg["corpus.valid_fraction"], subseed(ctx.cfg.seed, stage, "valid"))
    vset = set(valid)
    train = [pairs[u] for u in sorted(pairs) if source_utt(u) not in vset]
    valid_pairs = [pairs[u] for u in valid if u in pairs]
    return train, valid_pairs


def _progress(name, every=10):
    def report(net, rec):
        if rec.iteration % every == 0:
            log.info("%s: iter %d train %.4f valid %.4f", name, rec.iteration, rec.train_logprob, rec.valid_logprob)
    return report


def stage_train_parent(ctx):
    cfg = ctx.cfg
    inputs = _nnet_inputs(ctx, "parent", "parent")
    allx = np.vstack(list(inputs.values()))
    norm = {"mean": allx.mean(axis=0), "std": np.maximum(allx.std(axis=0), 1e-3)}
    _save_arrays(ctx.output("input_norm.npz"), **norm)
    pairs = _training_pairs(ctx, "parent", _normalize(inputs, norm))
    train, valid = _split_pairs(ctx, pairs, "train-parent")
    specs = tdnn_lstm_specs(_num_pdfs(ctx, "parent"), cfg["nnet.tdnn_dim"], cfg["nnet.cell_dim"])
    net = build_network(specs, allx.shape[1], seed=subseed(cfg.seed, "train-parent", "init"))
    tcfg = cfg.train_config(cfg["nnet.parent_epochs"], subseed(cfg.seed, "train-parent", "sgd"),
                            cfg["nnet.parent_minibatch"])
    log.info("train-parent: %d train / %d valid utterances, %d params", len(train), len(valid), net.num_params())
    net, tlog = train_sgd(net, train, valid, tcfg, _progress("train-parent"))
    net.save(ctx.output("parent.net"))
    tlog.to_csv(ctx.output("parent_log.csv"))


def experiment_grid(cfg):
    """(label, TransferConfig) pairs: optional baseline first, then the k-major grid."""
    seed = subseed(cfg.seed, "transfer-train", "init")
    out = []
    if cfg["transfer.baseline"]:
        out.append(("baseline", TransferConfig(0, 1.0, seed)))
    for tc in build_transfer_grid(cfg["transfer.k"], cfg["transfer.lr_multiplier"], seed):
        out.append((tc.label, tc))
    return out


def child_training_setup(ctx):
    """Parent network, child train/valid pairs and child layer specs for transfer-train."""
    cfg = ctx.cfg
    parent = Network.load(ctx.input("train-parent", "parent.net"))
    norm = _load_arrays(ctx.input("train-parent", "input_norm.npz"))
    inputs = _normalize(_nnet_inputs(ctx, "child", cfg["ivector.source"]), norm)
    pairs = _training_pairs(ctx, "child", inputs)
    train, valid = _split_pairs(ctx, pairs, "transfer-train")
    specs = tdnn_lstm_specs(_num_pdfs(ctx, "child"), cfg["nnet.tdnn_dim"], cfg["nnet.cell_dim"])
    return parent, train, valid, specs


def stage_transfer_train(ctx):
    cfg = ctx.cfg
    parent, train, valid, specs = child_training_setup(ctx)
    tcfg = cfg.train_config(cfg["nnet.epochs"], subseed(cfg.seed, "transfer-train", "sgd"))
    rows = []
    for label, tc in experiment_grid(cfg):
        child = transfer_weights(parent, specs, tc)
        log.info("transfer-train %s", label)
        net, tlog = train_sgd(child, train, valid, tcfg, _progress("transfer-train " + label))
        net.save(ctx.output("models/%s.net" % label))
        tlog.to_csv(ctx.output("logs/%s.csv" % label))
        rows.append((label, tc.k, tc.x))
    with open(ctx.output("configs.csv"), "w", encoding="utf-8") as f:
        f.write("config,k,x,ivector_source\n")
        for label, k, x in rows:
            f.write("%s,%d,%g,%s\n" % (label, k, x, cfg["ivector.source"]))


def _configs(ctx):
    with open(ctx.input("transfer-train", "configs.csv"), encoding="utf-8") as f:
        next(f)
        return [line.strip().split(",") for line in f if line.strip()]


def decode_setup(ctx):
    """Graph, rescoring LM, priors and dev inputs shared by every decoded model."""
    cfg = ctx.cfg
    lex = _lexicon(ctx, "child")
    texts = read_text(ctx.input("prep", "child/text"))
    corpus = [texts[u] for u in sorted(texts)]
    lm = train_ngram(corpus, cfg["decoder.lm_order"], cfg["decoder.smoothing"], vocab=lex.vocab)
    am = AcousticModelGmm.load(ctx.input("train-gmm", "child/final.amg"))
    ali = read_alignments(ctx.input("train-gmm", "child/ali.txt"))
    priors = pdf_log_priors([ali[u] for u in sorted(ali)], am.num_pdfs)
    graph = build_graph(lex, lm, am.self_loop, cfg["decoder.lm_scale"], cfg["decoder.sil_prob"])
    norm = _load_arrays(ctx.input("train-parent", "input_norm.npz"))
    dev = _normalize(_nnet_inputs(ctx, "child_dev", cfg["ivector.source"]), norm)
    return graph, lm, priors, dev


def decode_utterances(graph, lm, loglik_by_utt, cfg):
    rescore = lm if lm.order > 2 else None
    return {u: decode(graph, ll, cfg["decoder.beam"], cfg["decoder.acoustic_scale"], rescore,
                      cfg["decoder.nbest"]) for u, ll in sorted(loglik_by_utt.items())}


def stage_decode(ctx):
    cfg = ctx.cfg
    graph, lm, priors, dev = decode_setup(ctx)
    lm.write_arpa(ctx.output("lm.arpa"))
    for label, *_ in _configs(ctx):
        net = Network.load(ctx.input("transfer-train", "models/%s.net" % label))
        ll = {u: nnet_loglik(log_posteriors(net, x), priors) for u, x in dev.items()}
        hyps = decode_utterances(graph, lm, ll, cfg)
        write_hypotheses(ctx.output("%s.hyp" % label), hyps)
        log.info("decode %s: %d utterances", label, len(hyps))


def stage_score(ctx):
    refs = read_text(ctx.input("prep", "child_dev/text"))
    labels = [r[:-4] for r in ctx.upstream_outputs("decode") if r.endswith(".hyp")]
    with open(ctx.output("summary.csv"), "w", encoding="utf-8") as f:
        f.write("config,cer,wer,char_errors,chars,word_errors,words\n")
        for label in labels:
            hyps = read_hypotheses(ctx.input("decode", label + ".hyp"))
            rows, wtot, ctot = score_corpus(refs, hyps)
            write_score_report(ctx.output("%s.txt" % label), rows, wtot, ctot)
            f.write("%s,%.6f,%.6f,%d,%d,%d,%d\n" % (label, ctot.rate, wtot.rate, ctot.errors, ctot.N,
                                                    wtot.errors, wtot.N))


def read_csv(path):
    with open(path, encoding="utf-8") as f:
        header = f.readline().strip().split(",")
        return [dict(zip(header, line.strip().split(","))) for line in f if line.strip()]


def stage_report(ctx):
    configs = _configs(ctx)
    scores = {r["config"]: r for r in read_csv(ctx.input("score", "summary.csv"))}
    if not scores:
        raise PipelineError("no scored configurations")
    res_rows, time_rows = [], []
    for label, k, x, source in configs:
        if label not in scores:
            continue
        tlog = TrainLog.from_csv(ctx.input("transfer-train", "logs/%s.csv" % label))
        shutil.copyfile(ctx.input("transfer-train", "logs/%s.csv" % label), ctx.output("curves/%s.csv" % label))
        ms = tlog.column("wall_ms")[1:]
        res_rows.append("%s,%s,%s,%s,%s,%s,%.6f,%d" % (label, k, x, source, scores[label]["cer"],
                                                       scores[label]["wer"],
                                                       tlog.records[-1].valid_logprob, len(ms)))
        time_rows.append("%s,%s,%s,%.3f,%.4f,%d" % (label, k, x, float(np.median(ms)) if len(ms) else 0.0,
                                                     ms.sum() / 60000.0, len(ms)))
    root = ctx.root
    with open(ctx.output("results.csv"), "w", encoding="utf-8") as f:
        f.write("config,k,x,ivector_source,cer,wer,final_valid_logprob,iterations\n")
        f.write("".join(r + "\n" for r in res_rows))
    with open(ctx.output("timing.csv"), "w", encoding="utf-8") as f:
        f.write("config,k,x,median_ms_per_iter,total_minutes,iterations\n")
        f.write("".join(r + "\n" for r in time_rows))
    for fn in ("results.csv", "timing.csv"):
        shutil.copyfile(ctx.output(fn), os.path.join(root, fn))
    curves = os.path.join(root, "curves")
    if os.path.isdir(curves):
        shutil.rmtree(curves)
    shutil.copytree(os.path.join(ctx.dir, "curves"), curves)


STAGE_FUNCS = {
    "gen-corpus": stage_gen_corpus,
    "prep": stage_prep,
    "train-gmm": stage_train_gmm,
    "train-ivector": stage_train_ivector,
    "train-parent": stage_train_parent,
    "transfer-train": stage_transfer_train,
    "decode": stage_decode,
    "score": stage_score,
    "report": stage_report,
}


def run_stage(name, cfg):
    """Run one stage; returns its completion marker."""
    if name not in STAGE_FUNCS:
        raise ConfigError("unknown stage %r (choose from %s)" % (name, ", ".join(STAGES)))
    ctx = StageContext(cfg, name)
    t0 = time.perf_counter()
    ctx.begin()
    STAGE_FUNCS[name](ctx)
    marker = ctx.finish()
    log.info("%s done in %.1f s", name, time.perf_counter() - t0)
    return marker


def run_all(cfg, stages=STAGES):
    return [run_stage(s, cfg) for s in stages]
