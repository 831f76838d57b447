"""Experiment orchestration: pretraining, supervised event baselines,
grafting, evaluation, the mismatch study and state decoding.

Every run is deterministic given (config, seed): all randomness comes from
numpy Generators seeded by ``derive_seed`` and batches are reduced in a
fixed order.  Networks leave each training function rounded to float32,
so an in-memory model and its checkpoint file behave identically.
"""

from __future__ import annotations

import json
import logging
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import align, autonet, cochlea, features, objectives, signal
from .autonet import NetConfig, Network
from .features import FeatureConfig

log = logging.getLogger(__name__)


def derive_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([int(seed), *keys]).generate_state(1)[0])


_INIT, _SPLIT, _SHUFFLE = 1, 2, 3


# ---------------------------------------------------------------------------
# Configuration and results
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    synth: signal.SynthSpec = signal.SynthSpec()
    n_train: int = 500
    n_test: int = 200
    audio_features: FeatureConfig = FeatureConfig(25.0, 10.0, 40)
    event_features: FeatureConfig = FeatureConfig(25.0, 10.0, cochlea.N_CHANNELS)
    gru_sizes: tuple[int, ...] = (256, 256)
    fc_size: int = 200
    front_split: int = 1
    epochs: int = 50
    batch_size: int = 16
    lr_supervised: float = 3e-4
    lr_tnga: float = 1e-3
    clip_norm: float = 5.0
    val_fraction: float = 0.1
    seed: int = 0
    runs: int = 5
    sigma_theta: float = 0.0
    sigma_Q: float = 0.0
    mismatch_seed: int = 0
    alignment: str = "pre-aligned"

    def __post_init__(self):
        if self.lr_supervised <= 0 or self.lr_tnga <= 0:
            raise ValueError("learning rates must be positive")
        if self.epochs < 1 or self.runs < 1 or self.batch_size < 1:
            raise ValueError("epochs, runs and batch_size must be >= 1")
        if self.alignment not in ("dtw", "pre-aligned"):
            raise ValueError(f"alignment must be 'dtw' or 'pre-aligned', got {self.alignment!r}")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must be in (0, 1)")
        object.__setattr__(self, "gru_sizes", tuple(int(h) for h in self.gru_sizes))

    def net_config(self, input_dim: int) -> NetConfig:
        return NetConfig(input_dim, self.gru_sizes, self.fc_size, objectives.N_CLASSES, 0.01, self.front_split)

    def run_seeds(self) -> list[int]:
        return [self.seed + r for r in range(self.runs)]

    def to_dict(self):
        d = asdict(self)
        d["synth"] = self.synth.to_dict()
        d["gru_sizes"] = list(self.gru_sizes)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "synth" in d:
            d["synth"] = signal.SynthSpec.from_dict(d["synth"])
        for k, width in (("audio_features", 40), ("event_features", cochlea.N_CHANNELS)):
            if k in d:
                v = d[k]
                d[k] = FeatureConfig.parse(v, width) if isinstance(v, str) else FeatureConfig(**v)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown experiment config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class RunMetrics:
    seed: int
    epoch_losses: list = field(default_factory=list)
    val_losses: list = field(default_factory=list)
    best_epoch: int = -1
    test_wer: float = float("nan")
    skipped: int = 0
    wall_clock: float = 0.0

    def to_dict(self, with_time=False):
        d = asdict(self)
        if not with_time:
            d.pop("wall_clock")
        return d


def summarize(model_tag: str, feature_config: FeatureConfig, runs) -> dict:
    """Metrics document; std is the sample std over runs (0 for one run)."""
    w = np.array([r.test_wer for r in runs])
    return {
        "model_tag": model_tag,
        "feature_config": feature_config.tag,
        "wer_mean": float(w.mean()),
        "wer_std": float(w.std(ddof=1)) if len(w) > 1 else 0.0,
        "runs": [r.to_dict() for r in runs],
    }


def write_metrics(doc: dict, path) -> None:
    """Deterministic JSON; wall-clock lives in a sibling *.timing.json file."""
    path = Path(path)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def write_timing(runs, path) -> None:
    with open(path, "w") as fh:
        json.dump({"wall_clock_s": [r.wall_clock for r in runs]}, fh)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Corpora
# ---------------------------------------------------------------------------


@dataclass
class Item:
    sample_id: str
    labels: list
    audio: features.Features | None = None
    events: features.Features | None = None
    duration_us: int = 0


@dataclass
class Corpus:
    train: list
    test: list
    align_reports: list = field(default_factory=list)


def cochlea_config_for(cfg: ExperimentConfig) -> cochlea.CochleaConfig:
    base = cochlea.default_config(cfg.synth.sample_rate)
    if cfg.sigma_theta == 0 and cfg.sigma_Q == 0:
        return base
    return cochlea.apply_mismatch(base, cochlea.MismatchSpec(cfg.sigma_theta, cfg.sigma_Q, cfg.mismatch_seed))


def event_item_features(stream, waveform_features, duration_us, fcfg, mode, sample_id=""):
    """TBSC features for one stream, retimed onto the audio clock in dtw mode."""
    ev = features.tbsc(stream, fcfg, duration_us)
    report = {"sample_id": sample_id, "dtw_cost": 0.0, "clamped_events": 0}
    if mode == "dtw" and len(ev) and waveform_features is not None:
        path = align.dtw(align.envelope(waveform_features.frames), align.envelope(ev.frames))
        rep = align.WarpReport()
        stream = align.warp_events(stream, path, waveform_features.timestamps, ev.timestamps, rep)
        keep = stream.t_us <= duration_us
        stream = cochlea.EventStream(stream.t_us[keep], stream.channel[keep])
        ev = features.tbsc(stream, fcfg, duration_us)
        report.update(dtw_cost=path.total_cost, clamped_events=rep.clamped_events)
    return ev, report


_CORPUS_CACHE: dict = {}


def build_corpus(cfg: ExperimentConfig, with_events: bool = True) -> Corpus:
    """Synthesize, featurize and (optionally) simulate the cochlea for every sample.

    Memoized per process on everything that affects the result.
    """
    key = (
        json.dumps(cfg.synth.to_dict(), sort_keys=True), cfg.n_train, cfg.n_test,
        cfg.audio_features, cfg.event_features if with_events else None,
        (cfg.sigma_theta, cfg.sigma_Q, cfg.mismatch_seed, cfg.alignment) if with_events else None,
    )
    if key in _CORPUS_CACHE:
        return _CORPUS_CACHE[key]
    train, test = signal.synth_dataset(cfg.synth, cfg.n_train, cfg.n_test)
    cc = cochlea_config_for(cfg) if with_events else None
    out, reports = [], []
    for split in (train, test):
        items = []
        for s in split:
            a = features.log_mel(s.waveform, cfg.audio_features)
            it = Item(s.sample_id, list(s.labels), a, None, s.waveform.duration_us)
            if with_events:
                stream = cochlea.run_cochlea(cc, s.waveform)
                it.events, rep = event_item_features(stream, a, it.duration_us, cfg.event_features, cfg.alignment, s.sample_id)
                reports.append(rep)
            items.append(it)
        out.append(items)
    corpus = Corpus(out[0], out[1], reports)
    _CORPUS_CACHE[key] = corpus
    log.info("built corpus: %d train, %d test", len(corpus.train), len(corpus.test))
    return corpus


def load_corpus(audio_dir=None, events_dir=None, cfg: ExperimentConfig | None = None) -> Corpus:
    """Corpus from on-disk data written by the CLI.

    ``audio_dir`` holds {train,test}.jsonl manifests over WAVs; ``events_dir``
    holds {train,test}.jsonl manifests whose rows name an event CSV and a
    duration.  Samples are matched by id.
    """
    cfg = cfg or ExperimentConfig()
    splits = []
    for split in ("train", "test"):
        items = {}
        order = []
        if audio_dir is not None and (Path(audio_dir) / f"{split}.jsonl").exists():
            for row in signal.read_manifest(Path(audio_dir) / f"{split}.jsonl"):
                wav = signal.read_wav(row["wav"])
                items[row["id"]] = Item(row["id"], row["labels"], features.log_mel(wav, cfg.audio_features),
                                        None, wav.duration_us)
                order.append(row["id"])
        if events_dir is not None and (Path(events_dir) / f"{split}.jsonl").exists():
            for row in read_event_manifest(Path(events_dir) / f"{split}.jsonl"):
                stream = cochlea.read_events_csv(row["events"])
                it = items.get(row["id"])
                if it is None:
                    it = items[row["id"]] = Item(row["id"], row["labels"], None, None, row["duration_us"])
                    order.append(row["id"])
                elif not it.labels:
                    it.labels = row["labels"]
                it.events, _ = event_item_features(stream, it.audio, row["duration_us"], cfg.event_features,
                                                   cfg.alignment, row["id"])
        splits.append([items[k] for k in order])
    if not splits[0] and not splits[1]:
        raise FileNotFoundError(f"no train/test manifests under {audio_dir} / {events_dir}")
    return Corpus(splits[0], splits[1])


def write_event_dataset(samples, config: cochlea.CochleaConfig, directory, split: str) -> Path:
    """Simulate the cochlea for each sample; write CSVs plus a JSON-lines manifest."""
    directory = Path(directory)
    (directory / split).mkdir(parents=True, exist_ok=True)
    manifest = directory / f"{split}.jsonl"
    with open(manifest, "w") as fh:
        for s in samples:
            stream = cochlea.run_cochlea(config, s.waveform)
            rel = f"{split}/{s.sample_id}.csv"
            cochlea.write_events_csv(stream, directory / rel)
            row = {"id": s.sample_id, "events": rel, "duration_us": s.waveform.duration_us, "labels": s.labels}
            fh.write(json.dumps(row) + "\n")
    return manifest


def read_event_manifest(path):
    path = Path(path)
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            row = json.loads(line)
            if not {"id", "events", "duration_us"} <= set(row):
                raise ValueError(f"{path}:{lineno}: event manifest row needs id, events, duration_us")
            ev = Path(row["events"])
            rows.append({
                "id": row["id"],
                "events": ev if ev.is_absolute() else path.parent / ev,
                "duration_us": int(row["duration_us"]),
                "labels": list(row.get("labels") or []),
            })
    return rows


# ---------------------------------------------------------------------------
# Batching helpers
# ---------------------------------------------------------------------------


def split_train_val(n: int, fraction: float, seed: int):
    """Deterministic index split; validation gets at least one sample."""
    perm = np.random.default_rng(derive_seed(seed, _SPLIT)).permutation(n)
    n_val = max(1, int(round(fraction * n))) if n > 1 else 0
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def make_batches(lengths, batch_size: int, rng=None):
    """Length-bucketed batches; with ``rng`` the bucketing is jittered and the batch order shuffled."""
    lengths = np.asarray(lengths, dtype=np.float64)
    idx = np.arange(len(lengths))
    if rng is not None:
        keys = lengths * rng.uniform(0.9, 1.1, size=len(lengths))
        order = idx[np.argsort(keys, kind="stable")]
    else:
        order = idx[np.argsort(lengths, kind="stable")]
    batches = [order[i: i + batch_size] for i in range(0, len(order), batch_size)]
    if rng is not None:
        batches = [batches[i] for i in rng.permutation(len(batches))]
    return batches


def pad(seqs):
    B = len(seqs)
    T = max(len(s) for s in seqs)
    x = np.zeros((B, T, seqs[0].shape[1]))
    mask = np.zeros((B, T))
    for b, s in enumerate(seqs):
        x[b, : len(s)] = s
        mask[b, : len(s)] = 1.0
    return x, mask


def fit_normalizer(seqs):
    """Per-feature mean and std over all training frames; near-constant features keep scale 1."""
    allf = np.concatenate(seqs, axis=0)
    mu = allf.mean(axis=0)
    sd = allf.std(axis=0)
    sd = np.where(sd > 1e-3, sd, 1.0)
    return mu.astype(np.float32).astype(np.float64), sd.astype(np.float32).astype(np.float64)


# ---------------------------------------------------------------------------
# Supervised CTC training (PT and SN)
# ---------------------------------------------------------------------------


def _ctc_batch(net, layers, seqs, labels, train: bool):
    x, mask = pad(seqs)
    logits, caches = net.run(layers, net.normalize(x), mask)
    dlogits = np.zeros_like(logits)
    total, used, skipped = 0.0, 0, 0
    for b, (s, lab) in enumerate(zip(seqs, labels)):
        try:
            loss, g = objectives.ctc_loss(logits[b, : len(s)], lab)
        except objectives.InfeasibleError:
            skipped += 1
            continue
        total += loss
        used += 1
        dlogits[b, : len(s)] = g
    grads = None
    if train and used:
        _, grads = net.backprop(layers, dlogits / used, caches)
    return total, used, skipped, grads


def train_ctc(train_items, cfg: ExperimentConfig, seed: int, kind: str) -> tuple[Network, RunMetrics]:
    """Train the full network with CTC + Adam; returns the best-by-validation model.

    ``kind`` selects the input: "audio" (Log-Mel, PT) or "events" (TBSC, SN).
    """
    t0 = time.perf_counter()
    seqs = [getattr(it, kind).frames for it in train_items]
    labels = [it.labels for it in train_items]
    if any(len(lab) == 0 for lab in labels):
        raise ValueError("supervised training needs labels on every sample")
    tr, va = split_train_val(len(seqs), cfg.val_fraction, seed)
    shift, scale = fit_normalizer([seqs[i] for i in tr])
    net = Network.init(cfg.net_config(seqs[0].shape[1]), np.random.default_rng(derive_seed(seed, _INIT)),
                       input_shift=shift, input_scale=scale)
    adam = autonet.AdamState(cfg.lr_supervised)
    rng = np.random.default_rng(derive_seed(seed, _SHUFFLE))
    metrics = RunMetrics(seed)
    best = (np.inf, net.copy())
    lengths = np.array([len(s) for s in seqs])
    for epoch in range(cfg.epochs):
        tot, n = 0.0, 0
        for batch in make_batches(lengths[tr], cfg.batch_size, rng):
            ids = tr[batch]
            loss, used, skipped, grads = _ctc_batch(net, net.layers, [seqs[i] for i in ids], [labels[i] for i in ids], True)
            if epoch == 0:
                metrics.skipped += skipped
            if not used:
                continue
            autonet.clip_global_norm(grads, cfg.clip_norm)
            autonet.adam_step(adam, net.params, grads)
            tot += loss
            n += used
        val = _ctc_eval(net, [seqs[i] for i in va], [labels[i] for i in va], cfg.batch_size)
        metrics.epoch_losses.append(tot / max(n, 1))
        metrics.val_losses.append(val)
        log.info("%s seed %d epoch %d: train %.4f val %.4f", kind, seed, epoch + 1, metrics.epoch_losses[-1], val)
        if val < best[0]:
            best = (val, net.copy())
            metrics.best_epoch = epoch + 1
    metrics.wall_clock = time.perf_counter() - t0
    return best[1].quantized(), metrics


def _ctc_eval(net, seqs, labels, batch_size):
    if not seqs:
        return 0.0
    tot, n = 0.0, 0
    for batch in make_batches([len(s) for s in seqs], batch_size):
        loss, used, _, _ = _ctc_batch(net, net.layers, [seqs[i] for i in batch], [labels[i] for i in batch], False)
        tot += loss
        n += used
    return tot / max(n, 1)


def pretrain(corpus: Corpus, cfg: ExperimentConfig, seed: int):
    return train_ctc(corpus.train, cfg, seed, "audio")


def train_supervised_events(corpus: Corpus, cfg: ExperimentConfig, seed: int):
    return train_ctc(corpus.train, cfg, seed, "events")


# ---------------------------------------------------------------------------
# Grafting
# ---------------------------------------------------------------------------


def graft(pretrained: Network, items, cfg: ExperimentConfig, seed: int) -> tuple[Network, RunMetrics]:
    """Train a fresh event front end to reproduce the pretrained front-end states.

    Only audio/event features and timestamps are read from ``items``;
    labels are never touched.  The returned network has the grafted front
    and the pretrained trunk, bit for bit.
    """
    t0 = time.perf_counter()
    if any(it.audio is None or it.events is None for it in items):
        raise ValueError("grafting needs paired audio and event features for every sample")
    H = [autonet.forward_front(pretrained, it.audio) for it in items]
    seqs = [it.events.frames for it in items]
    pairings = [align.pair_states(h.timestamps, it.events.timestamps) for h, it in zip(H, items)]
    tr, va = split_train_val(len(items), cfg.val_fraction, seed)
    shift, scale = fit_normalizer([seqs[i] for i in tr])
    pc = pretrained.config
    gcfg = NetConfig(seqs[0].shape[1], pc.gru_sizes, pc.fc_size, pc.n_classes, pc.leaky_slope, pc.front_split)
    fresh = Network.init(gcfg, np.random.default_rng(derive_seed(seed, _INIT)), input_shift=shift, input_scale=scale)
    net = Network(gcfg, {k: fresh.params[k] if k in fresh.front_param_names() else pretrained.params[k].copy()
                         for k in fresh.param_names}, shift, scale)
    front = net.front_layers
    adam = autonet.AdamState(cfg.lr_tnga)
    rng = np.random.default_rng(derive_seed(seed, _SHUFFLE))
    metrics = RunMetrics(seed)
    lengths = np.array([len(s) for s in seqs])
    best = (np.inf, {k: net.params[k].copy() for k in net.front_param_names()})
    for epoch in range(cfg.epochs):
        tot, n = 0.0, 0
        for batch in make_batches(lengths[tr], cfg.batch_size, rng):
            ids = tr[batch]
            loss, grads = _tnga_batch(net, front, ids, seqs, H, pairings, True)
            autonet.clip_global_norm(grads, cfg.clip_norm)
            autonet.adam_step(adam, net.params, grads)
            tot += loss * len(ids)
            n += len(ids)
        val = _tnga_eval(net, front, va, seqs, H, pairings, cfg.batch_size)
        metrics.epoch_losses.append(tot / n)
        metrics.val_losses.append(val)
        log.info("graft seed %d epoch %d: train %.4f val %.4f", seed, epoch + 1, metrics.epoch_losses[-1], val)
        if val < best[0]:
            best = (val, {k: net.params[k].copy() for k in net.front_param_names()})
            metrics.best_epoch = epoch + 1
    net.params.update({k: v.copy() for k, v in best[1].items()})
    metrics.wall_clock = time.perf_counter() - t0
    out = net.quantized()
    for k in net.trunk_param_names():
        out.params[k] = pretrained.params[k].copy()
    return out, metrics


def _tnga_batch(net, front, ids, seqs, H, pairings, train: bool):
    x, mask = pad([seqs[i] for i in ids])
    G, caches = net.run(front, net.normalize(x), mask)
    dG = np.zeros_like(G)
    total = 0.0
    for b, i in enumerate(ids):
        L = len(seqs[i])
        val, g = objectives.tnga_loss(H[i], G[b, :L], pairings[i])
        total += val.total
        dG[b, :L] = g
    if not train:
        return total / len(ids), None
    _, grads = net.backprop(front, dG / len(ids), caches)
    return total / len(ids), grads


def _tnga_eval(net, front, va, seqs, H, pairings, batch_size):
    if len(va) == 0:
        return 0.0
    tot = 0.0
    for batch in make_batches([len(seqs[i]) for i in va], batch_size):
        loss, _ = _tnga_batch(net, front, va[batch], seqs, H, pairings, False)
        tot += loss * len(batch)
    return tot / len(va)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def decode_items(net: Network, items, kind: str):
    hyps = []
    for it in items:
        f = getattr(it, kind)
        if f.frames.shape[1] != net.config.input_dim:
            raise ValueError(f"feature width {f.frames.shape[1]} != network input {net.config.input_dim}")
        hyps.append(objectives.greedy_decode(autonet.forward(net, f)))
    return hyps


def evaluate(net: Network, items, kind: str) -> float:
    """Corpus WER of greedy decodes; ``kind`` is "audio" or "events"."""
    return objectives.wer([it.labels for it in items], decode_items(net, items, kind))


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------


def _map(fn, args, jobs: int):
    if jobs <= 1 or len(args) <= 1:
        return [fn(*a) for a in args]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, *zip(*args)))


def _pt_run(corpus, cfg, seed):
    net, m = pretrain(corpus, cfg, seed)
    m.test_wer = evaluate(net, corpus.test, "audio")
    return net, m


def _sn_run(corpus, cfg, seed):
    net, m = train_supervised_events(corpus, cfg, seed)
    m.test_wer = evaluate(net, corpus.test, "events")
    return net, m


def _gn_run(corpus, cfg, pretrained, seed):
    net, m = graft(pretrained, corpus.train, cfg, seed)
    m.test_wer = evaluate(net, corpus.test, "events")
    return net, m


def model_tag(kind: str, fcfg: FeatureConfig) -> str:
    return f"{kind}-{fcfg.window_ms:g}"


def run_pretrain(cfg: ExperimentConfig, corpus: Corpus | None = None, jobs: int = 1):
    corpus = corpus or build_corpus(cfg, with_events=False)
    res = _map(_pt_run, [(corpus, cfg, s) for s in cfg.run_seeds()], jobs)
    return [r[0] for r in res], summarize(model_tag("PT", cfg.audio_features), cfg.audio_features, [r[1] for r in res]), [r[1] for r in res]


def run_supervised_events(cfg: ExperimentConfig, corpus: Corpus | None = None, jobs: int = 1):
    corpus = corpus or build_corpus(cfg)
    res = _map(_sn_run, [(corpus, cfg, s) for s in cfg.run_seeds()], jobs)
    return [r[0] for r in res], summarize(model_tag("SN", cfg.event_features), cfg.event_features, [r[1] for r in res]), [r[1] for r in res]


def run_graft(cfg: ExperimentConfig, pretrained, corpus: Corpus | None = None, jobs: int = 1):
    """One grafting run per seed; ``pretrained`` is one network or one per run."""
    corpus = corpus or build_corpus(cfg)
    seeds = cfg.run_seeds()
    pts = pretrained if isinstance(pretrained, (list, tuple)) else [pretrained] * len(seeds)
    res = _map(_gn_run, [(corpus, cfg, p, s) for p, s in zip(pts, seeds)], jobs)
    return [r[0] for r in res], summarize(model_tag("GN", cfg.event_features), cfg.event_features, [r[1] for r in res]), [r[1] for r in res]


def nonideality_study(cfg: ExperimentConfig, pretrained, sigma_theta: float, sigma_Q: float, jobs: int = 1,
                      ideal: dict | None = None) -> dict:
    """SN and GN WER with the ideal cochlea and with mismatched thresholds and Q.

    ``ideal`` may carry already computed {"SN": metrics, "GN": metrics} for
    the ideal cochlea under the same config, which are then reused.
    """
    report = {"sigma_theta": sigma_theta, "sigma_Q": sigma_Q, "mismatch_seed": cfg.mismatch_seed}
    for name, (st, sq) in (("ideal", (0.0, 0.0)), ("mismatch", (sigma_theta, sigma_Q))):
        if name == "ideal" and ideal is not None:
            sn, gn = ideal["SN"], ideal["GN"]
        else:
            c = replace(cfg, sigma_theta=st, sigma_Q=sq)
            corpus = build_corpus(c)
            _, sn, _ = run_supervised_events(c, corpus, jobs)
            _, gn, _ = run_graft(c, pretrained, corpus, jobs)
        report[name] = {"SN": sn, "GN": gn, "gap": gn["wer_mean"] - sn["wer_mean"]}
    report["gap_widened"] = bool(report["mismatch"]["gap"] >= report["ideal"]["gap"])
    return report


def nonideality_rows(report: dict):
    rows = []
    for cond in ("ideal", "mismatch"):
        for kind in ("SN", "GN"):
            m = report[cond][kind]
            rows.append({"condition": cond, "model": kind, "wer_mean": m["wer_mean"], "wer_std": m["wer_std"]})
    return rows


# ---------------------------------------------------------------------------
# State decoding
# ---------------------------------------------------------------------------


@dataclass
class DecodeResult:
    frames: np.ndarray
    losses: list
    converged: bool

    @property
    def reduction(self) -> float:
        if not self.losses or self.losses[0] == 0:
            return 0.0
        return 1.0 - self.losses[-1] / self.losses[0]


def decode_states(pretrained: Network, states, iters: int = 5000, lr: float = 1e-2, clip_min: float = -10.0,
                  record_every: int = 1) -> DecodeResult:
    """Optimize a Log-Mel input whose pretrained front-end states match ``states``.

    The free T x input_dim matrix starts at the log floor, states are paired
    one to one, and the result is clipped below at ``clip_min``.
    ``losses`` holds the loss before each recorded iteration plus the final one.
    """
    S = states.states if isinstance(states, autonet.StateSequence) else np.asarray(states, dtype=np.float64)
    if S.ndim != 2 or S.shape[1] != pretrained.config.state_dim:
        raise ValueError(f"state width {S.shape[-1]} != pretrained front output {pretrained.config.state_dim}")
    T = len(S)
    X = np.full((T, pretrained.config.input_dim), np.log(features.LOG_FLOOR))
    # Adam runs on the normalized input the front end sees, so the 1e-2
    # step is measured in per-band standard deviations
    params = {"z": pretrained.normalize(X)}
    adam = autonet.AdamState(lr)
    front = pretrained.front_layers
    mask = np.ones((1, T))
    losses = []
    for it in range(iters + 1):
        G, caches = pretrained.run(front, params["z"][None], mask)
        val, dG = objectives.tnga_loss(S, G[0])
        if it % record_every == 0 or it == iters:
            losses.append(val.total)
        if it == iters:
            break
        dz, _ = pretrained.backprop(front, dG[None], caches, need_dx=True)
        autonet.adam_step(adam, params, {"z": dz[0]})
    if iters == 0:
        return DecodeResult(X.copy(), losses, True)
    X = params["z"] * pretrained.input_scale + pretrained.input_shift
    converged = losses[-1] < losses[0]
    if not converged:
        warnings.warn("state decoding did not reduce the loss", RuntimeWarning, stacklevel=2)
    return DecodeResult(np.maximum(X, clip_min), losses, converged)
