"""Cross-modality / cross-platform retrieval protocol and ranking metrics.

Queries are one randomly chosen record per (identity, camera) of the query
source; the gallery is every record of the gallery source, optionally padded
with distractors.  Gallery items are ranked by descending cosine similarity,
ties broken by ascending record id.
"""
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .synthdata import SOURCES, source_name

CROSS_PLATFORM = "cross-platform only"
CROSS_MODALITY = "cross-modality only"
CROSS_BOTH = "cross-modality & platform"
CATEGORIES = (CROSS_PLATFORM, CROSS_MODALITY, CROSS_BOTH)


class EmptySplitError(ValueError):
    pass


class NoMatchError(ValueError):
    pass


class IncompleteReportError(ValueError):
    pass


class DistractorWarning(UserWarning):
    pass


@dataclass(frozen=True)
class Setting:
    query: str
    gallery: str

    def __post_init__(self):
        for s in (self.query, self.gallery):
            if s not in SOURCES:
                raise ValueError(f"unknown source {s!r}; expected one of {sorted(SOURCES)}")
        if self.query == self.gallery:
            raise ValueError("query and gallery sources must differ")

    @property
    def name(self):
        return f"{self.query}->{self.gallery}"

    @classmethod
    def parse(cls, text):
        q, sep, g = text.replace("→", "->").partition("->")
        if not sep:
            raise ValueError(f"setting must look like 'U_R->G_R', got {text!r}")
        return cls(q.strip(), g.strip())

    def __str__(self):
        return self.name


# fixed reporting order; every report and table lists settings this way
ALL_SETTINGS = tuple(Setting(q, g) for q, g in [
    ("U_R", "G_R"), ("G_R", "U_R"), ("G_I", "G_R"), ("G_R", "G_I"),
    ("U_T", "U_R"), ("U_R", "U_T"), ("U_R", "G_I"), ("G_I", "U_R"),
    ("U_T", "G_R"), ("G_R", "U_T"), ("U_T", "G_I"), ("G_I", "U_T"),
])


def classify_setting(setting):
    qm, qp = SOURCES[setting.query]
    gm, gp = SOURCES[setting.gallery]
    if qm == gm and qp != gp:
        return CROSS_PLATFORM
    if qp == gp and qm != gm:
        return CROSS_MODALITY
    return CROSS_BOTH


def build_split(dataset, setting, rng):
    """Return ``(query_index, gallery_index)`` into ``dataset``."""
    qmask = dataset.source_mask(setting.query)
    gallery = np.flatnonzero(dataset.source_mask(setting.gallery))
    queries = []
    for ident in np.unique(dataset.identity[qmask]):
        rows = qmask & (dataset.identity == ident)
        for cam in np.unique(dataset.camera[rows]):
            pool = np.flatnonzero(rows & (dataset.camera == cam))
            queries.append(pool[rng.integers(len(pool))])
    if not queries or not len(gallery):
        raise EmptySplitError(f"{setting}: empty {'query' if not queries else 'gallery'} set")
    return np.array(queries, dtype=np.intp), gallery


def inject_distractors(gallery, pool, fraction, rng):
    """Append ``round(fraction * len(gallery))`` pool records (capped at the pool size).

    ``gallery`` and ``pool`` are datasets; the result is a new dataset.
    """
    if fraction < 0:
        raise ValueError("distractor fraction must be >= 0")
    if fraction > 1:
        raise ValueError("distractor fraction must be <= 1")
    want = int(math.floor(fraction * len(gallery) + 0.5))
    if want == 0:
        return gallery
    if want > len(pool):
        warnings.warn(f"distractor pool has {len(pool)} records, {want} requested; using all",
                      DistractorWarning, stacklevel=2)
        want = len(pool)
    pick = np.sort(rng.choice(len(pool), size=want, replace=False))
    return gallery.concat(pool.subset(pick))


def average_precision(ranked_relevance, n_relevant):
    rel = np.asarray(ranked_relevance, dtype=bool)
    if n_relevant < 1:
        raise NoMatchError("query has no relevant gallery item")
    if int(rel.sum()) != n_relevant:
        raise ValueError(f"relevance list has {int(rel.sum())} hits, expected {n_relevant}")
    ranks = np.flatnonzero(rel) + 1
    return math.fsum(np.arange(1, n_relevant + 1) / ranks) / n_relevant


def cmc_at(ranked_relevance, k):
    if k < 1:
        raise ValueError("k must be >= 1")
    return int(np.any(np.asarray(ranked_relevance[:k], dtype=bool)))


def rank_gallery(sims, gallery_ids):
    """Gallery order per query row: descending similarity, then ascending id."""
    sims = np.atleast_2d(sims)
    ids = np.broadcast_to(gallery_ids, sims.shape)
    return np.lexsort((ids, -sims), axis=-1)


def retrieval_metrics(sims, query_labels, gallery_labels, gallery_ids, ks=(1, 5)):
    """Per-query AP and CMC hits; queries without a match are dropped.

    Returns ``(ap, {k: hits}, n_excluded)`` with arrays over the kept queries.
    """
    order = rank_gallery(sims, gallery_ids)
    rel = np.asarray(gallery_labels)[order] == np.asarray(query_labels)[:, None]
    n_rel = rel.sum(axis=1)
    keep = n_rel > 0
    rel, n_rel = rel[keep], n_rel[keep]
    hits = np.cumsum(rel, axis=1)
    ranks = np.arange(1, rel.shape[1] + 1)
    precision = hits / ranks
    # correctly rounded sums keep AP independent of summation order
    ap = np.array([math.fsum(precision[q][rel[q]]) / n_rel[q] for q in range(len(rel))])
    cmc = {k: (hits[:, min(k, rel.shape[1]) - 1] > 0).astype(float) if len(rel) else np.zeros(0)
           for k in ks}
    return ap, cmc, int((~keep).sum())


@dataclass
class SettingReport:
    setting: str
    category: str
    rank1: float
    rank5: float
    mAP: float
    trials: list = field(default_factory=list)
    n_queries: int = 0
    n_gallery: int = 0
    n_distractors: int = 0
    n_excluded: int = 0


@dataclass
class EvalReport:
    settings: list
    categories: dict = None  # category -> {"rank1", "rank5", "mAP", "n_settings"}
    overall: dict = None  # category-mean convention (headline)
    overall_setting_mean: dict = None  # plain mean of the 12 per-setting values

    def to_dict(self):
        return {
            "settings": [asdict(s) for s in self.settings],
            "categories": self.categories,
            "overall": self.overall,
            "overall_setting_mean": self.overall_setting_mean,
        }


METRICS = ("rank1", "rank5", "mAP")


def evaluate(model, dataset, setting, n_trials=10, distractor_fraction=0.0, rng=None,
             distractor_pool=None, embeddings=None):
    """Run ``n_trials`` fresh query draws of one setting and average the metrics.

    ``embeddings`` may carry precomputed ``(dataset_emb, pool_emb)``.
    """
    rng = rng if rng is not None else np.random.default_rng()
    if embeddings is None:
        emb = model.encode_image(dataset.features)
        has_pool = distractor_pool is not None and len(distractor_pool)
        pool_emb = model.encode_image(distractor_pool.features) if has_pool else None
    else:
        emb, pool_emb = embeddings
    pool_idx = None
    if distractor_fraction > 0:
        if distractor_pool is None:
            raise ValueError("distractor_fraction > 0 needs a distractor pool")
        if np.intersect1d(distractor_pool.identities, dataset.identities).size:
            raise ValueError("distractor identities overlap evaluated identities")
        pool_idx = np.flatnonzero(distractor_pool.source_mask(setting.gallery))
    trials = []
    for _ in range(n_trials):
        q, g = build_split(dataset, setting, rng)
        g_emb, g_lab, g_ids = emb[g], dataset.identity[g], dataset.record_id[g]
        n_dis = 0
        if pool_idx is not None:
            gallery = dataset.subset(g)
            pool = distractor_pool.subset(pool_idx)
            padded = inject_distractors(gallery, pool, distractor_fraction, rng)
            n_dis = len(padded) - len(gallery)
            row_of = {rid: k for k, rid in zip(pool_idx.tolist(), pool.record_id.tolist())}
            added = [row_of[rid] for rid in padded.record_id[len(gallery):].tolist()]
            g_emb = np.concatenate([g_emb, pool_emb[added]]) if added else g_emb
            g_lab, g_ids = padded.identity, padded.record_id
        sims = emb[q] @ g_emb.T
        ap, cmc, excluded = retrieval_metrics(sims, dataset.identity[q], g_lab, g_ids)
        if not len(ap):
            raise EmptySplitError(f"{setting}: no query has a relevant gallery item")
        trials.append({"rank1": _fmean(cmc[1]), "rank5": _fmean(cmc[5]), "mAP": _fmean(ap),
                       "n_queries": int(len(q)), "n_gallery": int(len(g_ids)),
                       "n_distractors": n_dis, "n_excluded": excluded})
    means = {m: float(np.mean([t[m] for t in trials])) for m in METRICS}
    last = trials[-1]
    return SettingReport(setting.name, classify_setting(setting), trials=trials,
                         n_queries=last["n_queries"], n_gallery=last["n_gallery"],
                         n_distractors=last["n_distractors"],
                         n_excluded=int(sum(t["n_excluded"] for t in trials)), **means)


def _fmean(values):
    return math.fsum(values) / len(values)


def _mean_metrics(rows):
    return {m: float(np.mean([r[m] for r in rows])) for m in METRICS}


def summarize(entries):
    """Category averages (2 / 4 / 6 settings) plus both overall conventions."""
    by_name = {e.setting: e for e in entries}
    missing = [s.name for s in ALL_SETTINGS if s.name not in by_name]
    if missing:
        raise IncompleteReportError(f"missing settings: {', '.join(missing)}")
    ordered = [by_name[s.name] for s in ALL_SETTINGS]
    cats = {}
    for cat in CATEGORIES:
        rows = [asdict(e) for e in ordered if e.category == cat]
        cats[cat] = dict(_mean_metrics(rows), n_settings=len(rows))
    overall = _mean_metrics([cats[c] for c in CATEGORIES])
    flat = _mean_metrics([asdict(e) for e in ordered])
    return EvalReport(ordered, cats, overall, flat)


def build_report(entries):
    """Full summary when all settings are present, otherwise per-setting rows only."""
    names = {e.setting for e in entries}
    if names >= {s.name for s in ALL_SETTINGS}:
        return summarize(entries)
    return EvalReport(list(entries))


def format_table(report):
    """Aligned text table: one row per setting, then category and average rows."""
    head = f"{'setting':<32}{'Rank-1':>9}{'Rank-5':>9}{'mAP':>9}{'queries':>9}{'gallery':>9}"
    lines = [head, "-" * len(head)]
    for e in report.settings:
        lines.append(f"{e.setting:<32}{100 * e.rank1:>9.2f}{100 * e.rank5:>9.2f}{100 * e.mAP:>9.2f}"
                     f"{e.n_queries:>9d}{e.n_gallery:>9d}")
    if report.categories:
        lines.append("-" * len(head))
        rows = [(f"{c} ({v['n_settings']})", v) for c, v in report.categories.items()]
        rows.append(("average (category mean)", report.overall))
        rows.append(("average (setting mean)", report.overall_setting_mean))
        for label, v in rows:
            lines.append(f"{label:<32}{100 * v['rank1']:>9.2f}{100 * v['rank5']:>9.2f}{100 * v['mAP']:>9.2f}")
    return "\n".join(lines) + "\n"


def setting_for_sources(query, gallery):
    """Setting from (modality, platform) pairs."""
    return Setting(source_name(*query), source_name(*gallery))
