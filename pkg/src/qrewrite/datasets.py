"""Training and evaluation data: rule-based rewrite collection, click filter,
relevance tagging, and the dataset file formats.

File formats (UTF-8, LF, one record per line, sorted by query):

* SFT: the rendered training template, see :func:`render_sft_record`.
* RL: ``query<TAB>{"clicks": [[product_id, rank], ...]}``
* tagging eval: ``query<TAB>{"rewrite": str, "tag": 0|1}``
* recall eval: ``query<TAB>{"clicked": product_id}``
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .catalog import Catalog, tokenize
from .relevance import aggregate_relevance
from .search import ClickSet, OfflineSearchEngine, stable_hash

SFT_TEMPLATE = "The synonymous search term and its corresponding relevance tag for {query} are {rewrite} <|sep|> {tag}"
_SFT_RE = re.compile(
    r"^The synonymous search term and its corresponding relevance tag for (?P<query>.+?) are "
    r"(?P<rewrite>.+) <\|sep\|> (?P<tag>\S+)$"
)


class MalformedRecord(ValueError):
    pass


@dataclass(frozen=True)
class QueryRewritePair:
    query: str
    rewrite: str


@dataclass(frozen=True)
class TaggedExample:
    query: str
    rewrite: str
    tag: int


@dataclass(frozen=True)
class RlRecord:
    query: str
    click_product_ids: tuple[int, ...]
    click_positions: dict[int, int] = field(hash=False)

    @property
    def click_set(self) -> ClickSet:
        return ClickSet(self.query, tuple((pid, self.click_positions[pid]) for pid in self.click_product_ids))


@dataclass(frozen=True)
class TaggingEvalRecord:
    query: str
    rewrite: str
    tag: int


@dataclass(frozen=True)
class RecallEvalRecord:
    query: str
    clicked_product_id: int


# -- queries -------------------------------------------------------------------


def sample_queries(
    catalog: Catalog,
    n: int,
    seed: int,
    p_brand: float = 0.7,
    p_modifier: float = 0.5,
    p_alias: float = 0.6,
) -> list[tuple[str, int]]:
    """Distinct user-style queries, each generated from a target product.

    The category is always present; brand and modifier are kept with the given
    probabilities, and any kept token that has an alias is replaced by it with
    probability ``p_alias``. Returns (query, target product id) pairs.
    """
    rng = np.random.default_rng(seed)
    out: dict[str, int] = {}
    attempts = 0
    while len(out) < n and attempts < 50 * n:
        attempts += 1
        product = catalog[int(rng.integers(len(catalog)))]
        toks = []
        for slot, keep in (("brand", p_brand), ("modifier", p_modifier), ("category", 1.0)):
            if rng.random() >= keep:
                continue
            tok = product.attributes[slot]
            aliases = sorted(catalog.synonyms(tok))
            if aliases and rng.random() < p_alias:
                tok = aliases[int(rng.integers(len(aliases)))]
            toks.append(tok)
        query = " ".join(toks)
        out.setdefault(query, product.id)
    return sorted(out.items())


# -- rule-based previous-generation rewriter ----------------------------------


@dataclass
class SynonymRewriter:
    """Rule-based rewriter playing the role of the previous production policy.

    Each token that has a synonym is either kept or swapped for a synonym.
    With probability ``confusion_rate`` a swap lands on a wrong sibling from
    the same grammar slot instead, which is the kind of error that produces
    irrelevant rewrites. Queries without synonym-bearing tokens only get the
    identity rewrite.
    """

    catalog: Catalog
    confusion_rate: float = 0.25
    swap_rate: float = 0.6
    seed: int = 0

    def _slot(self, token: str) -> str | None:
        slot = self.catalog.slot_of(token)
        if slot is None:
            for syn in sorted(self.catalog.synonyms(token)):
                slot = self.catalog.slot_of(syn)
                if slot:
                    break
        return slot

    def rewrites(self, query: str, n: int) -> list[str]:
        toks = tokenize(query)
        out = [" ".join(toks)]
        if not any(self.catalog.synonyms(t) for t in toks) or n <= 1:
            return out[:n]
        rng = np.random.default_rng([self.seed, stable_hash(query)])
        for _ in range(8 * n):
            if len(out) >= n:
                break
            cand = []
            for tok in toks:
                syns = sorted(self.catalog.synonyms(tok))
                if not syns or rng.random() >= self.swap_rate:
                    cand.append(tok)
                    continue
                new = syns[int(rng.integers(len(syns)))]
                if rng.random() < self.confusion_rate:
                    slot = self._slot(tok)
                    pool = [t for t in self.catalog.slot_tokens.get(slot, ()) if t not in (tok, new)]
                    if pool:
                        new = pool[int(rng.integers(len(pool)))]
                cand.append(new)
            text = " ".join(cand)
            if text not in out:
                out.append(text)
        return out


def collect_pairs(seed_policy: SynonymRewriter, query_list, n_per_query: int) -> list[QueryRewritePair]:
    if n_per_query < 1:
        raise ValueError("n_per_query must be >= 1")
    return [QueryRewritePair(q, r) for q in query_list for r in seed_policy.rewrites(q, n_per_query)]


def click_filter(pairs, engine: OfflineSearchEngine, click_sets: dict[str, ClickSet]) -> list[QueryRewritePair]:
    """Keep pairs whose rewrite retrieves at least one product clicked for the query."""
    kept = []
    for pair in pairs:
        if pair.query not in click_sets:
            raise KeyError(f"missing click set for query {pair.query!r}")
        clicked = set(click_sets[pair.query].ids)
        if clicked & set(engine.retrieve(pair.rewrite).ids):
            kept.append(pair)
    return kept


def relevance_tag(query: str, rewrite: str, engine: OfflineSearchEngine, tau: float, m: int) -> int:
    return int(aggregate_relevance(query, engine.retrieve(rewrite), engine.catalog, m) > tau)


def assign_tags(pairs, engine: OfflineSearchEngine, tau: float = 0.2, m: int = 4) -> list[TaggedExample]:
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    return [TaggedExample(p.query, p.rewrite, relevance_tag(p.query, p.rewrite, engine, tau, m)) for p in pairs]


# -- SFT record template ---------------------------------------------------------


def render_sft_record(example: TaggedExample) -> str:
    return SFT_TEMPLATE.format(query=example.query, rewrite=example.rewrite, tag=example.tag)


def parse_sft_record(text: str) -> TaggedExample:
    m = _SFT_RE.match(text.rstrip("\n"))
    if m is None:
        raise MalformedRecord(f"not an SFT record: {text!r}")
    if m["tag"] not in ("0", "1"):
        raise MalformedRecord(f"tag must be 0 or 1, got {m['tag']!r}")
    return TaggedExample(m["query"], m["rewrite"], int(m["tag"]))


# -- RL and evaluation data ------------------------------------------------------


def build_rl_dataset(tagged, engine: OfflineSearchEngine, seed: int, click_sets=None) -> list[RlRecord]:
    """One record per distinct query that has clicks and a non-empty own recall set."""
    if not tagged:
        raise ValueError("tagged dataset is empty")
    records = []
    for query in sorted({ex.query for ex in tagged}):
        cs = click_sets[query] if click_sets and query in click_sets else engine.simulate(query, seed)
        if not cs.clicks or not engine.retrieve(query).items:
            continue
        records.append(RlRecord(query, tuple(pid for pid, _ in cs.clicks), dict(cs.clicks)))
    return records


def build_eval_datasets(
    catalog: Catalog,
    engine: OfflineSearchEngine,
    eval_queries: list[tuple[str, int]],
    rewriter: SynonymRewriter,
    train_queries=(),
    tau: float = 0.2,
    m: int = 4,
    n_per_query: int = 4,
    seed: int = 0,
    click_scale: float = 1.0,
) -> tuple[list[TaggingEvalRecord], list[RecallEvalRecord]]:
    """Held-out evaluation splits.

    Tagging pairs go through the same click filter as training pairs, so the
    gold tags are drawn from the distribution the tag head is trained on.
    """
    banned = set(train_queries)
    queries = [(q, pid) for q, pid in eval_queries if q not in banned]
    texts = [q for q, _ in queries]
    clicks = {q: engine.simulate(q, seed, click_scale) for q in texts}
    kept = click_filter(collect_pairs(rewriter, texts, n_per_query), engine, clicks)
    tagging = [TaggingEvalRecord(e.query, e.rewrite, e.tag) for e in assign_tags(kept, engine, tau, m)]
    recall = [RecallEvalRecord(q, pid) for q, pid in queries]
    return sorted(tagging, key=lambda r: (r.query, r.rewrite)), sorted(recall, key=lambda r: r.query)


# -- file IO -----------------------------------------------------------------------


def _write(path, lines) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for line in lines:
            fh.write(line + "\n")


def _read(path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [ln.rstrip("\n") for ln in fh if ln.strip()]


def _split(line: str) -> tuple[str, dict]:
    query, payload = line.split("\t", 1)
    return query, json.loads(payload)


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_sft(path, examples) -> None:
    _write(path, [render_sft_record(e) for e in sorted(examples, key=lambda e: (e.query, e.rewrite, e.tag))])


def read_sft(path) -> list[TaggedExample]:
    return [parse_sft_record(line) for line in _read(path)]


def write_rl(path, records) -> None:
    _write(
        path,
        [
            f"{r.query}\t" + _dump({"clicks": [[pid, r.click_positions[pid]] for pid in r.click_product_ids]})
            for r in sorted(records, key=lambda r: r.query)
        ],
    )


def read_rl(path) -> list[RlRecord]:
    out = []
    for line in _read(path):
        q, payload = _split(line)
        clicks = [(int(a), int(b)) for a, b in payload["clicks"]]
        out.append(RlRecord(q, tuple(pid for pid, _ in clicks), dict(clicks)))
    return out


def write_tagging_eval(path, records) -> None:
    _write(path, [f"{r.query}\t" + _dump({"rewrite": r.rewrite, "tag": r.tag}) for r in records])


def read_tagging_eval(path) -> list[TaggingEvalRecord]:
    out = []
    for line in _read(path):
        q, payload = _split(line)
        if set(payload) != {"rewrite", "tag"}:
            raise MalformedRecord(f"not a tagging-eval record: {line!r}")
        out.append(TaggingEvalRecord(q, payload["rewrite"], int(payload["tag"])))
    return out


def write_recall_eval(path, records) -> None:
    _write(path, [f"{r.query}\t" + _dump({"clicked": r.clicked_product_id}) for r in records])


def read_recall_eval(path) -> list[RecallEvalRecord]:
    out = []
    for line in _read(path):
        q, payload = _split(line)
        if set(payload) != {"clicked"}:
            raise MalformedRecord(f"not a recall-eval record: {line!r}")
        out.append(RecallEvalRecord(q, int(payload["clicked"])))
    return out


# -- end-to-end build ------------------------------------------------------------------


@dataclass(frozen=True)
class DataConfig:
    n_train_queries: int = 1500
    n_eval_queries: int = 300
    rewrites_per_query: int = 4
    confusion_rate: float = 0.25
    tau_relev: float = 0.2
    m: int = 4
    click_scale: float = 1.0


@dataclass
class DataBundle:
    sft: list[TaggedExample]
    single_task: list[QueryRewritePair]
    rl: list[RlRecord]
    tagging_eval: list[TaggingEvalRecord]
    recall_eval: list[RecallEvalRecord]
    click_sets: dict[str, ClickSet]
    stats: dict[str, int]


def build_datasets(engine: OfflineSearchEngine, config: DataConfig, seed: int) -> DataBundle:
    """Full data pipeline: queries -> collected pairs -> click filter -> tags -> RL and eval splits."""
    catalog = engine.catalog
    pool = sample_queries(catalog, config.n_train_queries + config.n_eval_queries, seed)
    order = np.random.default_rng([seed, 1]).permutation(len(pool))
    pool = [pool[i] for i in order]
    train = sorted(pool[: config.n_train_queries])
    held_out = sorted(pool[config.n_train_queries :])
    rewriter = SynonymRewriter(catalog, config.confusion_rate, seed=seed)

    train_queries = [q for q, _ in train]
    click_sets = {q: engine.simulate(q, seed, config.click_scale) for q in train_queries}
    pairs = collect_pairs(rewriter, train_queries, config.rewrites_per_query)
    kept = click_filter(pairs, engine, click_sets)
    tagged = assign_tags(kept, engine, config.tau_relev, config.m)
    rl = build_rl_dataset(tagged, engine, seed, click_sets)
    tagging_eval, recall_eval = build_eval_datasets(
        catalog, engine, held_out, rewriter, train_queries, config.tau_relev, config.m,
        config.rewrites_per_query, seed, config.click_scale,
    )
    stats = {
        "train_queries": len(train_queries),
        "collected_pairs": len(pairs),
        "kept_pairs": len(kept),
        "tag1": sum(e.tag for e in tagged),
        "rl_records": len(rl),
        "tagging_eval": len(tagging_eval),
        "recall_eval": len(recall_eval),
    }
    return DataBundle(
        sft=tagged,
        single_task=[QueryRewritePair(e.query, e.rewrite) for e in tagged],
        rl=rl,
        tagging_eval=tagging_eval,
        recall_eval=recall_eval,
        click_sets=click_sets,
        stats=stats,
    )
