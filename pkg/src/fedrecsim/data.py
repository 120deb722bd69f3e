"""MIND-format ingestion, synthetic corpora and negative sampling."""

from __future__ import annotations

import io
import re
import string
from dataclasses import dataclass, field

import numpy as np

DEFAULT_MAX_TITLE_LEN = 20
PAD_ID = 0

_SPLIT = re.compile(r"[\s" + re.escape(string.punctuation) + r"]+")


class DataError(ValueError):
    """Malformed input data. ``line`` is 1-based when known."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class SynthSpecError(ValueError):
    pass


@dataclass
class NewsItem:
    id: str
    title_tokens: list[int]
    title: str = ""
    category: str = ""
    subcategory: str = ""


@dataclass
class Impression:
    shown: list[str]
    clicks: list[bool]

    def __post_init__(self):
        if not self.shown:
            raise DataError("impression shows no news")
        if len(self.shown) != len(self.clicks):
            raise DataError("impression shown/click lengths differ")

    @property
    def has_both_labels(self) -> bool:
        return any(self.clicks) and not all(self.clicks)


@dataclass
class ClientLog:
    user_id: str
    history: list[str]
    train_impressions: list[Impression] = field(default_factory=list)


@dataclass
class TrainSample:
    """One clicked item plus ``P`` sampled non-clicked items.

    ``history`` and ``candidates`` hold corpus row indices, not text ids.
    """

    history: np.ndarray
    candidates: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if len(self.candidates) == 0:
            raise DataError("sample has no candidates")
        if len(self.labels) != len(self.candidates) or int(np.sum(self.labels)) != 1:
            raise DataError("sample labels must be one-hot over the candidates")

    @property
    def positive(self) -> int:
        return int(np.argmax(self.labels))


@dataclass
class SynthTruth:
    """Latent variables of a synthetic corpus, used by oracle scorers."""

    news_topic: np.ndarray
    user_pref: dict[str, np.ndarray]


@dataclass
class Corpus:
    news: dict[str, NewsItem]
    vocab: dict[str, int]
    clients: list[ClientLog] = field(default_factory=list)
    eval_impressions: list[tuple[str, Impression]] = field(default_factory=list)
    skipped_unknown: int = 0
    truth: SynthTruth | None = None

    def __post_init__(self):
        self._index = None
        self._tokens = None
        self._clients_by_id = None

    @property
    def vocab_size(self) -> int:
        return len(self.vocab) + 1

    @property
    def news_ids(self) -> list[str]:
        return list(self.news)

    @property
    def index(self) -> dict[str, int]:
        if self._index is None:
            self._index = {nid: i for i, nid in enumerate(self.news)}
        return self._index

    def client(self, user_id: str) -> ClientLog:
        if self._clients_by_id is None:
            self._clients_by_id = {c.user_id: c for c in self.clients}
        return self._clients_by_id[user_id]

    def token_matrix(self) -> tuple[np.ndarray, np.ndarray]:
        """Padded ``(L, T)`` token ids and per-row lengths for all news."""
        if self._tokens is None:
            items = list(self.news.values())
            width = max((len(n.title_tokens) for n in items), default=1)
            tokens = np.full((len(items), width), PAD_ID, dtype=np.int64)
            lengths = np.zeros(len(items), dtype=np.int64)
            for i, item in enumerate(items):
                tokens[i, : len(item.title_tokens)] = item.title_tokens
                lengths[i] = len(item.title_tokens)
            self._tokens = (tokens, lengths)
        return self._tokens

    def history_indices(self, client: ClientLog, max_len: int | None = None) -> np.ndarray:
        idx = [self.index[n] for n in client.history if n in self.index]
        if max_len is not None and len(idx) > max_len:
            idx = idx[-max_len:]
        return np.asarray(idx, dtype=np.int64)

    def click_counts(self) -> np.ndarray:
        """Training click count per news row."""
        counts = np.zeros(len(self.news), dtype=np.int64)
        for c in self.clients:
            for imp in c.train_impressions:
                for nid, clicked in zip(imp.shown, imp.clicks):
                    if clicked:
                        counts[self.index[nid]] += 1
        return counts


def tokenize(title: str) -> list[str]:
    return [t for t in _SPLIT.split(title.lower()) if t]


def _lines(stream):
    if isinstance(stream, (str, bytes)):
        stream = io.StringIO(stream.decode("utf-8") if isinstance(stream, bytes) else stream)
    for lineno, line in enumerate(stream, start=1):
        line = line.rstrip("\r\n")
        if line.strip():
            yield lineno, line


def parse_news_tsv(stream, max_title_len: int = DEFAULT_MAX_TITLE_LEN, vocab=None):
    """Parse a MIND ``news.tsv`` stream.

    Returns ``(items, vocab)``. Token id 0 is reserved, so real tokens are
    numbered from 1 in first-seen order. Passing an existing ``vocab``
    extends it in place.
    """
    vocab = {} if vocab is None else vocab
    items = []
    seen = set()
    for lineno, line in _lines(stream):
        cols = line.split("\t")
        if len(cols) < 4:
            raise DataError(f"expected at least 4 columns, found {len(cols)}", lineno)
        nid, category, subcategory, title = cols[:4]
        if nid in seen:
            raise DataError(f"duplicate news id {nid!r}", lineno)
        words = tokenize(title)[:max_title_len]
        if not words:
            raise DataError(f"news {nid!r} has an empty title", lineno)
        ids = []
        for w in words:
            if w not in vocab:
                vocab[w] = len(vocab) + 1
            ids.append(vocab[w])
        seen.add(nid)
        items.append(NewsItem(nid, ids, title, category, subcategory))
    return items, vocab


_IMP_TOKEN = re.compile(r"^(.+)-([01])$")


def parse_behaviors_tsv(stream, news_index, split="last", unknown="skip"):
    """Parse a MIND ``behaviors.tsv`` stream into client logs.

    ``split`` decides where impressions go: ``"last"`` holds out each user's
    final impression for evaluation, ``"train"`` and ``"eval"`` send all of
    them to one side. Unknown news ids are dropped and counted unless
    ``unknown="error"``.

    Returns ``(clients, eval_impressions, skipped_unknown)``.
    """
    if split not in ("last", "train", "eval"):
        raise ValueError(f"unknown split {split!r}")
    if unknown not in ("skip", "error"):
        raise ValueError(f"unknown policy {unknown!r}")
    skipped = 0
    order = []
    histories = {}
    rows = {}

    def known(nid, lineno):
        nonlocal skipped
        if nid in news_index:
            return True
        if unknown == "error":
            raise DataError(f"unknown news id {nid!r}", lineno)
        skipped += 1
        return False

    for lineno, line in _lines(stream):
        cols = line.split("\t")
        if len(cols) < 5:
            raise DataError(f"expected 5 columns, found {len(cols)}", lineno)
        _, uid, _, history, imps = cols[:5]
        shown, clicks = [], []
        for tok in imps.split():
            match = _IMP_TOKEN.match(tok)
            if match is None:
                raise DataError(f"malformed impression entry {tok!r}", lineno)
            if known(match.group(1), lineno):
                shown.append(match.group(1))
                clicks.append(match.group(2) == "1")
        if uid not in rows:
            order.append(uid)
            rows[uid] = []
            histories[uid] = [n for n in history.split() if known(n, lineno)]
        if shown:
            rows[uid].append(Impression(shown, clicks))

    clients = []
    eval_impressions = []
    for uid in order:
        imps = rows[uid]
        if split == "last" and imps:
            train, held = imps[:-1], imps[-1:]
        elif split == "eval":
            train, held = [], imps
        else:
            train, held = imps, []
        clients.append(ClientLog(uid, histories[uid], train))
        eval_impressions.extend((uid, imp) for imp in held)
    return clients, eval_impressions, skipped


def load_corpus(news_stream, behaviors_stream, max_title_len=DEFAULT_MAX_TITLE_LEN,
                split="last", unknown="skip") -> Corpus:
    items, vocab = parse_news_tsv(news_stream, max_title_len)
    news = {item.id: item for item in items}
    clients, evals, skipped = parse_behaviors_tsv(behaviors_stream, news, split, unknown)
    return Corpus(news, vocab, clients, evals, skipped)


def write_news_tsv(corpus: Corpus, stream) -> None:
    for item in corpus.news.values():
        stream.write(f"{item.id}\t{item.category}\t{item.subcategory}\t{item.title}\t\t\t\t\n")


def write_behaviors_tsv(corpus: Corpus, stream) -> None:
    """Write train impressions then the held-out one, user by user.

    Re-parsing with ``split="last"`` reproduces the corpus when every user
    has exactly one eval impression.
    """
    held = {}
    for uid, imp in corpus.eval_impressions:
        held.setdefault(uid, []).append(imp)
    imp_id = 0
    for client in corpus.clients:
        history = " ".join(client.history)
        for imp in client.train_impressions + held.get(client.user_id, []):
            imp_id += 1
            entries = " ".join(f"{n}-{int(c)}" for n, c in zip(imp.shown, imp.clicks))
            stream.write(f"{imp_id}\t{client.user_id}\tT{imp_id}\t{history}\t{entries}\n")


@dataclass
class SynthSpec:
    n_users: int = 1000
    n_news: int = 500
    n_topics: int = 8
    title_len: int = 8
    history_len: tuple[int, int] = (3, 15)
    impressions_per_user: tuple[int, int] = (2, 6)
    candidates_per_impression: int = 10
    tokens_per_topic: int = 30
    common_tokens: int = 40
    topic_token_prob: float = 0.8
    pref_concentration: float = 0.3
    base_ctr: float = 0.15
    max_title_len: int = DEFAULT_MAX_TITLE_LEN

    def validate(self) -> None:
        if min(self.n_users, self.n_news, self.n_topics, self.title_len) < 1:
            raise SynthSpecError("n_users, n_news, n_topics and title_len must be >= 1")
        if self.n_news < 2:
            raise SynthSpecError("n_news must be >= 2")
        if self.candidates_per_impression < 2:
            raise SynthSpecError("candidates_per_impression must be >= 2 to hold both labels")
        if self.candidates_per_impression > self.n_news:
            raise SynthSpecError(
                f"candidates_per_impression={self.candidates_per_impression} exceeds n_news={self.n_news}"
            )
        lo, hi = self.history_len
        if lo < 0 or hi < lo or hi > self.n_news:
            raise SynthSpecError(f"invalid history_len range {self.history_len}")
        lo, hi = self.impressions_per_user
        if lo < 2 or hi < lo:
            raise SynthSpecError("impressions_per_user needs min >= 2 (one train, one eval)")
        if self.tokens_per_topic < 1 or self.common_tokens < 0:
            raise SynthSpecError("token block sizes must be positive")
        if not 0.0 <= self.topic_token_prob <= 1.0 or not 0.0 < self.base_ctr < 1.0:
            raise SynthSpecError("topic_token_prob must lie in [0,1] and base_ctr in (0,1)")
        if self.pref_concentration <= 0:
            raise SynthSpecError("pref_concentration must be positive")


def synth_generate(spec: SynthSpec, seed: int) -> Corpus:
    """Generate a topic-structured corpus in MIND shape.

    Each news item belongs to one topic and draws title tokens mostly from
    that topic's token block. Users hold a Dirichlet topic preference; an
    item shown to a user is clicked with probability proportional to the
    user's preference for its topic. Every impression carries at least one
    click and one non-click, and each user's last impression is the eval one.
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    T = spec.n_topics

    news_topic = rng.integers(0, T, size=spec.n_news)
    news_lines = []
    for i in range(spec.n_news):
        t = news_topic[i]
        words = []
        for _ in range(spec.title_len):
            if spec.common_tokens == 0 or rng.random() < spec.topic_token_prob:
                words.append(f"t{t}w{rng.integers(spec.tokens_per_topic)}")
            else:
                words.append(f"c{rng.integers(spec.common_tokens)}")
        news_lines.append(f"N{i}\ttopic{t}\tsub{t}\t{' '.join(words)}\n")
    items, vocab = parse_news_tsv("".join(news_lines), spec.max_title_len)
    news = {item.id: item for item in items}
    ids = [item.id for item in items]

    clients = []
    evals = []
    prefs = {}
    for u in range(spec.n_users):
        uid = f"U{u}"
        pref = rng.dirichlet(np.full(T, spec.pref_concentration)) if T > 1 else np.ones(1)
        prefs[uid] = pref
        item_pref = pref[news_topic]
        p_click = np.minimum(0.95, spec.base_ctr * T * item_pref)

        n_hist = int(rng.integers(spec.history_len[0], spec.history_len[1] + 1))
        weights = item_pref + 1e-12
        hist_rows = rng.choice(spec.n_news, size=n_hist, replace=False, p=weights / weights.sum())
        history = [ids[r] for r in hist_rows]

        imps = []
        n_imp = int(rng.integers(spec.impressions_per_user[0], spec.impressions_per_user[1] + 1))
        for _ in range(n_imp):
            shown = rng.choice(spec.n_news, size=spec.candidates_per_impression, replace=False)
            probs = p_click[shown]
            clicks = rng.random(len(shown)) < probs
            if not clicks.any():
                w = probs / probs.sum()
                clicks[rng.choice(len(shown), p=w)] = True
            elif clicks.all():
                clicks[int(np.argmin(probs))] = False
            imps.append(Impression([ids[r] for r in shown], [bool(c) for c in clicks]))
        clients.append(ClientLog(uid, history, imps[:-1]))
        evals.append((uid, imps[-1]))

    truth = SynthTruth(news_topic.astype(np.int64), prefs)
    return Corpus(news, vocab, clients, evals, 0, truth)


def build_train_samples(client: ClientLog, P: int, rng, corpus: Corpus,
                        max_history_len: int | None = None) -> tuple[list[TrainSample], int]:
    """One sample per click, with ``P`` negatives from the same impression.

    Negatives are drawn without replacement when the impression has at least
    ``P`` of them and with replacement otherwise. Returns ``(samples,
    skipped)`` where ``skipped`` counts clicks whose impression had no
    negatives.
    """
    if P < 1:
        raise ValueError("P must be >= 1")
    index = corpus.index
    history = corpus.history_indices(client, max_history_len)
    samples = []
    skipped = 0
    for imp in client.train_impressions:
        negatives = [index[n] for n, c in zip(imp.shown, imp.clicks) if not c]
        for nid, clicked in zip(imp.shown, imp.clicks):
            if not clicked:
                continue
            if not negatives:
                skipped += 1
                continue
            negs = rng.choice(negatives, size=P, replace=len(negatives) < P)
            cands = np.concatenate([[index[nid]], negs]).astype(np.int64)
            labels = np.zeros(P + 1)
            labels[0] = 1.0
            perm = rng.permutation(P + 1)
            samples.append(TrainSample(history, cands[perm], labels[perm]))
    return samples, skipped
