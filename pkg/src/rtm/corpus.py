"""Document-network corpora: loading, validation, folds, and synthesis.

A corpus is a set of documents over a shared vocabulary plus an
undirected link set.  Documents are sparse term-count vectors; links are
unordered index pairs with no self-links.  File formats:

  docs file    one document per line: `M term:count [term:count ...]`
               where M is the number of entries on the line, ids 0-based
  vocab file   one token per line; the token on line i has id i
  links file   one `d1 d2` pair per line, whitespace separated, 0-based

Directed link files are collapsed to undirected pairs and duplicates are
removed.  Documents with no links are kept in memory (with a warning
from the loader); `drop_isolated` reproduces pipelines that discard them.
"""

import logging

from dataclasses import dataclass, field

import numpy as np

from .linkfn import LinkParams, link_probability

logger = logging.getLogger(__name__)


class CorpusFormatError(ValueError):
    """Raised for malformed or inconsistent corpus files."""


class Corpus:
    """Immutable bag-of-words corpus with an undirected link set.

    Construction validates all invariants: term ids within the
    vocabulary, link endpoints within range, no self-links, each
    document nonempty.  Instances are safe to share across threads.
    """

    def __init__(self, vocab, docs, links=()):
        self.vocab = list(vocab)
        if not docs:
            raise ValueError("corpus must contain at least one document")
        self.doc_terms = []
        self.doc_counts = []
        num_terms = len(self.vocab)
        for d, doc in enumerate(docs):
            merged = {}
            for term, count in doc:
                term = int(term)
                count = int(count)
                if not 0 <= term < num_terms:
                    raise ValueError(
                        f"doc {d}: term id {term} out of range [0, {num_terms})")
                if count < 1:
                    raise ValueError(f"doc {d}: term {term} has count {count} < 1")
                merged[term] = merged.get(term, 0) + count
            if not merged:
                raise ValueError(f"doc {d} has no tokens")
            terms = np.array(sorted(merged), dtype=np.int64)
            self.doc_terms.append(terms)
            self.doc_counts.append(np.array([merged[t] for t in terms], dtype=np.int64))

        num_docs = len(self.doc_terms)
        pairs = set()
        for d1, d2 in links:
            d1, d2 = int(d1), int(d2)
            if d1 == d2:
                raise ValueError(f"self-link on document {d1}")
            if not (0 <= d1 < num_docs and 0 <= d2 < num_docs):
                raise ValueError(f"link ({d1}, {d2}) out of range [0, {num_docs})")
            pairs.add((min(d1, d2), max(d1, d2)))
        self.links = np.array(sorted(pairs), dtype=np.int64).reshape(-1, 2)

        self.lengths = np.array([c.sum() for c in self.doc_counts], dtype=np.int64)
        neighbors = [[] for _ in range(num_docs)]
        for d1, d2 in self.links:
            neighbors[d1].append(d2)
            neighbors[d2].append(d1)
        self.neighbors = [np.array(sorted(ns), dtype=np.int64) for ns in neighbors]

    @property
    def num_docs(self):
        return len(self.doc_terms)

    @property
    def num_terms(self):
        return len(self.vocab)

    @property
    def num_links(self):
        return self.links.shape[0]

    def doc(self, d):
        """(terms, counts) arrays for document d."""
        return self.doc_terms[d], self.doc_counts[d]

    def link_set(self):
        return {(int(a), int(b)) for a, b in self.links}

    def isolated_docs(self):
        degree = np.zeros(self.num_docs, dtype=np.int64)
        for d1, d2 in self.links:
            degree[d1] += 1
            degree[d2] += 1
        return np.flatnonzero(degree == 0)


def _parse_doc_line(line, lineno, num_terms):
    parts = line.split()
    try:
        declared = int(parts[0])
    except (ValueError, IndexError):
        raise CorpusFormatError(f"docs line {lineno}: missing entry count") from None
    entries = parts[1:]
    if len(entries) != declared:
        raise CorpusFormatError(
            f"docs line {lineno}: declares {declared} entries, found {len(entries)}")
    if declared == 0:
        raise CorpusFormatError(f"docs line {lineno}: zero-length document")
    doc = []
    for entry in entries:
        term_s, sep, count_s = entry.partition(":")
        if not sep:
            raise CorpusFormatError(
                f"docs line {lineno}: malformed entry {entry!r} (expected term:count)")
        try:
            term, count = int(term_s), int(count_s)
        except ValueError:
            raise CorpusFormatError(
                f"docs line {lineno}: malformed entry {entry!r}") from None
        if not 0 <= term < num_terms:
            raise CorpusFormatError(
                f"docs line {lineno}: term id {term} out of range [0, {num_terms})")
        if count < 1:
            raise CorpusFormatError(f"docs line {lineno}: count must be >= 1")
        doc.append((term, count))
    return doc


def load_corpus(docs_path, vocab_path, links_path=None, drop_isolated=False):
    """Load and validate a corpus from the documented file formats.

    Links are optional; directed input is collapsed to undirected pairs.
    With drop_isolated=True, documents that participate in no link are
    removed and the remainder renumbered.
    """
    with open(vocab_path, encoding="utf-8") as fh:
        vocab = [line.rstrip("\n") for line in fh]
    vocab = [v for v in vocab if v != ""] if vocab and vocab[-1] == "" else vocab
    num_terms = len(vocab)

    docs = []
    with open(docs_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            docs.append(_parse_doc_line(line, lineno, num_terms))
    if not docs:
        raise CorpusFormatError(f"no documents found in {docs_path}")

    links = []
    if links_path is not None:
        with open(links_path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                parts = line.split()
                if len(parts) != 2:
                    raise CorpusFormatError(
                        f"links line {lineno}: expected two indices, got {line.strip()!r}")
                try:
                    d1, d2 = int(parts[0]), int(parts[1])
                except ValueError:
                    raise CorpusFormatError(
                        f"links line {lineno}: non-integer index in {line.strip()!r}"
                    ) from None
                if d1 == d2:
                    raise CorpusFormatError(f"links line {lineno}: self-link on {d1}")
                if not (0 <= d1 < len(docs) and 0 <= d2 < len(docs)):
                    raise CorpusFormatError(
                        f"links line {lineno}: index out of range [0, {len(docs)})")
                links.append((d1, d2))

    corpus = Corpus(vocab, docs, links)
    isolated = corpus.isolated_docs()
    if drop_isolated and isolated.size:
        corpus, _ = drop_isolated_docs(corpus)
    elif isolated.size:
        logger.warning("corpus has %d documents with no links", isolated.size)
    return corpus


def write_corpus(corpus, docs_path, vocab_path, links_path):
    """Write a corpus back out in the same formats the loader reads."""
    with open(vocab_path, "w", encoding="utf-8") as fh:
        for token in corpus.vocab:
            fh.write(token + "\n")
    with open(docs_path, "w", encoding="utf-8") as fh:
        for terms, counts in zip(corpus.doc_terms, corpus.doc_counts):
            entries = " ".join(f"{t}:{c}" for t, c in zip(terms, counts))
            fh.write(f"{len(terms)} {entries}\n")
    with open(links_path, "w", encoding="utf-8") as fh:
        for d1, d2 in corpus.links:
            fh.write(f"{d1} {d2}\n")


def drop_isolated_docs(corpus):
    """Remove documents with no links; returns (new corpus, kept indices)."""
    isolated = set(int(d) for d in corpus.isolated_docs())
    kept = [d for d in range(corpus.num_docs) if d not in isolated]
    return subcorpus(corpus, kept), np.array(kept, dtype=np.int64)


def subcorpus(corpus, doc_ids):
    """Corpus restricted to doc_ids (renumbered in the given order).

    Links with an endpoint outside doc_ids are dropped.
    """
    doc_ids = [int(d) for d in doc_ids]
    remap = {d: i for i, d in enumerate(doc_ids)}
    docs = [list(zip(corpus.doc_terms[d], corpus.doc_counts[d])) for d in doc_ids]
    links = [(remap[a], remap[b]) for a, b in corpus.link_set()
             if a in remap and b in remap]
    return Corpus(corpus.vocab, docs, links)


@dataclass
class FoldPlan:
    """Per-document fold assignment for k-fold evaluation."""

    assignments: np.ndarray
    k: int
    seed: int

    def test_docs(self, fold):
        return np.flatnonzero(self.assignments == fold)

    def train_docs(self, fold):
        return np.flatnonzero(self.assignments != fold)


def split_folds(corpus, k, seed):
    """Assign documents to k balanced folds, uniformly at random.

    Deterministic given the seed; fold sizes differ by at most one.
    """
    d = corpus.num_docs
    if not 2 <= k <= d:
        raise ValueError(f"fold count {k} out of range [2, {d}]")
    rng = np.random.default_rng(seed)
    assignments = np.empty(d, dtype=np.int64)
    assignments[rng.permutation(d)] = np.arange(d) % k
    return FoldPlan(assignments=assignments, k=k, seed=seed)


def training_view(corpus, plan, fold):
    """Training corpus for one fold: test documents and their links removed.

    Returns (train corpus, original indices of the training docs).
    """
    train_ids = plan.train_docs(fold)
    return subcorpus(corpus, train_ids), train_ids


@dataclass
class SyntheticTruth:
    """Ground-truth parameters and latents behind a synthetic corpus."""

    beta: np.ndarray
    alpha: np.ndarray
    eta: np.ndarray
    nu: float
    theta: np.ndarray
    zbar: np.ndarray
    link_params: LinkParams = field(repr=False, default=None)


def block_topics(num_topics, num_terms):
    """Row-stochastic topics with disjoint uniform vocabulary blocks."""
    if num_terms < num_topics:
        raise ValueError("need at least one term per topic")
    beta = np.zeros((num_topics, num_terms))
    bounds = np.linspace(0, num_terms, num_topics + 1).astype(int)
    for k in range(num_topics):
        beta[k, bounds[k]:bounds[k + 1]] = 1.0 / (bounds[k + 1] - bounds[k])
    return beta


def sample_pair_links(zbar_left, zbar_right, params, rng):
    """Bernoulli link indicators for rows of paired mean-assignment vectors."""
    zbar_left = np.atleast_2d(zbar_left)
    zbar_right = np.atleast_2d(zbar_right)
    probs = np.array([link_probability(params, a, b)
                      for a, b in zip(zbar_left, zbar_right)])
    return rng.random(probs.shape[0]) < probs


def generate_synthetic(num_topics, num_terms, num_docs, doc_length, alpha,
                       eta, nu, link_fn, seed, beta=None):
    """Sample a document network from the generative model.

    Each document draws topic proportions from Dirichlet(alpha), then
    doc_length topic assignments and words; each unordered document pair
    draws a link indicator from the chosen link function evaluated at the
    two empirical mean assignment vectors.  Only positive links are
    recorded.  Deterministic given the seed.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.ndim == 0:
        alpha = np.full(num_topics, float(alpha))
    if alpha.shape != (num_topics,) or np.any(alpha <= 0):
        raise ValueError("alpha must be a positive vector of length num_topics")
    params = LinkParams(eta=eta, nu=nu, kind=link_fn)
    params.check_admissible()
    if beta is None:
        beta = block_topics(num_topics, num_terms)
    else:
        beta = np.asarray(beta, dtype=np.float64)

    rng = np.random.default_rng(seed)
    theta = rng.dirichlet(alpha, size=num_docs)
    zbar = np.empty((num_docs, num_topics))
    docs = []
    for d in range(num_docs):
        topic_counts = rng.multinomial(doc_length, theta[d])
        zbar[d] = topic_counts / doc_length
        word_counts = np.zeros(num_terms, dtype=np.int64)
        for k in np.flatnonzero(topic_counts):
            word_counts += rng.multinomial(topic_counts[k], beta[k])
        terms = np.flatnonzero(word_counts)
        docs.append([(int(t), int(word_counts[t])) for t in terms])

    left, right = np.triu_indices(num_docs, k=1)
    linked = sample_pair_links(zbar[left], zbar[right], params, rng)
    links = list(zip(left[linked], right[linked]))

    truth = SyntheticTruth(beta=beta, alpha=alpha, eta=params.eta, nu=params.nu,
                           theta=theta, zbar=zbar, link_params=params)
    return Corpus([f"w{j}" for j in range(num_terms)], docs, links), truth
