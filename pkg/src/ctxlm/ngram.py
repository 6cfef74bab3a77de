"""Count-based n-gram language model with interpolated modified Kneser-Ney smoothing.

Counting is per sentence with (order-1) begin-of-sentence padding tokens and a
trailing end-of-sentence token; n-grams never cross sentence boundaries and
never end in the padding token. The highest order interpolates raw counts;
every lower order uses continuation counts (number of distinct left contexts);
the base distribution is uniform over the vocabulary, which keeps every
probability strictly positive.
"""

import logging
import math
from collections import Counter
from dataclasses import dataclass

from .corpus import Document, Sentence

log = logging.getLogger(__name__)

BOS = -1  # context-only padding id, never in the vocabulary and never predicted

DEFAULT_ORDER = 5
FALLBACK_DISCOUNT = 0.5  # used when count-of-counts give no usable discount


@dataclass(frozen=True)
class OrderDiscounts:
    d1: float
    d2: float
    d3plus: float

    def applied(self, count: int) -> float:
        if count <= 0:
            return 0.0
        if count == 1:
            return self.d1
        if count == 2:
            return self.d2
        return self.d3plus


@dataclass(frozen=True)
class DiscountSet:
    per_order: dict[int, OrderDiscounts]

    def applied(self, order: int, count: int) -> float:
        return self.per_order[order].applied(count)


class NGramTable:
    """N-gram statistics: raw counts per order plus derived continuation counts.

    ``counts[k]`` maps k-tuples of token ids to occurrence counts. Derived
    structures (context totals, continuation counts, per-context discount
    buckets) are built once by ``_freeze`` after counting.
    """

    def __init__(self, order: int, vocab_size: int):
        if order < 1:
            raise ValueError("order must be at least 1")
        if vocab_size < 2:
            raise ValueError("vocab_size must cover the reserved ids")
        self.order = order
        self.vocab_size = vocab_size
        self.counts: dict[int, dict[tuple[int, ...], int]] = {k: {} for k in range(1, order + 1)}
        self._frozen = False
        self._discounts: DiscountSet | None = None

    # -- counting ------------------------------------------------------------

    def add_sentence(self, sentence: Sentence) -> None:
        if self._frozen:
            raise RuntimeError("table already frozen")
        seq = (BOS,) * (self.order - 1) + sentence.token_ids
        start = self.order - 1
        for i in range(start, len(seq)):
            for k in range(1, self.order + 1):
                gram = seq[i - k + 1 : i + 1]
                m = self.counts[k]
                m[gram] = m.get(gram, 0) + 1

    def _freeze(self) -> None:
        if self._frozen:
            return
        # raw context totals per order: sum over final word
        self._ctx_total: dict[int, dict[tuple[int, ...], int]] = {}
        for k in range(1, self.order + 1):
            totals: dict[tuple[int, ...], int] = {}
            for gram, c in self.counts[k].items():
                h = gram[:-1]
                totals[h] = totals.get(h, 0) + c
            self._ctx_total[k] = totals
        # continuation counts: distinct left extensions of each k-gram
        self._cont: dict[int, dict[tuple[int, ...], int]] = {}
        self._cont_total: dict[int, dict[tuple[int, ...], int]] = {}
        for k in range(1, self.order):
            seen: set[tuple[int, ...]] = set(self.counts[k + 1])
            cont: dict[tuple[int, ...], int] = {}
            for gram in seen:
                suffix = gram[1:]
                cont[suffix] = cont.get(suffix, 0) + 1
            self._cont[k] = cont
            totals = {}
            for gram, c in cont.items():
                h = gram[:-1]
                totals[h] = totals.get(h, 0) + c
            self._cont_total[k] = totals
        # per-context buckets of effective counts: (#count==1, #count==2, #count>=3)
        self._buckets: dict[int, dict[tuple[int, ...], list[int]]] = {}
        for k in range(1, self.order + 1):
            buckets: dict[tuple[int, ...], list[int]] = {}
            for gram, c in self._effective_counts(k).items():
                h = gram[:-1]
                b = buckets.setdefault(h, [0, 0, 0])
                b[min(c, 3) - 1] += 1
            self._buckets[k] = buckets
        self._frozen = True

    def _effective_counts(self, order: int) -> dict[tuple[int, ...], int]:
        """Counts the recursion at this order distributes: raw at the top, continuation below."""
        if order == self.order:
            return self.counts[order]
        return self._cont[order]

    def _effective_total(self, order: int, context: tuple[int, ...]) -> int:
        if order == self.order:
            return self._ctx_total[order].get(context, 0)
        return self._cont_total[order].get(context, 0)

    # -- discounts -----------------------------------------------------------

    def count_of_counts(self, order: int) -> tuple[int, int, int, int]:
        """n1..n4 over the effective counts at this order, recomputed from the maps."""
        self._freeze()
        tally = Counter(self._effective_counts(order).values())
        return tally[1], tally[2], tally[3], tally[4]

    @property
    def discounts(self) -> DiscountSet:
        if self._discounts is None:
            self._discounts = estimate_discounts(self)
        return self._discounts

    # -- queries -------------------------------------------------------------

    def probability(self, word: int, context: tuple[int, ...] = ()) -> float:
        """Interpolated modified-KN probability of a vocabulary word after a context."""
        if not 0 <= word < self.vocab_size:
            raise ValueError(f"word id {word} outside vocabulary of size {self.vocab_size}")
        self._freeze()
        ds = self.discounts
        context = tuple(context)
        if len(context) > self.order - 1:
            context = context[len(context) - (self.order - 1):]
        return self._interp(word, context, ds)

    def _interp(self, word: int, context: tuple[int, ...], ds: DiscountSet) -> float:
        k = len(context) + 1
        if k == 1:
            total = self._effective_total(1, ())
            uniform = 1.0 / self.vocab_size
            if total == 0:
                return uniform
            c = self._effective_counts(1).get((word,), 0)
            gamma = self._gamma(1, (), total, ds)
            return max(c - ds.applied(1, c), 0.0) / total + gamma * uniform
        total = self._effective_total(k, context)
        if total == 0:
            return self._interp(word, context[1:], ds)
        c = self._effective_counts(k).get(context + (word,), 0)
        gamma = self._gamma(k, context, total, ds)
        return max(c - ds.applied(k, c), 0.0) / total + gamma * self._interp(word, context[1:], ds)

    def _gamma(self, order: int, context: tuple[int, ...], total: int, ds: DiscountSet) -> float:
        n1, n2, n3p = self._buckets[order].get(context, (0, 0, 0))
        d = ds.per_order[order]
        return (d.d1 * n1 + d.d2 * n2 + d.d3plus * n3p) / total


def count_ngrams(documents: list[Document], order: int, vocab_size: int) -> NGramTable:
    if order < 1:
        raise ValueError("order must be at least 1")
    table = NGramTable(order, vocab_size)
    for doc in documents:
        for sent in doc.sentences:
            table.add_sentence(sent)
    table._freeze()
    return table


def estimate_discounts(table: NGramTable) -> DiscountSet:
    """Three discounts per order from count-of-counts: Y = n1/(n1+2*n2),
    D1 = 1 - 2*Y*n2/n1, D2 = 2 - 3*Y*n3/n2, D3+ = 3 - 4*Y*n4/n3.

    Orders with degenerate count-of-counts (a zero denominator) or a
    non-positive D2/D3+ fall back to the single discount D = Y, keeping
    every discount in (0, 1] so unseen events always retain mass.
    """
    per_order = {}
    for k in range(1, table.order + 1):
        n1, n2, n3, n4 = table.count_of_counts(k)
        if n1 == 0 and n2 == 0:
            # order carries no types at all (or only duplicates beyond 2); any
            # positive discount keeps the interpolation positive
            if len(table._effective_counts(k)) == 0:
                per_order[k] = OrderDiscounts(0.0, 0.0, 0.0)
            else:
                log.warning("order %d: no singleton/doubleton types, using D=%.2f", k, FALLBACK_DISCOUNT)
                d = FALLBACK_DISCOUNT
                per_order[k] = OrderDiscounts(d, d, d)
            continue
        y = n1 / (n1 + 2.0 * n2)
        if n1 > 0 and n2 > 0 and n3 > 0:
            d1 = 1.0 - 2.0 * y * n2 / n1
            d2 = 2.0 - 3.0 * y * n3 / n2
            d3p = 3.0 - 4.0 * y * n4 / n3
            if d2 > 0.0 and d3p > 0.0:
                per_order[k] = OrderDiscounts(d1, d2, d3p)
                continue
            log.warning("order %d: non-positive modified discounts, falling back to D=Y", k)
        else:
            log.warning("order %d: degenerate count-of-counts, falling back to D=Y", k)
        d = y if y > 0.0 else FALLBACK_DISCOUNT
        per_order[k] = OrderDiscounts(d, d, d)
    return DiscountSet(per_order)


def sentence_log_probability(sentence: Sentence, table: NGramTable) -> float:
    """Natural-log probability of a sentence (EOS included) with begin padding."""
    seq = (BOS,) * (table.order - 1) + sentence.token_ids
    start = table.order - 1
    total = 0.0
    for i in range(start, len(seq)):
        ctx = seq[i - table.order + 1 : i]
        total += math.log(table.probability(seq[i], ctx))
    return total


def write_arpa(table: NGramTable, vocab, stream) -> None:
    """Conventional text export: per line log10 prob, tab, tokens, tab, log10 backoff."""
    table._freeze()

    def render(tid: int) -> str:
        return "<s>" if tid == BOS else vocab.decode(tid)

    def log10(x: float) -> float:
        return math.log10(x) if x > 0 else -99.0

    ds = table.discounts
    # context-only prefixes (begin-padding) get a placeholder probability line
    # so that their backoff weights have somewhere to live
    listed: dict[int, list[tuple[int, ...]]] = {}
    for k in range(1, table.order + 1):
        grams = set(table.counts[k])
        if k < table.order:
            grams.update(h for h in table._ctx_total[k + 1] if h not in grams)
        listed[k] = sorted(grams)
    stream.write("\\data\\\n")
    for k in range(1, table.order + 1):
        stream.write(f"ngram {k}={len(listed[k])}\n")
    stream.write("\n")
    for k in range(1, table.order + 1):
        stream.write(f"\\{k}-grams:\n")
        for gram in listed[k]:
            prob = table._interp(gram[-1], gram[:-1], ds) if gram[-1] != BOS else 0.0
            line = f"{log10(prob):.7f}\t{' '.join(render(t) for t in gram)}"
            if k < table.order:
                total = table._effective_total(k + 1, gram)
                if total > 0:
                    line += f"\t{log10(table._gamma(k + 1, gram, total, ds)):.7f}"
            stream.write(line + "\n")
        stream.write("\n")
    stream.write("\\end\\\n")
