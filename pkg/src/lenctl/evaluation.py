"""Length-fidelity and quality measurement.

MAE/SD over |generated - target| lengths, per-bucket breakdowns with outlier
rates, token-id ROUGE-1/2/L, paired Student t-tests on example-level errors
(in-house regularized incomplete beta, no statistics dependency), and length
density histograms. evaluate() drives generation over a corpus split under a
length policy and assembles everything into report files.
"""

from __future__ import annotations

import enum
import json
import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .compute import Tensor
from .corpus import TrainingExample
from .model import ModelConfig, generate

__all__ = [
    "GenerationRecord",
    "MaeSummary",
    "BucketReport",
    "RougeScores",
    "TTestResult",
    "HistogramBin",
    "LengthPolicy",
    "length_mae",
    "bucket_report",
    "rouge",
    "paired_t_test",
    "length_histogram",
    "evaluate",
    "write_reports",
    "read_records",
]

DEFAULT_OUTLIER_THRESHOLD = 20


class LengthPolicy(enum.Enum):
    REFERENCE = "reference"
    RANDOM_OOD = "random_ood"


@dataclass(frozen=True)
class GenerationRecord:
    example_id: int
    target_length: int
    generated_length: int
    cap_hit: bool
    generated: tuple[int, ...]
    reference: tuple[int, ...]

    @property
    def abs_error(self) -> int:
        return abs(self.generated_length - self.target_length)


@dataclass(frozen=True)
class MaeSummary:
    mae: float
    sd: float
    count: int
    cap_hit_rate: float


@dataclass(frozen=True)
class BucketReport:
    bucket_lo: int
    bucket_hi: int
    mae: float
    sd: float
    count: int
    outlier_rate: float


@dataclass(frozen=True)
class RougeScores:
    r1_f1: float
    r2_f1: float
    rl_f1: float


@dataclass(frozen=True)
class TTestResult:
    t: float
    p: float
    df: int
    zero_variance: bool


@dataclass(frozen=True)
class HistogramBin:
    bin_lo: int
    bin_hi: int
    count: int
    density: float


def length_mae(records: list[GenerationRecord]) -> MaeSummary:
    """Mean absolute length error and its population standard deviation."""
    if not records:
        raise ValueError("length_mae needs at least one record")
    errs = np.array([r.abs_error for r in records], dtype=np.float64)
    return MaeSummary(
        mae=float(errs.mean()),
        sd=float(errs.std()),
        count=len(records),
        cap_hit_rate=sum(r.cap_hit for r in records) / len(records),
    )


def bucket_report(
    records: list[GenerationRecord],
    bucket_width: int = 10,
    outlier_threshold: float = DEFAULT_OUTLIER_THRESHOLD,
) -> list[BucketReport]:
    """Group records by target length into [k*w, (k+1)*w) buckets.

    outlier_rate is the fraction of a bucket's records whose absolute error
    exceeds the threshold (20 tokens by default).
    """
    if bucket_width < 1:
        raise ValueError("bucket_width must be >= 1")
    groups: dict[int, list[GenerationRecord]] = {}
    for r in records:
        groups.setdefault(r.target_length // bucket_width, []).append(r)
    out = []
    for k in sorted(groups):
        errs = np.array([r.abs_error for r in groups[k]], dtype=np.float64)
        out.append(
            BucketReport(
                bucket_lo=k * bucket_width,
                bucket_hi=(k + 1) * bucket_width,
                mae=float(errs.mean()),
                sd=float(errs.std()),
                count=len(errs),
                outlier_rate=float((errs > outlier_threshold).mean()),
            )
        )
    return out


def _ngram_counts(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _f1(overlap: int, n_cand: int, n_ref: int) -> float:
    if overlap == 0 or n_cand == 0 or n_ref == 0:
        return 0.0
    p = overlap / n_cand
    r = overlap / n_ref
    return 2.0 * p * r / (p + r)


def _lcs_length(a, b) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0] * (len(b) + 1)
        for j, y in enumerate(b, start=1):
            cur[j] = prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1])
        prev = cur
    return prev[-1]


def rouge(candidate, reference) -> RougeScores:
    """Token-id ROUGE: clipped n-gram multiset F1 (R-1, R-2) and LCS F1 (R-L).

    An empty candidate against a nonempty reference (or vice versa) scores 0.
    """
    cand = list(candidate)
    ref = list(reference)
    scores = []
    for n in (1, 2):
        cc, rc = _ngram_counts(cand, n), _ngram_counts(ref, n)
        overlap = sum(min(c, rc[g]) for g, c in cc.items())
        scores.append(_f1(overlap, sum(cc.values()), sum(rc.values())))
    lcs = _lcs_length(cand, ref)
    scores.append(_f1(lcs, len(cand), len(ref)))
    return RougeScores(r1_f1=scores[0], r2_f1=scores[1], rl_f1=scores[2])


# ---------------------------------------------------------------------------
# paired t-test with an in-house incomplete beta


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, 300):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-14:
            return h
    raise RuntimeError("incomplete beta continued fraction did not converge")


def _betainc_reg(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_bt = (
        math.lgamma(a + b)
        - math.lgamma(a)
        - math.lgamma(b)
        + a * math.log(x)
        + b * math.log(1.0 - x)
    )
    bt = math.exp(ln_bt)
    if x < (a + 1.0) / (a + b + 2.0):
        return bt * _betacf(a, b, x) / a
    return 1.0 - bt * _betacf(b, a, 1.0 - x) / b


def _student_t_sf2(t: float, df: int) -> float:
    """Two-sided p-value for Student's t with df degrees of freedom."""
    return _betainc_reg(df / 2.0, 0.5, df / (df + t * t))


def paired_t_test(errors_a, errors_b) -> TTestResult:
    """Paired Student t-test on same-example error lists.

    Zero-variance differences are degenerate: identical lists report t=0
    with p=1; a constant nonzero difference reports t=+/-inf with p=0.
    Both are flagged via zero_variance.
    """
    a = np.asarray(errors_a, dtype=np.float64)
    b = np.asarray(errors_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"paired lists must have equal 1-D shapes, got {a.shape} and {b.shape}")
    n = a.size
    if n < 2:
        raise ValueError("paired t-test needs at least two pairs")
    d = a - b
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    df = n - 1
    if sd == 0.0:
        if mean == 0.0:
            return TTestResult(t=0.0, p=1.0, df=df, zero_variance=True)
        return TTestResult(t=math.copysign(math.inf, mean), p=0.0, df=df, zero_variance=True)
    t = mean / (sd / math.sqrt(n))
    return TTestResult(t=t, p=_student_t_sf2(t, df), df=df, zero_variance=False)


def length_histogram(lengths, bin_width: int = 5) -> list[HistogramBin]:
    """Density histogram of lengths with bins anchored at the minimum value.

    densities satisfy sum(density) * bin_width == 1 for nonempty input.
    """
    if bin_width < 1:
        raise ValueError("bin_width must be >= 1")
    vals = np.asarray(list(lengths), dtype=np.int64)
    if vals.size == 0:
        return []
    lo0 = int(vals.min())
    ks = (vals - lo0) // bin_width
    total = vals.size
    out = []
    for k in range(int(ks.max()) + 1):
        count = int((ks == k).sum())
        out.append(
            HistogramBin(
                bin_lo=lo0 + k * bin_width,
                bin_hi=lo0 + (k + 1) * bin_width,
                count=count,
                density=count / (total * bin_width),
            )
        )
    return out


# ---------------------------------------------------------------------------
# end-to-end evaluation


def _check_vocab(examples: list[TrainingExample], cfg: ModelConfig) -> None:
    top = max(
        max((max(ex.source, default=0) for ex in examples), default=0),
        max((max(ex.target, default=0) for ex in examples), default=0),
    )
    if top >= cfg.vocab_size:
        raise ValueError(
            f"corpus token id {top} out of range for checkpoint vocab_size {cfg.vocab_size}"
        )


def _target_length(ex: TrainingExample, idx: int, policy: LengthPolicy, ood_range, seed: int) -> int:
    if policy is LengthPolicy.REFERENCE:
        return ex.l
    lo, hi = ood_range
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, idx)))
    l = int(rng.integers(lo, hi + 1))
    if l > len(ex.source):
        raise ValueError(
            f"example {idx}: requested OOD length {l} exceeds source length {len(ex.source)}"
        )
    return l


def evaluate(
    params: dict[str, Tensor],
    cfg: ModelConfig,
    examples: list[TrainingExample],
    policy: LengthPolicy = LengthPolicy.REFERENCE,
    *,
    ood_range: tuple[int, int] | None = None,
    rng_seed: int = 0,
    workers: int = 1,
) -> list[GenerationRecord]:
    """Generate once per example under the length policy and collect records.

    REFERENCE uses each example's reference length; RANDOM_OOD draws lengths
    uniformly from ood_range with a per-example stream, so results do not
    depend on worker count. Records come back sorted by example id.
    """
    if not examples:
        raise ValueError("evaluate needs at least one example")
    if policy is LengthPolicy.RANDOM_OOD:
        if ood_range is None:
            raise ValueError("RANDOM_OOD policy requires ood_range")
        lo, hi = ood_range
        if lo < 1 or hi < lo:
            raise ValueError(f"bad ood_range {ood_range}")
    _check_vocab(examples, cfg)

    def run_one(idx_ex: tuple[int, TrainingExample]) -> GenerationRecord:
        idx, ex = idx_ex
        l = _target_length(ex, idx, policy, ood_range, rng_seed)
        res = generate(ex.source, l, params, cfg)
        reference = ex.target[:-1] if policy is LengthPolicy.REFERENCE else ex.source[:l]
        return GenerationRecord(
            example_id=idx,
            target_length=l,
            generated_length=len(res.tokens),
            cap_hit=res.cap_hit,
            generated=tuple(res.tokens),
            reference=tuple(reference),
        )

    items = list(enumerate(examples))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(run_one, items))
    else:
        records = [run_one(it) for it in items]
    return sorted(records, key=lambda r: r.example_id)


def rouge_summary(records: list[GenerationRecord]) -> RougeScores:
    """Mean ROUGE over records (candidate = generated, reference tokens)."""
    if not records:
        raise ValueError("rouge_summary needs at least one record")
    scores = [rouge(r.generated, r.reference) for r in records]
    return RougeScores(
        r1_f1=float(np.mean([s.r1_f1 for s in scores])),
        r2_f1=float(np.mean([s.r2_f1 for s in scores])),
        rl_f1=float(np.mean([s.rl_f1 for s in scores])),
    )


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(_fmt(v) for v in row) + "\n")


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def write_reports(
    out_dir: Path | str,
    records: list[GenerationRecord],
    *,
    bucket_width: int = 10,
    outlier_threshold: float = DEFAULT_OUTLIER_THRESHOLD,
    hist_bin_width: int = 5,
    ttest_against: list[GenerationRecord] | None = None,
) -> dict[str, Path]:
    """Write records.jsonl plus the CSV report suite into out_dir.

    When a comparison run is supplied, a paired t-test on example-level
    errors lands in ttest.csv as well.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths: dict[str, Path] = {}

    p = out_dir / "records.jsonl"
    with open(p, "w", encoding="utf-8") as f:
        for r in records:
            f.write(
                json.dumps(
                    {
                        "id": r.example_id,
                        "l": r.target_length,
                        "gen_len": r.generated_length,
                        "cap_hit": r.cap_hit,
                        "generated": list(r.generated),
                        "reference": list(r.reference),
                    },
                    separators=(",", ":"),
                )
                + "\n"
            )
    paths["records"] = p

    m = length_mae(records)
    p = out_dir / "mae_summary.csv"
    _write_csv(p, ["mae", "sd", "count", "cap_hit_rate"], [[m.mae, m.sd, m.count, m.cap_hit_rate]])
    paths["mae"] = p

    p = out_dir / "buckets.csv"
    _write_csv(
        p,
        ["bucket_lo", "bucket_hi", "mae", "sd", "count", "outlier_rate"],
        [
            [b.bucket_lo, b.bucket_hi, b.mae, b.sd, b.count, b.outlier_rate]
            for b in bucket_report(records, bucket_width, outlier_threshold)
        ],
    )
    paths["buckets"] = p

    rs = rouge_summary(records)
    p = out_dir / "rouge.csv"
    _write_csv(p, ["r1_f1", "r2_f1", "rl_f1"], [[rs.r1_f1, rs.r2_f1, rs.rl_f1]])
    paths["rouge"] = p

    ref_hist = length_histogram([r.target_length for r in records], hist_bin_width)
    gen_hist = length_histogram([r.generated_length for r in records], hist_bin_width)
    merged = _merge_histograms(ref_hist, gen_hist)
    p = out_dir / "length_density.csv"
    _write_csv(
        p,
        ["bin_lo", "bin_hi", "ref_count", "ref_density", "gen_count", "gen_density"],
        merged,
    )
    paths["density"] = p

    if ttest_against is not None:
        res = paired_t_test(
            [r.abs_error for r in records], [r.abs_error for r in ttest_against]
        )
        p = out_dir / "ttest.csv"
        _write_csv(p, ["t", "p", "df", "zero_variance"], [[res.t, res.p, res.df, res.zero_variance]])
        paths["ttest"] = p
    return paths


def _merge_histograms(ref: list[HistogramBin], gen: list[HistogramBin]) -> list[list]:
    by_lo: dict[int, list] = {}
    for b in ref:
        by_lo[b.bin_lo] = [b.bin_lo, b.bin_hi, b.count, b.density, 0, 0.0]
    for b in gen:
        row = by_lo.setdefault(b.bin_lo, [b.bin_lo, b.bin_hi, 0, 0.0, 0, 0.0])
        row[4] = b.count
        row[5] = b.density
    return [by_lo[k] for k in sorted(by_lo)]


def read_records(path) -> list[GenerationRecord]:
    out = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                out.append(
                    GenerationRecord(
                        example_id=int(rec["id"]),
                        target_length=int(rec["l"]),
                        generated_length=int(rec["gen_len"]),
                        cap_hit=bool(rec["cap_hit"]),
                        generated=tuple(rec["generated"]),
                        reference=tuple(rec["reference"]),
                    )
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise ValueError(f"{path}: line {lineno}: malformed record ({e})") from e
    return out
