"""Synthetic image/caption pairs with latent classes, caption-shuffling noise and JSON-lines I/O.

Randomness
----------
All draws derive from one integer seed through ``numpy.random.SeedSequence``:
``SeedSequence(seed).spawn(5)`` yields, in order, the streams for class
geometry, the train split, the val split, the test split and noise injection.

Each pair has a latent class and a small set of latent attributes. Image
regions sit around a class direction scaled by ``class_separation`` plus the
pair's attribute vectors; captions mix tokens from the class's vocabulary slice
with one token per attribute. Attributes make pairs distinguishable inside a
class, so retrieval has a unique correct answer.
"""

import json
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .exceptions import DatasetParseError, DatasetVersionError, InvalidSpecError

FORMAT_VERSION = 1
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class SyntheticSpec:
    n_classes: int = 16
    n_train: int = 2000
    n_val: int = 200
    n_test: int = 200
    class_separation: float = 2.0
    region_noise: float = 0.5
    attribute_scale: float = 1.0
    n_regions: int = 4
    feature_dim: int = 16
    tokens_per_caption: int = 8
    vocab_per_class: int = 8
    n_attributes: int = 64
    attributes_per_pair: int = 2
    vocab_size: int = 256
    noise_ratio: float = 0.0
    seed: int = 0

    def validate(self):
        """Raise ``InvalidSpecError`` naming the first offending field."""
        if self.n_classes < 2:
            raise InvalidSpecError("n_classes must be >= 2")
        for name in ("n_train", "n_val", "n_test", "n_regions", "feature_dim", "vocab_per_class"):
            if getattr(self, name) < 1:
                raise InvalidSpecError(f"{name} must be >= 1")
        if not 0.0 <= self.noise_ratio < 1.0:
            raise InvalidSpecError("noise_ratio must lie in [0, 1)")
        if self.class_separation < 0 or self.region_noise < 0 or self.attribute_scale < 0:
            raise InvalidSpecError("class_separation, region_noise and attribute_scale must be >= 0")
        if not 0 <= self.attributes_per_pair <= self.n_attributes:
            raise InvalidSpecError("attributes_per_pair must lie in [0, n_attributes]")
        if self.tokens_per_caption <= self.attributes_per_pair:
            raise InvalidSpecError("tokens_per_caption must exceed attributes_per_pair")
        needed = self.n_classes * self.vocab_per_class + self.n_attributes
        if needed > self.vocab_size:
            raise InvalidSpecError(
                f"vocab_size {self.vocab_size} too small: {self.n_classes} classes x "
                f"{self.vocab_per_class} tokens + {self.n_attributes} attributes = {needed}"
            )
        return self


@dataclass(frozen=True)
class PairRecord:
    id: int
    regions: np.ndarray
    tokens: tuple
    latent_class: int
    caption_class: int
    caption_id: int
    c: int


@dataclass
class Split:
    """Column-wise storage of one split; indexing yields ``PairRecord``."""

    ids: np.ndarray
    regions: np.ndarray  # (n, R, d)
    tokens: list
    latent_class: np.ndarray
    caption_class: np.ndarray
    caption_id: np.ndarray

    @property
    def c(self):
        return (self.latent_class == self.caption_class).astype(np.int64)

    def __len__(self):
        return len(self.ids)

    def __getitem__(self, i):
        return PairRecord(
            int(self.ids[i]),
            self.regions[i],
            tuple(int(t) for t in self.tokens[i]),
            int(self.latent_class[i]),
            int(self.caption_class[i]),
            int(self.caption_id[i]),
            int(self.c[i]),
        )

    def copy(self):
        return Split(
            self.ids.copy(),
            self.regions.copy(),
            [list(t) for t in self.tokens],
            self.latent_class.copy(),
            self.caption_class.copy(),
            self.caption_id.copy(),
        )


@dataclass
class DatasetBundle:
    train: Split
    val: Split
    test: Split
    spec: SyntheticSpec
    noise: dict = field(default_factory=dict)

    @property
    def realized_noise_ratio(self):
        c = self.train.c
        return round(float(np.mean(c == 0)), 4) if len(c) else 0.0

    def split(self, name):
        return getattr(self, name)

    @property
    def dims(self):
        _, R, d = self.train.regions.shape
        return {"n_regions": R, "feature_dim": d, "vocab_size": self.spec.vocab_size}


def _streams(seed):
    return np.random.SeedSequence(seed).spawn(5)


def _geometry(spec, ss):
    rng = np.random.default_rng(ss)
    dirs = rng.normal(size=(spec.n_classes, spec.feature_dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    attrs = rng.normal(size=(spec.n_attributes, spec.feature_dim))
    attrs *= spec.attribute_scale / np.sqrt(spec.feature_dim)
    return dirs * spec.class_separation, attrs


def _make_split(spec, n, means, attr_vecs, ss, id_offset):
    rng = np.random.default_rng(ss)
    classes = rng.permutation(np.arange(n) % spec.n_classes)
    A, R, d = spec.attributes_per_pair, spec.n_regions, spec.feature_dim
    regions = np.empty((n, R, d))
    tokens = []
    attr_base = spec.n_classes * spec.vocab_per_class
    n_class_tokens = spec.tokens_per_caption - A
    for i, k in enumerate(classes):
        attrs = rng.choice(spec.n_attributes, size=A, replace=False) if A else np.empty(0, int)
        region_attr = np.zeros((R, d))
        if A:
            region_attr = attr_vecs[attrs[np.arange(R) % A]]
        regions[i] = means[k] + region_attr + spec.region_noise * rng.normal(size=(R, d))
        toks = np.concatenate(
            [
                k * spec.vocab_per_class + rng.integers(0, spec.vocab_per_class, n_class_tokens),
                attr_base + attrs,
            ]
        )
        tokens.append([int(t) for t in rng.permutation(toks)])
    ids = np.arange(id_offset, id_offset + n)
    return Split(ids, np.round(regions, 6), tokens, classes.copy(), classes.copy(), ids.copy())


def generate_synthetic(spec):
    """Clean (fully matched) bundle determined entirely by ``spec.seed``."""
    spec.validate()
    geo, *split_streams, _ = _streams(spec.seed)
    means, attr_vecs = _geometry(spec, geo)
    sizes = (spec.n_train, spec.n_val, spec.n_test)
    out, offset = {}, 0
    for name, n, ss in zip(SPLITS, sizes, split_streams):
        out[name] = _make_split(spec, n, means, attr_vecs, ss, offset)
        offset += n
    return DatasetBundle(**out, spec=spec, noise={"rho": 0.0, "moved": 0, "fallback_swap": False})


def _derangement(rng, n):
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == np.arange(n)):
            return perm


def inject_noise(bundle, rho, seed):
    """Shuffle the captions of ``floor(rho * N)`` training pairs.

    The chosen captions are permuted among themselves with no fixed points.
    When exactly one index is chosen it swaps captions with a random unchosen
    index instead. Val and test are left untouched.
    """
    if not 0.0 <= rho < 1.0:
        raise InvalidSpecError("noise_ratio must lie in [0, 1)")
    rng = np.random.default_rng(_streams(seed)[4])
    train = bundle.train.copy()
    N = len(train)
    n_sel = math.floor(rho * N)
    fallback = False
    if n_sel >= 2:
        sel = np.sort(rng.choice(N, size=n_sel, replace=False))
        src = sel[_derangement(rng, n_sel)]
    elif n_sel == 1:
        fallback = True
        first = int(rng.integers(N))
        rest = np.delete(np.arange(N), first)
        other = int(rest[rng.integers(rest.size)])
        sel, src = np.array([first, other]), np.array([other, first])
    else:
        sel = src = np.empty(0, dtype=np.int64)
    old_tokens = [list(t) for t in train.tokens]
    old_cls, old_id = train.caption_class.copy(), train.caption_id.copy()
    for dst, s in zip(sel, src):
        train.tokens[dst] = old_tokens[s]
    train.caption_class[sel] = old_cls[src]
    train.caption_id[sel] = old_id[src]
    noise = {"rho": float(rho), "seed": int(seed), "moved": int(len(sel)), "fallback_swap": fallback}
    return DatasetBundle(train, bundle.val.copy(), bundle.test.copy(), bundle.spec, noise)


def build_dataset(spec):
    """Generate and then corrupt the training split at ``spec.noise_ratio``."""
    return inject_noise(generate_synthetic(spec), spec.noise_ratio, spec.seed)


# ---------------------------------------------------------------------------
# JSON-lines format
# ---------------------------------------------------------------------------
def _dumps(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def to_lines(bundle):
    """Canonical text lines of ``bundle`` (header first)."""
    header = {
        "format_version": FORMAT_VERSION,
        "spec": asdict(bundle.spec),
        "noise": bundle.noise,
        "realized_noise_ratio": bundle.realized_noise_ratio,
        "counts": {name: len(bundle.split(name)) for name in SPLITS},
    }
    lines = [_dumps(header)]
    for name in SPLITS:
        sp = bundle.split(name)
        for i in range(len(sp)):
            lines.append(
                _dumps(
                    {
                        "split": name,
                        "id": int(sp.ids[i]),
                        "regions": sp.regions[i].tolist(),
                        "tokens": [int(t) for t in sp.tokens[i]],
                        "latent_class": int(sp.latent_class[i]),
                        "caption_class": int(sp.caption_class[i]),
                        "caption_id": int(sp.caption_id[i]),
                        "c": int(sp.c[i]),
                    }
                )
            )
    return lines


def save_dataset(bundle, path):
    with open(path, "w", encoding="utf-8") as fh:
        for line in to_lines(bundle):
            fh.write(line + "\n")


_RECORD_KEYS = {"split", "id", "regions", "tokens", "latent_class", "caption_class", "caption_id", "c"}


def _parse(line, lineno):
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DatasetParseError(lineno, f"invalid JSON ({exc.msg})") from None
    if not isinstance(obj, dict):
        raise DatasetParseError(lineno, "expected a JSON object")
    return obj


def load_dataset(path):
    with open(path, encoding="utf-8") as fh:
        raw = fh.read()
    lines = raw.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise DatasetParseError(1, "empty file")
    header = _parse(lines[0], 1)
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise DatasetVersionError(version, FORMAT_VERSION)
    try:
        spec_fields = {f.name for f in fields(SyntheticSpec)}
        spec = SyntheticSpec(**{k: v for k, v in header["spec"].items() if k in spec_fields})
        counts = header["counts"]
        noise = header["noise"]
    except (KeyError, TypeError) as exc:
        raise DatasetParseError(1, f"malformed header ({exc})") from None

    cols = {name: {k: [] for k in _RECORD_KEYS - {"split"}} for name in SPLITS}
    for lineno, line in enumerate(lines[1:], start=2):
        rec = _parse(line, lineno)
        if set(rec) != _RECORD_KEYS or rec["split"] not in cols:
            raise DatasetParseError(lineno, "record has missing or unexpected fields")
        bucket = cols[rec["split"]]
        for k in bucket:
            bucket[k].append(rec[k])
        if not rec["tokens"]:
            raise DatasetParseError(lineno, "empty token sequence")
    splits = {}
    for name in SPLITS:
        col = cols[name]
        if len(col["id"]) != counts.get(name):
            raise DatasetParseError(
                len(lines) + 1,
                f"split '{name}' has {len(col['id'])} records, header promises {counts.get(name)}",
            )
        try:
            regions = np.asarray(col["regions"], dtype=np.float64)
            if regions.size == 0:
                regions = regions.reshape(0, spec.n_regions, spec.feature_dim)
        except ValueError:
            raise DatasetParseError(len(lines), f"ragged region arrays in split '{name}'") from None
        splits[name] = Split(
            np.asarray(col["id"], dtype=np.int64),
            regions,
            [list(t) for t in col["tokens"]],
            np.asarray(col["latent_class"], dtype=np.int64),
            np.asarray(col["caption_class"], dtype=np.int64),
            np.asarray(col["caption_id"], dtype=np.int64),
        )
        if np.any(splits[name].c != np.asarray(col["c"], dtype=np.int64)):
            raise DatasetParseError(1, f"stored c disagrees with latent classes in split '{name}'")
    return DatasetBundle(**splits, spec=spec, noise=noise)
