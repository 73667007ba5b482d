"""Boards, annotation files, synthetic data, batching, splits and templates."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import (
    ConfigError,
    InfeasibleSplitError,
    LabelError,
    MissingTemplateError,
    ParseError,
)
from .similarity import TripletBatch

EXTRA_MODES = ("none", "geometry", "label")
GEOMETRY_DIM = 6
TEMPLATE_STRATEGIES = ("random", "centroid", "kmeans")

# Ordered roughly from most to least common on a typical board.
COMPONENT_TYPES = (
    "resistor", "capacitor", "inductor", "ferrite_bead", "ic", "diode",
    "transistor", "led", "connector", "test_point", "crystal", "pad",
    "pin", "fuse", "switch", "relay", "potentiometer", "transformer",
    "battery", "button", "buzzer", "jumper", "emi_filter", "display",
)


@dataclass
class ComponentInstance:
    instance_id: str
    category: str
    bbox: tuple
    feature: np.ndarray
    score: float = 1.0

    @property
    def width(self) -> float:
        return self.bbox[2] - self.bbox[0]

    @property
    def height(self) -> float:
        return self.bbox[3] - self.bbox[1]


@dataclass
class BoardRecord:
    board_id: str
    width: int
    height: int
    instances: list[ComponentInstance]
    proposals: Optional[list[ComponentInstance]] = None

    @property
    def feature_dim(self) -> int:
        items = self.instances or self.proposals or []
        return len(items[0].feature) if items else 0

    def categories(self) -> list[str]:
        return sorted({inst.category for inst in self.instances})

    def by_category(self) -> dict[str, list[ComponentInstance]]:
        out: dict[str, list[ComponentInstance]] = {}
        for inst in self.instances:
            out.setdefault(inst.category, []).append(inst)
        return out

    def to_json(self) -> dict:
        doc = {
            "board_id": self.board_id,
            "width": self.width,
            "height": self.height,
            "feature_dim": self.feature_dim,
            "components": [
                {"id": c.instance_id, "category": c.category, "bbox": list(c.bbox),
                 "feature": c.feature.tolist()}
                for c in self.instances
            ],
        }
        if self.proposals is not None:
            doc["proposals"] = [
                {"id": c.instance_id, "bbox": list(c.bbox), "score": c.score,
                 "feature": c.feature.tolist()}
                for c in self.proposals
            ]
        return doc


def dataset_categories(boards: Sequence[BoardRecord]) -> list[str]:
    return sorted({c for b in boards for c in b.categories()})


# ---------------------------------------------------------------- file i/o

def _parse_bbox(raw, where: str, width=None, height=None) -> tuple:
    if not isinstance(raw, (list, tuple)) or len(raw) != 4:
        raise ParseError(f"{where}: bbox must be [x1, y1, x2, y2]")
    try:
        x1, y1, x2, y2 = (float(v) for v in raw)
    except (TypeError, ValueError):
        raise ParseError(f"{where}: bbox entries must be numbers") from None
    if not (x2 > x1 and y2 > y1):
        raise ParseError(f"{where}: degenerate bbox {list(raw)}")
    if width is not None and (x1 < 0 or y1 < 0 or x2 > width or y2 > height):
        raise ParseError(f"{where}: bbox {list(raw)} outside board {width}x{height}")
    return (x1, y1, x2, y2)


def _parse_feature(raw, where: str, dim: int) -> np.ndarray:
    try:
        feat = np.asarray(raw, dtype=np.float64)
    except (TypeError, ValueError):
        raise ParseError(f"{where}: feature must be a list of numbers") from None
    if feat.ndim != 1 or feat.shape[0] != dim:
        raise ParseError(f"{where}: feature dimension {feat.size} does not match feature_dim {dim}")
    if not np.all(np.isfinite(feat)):
        raise ParseError(f"{where}: feature has non-finite entries")
    return feat


def board_from_json(doc: dict, source: str = "<board>") -> BoardRecord:
    try:
        board_id = str(doc["board_id"])
        width = int(doc["width"])
        height = int(doc["height"])
        dim = int(doc["feature_dim"])
        comps = doc["components"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"{source}: missing or invalid field {exc}") from None
    if width <= 0 or height <= 0:
        raise ParseError(f"{source}: board dimensions must be positive")

    instances = []
    seen = set()
    for k, c in enumerate(comps):
        iid = str(c.get("id", k))
        where = f"{source}: component {iid!r}"
        if iid in seen:
            raise ParseError(f"{where}: duplicate id")
        seen.add(iid)
        category = c.get("category")
        if not isinstance(category, str) or not category:
            raise ParseError(f"{where}: category must be a nonempty string")
        instances.append(ComponentInstance(
            iid, category, _parse_bbox(c.get("bbox"), where, width, height),
            _parse_feature(c.get("feature"), where, dim), 1.0))

    proposals = None
    if doc.get("proposals") is not None:
        proposals = []
        for k, c in enumerate(doc["proposals"]):
            iid = str(c.get("id", k))
            where = f"{source}: proposal {iid!r}"
            try:
                score = float(c["score"])
            except (KeyError, TypeError, ValueError):
                raise ParseError(f"{where}: missing score") from None
            if not 0.0 <= score <= 1.0:
                raise ParseError(f"{where}: score {score} outside [0, 1]")
            proposals.append(ComponentInstance(
                iid, "", _parse_bbox(c.get("bbox"), where, width, height),
                _parse_feature(c.get("feature"), where, dim), score))
    return BoardRecord(board_id, width, height, instances, proposals)


def load_board(path) -> BoardRecord:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: malformed JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise ParseError(f"{path}: top level must be an object")
    return board_from_json(doc, str(path))


def save_board(board: BoardRecord, path):
    Path(path).write_text(json.dumps(board.to_json()), encoding="utf-8")


def board_files(directory) -> list[Path]:
    return sorted(p for p in Path(directory).glob("*.json") if not p.name.startswith("manifest"))


def load_dataset(directory) -> list[BoardRecord]:
    files = board_files(directory)
    if not files:
        raise FileNotFoundError(f"no board files in {directory}")
    boards = [load_board(p) for p in files]
    check_dataset(boards)
    return boards


def check_dataset(boards: Sequence[BoardRecord]):
    dims = {b.feature_dim for b in boards if b.feature_dim}
    if len(dims) > 1:
        raise ParseError(f"feature dimensions differ across boards: {sorted(dims)}")
    ids = [b.board_id for b in boards]
    if len(set(ids)) != len(ids):
        raise ParseError("board ids are not unique")


def save_dataset(boards: Sequence[BoardRecord], directory) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for b in boards:
        p = directory / f"{b.board_id}.json"
        save_board(b, p)
        paths.append(p)
    return paths


# ---------------------------------------------------------------- synthetic

@dataclass
class SyntheticConfig:
    """Generator settings.

    Board-level shift has three parts: a perturbed per-board copy of each
    category prototype (``sigma_board``), a per-dimension gain and a
    per-dimension offset. ``sigma_inst`` is the spread of instances around
    their board prototype. Noise vectors are drawn from N(0, I/d), so both
    sigmas are in units of the (unit) prototype norm.
    """

    n_boards: int = 60
    n_categories: int = 12
    feature_dim: int = 64
    sigma_board: float = 0.4
    sigma_inst: float = 0.1
    gain_range: tuple = (0.5, 1.5)
    bias_range: tuple = (0.0, 1.0)
    class_similarity: float = 0.5
    group_size: int = 3
    max_instances: int = 20
    imbalance: float = 1.0
    min_presence: float = 0.35
    board_size: tuple = (800, 2000)
    proposals: bool = True
    proposal_recall: float = 0.85
    proposal_noise: float = 0.05
    false_proposals: int = 6
    noise_scale: Optional[float] = None
    seed: int = 0

    def validate(self):
        if self.n_boards < 1 or self.feature_dim < 1 or self.max_instances < 1:
            raise ConfigError("counts must be positive")
        if not 1 <= self.n_categories <= len(COMPONENT_TYPES):
            raise ConfigError(
                f"n_categories must be in 1..{len(COMPONENT_TYPES)}, got {self.n_categories}")
        if self.sigma_board < 0 or self.sigma_inst < 0:
            raise ConfigError("sigmas must be nonnegative")
        if not (self.sigma_inst < self.sigma_board or self.sigma_board == self.sigma_inst == 0):
            raise ConfigError("sigma_inst must be smaller than sigma_board")
        if self.gain_range[0] > self.gain_range[1] or self.bias_range[0] > self.bias_range[1]:
            raise ConfigError("ranges must be (low, high)")
        if not 0 <= self.class_similarity < 1 or self.group_size < 1:
            raise ConfigError("class_similarity must lie in [0, 1) and group_size be positive")
        if not 0 <= self.min_presence <= 1 or not 0 <= self.proposal_recall <= 1:
            raise ConfigError("probabilities must lie in [0, 1]")


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _place_box(rng, width, height, bw, bh, placed, tries=10):
    bw = min(bw, width - 1)
    bh = min(bh, height - 1)
    box = None
    for _ in range(tries):
        x1 = rng.uniform(0, width - bw)
        y1 = rng.uniform(0, height - bh)
        box = (x1, y1, x1 + bw, y1 + bh)
        if not any(box[0] < p[2] and p[0] < box[2] and box[1] < p[3] and p[1] < box[3]
                   for p in placed):
            break
    return box


def _jitter_box(rng, box, width, height, frac):
    w, h = box[2] - box[0], box[3] - box[1]
    dx, dy = rng.uniform(-frac, frac, 2) * (w, h)
    sw, sh = 1.0 + rng.uniform(-frac, frac, 2)
    nw, nh = w * sw, h * sh
    x1 = min(max(box[0] + dx, 0.0), width - nw)
    y1 = min(max(box[1] + dy, 0.0), height - nh)
    return (x1, y1, x1 + nw, y1 + nh)


def generate_synthetic_dataset(cfg: SyntheticConfig) -> list[BoardRecord]:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    d, n_cls = cfg.feature_dim, cfg.n_categories
    names = COMPONENT_TYPES[:n_cls]
    # categories in the same group share a direction (low inter-class variance)
    n_groups = -(-n_cls // cfg.group_size)
    group_dirs = _unit(rng.standard_normal((n_groups, d)))
    own = _unit(rng.standard_normal((n_cls, d)))
    rho = cfg.class_similarity
    protos = _unit(math.sqrt(rho) * group_dirs[np.arange(n_cls) % n_groups]
                   + math.sqrt(1.0 - rho) * own)
    # typical footprint per category, log-uniform size and aspect
    base_size = np.exp(rng.uniform(np.log(12), np.log(120), n_cls))
    base_aspect = np.exp(rng.uniform(-1.0, 1.0, n_cls))
    ranks = np.arange(n_cls)
    presence = 1.0 - (1.0 - cfg.min_presence) * ranks / max(n_cls - 1, 1)

    scale = 1.0 / math.sqrt(d) if cfg.noise_scale is None else cfg.noise_scale

    boards = []
    for b in range(cfg.n_boards):
        board_id = f"board{b:03d}"
        width = int(rng.integers(cfg.board_size[0], cfg.board_size[1] + 1))
        height = int(rng.integers(cfg.board_size[0], cfg.board_size[1] + 1))
        gain = rng.uniform(cfg.gain_range[0], cfg.gain_range[1], d)
        offset = rng.uniform(cfg.bias_range[0], cfg.bias_range[1], d)
        present = np.flatnonzero(rng.random(n_cls) < presence)
        if len(present) < min(2, n_cls):
            present = np.sort(rng.choice(n_cls, min(2, n_cls), replace=False))

        instances, placed = [], []
        for c in present:
            board_proto = _unit(protos[c] + cfg.sigma_board * scale * rng.standard_normal(d))
            count = max(1, int(round(cfg.max_instances * (c + 1.0) ** (-cfg.imbalance)
                                     * rng.uniform(0.5, 1.5))))
            for _ in range(count):
                feat = board_proto * gain + offset \
                    + cfg.sigma_inst * scale * rng.standard_normal(d)
                size = base_size[c] * rng.uniform(0.85, 1.15)
                asp = base_aspect[c]
                box = _place_box(rng, width, height, size * math.sqrt(asp),
                                 size / math.sqrt(asp), placed)
                placed.append(box)
                iid = f"{board_id}-c{len(instances):03d}"
                instances.append(ComponentInstance(iid, names[c], box, feat))

        proposals = None
        if cfg.proposals:
            proposals = []
            for inst in instances:
                if rng.random() >= cfg.proposal_recall:
                    continue
                box = _jitter_box(rng, inst.bbox, width, height, 0.1)
                feat = inst.feature + cfg.proposal_noise * scale * rng.standard_normal(d)
                proposals.append(ComponentInstance(
                    f"{board_id}-p{len(proposals):03d}", "", box, feat,
                    float(rng.uniform(0.35, 1.0))))
            for _ in range(cfg.false_proposals):
                size = float(np.exp(rng.uniform(np.log(12), np.log(120))))
                box = _place_box(rng, width, height, size, size, [], tries=1)
                feat = _unit(rng.standard_normal(d)) * gain + offset
                proposals.append(ComponentInstance(
                    f"{board_id}-p{len(proposals):03d}", "", box, feat,
                    float(rng.uniform(0.0, 0.7))))
        boards.append(BoardRecord(board_id, width, height, instances, proposals))
    return boards


def perfect_proposals(board: BoardRecord) -> BoardRecord:
    """Copy of ``board`` whose proposals are exactly its ground-truth instances."""
    props = [ComponentInstance(f"{c.instance_id}-prop", "", c.bbox, c.feature.copy(), 1.0)
             for c in board.instances]
    return BoardRecord(board.board_id, board.width, board.height, board.instances, props)


# ---------------------------------------------------------------- extra features

def geometry_features(bbox, width, height) -> np.ndarray:
    x1, y1, x2, y2 = bbox
    w, h = x2 - x1, y2 - y1
    return np.array([
        (x1 + x2) / 2.0 / width,
        (y1 + y2) / 2.0 / height,
        w / width,
        h / height,
        math.log(w / h),
        math.sqrt(w * h) / math.sqrt(width * height),
    ])


def extra_dim(mode: str, n_categories: int) -> int:
    if mode == "none":
        return 0
    if mode == "geometry":
        return GEOMETRY_DIM
    if mode == "label":
        return n_categories + 1
    raise ConfigError(f"unknown extra-feature mode {mode!r}")


def label_features(category: Optional[str], labeled: bool, categories: Sequence[str]) -> np.ndarray:
    out = np.zeros(len(categories) + 1)
    if labeled:
        try:
            out[list(categories).index(category)] = 1.0
        except ValueError:
            raise LabelError(f"unknown category {category!r}") from None
        out[-1] = 1.0
    return out


def augment_node_features(instance: ComponentInstance, mode: str, board_size,
                          categories: Sequence[str] = (), labeled: bool = False) -> np.ndarray:
    """Append geometry or label channels to a visual feature.

    ``board_size`` is ``(width, height)`` (a BoardRecord is accepted too).
    Label mode encodes the category only for labeled (template) nodes.
    """
    if isinstance(board_size, BoardRecord):
        board_size = (board_size.width, board_size.height)
    if mode == "none":
        return instance.feature.copy()
    if mode == "geometry":
        extra = geometry_features(instance.bbox, *board_size)
    elif mode == "label":
        extra = label_features(instance.category, labeled, categories)
    else:
        raise ConfigError(f"unknown extra-feature mode {mode!r}")
    return np.concatenate([instance.feature, extra])


def augment_matrix(features: np.ndarray, instances, board_sizes, labeled, mode: str,
                   categories: Sequence[str]) -> np.ndarray:
    """Row-wise :func:`augment_node_features`, with ``features`` overriding the
    instances' own visual features (e.g. after jitter)."""
    if mode == "none":
        return features
    if mode == "geometry":
        extra = np.array([geometry_features(inst.bbox, *bs)
                          for inst, bs in zip(instances, board_sizes)])
    elif mode == "label":
        extra = np.array([label_features(inst.category, lab, categories)
                          for inst, lab in zip(instances, labeled)])
    else:
        raise ConfigError(f"unknown extra-feature mode {mode!r}")
    return np.concatenate([features, extra.reshape(len(features), -1)], axis=1)


# ---------------------------------------------------------------- batching

@dataclass
class SampledBatch(TripletBatch):
    """A triplet batch that remembers where each row came from."""

    instances: list = field(default_factory=list)
    board_sizes: list = field(default_factory=list)
    is_template: Optional[np.ndarray] = None


def _draw(rng, n_items: int, n: int) -> np.ndarray:
    """Draw ``n`` indices; every item at least once before any repeats."""
    if n <= n_items:
        return rng.choice(n_items, n, replace=False)
    extra = rng.choice(n_items, n - n_items, replace=True)
    return np.concatenate([rng.permutation(n_items), extra])


def feature_std(boards: Sequence[BoardRecord]) -> np.ndarray:
    feats = np.array([c.feature for b in boards for c in b.instances])
    return feats.std(axis=0)


def sample_training_batch(boards: Sequence[BoardRecord], mode: str, n_way: int, k_shot: int,
                          jitter_sigma, rng: np.random.Generator,
                          margin: float = 1.0) -> SampledBatch:
    """N-way K-shot batch from one board (``within``) or the whole set (``across``).

    Categories and instances are drawn without replacement when enough exist
    and topped up with replacement otherwise. Each row receives Gaussian
    jitter of scale ``jitter_sigma`` (scalar or per-dimension). The first
    drawn instance of every way is flagged as the labeled template.
    """
    boards = [b for b in boards if b.instances]
    if not boards or n_way < 1 or k_shot < 1:
        raise ConfigError("batch sampling needs a nonempty dataset and positive N, K")
    if mode == "within":
        board = boards[int(rng.integers(len(boards)))]
        pools = {c: [(inst, board) for inst in insts] for c, insts in board.by_category().items()}
    elif mode == "across":
        pools = {}
        for board in boards:
            for c, insts in board.by_category().items():
                pools.setdefault(c, []).extend((inst, board) for inst in insts)
    else:
        raise ConfigError(f"unknown batching mode {mode!r}")

    cats = sorted(pools)
    picked = []
    flags = []
    for ci in _draw(rng, len(cats), n_way):
        pool = pools[cats[ci]]
        for j, ii in enumerate(_draw(rng, len(pool), k_shot)):
            picked.append(pool[ii])
            flags.append(j == 0)

    feats = np.array([inst.feature for inst, _ in picked])
    sigma = np.asarray(jitter_sigma, dtype=np.float64)
    if np.any(sigma > 0):
        feats = feats + rng.standard_normal(feats.shape) * sigma
    return SampledBatch(
        features=feats,
        categories=np.array([inst.category for inst, _ in picked]),
        board_ids=[b.board_id for _, b in picked],
        margin=margin,
        instances=[inst for inst, _ in picked],
        board_sizes=[(b.width, b.height) for _, b in picked],
        is_template=np.array(flags),
    )


# ---------------------------------------------------------------- splits

@dataclass
class Fold:
    train: list[str]
    test: list[str]


@dataclass
class SplitConfig:
    folds: list[Fold]

    def to_json(self) -> dict:
        return {"folds": [{"train": f.train, "test": f.test} for f in self.folds]}

    @classmethod
    def from_json(cls, doc: dict) -> "SplitConfig":
        try:
            return cls([Fold(list(f["train"]), list(f["test"])) for f in doc["folds"]])
        except (KeyError, TypeError) as exc:
            raise ParseError(f"malformed split file: {exc}") from None

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=1), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "SplitConfig":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: malformed JSON ({exc})") from None
        return cls.from_json(doc)


def covering_boards(boards: Sequence[BoardRecord], rng: np.random.Generator,
                    prefer: Optional[set] = None) -> set[str]:
    """Random greedy set of boards that together contain every category.

    Boards in ``prefer`` are chosen first whenever they can cover a category.
    """
    prefer = prefer or set()
    holders: dict[str, list[str]] = {}
    for b in boards:
        for c in b.categories():
            holders.setdefault(c, []).append(b.board_id)
    cats_of = {b.board_id: set(b.categories()) for b in boards}
    chosen: set[str] = set()
    covered: set[str] = set()
    for ci in rng.permutation(len(holders)):
        c = sorted(holders)[ci]
        if c in covered:
            continue
        options = holders[c]
        preferred = [o for o in options if o in prefer]
        pool = preferred or options
        pick = pool[int(rng.integers(len(pool)))]
        chosen.add(pick)
        covered |= cats_of[pick]
    return chosen


def check_coverage(boards: Sequence[BoardRecord], train_ids, test_ids) -> set[str]:
    """Categories on test boards that no training board carries."""
    by_id = {b.board_id: b for b in boards}
    train_cats = {c for i in train_ids for c in by_id[i].categories()}
    test_cats = {c for i in test_ids for c in by_id[i].categories()}
    return test_cats - train_cats


def make_cv_splits(boards: Sequence[BoardRecord], folds: int = 3,
                   rng: Optional[np.random.Generator] = None,
                   test_size: Optional[int] = None) -> SplitConfig:
    """Cross-validation folds with disjoint test sets and full type coverage.

    Per fold, a covering set of boards is forced into training; the test set
    is then drawn from boards not yet tested in earlier folds.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    ids = [b.board_id for b in boards]
    if folds < 1 or len(ids) < folds:
        raise InfeasibleSplitError(f"need at least {folds} boards, have {len(ids)}")
    if test_size is None:
        test_size = len(ids) // folds
    if test_size < 1:
        raise InfeasibleSplitError("test set would be empty")

    untested = set(ids)
    out = []
    for _ in range(folds):
        already_tested = set(ids) - untested
        forced = covering_boards(boards, rng, prefer=already_tested)
        candidates = sorted(untested - forced)
        if len(candidates) < test_size:
            raise InfeasibleSplitError(
                f"only {len(candidates)} boards available for a test set of {test_size}")
        test = sorted(rng.choice(candidates, test_size, replace=False).tolist())
        train = sorted(set(ids) - set(test))
        missing = check_coverage(boards, train, test)
        if missing:
            raise InfeasibleSplitError(f"categories missing from training: {sorted(missing)}")
        untested -= set(test)
        out.append(Fold(train, test))
    return SplitConfig(out)


def holdout_boards(boards: Sequence[BoardRecord], fraction: float,
                   rng: np.random.Generator) -> tuple[list[BoardRecord], list[BoardRecord]]:
    """Split off about ``fraction`` of the boards, keeping coverage in the remainder."""
    n_hold = int(round(fraction * len(boards)))
    if n_hold < 1 or len(boards) < 2:
        return list(boards), []
    forced = covering_boards(boards, rng)
    free = sorted(b.board_id for b in boards if b.board_id not in forced)
    n_hold = min(n_hold, len(free))
    held = set(rng.choice(free, n_hold, replace=False).tolist()) if n_hold else set()
    return ([b for b in boards if b.board_id not in held],
            [b for b in boards if b.board_id in held])


# ---------------------------------------------------------------- templates

@dataclass
class Template:
    category: str
    instance: ComponentInstance
    board_size: tuple
    board_id: Optional[str] = None

    @property
    def feature(self) -> np.ndarray:
        return self.instance.feature


def _pooled(boards: Sequence[BoardRecord]):
    pools: dict[str, list[tuple[ComponentInstance, BoardRecord]]] = {}
    for b in boards:
        for inst in b.instances:
            pools.setdefault(inst.category, []).append((inst, b))
    return pools


def _nearest_to_centroid(items):
    feats = np.array([inst.feature for inst, _ in items])
    d2 = ((feats - feats.mean(axis=0)) ** 2).sum(axis=1)
    return items[int(np.argmin(d2))]


def choose_k_by_silhouette(feats: np.ndarray, seed: int, k_max: int = 8):
    """Best k in 2..min(k_max, n-1) by mean silhouette; returns (k, centers)."""
    from sklearn.cluster import KMeans
    from sklearn.metrics import silhouette_score

    best = None
    distinct = len(np.unique(feats, axis=0))
    for k in range(2, min(k_max, len(feats) - 1, distinct) + 1):
        km = KMeans(n_clusters=k, n_init=10, random_state=seed).fit(feats)
        if not 2 <= len(np.unique(km.labels_)) <= len(feats) - 1:
            continue
        score = silhouette_score(feats, km.labels_, metric="euclidean")
        if best is None or score > best[0]:
            best = (score, k, km.cluster_centers_)
    if best is None:
        return None
    return best[1], best[2]


def select_templates(source, strategy: str, rng: np.random.Generator,
                     categories: Optional[Sequence[str]] = None) -> dict[str, list[Template]]:
    """Pick templates per category.

    ``random`` draws one labeled instance per category from a single board
    (``source`` is a BoardRecord). ``centroid`` and ``kmeans`` work on a list
    of training boards: the instance nearest its category centroid, or the
    k-means centers with k chosen by silhouette (categories with fewer than
    four instances fall back to the centroid rule).
    """
    if strategy == "random":
        if not isinstance(source, BoardRecord):
            raise ConfigError("random templates are drawn from a single board")
        pools = _pooled([source])
    elif strategy in ("centroid", "kmeans"):
        boards = [source] if isinstance(source, BoardRecord) else list(source)
        pools = _pooled(boards)
    else:
        raise ConfigError(f"unknown template strategy {strategy!r}")

    wanted = list(categories) if categories is not None else sorted(pools)
    missing = [c for c in wanted if c not in pools]
    if missing:
        raise MissingTemplateError(missing)

    out: dict[str, list[Template]] = {}
    for c in wanted:
        items = pools[c]
        if strategy == "random":
            inst, b = items[int(rng.integers(len(items)))]
            out[c] = [Template(c, inst, (b.width, b.height), b.board_id)]
            continue
        if strategy == "kmeans" and len(items) >= 4:
            feats = np.array([inst.feature for inst, _ in items])
            found = choose_k_by_silhouette(feats, int(rng.integers(2**31 - 1)))
            if found is not None:
                _, centers = found
                temps = []
                for j, center in enumerate(centers):
                    # borrow geometry from the member closest to the center
                    near_inst, near_b = items[int(np.argmin(((feats - center) ** 2).sum(axis=1)))]
                    inst = ComponentInstance(f"{c}-center{j}", c, near_inst.bbox, center.copy())
                    temps.append(Template(c, inst, (near_b.width, near_b.height)))
                out[c] = temps
                continue
        inst, b = _nearest_to_centroid(items)
        out[c] = [Template(c, inst, (b.width, b.height), b.board_id)]
    return out
