"""Event logs, sessionization, filtering, time splits and the synthetic generator."""

from __future__ import annotations

import hashlib
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from itertools import groupby
from pathlib import Path

import numpy as np

from .page_encoder import WebPage, WeakLabelRecord, tokenize
from .taxonomy import GoalTaxonomy

SESSION_GAP = 30 * 60
DAY = 86400
START_TS = 1_590_969_600  # 2020-06-01T00:00:00Z


@dataclass(frozen=True)
class EventRecord:
    user_id: str
    ts: float
    host: str
    title: str
    page_id: str

    def __post_init__(self):
        if self.ts < 0:
            raise ValueError("timestamps must be nonnegative")
        if not self.page_id:
            raise ValueError("page_id must be nonempty")

    def to_json(self) -> dict:
        return {"user_id": self.user_id, "ts": self.ts, "host": self.host,
                "title": self.title, "page_id": self.page_id}


@dataclass(frozen=True)
class Visit:
    page: WebPage
    ts: float


@dataclass
class BrowsingSession:
    session_id: str
    user_id: str
    visits: list[Visit]

    def __len__(self):
        return len(self.visits)

    @property
    def start(self) -> float:
        return self.visits[0].ts

    @property
    def page_ids(self) -> list[str]:
        return [v.page.page_id for v in self.visits]


def derive_page_id(host: str, title: str) -> str:
    """Stable identity for raw-log pages: hash of host plus normalised title."""
    key = host.strip().lower() + "\n" + " ".join(tokenize(title))
    return hashlib.sha1(key.encode("utf-8")).hexdigest()[:16]


def read_events(path) -> list[EventRecord]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        r = json.loads(line)
        pid = r.get("page_id") or derive_page_id(r["host"], r["title"])
        out.append(EventRecord(str(r["user_id"]), float(r["ts"]), r["host"], r["title"], pid))
    return out


def write_events(events, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in events:
            fh.write(json.dumps(e.to_json(), sort_keys=True) + "\n")


def segment_sessions(events, gap: float = SESSION_GAP) -> list[BrowsingSession]:
    """Split each user's time-sorted events wherever consecutive events are >= gap apart.

    Events of one user must be contiguous and sorted by time.
    """
    sessions: list[BrowsingSession] = []
    seen_users = set()
    for user, group in groupby(events, key=lambda e: e.user_id):
        if user in seen_users:
            raise ValueError(f"events of user {user!r} are not contiguous")
        seen_users.add(user)
        current: list[Visit] = []
        prev_ts = None
        count = 0
        for e in group:
            if prev_ts is not None and e.ts < prev_ts:
                raise ValueError(f"events of user {user!r} are not sorted by time")
            if prev_ts is not None and e.ts - prev_ts >= gap:
                sessions.append(BrowsingSession(f"{user}#{count}", user, current))
                count += 1
                current = []
            current.append(Visit(WebPage.from_title(e.page_id, e.host, e.title), e.ts))
            prev_ts = e.ts
        if current:
            sessions.append(BrowsingSession(f"{user}#{count}", user, current))
    return sessions


def sessions_to_events(sessions) -> list[EventRecord]:
    return [EventRecord(s.user_id, v.ts, v.page.host, v.page.title, v.page.page_id)
            for s in sessions for v in s.visits]


def apply_frequency_filters(sessions, min_page_count: int = 10, min_session_len: int = 10):
    """Drop rare pages corpus-wide, then drop sessions left too short.

    Dropping sessions can push further pages under the count, so both steps
    repeat until nothing changes; this keeps the filter idempotent.
    """
    out = list(sessions)
    while True:
        counts = Counter(v.page.page_id for s in out for v in s.visits)
        nxt = []
        for s in out:
            kept = [v for v in s.visits if counts[v.page.page_id] >= min_page_count]
            if len(kept) >= min_session_len:
                nxt.append(s if len(kept) == len(s.visits) else BrowsingSession(s.session_id, s.user_id, kept))
        if len(nxt) == len(out) and all(len(a) == len(b) for a, b in zip(nxt, out)):
            return nxt
        out = nxt


@dataclass(frozen=True)
class SplitSpec:
    t0: float
    t1: float
    t2: float

    def __post_init__(self):
        if not self.t0 < self.t1 < self.t2:
            raise ValueError("split needs t0 < t1 < t2")


def split_warm_cold(sessions, spec: SplitSpec) -> dict[str, list[BrowsingSession]]:
    """Sessions are placed by start time; test users with any train session are warm."""
    train = [s for s in sessions if spec.t0 <= s.start < spec.t1]
    test = [s for s in sessions if spec.t1 <= s.start < spec.t2]
    warm_users = {s.user_id for s in train}
    return {
        "train": train,
        "test_warm": [s for s in test if s.user_id in warm_users],
        "test_cold": [s for s in test if s.user_id not in warm_users],
    }


def sessions_by_user(sessions) -> dict[str, list[BrowsingSession]]:
    out: dict[str, list[BrowsingSession]] = {}
    for s in sorted(sessions, key=lambda s: (s.user_id, s.start)):
        out.setdefault(s.user_id, []).append(s)
    return out


# -- synthetic generator ---------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    n_users: int = 500
    n_goals: int = 0  # 0 -> every leaf goal
    hosts_per_goal: int = 4
    generic_hosts: int = 8
    p_generic_host: float = 0.6
    pages_per_goal: int = 80
    vocab_per_goal: int = 60
    category_vocab: int = 30
    shared_vocab: int = 120
    p_goal_word: float = 0.6
    p_category_word: float = 0.2
    title_len: tuple[int, int] = (3, 7)
    core_goals: tuple[int, int] = (2, 3)
    favorites_per_goal: int = 4
    p_favorite: float = 0.9
    mixture_concentration: float = 0.5
    persistent_goals: bool = True
    category_affinity: tuple[float, ...] = ()  # empty -> evenly spaced in (0, 1]
    fastest_gap_hours: float = 1.0
    slowest_gap_hours: float = 144.0
    gap_sigma: float = 0.6
    p_active_day: float = 0.25
    sessions_per_day: tuple[int, int] = (1, 3)
    core_burst: tuple[int, int] = (6, 12)
    explore_burst: tuple[int, int] = (3, 7)
    explore_goals: tuple[int, int] = (1, 3)
    n_popular: int = 10
    p_popular: float = 0.1
    period_days: int = 30
    train_days: int = 23
    horizon_days: int = 14  # activity after the period, only used to label revisits
    explore_from_mixture: bool = False
    explore_repeats: bool = False  # explore bursts reuse a session-local favourite set like core bursts
    cold_user_fraction: float = 0.15
    weak_per_goal: int = 200
    weak_nongoal: int = 200
    start_ts: int = START_TS
    seed: int = 0

    def __post_init__(self):
        for name in ("n_users", "hosts_per_goal", "pages_per_goal", "vocab_per_goal", "favorites_per_goal"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if any(not 0 < a <= 1 for a in self.category_affinity):
            raise ValueError("category affinities must lie in (0, 1]")
        if not 0 < self.train_days < self.period_days:
            raise ValueError("train_days must fall strictly inside the period")

    @property
    def split(self) -> SplitSpec:
        return SplitSpec(self.start_ts, self.start_ts + self.train_days * DAY,
                         self.start_ts + self.period_days * DAY)


@dataclass
class SynthWorld:
    """Goal-specific pools every synthetic page and weak label is drawn from."""

    goals: list[int]
    category: dict[int, int]
    affinity: dict[int, float]
    goal_words: dict[int, list[str]]
    category_words: dict[int, list[str]]
    shared_words: list[str]
    goal_hosts: dict[int, list[str]]
    generic_hosts: list[str]
    pages: dict[int, list[WebPage]]
    popular: list[WebPage]
    page_goal: dict[str, int] = field(default_factory=dict)


def _title(rng, cfg: SynthConfig, world: SynthWorld, goal: int | None) -> str:
    n = int(rng.integers(cfg.title_len[0], cfg.title_len[1] + 1))
    words = []
    for _ in range(n):
        u = rng.random()
        if goal is not None and u < cfg.p_goal_word:
            pool = world.goal_words[goal]
        elif goal is not None and u < cfg.p_goal_word + cfg.p_category_word and world.category_words[world.category[goal]]:
            pool = world.category_words[world.category[goal]]
        else:
            pool = world.shared_words
        words.append(pool[int(rng.integers(len(pool)))])
    return " ".join(words)


def _host(rng, cfg: SynthConfig, world: SynthWorld, goal: int) -> str:
    if world.generic_hosts and rng.random() < cfg.p_generic_host:
        return world.generic_hosts[int(rng.integers(len(world.generic_hosts)))]
    pool = world.goal_hosts[goal]
    return pool[int(rng.integers(len(pool)))]


def build_world(cfg: SynthConfig, taxonomy: GoalTaxonomy, rng) -> SynthWorld:
    goals = taxonomy.leaves if cfg.n_goals <= 0 else taxonomy.leaves[:cfg.n_goals]
    cats = sorted({taxonomy.category_of(g) for g in goals})
    if cfg.category_affinity:
        if len(cfg.category_affinity) != len(cats):
            raise ValueError(f"need {len(cats)} category affinities, got {len(cfg.category_affinity)}")
        affinity = dict(zip(cats, cfg.category_affinity))
    else:
        affinity = {c: (i + 1) / len(cats) for i, c in enumerate(cats)}
    world = SynthWorld(
        goals=goals,
        category={g: taxonomy.category_of(g) for g in goals},
        affinity=affinity,
        goal_words={g: [f"g{g}w{i}" for i in range(cfg.vocab_per_goal)] for g in goals},
        category_words={c: [f"c{c}w{i}" for i in range(cfg.category_vocab)] for c in cats},
        shared_words=[f"sw{i}" for i in range(cfg.shared_vocab)],
        goal_hosts={g: [f"site{g}-{i}.example" for i in range(cfg.hosts_per_goal)] for g in goals},
        generic_hosts=[f"portal{i}.example" for i in range(cfg.generic_hosts)],
        pages={},
        popular=[],
    )
    for g in goals:
        world.pages[g] = [
            WebPage.from_title(f"p{g}-{j}", _host(rng, cfg, world, g), _title(rng, cfg, world, g))
            for j in range(cfg.pages_per_goal)
        ]
        for p in world.pages[g]:
            world.page_goal[p.page_id] = g
    world.popular = [
        WebPage.from_title(f"pop-{j}", f"popular{j}.example", _title(rng, cfg, world, None))
        for j in range(cfg.n_popular)
    ]
    for p in world.popular:
        world.page_goal[p.page_id] = taxonomy.root
    return world


def engagement_gap_hours(cfg: SynthConfig, affinity: float) -> float:
    """Median gap between engagements: high affinity -> fastest, low -> slowest."""
    lo, hi = math.log(cfg.fastest_gap_hours), math.log(cfg.slowest_gap_hours)
    return math.exp(hi + affinity * (lo - hi))


def _random_merge(rng, bursts):
    """Interleave bursts uniformly at random, keeping each burst's order."""
    owners = np.concatenate([np.full(len(b), i) for i, b in enumerate(bursts)]) if bursts else np.array([])
    rng.shuffle(owners)
    pos = [0] * len(bursts)
    out = []
    for o in owners.astype(int):
        out.append(bursts[o][pos[o]])
        pos[o] += 1
    return out


def synth_generate(cfg: SynthConfig, taxonomy: GoalTaxonomy):
    """Returns (events, sidecar, weak_records).

    The sidecar holds the true goal and category of every page, per-user
    core goals and cold flags, the category affinities and, aligned with
    the event stream, each event's true goal and kind (core/explore/popular).
    """
    rng = np.random.default_rng(cfg.seed)
    world = build_world(cfg, taxonomy, rng)
    goals = world.goals
    events: list[EventRecord] = []
    event_meta: list[list] = []
    users_meta = {}
    n_cold = int(round(cfg.n_users * cfg.cold_user_fraction))
    for u in range(cfg.n_users):
        uid = f"u{u:04d}"
        cold = u >= cfg.n_users - n_cold
        mixture = rng.dirichlet(np.full(len(goals), cfg.mixture_concentration))
        k_core = int(rng.integers(cfg.core_goals[0], cfg.core_goals[1] + 1))
        core = [goals[i] for i in sorted(rng.choice(len(goals), size=min(k_core, len(goals)), replace=False, p=mixture))]
        favorites = {g: [world.pages[g][i] for i in rng.choice(cfg.pages_per_goal, size=min(cfg.favorites_per_goal, cfg.pages_per_goal), replace=False)]
                     for g in core}
        due = {g: 0.0 for g in core}
        users_meta[uid] = {"core_goals": core, "cold": cold}
        first_day = cfg.train_days if cold else 0
        for day in range(first_day, cfg.period_days + cfg.horizon_days):
            if rng.random() >= cfg.p_active_day:
                continue
            n_sessions = int(rng.integers(cfg.sessions_per_day[0], cfg.sessions_per_day[1] + 1))
            t = cfg.start_ts + day * DAY + rng.uniform(7, 11) * 3600
            for _ in range(n_sessions):
                if cfg.persistent_goals:
                    focal = [g for g in core if t >= due[g]]
                    for g in focal:
                        med = engagement_gap_hours(cfg, world.affinity[world.category[g]])
                        due[g] = t + 3600 * med * math.exp(cfg.gap_sigma * rng.standard_normal())
                    session_favs = favorites
                else:
                    pick = rng.choice(len(goals), size=min(k_core, len(goals)), replace=False)
                    focal = [goals[i] for i in sorted(pick)][: int(rng.integers(1, 3))]
                    session_favs = {g: [world.pages[g][i] for i in rng.choice(cfg.pages_per_goal, size=cfg.favorites_per_goal, replace=False)]
                                    for g in focal}
                n_explore = int(rng.integers(cfg.explore_goals[0], cfg.explore_goals[1] + 1))
                if not focal:
                    n_explore = max(n_explore, 1)
                explore_p = mixture if cfg.explore_from_mixture else None
                explore = [goals[i] for i in rng.choice(len(goals), size=n_explore, p=explore_p)]
                bursts = []
                for g in focal:
                    n = int(rng.integers(cfg.core_burst[0], cfg.core_burst[1] + 1))
                    burst = []
                    for _ in range(n):
                        if rng.random() < cfg.p_favorite:
                            fav = session_favs[g]
                            burst.append((fav[int(rng.integers(len(fav)))], g, "core"))
                        else:
                            burst.append((world.pages[g][int(rng.integers(cfg.pages_per_goal))], g, "core"))
                    bursts.append(burst)
                for g in explore:
                    n = int(rng.integers(cfg.explore_burst[0], cfg.explore_burst[1] + 1))
                    if cfg.explore_repeats:
                        local = [world.pages[g][i] for i in rng.choice(cfg.pages_per_goal, size=min(cfg.favorites_per_goal, cfg.pages_per_goal), replace=False)]
                        pick = [local[int(rng.integers(len(local)))] if rng.random() < cfg.p_favorite
                                else world.pages[g][int(rng.integers(cfg.pages_per_goal))] for _ in range(n)]
                    else:
                        pick = [world.pages[g][int(rng.integers(cfg.pages_per_goal))] for _ in range(n)]
                    bursts.append([(page, g, "explore") for page in pick])
                visits = _random_merge(rng, bursts)
                for page, g, kind in visits:
                    if world.popular and rng.random() < cfg.p_popular:
                        pop = world.popular[int(rng.integers(len(world.popular)))]
                        events.append(EventRecord(uid, round(t, 3), pop.host, pop.title, pop.page_id))
                        event_meta.append([taxonomy.root, "popular"])
                        t += rng.uniform(10, 240)
                    events.append(EventRecord(uid, round(t, 3), page.host, page.title, page.page_id))
                    event_meta.append([g, kind])
                    t += rng.uniform(10, 240)
                t += rng.uniform(40 * 60, 5 * 3600)
    weak = make_weak_labels(cfg, world, taxonomy, rng)
    sidecar = {
        "pages": {pid: {"goal_id": g, "category_id": taxonomy.category_of(g)}
                  for pid, g in sorted(world.page_goal.items())},
        "users": users_meta,
        "category_affinity": {str(c): a for c, a in world.affinity.items()},
        "events": event_meta,
        "split": {"t0": cfg.split.t0, "t1": cfg.split.t1, "t2": cfg.split.t2},
    }
    return events, sidecar, weak


def make_weak_labels(cfg: SynthConfig, world: SynthWorld, taxonomy: GoalTaxonomy, rng) -> list[WeakLabelRecord]:
    out = []
    for g in world.goals:
        for i in range(cfg.weak_per_goal):
            page = WebPage.from_title(f"weak-{g}-{i}", _host(rng, cfg, world, g), _title(rng, cfg, world, g))
            out.append(WeakLabelRecord(page, g))
    for i in range(cfg.weak_nongoal):
        host = f"random{int(rng.integers(50))}.example"
        out.append(WeakLabelRecord(WebPage.from_title(f"weak-none-{i}", host, _title(rng, cfg, world, None)), taxonomy.root))
    return out


def write_sidecar(sidecar: dict, path) -> None:
    Path(path).write_text(json.dumps(sidecar, sort_keys=True) + "\n", encoding="utf-8")


def read_sidecar(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))
