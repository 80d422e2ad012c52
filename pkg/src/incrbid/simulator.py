"""Synthetic real-time-bidding market with known ground truth.

Each user sees Poisson auction opportunities over ``[0, T]``.  For every
opportunity the advertiser forms a ghost bid ``g`` (lognormal), submits it
with probability ``p`` (per bid or per user) and wins if ``g`` clears an
independent lognormal clearing price, paying that price.  Conversions follow
an inhomogeneous Poisson process with intensity

    lambda_i(t) = alpha_i(t) + sum_k beta_k * x_ik(t)

over the true ad stock keys, drawn by thinning.  Baseline candidates are
shared with an ads-off twin, so the difference between factual and twin
conversion counts is exactly the number of conversions caused by ads.

Times are in seconds.
"""

from __future__ import annotations

import json
import logging
import math
from collections.abc import Mapping
from dataclasses import dataclass, field, fields
from typing import IO, Any

import numpy as np
from scipy import special, stats

from .events import BidTable, EventStore, dump_timelines
from .features import AD_STOCK, FeatureKey, _bisect_left_segments
from .kernels import KernelSpec, cdf, fourier_residual_array, pdf

log = logging.getLogger(__name__)

BID_LEVEL = "BidLevel"
USER_LEVEL = "UserLevel"
CONFOUNDING = ("none", "TargetedProspects")
FEEDBACK = ("none", "NegativeTargeting", "FrequencyCap")


class MarketConfigError(ValueError):
    pass


@dataclass
class MarketConfig:
    """Market and ground-truth parameters.

    ``alpha_base`` is the mean baseline conversion rate per second; each
    user's rate is scaled by a mean-one lognormal factor with log-sd
    ``alpha_dispersion`` and modulated by ``1 + alpha_amplitude * sin(2 pi t /
    alpha_period + alpha_phase)``.  Auction rates are scaled likewise by
    ``rate_dispersion``; under ``TargetedProspects`` the two log-factors have
    correlation ``rho``.  ``rate_segments`` optionally lists
    ``[share, multiplier]`` pairs for segment-level rate heterogeneity.
    """

    n_users: int = 1000
    horizon_T: float = 86400.0
    auction_rate: float = 2.0 / 3600.0
    rate_dispersion: float = 0.0
    rate_segments: tuple = ()
    clearing_mu: float = 0.0
    clearing_sigma: float = 0.5
    bid_mu: float = 0.0
    bid_sigma: float = 0.5
    alpha_base: float = 0.01 / 3600.0
    alpha_dispersion: float = 0.0
    alpha_amplitude: float = 0.0
    alpha_period: float = 86400.0
    alpha_phase: float = 0.0
    true_beta: dict = field(default_factory=dict)
    characteristics: dict = field(default_factory=dict)
    confounding: str = "none"
    rho: float = 0.0
    feedback: str = "none"
    cooldown: float = 0.0
    frequency_cap: int = 0
    randomization_level: str = BID_LEVEL
    submit_probability_p: float = 0.5
    p_viewable: float = 1.0
    p_win_noise: float = 0.0
    retarget_rate: float = 0.0
    rng_seed: int = 0

    def __post_init__(self) -> None:
        self.true_beta = {(k if isinstance(k, FeatureKey) else FeatureKey.from_dict(k)): float(v)
                          for k, v in _beta_items(self.true_beta)}
        self.rate_segments = tuple(tuple(map(float, s)) for s in self.rate_segments)
        self.characteristics = {str(k): tuple(map(float, v)) for k, v in dict(self.characteristics).items()}
        errs = []
        if int(self.n_users) != self.n_users or self.n_users < 1:
            errs.append("n_users must be a positive integer")
        for name in ("horizon_T", "auction_rate", "alpha_period", "clearing_sigma", "bid_sigma"):
            if not getattr(self, name) > 0:
                errs.append(f"{name} must be positive")
        for name in ("alpha_base", "rate_dispersion", "alpha_dispersion", "cooldown", "p_win_noise",
                     "retarget_rate"):
            if not getattr(self, name) >= 0:
                errs.append(f"{name} must be non-negative")
        if not abs(self.alpha_amplitude) <= 1:
            errs.append("alpha_amplitude must lie in [-1, 1]")
        if self.confounding not in CONFOUNDING:
            errs.append(f"confounding must be one of {CONFOUNDING}")
        if not 0 <= self.rho < 1:
            errs.append("rho must lie in [0, 1)")
        if self.feedback not in FEEDBACK:
            errs.append(f"feedback must be one of {FEEDBACK}")
        if self.feedback == "FrequencyCap" and self.frequency_cap < 1:
            errs.append("frequency_cap must be >= 1 under FrequencyCap feedback")
        if self.randomization_level not in (BID_LEVEL, USER_LEVEL):
            errs.append("randomization_level must be BidLevel or UserLevel")
        if not 0 < self.submit_probability_p <= 1:
            errs.append("submit_probability_p must lie in (0, 1]")
        if not 0 <= self.p_viewable <= 1:
            errs.append("p_viewable must lie in [0, 1]")
        for share_mult in self.rate_segments:
            if len(share_mult) != 2 or share_mult[0] < 0 or share_mult[1] <= 0:
                errs.append("rate_segments entries must be [share >= 0, multiplier > 0]")
        for name, (lo, hi) in self.characteristics.items():
            if not 0 <= lo <= hi:
                errs.append(f"characteristic {name} needs 0 <= low <= high")
        for k in self.true_beta:
            if k.stock_class != AD_STOCK:
                errs.append(f"true_beta supports AdStock keys only, got {k}")
            elif k.characteristic != "unit" and k.characteristic not in self.characteristics:
                errs.append(f"true_beta key uses undeclared characteristic {k.characteristic!r}")
            elif not math.isfinite(k.kernel.max_density):
                errs.append(f"kernel {k.kernel.label()} has unbounded density")
        if errs:
            raise MarketConfigError("; ".join(errs))

    def to_dict(self) -> dict[str, Any]:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["true_beta"] = [{"key": k.to_dict(), "beta": v} for k, v in self.true_beta.items()]
        d["rate_segments"] = [list(s) for s in self.rate_segments]
        d["characteristics"] = {k: list(v) for k, v in self.characteristics.items()}
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> MarketConfig:
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise MarketConfigError(f"unknown market fields: {sorted(unknown)}")
        return cls(**dict(d))


def _beta_items(tb):
    if isinstance(tb, Mapping):
        return list(tb.items())
    return [(item["key"], item["beta"]) for item in tb]


@dataclass
class SimulationResult:
    store: EventStore
    config: MarketConfig
    n_conversions: int
    n_twin_conversions: int
    realized_incremental: int
    expected_incremental: float
    clamp_count: int
    user_alpha: np.ndarray
    user_rate: np.ndarray
    user_arm: np.ndarray
    twin_conv_user: np.ndarray
    twin_conv_t: np.ndarray

    def ground_truth(self) -> dict[str, Any]:
        c = self.config
        return {
            "true_beta": [{"key": k.to_dict(), "beta": v} for k, v in c.true_beta.items()],
            "true_alpha": {"base": c.alpha_base, "dispersion": c.alpha_dispersion,
                           "amplitude": c.alpha_amplitude, "period": c.alpha_period, "phase": c.alpha_phase},
            "n_conversions": self.n_conversions,
            "n_twin_conversions": self.n_twin_conversions,
            "realized_incremental_conversions": self.realized_incremental,
            "expected_incremental_conversions": self.expected_incremental,
            "intensity_clamp_count": self.clamp_count,
            "n_users": c.n_users,
            "n_bids": len(self.store.bids),
            "n_impressions": int(self.store.bids.won.sum()),
        }


class _Streams:
    NAMES = ("latent", "auctions", "baseline", "ghost", "clearing", "submit", "view", "chars", "ad", "noise",
             "retarget")

    def __init__(self, seed: int):
        kids = np.random.SeedSequence(int(seed)).spawn(len(self.NAMES))
        self._g = {n: np.random.default_rng(s) for n, s in zip(self.NAMES, kids)}

    def __getitem__(self, name: str) -> np.random.Generator:
        return self._g[name]


def _alpha(cfg: MarketConfig, user_alpha: np.ndarray, t: np.ndarray) -> np.ndarray:
    mod = 1.0 + cfg.alpha_amplitude * np.sin(2 * math.pi * t / cfg.alpha_period + cfg.alpha_phase)
    return user_alpha * mod


def _sorted_uniform_times(rng, counts: np.ndarray, T: float):
    """Per-user sorted uniform times on ``[0, T]`` from normalized exponential spacings."""
    n = len(counts)
    counts = np.asarray(counts, dtype=np.int64)
    users = np.repeat(np.arange(n), counts)
    if len(users) == 0:
        return users, np.zeros(0)
    E = rng.standard_exponential(int(counts.sum()) + n)
    seg_end = np.cumsum(counts + 1)
    cs = np.cumsum(E)
    base = np.r_[0.0, cs[seg_end[:-1] - 1]]
    total = cs[seg_end - 1] - base
    inner = np.ones(len(E), dtype=bool)
    inner[seg_end - 1] = False
    t = (cs[inner] - base[users]) / total[users] * T
    return users, t


def simulate(config: MarketConfig) -> SimulationResult:
    cfg = config
    n, T = int(cfg.n_users), float(cfg.horizon_T)
    rs = _Streams(cfg.rng_seed)

    # user heterogeneity; TargetedProspects correlates propensity with auction exposure
    z_alpha = rs["latent"].standard_normal(n)
    z_other = rs["latent"].standard_normal(n)
    rho = cfg.rho if cfg.confounding == "TargetedProspects" else 0.0
    z_rate = rho * z_alpha + math.sqrt(1 - rho * rho) * z_other
    sa, sr = cfg.alpha_dispersion, cfg.rate_dispersion
    user_alpha = cfg.alpha_base * np.exp(sa * z_alpha - sa * sa / 2)
    user_rate = cfg.auction_rate * np.exp(sr * z_rate - sr * sr / 2)
    if cfg.rate_segments:
        shares = np.array([s for s, _ in cfg.rate_segments])
        mults = np.array([m for _, m in cfg.rate_segments])
        seg = rs["latent"].choice(len(shares), size=n, p=shares / shares.sum())
        user_rate = user_rate * mults[seg] / float(np.dot(shares / shares.sum(), mults))
    user_arm = rs["submit"].random(n)

    # auction opportunities, flat and sorted by (user, t)
    K = rs["auctions"].poisson(user_rate * T)
    a_user, a_t = _sorted_uniform_times(rs["auctions"], K, T)
    off = np.r_[0, np.cumsum(K)[:-1]]
    m = len(a_t)
    ghost = np.exp(cfg.bid_mu + cfg.bid_sigma * rs["ghost"].standard_normal(m))
    clear = np.exp(cfg.clearing_mu + cfg.clearing_sigma * rs["clearing"].standard_normal(m))
    p_win_g = special.ndtr((np.log(ghost) - cfg.clearing_mu) / cfg.clearing_sigma)
    if cfg.randomization_level == BID_LEVEL:
        submit = rs["submit"].random(m) < cfg.submit_probability_p
    else:
        submit = (user_arm < cfg.submit_probability_p)[a_user]
    won_all = submit & (ghost >= clear)
    view = rs["view"].random(m) < cfg.p_viewable
    chars = {name: lo + (hi - lo) * rs["chars"].random(m) for name, (lo, hi) in cfg.characteristics.items()}

    keys = list(cfg.true_beta)
    betas = np.array([cfg.true_beta[k] for k in keys])
    key_w = [np.ones(m) if k.characteristic == "unit" else chars[k.characteristic] for k in keys]
    # per-auction bound on the ad intensity it can add once won
    unit_bound = np.zeros(m)
    for b, k, w in zip(betas, keys, key_w):
        unit_bound += abs(b) * w * k.kernel.max_density

    # baseline candidates (shared with the twin)
    amax = user_alpha * (1 + abs(cfg.alpha_amplitude))
    nb = rs["baseline"].poisson(amax * T)
    b_user, b_t = _sorted_uniform_times(rs["baseline"], nb, T)
    b_u = rs["baseline"].random(len(b_t))
    twin_keep = b_u * amax[b_user] < _alpha(cfg, user_alpha[b_user], b_t)
    # interval index: number of the user's auctions strictly before the candidate
    b_int = _count_before(a_t, off, K, b_user, b_t)

    logged = np.zeros(m, dtype=bool)
    won = np.zeros(m, dtype=bool)
    last_conv = np.full(n, -np.inf)
    n_wins = np.zeros(n, dtype=np.int64)
    bound = np.zeros(n)
    conv_u: list[np.ndarray] = []
    conv_t: list[np.ndarray] = []
    clamp = 0
    ad_rng = rs["ad"]

    # untruncated exponential keys carry a recursive per-user state; others sum over past auctions
    fast = [kk.kernel.family == "exponential" and not kk.kernel.truncated for kk in keys]
    state = [np.zeros(n) if f else None for f in fast]
    t_ref = np.zeros(n)

    def ad_intensity(cu: np.ndarray, ct: np.ndarray, k: int) -> np.ndarray:
        tot = np.zeros(len(cu))
        if k == 0 or len(cu) == 0 or not keys:
            return tot
        idx = lag = ok = None
        for c, (b, key, w) in enumerate(zip(betas, keys, key_w)):
            if fast[c]:
                s = state[c][cu] * np.exp(-(ct - t_ref[cu]) / key.kernel.tau)
            else:
                if idx is None:
                    idx = off[cu][:, None] + np.arange(k)[None, :]
                    lag = ct[:, None] - a_t[idx]
                    ok = won[idx] & (lag > 0)
                    lag = np.where(ok, lag, 1.0)
                s = (pdf(key.kernel, lag) * w[idx] * ok).sum(axis=1)
            if key.fourier is not None:
                s = s * key.fourier.term(ct)
            tot += b * s
        return tot

    b_order = np.argsort(b_int, kind="stable")
    b_starts = np.searchsorted(b_int[b_order], np.arange(int(K.max(initial=0)) + 2))
    kmax = int(K.max(initial=0))
    for k in range(kmax + 1):
        # conversions in the interval ending at auction k (or at T)
        sel = b_order[b_starts[k]:b_starts[k + 1]]
        cu, ct = b_user[sel], b_t[sel]
        alpha_c = _alpha(cfg, user_alpha[cu], ct)
        ad_c = ad_intensity(cu, ct, k)
        lam = alpha_c + ad_c
        clamp += int(np.sum(lam < 0))
        keep = b_u[sel] * amax[cu] < np.minimum(alpha_c, np.maximum(lam, 0.0))
        new_u, new_t = [cu[keep]], [ct[keep]]
        # ad candidates over the same interval
        act = np.flatnonzero((bound > 0) & (K >= k))
        if len(act):
            t0 = a_t[off[act] + k - 1] if k > 0 else np.zeros(len(act))
            t1 = np.where(k < K[act], a_t[np.minimum(off[act] + k, m - 1)], T)
            cnt = ad_rng.poisson(bound[act] * (t1 - t0))
            if cnt.sum():
                au = np.repeat(act, cnt)
                at = np.repeat(t0, cnt) + ad_rng.random(int(cnt.sum())) * np.repeat(t1 - t0, cnt)
                ua = ad_rng.random(len(au))
                ad_a = ad_intensity(au, at, k)
                acc = ua * bound[au] < ad_a
                new_u.append(au[acc])
                new_t.append(at[acc])
        nu, nt = np.concatenate(new_u), np.concatenate(new_t)
        if len(nu):
            conv_u.append(nu)
            conv_t.append(nt)
            np.maximum.at(last_conv, nu, nt)
        # auction k
        users_k = np.flatnonzero(K > k)
        if len(users_k) == 0:
            continue
        j = off[users_k] + k
        eligible = np.ones(len(j), dtype=bool)
        if cfg.feedback == "NegativeTargeting":
            eligible &= a_t[j] - last_conv[users_k] >= cfg.cooldown
        elif cfg.feedback == "FrequencyCap":
            eligible &= n_wins[users_k] < cfg.frequency_cap
        j = j[eligible]
        logged[j] = True
        w_now = won_all[j]
        won[j[w_now]] = True
        wu = users_k[eligible][w_now]
        jw = j[w_now]
        n_wins[wu] += 1
        bound[wu] += unit_bound[jw]
        for c, key in enumerate(keys):
            if fast[c]:
                tau = key.kernel.tau
                state[c][wu] = state[c][wu] * np.exp(-(a_t[jw] - t_ref[wu]) / tau) + key_w[c][jw] / tau
        t_ref[wu] = a_t[jw]

    conv_user = np.concatenate(conv_u) if conv_u else np.zeros(0, dtype=np.int64)
    conv_time = np.concatenate(conv_t) if conv_t else np.zeros(0)
    order = np.lexsort((conv_time, conv_user))
    conv_user, conv_time = conv_user[order].astype(np.int64), conv_time[order]

    # logged bid table
    lj = np.flatnonzero(logged)
    p_log = p_win_g[lj]
    if cfg.p_win_noise > 0:
        p_log = np.clip(p_log + cfg.p_win_noise * rs["noise"].standard_normal(len(lj)), 0.0, 1.0)
    sub = submit[lj]
    wj = won[lj]
    table = BidTable(
        user=a_user[lj].astype(np.int64), t=a_t[lj], ghost_bid=ghost[lj], submitted=sub,
        bid=np.where(sub, ghost[lj], 0.0), p_win_b=np.where(sub, p_log, 0.0), p_win_g=p_log, won=wj,
        cost=np.where(wj, clear[lj], np.nan), viewable=np.where(wj, view[lj].astype(float), np.nan),
        p_viewable=np.full(len(lj), float(cfg.p_viewable)), chars={k: v[lj] for k, v in chars.items()},
    )

    nr = rs["retarget"].poisson(cfg.retarget_rate * T, size=n) if cfg.retarget_rate > 0 else np.zeros(n, np.int64)
    r_user, r_t = _sorted_uniform_times(rs["retarget"], nr, T)

    uids = [f"u{i:07d}" for i in range(n)]
    store = EventStore(uids, np.zeros(n), np.full(n, T), table, conv_user, conv_time,
                       np.ones(len(conv_time)), np.ones(len(conv_time)), r_user.astype(np.int64), r_t,
                       np.array(["homepage"] * len(r_t), dtype=object))

    expected = 0.0
    wi = np.flatnonzero(won)
    for b, key, w in zip(betas, keys, key_w):
        if key.fourier is None:
            expected += b * float(np.sum(w[wi] * cdf(key.kernel, T - a_t[wi])))
        else:
            full = fourier_residual_array(key.kernel, key.fourier, a_t[wi], a_t[wi])
            tail = fourier_residual_array(key.kernel, key.fourier, a_t[wi], np.full(len(wi), T))
            expected += b * float(np.sum(w[wi] * (full - tail)))

    n_twin = int(twin_keep.sum())
    if clamp:
        log.warning("conversion intensity clamped at zero for %d candidate points", clamp)
    return SimulationResult(store, cfg, len(conv_time), n_twin, len(conv_time) - n_twin, expected, clamp,
                            user_alpha, user_rate, user_arm < cfg.submit_probability_p,
                            b_user[twin_keep].astype(np.int64), b_t[twin_keep])


def _count_before(a_t, off, K, q_user, q_t) -> np.ndarray:
    """For each query, the number of the same user's auctions strictly before ``q_t``."""
    lo = off[q_user].astype(np.int64)
    return _bisect_left_segments(a_t, lo, lo + K[q_user], q_t) - lo


# ---------------------------------------------------------------------------
# output


def write_events(store: EventStore, fh: IO[str]) -> int:
    """Write a store as NDJSON grouped by user (window, bids, conversions, retargets)."""
    return dump_timelines(store.to_timelines(), fh)


def arm_divergence(store: EventStore, user_arm: np.ndarray) -> float:
    """Kolmogorov-Smirnov distance between per-user ghost-bid counts of the two arms."""
    counts = np.bincount(store.bids.user, minlength=store.n_users)
    a, b = counts[user_arm], counts[~user_arm]
    if len(a) == 0 or len(b) == 0:
        return 0.0
    return float(stats.ks_2samp(a, b).statistic)


def bid_level_arm_divergence(store: EventStore) -> float:
    """KS distance between ghost-bid times following submitted versus withheld bids."""
    b = store.bids
    if len(b) < 2:
        return 0.0
    nxt = np.r_[b.user[1:] == b.user[:-1], False]
    gap = np.r_[b.t[1:] - b.t[:-1], 0.0]
    s, u = gap[nxt & b.submitted], gap[nxt & ~b.submitted]
    if len(s) == 0 or len(u) == 0:
        return 0.0
    return float(stats.ks_2samp(s, u).statistic)


def ground_truth_json(result: SimulationResult) -> str:
    return json.dumps(result.ground_truth(), sort_keys=True, indent=1) + "\n"


__all__ = ["MarketConfig", "MarketConfigError", "SimulationResult", "simulate", "write_events",
           "arm_divergence", "bid_level_arm_divergence", "ground_truth_json", "KernelSpec"]
