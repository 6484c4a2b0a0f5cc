"""Matrix-factorization scorers for PD/PDA and the multi-behavior (MBD) framework.

All ``*_score`` helpers broadcast over index arrays, so ``pd_score(m, u, i)``
works for a single pair as well as for ``u[:, None], i[None, :]`` grids.
Full user-by-item matrices are cheaper through :func:`match_matrix`.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

LOGIT_CLAMP = 30.0
CVR_CAP = 1.0 - 1e-9
ROLES = ("matching", "ctr", "cvr")
CKPT_MAGIC = "POPDEBIAS-CKPT"
CKPT_VERSION = 1


@dataclass(frozen=True)
class ScoreParams:
    gamma: float = 0.0
    gamma_tilde: float = 0.0
    gamma_r: float = 0.0
    gamma_z: float = 0.0
    gamma_zc: float = 0.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not np.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {value}")


@dataclass
class FactorModel:
    user_emb: np.ndarray
    item_emb: np.ndarray
    role: str = "matching"
    params: ScoreParams = field(default_factory=ScoreParams)

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        if self.user_emb.ndim != 2 or self.item_emb.ndim != 2 or self.user_emb.shape[1] != self.item_emb.shape[1]:
            raise ValueError("embedding tables must be 2-D with a shared dimension")

    @property
    def d(self) -> int:
        return self.user_emb.shape[1]

    @property
    def num_users(self) -> int:
        return self.user_emb.shape[0]

    @property
    def num_items(self) -> int:
        return self.item_emb.shape[0]

    @classmethod
    def init(cls, num_users: int, num_items: int, d: int, rng: np.random.Generator,
             role: str = "matching", params: ScoreParams | None = None) -> "FactorModel":
        bound = 0.5 / d
        return cls(rng.uniform(-bound, bound, size=(num_users, d)),
                   rng.uniform(-bound, bound, size=(num_items, d)),
                   role, params or ScoreParams())

    def copy(self) -> "FactorModel":
        return FactorModel(self.user_emb.copy(), self.item_emb.copy(), self.role, self.params)


def elu_prime(x):
    """``e^x`` for x <= 0, ``x + 1`` otherwise. Strictly positive and increasing."""
    x = np.asarray(x, dtype=np.float64)
    return np.where(x <= 0, np.exp(np.minimum(x, 0.0)), x + 1.0)


def elu_prime_grad(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x <= 0, np.exp(np.minimum(x, 0.0)), 1.0)


def sigmoid(x):
    x = np.clip(np.asarray(x, dtype=np.float64), -LOGIT_CLAMP, LOGIT_CLAMP)
    return 1.0 / (1.0 + np.exp(-x))


def _check_index(idx, n, what):
    idx = np.asarray(idx)
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"{what} index out of range [0, {n})")
    return idx


def match_score(model: FactorModel, u, i):
    u = _check_index(u, model.num_users, "user")
    i = _check_index(i, model.num_items, "item")
    return np.sum(model.user_emb[u] * model.item_emb[i], axis=-1)


def match_matrix(model: FactorModel, users=None) -> np.ndarray:
    users = np.arange(model.num_users) if users is None else _check_index(users, model.num_users, "user")
    return model.user_emb[users] @ model.item_emb.T


def _positive(x, name):
    x = np.asarray(x, dtype=np.float64)
    if np.any(x <= 0) or not np.all(np.isfinite(x)):
        raise ValueError(f"{name} must be positive and finite")
    return x


def conditional_click_prob(model, u, i, m, gamma):
    """Unnormalized P(c=1 | u, i, m) = ELU'(f(u,i)) * m**gamma."""
    m = _positive(m, "popularity factor")
    return elu_prime(match_score(model, u, i)) * m ** gamma


def pd_score(model, u, i):
    return elu_prime(match_score(model, u, i))


def pda_score(model, u, i, m_tilde, gamma_tilde):
    m_tilde = _positive(m_tilde, "m_tilde")
    return pd_score(model, u, i) * m_tilde ** gamma_tilde


def mbd_ctr(model_c, u, i):
    return sigmoid(match_score(model_c, u, i))


def mbd_cvr(model_l, u, i, r, z, gamma_r, gamma_z):
    r = _positive(r, "r")
    z = _positive(z, "z")
    return sigmoid(match_score(model_l, u, i)) * r ** gamma_r * z ** gamma_z


def mbd_ctcvr(model_c, model_l, u, i, r, z, params: ScoreParams, variant: str = "standard", z_c=None):
    """CTCVR = CTR * CVR; ``both_pop`` adds a click-side popularity factor ``z_c**gamma_zc``."""
    out = mbd_cvr(model_l, u, i, r, z, params.gamma_r, params.gamma_z) * mbd_ctr(model_c, u, i)
    if variant == "standard":
        return out
    if variant == "both_pop":
        z_c = z if z_c is None else z_c
        return out * _positive(z_c, "z_c") ** params.gamma_zc
    raise ValueError(f"unknown variant {variant!r}")


def mbd_inference_score(model_c, model_l, u, i, r, gamma_r):
    r = _positive(r, "r")
    return mbd_ctr(model_c, u, i) * sigmoid(match_score(model_l, u, i)) * r ** gamma_r


def bin_mean_popularity(z, gamma_z, bins) -> np.ndarray:
    """Per-item mean of ``z**gamma_z`` over the item's quality bin (NaN if unassigned)."""
    z = np.asarray(z, dtype=np.float64)
    bins = np.asarray(bins)
    out = np.full(len(z), np.nan)
    zg = z ** gamma_z
    for b in np.unique(bins[bins >= 0]):
        members = bins == b
        out[members] = zg[members].mean()
    return out


def ablation_score(mode, model_c, model_l, u, i, r, z, gamma_r, gamma_z, quality_bins=None):
    """Scores with only one of the two interventions.

    ``z`` is the full per-item popularity vector. ``doI_only`` weights by the
    mean popularity factor of the item's quality bin, ``doQ_only`` by the
    item's own popularity factor.
    """
    base = mbd_inference_score(model_c, model_l, u, i, r, gamma_r)
    z = _positive(z, "z")
    if mode == "doI_only":
        if quality_bins is None:
            raise ValueError("doI_only needs quality bins")
        factor = bin_mean_popularity(z, gamma_z, quality_bins)[i]
        if np.any(np.isnan(factor)):
            raise ValueError("item not assigned to a quality bin")
        return base * factor
    if mode == "doQ_only":
        return base * z[i] ** gamma_z
    raise ValueError(f"unknown ablation mode {mode!r}")


def save_checkpoint(model: FactorModel, path) -> None:
    p = model.params
    header = (f"{CKPT_MAGIC} {CKPT_VERSION}\n"
              f"d={model.d}\nnum_users={model.num_users}\nnum_items={model.num_items}\n"
              f"role={model.role}\n"
              f"gamma={float(p.gamma)!r}\ngamma_tilde={float(p.gamma_tilde)!r}\ngamma_r={float(p.gamma_r)!r}\n"
              f"gamma_z={float(p.gamma_z)!r}\ngamma_zc={float(p.gamma_zc)!r}\nEND\n")
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(np.ascontiguousarray(model.user_emb, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(model.item_emb, dtype="<f4").tobytes())


def load_checkpoint(path) -> FactorModel:
    raw = Path(path).read_bytes()
    end = raw.find(b"END\n")
    if end < 0:
        raise ValueError(f"{path}: missing checkpoint header terminator")
    lines = raw[:end].decode("ascii").splitlines()
    magic = lines[0].split()
    if magic[0] != CKPT_MAGIC or int(magic[1]) != CKPT_VERSION:
        raise ValueError(f"{path}: not a checkpoint (header {lines[0]!r})")
    meta = dict(line.split("=", 1) for line in lines[1:])
    d, nu, ni = int(meta["d"]), int(meta["num_users"]), int(meta["num_items"])
    body = raw[end + 4:]
    expected = 4 * d * (nu + ni)
    if len(body) != expected:
        raise ValueError(f"{path}: expected {expected} payload bytes, found {len(body)}")
    flat = np.frombuffer(body, dtype="<f4")
    params = ScoreParams(*(float(meta[k]) for k in ("gamma", "gamma_tilde", "gamma_r", "gamma_z", "gamma_zc")))
    return FactorModel(flat[:nu * d].reshape(nu, d).astype(np.float64),
                       flat[nu * d:].reshape(ni, d).astype(np.float64),
                       meta["role"], params)
