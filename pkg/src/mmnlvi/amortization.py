"""Inference network mapping a person's menus to a Gaussian q(beta_n).

Per-menu encoding: [one-hot choice (J) | covariates J x (L+K) | availability (J)].
conv1d with kernel width = stride = menu length -> max-pool over real menus
-> batch-norm -> FC(tanh) -> heads.  AVI uses the mean head plus one shared
Cholesky factor; AVI2 adds softplus-diagonal and lower-triangle heads.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Tape
from .model import ChoiceDataset, menu_logprobs, utilities
from .vi import SCALE0, DataArrays, FitConfig, fit, inv_softplus, n_offdiag

VARIANTS = ("AVI", "AVI2")
MAGIC = b"MMNLNET\0"
FORMAT_VERSION = 1
DIAG_FLOOR = 1e-8  # keeps the Cholesky diagonal away from softplus underflow


def menu_length(J: int, K: int, L: int) -> int:
    return J + J * (K + L) + J


def encode_menus(ds: ChoiceDataset) -> np.ndarray:
    """(N, T * E) flat encodings; padding menus are all zero."""
    N, T, J = ds.N, ds.T, ds.J
    mask = ds.menu_mask
    onehot = (ds.choice[..., None] == np.arange(J)).astype(float)
    cov = np.concatenate([ds.xf, ds.xr], axis=-1) * ds.avail[..., None]
    enc = np.concatenate([onehot, cov.reshape(N, T, -1), ds.avail.astype(float)], axis=-1)
    enc *= mask[..., None]
    return enc.reshape(N, -1)


@dataclass
class EncodedPosterior:
    mean: np.ndarray  # (K,)
    chol: np.ndarray  # (K, K) lower, positive diagonal


class InferenceNetwork:
    """Amortized local posterior family; weights live in a parameter dict under ``net.``."""

    def __init__(self, J: int, K: int, L: int, C: int = 32, H: int = 64, variant: str = "AVI2"):
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        self.J, self.K, self.L, self.C, self.H = J, K, L, C, H
        self.variant = variant
        self.kind = variant
        self.E = menu_length(J, K, L)
        self.bn = BatchNormState(C)
        self.weights: dict[str, np.ndarray] | None = None

    @property
    def dims(self) -> tuple[int, int, int, int, int]:
        return self.J, self.K, self.L, self.C, self.H

    def shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        """Weight blocks in declaration order."""
        C, H, K, E, D = self.C, self.H, self.K, self.E, n_offdiag(self.K)
        out = [("net.conv.w", (C, E)), ("net.conv.b", (C,)), ("net.bn.gamma", (C,)), ("net.bn.beta", (C,)),
               ("net.fc.w", (C, H)), ("net.fc.b", (H,)), ("net.mu.w", (H, K)), ("net.mu.b", (K,))]
        if self.variant == "AVI2":
            out += [("net.diag.w", (H, K)), ("net.diag.b", (K,)), ("net.off.w", (H, D)), ("net.off.b", (D,))]
        else:
            out += [("net.shared.scale", (K,)), ("net.shared.off", (D,))]
        return out

    def n_learnable(self) -> int:
        return int(sum(np.prod(s) for _, s in self.shapes()))

    def init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        C, H, K, E, D = self.C, self.H, self.K, self.E, n_offdiag(self.K)
        p = {
            "net.conv.w": rng.normal(size=(C, E)) / np.sqrt(E),
            "net.conv.b": np.zeros(C),
            "net.bn.gamma": np.ones(C),
            "net.bn.beta": np.zeros(C),
            "net.fc.w": rng.normal(size=(C, H)) / np.sqrt(C),
            "net.fc.b": np.zeros(H),
            "net.mu.w": 0.1 * rng.normal(size=(H, K)) / np.sqrt(H),
            "net.mu.b": np.zeros(K),
        }
        if self.variant == "AVI2":
            # small weights so the initial factor is close to 0.1 I, as for SVI
            p["net.diag.w"] = 0.01 * rng.normal(size=(H, K)) / np.sqrt(H)
            p["net.diag.b"] = np.full(K, inv_softplus(SCALE0))
            p["net.off.w"] = 0.01 * rng.normal(size=(H, D)) / np.sqrt(H)
            p["net.off.b"] = np.zeros(D)
        else:
            p["net.shared.scale"] = np.full(K, inv_softplus(SCALE0))
            p["net.shared.off"] = np.zeros(D)
        return p

    # -- tape forward --------------------------------------------------------

    def features(self, tape: Tape, P, enc: np.ndarray, mask: np.ndarray, training: bool):
        if enc.shape[1] % self.E:
            raise ValueError(f"encoding length {enc.shape[1]} is not a multiple of menu length {self.E}")
        x = tape.const(enc)
        h = ad.conv1d(x, P["net.conv.w"], P["net.conv.b"], self.E)  # (B, T, C)
        pooled = ad.maxpool(h, mask)
        normed = ad.batchnorm(pooled, P["net.bn.gamma"], P["net.bn.beta"], self.bn, training)
        return ad.tanh(normed @ P["net.fc.w"] + P["net.fc.b"])

    def posterior(self, tape: Tape, P, batch, training: bool = True):
        z = self.features(tape, P, batch.enc, batch.enc_mask, training)
        mean = z @ P["net.mu.w"] + P["net.mu.b"]
        if self.variant == "AVI2":
            diag = ad.softplus(z @ P["net.diag.w"] + P["net.diag.b"]) + DIAG_FLOOR
            chol = ad.fill_tril(diag, z @ P["net.off.w"] + P["net.off.b"])
        else:
            diag = ad.softplus(P["net.shared.scale"]) + DIAG_FLOOR
            chol = ad.fill_tril(diag, P["net.shared.off"])
        return mean, chol, ad.log(diag)

    def posterior_np(self, params=None, arrays: DataArrays | None = None, idx=None, chunk: int = 4096):
        """Inference-mode (running batch-norm stats) means (n, K) and Cholesky factors (n, K, K)."""
        params = self.weights if params is None else params
        if arrays is None:
            raise ValueError("inference network needs the persons' data")
        if arrays.enc is None:
            raise ValueError("data arrays were built without encodings")
        N = arrays.N
        idx = np.arange(N) if idx is None else np.asarray(idx)
        means, chols = [], []
        for start in range(0, idx.size, chunk):
            b = arrays.batch(idx[start:start + chunk])
            tape = Tape()
            P = {k: tape.const(v) for k, v in params.items() if k.startswith("net.")}
            m, c, _ = self.posterior(tape, P, b, training=False)
            means.append(m.value)
            cv = c.value
            chols.append(np.broadcast_to(cv, (b.size,) + cv.shape[-2:]) if cv.ndim == 2 else cv)
        return np.concatenate(means), np.concatenate(chols)

    def finalize(self, params) -> None:
        """Freeze running batch-norm statistics and keep a copy of the fitted weights."""
        self.bn.frozen = True
        self.weights = {k: v.copy() for k, v in params.items() if k.startswith("net.")}

    # -- serialization -------------------------------------------------------

    def save(self, path, params=None, alpha_hat: np.ndarray | None = None) -> None:
        """Binary layout (little-endian):

        magic b"MMNLNET\\0" | u32 version | u32 variant (1 AVI, 2 AVI2) | u64 J K L C H
        | float64 weight blocks in ``shapes()`` order | float64 bn running mean (C)
        | float64 bn running var (C) | float64 fitted alpha mean (L)
        """
        params = self.weights if params is None else params
        alpha_hat = np.zeros(self.L) if alpha_hat is None else np.asarray(alpha_hat, float)
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<II", FORMAT_VERSION, 1 if self.variant == "AVI" else 2))
            fh.write(struct.pack("<5Q", *self.dims))
            for name, shape in self.shapes():
                fh.write(np.ascontiguousarray(params[name], dtype="<f8").reshape(shape).tobytes())
            fh.write(np.asarray(self.bn.running_mean, dtype="<f8").tobytes())
            fh.write(np.asarray(self.bn.running_var, dtype="<f8").tobytes())
            fh.write(alpha_hat.astype("<f8").tobytes())

    @classmethod
    def load(cls, path) -> tuple["InferenceNetwork", np.ndarray]:
        raw = Path(path).read_bytes()
        if raw[:8] != MAGIC:
            raise ValueError(f"{path}: not an inference-network weight file")
        version, variant = struct.unpack_from("<II", raw, 8)
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported weight file version {version}")
        J, K, L, C, H = struct.unpack_from("<5Q", raw, 16)
        net = cls(J, K, L, C, H, "AVI" if variant == 1 else "AVI2")
        off = 16 + 5 * 8
        need = 8 * (net.n_learnable() + 2 * C + L)
        if len(raw) - off != need:
            raise ValueError(f"{path}: expected {need} payload bytes, found {len(raw) - off}")
        vals = np.frombuffer(raw, dtype="<f8", offset=off).astype(float)
        weights, pos = {}, 0
        for name, shape in net.shapes():
            n = int(np.prod(shape))
            weights[name] = vals[pos:pos + n].reshape(shape).copy()
            pos += n
        net.bn.running_mean = vals[pos:pos + C].copy()
        net.bn.running_var = vals[pos + C:pos + 2 * C].copy()
        net.bn.frozen = True
        net.weights = weights
        return net, vals[pos + 2 * C:].copy()


def check_dims(net: InferenceNetwork, ds: ChoiceDataset) -> None:
    if (ds.J, ds.K, ds.L) != (net.J, net.K, net.L):
        raise ValueError(f"dimension mismatch: network (J, K, L) = {(net.J, net.K, net.L)}, "
                         f"dataset (J, K, L) = {(ds.J, ds.K, ds.L)}")


def encode(net: InferenceNetwork, person, params=None) -> EncodedPosterior:
    """Inference-mode posterior for one person (list of menus or 1-person dataset)."""
    ds = ChoiceDataset.from_persons([list(person)]) if not isinstance(person, ChoiceDataset) else person
    if ds.N != 1:
        raise ValueError("encode takes a single person")
    check_dims(net, ds)
    m, c = net.posterior_np(params, DataArrays(ds, with_encoding=True))
    return EncodedPosterior(m[0], c[0])


def fit_avi(dataset: ChoiceDataset, prior, config: FitConfig, variant: str = "AVI2", **kw):
    from dataclasses import replace

    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}")
    return fit(dataset, prior, replace(config, method=variant), **kw)


@dataclass
class Prediction:
    means: np.ndarray  # (N, K)
    chols: np.ndarray  # (N, K, K)
    metrics: dict = field(default_factory=dict)

    def posteriors(self) -> list[EncodedPosterior]:
        return [EncodedPosterior(m, c) for m, c in zip(self.means, self.chols)]


def predict_out_of_sample(net: InferenceNetwork, dataset: ChoiceDataset, alpha: np.ndarray | None = None,
                          true_betas: np.ndarray | None = None) -> Prediction:
    """One inference-mode pass; loglik/accuracy need ``alpha``, RMSE beta needs ``true_betas``."""
    check_dims(net, dataset)
    means, chols = net.posterior_np(None, DataArrays(dataset, with_encoding=True))
    metrics = {}
    if alpha is not None:
        v = utilities(dataset, np.asarray(alpha, float), means)
        metrics["loglik"] = float(menu_logprobs(dataset, v).sum())
        pred = np.argmax(np.where(dataset.avail, v, -np.inf), axis=-1)
        hit = (pred == dataset.choice) & dataset.menu_mask
        metrics["accuracy"] = float(hit.sum() / dataset.n_choices)
    if true_betas is not None:
        metrics["rmse_beta"] = float(np.sqrt(np.mean((means - true_betas) ** 2)))
    return Prediction(means, chols, metrics)

