"""Fully-connected denoiser with built-in reverse-mode differentiation.

The network predicts the posterior mean of the clean sample given a noisy
input and its noise level. It wraps a plain MLP ``F`` in the usual
skip/output/input scalings so that the prediction is

    d(x, sigma) = c_skip(sigma) * x + c_out(sigma) * F(c_in(sigma) * x, emb(sigma))

with c_skip = sd^2/(s^2+sd^2), c_out = s*sd/sqrt(s^2+sd^2),
c_in = 1/sqrt(s^2+sd^2) for data scale sd. The noise level enters the MLP
through Fourier features of log(sigma)/4 concatenated to the scaled input.

Forward passes can record a tape of intermediate values; the tape supports
vector-Jacobian products with respect to both the input (needed when
projecting through the denoiser) and the parameters (needed for training).
Everything is float64 and batch-first: inputs are (n, dim) or (dim,).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .arrayio import load_arrays, save_arrays
from .errors import FormatError, TrainingDivergedError
from .optim import Adam

_CHECKPOINT_KIND = "denoiser-net"
_CHECKPOINT_VERSION = 1

ACTIVATIONS = ("silu", "tanh")


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _silu(z):
    return z * _sigmoid(z)


def _silu_prime(z):
    s = _sigmoid(z)
    return s * (1.0 + z * (1.0 - s))


@dataclass
class GradTape:
    """Recorded forward-pass values sufficient for reverse-mode VJPs."""

    x: np.ndarray  # (n, dim) raw input
    sigma: np.ndarray  # (n, 1)
    c_skip: np.ndarray
    c_out: np.ndarray
    c_in: np.ndarray
    h: list  # layer inputs, h[0] = concat(c_in x, emb)
    z: list  # pre-activations per layer


class DenoiserNet:
    """Small MLP denoiser conditioned on the noise level.

    Parameters
    ----------
    dim : int
        Data dimension D.
    hidden : sequence of int
        Hidden layer widths.
    activation : str
        "silu" or "tanh".
    sigma_data : float
        Assumed data scale entering the skip/output scalings.
    embed_features : int
        Total Fourier features of log-sigma (half sine, half cosine).
    rng : numpy Generator, optional
        Source for weight initialization.
    """

    def __init__(
        self,
        dim: int,
        hidden=(128, 128, 128, 128),
        activation: str = "silu",
        sigma_data: float = 1.0,
        embed_features: int = 16,
        rng=None,
    ):
        if activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if embed_features % 2 != 0 or embed_features < 2:
            raise ValueError("embed_features must be an even integer >= 2")
        self.dim = int(dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.activation = activation
        self.sigma_data = float(sigma_data)
        self.embed_freqs = np.geomspace(1.0, 16.0, embed_features // 2)
        rng = rng if rng is not None else np.random.default_rng(0)

        dims = [self.dim + embed_features, *self.hidden, self.dim]
        self.weights = []
        self.biases = []
        for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            last = i == len(dims) - 2
            if last:
                w = np.zeros((fan_in, fan_out))
            else:
                w = rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)
            self.weights.append(w)
            self.biases.append(np.zeros(fan_out))

    # -- parameter access -------------------------------------------------

    def parameters(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    # -- forward / reverse ------------------------------------------------

    def _precond(self, sigma, n):
        sigma = np.asarray(sigma, dtype=float)
        if sigma.ndim == 0:
            sigma = np.full(n, float(sigma))
        if np.any(sigma <= 0):
            raise ValueError("denoise requires sigma > 0")
        sigma = sigma.reshape(n, 1)
        sd2 = self.sigma_data**2
        denom = np.sqrt(sigma**2 + sd2)
        c_skip = sd2 / (sigma**2 + sd2)
        c_out = sigma * self.sigma_data / denom
        c_in = 1.0 / denom
        c_noise = np.log(sigma) / 4.0
        return sigma, c_skip, c_out, c_in, c_noise

    def _embed(self, c_noise):
        ang = c_noise * self.embed_freqs[None, :]
        return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)

    def _act(self, z):
        return _silu(z) if self.activation == "silu" else np.tanh(z)

    def _act_prime(self, z):
        return _silu_prime(z) if self.activation == "silu" else 1.0 - np.tanh(z) ** 2

    def denoise_with_tape(self, x, sigma):
        """Forward pass returning the prediction and a tape for VJPs."""
        x = np.asarray(x, dtype=float)
        squeeze = x.ndim == 1
        x2 = np.atleast_2d(x)
        if x2.shape[1] != self.dim:
            raise ValueError(f"input dimension {x2.shape[1]} != network dimension {self.dim}")
        n = x2.shape[0]
        sigma_col, c_skip, c_out, c_in, c_noise = self._precond(sigma, n)
        h0 = np.concatenate([c_in * x2, self._embed(c_noise)], axis=1)
        hs = [h0]
        zs = []
        h = h0
        n_layers = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            zs.append(z)
            h = z if i == n_layers - 1 else self._act(z)
            hs.append(h)
        out = c_skip * x2 + c_out * hs[-1]
        tape = GradTape(x=x2, sigma=sigma_col, c_skip=c_skip, c_out=c_out, c_in=c_in, h=hs, z=zs)
        return (out[0] if squeeze else out), tape

    def denoise(self, x, sigma):
        """Posterior-mean prediction d(x, sigma)."""
        out, _ = self.denoise_with_tape(x, sigma)
        return out

    def vjp(self, tape: GradTape, upstream, want_params: bool = False):
        """Reverse pass through a recorded tape.

        ``upstream`` is the gradient with respect to the network output,
        shape (n, dim) or (dim,). Returns ``dx`` of the same shape; with
        ``want_params=True`` returns ``(dx, grads)`` where ``grads`` matches
        the layout of :meth:`parameters` (summed over the batch).
        """
        upstream = np.asarray(upstream, dtype=float)
        squeeze = upstream.ndim == 1
        up = np.atleast_2d(upstream)
        if not np.all(np.isfinite(up)):
            raise ValueError("upstream gradient contains non-finite entries")
        dh = up * tape.c_out  # gradient wrt F output
        n_layers = len(self.weights)
        grads_w = [None] * n_layers
        grads_b = [None] * n_layers
        for i in range(n_layers - 1, -1, -1):
            dz = dh if i == n_layers - 1 else dh * self._act_prime(tape.z[i])
            if want_params:
                grads_w[i] = tape.h[i].T @ dz
                grads_b[i] = dz.sum(axis=0)
            dh = dz @ self.weights[i].T
        dx = dh[:, : self.dim] * tape.c_in + up * tape.c_skip
        dx_out = dx[0] if squeeze else dx
        if not want_params:
            return dx_out
        grads = []
        for gw, gb in zip(grads_w, grads_b):
            grads.append(gw)
            grads.append(gb)
        return dx_out, grads

    # -- persistence --------------------------------------------------------

    def save(self, path) -> None:
        arrays = {"embed_freqs": self.embed_freqs}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            arrays[f"w{i}"] = w
            arrays[f"b{i}"] = b
        meta = {
            "kind": _CHECKPOINT_KIND,
            "version": _CHECKPOINT_VERSION,
            "dim": self.dim,
            "hidden": list(self.hidden),
            "activation": self.activation,
            "sigma_data": self.sigma_data,
            "embed_features": int(2 * self.embed_freqs.size),
        }
        save_arrays(path, arrays, meta)

    @classmethod
    def load(cls, path) -> "DenoiserNet":
        arrays, meta = load_arrays(path)
        if meta.get("kind") != _CHECKPOINT_KIND:
            raise FormatError(f"{path}: not a denoiser checkpoint")
        if meta.get("version") != _CHECKPOINT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {meta.get('version')}")
        net = cls.__new__(cls)
        net.dim = int(meta["dim"])
        net.hidden = tuple(meta["hidden"])
        net.activation = meta["activation"]
        net.sigma_data = float(meta["sigma_data"])
        try:
            net.embed_freqs = arrays["embed_freqs"]
            net.weights = [arrays[f"w{i}"] for i in range(len(net.hidden) + 1)]
            net.biases = [arrays[f"b{i}"] for i in range(len(net.hidden) + 1)]
        except KeyError as exc:
            raise FormatError(f"{path}: missing array {exc}") from exc
        dims = [net.dim + 2 * net.embed_freqs.size, *net.hidden, net.dim]
        for i, w in enumerate(net.weights):
            if w.shape != (dims[i], dims[i + 1]):
                raise FormatError(f"{path}: weight {i} has shape {w.shape}, expected {(dims[i], dims[i+1])}")
        return net


def grad_input(net: DenoiserNet, x, sigma, upstream):
    """Vector-Jacobian product of the denoiser with respect to its input."""
    _, tape = net.denoise_with_tape(x, sigma)
    return net.vjp(tape, upstream)


@dataclass
class TrainConfig:
    """Settings for the denoising regression loop."""

    batch: int = 256
    steps: int = 4000
    lr: float = 1e-3
    sigma_min: float = 0.01
    sigma_max: float = 10.0
    log_sigma_mean: float = -1.2
    log_sigma_std: float = 1.2
    seed: int = 0


def train(net: DenoiserNet, dataset: np.ndarray, config: TrainConfig):
    """Fit the denoiser by noise-scale-weighted denoising regression.

    Each step draws a batch of clean points, corrupts them at log-normal
    noise levels clipped to [sigma_min, sigma_max], and takes one Adam step
    on the scale-weighted squared error, which reduces to a plain MSE on the
    inner MLP output. Returns the (mutated) net and the per-step loss.
    """
    dataset = np.atleast_2d(np.asarray(dataset, dtype=float))
    if dataset.size == 0:
        raise ValueError("empty training dataset")
    if dataset.shape[1] != net.dim:
        raise ValueError(f"dataset dimension {dataset.shape[1]} != network dimension {net.dim}")
    if config.lr <= 0:
        raise ValueError("lr must be positive")
    rng = np.random.default_rng(config.seed)
    params = net.parameters()
    opt = Adam([p.shape for p in params], lr=config.lr)
    history = np.zeros(config.steps)

    for step in range(config.steps):
        take = rng.integers(0, dataset.shape[0], size=config.batch)
        x0 = dataset[take]
        sig = np.exp(config.log_sigma_mean + config.log_sigma_std * rng.standard_normal(config.batch))
        sig = np.clip(sig, config.sigma_min, config.sigma_max)
        noise = rng.standard_normal(x0.shape)
        x_t = x0 + sig[:, None] * noise

        out, tape = net.denoise_with_tape(x_t, sig)
        # weighted loss w*(d - x0)^2 with w = 1/c_out^2, gradient taken in
        # output space: upstream = 2 w (d - x0) / (batch*dim)
        resid = out - x0
        w = 1.0 / tape.c_out**2
        loss = float(np.mean(w * resid**2))
        history[step] = loss
        if not np.isfinite(loss):
            raise TrainingDivergedError(step, loss)
        upstream = 2.0 * w * resid / resid.size
        _, grads = net.vjp(tape, upstream, want_params=True)
        opt.step(params, grads)

    return net, history
