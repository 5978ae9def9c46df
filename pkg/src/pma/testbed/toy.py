"""Dense toy models with hand-written gradients, and the synthetic tasks they train on."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

MODEL_KINDS = ("linear_regression", "mlp")
TASKS = ("regression", "classification")

Params = dict[str, np.ndarray]


@dataclass(frozen=True)
class ModelConfig:
    kind: str
    layer_widths: tuple[int, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if len(self.layer_widths) < 2 or min(self.layer_widths) < 1:
            raise ValueError("layer_widths needs an input and an output width, all >= 1")
        if self.kind == "linear_regression" and len(self.layer_widths) != 2:
            raise ValueError("linear_regression takes exactly [d_in, d_out]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layer_widths"] = list(self.layer_widths)
        return d


@dataclass(frozen=True)
class DataConfig:
    task: str = "regression"
    n_train: int = 2048
    n_val: int = 1024
    noise_std: float = 0.0

    def __post_init__(self) -> None:
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.n_train < 1 or self.n_val < 1:
            raise ValueError("n_train and n_val must be >= 1")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    task: str


def _n_layers(model: ModelConfig) -> int:
    return len(model.layer_widths) - 1


def param_shapes(model: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes = {}
    for k in range(_n_layers(model)):
        d_in, d_out = model.layer_widths[k], model.layer_widths[k + 1]
        shapes[f"layers.{k}.bias"] = (d_out,)
        shapes[f"layers.{k}.weight"] = (d_out, d_in)
    return dict(sorted(shapes.items()))


def init_params(model: ModelConfig, rng: np.random.Generator, gain: float = 1.0) -> Params:
    params = {}
    for k in range(_n_layers(model)):
        d_in, d_out = model.layer_widths[k], model.layer_widths[k + 1]
        params[f"layers.{k}.weight"] = rng.standard_normal((d_out, d_in)) * (gain / np.sqrt(d_in))
        params[f"layers.{k}.bias"] = np.zeros(d_out)
    return dict(sorted(params.items()))


def flatten(params: Params) -> np.ndarray:
    return np.concatenate([params[name].reshape(-1) for name in sorted(params)])


def unflatten(vec: np.ndarray, model: ModelConfig) -> Params:
    out, i = {}, 0
    for name, shape in param_shapes(model).items():
        size = int(np.prod(shape))
        out[name] = np.asarray(vec[i : i + size], dtype=np.float64).reshape(shape)
        i += size
    if i != vec.size:
        raise ValueError(f"vector has {vec.size} entries, model needs {i}")
    return out


def forward(params: Params, x: np.ndarray, model: ModelConfig) -> tuple[np.ndarray, list[np.ndarray]]:
    """Network output and the per-layer inputs (kept for backprop). Hidden units are tanh."""
    acts = [x]
    h = x
    last = _n_layers(model) - 1
    for k in range(last + 1):
        z = h @ params[f"layers.{k}.weight"].T + params[f"layers.{k}.bias"]
        h = z if k == last else np.tanh(z)
        acts.append(h)
    return h, acts


def _loss_and_dout(out: np.ndarray, y: np.ndarray, task: str) -> tuple[float, np.ndarray]:
    n = out.shape[0]
    if task == "regression":
        diff = out - y
        return 0.5 * float(np.sum(diff * diff)) / n, diff / n
    shifted = out - out.max(axis=1, keepdims=True)
    logz = np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))
    logp = shifted - logz
    labels = y.astype(np.int64)
    loss = -float(np.sum(logp[np.arange(n), labels])) / n
    dout = np.exp(logp)
    dout[np.arange(n), labels] -= 1.0
    return loss, dout / n


def loss(params: Params, x: np.ndarray, y: np.ndarray, model: ModelConfig, task: str) -> float:
    out, _ = forward(params, x, model)
    return _loss_and_dout(out, y, task)[0]


def loss_and_grad(
    params: Params, x: np.ndarray, y: np.ndarray, model: ModelConfig, task: str
) -> tuple[float, Params]:
    """Mean loss over the batch and its exact gradient.

    Regression uses ``0.5 * mean ||f(x) - y||^2``; classification uses
    softmax cross-entropy with integer labels in ``y``.
    """
    out, acts = forward(params, x, model)
    value, delta = _loss_and_dout(out, y, task)
    grads = {}
    for k in range(_n_layers(model) - 1, -1, -1):
        h_in = acts[k]
        grads[f"layers.{k}.weight"] = delta.T @ h_in
        grads[f"layers.{k}.bias"] = delta.sum(axis=0)
        if k > 0:
            delta = (delta @ params[f"layers.{k}.weight"]) * (1.0 - h_in * h_in)
    return value, dict(sorted(grads.items()))


def global_norm(grads: Params) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for _, g in sorted(grads.items()))))


def make_dataset(model: ModelConfig, data: DataConfig, rng: np.random.Generator) -> Dataset:
    """Teacher-student data: a random network of the student's shape labels Gaussian inputs."""
    d_in, d_out = model.layer_widths[0], model.layer_widths[-1]
    teacher = init_params(model, rng, gain=1.5)
    for name in teacher:
        if name.endswith("bias"):
            teacher[name] = 0.1 * rng.standard_normal(teacher[name].shape)
    n = data.n_train + data.n_val
    x = rng.standard_normal((n, d_in))
    out, _ = forward(teacher, x, model)
    if data.task == "regression":
        y = out + data.noise_std * rng.standard_normal(out.shape)
    else:
        if d_out < 2:
            raise ValueError("classification needs at least two output units")
        y = np.argmax(out + data.noise_std * rng.standard_normal(out.shape), axis=1).astype(np.float64)
    return Dataset(x[: data.n_train], y[: data.n_train], x[data.n_train :], y[data.n_train :], data.task)
