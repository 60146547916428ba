"""Command line entry points: train, eval, diagnose.

A run is described by a JSON config naming the network, loss, optimizer
hyperparameters, dataset, and output directory. Outputs are a weights
container (weights.msaw), per-epoch metrics as CSV and JSON, the resolved
config, and for diagnose a JSON report. Exit codes: 0 success, 2 invalid
config or inputs, 1 unexpected runtime failure.
"""

import argparse
import csv
import json
import os
import struct
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diagnostics
from .data import Dataset, load_mnist_idx, make_binary_regression
from .layers import (
    _ACTIVATIONS,
    Activation,
    BatchNorm,
    BinaryDense,
    FloatDense,
    Network,
    TernaryDense,
)
from .msa import OPTIMIZERS, TrainConfig, train
from .propagation import (
    LOSS_KINDS,
    TerminalLoss,
    error_rate,
    forward_pass,
    objective,
)

ENV_OUT_DIR = "MSANET_OUT_DIR"

LAYER_KINDS = (
    "binary_dense", "ternary_dense", "float_dense", "activation", "batch_norm"
)


class ConfigError(ValueError):
    """The config file or a named input is invalid or missing."""


def _require(cond: bool, message: str):
    if not cond:
        raise ConfigError(message)


_TOP_KEYS = {
    "network", "loss", "optimizer", "dataset", "output_dir", "epochs",
    "batch_size", "seed", "c", "alpha0", "alpha_decay", "adam_lr", "eta",
    "rho_refresh", "lam",
}


@dataclass
class RunConfig:
    """Validated run description, independent of any constructed objects."""

    network: list
    loss: str
    optimizer: str
    dataset: dict
    output_dir: str = "runs/run"
    epochs: int = 1
    batch_size: int = 100
    seed: int = 0
    c: float | None = None
    alpha0: float = 0.999
    alpha_decay: float = 0.5
    adam_lr: float = 1e-3
    eta: float = 0.05
    rho_refresh: str = "batch"
    lam: float = 1e-7

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
        _require(isinstance(raw, dict), f"{path}: config must be a JSON object")
        unknown = set(raw) - _TOP_KEYS
        _require(not unknown, f"{path}: unknown config keys {sorted(unknown)}")
        for key in ("network", "loss", "optimizer", "dataset"):
            _require(key in raw, f"{path}: missing required key {key!r}")
        cfg = cls(**raw)
        cfg.validate()
        return cfg

    def validate(self):
        _require(self.loss in LOSS_KINDS,
                 f"loss must be one of {LOSS_KINDS}, got {self.loss!r}")
        _require(self.optimizer in OPTIMIZERS,
                 f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        try:
            self.train_config().validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        _require(isinstance(self.network, list) and self.network,
                 "network must be a non-empty list of layer specs")
        self._validate_layers()
        self._validate_dataset()
        return self

    def _validate_layers(self):
        prev_out = None
        kinds = set()
        for i, spec in enumerate(self.network):
            _require(isinstance(spec, dict), f"layer {i} must be an object")
            kind = spec.get("kind")
            _require(kind in LAYER_KINDS,
                     f"layer {i}: kind must be one of {LAYER_KINDS}, got {kind!r}")
            kinds.add(kind)
            if kind in ("binary_dense", "ternary_dense", "float_dense"):
                in_dim, out_dim = spec.get("in_dim"), spec.get("out_dim")
                _require(
                    isinstance(in_dim, int) and isinstance(out_dim, int)
                    and in_dim >= 1 and out_dim >= 1,
                    f"layer {i}: in_dim/out_dim must be positive integers",
                )
            else:
                dim = spec.get("dim")
                _require(isinstance(dim, int) and dim >= 1,
                         f"layer {i}: dim must be a positive integer")
                in_dim = out_dim = dim
            if kind == "activation":
                _require(spec.get("fn") in _ACTIVATIONS,
                         f"layer {i}: fn must be one of {sorted(_ACTIVATIONS)}")
            if kind == "ternary_dense" and "lam" in spec:
                lam = spec["lam"]
                _require(isinstance(lam, (int, float)) and lam >= 0,
                         f"layer {i}: lam must be >= 0")
            if prev_out is not None:
                _require(
                    in_dim == prev_out,
                    f"layer {i}: in_dim {in_dim} does not match previous "
                    f"layer output {prev_out}",
                )
            prev_out = out_dim
        if self.optimizer == "binary_msa":
            _require("ternary_dense" not in kinds,
                     "binary_msa cannot train ternary_dense layers")
        if self.optimizer == "ternary_msa":
            _require("binary_dense" not in kinds,
                     "ternary_msa cannot train binary_dense layers")
        if self.optimizer == "gradient":
            _require(
                not kinds & {"binary_dense", "ternary_dense"},
                "gradient optimizer needs an all-smooth network",
            )

    def _validate_dataset(self):
        ds = self.dataset
        _require(isinstance(ds, dict), "dataset must be an object")
        kind = ds.get("kind")
        if kind == "mnist":
            _require("dir" in ds, "mnist dataset needs a 'dir' key")
            _require(self.loss != "mean_square",
                     "mean_square needs vector targets; mnist provides labels")
            for key in ("limit", "test_limit"):
                if ds.get(key) is not None:
                    _require(isinstance(ds[key], int) and ds[key] >= 1,
                             f"dataset.{key} must be a positive integer")
        elif kind == "synthetic_regression":
            for key in ("d0", "d1", "S"):
                _require(isinstance(ds.get(key), int) and ds[key] >= 1,
                         f"dataset.{key} must be a positive integer")
            _require(self.loss == "mean_square",
                     "synthetic_regression provides vector targets; use mean_square")
            _require(ds["d0"] == self.network[0].get("in_dim",
                                                     self.network[0].get("dim")),
                     "dataset d0 must match the first layer's input dim")
        else:
            raise ConfigError(
                f"dataset.kind must be 'mnist' or 'synthetic_regression', "
                f"got {kind!r}"
            )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            optimizer=self.optimizer,
            epochs=self.epochs,
            batch_size=self.batch_size,
            seed=self.seed,
            c=self.c,
            alpha0=self.alpha0,
            alpha_decay=self.alpha_decay,
            adam_lr=self.adam_lr,
            eta=self.eta,
            rho_refresh=self.rho_refresh,
        )

    def to_dict(self) -> dict:
        return {
            "network": self.network,
            "loss": self.loss,
            "optimizer": self.optimizer,
            "dataset": self.dataset,
            "output_dir": self.output_dir,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "c": self.c,
            "alpha0": self.alpha0,
            "alpha_decay": self.alpha_decay,
            "adam_lr": self.adam_lr,
            "eta": self.eta,
            "rho_refresh": self.rho_refresh,
            "lam": self.lam,
        }


def build_network(cfg: RunConfig) -> Network:
    """Construct and seed the network described by the config."""
    rng = np.random.default_rng(cfg.seed)
    layers = []
    for spec in cfg.network:
        kind = spec["kind"]
        if kind == "binary_dense":
            layers.append(BinaryDense.random(spec["in_dim"], spec["out_dim"], rng))
        elif kind == "ternary_dense":
            lam = spec.get("lam", cfg.lam)
            layers.append(
                TernaryDense.random(spec["in_dim"], spec["out_dim"], lam, rng)
            )
        elif kind == "float_dense":
            layers.append(
                FloatDense.random(spec["in_dim"], spec["out_dim"], rng,
                                  bias=spec.get("bias", True))
            )
        elif kind == "activation":
            layers.append(Activation(spec["fn"], spec["dim"]))
        else:
            layers.append(BatchNorm.identity(spec["dim"]))
    return Network(layers)


def _mnist_file(directory: Path, stem: str) -> Path | None:
    for name in (stem, stem + ".gz"):
        p = directory / name
        if p.is_file():
            return p
    return None


def load_split(cfg: RunConfig, split: str) -> Dataset | None:
    """Materialize one split of the configured dataset.

    Returns None when the split does not exist (mnist test files absent,
    or synthetic test requested with no test_size).
    """
    ds = cfg.dataset
    if ds["kind"] == "mnist":
        directory = Path(ds["dir"])
        stems = {
            "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
            "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
        }
        _require(split in stems, f"split must be 'train' or 'test', got {split!r}")
        images = _mnist_file(directory, stems[split][0])
        labels = _mnist_file(directory, stems[split][1])
        if images is None or labels is None:
            if split == "test":
                return None
            raise ConfigError(
                f"mnist files {stems[split]} not found under {directory}"
            )
        out = load_mnist_idx(images, labels, split)
        limit = ds.get("limit") if split == "train" else ds.get("test_limit")
        if limit is not None and limit < len(out):
            out = out.subset(limit)
        return out
    prob = make_binary_regression(ds["d0"], ds["d1"], ds["S"],
                                  ds.get("seed", cfg.seed))
    if split == "train":
        return prob.dataset("train")
    test_size = ds.get("test_size")
    if not test_size:
        return None
    rng = np.random.default_rng(ds.get("seed", cfg.seed) + 1)
    inputs = rng.standard_normal((test_size, ds["d0"]))
    return Dataset(inputs, inputs @ prob.theta_star.T, "test")


# ---------------------------------------------------------------------------
# Weights container: little-endian, magic MSAW, version 1. Discrete weights
# are stored as int8 so save/load round-trips are bit exact.

_MAGIC = b"MSAW"
_KIND_TAGS = {
    BinaryDense: 1, TernaryDense: 2, FloatDense: 3, Activation: 4, BatchNorm: 5,
}
_ACTIVATION_ORDER = ("relu", "tanh", "sigmoid", "softplus", "identity")


def _pack_f64(arr) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def save_weights(path, net: Network):
    out = [_MAGIC, struct.pack("<BI", 1, net.depth)]
    for lay in net.layers:
        tag = _KIND_TAGS[type(lay)]
        if isinstance(lay, BinaryDense):
            out.append(struct.pack("<BII", tag, lay.out_dim, lay.in_dim))
            out.append(lay.theta.astype(np.int8).tobytes())
        elif isinstance(lay, TernaryDense):
            out.append(struct.pack("<BIId", tag, lay.out_dim, lay.in_dim, lay.lam))
            out.append(lay.theta.astype(np.int8).tobytes())
        elif isinstance(lay, FloatDense):
            has_bias = lay.bias is not None
            out.append(struct.pack("<BIIB", tag, lay.out_dim, lay.in_dim, has_bias))
            out.append(_pack_f64(lay.weight))
            if has_bias:
                out.append(_pack_f64(lay.bias))
        elif isinstance(lay, Activation):
            out.append(struct.pack(
                "<BBI", tag, _ACTIVATION_ORDER.index(lay.kind), lay.in_dim
            ))
        else:
            out.append(struct.pack("<BIdd", tag, lay.in_dim, lay.eps, lay.momentum))
            for arr in (lay.gamma, lay.beta, lay.running_mean, lay.running_var):
                out.append(_pack_f64(arr))
    Path(path).write_bytes(b"".join(out))


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf = buf
        self.off = 0
        self.path = path

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.off + size > len(self.buf):
            raise ConfigError(
                f"{self.path}: truncated at offset {self.off}"
            )
        vals = struct.unpack_from(fmt, self.buf, self.off)
        self.off += size
        return vals

    def array(self, count: int, dtype) -> np.ndarray:
        size = count * np.dtype(dtype).itemsize
        if self.off + size > len(self.buf):
            raise ConfigError(
                f"{self.path}: truncated array at offset {self.off}"
            )
        out = np.frombuffer(self.buf, dtype=dtype, count=count, offset=self.off)
        self.off += size
        return out


def load_weights(path) -> Network:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"weights file not found: {path}")
    r = _Reader(path.read_bytes(), path)
    magic = bytes(r.take("<4s")[0])
    if magic != _MAGIC:
        raise ConfigError(f"{path}: bad magic {magic!r}, expected {_MAGIC!r}")
    version, depth = r.take("<BI")
    if version != 1:
        raise ConfigError(f"{path}: unsupported container version {version}")
    layers = []
    for _ in range(depth):
        (tag,) = r.take("<B")
        if tag == 1:
            out_dim, in_dim = r.take("<II")
            theta = r.array(out_dim * in_dim, "<i1").astype(np.float64)
            layers.append(BinaryDense(theta.reshape(out_dim, in_dim)))
        elif tag == 2:
            out_dim, in_dim, lam = r.take("<IId")
            theta = r.array(out_dim * in_dim, "<i1").astype(np.float64)
            layers.append(TernaryDense(theta.reshape(out_dim, in_dim), lam))
        elif tag == 3:
            out_dim, in_dim, has_bias = r.take("<IIB")
            weight = r.array(out_dim * in_dim, "<f8").reshape(out_dim, in_dim)
            bias = r.array(out_dim, "<f8") if has_bias else None
            layers.append(FloatDense(weight, bias))
        elif tag == 4:
            sub, dim = r.take("<BI")
            if sub >= len(_ACTIVATION_ORDER):
                raise ConfigError(f"{path}: unknown activation tag {sub}")
            layers.append(Activation(_ACTIVATION_ORDER[sub], dim))
        elif tag == 5:
            dim, eps, momentum = r.take("<Idd")
            parts = [r.array(dim, "<f8") for _ in range(4)]
            layers.append(BatchNorm(parts[0], parts[1], parts[2], parts[3],
                                    eps=eps, momentum=momentum))
        else:
            raise ConfigError(f"{path}: unknown layer tag {tag}")
    if r.off != len(r.buf):
        raise ConfigError(f"{path}: {len(r.buf) - r.off} trailing bytes")
    return Network(layers)


# ---------------------------------------------------------------------------
# Metrics files. The CSV holds only deterministic columns so that identical
# seeded runs produce identical bytes; timing lives in the JSON.

def write_metrics_csv(path, records):
    n_sparse = len(records[0].sparsity_per_layer) if records else 0
    header = ["epoch", "step", "j_train", "train_error", "test_error",
              "nonzero_fraction"]
    header += [f"sparsity_l{i}" for i in range(n_sparse)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for rec in records:
            row = [
                rec.epoch, rec.step, repr(rec.j_train), repr(rec.train_error),
                "" if rec.test_error is None else repr(rec.test_error),
                "" if rec.nonzero_fraction is None else repr(rec.nonzero_fraction),
            ]
            row += [repr(v) for v in rec.sparsity_per_layer]
            writer.writerow(row)


def write_metrics_json(path, records, cfg: RunConfig):
    payload = {
        "config": cfg.to_dict(),
        "epochs": [
            {
                "epoch": rec.epoch,
                "step": rec.step,
                "j_train": rec.j_train,
                "train_error": rec.train_error,
                "test_error": rec.test_error,
                "nonzero_fraction": rec.nonzero_fraction,
                "sparsity_per_layer": rec.sparsity_per_layer,
                "wall_ms": rec.wall_ms,
            }
            for rec in records
        ],
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def resolve_output_dir(cfg: RunConfig) -> Path:
    out = Path(os.environ.get(ENV_OUT_DIR) or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# Subcommands

def cmd_train(args) -> int:
    cfg = RunConfig.from_file(args.config)
    out_dir = resolve_output_dir(cfg)
    net = build_network(cfg)
    train_ds = load_split(cfg, "train")
    test_ds = load_split(cfg, "test")
    _require(train_ds.input_dim == net.layers[0].in_dim,
             f"dataset input dim {train_ds.input_dim} does not match "
             f"network input dim {net.layers[0].in_dim}")

    def report(rec, _net):
        test = "" if rec.test_error is None else f" test_error={rec.test_error:.4f}"
        print(f"epoch {rec.epoch:3d}  J={rec.j_train:.6f}  "
              f"train_error={rec.train_error:.4f}{test}", flush=True)

    net, records = train(net, train_ds, cfg.loss, cfg.train_config(),
                         test_dataset=test_ds, callback=report)
    save_weights(out_dir / "weights.msaw", net)
    write_metrics_csv(out_dir / "metrics.csv", records)
    write_metrics_json(out_dir / "metrics.json", records, cfg)
    (out_dir / "config_resolved.json").write_text(
        json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n"
    )
    print(f"wrote {out_dir}/weights.msaw and metrics files")
    return 0


def _eval_split(cfg: RunConfig, net: Network, split: str):
    ds = load_split(cfg, split)
    _require(ds is not None, f"split {split!r} is not available for this dataset")
    loss = TerminalLoss(cfg.loss, ds.targets)
    traj = forward_pass(net, ds.inputs, training=False)
    j = objective(net, ds.inputs, loss, training=False)
    return ds, j, error_rate(traj.states[-1], loss)


def cmd_eval(args) -> int:
    cfg = RunConfig.from_file(args.config)
    net = load_weights(args.weights)
    _, j, err = _eval_split(cfg, net, args.split)
    print(f"split={args.split} J={j:.6f} error_rate={err:.4f}")
    return 0


def cmd_diagnose(args) -> int:
    cfg = RunConfig.from_file(args.config)
    _require(args.perturbations >= 0, "--perturbations must be >= 0")
    net = load_weights(args.weights)
    ds = load_split(cfg, "train")
    batch = min(cfg.batch_size, len(ds))
    x0 = ds.inputs[:batch]
    loss = TerminalLoss(cfg.loss, ds.targets[:batch])

    residual = diagnostics.pmp_residual(net, x0, loss)
    rng = np.random.default_rng(cfg.seed)
    reports = []
    for _ in range(args.perturbations):
        phi = diagnostics.perturb_parameters(net, rng)
        reports.append(diagnostics.theorem2_terms(net, phi, x0, loss))
    c_star = diagnostics.fit_error_constant(reports)

    payload = {
        "batch_size": batch,
        "pmp_residual": residual.to_dict(),
        "perturbations": [rep.to_dict() for rep in reports],
        "fitted_c": c_star,
    }
    out_dir = resolve_output_dir(cfg)
    out_path = out_dir / "diagnostics.json"
    with open(out_path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"max Hamiltonian gap {residual.max_hamiltonian_gap:.6g}, "
          f"state residual {residual.state_residual:.3g}, "
          f"co-state residual {residual.costate_residual:.3g}")
    if reports:
        print(f"fitted C over {len(reports)} perturbations: {c_star:.6g}")
    print(f"wrote {out_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="msanet",
        description="Train and inspect binary/ternary networks by layer-wise "
                    "Hamiltonian maximization.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a network from a config")
    p_train.add_argument("config")
    p_train.set_defaults(fn=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate saved weights on a split")
    p_eval.add_argument("config")
    p_eval.add_argument("weights")
    p_eval.add_argument("--split", choices=("train", "test"), default="test")
    p_eval.set_defaults(fn=cmd_eval)

    p_diag = sub.add_parser(
        "diagnose", help="optimality residuals and error-estimate terms"
    )
    p_diag.add_argument("config")
    p_diag.add_argument("weights")
    p_diag.add_argument("--perturbations", type=int, default=20)
    p_diag.set_defaults(fn=cmd_diagnose)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # pragma: no cover - unexpected failures
        print(f"unexpected error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
