"""Command-line entry point.

Commands: ``poc``, ``pretrain-ae``, ``train-toy``, ``train-latent``,
``eval``. Every run resolves its configuration from built-in defaults, an
optional flat key=value file, and flag overrides (flags win), then writes a
config echo, the run artifacts, and a manifest listing them. Exit codes:
0 success, 1 numeric abort, 2 configuration error.

Wall-clock timings go to a separate ``timing.csv`` so that every metrics
file is byte-reproducible for a given config and seed.
"""

from __future__ import annotations

import argparse
import hashlib
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .autodiff import Tensor, no_grad
from .nets import Mlp, MlpSpec
from .samplers import KINDS, SamplerParams
from .training import (
    TrainConfig,
    TrainingAborted,
    load_checkpoint,
    save_checkpoint,
)
from . import experiments as exp

__all__ = ["ConfigError", "RunConfig", "main", "parse_config", "run"]


class ConfigError(Exception):
    """Invalid or conflicting run configuration."""


COMMANDS = ("poc", "pretrain-ae", "train-toy", "train-latent", "eval")
DEFAULT_STEPS = {"poc": 6000, "pretrain-ae": 2000, "train-toy": 5000, "train-latent": 3000, "eval": 1}
DATASETS = ("ring8", "manifold32")

# internal field name -> config file / echo key
_KEY_NAMES = {"lr_g": "lr_G", "lr_gnn": "lr_GNN"}


@dataclass
class RunConfig:
    command: str
    sampler: str = "gnn"
    steps: int | None = None
    seed: int = 0
    b_d: int = 256
    b_g: int = 256
    b_t: int = 64
    lr_g: float = 1e-3
    lr_gnn: float = 1e-3
    log_every: int = 100
    out: str = "runs"
    checkpoint: str | None = None
    overwrite: bool = False
    dataset: str = "ring8"
    poc_surfaces: int = 1000

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            b_d=self.b_d, b_g=self.b_g, b_t=self.b_t,
            lr_g=self.lr_g, lr_gnn=self.lr_gnn,
            steps=self.steps, seed=self.seed,
            sampler=self.sampler, log_every=self.log_every,
        )


def _external_key(field_name: str) -> str:
    return _KEY_NAMES.get(field_name, field_name)


_PARSERS = {
    "sampler": str, "steps": int, "seed": int, "b_d": int, "b_g": int, "b_t": int,
    "lr_g": float, "lr_gnn": float, "log_every": int, "out": str,
    "checkpoint": str, "overwrite": None, "dataset": str, "poc_surfaces": int,
}
_FILE_KEYS = {_external_key(name): name for name in _PARSERS}


def _parse_bool(key: str, raw: str) -> bool:
    if raw.lower() in ("true", "1", "yes"):
        return True
    if raw.lower() in ("false", "0", "no"):
        return False
    raise ConfigError(f"invalid value for {key}: {raw!r} (expected true or false)")


def _read_config_file(path: str) -> dict[str, object]:
    """Flat key=value lines; '#' starts a comment; unknown keys are rejected."""
    values: dict[str, object] = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as err:
        raise ConfigError(f"cannot read config file {path}: {err}") from err
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _FILE_KEYS:
            raise ConfigError(f"unknown config key: {key}")
        field_name = _FILE_KEYS[key]
        if field_name == "overwrite":
            values[field_name] = _parse_bool(key, raw)
        else:
            parse = _PARSERS[field_name]
            try:
                values[field_name] = parse(raw)
            except ValueError as err:
                raise ConfigError(f"invalid value for {key}: {raw!r}") from err
    return values


def _validate(config: RunConfig) -> None:
    if config.command not in COMMANDS:
        raise ConfigError(f"unknown command: {config.command}")
    if config.sampler not in KINDS:
        raise ConfigError(f"invalid value for sampler: {config.sampler!r}")
    if config.steps is None:
        config.steps = DEFAULT_STEPS[config.command]
    if config.steps < 1:
        raise ConfigError("steps must be >= 1")
    if config.seed < 0:
        raise ConfigError("seed must be >= 0")
    for key in ("b_d", "b_g", "b_t"):
        if getattr(config, key) < 2:
            raise ConfigError(f"{key} must be >= 2")
    if config.lr_g <= 0.0:
        raise ConfigError("lr_G must be > 0")
    if config.lr_gnn <= 0.0:
        raise ConfigError("lr_GNN must be > 0")
    if config.log_every < 1:
        raise ConfigError("log_every must be >= 1")
    if config.dataset not in DATASETS:
        raise ConfigError(f"invalid value for dataset: {config.dataset!r}")
    if config.poc_surfaces < 1:
        raise ConfigError("poc_surfaces must be >= 1")


def parse_config(command: str, config_file: str | None, overrides: dict[str, object]) -> RunConfig:
    """Resolve defaults, file values, and flag overrides into a RunConfig."""
    config = RunConfig(command=command)
    if config_file is not None:
        for name, value in _read_config_file(config_file).items():
            setattr(config, name, value)
    for name, value in overrides.items():
        if value is not None:
            setattr(config, name, value)
    _validate(config)
    return config


# ---------------------------------------------------------------------------
# artifact output


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    lines = [",".join(header)]
    for row in rows:
        cells = []
        for name, value in zip(header, row):
            if name == "step":
                cells.append(str(int(value)))
            else:
                cells.append(_fmt(float(value)))
        lines.append(",".join(cells))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _write_matrix(path: Path, matrix: np.ndarray) -> None:
    lines = [",".join(repr(float(v)) for v in row) for row in matrix]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _echo_lines(config: RunConfig) -> list[str]:
    pairs = []
    for f in fields(RunConfig):
        value = getattr(config, f.name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        pairs.append(f"{_external_key(f.name)}={value}")
    return sorted(pairs)


def _config_hash(config: RunConfig) -> str:
    text = "\n".join(_echo_lines(config))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


class RunDir:
    """Output directory with clobber protection and a manifest."""

    def __init__(self, config: RunConfig, planned: list[str]):
        self.root = Path(config.out)
        self.config = config
        self.planned = ["config_echo.txt", "manifest.txt"] + planned
        self.written: list[str] = []
        if not config.overwrite:
            existing = [name for name in self.planned if (self.root / name).exists()]
            if existing:
                raise ConfigError(
                    f"refusing to overwrite {', '.join(sorted(existing))} in {self.root} "
                    "(pass --overwrite true to allow)"
                )
        self.root.mkdir(parents=True, exist_ok=True)
        echo = self.root / "config_echo.txt"
        echo.write_text("\n".join(_echo_lines(config)) + "\n", encoding="utf-8")
        self.written.append("config_echo.txt")

    def path(self, name: str) -> Path:
        self.written.append(name)
        return self.root / name

    def finish(self) -> None:
        manifest = self.root / "manifest.txt"
        listed = sorted(set(self.written + ["manifest.txt"]))
        manifest.write_text("\n".join(listed) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# checkpoint (de)serialization of whole models


def _sampler_meta(sampler: SamplerParams) -> dict:
    return {
        "kind": sampler.kind, "alpha": sampler.alpha, "k": sampler.k,
        "layers": sampler.layers, "hidden": sampler.hidden,
    }


def _rebuild_sampler(meta: dict, params: dict[str, np.ndarray]) -> SamplerParams:
    sampler = SamplerParams(
        kind=meta["kind"], alpha=meta["alpha"], k=meta["k"],
        layers=meta["layers"], hidden=meta["hidden"],
    )
    sampler.weights = {name: Tensor(arr, requires_grad=True) for name, arr in params.items()}
    return sampler


def _rebuild_mlp(widths: list[int], activation: str, params: dict[str, np.ndarray]) -> Mlp:
    tensors = {name: Tensor(arr, requires_grad=True) for name, arr in params.items()}
    return Mlp(MlpSpec(tuple(widths), activation), tensors)


def _split_prefix(params: dict[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    return {name[len(prefix):]: arr for name, arr in params.items() if name.startswith(prefix)}


def _load_autoencoder(path: str) -> tuple[Mlp, Mlp, dict]:
    if path is None:
        raise ConfigError("train-latent requires --checkpoint pointing to a pretrain-ae checkpoint")
    if not Path(path).exists():
        raise ConfigError(f"checkpoint not found: {path}")
    params, meta = load_checkpoint(path)
    if meta.get("command") != "pretrain-ae":
        raise ConfigError(f"checkpoint {path} was not produced by pretrain-ae")
    encoder = _rebuild_mlp(meta["enc_widths"], meta["activation"], _split_prefix(params, "enc."))
    decoder = _rebuild_mlp(meta["dec_widths"], meta["activation"], _split_prefix(params, "dec."))
    return encoder, decoder, meta


# ---------------------------------------------------------------------------
# commands


def _run_poc(config: RunConfig) -> None:
    planned = ["results.csv"]
    trained_kind = config.sampler != "gaussian"
    if trained_kind:
        planned.append("sampler_checkpoint.json")
    out = RunDir(config, planned)
    train_surfaces = exp.gen_poc_surfaces(config.poc_surfaces, [config.seed, 1])
    test_surfaces = exp.gen_poc_surfaces(config.poc_surfaces, [config.seed, 2])
    sampler = exp.train_poc_sampler(config.sampler, config.steps, config.seed,
                                    train_surfaces, lr=config.lr_gnn)
    result = exp.eval_poc(sampler, test_surfaces, config.seed)
    path = out.path("results.csv")
    path.write_text(
        "method,mean_ll,std_ll\n"
        f"{result.method},{_fmt(result.mean_ll)},{_fmt(result.std_ll)}\n",
        encoding="utf-8",
    )
    if trained_kind:
        meta = {"command": "poc", "seed": config.seed, "config_hash": _config_hash(config),
                "sampler": _sampler_meta(sampler)}
        save_checkpoint(out.path("sampler_checkpoint.json"), sampler.weights, meta)
    out.finish()
    print(f"poc {result.method}: mean_ll={result.mean_ll:.2f} std_ll={result.std_ll:.2f}")


def _run_pretrain_ae(config: RunConfig) -> None:
    out = RunDir(config, ["metrics.csv", "ae_checkpoint.json"])
    encoder, decoder, rows = exp.pretrain_autoencoder(
        config.steps, config.seed, batch=config.b_d, lr=config.lr_g,
        log_every=config.log_every,
    )
    _write_csv(out.path("metrics.csv"), ["step", "loss"], rows)
    tensors = {f"enc.{k}": v for k, v in encoder.parameters().items()}
    tensors.update({f"dec.{k}": v for k, v in decoder.parameters().items()})
    meta = {
        "command": "pretrain-ae", "seed": config.seed, "config_hash": _config_hash(config),
        "enc_widths": list(encoder.spec.widths), "dec_widths": list(decoder.spec.widths),
        "activation": encoder.spec.activation,
    }
    save_checkpoint(out.path("ae_checkpoint.json"), tensors, meta)
    out.finish()
    print(f"pretrain-ae: final reconstruction mse={rows[-1][1]:.5f}")


def _save_run_checkpoint(out: RunDir, config: RunConfig, generator: Mlp,
                         sampler: SamplerParams, extra_tensors=None, extra_meta=None) -> None:
    tensors = {f"gen.{k}": v for k, v in generator.parameters().items()}
    tensors.update({f"sampler.{k}": v for k, v in sampler.weights.items()})
    if extra_tensors:
        tensors.update(extra_tensors)
    meta = {
        "command": config.command, "seed": config.seed, "dataset": config.dataset,
        "config_hash": _config_hash(config),
        "gen_widths": list(generator.spec.widths), "activation": generator.spec.activation,
        "sampler": _sampler_meta(sampler),
    }
    if extra_meta:
        meta.update(extra_meta)
    save_checkpoint(out.path("checkpoint.json"), tensors, meta)


def _run_train_toy(config: RunConfig) -> None:
    out = RunDir(config, ["metrics.csv", "timing.csv", "checkpoint.json", "samples.csv"])
    generator, sampler, rows, timings = exp.run_toy_experiment(
        config.sampler, config.train_config(), dataset=config.dataset)
    _write_csv(out.path("metrics.csv"), ["step", "loss_g", "loss_t"], rows)
    _write_csv(out.path("timing.csv"), ["step", "wall_ms"], timings)
    _save_run_checkpoint(out, config, generator, sampler)
    samples = exp.generate_samples(generator, 2048, [config.seed, 41])
    _write_matrix(out.path("samples.csv"), samples)
    out.finish()
    print(f"train-toy [{config.sampler}]: final loss_g={rows[-1][1]:.5f}")


def _run_train_latent(config: RunConfig) -> None:
    encoder, decoder, ae_meta = _load_autoencoder(config.checkpoint)
    out = RunDir(config, ["metrics.csv", "timing.csv", "checkpoint.json",
                          "samples_latent.csv", "samples_decoded.csv"])
    generator, sampler, rows, timings = exp.run_latent_experiment(
        config.sampler, config.train_config(), encoder, decoder)
    metrics = [[row[0], row[1], row[3], row[4]] for row in rows]
    _write_csv(out.path("metrics.csv"), ["step", "cf_loss", "energy_latent", "energy_data"], metrics)
    _write_csv(out.path("timing.csv"), ["step", "wall_ms"], timings)
    ae_tensors = {f"ae.enc.{k}": v for k, v in encoder.parameters().items()}
    ae_tensors.update({f"ae.dec.{k}": v for k, v in decoder.parameters().items()})
    extra_meta = {"enc_widths": ae_meta["enc_widths"], "dec_widths": ae_meta["dec_widths"]}
    _save_run_checkpoint(out, config, generator, sampler, ae_tensors, extra_meta)
    latents = exp.generate_samples(generator, 1024, [config.seed, 41])
    with no_grad():
        decoded = decoder(Tensor(latents)).data.copy()
    _write_matrix(out.path("samples_latent.csv"), latents)
    _write_matrix(out.path("samples_decoded.csv"), decoded)
    out.finish()
    print(f"train-latent [{config.sampler}]: final cf_loss={rows[-1][1]:.5f} "
          f"energy_latent={rows[-1][3]:.5f}")


def _run_eval(config: RunConfig) -> None:
    if config.checkpoint is None:
        raise ConfigError("eval requires --checkpoint")
    if not Path(config.checkpoint).exists():
        raise ConfigError(f"checkpoint not found: {config.checkpoint}")
    params, meta = load_checkpoint(config.checkpoint)
    command = meta.get("command")
    if command not in ("train-toy", "train-latent"):
        raise ConfigError(f"checkpoint {config.checkpoint} was not produced by a train command")
    generator = _rebuild_mlp(meta["gen_widths"], meta["activation"], _split_prefix(params, "gen."))

    out = RunDir(config, ["eval.csv", "samples.csv"])
    if command == "train-toy":
        dataset = meta["dataset"]
        samples = exp.generate_samples(generator, 2048, [config.seed, 41])
        held = exp.make_toy_dataset(exp.ToySpec(dataset, 2048, 0.05, exp.TOY_EVAL_SEED))
        distance = exp.energy_distance(samples, held)
        header = ["energy_distance"]
        row = [_fmt(distance)]
        if dataset == "ring8":
            header.append("mode_coverage")
            row.append(str(exp.mode_coverage(samples, exp.RING8_CENTERS, 0.15)))
        out.path("eval.csv").write_text(
            ",".join(header) + "\n" + ",".join(row) + "\n", encoding="utf-8")
        _write_matrix(out.path("samples.csv"), samples)
    else:
        encoder = _rebuild_mlp(meta["enc_widths"], meta["activation"], _split_prefix(params, "ae.enc."))
        decoder = _rebuild_mlp(meta["dec_widths"], meta["activation"], _split_prefix(params, "ae.dec."))
        held = exp.make_toy_dataset(exp.ToySpec("manifold32", 2000, 0.05, exp.TOY_EVAL_SEED))
        latents = exp.generate_samples(generator, 1024, [config.seed, 41])
        with no_grad():
            held_latents = encoder(Tensor(held)).data.copy()
            decoded = decoder(Tensor(latents)).data.copy()
        energy_latent = exp.energy_distance(latents, held_latents)
        energy_data = exp.energy_distance(decoded, held)
        out.path("eval.csv").write_text(
            "energy_latent,energy_data\n"
            f"{_fmt(energy_latent)},{_fmt(energy_data)}\n", encoding="utf-8")
        _write_matrix(out.path("samples.csv"), latents)
    out.finish()
    print(f"eval: wrote {out.root / 'eval.csv'}")


def run(config: RunConfig) -> int:
    """Execute one command; returns the process exit code."""
    handlers = {
        "poc": _run_poc,
        "pretrain-ae": _run_pretrain_ae,
        "train-toy": _run_train_toy,
        "train-latent": _run_train_latent,
        "eval": _run_eval,
    }
    try:
        handlers[config.command](config)
    except TrainingAborted as err:
        print(f"aborted: {err}", file=sys.stderr)
        return 1
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cfmatch", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for command in COMMANDS:
        p = sub.add_parser(command)
        p.add_argument("--config", default=None, help="flat key=value config file")
        p.add_argument("--sampler", choices=KINDS, default=None)
        p.add_argument("--steps", type=int, default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--checkpoint", default=None)
        p.add_argument("--overwrite", choices=("true", "false"), default=None)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    overrides = {
        "sampler": args.sampler,
        "steps": args.steps,
        "seed": args.seed,
        "out": args.out,
        "checkpoint": args.checkpoint,
        "overwrite": None if args.overwrite is None else args.overwrite == "true",
    }
    try:
        config = parse_config(args.command, args.config, overrides)
        return run(config)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
