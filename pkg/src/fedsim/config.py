"""Experiment configuration: INI-style parsing with strict validation,
canonical serialization (so config hashes are portable), and builders that
turn a config into concrete datasets and a federated setup.
"""

from __future__ import annotations

import configparser
import hashlib
import io
import math
from dataclasses import dataclass

from . import data as data_mod
from .aggregation import AggregationRule
from .attacks import AttackConfig, Trigger
from .flengine import FlSetup
from .models import ModelSpec
from .numcore import STREAM_DATAGEN, STREAM_MALICIOUS, RngStream, derive_seed
from .recovery import RecoveryParams

_BOOL = {"true": True, "false": False}
_REQUIRED = object()


class ConfigError(ValueError):
    """Configuration problem, field-precise."""

    def __init__(self, field: str, reason: str):
        self.field = field
        super().__init__(f"config field [{field}]: {reason}")


@dataclass(frozen=True)
class DatasetConfig:
    kind: str  # synthetic | mnist
    num_classes: int = 10
    dim: int = 20
    per_class: int = 100
    test_per_class: int = 50
    separation: float = 3.0
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""


@dataclass(frozen=True)
class FinetuneConfig:
    epochs: int = 100
    n_examples: int = 1000
    beta: float = math.inf
    batch_size: int = 32


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    rounds: int
    learning_rate: float
    batch_size: int
    local_steps: int
    n_clients: int
    malicious_fraction: float | None
    malicious_count: int | None
    noniid_degree: float
    rule: AggregationRule
    output_dir: str
    dataset: DatasetConfig
    model: ModelSpec
    attack: AttackConfig | None
    fnr: float
    fpr: float
    recovery: RecoveryParams
    bound_check: bool
    finetune: FinetuneConfig

    @property
    def n_malicious(self) -> int:
        if self.malicious_count is not None:
            return self.malicious_count
        if self.malicious_fraction is not None:
            return int(math.floor(self.malicious_fraction * self.n_clients + 0.5))
        return 0


def _get(section, key, conv, *, field, default=_REQUIRED):
    raw = section.pop(key, None)
    if raw is None:
        if default is _REQUIRED:
            raise ConfigError(field, "required key missing")
        return default
    try:
        return conv(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(field, f"cannot parse {raw!r}: {exc}") from exc


def _to_bool(raw: str) -> bool:
    val = _BOOL.get(raw.strip().lower())
    if val is None:
        raise ValueError("expected true or false")
    return val


def _to_float(raw: str) -> float:
    val = float(raw)
    if math.isnan(val):
        raise ValueError("nan is not allowed")
    return val


def parse_config(path) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    with open(path, "r", encoding="utf-8") as f:
        parser.read_file(f)
    return _from_parser(parser)


def parse_config_string(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.read_file(io.StringIO(text))
    return _from_parser(parser)


def _from_parser(parser: configparser.ConfigParser) -> ExperimentConfig:
    known_sections = {"experiment", "dataset", "model", "attack", "detection", "recovery", "finetune"}
    for sec in parser.sections():
        if sec not in known_sections:
            raise ConfigError(sec, "unknown section")
    secs = {name: dict(parser.items(name)) for name in parser.sections()}

    exp = secs.get("experiment", {})
    seed = _get(exp, "seed", int, field="experiment.seed")
    rounds = _get(exp, "rounds", int, field="experiment.rounds")
    learning_rate = _get(exp, "learning_rate", _to_float, field="experiment.learning_rate")
    batch_size = _get(exp, "batch_size", int, field="experiment.batch_size", default=32)
    local_steps = _get(exp, "local_steps", int, field="experiment.local_steps", default=1)
    n_clients = _get(exp, "n_clients", int, field="experiment.n_clients")
    malicious_fraction = _get(
        exp, "malicious_fraction", _to_float, field="experiment.malicious_fraction", default=None
    )
    malicious_count = _get(
        exp, "malicious_count", int, field="experiment.malicious_count", default=None
    )
    noniid_degree = _get(
        exp, "noniid_degree", _to_float, field="experiment.noniid_degree", default=0.5
    )
    agg_kind = _get(exp, "aggregation", str, field="experiment.aggregation")
    trim_k = _get(exp, "trim_k", int, field="experiment.trim_k", default=0)
    output_dir = _get(exp, "output_dir", str, field="experiment.output_dir")

    ds = secs.get("dataset", {})
    ds_kind = _get(ds, "kind", str, field="dataset.kind")
    if ds_kind == "synthetic":
        dataset = DatasetConfig(
            kind="synthetic",
            num_classes=_get(ds, "num_classes", int, field="dataset.num_classes", default=10),
            dim=_get(ds, "dim", int, field="dataset.dim", default=20),
            per_class=_get(ds, "per_class", int, field="dataset.per_class", default=100),
            test_per_class=_get(
                ds, "test_per_class", int, field="dataset.test_per_class", default=50
            ),
            separation=_get(ds, "separation", _to_float, field="dataset.separation", default=3.0),
        )
    elif ds_kind == "mnist":
        dataset = DatasetConfig(
            kind="mnist",
            num_classes=10,
            train_images=_get(ds, "train_images", str, field="dataset.train_images"),
            train_labels=_get(ds, "train_labels", str, field="dataset.train_labels"),
            test_images=_get(ds, "test_images", str, field="dataset.test_images"),
            test_labels=_get(ds, "test_labels", str, field="dataset.test_labels"),
        )
    else:
        raise ConfigError("dataset.kind", f"unknown dataset kind {ds_kind!r}")

    mdl = secs.get("model", {})
    m_kind = _get(mdl, "kind", str, field="model.kind")
    hidden = _get(mdl, "hidden", int, field="model.hidden", default=0)
    l2 = _get(mdl, "l2", _to_float, field="model.l2", default=0.0)
    if m_kind == "mlp" and hidden < 1:
        raise ConfigError("model.hidden", "mlp model requires hidden >= 1")
    if m_kind != "mlp" and hidden != 0:
        raise ConfigError("model.hidden", "hidden applies to the mlp kind only")
    ds_dim = dataset.dim if dataset.kind == "synthetic" else 784
    try:
        model = ModelSpec(m_kind, ds_dim, dataset.num_classes, hidden, l2)
    except ValueError as exc:
        raise ConfigError("model.kind", str(exc)) from exc

    atk = secs.get("attack", {})
    a_kind = _get(atk, "kind", str, field="attack.kind", default="none")
    attack = None
    if a_kind == "trim":
        attack = AttackConfig(kind="trim", b=_get(atk, "trim_b", _to_float, field="attack.trim_b", default=2.0))
    elif a_kind == "backdoor":
        t_kind = _get(atk, "trigger", str, field="attack.trigger")
        if t_kind == "pixel_patch":
            trigger = Trigger(
                kind="pixel_patch",
                rows=_get(atk, "trigger_rows", int, field="attack.trigger_rows", default=4),
                cols=_get(atk, "trigger_cols", int, field="attack.trigger_cols", default=4),
                value=_get(atk, "trigger_value", _to_float, field="attack.trigger_value", default=1.0),
            )
        elif t_kind == "every_kth":
            trigger = Trigger(
                kind="every_kth",
                k=_get(atk, "trigger_k", int, field="attack.trigger_k"),
                value=_get(atk, "trigger_value", _to_float, field="attack.trigger_value", default=0.0),
            )
        else:
            raise ConfigError("attack.trigger", f"unknown trigger kind {t_kind!r}")
        target = _get(atk, "target_label", int, field="attack.target_label", default=0)
        if not (0 <= target < dataset.num_classes):
            raise ConfigError("attack.target_label", "target label outside the class range")
        attack = AttackConfig(
            kind="backdoor",
            trigger=trigger,
            target_label=target,
            lam=_get(atk, "scale", _to_float, field="attack.scale", default=1.0),
            adaptive=_get(atk, "adaptive", _to_bool, field="attack.adaptive", default=False),
        )
    elif a_kind != "none":
        raise ConfigError("attack.kind", f"unknown attack kind {a_kind!r}")

    det = secs.get("detection", {})
    fnr = _get(det, "fnr", _to_float, field="detection.fnr", default=0.0)
    fpr = _get(det, "fpr", _to_float, field="detection.fpr", default=0.0)

    rec = secs.get("recovery", {})
    tau_raw = rec.pop("tau", None)
    tau = None
    if tau_raw is not None:
        tau = math.inf if tau_raw.strip().lower() == "inf" else _to_float(tau_raw)
    try:
        recovery = RecoveryParams(
            warmup_rounds=_get(rec, "warmup_rounds", int, field="recovery.warmup_rounds", default=20),
            correction_period=_get(
                rec, "correction_period", int, field="recovery.correction_period", default=10
            ),
            final_tuning_rounds=_get(
                rec, "final_tuning_rounds", int, field="recovery.final_tuning_rounds", default=5
            ),
            buffer_size=_get(rec, "buffer_size", int, field="recovery.buffer_size", default=2),
            tolerance_rate=_get(
                rec, "tolerance_rate", _to_float, field="recovery.tolerance_rate", default=1e-6
            ),
            tau=tau,
            hvp_mode=_get(rec, "hvp_mode", str, field="recovery.hvp_mode", default="lbfgs"),
        )
    except ValueError as exc:
        raise ConfigError("recovery", str(exc)) from exc
    bound_check = _get(rec, "bound_check", _to_bool, field="recovery.bound_check", default=False)

    ft = secs.get("finetune", {})
    beta_raw = ft.pop("beta", None)
    beta = math.inf if beta_raw is None or beta_raw.strip().lower() == "inf" else _to_float(beta_raw)
    finetune = FinetuneConfig(
        epochs=_get(ft, "epochs", int, field="finetune.epochs", default=100),
        n_examples=_get(ft, "n_examples", int, field="finetune.n_examples", default=1000),
        beta=beta,
        batch_size=_get(ft, "batch_size", int, field="finetune.batch_size", default=32),
    )

    for sec_name, leftover in secs.items():
        for key in leftover:
            raise ConfigError(f"{sec_name}.{key}", "unknown key")

    try:
        rule = AggregationRule(agg_kind, trim_k)
    except ValueError as exc:
        raise ConfigError("experiment.aggregation", str(exc)) from exc

    cfg = ExperimentConfig(
        seed=seed,
        rounds=rounds,
        learning_rate=learning_rate,
        batch_size=batch_size,
        local_steps=local_steps,
        n_clients=n_clients,
        malicious_fraction=malicious_fraction,
        malicious_count=malicious_count,
        noniid_degree=noniid_degree,
        rule=rule,
        output_dir=output_dir,
        dataset=dataset,
        model=model,
        attack=attack,
        fnr=fnr,
        fpr=fpr,
        recovery=recovery,
        bound_check=bound_check,
        finetune=finetune,
    )
    _validate(cfg)
    return cfg


def _validate(cfg: ExperimentConfig) -> None:
    if cfg.seed < 0:
        raise ConfigError("experiment.seed", "seed must be >= 0")
    if cfg.rounds < 1:
        raise ConfigError("experiment.rounds", "rounds must be >= 1")
    if cfg.learning_rate <= 0:
        raise ConfigError("experiment.learning_rate", "learning rate must be > 0")
    if cfg.batch_size < 1:
        raise ConfigError("experiment.batch_size", "batch size must be >= 1")
    if cfg.local_steps < 1:
        raise ConfigError("experiment.local_steps", "local_steps must be >= 1")
    if cfg.n_clients < 1:
        raise ConfigError("experiment.n_clients", "need at least one client")
    if cfg.malicious_fraction is not None and cfg.malicious_count is not None:
        raise ConfigError(
            "experiment.malicious_fraction", "give malicious_fraction or malicious_count, not both"
        )
    if cfg.malicious_fraction is not None and not (0.0 <= cfg.malicious_fraction < 1.0):
        raise ConfigError("experiment.malicious_fraction", "fraction must lie in [0, 1)")
    if cfg.n_malicious >= cfg.n_clients:
        raise ConfigError(
            "experiment.malicious_count",
            f"malicious clients ({cfg.n_malicious}) must be fewer than n_clients ({cfg.n_clients})",
        )
    if cfg.attack is not None and cfg.n_malicious == 0:
        raise ConfigError("attack.kind", "attack configured but no malicious clients")
    if cfg.rule.kind == "trimmed_mean" and 2 * cfg.rule.k >= cfg.n_clients:
        raise ConfigError("experiment.trim_k", f"need 2k < n_clients, got k={cfg.rule.k}")
    if cfg.rule.kind != "trimmed_mean" and cfg.rule.k != 0:
        raise ConfigError("experiment.trim_k", "trim_k applies to trimmed_mean only")
    c = cfg.dataset.num_classes
    if not (1.0 / c - 1e-12 <= cfg.noniid_degree <= 1.0 + 1e-12):
        raise ConfigError("experiment.noniid_degree", f"must lie in [1/{c}, 1]")
    if cfg.n_clients < c:
        raise ConfigError("experiment.n_clients", f"need at least num_classes={c} clients")
    if cfg.recovery.warmup_rounds + cfg.recovery.final_tuning_rounds > cfg.rounds:
        raise ConfigError(
            "recovery.warmup_rounds", "warmup + final tuning rounds exceed total rounds"
        )
    if cfg.fnr < 0 or cfg.fnr > 1 or cfg.fpr < 0 or cfg.fpr > 1:
        raise ConfigError("detection.fnr", "fnr and fpr must lie in [0, 1]")
    if cfg.dataset.kind == "synthetic":
        if min(cfg.dataset.num_classes, cfg.dataset.dim, cfg.dataset.per_class) < 1:
            raise ConfigError("dataset.per_class", "synthetic sizes must be positive")
        if cfg.dataset.separation <= 0:
            raise ConfigError("dataset.separation", "separation must be > 0")


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return "inf" if math.isinf(value) else repr(value)
    return str(value)


def serialize_config(cfg: ExperimentConfig) -> str:
    """Canonical text form: fixed section and key order, resolved values.

    Hashing this form makes the config hash independent of key order,
    spacing, or omitted defaults in the source file.
    """
    out = ["[experiment]"]
    out.append(f"seed = {cfg.seed}")
    out.append(f"rounds = {cfg.rounds}")
    out.append(f"learning_rate = {_fmt(cfg.learning_rate)}")
    out.append(f"batch_size = {cfg.batch_size}")
    out.append(f"local_steps = {cfg.local_steps}")
    out.append(f"n_clients = {cfg.n_clients}")
    if cfg.malicious_fraction is not None:
        out.append(f"malicious_fraction = {_fmt(cfg.malicious_fraction)}")
    if cfg.malicious_count is not None:
        out.append(f"malicious_count = {cfg.malicious_count}")
    out.append(f"noniid_degree = {_fmt(cfg.noniid_degree)}")
    out.append(f"aggregation = {cfg.rule.kind}")
    if cfg.rule.kind == "trimmed_mean":
        out.append(f"trim_k = {cfg.rule.k}")
    out.append(f"output_dir = {cfg.output_dir}")

    out.append("")
    out.append("[dataset]")
    out.append(f"kind = {cfg.dataset.kind}")
    if cfg.dataset.kind == "synthetic":
        out.append(f"num_classes = {cfg.dataset.num_classes}")
        out.append(f"dim = {cfg.dataset.dim}")
        out.append(f"per_class = {cfg.dataset.per_class}")
        out.append(f"test_per_class = {cfg.dataset.test_per_class}")
        out.append(f"separation = {_fmt(cfg.dataset.separation)}")
    else:
        out.append(f"train_images = {cfg.dataset.train_images}")
        out.append(f"train_labels = {cfg.dataset.train_labels}")
        out.append(f"test_images = {cfg.dataset.test_images}")
        out.append(f"test_labels = {cfg.dataset.test_labels}")

    out.append("")
    out.append("[model]")
    out.append(f"kind = {cfg.model.kind}")
    if cfg.model.kind == "mlp":
        out.append(f"hidden = {cfg.model.hidden}")
    out.append(f"l2 = {_fmt(cfg.model.l2)}")

    out.append("")
    out.append("[attack]")
    if cfg.attack is None:
        out.append("kind = none")
    elif cfg.attack.kind == "trim":
        out.append("kind = trim")
        out.append(f"trim_b = {_fmt(cfg.attack.b)}")
    else:
        out.append("kind = backdoor")
        trig = cfg.attack.trigger
        out.append(f"trigger = {trig.kind}")
        if trig.kind == "pixel_patch":
            out.append(f"trigger_rows = {trig.rows}")
            out.append(f"trigger_cols = {trig.cols}")
        else:
            out.append(f"trigger_k = {trig.k}")
        out.append(f"trigger_value = {_fmt(trig.value)}")
        out.append(f"target_label = {cfg.attack.target_label}")
        out.append(f"scale = {_fmt(cfg.attack.lam)}")
        out.append(f"adaptive = {_fmt(cfg.attack.adaptive)}")

    out.append("")
    out.append("[detection]")
    out.append(f"fnr = {_fmt(cfg.fnr)}")
    out.append(f"fpr = {_fmt(cfg.fpr)}")

    out.append("")
    out.append("[recovery]")
    out.append(f"warmup_rounds = {cfg.recovery.warmup_rounds}")
    out.append(f"correction_period = {cfg.recovery.correction_period}")
    out.append(f"final_tuning_rounds = {cfg.recovery.final_tuning_rounds}")
    out.append(f"buffer_size = {cfg.recovery.buffer_size}")
    out.append(f"tolerance_rate = {_fmt(cfg.recovery.tolerance_rate)}")
    if cfg.recovery.tau is not None:
        out.append(f"tau = {_fmt(cfg.recovery.tau)}")
    out.append(f"hvp_mode = {cfg.recovery.hvp_mode}")
    out.append(f"bound_check = {_fmt(cfg.bound_check)}")

    out.append("")
    out.append("[finetune]")
    out.append(f"epochs = {cfg.finetune.epochs}")
    out.append(f"n_examples = {cfg.finetune.n_examples}")
    out.append(f"beta = {_fmt(cfg.finetune.beta)}")
    out.append(f"batch_size = {cfg.finetune.batch_size}")
    out.append("")
    return "\n".join(out)


def config_hash(cfg: ExperimentConfig) -> bytes:
    return hashlib.sha256(serialize_config(cfg).encode("utf-8")).digest()


def build_datasets(cfg: ExperimentConfig):
    """(train, test) datasets described by the config."""
    d = cfg.dataset
    if d.kind == "synthetic":
        train = data_mod.gen_synthetic(
            d.num_classes, d.dim, d.per_class, d.separation, derive_seed(cfg.seed, STREAM_DATAGEN, 1, 0)
        )
        test = data_mod.gen_synthetic(
            d.num_classes, d.dim, d.test_per_class, d.separation, derive_seed(cfg.seed, STREAM_DATAGEN, 2, 0)
        )
        return train, test
    train = data_mod.load_mnist_idx(d.train_images, d.train_labels)
    test = data_mod.load_mnist_idx(d.test_images, d.test_labels)
    return train, test


def pick_malicious(cfg: ExperimentConfig) -> frozenset:
    """Deterministic random sample of n_malicious client ids."""
    m = cfg.n_malicious
    if m == 0:
        return frozenset()
    rng = RngStream(derive_seed(cfg.seed, STREAM_MALICIOUS, 0, 0))
    return frozenset(int(i) for i in rng.choice(cfg.n_clients, m))


def build_setup(cfg: ExperimentConfig, train) -> FlSetup:
    shards = data_mod.partition_noniid(train, cfg.n_clients, cfg.noniid_degree, cfg.seed)
    local_inputs = {s.client_id: train.inputs[s.indices] for s in shards}
    local_labels = {s.client_id: train.labels[s.indices] for s in shards}
    sizes = {s.client_id: s.size for s in shards}
    return FlSetup(
        spec=cfg.model,
        rule=cfg.rule,
        eta=cfg.learning_rate,
        batch_size=cfg.batch_size,
        l=cfg.local_steps,
        seed=cfg.seed,
        client_ids=[s.client_id for s in shards],
        local_inputs=local_inputs,
        local_labels=local_labels,
        sizes=sizes,
        attack=cfg.attack,
        malicious=pick_malicious(cfg),
    )
