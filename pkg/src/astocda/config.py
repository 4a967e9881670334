"""Run configuration: one JSON document per run, validated before any stage.

Unknown keys are rejected at every nesting level.
"""

from dataclasses import asdict, dataclass, field, fields, is_dataclass
import json

from .ddm import ProbeConfig
from .errors import ConfigurationError
from .segmentor import SegmentorConfig
from .synthdata import DataConfig


@dataclass
class AstConfig:
    resize_h: int = 16
    resize_w: int = 32
    d_latent: int = 64
    d_hidden: int = 256


@dataclass
class OptimConfig:
    momentum: float = 0.9
    weight_decay: float = 5e-4
    power: float = 0.9
    batch_size: int = 4
    erm_steps: int = 1500
    erm_lr: float = 0.02
    ast_steps: int = 600
    ast_lr: float = 0.05
    preadapt_steps: int = 200
    preadapt_lr: float = 0.005
    preadapt_ast_lr: float = 0.02
    adapt_epochs: int = 2
    adapt_lr: float = 0.005


@dataclass
class AdaptConfig:
    pairing: str = "mined"  # mined | random
    use_sim: bool = True
    use_norm: bool = True
    loss_plain: bool = True  # L_{s_g}, L_{t_g}
    loss_sim: bool = True  # L_{s_g->}, L_{t_g->}
    loss_weights: list = field(default_factory=lambda: [1.0, 1.0, 1.0, 1.0])  # s_g, s_g->, t_g, t_g->
    preadapt_ast_update: bool = True  # AST reconstruction updates during pre-adaptation
    renormalize_prototype: bool = True
    eval_mode: str = "auto"  # auto (norm when use_norm else ae) | norm | ae | plain

    def __post_init__(self):
        if self.pairing not in ("mined", "random"):
            raise ConfigurationError(f"adapt.pairing must be 'mined' or 'random', got {self.pairing!r}")
        if self.eval_mode not in ("auto", "norm", "ae", "plain"):
            raise ConfigurationError(f"adapt.eval_mode {self.eval_mode!r} not recognized")
        if len(self.loss_weights) != 4:
            raise ConfigurationError("adapt.loss_weights needs four entries")
        if not (self.loss_plain or (self.loss_sim and self.use_sim)):
            raise ConfigurationError("at least one adaptation loss must be active")


@dataclass
class EvalConfig:
    splits: list = field(default_factory=lambda: ["compound", "open"])

    def __post_init__(self):
        bad = [s for s in self.splits if s not in ("compound", "open")]
        if bad:
            raise ConfigurationError(f"eval.splits: unknown split(s) {bad}")


@dataclass
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    segmentor: SegmentorConfig = field(default_factory=SegmentorConfig)
    ast_cs: AstConfig = field(default_factory=AstConfig)
    ast_dn: AstConfig = field(default_factory=AstConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    ddm: ProbeConfig = field(default_factory=ProbeConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"


def _coerce(cls, value, path):
    if not isinstance(value, dict):
        raise ConfigurationError(f"{path or 'config'}: expected an object, got {type(value).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(value) - set(known))
    if unknown:
        raise ConfigurationError(f"{path or 'config'}: unknown key(s) {unknown}")
    kwargs = {}
    defaults = cls()
    for name, val in value.items():
        sub = getattr(defaults, name)
        where = f"{path}.{name}" if path else name
        if is_dataclass(sub):
            kwargs[name] = _coerce(type(sub), val, where)
            continue
        if isinstance(sub, bool):
            ok = isinstance(val, bool)
        elif isinstance(sub, int):
            ok = isinstance(val, int) and not isinstance(val, bool)
        elif isinstance(sub, float):
            ok = isinstance(val, (int, float)) and not isinstance(val, bool)
            val = float(val) if ok else val
        elif isinstance(sub, list):
            ok = isinstance(val, list)
        else:
            ok = isinstance(val, type(sub))
        if not ok:
            raise ConfigurationError(f"{where}: expected {type(sub).__name__}, got {val!r}")
        kwargs[name] = val
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigurationError(f"{path or 'config'}: {exc}") from exc


def from_dict(d):
    cfg = _coerce(RunConfig, d, "")
    # the dataset seed follows the run seed unless set explicitly
    if "data" not in d or "seed" not in d.get("data", {}):
        cfg.data.seed = cfg.seed
    return cfg


def load(path):
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON ({exc})") from exc
    return from_dict(raw)
