"""Class-incremental continual-learning scenarios on the shapes generator."""

from __future__ import annotations

import configparser
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..features import SyntheticExtractorConfig, synth_extract
from ..grid import GridError, LabelMap
from ..memory import MemoryStore
from ..mp import MPConfig
from ..search import SearchConfig
from ..solver import Solver, SolverConfig
from .metrics import NO_DATA, confusion_counts
from .shapes import BACKGROUND, make_scene
from .tta import tta_predict


class ScenarioError(GridError):
    pass


_NAME = re.compile(r"^(\d+)-(\d+)\((\d+)\)\s*[a-z]*$")


@dataclass(frozen=True)
class ScenarioSpec:
    steps: tuple
    background: int = BACKGROUND
    eval_classes: tuple | None = None
    name: str = ""

    def __post_init__(self):
        steps = tuple(tuple(int(c) for c in s) for s in self.steps)
        object.__setattr__(self, "steps", steps)
        if not steps or any(not s for s in steps):
            raise ScenarioError("every step needs at least one class")
        seen: set = set()
        for s in steps:
            if seen & set(s) or len(set(s)) != len(s):
                raise ScenarioError(f"step class sets overlap: {s}")
            seen |= set(s)
        if self.background in seen:
            raise ScenarioError(f"background class {self.background} appears in a step")
        if self.eval_classes is None:
            object.__setattr__(self, "eval_classes", tuple(sorted(seen)))
        elif not seen <= set(self.eval_classes):
            raise ScenarioError("step classes must be a subset of the evaluation classes")

    @classmethod
    def parse(cls, name: str, first_class: int = 1, background: int = BACKGROUND) -> "ScenarioSpec":
        """``"2-2(4)"``: 2 classes, then 2 per step, 4 steps; ``"13-1(7)"`` likewise."""
        match = _NAME.match(name.strip())
        if not match:
            raise ScenarioError(f"cannot parse scenario name {name!r}")
        base, inc, n = (int(g) for g in match.groups())
        steps, nxt = [], first_class
        for t in range(n):
            size = base if t == 0 else inc
            steps.append(tuple(range(nxt, nxt + size)))
            nxt += size
        return cls(tuple(steps), background, name=name.strip())

    @property
    def classes(self) -> tuple:
        return tuple(c for s in self.steps for c in s)

    @property
    def num_classes(self) -> int:
        return max(max(self.classes), self.background) + 1


@dataclass
class StepData:
    train: list  # (key, image, class grid)
    eval: list  # (image, class grid)


@dataclass
class ScenarioConfig:
    solver: SolverConfig = field(default_factory=SolverConfig)
    extractor: SyntheticExtractorConfig = field(default_factory=SyntheticExtractorConfig)
    n_sp: int = 3
    tta_scales: tuple | None = None


def step_labels(classes: np.ndarray, available, num_classes: int) -> LabelMap:
    """One-hot labels valid only on nodes whose class is currently available."""
    classes = np.asarray(classes)
    valid = np.isin(classes, list(available))
    return LabelMap.from_classes(np.where(valid, classes, 0), num_classes, valid=valid)


def make_stream(spec: ScenarioSpec, seed: int, res=(32, 32), train_per_step: int = 3, eval_per_step: int = 2,
                relabel_only: bool = False, n_shapes: int = 3) -> list:
    """Synthetic data stream, one StepData per step.

    Scenes of step t favour that step's classes but may show any class, so
    labels overlap across steps. With ``relabel_only`` every step revisits
    the same training scenes and only reveals more of their classes.
    """
    rng = np.random.default_rng(seed)
    everything = spec.classes
    shared = None
    if relabel_only:
        shared = [(f"x{j:03d}", make_scene(rng, res, everything, n_shapes)) for j in range(train_per_step)]
    stream = []
    for t, step in enumerate(spec.steps):
        pool = tuple(step) * 3 + everything
        if shared is None:
            train = [(f"t{t}_{j:03d}", make_scene(rng, res, pool, n_shapes)) for j in range(train_per_step)]
        else:
            train = shared
        evals = [make_scene(rng, res, pool, n_shapes) for _ in range(eval_per_step)]
        stream.append(StepData([(k, s.image, s.classes) for k, s in train], [(s.image, s.classes) for s in evals]))
    return stream


@dataclass
class RetentionReport:
    names: list
    history: np.ndarray  # history[t, i]: mIoU on D_i after step t
    mutations: list = field(default_factory=list)

    @property
    def initial(self) -> np.ndarray:
        return np.diag(self.history).copy()

    @property
    def final(self) -> np.ndarray:
        return self.history[-1].copy()

    @property
    def delta(self) -> np.ndarray:
        # the last dataset has no later step to forget in
        return (self.final - self.initial)[:-1]

    @property
    def delta_avg(self) -> float:
        return float(np.mean(self.delta)) if self.delta.size else NO_DATA

    @property
    def delta_std(self) -> float:
        return float(np.std(self.delta)) if self.delta.size else NO_DATA

    def to_table(self) -> str:
        lines = [f"{'dataset':<10}{'classes':<16}{'initial':>9}{'final':>9}{'delta':>9}"]
        for i, name in enumerate(self.names):
            d = f"{self.delta[i] * 100:9.2f}" if i < self.delta.size else f"{'':>9}"
            lines.append(f"{f'D{i + 1}':<10}{name:<16}{self.initial[i] * 100:9.2f}{self.final[i] * 100:9.2f}{d}")
        lines.append(f"{'avg':<26}{np.mean(self.initial) * 100:9.2f}{np.mean(self.final) * 100:9.2f}{self.delta_avg * 100:9.2f}")
        lines.append(f"{'std':<26}{np.std(self.initial) * 100:9.2f}{np.std(self.final) * 100:9.2f}{self.delta_std * 100:9.2f}")
        return "\n".join(lines) + "\n"

    def to_kv(self) -> str:
        out = [f"steps={len(self.names)}"]
        for i in range(len(self.names)):
            out.append(f"D{i + 1}.initial={self.initial[i]!r}")
            out.append(f"D{i + 1}.final={self.final[i]!r}")
            if i < self.delta.size:
                out.append(f"D{i + 1}.delta={self.delta[i]!r}")
        out.append(f"delta.avg={self.delta_avg!r}")
        out.append(f"delta.std={self.delta_std!r}")
        for t in range(self.history.shape[0]):
            out.append(f"history.{t + 1}=" + ",".join(repr(float(v)) for v in self.history[t]))
        for op, sid, count in self.mutations:
            out.append(f"mutation={op} {sid} {count}")
        return "\n".join(out) + "\n"


def _evaluate(solver: Solver, samples, classes, background: int, num_classes: int, scales) -> float:
    inter = union = 0
    for image, gt in samples:
        pred = tta_predict(solver, image, scales) if scales else solver(image)
        i, u = confusion_counts(pred, gt.reshape(-1), classes, ignore_mask=(gt == background))
        inter += int(i.sum())
        union += int(u.sum())
    return inter / union if union else NO_DATA


def run_scenario(spec: ScenarioSpec, store: MemoryStore, stream, config: ScenarioConfig | None = None,
                 n_steps: int | None = None) -> RetentionReport:
    """Run the steps in order: consolidate the step's labels, then evaluate every seen dataset.

    New training scenes are added with only the step's classes labeled;
    scenes already in memory get the step's class nodes relabeled in place.
    Dataset D_i is always scored on the classes of step i with background
    nodes ignored, so initial and final scores share one evaluation set.
    ``n_steps`` stops after that many steps of the same stream.
    """
    config = config or ScenarioConfig()
    if len(stream) != len(spec.steps):
        raise ScenarioError(f"stream has {len(stream)} steps, scenario {len(spec.steps)}")
    n_steps = len(spec.steps) if n_steps is None else n_steps
    if not 1 <= n_steps <= len(spec.steps):
        raise ScenarioError(f"n_steps must be in [1, {len(spec.steps)}]")
    known = set(spec.classes) | {spec.background}
    solver = Solver(store, config.extractor, config.solver)
    history = np.full((n_steps, n_steps), np.nan)
    start = len(store.mutations)
    for t, (classes, data) in enumerate(zip(spec.steps[:n_steps], stream)):
        for _, _, gt in data.train + [(None,) + e for e in data.eval]:
            extra = set(np.unique(gt).tolist()) - known
            if extra:
                raise ScenarioError(f"class ids {sorted(extra)} are not part of the scenario")
        for key, image, gt in data.train:
            labels = step_labels(gt, classes, spec.num_classes)
            if key in store:
                store.update_labels(key, labels, region_mask=labels.valid)
            else:
                store.consolidate_add(synth_extract(image, config.extractor), labels, sample_id=key)
        for i in range(t + 1):
            eval_classes = [c for c in spec.steps[i] if c in spec.eval_classes]
            history[t, i] = _evaluate(solver, stream[i].eval, eval_classes, spec.background, spec.num_classes,
                                      config.tta_scales)
    names = [",".join(str(c) for c in s) for s in spec.steps[:n_steps]]
    return RetentionReport(names, history, list(store.mutations[start:]))


# ---------------------------------------------------------------------------
# declarative config
# ---------------------------------------------------------------------------

@dataclass
class ScenarioFile:
    spec: ScenarioSpec
    config: ScenarioConfig
    seed: int = 0
    res: tuple = (32, 32)
    train_per_step: int = 3
    eval_per_step: int = 2
    relabel_only: bool = False

    def stream(self) -> list:
        return make_stream(self.spec, self.seed, self.res, self.train_per_step, self.eval_per_step, self.relabel_only)

    def to_text(self) -> str:
        cp = _to_parser(self)
        lines = []
        for section in cp.sections():
            lines.append(f"[{section}]")
            lines.extend(f"{k} = {v}" for k, v in cp[section].items())
            lines.append("")
        return "\n".join(lines)


def _opt_int(v: str):
    return None if v.strip().lower() in ("", "none") else int(v)


def _scales(v: str):
    v = v.strip().lower()
    if v in ("", "none", "off"):
        return None
    return tuple(float(x) for x in v.split(","))


def load_scenario(path, seed: int | None = None) -> ScenarioFile:
    return parse_scenario(Path(path).read_text(encoding="utf-8"), seed)


def parse_scenario(text: str, seed: int | None = None) -> ScenarioFile:
    """Read an INI-style scenario description (see README for the keys)."""
    cp = configparser.ConfigParser()
    cp.read_string(text)
    sc = cp["scenario"] if cp.has_section("scenario") else {}
    background = int(sc.get("background", BACKGROUND))
    if "steps" in sc:
        steps = tuple(tuple(int(c) for c in part.split(",")) for part in sc["steps"].split(";"))
        spec = ScenarioSpec(steps, background, name=sc.get("name", ""))
    else:
        spec = ScenarioSpec.parse(sc.get("name", "2-2(4)"), background=background)
    mem = cp["memory"] if cp.has_section("memory") else {}
    se = cp["search"] if cp.has_section("search") else {}
    mp = cp["mp"] if cp.has_section("mp") else {}
    tta = cp["tta"] if cp.has_section("tta") else {}
    extractor = SyntheticExtractorConfig(seed=int(mem.get("extractor_seed", 0)), n=int(mem.get("levels", 4)))
    search = SearchConfig(
        phi=float(se.get("phi", 0.5)),
        k_init=_opt_int(se.get("k_init", "none")),
        kernel_mode=se.get("kernel", "window"),
        chunk=_opt_int(se.get("chunk", "none")),
    )
    mpc = MPConfig(
        lam=float(mp.get("lambda", 1.0)),
        kappa=int(mp.get("kappa", 16)),
        max_steps=int(mp.get("max_steps", 32)),
        tol=float(mp.get("tol", 1e-6)),
    )
    use_mp = str(mp.get("enabled", "yes")).lower() in ("1", "yes", "true", "on")
    config = ScenarioConfig(SolverConfig(search, mpc, use_mp), extractor, int(mem.get("n_sp", 3)), _scales(tta.get("scales", "none")))
    res = int(sc.get("res", 32))
    return ScenarioFile(
        spec,
        config,
        seed=int(sc.get("seed", 0)) if seed is None else seed,
        res=(res, res),
        train_per_step=int(sc.get("train_per_step", 3)),
        eval_per_step=int(sc.get("eval_per_step", 2)),
        relabel_only=str(sc.get("relabel_only", "no")).lower() in ("1", "yes", "true", "on"),
    )


def _to_parser(f: ScenarioFile) -> configparser.ConfigParser:
    cp = configparser.ConfigParser()
    s = f.config.solver
    cp["scenario"] = {
        "name": f.spec.name,
        "steps": ";".join(",".join(str(c) for c in st) for st in f.spec.steps),
        "background": str(f.spec.background),
        "seed": str(f.seed),
        "res": str(f.res[0]),
        "train_per_step": str(f.train_per_step),
        "eval_per_step": str(f.eval_per_step),
        "relabel_only": "yes" if f.relabel_only else "no",
    }
    cp["memory"] = {"n_sp": str(f.config.n_sp), "levels": str(f.config.extractor.n), "extractor_seed": str(f.config.extractor.seed)}
    cp["search"] = {
        "phi": repr(s.search.phi),
        "k_init": str(s.search.k_init),
        "kernel": s.search.kernel_mode,
        "chunk": str(s.search.chunk),
    }
    cp["mp"] = {
        "enabled": "yes" if s.use_mp else "no",
        "kappa": str(s.mp.kappa),
        "lambda": repr(s.mp.lam),
        "max_steps": str(s.mp.max_steps),
        "tol": repr(s.mp.tol),
    }
    scales = f.config.tta_scales
    cp["tta"] = {"scales": "none" if not scales else ",".join(repr(x) for x in scales)}
    return cp
