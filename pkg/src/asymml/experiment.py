"""End-to-end runs: synthetic data, teacher, student training, retrieval testing."""

from dataclasses import dataclass, field, replace

from asymml.dataset import SyntheticConfig, generate_synthetic
from asymml.evaluation import evaluate, fit_whitening_for
from asymml.losses import LossConfig, LossKind
from asymml.models import StudentModel, build_synthetic_teacher
from asymml.trainer import TrainConfig, train

HIDDEN = (64,)
# the backbone learning rates are far too small for a tiny MLP; scaling all
# of them uniformly keeps their ratios
DESK_LR_SCALE = 100.0

# the seven configurations compared throughout; label losses train on
# asymmetric similarity
LOSS_SUITE = {
    "Contr": LossConfig(kind=LossKind.CONTRASTIVE, mode="asym"),
    "Contr+": LossConfig(kind=LossKind.CONTRASTIVE_PLUS),
    "Triplet": LossConfig(kind=LossKind.TRIPLET, mode="asym"),
    "MS": LossConfig(kind=LossKind.MULTI_SIMILARITY, mode="asym"),
    "Reg": LossConfig(kind=LossKind.REGRESSION),
    "RKD": LossConfig(kind=LossKind.RKD, mode="asym"),
    "DR": LossConfig(kind=LossKind.DARKRANK, mode="asym"),
}

# the five rows of the contrastive/regression ablation: (self, pos, neg)
ABLATION_ROWS = {
    "Contr": (False, True, True),
    "Contr+": (True, True, True),
    "Contr pos-only": (False, True, False),
    "Contr self+pos": (True, True, False),
    "Reg": (True, False, False),
}


@dataclass
class RunResult:
    student: StudentModel
    log: object
    reports: dict = field(default_factory=dict)


def student_sizes(data_cfg, hidden=HIDDEN):
    return [data_cfg.d_in, *hidden, data_cfg.d_teacher]


def prepare(data_cfg):
    data = generate_synthetic(data_cfg)
    return data, build_synthetic_teacher(data)


def test_model(student, teacher, data, protocols=("symmetric", "asymmetric"), whiten=True):
    reports = {}
    for protocol in protocols:
        w = fit_whitening_for(protocol, student, teacher, data.training_set) if whiten else None
        reports[protocol] = evaluate(protocol, student, teacher, data.task, w)
    return reports


def run(data, teacher, train_cfg, hidden=HIDDEN, student_seed=None, whiten=True,
        protocols=("symmetric", "asymmetric")):
    seed = train_cfg.seed if student_seed is None else student_seed
    init = StudentModel.init(student_sizes(data.config, hidden), seed)
    student, log = train(data.training_set, teacher, init, train_cfg)
    return RunResult(student, log, test_model(student, teacher, data, protocols, whiten))


def suite_config(name, seed, lr_scale=DESK_LR_SCALE, **overrides):
    return TrainConfig(loss=replace(LOSS_SUITE[name]), lr_scale=lr_scale, seed=seed, **overrides)


def default_data_config(seed=0, **overrides):
    return replace(SyntheticConfig(seed=seed), **overrides)
