"""File-level pipeline drivers behind the CLI subcommands.

Every driver writes into a self-describing run directory: the resolved
configuration is echoed verbatim, outputs are MVOL / checkpoint / CSV
files, and reruns with identical config and seed are byte-identical.
"""

from __future__ import annotations

import csv
import io
from pathlib import Path

import numpy as np

from . import net, train as training
from .config import RunConfig
from .core import LabelMap, window_and_normalize
from .infer import infer_volume
from .metrics import evaluate_pair, wilcoxon_signed_rank
from .mvol import read_mvol, write_mvol
from .phantom import split_dataset, subject_paths, write_dataset
from .train import MissingDependencyError, SubjectData, TrainResult

CHECKPOINT_NAME = "checkpoint.mckpt"
LOSS_LOG_NAME = "loss.csv"
CONFIG_ECHO_NAME = "config.resolved.cfg"
PRIORS_DIR = "priors"


def _fmt(x: float) -> str:
    return f"{x:.9g}"


def echo_config(cfg: RunConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / CONFIG_ECHO_NAME).write_text(cfg.resolved_text())


def run_phantom(cfg: RunConfig, out_dir) -> Path:
    out = Path(out_dir)
    write_dataset(cfg.phantom_config(), out, cfg.resolved_text())
    echo_config(cfg, out)
    return out


def _materialize_priors(cfg: RunConfig, dataset_dir: Path, indices, out_dir: Path) -> dict[int, LabelMap]:
    mode = cfg.get_str("prior_mode")
    if mode == "oracle":
        priors = training.oracle_priors(
            dataset_dir, indices, cfg.get_int("prior_dilation"), cfg.get_float("prior_flip"), cfg.seed
        )
    else:
        coarse_run = cfg.get_str("coarse_run")
        ckpt = Path(coarse_run) / CHECKPOINT_NAME
        if not coarse_run or not ckpt.exists():
            raise MissingDependencyError(
                "prior_mode=coarse requires coarse_run pointing at a finished 'coarse' stage run"
            )
        priors = training.coarse_priors(
            dataset_dir, indices, net.load_checkpoint(ckpt), cfg.coarse_net_config(), cfg.window
        )
    pdir = out_dir / PRIORS_DIR
    pdir.mkdir(parents=True, exist_ok=True)
    for i, prior in priors.items():
        write_mvol(pdir / f"s{i}_prior.mvol", prior)
    return priors


def load_priors(run_dir, indices) -> dict[int, LabelMap]:
    pdir = Path(run_dir) / PRIORS_DIR
    priors = {}
    for i in indices:
        path = pdir / f"s{i}_prior.mvol"
        if not path.exists():
            raise MissingDependencyError(f"missing prior {path}; run the teacher stage first")
        priors[i] = read_mvol(path)
    return priors


def run_train(cfg: RunConfig, stage: str, out_dir) -> TrainResult:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset_dir = Path(cfg.get_str("dataset_dir"))
    if not dataset_dir.is_dir():
        raise MissingDependencyError(f"dataset_dir '{dataset_dir}' does not exist; run phantom first")
    pcfg = cfg.phantom_config()
    train_idx, _, _ = split_dataset(pcfg, cfg.split_ratios())
    all_idx = list(range(pcfg.num_subjects))
    tcfg = cfg.train_config(stage)

    teacher = None
    if stage == "coarse":
        subjects = [
            _load(cfg, dataset_dir, i, prior=None, with_truth=True) for i in train_idx
        ]
        net_cfg = cfg.coarse_net_config()
    elif stage in ("teacher", "student_supervised_baseline"):
        priors = _materialize_priors(cfg, dataset_dir, all_idx, out)
        subjects = [_load(cfg, dataset_dir, i, priors[i], with_truth=True) for i in train_idx]
        net_cfg = cfg.net_config()
    elif stage == "student_contrastmix":
        teacher_run = cfg.get_str("teacher_run")
        ckpt = Path(teacher_run) / CHECKPOINT_NAME if teacher_run else None
        if ckpt is None or not ckpt.exists():
            raise MissingDependencyError(
                "student_contrastmix requires teacher_run pointing at a finished 'teacher' stage run"
            )
        priors = load_priors(teacher_run, train_idx)
        subjects = [_load(cfg, dataset_dir, i, priors[i], with_truth=False) for i in train_idx]
        net_cfg = cfg.net_config()
        teacher = (net.load_checkpoint(ckpt), cfg.net_config())
    else:
        raise ValueError(f"unknown stage '{stage}'")

    result = training.train(tcfg, net_cfg, subjects, teacher)
    net.save_checkpoint(out / CHECKPOINT_NAME, result.params)
    (out / LOSS_LOG_NAME).write_text(training.log_to_csv(result.log))
    echo_config(cfg, out)
    return result


def _load(cfg: RunConfig, dataset_dir, index, prior, with_truth) -> SubjectData:
    paths = subject_paths(dataset_dir, index)
    source = window_and_normalize(read_mvol(paths.source), *cfg.window)
    target = window_and_normalize(read_mvol(paths.target), *cfg.window)
    truth = read_mvol(paths.truth) if with_truth else None
    if prior is None:
        prior = truth  # coarse stage: prior slot unused, truth is required anyway
    return SubjectData(index, source, target, prior, truth)


def run_infer(cfg: RunConfig, checkpoint, volume_path, prior_path, out_path) -> Path:
    params = net.load_checkpoint(checkpoint)
    image = window_and_normalize(read_mvol(volume_path), *cfg.window)
    prior = read_mvol(prior_path)
    if not isinstance(prior, LabelMap):
        raise TypeError(f"{prior_path} is not a label map")
    pred = infer_volume(params, cfg.net_config(), image, prior, cfg.geometry(), seed=cfg.seed)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_mvol(out_path, pred)
    return out_path


def infer_split(cfg: RunConfig, run_dir, prior_run_dir, indices, out_dir) -> Path:
    """Target-domain inference for a list of subjects into out_dir."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    params = net.load_checkpoint(Path(run_dir) / CHECKPOINT_NAME)
    priors = load_priors(prior_run_dir, indices)
    dataset_dir = Path(cfg.get_str("dataset_dir"))
    for i in indices:
        image = window_and_normalize(read_mvol(subject_paths(dataset_dir, i).target), *cfg.window)
        pred = infer_volume(params, cfg.net_config(), image, priors[i], cfg.geometry(), seed=cfg.seed, subject=i)
        write_mvol(out / f"s{i}_pred.mvol", pred)
    return out


# ---------------------------------------------------------------------------
# evaluation

def _pred_subjects(pred_dir: Path) -> dict[int, Path]:
    out = {}
    for p in sorted(pred_dir.glob("s*_pred.mvol")):
        out[int(p.name[1:].split("_")[0])] = p
    return out


def _truth_subjects(truth_dir: Path) -> dict[int, Path]:
    out = {}
    for p in sorted(truth_dir.glob("s*_truth.mvol")):
        out[int(p.name[1:].split("_")[0])] = p
    return out


def _eval_dir(pred_dir: Path, truths: dict[int, Path]):
    preds = _pred_subjects(pred_dir)
    missing = sorted(set(preds) - set(truths))
    if missing:
        raise ValueError(f"predictions without ground truth: subjects {missing}")
    rows = []
    for i, pred_path in sorted(preds.items()):
        pred = read_mvol(pred_path)
        truth = read_mvol(truths[i])
        if pred.dims != truth.dims:
            raise ValueError(f"subject {i}: prediction dims {pred.dims} != truth dims {truth.dims}")
        rows.extend(
            evaluate_pair(pred.labels, truth.labels, truth.spacing.as_tuple(), truth.num_classes, i)
        )
    return rows


def _results_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["subject", "organ", "dice", "msd_mm"])
    for r in rows:
        w.writerow([r.subject, r.organ, _fmt(r.dice), "NA" if r.msd is None else _fmt(r.msd)])
    return buf.getvalue()


def _by_organ(rows):
    organs = sorted({r.organ for r in rows})
    return {o: [r for r in rows if r.organ == o] for o in organs}


def run_eval(pred_dir, truth_dir, out_dir, pred_dir_b=None) -> Path:
    """Per-(subject, organ) Dice/MSD plus a per-organ summary.

    With a second prediction directory the summary gains per-organ
    Wilcoxon signed-rank p-values between the two methods' Dice scores.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    truths = _truth_subjects(Path(truth_dir))
    rows_a = _eval_dir(Path(pred_dir), truths)
    (out / "results.csv").write_text(_results_csv(rows_a))

    rows_b = None
    if pred_dir_b is not None:
        rows_b = _eval_dir(Path(pred_dir_b), truths)
        subj_a = {r.subject for r in rows_a}
        subj_b = {r.subject for r in rows_b}
        if subj_a != subj_b:
            raise ValueError(f"subject mismatch between prediction dirs: {sorted(subj_a ^ subj_b)}")
        (out / "results_b.csv").write_text(_results_csv(rows_b))

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = ["organ", "mean_dice", "std_dice", "mean_msd_mm", "std_msd_mm"]
    if rows_b is not None:
        header += ["mean_dice_b", "std_dice_b", "wilcoxon_p_dice"]
    w.writerow(header)
    for organ, group in _by_organ(rows_a).items():
        dice = np.array([r.dice for r in group])
        msd = np.array([r.msd for r in group if r.msd is not None])
        row = [organ, _fmt(dice.mean()), _fmt(dice.std())]
        row += [_fmt(msd.mean()), _fmt(msd.std())] if msd.size else ["NA", "NA"]
        if rows_b is not None:
            group_b = sorted((r for r in rows_b if r.organ == organ), key=lambda r: r.subject)
            group_a = sorted(group, key=lambda r: r.subject)
            dice_b = np.array([r.dice for r in group_b])
            _, p = wilcoxon_signed_rank([r.dice for r in group_a], [r.dice for r in group_b])
            row += [_fmt(dice_b.mean()), _fmt(dice_b.std()), _fmt(p)]
        w.writerow(row)
    (out / "summary.csv").write_text(buf.getvalue())
    return out


# ---------------------------------------------------------------------------
# ablation grid

ABLATION_TEMPERATURES = (0.1, 0.5, 2.0, 3.0)
ABLATION_BETA_PAIRS = ((0.5, 0.5), (1.0, 3.0), (1.0, 5.0), (2.0, 2.0), (5.0, 1.0))


def run_ablate(cfg: RunConfig, out_dir) -> Path:
    """Student training/evaluation over the temperature and beta grids.

    The shared cell (T=0.1, alpha=beta=0.5) is trained once and reported
    in both grid sections: 9 CSV rows, 8 distinct runs.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pcfg = cfg.phantom_config()
    _, _, test_idx = split_dataset(pcfg, cfg.split_ratios())
    truth_dir = Path(cfg.get_str("dataset_dir"))
    organs = list(range(1, cfg.num_classes))

    cells: list[tuple[str, float, float, float]] = []
    for t in ABLATION_TEMPERATURES:
        cells.append(("temperature", t, 0.5, 0.5))
    for a, b in ABLATION_BETA_PAIRS:
        cells.append(("beta", 0.1, a, b))

    results_cache: dict[tuple[float, float, float], dict[int, float]] = {}
    rows = []
    for kind, t, a, b in cells:
        key = (t, a, b)
        if key not in results_cache:
            cell_cfg = RunConfig(
                values={**cfg.values, "temperature": repr(t), "beta_alpha": repr(a), "beta_beta": repr(b)},
                organs=cfg.organs,
            ).validate()
            cell_dir = out / f"cell_T{t:g}_a{a:g}_b{b:g}"
            run_train(cell_cfg, "student_contrastmix", cell_dir)
            pred_dir = infer_split(cell_cfg, cell_dir, cell_cfg.get_str("teacher_run"), test_idx, cell_dir / "pred")
            eval_rows = _eval_dir(pred_dir, _truth_subjects(truth_dir))
            results_cache[key] = {
                o: float(np.mean([r.dice for r in eval_rows if r.organ == o])) for o in organs
            }
        per_organ = results_cache[key]
        mean_dice = float(np.mean(list(per_organ.values())))
        rows.append([kind, _fmt(t), _fmt(a), _fmt(b)] + [_fmt(per_organ[o]) for o in organs] + [_fmt(mean_dice)])

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["grid", "temperature", "beta_alpha", "beta_beta"] + [f"dice_organ{o}" for o in organs] + ["mean_dice"])
    for row in rows:
        w.writerow(row)
    (out / "ablation.csv").write_text(buf.getvalue())
    echo_config(cfg, out)
    return out
