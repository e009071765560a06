"""Portable structured-text serialization of fitted models.

Line-oriented format with ``[section]`` headers and either ``key = value``
pairs or one array row per line.  Floats are written as full 64-bit
hexadecimal literals so a load reproduces the saved model bit for bit.
Latent-trajectory arrays are not serialized; the imputation tail (parameter
snapshots plus imputed covariate values) is kept whenever the model holds
imputations, since in-sample estimation needs it.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .errors import DataError
from .network import NetworkConfig, NetworkParameters, SparsityMask
from .prior import PriorHyperparameters
from .training import FittedModel, TailSnapshot, TrainingSchedule

__all__ = ["save_checkpoint", "load_checkpoint", "checkpoint_text"]

_HEADER = "# causal-stonet checkpoint v1"


def _hex(v: float) -> str:
    return float(v).hex()


def _hex_row(arr) -> str:
    return " ".join(float(v).hex() for v in np.asarray(arr, dtype=np.float64).ravel())


def _parse_row(line: str) -> np.ndarray:
    return np.array([float.fromhex(tok) for tok in line.split()], dtype=np.float64)


def _emit_matrix(lines, name, arr):
    lines.append(f"[{name}]")
    arr = np.atleast_2d(arr)
    for row in arr:
        lines.append(_hex_row(row))


def _emit_mask(lines, name, arr):
    lines.append(f"[{name}]")
    arr = np.atleast_2d(arr.astype(np.int8))
    for row in arr:
        lines.append(" ".join(str(int(v)) for v in row))


def _opt(v, fmt=str) -> str:
    return "none" if v is None else fmt(v)


def _tuple_hex(vals) -> str:
    return ",".join(_hex(v) for v in vals)


def checkpoint_text(fitted: FittedModel) -> str:
    """Render a fitted model as checkpoint text."""
    L: list[str] = [_HEADER]
    cfg = fitted.config
    L.append("[config]")
    L.append("layer_widths = " + ",".join(str(w) for w in cfg.layer_widths))
    L.append("noise_variances = " + _tuple_hex(cfg.noise_variances))
    L.append("treatment_layer = " + _opt(cfg.treatment_layer))
    L.append(f"treatment_position = {cfg.treatment_position}")
    L.append(f"activation = {cfg.activation}")
    L.append(f"output_kind = {cfg.output_kind}")
    L.append("treatment_temperature = " + _hex(cfg.treatment_temperature))

    hyp = fitted.hyper
    L.append("[prior]")
    L.append("lambda_n = " + _hex(hyp.lambda_n))
    L.append("sigma0_sq = " + _hex(hyp.sigma0_sq))
    L.append("sigma1_sq = " + _hex(hyp.sigma1_sq))

    s = fitted.schedule
    L.append("[schedule]")
    L.append(f"epochs_pretrain = {s.epochs_pretrain}")
    L.append(f"epochs_train = {s.epochs_train}")
    L.append(f"epochs_refine = {s.epochs_refine}")
    L.append(f"batch_size = {s.batch_size}")
    L.append("impute_lr = " + _tuple_hex(s.impute_lr))
    L.append("param_lr = " + _tuple_hex(s.param_lr))
    L.append("param_lr_refine = " + _opt(s.param_lr_refine, _tuple_hex))
    L.append("miss_lr = " + _opt(s.miss_lr, _hex))
    L.append(f"t_mc = {s.t_mc}")
    L.append("eta = " + _hex(s.eta))
    L.append("impute_decay = " + _hex(s.impute_decay))
    L.append("param_decay = " + _hex(s.param_decay))
    L.append(f"schedule_form = {s.schedule_form}")
    L.append("lemma1_offset = " + _hex(s.lemma1_offset))
    L.append(f"seed = {s.seed}")
    L.append(f"num_runs = {s.num_runs}")
    L.append("prune_epochs = " + _opt(s.prune_epochs, lambda t: ",".join(str(int(e)) for e in t)))
    L.append("grad_clip = " + _opt(s.grad_clip, _hex))
    L.append(f"tail_length = {s.tail_length}")
    L.append(f"store_latent_tail = {str(s.store_latent_tail).lower()}")
    L.append(f"include_bias_prior = {str(s.include_bias_prior).lower()}")

    L.append("[fit]")
    L.append("bic = " + _hex(fitted.bic))
    L.append(f"n_train = {fitted.n_train}")
    L.append(f"run_index = {fitted.run_index}")
    has_missing = fitted.missing_rows is not None and fitted.missing_rows.size > 0
    L.append(f"has_missing = {int(has_missing)}")
    n_tail = len(fitted.tail) if has_missing else 0
    L.append(f"tail_count = {n_tail}")

    L.append("[diagnostics.stage]")
    L.append(" ".join(fitted.diagnostics.get("stage", [])))
    _emit_matrix(L, "diagnostics.log_likelihood", fitted.diagnostics.get("log_likelihood", np.zeros(0)))
    _emit_matrix(L, "diagnostics.log_posterior", fitted.diagnostics.get("log_posterior", np.zeros(0)))

    for i, (w, b) in enumerate(zip(fitted.params.weights, fitted.params.biases), start=1):
        _emit_matrix(L, f"params.w{i}", w)
        _emit_matrix(L, f"params.b{i}", b)
    for i, (w, b) in enumerate(zip(fitted.mask.weights, fitted.mask.biases), start=1):
        _emit_mask(L, f"mask.w{i}", w)
        _emit_mask(L, f"mask.b{i}", b.reshape(1, -1))

    if has_missing:
        L.append("[missing.rows]")
        L.append(" ".join(str(int(r)) for r in fitted.missing_rows))
        L.append("[missing.cols]")
        L.append(" ".join(str(int(c)) for c in fitted.missing_cols))
        for k, snap in enumerate(fitted.tail[:n_tail]):
            L.append(f"[tail.{k}]")
            L.append(f"epoch = {snap.epoch}")
            for i, (w, b) in enumerate(zip(snap.params.weights, snap.params.biases), start=1):
                _emit_matrix(L, f"tail.{k}.params.w{i}", w)
                _emit_matrix(L, f"tail.{k}.params.b{i}", b)
            _emit_matrix(L, f"tail.{k}.x_missing", snap.x_missing.reshape(1, -1))
    return "\n".join(L) + "\n"


def save_checkpoint(fitted: FittedModel, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(checkpoint_text(fitted))


def _split_sections(text: str) -> dict[str, list[str]]:
    lines = text.splitlines()
    if not lines or lines[0] != _HEADER:
        raise DataError("not a recognized checkpoint file")
    sections: dict[str, list[str]] = {}
    current: Optional[str] = None
    for ln in lines[1:]:
        if not ln.strip():
            continue
        if ln.startswith("[") and ln.endswith("]"):
            current = ln[1:-1]
            sections[current] = []
        elif current is None:
            raise DataError(f"content before first section: {ln!r}")
        else:
            sections[current].append(ln)
    return sections


def _kv(section_lines) -> dict[str, str]:
    out = {}
    for ln in section_lines:
        key, sep, val = ln.partition(" = ")
        if not sep:
            raise DataError(f"malformed key-value line: {ln!r}")
        out[key] = val
    return out


def _matrix(sections, name) -> np.ndarray:
    if name not in sections:
        raise DataError(f"checkpoint missing section [{name}]")
    return np.array([_parse_row(ln) for ln in sections[name]], dtype=np.float64)


def _mask_matrix(sections, name) -> np.ndarray:
    rows = [[int(tok) for tok in ln.split()] for ln in sections[name]]
    return np.array(rows, dtype=bool)


def _parse_opt(val: str, parse):
    return None if val == "none" else parse(val)


def _parse_hex_tuple(val: str):
    return tuple(float.fromhex(tok) for tok in val.split(","))


def load_checkpoint(path) -> FittedModel:
    """Load a checkpoint written by :func:`save_checkpoint`, bit-exactly."""
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    sections = _split_sections(text)

    c = _kv(sections["config"])
    config = NetworkConfig(
        layer_widths=tuple(int(w) for w in c["layer_widths"].split(",")),
        noise_variances=_parse_hex_tuple(c["noise_variances"]),
        treatment_layer=_parse_opt(c["treatment_layer"], int),
        treatment_position=int(c["treatment_position"]),
        activation=c["activation"],
        output_kind=c["output_kind"],
        treatment_temperature=float.fromhex(c["treatment_temperature"]),
    )
    pr = _kv(sections["prior"])
    hyper = PriorHyperparameters(
        lambda_n=float.fromhex(pr["lambda_n"]),
        sigma0_sq=float.fromhex(pr["sigma0_sq"]),
        sigma1_sq=float.fromhex(pr["sigma1_sq"]),
    )
    sc = _kv(sections["schedule"])
    schedule = TrainingSchedule(
        epochs_pretrain=int(sc["epochs_pretrain"]),
        epochs_train=int(sc["epochs_train"]),
        epochs_refine=int(sc["epochs_refine"]),
        batch_size=int(sc["batch_size"]),
        impute_lr=_parse_hex_tuple(sc["impute_lr"]),
        param_lr=_parse_hex_tuple(sc["param_lr"]),
        param_lr_refine=_parse_opt(sc["param_lr_refine"], _parse_hex_tuple),
        miss_lr=_parse_opt(sc["miss_lr"], float.fromhex),
        t_mc=int(sc["t_mc"]),
        eta=float.fromhex(sc["eta"]),
        impute_decay=float.fromhex(sc["impute_decay"]),
        param_decay=float.fromhex(sc["param_decay"]),
        schedule_form=sc["schedule_form"],
        lemma1_offset=float.fromhex(sc["lemma1_offset"]),
        seed=int(sc["seed"]),
        num_runs=int(sc["num_runs"]),
        prune_epochs=_parse_opt(
            sc["prune_epochs"], lambda v: tuple(int(e) for e in v.split(",")) if v else ()
        ),
        grad_clip=_parse_opt(sc["grad_clip"], float.fromhex),
        tail_length=int(sc["tail_length"]),
        store_latent_tail=sc["store_latent_tail"] == "true",
        include_bias_prior=sc["include_bias_prior"] == "true",
    )

    fit = _kv(sections["fit"])
    n_layers = config.n_layers
    params = NetworkParameters(
        weights=[_matrix(sections, f"params.w{i}") for i in range(1, n_layers + 1)],
        biases=[_matrix(sections, f"params.b{i}")[0] for i in range(1, n_layers + 1)],
    )
    mask = SparsityMask(
        weights=[_mask_matrix(sections, f"mask.w{i}") for i in range(1, n_layers + 1)],
        biases=[_mask_matrix(sections, f"mask.b{i}")[0] for i in range(1, n_layers + 1)],
    )
    diagnostics = {
        "stage": sections["diagnostics.stage"][0].split()
        if sections.get("diagnostics.stage") and sections["diagnostics.stage"][0].strip()
        else [],
        "log_likelihood": _matrix(sections, "diagnostics.log_likelihood").ravel(),
        "log_posterior": _matrix(sections, "diagnostics.log_posterior").ravel(),
    }

    has_missing = fit["has_missing"] == "1"
    tail: list[TailSnapshot] = []
    missing_rows = missing_cols = None
    if has_missing:
        missing_rows = np.array([int(t) for t in sections["missing.rows"][0].split()])
        missing_cols = np.array([int(t) for t in sections["missing.cols"][0].split()])
        for k in range(int(fit["tail_count"])):
            meta = _kv(sections[f"tail.{k}"])
            tp = NetworkParameters(
                weights=[_matrix(sections, f"tail.{k}.params.w{i}") for i in range(1, n_layers + 1)],
                biases=[_matrix(sections, f"tail.{k}.params.b{i}")[0] for i in range(1, n_layers + 1)],
            )
            xm = _matrix(sections, f"tail.{k}.x_missing")[0]
            tail.append(TailSnapshot(epoch=int(meta["epoch"]), params=tp, x_missing=xm))

    fitted = FittedModel(
        config=config,
        hyper=hyper,
        schedule=schedule,
        params=params,
        mask=mask,
        diagnostics=diagnostics,
        tail=tail,
        bic=float.fromhex(fit["bic"]),
        n_train=int(fit["n_train"]),
        run_index=int(fit["run_index"]),
        missing_rows=missing_rows,
        missing_cols=missing_cols,
        final_x=None,
    )
    return fitted
