"""Command-line surface: synthesize, preprocess, train, evaluate, probe, gradcheck.

Every command writes its artifacts plus a manifest.json recording the argv,
a hash of the effective config, and every file produced. Exit codes: 0 ok,
1 failed directional check, 2 bad config or input, 3 non-finite loss,
4 failed gradient check.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, csi, net, preprocess, report, train
from . import loss as losses
from . import tensor

EXIT_OK = 0
EXIT_FAILED_CHECK = 1
EXIT_CONFIG = 2
EXIT_NONFINITE = 3
EXIT_GRADCHECK = 4

PROTOCOL_ALIASES = {
    "id": "in_domain",
    "cl": "cross_location",
    "co": "cross_orientation",
    "ce": "cross_environment",
}


class ConfigError(Exception):
    """Invalid configuration or unreadable input; maps to exit code 2."""


def _n_workers() -> int:
    raw = os.environ.get("WICBR_THREADS", "")
    if raw:
        try:
            n = int(raw)
        except ValueError:
            raise ConfigError(f"WICBR_THREADS must be an integer, got {raw!r}") from None
        if n < 1:
            raise ConfigError("WICBR_THREADS must be >= 1")
        return n
    return min(4, os.cpu_count() or 1)


def _config_hash(config) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def _write_manifest(out_dir: Path, command: str, argv, config, inputs, outputs, seed) -> Path:
    path = out_dir / "manifest.json"
    rel = []
    for p in list(outputs) + [path]:
        p = Path(p)
        rel.append(str(p.relative_to(out_dir)) if p.is_relative_to(out_dir) else str(p))
    doc = {
        "command": command,
        "argv": list(argv),
        "config": config,
        "config_hash": _config_hash(config),
        "inputs": sorted(str(p) for p in inputs),
        "outputs": sorted(rel),
        "seed": seed,
        "version": __version__,
        "wall_time_s": round(time.monotonic() - _STARTED, 3),
        "created_utc": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


_STARTED = time.monotonic()


def _read_json(path, what: str) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read {what} {path}: {e}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{what} {path} must be a JSON object")
    return doc


# ---------------------------------------------------------------------------
# synth


_SYNTH_KEYS = {
    "classes",
    "domains",
    "reps",
    "duration_s",
    "fs",
    "n_subcarriers",
    "n_antennas",
    "f_center",
    "seed",
}


def _parse_roster(doc: dict):
    try:
        classes = doc.get("classes", "default")
        gestures = None if classes == "default" else [csi.gesture_from_dict(d) for d in classes]
        domains_raw = doc.get("domains", "default")
        domains = (
            None
            if domains_raw == "default"
            else [(csi.scene_from_dict(d["scene"]), csi.tag_from_dict(d["tag"])) for d in domains_raw]
        )
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"bad roster in synth config: {e}") from None
    return gestures, domains


def cmd_synth(ns, argv) -> int:
    doc = _read_json(ns.config, "synth config") if ns.config else {}
    unknown = set(doc) - _SYNTH_KEYS
    if unknown:
        raise ConfigError(f"unknown synth config keys: {sorted(unknown)}")
    if ns.seed is not None:
        doc["seed"] = ns.seed
    gestures, domains = _parse_roster(doc)
    kwargs = {k: doc[k] for k in _SYNTH_KEYS - {"classes", "domains"} if k in doc}
    try:
        plan = csi.plan_dataset(gestures=gestures, domains=domains, **kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None
    if not plan:
        raise ConfigError("synth config yields an empty dataset")

    out = Path(ns.out)
    samples_dir = out / "samples"
    samples_dir.mkdir(parents=True, exist_ok=True)
    try:
        with ThreadPoolExecutor(max_workers=_n_workers()) as pool:
            realized = list(pool.map(csi.realize_sample, plan))
    except ValueError as e:
        raise ConfigError(str(e)) from None

    outputs = []
    entries = []
    for s in realized:
        rec_path = samples_dir / f"{s.sample_id}.csir1"
        side_path = samples_dir / f"{s.sample_id}.json"
        csi.write_recording(rec_path, s.recording)
        csi.write_sidecar(side_path, s)
        outputs += [rec_path, side_path]
        entries.append(
            {
                "sample_id": s.sample_id,
                "class_id": s.class_id,
                "tag": csi.tag_to_dict(s.tag),
                "recording": f"samples/{s.sample_id}.csir1",
                "sidecar": f"samples/{s.sample_id}.json",
            }
        )
    index = {
        "fs": plan[0].fs,
        "f_center": plan[0].f_center,
        "duration_s": plan[0].duration_s,
        "seed": int(doc.get("seed", 42)),
        "n_samples": len(entries),
        "samples": entries,
    }
    index_path = out / "dataset.json"
    index_path.write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    outputs.append(index_path)
    _write_manifest(out, "synth", argv, doc, [ns.config] if ns.config else [], outputs, index["seed"])
    print(f"synthesized {len(realized)} recordings into {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# preprocess


def _load_dataset_index(data_dir: Path) -> dict:
    path = data_dir / "dataset.json"
    if not path.is_file():
        raise ConfigError(f"{path} not found; expected a synthesized dataset directory")
    doc = _read_json(path, "dataset index")
    if not isinstance(doc.get("samples"), list):
        raise ConfigError(f"{path} has no sample list")
    return doc


def _prep_entry(data_dir: Path, entry: dict, stft, ant_a: int, ant_b: int):
    rec = csi.read_recording(data_dir / entry["recording"])
    ratio = preprocess.csi_ratio(rec, ant_a=ant_a, ant_b=ant_b)
    phase = preprocess.phase_extract(ratio, fs=rec.fs)
    spec = preprocess.dfs_spectrogram(rec, stft)
    phase_img = preprocess.render_image(phase, preprocess.IMAGE_HW)
    dfs_img = preprocess.render_matrix(preprocess.log_power(spec), preprocess.IMAGE_HW)
    return phase_img, dfs_img, spec, rec.fs


def cmd_preprocess(ns, argv) -> int:
    data_dir = Path(ns.data)
    doc = _load_dataset_index(data_dir)
    try:
        stft = preprocess.StftConfig(antenna=ns.dfs_antenna)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)

    results = []
    skipped = 0
    with ThreadPoolExecutor(max_workers=_n_workers()) as pool:
        futures = [
            (e, pool.submit(_prep_entry, data_dir, e, stft, ns.ratio_a, ns.ratio_b)) for e in doc["samples"]
        ]
        for entry, fut in futures:
            try:
                results.append((entry, fut.result()))
            except (csi.RecordingFormatError, preprocess.DegenerateRecordingError, OSError, ValueError) as e:
                skipped += 1
                print(f"skip {entry.get('sample_id', '?')}: {e}", file=sys.stderr)
    if doc["samples"] and not results:
        print("error: every sample failed preprocessing", file=sys.stderr)
        return EXIT_FAILED_CHECK

    outputs = []
    entries = []
    for entry, (phase_img, dfs_img, spec, fs) in results:
        sid = entry["sample_id"]
        paths = {
            "phase": out / f"{sid}.phase.img224",
            "dfs": out / f"{sid}.dfs.img224",
            "phase_png": out / f"{sid}.phase.png",
            "dfs_png": out / f"{sid}.dfs.png",
            "dfs1": out / f"{sid}.dfs1",
        }
        preprocess.write_image(paths["phase"], phase_img)
        preprocess.write_image(paths["dfs"], dfs_img)
        preprocess.write_png(paths["phase_png"], phase_img)
        preprocess.write_png(paths["dfs_png"], dfs_img)
        preprocess.write_dfs(paths["dfs1"], spec.power, fs)
        outputs += list(paths.values())
        entries.append(
            {
                "sample_id": sid,
                "class_id": entry["class_id"],
                "tag": entry["tag"],
                "phase": paths["phase"].name,
                "dfs": paths["dfs"].name,
            }
        )
    index = {
        "out_hw": preprocess.IMAGE_HW,
        "stft": {"win": stft.win, "hop": stft.hop, "fft_len": stft.fft_len, "antenna": stft.antenna},
        "ratio_antennas": [ns.ratio_a, ns.ratio_b],
        "n_samples": len(entries),
        "samples": entries,
    }
    index_path = out / "index.json"
    index_path.write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    outputs.append(index_path)
    config = {"data": str(data_dir), "dfs_antenna": ns.dfs_antenna, "ratio_antennas": [ns.ratio_a, ns.ratio_b]}
    _write_manifest(out, "preprocess", argv, config, [data_dir / "dataset.json"], outputs, None)
    print(f"preprocessed {len(results)}/{len(doc['samples'])} samples into {out}" + (f" ({skipped} skipped)" if skipped else ""))
    return EXIT_OK


# ---------------------------------------------------------------------------
# train / eval


def _records_from_index(data_dir: Path) -> list[train.SampleRecord]:
    path = data_dir / "index.json"
    if not path.is_file():
        raise ConfigError(f"{path} not found; expected a preprocessed image directory")
    doc = _read_json(path, "image index")
    out_hw = int(doc.get("out_hw", preprocess.IMAGE_HW))
    records = []
    try:
        for e in doc["samples"]:
            records.append(
                train.SampleRecord(
                    sample_id=e["sample_id"],
                    class_id=int(e["class_id"]),
                    tag=csi.tag_from_dict(e["tag"]),
                    phase_img=preprocess.read_image(data_dir / e["phase"], out_hw),
                    dfs_img=preprocess.read_image(data_dir / e["dfs"], out_hw),
                )
            )
    except (KeyError, TypeError, ValueError, OSError) as e:
        raise ConfigError(f"bad image index entry: {e}") from None
    if not records:
        raise ConfigError(f"{path} lists no samples")
    return records


def _train_config(ns) -> train.TrainConfig:
    try:
        return train.TrainConfig(
            lr=ns.lr,
            batch=ns.batch,
            epochs=ns.epochs,
            seed=ns.seed,
            beta=ns.beta,
            tau=ns.tau,
            c_b=ns.cb,
            gn_groups=ns.gn_groups,
            gate_threshold=ns.gate_threshold,
            fuse_mode=ns.fuse_mode,
            no_dfs=ns.no_dfs,
            no_phase=ns.no_phase,
            no_contrastive=ns.no_contrastive,
            val_fraction=ns.val_fraction,
        )
    except ValueError as e:
        raise ConfigError(str(e)) from None


def _write_metrics_bundle(out: Path, prefix: str, metrics, log) -> list[Path]:
    paths = [
        out / f"{prefix}checkpoint.wckpt",
        out / f"{prefix}confusion.csv",
        out / f"{prefix}confusion.png",
        out / f"{prefix}loss_curves.png",
    ]
    report.write_confusion_csv(metrics.confusion, paths[1])
    report.save_confusion(metrics.confusion, paths[2])
    report.save_loss_curves(log, paths[3])
    return paths


def cmd_train(ns, argv) -> int:
    records = _records_from_index(Path(ns.data))
    cfg = _train_config(ns)
    try:
        protocol = train.SplitProtocol(PROTOCOL_ALIASES[ns.protocol], held_out=ns.held_out)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)

    try:
        if ns.folds:
            if protocol.kind != "in_domain":
                raise ConfigError("--folds applies to the in_domain protocol; cross protocols take --held-out")
            pairs = train.kfold(records, ns.folds, seed=ns.seed)
        else:
            pairs = [train.split(records, protocol, seed=ns.seed)]
    except ValueError as e:
        raise ConfigError(str(e)) from None

    multi = len(pairs) > 1
    outputs = []
    folds = []
    for fold, (train_set, test_set) in enumerate(pairs):
        prefix = f"fold{fold}_" if multi else ""
        log_path = out / f"{prefix}log.jsonl"
        try:
            model, log = train.fit(train_set, cfg, log_path=log_path)
        except train.NonFiniteLossError as e:
            print(f"error: {e} (batch dump: {e.dump_path})", file=sys.stderr)
            return EXIT_NONFINITE
        metrics = train.evaluate(model, test_set)
        bundle = _write_metrics_bundle(out, prefix, metrics, log)
        net.save_checkpoint(bundle[0], model)
        outputs += [log_path] + bundle
        folds.append(
            {
                "fold": fold,
                "train_size": len(train_set),
                "test_size": len(test_set),
                "accuracy": metrics.accuracy,
                "macro_f1": metrics.macro_f1,
                "confusion": metrics.confusion.tolist(),
                "loss_curve": [e["total"] for e in log],
            }
        )
        label = f"fold {fold} " if multi else ""
        print(f"{label}test accuracy {metrics.accuracy:.4f} macro_f1 {metrics.macro_f1:.4f}")

    config = asdict(cfg) | {"protocol": protocol.kind, "held_out": protocol.held_out, "folds": ns.folds}
    metrics_doc = {
        "protocol": protocol.kind,
        "held_out": protocol.held_out if protocol.kind != "in_domain" else None,
        "n_folds": len(pairs),
        "config": config,
        "accuracy": float(np.mean([f["accuracy"] for f in folds])),
        "macro_f1": float(np.mean([f["macro_f1"] for f in folds])),
        "per_fold": folds,
    }
    metrics_path = out / "metrics.json"
    metrics_path.write_text(json.dumps(metrics_doc, indent=2, sort_keys=True) + "\n")
    outputs.append(metrics_path)
    _write_manifest(out, "train", argv, config, [Path(ns.data) / "index.json"], outputs, ns.seed)
    if multi:
        print(f"mean accuracy {metrics_doc['accuracy']:.4f} macro_f1 {metrics_doc['macro_f1']:.4f}")
    return EXIT_OK


def cmd_eval(ns, argv) -> int:
    records = _records_from_index(Path(ns.data))
    try:
        model = net.load_checkpoint(ns.checkpoint)
    except (net.CheckpointFormatError, OSError) as e:
        raise ConfigError(str(e)) from None
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        metrics = train.evaluate(model, records)
    except ValueError as e:
        raise ConfigError(str(e)) from None

    metrics_path = out / "metrics.json"
    doc = metrics.to_dict() | {"n_samples": len(records), "checkpoint": str(ns.checkpoint)}
    metrics_path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    csv_path = out / "confusion.csv"
    png_path = out / "confusion.png"
    report.write_confusion_csv(metrics.confusion, csv_path)
    report.save_confusion(metrics.confusion, png_path)
    config = {"data": str(ns.data), "checkpoint": str(ns.checkpoint)}
    inputs = [Path(ns.data) / "index.json", ns.checkpoint]
    _write_manifest(out, "eval", argv, config, inputs, [metrics_path, csv_path, png_path], None)
    print(f"accuracy {metrics.accuracy:.4f} macro_f1 {metrics.macro_f1:.4f} on {len(records)} samples")
    return EXIT_OK


# ---------------------------------------------------------------------------
# probe


def cmd_probe(ns, argv) -> int:
    data_dir = Path(ns.data)
    doc = _load_dataset_index(data_dir)
    samples = []
    try:
        for e in doc["samples"]:
            samples.append(
                csi.RawSample(
                    sample_id=e["sample_id"],
                    class_id=int(e["class_id"]),
                    tag=csi.tag_from_dict(e["tag"]),
                    recording=csi.read_recording(data_dir / e["recording"]),
                    gesture=None,
                    scene=None,
                )
            )
    except (KeyError, TypeError, ValueError, OSError, csi.RecordingFormatError) as e:
        raise ConfigError(f"bad dataset entry: {e}") from None
    try:
        probe = train.domain_stability_probe(samples)
    except (ValueError, preprocess.DegenerateRecordingError) as e:
        raise ConfigError(str(e)) from None

    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    json_path = out / "probe.json"
    json_path.write_text(json.dumps(probe.to_dict(), indent=2, sort_keys=True) + "\n")
    csv_path = out / "probe.csv"
    report.write_probe_csv(probe, csv_path)
    png_path = out / "probe.png"
    report.save_probe_chart(probe, png_path)
    config = {"data": str(ns.data)}
    _write_manifest(out, "probe", argv, config, [data_dir / "dataset.json"], [json_path, csv_path, png_path], None)

    for row in probe.per_class:
        print(
            f"class {row['class_id']}: phase_corr {row['phase_corr']:+.4f} "
            f"dfs_corr {row['dfs_corr']:+.4f} ({row['n_pairs']} pairs)"
        )
    verdict = "true" if probe.dfs_more_stable else "false"
    print(f"dfs_corr > phase_corr: {verdict}")
    return EXIT_OK if probe.dfs_more_stable else EXIT_FAILED_CHECK


# ---------------------------------------------------------------------------
# gradcheck


def _primitive_checks(rng):
    """(name, tolerance, max relative error) for each differentiable kernel."""
    checks = []

    def conv_err(stride, method):
        x = rng.standard_normal((2, 3, 8, 8))
        k = rng.standard_normal((4, 3, 3, 3))
        y0 = tensor.conv2d(x, k, stride=stride, pad=1, method=method)
        w = rng.standard_normal(y0.shape)
        dx, dk = tensor.conv2d_backward(w, x, k, stride=stride, pad=1, method=method)
        value = lambda: float(np.sum(tensor.conv2d(x, k, stride=stride, pad=1, method=method) * w))
        return tensor.grad_check(value, [x, k], [dx, dk])

    checks.append(("conv2d_direct_s1", 1e-6, conv_err(1, "direct")))
    checks.append(("conv2d_direct_s2", 1e-6, conv_err(2, "direct")))
    checks.append(("conv2d_fft", 1e-6, conv_err(1, "fft")))

    x = rng.standard_normal((2, 4, 5, 5))
    b = rng.standard_normal(4)
    w = rng.standard_normal(x.shape)
    db = tensor.conv_bias_backward(w)
    value = lambda: float(np.sum(tensor.conv_bias(x, b) * w))
    checks.append(("conv_bias", 1e-6, tensor.grad_check(value, [b], [db])))

    x = rng.standard_normal((3, 4, 6, 6))
    gamma = rng.uniform(0.5, 1.5, 4)
    beta = rng.standard_normal(4)
    mean = np.zeros(4)
    var = np.ones(4)
    w = rng.standard_normal(x.shape)
    dx, dgamma, dbeta = tensor.batch_norm_backward(w, x, gamma, mean, var)
    value = lambda: float(np.sum(tensor.batch_norm(x, gamma, beta, mean, var) * w))
    checks.append(("batch_norm", 1e-6, tensor.grad_check(value, [x, gamma, beta], [dx, dgamma, dbeta])))

    x = rng.standard_normal((2, 8, 4, 4))
    gamma = rng.uniform(0.5, 1.5, 8)
    z = rng.standard_normal(8)
    w = rng.standard_normal(x.shape)
    dx, dgamma, dz = tensor.group_norm_backward(w, x, 4, gamma, z)
    value = lambda: float(np.sum(tensor.group_norm(x, 4, gamma, z) * w))
    checks.append(("group_norm", 1e-6, tensor.grad_check(value, [x, gamma, z], [dx, dgamma, dz])))

    x = rng.standard_normal((3, 2, 5, 5))
    w = rng.standard_normal(x.shape)
    y = tensor.sigmoid(x)
    checks.append(
        (
            "sigmoid",
            1e-6,
            tensor.grad_check(
                lambda: float(np.sum(tensor.sigmoid(x) * w)), [x], [tensor.sigmoid_backward(w, y)]
            ),
        )
    )

    x = rng.standard_normal((2, 3, 4, 4))
    x[np.abs(x) < 1e-2] += 0.1  # keep clear of the kink
    w = rng.standard_normal(x.shape)
    checks.append(
        (
            "relu",
            1e-6,
            tensor.grad_check(
                lambda: float(np.sum(tensor.relu(x) * w)), [x], [tensor.relu_backward(w, x)]
            ),
        )
    )

    x = rng.standard_normal((2, 5, 6, 6))
    w = rng.standard_normal((2, 5))
    checks.append(
        (
            "global_avg_pool",
            1e-6,
            tensor.grad_check(
                lambda: float(np.sum(tensor.global_avg_pool(x) * w)),
                [x],
                [tensor.global_avg_pool_backward(w, 6, 6)],
            ),
        )
    )

    x = rng.standard_normal((4, 6))
    wmat = rng.standard_normal((3, 6))
    b = rng.standard_normal(3)
    w = rng.standard_normal((4, 3))
    dx, dw, db = tensor.linear_backward(w, x, wmat)
    value = lambda: float(np.sum(tensor.linear(x, wmat, b) * w))
    checks.append(("linear", 1e-6, tensor.grad_check(value, [x, wmat, b], [dx, dw, db])))

    logits = rng.standard_normal((5, 4))
    targets = losses.one_hot(rng.integers(0, 4, 5), 4)
    _, dlogits = losses.cross_entropy_with_grad(logits, targets)
    checks.append(
        (
            "cross_entropy",
            1e-6,
            tensor.grad_check(lambda: losses.cross_entropy(logits, targets), [logits], [dlogits]),
        )
    )

    emb = rng.standard_normal((5, 6))
    prox = rng.standard_normal((4, 6))
    labels = rng.integers(0, 4, 5)
    _, demb, dprox = losses.proxy_contrastive_with_grad(emb, labels, prox, 0.1)
    checks.append(
        (
            "proxy_contrastive",
            1e-6,
            tensor.grad_check(
                lambda: losses.proxy_contrastive(emb, labels, prox, 0.1), [emb, prox], [demb, dprox]
            ),
        )
    )
    return checks


def full_net_gradcheck(seed: int = 0) -> float:
    """Max relative finite-difference error over every trainable coordinate of
    a toy-scale model under the combined loss, with the gate masks frozen."""
    cfg = net.toy_config()
    model = net.init_model(cfg, seed=seed)
    rng = np.random.default_rng(seed + 1)
    xp = rng.uniform(0.0, 1.0, (2, 3, cfg.input_hw, cfg.input_hw))
    xd = rng.uniform(0.0, 1.0, (2, 3, cfg.input_hw, cfg.input_hw))
    labels = np.arange(2) % cfg.n_classes
    targets = losses.one_hot(labels, cfg.n_classes)
    beta = tau = 0.1

    _, _, cache0 = net.forward(model, xp, xd)
    gate = cache0["gate"]

    def value():
        emb, logits, _ = net.forward(model, xp, xd, fixed_gate=gate)
        ce = losses.cross_entropy(logits, targets)
        con = losses.proxy_contrastive(emb, labels, model.params["head/w"], tau)
        return ce + beta * con

    emb, logits, cache = net.forward(model, xp, xd, fixed_gate=gate)
    _, dlogits = losses.cross_entropy_with_grad(logits, targets)
    _, demb, dprox = losses.proxy_contrastive_with_grad(emb, labels, model.params["head/w"], tau)
    grads = net.backward(model, cache, dlogits, beta * demb)
    grads["head/w"] = grads["head/w"] + beta * dprox

    names = model.trainable_names()
    return tensor.grad_check(value, [model.params[n] for n in names], [grads[n] for n in names])


def cmd_gradcheck(ns, argv) -> int:
    rng = np.random.default_rng(ns.seed)
    checks = _primitive_checks(rng)
    checks.append(("full_net", 1e-4, full_net_gradcheck(ns.seed)))

    rows = []
    all_pass = True
    for name, tol, err in checks:
        err = float(err)
        ok = bool(err < tol)
        all_pass &= ok
        rows.append({"name": name, "max_rel_error": err, "tolerance": tol, "pass": ok})
        print(f"{name:<18} max rel error {err:.3e}  (tol {tol:.0e})  {'PASS' if ok else 'FAIL'}")

    if ns.out:
        out = Path(ns.out)
        out.mkdir(parents=True, exist_ok=True)
        json_path = out / "gradcheck.json"
        json_path.write_text(json.dumps({"seed": ns.seed, "checks": rows, "pass": all_pass}, indent=2) + "\n")
        _write_manifest(out, "gradcheck", argv, {"seed": ns.seed}, [], [json_path], ns.seed)
    print(f"gradcheck: {'PASS' if all_pass else 'FAIL'}")
    return EXIT_OK if all_pass else EXIT_GRADCHECK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wicbr",
        description="WiFi-sensing gesture pipeline: synthetic CSI, Doppler preprocessing, dual-branch training.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="synthesize a CSI dataset from a JSON config")
    p.add_argument("--config", help="JSON config; omit for the default 6x3x15 dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="render phase/Doppler images for a dataset")
    p.add_argument("--data", required=True, help="dataset directory from synth")
    p.add_argument("--out", required=True, help="output image directory")
    p.add_argument("--ratio-a", type=int, default=0, help="ratio numerator antenna")
    p.add_argument("--ratio-b", type=int, default=1, help="ratio denominator antenna")
    p.add_argument("--dfs-antenna", type=int, default=0, help="antenna used for the spectrogram")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train and evaluate on a preprocessed dataset")
    p.add_argument("--data", required=True, help="image directory from preprocess")
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--beta", type=float, default=0.1, help="contrastive loss weight")
    p.add_argument("--tau", type=float, default=0.1, help="contrastive temperature")
    p.add_argument("--cb", type=int, default=32, help="backbone output channels per branch")
    p.add_argument("--gn-groups", type=int, default=16)
    p.add_argument("--gate-threshold", type=float, default=0.5)
    p.add_argument("--fuse-mode", choices=net.FUSE_MODES, default="cross")
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--protocol", choices=sorted(PROTOCOL_ALIASES), default="id")
    p.add_argument("--held-out", type=int, default=0, help="domain id held out by cross protocols")
    p.add_argument("--folds", type=int, default=0, help="k-fold cross-validation (in_domain only)")
    p.add_argument("--no-dfs", action="store_true", help="feed the Doppler branch a neutral image")
    p.add_argument("--no-phase", action="store_true", help="feed the phase branch a neutral image")
    p.add_argument("--no-contrastive", action="store_true", help="drop the contrastive term")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a preprocessed dataset")
    p.add_argument("--data", required=True, help="image directory from preprocess")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("probe", help="compare cross-domain stability of phase vs Doppler")
    p.add_argument("--data", required=True, help="dataset directory from synth")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("gradcheck", help="finite-difference check of every gradient path")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="optional directory for gradcheck.json")
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    global _STARTED
    _STARTED = time.monotonic()
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return ns.func(ns, argv)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
