"""Run every CLI command once on small inputs; shared by the CLI tests and the determinism check."""
from __future__ import annotations

import json
import subprocess
import sys
from pathlib import Path

SMALL_MODEL = {"image_size": 64, "patch_size": 8, "token_dim": 32, "heads": 2, "n_double": 1, "n_single": 2,
               "group_boundaries": [1, 2], "time_dim": 16, "cond_tokens": 16, "mlp_ratio": 2}


def uvflow(*args, cwd=None) -> subprocess.CompletedProcess:
    return subprocess.run([sys.executable, "-m", "uvflow.cli", *map(str, args)], cwd=cwd, capture_output=True,
                          text=True)


def run_pipeline(root: Path, deterministic: bool = True) -> dict[str, dict]:
    """Returns {command name: manifest} for every run; raises on a non-zero exit."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    (root / "small.json").write_text(json.dumps({"model": SMALL_MODEL}))
    pre = ["--deterministic"] if deterministic else []
    data = root / "data"
    steps = [
        ("gen", ["gen", "--n", 64, "--seed", 5, "--out", data], data / "run.manifest.json"),
        ("train_landmarks", ["train", "landmarks", "--data", data, "--out", root / "det.ckpt", "--epochs", 1],
         root / "det.ckpt.manifest.json"),
        ("train_model", ["train", "model", "--data", data, "--config", root / "small.json", "--out",
                         root / "model.ckpt", "--steps", 200, "--batch-size", 8, "--seed", 1, "--disentangle",
                         "--p", 0.3], root / "model.ckpt.manifest.json"),
    ]
    man = {}
    for name, args, mpath in steps:
        _check(uvflow(*pre, *args), name)
        man[name] = json.loads(mpath.read_text())
    model, det = root / "model.ckpt", root / "det.ckpt"
    for i in range(4):
        out = root / f"sample{i}.png"
        _check(uvflow(*pre, "sample", "--model", model, "--detector", det, "--input", data / f"{i:05d}/portrait.png",
                      "--out", out, "--seed", i, "--steps", 5, "--trace", root / f"trace{i}.csv"), f"sample{i}")
        man[f"sample{i}"] = json.loads((root / f"sample{i}.png.manifest.json").read_text())
    more = [
        ("transfer", ["transfer", "--model", model, "--detector", det, "--identity", data / "00000/portrait.png",
                      "--style", data / "00001/portrait.png", "--out", root / "transfer.png", "--steps", 5,
                      "--metrics", root / "transfer.csv"], root / "transfer.png"),
        ("edit", ["edit", "--model", model, "--source", data / "00000/portrait.png", "--reference",
                  data / "00002/portrait.png", "--regions", "mouth,brow", "--out", root / "edit.png", "--steps", 5,
                  "--metrics", root / "edit.csv"], root / "edit.png"),
        ("snr", ["analyze", "snr", "--data", data, "--out", root / "snr.csv"], root / "snr.csv"),
        ("ablation", ["analyze", "ablation", "--model", model, "--input", data / "00003/portrait.png", "--eps", 0.0,
                      "--order", "single_reverse", "--steps", 4, "--out", root / "ablation.csv", "--textures",
                      root / "ablation"], root / "ablation.csv"),
    ]
    for name, args, out in more:
        _check(uvflow(*pre, *args), name)
        man[name] = json.loads(out.with_name(out.name + ".manifest.json").read_text())
    preds = root / "preds"
    preds.mkdir(exist_ok=True)
    for i in range(4):
        (preds / f"{i:05d}.png").write_bytes((root / f"sample{i}.png").read_bytes())
    _check(uvflow(*pre, "eval", "--pred", preds, "--gt", data, "--detector", det, "--out", root / "eval.csv"), "eval")
    man["eval"] = json.loads((root / "eval.csv.manifest.json").read_text())
    return man


def _check(proc, name):
    if proc.returncode != 0:
        raise RuntimeError(f"{name} exited {proc.returncode}:\n{proc.stderr[-3000:]}")


def output_hashes(manifests: dict[str, dict], root: Path) -> dict[str, str]:
    """Output file hashes keyed by path relative to the run root."""
    out = {}
    for name, m in manifests.items():
        for path, h in m["outputs"].items():
            out[f"{name}:{Path(path).relative_to(root)}"] = h
    return out
