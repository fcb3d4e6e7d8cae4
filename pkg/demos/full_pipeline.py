# The whole pipeline through the command line entry points: generate a
# dataset, train, quantize the embeddings, evaluate, run a search, and
# pretty-print the report. Every stage writes plain files into out/, and
# rerunning the script reproduces them byte for byte.

import json
import pathlib
import shutil

from listalign.cli import main

out = pathlib.Path(__file__).resolve().parent / "out"
shutil.rmtree(out, ignore_errors=True)
out.mkdir(parents=True)

config = {
    "generator": {
        "n_listings": 128, "d_latent": 6, "d_photo": 10, "d_text": 8,
        "p_max": 5, "photo_noise": 0.05, "text_noise": 0.05, "seed": 9,
    },
    "split": {"holdout_fraction": 0.15, "seed": 1},
    "set_encoder": {"d_model": 16, "n_layers": 1, "n_heads": 2, "d_out": 24},
    "text_tower": {"hidden": [24]},
    "schedule": {
        "stages": [
            {"epochs": 12, "lr": 3e-3},
            {"epochs": 6, "lr": 6e-4, "unfreeze_text_layers": [0, 1]},
        ],
        "batch_size": 32, "warmup_steps": 10, "eval_ks": [1, 5],
    },
    "codec": {"kind": "pq", "m": 4, "k": 16, "iters": 15},
}
cfg = out / "config.json"
cfg.write_text(json.dumps(config, indent=2))

def run(*argv):
    print("$ listalign " + " ".join(argv))
    code = main(list(argv))
    assert code == 0, f"exit code {code}"
    print()

run("gen", "--config", str(cfg), "--out", str(out / "data"))
run("train", "--config", str(cfg), "--data", str(out / "data"), "--out", str(out / "run"))
run("quantize", "--config", str(cfg),
    "--emb", str(out / "data" / "train" / "text.emb"), "--out", str(out / "quant"))
run("eval", "--data", str(out / "data"), "--model", str(out / "run" / "checkpoint.blm"),
    "--out", str(out / "report.json"), "--ks", "1,5,10")

# Look up neighbors for one listing id from the trained index.
first_id = json.loads((out / "data" / "train" / "dataset.jsonl")
                      .read_text().splitlines()[0])["id"]
run("search", "--data", str(out / "data"), "--model", str(out / "run" / "checkpoint.blm"),
    "--query-id", str(first_id), "--top", "5")

run("report", str(out / "report.json"))

print("artifacts under", out)
for p in sorted(out.rglob("*")):
    if p.is_file():
        print(f"  {p.relative_to(out)}  ({p.stat().st_size} bytes)")
