# %% [markdown]
# # A small end-to-end run
# Synthesize a tiny corpus, train the three stages briefly and print the
# resulting metrics. The full-size configuration lives in the acceptance suite.

# %%
import json
import tempfile

from pdws.pipeline import run_pipeline

config = {
    "name": "demo",
    "seed": 0,
    "corpus": {"synth": {"n_keywords": 3, "n_filler_classes": 4, "n_confusers": 1, "control_speakers": 3,
                         "dysarthric_speakers": 2, "target_speakers": 1, "wake_reps": 6, "filler_reps": 6,
                         "enroll_reps": 2}},
    "model": {"tcn_layers": 3, "hidden_dim": 64, "kernel_size": 4},
    "stages": [
        {"stage": "sic", "epochs": 60, "lr": 3e-3, "batch_size": 8, "lr_schedule": "cosine"},
        {"stage": "sid", "epochs": 15, "lr": 1e-3, "batch_size": 8, "lr_schedule": "cosine"},
        {"stage": "enroll", "epochs": 15, "lr": 1e-3, "batch_size": 8, "lr_schedule": "cosine"},
    ],
    "filter": {"rank": 14},
    "eval": {"sweep_ranks": [10, 12, 14, 16, 18]},
}

out_dir = tempfile.mkdtemp(prefix="pdws-demo-")
report = run_pipeline(config, out_dir)

# %%
for stage in report["training"]:
    last = stage["log"][-1]
    print(stage["stage"], "loss", round(last["l_total"], 3), "acc", round(last["accuracy"], 3))

# %%
metrics = report["metrics"]
for key in ("no_filter", "threshold_filter", "asr_filter", "exhaustive"):
    print(f"{key:17s}", json.dumps({k: metrics[key][k] for k in ("score", "far", "frr")}))
