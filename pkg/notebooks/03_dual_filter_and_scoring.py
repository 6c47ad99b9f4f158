# %% [markdown]
# # Dual filter and scoring
# A hand-built batch shows how the rank threshold and the transcript-length
# check change FAR and FRR.

# %%
import numpy as np

from pdws.dual_filter import Decision, WakeWordList, run_dual_filter, threshold_filter
from pdws.evaluation import exhaustive_threshold_search, rank_sweep, score_decisions

wake = WakeWordList(("hey", "stop"))
rng = np.random.default_rng(0)
decisions, refs, asr = [], {}, {}
for i in range(40):
    is_wake = i < 12
    label = i % 2 if is_wake else -1
    score = float(np.clip(rng.normal(0.7 if is_wake else 0.4, 0.15), 0, 1))
    decisions.append(Decision(f"u{i}", score, i % 2, i % 2))
    refs[f"u{i}"] = label
    asr[f"u{i}"] = wake[label] if is_wake else "xyzzy"[: 2 + i % 4]

print("no filter  ", score_decisions(decisions, refs).formatted())
print("rank 15    ", score_decisions(threshold_filter(decisions, 15), refs).formatted())
print("dual filter", score_decisions(run_dual_filter(decisions, asr, {}, wake, 15), refs).formatted())

# %%
for rank, report in rank_sweep(decisions, refs, range(10, 17)):
    print(rank, report.formatted())

# %%
theta, best = exhaustive_threshold_search(decisions, refs)
print("best threshold", round(theta, 4), best.formatted())
