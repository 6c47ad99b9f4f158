# %% [markdown]
# # CTC loss and prefix beam search
# Compare the lattice loss with path enumeration on a small case, then decode.

# %%
import itertools
import math

import numpy as np

from pdws.decoding import collapse, greedy_decode, prefix_beam_search
from pdws.losses import ctc_loss, log_softmax

rng = np.random.default_rng(1)
lp = log_softmax(rng.normal(0, 2, size=(5, 3)))
tokens = [1, 2]

total = sum(
    math.exp(sum(lp[t, s] for t, s in enumerate(path)))
    for path in itertools.product(range(3), repeat=5)
    if collapse(path) == tuple(tokens)
)
loss, grad = ctc_loss(lp, tokens)
print(round(loss, 10), round(-math.log(total), 10))

# %% [markdown]
# Each gradient row sums to zero (softmax minus occupancy).

# %%
print(np.round(grad.sum(axis=1), 12))

# %%
for width in (1, 2, 8):
    best = prefix_beam_search(lp, width)[0]
    print(width, best.tokens, round(best.logprob, 4))
print("greedy", greedy_decode(lp).tokens)
